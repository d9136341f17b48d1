#include "layerskip/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"
#include "layerskip/early_exit_loss.hpp"
#include "layerskip/probe_eval.hpp"

namespace layerskip {

void TrainConfig::resolve(const ModelConfig& model) {
  dropout.total_steps = steps;
  dropout.n_layers = model.n_layers;
  dropout.seed = seed;
  early_exit.total_steps = steps;
  early_exit.n_layers = model.n_layers;
  validate(model);
}

void TrainConfig::validate(const ModelConfig& model) const {
  model.validate();
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (context_len < 1 || context_len > model.max_context) {
    throw ConfigError("context_len must lie in [1, max_context=" + std::to_string(model.max_context) + "]");
  }
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (eval_windows < 1) throw ConfigError("eval_windows must be >= 1");
  dropout.validate();
  early_exit.validate();
  if (dropout.n_layers != model.n_layers || early_exit.n_layers != model.n_layers) {
    throw ConfigError("schedules were built for a different layer count");
  }
  if (dropout.total_steps != steps || early_exit.total_steps != steps) {
    throw ConfigError("schedules were built for a different step count");
  }
}

double learning_rate_at(int step, const TrainConfig& c) {
  double lr = c.learning_rate;
  if (c.dropout.p_max > 0.0) lr *= c.dropout_lr_multiplier;
  if (c.lr_schedule == LrSchedule::kConstant) return lr;
  const int warmup = std::max(1, static_cast<int>(std::lround(c.warmup_fraction * c.steps)));
  if (step < warmup) return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = std::max(1, c.steps - warmup - 1);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double min_ratio = 0.1;
  return lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

void TrainLog::write_csv(std::ostream& out) const {
  out << "step,loss,lr,enabled_layers,mean_dropout\n";
  for (const auto& r : steps) {
    out << r.step << ',' << r.loss << ',' << r.lr << ',';
    for (std::size_t i = 0; i < r.enabled_layers.size(); ++i) {
      if (i) out << ';';
      out << r.enabled_layers[i];
    }
    out << ',' << r.mean_dropout << '\n';
  }
}

void TrainLog::write_eval_jsonl(std::ostream& out) const {
  for (const auto& e : evals) {
    out << nlohmann::json{{"step", e.step}, {"layer", e.layer}, {"perplexity", e.perplexity}}.dump() << '\n';
  }
}

AdamW::AdamW(const ModelParams& params) {
  params.for_each_parameter([&](const std::string&, const Parameter& p) {
    m_.emplace_back(p.value.size(), 0.0f);
    v_.emplace_back(p.value.size(), 0.0f);
  });
}

void AdamW::step(ModelParams& params, double lr, const TrainConfig& c) {
  ++t_;
  const double bc1 = 1.0 - std::pow(c.beta1, t_);
  const double bc2 = 1.0 - std::pow(c.beta2, t_);
  const auto b1 = static_cast<float>(c.beta1);
  const auto b2 = static_cast<float>(c.beta2);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(c.adam_eps);
  const auto decay = static_cast<float>(lr * c.weight_decay);
  std::size_t i = 0;
  params.for_each_parameter([&](const std::string&, Parameter& p) {
    auto& m = m_[i];
    auto& v = v_[i];
    ++i;
    // Norm gains are not decayed.
    const bool decayed = p.value.rank() == 2;
    float* w = p.value.data();
    const float* g = p.grad.data();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      m[k] = b1 * m[k] + (1.0f - b1) * g[k];
      v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
      if (decayed) w[k] -= decay * w[k];
      w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
  });
}

BatchSampler::BatchSampler(std::span<const int> corpus, int context_len, int batch_size, std::uint64_t seed)
    : corpus_(corpus.begin(), corpus.end()),
      ctx_(static_cast<std::size_t>(context_len)),
      batch_size_(static_cast<std::size_t>(batch_size)),
      n_windows_(corpus.size() > ctx_ ? (corpus.size() - 1) / ctx_ : 0),
      seed_(seed) {
  if (n_windows_ == 0) {
    throw ShapeError("corpus of " + std::to_string(corpus.size()) + " tokens is too small for context_len " +
                     std::to_string(context_len) + " (needs at least context_len + 1)");
  }
}

std::vector<std::size_t> BatchSampler::order_for_epoch(std::size_t epoch) const {
  std::vector<std::size_t> order(n_windows_);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed_ * 0x9e3779b97f4a7c15ULL + epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<std::vector<int>> BatchSampler::batch(int step) const {
  std::vector<std::vector<int>> out;
  out.reserve(batch_size_);
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const std::size_t global = static_cast<std::size_t>(step) * batch_size_ + i;
    const std::size_t epoch = global / n_windows_;
    if (epoch != cached_epoch) {
      order = order_for_epoch(epoch);
      cached_epoch = epoch;
    }
    const std::size_t w = order[global % n_windows_];
    out.emplace_back(corpus_.begin() + static_cast<std::ptrdiff_t>(w * ctx_),
                     corpus_.begin() + static_cast<std::ptrdiff_t>(w * ctx_ + ctx_ + 1));
  }
  return out;
}

namespace {

void clip_gradients(ModelParams& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  params.for_each_parameter([&](const std::string&, const Parameter& p) {
    for (float g : p.grad.span()) sq += static_cast<double>(g) * g;
  });
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const auto s = static_cast<float>(max_norm / norm);
  params.for_each_parameter([&](const std::string&, Parameter& p) {
    for (float& g : p.grad.span()) g *= s;
  });
}

}  // namespace

StepRecord train_step(ModelParams& params, AdamW& optimizer, const std::vector<std::vector<int>>& batch, int step,
                      const TrainConfig& config) {
  const int L = params.config.n_layers;
  const std::size_t ctx = static_cast<std::size_t>(config.context_len);
  if (batch.size() != static_cast<std::size_t>(config.batch_size)) throw ShapeError("train_step: wrong batch size");

  StepRecord rec;
  rec.step = step;
  const DropMask mask = sample_drop_mask(config.dropout, step, config.batch_size);
  rec.dropped_layer_samples = mask.count_dropped();
  for (int l = 0; l < L; ++l) rec.dropout_rates.push_back(dropout_rate(l, step, config.dropout));
  rec.mean_dropout = mean_dropout_rate(step, config.dropout);
  const std::vector<double> weights = normalized_exit_scales(step, config.early_exit);
  for (int l = 0; l < L; ++l) {
    if (weights[static_cast<std::size_t>(l)] != 0.0) {
      rec.enabled_layers.push_back(l);
      rec.layer_losses.push_back(0.0);
    }
  }

  params.zero_grad();
  const double scale = 1.0 / static_cast<double>(batch.size());
  std::vector<Tensor> hidden_grads;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].size() != ctx + 1) throw ShapeError("train_step: each row needs context_len + 1 tokens");
    std::span<const int> row(batch[b]);
    const auto fwd = forward_sequence<float>(params, row.first(ctx), mask.sample(static_cast<int>(b)));
    const LossBreakdown loss = total_loss_backward<float>(params, fwd.hidden, row.subspan(1, ctx), weights, scale, hidden_grads);
    backward_sequence<float>(params, fwd, hidden_grads);
    rec.loss += loss.total * scale;
    for (std::size_t i = 0; i < loss.terms.size(); ++i) rec.layer_losses[i] += loss.terms[i].loss * scale;
  }
  rec.lr = learning_rate_at(step, config);
  if (!std::isfinite(rec.loss)) {
    throw TrainingDiverged("non-finite loss at step " + std::to_string(step), rec);
  }
  clip_gradients(params, config.grad_clip);
  optimizer.step(params, rec.lr, config);
  return rec;
}

TrainResult train_run(std::span<const int> corpus, const ModelConfig& model_config, TrainConfig train_config,
                      const TrainRunOptions& options) {
  train_config.resolve(model_config);
  const std::size_t need = static_cast<std::size_t>(train_config.context_len) + 1;
  std::span<const int> train_tokens = corpus;
  std::span<const int> heldout = options.heldout;
  if (heldout.empty()) {
    const std::size_t split = corpus.size() - corpus.size() / 10;
    train_tokens = corpus.first(split);
    heldout = corpus.subspan(split);
  }
  if (train_tokens.size() < need || heldout.size() < need) {
    throw ShapeError("corpus too small: need at least " + std::to_string(need) +
                     " tokens in both the training and held-out splits");
  }

  TrainResult result{options.initial_params ? *options.initial_params : init_params(model_config, train_config.seed), {}};
  AdamW optimizer(result.params);
  BatchSampler sampler(train_tokens, train_config.context_len, train_config.batch_size, train_config.seed);

  auto write_outputs = [&](int step) {
    if (!options.output_dir) return;
    std::filesystem::create_directories(*options.output_dir);
    CheckpointMetadata meta = options.metadata;
    meta["step"] = std::to_string(step);
    save_checkpoint(result.params, meta, *options.output_dir / "checkpoint.lskp");
    std::ofstream csv(*options.output_dir / "train_log.csv");
    result.log.write_csv(csv);
    std::ofstream jsonl(*options.output_dir / "eval.jsonl");
    result.log.write_eval_jsonl(jsonl);
  };

  for (int t = 0; t < train_config.steps; ++t) {
    StepRecord rec;
    try {
      rec = train_step(result.params, optimizer, sampler.batch(t), t, train_config);
    } catch (const TrainingDiverged& e) {
      result.log.steps.push_back(e.record());
      write_outputs(t);
      throw;
    }
    result.log.steps.push_back(std::move(rec));
    const bool last = t + 1 == train_config.steps;
    const bool periodic = train_config.eval_every > 0 && (t + 1) % train_config.eval_every == 0;
    if (last || periodic) {
      const auto ppl = perplexity_per_layer(result.params, heldout, train_config.context_len, train_config.eval_windows);
      for (std::size_t l = 0; l < ppl.size(); ++l) {
        result.log.evals.push_back({t + 1, static_cast<int>(l) + 1, ppl[l]});
      }
      write_outputs(t + 1);
      if (options.progress) {
        *options.progress << "step " << (t + 1) << " loss " << result.log.steps.back().loss << " ppl(L) " << ppl.back()
                          << '\n';
      }
    }
  }
  return result;
}

void DropoutShapeAblation::write_csv(std::ostream& out) const {
  out << "step,const_loss,exp_loss\n";
  const std::size_t n = std::min(uniform.steps.size(), exponential.steps.size());
  for (std::size_t i = 0; i < n; ++i) {
    out << uniform.steps[i].step << ',' << uniform.steps[i].loss << ',' << exponential.steps[i].loss << '\n';
  }
}

DropoutShapeAblation dropout_shape_ablation(std::span<const int> corpus, const ModelConfig& model_config,
                                            const TrainConfig& train_config, const TrainRunOptions& options) {
  TrainConfig exp_cfg = train_config;
  exp_cfg.dropout.layer_curve = LayerCurve::kExponential;
  exp_cfg.resolve(model_config);

  DropoutShapeAblation out;
  double mean_curve = 0.0;
  for (int l = 0; l < model_config.n_layers; ++l) mean_curve += layer_scale(l, model_config.n_layers);
  mean_curve /= model_config.n_layers;
  out.mean_rate = mean_curve * exp_cfg.dropout.p_max;

  TrainConfig const_cfg = exp_cfg;
  const_cfg.dropout.layer_curve = LayerCurve::kUniform;
  const_cfg.dropout.p_max = out.mean_rate;

  TrainRunOptions run_opts = options;
  run_opts.output_dir.reset();
  out.uniform = train_run(corpus, model_config, const_cfg, run_opts).log;
  out.exponential = train_run(corpus, model_config, exp_cfg, run_opts).log;
  if (options.output_dir) {
    std::filesystem::create_directories(*options.output_dir);
    std::ofstream csv(*options.output_dir / "dropout_shape_ablation.csv");
    out.write_csv(csv);
  }
  return out;
}

std::string to_string(LrSchedule s) { return s == LrSchedule::kConstant ? "constant" : "cosine"; }

LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "cosine") return LrSchedule::kCosine;
  throw ConfigError("unknown lr_schedule '" + s + "' (expected constant|cosine)");
}

}  // namespace layerskip
