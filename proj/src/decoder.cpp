#include "layerskip/decoder.hpp"

#include <chrono>

namespace layerskip {

void DecodeConfig::validate(const ModelConfig& model) const {
  if (exit_layer < 1 || exit_layer > model.n_layers) {
    throw ConfigError("exit_layer must lie in [1, " + std::to_string(model.n_layers) + "], got " +
                      std::to_string(exit_layer));
  }
  if (num_speculations < 1) throw ConfigError("num_speculations must be >= 1");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (eot_token >= model.vocab) throw ConfigError("eot_token outside the vocabulary");
}

DecodeReport& DecodeReport::operator+=(const DecodeReport& o) {
  tokens_emitted += o.tokens_emitted;
  rounds += o.rounds;
  drafts_proposed += o.drafts_proposed;
  drafts_accepted += o.drafts_accepted;
  layer_token_units += o.layer_token_units;
  prefill_units += o.prefill_units;
  draft_units += o.draft_units;
  verify_units += o.verify_units;
  bonus_units += o.bonus_units;
  layer_pass_units += o.layer_pass_units;
  wall_ms += o.wall_ms;
  acceptance_rate = drafts_proposed > 0 ? static_cast<double>(drafts_accepted) / drafts_proposed : 0.0;
  wall_ms_per_token = tokens_emitted > 0 ? wall_ms / tokens_emitted : 0.0;
  return *this;
}

int accepted_prefix(std::span<const int> draft, std::span<const int> verified) {
  const std::size_t n = std::min(draft.size(), verified.size());
  std::size_t k = 0;
  while (k < n && draft[k] == verified[k]) ++k;
  return static_cast<int>(k);
}

namespace {

int greedy_token(const ModelParams& params, std::span<const float> x) {
  const auto logits = unembed(params, x);
  return argmax<float>(logits);
}

}  // namespace

DecodeSession::DecodeSession(const ModelParams& params, std::span<const int> prompt, int prefill_layers, int eot_token)
    : params_(params), cache_(params.config), tokens_(prompt.begin(), prompt.end()), prompt_len_(prompt.size()),
      eot_(eot_token) {
  if (prompt.empty()) throw ShapeError("prompt must not be empty");
  if (static_cast<int>(prompt.size()) > params.config.max_context) {
    throw ContextOverflow("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_context " +
                          std::to_string(params.config.max_context));
  }
  validate_tokens(params.config, prompt);
  if (prompt.size() > 1) {
    forward_step(params_, prompt.first(prompt.size() - 1), cache_, prefill_layers);
    cache_.clear_exit_states();
    counters_.prefill_units = static_cast<std::int64_t>(prompt.size() - 1) * prefill_layers;
  }
  if (prefill_layers == params.config.n_layers) cache_.commit(cache_.valid_len(0));
}

std::span<const int> DecodeSession::emitted() const {
  return std::span<const int>(tokens_).subspan(prompt_len_);
}

void DecodeSession::emit(int token) {
  tokens_.push_back(token);
  ++counters_.tokens_emitted;
  if (token == eot_) finished_ = true;
}

int DecodeSession::greedy_step(int exit_layer) {
  if (finished_) throw std::logic_error("greedy_step after end of text");
  const int token_in = pending();
  const Tensor x = forward_step(params_, std::span<const int>(&token_in, 1), cache_, exit_layer);
  cache_.clear_exit_states();
  if (exit_layer == params_.config.n_layers) cache_.commit(cache_.valid_len(0));
  counters_.layer_token_units += exit_layer;
  counters_.layer_pass_units += exit_layer;
  const int next = greedy_token(params_, x.row(0));
  emit(next);
  return next;
}

DraftResult DecodeSession::draft(int exit_layer, int d) {
  if (d < 1) throw std::invalid_argument("draft: d must be >= 1");
  if (exit_layer < 1 || exit_layer > params_.config.n_layers) throw std::out_of_range("draft: bad exit layer");
  if (finished_) throw std::logic_error("draft after end of text");
  DraftResult out;
  out.begin_position = cache_.valid_len(0);
  int input = pending();
  for (int i = 0; i < d; ++i) {
    const Tensor x = forward_step(params_, std::span<const int>(&input, 1), cache_, exit_layer);
    input = greedy_token(params_, x.row(0));
    out.tokens.push_back(input);
    if (input == eot_) break;
  }
  out.exit_layer = exit_layer;
  const auto n = static_cast<std::int64_t>(out.tokens.size());
  counters_.draft_units += n * exit_layer;
  counters_.layer_token_units += n * exit_layer;
  counters_.layer_pass_units += n * exit_layer;
  return out;
}

VerifyResult DecodeSession::verify(const DraftResult& draft, bool reuse_kvq, int max_emit) {
  const int L = params_.config.n_layers;
  const int E = draft.exit_layer;
  const int n = static_cast<int>(draft.tokens.size());
  const int begin = draft.begin_position;
  if (n == 0) throw std::invalid_argument("verify: empty draft");
  if (begin != static_cast<int>(tokens_.size()) - 1) throw CacheError("verify: draft does not start at the pending token");
  for (int i = 0; i < n; ++i) {
    if (!cache_.has_exit_state(E, begin + i)) {
      throw CacheError("verify: missing exit state at position " + std::to_string(begin + i));
    }
  }

  Tensor full;
  if (reuse_kvq) {
    full = forward_remainder(params_, cache_, E, begin, n);
    counters_.verify_units += static_cast<std::int64_t>(n) * (L - E);
    counters_.layer_token_units += static_cast<std::int64_t>(n) * (L - E);
    counters_.layer_pass_units += L - E;
  } else {
    std::vector<int> inputs;
    inputs.push_back(pending());
    inputs.insert(inputs.end(), draft.tokens.begin(), draft.tokens.end() - 1);
    full = embed_rows(params_, inputs);
    forward_layers(params_, full, begin, cache_, 0, L);
    counters_.verify_units += static_cast<std::int64_t>(n) * L;
    counters_.layer_token_units += static_cast<std::int64_t>(n) * L;
    counters_.layer_pass_units += L;
  }
  cache_.clear_exit_states();

  VerifyResult out;
  for (int i = 0; i < n; ++i) out.full_predictions.push_back(greedy_token(params_, full.row(static_cast<std::size_t>(i))));
  out.n_accepted = accepted_prefix(draft.tokens, out.full_predictions);
  ++counters_.rounds;
  counters_.drafts_proposed += n;
  counters_.drafts_accepted += out.n_accepted;

  for (int i = 0; i < out.n_accepted && static_cast<int>(out.emitted.size()) < max_emit && !finished_; ++i) {
    out.emitted.push_back(draft.tokens[static_cast<std::size_t>(i)]);
    emit(out.emitted.back());
  }
  if (out.n_accepted < n) {
    // Drop K/V of the rejected inputs; the correction token becomes pending.
    cache_.truncate(begin + out.n_accepted + 1);
    if (static_cast<int>(out.emitted.size()) < max_emit && !finished_) {
      out.emitted.push_back(out.full_predictions[static_cast<std::size_t>(out.n_accepted)]);
      emit(out.emitted.back());
    }
  } else if (static_cast<int>(out.emitted.size()) < max_emit && !finished_) {
    // Every draft matched: the last draft still needs a full pass to yield
    // the next verified token.
    const int last = pending();
    const Tensor x = forward_step(params_, std::span<const int>(&last, 1), cache_, L);
    cache_.clear_exit_states();
    counters_.bonus_units += L;
    counters_.layer_token_units += L;
    counters_.layer_pass_units += L;
    out.bonus = true;
    out.emitted.push_back(greedy_token(params_, x.row(0)));
    emit(out.emitted.back());
  }
  const int committed = static_cast<int>(tokens_.size()) - 1;
  cache_.truncate(committed);
  cache_.commit(committed);
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

void check_budget(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config) {
  config.validate(params.config);
  if (prompt.empty()) throw ShapeError("prompt must not be empty");
  const long need = static_cast<long>(prompt.size()) + config.max_new_tokens - 1;
  if (need > params.config.max_context) {
    throw ContextOverflow("prompt (" + std::to_string(prompt.size()) + ") + max_new_tokens (" +
                          std::to_string(config.max_new_tokens) + ") needs " + std::to_string(need) +
                          " positions; max_context is " + std::to_string(params.config.max_context));
  }
}

Generation finish(const DecodeSession& session, Clock::time_point start) {
  Generation g;
  g.tokens.assign(session.emitted().begin(), session.emitted().end());
  g.report = session.counters();
  g.report.tokens_emitted = static_cast<int>(g.tokens.size());
  g.report.acceptance_rate =
      g.report.drafts_proposed > 0 ? static_cast<double>(g.report.drafts_accepted) / g.report.drafts_proposed : 0.0;
  g.report.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  g.report.wall_ms_per_token = g.report.tokens_emitted > 0 ? g.report.wall_ms / g.report.tokens_emitted : 0.0;
  return g;
}

Generation generate_greedy(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config,
                           int layers) {
  check_budget(params, prompt, config);
  const auto start = Clock::now();
  DecodeSession session(params, prompt, layers, config.eot_token);
  while (static_cast<int>(session.emitted().size()) < config.max_new_tokens && !session.finished()) {
    session.greedy_step(layers);
  }
  return finish(session, start);
}

}  // namespace

Generation generate_autoregressive(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config) {
  return generate_greedy(params, prompt, config, params.config.n_layers);
}

Generation generate_early_exit(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config) {
  return generate_greedy(params, prompt, config, config.exit_layer);
}

Generation generate_self_speculative(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config) {
  check_budget(params, prompt, config);
  if (config.exit_layer >= params.config.n_layers) {
    throw ConfigError("self-speculative decoding needs exit_layer < n_layers");
  }
  const auto start = Clock::now();
  DecodeSession session(params, prompt, params.config.n_layers, config.eot_token);
  while (!session.finished()) {
    const int remaining = config.max_new_tokens - static_cast<int>(session.emitted().size());
    if (remaining <= 0) break;
    const DraftResult d = session.draft(config.exit_layer, std::min(config.num_speculations, remaining));
    session.verify(d, config.reuse_kvq, remaining);
  }
  return finish(session, start);
}

Generation generate(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config) {
  switch (config.mode) {
    case DecodeMode::kAutoregressive:
      return generate_autoregressive(params, prompt, config);
    case DecodeMode::kEarlyExit:
      return generate_early_exit(params, prompt, config);
    case DecodeMode::kSelfSpeculative:
      return generate_self_speculative(params, prompt, config);
  }
  throw std::logic_error("unknown decode mode");
}

double speedup(double base_ms_per_token, double candidate_ms_per_token) {
  if (!(candidate_ms_per_token > 0.0)) throw std::domain_error("speedup: candidate time per token must be positive");
  return base_ms_per_token / candidate_ms_per_token;
}

double speedup(const DecodeReport& base, const DecodeReport& candidate) {
  return speedup(base.wall_ms_per_token, candidate.wall_ms_per_token);
}

KvqAblation kvq_ablation(const ModelParams& params, const std::vector<std::vector<int>>& prompts,
                         const DecodeConfig& config) {
  KvqAblation out;
  DecodeConfig with = config;
  with.mode = DecodeMode::kSelfSpeculative;
  with.reuse_kvq = true;
  DecodeConfig without = with;
  without.reuse_kvq = false;
  for (const auto& p : prompts) {
    out.with_reuse.push_back(generate_self_speculative(params, p, with));
    out.without_reuse.push_back(generate_self_speculative(params, p, without));
    out.with_total += out.with_reuse.back().report;
    out.without_total += out.without_reuse.back().report;
    out.outputs_identical = out.outputs_identical && out.with_reuse.back().tokens == out.without_reuse.back().tokens;
  }
  return out;
}

std::string to_string(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::kAutoregressive:
      return "autoregressive";
    case DecodeMode::kEarlyExit:
      return "early_exit";
    case DecodeMode::kSelfSpeculative:
      return "self_speculative";
  }
  return "autoregressive";
}

DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "autoregressive" || s == "ar") return DecodeMode::kAutoregressive;
  if (s == "early_exit" || s == "ee") return DecodeMode::kEarlyExit;
  if (s == "self_speculative" || s == "ss") return DecodeMode::kSelfSpeculative;
  throw ConfigError("unknown mode '" + s + "' (expected autoregressive|early_exit|self_speculative)");
}

}  // namespace layerskip
