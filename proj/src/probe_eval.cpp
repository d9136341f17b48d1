#include "layerskip/probe_eval.hpp"

#include <cmath>
#include <sstream>

#include "layerskip/early_exit_loss.hpp"
#include "layerskip/kvq_cache.hpp"

namespace layerskip {

std::vector<LayerwisePrediction> layerwise_predictions(const ModelParams& params, std::span<const int> prompt,
                                                       int n_tokens) {
  const int L = params.config.n_layers;
  if (prompt.empty()) throw ShapeError("probe: empty prompt");
  if (static_cast<int>(prompt.size()) + n_tokens - 1 > params.config.max_context) {
    throw ContextOverflow("probe: prompt plus generated tokens exceed max_context");
  }
  KVQCache cache(params.config);
  std::vector<LayerwisePrediction> out;
  std::vector<int> input(prompt.begin(), prompt.end());
  for (int i = 0; i < n_tokens; ++i) {
    LayerwisePrediction pred;
    pred.token_index = i;
    pred.exit_predictions.resize(static_cast<std::size_t>(L));
    const HiddenObserver observe = [&](int layer, const Tensor& x) {
      if (layer == 0) return;
      const auto logits = unembed(params, x.row(x.rows() - 1));
      pred.exit_predictions[static_cast<std::size_t>(layer - 1)] = argmax<float>(logits);
    };
    forward_step(params, input, cache, L, observe);
    pred.final_token = pred.exit_predictions.back();
    pred.earliest_stable_layer = L;
    while (pred.earliest_stable_layer > 1 &&
           pred.exit_predictions[static_cast<std::size_t>(pred.earliest_stable_layer - 2)] == pred.final_token) {
      --pred.earliest_stable_layer;
    }
    pred.earliest_correct_layer = L;
    for (int l = 1; l <= L; ++l) {
      if (pred.exit_predictions[static_cast<std::size_t>(l - 1)] == pred.final_token) {
        pred.earliest_correct_layer = l;
        break;
      }
    }
    input.assign(1, pred.final_token);
    out.push_back(std::move(pred));
  }
  return out;
}

ProbeSummary summarize(const std::vector<LayerwisePrediction>& predictions, int n_layers) {
  ProbeSummary s;
  s.n_tokens = static_cast<int>(predictions.size());
  s.n_layers = n_layers;
  if (predictions.empty()) return s;
  for (const auto& p : predictions) {
    s.mean_earliest_stable_layer += p.earliest_stable_layer;
    s.mean_earliest_correct_layer += p.earliest_correct_layer;
  }
  s.mean_earliest_stable_layer /= static_cast<double>(predictions.size());
  s.mean_earliest_correct_layer /= static_cast<double>(predictions.size());
  return s;
}

namespace {

std::vector<double> mean_ce_per_layer(const ModelParams& params, std::span<const int> corpus, int context_len,
                                      int max_windows, int only_layer) {
  if (context_len < 1) throw ShapeError("perplexity: context_len must be >= 1");
  const std::size_t ctx = static_cast<std::size_t>(context_len);
  if (corpus.size() < ctx + 1) throw ShapeError("perplexity: corpus shorter than one window");
  std::size_t windows = (corpus.size() - 1) / ctx;
  if (max_windows > 0) windows = std::min(windows, static_cast<std::size_t>(max_windows));
  const int L = params.config.n_layers;
  std::vector<double> sums(static_cast<std::size_t>(L) + 1, 0.0);
  const std::vector<bool> keep_all(static_cast<std::size_t>(L), false);
  for (std::size_t w = 0; w < windows; ++w) {
    auto inputs = corpus.subspan(w * ctx, ctx);
    auto targets = corpus.subspan(w * ctx + 1, ctx);
    const auto fwd = forward_sequence<float>(params, inputs, keep_all);
    for (int l = 0; l <= L; ++l) {
      if (only_layer < 0 ? l == 0 : l != only_layer) continue;
      sums[static_cast<std::size_t>(l)] += exit_cross_entropy<float>(params, fwd.hidden.x[static_cast<std::size_t>(l)], targets);
    }
  }
  for (double& s : sums) s /= static_cast<double>(windows);
  return sums;
}

}  // namespace

double perplexity_at_layer(const ModelParams& params, std::span<const int> corpus, int layer, int context_len,
                           int max_windows) {
  if (layer < 0 || layer > params.config.n_layers) throw std::out_of_range("perplexity: layer out of range");
  return std::exp(mean_ce_per_layer(params, corpus, context_len, max_windows, layer)[static_cast<std::size_t>(layer)]);
}

std::vector<double> perplexity_per_layer(const ModelParams& params, std::span<const int> corpus, int context_len,
                                         int max_windows) {
  auto ce = mean_ce_per_layer(params, corpus, context_len, max_windows, -1);
  std::vector<double> out;
  for (std::size_t l = 1; l < ce.size(); ++l) out.push_back(std::exp(ce[l]));
  return out;
}

std::vector<std::string> whitespace_tokens(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

double rouge2_f1(const std::string& reference, const std::string& hypothesis) {
  const auto r = whitespace_tokens(reference);
  const auto h = whitespace_tokens(hypothesis);
  return rouge2_f1<std::string>(r, h);
}

int exact_match(std::span<const int> reference, std::span<const int> hypothesis, int end_token) {
  auto trim = [end_token](std::span<const int> s) {
    std::size_t n = s.size();
    while (end_token >= 0 && n > 0 && s[n - 1] == end_token) --n;
    return s.first(n);
  };
  const auto a = trim(reference);
  const auto b = trim(hypothesis);
  return std::equal(a.begin(), a.end(), b.begin(), b.end()) ? 1 : 0;
}

}  // namespace layerskip
