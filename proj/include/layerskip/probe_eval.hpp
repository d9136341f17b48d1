#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "layerskip/model.hpp"

namespace layerskip {

/// What every exit of the model predicts for one greedily generated token.
struct LayerwisePrediction {
  int token_index = 0;
  std::vector<int> exit_predictions;  // [l - 1] = argmax g(x_l), l = 1..L
  int final_token = 0;
  // Smallest l such that every exit from l to L agrees with the final token.
  int earliest_stable_layer = 0;
  // Smallest l whose exit already equals the final token.
  int earliest_correct_layer = 0;
};

std::vector<LayerwisePrediction> layerwise_predictions(const ModelParams& params, std::span<const int> prompt,
                                                       int n_tokens);

struct ProbeSummary {
  int n_tokens = 0;
  int n_layers = 0;
  double mean_earliest_stable_layer = 0.0;
  double mean_earliest_correct_layer = 0.0;
};

ProbeSummary summarize(const std::vector<LayerwisePrediction>& predictions, int n_layers);

/// exp(mean CE of g(x_layer)) over next-token targets in contiguous windows of
/// context_len + 1 tokens. `layer` indexes hidden states (0 = embeddings,
/// L = final). max_windows = 0 evaluates every window.
double perplexity_at_layer(const ModelParams& params, std::span<const int> corpus, int layer, int context_len,
                           int max_windows = 0);

/// Perplexities for layers 1..L in one pass; result[l - 1] is layer l.
std::vector<double> perplexity_per_layer(const ModelParams& params, std::span<const int> corpus, int context_len,
                                         int max_windows = 0);

std::vector<std::string> whitespace_tokens(const std::string& text);

/// Bigram-overlap F1 with clipped multiset counts. 0 when either side has
/// fewer than two items.
template <typename Item>
double rouge2_f1(std::span<const Item> reference, std::span<const Item> hypothesis) {
  if (reference.size() < 2 || hypothesis.size() < 2) return 0.0;
  std::map<std::pair<Item, Item>, int> ref_counts;
  for (std::size_t i = 0; i + 1 < reference.size(); ++i) ++ref_counts[{reference[i], reference[i + 1]}];
  std::map<std::pair<Item, Item>, int> hyp_counts;
  for (std::size_t i = 0; i + 1 < hypothesis.size(); ++i) ++hyp_counts[{hypothesis[i], hypothesis[i + 1]}];
  long overlap = 0;
  for (const auto& [bigram, n] : hyp_counts) {
    auto it = ref_counts.find(bigram);
    if (it != ref_counts.end()) overlap += std::min(n, it->second);
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(hypothesis.size() - 1);
  const double recall = static_cast<double>(overlap) / static_cast<double>(reference.size() - 1);
  return 2.0 * precision * recall / (precision + recall);
}

double rouge2_f1(const std::string& reference, const std::string& hypothesis);

/// 1 iff the sequences are identical after trimming trailing `end_token`s
/// (pass -1 to disable trimming).
int exact_match(std::span<const int> reference, std::span<const int> hypothesis, int end_token = -1);

}  // namespace layerskip
