#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "layerskip/kvq_cache.hpp"
#include "layerskip/model.hpp"

namespace layerskip {

enum class DecodeMode { kAutoregressive, kEarlyExit, kSelfSpeculative };

struct DecodeConfig {
  int exit_layer = 1;
  int num_speculations = 4;
  int max_new_tokens = 512;
  DecodeMode mode = DecodeMode::kAutoregressive;
  // Verification resumes from the cached exit states; false recomputes the
  // first E layers during verification (ablation baseline).
  bool reuse_kvq = true;
  int eot_token = -1;  // -1: never stop early

  void validate(const ModelConfig& model) const;
};

/// Cost and quality accounting for one generation. Units count one layer
/// applied to one token position. Prefill of all but the last prompt token is
/// reported separately from the generation cost.
struct DecodeReport {
  int tokens_emitted = 0;
  int rounds = 0;
  int drafts_proposed = 0;
  int drafts_accepted = 0;
  double acceptance_rate = 0.0;
  std::int64_t layer_token_units = 0;
  std::int64_t prefill_units = 0;
  std::int64_t draft_units = 0;
  std::int64_t verify_units = 0;
  std::int64_t bonus_units = 0;
  // Latency proxy: a forward over several rows of one layer counts once.
  std::int64_t layer_pass_units = 0;
  double wall_ms = 0.0;
  double wall_ms_per_token = 0.0;

  /// Sums counters and recomputes the ratios.
  DecodeReport& operator+=(const DecodeReport& other);
};

struct Generation {
  std::vector<int> tokens;  // emitted tokens (an emitted end-of-text ends the list)
  DecodeReport report;
};

struct DraftResult {
  int exit_layer = 0;
  int begin_position = 0;  // cache position of the first drafted input
  std::vector<int> tokens;
};

struct VerifyResult {
  int n_accepted = 0;
  std::vector<int> emitted;
  std::vector<int> full_predictions;  // full-model argmax per draft position
  bool bonus = false;
};

/// Length of the longest prefix on which `draft` and `verified` agree.
int accepted_prefix(std::span<const int> draft, std::span<const int> verified);

/// Greedy decoding state over one KVQ cache: the committed tokens, plus the
/// last committed token whose K/V have not been computed yet ("pending").
class DecodeSession {
 public:
  /// Prefills all but the last prompt token through `prefill_layers` layers.
  DecodeSession(const ModelParams& params, std::span<const int> prompt, int prefill_layers, int eot_token = -1);

  /// Runs the pending token through `exit_layer` layers and emits the argmax
  /// of the shared head.
  int greedy_step(int exit_layer);

  /// Up to `d` greedy steps through the first `exit_layer` layers, starting
  /// from the pending token; stops after an end-of-text draft.
  DraftResult draft(int exit_layer, int d);

  /// Verifies `draft` with the remaining layers (or all layers when
  /// `reuse_kvq` is false), emits the accepted prefix plus one full-model
  /// token, and rolls the cache back to the committed tokens. At most
  /// `max_emit` tokens are emitted.
  VerifyResult verify(const DraftResult& draft, bool reuse_kvq = true, int max_emit = 1 << 30);

  const KVQCache& cache() const { return cache_; }
  const std::vector<int>& tokens() const { return tokens_; }
  std::span<const int> emitted() const;
  int pending() const { return tokens_.back(); }
  bool finished() const { return finished_; }
  const DecodeReport& counters() const { return counters_; }

 private:
  void emit(int token);

  const ModelParams& params_;
  KVQCache cache_;
  std::vector<int> tokens_;
  std::size_t prompt_len_;
  int eot_;
  bool finished_ = false;
  DecodeReport counters_;
};

Generation generate_autoregressive(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config);
Generation generate_early_exit(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config);
Generation generate_self_speculative(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config);
Generation generate(const ModelParams& params, std::span<const int> prompt, const DecodeConfig& config);

/// base ms/token divided by candidate ms/token.
double speedup(const DecodeReport& base, const DecodeReport& candidate);
double speedup(double base_ms_per_token, double candidate_ms_per_token);

struct KvqAblation {
  std::vector<Generation> with_reuse;
  std::vector<Generation> without_reuse;
  DecodeReport with_total;
  DecodeReport without_total;
  bool outputs_identical = true;
};

KvqAblation kvq_ablation(const ModelParams& params, const std::vector<std::vector<int>>& prompts,
                         const DecodeConfig& config);

std::string to_string(DecodeMode mode);
DecodeMode parse_decode_mode(const std::string& s);

}  // namespace layerskip
