#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "layerskip/checkpoint.hpp"
#include "layerskip/model.hpp"
#include "layerskip/schedules.hpp"

namespace layerskip {

enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
  int steps = 1000;
  int batch_size = 4;
  int context_len = 64;
  double learning_rate = 1e-3;
  LrSchedule lr_schedule = LrSchedule::kCosine;
  double warmup_fraction = 0.02;
  // Applied to the learning rate whenever layer dropout is active (p_max > 0).
  double dropout_lr_multiplier = 2.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 0;
  DropoutSchedule dropout;
  EarlyExitLossSchedule early_exit;
  int eval_every = 0;  // 0: evaluate only at the end
  int eval_windows = 16;

  /// Copies steps/L/seed into the schedules and validates everything.
  void resolve(const ModelConfig& model);
  void validate(const ModelConfig& model) const;
};

double learning_rate_at(int step, const TrainConfig& config);

struct StepRecord {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<int> enabled_layers;
  std::vector<double> layer_losses;  // parallel to enabled_layers
  std::vector<double> dropout_rates;  // per layer
  double mean_dropout = 0.0;
  int dropped_layer_samples = 0;
};

struct EvalRecord {
  int step = 0;
  int layer = 0;  // exit after `layer` layers (1..L)
  double perplexity = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  /// step,loss,lr,enabled_layers,mean_dropout (enabled_layers ';'-joined)
  void write_csv(std::ostream& out) const;
  /// One {"step","layer","perplexity"} object per line.
  void write_eval_jsonl(std::ostream& out) const;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, StepRecord record) : NumericError(what), record_(std::move(record)) {}
  const StepRecord& record() const { return record_; }

 private:
  StepRecord record_;
};

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ModelParams& params);

  void step(ModelParams& params, double lr, const TrainConfig& config);
  int steps_taken() const { return t_; }

 private:
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  int t_ = 0;
};

/// Sequential batches of contiguous, non-overlapping windows
/// (context_len inputs + 1 shifted target), reshuffled each epoch.
class BatchSampler {
 public:
  BatchSampler(std::span<const int> corpus, int context_len, int batch_size, std::uint64_t seed);

  /// Batch for `step`; each row has context_len + 1 tokens.
  std::vector<std::vector<int>> batch(int step) const;
  std::size_t window_count() const { return n_windows_; }

 private:
  std::vector<std::size_t> order_for_epoch(std::size_t epoch) const;

  std::vector<int> corpus_;
  std::size_t ctx_;
  std::size_t batch_size_;
  std::size_t n_windows_;
  std::uint64_t seed_;
};

/// One optimizer step with a sampled layer-dropout mask and the early-exit
/// loss. `batch` rows hold context_len + 1 tokens.
StepRecord train_step(ModelParams& params, AdamW& optimizer, const std::vector<std::vector<int>>& batch, int step,
                      const TrainConfig& config);

struct TrainRunOptions {
  std::vector<int> heldout;  // empty: hold out the last 10% of the corpus
  std::optional<std::filesystem::path> output_dir;
  CheckpointMetadata metadata;
  std::optional<ModelParams> initial_params;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

TrainResult train_run(std::span<const int> corpus, const ModelConfig& model_config, TrainConfig train_config,
                      const TrainRunOptions& options = {});

/// Two runs with equal mean dropout: every layer at the mean rate ("Const")
/// versus the exponential per-layer curve ("Exp").
struct DropoutShapeAblation {
  double mean_rate = 0.0;
  TrainLog uniform;
  TrainLog exponential;

  /// step,const_loss,exp_loss
  void write_csv(std::ostream& out) const;
};

DropoutShapeAblation dropout_shape_ablation(std::span<const int> corpus, const ModelConfig& model_config,
                                            const TrainConfig& train_config, const TrainRunOptions& options = {});

std::string to_string(LrSchedule s);
LrSchedule parse_lr_schedule(const std::string& s);

}  // namespace layerskip
