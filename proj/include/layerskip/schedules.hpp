#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "layerskip/model.hpp"

namespace layerskip {

enum class TimeCurriculum { kConstant, kExponential };

// kExponential is the per-layer curve D(l); kUniform applies p_max to every
// layer and exists for the constant-vs-exponential dropout comparison.
enum class LayerCurve { kExponential, kUniform };

struct DropoutSchedule {
  double p_max = 0.0;
  TimeCurriculum time_curriculum = TimeCurriculum::kConstant;
  LayerCurve layer_curve = LayerCurve::kExponential;
  int total_steps = 1;
  int n_layers = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class ExitCurriculum { kRotational, kGradual, kAll };

struct EarlyExitLossSchedule {
  double e_scale = 0.0;
  ExitCurriculum curriculum = ExitCurriculum::kAll;
  int rotation = 1;  // R
  int total_steps = 1;
  int n_layers = 1;
  // Keep the last layer's loss on every step in addition to the rotating exit.
  bool always_include_last = false;

  void validate() const;
};

/// D(l) = 2^(l/(L-1)) - 1; D(0) = 0 when L == 1.
double layer_scale(int layer, int n_layers);

/// S(t): 1 for kConstant, 2^(t/(T-1)) - 1 for kExponential (1 when T == 1).
double time_scale(int step, int total_steps, TimeCurriculum curriculum);

/// p_{l,t} = S(t) D(l) p_max
double dropout_rate(int layer, int step, const DropoutSchedule& schedule);

double mean_dropout_rate(int step, const DropoutSchedule& schedule);

/// Uniform [0, 1) draw that depends only on its four keys.
double counter_uniform(std::uint64_t seed, std::uint64_t step, std::uint64_t layer, std::uint64_t sample);

/// Independent Bernoulli(p_{l,t}) draw per (layer, sample).
DropMask sample_drop_mask(const DropoutSchedule& schedule, int step, int batch_size);

/// e(l): e_scale * l(l+1)/2 below the last layer; (L-1) + e_scale * (L-2)(L-1)/2 at l = L-1.
double exit_scale(int layer, int n_layers, double e_scale);

bool curriculum_enabled(int step, int layer, const EarlyExitLossSchedule& schedule);

std::vector<int> enabled_layers(int step, const EarlyExitLossSchedule& schedule);

/// Normalized per-layer weights for step t; zero for disabled layers. If the
/// enabled scales sum to zero, the last layer gets weight 1.
std::vector<double> normalized_exit_scales(int step, const EarlyExitLossSchedule& schedule);

double normalized_exit_scale(int step, int layer, const EarlyExitLossSchedule& schedule);

std::string to_string(TimeCurriculum c);
std::string to_string(ExitCurriculum c);
std::string to_string(LayerCurve c);
TimeCurriculum parse_time_curriculum(const std::string& s);
ExitCurriculum parse_exit_curriculum(const std::string& s);
LayerCurve parse_layer_curve(const std::string& s);

}  // namespace layerskip
