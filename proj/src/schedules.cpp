#include "layerskip/schedules.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace layerskip {

void DropoutSchedule::validate() const {
  if (!(p_max >= 0.0 && p_max <= 1.0)) throw ConfigError("p_max must lie in [0, 1], got " + std::to_string(p_max));
  if (total_steps < 1) throw ConfigError("dropout schedule needs total_steps >= 1");
  if (n_layers < 1) throw ConfigError("dropout schedule needs n_layers >= 1");
}

void EarlyExitLossSchedule::validate() const {
  if (!(e_scale >= 0.0 && e_scale <= 1.0)) throw ConfigError("e_scale must lie in [0, 1], got " + std::to_string(e_scale));
  if (n_layers < 1) throw ConfigError("early-exit schedule needs n_layers >= 1");
  if (rotation < 1 || rotation > n_layers) {
    throw ConfigError("rotation R must lie in [1, L], got " + std::to_string(rotation));
  }
  if (total_steps < 1) throw ConfigError("early-exit schedule needs total_steps >= 1");
}

double layer_scale(int layer, int n_layers) {
  if (layer < 0 || layer >= n_layers) throw std::out_of_range("layer_scale: layer out of range");
  if (n_layers == 1) return 0.0;
  return std::exp(static_cast<double>(layer) * std::numbers::ln2 / static_cast<double>(n_layers - 1)) - 1.0;
}

double time_scale(int step, int total_steps, TimeCurriculum curriculum) {
  if (step < 0 || step >= total_steps) {
    throw std::out_of_range("time_scale: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
  }
  if (curriculum == TimeCurriculum::kConstant) return 1.0;
  if (total_steps == 1) return 1.0;
  return std::exp(static_cast<double>(step) * std::numbers::ln2 / static_cast<double>(total_steps - 1)) - 1.0;
}

double dropout_rate(int layer, int step, const DropoutSchedule& s) {
  const double per_layer = s.layer_curve == LayerCurve::kUniform ? 1.0 : layer_scale(layer, s.n_layers);
  return time_scale(step, s.total_steps, s.time_curriculum) * per_layer * s.p_max;
}

double mean_dropout_rate(int step, const DropoutSchedule& s) {
  double sum = 0.0;
  for (int l = 0; l < s.n_layers; ++l) sum += dropout_rate(l, step, s);
  return sum / static_cast<double>(s.n_layers);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

double counter_uniform(std::uint64_t seed, std::uint64_t step, std::uint64_t layer, std::uint64_t sample) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ step);
  h = splitmix64(h ^ layer);
  h = splitmix64(h ^ sample);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

DropMask sample_drop_mask(const DropoutSchedule& s, int step, int batch_size) {
  DropMask mask(s.n_layers, batch_size);
  for (int l = 0; l < s.n_layers; ++l) {
    const double p = dropout_rate(l, step, s);
    if (p <= 0.0) continue;
    for (int b = 0; b < batch_size; ++b) {
      const double u = counter_uniform(s.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(l),
                                       static_cast<std::uint64_t>(b));
      mask.set(l, b, u < p);
    }
  }
  return mask;
}

double exit_scale(int layer, int n_layers, double e_scale) {
  if (layer < 0 || layer >= n_layers) throw std::out_of_range("exit_scale: layer out of range");
  const double l = layer;
  if (layer < n_layers - 1) return e_scale * l * (l + 1.0) / 2.0;
  const double last = n_layers - 1;
  return last + e_scale * (last - 1.0) * last / 2.0;
}

bool curriculum_enabled(int step, int layer, const EarlyExitLossSchedule& s) {
  const int L = s.n_layers;
  if (layer < 0 || layer >= L) throw std::out_of_range("curriculum: layer out of range");
  if (s.always_include_last && layer == L - 1) return true;
  switch (s.curriculum) {
    case ExitCurriculum::kAll:
      return true;
    case ExitCurriculum::kRotational:
      return layer % s.rotation == step % s.rotation;
    case ExitCurriculum::kGradual: {
      const long long opened = static_cast<long long>(step) * 2LL * L / s.total_steps;
      return layer >= L - 1 - opened;
    }
  }
  return false;
}

std::vector<int> enabled_layers(int step, const EarlyExitLossSchedule& s) {
  std::vector<int> out;
  for (int l = 0; l < s.n_layers; ++l) {
    if (curriculum_enabled(step, l, s)) out.push_back(l);
  }
  return out;
}

std::vector<double> normalized_exit_scales(int step, const EarlyExitLossSchedule& s) {
  std::vector<double> w(static_cast<std::size_t>(s.n_layers), 0.0);
  double total = 0.0;
  int deepest = -1;
  for (int l = 0; l < s.n_layers; ++l) {
    if (!curriculum_enabled(step, l, s)) continue;
    w[static_cast<std::size_t>(l)] = exit_scale(l, s.n_layers, s.e_scale);
    total += w[static_cast<std::size_t>(l)];
    deepest = l;
  }
  if (deepest < 0) throw std::logic_error("early-exit curriculum enabled no layer");
  if (total <= 0.0) {
    // Nothing to normalize (e_scale = 0, or only layer 0 enabled): plain
    // last-layer language-model loss.
    std::fill(w.begin(), w.end(), 0.0);
    w.back() = 1.0;
    return w;
  }
  for (double& v : w) v /= total;
  return w;
}

double normalized_exit_scale(int step, int layer, const EarlyExitLossSchedule& s) {
  return normalized_exit_scales(step, s).at(static_cast<std::size_t>(layer));
}

std::string to_string(TimeCurriculum c) { return c == TimeCurriculum::kConstant ? "constant" : "exponential"; }

std::string to_string(LayerCurve c) { return c == LayerCurve::kExponential ? "exponential" : "uniform"; }

std::string to_string(ExitCurriculum c) {
  switch (c) {
    case ExitCurriculum::kRotational:
      return "rotational";
    case ExitCurriculum::kGradual:
      return "gradual";
    case ExitCurriculum::kAll:
      return "all";
  }
  return "all";
}

TimeCurriculum parse_time_curriculum(const std::string& s) {
  if (s == "constant") return TimeCurriculum::kConstant;
  if (s == "exponential" || s == "exp") return TimeCurriculum::kExponential;
  throw ConfigError("unknown time curriculum '" + s + "' (expected constant|exponential)");
}

LayerCurve parse_layer_curve(const std::string& s) {
  if (s == "exponential" || s == "exp") return LayerCurve::kExponential;
  if (s == "uniform" || s == "const") return LayerCurve::kUniform;
  throw ConfigError("unknown layer curve '" + s + "' (expected exponential|uniform)");
}

ExitCurriculum parse_exit_curriculum(const std::string& s) {
  if (s == "rotational" || s == "rot") return ExitCurriculum::kRotational;
  if (s == "gradual" || s == "grad") return ExitCurriculum::kGradual;
  if (s == "all") return ExitCurriculum::kAll;
  throw ConfigError("unknown early-exit curriculum '" + s + "' (expected rotational|gradual|all)");
}

}  // namespace layerskip
