#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "layerskip/errors.hpp"

namespace layerskip {

template <typename T>
struct GradCheckTarget {
  std::string name;
  std::span<T> value;
  std::span<const T> analytic_grad;
};

enum class CoordinateSelection {
  kRandom,
  // Largest |analytic| entries of each tensor. In 32-bit mode the central
  // difference of a near-zero gradient is dominated by rounding noise.
  kLargest,
};

struct GradCheckOptions {
  double delta = 1e-3;
  std::size_t coords_per_tensor = 8;
  CoordinateSelection selection = CoordinateSelection::kRandom;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::string worst_coordinate;
};

/// Compares analytic gradients against central differences of `loss`.
/// The analytic gradients must already be populated for the current values.
template <typename T>
GradCheckResult grad_check(const std::function<double()>& loss, std::vector<GradCheckTarget<T>> targets,
                           const GradCheckOptions& options = {}) {
  if (!(options.delta >= 1e-5 && options.delta <= 1e-3)) {
    throw std::invalid_argument("grad_check: delta must lie in [1e-5, 1e-3]");
  }
  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (auto& target : targets) {
    const std::size_t n = target.value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    const std::size_t take = std::min(n, options.coords_per_tensor);
    if (options.selection == CoordinateSelection::kLargest) {
      std::partial_sort(coords.begin(), coords.begin() + static_cast<std::ptrdiff_t>(take), coords.end(),
                        [&](std::size_t a, std::size_t b) {
                          return std::abs(target.analytic_grad[a]) > std::abs(target.analytic_grad[b]);
                        });
    } else {
      std::shuffle(coords.begin(), coords.end(), rng);
    }
    coords.resize(take);

    for (std::size_t i : coords) {
      const T saved = target.value[i];
      target.value[i] = static_cast<T>(saved + options.delta);
      const double up = loss();
      target.value[i] = static_cast<T>(saved - options.delta);
      const double down = loss();
      // Use the step actually representable in T.
      const double step = static_cast<double>(static_cast<T>(saved + options.delta)) -
                          static_cast<double>(static_cast<T>(saved - options.delta));
      target.value[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite loss at " + target.name + "[" + std::to_string(i) + "]");
      }
      const double numeric = (up - down) / step;
      const double analytic = static_cast<double>(target.analytic_grad[i]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coordinates_checked;
      if (rel > result.max_relative_error || result.worst_coordinate.empty()) {
        result.max_relative_error = std::max(result.max_relative_error, rel);
        if (rel >= result.max_relative_error) {
          result.worst_coordinate = target.name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return result;
}

}  // namespace layerskip
