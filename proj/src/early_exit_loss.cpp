#include "layerskip/early_exit_loss.hpp"

#include <cmath>

namespace layerskip {

namespace {

void check_targets(std::size_t rows, std::span<const int> targets) {
  if (targets.size() != rows) throw ShapeError("exit loss: one target per position required");
}

}  // namespace

template <typename T>
double exit_cross_entropy(const BasicModelParams<T>& params, const BasicTensor<T>& x, std::span<const int> targets) {
  check_targets(x.rows(), targets);
  const BasicTensor<T> logits = unembed_rows(params, x);
  double sum = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) sum += cross_entropy<T>(logits.row(r), targets[r]);
  return sum / static_cast<double>(x.rows());
}

template <typename T>
double exit_cross_entropy_backward(BasicModelParams<T>& params, const BasicTensor<T>& x, std::span<const int> targets,
                                   double grad_scale, BasicTensor<T>& dx) {
  check_targets(x.rows(), targets);
  const std::size_t n = x.rows();
  const std::size_t d = static_cast<std::size_t>(params.config.dim);
  const std::size_t v = static_cast<std::size_t>(params.config.vocab);

  BasicTensor<T> h({n, d});
  std::vector<T> inv(n);
  for (std::size_t r = 0; r < n; ++r) inv[r] = rms_norm<T>(x.row(r), params.final_norm.value.span(), h.row(r));
  BasicTensor<T> logits({n, v});
  matmul(h.data(), d, n, d, params.lm_head.value.data(), v, v, logits.data(), v);

  const double row_scale = grad_scale / static_cast<double>(n);
  double sum = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = logits.row(r);
    const double lse = log_sum_exp<T>(row);
    const auto target = static_cast<std::size_t>(targets[r]);
    sum += lse - static_cast<double>(row[target]);
    for (std::size_t j = 0; j < v; ++j) {
      const double p = std::exp(static_cast<double>(row[j]) - lse);
      row[j] = static_cast<T>((p - (j == target ? 1.0 : 0.0)) * row_scale);
    }
  }

  matmul_accumulate_xt_dy(h.data(), d, n, d, logits.data(), v, v, params.lm_head.grad.data(), v);
  BasicTensor<T> head_t = transpose(params.lm_head.value);
  BasicTensor<T> dh({n, d});
  matmul(logits.data(), v, n, v, head_t.data(), d, d, dh.data(), d);
  for (std::size_t r = 0; r < n; ++r) {
    rms_norm_backward<T>(x.row(r), params.final_norm.value.span(), inv[r], dh.row(r), dx.row(r),
                         params.final_norm.grad.span());
  }
  return sum / static_cast<double>(n);
}

template <typename T>
LossBreakdown total_loss(const HiddenStates<T>& hidden, std::span<const int> targets, const std::vector<double>& weights,
                         const BasicModelParams<T>& params) {
  const auto L = static_cast<std::size_t>(params.config.n_layers);
  if (hidden.x.size() != L + 1 || weights.size() != L) throw ShapeError("total_loss: expected L exits");
  LossBreakdown out;
  for (std::size_t l = 0; l < L; ++l) {
    if (weights[l] == 0.0) continue;
    const double ce = exit_cross_entropy(params, hidden.x[l + 1], targets);
    out.terms.push_back({static_cast<int>(l), weights[l], ce});
    out.total += weights[l] * ce;
    ++out.unembeddings;
  }
  return out;
}

template <typename T>
LossBreakdown total_loss(const HiddenStates<T>& hidden, std::span<const int> targets, int step,
                         const EarlyExitLossSchedule& schedule, const BasicModelParams<T>& params) {
  return total_loss(hidden, targets, normalized_exit_scales(step, schedule), params);
}

template <typename T>
LossBreakdown total_loss_backward(BasicModelParams<T>& params, const HiddenStates<T>& hidden, std::span<const int> targets,
                                  const std::vector<double>& weights, double scale,
                                  std::vector<BasicTensor<T>>& hidden_grads) {
  const auto L = static_cast<std::size_t>(params.config.n_layers);
  if (hidden.x.size() != L + 1 || weights.size() != L) throw ShapeError("total_loss: expected L exits");
  hidden_grads.assign(L + 1, BasicTensor<T>(hidden.x[0].shape()));
  LossBreakdown out;
  for (std::size_t l = 0; l < L; ++l) {
    if (weights[l] == 0.0) continue;
    const double ce = exit_cross_entropy_backward(params, hidden.x[l + 1], targets, weights[l] * scale, hidden_grads[l + 1]);
    out.terms.push_back({static_cast<int>(l), weights[l], ce});
    out.total += weights[l] * ce;
    ++out.unembeddings;
  }
  return out;
}

#define LAYERSKIP_INSTANTIATE(T)                                                                                   \
  template double exit_cross_entropy<T>(const BasicModelParams<T>&, const BasicTensor<T>&, std::span<const int>); \
  template double exit_cross_entropy_backward<T>(BasicModelParams<T>&, const BasicTensor<T>&, std::span<const int>, \
                                                 double, BasicTensor<T>&);                                         \
  template LossBreakdown total_loss<T>(const HiddenStates<T>&, std::span<const int>, const std::vector<double>&,   \
                                       const BasicModelParams<T>&);                                                \
  template LossBreakdown total_loss<T>(const HiddenStates<T>&, std::span<const int>, int,                          \
                                       const EarlyExitLossSchedule&, const BasicModelParams<T>&);                  \
  template LossBreakdown total_loss_backward<T>(BasicModelParams<T>&, const HiddenStates<T>&, std::span<const int>, \
                                                const std::vector<double>&, double, std::vector<BasicTensor<T>>&);

LAYERSKIP_INSTANTIATE(float)
LAYERSKIP_INSTANTIATE(double)

#undef LAYERSKIP_INSTANTIATE

}  // namespace layerskip
