#pragma once

#include <span>
#include <vector>

#include "layerskip/model.hpp"
#include "layerskip/schedules.hpp"

namespace layerskip {

struct ExitLossTerm {
  int layer = 0;  // exit after layer `layer`, i.e. hidden state x[layer + 1]
  double weight = 0.0;
  double loss = 0.0;  // mean next-token cross entropy at this exit
};

struct LossBreakdown {
  double total = 0.0;
  std::vector<ExitLossTerm> terms;
  int unembeddings = 0;
};

/// Mean cross entropy of the shared head applied to each row of `x`.
template <typename T>
double exit_cross_entropy(const BasicModelParams<T>& params, const BasicTensor<T>& x, std::span<const int> targets);

/// Same loss; also accumulates `grad_scale * dLoss/dx` into `dx` and the head
/// gradients into `params`.
template <typename T>
double exit_cross_entropy_backward(BasicModelParams<T>& params, const BasicTensor<T>& x, std::span<const int> targets,
                                   double grad_scale, BasicTensor<T>& dx);

/// J = sum_l weights[l] * CE(g(x[l + 1]), targets). Only exits with a
/// nonzero weight are unembedded.
template <typename T>
LossBreakdown total_loss(const HiddenStates<T>& hidden, std::span<const int> targets, const std::vector<double>& weights,
                         const BasicModelParams<T>& params);

template <typename T>
LossBreakdown total_loss(const HiddenStates<T>& hidden, std::span<const int> targets, int step,
                         const EarlyExitLossSchedule& schedule, const BasicModelParams<T>& params);

/// Loss plus gradients: fills hidden_grads[l + 1] with scale * dJ/dx[l + 1]
/// and accumulates head gradients. hidden_grads is resized to L + 1.
template <typename T>
LossBreakdown total_loss_backward(BasicModelParams<T>& params, const HiddenStates<T>& hidden, std::span<const int> targets,
                                  const std::vector<double>& weights, double scale,
                                  std::vector<BasicTensor<T>>& hidden_grads);

}  // namespace layerskip
