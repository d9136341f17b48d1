#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "layerskip/errors.hpp"
#include "layerskip/tensor.hpp"

namespace layerskip {

inline constexpr double kRmsNormEps = 1e-5;

namespace detail {

template <typename T>
void check_finite(std::span<const T> xs, const char* op) {
  for (T v : xs) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite input");
    }
  }
}

inline constexpr std::size_t kColBlock = 32;

// acc[r][j] accumulates x[r, kk] * w[kk, j] for kk ascending. Every output
// element sees the same sequence of roundings regardless of R, which is what
// makes batched and one-row evaluation bitwise identical.
template <typename T, std::size_t R, std::size_t JB>
inline void matmul_tile(const T* x, std::size_t ldx, std::size_t k, const T* w, std::size_t ldw,
                        T* y, std::size_t ldy) {
  T acc[R][JB] = {};
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* wr = w + kk * ldw;
    for (std::size_t r = 0; r < R; ++r) {
      const T xv = x[r * ldx + kk];
      for (std::size_t j = 0; j < JB; ++j) {
        acc[r][j] += xv * wr[j];
      }
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(acc[r], JB, y + r * ldy);
  }
}

template <typename T, std::size_t R>
inline void matmul_tile_tail(const T* x, std::size_t ldx, std::size_t k, const T* w, std::size_t ldw,
                             std::size_t jn, T* y, std::size_t ldy) {
  T acc[R][kColBlock] = {};
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* wr = w + kk * ldw;
    for (std::size_t r = 0; r < R; ++r) {
      const T xv = x[r * ldx + kk];
      for (std::size_t j = 0; j < jn; ++j) {
        acc[r][j] += xv * wr[j];
      }
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(acc[r], jn, y + r * ldy);
  }
}

template <typename T, std::size_t R>
inline void matmul_rows(const T* x, std::size_t ldx, std::size_t k, const T* w, std::size_t ldw,
                        std::size_t m, T* y, std::size_t ldy) {
  std::size_t j = 0;
  for (; j + kColBlock <= m; j += kColBlock) {
    matmul_tile<T, R, kColBlock>(x, ldx, k, w + j, ldw, y + j, ldy);
  }
  if (j < m) {
    matmul_tile_tail<T, R>(x, ldx, k, w + j, ldw, m - j, y + j, ldy);
  }
}

}  // namespace detail

/// y[n x m] = x[n x k] * w[k x m] with explicit leading dimensions.
/// Row results do not depend on n.
template <typename T>
void matmul(const T* x, std::size_t ldx, std::size_t n, std::size_t k, const T* w, std::size_t ldw,
            std::size_t m, T* y, std::size_t ldy) {
  std::size_t r = 0;
  for (; r + 4 <= n; r += 4) {
    detail::matmul_rows<T, 4>(x + r * ldx, ldx, k, w, ldw, m, y + r * ldy, ldy);
  }
  for (; r < n; ++r) {
    detail::matmul_rows<T, 1>(x + r * ldx, ldx, k, w, ldw, m, y + r * ldy, ldy);
  }
}

template <typename T>
void matmul(const BasicTensor<T>& x, const BasicTensor<T>& w, BasicTensor<T>& y) {
  const std::size_t n = x.rows(), k = x.cols(), m = w.cols();
  if (w.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ");
  }
  if (y.rows() != n || y.cols() != m) {
    y = BasicTensor<T>({n, m});
  }
  matmul(x.data(), k, n, k, w.data(), m, m, y.data(), m);
}

/// dw[k x m] += x[n x k]^T * dy[n x m]
template <typename T>
void matmul_accumulate_xt_dy(const T* x, std::size_t ldx, std::size_t n, std::size_t k, const T* dy,
                             std::size_t lddy, std::size_t m, T* dw, std::size_t lddw) {
  constexpr std::size_t JB = detail::kColBlock;
  for (std::size_t kk = 0; kk < k; ++kk) {
    T* out = dw + kk * lddw;
    for (std::size_t j0 = 0; j0 < m; j0 += JB) {
      const std::size_t jn = std::min(JB, m - j0);
      T acc[JB];
      std::copy_n(out + j0, jn, acc);
      for (std::size_t r = 0; r < n; ++r) {
        const T xv = x[r * ldx + kk];
        const T* dyr = dy + r * lddy + j0;
        if (jn == JB) {
          for (std::size_t j = 0; j < JB; ++j) acc[j] += xv * dyr[j];
        } else {
          for (std::size_t j = 0; j < jn; ++j) acc[j] += xv * dyr[j];
        }
      }
      std::copy_n(acc, jn, out + j0);
    }
  }
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  BasicTensor<T> out({a.cols(), a.rows()});
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) {
      out.at(c, r) = a.at(r, c);
    }
  }
  return out;
}

template <typename T>
void softmax_inplace(std::span<T> xs) {
  if (xs.empty()) {
    throw ShapeError("softmax: empty input");
  }
  detail::check_finite<T>(xs, "softmax");
  const T mx = *std::max_element(xs.begin(), xs.end());
  T sum = 0;
  for (T& v : xs) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (T& v : xs) v /= sum;
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.begin(), logits.end());
  softmax_inplace<T>(out);
  return out;
}

/// log(sum(exp(x))) evaluated in double with max subtraction.
template <typename T>
double log_sum_exp(std::span<const T> xs) {
  detail::check_finite<T>(xs, "log_sum_exp");
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : xs) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (T v : xs) sum += std::exp(static_cast<double>(v) - mx);
  return mx + std::log(sum);
}

/// -log softmax(logits)[target], accumulated in double.
template <typename T>
double cross_entropy(std::span<const T> logits, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                            std::to_string(logits.size()) + ")");
  }
  return log_sum_exp(logits) - static_cast<double>(logits[static_cast<std::size_t>(target)]);
}

/// out_i = gain_i * x_i / sqrt(mean(x^2) + eps). Returns the inverse rms.
template <typename T>
T rms_norm(std::span<const T> x, std::span<const T> gain, std::span<T> out) {
  if (x.empty() || gain.size() != x.size() || out.size() != x.size()) {
    throw ShapeError("rms_norm: dimension mismatch");
  }
  T ss = 0;
  for (T v : x) ss += v * v;
  const T inv = T{1} / std::sqrt(ss / static_cast<T>(x.size()) + static_cast<T>(kRmsNormEps));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * (x[i] * inv);
  return inv;
}

template <typename T>
std::vector<T> rms_norm(std::span<const T> x, std::span<const T> gain) {
  std::vector<T> out(x.size());
  rms_norm<T>(x, gain, out);
  return out;
}

/// Backward of rms_norm given the saved inverse rms. Accumulates into dx and dgain.
template <typename T>
void rms_norm_backward(std::span<const T> x, std::span<const T> gain, T inv, std::span<const T> dout,
                       std::span<T> dx, std::span<T> dgain) {
  const std::size_t n = x.size();
  T dot = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dgain[i] += dout[i] * x[i] * inv;
    dot += dout[i] * gain[i] * x[i];
  }
  const T coef = dot * inv * inv * inv / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    dx[i] += dout[i] * gain[i] * inv - x[i] * coef;
  }
}

template <typename T>
T silu(T v) {
  return v / (T{1} + std::exp(-v));
}

/// d/dv silu(v)
template <typename T>
T silu_grad(T v) {
  const T s = T{1} / (T{1} + std::exp(-v));
  return s * (T{1} + v * (T{1} - s));
}

/// Index of the largest element; ties go to the lowest index.
template <typename T>
int argmax(std::span<const T> xs) {
  if (xs.empty()) {
    throw ShapeError("argmax: empty input");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] > xs[best]) best = i;
  }
  return static_cast<int>(best);
}

/// Rotary position embedding tables, pairs (2i, 2i+1) within each head.
template <typename T>
class RopeTable {
 public:
  RopeTable() = default;
  RopeTable(std::size_t max_positions, std::size_t head_dim, double base = 10000.0)
      : half_(head_dim / 2), cos_(max_positions * half_), sin_(max_positions * half_) {
    for (std::size_t p = 0; p < max_positions; ++p) {
      for (std::size_t i = 0; i < half_; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(p) * freq;
        cos_[p * half_ + i] = static_cast<T>(std::cos(angle));
        sin_[p * half_ + i] = static_cast<T>(std::sin(angle));
      }
    }
  }

  std::size_t max_positions() const { return half_ == 0 ? 0 : cos_.size() / half_; }

  /// Rotates every head of one row in place. `inverse` applies the transpose,
  /// which is the backward pass of the forward rotation.
  void apply(std::span<T> row, std::size_t n_heads, std::size_t position, bool inverse = false) const {
    const T* c = cos_.data() + position * half_;
    const T* s = sin_.data() + position * half_;
    const std::size_t hd = half_ * 2;
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* v = row.data() + h * hd;
      for (std::size_t i = 0; i < half_; ++i) {
        const T a = v[2 * i], b = v[2 * i + 1];
        const T sn = inverse ? -s[i] : s[i];
        v[2 * i] = a * c[i] - b * sn;
        v[2 * i + 1] = a * sn + b * c[i];
      }
    }
  }

 private:
  std::size_t half_ = 0;
  std::vector<T> cos_;
  std::vector<T> sin_;
};

}  // namespace layerskip
