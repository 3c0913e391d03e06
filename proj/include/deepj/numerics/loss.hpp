// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "deepj/numerics/tensor.hpp"

namespace deepj {

// Added inside every log of the loss terms.
inline constexpr double kLogEpsilon = 1e-10;

namespace detail {

inline std::size_t count_valid(const std::vector<bool>& valid) {
  std::size_t c = 0;
  for (bool v : valid) c += v ? 1 : 0;
  return c;
}

}  // namespace detail

// Mean over valid rows of sum_j p_ij log((p_ij + eps) / (q_ij + eps)).
template <typename T>
Tensor<T> kl_divergence_rowwise(const Tensor<T>& p, const Tensor<T>& q,
                                const std::vector<bool>& valid_rows) {
  detail::require(p.rows() == q.rows() && p.cols() == q.cols(), "kl_divergence: shape mismatch");
  detail::require(valid_rows.size() == p.rows(), "kl_divergence: validity flag count mismatch");
  const T eps = T(kLogEpsilon);
  const std::size_t count = detail::count_valid(valid_rows);
  const T inv = count == 0 ? T(0) : T(1) / static_cast<T>(count);
  T total = 0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    if (!valid_rows[i]) continue;
    T row = 0;
    for (std::size_t j = 0; j < p.cols(); ++j) {
      const T pv = p.value()(i, j);
      row += pv * std::log((pv + eps) / (q.value()(i, j) + eps));
    }
    total += row;
  }
  return detail::record<T>(
      "kl_divergence", Matrix<T>(1, 1, total * inv), {p, q}, [valid_rows, inv, eps](Node<T>& self) {
        const auto& pv = self.parents[0]->value;
        const auto& qv = self.parents[1]->value;
        const T g = self.grad.data[0] * inv;
        auto* gp = detail::grad_slot(self.parents[0]);
        auto* gq = detail::grad_slot(self.parents[1]);
        for (std::size_t i = 0; i < pv.rows; ++i) {
          if (!valid_rows[i]) continue;
          for (std::size_t j = 0; j < pv.cols; ++j) {
            const T a = pv(i, j), b = qv(i, j);
            if (gp) (*gp)(i, j) += g * (std::log((a + eps) / (b + eps)) + a / (a + eps));
            if (gq) (*gq)(i, j) -= g * a / (b + eps);
          }
        }
      });
}

// sqrt of the sum of squares; the gradient at the zero matrix is taken as 0.
template <typename T>
Tensor<T> frobenius_norm(const Tensor<T>& m) {
  T ss = 0;
  for (T v : m.value().data) ss += v * v;
  const T norm = std::sqrt(ss);
  return detail::record<T>("frobenius_norm", Matrix<T>(1, 1, norm), {m}, [norm](Node<T>& self) {
    auto* g = detail::grad_slot(self.parents[0]);
    if (!g || norm == T(0)) return;
    const T s = self.grad.data[0] / norm;
    const auto& v = self.parents[0]->value;
    for (std::size_t i = 0; i < v.size(); ++i) g->data[i] += s * v.data[i];
  });
}

// Mean over valid rows of -sum_r s_r log(s_r + eps).
template <typename T>
Tensor<T> row_entropy_sum(const Tensor<T>& s, const std::vector<bool>& valid_rows) {
  detail::require(valid_rows.size() == s.rows(), "row_entropy: validity flag count mismatch");
  const T eps = T(kLogEpsilon);
  const std::size_t count = detail::count_valid(valid_rows);
  const T inv = count == 0 ? T(0) : T(1) / static_cast<T>(count);
  T total = 0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    if (!valid_rows[i]) continue;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      const T v = s.value()(i, j);
      total -= v * std::log(v + eps);
    }
  }
  return detail::record<T>(
      "row_entropy", Matrix<T>(1, 1, total * inv), {s}, [valid_rows, inv, eps](Node<T>& self) {
        auto* g = detail::grad_slot(self.parents[0]);
        if (!g) return;
        const auto& sv = self.parents[0]->value;
        const T go = self.grad.data[0] * inv;
        for (std::size_t i = 0; i < sv.rows; ++i) {
          if (!valid_rows[i]) continue;
          for (std::size_t j = 0; j < sv.cols; ++j) {
            const T v = sv(i, j);
            (*g)(i, j) -= go * (std::log(v + eps) + v / (v + eps));
          }
        }
      });
}

// -weight * log_probs[label] for a 1×C row of log-probabilities.
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& log_probs, int label, T weight = T(1)) {
  detail::require(log_probs.rows() == 1, "nll_loss: expected a single row of log-probabilities");
  if (label < 0 || static_cast<std::size_t>(label) >= log_probs.cols())
    throw InputError("nll_loss: label " + std::to_string(label) + " out of range");
  const auto idx = static_cast<std::size_t>(label);
  return detail::record<T>("nll_loss", Matrix<T>(1, 1, -weight * log_probs.value()(0, idx)),
                           {log_probs}, [idx, weight](Node<T>& self) {
                             if (auto* g = detail::grad_slot(self.parents[0]))
                               (*g)(0, idx) -= weight * self.grad.data[0];
                           });
}

}  // namespace deepj
