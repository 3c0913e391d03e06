// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "deepj/numerics/tensor.hpp"

namespace deepj {

// Denominator stabilizer for layer_norm and graph_norm.
inline constexpr double kNormEpsilon = 1e-5;

template <typename T>
bool is_masked(T additive) {
  return std::isinf(additive) && additive < T(0);
}

// Additive mask for a square matrix: 0 where allowed, -inf elsewhere.
template <typename T>
Matrix<T> additive_mask(std::size_t rows, std::size_t cols, const std::vector<bool>& allowed) {
  if (allowed.size() != rows * cols) throw ShapeError("additive_mask: flag count mismatch");
  Matrix<T> m(rows, cols);
  for (std::size_t i = 0; i < allowed.size(); ++i)
    if (!allowed[i]) m.data[i] = -std::numeric_limits<T>::infinity();
  return m;
}

// Row-wise softmax of scores + mask. Entries whose mask is -inf come out
// exactly 0; a row with no finite mask entry comes out as the zero row.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const Matrix<T>& mask) {
  detail::require(mask.rows == scores.rows() && mask.cols == scores.cols(),
                  "masked_softmax: mask shape differs from scores");
  const std::size_t n = scores.rows(), m = scores.cols();
  Matrix<T> out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    T best = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < m; ++j) {
      if (is_masked(mask(i, j))) continue;
      any = true;
      best = std::max(best, scores.value()(i, j) + mask(i, j));
    }
    if (!any) continue;
    T total = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (is_masked(mask(i, j))) continue;
      const T e = std::exp(scores.value()(i, j) + mask(i, j) - best);
      out(i, j) = e;
      total += e;
    }
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= total;
  }
  return detail::record<T>("masked_softmax", std::move(out), {scores}, [n, m](Node<T>& self) {
    auto* g = detail::grad_slot(self.parents[0]);
    if (!g) return;
    for (std::size_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += self.grad(i, j) * self.value(i, j);
      for (std::size_t j = 0; j < m; ++j) (*g)(i, j) += self.value(i, j) * (self.grad(i, j) - dot);
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& scores) {
  return masked_softmax(scores, Matrix<T>(scores.rows(), scores.cols()));
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.rows(), m = x.cols();
  Matrix<T> out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    T best = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j) best = std::max(best, x.value()(i, j));
    T total = 0;
    for (std::size_t j = 0; j < m; ++j) total += std::exp(x.value()(i, j) - best);
    const T lse = best + std::log(total);
    for (std::size_t j = 0; j < m; ++j) out(i, j) = x.value()(i, j) - lse;
  }
  return detail::record<T>("log_softmax", std::move(out), {x}, [n, m](Node<T>& self) {
    auto* g = detail::grad_slot(self.parents[0]);
    if (!g) return;
    for (std::size_t i = 0; i < n; ++i) {
      T gsum = 0;
      for (std::size_t j = 0; j < m; ++j) gsum += self.grad(i, j);
      for (std::size_t j = 0; j < m; ++j)
        (*g)(i, j) += self.grad(i, j) - std::exp(self.value(i, j)) * gsum;
    }
  });
}

// Divides each row by its sum; rows summing to zero are left as zeros.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  const std::size_t n = x.rows(), m = x.cols();
  Matrix<T> out(n, m);
  std::vector<T> totals(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) totals[i] += x.value()(i, j);
    if (totals[i] == T(0)) continue;
    for (std::size_t j = 0; j < m; ++j) out(i, j) = x.value()(i, j) / totals[i];
  }
  return detail::record<T>("normalize_rows", std::move(out), {x}, [totals, n, m](Node<T>& self) {
    auto* g = detail::grad_slot(self.parents[0]);
    if (!g) return;
    for (std::size_t i = 0; i < n; ++i) {
      if (totals[i] == T(0)) continue;
      T dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += self.grad(i, j) * self.value(i, j);
      for (std::size_t j = 0; j < m; ++j) (*g)(i, j) += (self.grad(i, j) - dot) / totals[i];
    }
  });
}

namespace detail {

// Normalizes one group of values into xhat, returning 1/s with
// s = sqrt(var + eps). A constant group normalizes to zeros.
template <typename T>
T normalize_group(const std::vector<T>& values, std::vector<T>& xhat, T eps) {
  const std::size_t n = values.size();
  T mean = 0;
  for (T v : values) mean += v;
  mean /= static_cast<T>(n);
  T var = 0;
  for (T v : values) var += (v - mean) * (v - mean);
  var /= static_cast<T>(n);
  const T inv_s = T(1) / std::sqrt(var + eps);
  xhat.resize(n);
  for (std::size_t i = 0; i < n; ++i) xhat[i] = (values[i] - mean) * inv_s;
  return inv_s;
}

// dL/dx for one normalized group given dL/dxhat.
template <typename T>
void normalize_group_backward(const std::vector<T>& xhat, const std::vector<T>& dxhat, T inv_s,
                              std::vector<T>& dx) {
  const std::size_t n = xhat.size();
  T mean_d = 0, mean_dx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_d += dxhat[i];
    mean_dx += dxhat[i] * xhat[i];
  }
  mean_d /= static_cast<T>(n);
  mean_dx /= static_cast<T>(n);
  dx.resize(n);
  for (std::size_t i = 0; i < n; ++i) dx[i] = inv_s * (dxhat[i] - mean_d - xhat[i] * mean_dx);
}

}  // namespace detail

// Per-row normalization followed by gain[1×d] and bias[1×d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(kNormEpsilon)) {
  const std::size_t n = x.rows(), d = x.cols();
  detail::require(d >= 1, "layer_norm: empty feature dimension");
  detail::require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
                  "layer_norm: gain/bias must be 1xd");
  Matrix<T> xhat(n, d);
  std::vector<T> inv_s(n);
  std::vector<T> buf, hat;
  Matrix<T> out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    buf.assign(x.value().row(i).begin(), x.value().row(i).end());
    inv_s[i] = detail::normalize_group(buf, hat, eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = hat[j];
      out(i, j) = hat[j] * gain.value()(0, j) + bias.value()(0, j);
    }
  }
  return detail::record<T>(
      "layer_norm", std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_s = std::move(inv_s), n, d](Node<T>& self) {
        const auto& gv = self.parents[1]->value;
        if (auto* gx = detail::grad_slot(self.parents[0])) {
          std::vector<T> hat(d), dhat(d), dx;
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
              hat[j] = xhat(i, j);
              dhat[j] = self.grad(i, j) * gv(0, j);
            }
            detail::normalize_group_backward(hat, dhat, inv_s[i], dx);
            for (std::size_t j = 0; j < d; ++j) (*gx)(i, j) += dx[j];
          }
        }
        if (auto* gg = detail::grad_slot(self.parents[1]))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) (*gg)(0, j) += self.grad(i, j) * xhat(i, j);
        if (auto* gb = detail::grad_slot(self.parents[2]))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) (*gb)(0, j) += self.grad(i, j);
      });
}

// Per-feature normalization over the valid rows of one graph, then an
// optional affine map. Invalid rows come out as zeros.
template <typename T>
Tensor<T> graph_norm(const Tensor<T>& x, const std::vector<bool>& valid, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(kNormEpsilon)) {
  const std::size_t n = x.rows(), d = x.cols();
  detail::require(valid.size() == n, "graph_norm: validity flag count differs from rows");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i)
    if (valid[i]) rows.push_back(i);
  if (rows.empty()) throw InputError("graph_norm: no valid node");
  const bool affine = gain.defined();
  if (affine)
    detail::require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
                    "graph_norm: gain/bias must be 1xd");

  Matrix<T> xhat(n, d);
  std::vector<T> inv_s(d);
  std::vector<T> buf(rows.size()), hat;
  Matrix<T> out(n, d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t r = 0; r < rows.size(); ++r) buf[r] = x.value()(rows[r], j);
    inv_s[j] = detail::normalize_group(buf, hat, eps);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      xhat(rows[r], j) = hat[r];
      out(rows[r], j) = affine ? hat[r] * gain.value()(0, j) + bias.value()(0, j) : hat[r];
    }
  }

  auto bw = [xhat = std::move(xhat), inv_s = std::move(inv_s), rows, d, affine](Node<T>& self) {
    const std::size_t k = rows.size();
    if (auto* gx = detail::grad_slot(self.parents[0])) {
      std::vector<T> hat(k), dhat(k), dx;
      for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t r = 0; r < k; ++r) {
          hat[r] = xhat(rows[r], j);
          const T scale_j = affine ? self.parents[1]->value(0, j) : T(1);
          dhat[r] = self.grad(rows[r], j) * scale_j;
        }
        detail::normalize_group_backward(hat, dhat, inv_s[j], dx);
        for (std::size_t r = 0; r < k; ++r) (*gx)(rows[r], j) += dx[r];
      }
    }
    if (!affine) return;
    if (auto* gg = detail::grad_slot(self.parents[1]))
      for (std::size_t i : rows)
        for (std::size_t j = 0; j < d; ++j) (*gg)(0, j) += self.grad(i, j) * xhat(i, j);
    if (auto* gb = detail::grad_slot(self.parents[2]))
      for (std::size_t i : rows)
        for (std::size_t j = 0; j < d; ++j) (*gb)(0, j) += self.grad(i, j);
  };
  if (affine) return detail::record<T>("graph_norm", std::move(out), {x, gain, bias}, std::move(bw));
  return detail::record<T>("graph_norm", std::move(out), {x}, std::move(bw));
}

template <typename T>
Tensor<T> graph_norm(const Tensor<T>& x, const std::vector<bool>& valid) {
  return graph_norm(x, valid, Tensor<T>(), Tensor<T>());
}

}  // namespace deepj
