// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "deepj/numerics/tensor.hpp"

namespace deepj {

template <typename T>
struct AdamState {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  std::uint64_t step = 0;
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
};

// One bias-corrected Adam update of `values` from `grads`. Moments are
// allocated on the first call.
template <typename T>
void adam_step(std::span<Matrix<T>* const> values, std::span<const Matrix<T>* const> grads,
               AdamState<T>& state) {
  if (values.size() != grads.size()) throw InputError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto* p : values) {
      state.m.emplace_back(p->rows, p->cols);
      state.v.emplace_back(p->rows, p->cols);
    }
  }
  if (state.m.size() != values.size()) throw InputError("adam_step: state tracks a different parameter set");
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (values[k]->rows != grads[k]->rows || values[k]->cols != grads[k]->cols ||
        state.m[k].rows != values[k]->rows || state.m[k].cols != values[k]->cols)
      throw InputError("adam_step: shape mismatch for parameter " + std::to_string(k));
  }

  ++state.step;
  const T c1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
  const T c2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));
  for (std::size_t k = 0; k < values.size(); ++k) {
    auto& p = values[k]->data;
    const auto& g = grads[k]->data;
    auto& m = state.m[k].data;
    auto& v = state.v[k].data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g[i] * g[i];
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// Adam update of tensors from their accumulated grads.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  std::vector<Matrix<T>*> values;
  std::vector<const Matrix<T>*> grads;
  for (auto& p : params) {
    values.push_back(&p.mutable_value());
    grads.push_back(&p.grad());
  }
  adam_step<T>(std::span<Matrix<T>* const>(values), std::span<const Matrix<T>* const>(grads), state);
}

}  // namespace deepj
