// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>

#include "deepj/numerics/tensor.hpp"
#include "deepj/util/random.hpp"

namespace deepj {

// Glorot-uniform weights for a fan_in×fan_out matrix.
template <typename T>
Matrix<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix<T> m(fan_in, fan_out);
  for (auto& v : m.data) v = static_cast<T>(rng.uniform(-limit, limit));
  return m;
}

template <typename T>
Tensor<T> xavier_parameter(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return Tensor<T>::parameter(xavier_uniform<T>(fan_in, fan_out, rng));
}

template <typename T>
Tensor<T> filled_parameter(std::size_t rows, std::size_t cols, T value) {
  return Tensor<T>::parameter(Matrix<T>(rows, cols, value));
}

}  // namespace deepj
