// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "deepj/numerics/tensor.hpp"

namespace deepj {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  // "param[index]" of the worst coordinate.
  std::string worst;
};

// Compares reverse-mode gradients of f against central differences, one
// coordinate at a time. f must rebuild its graph from the current parameter
// values on every call. Coordinates where both estimates fall below
// `floor` are skipped; elsewhere the error is |a - c| / max(|a|, |c|).
template <typename T, typename F>
GradCheckResult finite_difference_check(F&& f, std::vector<Tensor<T>> params, T step = T(1e-5),
                                        T floor = T(1e-6)) {
  for (auto& p : params) p.zero_grad();
  backward(f());
  std::vector<Matrix<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& values = params[k].mutable_value().data;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + step;
      const T up = f().item();
      values[i] = saved - step;
      const T down = f().item();
      values[i] = saved;
      const double central = (static_cast<double>(up) - static_cast<double>(down)) /
                             (2.0 * static_cast<double>(step));
      const double a = static_cast<double>(analytic[k].data[i]);
      const double scale = std::max(std::abs(a), std::abs(central));
      if (scale < static_cast<double>(floor)) {
        ++result.skipped;
        continue;
      }
      ++result.checked;
      const double err = std::abs(a - central) / scale;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = "param" + std::to_string(k) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace deepj
