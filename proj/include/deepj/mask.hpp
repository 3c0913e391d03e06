// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "deepj/numerics/ops.hpp"
#include "deepj/patient.hpp"

namespace deepj {

// Which (query i, key j) pairs may attend. Position i may see j when j is
// not padding, i is not padding, and j's encounter is not later than i's.
struct AttentionMask {
  std::size_t size = 0;
  std::vector<bool> allowed;

  [[nodiscard]] bool allows(std::size_t i, std::size_t j) const { return allowed[i * size + j]; }

  // {0, -inf} additive form.
  template <typename T>
  [[nodiscard]] Matrix<T> additive() const {
    return additive_mask<T>(size, size, allowed);
  }
};

inline AttentionMask build_mask(const EncodedPatient& enc) {
  AttentionMask m;
  m.size = enc.seq_len();
  m.allowed.assign(m.size * m.size, false);
  for (std::size_t i = 0; i < m.size; ++i) {
    if (enc.is_pad[i]) continue;
    for (std::size_t j = 0; j < m.size; ++j) {
      if (enc.is_pad[j] || enc.enc_index[i] < enc.enc_index[j]) continue;
      m.allowed[i * m.size + j] = true;
    }
  }
  return m;
}

}  // namespace deepj
