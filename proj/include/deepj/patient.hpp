// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "deepj/error.hpp"
#include "deepj/util/hash.hpp"

namespace deepj {

inline constexpr std::size_t kPadIndex = 0;
inline constexpr const char* kPadCode = "PAD";

// Ordered code list. Index 0 is always the reserved PAD entry.
class Vocabulary {
 public:
  Vocabulary() : codes_{kPadCode} { index_.emplace(kPadCode, kPadIndex); }

  // `codes` must start with "PAD" and contain no duplicates.
  explicit Vocabulary(std::vector<std::string> codes) : codes_(std::move(codes)) {
    if (codes_.empty() || codes_[0] != kPadCode)
      throw InputError("vocabulary: index 0 must be \"PAD\"");
    for (std::size_t i = 0; i < codes_.size(); ++i)
      if (!index_.emplace(codes_[i], i).second)
        throw InputError("vocabulary: duplicate code \"" + codes_[i] + "\"");
  }

  std::size_t add(const std::string& code) {
    auto [it, inserted] = index_.emplace(code, codes_.size());
    if (inserted) codes_.push_back(code);
    return it->second;
  }

  [[nodiscard]] std::size_t size() const { return codes_.size(); }
  [[nodiscard]] const std::vector<std::string>& codes() const { return codes_; }
  [[nodiscard]] const std::string& code(std::size_t id) const { return codes_.at(id); }
  [[nodiscard]] bool contains(const std::string& code) const { return index_.count(code) != 0; }

  [[nodiscard]] std::size_t id(const std::string& code) const {
    auto it = index_.find(code);
    if (it == index_.end()) throw InputError("unknown code \"" + code + "\"");
    return it->second;
  }

  // SHA-256 over the newline-joined code list.
  [[nodiscard]] std::string hash() const {
    std::string joined;
    for (const auto& c : codes_) {
      joined += c;
      joined += '\n';
    }
    return sha256_hex(joined);
  }

 private:
  std::vector<std::string> codes_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Encounter {
  double t_hours = 0.0;
  std::vector<std::string> codes;

  bool operator==(const Encounter&) const = default;
};

struct PatientRecord {
  std::string id;
  std::vector<Encounter> encounters;
  int label = 0;
  // Generator ground truth: code -> latent module.
  std::optional<std::map<std::string, int>> planted;

  bool operator==(const PatientRecord&) const = default;
};

// Checks ordering and uniqueness constraints on one record.
inline void validate_record(const PatientRecord& r) {
  if (r.encounters.empty()) throw InputError("patient " + r.id + ": no encounters");
  if (r.label != 0 && r.label != 1) throw InputError("patient " + r.id + ": label must be 0 or 1");
  double prev = r.encounters.front().t_hours;
  for (const auto& e : r.encounters) {
    if (e.t_hours < prev) throw InputError("patient " + r.id + ": encounter times decrease");
    prev = e.t_hours;
    std::vector<std::string> sorted = e.codes;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw InputError("patient " + r.id + ": duplicate code within an encounter");
    for (const auto& c : e.codes)
      if (c == kPadCode) throw InputError("patient " + r.id + ": PAD inside an encounter");
  }
}

// Keeps the most recent `p_max` encounters, re-based so the first kept one
// sits at t = 0. An encounter with more than `c_max` codes keeps the codes
// present in the most kept encounters (ties by vocabulary index), in their
// original order.
inline PatientRecord truncate_record(const PatientRecord& r, std::size_t p_max, std::size_t c_max,
                                     const Vocabulary& vocab) {
  if (r.encounters.empty()) throw InputError("patient " + r.id + ": no encounters");
  if (p_max == 0 || c_max == 0) throw ConfigError("truncate: p_max and c_max must be positive");
  PatientRecord out = r;
  const std::size_t n = r.encounters.size();
  const std::size_t first = n > p_max ? n - p_max : 0;
  out.encounters.assign(r.encounters.begin() + static_cast<std::ptrdiff_t>(first), r.encounters.end());
  const double t0 = out.encounters.front().t_hours;
  std::map<std::string, int> frequency;
  for (auto& e : out.encounters) {
    e.t_hours -= t0;
    for (const auto& c : e.codes) ++frequency[c];
  }
  for (auto& e : out.encounters) {
    if (e.codes.size() <= c_max) continue;
    std::vector<std::size_t> order(e.codes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const int fa = frequency[e.codes[a]], fb = frequency[e.codes[b]];
      if (fa != fb) return fa > fb;
      return vocab.id(e.codes[a]) < vocab.id(e.codes[b]);
    });
    order.resize(c_max);
    std::sort(order.begin(), order.end());
    std::vector<std::string> kept;
    for (std::size_t k : order) kept.push_back(e.codes[k]);
    e.codes = std::move(kept);
  }
  return out;
}

// Flattened, padded model input: SeqLen = p_max * c_max positions, slot p
// holding encounter p's codes followed by PAD.
struct EncodedPatient {
  std::string id;
  std::size_t p_max = 0;
  std::size_t c_max = 0;
  std::vector<std::size_t> code_ids;
  std::vector<std::size_t> enc_index;
  std::vector<double> time;
  std::vector<bool> is_pad;
  std::size_t n_encounters = 0;
  int label = 0;

  [[nodiscard]] std::size_t seq_len() const { return code_ids.size(); }

  [[nodiscard]] std::vector<bool> valid() const {
    std::vector<bool> v(is_pad.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = !is_pad[i];
    return v;
  }

  [[nodiscard]] std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(is_pad.begin(), is_pad.end(), false));
  }
};

inline EncodedPatient encode_patient(const PatientRecord& record, std::size_t p_max,
                                     std::size_t c_max, const Vocabulary& vocab) {
  const PatientRecord kept = truncate_record(record, p_max, c_max, vocab);
  EncodedPatient enc;
  enc.id = record.id;
  enc.p_max = p_max;
  enc.c_max = c_max;
  enc.label = record.label;
  enc.n_encounters = kept.encounters.size();
  const std::size_t len = p_max * c_max;
  enc.code_ids.assign(len, kPadIndex);
  enc.enc_index.resize(len);
  enc.time.assign(len, 0.0);
  enc.is_pad.assign(len, true);
  for (std::size_t p = 0; p < p_max; ++p) {
    const bool present = p < kept.encounters.size();
    for (std::size_t c = 0; c < c_max; ++c) {
      const std::size_t pos = p * c_max + c;
      enc.enc_index[pos] = p;
      if (!present) continue;
      const auto& e = kept.encounters[p];
      enc.time[pos] = e.t_hours;
      if (c < e.codes.size()) {
        const std::size_t id = vocab.id(e.codes[c]);
        if (id == kPadIndex) throw InputError("patient " + record.id + ": PAD inside an encounter");
        enc.code_ids[pos] = id;
        enc.is_pad[pos] = false;
      }
    }
  }
  return enc;
}

}  // namespace deepj
