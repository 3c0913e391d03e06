// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepj/error.hpp"
#include "deepj/mask.hpp"
#include "deepj/numerics/tensor.hpp"
#include "deepj/patient.hpp"
#include "deepj/util/random.hpp"

namespace deepj {

// Synthetic corpus with planted code modules. Module 0 is the risk module:
// the noise-free label is 1 exactly when a patient has risk-module codes in
// at least two encounters.
struct GenConfig {
  std::size_t modules = 6;
  std::size_t codes_per_module = 8;
  // Real codes, PAD excluded. Codes beyond the module codes are background.
  std::size_t vocab_size = 64;
  std::size_t patients = 2000;
  std::size_t p_max = 4;
  std::size_t c_max = 16;
  double positive_rate = 0.075;
  double noise_rate = 0.1;
  std::uint64_t seed = 1;

  double second_module_prob = 0.7;
  // Share of rule-negative patients carrying the risk module in one encounter.
  double decoy_prob = 0.3;
  // Chance a module shows up in a given encounter of a patient that has it.
  double presence_prob = 0.7;
  // Chance each module code is charted when its module is present.
  double code_prob = 0.5;
  std::size_t background_max = 3;
  double min_gap_hours = 24.0;
  double max_gap_hours = 120.0;
};

inline constexpr int kRiskModule = 0;

struct Corpus {
  Vocabulary vocab;
  std::vector<PatientRecord> records;
};

inline std::string module_code_name(std::size_t module, std::size_t k) {
  return "M" + std::to_string(module) + "_C" + std::to_string(k);
}

inline std::string background_code_name(std::size_t k) { return "BG" + std::to_string(k); }

inline void validate(const GenConfig& cfg) {
  if (cfg.modules < 2) throw ConfigError("gen: module count must be at least 2");
  if (cfg.codes_per_module < 1) throw ConfigError("gen: codes per module must be positive");
  if (cfg.vocab_size < cfg.modules * cfg.codes_per_module)
    throw ConfigError("gen: vocabulary smaller than modules x codes-per-module");
  if (cfg.patients < 1) throw ConfigError("gen: patient count must be positive");
  if (!(cfg.positive_rate > 0.0 && cfg.positive_rate < 1.0))
    throw ConfigError("gen: positive rate must lie in (0, 1)");
  if (!(cfg.noise_rate >= 0.0 && cfg.noise_rate <= 1.0))
    throw ConfigError("gen: noise rate must lie in [0, 1]");
  if (cfg.p_max < 2) throw ConfigError("gen: p_max must be at least 2");
  if (cfg.c_max < 1) throw ConfigError("gen: c_max must be positive");
  if (cfg.min_gap_hours <= 0.0 || cfg.max_gap_hours < cfg.min_gap_hours)
    throw ConfigError("gen: encounter gaps must satisfy 0 < min <= max");
}

// Number of encounters holding at least one planted risk-module code.
inline std::size_t risk_encounter_count(const PatientRecord& r) {
  if (!r.planted) return 0;
  std::size_t count = 0;
  for (const auto& e : r.encounters) {
    for (const auto& c : e.codes) {
      auto it = r.planted->find(c);
      if (it != r.planted->end() && it->second == kRiskModule) {
        ++count;
        break;
      }
    }
  }
  return count;
}

inline bool satisfies_risk_rule(const PatientRecord& r) { return risk_encounter_count(r) >= 2; }

namespace detail {

// `count` distinct encounter indices out of `n`, ascending.
inline std::vector<std::size_t> pick_encounters(Rng& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<std::size_t> sample_presence(Rng& rng, std::size_t n, double p) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < n; ++k)
    if (rng.bernoulli(p)) out.push_back(k);
  if (out.empty()) out.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)));
  return out;
}

inline PatientRecord generate_patient(const GenConfig& cfg, std::size_t index) {
  Rng rng(mix_seed(cfg.seed, index));
  PatientRecord rec;
  rec.id = "P" + std::to_string(index);

  const bool rule = rng.bernoulli(cfg.positive_rate);
  const auto p_max = static_cast<std::int64_t>(cfg.p_max);
  const auto n_enc = static_cast<std::size_t>(rule ? rng.uniform_int(2, p_max) : rng.uniform_int(1, p_max));

  // module -> encounters it appears in
  std::map<std::size_t, std::vector<std::size_t>> presence;
  auto other_module = [&](std::size_t avoid) {
    std::size_t m;
    do {
      m = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(cfg.modules) - 1));
    } while (m == avoid && cfg.modules > 2);
    return m;
  };
  bool with_risk = false;
  if (rule) {
    const auto count = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(n_enc)));
    presence[kRiskModule] = pick_encounters(rng, n_enc, count);
    with_risk = true;
  } else if (rng.bernoulli(cfg.decoy_prob)) {
    presence[kRiskModule] = pick_encounters(rng, n_enc, 1);
    with_risk = true;
  }
  const std::size_t first = other_module(0);
  if (!with_risk || rng.bernoulli(cfg.second_module_prob))
    presence[first] = sample_presence(rng, n_enc, cfg.presence_prob);
  if (!with_risk && rng.bernoulli(cfg.second_module_prob)) {
    const std::size_t second = other_module(first);
    if (second != first) presence[second] = sample_presence(rng, n_enc, cfg.presence_prob);
  }

  const std::size_t n_background = cfg.vocab_size - cfg.modules * cfg.codes_per_module;
  std::map<std::string, int> planted;
  double t = 0.0;
  for (std::size_t p = 0; p < n_enc; ++p) {
    if (p > 0) t += std::round(rng.uniform(cfg.min_gap_hours, cfg.max_gap_hours));
    Encounter e;
    e.t_hours = t;
    for (const auto& [module, encs] : presence) {
      if (!std::binary_search(encs.begin(), encs.end(), p)) continue;
      std::vector<std::size_t> chosen;
      for (std::size_t k = 0; k < cfg.codes_per_module; ++k)
        if (rng.bernoulli(cfg.code_prob)) chosen.push_back(k);
      if (chosen.empty())
        chosen.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.codes_per_module) - 1)));
      for (std::size_t k : chosen) {
        e.codes.push_back(module_code_name(module, k));
        planted[e.codes.back()] = static_cast<int>(module);
      }
    }
    if (n_background > 0) {
      const auto count = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(std::min(cfg.background_max, n_background))));
      std::vector<std::size_t> pool(n_background);
      std::iota(pool.begin(), pool.end(), 0);
      rng.shuffle(pool);
      for (std::size_t k = 0; k < count; ++k) e.codes.push_back(background_code_name(pool[k]));
    }
    rng.shuffle(e.codes);
    rec.encounters.push_back(std::move(e));
  }
  rec.planted = std::move(planted);
  rec.label = rng.bernoulli(cfg.noise_rate) ? (rng.bernoulli(cfg.positive_rate) ? 1 : 0) : (rule ? 1 : 0);
  return rec;
}

}  // namespace detail

inline Corpus generate_synthetic_corpus(const GenConfig& cfg) {
  validate(cfg);
  Corpus corpus;
  for (std::size_t m = 0; m < cfg.modules; ++m)
    for (std::size_t k = 0; k < cfg.codes_per_module; ++k) corpus.vocab.add(module_code_name(m, k));
  for (std::size_t k = 0; k < cfg.vocab_size - cfg.modules * cfg.codes_per_module; ++k)
    corpus.vocab.add(background_code_name(k));
  corpus.records.reserve(cfg.patients);
  for (std::size_t i = 0; i < cfg.patients; ++i) corpus.records.push_back(detail::generate_patient(cfg, i));
  return corpus;
}

// ---------------------------------------------------------------------------
// Co-occurrence

// CO(i, j) = P(code i in encounter p2 | code j in encounter p1), p1 <= p2.
struct CoOccurrenceMatrix {
  Matrix<double> values;
  // pair_counts(i, j): ordered (j earlier-or-same, i later-or-same) pairs.
  Matrix<double> pair_counts;
  // Encounters containing each code.
  std::vector<double> occurrences;
  std::string vocab_hash;

  [[nodiscard]] std::size_t size() const { return values.rows; }
};

// Counts every (patient, p1 <= p2, j in V_p1, i in V_p2) tuple once, except
// the pairing of one occurrence with itself. Entries are clamped to [0, 1].
inline CoOccurrenceMatrix estimate_co_occurrence(const std::vector<PatientRecord>& records,
                                                 const Vocabulary& vocab) {
  if (records.empty()) throw InputError("co-occurrence: no training records");
  const std::size_t n = vocab.size();
  CoOccurrenceMatrix co;
  co.values = Matrix<double>(n, n);
  co.pair_counts = Matrix<double>(n, n);
  co.occurrences.assign(n, 0.0);
  co.vocab_hash = vocab.hash();
  std::vector<std::vector<std::size_t>> ids;
  for (const auto& r : records) {
    ids.clear();
    for (const auto& e : r.encounters) {
      ids.emplace_back();
      for (const auto& c : e.codes) {
        const std::size_t id = vocab.id(c);
        if (id == kPadIndex) throw InputError("co-occurrence: PAD inside an encounter");
        ids.back().push_back(id);
        co.occurrences[id] += 1.0;
      }
    }
    for (std::size_t p1 = 0; p1 < ids.size(); ++p1)
      for (std::size_t p2 = p1; p2 < ids.size(); ++p2)
        for (std::size_t j : ids[p1])
          for (std::size_t i : ids[p2])
            if (p1 != p2 || i != j) co.pair_counts(i, j) += 1.0;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (co.occurrences[j] > 0.0)
        co.values(i, j) = std::min(1.0, co.pair_counts(i, j) / co.occurrences[j]);
  return co;
}

// Position-level attention seed: CO looked up by code pair where the mask
// allows, each non-empty row renormalized to 1 (uniform over the allowed
// entries when every looked-up value is zero).
template <typename T>
Matrix<T> gather_co_attention(const CoOccurrenceMatrix& co, const EncodedPatient& enc,
                              const AttentionMask& mask) {
  const std::size_t n = enc.seq_len();
  if (mask.size != n) throw ShapeError("gather_co_attention: mask built for another sequence");
  Matrix<T> g(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    std::size_t allowed = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.allows(i, j)) continue;
      ++allowed;
      const double v = co.values(enc.code_ids[i], enc.code_ids[j]);
      g(i, j) = static_cast<T>(v);
      total += v;
    }
    if (allowed == 0) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.allows(i, j)) continue;
      g(i, j) = total > 0.0 ? static_cast<T>(co.values(enc.code_ids[i], enc.code_ids[j]) / total)
                            : static_cast<T>(1.0 / static_cast<double>(allowed));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Folds

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Stratified k-fold partition over binary labels.
inline std::vector<Fold> kfold_split(const std::vector<int>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold: k must be at least 2");
  if (labels.size() < k) throw ConfigError("kfold: fewer records than folds");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InputError("kfold: labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  for (int c = 0; c < 2; ++c)
    if (by_class[c].size() < k)
      throw ConfigError("kfold: class " + std::to_string(c) + " has fewer members than folds");
  Rng rng(seed);
  std::vector<std::size_t> assignment(labels.size());
  std::size_t slot = 0;
  for (auto& members : by_class) {
    rng.shuffle(members);
    for (std::size_t idx : members) assignment[idx] = slot++ % k;
  }
  std::vector<Fold> folds(k);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t f = 0; f < k; ++f) (assignment[i] == f ? folds[f].test : folds[f].train).push_back(i);
  return folds;
}

inline std::vector<Fold> kfold_split(const std::vector<PatientRecord>& records, std::size_t k,
                                     std::uint64_t seed) {
  std::vector<int> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(r.label);
  return kfold_split(labels, k, seed);
}

// ---------------------------------------------------------------------------
// Files

inline nlohmann::json to_json(const PatientRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["label"] = r.label;
  j["encounters"] = nlohmann::json::array();
  for (const auto& e : r.encounters) j["encounters"].push_back({{"t_hours", e.t_hours}, {"codes", e.codes}});
  j["planted"] = r.planted ? nlohmann::json(*r.planted) : nlohmann::json(nullptr);
  return j;
}

inline PatientRecord record_from_json(const nlohmann::json& j) {
  PatientRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.label = j.at("label").get<int>();
    for (const auto& e : j.at("encounters"))
      r.encounters.push_back({e.at("t_hours").get<double>(), e.at("codes").get<std::vector<std::string>>()});
    if (j.contains("planted") && !j["planted"].is_null())
      r.planted = j["planted"].get<std::map<std::string, int>>();
  } catch (const nlohmann::json::exception& ex) {
    throw InputError(std::string("corpus record: ") + ex.what());
  }
  validate_record(r);
  return r;
}

inline std::string corpus_to_jsonl(const std::vector<PatientRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<PatientRecord> corpus_from_jsonl(const std::string& text) {
  std::vector<PatientRecord> records;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw InputError("corpus line " + std::to_string(line_no) + ": invalid JSON");
    records.push_back(record_from_json(j));
  }
  return records;
}

inline std::string vocab_to_json(const Vocabulary& v) { return nlohmann::json(v.codes()).dump(1) + "\n"; }

inline Vocabulary vocab_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_array()) throw InputError("vocabulary: expected a JSON array of strings");
  return Vocabulary(j.get<std::vector<std::string>>());
}

// CSV dump: a header line carrying the vocabulary hash, then one row per code.
inline std::string co_to_csv(const CoOccurrenceMatrix& co) {
  std::ostringstream out;
  out << "# deepj-co v1 vocab_sha256=" << co.vocab_hash << " size=" << co.size() << '\n';
  out << std::setprecision(17);
  for (std::size_t i = 0; i < co.size(); ++i) {
    for (std::size_t j = 0; j < co.size(); ++j) {
      if (j) out << ',';
      out << co.values(i, j);
    }
    out << '\n';
  }
  return out.str();
}

inline CoOccurrenceMatrix co_from_csv(const std::string& text, const Vocabulary& vocab) {
  std::istringstream in(text);
  std::string header;
  std::getline(in, header);
  const std::string tag = "vocab_sha256=";
  const auto pos = header.find(tag);
  if (header.rfind("# deepj-co v1", 0) != 0 || pos == std::string::npos)
    throw InputError("co matrix: missing header");
  const std::string hash = header.substr(pos + tag.size(), 64);
  if (hash != vocab.hash()) throw InputError("co matrix: vocabulary hash mismatch");
  CoOccurrenceMatrix co;
  co.vocab_hash = hash;
  const std::size_t n = vocab.size();
  co.values = Matrix<double>(n, n);
  std::string line;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw InputError("co matrix: too few rows");
    std::istringstream row(line);
    std::string cell;
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::getline(row, cell, ',')) throw InputError("co matrix: too few columns");
      co.values(i, j) = std::stod(cell);
    }
  }
  return co;
}

}  // namespace deepj
