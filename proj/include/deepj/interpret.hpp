// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepj/corpus.hpp"
#include "deepj/error.hpp"
#include "deepj/head.hpp"

namespace deepj {

inline constexpr double kDefaultEdgeThreshold = 0.1;

// Module id per position: argmax of the composed assignment row, lowest
// index on ties. Invalid positions are absent.
template <typename T>
std::map<std::size_t, std::size_t> module_assignments(const Matrix<T>& assignment, const std::vector<bool>& valid) {
  if (assignment.rows != valid.size()) throw ShapeError("module assignments: row count differs from positions");
  std::map<std::size_t, std::size_t> out;
  for (std::size_t i = 0; i < assignment.rows; ++i) {
    if (!valid[i]) continue;
    std::size_t best = 0;
    for (std::size_t r = 1; r < assignment.cols; ++r)
      if (assignment(i, r) > assignment(i, best)) best = r;
    out[i] = best;
  }
  return out;
}

template <typename T>
std::map<std::size_t, std::size_t> module_assignments(const PoolChain<T>& chain) {
  if (chain.empty()) throw UsageError("module assignments need a prediction with clinical modules");
  return module_assignments(chain.assignment, chain.valid.front());
}

struct ExplanationNode {
  std::size_t position = 0;
  std::string code;
  std::size_t encounter = 0;
  double t_hours = 0.0;
  std::size_t module = 0;

  bool operator==(const ExplanationNode&) const = default;
};

// Edge j → i: code j informs code i with weight A[i][j].
struct ExplanationEdge {
  std::size_t from = 0;
  std::size_t to = 0;
  double weight = 0.0;

  bool operator==(const ExplanationEdge&) const = default;
};

struct EncounterInterval {
  std::size_t encounter = 0;
  double t_hours = 0.0;
  // Hours since the previous kept encounter; 0 for the first.
  double gap_hours = 0.0;

  bool operator==(const EncounterInterval&) const = default;
};

struct PatientGraphExplanation {
  std::string patient_id;
  int label = 0;
  double probability = 0.0;
  double threshold = kDefaultEdgeThreshold;
  std::vector<ExplanationNode> nodes;
  std::vector<ExplanationEdge> edges;
  std::vector<double> module_weights;
  std::vector<EncounterInterval> encounters;

  bool operator==(const PatientGraphExplanation&) const = default;
};

// Edges come from the last attention block; self-loops and zero weights
// are left out.
template <typename T>
PatientGraphExplanation extract_patient_graph(const Prediction<T>& pred, const EncodedPatient& enc,
                                              const Vocabulary& vocab, double threshold = kDefaultEdgeThreshold) {
  if (pred.mode == Mode::no_cmd || pred.chain.empty())
    throw UsageError("explanations need clinical modules; the prediction was made without them");
  const auto modules = module_assignments(pred.chain);
  PatientGraphExplanation out;
  out.patient_id = enc.id;
  out.label = enc.label;
  out.probability = pred.probability;
  out.threshold = threshold;
  for (const auto& [pos, module] : modules)
    out.nodes.push_back({pos, vocab.code(enc.code_ids[pos]), enc.enc_index[pos], enc.time[pos], module});
  const auto& a = pred.gsl.adjacency.value();
  for (const auto& [i, mi] : modules)
    for (const auto& [j, mj] : modules) {
      if (i == j) continue;
      const double w = static_cast<double>(a(i, j));
      if (w > 0 && w >= threshold) out.edges.push_back({j, i, w});
    }
  std::sort(out.edges.begin(), out.edges.end(), [](const ExplanationEdge& x, const ExplanationEdge& y) {
    return std::tie(x.from, x.to) < std::tie(y.from, y.to);
  });
  for (T w : pred.alpha.value().data) out.module_weights.push_back(static_cast<double>(w));
  for (std::size_t p = 0; p < enc.n_encounters; ++p) {
    const double t = enc.time[p * enc.c_max];
    out.encounters.push_back({p, t, p == 0 ? 0.0 : t - enc.time[(p - 1) * enc.c_max]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Population statistics

enum class Relation { intra, inter };

inline std::string to_string(Relation r) { return r == Relation::intra ? "intra" : "inter"; }

struct EdgeStat {
  std::string src;
  std::string dst;
  Relation relation = Relation::intra;
  // Patients with src and dst in the relation / those whose edge met the threshold.
  std::size_t eligible = 0;
  std::size_t hits = 0;
  double prevalence = 0.0;
  // Over the patients that met the threshold; population std.
  double mean_w = 0.0;
  double std_w = 0.0;
};

struct EdgeStatistics {
  double threshold = kDefaultEdgeThreshold;
  // Ordered by (relation, src, dst).
  std::vector<EdgeStat> rows;

  // Highest prevalence first, then mean weight, then code strings.
  [[nodiscard]] std::vector<EdgeStat> top(Relation relation, std::size_t k) const {
    std::vector<EdgeStat> out;
    for (const auto& r : rows)
      if (r.relation == relation) out.push_back(r);
    std::sort(out.begin(), out.end(), [](const EdgeStat& a, const EdgeStat& b) {
      if (a.prevalence != b.prevalence) return a.prevalence > b.prevalence;
      if (a.mean_w != b.mean_w) return a.mean_w > b.mean_w;
      return std::tie(a.src, a.dst) < std::tie(b.src, b.dst);
    });
    if (out.size() > k) out.resize(k);
    return out;
  }

  [[nodiscard]] const EdgeStat* find(const std::string& src, const std::string& dst, Relation relation) const {
    for (const auto& r : rows)
      if (r.src == src && r.dst == dst && r.relation == relation) return &r;
    return nullptr;
  }
};

namespace detail {

template <typename T>
void check_explainable(const Model<T>& model, const Vocabulary& vocab, Mode mode) {
  if (mode == Mode::no_cmd) throw UsageError("statistics need clinical modules; use full or no-gsl mode");
  if (vocab.hash() != model.vocab_hash) throw InputError("vocabulary differs from the model's");
}

}  // namespace detail

// Per patient, each ordered code pair takes the largest weight over its
// position pairs (self-loops excluded); intra = same encounter, inter =
// strictly earlier → later.
template <typename T>
EdgeStatistics edge_statistics(const std::vector<PatientRecord>& records, const Model<T>& model,
                               const Vocabulary& vocab, const CoOccurrenceMatrix& co,
                               double threshold = kDefaultEdgeThreshold, Mode mode = Mode::full) {
  if (records.empty()) throw InputError("edge statistics: empty corpus");
  detail::check_explainable(model, vocab, mode);
  using Key = std::tuple<int, std::string, std::string>;
  struct Acc {
    std::size_t eligible = 0;
    std::vector<double> hits;
  };
  std::map<Key, Acc> acc;
  for (const auto& r : records) {
    const auto in = prepare_patient<T>(r, model.config, vocab, co);
    const auto res = forward(in, model, mode);
    const auto& a = res.prediction.gsl.adjacency.value();
    const auto& enc = in.enc;
    std::map<Key, double> best;
    for (std::size_t i = 0; i < enc.seq_len(); ++i) {
      if (enc.is_pad[i]) continue;
      for (std::size_t j = 0; j < enc.seq_len(); ++j) {
        if (enc.is_pad[j] || i == j || enc.enc_index[j] > enc.enc_index[i]) continue;
        const int rel = enc.enc_index[j] == enc.enc_index[i] ? 0 : 1;
        const Key key{rel, vocab.code(enc.code_ids[j]), vocab.code(enc.code_ids[i])};
        const double w = static_cast<double>(a(i, j));
        auto [it, inserted] = best.emplace(key, w);
        if (!inserted) it->second = std::max(it->second, w);
      }
    }
    for (const auto& [key, w] : best) {
      auto& slot = acc[key];
      ++slot.eligible;
      if (w >= threshold) slot.hits.push_back(w);
    }
  }
  EdgeStatistics out;
  out.threshold = threshold;
  for (const auto& [key, slot] : acc) {
    EdgeStat s;
    s.relation = std::get<0>(key) == 0 ? Relation::intra : Relation::inter;
    s.src = std::get<1>(key);
    s.dst = std::get<2>(key);
    s.eligible = slot.eligible;
    s.hits = slot.hits.size();
    s.prevalence = static_cast<double>(s.hits) / static_cast<double>(s.eligible);
    if (!slot.hits.empty()) {
      double sum = 0;
      for (double w : slot.hits) sum += w;
      s.mean_w = sum / static_cast<double>(s.hits);
      double ss = 0;
      for (double w : slot.hits) ss += (w - s.mean_w) * (w - s.mean_w);
      s.std_w = std::sqrt(ss / static_cast<double>(s.hits));
    }
    out.rows.push_back(std::move(s));
  }
  return out;
}

struct CodeCount {
  std::string code;
  std::size_t patients = 0;

  bool operator==(const CodeCount&) const = default;
};

struct CoClusterStatistics {
  std::string target;
  // Patients whose encoded input contains the target.
  std::size_t patients = 0;
  std::vector<CodeCount> top;
};

// For each patient holding `target`, every other code placed in a module
// that also holds the target counts once. Highest count first, ties by
// code string.
template <typename T>
CoClusterStatistics co_cluster_statistics(const std::vector<PatientRecord>& records, const Model<T>& model,
                                          const Vocabulary& vocab, const CoOccurrenceMatrix& co,
                                          const std::string& target, std::size_t k = 5, Mode mode = Mode::full) {
  detail::check_explainable(model, vocab, mode);
  if (!vocab.contains(target) || target == kPadCode) throw InputError("unknown target code \"" + target + "\"");
  const std::size_t target_id = vocab.id(target);
  CoClusterStatistics out;
  out.target = target;
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records) {
    const auto in = prepare_patient<T>(r, model.config, vocab, co);
    if (std::find(in.enc.code_ids.begin(), in.enc.code_ids.end(), target_id) == in.enc.code_ids.end()) continue;
    ++out.patients;
    const auto modules = module_assignments(forward(in, model, mode).prediction.chain);
    std::set<std::size_t> target_modules;
    for (const auto& [pos, m] : modules)
      if (in.enc.code_ids[pos] == target_id) target_modules.insert(m);
    std::set<std::string> seen;
    for (const auto& [pos, m] : modules)
      if (in.enc.code_ids[pos] != target_id && target_modules.count(m)) seen.insert(vocab.code(in.enc.code_ids[pos]));
    for (const auto& c : seen) ++counts[c];
  }
  for (const auto& [code, n] : counts) out.top.push_back({code, n});
  std::sort(out.top.begin(), out.top.end(), [](const CodeCount& a, const CodeCount& b) {
    if (a.patients != b.patients) return a.patients > b.patients;
    return a.code < b.code;
  });
  if (out.top.size() > k) out.top.resize(k);
  return out;
}

// Adjusted Rand index via pair counts. Identical partitions, including the
// all-singleton and single-cluster cases, score 1.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw InputError("adjusted rand index: label counts differ");
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1;
    ca[a[i]] += 1;
    cb[b[i]] += 1;
  }
  const double n = static_cast<double>(a.size());
  double sum_sq = 0, sum_a = 0, sum_b = 0;
  for (const auto& [key, v] : joint) sum_sq += v * v;
  for (const auto& [key, v] : ca) sum_a += v * v;
  for (const auto& [key, v] : cb) sum_b += v * v;
  const double tp = (sum_sq - n) / 2;
  const double fp = (sum_a - sum_sq) / 2;
  const double fn = (sum_b - sum_sq) / 2;
  const double tn = n * (n - 1) / 2 - tp - fp - fn;
  if (fn == 0 && fp == 0) return 1.0;
  return 2 * (tp * tn - fn * fp) / ((tp + fn) * (fn + tn) + (tp + fp) * (fp + tn));
}

// ARI between predicted modules and planted modules over the positions
// whose code has a planted module. Nullopt when fewer than two such
// positions exist.
template <typename T>
std::optional<double> planted_module_ari(const Prediction<T>& pred, const EncodedPatient& enc,
                                         const PatientRecord& record, const Vocabulary& vocab) {
  if (!record.planted) throw InputError("patient " + record.id + " has no planted modules");
  const auto modules = module_assignments(pred.chain);
  std::vector<int> predicted, planted;
  for (const auto& [pos, m] : modules) {
    auto it = record.planted->find(vocab.code(enc.code_ids[pos]));
    if (it == record.planted->end()) continue;
    predicted.push_back(static_cast<int>(m));
    planted.push_back(it->second);
  }
  if (predicted.size() < 2) return std::nullopt;
  return adjusted_rand_index(predicted, planted);
}

// ---------------------------------------------------------------------------
// Export

inline nlohmann::json to_json(const PatientGraphExplanation& e) {
  nlohmann::json nodes = nlohmann::json::array(), edges = nlohmann::json::array(),
                 encounters = nlohmann::json::array();
  for (const auto& n : e.nodes)
    nodes.push_back({{"position", n.position},
                     {"code", n.code},
                     {"encounter", n.encounter},
                     {"t_hours", n.t_hours},
                     {"module", n.module}});
  for (const auto& x : e.edges) edges.push_back({{"from", x.from}, {"to", x.to}, {"weight", x.weight}});
  for (const auto& x : e.encounters)
    encounters.push_back({{"encounter", x.encounter}, {"t_hours", x.t_hours}, {"gap_hours", x.gap_hours}});
  return {{"patient_id", e.patient_id}, {"label", e.label},         {"probability", e.probability},
          {"threshold", e.threshold},   {"module_weights", e.module_weights},
          {"nodes", nodes},             {"edges", edges},           {"encounters", encounters}};
}

inline PatientGraphExplanation explanation_from_json(const nlohmann::json& j) {
  try {
    PatientGraphExplanation e;
    e.patient_id = j.at("patient_id").get<std::string>();
    e.label = j.at("label").get<int>();
    e.probability = j.at("probability").get<double>();
    e.threshold = j.at("threshold").get<double>();
    e.module_weights = j.at("module_weights").get<std::vector<double>>();
    for (const auto& n : j.at("nodes"))
      e.nodes.push_back({n.at("position").get<std::size_t>(), n.at("code").get<std::string>(),
                         n.at("encounter").get<std::size_t>(), n.at("t_hours").get<double>(),
                         n.at("module").get<std::size_t>()});
    for (const auto& x : j.at("edges"))
      e.edges.push_back({x.at("from").get<std::size_t>(), x.at("to").get<std::size_t>(), x.at("weight").get<double>()});
    for (const auto& x : j.at("encounters"))
      e.encounters.push_back(
          {x.at("encounter").get<std::size_t>(), x.at("t_hours").get<double>(), x.at("gap_hours").get<double>()});
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw InputError(std::string("explanation json: ") + ex.what());
  }
}

namespace detail {

inline std::string dot_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace detail

// Nodes grouped into one cluster per module; pen width grows with weight.
inline std::string to_dot(const PatientGraphExplanation& e) {
  std::ostringstream out;
  out << "digraph " << detail::dot_quote("patient " + e.patient_id) << " {\n";
  if (e.nodes.empty() && e.edges.empty()) {
    out << "}\n";
    return out.str();
  }
  out << "  rankdir=LR;\n  node [shape=box];\n";
  std::map<std::size_t, std::vector<const ExplanationNode*>> by_module;
  for (const auto& n : e.nodes) by_module[n.module].push_back(&n);
  for (const auto& [module, members] : by_module) {
    std::string label = "module " + std::to_string(module);
    if (module < e.module_weights.size()) label += " (alpha " + detail::fixed(e.module_weights[module], 3) + ")";
    out << "  subgraph cluster_" << module << " {\n    label=" << detail::dot_quote(label) << ";\n";
    for (const auto* n : members)
      out << "    n" << n->position << " [label="
          << detail::dot_quote(n->code + " | enc " + std::to_string(n->encounter) + " @ " +
                               detail::fixed(n->t_hours, 1) + "h")
          << "];\n";
    out << "  }\n";
  }
  for (const auto& x : e.edges)
    out << "  n" << x.from << " -> n" << x.to << " [penwidth=" << detail::fixed(1.0 + 4.0 * x.weight, 3)
        << ", label=" << detail::dot_quote(detail::fixed(x.weight, 3)) << "];\n";
  out << "}\n";
  return out.str();
}

inline std::string export_graph(const PatientGraphExplanation& e, const std::string& format) {
  if (format == "dot") return to_dot(e);
  if (format == "json") return to_json(e).dump(2) + "\n";
  throw UsageError("unknown export format \"" + format + "\" (expected dot or json)");
}

inline std::string edge_statistics_csv(const EdgeStatistics& s) {
  std::ostringstream out;
  out << std::setprecision(10) << "src_code,dst_code,relation,prevalence,mean_w,std_w\n";
  for (const auto& r : s.rows)
    out << r.src << ',' << r.dst << ',' << to_string(r.relation) << ',' << r.prevalence << ',' << r.mean_w << ','
        << r.std_w << '\n';
  return out.str();
}

inline std::string co_cluster_csv(const CoClusterStatistics& s) {
  std::ostringstream out;
  out << "target_code,code,patients,target_patients\n";
  for (const auto& c : s.top) out << s.target << ',' << c.code << ',' << c.patients << ',' << s.patients << '\n';
  return out.str();
}

}  // namespace deepj
