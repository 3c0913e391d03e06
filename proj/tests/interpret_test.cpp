// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include "deepj/interpret.hpp"
#include "deepj/train.hpp"
#include "dot_grammar.hpp"
#include "model_fixtures.hpp"

using namespace deepj;
using deepj::testing::dot_parse_error;
using deepj::testing::jitter;

namespace {

GenConfig small_gen(std::uint64_t seed, std::size_t patients = 20) {
  GenConfig g;
  g.modules = 3;
  g.codes_per_module = 3;
  g.vocab_size = 12;
  g.patients = patients;
  g.p_max = 3;
  g.c_max = 4;
  g.positive_rate = 0.3;
  g.seed = seed;
  return g;
}

ModelConfig small_model(const std::vector<PatientRecord>& records) {
  ModelConfig cfg;
  cfg.gsl.d_model = 4;
  cfg.gsl.blocks = 2;
  cfg.gsl.p_max = 3;
  cfg.gsl.c_max = 4;
  cfg.gsl.ffn_hidden = 8;
  cfg.gsl.t_max = fit_t_max(records, cfg.gsl.p_max);
  cfg.cmd.cluster_sizes = {4, 2};
  cfg.classifier_hidden = 4;
  return cfg;
}

class InterpretCorpus : public ::testing::Test {
 protected:
  Corpus corpus = generate_synthetic_corpus(small_gen(3));
  ModelConfig cfg = small_model(corpus.records);
  CoOccurrenceMatrix co = estimate_co_occurrence(corpus.records, corpus.vocab);
  Model<double> model = init_model<double>(cfg, corpus.vocab, 8);

  void SetUp() override { jitter(model, 9, 0.5); }

  ForwardResult<double> run(const PatientRecord& r, Mode mode = Mode::full) const {
    return forward(r, model, corpus.vocab, co, mode);
  }
  EncodedPatient encode(const PatientRecord& r) const {
    return encode_patient(r, cfg.gsl.p_max, cfg.gsl.c_max, corpus.vocab);
  }
};

std::size_t naive_argmax(const Matrix<double>& m, std::size_t row) {
  std::size_t best = 0;
  double value = m(row, 0);
  for (std::size_t c = 1; c < m.cols; ++c)
    if (m(row, c) > value) {
      value = m(row, c);
      best = c;
    }
  return best;
}

}  // namespace

TEST(ModuleAssignments, OneHotRecoversPlantedAssignment) {
  Matrix<double> pi(4, 3);
  const std::vector<std::size_t> planted{2, 0, 1, 2};
  for (std::size_t i = 0; i < 4; ++i) pi(i, planted[i]) = 1.0;
  const auto m = module_assignments(pi, {true, true, true, true});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(m.at(i), planted[i]);
}

TEST(ModuleAssignments, TiesGoToLowestIndexAndInvalidRowsAreAbsent) {
  Matrix<double> pi(3, 4, 0.25);
  pi(2, 1) = 0.5;
  pi(2, 3) = 0.5;
  const auto m = module_assignments(pi, {true, false, true});
  EXPECT_EQ(m.size(), 2u);
  EXPECT_EQ(m.at(0), 0u);
  EXPECT_EQ(m.at(2), 1u);
  EXPECT_EQ(m.count(1), 0u);
}

TEST_F(InterpretCorpus, AssignmentFollowsCodesUnderWithinEncounterShuffle) {
  Rng rng(12);
  for (std::size_t k = 0; k < 8; ++k) {
    const auto& base = corpus.records[k];
    const auto base_enc = encode(base);
    const auto base_modules = module_assignments(run(base).prediction.chain);
    for (int trial = 0; trial < 3; ++trial) {
      PatientRecord shuffled = base;
      for (auto& e : shuffled.encounters) rng.shuffle(e.codes);
      const auto enc = encode(shuffled);
      const auto modules = module_assignments(run(shuffled).prediction.chain);
      ASSERT_EQ(modules.size(), base_modules.size());
      for (const auto& [pos, m] : modules) {
        std::size_t original = enc.seq_len();
        for (std::size_t q = 0; q < base_enc.seq_len(); ++q)
          if (!base_enc.is_pad[q] && base_enc.enc_index[q] == enc.enc_index[pos] &&
              base_enc.code_ids[q] == enc.code_ids[pos])
            original = q;
        ASSERT_LT(original, enc.seq_len());
        EXPECT_EQ(m, base_modules.at(original));
      }
    }
  }
}

TEST_F(InterpretCorpus, PatientGraphRespectsContract) {
  for (const auto& r : corpus.records) {
    const auto res = run(r);
    const auto enc = encode(r);
    const auto e = extract_patient_graph(res.prediction, enc, corpus.vocab);
    EXPECT_EQ(e.threshold, 0.1);
    EXPECT_EQ(e.nodes.size(), enc.valid_count());
    for (const auto& n : e.nodes) {
      EXPECT_LT(n.module, cfg.cmd.final_clusters());
      EXPECT_EQ(n.code, corpus.vocab.code(enc.code_ids[n.position]));
      EXPECT_EQ(n.encounter, enc.enc_index[n.position]);
    }
    for (const auto& x : e.edges) {
      EXPECT_LE(enc.enc_index[x.from], enc.enc_index[x.to]) << "future to past edge";
      EXPECT_NE(x.from, x.to);
      EXPECT_GE(x.weight, 0.1);
      EXPECT_EQ(x.weight, res.prediction.gsl.adjacency(x.to, x.from));
    }
    double total = 0;
    ASSERT_EQ(e.module_weights.size(), res.prediction.alpha.cols());
    for (std::size_t g = 0; g < e.module_weights.size(); ++g) {
      EXPECT_EQ(e.module_weights[g], res.prediction.alpha(0, g));
      total += e.module_weights[g];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    ASSERT_EQ(e.encounters.size(), enc.n_encounters);
    EXPECT_EQ(e.encounters.front().gap_hours, 0.0);
    for (std::size_t p = 1; p < e.encounters.size(); ++p)
      EXPECT_DOUBLE_EQ(e.encounters[p].gap_hours, e.encounters[p].t_hours - e.encounters[p - 1].t_hours);
  }
}

TEST_F(InterpretCorpus, ThresholdAboveOneGivesNoEdges) {
  const auto& r = corpus.records[0];
  const auto e = extract_patient_graph(run(r).prediction, encode(r), corpus.vocab, 1.01);
  EXPECT_TRUE(e.edges.empty());
  EXPECT_FALSE(e.nodes.empty());
}

TEST_F(InterpretCorpus, ZeroThresholdKeepsEveryNonzeroEdge) {
  const auto& r = corpus.records[1];
  const auto res = run(r);
  const auto enc = encode(r);
  const auto e = extract_patient_graph(res.prediction, enc, corpus.vocab, 0.0);
  std::size_t expected = 0;
  for (std::size_t i = 0; i < enc.seq_len(); ++i)
    for (std::size_t j = 0; j < enc.seq_len(); ++j)
      if (i != j && !enc.is_pad[i] && !enc.is_pad[j] && res.prediction.gsl.adjacency(i, j) > 0) ++expected;
  EXPECT_EQ(e.edges.size(), expected);
  for (const auto& x : e.edges) EXPECT_LE(enc.enc_index[x.from], enc.enc_index[x.to]);
}

TEST_F(InterpretCorpus, NoCmdPredictionRejected) {
  const auto& r = corpus.records[0];
  EXPECT_THROW(extract_patient_graph(run(r, Mode::no_cmd).prediction, encode(r), corpus.vocab), UsageError);
  EXPECT_THROW(edge_statistics(corpus.records, model, corpus.vocab, co, 0.1, Mode::no_cmd), UsageError);
}

TEST_F(InterpretCorpus, EdgeStatisticsMatchNaiveLoop) {
  const double threshold = 0.05;
  const auto stats = edge_statistics(corpus.records, model, corpus.vocab, co, threshold);
  // Oracle: every (src, dst, relation) over the vocabulary, scanning positions per patient.
  struct Acc {
    std::size_t eligible = 0;
    std::vector<double> w;
  };
  std::map<std::tuple<std::string, std::string, int>, Acc> oracle;
  for (const auto& r : corpus.records) {
    const auto enc = encode(r);
    const auto a = run(r).prediction.gsl.adjacency.value();
    for (std::size_t s = 1; s < corpus.vocab.size(); ++s)
      for (std::size_t d = 1; d < corpus.vocab.size(); ++d)
        for (int rel = 0; rel < 2; ++rel) {
          bool eligible = false;
          double best = -1;
          for (std::size_t j = 0; j < enc.seq_len(); ++j)
            for (std::size_t i = 0; i < enc.seq_len(); ++i) {
              if (i == j || enc.is_pad[i] || enc.is_pad[j]) continue;
              if (enc.code_ids[j] != s || enc.code_ids[i] != d) continue;
              const bool ok = rel == 0 ? enc.enc_index[j] == enc.enc_index[i] : enc.enc_index[j] < enc.enc_index[i];
              if (!ok) continue;
              eligible = true;
              best = std::max(best, a(i, j));
            }
          if (!eligible) continue;
          auto& slot = oracle[{corpus.vocab.code(s), corpus.vocab.code(d), rel}];
          ++slot.eligible;
          if (best >= threshold) slot.w.push_back(best);
        }
  }
  ASSERT_EQ(stats.rows.size(), oracle.size());
  std::size_t with_hits = 0;
  for (const auto& [key, slot] : oracle) {
    const auto* row = stats.find(std::get<0>(key), std::get<1>(key),
                                 std::get<2>(key) == 0 ? Relation::intra : Relation::inter);
    ASSERT_NE(row, nullptr);
    EXPECT_EQ(row->eligible, slot.eligible);
    EXPECT_EQ(row->hits, slot.w.size());
    EXPECT_EQ(row->prevalence, static_cast<double>(slot.w.size()) / static_cast<double>(slot.eligible));
    EXPECT_GE(row->prevalence, 0.0);
    EXPECT_LE(row->prevalence, 1.0);
    EXPECT_GE(row->std_w, 0.0);
    double mean = 0, var = 0;
    for (double w : slot.w) mean += w;
    if (!slot.w.empty()) mean /= static_cast<double>(slot.w.size());
    for (double w : slot.w) var += (w - mean) * (w - mean);
    if (!slot.w.empty()) var /= static_cast<double>(slot.w.size());
    EXPECT_NEAR(row->mean_w, mean, 1e-10);
    EXPECT_NEAR(row->std_w, std::sqrt(var), 1e-10);
    if (!slot.w.empty()) ++with_hits;
  }
  EXPECT_GT(with_hits, 0u);
}

TEST_F(InterpretCorpus, EdgeStatisticsOmitPairsThatNeverCoOccur) {
  std::vector<PatientRecord> two{corpus.records[0], corpus.records[1]};
  const auto stats = edge_statistics(two, model, corpus.vocab, co);
  std::set<std::string> present;
  for (const auto& r : two)
    for (const auto& e : encode(r).code_ids)
      if (e != kPadIndex) present.insert(corpus.vocab.code(e));
  for (std::size_t c = 1; c < corpus.vocab.size(); ++c) {
    const auto& code = corpus.vocab.code(c);
    if (present.count(code)) continue;
    for (const auto& row : stats.rows) {
      EXPECT_NE(row.src, code);
      EXPECT_NE(row.dst, code);
    }
  }
}

TEST_F(InterpretCorpus, EdgeStatisticsTopOrdering) {
  const auto stats = edge_statistics(corpus.records, model, corpus.vocab, co);
  for (Relation rel : {Relation::intra, Relation::inter}) {
    const auto top = stats.top(rel, 8);
    EXPECT_LE(top.size(), 8u);
    for (std::size_t i = 0; i < top.size(); ++i) {
      EXPECT_EQ(top[i].relation, rel);
      if (i > 0) {
        EXPECT_GE(top[i - 1].prevalence, top[i].prevalence);
      }
    }
  }
  EXPECT_THROW(edge_statistics({}, model, corpus.vocab, co), InputError);
}

TEST_F(InterpretCorpus, CoClusterCountsMatchNaiveLoop) {
  for (const std::string target : {"M0_C0", "M1_C1", "M2_C2"}) {
    const std::size_t t = corpus.vocab.id(target);
    std::map<std::string, std::size_t> oracle;
    std::size_t holders = 0;
    for (const auto& r : corpus.records) {
      const auto enc = encode(r);
      bool has = false;
      for (std::size_t i = 0; i < enc.seq_len(); ++i) has = has || (!enc.is_pad[i] && enc.code_ids[i] == t);
      if (!has) continue;
      ++holders;
      const auto pi = run(r).prediction.chain.assignment;
      for (std::size_t c = 1; c < corpus.vocab.size(); ++c) {
        if (c == t) continue;
        bool together = false;
        for (std::size_t p = 0; p < enc.seq_len(); ++p)
          for (std::size_t q = 0; q < enc.seq_len(); ++q)
            if (!enc.is_pad[p] && !enc.is_pad[q] && enc.code_ids[p] == c && enc.code_ids[q] == t &&
                naive_argmax(pi, p) == naive_argmax(pi, q))
              together = true;
        if (together) ++oracle[corpus.vocab.code(c)];
      }
    }
    const auto all = co_cluster_statistics(corpus.records, model, corpus.vocab, co, target, 100);
    EXPECT_EQ(all.patients, holders);
    ASSERT_EQ(all.top.size(), oracle.size()) << target;
    for (const auto& c : all.top) EXPECT_EQ(c.patients, oracle.at(c.code)) << target << " " << c.code;
    for (std::size_t i = 1; i < all.top.size(); ++i) {
      const auto& a = all.top[i - 1];
      const auto& b = all.top[i];
      EXPECT_TRUE(a.patients > b.patients || (a.patients == b.patients && a.code < b.code));
    }
    const auto top5 = co_cluster_statistics(corpus.records, model, corpus.vocab, co, target);
    EXPECT_EQ(top5.top.size(), std::min<std::size_t>(5, oracle.size()));
  }
}

TEST_F(InterpretCorpus, CoClusterEdgeCases) {
  EXPECT_THROW(co_cluster_statistics(corpus.records, model, corpus.vocab, co, "nope"), InputError);
  EXPECT_THROW(co_cluster_statistics(corpus.records, model, corpus.vocab, co, "PAD"), InputError);
  std::vector<PatientRecord> without;
  for (const auto& r : corpus.records) {
    bool has = false;
    for (const auto& e : r.encounters)
      for (const auto& c : e.codes) has = has || c == "M0_C0";
    if (!has) without.push_back(r);
  }
  ASSERT_FALSE(without.empty());
  const auto s = co_cluster_statistics(without, model, corpus.vocab, co, "M0_C0");
  EXPECT_EQ(s.patients, 0u);
  EXPECT_TRUE(s.top.empty());
}

TEST(AdjustedRandIndex, KnownValues) {
  EXPECT_DOUBLE_EQ(adjusted_rand_index({0, 0, 1, 1}, {0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}), 1.0);
  EXPECT_NEAR(adjusted_rand_index({0, 0, 1, 1}, {0, 0, 1, 2}), 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(adjusted_rand_index({0, 0, 1, 1}, {0, 1, 0, 1}), -0.5, 1e-15);
  EXPECT_DOUBLE_EQ(adjusted_rand_index({0, 0, 0}, {1, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(adjusted_rand_index({0, 1, 2}, {5, 6, 7}), 1.0);
  EXPECT_THROW(adjusted_rand_index({0}, {0, 1}), InputError);
}

TEST(AdjustedRandIndex, MatchesPairCountOracle) {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(3, 22));
    std::vector<int> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<int>(rng.uniform_int(0, 3));
      b[i] = static_cast<int>(rng.uniform_int(0, 2));
    }
    double tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const bool sa = a[i] == a[j], sb = b[i] == b[j];
        if (sa && sb) {
          ++tp;
        } else if (sa) {
          ++fp;
        } else if (sb) {
          ++fn;
        } else {
          ++tn;
        }
      }
    // Hubert-Arabie form on the pair table.
    const double total = tp + fp + fn + tn;
    const double expected = (tp + fp) * (tp + fn) / total;
    const double max_index = ((tp + fp) + (tp + fn)) / 2;
    if (max_index == expected) continue;
    EXPECT_NEAR(adjusted_rand_index(a, b), (tp - expected) / (max_index - expected), 1e-12);
  }
}

TEST_F(InterpretCorpus, PlantedAriUsesOnlyPlantedCodes) {
  for (const auto& r : corpus.records) {
    const auto ari = planted_module_ari(run(r).prediction, encode(r), r, corpus.vocab);
    if (ari) {
      EXPECT_GE(*ari, -1.0);
      EXPECT_LE(*ari, 1.0);
    }
  }
  PatientRecord bare = corpus.records[0];
  bare.planted.reset();
  EXPECT_THROW(planted_module_ari(run(bare).prediction, encode(bare), bare, corpus.vocab), InputError);
}

TEST(DotRecognizer, AcceptsAndRejects) {
  EXPECT_EQ(dot_parse_error("digraph {}"), "");
  EXPECT_EQ(dot_parse_error("strict digraph \"g\" { a -> b -> c [w=1, x=\"y\"]; subgraph cluster_0 { a; } }"), "");
  EXPECT_NE(dot_parse_error("digraph { a -- b }"), "");
  EXPECT_NE(dot_parse_error("digraph { a -> }"), "");
  EXPECT_NE(dot_parse_error("digraph { a [w=] }"), "");
  EXPECT_NE(dot_parse_error("digraph { \"open }"), "");
  EXPECT_NE(dot_parse_error("digraph { 1a }"), "");
  EXPECT_NE(dot_parse_error("digraph {"), "");
}

TEST(ExportGraph, EmptyGraphIsValidDot) {
  PatientGraphExplanation e;
  e.patient_id = "empty";
  const auto dot = export_graph(e, "dot");
  EXPECT_EQ(dot_parse_error(dot), "") << dot;
  EXPECT_EQ(dot.rfind("digraph", 0), 0u);
}

TEST_F(InterpretCorpus, DotParsesAndClustersByModule) {
  for (std::size_t k = 0; k < 5; ++k) {
    const auto& r = corpus.records[k];
    const auto e = extract_patient_graph(run(r).prediction, encode(r), corpus.vocab, 0.05);
    const auto dot = export_graph(e, "dot");
    EXPECT_EQ(dot_parse_error(dot), "") << dot;
    std::set<std::size_t> modules;
    for (const auto& n : e.nodes) modules.insert(n.module);
    for (std::size_t m : modules) EXPECT_NE(dot.find("subgraph cluster_" + std::to_string(m) + " "), std::string::npos);
    std::size_t arrows = 0;
    for (std::size_t p = dot.find("->"); p != std::string::npos; p = dot.find("->", p + 2)) ++arrows;
    EXPECT_EQ(arrows, e.edges.size());
    EXPECT_EQ(export_graph(e, "dot"), dot);
  }
}

TEST(ExportGraph, PenWidthGrowsWithWeight) {
  PatientGraphExplanation e;
  e.patient_id = "w";
  e.nodes = {{0, "a", 0, 0.0, 0}, {1, "b", 0, 0.0, 0}, {2, "c", 1, 24.0, 1}};
  e.edges = {{0, 2, 0.2}, {1, 2, 0.8}};
  e.module_weights = {0.3, 0.7};
  const auto dot = to_dot(e);
  EXPECT_NE(dot.find("n0 -> n2 [penwidth=1.800"), std::string::npos) << dot;
  EXPECT_NE(dot.find("n1 -> n2 [penwidth=4.200"), std::string::npos) << dot;
  EXPECT_EQ(dot_parse_error(dot), "");
}

TEST(ExportGraph, QuotesAreEscaped) {
  PatientGraphExplanation e;
  e.patient_id = "odd \"id\"";
  e.nodes = {{0, "x\"y", 0, 0.0, 0}};
  EXPECT_EQ(dot_parse_error(to_dot(e)), "");
}

TEST_F(InterpretCorpus, JsonRoundTripIsLossless) {
  for (std::size_t k = 0; k < 5; ++k) {
    const auto& r = corpus.records[k];
    const auto e = extract_patient_graph(run(r).prediction, encode(r), corpus.vocab, 0.0);
    const auto text = export_graph(e, "json");
    EXPECT_EQ(explanation_from_json(nlohmann::json::parse(text)), e);
  }
  EXPECT_THROW(explanation_from_json(nlohmann::json::object()), InputError);
}

TEST(ExportGraph, UnknownFormatRejected) {
  EXPECT_THROW(export_graph(PatientGraphExplanation{}, "png"), UsageError);
}

TEST_F(InterpretCorpus, CsvTablesCarryDocumentedColumns) {
  const auto stats = edge_statistics(corpus.records, model, corpus.vocab, co);
  const auto csv = edge_statistics_csv(stats);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "src_code,dst_code,relation,prevalence,mean_w,std_w");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), stats.rows.size() + 1);
  const auto cc = co_cluster_csv(co_cluster_statistics(corpus.records, model, corpus.vocab, co, "M0_C0"));
  EXPECT_EQ(cc.substr(0, cc.find('\n')), "target_code,code,patients,target_patients");
}
