// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "deepj/train.hpp"
#include "model_fixtures.hpp"
#include "test_util.hpp"

namespace deepj {
namespace {

using namespace deepj::testing;

// Independent threshold sweep: recount the confusion matrix at every
// distinct score, highest first.
Metrics brute_force_metrics(const std::vector<double>& s, const std::vector<int>& y, double threshold) {
  Metrics m;
  double tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool pred = s[i] >= threshold;
    if (pred && y[i]) ++tp;
    if (pred && !y[i]) ++fp;
    if (!pred && !y[i]) ++tn;
    if (!pred && y[i]) ++fn;
  }
  m.recall = (tp / (tp + fn) + tn / (tn + fp)) / 2;
  auto f1 = [](double t, double f_pos, double f_neg) {
    return 2 * t + f_pos + f_neg == 0 ? 0.0 : 2 * t / (2 * t + f_pos + f_neg);
  };
  m.f1 = (f1(tp, fp, fn) + f1(tn, fn, fp)) / 2;

  double pairs = 0, wins = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  m.auroc = wins / pairs;

  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double positives = 0;
  for (int l : y) positives += l;
  double prev = 0;
  for (double t : thresholds) {
    double hit = 0, called = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        called += 1;
        hit += y[i];
      }
    m.auprc += (hit / positives - prev) * (hit / called);
    prev = hit / positives;
  }
  return m;
}

TEST(Metrics, PerfectSeparation) {
  const auto m = evaluate({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1});
  EXPECT_EQ(m.auroc, 1.0);
  EXPECT_EQ(m.auprc, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.f1, 1.0);
}

TEST(Metrics, ConstantPredictorHasMacroRecallHalf) {
  EXPECT_EQ(macro_recall({0.3, 0.3, 0.3, 0.3}, {0, 1, 0, 1}), 0.5);
  std::vector<int> labels(1000, 0);
  std::fill(labels.begin(), labels.begin() + 75, 1);
  const std::vector<double> constant(labels.size(), 0.2);
  EXPECT_EQ(macro_recall(constant, labels), 0.5);
  EXPECT_EQ(auroc(constant, labels), 0.5);
  // All-negative calls at a 7.5% positive rate: F1 = (2·0.925/1.925)/2.
  EXPECT_NEAR(macro_f1(constant, labels), 0.4805, 1e-4);
}

TEST(Metrics, MatchBruteForceSweep) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + trial % 7;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse grid so ties are common.
      s[i] = std::round(uniform(rng, 0, 1) * 4) / 4;
      y[i] = uniform(rng, 0, 1) < 0.5 ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    const Metrics got = evaluate(s, y);
    const Metrics want = brute_force_metrics(s, y, 0.5);
    EXPECT_NEAR(got.recall, want.recall, 1e-12);
    EXPECT_NEAR(got.f1, want.f1, 1e-12);
    EXPECT_NEAR(got.auroc, want.auroc, 1e-12);
    EXPECT_NEAR(got.auprc, want.auprc, 1e-12);
  }
}

TEST(Metrics, AurocInvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(13);
  std::vector<double> s(40), t(40);
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    s[i] = uniform(rng, -3, 3);
    t[i] = std::exp(2 * s[i]) + 7;
    y[i] = i % 3 == 0;
  }
  EXPECT_DOUBLE_EQ(auroc(s, y), auroc(t, y));
  EXPECT_DOUBLE_EQ(auprc(s, y), auprc(t, y));
}

TEST(Metrics, Errors) {
  EXPECT_THROW(auroc({0.1, 0.2}, {1, 1}), InputError);
  EXPECT_THROW(auprc({0.1, 0.2}, {0, 0}), InputError);
  EXPECT_THROW(evaluate({0.1}, {0, 1}), InputError);
  EXPECT_THROW(evaluate({}, {}), InputError);
}

TEST(Metrics, TInterval) {
  const auto flat = t_interval({0.7, 0.7, 0.7});
  EXPECT_EQ(flat.low, 0.7);
  EXPECT_EQ(flat.high, 0.7);
  // Two values 0 and 1: mean 0.5, se 0.5, t(0.975, 1) = 12.7062.
  const auto two = t_interval({0.0, 1.0});
  EXPECT_NEAR(two.high - 0.5, 12.7062 * 0.5, 1e-3);
  EXPECT_NEAR(two.low, 1.0 - two.high, 1e-12);
}

TEST(Holdout, StratifiedAndDisjoint) {
  std::vector<int> labels(100, 0);
  std::fill(labels.begin(), labels.begin() + 20, 1);
  auto [kept, held] = stratified_holdout(labels, 0.1, 3);
  EXPECT_EQ(kept.size() + held.size(), 100u);
  EXPECT_EQ(held.size(), 10u);
  int pos = 0;
  for (auto i : held) pos += labels[i];
  EXPECT_EQ(pos, 2);
  std::set<std::size_t> all(kept.begin(), kept.end());
  for (auto i : held) EXPECT_EQ(all.count(i), 0u);
}

TEST(FitTMax, UsesKeptEncountersAndFallsBackToOne) {
  EXPECT_EQ(fit_t_max(toy_records(), 2), 18.0);
  EXPECT_EQ(fit_t_max(toy_records(), 3), 48.0);
  EXPECT_EQ(fit_t_max({toy_record({{0.0, {"a"}}})}, 2), 1.0);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = TrainConfig{};
  c.weights.lp = -1;
  EXPECT_THROW(validate(c), ConfigError);
}

class TrainToy : public ::testing::Test {
 protected:
  Corpus corpus;
  ModelConfig model_cfg;
  TrainConfig train_cfg;

  void SetUp() override {
    GenConfig g;
    g.modules = 4;
    g.codes_per_module = 4;
    g.vocab_size = 24;
    g.patients = 120;
    g.p_max = 3;
    g.c_max = 6;
    g.positive_rate = 0.3;
    g.noise_rate = 0.0;
    g.seed = 5;
    corpus = generate_synthetic_corpus(g);
    model_cfg.gsl.d_model = 8;
    model_cfg.gsl.blocks = 2;
    model_cfg.gsl.p_max = 3;
    model_cfg.gsl.c_max = 6;
    model_cfg.cmd.cluster_sizes = {4};
    train_cfg.epochs = 3;
    train_cfg.batch_size = 16;
    train_cfg.lr = 5e-3;
  }

  std::vector<PatientRecord> first(std::size_t n) const {
    return {corpus.records.begin(), corpus.records.begin() + static_cast<std::ptrdiff_t>(n)};
  }
};

TEST_F(TrainToy, ZeroLearningRateLeavesParametersUnchanged) {
  train_cfg.lr = 0.0;
  train_cfg.epochs = 2;
  const auto train = first(40);
  model_cfg.gsl.t_max = fit_t_max(train, 3);
  const auto co = fit_co_occurrence(train, model_cfg, corpus.vocab);
  const auto result = train_fold<double>(train, {}, corpus.vocab, model_cfg, train_cfg, co);
  const auto fresh = init_model<double>(model_cfg, corpus.vocab, mix_seed(train_cfg.seed, 0));
  const auto a = snapshot(result.model), b = snapshot(fresh);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k], b[k]);
}

TEST_F(TrainToy, DeterministicForFixedSeed) {
  const auto train = first(60);
  const auto a = fit<double>(train, corpus.vocab, model_cfg, train_cfg);
  const auto b = fit<double>(train, corpus.vocab, model_cfg, train_cfg);
  const auto sa = snapshot(a.model), sb = snapshot(b.model);
  for (std::size_t k = 0; k < sa.size(); ++k) EXPECT_EQ(sa[k], sb[k]);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
}

TEST_F(TrainToy, EmptySplitRejected) {
  EXPECT_THROW(fit<double>({}, corpus.vocab, model_cfg, train_cfg), InputError);
}

TEST_F(TrainToy, CrossValidationKeepsTestFoldsOutOfFitting) {
  train_cfg.epochs = 1;
  const auto report = cross_validate<double>(corpus, 3, model_cfg, train_cfg);
  ASSERT_EQ(report.folds.size(), 3u);
  std::set<std::size_t> tested;
  for (const auto& f : report.folds) {
    std::set<std::size_t> fitted(f.fitted_on.begin(), f.fitted_on.end());
    for (auto i : f.test) {
      EXPECT_EQ(fitted.count(i), 0u);
      tested.insert(i);
    }
    EXPECT_GT(f.fitted_on.size(), 0u);
    for (double v : {f.metrics.recall, f.metrics.f1, f.metrics.auroc, f.metrics.auprc}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_EQ(tested.size(), corpus.records.size());
  EXPECT_LE(report.auroc.low, report.auroc.mean);
  EXPECT_GE(report.auroc.high, report.auroc.mean);

  const std::string csv = report_to_csv(report);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  const auto j = report_to_json(report);
  EXPECT_EQ(j.at("folds").size(), 3u);
  EXPECT_EQ(j.at("mode"), "full");
}

TEST_F(TrainToy, CoFittedOnTrainingPartOnly) {
  train_cfg.epochs = 1;
  const auto train = first(80);
  std::vector<std::size_t> fitted;
  const auto result = fit<double>(train, corpus.vocab, model_cfg, train_cfg, &fitted);
  std::vector<PatientRecord> used;
  for (auto i : fitted) used.push_back(train[i]);
  EXPECT_EQ(result.co.values, fit_co_occurrence(used, model_cfg, corpus.vocab).values);
  EXPECT_LT(fitted.size(), train.size());
}

TEST(TrainPlanted, LossDecreasesOverFirstEpochs) {
  GenConfig g;
  g.modules = 4;
  g.codes_per_module = 5;
  g.vocab_size = 30;
  g.patients = 500;
  g.p_max = 3;
  g.c_max = 6;
  g.positive_rate = 0.3;
  g.seed = 2;
  const Corpus corpus = generate_synthetic_corpus(g);
  ModelConfig cfg;
  cfg.gsl.d_model = 8;
  cfg.gsl.blocks = 2;
  cfg.gsl.p_max = 3;
  cfg.gsl.c_max = 6;
  cfg.cmd.cluster_sizes = {4};
  TrainConfig tc;
  tc.epochs = 5;
  tc.patience = 10;
  tc.lr = 3e-3;
  const auto result = fit<float>(corpus.records, corpus.vocab, cfg, tc);
  ASSERT_EQ(result.history.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e)
    EXPECT_LT(result.history[e].train_loss, result.history[e - 1].train_loss) << "epoch " << e;
}

}  // namespace
}  // namespace deepj
