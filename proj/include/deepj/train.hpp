// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepj/corpus.hpp"
#include "deepj/error.hpp"
#include "deepj/head.hpp"
#include "deepj/metrics.hpp"
#include "deepj/numerics.hpp"
#include "deepj/util/random.hpp"

namespace deepj {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  // Epochs without a validation improvement before stopping.
  std::size_t patience = 5;
  std::uint64_t seed = 1;
  Mode mode = Mode::full;
  LossWeights weights;
  double positive_weight = 1.0;
  // Share of each training split held out for model selection.
  double val_fraction = 0.1;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (c.batch_size < 1) throw ConfigError("train: batch size must be at least 1");
  if (!(c.lr >= 0.0)) throw ConfigError("train: learning rate must be non-negative");
  if (!(c.positive_weight > 0.0)) throw ConfigError("train: positive weight must be positive");
  if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0)) throw ConfigError("train: val fraction must be in [0, 1)");
  validate(c.weights);
}

// Largest elapsed time after truncation; 1 when every patient has a single
// encounter so the time encoding stays defined.
inline double fit_t_max(const std::vector<PatientRecord>& records, std::size_t p_max) {
  double t_max = 0.0;
  for (const auto& r : records) {
    if (r.encounters.empty()) continue;
    const std::size_t n = r.encounters.size();
    const std::size_t first = n > p_max ? n - p_max : 0;
    t_max = std::max(t_max, r.encounters.back().t_hours - r.encounters[first].t_hours);
  }
  return t_max > 0.0 ? t_max : 1.0;
}

// Co-occurrence over the records as the model will see them.
inline CoOccurrenceMatrix fit_co_occurrence(const std::vector<PatientRecord>& records, const ModelConfig& cfg,
                                            const Vocabulary& vocab) {
  std::vector<PatientRecord> kept;
  kept.reserve(records.size());
  for (const auto& r : records) kept.push_back(truncate_record(r, cfg.gsl.p_max, cfg.gsl.c_max, vocab));
  return estimate_co_occurrence(kept, vocab);
}

// Stratified split of [0, n) into (kept, held out).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_holdout(
    const std::vector<int>& labels, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i] == 1 ? 1 : 0].push_back(i);
  std::vector<std::size_t> kept, held;
  Rng rng(seed);
  for (auto& members : by_class) {
    rng.shuffle(members);
    auto n_held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    if (fraction > 0.0 && n_held == 0 && members.size() >= 2) n_held = 1;
    held.insert(held.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_held));
    kept.insert(kept.end(), members.begin() + static_cast<std::ptrdiff_t>(n_held), members.end());
  }
  std::sort(kept.begin(), kept.end());
  std::sort(held.begin(), held.end());
  return {kept, held};
}

template <typename T>
std::vector<Matrix<T>> snapshot(const Model<T>& model) {
  std::vector<Matrix<T>> out;
  for (const auto& t : model.parameters()) out.push_back(t.value());
  return out;
}

template <typename T>
void restore(const Model<T>& model, const std::vector<Matrix<T>>& values) {
  auto params = model.parameters();
  if (params.size() != values.size()) throw InputError("restore: parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) params[k].mutable_value() = values[k];
}

template <typename T>
std::vector<PreparedPatient<T>> prepare_all(const std::vector<PatientRecord>& records, const ModelConfig& cfg,
                                            const Vocabulary& vocab, const CoOccurrenceMatrix& co) {
  std::vector<PreparedPatient<T>> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(prepare_patient<T>(r, cfg, vocab, co));
  return out;
}

template <typename T>
std::vector<double> predict(const Model<T>& model, const std::vector<PreparedPatient<T>>& patients, Mode mode) {
  std::vector<double> out;
  out.reserve(patients.size());
  for (const auto& p : patients) out.push_back(forward(p, model, mode).prediction.probability);
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  // NaN when the validation split lacks a class.
  double val_auprc = 0.0;
};

template <typename T>
struct TrainResult {
  Model<T> model;
  CoOccurrenceMatrix co;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

inline bool has_both_classes(const std::vector<int>& labels) {
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  return pos > 0 && pos < static_cast<std::ptrdiff_t>(labels.size());
}

// Minibatch Adam on the combined objective. The returned model holds the
// parameters of the epoch with the best validation AUPRC (lowest training
// loss when the validation split cannot be scored).
template <typename T>
TrainResult<T> train_fold(const std::vector<PatientRecord>& train, const std::vector<PatientRecord>& val,
                          const Vocabulary& vocab, ModelConfig model_cfg, const TrainConfig& cfg,
                          const CoOccurrenceMatrix& co) {
  validate(cfg);
  if (train.empty()) throw InputError("train: empty training split");
  TrainResult<T> result;
  result.co = co;
  result.model = init_model<T>(model_cfg, vocab, mix_seed(cfg.seed, 0));
  Model<T>& model = result.model;
  const auto train_in = prepare_all<T>(train, model_cfg, vocab, co);
  const auto val_in = prepare_all<T>(val, model_cfg, vocab, co);
  std::vector<int> val_labels;
  for (const auto& r : val) val_labels.push_back(r.label);
  const bool scored = has_both_classes(val_labels);

  auto params = model.parameters();
  AdamState<T> adam;
  adam.lr = static_cast<T>(cfg.lr);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  double best = -std::numeric_limits<double>::infinity();
  std::vector<Matrix<T>> best_values = snapshot(model);
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, epoch + 1));
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const T inv_b = T(1) / static_cast<T>(end - start);
      model.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const Tensor<T> loss = total_loss(forward(train_in[i], model, cfg.mode), train[i].label, cfg.weights,
                                          cfg.positive_weight);
        if (!std::isfinite(static_cast<double>(loss.item())))
          throw Error("train: non-finite loss on patient " + train[i].id);
        loss_sum += static_cast<double>(loss.item());
        backward(scale(loss, inv_b));
      }
      adam_step(std::span<Tensor<T>>(params), adam);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_auprc = scored ? auprc(predict(model, val_in, cfg.mode), val_labels)
                           : std::numeric_limits<double>::quiet_NaN();
    result.history.push_back(rec);
    const double score = scored ? rec.val_auprc : -rec.train_loss;
    if (score > best) {
      best = score;
      best_values = snapshot(model);
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= cfg.patience && cfg.patience > 0) {
      break;
    }
  }
  restore(model, best_values);
  return result;
}

// Fits t_max and CO on `train` (after an inner validation holdout) and trains.
template <typename T>
TrainResult<T> fit(const std::vector<PatientRecord>& train, const Vocabulary& vocab, ModelConfig model_cfg,
                   const TrainConfig& cfg, std::vector<std::size_t>* fitted_on = nullptr) {
  validate(cfg);
  if (train.empty()) throw InputError("train: empty training split");
  std::vector<int> labels;
  for (const auto& r : train) labels.push_back(r.label);
  auto [kept, held] = stratified_holdout(labels, cfg.val_fraction, mix_seed(cfg.seed, 0x7a11));
  std::vector<PatientRecord> inner, val;
  for (auto i : kept) inner.push_back(train[i]);
  for (auto i : held) val.push_back(train[i]);
  model_cfg.gsl.t_max = fit_t_max(inner, model_cfg.gsl.p_max);
  const CoOccurrenceMatrix co = fit_co_occurrence(inner, model_cfg, vocab);
  if (fitted_on) *fitted_on = kept;
  return train_fold<T>(inner, val, vocab, model_cfg, cfg, co);
}

struct FoldResult {
  std::size_t fold = 0;
  Metrics metrics;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
  // Corpus indices behind CO and t_max, and the held-out test indices.
  std::vector<std::size_t> fitted_on;
  std::vector<std::size_t> test;
  std::vector<double> test_scores;
};

struct MetricReport {
  Mode mode = Mode::full;
  std::uint64_t seed = 0;
  std::vector<FoldResult> folds;
  Interval recall, f1, auroc, auprc;
};

inline void summarize(MetricReport& report) {
  std::vector<double> r, f, a, p;
  for (const auto& fold : report.folds) {
    r.push_back(fold.metrics.recall);
    f.push_back(fold.metrics.f1);
    a.push_back(fold.metrics.auroc);
    p.push_back(fold.metrics.auprc);
  }
  report.recall = t_interval(r);
  report.f1 = t_interval(f);
  report.auroc = t_interval(a);
  report.auprc = t_interval(p);
}

using FoldCallback = std::function<void(const FoldResult&)>;

// Stratified k-fold CV; every statistic the model sees is fitted inside the
// training part of each fold.
template <typename T>
MetricReport cross_validate(const Corpus& corpus, std::size_t k, const ModelConfig& model_cfg,
                            const TrainConfig& cfg, const FoldCallback& on_fold = {}) {
  validate(cfg);
  const auto folds = kfold_split(corpus.records, k, cfg.seed);
  MetricReport report;
  report.mode = cfg.mode;
  report.seed = cfg.seed;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<PatientRecord> train, test;
    for (auto i : folds[f].train) train.push_back(corpus.records[i]);
    for (auto i : folds[f].test) test.push_back(corpus.records[i]);
    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = mix_seed(cfg.seed, f + 1);
    std::vector<std::size_t> inner;
    auto trained = fit<T>(train, corpus.vocab, model_cfg, fold_cfg, &inner);
    FoldResult res;
    res.fold = f;
    res.best_epoch = trained.best_epoch;
    for (auto i : inner) res.fitted_on.push_back(folds[f].train[i]);
    res.test = folds[f].test;
    const auto prepared = prepare_all<T>(test, trained.model.config, corpus.vocab, trained.co);
    res.test_scores = predict(trained.model, prepared, cfg.mode);
    std::vector<int> labels;
    for (const auto& r : test) labels.push_back(r.label);
    res.metrics = evaluate(res.test_scores, labels);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_fold) on_fold(res);
    report.folds.push_back(std::move(res));
  }
  summarize(report);
  return report;
}

inline std::string report_to_csv(const MetricReport& r) {
  std::ostringstream out;
  out << std::setprecision(10);
  out << "row,mode,seed,recall,f1,auroc,auprc\n";
  for (const auto& f : r.folds)
    out << "fold" << f.fold << ',' << to_string(r.mode) << ',' << r.seed << ',' << f.metrics.recall << ','
        << f.metrics.f1 << ',' << f.metrics.auroc << ',' << f.metrics.auprc << '\n';
  auto row = [&](const char* name, double Interval::*field) {
    out << name << ',' << to_string(r.mode) << ',' << r.seed << ',' << r.recall.*field << ',' << r.f1.*field << ','
        << r.auroc.*field << ',' << r.auprc.*field << '\n';
  };
  row("mean", &Interval::mean);
  row("ci95_low", &Interval::low);
  row("ci95_high", &Interval::high);
  return out.str();
}

inline nlohmann::json report_to_json(const MetricReport& r) {
  auto interval = [](const Interval& i) { return nlohmann::json{{"mean", i.mean}, {"ci95", {i.low, i.high}}}; };
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds)
    folds.push_back({{"fold", f.fold},
                     {"recall", f.metrics.recall},
                     {"f1", f.metrics.f1},
                     {"auroc", f.metrics.auroc},
                     {"auprc", f.metrics.auprc},
                     {"best_epoch", f.best_epoch},
                     {"test_size", f.test.size()}});
  return {{"mode", to_string(r.mode)},
          {"seed", r.seed},
          {"folds", folds},
          {"summary",
           {{"recall", interval(r.recall)},
            {"f1", interval(r.f1)},
            {"auroc", interval(r.auroc)},
            {"auprc", interval(r.auprc)}}}};
}

}  // namespace deepj
