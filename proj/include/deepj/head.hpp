// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepj/cmd.hpp"
#include "deepj/corpus.hpp"
#include "deepj/error.hpp"
#include "deepj/gsl.hpp"
#include "deepj/init.hpp"
#include "deepj/mask.hpp"
#include "deepj/numerics.hpp"

namespace deepj {

enum class Mode { full, no_gsl, no_cmd };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::full: return "full";
    case Mode::no_gsl: return "no-gsl";
    case Mode::no_cmd: return "no-cmd";
  }
  return "full";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "full") return Mode::full;
  if (s == "no-gsl" || s == "no_gsl") return Mode::no_gsl;
  if (s == "no-cmd" || s == "no_cmd") return Mode::no_cmd;
  throw ConfigError("unknown mode \"" + s + "\" (expected full, no-gsl or no-cmd)");
}

struct LossWeights {
  double kld = 1.0;
  double lp = 1.0;
  double ent = 1.0;
};

inline void validate(const LossWeights& w) {
  if (!(w.kld >= 0.0) || !(w.lp >= 0.0) || !(w.ent >= 0.0))
    throw ConfigError("loss weights must be non-negative");
}

struct ModelConfig {
  GslConfig gsl;
  CmdConfig cmd;
  // 0 means d_model.
  std::size_t classifier_hidden = 0;

  [[nodiscard]] std::size_t hidden() const { return classifier_hidden == 0 ? gsl.d_model : classifier_hidden; }
};

inline void validate(const ModelConfig& cfg) {
  validate(cfg.gsl);
  validate(cfg.cmd, cfg.gsl.seq_len());
}

template <typename T>
struct HeadParams {
  // d_model×1 cluster scoring vector.
  Tensor<T> w;
  Tensor<T> c_w1, c_b1, c_w2, c_b2;
};

template <typename T>
struct Model {
  ModelConfig config;
  std::string vocab_hash;
  std::size_t vocab_size = 0;
  GslParams<T> gsl;
  std::vector<DiffPoolParams<T>> cmd;
  HeadParams<T> head;

  // Stable names in a fixed order; checkpoints and the optimizer rely on it.
  [[nodiscard]] std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("embedding", gsl.embedding);
    for (std::size_t n = 0; n < gsl.blocks.size(); ++n) {
      const auto& b = gsl.blocks[n];
      const std::string p = "egct" + std::to_string(n) + ".";
      if (b.has_qk()) {
        out.emplace_back(p + "w_q", b.w_q);
        out.emplace_back(p + "w_k", b.w_k);
      }
      out.emplace_back(p + "w_v", b.w_v);
      out.emplace_back(p + "ffn_w1", b.ffn_w1);
      out.emplace_back(p + "ffn_b1", b.ffn_b1);
      out.emplace_back(p + "ffn_w2", b.ffn_w2);
      out.emplace_back(p + "ffn_b2", b.ffn_b2);
      out.emplace_back(p + "ln1_gain", b.ln1_gain);
      out.emplace_back(p + "ln1_bias", b.ln1_bias);
      out.emplace_back(p + "ln2_gain", b.ln2_gain);
      out.emplace_back(p + "ln2_bias", b.ln2_bias);
    }
    for (std::size_t m = 0; m < cmd.size(); ++m) {
      const std::string p = "diffpool" + std::to_string(m) + ".";
      out.emplace_back(p + "embed_w", cmd[m].embed_w);
      out.emplace_back(p + "pool_w", cmd[m].pool_w);
      out.emplace_back(p + "norm_gain", cmd[m].norm_gain);
      out.emplace_back(p + "norm_bias", cmd[m].norm_bias);
    }
    out.emplace_back("head.w", head.w);
    out.emplace_back("head.c_w1", head.c_w1);
    out.emplace_back("head.c_b1", head.c_b1);
    out.emplace_back("head.c_w2", head.c_w2);
    out.emplace_back("head.c_b2", head.c_b2);
    return out;
  }

  [[nodiscard]] std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (auto t : parameters()) t.zero_grad();
  }
};

template <typename T>
Model<T> init_model(const ModelConfig& cfg, const Vocabulary& vocab, std::uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  Model<T> m;
  m.config = cfg;
  m.vocab_hash = vocab.hash();
  m.vocab_size = vocab.size();
  m.gsl = init_gsl_params<T>(cfg.gsl, vocab.size(), rng);
  m.cmd = init_cmd_params<T>(cfg.cmd, cfg.gsl.d_model, rng);
  const std::size_t d = cfg.gsl.d_model, h = cfg.hidden();
  m.head.w = filled_parameter<T>(d, 1, T(0));
  m.head.c_w1 = xavier_parameter<T>(d, h, rng);
  m.head.c_b1 = filled_parameter<T>(1, h, T(0));
  m.head.c_w2 = xavier_parameter<T>(h, 2, rng);
  m.head.c_b2 = filled_parameter<T>(1, 2, T(0));
  return m;
}

template <typename T>
struct ModuleWeighting {
  // 1×g, sums to one.
  Tensor<T> alpha;
  // 1×d_model.
  Tensor<T> g_final;
};

// α = softmax(x_final·w); G_final = α·x_final.
template <typename T>
ModuleWeighting<T> module_weighting(const Tensor<T>& x_final, const Tensor<T>& w) {
  if (x_final.rows() == 0) throw InputError("module weighting: no clusters");
  const Tensor<T> alpha = softmax_rows(transpose(matmul(x_final, w)));
  return {alpha, matmul(alpha, x_final)};
}

// 1×2 log-probabilities.
template <typename T>
Tensor<T> classify(const Tensor<T>& g_final, const HeadParams<T>& p) {
  const Tensor<T> hidden = relu(add_row(matmul(g_final, p.c_w1), p.c_b1));
  return log_softmax_rows(add_row(matmul(hidden, p.c_w2), p.c_b2));
}

template <typename T>
struct Prediction {
  Mode mode = Mode::full;
  Tensor<T> log_probs;
  double probability = 0.0;
  Tensor<T> g_final;
  // Undefined in no_cmd mode.
  Tensor<T> alpha;
  GslOutput<T> gsl;
  // Empty in no_cmd mode.
  PoolChain<T> chain;
};

template <typename T>
struct ForwardResult {
  Prediction<T> prediction;
  Tensor<T> l_kld;
  Tensor<T> l_lp;
  Tensor<T> l_ent;
};

// NLL (optionally class-weighted) plus the weighted auxiliary losses.
template <typename T>
Tensor<T> total_loss(const Prediction<T>& pred, int label, const Tensor<T>& l_kld, const Tensor<T>& l_lp,
                     const Tensor<T>& l_ent, const LossWeights& w, double positive_weight = 1.0) {
  const T class_weight = label == 1 ? static_cast<T>(positive_weight) : T(1);
  Tensor<T> loss = nll_loss(pred.log_probs, label, class_weight);
  loss = add(loss, scale(l_kld, static_cast<T>(w.kld)));
  loss = add(loss, scale(l_lp, static_cast<T>(w.lp)));
  return add(loss, scale(l_ent, static_cast<T>(w.ent)));
}

template <typename T>
Tensor<T> total_loss(const ForwardResult<T>& r, int label, const LossWeights& w, double positive_weight = 1.0) {
  return total_loss(r.prediction, label, r.l_kld, r.l_lp, r.l_ent, w, positive_weight);
}

// Per-patient inputs that do not depend on model parameters.
template <typename T>
struct PreparedPatient {
  EncodedPatient enc;
  AttentionMask mask;
  Matrix<T> co;
};

template <typename T>
PreparedPatient<T> prepare_patient(const PatientRecord& record, const ModelConfig& cfg, const Vocabulary& vocab,
                                   const CoOccurrenceMatrix& co) {
  PreparedPatient<T> p;
  p.enc = encode_patient(record, cfg.gsl.p_max, cfg.gsl.c_max, vocab);
  p.mask = build_mask(p.enc);
  p.co = gather_co_attention<T>(co, p.enc, p.mask);
  return p;
}

template <typename T>
ForwardResult<T> forward(const PreparedPatient<T>& in, const Model<T>& model, Mode mode) {
  const auto& cfg = model.config;
  const std::vector<bool> valid = in.enc.valid();
  if (in.enc.valid_count() == 0) throw InputError("forward: patient " + in.enc.id + " has no codes");
  ForwardResult<T> r;
  Prediction<T>& pred = r.prediction;
  pred.mode = mode;
  pred.gsl = gsl_forward(in.enc, in.mask, model.gsl, cfg.gsl, in.co, mode == Mode::no_gsl);
  r.l_kld = kld_continuity_loss(pred.gsl.stack, valid);
  if (mode == Mode::no_cmd) {
    pred.g_final = mean_rows(pred.gsl.x, valid);
    r.l_lp = Tensor<T>::scalar(T(0));
    r.l_ent = Tensor<T>::scalar(T(0));
  } else {
    pred.chain = cmd_forward(pred.gsl, valid, model.cmd, cfg.cmd);
    auto weighting = module_weighting(pred.chain.x.back(), model.head.w);
    pred.alpha = weighting.alpha;
    pred.g_final = weighting.g_final;
    r.l_lp = link_prediction_loss(pred.chain, pred.gsl.adjacency);
    r.l_ent = entropy_loss(pred.chain);
  }
  pred.log_probs = classify(pred.g_final, model.head);
  pred.probability = std::exp(static_cast<double>(pred.log_probs(0, 1)));
  return r;
}

template <typename T>
ForwardResult<T> forward(const PatientRecord& record, const Model<T>& model, const Vocabulary& vocab,
                         const CoOccurrenceMatrix& co, Mode mode) {
  if (vocab.hash() != model.vocab_hash) throw InputError("forward: vocabulary differs from the model's");
  return forward(prepare_patient<T>(record, model.config, vocab, co), model, mode);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointFormat = "deepj-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.gsl.d_model}, {"blocks", c.gsl.blocks},        {"p_max", c.gsl.p_max},
          {"c_max", c.gsl.c_max},     {"ffn_hidden", c.gsl.hidden()},  {"t_max", c.gsl.t_max},
          {"clusters", c.cmd.cluster_sizes}, {"classifier_hidden", c.hidden()}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.gsl.d_model = j.at("d_model").get<std::size_t>();
  c.gsl.blocks = j.at("blocks").get<std::size_t>();
  c.gsl.p_max = j.at("p_max").get<std::size_t>();
  c.gsl.c_max = j.at("c_max").get<std::size_t>();
  c.gsl.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
  c.gsl.t_max = j.at("t_max").get<double>();
  c.cmd.cluster_sizes = j.at("clusters").get<std::vector<std::size_t>>();
  c.classifier_hidden = j.at("classifier_hidden").get<std::size_t>();
  return c;
}

// `extra` is stored verbatim under "metadata".
template <typename T>
std::string save_checkpoint(const Model<T>& model, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, t] : model.named_parameters()) {
    std::vector<double> data(t.value().data.begin(), t.value().data.end());
    params[name] = {{"rows", t.rows()}, {"cols", t.cols()}, {"data", data}};
  }
  nlohmann::json j = {{"format", kCheckpointFormat},
                      {"version", kCheckpointVersion},
                      {"config", config_to_json(model.config)},
                      {"vocab_sha256", model.vocab_hash},
                      {"vocab_size", model.vocab_size},
                      {"metadata", extra},
                      {"params", params}};
  return j.dump() + "\n";
}

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  nlohmann::json metadata;
};

// Rebuilds the model and checks every tensor shape and, when given, the
// vocabulary hash.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& text, const std::string& expected_vocab_hash = "") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw InputError("checkpoint: unknown format");
    if (j.at("version").get<int>() != kCheckpointVersion) throw InputError("checkpoint: unsupported version");
    const std::string hash = j.at("vocab_sha256").get<std::string>();
    if (!expected_vocab_hash.empty() && hash != expected_vocab_hash)
      throw InputError("checkpoint: vocabulary hash mismatch");
    Vocabulary placeholder;
    const std::size_t vocab_size = j.at("vocab_size").get<std::size_t>();
    for (std::size_t i = 1; i < vocab_size; ++i) placeholder.add("_" + std::to_string(i));
    LoadedCheckpoint<T> out;
    out.model = init_model<T>(config_from_json(j.at("config")), placeholder, 0);
    out.model.vocab_hash = hash;
    out.metadata = j.value("metadata", nlohmann::json::object());
    const auto& params = j.at("params");
    const auto named = out.model.named_parameters();
    if (params.size() != named.size()) throw InputError("checkpoint: parameter count mismatch");
    for (auto [name, t] : named) {
      const auto& p = params.at(name);
      if (p.at("rows").template get<std::size_t>() != t.rows() || p.at("cols").template get<std::size_t>() != t.cols())
        throw InputError("checkpoint: shape mismatch for " + name);
      const auto data = p.at("data").template get<std::vector<double>>();
      if (data.size() != t.size()) throw InputError("checkpoint: value count mismatch for " + name);
      for (std::size_t i = 0; i < data.size(); ++i) t.mutable_value().data[i] = static_cast<T>(data[i]);
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw InputError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace deepj
