// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "deepj/error.hpp"
#include "deepj/init.hpp"
#include "deepj/mask.hpp"
#include "deepj/numerics.hpp"
#include "deepj/patient.hpp"

namespace deepj {

struct GslConfig {
  std::size_t d_model = 64;
  std::size_t blocks = 3;
  std::size_t p_max = 4;
  std::size_t c_max = 16;
  // 0 means 4·d_model.
  std::size_t ffn_hidden = 0;
  double t_max = 1.0;

  [[nodiscard]] std::size_t hidden() const { return ffn_hidden == 0 ? 4 * d_model : ffn_hidden; }
  [[nodiscard]] std::size_t seq_len() const { return p_max * c_max; }
};

inline void validate(const GslConfig& cfg) {
  if (cfg.d_model == 0 || cfg.d_model % 2 != 0) throw ConfigError("gsl: d_model must be positive and even");
  if (cfg.blocks < 2) throw ConfigError("gsl: at least 2 EGCT blocks are required");
  if (cfg.p_max == 0 || cfg.c_max == 0) throw ConfigError("gsl: p_max and c_max must be positive");
  if (!(cfg.t_max > 0.0)) throw ConfigError("gsl: t_max must be positive");
}

// One EGCT block. w_q and w_k are undefined for a block whose attention is
// supplied from outside.
template <typename T>
struct EgctBlockParams {
  Tensor<T> w_q, w_k, w_v;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  [[nodiscard]] bool has_qk() const { return w_q.defined(); }
};

template <typename T>
struct GslParams {
  // |C|×d_model; row 0 (PAD) stays zero.
  Tensor<T> embedding;
  std::vector<EgctBlockParams<T>> blocks;
};

template <typename T>
GslParams<T> init_gsl_params(const GslConfig& cfg, std::size_t vocab_size, Rng& rng) {
  validate(cfg);
  const std::size_t d = cfg.d_model, h = cfg.hidden();
  GslParams<T> p;
  Matrix<T> emb = xavier_uniform<T>(vocab_size, d, rng);
  for (std::size_t j = 0; j < d; ++j) emb(kPadIndex, j) = T(0);
  p.embedding = Tensor<T>::parameter(std::move(emb));
  for (std::size_t n = 0; n < cfg.blocks; ++n) {
    EgctBlockParams<T> b;
    if (n > 0) {
      b.w_q = xavier_parameter<T>(d, d, rng);
      b.w_k = xavier_parameter<T>(d, d, rng);
    }
    b.w_v = xavier_parameter<T>(d, d, rng);
    b.ffn_w1 = xavier_parameter<T>(d, h, rng);
    b.ffn_b1 = filled_parameter<T>(1, h, T(0));
    b.ffn_w2 = xavier_parameter<T>(h, d, rng);
    b.ffn_b2 = filled_parameter<T>(1, d, T(0));
    b.ln1_gain = filled_parameter<T>(1, d, T(1));
    b.ln1_bias = filled_parameter<T>(1, d, T(0));
    b.ln2_gain = filled_parameter<T>(1, d, T(1));
    b.ln2_bias = filled_parameter<T>(1, d, T(0));
    p.blocks.push_back(std::move(b));
  }
  return p;
}

// Argument of the sin/cos pair `pair`: t / t_max^(2·pair/d_model).
inline double time_encoding_argument(double t, std::size_t pair, std::size_t d_model, double t_max) {
  if (!(t_max > 0.0)) throw ConfigError("time encoding: t_max must be positive");
  return t / std::pow(t_max, 2.0 * static_cast<double>(pair) / static_cast<double>(d_model));
}

// 1×d_model row; slot 2k holds sin, slot 2k+1 holds cos of pair k's argument.
template <typename T>
Matrix<T> time_encode(double t, const GslConfig& cfg) {
  if (!(cfg.t_max > 0.0)) throw ConfigError("time encoding: t_max must be positive");
  Matrix<T> te(1, cfg.d_model);
  for (std::size_t k = 0; 2 * k < cfg.d_model; ++k) {
    const double arg = time_encoding_argument(t, k, cfg.d_model, cfg.t_max);
    te(0, 2 * k) = static_cast<T>(std::sin(arg));
    if (2 * k + 1 < cfg.d_model) te(0, 2 * k + 1) = static_cast<T>(std::cos(arg));
  }
  return te;
}

// Z = E + TE with padding rows exactly zero.
template <typename T>
Tensor<T> embed_sequence(const EncodedPatient& enc, const Tensor<T>& embedding, const GslConfig& cfg) {
  if (embedding.cols() != cfg.d_model) throw ShapeError("embed: embedding width differs from d_model");
  const std::size_t n = enc.seq_len();
  Matrix<T> te(n, cfg.d_model);
  for (std::size_t i = 0; i < n; ++i) {
    if (enc.is_pad[i]) continue;
    const Matrix<T> row = time_encode<T>(enc.time[i], cfg);
    for (std::size_t j = 0; j < cfg.d_model; ++j) te(i, j) = row(0, j);
  }
  Tensor<T> e = gather_rows(embedding, std::span<const std::size_t>(enc.code_ids));
  return mask_rows(add(e, Tensor<T>::constant(std::move(te))), enc.valid());
}

template <typename T>
struct EgctOutput {
  Tensor<T> z;
  Tensor<T> attention;
};

// Rejects an externally supplied attention matrix that puts weight outside
// the mask or is not row-stochastic on allowed rows.
template <typename T>
void check_attention_override(const Matrix<T>& a, const AttentionMask& mask) {
  if (a.rows != mask.size || a.cols != mask.size) throw InputError("egct: override shape differs from mask");
  for (std::size_t i = 0; i < mask.size; ++i) {
    double total = 0.0;
    bool any = false;
    for (std::size_t j = 0; j < mask.size; ++j) {
      const double v = static_cast<double>(a(i, j));
      if (!mask.allows(i, j)) {
        if (v != 0.0) throw InputError("egct: override has weight at a masked position");
        continue;
      }
      if (v < 0.0) throw InputError("egct: override has a negative weight");
      any = true;
      total += v;
    }
    if (any && std::abs(total - 1.0) > 1e-6) throw InputError("egct: override row is not stochastic");
  }
}

template <typename T>
EgctOutput<T> egct_block(const Tensor<T>& z, const AttentionMask& mask, const Matrix<T>& additive,
                         const EgctBlockParams<T>& p, const std::vector<bool>& valid,
                         const Matrix<T>* override_weights = nullptr) {
  Tensor<T> a;
  if (override_weights) {
    check_attention_override(*override_weights, mask);
    a = Tensor<T>::constant(*override_weights);
  } else {
    if (!p.has_qk()) throw InputError("egct: block without W_q/W_k needs an attention override");
    const Tensor<T> q = matmul(z, p.w_q);
    const Tensor<T> k = matmul(z, p.w_k);
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(z.cols()));
    a = masked_softmax(scale(matmul(q, transpose(k)), inv_sqrt_d), additive);
  }
  const Tensor<T> e = matmul(a, matmul(z, p.w_v));
  const Tensor<T> z1 = mask_rows(layer_norm(add(z, e), p.ln1_gain, p.ln1_bias), valid);
  const Tensor<T> hidden = relu(add_row(matmul(z1, p.ffn_w1), p.ffn_b1));
  const Tensor<T> f = add_row(matmul(hidden, p.ffn_w2), p.ffn_b2);
  const Tensor<T> z2 = mask_rows(layer_norm(add(z1, f), p.ln2_gain, p.ln2_bias), valid);
  return {z2, a};
}

template <typename T>
EgctOutput<T> egct_block(const Tensor<T>& z, const AttentionMask& mask, const EgctBlockParams<T>& p,
                         const std::vector<bool>& valid, const Matrix<T>* override_weights = nullptr) {
  return egct_block(z, mask, mask.additive<T>(), p, valid, override_weights);
}

template <typename T>
struct GslOutput {
  // Ẽ^(N), SeqLen×d_model.
  Tensor<T> x;
  // A^(N), used downstream as the patient graph.
  Tensor<T> adjacency;
  std::vector<Tensor<T>> stack;
};

// Block 1 always attends with `co_gathered`; with `ablate` every block does.
template <typename T>
GslOutput<T> gsl_forward(const EncodedPatient& enc, const AttentionMask& mask, const GslParams<T>& params,
                         const GslConfig& cfg, const Matrix<T>& co_gathered, bool ablate = false) {
  if (params.blocks.size() < 2) throw ConfigError("gsl: at least 2 EGCT blocks are required");
  if (enc.seq_len() != mask.size) throw ShapeError("gsl: mask built for another sequence");
  const std::vector<bool> valid = enc.valid();
  const Matrix<T> additive = mask.additive<T>();
  GslOutput<T> out;
  Tensor<T> z = embed_sequence(enc, params.embedding, cfg);
  for (std::size_t n = 0; n < params.blocks.size(); ++n) {
    const bool use_co = n == 0 || ablate;
    auto step = egct_block(z, mask, additive, params.blocks[n], valid, use_co ? &co_gathered : nullptr);
    z = step.z;
    out.stack.push_back(step.attention);
  }
  out.x = z;
  out.adjacency = out.stack.back();
  return out;
}

// Σ_{n≥2} KL(A^(n-1) ‖ A^(n)), each term a mean over valid rows.
template <typename T>
Tensor<T> kld_continuity_loss(const std::vector<Tensor<T>>& stack, const std::vector<bool>& valid) {
  if (stack.size() < 2) throw ConfigError("kld: need at least 2 attention matrices");
  Tensor<T> total = kl_divergence_rowwise(stack[0], stack[1], valid);
  for (std::size_t n = 2; n < stack.size(); ++n)
    total = add(total, kl_divergence_rowwise(stack[n - 1], stack[n], valid));
  return total;
}

}  // namespace deepj
