// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "deepj/error.hpp"
#include "deepj/gsl.hpp"
#include "deepj/init.hpp"
#include "deepj/numerics.hpp"

namespace deepj {

struct CmdConfig {
  // g^(2)..g^(M+1); g^(1) is the sequence length.
  std::vector<std::size_t> cluster_sizes{12, 4};

  [[nodiscard]] std::size_t blocks() const { return cluster_sizes.size(); }
  [[nodiscard]] std::size_t final_clusters() const { return cluster_sizes.back(); }
};

inline void validate(const CmdConfig& cfg, std::size_t seq_len) {
  if (cfg.cluster_sizes.empty()) throw ConfigError("cmd: at least one DiffPool block is required");
  std::size_t prev = seq_len;
  for (std::size_t g : cfg.cluster_sizes) {
    if (g >= prev)
      throw ConfigError("cmd: cluster sizes must strictly decrease from the sequence length (" +
                        std::to_string(g) + " after " + std::to_string(prev) + ")");
    prev = g;
  }
  if (cfg.final_clusters() < 2) throw ConfigError("cmd: the last cluster size must be at least 2");
}

template <typename T>
struct DiffPoolParams {
  Tensor<T> embed_w;
  Tensor<T> pool_w;
  Tensor<T> norm_gain;
  Tensor<T> norm_bias;
};

template <typename T>
std::vector<DiffPoolParams<T>> init_cmd_params(const CmdConfig& cfg, std::size_t d_model, Rng& rng) {
  std::vector<DiffPoolParams<T>> out;
  for (std::size_t g : cfg.cluster_sizes) {
    DiffPoolParams<T> p;
    p.embed_w = xavier_parameter<T>(d_model, d_model, rng);
    p.pool_w = xavier_parameter<T>(d_model, g, rng);
    p.norm_gain = filled_parameter<T>(1, d_model, T(1));
    p.norm_bias = filled_parameter<T>(1, d_model, T(0));
    out.push_back(std::move(p));
  }
  return out;
}

// D⁻¹(a + I)·x·w with D the row sums of a + I, optionally followed by ReLU;
// invalid rows zeroed. Pooled adjacencies are not row-stochastic, so the
// propagation is renormalized at every level.
template <typename T>
Tensor<T> gcn_layer(const Tensor<T>& a, const Tensor<T>& x, const Tensor<T>& w,
                    const std::vector<bool>& valid, bool activate = true) {
  if (a.rows() != a.cols() || a.rows() != x.rows() || x.cols() != w.rows() || valid.size() != x.rows())
    throw InputError("gcn: shape mismatch");
  const Tensor<T> propagate = normalize_rows(add(a, Tensor<T>::constant(Matrix<T>::identity(a.rows()))));
  Tensor<T> out = matmul(propagate, matmul(x, w));
  if (activate) out = relu(out);
  return mask_rows(out, valid);
}

template <typename T>
struct DiffPoolOutput {
  Tensor<T> adjacency;
  Tensor<T> x;
  Tensor<T> s;
  // Embed-branch node features before pooling.
  Tensor<T> h;
};

// x' = sᵀ·h and a' = sᵀ·a·s.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> pool_graph(const Tensor<T>& a, const Tensor<T>& h, const Tensor<T>& s) {
  const Tensor<T> st = transpose(s);
  return {matmul(matmul(st, a), s), matmul(st, h)};
}

// Embed branch h = graph_norm(ReLU(GCN)) + x; pool branch s = row-softmax
// of a linear GCN with invalid rows zeroed.
template <typename T>
DiffPoolOutput<T> diffpool_block(const Tensor<T>& a, const Tensor<T>& x, const DiffPoolParams<T>& p,
                                 const std::vector<bool>& valid) {
  if (p.pool_w.cols() >= x.rows()) throw ConfigError("diffpool: pooled size must be below input size");
  const Tensor<T> h =
      add(graph_norm(gcn_layer(a, x, p.embed_w, valid), valid, p.norm_gain, p.norm_bias), x);
  const Tensor<T> s = mask_rows(softmax_rows(gcn_layer(a, x, p.pool_w, valid, false)), valid);
  auto [pooled_a, pooled_x] = pool_graph(a, h, s);
  return {pooled_a, pooled_x, s, h};
}

template <typename T>
struct PoolChain {
  // Per block m: S^(m), X^(m+1), 𝒜^(m+1), and validity of the block's input rows.
  std::vector<Tensor<T>> s;
  std::vector<Tensor<T>> x;
  std::vector<Tensor<T>> adjacency;
  std::vector<std::vector<bool>> valid;
  // S^(1)·…·S^(M): original positions to final clusters.
  Matrix<T> assignment;

  [[nodiscard]] bool empty() const { return s.empty(); }
};

template <typename T>
PoolChain<T> cmd_forward(const Tensor<T>& adjacency, const Tensor<T>& x, const std::vector<bool>& valid,
                         const std::vector<DiffPoolParams<T>>& params, const CmdConfig& cfg) {
  if (adjacency.rows() != adjacency.cols() || adjacency.rows() != x.rows())
    throw ShapeError("cmd: adjacency must be square and match the node count");
  validate(cfg, x.rows());
  if (params.size() != cfg.blocks()) throw ConfigError("cmd: parameter count differs from block count");
  PoolChain<T> chain;
  Tensor<T> a = adjacency, h = x;
  std::vector<bool> flags = valid;
  Tensor<T> composed;
  for (std::size_t m = 0; m < params.size(); ++m) {
    if (params[m].pool_w.cols() != cfg.cluster_sizes[m])
      throw ConfigError("cmd: pool weights do not match the configured cluster size");
    auto step = diffpool_block(a, h, params[m], flags);
    chain.s.push_back(step.s);
    chain.x.push_back(step.x);
    chain.adjacency.push_back(step.adjacency);
    chain.valid.push_back(flags);
    composed = m == 0 ? step.s.detach() : matmul(composed, step.s.detach());
    a = step.adjacency;
    h = step.x;
    flags.assign(cfg.cluster_sizes[m], true);
  }
  chain.assignment = composed.value();
  return chain;
}

template <typename T>
PoolChain<T> cmd_forward(const GslOutput<T>& gsl, const std::vector<bool>& valid,
                         const std::vector<DiffPoolParams<T>>& params, const CmdConfig& cfg) {
  return cmd_forward(gsl.adjacency, gsl.x, valid, params, cfg);
}

// Σ_m ‖𝒜^(m) − S^(m)S^(m)ᵀ‖_F over valid entries, each divided by the
// number of valid entries.
template <typename T>
Tensor<T> link_prediction_loss(const PoolChain<T>& chain, const Tensor<T>& gsl_adjacency) {
  Tensor<T> total = Tensor<T>::scalar(T(0));
  Tensor<T> a = gsl_adjacency;
  for (std::size_t m = 0; m < chain.s.size(); ++m) {
    const auto& flags = chain.valid[m];
    const std::size_t n = flags.size();
    Matrix<T> keep(n, n);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (flags[i] && flags[j]) {
          keep(i, j) = T(1);
          ++count;
        }
    if (count > 0) {
      const Tensor<T> diff = sub(a, matmul(chain.s[m], transpose(chain.s[m])));
      const Tensor<T> norm = frobenius_norm(mul(diff, Tensor<T>::constant(std::move(keep))));
      total = add(total, scale(norm, T(1) / static_cast<T>(count)));
    }
    a = chain.adjacency[m];
  }
  return total;
}

// Σ_m mean row entropy of S^(m) over its valid rows.
template <typename T>
Tensor<T> entropy_loss(const PoolChain<T>& chain) {
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t m = 0; m < chain.s.size(); ++m) total = add(total, row_entropy_sum(chain.s[m], chain.valid[m]));
  return total;
}

}  // namespace deepj
