// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "deepj/gsl.hpp"
#include "model_fixtures.hpp"
#include "test_util.hpp"

namespace deepj {
namespace {

using namespace deepj::testing;
using M = Matrix<double>;

struct ToyPatient {
  EncodedPatient enc;
  AttentionMask mask;
  M co;
};

ToyPatient prepare(const PatientRecord& r, const GslConfig& cfg, const Vocabulary& v,
                   const CoOccurrenceMatrix& co) {
  ToyPatient t;
  t.enc = encode_patient(r, cfg.p_max, cfg.c_max, v);
  t.mask = build_mask(t.enc);
  t.co = gather_co_attention<double>(co, t.enc, t.mask);
  return t;
}

std::vector<Tensor<double>> block_params(const EgctBlockParams<double>& b) {
  std::vector<Tensor<double>> out{b.w_v, b.ffn_w1, b.ffn_b1, b.ffn_w2, b.ffn_b2,
                                  b.ln1_gain, b.ln1_bias, b.ln2_gain, b.ln2_bias};
  if (b.has_qk()) {
    out.push_back(b.w_q);
    out.push_back(b.w_k);
  }
  return out;
}

// Non-trivial affine parameters so normalization gradients are exercised.
void perturb(GslParams<double>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& b : p.blocks)
    for (auto& t : block_params(b))
      for (auto& v : t.mutable_value().data) v += uniform(rng, -0.3, 0.3);
}

TEST(TimeEncode, ContractCases) {
  GslConfig cfg;
  cfg.d_model = 8;
  cfg.t_max = 100.0;
  const M zero = time_encode<double>(0.0, cfg);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(zero(0, 2 * k), 0.0);
    EXPECT_EQ(zero(0, 2 * k + 1), 1.0);
  }
  const double arg = time_encoding_argument(100.0, 4, 8, 100.0);
  EXPECT_DOUBLE_EQ(arg, 1.0);
  EXPECT_NEAR(std::sin(arg), 0.8415, 1e-4);
  EXPECT_NEAR(std::cos(arg), 0.5403, 1e-4);
  const M te = time_encode<double>(37.0, cfg);
  EXPECT_DOUBLE_EQ(te(0, 0), std::sin(37.0));
  EXPECT_DOUBLE_EQ(te(0, 3), std::cos(37.0 / std::pow(100.0, 2.0 / 8.0)));
  cfg.t_max = 0.0;
  EXPECT_THROW(time_encode<double>(1.0, cfg), ConfigError);
}

TEST(TimeEncode, RangeProperty) {
  std::mt19937_64 rng(3);
  GslConfig cfg;
  cfg.d_model = 16;
  cfg.t_max = 500.0;
  for (int trial = 0; trial < 200; ++trial) {
    const M te = time_encode<double>(uniform(rng, 0.0, 1000.0), cfg);
    for (double v : te.data) {
      EXPECT_LE(v, 1.0);
      EXPECT_GE(v, -1.0);
    }
  }
}

TEST(GslConfig, Validation) {
  GslConfig cfg;
  cfg.d_model = 5;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = GslConfig{};
  cfg.blocks = 1;
  EXPECT_THROW(validate(cfg), ConfigError);
}

TEST(EmbedSequence, PaddingAndSharedTimestamp) {
  const auto cfg = toy_gsl_config();
  const auto v = toy_vocab();
  Rng rng(1);
  auto params = init_gsl_params<double>(cfg, v.size(), rng);
  const auto enc = encode_patient(toy_record({{0.0, {"a", "b"}}, {20.0, {"c"}}}), 2, 3, v);
  const auto z = embed_sequence(enc, params.embedding, cfg);
  const M te0 = time_encode<double>(0.0, cfg);
  const M te1 = time_encode<double>(20.0, cfg);
  for (std::size_t j = 0; j < cfg.d_model; ++j) {
    EXPECT_DOUBLE_EQ(z(0, j) - params.embedding(v.id("a"), j), te0(0, j));
    EXPECT_DOUBLE_EQ(z(1, j) - params.embedding(v.id("b"), j), te0(0, j));
    EXPECT_DOUBLE_EQ(z(3, j) - params.embedding(v.id("c"), j), te1(0, j));
    for (std::size_t i : {2u, 4u, 5u}) EXPECT_EQ(z(i, j), 0.0);
  }

  EncodedPatient all_pad = enc;
  std::fill(all_pad.code_ids.begin(), all_pad.code_ids.end(), kPadIndex);
  std::fill(all_pad.is_pad.begin(), all_pad.is_pad.end(), true);
  const auto zero = embed_sequence(all_pad, params.embedding, cfg);
  for (double x : zero.value().data) EXPECT_EQ(x, 0.0);

  EncodedPatient bad = enc;
  bad.code_ids[0] = v.size();
  EXPECT_THROW(embed_sequence(bad, params.embedding, cfg), InputError);
}

TEST(BuildMask, ContractCases) {
  const auto v = toy_vocab();
  const auto single = build_mask(encode_patient(toy_record({{0.0, {"a", "b", "c"}}}), 1, 3, v));
  for (bool b : single.allowed) EXPECT_TRUE(b);

  const auto enc = encode_patient(toy_record({{0.0, {"a"}}, {1.0, {"b"}}}), 2, 2, v);
  const auto m = build_mask(enc);
  EXPECT_FALSE(m.allows(0, 2));
  EXPECT_TRUE(m.allows(2, 0));
  const M add = m.additive<double>();
  EXPECT_TRUE(is_masked(add(0, 2)));
  EXPECT_EQ(add(2, 0), 0.0);
  for (std::size_t pad : {1u, 3u})
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_FALSE(m.allows(pad, k));
      EXPECT_FALSE(m.allows(k, pad));
    }
}

TEST(EgctBlock, SingleCodeAttendsToItself) {
  auto cfg = toy_gsl_config();
  cfg.p_max = 1;
  const auto v = toy_vocab();
  Rng rng(2);
  auto params = init_gsl_params<double>(cfg, v.size(), rng);
  const auto enc = encode_patient(toy_record({{0.0, {"b"}}}), 1, 3, v);
  const auto mask = build_mask(enc);
  const auto z = embed_sequence(enc, params.embedding, cfg);
  const auto out = egct_block(z, mask, params.blocks[1], enc.valid());
  EXPECT_EQ(out.attention(0, 0), 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      if (i != 0 || j != 0) {
        EXPECT_EQ(out.attention(i, j), 0.0);
      }

  // Oracle: e = v_0, then the residual/LN/FFNN/LN path on row 0 alone.
  const auto& b = params.blocks[1];
  const auto row = Tensor<double>::constant(M(1, cfg.d_model, std::vector<double>(z.value().row(0).begin(),
                                                                                    z.value().row(0).end())));
  const auto e = matmul(row, b.w_v);
  const auto z1 = layer_norm(add(row, e), b.ln1_gain, b.ln1_bias);
  const auto f = add_row(matmul(relu(add_row(matmul(z1, b.ffn_w1), b.ffn_b1)), b.ffn_w2), b.ffn_b2);
  const auto z2 = layer_norm(add(z1, f), b.ln2_gain, b.ln2_bias);
  for (std::size_t j = 0; j < cfg.d_model; ++j) {
    EXPECT_NEAR(out.z(0, j), z2(0, j), 1e-12);
    EXPECT_EQ(out.z(1, j), 0.0);
  }
}

TEST(EgctBlock, UniformOverrideAveragesValues) {
  auto cfg = toy_gsl_config();
  const auto v = toy_vocab();
  Rng rng(3);
  auto params = init_gsl_params<double>(cfg, v.size(), rng);
  const auto enc = encode_patient(toy_record({{0.0, {"a", "c"}}}), 1, 3, v);
  const auto mask = build_mask(enc);
  M over(3, 3);
  over(0, 0) = over(0, 1) = over(1, 0) = over(1, 1) = 0.5;
  const auto z = embed_sequence(enc, params.embedding, cfg);
  const auto& b = params.blocks[0];
  const auto vals = matmul(z, b.w_v);
  const auto e = matmul(Tensor<double>::constant(over), vals);
  for (std::size_t j = 0; j < cfg.d_model; ++j)
    EXPECT_NEAR(e(0, j), 0.5 * (vals(0, j) + vals(1, j)), 1e-15);
  const auto out = egct_block(z, mask, b, enc.valid(), &over);
  EXPECT_EQ(out.attention.value(), over);

  M leaky = over;
  leaky(0, 2) = 0.1;
  EXPECT_THROW(egct_block(z, mask, b, enc.valid(), &leaky), InputError);
  M unnormalized = over;
  unnormalized(0, 0) = 0.9;
  EXPECT_THROW(egct_block(z, mask, b, enc.valid(), &unnormalized), InputError);
  EXPECT_THROW(egct_block(z, mask, b, enc.valid()), InputError);
}

class GslToy : public ::testing::Test {
 protected:
  GslConfig cfg = toy_gsl_config();
  Vocabulary vocab = toy_vocab();
  std::vector<PatientRecord> records = toy_records();
  CoOccurrenceMatrix co = estimate_co_occurrence(records, vocab);
  GslParams<double> params;

  void SetUp() override {
    Rng rng(11);
    params = init_gsl_params<double>(cfg, vocab.size(), rng);
    perturb(params, 12);
  }
};

TEST_F(GslToy, AttentionStackContract) {
  for (const auto& r : records) {
    const auto t = prepare(r, cfg, vocab, co);
    const auto out = gsl_forward(t.enc, t.mask, params, cfg, t.co);
    ASSERT_EQ(out.stack.size(), cfg.blocks);
    EXPECT_EQ(out.stack[0].value(), t.co);
    for (const auto& a : out.stack) {
      for (std::size_t i = 0; i < t.enc.seq_len(); ++i) {
        double total = 0;
        for (std::size_t j = 0; j < t.enc.seq_len(); ++j) {
          if (t.enc.enc_index[i] < t.enc.enc_index[j] || t.enc.is_pad[i] || t.enc.is_pad[j]) {
            EXPECT_EQ(a(i, j), 0.0);
          }
          total += a(i, j);
        }
        EXPECT_NEAR(total, t.enc.is_pad[i] ? 0.0 : 1.0, 1e-10);
      }
    }
    for (std::size_t i = 0; i < t.enc.seq_len(); ++i)
      if (t.enc.is_pad[i]) {
        for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_EQ(out.x(i, j), 0.0);
      }
    EXPECT_EQ(out.adjacency.node(), out.stack.back().node());
  }
}

TEST_F(GslToy, AblationUsesCoEverywhere) {
  const auto t = prepare(records[0], cfg, vocab, co);
  const auto out = gsl_forward(t.enc, t.mask, params, cfg, t.co, true);
  for (const auto& a : out.stack) EXPECT_EQ(a.value(), t.co);
  EXPECT_EQ(kld_continuity_loss(out.stack, t.enc.valid()).item(), 0.0);
}

TEST_F(GslToy, KldNonNegativeAndMatchesLoopOracle) {
  for (const auto& r : records) {
    const auto t = prepare(r, cfg, vocab, co);
    const auto out = gsl_forward(t.enc, t.mask, params, cfg, t.co);
    const auto valid = t.enc.valid();
    double oracle = 0;
    for (std::size_t n = 1; n < out.stack.size(); ++n) {
      double sum = 0;
      std::size_t rows = 0;
      for (std::size_t i = 0; i < valid.size(); ++i) {
        if (!valid[i]) continue;
        ++rows;
        for (std::size_t j = 0; j < valid.size(); ++j) {
          const double p = out.stack[n - 1](i, j), q = out.stack[n](i, j);
          sum += p * std::log((p + 1e-10) / (q + 1e-10));
        }
      }
      oracle += sum / static_cast<double>(rows);
    }
    const double got = kld_continuity_loss(out.stack, valid).item();
    EXPECT_NEAR(got, oracle, 1e-10);
    EXPECT_GE(got, -1e-9);
  }
}

TEST(KldContinuity, OneHotAgainstUniformIsLogTwo) {
  const auto a1 = Tensor<double>::constant(M::from_rows({{1, 0}, {0, 1}}));
  const auto a2 = Tensor<double>::constant(M::from_rows({{0.5, 0.5}, {0.5, 0.5}}));
  EXPECT_NEAR(kld_continuity_loss<double>({a1, a2}, {true, true}).item(), std::log(2.0), 1e-9);
  EXPECT_EQ(kld_continuity_loss<double>({a1, a1, a1}, {true, true}).item(), 0.0);
  EXPECT_THROW(kld_continuity_loss<double>({a1}, {true, true}), ConfigError);
}

TEST_F(GslToy, PaddingReceivesNoGradient) {
  const auto t = prepare(records[2], cfg, vocab, co);
  const auto out = gsl_forward(t.enc, t.mask, params, cfg, t.co);
  backward(add(sum(mul(out.x, out.x)), sum(mul(out.adjacency, out.adjacency))));
  for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_EQ(params.embedding.grad()(kPadIndex, j), 0.0);
}

TEST_F(GslToy, WithinEncounterPermutationEquivariance) {
  const PatientRecord base = records[0];
  PatientRecord shuffled = base;
  std::reverse(shuffled.encounters[0].codes.begin(), shuffled.encounters[0].codes.end());
  std::swap(shuffled.encounters[1].codes[0], shuffled.encounters[1].codes[1]);
  const auto a = prepare(base, cfg, vocab, co);
  const auto b = prepare(shuffled, cfg, vocab, co);
  // perm[i] = position in b holding the code at position i of a.
  std::vector<std::size_t> perm(a.enc.seq_len());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    perm[i] = i;
    if (a.enc.is_pad[i]) continue;
    for (std::size_t k = 0; k < perm.size(); ++k)
      if (b.enc.code_ids[k] == a.enc.code_ids[i] && b.enc.enc_index[k] == a.enc.enc_index[i]) perm[i] = k;
  }
  const auto oa = gsl_forward(a.enc, a.mask, params, cfg, a.co);
  const auto ob = gsl_forward(b.enc, b.mask, params, cfg, b.co);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_NEAR(oa.x(i, j), ob.x(perm[i], j), 1e-12);
    for (std::size_t j = 0; j < perm.size(); ++j)
      EXPECT_NEAR(oa.adjacency(i, j), ob.adjacency(perm[i], perm[j]), 1e-12);
  }
}

TEST_F(GslToy, KldGradientMatchesFiniteDifferences) {
  const auto t = prepare(records[1], cfg, vocab, co);
  const auto valid = t.enc.valid();
  auto f = [&] { return kld_continuity_loss(gsl_forward(t.enc, t.mask, params, cfg, t.co).stack, valid); };
  std::vector<Tensor<double>> checked{params.embedding};
  for (std::size_t n = 0; n < params.blocks.size(); ++n)
    for (auto& p : block_params(params.blocks[n])) checked.push_back(p);
  const auto r = finite_difference_check<double>(f, checked);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_GT(r.checked, 50u);
}

TEST_F(GslToy, EmbeddingGradientThroughDownstreamLoss) {
  const auto t = prepare(records[3], cfg, vocab, co);
  M w(cfg.d_model, 1);
  std::mt19937_64 rng(8);
  for (auto& x : w.data) x = uniform(rng, -1, 1);
  const auto readout = Tensor<double>::constant(w);
  auto f = [&] {
    const auto out = gsl_forward(t.enc, t.mask, params, cfg, t.co);
    return sum(mul(matmul(out.x, readout), matmul(out.x, readout)));
  };
  const auto r = finite_difference_check<double>(f, {params.embedding});
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_GT(r.checked, 0u);
}

}  // namespace
}  // namespace deepj
