/*
 * Copyright (c) 2026, The fp8rl Authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "fp8rl/kvquant.hpp"
#include "fp8rl/model.hpp"

namespace {

using namespace fp8rl;

Matrix<float> gaussian(std::size_t r, std::size_t c, std::mt19937_64& rng, float sd = 1.0f) {
  std::normal_distribution<float> n(0.0f, sd);
  Matrix<float> m(r, c);
  for (auto& v : m.flat()) v = n(rng);
  return m;
}

KvCacheState<float> calibrated_fp8(std::size_t layers, std::size_t width, float scale) {
  auto c = make_kv_cache<float>(layers, width, KvDtype::kFp8E4M3);
  KvScales s;
  s.q.assign(layers, scale);
  s.k.assign(layers, scale);
  s.v.assign(layers, scale);
  s.version = 0;
  install_scales(c, s);
  return c;
}

TEST(KvCache, FullDtypeReadBackIsVerbatim) {
  std::mt19937_64 rng(1);
  auto c = make_kv_cache<float>(2, 6, KvDtype::kFull);
  const auto k = gaussian(5, 6, rng), v = gaussian(5, 6, rng);
  cache_append(c, 1, k, v);
  EXPECT_EQ(c.layers[1].k, k);
  EXPECT_EQ(c.layers[1].v, v);
  EXPECT_EQ(c.layers[0].k.rows(), 0u);
}

TEST(KvCache, AppendRejectsBadLayerAndShape) {
  auto c = make_kv_cache<float>(2, 4, KvDtype::kFull);
  Matrix<float> k(1, 4), bad(1, 3);
  EXPECT_THROW(cache_append(c, 2, k, k), ShapeError);
  EXPECT_THROW(cache_append(c, 0, bad, bad), ShapeError);
}

TEST(KvCache, AmaxValueRoundTripsThroughScale) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto k = gaussian(3, 8, rng, std::exp2(static_cast<float>(trial % 20) - 10.0f));
    QkvAmax<float> a(1);
    QkvAmax<float>::observe(a.k[0], k);
    QkvAmax<float>::observe(a.v[0], k);
    QkvAmax<float>::observe(a.q[0], k);
    auto c = make_kv_cache<float>(1, 8, KvDtype::kFp8E4M3);
    recalibrate_inference_side(c);
    apply_calibration(c, a, 0);
    cache_append(c, 0, k, k);
    const float amax = a.k[0];
    const float s = c.layers[0].k_scale;
    for (std::size_t i = 0; i < k.size(); ++i) {
      if (std::fabs(k.flat()[i]) != amax) continue;
      const double back = std::fabs(static_cast<double>(c.layers[0].k.flat()[i]));
      // 448 * s is amax up to the rounding of s itself.
      EXPECT_LE(std::fabs(back - amax), std::nextafter(448.0f * s, INFINITY) - 448.0f * s + 0.0) << trial;
    }
    EXPECT_EQ(c.saturations, 0u);
  }
}

TEST(KvCache, OutOfRangeValuesSaturateAndCount) {
  auto c = calibrated_fp8(1, 2, 0.5f);
  Matrix<float> k(1, 2);
  k(0, 0) = 10.0f * 448.0f * 0.5f;
  k(0, 1) = -10.0f * 448.0f * 0.5f;
  cache_append(c, 0, k, k);
  EXPECT_EQ(c.layers[0].k(0, 0), 224.0f);
  EXPECT_EQ(c.layers[0].k(0, 1), -224.0f);
  EXPECT_EQ(c.saturations, 4u);
  for (const auto& l : c.layers)
    for (float x : l.k.flat()) EXPECT_LE(std::fabs(x), 448.0f * l.k_scale);
}

TEST(KvCache, Fp8FootprintIsHalfOfSixteenBitAtEveryLength) {
  auto c = calibrated_fp8(3, 16, 1.0f);
  auto f = make_kv_cache<float>(3, 16, KvDtype::kFull);
  std::mt19937_64 rng(3);
  for (std::size_t len = 1; len <= 64; ++len) {
    const auto k = gaussian(1, 16, rng);
    for (std::size_t l = 0; l < 3; ++l) {
      cache_append(c, l, k, k);
      cache_append(f, l, k, k);
    }
    EXPECT_EQ(2 * c.footprint_bytes(), c.bf16_equivalent_bytes());
    EXPECT_EQ(2 * c.footprint_bytes(), f.footprint_bytes());
    EXPECT_EQ(c.footprint_bytes(), 2 * 3 * 16 * len);
  }
}

TEST(KvProtocol, FlaggedLayerRejectsAppend) {
  auto c = calibrated_fp8(2, 4, 1.0f);
  recalibrate_inference_side(c);
  Matrix<float> k(1, 4, 1.0f);
  EXPECT_THROW(cache_append(c, 0, k, k), ProtocolError);
  auto u = make_kv_cache<float>(2, 4, KvDtype::kFp8E4M3);
  EXPECT_THROW(cache_append(u, 0, k, k), ProtocolError);
  EXPECT_THROW(install_scales(u, KvScales{{1, 1}, {1, 0}, {1, 1}, 0}), NumericError);
}

ModelConfig small(bool moe) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq = 24;
  if (moe) c.moe = MoeConfig{4, 1};
  return c;
}

std::vector<Token> seq_of(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Token> t(n);
  for (auto& x : t) x = static_cast<Token>(2 + rng() % 22);
  return t;
}

// Both protocols see the same calibration input and produce the same scales.
TEST(KvProtocol, InferenceAndTrainerSideAgreeOnIdenticalInputs) {
  for (bool moe : {false, true})
    for (bool linear : {false, true}) {
      const auto cfg = small(moe);
      const auto master = init_weights<float>(cfg, 40 + moe);
      QuantizationScope scope = linear ? QuantizationScope::full_fp8() : QuantizationScope::kv_only();
      const auto eff = effective_weights(master, scope);
      const auto prompt = seq_of(9, 7);
      auto cache = make_kv_cache<float>(cfg.n_layers, cfg.d_model, KvDtype::kFp8E4M3);
      recalibrate_inference_side(cache);
      calibrate_on_first_forward(eff, prompt, scope, cache, 5);
      EXPECT_FALSE(cache.any_needs_recalibration());
      const std::vector<std::vector<Token>> calib{prompt};
      const KvScales trainer = recalibrate_trainer_side(master, std::span(calib), scope, 5);
      EXPECT_EQ(cache.scales(), trainer);
    }
}

TEST(KvProtocol, BatchedPrefillMatchesTrainerSideOnSamePrompts) {
  const auto cfg = small(false);
  const auto master = init_weights<float>(cfg, 12);
  const auto scope = QuantizationScope::full_fp8();
  std::vector<std::vector<Token>> prompts;
  for (int i = 0; i < 5; ++i) prompts.push_back(seq_of(3 + 2 * i, 60 + i));
  auto cache = make_kv_cache<float>(cfg.n_layers, cfg.d_model, KvDtype::kFp8E4M3);
  recalibrate_inference_side(cache);
  calibrate_on_first_forward(effective_weights(master, scope), std::span<const std::vector<Token>>(prompts), scope,
                             cache, 2);
  EXPECT_EQ(cache.scales(), recalibrate_trainer_side(master, std::span(prompts), scope, 2));
  // One prompt alone sees no more than the whole prefill.
  auto single = make_kv_cache<float>(cfg.n_layers, cfg.d_model, KvDtype::kFp8E4M3);
  recalibrate_inference_side(single);
  calibrate_on_first_forward(effective_weights(master, scope), std::span<const Token>(prompts[0]), scope, single, 2);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) EXPECT_LE(single.scales().k[l], cache.scales().k[l]);
}

TEST(KvProtocol, SameWeightsSameInputsSameScalesEachStep) {
  const auto cfg = small(false);
  const auto w = init_weights<float>(cfg, 1);
  const auto prompt = seq_of(6, 2);
  KvScales prev;
  for (int step = 0; step < 3; ++step) {
    auto cache = make_kv_cache<float>(cfg.n_layers, cfg.d_model, KvDtype::kFp8E4M3);
    recalibrate_inference_side(cache);
    calibrate_on_first_forward(w, prompt, QuantizationScope::kv_only(), cache, 0);
    if (step > 0) {
      EXPECT_EQ(cache.scales(), prev);
    }
    prev = cache.scales();
  }
}

TEST(KvProtocol, SupersetCalibrationNeverShrinksScales) {
  const auto cfg = small(false);
  const auto w = init_weights<float>(cfg, 3);
  std::vector<std::vector<Token>> data;
  for (int i = 0; i < 8; ++i) data.push_back(seq_of(5 + i, 100 + i));
  const auto all = recalibrate_trainer_side(w, std::span(data), QuantizationScope::kv_only(), 0);
  for (std::size_t n = 1; n < data.size(); ++n) {
    const auto sub = recalibrate_trainer_side(w, std::span(data).first(n), QuantizationScope::kv_only(), 0);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      EXPECT_GE(all.k[l], sub.k[l]);
      EXPECT_GE(all.v[l], sub.v[l]);
      EXPECT_GE(all.q[l], sub.q[l]);
    }
  }
  EXPECT_THROW(recalibrate_trainer_side(w, std::span<const std::vector<Token>>(), QuantizationScope::kv_only(), 0),
               ConfigError);
}

double oracle_attention_1x1(double q, const std::vector<double>& k, const std::vector<double>& v) {
  std::vector<double> s(k.size());
  double mx = -INFINITY, sum = 0, out = 0;
  for (std::size_t j = 0; j < k.size(); ++j) mx = std::max(mx, s[j] = q * k[j]);
  for (std::size_t j = 0; j < k.size(); ++j) sum += (s[j] = std::exp(s[j] - mx));
  for (std::size_t j = 0; j < k.size(); ++j) out += s[j] / sum * v[j];
  return out;
}

TEST(Attention, Fp8SingleHeadMatchesFloat64OracleOnDequantizedValues) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 6;
    auto c = calibrated_fp8(1, 1, 0.0078125f * static_cast<float>(1 + rng() % 5));
    const auto k = gaussian(n, 1, rng), v = gaussian(n, 1, rng), q = gaussian(1, 1, rng);
    cache_append(c, 0, k, v);
    const auto out = attention_forward(q, n - 1, c, 0, 1, true);
    const float qs = c.layers[0].q_scale;
    const double qd = static_cast<double>(e4m3::decode(e4m3::encode(q(0, 0) / qs))) * qs;
    std::vector<double> kd, vd;
    for (std::size_t j = 0; j < n; ++j) {
      kd.push_back(c.layers[0].k(j, 0));
      vd.push_back(c.layers[0].v(j, 0));
    }
    const double ref = oracle_attention_1x1(qd, kd, vd);
    double vmax = 0;
    for (double x : vd) vmax = std::max(vmax, std::fabs(x));
    EXPECT_NEAR(out(0, 0), ref, 8 * std::numeric_limits<float>::epsilon() * vmax) << trial;
  }
}

TEST(Attention, ProbabilitiesSumToOne) {
  std::mt19937_64 rng(6);
  auto c = calibrated_fp8(1, 8, 0.01f);
  const auto k = gaussian(7, 8, rng, 2.0f);
  cache_append(c, 0, k, k);
  std::vector<Matrix<float>> probs;
  attention_forward(gaussian(7, 8, rng, 2.0f), 0, c, 0, 2, true, &probs);
  for (const auto& p : probs)
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double s = 0;
      for (float x : p.row(i)) s += x;
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Attention, RepresentableValuesMakeFp8PathBitwiseEqual) {
  std::mt19937_64 rng(7);
  const float scale = 0.0625f;
  auto representable = [&](std::size_t r) {
    Matrix<float> m(r, 8);
    for (auto& x : m.flat()) x = e4m3::decode(Fp8Code{static_cast<std::uint8_t>(rng() % 0x7F)}) * scale;
    return m;
  };
  const auto k = representable(6), v = representable(6), q = representable(6);
  auto f = make_kv_cache<float>(1, 8, KvDtype::kFull);
  auto c = calibrated_fp8(1, 8, scale);
  cache_append(f, 0, k, v);
  cache_append(c, 0, k, v);
  EXPECT_EQ(attention_forward(q, 0, c, 0, 2, true), attention_forward(q, 0, f, 0, 2, false));
  EXPECT_EQ(c.saturations, 0u);
}

TEST(Attention, UncalibratedFp8AttentionIsRejected) {
  auto c = make_kv_cache<float>(1, 4, KvDtype::kFull);
  Matrix<float> k(2, 4, 1.0f);
  cache_append(c, 0, k, k);
  EXPECT_THROW(attention_forward(k, 0, c, 0, 1, true), ProtocolError);
}

// With frozen scales, decoding one token at a time through the fp8 cache
// reproduces the whole-sequence forward bitwise.
TEST(KvConsistency, Fp8IncrementalMatchesFullRecompute) {
  for (bool moe : {false, true}) {
    const auto cfg = small(moe);
    const auto scope = QuantizationScope::full_fp8();
    const auto w = effective_weights(init_weights<float>(cfg, 77), scope);
    const auto toks = seq_of(14, 9);
    auto base = make_kv_cache<float>(cfg.n_layers, cfg.d_model, KvDtype::kFp8E4M3);
    recalibrate_inference_side(base);
    calibrate_on_first_forward(w, std::span(toks).first(4), scope, base, 0);
    auto c1 = base.empty_copy(), c2 = base.empty_copy();
    const auto full = forward_rows(w, toks, 0, toks.size(), scope, c1);
    for (std::size_t p = 0; p < toks.size(); ++p) {
      const auto step = forward_rows(w, toks, p, p + 1, scope, c2);
      for (std::size_t v = 0; v < cfg.vocab_size; ++v) ASSERT_EQ(step(0, v), full(p, v));
    }
    EXPECT_EQ(c1.layers[0].k_codes, c2.layers[0].k_codes);
    EXPECT_EQ(c1.saturations, c2.saturations);
  }
}

}  // namespace
