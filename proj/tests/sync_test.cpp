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
#include <map>
#include <vector>

#include "fp8rl/sync.hpp"
#include "fp8rl/tasks.hpp"

namespace {

using namespace fp8rl;

ModelConfig cfg(bool moe = false) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq = 24;
  if (moe) c.moe = MoeConfig{4, 1};
  return c;
}

PolicySnapshot snapshot(const ModelConfig& c, std::int64_t step, std::uint64_t seed = 1) {
  return {init_weights<float>(c, seed), step};
}

std::vector<std::vector<Token>> prompts(std::size_t n, std::uint64_t seed = 3) {
  TaskSpec spec;
  std::mt19937_64 rng(seed);
  std::vector<std::vector<Token>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_problem(spec, rng).prompt);
  return out;
}

EngineConfig engine_cfg(const QuantizationScope& scope, bool moe = false) {
  EngineConfig e;
  e.model = cfg(moe);
  e.scope = scope;
  return e;
}

TEST(Engine, InitStartsEmptyAndValidatesScope) {
  const auto e = init_engine(engine_cfg(QuantizationScope{}));
  EXPECT_TRUE(e.pass_through());
  EXPECT_EQ(e.loaded_step, -1);
  QuantizationScope bad;
  bad.attention_fp8 = true;
  EXPECT_THROW(init_engine(engine_cfg(bad)), ConfigError);
  const auto again = init_engine(engine_cfg(QuantizationScope{}));
  EXPECT_EQ(again.kv.dtype, e.kv.dtype);
  EXPECT_EQ(again.loaded_step, e.loaded_step);
}

TEST(Engine, SyncQuantizesInScopeLinearsAndCopiesTheRest) {
  auto e = init_engine(engine_cfg(QuantizationScope::linear(), true));
  const auto s = snapshot(e.config.model, 0);
  sync_weights(e, s);
  EXPECT_EQ(e.loaded_step, 0);
  const BlockShape b = e.config.scope.weight_block;
  EXPECT_EQ(e.effective.layers[1].q_proj, dequantize(quantize_blockwise(s.weights.layers[1].q_proj, b)));
  EXPECT_EQ(e.effective.layers[0].fc1[3], dequantize(quantize_blockwise(s.weights.layers[0].fc1[3], b)));
  EXPECT_EQ(e.effective.layers[0].router, s.weights.layers[0].router);
  EXPECT_EQ(e.effective.embedding, s.weights.embedding);
  EXPECT_EQ(e.effective.lm_head, s.weights.lm_head);
  ASSERT_FALSE(e.quantized.empty());
  EXPECT_EQ(e.quantized.front().name, "layers.0.q_proj");
  EXPECT_EQ(e.quantized.front().tensor.codes, quantize_blockwise(s.weights.layers[0].q_proj, b).codes);
  // 4 attention + 2 experts x 4 per layer, two layers
  EXPECT_EQ(e.quantized.size(), 2u * (4 + 8));
}

TEST(Engine, StaleSnapshotIsRejectedAndStateKept) {
  auto e = init_engine(engine_cfg(QuantizationScope::linear()));
  sync_weights(e, snapshot(e.config.model, 0));
  const auto before = e.effective;
  EXPECT_THROW(sync_weights(e, snapshot(e.config.model, 0, 2)), ProtocolError);
  auto bad = snapshot(e.config.model, 1, 2);
  bad.weights.layers[0].v_proj(0, 0) = NAN;
  EXPECT_THROW(sync_weights(e, bad), NumericError);
  EXPECT_EQ(e.loaded_step, 0);
  EXPECT_TRUE(bitwise_equal(e.effective, before));
  sync_weights(e, snapshot(e.config.model, 3, 2));
  EXPECT_EQ(e.loaded_step, 3);
  EXPECT_FALSE(bitwise_equal(e.effective, before));
}

TEST(Engine, TrainerSideScalesAreInstalledVerbatim) {
  auto e = init_engine(engine_cfg(QuantizationScope::kv_only()));
  KvScales s{{0.5f, 0.25f}, {0.125f, 1.5f}, {2.0f, 3.0f}, 0};
  sync_weights(e, snapshot(e.config.model, 0), &s);
  EXPECT_FALSE(e.kv.any_needs_recalibration());
  EXPECT_EQ(e.kv.scales(), s);
}

TEST(Rollout, RequiresLoadedWeights) {
  auto e = init_engine(engine_cfg(QuantizationScope{}));
  const auto p = prompts(1);
  EXPECT_THROW(run_rollout(e, p, SamplerConfig{}, 1, 0), ProtocolError);
}

TEST(Rollout, GreedySingleSampleIsDeterministicAndTagged) {
  auto e = init_engine(engine_cfg(QuantizationScope::linear()));
  sync_weights(e, snapshot(e.config.model, 4));
  SamplerConfig greedy;
  greedy.temperature = 0;
  const auto p = prompts(5);
  const auto a = run_rollout(e, p, greedy, 1, 1);
  const auto b = run_rollout(e, p, greedy, 1, 999);
  EXPECT_EQ(a.step, 4);
  ASSERT_EQ(a.samples.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.samples[i].response, b.samples[i].response);
    for (float lp : a.samples[i].rollout_logp) EXPECT_EQ(lp, 0.0f);
  }
  a.validate();
}

TEST(Rollout, BatchIsIndependentOfWorkerCount) {
  for (bool moe : {false, true}) {
    auto cfg1 = engine_cfg(QuantizationScope::full_fp8(), moe);
    auto cfg4 = cfg1;
    cfg4.threads = 4;
    auto e1 = init_engine(cfg1), e4 = init_engine(cfg4);
    const auto s = snapshot(cfg1.model, 0);
    sync_weights(e1, s);
    sync_weights(e4, s);
    const auto p = prompts(6);
    const auto a = run_rollout(e1, p, SamplerConfig{}, 3, 42);
    const auto b = run_rollout(e4, p, SamplerConfig{}, 3, 42);
    ASSERT_EQ(a.samples.size(), 18u);
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
      EXPECT_EQ(a.samples[i].response, b.samples[i].response);
      EXPECT_EQ(a.samples[i].rollout_logp, b.samples[i].rollout_logp);
      EXPECT_EQ(a.samples[i].routing.experts, b.samples[i].routing.experts);
      EXPECT_EQ(a.samples[i].prompt_index, i / 3);
    }
    EXPECT_EQ(a.stats.kv_bytes, b.stats.kv_bytes);
    EXPECT_EQ(2 * a.stats.kv_bytes, a.stats.kv_bytes_16bit);
  }
}

// Every scope: the trainer recomputing with the rollout scope (and the
// batch's frozen KV scales) reproduces the recorded log-probs exactly.
TEST(Rollout, RecordedLogProbsMatchRolloutScopeRecompute) {
  for (const auto& scope : {QuantizationScope{}, QuantizationScope::linear(), QuantizationScope::kv_only(),
                            QuantizationScope::full_fp8()})
    for (bool moe : {false, true}) {
      auto e = init_engine(engine_cfg(scope, moe));
      const auto s = snapshot(e.config.model, 0, 5);
      sync_weights(e, s);
      const auto batch = run_rollout(e, prompts(4), SamplerConfig{}, 2, 8);
      const auto eff = effective_weights(s.weights, scope);
      for (const auto& t : batch.samples) {
        const auto seq = t.full_sequence();
        EvalOptions<float> opt;
        opt.kv_scales = &batch.kv_scales;
        const auto ev = evaluate_sequence(eff, TrainerSequence<float>{seq, t.prompt.size(), {}, nullptr}, scope, opt, nullptr);
        EXPECT_EQ(ev.logp, t.rollout_logp);
        if (moe) {
          EXPECT_EQ(ev.routing.experts, t.routing.experts);
        }
      }
    }
}

TEST(Rollout, InferenceSideCalibrationRunsOncePerStepAndStaysFresh) {
  auto e = init_engine(engine_cfg(QuantizationScope::full_fp8()));
  const auto p = prompts(2);
  std::map<std::uint64_t, KvScales> by_weights;
  std::size_t checks = 0;
  for (std::int64_t step = 0; step < 100; ++step) {
    const auto seed = static_cast<std::uint64_t>(step % 3);
    sync_weights(e, snapshot(e.config.model, step, seed));
    EXPECT_TRUE(e.kv.any_needs_recalibration());
    const auto b = run_rollout(e, p, SamplerConfig{}, 1, 0);
    checks += b.stats.freshness_checks;
    EXPECT_EQ(b.kv_scales.version, step);
    EXPECT_FALSE(e.kv.any_needs_recalibration());
    auto [it, fresh] = by_weights.emplace(seed, b.kv_scales);
    if (!fresh) {
      EXPECT_EQ(b.kv_scales.k, it->second.k);
      EXPECT_EQ(b.kv_scales.q, it->second.q);
    }
  }
  EXPECT_EQ(checks, 100u);
}

TEST(Rollout, StaleScalesTripFreshnessCheck) {
  auto e = init_engine(engine_cfg(QuantizationScope::kv_only()));
  KvScales old{{1, 1}, {1, 1}, {1, 1}, 0};
  sync_weights(e, snapshot(e.config.model, 1), &old);
  EXPECT_THROW(run_rollout(e, prompts(1), SamplerConfig{}, 1, 0), ProtocolError);
}

TEST(Rollout, CalibrateOnceKeepsFirstScales) {
  auto c = engine_cfg(QuantizationScope::kv_only());
  c.recalibrate_each_step = false;
  auto e = init_engine(c);
  sync_weights(e, snapshot(c.model, 0, 1));
  const auto first = run_rollout(e, prompts(1), SamplerConfig{}, 1, 0).kv_scales;
  sync_weights(e, snapshot(c.model, 1, 2));
  EXPECT_FALSE(e.kv.any_needs_recalibration());
  const auto second = run_rollout(e, prompts(1), SamplerConfig{}, 1, 0);
  EXPECT_EQ(second.kv_scales, first);
  EXPECT_EQ(second.stats.freshness_checks, 0u);
}

TEST(Parallel, DeriveSeedSeparatesComponents) {
  EXPECT_NE(derive_seed({1, 2, 3}), derive_seed({1, 3, 2}));
  EXPECT_NE(derive_seed({0, 0}), derive_seed({0}));
  EXPECT_EQ(derive_seed({7, 7}), derive_seed({7, 7}));
}

TEST(Parallel, ExceptionsPropagate) {
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 6) throw ShapeError("boom");
               }),
               ShapeError);
}

}  // namespace
