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

#pragma once

// Three-phase weight synchronization between the trainer and the rollout
// engine: init_engine() fixes the quantization scope, sync_weights() loads
// one full-precision snapshot per step (quantizing in-scope linears), and
// run_rollout() generates the step's trajectories from the loaded weights.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fp8rl/blockquant.hpp"
#include "fp8rl/error.hpp"
#include "fp8rl/kvquant.hpp"
#include "fp8rl/model.hpp"
#include "fp8rl/parallel.hpp"
#include "fp8rl/weights.hpp"

namespace fp8rl {

struct PolicySnapshot {
  PolicyWeights<float> weights;
  std::int64_t step = 0;
};

struct Trajectory {
  std::size_t prompt_index = 0;
  std::size_t sample_index = 0;
  std::vector<Token> prompt;
  std::vector<Token> response;
  std::vector<float> rollout_logp;  // one per response token
  double reward = 0.0;
  RoutingRecord routing;  // MoE only; positions 0 .. prompt+response-2

  std::vector<Token> full_sequence() const {
    std::vector<Token> s = prompt;
    s.insert(s.end(), response.begin(), response.end());
    return s;
  }
};

struct RolloutStats {
  std::size_t tokens_generated = 0;
  double rollout_s = 0.0;  // wall time, calibration included
  double calib_s = 0.0;
  std::size_t kv_bytes = 0;         // summed over every sequence's final cache
  std::size_t kv_bytes_16bit = 0;   // same caches at 16 bits per element
  std::size_t kv_saturations = 0;
  std::size_t freshness_checks = 0;
};

struct TrajectoryBatch {
  std::int64_t step = -1;  // weights version that generated the batch
  std::size_t n_per_prompt = 0;
  std::vector<Trajectory> samples;  // prompt-major, then sample index
  KvScales kv_scales;  // scales in force during generation (fp8 KV only)
  RolloutStats stats;

  std::size_t n_prompts() const { return n_per_prompt ? samples.size() / n_per_prompt : 0; }

  void validate() const {
    if (n_per_prompt == 0 || samples.size() % n_per_prompt != 0) throw ShapeError("batch: ragged groups");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.prompt_index != i / n_per_prompt || s.sample_index != i % n_per_prompt)
        throw ShapeError("batch: samples out of order");
      if (s.response.empty() || s.rollout_logp.size() != s.response.size())
        throw ShapeError("batch: log-probs do not align with response tokens");
      for (float lp : s.rollout_logp)
        if (!(lp <= 0.0f)) throw NumericError("batch: rollout log-prob not in (-inf, 0]");
      if (!std::isfinite(s.reward)) throw NumericError("batch: non-finite reward");
    }
  }
};

struct EngineConfig {
  ModelConfig model;
  QuantizationScope scope;
  bool recalibrate_each_step = true;  // calculate_kv_scales
  std::size_t threads = 1;
};

struct NamedQuantTensor {
  std::string name;
  BlockQuantTensor<float> tensor;
};

struct RolloutEngine {
  EngineConfig config;
  std::vector<NamedQuantTensor> quantized;  // in-scope linears of the loaded snapshot
  PolicyWeights<float> effective;           // what the forward pass reads
  std::int64_t loaded_step = -1;
  KvCacheState<float> kv;                   // scale state only; never holds tokens

  bool pass_through() const { return !config.scope.any(); }

  // Bytes of the linear layers the scope can quantize: one per element as
  // fp8 codes, two per element (16-bit equivalent) otherwise.
  std::size_t weight_bytes() const {
    std::size_t n = 0;
    for (const auto& ref : tensor_list(effective))
      if (ref.kind == TensorKind::kLinear) n += ref.tensor->size() * (config.scope.linear_fp8 ? 1 : 2);
    return n;
  }
  std::size_t weight_scale_bytes() const {
    std::size_t n = 0;
    for (const auto& q : quantized) n += q.tensor.scale_bytes();
    return n;
  }
};

inline RolloutEngine init_engine(const EngineConfig& config) {
  config.model.validate();
  config.scope.validate();
  RolloutEngine e;
  e.config = config;
  e.kv = make_kv_cache<float>(config.model.n_layers, config.model.d_model,
                              config.scope.kv_cache_fp8 ? KvDtype::kFp8E4M3 : KvDtype::kFull);
  return e;
}

// Loads a snapshot. With kv_scales the trainer-side scales are installed;
// otherwise the inference-side recalibration flag is raised (every step when
// recalibrate_each_step, else only until the first calibration). The engine
// is untouched if any check fails.
inline void sync_weights(RolloutEngine& engine, const PolicySnapshot& snap, const KvScales* kv_scales = nullptr) {
  if (snap.step <= engine.loaded_step)
    throw ProtocolError("sync_weights: stale snapshot (step " + std::to_string(snap.step) + " <= loaded " +
                        std::to_string(engine.loaded_step) + ")");
  if (!(snap.weights.config == engine.config.model)) throw ShapeError("sync_weights: snapshot config differs from engine");
  if (!weights_finite(snap.weights)) throw NumericError("sync_weights: snapshot has non-finite weights");

  const QuantizationScope& scope = engine.config.scope;
  PolicyWeights<float> eff = snap.weights;
  std::vector<NamedQuantTensor> quantized;
  for (auto& ref : tensor_list(eff)) {
    if (!in_linear_scope(ref.kind, scope)) continue;
    auto q = quantize_blockwise(*ref.tensor, scope.weight_block);
    *ref.tensor = dequantize(q);
    quantized.push_back({ref.name, std::move(q)});
  }
  KvCacheState<float> kv = engine.kv.empty_copy();
  if (kv.fp8()) {
    if (kv_scales) {
      install_scales(kv, *kv_scales);
    } else {
      const bool calibrated = std::all_of(kv.layers.begin(), kv.layers.end(), [](const auto& l) { return l.calibrated; });
      if (engine.config.recalibrate_each_step || !calibrated) recalibrate_inference_side(kv);
    }
  }
  eff.version = snap.step;
  engine.effective = std::move(eff);
  engine.quantized = std::move(quantized);
  engine.kv = std::move(kv);
  engine.loaded_step = snap.step;
}

// Generates n_per_prompt responses per prompt. Sample (i, j) draws from its
// own generator seeded by derive_seed({seed, loaded_step, i, j}), and results
// land in fixed slots, so the batch is independent of the worker count.
inline TrajectoryBatch run_rollout(RolloutEngine& engine, std::span<const std::vector<Token>> prompts,
                                   const SamplerConfig& sampler, std::size_t n_per_prompt, std::uint64_t seed) {
  if (engine.loaded_step < 0) throw ProtocolError("run_rollout: no weights loaded");
  if (prompts.empty() || n_per_prompt == 0) throw ConfigError("run_rollout: need at least one prompt and sample");
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  TrajectoryBatch batch;
  batch.step = engine.loaded_step;
  batch.n_per_prompt = n_per_prompt;
  const QuantizationScope& scope = engine.config.scope;

  if (engine.kv.fp8()) {
    if (engine.kv.any_needs_recalibration()) {
      const auto c0 = clock::now();
      calibrate_on_first_forward(engine.effective, prompts, scope, engine.kv, engine.loaded_step);
      batch.stats.calib_s = std::chrono::duration<double>(clock::now() - c0).count();
    }
    if (engine.config.recalibrate_each_step) {
      ++batch.stats.freshness_checks;
      if (engine.kv.scale_version != engine.loaded_step)
        throw ProtocolError("run_rollout: KV scales from version " + std::to_string(engine.kv.scale_version) +
                            " used with weights of step " + std::to_string(engine.loaded_step));
    }
    batch.kv_scales = engine.kv.scales();
  }

  const std::size_t total = prompts.size() * n_per_prompt;
  batch.samples.resize(total);
  std::vector<std::size_t> kv_bytes(total), kv16(total), sats(total);
  parallel_for(total, engine.config.threads, [&](std::size_t idx) {
    const std::size_t i = idx / n_per_prompt, j = idx % n_per_prompt;
    auto r = sample_response(engine.effective, prompts[i], scope, sampler,
                             derive_seed({seed, static_cast<std::uint64_t>(engine.loaded_step), i, j}),
                             engine.kv.empty_copy());
    Trajectory& t = batch.samples[idx];
    t.prompt_index = i;
    t.sample_index = j;
    t.prompt = prompts[i];
    t.response = std::move(r.tokens);
    t.rollout_logp = std::move(r.logp);
    t.routing = std::move(r.routing);
    kv_bytes[idx] = r.cache.footprint_bytes();
    kv16[idx] = r.cache.bf16_equivalent_bytes();
    sats[idx] = r.cache.saturations;
  });
  for (std::size_t idx = 0; idx < total; ++idx) {
    batch.stats.tokens_generated += batch.samples[idx].response.size();
    batch.stats.kv_bytes += kv_bytes[idx];
    batch.stats.kv_bytes_16bit += kv16[idx];
    batch.stats.kv_saturations += sats[idx];
  }
  batch.stats.rollout_s = std::chrono::duration<double>(clock::now() - t0).count();
  return batch;
}

}  // namespace fp8rl
