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

// Group-relative policy gradient with token-level importance correction.
//
//   w_t     = exp(logp_trainer_t - logp_rollout_t)
//   tis     : min(w, C)          mis : w if w in [1/C, C] else 0
//   A_i     = (r_i - mean(group)) / (std(group) + 1e-6)
//   loss    = -(1/N_tok) sum_t sg(w_eff_t) * A_(sample of t) * logp_trainer_t

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fp8rl/error.hpp"
#include "fp8rl/model.hpp"
#include "fp8rl/parallel.hpp"
#include "fp8rl/sync.hpp"
#include "fp8rl/weights.hpp"

namespace fp8rl {

enum class CorrectionMode { kNone, kTis, kMis };

struct CorrectionConfig {
  CorrectionMode mode = CorrectionMode::kTis;
  double clip = 2.0;
  bool routing_replay = false;
  bool two_sided = false;  // tis only: also raise weights below 1/C to 1/C

  void validate() const {
    if (!std::isfinite(clip) || !(clip > 1.0)) throw ConfigError("correction.clip must be finite and > 1");
  }
};

inline std::vector<float> importance_weights(std::span<const float> trainer_logp, std::span<const float> rollout_logp) {
  if (trainer_logp.size() != rollout_logp.size()) throw ShapeError("importance_weights: token grids differ");
  std::vector<float> w(trainer_logp.size());
  for (std::size_t t = 0; t < w.size(); ++t) {
    if (!std::isfinite(trainer_logp[t]) || !std::isfinite(rollout_logp[t]))
      throw NumericError("importance_weights: non-finite log-prob");
    w[t] = std::exp(trainer_logp[t] - rollout_logp[t]);
  }
  return w;
}

inline float correct_one(float w, const CorrectionConfig& cfg) {
  const float c = static_cast<float>(cfg.clip), lo = static_cast<float>(1.0 / cfg.clip);
  switch (cfg.mode) {
    case CorrectionMode::kNone:
      return 1.0f;
    case CorrectionMode::kTis:
      return cfg.two_sided ? std::clamp(w, lo, c) : std::min(w, c);
    case CorrectionMode::kMis:
      return (w >= lo && w <= c) ? w : 0.0f;
  }
  return w;
}

inline std::vector<float> apply_correction(std::span<const float> w, const CorrectionConfig& cfg) {
  std::vector<float> out(w.size());
  for (std::size_t t = 0; t < w.size(); ++t) {
    if (!(w[t] >= 0.0f)) throw NumericError("apply_correction: weights must be non-negative");
    out[t] = correct_one(w[t], cfg);
  }
  return out;
}

// rewards are laid out group after group, group_size entries each.
inline std::vector<double> group_advantages(std::span<const double> rewards, std::size_t group_size) {
  if (group_size < 2) throw ConfigError("group_advantages: groups need at least 2 samples");
  if (rewards.size() % group_size != 0) throw ShapeError("group_advantages: ragged groups");
  std::vector<double> adv(rewards.size());
  for (std::size_t g = 0; g < rewards.size(); g += group_size) {
    const auto grp = rewards.subspan(g, group_size);
    double mean = 0;
    for (double r : grp) mean += r;
    mean /= static_cast<double>(group_size);
    double var = 0;
    for (double r : grp) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / static_cast<double>(group_size));
    for (std::size_t i = 0; i < group_size; ++i) adv[g + i] = (grp[i] - mean) / (sd + 1e-6);
  }
  return adv;
}

// KL(p || q) for two log-probability rows over the same support.
inline double kl_from_logp(std::span<const float> logp_p, std::span<const float> logp_q) {
  double kl = 0;
  for (std::size_t v = 0; v < logp_p.size(); ++v) {
    const double lp = logp_p[v];
    if (lp == -INFINITY) continue;
    kl += std::exp(lp) * (lp - static_cast<double>(logp_q[v]));
  }
  return kl;
}

struct StepMetrics {
  std::int64_t step = 0;
  double mean_reward = 0;
  std::optional<double> val_accuracy;
  double mean_response_len = 0;
  double mismatch_kl = 0;
  double is_ratio_mean = 1;
  double is_ratio_max = 1;
  double frac_clipped = 0;
  double frac_masked = 0;
  std::size_t kv_saturations = 0;
  std::size_t tokens_generated = 0;
  double rollout_s = 0;
  double tokens_per_s = 0;
  std::size_t kv_bytes = 0;
  std::size_t weight_bytes = 0;
  // Not part of the core record; written after the fields above.
  std::optional<double> routing_disagreement;
  double loss = 0;
  std::size_t weight_scale_bytes = 0;
  std::size_t kv_bytes_16bit = 0;
  double kv_calib_s = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["mean_reward"] = mean_reward;
    j["val_accuracy"] = val_accuracy ? nlohmann::ordered_json(*val_accuracy) : nlohmann::ordered_json(nullptr);
    j["mean_response_len"] = mean_response_len;
    j["mismatch_kl"] = mismatch_kl;
    j["is_ratio_mean"] = is_ratio_mean;
    j["is_ratio_max"] = is_ratio_max;
    j["frac_clipped"] = frac_clipped;
    j["frac_masked"] = frac_masked;
    j["kv_saturations"] = kv_saturations;
    j["tokens_generated"] = tokens_generated;
    j["rollout_s"] = rollout_s;
    j["tokens_per_s"] = tokens_per_s;
    j["kv_bytes"] = kv_bytes;
    j["weight_bytes"] = weight_bytes;
    j["routing_disagreement"] =
        routing_disagreement ? nlohmann::ordered_json(*routing_disagreement) : nlohmann::ordered_json(nullptr);
    j["loss"] = loss;
    j["weight_scale_bytes"] = weight_scale_bytes;
    j["kv_bytes_16bit"] = kv_bytes_16bit;
    j["kv_calib_s"] = kv_calib_s;
    return j;
  }
};

// Plain SGD with momentum. A step with an all-zero gradient is skipped
// entirely, so velocity does not move the weights on its own.
struct SgdMomentum {
  double lr = 3e-3;
  double momentum = 0.9;
  PolicyWeights<float> velocity;

  bool step(PolicyWeights<float>& w, const PolicyWeights<float>& g) {
    auto gt = tensor_list(g);
    bool nonzero = false;
    for (const auto& t : gt)
      for (float x : t.tensor->flat()) nonzero |= (x != 0.0f);
    if (!nonzero) return false;
    if (velocity.layers.empty()) velocity = zeros_like(w);
    auto wt = tensor_list(w);
    auto vt = tensor_list(velocity);
    const float lr_f = static_cast<float>(lr), mu = static_cast<float>(momentum);
    for (std::size_t i = 0; i < wt.size(); ++i) {
      auto wf = wt[i].tensor->flat();
      auto vf = vt[i].tensor->flat();
      auto gf = gt[i].tensor->flat();
      for (std::size_t k = 0; k < wf.size(); ++k) {
        vf[k] = mu * vf[k] + gf[k];
        wf[k] -= lr_f * vf[k];
      }
    }
    return true;
  }
};

struct TrainerState {
  PolicyWeights<float> weights;  // master weights; version = step that produced them
  SgdMomentum optimizer;
};

struct UpdateConfig {
  CorrectionConfig correction;
  QuantizationScope trainer_scope;
  QuantizationScope rollout_scope;
  bool compute_kl = true;
  std::size_t threads = 1;
  std::size_t grad_chunks = 16;  // fixed reduction tree, independent of threads
};

struct SampleReport {
  std::vector<float> trainer_logp;
  std::vector<float> weights;      // raw importance weights
  std::vector<float> eff_weights;  // after correction
  double kl_sum = 0;
  double loss = 0;
  RoutingRecord trainer_routing;
};

struct UpdateReport {
  StepMetrics metrics;
  std::vector<SampleReport> samples;
  bool applied = false;  // optimizer step taken
};

inline void add_weights(PolicyWeights<float>& acc, const PolicyWeights<float>& x) {
  auto a = tensor_list(acc);
  auto b = tensor_list(x);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].tensor->size(); ++k) a[i].tensor->flat()[k] += b[i].tensor->flat()[k];
}

// One policy-gradient update from a batch generated by the state's current
// weights. Metrics fields that describe the rollout (timing, KV) are copied
// from the batch; val_accuracy is left to the caller.
inline UpdateReport policy_update(TrainerState& state, const TrajectoryBatch& batch, const UpdateConfig& cfg) {
  batch.validate();
  cfg.correction.validate();
  cfg.trainer_scope.validate();
  if (batch.step != state.weights.version)
    throw ProtocolError("policy_update: batch from step " + std::to_string(batch.step) + ", trainer at " +
                        std::to_string(state.weights.version));
  if (cfg.trainer_scope.kv_cache_fp8) throw ConfigError("policy_update: trainer scope cannot use fp8 KV");
  const ModelConfig& mc = state.weights.config;
  if (cfg.correction.routing_replay && !mc.moe) throw ConfigError("policy_update: routing replay needs an MoE model");

  const std::size_t n = batch.samples.size();
  std::vector<double> rewards;
  std::size_t n_tok = 0;
  for (const auto& s : batch.samples) {
    rewards.push_back(s.reward);
    n_tok += s.response.size();
  }
  const auto adv = group_advantages(rewards, batch.n_per_prompt);

  const PolicyWeights<float> eff = effective_weights(state.weights, cfg.trainer_scope);
  const bool separate_rollout_forward = cfg.compute_kl && !(cfg.rollout_scope == cfg.trainer_scope);
  PolicyWeights<float> eff_rollout;
  if (separate_rollout_forward) eff_rollout = effective_weights(state.weights, cfg.rollout_scope);

  UpdateReport report;
  report.samples.resize(n);
  const std::size_t chunks = std::max<std::size_t>(1, std::min(cfg.grad_chunks, n));
  std::vector<PolicyWeights<float>> grads(chunks);
  const float inv_ntok = 1.0f / static_cast<float>(n_tok);

  parallel_for(chunks, cfg.threads, [&](std::size_t c) {
    grads[c] = zeros_like(state.weights);
    for (std::size_t i = c * n / chunks; i < (c + 1) * n / chunks; ++i) {
      const Trajectory& tr = batch.samples[i];
      SampleReport& rep = report.samples[i];
      const auto seq = tr.full_sequence();
      const float a = static_cast<float>(adv[i]);
      EvalOptions<float> opt;
      opt.full_distribution = cfg.compute_kl;
      auto derive = [&](std::span<const float> logp, std::vector<float>& lw) {
        rep.weights = importance_weights(logp, tr.rollout_logp);
        rep.eff_weights = apply_correction(rep.weights, cfg.correction);
        lw.resize(logp.size());
        for (std::size_t t = 0; t < logp.size(); ++t) {
          lw[t] = -rep.eff_weights[t] * a * inv_ntok;
          rep.loss += static_cast<double>(lw[t]) * logp[t];
        }
      };
      opt.loss_weights_fn = derive;
      TrainerSequence<float> ts{seq, tr.prompt.size(), {}, cfg.correction.routing_replay ? &tr.routing : nullptr};
      auto ev = evaluate_sequence(eff, ts, cfg.trainer_scope, opt, a != 0.0f ? &grads[c] : nullptr);
      if (a == 0.0f) {
        std::vector<float> unused;
        derive(ev.logp, unused);
      }
      rep.trainer_logp = ev.logp;
      rep.trainer_routing = std::move(ev.routing);
      if (cfg.compute_kl) {
        Matrix<float> rollout_dist;
        if (separate_rollout_forward) {
          EvalOptions<float> ro;
          ro.full_distribution = true;
          ro.kv_scales = cfg.rollout_scope.kv_cache_fp8 ? &batch.kv_scales : nullptr;
          rollout_dist = evaluate_sequence(eff_rollout, TrainerSequence<float>{seq, tr.prompt.size(), {}, nullptr},
                                           cfg.rollout_scope, ro, nullptr)
                             .full_logp;
        }
        const Matrix<float>& p = separate_rollout_forward ? rollout_dist : ev.full_logp;
        for (std::size_t t = 0; t < tr.response.size(); ++t) rep.kl_sum += kl_from_logp(p.row(t), ev.full_logp.row(t));
      }
    }
  });

  for (std::size_t c = 1; c < chunks; ++c) add_weights(grads[0], grads[c]);

  StepMetrics& m = report.metrics;
  double w_sum = 0, w_max = 0, kl = 0, loss = 0, rew = 0;
  std::size_t clipped = 0, masked = 0, route_total = 0;
  double route_differ = 0;
  const double C = cfg.correction.clip;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rep = report.samples[i];
    for (float w : rep.weights) {
      w_sum += w;
      w_max = std::max(w_max, static_cast<double>(w));
      clipped += w > C;
      masked += (w > C || w < 1.0 / C);
    }
    kl += rep.kl_sum;
    loss += rep.loss;
    rew += batch.samples[i].reward;
    if (mc.moe) {
      const auto& rr = batch.samples[i].routing;
      const std::size_t cnt = rr.positions() * rr.n_layers();
      route_differ += routing_disagreement(rep.trainer_routing, rr) * static_cast<double>(cnt);
      route_total += cnt;
    }
  }
  if (!std::isfinite(loss)) throw NumericError("policy_update: non-finite loss");
  const double nt = static_cast<double>(n_tok);
  m.step = batch.step + 1;
  m.mean_reward = rew / static_cast<double>(n);
  m.mean_response_len = nt / static_cast<double>(n);
  m.mismatch_kl = cfg.compute_kl ? kl / nt : 0.0;
  m.is_ratio_mean = w_sum / nt;
  m.is_ratio_max = w_max;
  m.frac_clipped = static_cast<double>(clipped) / nt;
  m.frac_masked = static_cast<double>(masked) / nt;
  m.loss = loss;
  if (mc.moe) m.routing_disagreement = route_total ? route_differ / static_cast<double>(route_total) : 0.0;
  m.kv_saturations = batch.stats.kv_saturations;
  m.tokens_generated = batch.stats.tokens_generated;
  m.rollout_s = batch.stats.rollout_s;
  m.tokens_per_s = batch.stats.rollout_s > 0 ? nt / batch.stats.rollout_s : 0.0;
  m.kv_bytes = batch.stats.kv_bytes;
  m.kv_bytes_16bit = batch.stats.kv_bytes_16bit;
  m.kv_calib_s = batch.stats.calib_s;

  if (!weights_finite(grads[0])) throw NumericError("policy_update: non-finite gradient");
  report.applied = state.optimizer.step(state.weights, grads[0]);
  state.weights.version = batch.step + 1;
  return report;
}

}  // namespace fp8rl
