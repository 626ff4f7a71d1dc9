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

// Experiment configuration: a flat key=value text format with dotted keys,
// named arm presets, validation, and a canonical text dump.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fp8rl/error.hpp"
#include "fp8rl/model.hpp"
#include "fp8rl/rl.hpp"
#include "fp8rl/tasks.hpp"

namespace fp8rl {

enum class KvCalibration { kInferenceSide, kTrainerSide };

struct ExperimentConfig {
  std::string arm = "custom";
  ModelConfig model;
  QuantizationScope rollout_scope;
  QuantizationScope trainer_scope;
  bool calculate_kv_scales = true;
  CorrectionConfig correction;
  KvCalibration kv_calibration = KvCalibration::kInferenceSide;
  std::size_t calib_size = 8;
  SamplerConfig sampler;
  std::size_t n_per_prompt = 8;
  std::size_t prompt_batch = 16;
  std::size_t steps = 300;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  TaskSpec task;
  std::size_t val_size = 64;
  std::size_t val_every = 10;
  double lr = 3e-3;
  double momentum = 0.9;
  std::size_t grad_chunks = 16;
  // Supervised warm start shared by every arm with the same seed.
  std::size_t sft_steps = 300;
  std::size_t sft_batch = 32;
  double sft_lr = 0.05;

  ExperimentConfig() {
    model.n_layers = 4;
    model.d_model = 128;
    model.n_heads = 4;
    model.d_ff = 256;
    model.vocab_size = vocab::kSize;
    model.max_seq = 80;
    sampler.max_new_tokens = 64;
    task.digits = 2;
  }

  void validate() const {
    model.validate();
    if (model.vocab_size != vocab::kSize) throw ConfigError("model.vocab_size must be " + std::to_string(vocab::kSize));
    rollout_scope.validate();
    trainer_scope.validate();
    if (trainer_scope.kv_cache_fp8 || trainer_scope.attention_fp8)
      throw ConfigError("trainer scope quantizes linear layers only");
    correction.validate();
    if (correction.routing_replay && !model.moe) throw ConfigError("correction.routing_replay requires model.n_experts > 0");
    task.validate();
    if (task.max_prompt_len() + 1 > model.max_seq) throw ConfigError("model.max_seq too small for the task prompts");
    if (sampler.max_new_tokens == 0) throw ConfigError("rollout.max_new_tokens must be >= 1");
    if (!(sampler.top_p > 0.0 && sampler.top_p <= 1.0)) throw ConfigError("rollout.top_p must be in (0, 1]");
    if (n_per_prompt < 2) throw ConfigError("rollout.n must be >= 2 for group-relative advantages");
    if (prompt_batch == 0) throw ConfigError("data.prompt_batch_size must be >= 1");
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (calib_size == 0) throw ConfigError("kv.calib_size must be >= 1");
    if (val_every == 0) throw ConfigError("data.val_every must be >= 1");
    if (!(lr > 0) || !(momentum >= 0 && momentum < 1)) throw ConfigError("train.lr must be > 0, train.momentum in [0, 1)");
    if (sft_steps > 0 && (sft_batch == 0 || !(sft_lr > 0))) throw ConfigError("sft.batch and sft.lr must be positive");
  }
};

inline const std::vector<std::string>& arm_names() {
  static const std::vector<std::string> names{"baseline",    "linear-fp8+tis", "linear-fp8-no-tis",
                                              "kv-fp8+tis",  "full-fp8+tis",   "e2e-fp8+tis"};
  return names;
}

// Resets the quantization and correction fields an arm defines; everything
// else in cfg is kept.
inline void apply_arm(ExperimentConfig& cfg, const std::string& arm) {
  if (arm == "custom") {
    cfg.arm = arm;
    return;
  }
  QuantizationScope off;
  off.weight_block = cfg.rollout_scope.weight_block;
  off.quantize_router = cfg.rollout_scope.quantize_router;
  cfg.rollout_scope = off;
  cfg.trainer_scope = off;
  cfg.correction.mode = CorrectionMode::kTis;
  if (arm == "baseline") {
  } else if (arm == "linear-fp8+tis") {
    cfg.rollout_scope.linear_fp8 = true;
  } else if (arm == "linear-fp8-no-tis") {
    cfg.rollout_scope.linear_fp8 = true;
    cfg.correction.mode = CorrectionMode::kNone;
  } else if (arm == "kv-fp8+tis") {
    cfg.rollout_scope.kv_cache_fp8 = true;
  } else if (arm == "full-fp8+tis") {
    cfg.rollout_scope.linear_fp8 = cfg.rollout_scope.kv_cache_fp8 = cfg.rollout_scope.attention_fp8 = true;
  } else if (arm == "e2e-fp8+tis") {
    // The trainer runs its own fp8 recipe: same weight blocks, finer
    // activation tiles than the rollout engine's per-token scaling.
    cfg.rollout_scope.linear_fp8 = true;
    cfg.trainer_scope.linear_fp8 = true;
    cfg.trainer_scope.act_tile = 16;
  } else {
    throw ConfigError("unknown arm '" + arm + "'");
  }
  cfg.arm = arm;
}

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  return parse_number<std::size_t>(key, v);
}

inline double parse_double(const std::string& key, const std::string& v) {
  const double d = parse_number<double>(key, v);
  if (!std::isfinite(d)) throw ConfigError(key + ": must be finite");
  return d;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const auto l = lower(v);
  if (l == "true" || l == "1" || l == "yes") return true;
  if (l == "false" || l == "0" || l == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline BlockShape parse_block(const std::string& key, const std::string& v) {
  const auto x = v.find('x');
  if (x == std::string::npos) throw ConfigError(key + ": expected RxC, got '" + v + "'");
  return {parse_size(key, v.substr(0, x)), parse_size(key, v.substr(x + 1))};
}

inline std::string canonical_key(std::string key) {
  static const std::string prefix = "actor_rollout_ref.";
  if (key.starts_with(prefix)) key = key.substr(prefix.size());
  if (key == "rollout.quantization.kv_cache_dtype") return "rollout.kv_cache_dtype";
  if (key == "rollout.quantization.calculate_kv_scales") return "rollout.calculate_kv_scales";
  return key;
}

inline void set_key(ExperimentConfig& c, const std::string& key, const std::string& v) {
  auto scope_fp8 = [&](const std::string& val) {
    const auto l = lower(val);
    if (l == "fp8") return true;
    if (l == "none" || l == "bf16" || l == "fp32") return false;
    throw ConfigError(key + ": expected fp8 or none, got '" + val + "'");
  };
  if (key == "model.n_layers") c.model.n_layers = parse_size(key, v);
  else if (key == "model.d_model") c.model.d_model = parse_size(key, v);
  else if (key == "model.n_heads") c.model.n_heads = parse_size(key, v);
  else if (key == "model.d_ff") c.model.d_ff = parse_size(key, v);
  else if (key == "model.max_seq") c.model.max_seq = parse_size(key, v);
  else if (key == "model.vocab_size") c.model.vocab_size = parse_size(key, v);
  else if (key == "model.n_experts") {
    const auto n = parse_size(key, v);
    if (n == 0) c.model.moe.reset();
    else c.model.moe = MoeConfig{n, c.model.moe ? c.model.moe->top_k : 1};
  } else if (key == "model.top_k") {
    if (!c.model.moe) throw ConfigError("model.top_k set before model.n_experts");
    c.model.moe->top_k = parse_size(key, v);
  } else if (key == "rollout.quantization") c.rollout_scope.linear_fp8 = scope_fp8(v);
  else if (key == "rollout.kv_cache_dtype") {
    const auto l = lower(v);
    if (l == "fp8_e4m3" || l == "fp8") c.rollout_scope.kv_cache_fp8 = true;
    else if (l == "auto") c.rollout_scope.kv_cache_fp8 = false;
    else throw ConfigError(key + ": expected auto or fp8_e4m3, got '" + v + "'");
  } else if (key == "rollout.calculate_kv_scales") c.calculate_kv_scales = parse_bool(key, v);
  else if (key == "rollout.attention_fp8") c.rollout_scope.attention_fp8 = parse_bool(key, v);
  else if (key == "rollout.quantize_router") c.rollout_scope.quantize_router = parse_bool(key, v);
  else if (key == "rollout.weight_block") c.rollout_scope.weight_block = parse_block(key, v);
  else if (key == "rollout.act_tile") c.rollout_scope.act_tile = parse_size(key, v);
  else if (key == "rollout.temperature") c.sampler.temperature = parse_double(key, v);
  else if (key == "rollout.top_p") c.sampler.top_p = parse_double(key, v);
  else if (key == "rollout.top_k") {
    const auto l = lower(v);
    c.sampler.top_k = (l == "-1" || l == "off") ? 0 : parse_size(key, v);
  } else if (key == "rollout.n") c.n_per_prompt = parse_size(key, v);
  else if (key == "rollout.max_new_tokens") c.sampler.max_new_tokens = parse_size(key, v);
  else if (key == "trainer.quantization") c.trainer_scope.linear_fp8 = scope_fp8(v);
  else if (key == "trainer.quantize_router") c.trainer_scope.quantize_router = parse_bool(key, v);
  else if (key == "trainer.weight_block") c.trainer_scope.weight_block = parse_block(key, v);
  else if (key == "trainer.act_tile") c.trainer_scope.act_tile = parse_size(key, v);
  else if (key == "correction.mode") {
    const auto l = lower(v);
    if (l == "none") c.correction.mode = CorrectionMode::kNone;
    else if (l == "tis") c.correction.mode = CorrectionMode::kTis;
    else if (l == "mis") c.correction.mode = CorrectionMode::kMis;
    else throw ConfigError(key + ": expected none, tis or mis, got '" + v + "'");
  } else if (key == "correction.clip") c.correction.clip = parse_double(key, v);
  else if (key == "correction.routing_replay") c.correction.routing_replay = parse_bool(key, v);
  else if (key == "correction.two_sided") c.correction.two_sided = parse_bool(key, v);
  else if (key == "kv.calibration") {
    const auto l = lower(v);
    if (l == "inference_side") c.kv_calibration = KvCalibration::kInferenceSide;
    else if (l == "trainer_side") c.kv_calibration = KvCalibration::kTrainerSide;
    else throw ConfigError(key + ": expected inference_side or trainer_side, got '" + v + "'");
  } else if (key == "kv.calib_size") c.calib_size = parse_size(key, v);
  else if (key == "data.prompt_batch_size") c.prompt_batch = parse_size(key, v);
  else if (key == "data.val_size") c.val_size = parse_size(key, v);
  else if (key == "data.val_every") c.val_every = parse_size(key, v);
  else if (key == "task.name") {
    const auto l = lower(v);
    if (l == "addition") c.task.kind = TaskKind::kAddition;
    else if (l == "reversal") c.task.kind = TaskKind::kReversal;
    else throw ConfigError(key + ": expected addition or reversal, got '" + v + "'");
  } else if (key == "task.digits") c.task.digits = parse_size(key, v);
  else if (key == "task.min_digits") c.task.min_digits = parse_size(key, v);
  else if (key == "train.steps") c.steps = parse_size(key, v);
  else if (key == "train.lr") c.lr = parse_double(key, v);
  else if (key == "train.momentum") c.momentum = parse_double(key, v);
  else if (key == "train.grad_chunks") c.grad_chunks = parse_size(key, v);
  else if (key == "sft.steps") c.sft_steps = parse_size(key, v);
  else if (key == "sft.batch") c.sft_batch = parse_size(key, v);
  else if (key == "sft.lr") c.sft_lr = parse_double(key, v);
  else if (key == "seeds") {
    c.seeds.clear();
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');) {
      item = trim(item);
      if (!item.empty()) c.seeds.push_back(parse_number<std::uint64_t>(key, item));
    }
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

}  // namespace detail

// Parses config text. An `arm` line is applied first wherever it appears;
// the remaining keys then override it in file order.
inline ExperimentConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.starts_with('+')) key.erase(0, 1);
    entries.emplace_back(detail::canonical_key(key), value);
  }
  ExperimentConfig cfg;
  std::size_t arms = 0;
  for (const auto& [k, v] : entries)
    if (k == "arm") {
      apply_arm(cfg, v);
      ++arms;
    }
  if (arms > 1) throw ConfigError("arm given more than once");
  for (const auto& [k, v] : entries)
    if (k != "arm") detail::set_key(cfg, k, v);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

// Canonical text form; parse_config(to_config_text(c)) reproduces c.
inline std::string to_config_text(const ExperimentConfig& c) {
  std::ostringstream o;
  o.precision(17);
  auto b = [](bool x) { return x ? "true" : "false"; };
  auto blk = [](BlockShape s) { return std::to_string(s.rows) + "x" + std::to_string(s.cols); };
  o << "arm = " << c.arm << "\n";
  o << "model.n_layers = " << c.model.n_layers << "\nmodel.d_model = " << c.model.d_model
    << "\nmodel.n_heads = " << c.model.n_heads << "\nmodel.d_ff = " << c.model.d_ff
    << "\nmodel.max_seq = " << c.model.max_seq << "\nmodel.vocab_size = " << c.model.vocab_size
    << "\nmodel.n_experts = " << (c.model.moe ? c.model.moe->n_experts : 0) << "\n";
  if (c.model.moe) o << "model.top_k = " << c.model.moe->top_k << "\n";
  o << "rollout.quantization = " << (c.rollout_scope.linear_fp8 ? "fp8" : "none") << "\n"
    << "rollout.kv_cache_dtype = " << (c.rollout_scope.kv_cache_fp8 ? "fp8_e4m3" : "auto") << "\n"
    << "rollout.calculate_kv_scales = " << b(c.calculate_kv_scales) << "\n"
    << "rollout.attention_fp8 = " << b(c.rollout_scope.attention_fp8) << "\n"
    << "rollout.quantize_router = " << b(c.rollout_scope.quantize_router) << "\n"
    << "rollout.weight_block = " << blk(c.rollout_scope.weight_block) << "\n"
    << "rollout.act_tile = " << c.rollout_scope.act_tile << "\n"
    << "rollout.temperature = " << c.sampler.temperature << "\n"
    << "rollout.top_p = " << c.sampler.top_p << "\n"
    << "rollout.top_k = " << c.sampler.top_k << "\n"
    << "rollout.n = " << c.n_per_prompt << "\n"
    << "rollout.max_new_tokens = " << c.sampler.max_new_tokens << "\n"
    << "trainer.quantization = " << (c.trainer_scope.linear_fp8 ? "fp8" : "none") << "\n"
    << "trainer.quantize_router = " << b(c.trainer_scope.quantize_router) << "\n"
    << "trainer.weight_block = " << blk(c.trainer_scope.weight_block) << "\n"
    << "trainer.act_tile = " << c.trainer_scope.act_tile << "\n"
    << "correction.mode = "
    << (c.correction.mode == CorrectionMode::kNone ? "none" : c.correction.mode == CorrectionMode::kTis ? "tis" : "mis")
    << "\ncorrection.clip = " << c.correction.clip << "\n"
    << "correction.routing_replay = " << b(c.correction.routing_replay) << "\n"
    << "correction.two_sided = " << b(c.correction.two_sided) << "\n"
    << "kv.calibration = " << (c.kv_calibration == KvCalibration::kInferenceSide ? "inference_side" : "trainer_side")
    << "\nkv.calib_size = " << c.calib_size << "\n"
    << "data.prompt_batch_size = " << c.prompt_batch << "\ndata.val_size = " << c.val_size
    << "\ndata.val_every = " << c.val_every << "\n"
    << "task.name = " << (c.task.kind == TaskKind::kAddition ? "addition" : "reversal") << "\n"
    << "task.digits = " << c.task.digits << "\ntask.min_digits = " << c.task.min_digits << "\n"
    << "train.steps = " << c.steps << "\ntrain.lr = " << c.lr << "\ntrain.momentum = " << c.momentum
    << "\ntrain.grad_chunks = " << c.grad_chunks << "\n"
    << "sft.steps = " << c.sft_steps << "\nsft.batch = " << c.sft_batch << "\nsft.lr = " << c.sft_lr << "\n"
    << "seeds = ";
  for (std::size_t i = 0; i < c.seeds.size(); ++i) o << (i ? "," : "") << c.seeds[i];
  o << "\n";
  return o.str();
}

}  // namespace fp8rl
