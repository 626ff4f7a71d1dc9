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

// Experiment runner: supervised warm start, the per-step RL loop
// (sync -> KV calibration -> rollout -> update), JSONL metric streams,
// cross-seed summaries, and cross-arm comparison.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fp8rl/config.hpp"
#include "fp8rl/error.hpp"
#include "fp8rl/parallel.hpp"
#include "fp8rl/rl.hpp"
#include "fp8rl/sync.hpp"
#include "fp8rl/tasks.hpp"
#include "fp8rl/weights.hpp"

namespace fp8rl {

inline constexpr const char* kTimingNote =
    "# rollout_s and tokens_per_s are emulation wall time - not comparable to hardware FP8 speedups";

struct RunOptions {
  bool deterministic = false;  // single worker, timing fields written as 0
  std::size_t threads = 1;
  std::ostream* log = nullptr;
  std::string warm_start_dir;  // optional on-disk cache of warm-start checkpoints
};

// Sum of per-sequence gradients of sum_t c_t * logp_t, reduced over a fixed
// number of contiguous chunks in order.
inline PolicyWeights<float> accumulate_gradient(const PolicyWeights<float>& eff, std::span<const std::vector<Token>> seqs,
                                                std::span<const std::size_t> first_target,
                                                std::span<const std::vector<float>> coeffs,
                                                const QuantizationScope& scope, std::size_t chunks,
                                                std::size_t threads) {
  const std::size_t n = seqs.size();
  chunks = std::max<std::size_t>(1, std::min(chunks, n));
  std::vector<PolicyWeights<float>> grads(chunks);
  parallel_for(chunks, threads, [&](std::size_t c) {
    grads[c] = zeros_like(eff);
    for (std::size_t i = c * n / chunks; i < (c + 1) * n / chunks; ++i)
      evaluate_sequence(eff, TrainerSequence<float>{seqs[i], first_target[i], coeffs[i], nullptr}, scope, {}, &grads[c]);
  });
  for (std::size_t c = 1; c < chunks; ++c) add_weights(grads[0], grads[c]);
  return std::move(grads[0]);
}

// Supervised warm start on task answers: minimizes mean answer-token NLL
// from a seeded initialization. Returns weights at version 0.
inline PolicyWeights<float> supervised_warm_start(const ExperimentConfig& c, std::uint64_t seed,
                                                  const ProblemSource& src, std::size_t threads) {
  auto w = init_weights<float>(c.model, derive_seed({seed, 0x1417}));
  SgdMomentum opt;
  opt.lr = c.sft_lr;
  opt.momentum = 0.9;
  for (std::size_t step = 0; step < c.sft_steps; ++step) {
    std::mt19937_64 rng(derive_seed({seed, 0x5f7, step}));
    const auto probs = src.draw(c.sft_batch, rng);
    std::vector<std::vector<Token>> seqs;
    std::vector<std::size_t> first;
    std::vector<std::vector<float>> coeffs;
    std::size_t n_tok = 0;
    for (const auto& p : probs) n_tok += p.answer.size();
    for (const auto& p : probs) {
      auto s = p.prompt;
      s.insert(s.end(), p.answer.begin(), p.answer.end());
      seqs.push_back(std::move(s));
      first.push_back(p.prompt.size());
      coeffs.emplace_back(p.answer.size(), -1.0f / static_cast<float>(n_tok));
    }
    const auto g = accumulate_gradient(w, seqs, first, coeffs, QuantizationScope{}, 16, threads);
    opt.step(w, g);
  }
  w.version = 0;
  return w;
}

// Warm starts are shared by every arm of a seed: cached in memory and,
// when a directory is given, on disk.
class WarmStartCache {
 public:
  static WarmStartCache& instance() {
    static WarmStartCache cache;
    return cache;
  }

  PolicyWeights<float> get(const ExperimentConfig& c, std::uint64_t seed, const ProblemSource& src,
                           const RunOptions& opt) {
    std::ostringstream key;
    key << to_config_text_model_task(c) << "seed=" << seed;
    const std::string k = key.str();
    {
      std::lock_guard lock(mu_);
      if (auto it = memo_.find(k); it != memo_.end()) return it->second;
    }
    std::filesystem::path file;
    if (!opt.warm_start_dir.empty()) {
      std::filesystem::create_directories(opt.warm_start_dir);
      file = std::filesystem::path(opt.warm_start_dir) /
             ("warm_" + std::to_string(std::hash<std::string>{}(k)) + ".ckpt");
    }
    PolicyWeights<float> w;
    if (!file.empty() && std::filesystem::exists(file)) {
      w = load_checkpoint(file.string());
      if (!(w.config == c.model)) throw IoError("warm start cache: config mismatch in " + file.string());
    } else {
      w = c.sft_steps ? supervised_warm_start(c, seed, src, opt.threads)
                      : init_weights<float>(c.model, derive_seed({seed, 0x1417}));
      w.version = 0;
      if (!file.empty()) save_checkpoint(file.string(), w);
    }
    std::lock_guard lock(mu_);
    memo_.emplace(k, w);
    return w;
  }

  void clear() {
    std::lock_guard lock(mu_);
    memo_.clear();
  }

 private:
  static std::string to_config_text_model_task(const ExperimentConfig& c) {
    ExperimentConfig k;
    k.model = c.model;
    k.task = c.task;
    k.val_size = c.val_size;
    k.sft_steps = c.sft_steps;
    k.sft_batch = c.sft_batch;
    k.sft_lr = c.sft_lr;
    k.seeds = {0};
    return to_config_text(k);
  }

  std::mutex mu_;
  std::map<std::string, PolicyWeights<float>> memo_;
};

// Greedy accuracy of weights `w` (at `version`) on the held-out prompts,
// generated through an engine with the arm's rollout scope.
inline double validation_accuracy(const ExperimentConfig& c, const PolicyWeights<float>& w, std::int64_t version,
                                  const ProblemSource& src, std::size_t threads) {
  if (src.validation().empty()) return 0.0;
  EngineConfig ec{c.model, c.rollout_scope, true, threads};
  auto engine = init_engine(ec);
  sync_weights(engine, PolicySnapshot{w, version});
  std::vector<std::vector<Token>> prompts;
  for (const auto& p : src.validation()) prompts.push_back(p.prompt);
  SamplerConfig greedy = c.sampler;
  greedy.temperature = 0.0;
  const auto batch = run_rollout(engine, prompts, greedy, 1, 0);
  double correct = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) correct += reward(src.validation()[i], batch.samples[i].response);
  return correct / static_cast<double>(prompts.size());
}

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<StepMetrics> records;  // init record first, then one per step
  std::size_t freshness_checks = 0;
};

// One seed of an experiment. Records are appended to `jsonl` as they are
// produced, one flushed line each.
inline SeedRun run_seed(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& jsonl,
                        const RunOptions& opt) {
  c.validate();
  const std::size_t threads = opt.deterministic ? 1 : std::max<std::size_t>(1, opt.threads);
  std::ofstream out(jsonl, std::ios::trunc);
  if (!out) throw IoError("cannot write " + jsonl.string());
  auto emit = [&](const StepMetrics& m) {
    out << m.to_json().dump() << '\n';
    out.flush();
  };

  const ProblemSource src(c.task, derive_seed({seed, 0x7a5c}), c.val_size);
  RunOptions wopt = opt;
  wopt.threads = threads;
  TrainerState state;
  state.weights = WarmStartCache::instance().get(c, seed, src, wopt);
  state.optimizer.lr = c.lr;
  state.optimizer.momentum = c.momentum;

  auto engine = init_engine(EngineConfig{c.model, c.rollout_scope, c.calculate_kv_scales, threads});
  UpdateConfig uc;
  uc.correction = c.correction;
  uc.trainer_scope = c.trainer_scope;
  uc.rollout_scope = c.rollout_scope;
  uc.threads = threads;
  uc.grad_chunks = c.grad_chunks;

  SeedRun run;
  run.seed = seed;
  StepMetrics init;
  init.step = 0;
  init.val_accuracy = validation_accuracy(c, state.weights, 0, src, threads);
  {
    EngineConfig ec{c.model, c.rollout_scope, true, 1};
    auto probe = init_engine(ec);
    sync_weights(probe, PolicySnapshot{state.weights, 0});
    init.weight_bytes = probe.weight_bytes();
    init.weight_scale_bytes = probe.weight_scale_bytes();
  }
  emit(init);
  run.records.push_back(init);

  std::vector<std::vector<Token>> last_sequences;
  const bool trainer_side = c.kv_calibration == KvCalibration::kTrainerSide && c.rollout_scope.kv_cache_fp8;
  for (std::size_t s = 0; s < c.steps; ++s) {
    const auto step = static_cast<std::int64_t>(s);
    std::mt19937_64 rng(derive_seed({seed, 0xda7a, s}));
    const auto problems = src.draw(c.prompt_batch, rng);
    std::vector<std::vector<Token>> prompts;
    for (const auto& p : problems) prompts.push_back(p.prompt);

    PolicySnapshot snap{state.weights, step};
    double trainer_calib_s = 0;
    if (trainer_side && (c.calculate_kv_scales || s == 0)) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto& pool = last_sequences.empty() ? prompts : last_sequences;
      const std::size_t n = std::min(c.calib_size, pool.size());
      const auto scales = recalibrate_trainer_side(state.weights, std::span(pool).first(n), c.rollout_scope, step);
      trainer_calib_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      sync_weights(engine, snap, &scales);
    } else {
      sync_weights(engine, snap);
    }

    auto batch = run_rollout(engine, prompts, c.sampler, c.n_per_prompt, derive_seed({seed, 0x5a3e}));
    for (auto& t : batch.samples) t.reward = reward(problems[t.prompt_index], t.response);
    run.freshness_checks += batch.stats.freshness_checks;
    if (trainer_side) {
      last_sequences.clear();
      for (const auto& t : batch.samples) last_sequences.push_back(t.full_sequence());
    }

    auto report = policy_update(state, batch, uc);
    StepMetrics& m = report.metrics;
    m.weight_bytes = engine.weight_bytes();
    m.weight_scale_bytes = engine.weight_scale_bytes();
    m.kv_calib_s += trainer_calib_s;
    if ((s + 1) % c.val_every == 0 || s + 1 == c.steps)
      m.val_accuracy = validation_accuracy(c, state.weights, state.weights.version, src, threads);
    if (opt.deterministic) m.rollout_s = m.tokens_per_s = m.kv_calib_s = 0;
    emit(m);
    run.records.push_back(m);
    if (opt.log)
      *opt.log << c.arm << " seed " << seed << " step " << m.step << " reward " << std::fixed << std::setprecision(3)
               << m.mean_reward << " kl " << std::scientific << std::setprecision(2) << m.mismatch_kl
               << std::defaultfloat << (m.val_accuracy ? " val " + std::to_string(*m.val_accuracy) : "") << "\n";
  }
  return run;
}

// ---------------------------------------------------------------------------
// Metric files and summaries

// Reads a JSONL metric stream. A final line without a newline that fails to
// parse is the tail of an interrupted write and is skipped.
inline std::vector<nlohmann::json> read_metrics(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::string all((std::istreambuf_iterator<char>(is)), {});
  std::vector<nlohmann::json> out;
  std::size_t pos = 0;
  while (pos < all.size()) {
    const auto nl = all.find('\n', pos);
    const bool complete = nl != std::string::npos;
    const std::string line = all.substr(pos, complete ? nl - pos : std::string::npos);
    pos = complete ? nl + 1 : all.size();
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error&) {
      if (complete) throw IoError("corrupt metrics line in " + path.string());
    }
  }
  return out;
}

struct MeanErr {
  double mean = 0;
  double stderr_ = 0;
  std::size_t n = 0;
};

inline MeanErr mean_stderr(const std::vector<double>& xs) {
  MeanErr r;
  r.n = xs.size();
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double v = 0;
    for (double x : xs) v += (x - r.mean) * (x - r.mean);
    r.stderr_ = std::sqrt(v / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
  }
  return r;
}

// Training records only (step >= 1), keyed by metric name: seed -> step -> value.
using MetricTable = std::map<std::string, std::vector<std::map<std::int64_t, double>>>;

inline MetricTable tabulate(const std::vector<std::vector<nlohmann::json>>& seeds) {
  MetricTable t;
  for (std::size_t si = 0; si < seeds.size(); ++si)
    for (const auto& rec : seeds[si]) {
      const auto step = rec.at("step").get<std::int64_t>();
      if (step < 1) continue;
      for (auto it = rec.begin(); it != rec.end(); ++it) {
        if (it.key() == "step" || !it.value().is_number()) continue;
        auto& per_seed = t[it.key()];
        per_seed.resize(seeds.size());
        per_seed[si][step] = it.value().get<double>();
      }
    }
  return t;
}

inline std::int64_t final_window_start(std::int64_t last_step) {
  return last_step - std::max<std::int64_t>(1, last_step / 5);
}

struct MetricSummary {
  MeanErr all_steps;
  MeanErr final_window;
};

// Per-seed means over all steps and over the final 20% of steps, then mean
// and standard error across seeds.
inline std::map<std::string, MetricSummary> summarize(const MetricTable& t) {
  std::map<std::string, MetricSummary> out;
  for (const auto& [name, per_seed] : t) {
    std::vector<double> all, fin;
    for (const auto& steps : per_seed) {
      if (steps.empty()) continue;
      const auto start = final_window_start(steps.rbegin()->first);
      double a = 0, f = 0;
      std::size_t nf = 0;
      for (const auto& [s, v] : steps) {
        a += v;
        if (s > start) f += v, ++nf;
      }
      all.push_back(a / static_cast<double>(steps.size()));
      if (nf) fin.push_back(f / static_cast<double>(nf));
    }
    out[name] = {mean_stderr(all), mean_stderr(fin)};
  }
  return out;
}

inline void write_summary_csv(const std::filesystem::path& path, const std::string& arm,
                              const std::map<std::string, MetricSummary>& s, std::size_t n_seeds) {
  std::ofstream o(path, std::ios::trunc);
  if (!o) throw IoError("cannot write " + path.string());
  o << kTimingNote << "\n";
  o << "arm,metric,n_seeds,mean,stderr,final_window_mean,final_window_stderr\n";
  o << std::setprecision(10);
  for (const auto& [name, v] : s)
    o << arm << "," << name << "," << n_seeds << "," << v.all_steps.mean << "," << v.all_steps.stderr_ << ","
      << v.final_window.mean << "," << v.final_window.stderr_ << "\n";
}

struct ExperimentResult {
  std::vector<SeedRun> seeds;
  std::map<std::string, MetricSummary> summary;
};

inline ExperimentResult run_experiment(const ExperimentConfig& c, const std::filesystem::path& outdir,
                                       const RunOptions& opt) {
  c.validate();
  std::filesystem::create_directories(outdir);
  {
    std::ofstream cfg(outdir / "config.resolved", std::ios::trunc);
    if (!cfg) throw IoError("cannot write to " + outdir.string());
    cfg << to_config_text(c);
  }
  ExperimentResult res;
  std::vector<std::vector<nlohmann::json>> streams;
  for (std::uint64_t seed : c.seeds) {
    const auto path = outdir / ("metrics_seed" + std::to_string(seed) + ".jsonl");
    res.seeds.push_back(run_seed(c, seed, path, opt));
    streams.push_back(read_metrics(path));
  }
  res.summary = summarize(tabulate(streams));
  write_summary_csv(outdir / "summary.csv", c.arm, res.summary, c.seeds.size());
  return res;
}

// ---------------------------------------------------------------------------
// Cross-arm comparison

struct ArmMetrics {
  std::string label;
  std::vector<std::vector<nlohmann::json>> seeds;
};

// A path is either a run directory (config.resolved + metrics_seed*.jsonl)
// or a single JSONL file treated as a one-seed arm.
inline ArmMetrics load_arm(const std::filesystem::path& p) {
  ArmMetrics a;
  if (std::filesystem::is_directory(p)) {
    a.label = p.filename().string();
    std::ifstream cfg(p / "config.resolved");
    for (std::string line; std::getline(cfg, line);)
      if (line.starts_with("arm = ")) a.label = line.substr(6);
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(p))
      if (e.path().extension() == ".jsonl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) a.seeds.push_back(read_metrics(f));
  } else if (std::filesystem::exists(p)) {
    a.label = p.stem().string();
    a.seeds.push_back(read_metrics(p));
  } else {
    throw IoError("no such metrics path: " + p.string());
  }
  if (a.seeds.empty()) throw IoError("no metric files under " + p.string());
  return a;
}

// Writes per-step and final-window tables (mean and stderr across seeds)
// for every metric, with differences and ratios against the first arm.
inline void compare_arms(const std::vector<std::filesystem::path>& paths, std::ostream& out) {
  if (paths.size() < 2) throw ConfigError("compare: need at least two arms");
  std::vector<ArmMetrics> arms;
  for (const auto& p : paths) arms.push_back(load_arm(p));
  std::map<std::string, int> seen;
  for (auto& a : arms) seen[a.label]++;
  for (std::size_t i = 0; i < arms.size(); ++i)
    if (seen[arms[i].label] > 1) arms[i].label += "@" + paths[i].string();

  std::vector<MetricTable> tables;
  std::vector<std::int64_t> grid;
  for (const auto& a : arms) {
    tables.push_back(tabulate(a.seeds));
    for (const auto& seed : a.seeds) {
      std::vector<std::int64_t> g;
      for (const auto& r : seed) g.push_back(r.at("step").get<std::int64_t>());
      if (grid.empty() && &a == &arms.front() && &seed == &a.seeds.front()) grid = g;
      else if (g != grid) throw Error("compare: mismatched step grids");
    }
  }
  out << kTimingNote << "\n";
  out << "section,step,metric,arm,n_seeds,mean,stderr,diff_vs_ref,ratio_vs_ref\n";
  out << std::setprecision(10);
  auto row = [&](const std::string& section, const std::string& step, const std::string& metric,
                 const std::string& label, const MeanErr& v, const MeanErr& ref) {
    out << section << "," << step << "," << metric << "," << label << "," << v.n << "," << v.mean << "," << v.stderr_
        << "," << v.mean - ref.mean << ",";
    if (ref.mean != 0) out << v.mean / ref.mean;
    out << "\n";
  };
  const auto& metrics = tables.front();
  for (const auto& [name, unused] : metrics) {
    for (std::int64_t step : grid) {
      if (step < 1) continue;
      std::vector<MeanErr> vals;
      for (const auto& t : tables) {
        std::vector<double> xs;
        if (auto it = t.find(name); it != t.end())
          for (const auto& seed : it->second)
            if (auto s = seed.find(step); s != seed.end()) xs.push_back(s->second);
        vals.push_back(mean_stderr(xs));
      }
      if (vals.front().n == 0) continue;
      for (std::size_t i = 0; i < arms.size(); ++i) row("per_step", std::to_string(step), name, arms[i].label, vals[i], vals[0]);
    }
  }
  std::vector<std::map<std::string, MetricSummary>> sums;
  for (const auto& t : tables) sums.push_back(summarize(t));
  for (const auto& [name, ref] : sums.front())
    for (std::size_t i = 0; i < arms.size(); ++i) {
      auto it = sums[i].find(name);
      if (it != sums[i].end()) row("final_window", "", name, arms[i].label, it->second.final_window, ref.final_window);
    }
}

}  // namespace fp8rl
