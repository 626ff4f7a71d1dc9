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

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "fp8rl/config.hpp"
#include "fp8rl/harness.hpp"

namespace fp8rl {
namespace {

namespace fs = std::filesystem;

const char* kTiny = R"(
model.n_layers = 1
model.d_model = 16
model.n_heads = 2
model.d_ff = 32
model.max_seq = 24
task.digits = 1
data.prompt_batch_size = 2
rollout.n = 2
rollout.max_new_tokens = 4
data.val_size = 4
data.val_every = 2
sft.steps = 2
sft.batch = 4
seeds = 1
)";

ExperimentConfig tiny(const std::string& extra) { return parse_config(std::string(kTiny) + extra); }

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("fp8rl_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TEST(Config, DefaultsMatchDeskRecipe) {
  const ExperimentConfig c;
  EXPECT_EQ(c.model.n_layers, 4u);
  EXPECT_EQ(c.model.d_model, 128u);
  EXPECT_EQ(c.model.n_heads, 4u);
  EXPECT_EQ(c.model.d_ff, 256u);
  EXPECT_EQ(c.prompt_batch, 16u);
  EXPECT_EQ(c.n_per_prompt, 8u);
  EXPECT_EQ(c.sampler.max_new_tokens, 64u);
  EXPECT_EQ(c.steps, 300u);
  EXPECT_EQ(c.seeds.size(), 5u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, TextRoundTrip) {
  const auto c = tiny("arm = full-fp8+tis\nkv.calibration = trainer_side\ncorrection.clip = 3.5\nseeds = 4,9\n");
  const auto text = to_config_text(c);
  const auto d = parse_config(text);
  EXPECT_EQ(to_config_text(d), text);
  EXPECT_EQ(d.arm, "full-fp8+tis");
  EXPECT_EQ(d.rollout_scope, c.rollout_scope);
  EXPECT_EQ(d.kv_calibration, KvCalibration::kTrainerSide);
  EXPECT_EQ(d.correction.clip, 3.5);
  EXPECT_EQ(d.seeds, (std::vector<std::uint64_t>{4, 9}));
}

TEST(Config, NamedArmsAreDistinctAndValid) {
  const std::vector<std::string> arms{"baseline",   "linear-fp8+tis", "linear-fp8-no-tis",
                                      "kv-fp8+tis", "full-fp8+tis",   "e2e-fp8+tis"};
  std::set<std::string> texts;
  for (const auto& a : arms) {
    const auto c = parse_config("arm = " + a + "\n");
    EXPECT_EQ(c.arm, a);
    EXPECT_NO_THROW(c.validate());
    texts.insert(to_config_text(c));
  }
  EXPECT_EQ(texts.size(), arms.size());

  const auto base = parse_config("arm = baseline\n");
  EXPECT_FALSE(base.rollout_scope.any());
  EXPECT_FALSE(base.trainer_scope.any());
  const auto lin = parse_config("arm = linear-fp8+tis\n");
  EXPECT_TRUE(lin.rollout_scope.linear_fp8);
  EXPECT_FALSE(lin.rollout_scope.kv_cache_fp8);
  EXPECT_EQ(lin.correction.mode, CorrectionMode::kTis);
  EXPECT_EQ(parse_config("arm = linear-fp8-no-tis\n").correction.mode, CorrectionMode::kNone);
  const auto kv = parse_config("arm = kv-fp8+tis\n");
  EXPECT_TRUE(kv.rollout_scope.kv_cache_fp8);
  EXPECT_FALSE(kv.rollout_scope.linear_fp8);
  const auto full = parse_config("arm = full-fp8+tis\n");
  EXPECT_TRUE(full.rollout_scope.linear_fp8 && full.rollout_scope.kv_cache_fp8 && full.rollout_scope.attention_fp8);
  const auto e2e = parse_config("arm = e2e-fp8+tis\n");
  EXPECT_TRUE(e2e.trainer_scope.linear_fp8);
  EXPECT_FALSE(e2e.trainer_scope.kv_cache_fp8);
}

TEST(Config, ArmIsAppliedBeforeOtherKeys) {
  const auto c = parse_config("correction.mode = mis\narm = linear-fp8+tis\n");
  EXPECT_EQ(c.correction.mode, CorrectionMode::kMis);
}

TEST(Config, LongKeyNamesAndAliases) {
  const auto c = parse_config(
      "actor_rollout_ref.rollout.quantization = fp8\n"
      "+actor_rollout_ref.rollout.quantization.kv_cache_dtype = fp8_e4m3\n"
      "actor_rollout_ref.rollout.quantization.calculate_kv_scales = false\n");
  EXPECT_TRUE(c.rollout_scope.linear_fp8);
  EXPECT_TRUE(c.rollout_scope.kv_cache_fp8);
  EXPECT_FALSE(c.calculate_kv_scales);
  const auto d = parse_config("rollout.kv_cache_dtype = auto  # comment\n");
  EXPECT_FALSE(d.rollout_scope.kv_cache_fp8);
}

TEST(Config, Rejections) {
  EXPECT_THROW(parse_config("arm = fp4-everything\n"), ConfigError);
  EXPECT_THROW(parse_config("rollout.quantisation = fp8\n"), ConfigError);
  EXPECT_THROW(parse_config("model.d_model = twelve\n"), ConfigError);
  EXPECT_THROW(parse_config("model.d_model\n"), ConfigError);
  EXPECT_THROW(parse_config("rollout.kv_cache_dtype = int8\n"), ConfigError);
  EXPECT_THROW(parse_config("correction.clip = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("correction.routing_replay = true\n"), ConfigError);
  EXPECT_THROW(parse_config("seeds = \n"), ConfigError);
  EXPECT_THROW(parse_config("rollout.n = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("arm = baseline\narm = kv-fp8+tis\n"), ConfigError);
  EXPECT_THROW(parse_config("model.d_model = 10\nmodel.n_heads = 4\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/fp8rl.cfg"), ConfigError);
}

TEST(Harness, ZeroStepsWritesOnlyInitRecord) {
  const auto dir = scratch("zero");
  const auto c = tiny("train.steps = 0\n");
  run_experiment(c, dir, RunOptions{});
  const auto recs = read_metrics(dir / "metrics_seed1.jsonl");
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0]["step"], 0);
  EXPECT_TRUE(recs[0]["val_accuracy"].is_number());
  EXPECT_TRUE(fs::exists(dir / "summary.csv"));
  EXPECT_EQ(to_config_text(load_config((dir / "config.resolved").string())), to_config_text(c));
}

TEST(Harness, InvalidConfigFailsBeforeWritingAnything) {
  auto c = tiny("train.steps = 1\n");
  c.n_per_prompt = 1;
  const auto dir = scratch("invalid");
  EXPECT_THROW(run_experiment(c, dir, RunOptions{}), ConfigError);
  EXPECT_FALSE(fs::exists(dir));
}

TEST(Harness, RecordsHaveAllFieldsAndValidationCadence) {
  const auto dir = scratch("fields");
  run_experiment(tiny("arm = linear-fp8+tis\ntrain.steps = 3\n"), dir, RunOptions{});
  const auto recs = read_metrics(dir / "metrics_seed1.jsonl");
  ASSERT_EQ(recs.size(), 4u);
  const std::vector<std::string> keys{"step",         "mean_reward",   "val_accuracy",   "mean_response_len",
                                      "mismatch_kl",  "is_ratio_mean", "is_ratio_max",   "frac_clipped",
                                      "frac_masked",  "kv_saturations", "tokens_generated", "rollout_s",
                                      "tokens_per_s", "kv_bytes",      "weight_bytes"};
  std::istringstream lines(slurp(dir / "metrics_seed1.jsonl"));
  int i = 0;
  for (std::string line; std::getline(lines, line); ++i) {
    const auto rec = nlohmann::ordered_json::parse(line);
    EXPECT_EQ(rec["step"], i);
    std::size_t k = 0;
    for (auto it = rec.begin(); k < keys.size(); ++it, ++k) EXPECT_EQ(it.key(), keys[k]);
  }
  EXPECT_EQ(i, 4);
  EXPECT_TRUE(recs[1]["val_accuracy"].is_null());
  EXPECT_TRUE(recs[2]["val_accuracy"].is_number());
  EXPECT_TRUE(recs[3]["val_accuracy"].is_number());
  EXPECT_GT(recs[1]["mismatch_kl"].get<double>(), 0.0);
  EXPECT_GT(recs[1]["tokens_generated"].get<double>(), 0.0);
}

TEST(Harness, DeterministicRunsAreBitwiseIdentical) {
  const auto c = tiny("arm = full-fp8+tis\ntrain.steps = 3\n");
  const auto a = scratch("det_a"), b = scratch("det_b");
  RunOptions opt;
  opt.deterministic = true;
  run_experiment(c, a, opt);
  WarmStartCache::instance().clear();
  run_experiment(c, b, opt);
  const auto ja = slurp(a / "metrics_seed1.jsonl");
  EXPECT_FALSE(ja.empty());
  EXPECT_EQ(ja, slurp(b / "metrics_seed1.jsonl"));
  EXPECT_EQ(slurp(a / "summary.csv"), slurp(b / "summary.csv"));
  for (const auto& r : read_metrics(a / "metrics_seed1.jsonl")) EXPECT_EQ(r["rollout_s"], 0);
}

TEST(Harness, WarmStartDiskCacheReloads) {
  const auto cache = scratch("warm");
  auto c = tiny("");
  const ProblemSource src(c.task, 5, c.val_size);
  RunOptions opt;
  opt.warm_start_dir = cache.string();
  WarmStartCache::instance().clear();
  const auto a = WarmStartCache::instance().get(c, 3, src, opt);
  WarmStartCache::instance().clear();
  const auto b = WarmStartCache::instance().get(c, 3, src, opt);
  EXPECT_EQ(std::distance(fs::directory_iterator(cache), fs::directory_iterator{}), 1);
  const auto ta = tensor_list(a), tb = tensor_list(b);
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i].tensor, *tb[i].tensor) << ta[i].name;
}

TEST(Metrics, TruncatedFinalLineIsSkipped) {
  const auto dir = scratch("trunc");
  fs::create_directories(dir);
  {
    std::ofstream o(dir / "m.jsonl");
    o << R"({"step":0,"mean_reward":0.5})" << "\n" << R"({"step":1,"mean_reward":0.7})" << "\n" << R"({"step":2,"mean_re)";
  }
  const auto recs = read_metrics(dir / "m.jsonl");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[1]["mean_reward"], 0.7);
  {
    std::ofstream o(dir / "bad.jsonl");
    o << R"({"step":0,"mean_re)" << "\n" << R"({"step":1})" << "\n";
  }
  EXPECT_THROW(read_metrics(dir / "bad.jsonl"), IoError);
}

TEST(Metrics, MeanAndStderr) {
  const auto r = mean_stderr({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(r.mean, 2.5);
  EXPECT_NEAR(r.stderr_, std::sqrt((2.25 + 0.25 + 0.25 + 2.25) / 3.0 / 4.0), 1e-15);
  EXPECT_EQ(mean_stderr({7.0}).stderr_, 0.0);
}

TEST(Metrics, FinalWindowIsLastFifthOfSteps) {
  std::vector<std::vector<nlohmann::json>> seeds(1);
  for (int s = 0; s <= 10; ++s) seeds[0].push_back({{"step", s}, {"x", s}});
  const auto sum = summarize(tabulate(seeds));
  EXPECT_DOUBLE_EQ(sum.at("x").all_steps.mean, 5.5);
  EXPECT_DOUBLE_EQ(sum.at("x").final_window.mean, 9.5);
}

struct CompareRow {
  std::string section, step, metric, arm, mean, diff, ratio;
};

std::vector<CompareRow> parse_compare(const std::string& text) {
  std::vector<CompareRow> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  EXPECT_TRUE(line.starts_with("#"));
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    if (line.ends_with(',')) f.emplace_back();
    EXPECT_EQ(f.size(), 9u) << line;
    if (f.size() == 9) rows.push_back({f[0], f[1], f[2], f[3], f[5], f[7], f[8]});
  }
  return rows;
}

TEST(Compare, ArmWithItselfHasZeroDifferences) {
  const auto dir = scratch("cmp_self");
  RunOptions opt;
  opt.deterministic = true;
  run_experiment(tiny("arm = linear-fp8+tis\ntrain.steps = 2\n"), dir, opt);
  std::ostringstream out;
  compare_arms({dir, dir}, out);
  const auto rows = parse_compare(out.str());
  ASSERT_FALSE(rows.empty());
  for (const auto& r : rows) EXPECT_EQ(std::stod(r.diff), 0.0) << r.metric;
}

TEST(Compare, BaselineVersusLinearFp8) {
  const auto base = scratch("cmp_base"), lin = scratch("cmp_lin");
  RunOptions opt;
  opt.deterministic = true;
  run_experiment(tiny("arm = baseline\ntrain.steps = 2\n"), base, opt);
  run_experiment(tiny("arm = linear-fp8+tis\ntrain.steps = 2\n"), lin, opt);
  std::ostringstream out;
  compare_arms({base, lin}, out);
  const auto rows = parse_compare(out.str());
  int kl_rows = 0, wb_rows = 0;
  for (const auto& r : rows) {
    if (r.metric == "mismatch_kl" && r.section == "per_step") {
      ++kl_rows;
      if (r.arm == "baseline") EXPECT_LT(std::stod(r.mean), 1e-9);
      else EXPECT_GT(std::stod(r.mean), 0.0);
    }
    if (r.metric == "weight_bytes" && r.arm == "linear-fp8+tis") {
      ++wb_rows;
      EXPECT_EQ(std::stod(r.ratio), 0.5);
    }
  }
  EXPECT_EQ(kl_rows, 4);
  EXPECT_EQ(wb_rows, 3);
}

TEST(Compare, MismatchedStepGridsAreRejected) {
  const auto a = scratch("grid_a"), b = scratch("grid_b");
  run_experiment(tiny("train.steps = 1\n"), a, RunOptions{});
  run_experiment(tiny("train.steps = 2\n"), b, RunOptions{});
  std::ostringstream out;
  EXPECT_THROW(compare_arms({a, b}, out), Error);
  EXPECT_THROW(compare_arms({a}, out), ConfigError);
  EXPECT_THROW(compare_arms({a, scratch("missing")}, out), IoError);
}

}  // namespace
}  // namespace fp8rl
