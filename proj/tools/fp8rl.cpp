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

// fp8rl command-line driver.
//
//   fp8rl run <config> <outdir> [--deterministic] [--warm-start-dir DIR] [--quiet]
//   fp8rl compare <path> <path>... [-o FILE]
//   fp8rl validate-config <config>
//
// Worker threads come from FP8RL_THREADS (default 1). Exit codes: 0 success,
// 1 configuration error, 2 any other failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fp8rl/config.hpp"
#include "fp8rl/harness.hpp"

namespace {

std::size_t env_threads() {
  const char* v = std::getenv("FP8RL_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw fp8rl::ConfigError(std::string("FP8RL_THREADS must be a positive integer, got '") + v + "'");
  return static_cast<std::size_t>(n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FP8 rollout / trainer mismatch experiments on a toy policy"};
  app.require_subcommand(1);

  std::string run_config, run_out, warm_dir;
  bool deterministic = false, quiet = false;
  auto* run = app.add_subcommand("run", "run every seed of one experiment config");
  run->add_option("config", run_config, "config file")->required();
  run->add_option("outdir", run_out, "output directory")->required();
  run->add_flag("--deterministic", deterministic, "single worker, zeroed timing fields");
  run->add_option("--warm-start-dir", warm_dir, "cache warm-start checkpoints here");
  run->add_flag("-q,--quiet", quiet, "no per-step progress on stderr");

  std::vector<std::string> cmp_paths;
  std::string cmp_out;
  auto* cmp = app.add_subcommand("compare", "cross-arm comparison table");
  cmp->add_option("paths", cmp_paths, "run directories or JSONL files; the first is the reference")->required();
  cmp->add_option("-o,--output", cmp_out, "write the table here instead of stdout");

  std::string val_config;
  auto* val = app.add_subcommand("validate-config", "parse and validate a config, print the resolved form");
  val->add_option("config", val_config, "config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*run) {
      const auto cfg = fp8rl::load_config(run_config);
      fp8rl::RunOptions opt;
      opt.deterministic = deterministic;
      opt.threads = deterministic ? 1 : env_threads();
      opt.warm_start_dir = warm_dir;
      opt.log = quiet ? nullptr : &std::cerr;
      const auto res = fp8rl::run_experiment(cfg, run_out, opt);
      std::cout << "wrote " << res.seeds.size() << " seed(s) to " << run_out << "\n";
    } else if (*cmp) {
      std::vector<std::filesystem::path> paths(cmp_paths.begin(), cmp_paths.end());
      if (cmp_out.empty()) {
        fp8rl::compare_arms(paths, std::cout);
      } else {
        std::ofstream o(cmp_out);
        if (!o) throw fp8rl::IoError("cannot write " + cmp_out);
        fp8rl::compare_arms(paths, o);
      }
    } else if (*val) {
      std::cout << fp8rl::to_config_text(fp8rl::load_config(val_config));
    }
  } catch (const fp8rl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
