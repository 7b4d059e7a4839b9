/*
 * Copyright 2026 The FedHelp Simulator Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Command-line front end:
//   fedhelp run <config.json> [--serial] [--out DIR]
//   fedhelp compare DIR...
//   fedhelp warmup <config.json>
//   fedhelp verify <config.json>
// FEDHELP_SEED in the environment overrides the config seed for run/warmup.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedhelp/experiment.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

fedhelp::ExperimentConfig load_config(const std::string& path) {
  fedhelp::ExperimentConfig config = fedhelp::parse_config(read_file(path));
  if (const char* env = std::getenv("FEDHELP_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long seed = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
      throw std::invalid_argument(
          std::string("FEDHELP_SEED must be a nonnegative integer, got '") +
          env + "'");
    }
    config.seed = seed;
  }
  return config;
}

void print_run_result(const fedhelp::ExperimentConfig& config,
                      const fedhelp::RunResult& result) {
  std::printf("mode=%s task=%s seed=%llu rounds=%zu%s\n",
              fedhelp::mode_name(config.mode).c_str(),
              config.task == fedhelp::TaskKind::classification
                  ? "classification"
                  : "segmentation",
              static_cast<unsigned long long>(config.seed), result.rounds_run,
              result.early_stopped ? " (early stop)" : "");
  for (std::size_t i = 0; i < result.final_accuracy.size(); ++i) {
    if (result.final_dice.empty()) {
      std::printf("client %zu: accuracy %.4f\n", i, result.final_accuracy[i]);
    } else {
      std::printf("client %zu: accuracy %.4f dice %.4f\n", i,
                  result.final_accuracy[i], result.final_dice[i]);
    }
  }
  std::printf("client average: %.4f\n", result.client_average);
  if (result.oracle_evaluations > 0) {
    std::printf("oracle evaluations this run: %llu\n",
                static_cast<unsigned long long>(result.oracle_evaluations));
  }
  std::printf("artifacts: %s\n", result.out_dir.c_str());
}

int fail_with_json(const std::exception& e) {
  nlohmann::ordered_json err;
  err["error"] = {{"message", e.what()}};
  std::cout << err.dump(2) << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedhelp: cross-silo federated learning simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  bool serial = false;
  std::vector<std::string> compare_dirs;

  CLI::App* run_cmd = app.add_subcommand("run", "execute one experiment");
  run_cmd->add_option("config", config_path, "experiment config (JSON)")
      ->required();
  run_cmd->add_flag("--serial", serial,
                    "run client rounds sequentially (same output bytes)");
  run_cmd->add_option("--out", out_dir, "override the output directory");

  CLI::App* compare_cmd =
      app.add_subcommand("compare", "tabulate finished runs against the first");
  compare_cmd->add_option("dirs", compare_dirs, "run output directories")
      ->expected(2, -1);

  CLI::App* warmup_cmd =
      app.add_subcommand("warmup", "build the oracle cache without training");
  warmup_cmd->add_option("config", config_path, "experiment config (JSON)")
      ->required();

  CLI::App* verify_cmd =
      app.add_subcommand("verify", "run the numeric invariant self-checks");
  verify_cmd->add_option("config", config_path, "experiment config (JSON)")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      fedhelp::ExperimentConfig config = load_config(config_path);
      if (!out_dir.empty()) config.out_dir = out_dir;
      const fedhelp::RunResult result =
          fedhelp::run_experiment(config, /*parallel=*/!serial);
      print_run_result(config, result);
      return 0;
    }
    if (compare_cmd->parsed()) {
      std::cout << fedhelp::compare_runs(compare_dirs);
      return 0;
    }
    if (warmup_cmd->parsed()) {
      const fedhelp::ExperimentConfig config = load_config(config_path);
      const std::uint64_t evaluations = fedhelp::warmup_only(config);
      std::printf("oracle evaluations this run: %llu\n",
                  static_cast<unsigned long long>(evaluations));
      return 0;
    }
    if (verify_cmd->parsed()) {
      const fedhelp::ExperimentConfig config = load_config(config_path);
      return fedhelp::verify_invariants(config) == 0 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    return fail_with_json(e);
  }
  return 0;
}
