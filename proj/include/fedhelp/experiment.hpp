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

// Declarative experiment runner: strict JSON config with built-in presets,
// dataset/oracle/client assembly, one federation run per invocation, and
// CSV/JSON artifacts with content hashes.

#ifndef FEDHELP_EXPERIMENT_HPP_
#define FEDHELP_EXPERIMENT_HPP_

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fedhelp/federation.hpp"

namespace fedhelp {

enum class Mode {
  fedhelp,         // full protocol
  fedavg,          // homogeneous small clients, no oracles, no guidance
  local,           // isolated training, no aggregation
  fedhelp_minus,   // guidance without oracles (public cross-entropy only)
  fedhelp_one_api, // single oracle
  fedhelp_f,       // forward distillation only
  fedhelp_b,       // ranking distillation only
  fedhelp_s,       // ranking term replaced by plain reverse KL
};

std::string mode_name(Mode mode);
Mode mode_from_name(const std::string& name);

struct ClientPlanEntry {
  ClientKind kind = ClientKind::small;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  bool operator==(const ClientPlanEntry&) const = default;
};

// Fully resolved experiment description. Produced only by parse_config /
// preset_config, which enforce mode constraints and fill defaults.
struct ExperimentConfig {
  Mode mode = Mode::fedhelp;
  TaskKind task = TaskKind::classification;
  std::uint64_t seed = 1;
  std::size_t num_apis = 2;

  // classification data
  std::size_t classes = 8;
  std::size_t dim = 32;
  double spread = 2.0;
  std::size_t public_classes = 10;
  double public_shift = 0.3;
  double dirichlet_alpha = 0.5;
  // segmentation data
  std::size_t grid = 16;
  // shared data
  std::size_t pool = 3400;
  std::size_t public_size = 1000;

  std::vector<ClientPlanEntry> clients;

  std::vector<std::size_t> small_hidden = {64, 64};
  std::vector<std::size_t> large_hidden = {128, 128, 128};
  std::size_t kernel = 3;

  LossWeights weights;
  double beta0 = 10.0;
  double sigma = 5.0;

  double lr_small = 0.05;
  double lr_large = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 2;
  std::size_t batch = 32;

  std::size_t t_max = 30;
  std::size_t patience = 8;
  double epsilon = 1e-3;

  std::string out_dir = "run-out";

  // Derived mode switches.
  bool aggregate = true;
  bool symmetric_backward = false;

  // Canonical resolved JSON; parse_config(to_json()) reproduces this config.
  std::string to_json() const;
  bool operator==(const ExperimentConfig&) const = default;
};

// Parses and validates a config document. Unknown keys anywhere are errors;
// a "preset" key starts from that preset's values and overlays the rest of
// the document; mode constraints are enforced (conflicting explicit values
// are errors, absent ones are forced).
ExperimentConfig parse_config(const std::string& json_text);

// Built-in presets: isic19-synthetic, pneumonia-synthetic, lungseg-toy.
ExperimentConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

// Outcome of one run, echoed into summary.json.
struct RunResult {
  std::size_t rounds_run = 0;
  bool early_stopped = false;
  std::vector<double> final_accuracy;  // by client position
  std::vector<double> final_dice;      // segmentation only
  double client_average = 0.0;         // mean final accuracy, all clients
  double small_average = 0.0;          // mean over small clients
  std::uint64_t oracle_evaluations = 0;
  std::string out_dir;
};

// Builds datasets/oracles/clients for `config`, trains, and writes
// metrics.csv, config.json (resolved), summary.json, and (when oracles are
// used) oracle_cache.fhoc into the output directory. `parallel` toggles
// concurrent client rounds; output bytes are identical either way.
RunResult run_experiment(const ExperimentConfig& config, bool parallel);

// Builds and persists the oracle cache for `config` without training.
// Returns the number of raw oracle evaluations performed.
std::uint64_t warmup_only(const ExperimentConfig& config);

// Cross-run comparison: aligns per-client final metrics from each run
// directory's summary.json (first directory = candidate) and appends the
// candidate's percentage improvement over the best of the rest. Returns
// CSV text. Throws when client plans disagree or a summary is missing.
std::string compare_runs(const std::vector<std::string>& run_dirs);

// Fast self-check battery over the numeric core (losses, aggregation,
// ranking equivalence, weight maps, cache round trip, determinism).
// Returns the number of failed checks and prints one line per check.
int verify_invariants(const ExperimentConfig& config);

}  // namespace fedhelp

#endif  // FEDHELP_EXPERIMENT_HPP_
