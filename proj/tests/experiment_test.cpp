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

// Experiment-runner tests: strict config parsing and the mode table, the
// resolved-JSON round trip, run artifacts and their determinism, one-time
// oracle bookkeeping across processes-worth of invocations, and the
// cross-run comparison CSV.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedhelp/experiment.hpp"

namespace fs = std::filesystem;

namespace fedhelp {
namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void spit(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  REQUIRE(out.good());
}

// Scratch directory, wiped on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

// A deliberately small run: two clients, two rounds, no oracles.
std::string tiny_doc(const std::string& mode, const std::string& out_dir,
                     const std::string& extra_weights = "") {
  return R"({
    "mode": ")" + mode + R"(",
    "seed": 5,
    "num_apis": 0,
    "out_dir": ")" + out_dir + R"(",
    "dataset": {"classes": 3, "dim": 8, "spread": 1.2, "pool": 400,
                "public_classes": 3, "public_size": 100, "public_shift": 0.1,
                "dirichlet_alpha": 0.5},
    "clients": [{"kind": "large", "train": 60, "test": 20},
                {"kind": "small", "train": 40, "test": 20}],
    "model": {"small_hidden": [8], "large_hidden": [12]},
    "weights": {"lambda_r": 0.0, "omega": 1)" + extra_weights + R"(},
    "optimizer": {"epochs": 1, "batch": 16},
    "run": {"t_max": 2, "patience": 4, "epsilon": 0.001}
  })";
}

TEST_CASE("an empty document resolves to the default preset") {
  const ExperimentConfig cfg = parse_config("{}");
  CHECK(cfg.mode == Mode::fedhelp);
  CHECK(cfg.task == TaskKind::classification);
  CHECK(cfg.pool == 3800);
  CHECK(cfg.clients.size() == 6);
  CHECK(cfg.weights.lambda_j == 0.3);
  CHECK(cfg.weights.lambda_b == 1.0);
  CHECK(cfg.weights.omega_size == 1);
  CHECK(cfg.t_max == 40);
  CHECK(cfg.num_apis == 2);
  CHECK(cfg == preset_config("isic19-synthetic"));
}

TEST_CASE("every preset parses and validates under every mode") {
  CHECK(preset_names().size() == 3);
  CHECK_THROWS_AS(preset_config("no-such-preset"), std::invalid_argument);
  for (const std::string& preset : preset_names()) {
    for (const std::string& mode :
         {"fedhelp", "fedavg", "local", "fedhelp_minus", "fedhelp_one_api",
          "fedhelp_f", "fedhelp_b", "fedhelp_s"}) {
      const std::string doc =
          R"({"preset": ")" + preset + R"(", "mode": ")" + mode + R"("})";
      CHECK_NOTHROW(parse_config(doc));
    }
  }
}

TEST_CASE("mode names round-trip") {
  for (Mode mode : {Mode::fedhelp, Mode::fedavg, Mode::local,
                    Mode::fedhelp_minus, Mode::fedhelp_one_api, Mode::fedhelp_f,
                    Mode::fedhelp_b, Mode::fedhelp_s}) {
    CHECK(mode_from_name(mode_name(mode)) == mode);
  }
  CHECK_THROWS_AS(mode_from_name("fedprox"), std::invalid_argument);
}

TEST_CASE("unknown keys are rejected at every nesting level") {
  CHECK_THROWS_AS(parse_config(R"({"modus": "fedhelp"})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"dataset": {"poll": 10}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      parse_config(
          R"({"clients": [{"kind": "small", "train": 5, "test": 5, "size": 1}]})"),
      std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"model": {"depth": 3}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"weights": {"lambda_x": 1.0}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"optimizer": {"lr": 0.1}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"run": {"rounds": 10}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"weight_map": {"beta": 1}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[1, 2]"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("{not json"), std::invalid_argument);
}

TEST_CASE("documents overlay their preset") {
  const ExperimentConfig cfg = parse_config(
      R"({"preset": "pneumonia-synthetic", "dataset": {"pool": 2000}, "run": {"t_max": 7}})");
  CHECK(cfg.pool == 2000);      // overlaid
  CHECK(cfg.t_max == 7);        // overlaid
  CHECK(cfg.classes == 2);      // preserved from the preset
  CHECK(cfg.public_size == 600);
  CHECK(cfg.clients.size() == 6);
}

TEST_CASE("the mode table forces the right switches") {
  const ExperimentConfig fedavg =
      parse_config(R"({"preset": "isic19-synthetic", "mode": "fedavg"})");
  CHECK(fedavg.aggregate);
  CHECK(fedavg.num_apis == 0);
  CHECK(fedavg.weights.lambda_j == 0.0);
  CHECK(fedavg.weights.lambda_f == 0.0);
  CHECK(fedavg.weights.lambda_b == 0.0);
  for (const auto& entry : fedavg.clients) {
    CHECK(entry.kind == ClientKind::small);  // homogeneous baseline
  }

  const ExperimentConfig local =
      parse_config(R"({"preset": "isic19-synthetic", "mode": "local"})");
  CHECK_FALSE(local.aggregate);
  CHECK(local.num_apis == 0);
  CHECK(local.weights.lambda_j == 0.0);

  const ExperimentConfig minus =
      parse_config(R"({"preset": "isic19-synthetic", "mode": "fedhelp_minus"})");
  CHECK(minus.num_apis == 0);
  CHECK(minus.weights.lambda_r == 0.0);
  CHECK(minus.weights.lambda_j == 0.3);  // guidance stays, oracles leave

  const ExperimentConfig one =
      parse_config(R"({"preset": "isic19-synthetic", "mode": "fedhelp_one_api"})");
  CHECK(one.num_apis == 1);

  const ExperimentConfig fwd =
      parse_config(R"({"preset": "isic19-synthetic", "mode": "fedhelp_f"})");
  CHECK(fwd.weights.lambda_b == 0.0);
  CHECK(fwd.weights.lambda_f == 1.0);
  CHECK_FALSE(fwd.symmetric_backward);

  const ExperimentConfig bwd =
      parse_config(R"({"preset": "isic19-synthetic", "mode": "fedhelp_b"})");
  CHECK(bwd.weights.lambda_f == 0.0);
  CHECK(bwd.weights.lambda_b == 1.0);

  const ExperimentConfig sym =
      parse_config(R"({"preset": "isic19-synthetic", "mode": "fedhelp_s"})");
  CHECK(sym.symmetric_backward);
  CHECK(sym.weights.lambda_b == 1.0);
}

TEST_CASE("explicit values that fight the mode are errors, matching ones are not") {
  CHECK_THROWS_AS(
      parse_config(R"({"mode": "fedavg", "weights": {"lambda_j": 0.5}})"),
      std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"mode": "fedhelp_minus", "num_apis": 2})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      parse_config(R"({"mode": "fedhelp_f", "weights": {"lambda_b": 0.7}})"),
      std::invalid_argument);

  // Explicitly writing the forced value is redundant but legal.
  CHECK_NOTHROW(
      parse_config(R"({"mode": "fedavg", "weights": {"lambda_j": 0.0}})"));
  CHECK_NOTHROW(parse_config(R"({"mode": "fedhelp_one_api", "num_apis": 1})"));

  // A preset value is not an explicit value: the isic19 preset carries
  // lambda_b = 1, yet the forward-only ablation still parses.
  CHECK_NOTHROW(
      parse_config(R"({"preset": "isic19-synthetic", "mode": "fedhelp_f"})"));
}

TEST_CASE("the resolved JSON reproduces the config exactly") {
  for (const std::string& doc :
       {std::string("{}"),
        std::string(R"({"preset": "lungseg-toy", "mode": "fedhelp_s", "seed": 11})"),
        std::string(R"({"preset": "pneumonia-synthetic", "mode": "fedavg"})"),
        tiny_doc("fedhelp", "/tmp/fedhelp-exp-echo")}) {
    const ExperimentConfig cfg = parse_config(doc);
    const ExperimentConfig reparsed = parse_config(cfg.to_json());
    CHECK(reparsed == cfg);
  }
}

TEST_CASE("configuration validation catches inconsistent documents") {
  // Client quotas above the generator pool.
  CHECK_THROWS_AS(
      parse_config(
          R"({"dataset": {"pool": 100},
              "clients": [{"kind": "small", "train": 90, "test": 20}]})"),
      std::invalid_argument);
  // Empty shards.
  CHECK_THROWS_AS(
      parse_config(R"({"clients": [{"kind": "small", "train": 0, "test": 5}]})"),
      std::invalid_argument);
  // Degenerate skew parameter.
  CHECK_THROWS_AS(parse_config(R"({"dataset": {"dirichlet_alpha": 0}})"),
                  std::invalid_argument);
  // Ranking set larger than the label space.
  CHECK_THROWS_AS(parse_config(R"({"dataset": {"classes": 2},
                                   "weights": {"omega": 3}})"),
                  std::invalid_argument);
  // Oracles require the guidance channel.
  CHECK_THROWS_AS(parse_config(R"({"weights": {"lambda_j": 0.0}})"),
                  std::invalid_argument);
  // Oracles require mixture learning outside the dedicated no-oracle mode.
  CHECK_THROWS_AS(parse_config(R"({"weights": {"lambda_r": 0.0}})"),
                  std::invalid_argument);
  // Optimizer and loop sanity.
  CHECK_THROWS_AS(parse_config(R"({"optimizer": {"lr_small": 0.0}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"optimizer": {"batch": 0}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"run": {"t_max": 0}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"weight_map": {"sigma": 0}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"out_dir": ""})"), std::invalid_argument);
}

TEST_CASE("a run writes self-describing artifacts") {
  TempDir dir("fedhelp_exp_artifacts");
  const ExperimentConfig cfg =
      parse_config(tiny_doc("fedhelp_minus", dir.str()));
  const RunResult result = run_experiment(cfg, /*parallel=*/true);

  CHECK(result.rounds_run == 2);
  CHECK(result.out_dir == dir.str());
  REQUIRE(result.final_accuracy.size() == 2);
  CHECK(result.client_average ==
        (result.final_accuracy[0] + result.final_accuracy[1]) / 2.0);
  CHECK(result.small_average == result.final_accuracy[1]);
  CHECK(result.oracle_evaluations == 0);

  CHECK(fs::exists(dir.path / "metrics.csv"));
  CHECK(fs::exists(dir.path / "summary.json"));
  // The resolved config echo reparses to the exact run configuration.
  CHECK(parse_config(slurp(dir.path / "config.json")) == cfg);

  const std::string summary = slurp(dir.path / "summary.json");
  CHECK(summary.find("\"mode\": \"fedhelp_minus\"") != std::string::npos);
  CHECK(summary.find("\"small_average\"") != std::string::npos);
  CHECK(summary.find("\"artifacts\"") != std::string::npos);
  CHECK(summary.find("\"oracle\": null") != std::string::npos);

  const std::string metrics = slurp(dir.path / "metrics.csv");
  CHECK(metrics.rfind(
            "round,client_id,kind,loss_ce,loss_guidance,loss_fkd,loss_rkd,"
            "acc,dice\n",
            0) == 0);
  // Two rounds x two clients, plus the header.
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 5);
}

TEST_CASE("repeat and serial runs write byte-identical metrics") {
  TempDir one("fedhelp_exp_det1"), two("fedhelp_exp_det2"),
      three("fedhelp_exp_det3");
  ExperimentConfig cfg = parse_config(tiny_doc("fedhelp", one.str()));
  run_experiment(cfg, /*parallel=*/true);
  cfg.out_dir = two.str();
  run_experiment(cfg, /*parallel=*/true);
  cfg.out_dir = three.str();
  run_experiment(cfg, /*parallel=*/false);

  const std::string first = slurp(one.path / "metrics.csv");
  CHECK(first == slurp(two.path / "metrics.csv"));
  CHECK(first == slurp(three.path / "metrics.csv"));
  CHECK_FALSE(first.empty());
}

TEST_CASE("oracle evaluations happen once per output directory") {
  TempDir dir("fedhelp_exp_oracle");
  const std::string doc = R"({
    "mode": "fedhelp", "seed": 6, "num_apis": 1, "out_dir": ")" + dir.str() +
                          R"(",
    "dataset": {"classes": 3, "dim": 8, "spread": 1.2, "pool": 400,
                "public_classes": 3, "public_size": 60, "public_shift": 0.1,
                "dirichlet_alpha": 0.5},
    "clients": [{"kind": "large", "train": 60, "test": 20},
                {"kind": "small", "train": 40, "test": 20}],
    "model": {"small_hidden": [8], "large_hidden": [12]},
    "weights": {"omega": 1},
    "optimizer": {"epochs": 1, "batch": 16},
    "run": {"t_max": 2, "patience": 4, "epsilon": 0.001}
  })";
  const ExperimentConfig cfg = parse_config(doc);

  // Cold cache: exactly one evaluation per (datum, oracle).
  CHECK(warmup_only(cfg) == 60);
  CHECK(fs::exists(dir.path / "oracle_cache.fhoc"));
  // Every later invocation reloads the persisted cache.
  CHECK(warmup_only(cfg) == 0);
  const RunResult result = run_experiment(cfg, true);
  CHECK(result.oracle_evaluations == 0);
  const std::string summary = slurp(dir.path / "summary.json");
  CHECK(summary.find("\"evaluations_this_run\": 0") != std::string::npos);
  CHECK(summary.find("\"total_evaluations\": 60") != std::string::npos);

  // A cache built under any other identity must be rejected, not reused.
  ExperimentConfig foreign = cfg;
  foreign.seed = 7;
  CHECK_THROWS_WITH_AS(warmup_only(foreign),
                       doctest::Contains("different configuration"),
                       std::runtime_error);
}

TEST_CASE("comparison aligns runs and scores the candidate") {
  TempDir root("fedhelp_exp_compare");
  auto write_summary = [&](const std::string& name, double large_acc,
                           double small_acc, double average) {
    std::ostringstream doc;
    doc << R"({"mode": "x", "task": "classification", "seed": 1, "clients": [)"
        << R"({"id": 0, "kind": "large", "train_size": 60, "test_size": 20, "accuracy": )"
        << large_acc << "},"
        << R"({"id": 1, "kind": "small", "train_size": 40, "test_size": 20, "accuracy": )"
        << small_acc << "}],"
        << R"("client_average": {"accuracy": )" << average << "}}";
    spit(root.path / name / "summary.json", doc.str());
  };
  write_summary("candidate", 0.5091, 0.75, 0.6);
  write_summary("baseline", 0.4439, 0.8, 0.5);

  const std::string csv = compare_runs(
      {(root.path / "candidate").string(), (root.path / "baseline").string()});
  CHECK(csv ==
        "client_id,kind,candidate,baseline,improvement_pct\n"
        "0,large,0.5091,0.4439,14.69\n"
        "1,small,0.7500,0.8000,-6.25\n"
        "client_average,all,0.6000,0.5000,20.00\n");

  // The candidate is scored against the best of the rest.
  write_summary("third", 0.45, 0.7, 0.45);
  const std::string three =
      compare_runs({(root.path / "candidate").string(),
                    (root.path / "baseline").string(),
                    (root.path / "third").string()});
  CHECK(three.find("0,large,0.5091,0.4439,0.4500,13.13\n") !=
        std::string::npos);

  // Trailing separators do not leak into column names.
  const std::string slashed = compare_runs(
      {(root.path / "candidate" / "").string(), (root.path / "baseline").string()});
  CHECK(slashed.rfind("client_id,kind,candidate,baseline,improvement_pct\n",
                      0) == 0);
}

TEST_CASE("comparison failure modes") {
  TempDir root("fedhelp_exp_compare_bad");
  spit(root.path / "a" / "summary.json",
       R"({"task": "classification",
           "clients": [{"id": 0, "kind": "small", "train_size": 10,
                        "test_size": 5, "accuracy": 0.5}],
           "client_average": {"accuracy": 0.5}})");
  spit(root.path / "b" / "summary.json",
       R"({"task": "classification",
           "clients": [{"id": 0, "kind": "large", "train_size": 12,
                        "test_size": 5, "accuracy": 0.5}],
           "client_average": {"accuracy": 0.5}})");

  CHECK_THROWS_AS(compare_runs({(root.path / "a").string()}),
                  std::invalid_argument);
  CHECK_THROWS_WITH_AS(compare_runs({(root.path / "a").string(),
                                     (root.path / "missing").string()}),
                       doctest::Contains("missing run summary"),
                       std::runtime_error);
  // Same client count but different sizes: plans do not align.
  CHECK_THROWS_WITH_AS(compare_runs({(root.path / "a").string(),
                                     (root.path / "b").string()}),
                       doctest::Contains("does not match"), std::runtime_error);

  // Kinds may differ (mode fedavg demotes every client); only sizes matter.
  spit(root.path / "c" / "summary.json",
       R"({"task": "classification",
           "clients": [{"id": 0, "kind": "large", "train_size": 10,
                        "test_size": 5, "accuracy": 0.75}],
           "client_average": {"accuracy": 0.75}})");
  CHECK_NOTHROW(
      compare_runs({(root.path / "a").string(), (root.path / "c").string()}));
}

TEST_CASE("segmentation comparisons rank by dice") {
  TempDir root("fedhelp_exp_compare_seg");
  auto write_summary = [&](const std::string& name, double dice) {
    std::ostringstream doc;
    doc << R"({"task": "segmentation", "clients": [)"
        << R"({"id": 0, "kind": "small", "train_size": 14, "test_size": 3,)"
        << R"( "accuracy": 0.9, "dice": )" << dice << "}],"
        << R"("client_average": {"accuracy": 0.9, "dice": )" << dice << "}}";
    spit(root.path / name / "summary.json", doc.str());
  };
  write_summary("candidate", 0.8);
  write_summary("baseline", 0.5);
  const std::string csv = compare_runs(
      {(root.path / "candidate").string(), (root.path / "baseline").string()});
  // 0.8 vs 0.5 on dice (the shared accuracy of 0.9 would score 0.00).
  CHECK(csv.find("0,small,0.8000,0.5000,60.00\n") != std::string::npos);

  // A zero-valued field of comparison leaves the score blank.
  write_summary("floor", 0.0);
  const std::string blank = compare_runs(
      {(root.path / "candidate").string(), (root.path / "floor").string()});
  CHECK(blank.find("0,small,0.8000,0.0000,\n") != std::string::npos);
}

TEST_CASE("the built-in invariant battery is clean") {
  const ExperimentConfig cfg = parse_config("{}");
  CHECK(verify_invariants(cfg) == 0);
}

}  // namespace
}  // namespace fedhelp
