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

#include "fedhelp/experiment.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "fedhelp/rng.hpp"
#include "fedhelp/serialize.hpp"

namespace fedhelp {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// Seed-stream tags (arbitrary distinct constants).
constexpr std::uint64_t kApiStream = 0x61706973;     // oracle construction
constexpr std::uint64_t kSegPubStream = 0x73677075;  // public segmentation pool
// Public segmentation datum ids; any range disjoint from private ids works
// because private segmentation shards are never cached.
constexpr std::uint64_t kSegIdOffset = 1ULL << 33;

// Held-out shards used to pre-train oracles. Drawn from the same generator
// as the public pool but never served or cached, so warming the cache is
// the only code path that ever evaluates an oracle on served data.
constexpr std::size_t kOracleHoldout = 512;
constexpr std::size_t kSegOracleHoldout = 48;

[[noreturn]] void fail(const std::string& message) {
  throw std::invalid_argument("parse_config: " + message);
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Name tables

const std::pair<Mode, const char*> kModeNames[] = {
    {Mode::fedhelp, "fedhelp"},
    {Mode::fedavg, "fedavg"},
    {Mode::local, "local"},
    {Mode::fedhelp_minus, "fedhelp_minus"},
    {Mode::fedhelp_one_api, "fedhelp_one_api"},
    {Mode::fedhelp_f, "fedhelp_f"},
    {Mode::fedhelp_b, "fedhelp_b"},
    {Mode::fedhelp_s, "fedhelp_s"},
};

std::string task_name(TaskKind task) {
  return task == TaskKind::classification ? "classification" : "segmentation";
}

TaskKind task_from_name(const std::string& name) {
  if (name == "classification") return TaskKind::classification;
  if (name == "segmentation") return TaskKind::segmentation;
  fail("unknown task '" + name + "'");
}

std::string kind_name(ClientKind kind) {
  return kind == ClientKind::small ? "small" : "large";
}

ClientKind kind_from_name(const std::string& name) {
  if (name == "small") return ClientKind::small;
  if (name == "large") return ClientKind::large;
  fail("unknown client kind '" + name + "' (expected small|large)");
}

// ---------------------------------------------------------------------------
// Strict JSON reading

void expect_object(const json& v, const std::string& where) {
  if (!v.is_object()) fail(where + " must be a JSON object");
}

void reject_unknown_keys(const json& obj, const std::string& where,
                         std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) fail("unknown key '" + item.key() + "' in " + where);
  }
}

double read_double(const json& v, const std::string& where) {
  if (!v.is_number()) fail(where + " must be a number");
  return v.get<double>();
}

std::size_t read_size(const json& v, const std::string& where) {
  if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0)) {
    fail(where + " must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

std::uint64_t read_u64(const json& v, const std::string& where) {
  if (!v.is_number_unsigned() &&
      !(v.is_number_integer() && v.get<long long>() >= 0)) {
    fail(where + " must be a nonnegative integer");
  }
  return v.get<std::uint64_t>();
}

std::string read_string(const json& v, const std::string& where) {
  if (!v.is_string()) fail(where + " must be a string");
  return v.get<std::string>();
}

std::vector<std::size_t> read_size_array(const json& v,
                                         const std::string& where) {
  if (!v.is_array() || v.empty()) fail(where + " must be a non-empty array");
  std::vector<std::size_t> out;
  out.reserve(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(read_size(v[i], where + "[" + std::to_string(i) + "]"));
  }
  return out;
}

// Which constraint-relevant fields the user document set explicitly. Preset
// values never count as explicit, so mode forcing only errors on genuine
// user conflicts.
struct ExplicitFields {
  bool num_apis = false;
  bool lambda_r = false;
  bool lambda_j = false;
  bool lambda_f = false;
  bool lambda_b = false;
};

void apply_document(const json& doc, ExperimentConfig& cfg,
                    ExplicitFields& set) {
  reject_unknown_keys(doc, "the top-level document",
                      {"preset", "mode", "task", "seed", "num_apis", "out_dir",
                       "dataset", "clients", "model", "weights", "optimizer",
                       "run", "weight_map"});
  if (doc.contains("mode")) {
    cfg.mode = mode_from_name(read_string(doc["mode"], "mode"));
  }
  if (doc.contains("task")) {
    cfg.task = task_from_name(read_string(doc["task"], "task"));
  }
  if (doc.contains("seed")) cfg.seed = read_u64(doc["seed"], "seed");
  if (doc.contains("num_apis")) {
    cfg.num_apis = read_size(doc["num_apis"], "num_apis");
    set.num_apis = true;
  }
  if (doc.contains("out_dir")) {
    cfg.out_dir = read_string(doc["out_dir"], "out_dir");
  }

  if (doc.contains("dataset")) {
    const json& d = doc["dataset"];
    expect_object(d, "dataset");
    reject_unknown_keys(d, "dataset",
                        {"classes", "dim", "pool", "spread", "public_classes",
                         "public_size", "public_shift", "dirichlet_alpha",
                         "grid"});
    if (d.contains("classes")) cfg.classes = read_size(d["classes"], "dataset.classes");
    if (d.contains("dim")) cfg.dim = read_size(d["dim"], "dataset.dim");
    if (d.contains("pool")) cfg.pool = read_size(d["pool"], "dataset.pool");
    if (d.contains("spread")) cfg.spread = read_double(d["spread"], "dataset.spread");
    if (d.contains("public_classes")) {
      cfg.public_classes = read_size(d["public_classes"], "dataset.public_classes");
    }
    if (d.contains("public_size")) {
      cfg.public_size = read_size(d["public_size"], "dataset.public_size");
    }
    if (d.contains("public_shift")) {
      cfg.public_shift = read_double(d["public_shift"], "dataset.public_shift");
    }
    if (d.contains("dirichlet_alpha")) {
      cfg.dirichlet_alpha = read_double(d["dirichlet_alpha"], "dataset.dirichlet_alpha");
    }
    if (d.contains("grid")) cfg.grid = read_size(d["grid"], "dataset.grid");
  }

  if (doc.contains("clients")) {
    const json& c = doc["clients"];
    if (!c.is_array() || c.empty()) fail("clients must be a non-empty array");
    cfg.clients.clear();
    for (std::size_t i = 0; i < c.size(); ++i) {
      const std::string where = "clients[" + std::to_string(i) + "]";
      expect_object(c[i], where);
      reject_unknown_keys(c[i], where, {"kind", "train", "test"});
      ClientPlanEntry entry;
      if (!c[i].contains("kind") || !c[i].contains("train") ||
          !c[i].contains("test")) {
        fail(where + " needs kind, train, and test");
      }
      entry.kind = kind_from_name(read_string(c[i]["kind"], where + ".kind"));
      entry.train_size = read_size(c[i]["train"], where + ".train");
      entry.test_size = read_size(c[i]["test"], where + ".test");
      cfg.clients.push_back(entry);
    }
  }

  if (doc.contains("model")) {
    const json& m = doc["model"];
    expect_object(m, "model");
    reject_unknown_keys(m, "model", {"small_hidden", "large_hidden", "kernel"});
    if (m.contains("small_hidden")) {
      cfg.small_hidden = read_size_array(m["small_hidden"], "model.small_hidden");
    }
    if (m.contains("large_hidden")) {
      cfg.large_hidden = read_size_array(m["large_hidden"], "model.large_hidden");
    }
    if (m.contains("kernel")) cfg.kernel = read_size(m["kernel"], "model.kernel");
  }

  if (doc.contains("weights")) {
    const json& w = doc["weights"];
    expect_object(w, "weights");
    reject_unknown_keys(w, "weights",
                        {"lambda_r", "lambda_j", "lambda_f", "lambda_b", "omega"});
    if (w.contains("lambda_r")) {
      cfg.weights.lambda_r = read_double(w["lambda_r"], "weights.lambda_r");
      set.lambda_r = true;
    }
    if (w.contains("lambda_j")) {
      cfg.weights.lambda_j = read_double(w["lambda_j"], "weights.lambda_j");
      set.lambda_j = true;
    }
    if (w.contains("lambda_f")) {
      cfg.weights.lambda_f = read_double(w["lambda_f"], "weights.lambda_f");
      set.lambda_f = true;
    }
    if (w.contains("lambda_b")) {
      cfg.weights.lambda_b = read_double(w["lambda_b"], "weights.lambda_b");
      set.lambda_b = true;
    }
    if (w.contains("omega")) {
      cfg.weights.omega_size = read_size(w["omega"], "weights.omega");
    }
  }

  if (doc.contains("optimizer")) {
    const json& o = doc["optimizer"];
    expect_object(o, "optimizer");
    reject_unknown_keys(o, "optimizer",
                        {"lr_small", "lr_large", "momentum", "epochs", "batch"});
    if (o.contains("lr_small")) cfg.lr_small = read_double(o["lr_small"], "optimizer.lr_small");
    if (o.contains("lr_large")) cfg.lr_large = read_double(o["lr_large"], "optimizer.lr_large");
    if (o.contains("momentum")) cfg.momentum = read_double(o["momentum"], "optimizer.momentum");
    if (o.contains("epochs")) cfg.epochs = read_size(o["epochs"], "optimizer.epochs");
    if (o.contains("batch")) cfg.batch = read_size(o["batch"], "optimizer.batch");
  }

  if (doc.contains("run")) {
    const json& r = doc["run"];
    expect_object(r, "run");
    reject_unknown_keys(r, "run", {"t_max", "patience", "epsilon"});
    if (r.contains("t_max")) cfg.t_max = read_size(r["t_max"], "run.t_max");
    if (r.contains("patience")) cfg.patience = read_size(r["patience"], "run.patience");
    if (r.contains("epsilon")) cfg.epsilon = read_double(r["epsilon"], "run.epsilon");
  }

  if (doc.contains("weight_map")) {
    const json& w = doc["weight_map"];
    expect_object(w, "weight_map");
    reject_unknown_keys(w, "weight_map", {"beta0", "sigma"});
    if (w.contains("beta0")) cfg.beta0 = read_double(w["beta0"], "weight_map.beta0");
    if (w.contains("sigma")) cfg.sigma = read_double(w["sigma"], "weight_map.sigma");
  }
}

// ---------------------------------------------------------------------------
// Mode constraints

void force_weight(double& field, bool explicit_set, double forced,
                  const char* field_name, const std::string& mode) {
  if (explicit_set && field != forced) {
    fail("mode " + mode + " forces " + field_name + " = " +
         std::to_string(forced) + " but the document sets " +
         std::to_string(field));
  }
  field = forced;
}

void force_apis(std::size_t& field, bool explicit_set, std::size_t forced,
                const std::string& mode) {
  if (explicit_set && field != forced) {
    fail("mode " + mode + " forces num_apis = " + std::to_string(forced) +
         " but the document sets " + std::to_string(field));
  }
  field = forced;
}

void apply_mode_constraints(ExperimentConfig& cfg, const ExplicitFields& set) {
  const std::string mode = mode_name(cfg.mode);
  cfg.aggregate = cfg.mode != Mode::local;
  cfg.symmetric_backward = cfg.mode == Mode::fedhelp_s;
  switch (cfg.mode) {
    case Mode::fedhelp:
    case Mode::fedhelp_s:
      break;
    case Mode::fedavg:
      // The homogeneous baseline: every participant trains and uploads the
      // small architecture. Kinds from shared presets are coerced, not
      // rejected, so one client plan serves every mode in a comparison.
      for (auto& entry : cfg.clients) entry.kind = ClientKind::small;
      force_apis(cfg.num_apis, set.num_apis, 0, mode);
      force_weight(cfg.weights.lambda_j, set.lambda_j, 0.0, "weights.lambda_j", mode);
      force_weight(cfg.weights.lambda_f, set.lambda_f, 0.0, "weights.lambda_f", mode);
      force_weight(cfg.weights.lambda_b, set.lambda_b, 0.0, "weights.lambda_b", mode);
      break;
    case Mode::local:
      force_apis(cfg.num_apis, set.num_apis, 0, mode);
      force_weight(cfg.weights.lambda_j, set.lambda_j, 0.0, "weights.lambda_j", mode);
      force_weight(cfg.weights.lambda_f, set.lambda_f, 0.0, "weights.lambda_f", mode);
      force_weight(cfg.weights.lambda_b, set.lambda_b, 0.0, "weights.lambda_b", mode);
      break;
    case Mode::fedhelp_minus:
      force_apis(cfg.num_apis, set.num_apis, 0, mode);
      force_weight(cfg.weights.lambda_r, set.lambda_r, 0.0, "weights.lambda_r", mode);
      break;
    case Mode::fedhelp_one_api:
      force_apis(cfg.num_apis, set.num_apis, 1, mode);
      break;
    case Mode::fedhelp_f:
      force_weight(cfg.weights.lambda_b, set.lambda_b, 0.0, "weights.lambda_b", mode);
      break;
    case Mode::fedhelp_b:
      force_weight(cfg.weights.lambda_f, set.lambda_f, 0.0, "weights.lambda_f", mode);
      break;
  }
}

void validate_config(const ExperimentConfig& cfg) {
  cfg.weights.validate();
  if (cfg.clients.empty()) fail("clients must be a non-empty array");
  std::size_t quota = 0;
  for (std::size_t i = 0; i < cfg.clients.size(); ++i) {
    if (cfg.clients[i].train_size == 0 || cfg.clients[i].test_size == 0) {
      fail("clients[" + std::to_string(i) + "] needs train > 0 and test > 0");
    }
    quota += cfg.clients[i].train_size + cfg.clients[i].test_size;
  }
  if (cfg.task == TaskKind::classification) {
    if (cfg.classes < 2) fail("dataset.classes must be >= 2");
    if (cfg.dim < 2) fail("dataset.dim must be >= 2");
    if (quota > cfg.pool) {
      fail("client quotas (" + std::to_string(quota) +
           ") exceed dataset.pool (" + std::to_string(cfg.pool) + ")");
    }
    if (cfg.public_classes < 2) fail("dataset.public_classes must be >= 2");
    if (cfg.dirichlet_alpha <= 0) fail("dataset.dirichlet_alpha must be > 0");
    if (cfg.weights.omega_size > cfg.classes) {
      fail("weights.omega must not exceed dataset.classes");
    }
  } else {
    if (cfg.grid < 4 || cfg.grid > 64) fail("dataset.grid must be in [4, 64]");
    if (cfg.weights.omega_size > 2) {
      fail("weights.omega must not exceed 2 for segmentation");
    }
  }
  if (cfg.spread <= 0) fail("dataset.spread must be > 0");
  if (cfg.public_shift < 0) fail("dataset.public_shift must be >= 0");
  if (cfg.weights.lambda_j > 0 && cfg.public_size == 0) {
    fail("dataset.public_size must be > 0 when weights.lambda_j > 0");
  }
  if (cfg.num_apis > 0 && cfg.weights.lambda_j == 0) {
    fail("num_apis > 0 requires weights.lambda_j > 0 (oracles guide through "
         "the public objective)");
  }
  if (cfg.num_apis > 0 && cfg.weights.lambda_j > 0 &&
      cfg.weights.lambda_r == 0) {
    // Oracles that can never influence training are almost certainly a
    // configuration mistake outside the dedicated no-oracle mode.
    if (cfg.mode != Mode::fedhelp_minus) {
      fail("num_apis > 0 requires weights.lambda_r > 0 (or mode fedhelp_minus)");
    }
  }
  if (cfg.kernel == 0 || cfg.kernel % 2 == 0 || cfg.kernel > 9) {
    fail("model.kernel must be odd and in [1, 9]");
  }
  for (auto width : cfg.small_hidden) {
    if (width == 0) fail("model.small_hidden entries must be > 0");
  }
  for (auto width : cfg.large_hidden) {
    if (width == 0) fail("model.large_hidden entries must be > 0");
  }
  if (cfg.lr_small <= 0 || cfg.lr_large <= 0) {
    fail("optimizer learning rates must be > 0");
  }
  if (cfg.momentum < 0 || cfg.momentum >= 1) {
    fail("optimizer.momentum must be in [0, 1)");
  }
  if (cfg.epochs == 0) fail("optimizer.epochs must be >= 1");
  if (cfg.batch == 0) fail("optimizer.batch must be >= 1");
  if (cfg.t_max == 0) fail("run.t_max must be >= 1");
  if (cfg.patience == 0) fail("run.patience must be >= 1");
  if (cfg.epsilon < 0) fail("run.epsilon must be >= 0");
  if (cfg.beta0 < 0) fail("weight_map.beta0 must be >= 0");
  if (cfg.sigma <= 0) fail("weight_map.sigma must be > 0");
  if (cfg.out_dir.empty()) fail("out_dir must not be empty");
}

// ---------------------------------------------------------------------------
// Dataset / oracle / client assembly

std::string oracle_identity(const ExperimentConfig& cfg, std::size_t index) {
  // The id embeds the seed-derived construction hash, so a cache produced
  // under a different seed or task is rejected on load instead of silently
  // serving wrong distributions.
  return "api-" + std::to_string(index) + "-" +
         hex64(hash_combine(cfg.seed, kApiStream,
                            static_cast<std::uint64_t>(index) +
                                (cfg.task == TaskKind::segmentation ? 1000 : 0)));
}

std::vector<std::string> oracle_identities(const ExperimentConfig& cfg) {
  std::vector<std::string> ids;
  ids.reserve(cfg.num_apis);
  for (std::size_t m = 0; m < cfg.num_apis; ++m) {
    ids.push_back(oracle_identity(cfg, m));
  }
  return ids;
}

struct Assembled {
  std::vector<ClientSplit> splits;                      // classification
  std::vector<std::pair<SegDataset, SegDataset>> segs;  // segmentation
  PublicData pub;  // cache pointer filled in by the caller
  OracleCache cache;
  std::size_t evaluations_this_run = 0;
  bool uses_oracles = false;
};

// Builds every dataset and (when oracles are in play) a warmed cache, loading
// an existing cache file from the output directory when its oracle identity
// matches. `need_private` is false for warm-up-only invocations.
Assembled assemble(const ExperimentConfig& cfg, bool need_private) {
  Assembled a;
  const bool use_public = cfg.weights.lambda_j > 0.0;
  a.uses_oracles = cfg.num_apis > 0;

  LabeledDataset pretrain;
  SegDataset seg_pretrain;
  if (cfg.task == TaskKind::classification) {
    if (need_private) {
      LabeledDataset pool = make_classification(cfg.seed, cfg.classes, cfg.dim,
                                                cfg.pool, cfg.spread);
      PartitionPlan plan;
      for (const auto& entry : cfg.clients) {
        plan.clients.push_back({entry.train_size, entry.test_size});
      }
      a.splits = partition(pool, plan, cfg.dirichlet_alpha, cfg.seed);
    }
    if (use_public) {
      const std::size_t total =
          cfg.public_size + (a.uses_oracles ? kOracleHoldout : 0);
      LabeledDataset pool =
          make_public_set(cfg.seed, cfg.public_classes, total,
                          cfg.public_shift, cfg.dim, cfg.spread);
      a.pub.classification = dataset_slice(pool, 0, cfg.public_size);
      if (a.uses_oracles) {
        pretrain = dataset_slice(pool, cfg.public_size, kOracleHoldout);
      }
    }
  } else {
    if (need_private) {
      std::size_t quota = 0;
      for (const auto& entry : cfg.clients) {
        quota += entry.train_size + entry.test_size;
      }
      SegDataset pool = make_segmentation(cfg.seed, quota, cfg.grid, cfg.grid,
                                          cfg.beta0, cfg.sigma);
      std::size_t offset = 0;
      for (const auto& entry : cfg.clients) {
        SegDataset train = seg_slice(pool, offset, entry.train_size);
        SegDataset test =
            seg_slice(pool, offset + entry.train_size, entry.test_size);
        offset += entry.train_size + entry.test_size;
        a.segs.emplace_back(std::move(train), std::move(test));
      }
    }
    if (use_public) {
      const std::size_t total =
          cfg.public_size + (a.uses_oracles ? kSegOracleHoldout : 0);
      SegDataset pool =
          make_segmentation(hash_combine(cfg.seed, kSegPubStream), total,
                            cfg.grid, cfg.grid, cfg.beta0, cfg.sigma);
      a.pub.segmentation = seg_slice(pool, 0, cfg.public_size);
      a.pub.segmentation_ids.resize(cfg.public_size);
      for (std::size_t i = 0; i < cfg.public_size; ++i) {
        a.pub.segmentation_ids[i] = kSegIdOffset + i;
      }
      if (a.uses_oracles) {
        seg_pretrain = seg_slice(pool, cfg.public_size, kSegOracleHoldout);
      }
    }
  }

  if (!a.uses_oracles) return a;

  const std::string cache_path =
      (fs::path(cfg.out_dir) / "oracle_cache.fhoc").string();
  const std::vector<std::string> expected_ids = oracle_identities(cfg);
  if (fs::exists(cache_path)) {
    a.cache = OracleCache::load(cache_path);
    if (a.cache.oracle_ids() != expected_ids) {
      throw std::runtime_error(
          "oracle cache at " + cache_path +
          " was built for a different configuration; delete it or use a "
          "fresh output directory");
    }
  }
  if (a.cache.num_data() < cfg.public_size) {
    // Constructing (pre-training) the oracles is the expensive step, so it
    // only happens when the cache is missing entries.
    std::vector<OracleModel> oracles;
    for (std::size_t m = 0; m < cfg.num_apis; ++m) {
      const std::uint64_t oracle_seed = hash_combine(
          cfg.seed, kApiStream,
          static_cast<std::uint64_t>(m) +
              (cfg.task == TaskKind::segmentation ? 1000 : 0));
      if (cfg.task == TaskKind::classification) {
        oracles.push_back(
            make_classification_oracle(expected_ids[m], oracle_seed, pretrain));
      } else {
        oracles.push_back(
            make_segmentation_oracle(expected_ids[m], oracle_seed, seg_pretrain));
      }
    }
    if (cfg.task == TaskKind::classification) {
      a.evaluations_this_run =
          a.cache.warm_up(oracles, a.pub.classification.features,
                          a.pub.classification.ids);
    } else {
      a.evaluations_this_run = a.cache.warm_up(
          oracles, a.pub.segmentation.images, a.pub.segmentation_ids);
    }
    fs::create_directories(cfg.out_dir);
    a.cache.save(cache_path);
  }
  return a;
}

std::vector<ClientHandle> build_clients(const ExperimentConfig& cfg,
                                        const Assembled& a) {
  ModelSpec small_spec, large_spec;
  std::size_t public_head_classes;
  if (cfg.task == TaskKind::classification) {
    small_spec = {ModelSpec::Kind::mlp, cfg.dim, cfg.small_hidden, cfg.kernel,
                  cfg.classes};
    large_spec = {ModelSpec::Kind::mlp, cfg.dim, cfg.large_hidden, cfg.kernel,
                  cfg.classes};
    public_head_classes = cfg.public_classes;
  } else {
    small_spec = {ModelSpec::Kind::conv_pixel, 1, cfg.small_hidden, cfg.kernel,
                  2};
    large_spec = {ModelSpec::Kind::conv_pixel, 1, cfg.large_hidden, cfg.kernel,
                  2};
    public_head_classes = 2;
  }
  small_spec.validate();
  large_spec.validate();

  std::vector<ClientHandle> clients;
  clients.reserve(cfg.clients.size());
  for (std::size_t i = 0; i < cfg.clients.size(); ++i) {
    ClientHandle client =
        cfg.clients[i].kind == ClientKind::small
            ? make_small_client(i, cfg.task, small_spec, public_head_classes,
                                cfg.public_size, cfg.num_apis, cfg.seed)
            : make_large_client(i, cfg.task, large_spec, small_spec, cfg.seed);
    if (cfg.task == TaskKind::classification) {
      client.train = a.splits[i].train;
      client.test = a.splits[i].test;
    } else {
      client.seg_train = a.segs[i].first;
      client.seg_test = a.segs[i].second;
    }
    clients.push_back(std::move(client));
  }
  return clients;
}

FederationConfig federation_config(const ExperimentConfig& cfg, bool parallel) {
  FederationConfig fc;
  fc.task = cfg.task;
  fc.weights = cfg.weights;
  fc.aggregate = cfg.aggregate;
  fc.symmetric_backward = cfg.symmetric_backward;
  fc.local_epochs = cfg.epochs;
  fc.batch_size = cfg.batch;
  fc.lr_small = cfg.lr_small;
  fc.lr_large = cfg.lr_large;
  fc.momentum = cfg.momentum;
  fc.t_max = cfg.t_max;
  fc.patience = cfg.patience;
  fc.epsilon = cfg.epsilon;
  fc.seed = cfg.seed;
  fc.parallel = parallel;
  return fc;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << text;
  if (!out) throw std::runtime_error("failed writing: " + path);
}

double mean_of(const std::vector<double>& values) {
  double sum = 0.0;
  for (double v : values) sum += v;
  return values.empty() ? 0.0 : sum / static_cast<double>(values.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API

std::string mode_name(Mode mode) {
  for (const auto& [value, name] : kModeNames) {
    if (value == mode) return name;
  }
  throw std::logic_error("mode_name: unhandled mode");
}

Mode mode_from_name(const std::string& name) {
  for (const auto& [value, candidate] : kModeNames) {
    if (name == candidate) return value;
  }
  fail("unknown mode '" + name + "'");
}

std::vector<std::string> preset_names() {
  return {"isic19-synthetic", "pneumonia-synthetic", "lungseg-toy"};
}

ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig cfg;  // presets override field initializers where they differ
  if (name == "isic19-synthetic") {
    // Six skewed dermatology-style silos: three resource-rich, three small,
    // training counts in ~9930:3163:2690:655:351:180 proportion scaled to a
    // desk-size pool. Small-silo test shards are held at 150 samples each so
    // the reported accuracies are not quantised by tiny denominators.
    cfg.clients = {{ClientKind::large, 1591, 397}, {ClientKind::large, 507, 126},
                   {ClientKind::large, 431, 107}, {ClientKind::small, 104, 150},
                   {ClientKind::small, 56, 150},  {ClientKind::small, 28, 150}};
    cfg.pool = 3800;
    cfg.dirichlet_alpha = 0.2;
    cfg.public_shift = 0.1;
    cfg.weights.lambda_j = 0.3;
    cfg.weights.lambda_b = 1.0;
    cfg.weights.omega_size = 1;
    cfg.lr_large = 0.03;
    cfg.t_max = 40;
    cfg.patience = 14;
    cfg.epsilon = 5e-4;
    cfg.out_dir = "runs/isic19-synthetic";
  } else if (name == "pneumonia-synthetic") {
    // Binary screening shape: two large silos, four small ones, counts in
    // ~3134:1048:422:317:213:109 proportion.
    cfg.task = TaskKind::classification;
    cfg.classes = 2;
    cfg.public_classes = 2;
    cfg.pool = 1800;
    cfg.public_size = 600;
    cfg.clients = {{ClientKind::large, 940, 112}, {ClientKind::large, 314, 37},
                   {ClientKind::small, 127, 15},  {ClientKind::small, 95, 11},
                   {ClientKind::small, 64, 7},    {ClientKind::small, 33, 4}};
    cfg.weights.omega_size = 1;
    cfg.t_max = 20;
    cfg.patience = 6;
    cfg.out_dir = "runs/pneumonia-synthetic";
  } else if (name == "lungseg-toy") {
    // Two large silos plus one small one (285:285:65 shape), toy grids.
    // Distillation multipliers are far below the classification defaults
    // because the per-pixel distillation losses sum over all grid positions
    // while the weighted cross-entropy normalizes to a pixel mean; parity
    // between the terms needs multipliers on the order of one over the
    // pixel count.
    cfg.task = TaskKind::segmentation;
    cfg.grid = 16;
    cfg.pool = 80;
    cfg.public_size = 48;
    cfg.clients = {{ClientKind::large, 22, 7},
                   {ClientKind::large, 22, 7},
                   {ClientKind::small, 5, 4}};
    cfg.small_hidden = {8, 8};
    cfg.large_hidden = {32, 32, 32};
    cfg.weights.lambda_f = 0.1;
    cfg.weights.lambda_b = 0.002;
    cfg.weights.omega_size = 1;
    cfg.lr_large = 0.005;
    cfg.batch = 8;
    cfg.t_max = 20;
    cfg.patience = 8;
    cfg.out_dir = "runs/lungseg-toy";
  } else {
    fail("unknown preset '" + name + "'");
  }
  return cfg;
}

ExperimentConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(std::string("invalid JSON: ") + e.what());
  }
  expect_object(doc, "the top-level document");

  ExperimentConfig cfg;
  if (doc.contains("preset")) {
    cfg = preset_config(read_string(doc["preset"], "preset"));
  } else {
    cfg = preset_config("isic19-synthetic");
  }
  ExplicitFields explicit_fields;
  apply_document(doc, cfg, explicit_fields);
  apply_mode_constraints(cfg, explicit_fields);
  validate_config(cfg);
  return cfg;
}

std::string ExperimentConfig::to_json() const {
  ordered_json doc;
  doc["mode"] = mode_name(mode);
  doc["task"] = task_name(task);
  doc["seed"] = seed;
  doc["num_apis"] = num_apis;
  doc["out_dir"] = out_dir;
  doc["dataset"] = {{"classes", classes},
                    {"dim", dim},
                    {"pool", pool},
                    {"spread", spread},
                    {"public_classes", public_classes},
                    {"public_size", public_size},
                    {"public_shift", public_shift},
                    {"dirichlet_alpha", dirichlet_alpha},
                    {"grid", grid}};
  doc["clients"] = ordered_json::array();
  for (const auto& entry : clients) {
    doc["clients"].push_back({{"kind", kind_name(entry.kind)},
                              {"train", entry.train_size},
                              {"test", entry.test_size}});
  }
  doc["model"] = {{"small_hidden", small_hidden},
                  {"large_hidden", large_hidden},
                  {"kernel", kernel}};
  doc["weights"] = {{"lambda_r", weights.lambda_r},
                    {"lambda_j", weights.lambda_j},
                    {"lambda_f", weights.lambda_f},
                    {"lambda_b", weights.lambda_b},
                    {"omega", weights.omega_size}};
  doc["optimizer"] = {{"lr_small", lr_small},
                      {"lr_large", lr_large},
                      {"momentum", momentum},
                      {"epochs", epochs},
                      {"batch", batch}};
  doc["run"] = {{"t_max", t_max}, {"patience", patience}, {"epsilon", epsilon}};
  doc["weight_map"] = {{"beta0", beta0}, {"sigma", sigma}};
  return doc.dump(2) + "\n";
}

RunResult run_experiment(const ExperimentConfig& config, bool parallel) {
  validate_config(config);
  fs::create_directories(config.out_dir);

  Assembled a = assemble(config, /*need_private=*/true);
  if (a.uses_oracles) a.pub.cache = &a.cache;

  std::vector<ClientHandle> clients = build_clients(config, a);
  FederationState state =
      run_federation(clients, a.pub, federation_config(config, parallel));

  const fs::path out(config.out_dir);
  write_metrics_csv((out / "metrics.csv").string(), state.history);
  write_text_file((out / "config.json").string(), config.to_json());

  std::size_t aggregation_rounds = 0;
  for (const auto& report : state.history) {
    if (report.aggregation_checksum != 0) ++aggregation_rounds;
  }

  RunResult result;
  result.rounds_run = state.rounds_run;
  result.early_stopped = state.early_stopped;
  result.final_accuracy = state.final_accuracy;
  result.final_dice = state.final_dice;
  result.client_average = mean_of(state.final_accuracy);
  result.oracle_evaluations = a.evaluations_this_run;
  result.out_dir = config.out_dir;

  ordered_json summary;
  summary["mode"] = mode_name(config.mode);
  summary["task"] = task_name(config.task);
  summary["seed"] = config.seed;
  summary["rounds_run"] = state.rounds_run;
  summary["early_stopped"] = state.early_stopped;
  summary["aggregation_rounds"] = aggregation_rounds;

  summary["clients"] = ordered_json::array();
  std::vector<double> small_acc, large_acc, small_dice, large_dice;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    ordered_json row;
    row["id"] = i;
    row["kind"] = kind_name(config.clients[i].kind);
    row["train_size"] = config.clients[i].train_size;
    row["test_size"] = config.clients[i].test_size;
    row["accuracy"] = state.final_accuracy[i];
    if (config.task == TaskKind::segmentation) {
      row["dice"] = state.final_dice[i];
    }
    row["upload_bytes_per_round"] =
        state.history.empty() ? 0 : state.history.back().rows[i].upload_bytes;
    summary["clients"].push_back(std::move(row));
    auto& acc_bucket =
        config.clients[i].kind == ClientKind::small ? small_acc : large_acc;
    acc_bucket.push_back(state.final_accuracy[i]);
    if (config.task == TaskKind::segmentation) {
      auto& dice_bucket =
          config.clients[i].kind == ClientKind::small ? small_dice : large_dice;
      dice_bucket.push_back(state.final_dice[i]);
    }
  }

  auto average_block = [&](const std::vector<double>& acc,
                           const std::vector<double>& dice) -> ordered_json {
    if (acc.empty()) return nullptr;
    ordered_json block;
    block["accuracy"] = mean_of(acc);
    if (config.task == TaskKind::segmentation) block["dice"] = mean_of(dice);
    return block;
  };
  summary["client_average"] =
      average_block(state.final_accuracy, state.final_dice);
  summary["small_average"] = average_block(small_acc, small_dice);
  summary["large_average"] = average_block(large_acc, large_dice);
  result.small_average = mean_of(small_acc);

  if (a.uses_oracles) {
    ordered_json oracle;
    oracle["num_apis"] = config.num_apis;
    oracle["public_size"] = config.public_size;
    oracle["evaluations_this_run"] = a.evaluations_this_run;
    oracle["total_evaluations"] = a.cache.total_evaluations();
    oracle["counters"] = ordered_json::object();
    for (const auto& [id, count] : a.cache.query_counter()) {
      oracle["counters"][id] = count;
    }
    summary["oracle"] = std::move(oracle);
  } else {
    summary["oracle"] = nullptr;
  }

  summary["artifacts"] = ordered_json::object();
  for (const char* artifact : {"metrics.csv", "config.json", "oracle_cache.fhoc"}) {
    const fs::path path = out / artifact;
    if (fs::exists(path)) {
      summary["artifacts"][artifact] = hex64(io::fnv1a64_file(path.string()));
    }
  }

  write_text_file((out / "summary.json").string(), summary.dump(2) + "\n");
  return result;
}

std::uint64_t warmup_only(const ExperimentConfig& config) {
  validate_config(config);
  if (config.num_apis == 0) return 0;
  Assembled a = assemble(config, /*need_private=*/false);
  return a.evaluations_this_run;
}

std::string compare_runs(const std::vector<std::string>& run_dirs) {
  if (run_dirs.size() < 2) {
    throw std::invalid_argument("compare: need at least two run directories");
  }
  struct Loaded {
    std::string name;
    json summary;
  };
  std::vector<Loaded> runs;
  for (const auto& dir : run_dirs) {
    const fs::path path = fs::path(dir) / "summary.json";
    std::ifstream in(path);
    if (!in) {
      throw std::runtime_error("compare: missing run summary: " + path.string());
    }
    Loaded loaded;
    fs::path clean = fs::path(dir).lexically_normal();
    // A trailing separator normalizes to a "." or empty filename; strip it.
    if (clean.filename() == "." || !clean.has_filename()) {
      clean = clean.parent_path();
    }
    loaded.name = clean.filename().string();
    if (loaded.name.empty()) loaded.name = dir;
    try {
      loaded.summary = json::parse(in);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("compare: unreadable summary in " + dir + ": " +
                               e.what());
    }
    runs.push_back(std::move(loaded));
  }

  const json& base_clients = runs.front().summary.at("clients");
  for (const auto& run : runs) {
    const json& clients = run.summary.at("clients");
    bool match = clients.size() == base_clients.size();
    for (std::size_t i = 0; match && i < clients.size(); ++i) {
      // Kinds may legitimately differ across modes (the homogeneous
      // baseline demotes every client), so plans match on sizes alone.
      match = clients[i].at("train_size") == base_clients[i].at("train_size") &&
              clients[i].at("test_size") == base_clients[i].at("test_size");
    }
    if (!match) {
      throw std::runtime_error("compare: client plan in " + run.name +
                               " does not match " + runs.front().name);
    }
  }

  const bool segmentation = runs.front().summary.at("task") == "segmentation";
  const char* metric = segmentation ? "dice" : "accuracy";
  auto client_metric = [&](const Loaded& run, std::size_t i) {
    return run.summary.at("clients")[i].at(metric).get<double>();
  };
  auto average_metric = [&](const Loaded& run) {
    return run.summary.at("client_average").at(metric).get<double>();
  };

  std::ostringstream csv;
  char buf[64];
  csv << "client_id,kind";
  for (const auto& run : runs) csv << "," << run.name;
  csv << ",improvement_pct\n";

  auto emit_row = [&](const std::string& id, const std::string& kind,
                      const std::vector<double>& values) {
    csv << id << "," << kind;
    for (double v : values) {
      std::snprintf(buf, sizeof(buf), "%.4f", v);
      csv << "," << buf;
    }
    const double candidate = values.front();
    const double best_rest = *std::max_element(values.begin() + 1, values.end());
    if (best_rest == 0.0) {
      csv << ",\n";
    } else {
      std::snprintf(buf, sizeof(buf), "%.2f",
                    100.0 * (candidate - best_rest) / best_rest);
      csv << "," << buf << "\n";
    }
  };

  for (std::size_t i = 0; i < base_clients.size(); ++i) {
    std::vector<double> values;
    values.reserve(runs.size());
    for (const auto& run : runs) values.push_back(client_metric(run, i));
    emit_row(std::to_string(i),
             base_clients[i].at("kind").get<std::string>(), values);
  }
  std::vector<double> averages;
  averages.reserve(runs.size());
  for (const auto& run : runs) averages.push_back(average_metric(run));
  emit_row("client_average", "all", averages);
  return csv.str();
}

int verify_invariants(const ExperimentConfig& config) {
  int failures = 0;
  auto check = [&](const char* name, bool ok, const std::string& detail = "") {
    if (ok) {
      std::cout << "ok   " << name << "\n";
    } else {
      ++failures;
      std::cout << "FAIL " << name;
      if (!detail.empty()) std::cout << ": " << detail;
      std::cout << "\n";
    }
  };
  auto guarded = [&](const char* name, auto&& body) {
    try {
      body();
    } catch (const std::exception& e) {
      check(name, false, e.what());
    }
  };

  guarded("config-round-trip", [&] {
    const ExperimentConfig reparsed = parse_config(config.to_json());
    check("config-round-trip", reparsed == config);
  });

  guarded("weight-map-values", [&] {
    WeightMapParams params;
    params.beta0 = 10.0;
    params.sigma = 5.0;
    params.class_balance = {0.0, 1.0};
    const double at_seam =
        weight_map({1}, {0.0}, {0.0}, params)[0];  // exp(0) term
    const double away =
        weight_map({1}, {4.0}, {6.0}, params)[0];  // exp(-100/50) term
    check("weight-map-values",
          at_seam == 11.0 && std::abs(away - (1.0 + 10.0 * std::exp(-2.0))) <
                                 1e-12);
  });

  guarded("ranking-ce-equivalence", [&] {
    Rng rng(hash_combine(config.seed, 0x76657269));
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> row(6);
      for (auto& v : row) v = rng.normal() * 3.0;
      const std::size_t top =
          std::max_element(row.begin(), row.end()) - row.begin();
      Graph g;
      Tensor logits = Tensor::from_data({1, 6}, row, true);
      const double rank = ranking_kd(g, logits, {{top}}).item();
      Graph g2;
      Tensor logits2 = Tensor::from_data({1, 6}, row, true);
      const double ce = cross_entropy(g2, logits2, {top}).item();
      worst = std::max(worst, std::abs(rank - ce));
    }
    check("ranking-ce-equivalence", worst <= 1e-12,
          "max deviation " + std::to_string(worst));
  });

  guarded("aggregation-weighted-mean", [&] {
    ParamLayout layout = {{"w", {1}}};
    ParamVector a{{1.0}, layout}, b{{3.0}, layout};
    const ParamVector mean = fedavg_aggregate({{a, 3}, {b, 1}});
    bool ok = mean.values[0] == 1.5;

    Rng rng(hash_combine(config.seed, 0x61676772));
    ParamLayout layout3 = {{"w", {4}}};
    std::vector<std::pair<ParamVector, std::uint64_t>> uploads;
    for (std::uint64_t c = 0; c < 3; ++c) {
      std::vector<double> values(4);
      for (auto& v : values) v = rng.normal();
      uploads.push_back({{values, layout3}, c + 1});
    }
    const ParamVector forward = fedavg_aggregate(uploads);
    std::swap(uploads[0], uploads[2]);
    const ParamVector reversed = fedavg_aggregate(uploads);
    for (std::size_t i = 0; i < 4; ++i) {
      ok = ok && std::abs(forward.values[i] - reversed.values[i]) < 1e-9;
    }
    check("aggregation-weighted-mean", ok);
  });

  guarded("mixture-normalization", [&] {
    Rng rng(hash_combine(config.seed, 0x6d697874));
    ApiMixture mixture = make_api_mixture(4, 3);
    for (auto& v : mixture.logits_alpha.mutable_data()) v = rng.normal() * 2.0;
    const std::vector<double> rows =
        softmax_rows(mixture.logits_alpha.data(), 3);
    bool ok = true;
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t m = 0; m < 3; ++m) sum += rows[r * 3 + m];
      ok = ok && std::abs(sum - 1.0) < 1e-12;
    }
    check("mixture-normalization", ok);
  });

  guarded("generator-determinism", [&] {
    const LabeledDataset first =
        make_classification(config.seed, 4, 8, 64, 1.0);
    const LabeledDataset second =
        make_classification(config.seed, 4, 8, 64, 1.0);
    check("generator-determinism",
          std::ranges::equal(first.features.data(), second.features.data()) &&
              first.labels == second.labels && first.ids == second.ids);
  });

  guarded("distance-transform-midpoint", [&] {
    // Two single-pixel components four steps apart; their midpoint is
    // equidistant from both borders.
    std::vector<int> mask = {1, 0, 0, 0, 1};
    const auto [d1, d2] = distance_transforms(mask, 1, 5);
    check("distance-transform-midpoint", d1[2] == 2.0 && d2[2] == 2.0);
  });

  guarded("distillation-teacher-stop", [&] {
    Rng rng(hash_combine(config.seed, 0x73746f70));
    std::vector<double> tv(8), sv(8);
    for (auto& v : tv) v = rng.normal();
    for (auto& v : sv) v = rng.normal();
    Graph g;
    Tensor teacher = Tensor::from_data({2, 4}, tv, true);
    Tensor student = Tensor::from_data({2, 4}, sv, true);
    g.backward(forward_kd(g, teacher, student));
    bool teacher_clean = teacher.grad().empty();
    for (double v : teacher.grad()) teacher_clean = teacher_clean && v == 0.0;
    bool student_touched = false;
    for (double v : student.grad()) student_touched = student_touched || v != 0.0;
    check("distillation-teacher-stop", teacher_clean && student_touched);
  });

  guarded("ranking-shift-invariance", [&] {
    Rng rng(hash_combine(config.seed, 0x73686674));
    std::vector<double> row(5);
    for (auto& v : row) v = rng.normal() * 2.0;
    std::vector<double> shifted = row;
    for (auto& v : shifted) v += 7.25;
    Graph g;
    const double base =
        ranking_kd(g, Tensor::from_data({1, 5}, row, true), {{1, 3}}).item();
    Graph g2;
    const double moved =
        ranking_kd(g2, Tensor::from_data({1, 5}, shifted, true), {{1, 3}})
            .item();
    check("ranking-shift-invariance", std::abs(base - moved) <= 1e-9);
  });

  guarded("oracle-cache-round-trip", [&] {
    const LabeledDataset pretrain =
        make_classification(hash_combine(config.seed, 0x63616368), 3, 8, 48,
                            1.0);
    const OracleModel oracle =
        make_classification_oracle("verify-api", config.seed, pretrain);
    const LabeledDataset served =
        make_public_set(config.seed, 3, 8, 0.2, 8, 1.0);
    OracleCache cache;
    const std::size_t evals =
        cache.warm_up({oracle}, served.features, served.ids);
    const std::size_t again =
        cache.warm_up({oracle}, served.features, served.ids);
    const fs::path path =
        fs::temp_directory_path() /
        ("fedhelp-verify-" + hex64(hash_combine(config.seed, 0x746d70)) +
         ".fhoc");
    cache.save(path.string());
    const OracleCache reloaded = OracleCache::load(path.string());
    fs::remove(path);
    const bool same_payload =
        reloaded.oracle_ids() == cache.oracle_ids() &&
        reloaded.query_counter() == cache.query_counter() &&
        std::ranges::equal(reloaded.get_distributions(served.ids).data(),
                           cache.get_distributions(served.ids).data());
    check("oracle-cache-round-trip",
          evals == served.size() && again == 0 && same_payload);
  });

  std::cout << "verify: 10 checks, " << failures << " failed\n";
  return failures;
}

}  // namespace fedhelp
