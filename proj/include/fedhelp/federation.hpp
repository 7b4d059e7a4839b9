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

// Federated training loop: per-round local updates on every client
// (cross-silo full participation), upload of the homogeneous
// surrogate/proxy vectors, size-weighted averaging, redistribution, and
// early stopping on the mean client accuracy.
//
// Client rounds are independent between the round-start broadcast and the
// aggregation barrier, so they may run concurrently; every client draws
// from its own seeded stream and aggregation consumes uploads in ascending
// client-id order, which makes parallel and serial execution bit-identical.

#ifndef FEDHELP_FEDERATION_HPP_
#define FEDHELP_FEDERATION_HPP_

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fedhelp/data.hpp"
#include "fedhelp/losses.hpp"
#include "fedhelp/nn.hpp"
#include "fedhelp/optim.hpp"
#include "fedhelp/oracle.hpp"

namespace fedhelp {

enum class ClientKind { small, large };
enum class TaskKind { classification, segmentation };

// Knobs the training loop needs; mode-to-flag mapping happens upstream in
// the experiment runner.
struct FederationConfig {
  TaskKind task = TaskKind::classification;
  LossWeights weights;
  bool aggregate = true;          // false = isolated local training
  bool uniform_weights = false;   // average uploads uniformly, not by size
  bool symmetric_backward = false;  // replace ranking KD with reverse KL
  std::size_t local_epochs = 2;
  std::size_t batch_size = 32;
  double lr_small = 0.05;
  double lr_large = 0.01;
  double momentum = 0.9;
  std::size_t t_max = 100;
  std::size_t patience = 10;
  double epsilon = 1e-3;
  std::uint64_t seed = 0;
  bool parallel = true;
};

// One federation participant. Small clients hold a surrogate (shared trunk,
// private head, public guidance head) plus their mixture scores; large
// clients hold the big private model and the small proxy that is the only
// thing they ever upload.
struct ClientHandle {
  std::size_t id = 0;
  ClientKind kind = ClientKind::small;
  TaskKind task = TaskKind::classification;

  LabeledDataset train;
  LabeledDataset test;
  SegDataset seg_train;
  SegDataset seg_test;

  SurrogateModel surrogate;   // small only
  ClassifierModel large;      // large only
  ClassifierModel proxy;      // large only
  ApiMixture mixture;         // small only, persists across rounds

  std::unique_ptr<SgdMomentum> optimizer;

  std::size_t train_size() const {
    return task == TaskKind::classification ? train.size() : seg_train.size();
  }
};

ClientHandle make_small_client(std::size_t id, TaskKind task,
                               const ModelSpec& spec,
                               std::size_t public_classes,
                               std::size_t public_size, std::size_t num_apis,
                               std::uint64_t seed);
ClientHandle make_large_client(std::size_t id, TaskKind task,
                               const ModelSpec& large_spec,
                               const ModelSpec& proxy_spec,
                               std::uint64_t seed);

// Shared read-only public data plus the warmed oracle cache (null when the
// run uses no oracles).
struct PublicData {
  LabeledDataset classification;
  SegDataset segmentation;
  std::vector<std::uint64_t> segmentation_ids;
  const OracleCache* cache = nullptr;

  std::size_t size(TaskKind task) const {
    return task == TaskKind::classification ? classification.size()
                                            : segmentation.size();
  }
};

// Mean loss components over a round's optimizer steps.
struct TrainStats {
  double ce = 0.0;
  double guidance = 0.0;
  double fkd = 0.0;
  double rkd = 0.0;
};

struct EvalMetrics {
  double accuracy = 0.0;
  double dice = -1.0;  // negative = not a segmentation run
};

struct ClientRoundRow {
  std::size_t round = 0;
  std::size_t client_id = 0;
  ClientKind kind = ClientKind::small;
  TrainStats losses;
  EvalMetrics eval;
  std::size_t upload_bytes = 0;
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<ClientRoundRow> rows;  // ascending client id
  std::uint64_t aggregation_checksum = 0;  // 0 when nothing was aggregated
  double mean_accuracy = 0.0;
};

struct FederationState {
  std::size_t rounds_run = 0;
  bool early_stopped = false;
  ParamVector global;  // last aggregate; empty layout when never aggregated
  std::vector<RoundReport> history;
  // Per-client means over the last (up to) 10 evaluated rounds.
  std::vector<double> final_accuracy;
  std::vector<double> final_dice;  // empty for classification runs
};

// One local-update pass for a small client: optional overwrite of the
// trunk+private-head from the previous aggregate (rounds after the first),
// then `local_epochs` epochs pairing one private minibatch with one public
// minibatch per combined step. Returns the upload (trunk + private head).
ParamVector small_client_round(ClientHandle& client, const ParamVector* global,
                               const PublicData& pub,
                               const FederationConfig& config,
                               std::size_t round, TrainStats* stats);

// Large-client counterpart: the aggregate overwrites only the proxy (the
// large model is never server-written); local steps minimize the combined
// private CE + forward KD + ranking KD with the distillation gradient
// stops, updating large and proxy parameters together. Returns the proxy
// upload.
ParamVector large_client_round(ClientHandle& client, const ParamVector* global,
                               const FederationConfig& config,
                               std::size_t round, TrainStats* stats);

// Element-wise weighted mean of identically laid-out vectors, summed in the
// given order. Weights must be positive.
ParamVector fedavg_aggregate(
    const std::vector<std::pair<ParamVector, std::uint64_t>>& uploads);

// Accuracy (and Dice for segmentation) of a client's reporting model
// (surrogate private head for small clients, the large model for large
// ones) over its test set.
EvalMetrics evaluate_client(const ClientHandle& client);

// Full training loop over `clients` (mutated in place).
FederationState run_federation(std::vector<ClientHandle>& clients,
                               const PublicData& pub,
                               const FederationConfig& config);

// Per-round per-client metrics in CSV form:
// round,client_id,kind,loss_ce,loss_guidance,loss_fkd,loss_rkd,acc,dice
void write_metrics_csv(const std::string& path,
                       const std::vector<RoundReport>& history);

}  // namespace fedhelp

#endif  // FEDHELP_FEDERATION_HPP_
