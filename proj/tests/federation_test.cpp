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

// Federation-loop tests: exact aggregation oracles, redistribution rules
// (which parameters the server may overwrite), upload accounting,
// parallel/serial equivalence, early stopping, and the metrics CSV format.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedhelp/data.hpp"
#include "fedhelp/federation.hpp"
#include "fedhelp/nn.hpp"

namespace fedhelp {
namespace {

ModelSpec mlp_spec(std::size_t dim, std::vector<std::size_t> hidden,
                   std::size_t classes) {
  ModelSpec spec;
  spec.kind = ModelSpec::Kind::mlp;
  spec.input_dim = dim;
  spec.hidden = std::move(hidden);
  spec.num_classes = classes;
  return spec;
}

ParamVector single_value_upload(double v) {
  ParamVector pv;
  pv.layout.push_back({"w", {1}});
  pv.values = {v};
  return pv;
}

// Zeroed parameters make every logit zero, so argmax ties resolve to class
// zero everywhere — an exactly predictable evaluator.
void zero_surrogate(SurrogateModel* model) {
  ParamVector pv = model->flatten_params();
  std::fill(pv.values.begin(), pv.values.end(), 0.0);
  model->load_params(pv);
}

// Three clients (two small, one large) over slices of one generated pool,
// plus a public slice. Deterministic in `seed`.
struct Assembly {
  std::vector<ClientHandle> clients;
  PublicData pub;
};

Assembly assemble(std::uint64_t seed) {
  Assembly a;
  const LabeledDataset pool =
      make_classification(seed, /*num_classes=*/3, /*dim=*/8, 260, 1.5);
  const ModelSpec small = mlp_spec(8, {8}, 3);
  const ModelSpec large = mlp_spec(8, {16, 16}, 3);

  ClientHandle c1 = make_small_client(1, TaskKind::classification, small,
                                      /*public_classes=*/3, /*public_size=*/60,
                                      /*num_apis=*/0, seed);
  c1.train = dataset_slice(pool, 0, 30);
  c1.test = dataset_slice(pool, 30, 15);
  ClientHandle c2 = make_small_client(2, TaskKind::classification, small, 3,
                                      60, 0, seed);
  c2.train = dataset_slice(pool, 45, 30);
  c2.test = dataset_slice(pool, 75, 15);
  ClientHandle c3 =
      make_large_client(3, TaskKind::classification, large, small, seed);
  c3.train = dataset_slice(pool, 90, 40);
  c3.test = dataset_slice(pool, 130, 15);

  a.clients.push_back(std::move(c1));
  a.clients.push_back(std::move(c2));
  a.clients.push_back(std::move(c3));
  a.pub.classification = dataset_slice(pool, 200, 60);
  return a;
}

FederationConfig tiny_config(std::uint64_t seed) {
  FederationConfig config;
  config.weights.lambda_r = 0.0;  // no oracles in these tests
  config.weights.lambda_j = 0.2;
  config.weights.lambda_f = 1.0;
  config.weights.lambda_b = 0.2;
  config.weights.omega_size = 1;
  config.local_epochs = 1;
  config.batch_size = 16;
  config.lr_small = 0.05;
  config.lr_large = 0.03;
  config.t_max = 3;
  config.patience = 10;
  config.epsilon = 1e-3;
  config.seed = seed;
  return config;
}

TEST_CASE("aggregation of a single upload is the identity") {
  ParamVector pv = single_value_upload(0.0);
  pv.layout = {{"w", {3}}};
  pv.values = {0.125, -7.75, 3.0};
  const ParamVector out = fedavg_aggregate({{pv, 7}});
  CHECK(out.values == pv.values);  // bitwise: w*v/w with one term
}

TEST_CASE("equal weights produce the exact mean") {
  ParamVector a = single_value_upload(0.0);
  a.layout = {{"w", {2}}};
  a.values = {0.0, 2.0};
  ParamVector b = a;
  b.values = {2.0, 4.0};
  const ParamVector out = fedavg_aggregate({{a, 1}, {b, 1}});
  CHECK(out.values == std::vector<double>{1.0, 3.0});
}

TEST_CASE("3:1 weighting of 1.0 and 3.0 yields exactly 1.5") {
  const ParamVector out = fedavg_aggregate(
      {{single_value_upload(1.0), 3}, {single_value_upload(3.0), 1}});
  REQUIRE(out.values.size() == 1);
  CHECK(out.values[0] == 1.5);
}

TEST_CASE("aggregation matches a hand-computed weighted mean bitwise") {
  const ModelSpec spec = mlp_spec(6, {5}, 3);
  const ParamVector a = build_classifier(spec, 1).flatten_params();
  const ParamVector b = build_classifier(spec, 2).flatten_params();

  const ParamVector out = fedavg_aggregate({{a, 2}, {b, 6}});
  REQUIRE(out.values.size() == a.values.size());
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    // Same accumulation order as the implementation: exact equality holds.
    const double expect = (2.0 * a.values[i] + 6.0 * b.values[i]) / 8.0;
    CHECK(out.values[i] == expect);
  }
}

TEST_CASE("client order changes the aggregate by less than 1e-9") {
  const ModelSpec spec = mlp_spec(6, {8}, 4);
  std::vector<std::pair<ParamVector, std::uint64_t>> uploads;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    uploads.emplace_back(build_classifier(spec, s).flatten_params(), s);
  }
  const ParamVector forward = fedavg_aggregate(uploads);
  std::reverse(uploads.begin(), uploads.end());
  const ParamVector backward = fedavg_aggregate(uploads);
  double max_delta = 0.0;
  for (std::size_t i = 0; i < forward.values.size(); ++i) {
    max_delta =
        std::max(max_delta, std::abs(forward.values[i] - backward.values[i]));
  }
  CHECK(max_delta < 1e-9);
}

TEST_CASE("aggregation rejects bad input") {
  CHECK_THROWS_AS(fedavg_aggregate({}), std::invalid_argument);
  CHECK_THROWS_AS(fedavg_aggregate({{single_value_upload(1.0), 0}}),
                  std::invalid_argument);
  ParamVector wide;
  wide.layout = {{"w", {2}}};
  wide.values = {1.0, 2.0};
  CHECK_THROWS_AS(fedavg_aggregate({{single_value_upload(1.0), 1}, {wide, 1}}),
                  std::invalid_argument);
}

TEST_CASE("client factories are deterministic and id-distinct") {
  const ModelSpec spec = mlp_spec(8, {8}, 3);
  const ClientHandle a =
      make_small_client(1, TaskKind::classification, spec, 3, 50, 2, 9);
  const ClientHandle b =
      make_small_client(1, TaskKind::classification, spec, 3, 50, 2, 9);
  const ClientHandle c =
      make_small_client(2, TaskKind::classification, spec, 3, 50, 2, 9);
  CHECK(a.kind == ClientKind::small);
  CHECK(a.id == 1);
  CHECK(a.mixture.num_apis() == 2);
  CHECK(a.surrogate.flatten_params().values ==
        b.surrogate.flatten_params().values);
  CHECK(a.surrogate.flatten_params().values !=
        c.surrogate.flatten_params().values);

  const ClientHandle d = make_large_client(3, TaskKind::classification,
                                           mlp_spec(8, {16}, 3), spec, 9);
  CHECK(d.kind == ClientKind::large);
  CHECK(d.large.flatten_params().values.size() >
        d.proxy.flatten_params().values.size());
}

TEST_CASE("a round with an aggregate equals load-then-train on trunk+private") {
  const ParamVector donor =
      build_surrogate(mlp_spec(8, {8}, 3), 3, 777).flatten_params();

  // Receiving the aggregate through the round...
  Assembly a = assemble(21);
  const FederationConfig config = tiny_config(21);
  TrainStats stats;
  const ParamVector via_round =
      small_client_round(a.clients[0], &donor, a.pub, config, 2, &stats);
  CHECK(stats.ce > 0.0);
  CHECK(stats.guidance > 0.0);
  CHECK(stats.fkd == 0.0);
  CHECK(stats.rkd == 0.0);

  // ...must match loading it by hand and training without one. This pins the
  // overwrite set (trunk + private head, nothing else) and its ordering
  // (before any optimizer step).
  Assembly b = assemble(21);
  b.clients[0].surrogate.load_params(donor);
  const ParamVector via_load =
      small_client_round(b.clients[0], nullptr, b.pub, config, 2, nullptr);
  CHECK(via_round.values == via_load.values);
  CHECK(flatten({a.clients[0].surrogate.public_head.weight,
                 a.clients[0].surrogate.public_head.bias},
                {"public_w", "public_b"})
            .values ==
        flatten({b.clients[0].surrogate.public_head.weight,
                 b.clients[0].surrogate.public_head.bias},
                {"public_w", "public_b"})
            .values);

  // Without an aggregate the donor must leave no trace at all.
  Assembly c = assemble(21);
  const ParamVector no_global =
      small_client_round(c.clients[0], nullptr, c.pub, config, 2, nullptr);
  CHECK(no_global.values != via_round.values);
}

TEST_CASE("a round with an aggregate loads it into the proxy only") {
  const ParamVector donor =
      build_classifier(mlp_spec(8, {8}, 3), 555).flatten_params();

  Assembly a = assemble(22);
  const FederationConfig config = tiny_config(22);
  TrainStats stats;
  const ParamVector via_round =
      large_client_round(a.clients[2], &donor, config, 2, &stats);
  CHECK(stats.ce > 0.0);
  CHECK(stats.guidance == 0.0);
  CHECK(stats.fkd > 0.0);
  CHECK(stats.rkd > 0.0);

  // Equivalent to writing the aggregate into the proxy by hand: the large
  // model sees the server only through distillation, never as a parameter
  // overwrite.
  Assembly b = assemble(22);
  b.clients[2].proxy.load_params(donor);
  const ParamVector via_load =
      large_client_round(b.clients[2], nullptr, config, 2, nullptr);
  CHECK(via_round.values == via_load.values);
  CHECK(a.clients[2].large.flatten_params().values ==
        b.clients[2].large.flatten_params().values);

  Assembly c = assemble(22);
  const ParamVector no_global =
      large_client_round(c.clients[2], nullptr, config, 2, nullptr);
  CHECK(no_global.values != via_round.values);
}

TEST_CASE("parallel and serial execution are bit-identical") {
  FederationState serial, parallel;
  {
    Assembly a = assemble(30);
    FederationConfig config = tiny_config(30);
    config.parallel = false;
    serial = run_federation(a.clients, a.pub, config);
  }
  {
    Assembly a = assemble(30);
    FederationConfig config = tiny_config(30);
    config.parallel = true;
    parallel = run_federation(a.clients, a.pub, config);
  }

  REQUIRE(serial.history.size() == parallel.history.size());
  for (std::size_t r = 0; r < serial.history.size(); ++r) {
    const RoundReport& s = serial.history[r];
    const RoundReport& p = parallel.history[r];
    CHECK(s.aggregation_checksum == p.aggregation_checksum);
    CHECK(s.aggregation_checksum != 0);
    REQUIRE(s.rows.size() == p.rows.size());
    for (std::size_t k = 0; k < s.rows.size(); ++k) {
      CHECK(s.rows[k].losses.ce == p.rows[k].losses.ce);
      CHECK(s.rows[k].losses.guidance == p.rows[k].losses.guidance);
      CHECK(s.rows[k].losses.fkd == p.rows[k].losses.fkd);
      CHECK(s.rows[k].losses.rkd == p.rows[k].losses.rkd);
      CHECK(s.rows[k].eval.accuracy == p.rows[k].eval.accuracy);
    }
  }
  CHECK(serial.final_accuracy == parallel.final_accuracy);
  CHECK(serial.global.values == parallel.global.values);

  // The same equivalence, at the artifact level.
  write_metrics_csv("/tmp/fedhelp_fed_serial.csv", serial.history);
  write_metrics_csv("/tmp/fedhelp_fed_parallel.csv", parallel.history);
  std::ifstream fs("/tmp/fedhelp_fed_serial.csv");
  std::ifstream fp("/tmp/fedhelp_fed_parallel.csv");
  std::stringstream bs, bp;
  bs << fs.rdbuf();
  bp << fp.rdbuf();
  CHECK(bs.str() == bp.str());
  CHECK(!bs.str().empty());
  std::remove("/tmp/fedhelp_fed_serial.csv");
  std::remove("/tmp/fedhelp_fed_parallel.csv");
}

TEST_CASE("stagnant accuracy stops the run after `patience` rounds") {
  Assembly a = assemble(31);
  FederationConfig config = tiny_config(31);
  config.epsilon = 10.0;  // accuracy can never improve by this much
  config.patience = 2;
  config.t_max = 50;
  const FederationState state = run_federation(a.clients, a.pub, config);
  // Round 1 always beats the -inf starting point; every later round is
  // stagnant, so the loop runs 1 + patience rounds.
  CHECK(state.rounds_run == 3);
  CHECK(state.early_stopped);
  CHECK(state.history.size() == 3);
}

TEST_CASE("reported accuracy averages the last ten evaluated rounds") {
  Assembly a = assemble(32);
  FederationConfig config = tiny_config(32);
  config.t_max = 12;
  config.patience = 50;
  const FederationState state = run_federation(a.clients, a.pub, config);
  CHECK(state.rounds_run == 12);
  CHECK_FALSE(state.early_stopped);
  REQUIRE(state.final_accuracy.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    double mean = 0.0;
    for (std::size_t r = 2; r < 12; ++r) {
      mean += state.history[r].rows[k].eval.accuracy;
    }
    mean /= 10.0;
    CHECK(state.final_accuracy[k] == mean);
  }
}

TEST_CASE("upload accounting reports eight bytes per uploaded parameter") {
  const ModelSpec small = mlp_spec(8, {8}, 3);
  const ModelSpec large = mlp_spec(8, {16, 16}, 3);
  const std::size_t small_upload =
      build_surrogate(small, 3, 1).flatten_params().values.size();
  const std::size_t proxy_upload =
      build_classifier(small, 1).flatten_params().values.size();

  Assembly a = assemble(33);
  const FederationConfig config = tiny_config(33);
  const FederationState state = run_federation(a.clients, a.pub, config);
  for (const auto& report : state.history) {
    CHECK(report.rows[0].upload_bytes == small_upload * 8);
    CHECK(report.rows[1].upload_bytes == small_upload * 8);
    CHECK(report.rows[2].upload_bytes == proxy_upload * 8);
  }
  CHECK(proxy_upload * 8 <
        build_classifier(large, 1).flatten_params().values.size() * 8);
}

TEST_CASE("isolated local training uploads nothing and never aggregates") {
  Assembly a = assemble(34);
  FederationConfig config = tiny_config(34);
  config.aggregate = false;
  config.weights.lambda_j = 0.0;
  config.weights.lambda_f = 0.0;
  config.weights.lambda_b = 0.0;
  const FederationState state = run_federation(a.clients, a.pub, config);
  for (const auto& report : state.history) {
    CHECK(report.aggregation_checksum == 0);
    for (const auto& row : report.rows) CHECK(row.upload_bytes == 0);
  }
  CHECK(state.global.values.empty());
}

TEST_CASE("round-1 aggregates are the weighted mean of replayed uploads") {
  // Replay every client's first round by hand and fold the uploads with
  // fedavg_aggregate; the loop's first aggregate must match bitwise, under
  // both weighting rules.
  FederationConfig config = tiny_config(35);
  config.t_max = 1;

  Assembly replay = assemble(35);
  const ParamVector u1 = small_client_round(replay.clients[0], nullptr,
                                            replay.pub, config, 1, nullptr);
  const ParamVector u2 = small_client_round(replay.clients[1], nullptr,
                                            replay.pub, config, 1, nullptr);
  const ParamVector u3 =
      large_client_round(replay.clients[2], nullptr, config, 1, nullptr);

  Assembly sized = assemble(35);
  const FederationState by_size = run_federation(sized.clients, sized.pub, config);
  const ParamVector size_expect =
      fedavg_aggregate({{u1, 30}, {u2, 30}, {u3, 40}});
  CHECK(by_size.global.values == size_expect.values);

  Assembly uniform = assemble(35);
  config.uniform_weights = true;
  const FederationState as_equals =
      run_federation(uniform.clients, uniform.pub, config);
  const ParamVector uniform_expect =
      fedavg_aggregate({{u1, 1}, {u2, 1}, {u3, 1}});
  CHECK(as_equals.global.values == uniform_expect.values);
  CHECK(as_equals.global.values != size_expect.values);
}

TEST_CASE("evaluation uses the private head and the large model") {
  Assembly a = assemble(36);
  // Zeroed parameters predict class 0 for every row (argmax tie rule), so
  // accuracy equals the label-0 share of the test set.
  zero_surrogate(&a.clients[0].surrogate);
  const EvalMetrics small = evaluate_client(a.clients[0]);
  double zeros = 0.0;
  for (std::size_t y : a.clients[0].test.labels) zeros += y == 0;
  CHECK(small.accuracy == zeros / 15.0);
  CHECK(small.dice < 0.0);  // classification rows carry no dice

  ParamVector pv = a.clients[2].large.flatten_params();
  std::fill(pv.values.begin(), pv.values.end(), 0.0);
  a.clients[2].large.load_params(pv);
  const EvalMetrics large = evaluate_client(a.clients[2]);
  zeros = 0.0;
  for (std::size_t y : a.clients[2].test.labels) zeros += y == 0;
  CHECK(large.accuracy == zeros / 15.0);
}

TEST_CASE("dice scores an empty-empty pair as a perfect match") {
  ModelSpec spec;
  spec.kind = ModelSpec::Kind::conv_pixel;
  spec.input_dim = 1;
  spec.hidden = {4};
  spec.kernel_size = 3;
  spec.num_classes = 2;
  ClientHandle client = make_small_client(1, TaskKind::segmentation, spec,
                                          /*public_classes=*/2, 0, 0, 40);
  zero_surrogate(&client.surrogate);  // every pixel predicted background

  client.seg_test = make_segmentation(41, 2, 6, 6);
  client.seg_test.masks[0].assign(36, 0);  // empty truth, empty prediction
  client.seg_test.masks[1].assign(36, 1);  // full truth, empty prediction

  const EvalMetrics m = evaluate_client(client);
  CHECK(m.dice == 0.5);      // (1.0 + 0.0) / 2
  CHECK(m.accuracy == 0.5);  // first grid all correct, second all wrong
}

TEST_CASE("the loop validates clients before training") {
  Assembly a = assemble(37);
  const FederationConfig config = tiny_config(37);

  std::vector<ClientHandle> none;
  CHECK_THROWS_AS(run_federation(none, a.pub, config), std::invalid_argument);

  std::swap(a.clients[0], a.clients[1]);  // descending ids
  CHECK_THROWS_AS(run_federation(a.clients, a.pub, config),
                  std::invalid_argument);
  std::swap(a.clients[0], a.clients[1]);

  a.clients[1].train = LabeledDataset{};
  CHECK_THROWS_WITH_AS(run_federation(a.clients, a.pub, config),
                       doctest::Contains("client 2"), std::runtime_error);

  FederationConfig bad = config;
  bad.weights.lambda_f = -1.0;
  Assembly fresh = assemble(37);
  CHECK_THROWS_AS(run_federation(fresh.clients, fresh.pub, bad),
                  std::invalid_argument);
}

TEST_CASE("metrics CSV is stable, explicit, and fully parseable") {
  RoundReport report;
  report.round = 1;
  ClientRoundRow small;
  small.round = 1;
  small.client_id = 4;
  small.kind = ClientKind::small;
  small.losses = {0.5, 0.25, 0.0, 0.0};
  small.eval.accuracy = 0.75;  // classification: dice stays -1
  ClientRoundRow large;
  large.round = 1;
  large.client_id = 7;
  large.kind = ClientKind::large;
  large.losses = {1.0, 0.0, 0.125, 2.0};
  large.eval.accuracy = 0.5;
  large.eval.dice = 0.625;
  report.rows = {small, large};

  const std::string path = "/tmp/fedhelp_fed_metrics.csv";
  write_metrics_csv(path, {report});
  std::ifstream is(path);
  std::stringstream buf;
  buf << is.rdbuf();
  CHECK(buf.str() ==
        "round,client_id,kind,loss_ce,loss_guidance,loss_fkd,loss_rkd,acc,dice\n"
        "1,4,small,0.5,0.25,0,0,0.75,\n"
        "1,7,large,1,0,0.125,2,0.5,0.625\n");
  std::remove(path.c_str());

  CHECK_THROWS_AS(write_metrics_csv("/nonexistent-dir/metrics.csv", {report}),
                  std::runtime_error);
}

}  // namespace
}  // namespace fedhelp
