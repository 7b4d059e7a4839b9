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

// Model-zoo suite: spec-driven shapes and hand-counted parameter totals,
// seeded initialization determinism, the flatten/load round trip, the
// surrogate upload contract (public head never leaves the client), and the
// checkpoint file format.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <vector>

#include "fedhelp/nn.hpp"
#include "fedhelp/rng.hpp"
#include "fedhelp/tensor.hpp"
#include "test_support.hpp"

using namespace fedhelp;
using fedhelp::testing::random_tensor;

namespace {

ModelSpec mlp_spec(std::vector<std::size_t> hidden, std::size_t input_dim = 32,
                   std::size_t classes = 8) {
  ModelSpec spec;
  spec.kind = ModelSpec::Kind::mlp;
  spec.input_dim = input_dim;
  spec.hidden = std::move(hidden);
  spec.num_classes = classes;
  return spec;
}

ModelSpec conv_spec(std::vector<std::size_t> channels, std::size_t classes = 2,
                    std::size_t kernel = 3) {
  ModelSpec spec;
  spec.kind = ModelSpec::Kind::conv_pixel;
  spec.input_dim = 1;
  spec.hidden = std::move(channels);
  spec.kernel_size = kernel;
  spec.num_classes = classes;
  return spec;
}

}  // namespace

TEST_CASE("parameter counts match hand arithmetic") {
  // 32->64 dense (32*64+64) + 64->64 dense (64*64+64) + 64->8 head (64*8+8).
  CHECK(mlp_spec({64, 64}).param_count() == 2112 + 4160 + 520);
  // 3x3x1->8 conv (72+8) + 3x3x8->8 conv (576+8) + 8->2 head (16+2).
  CHECK(conv_spec({8, 8}).param_count() == 80 + 584 + 18);

  ClassifierModel mlp = build_classifier(mlp_spec({64, 64}), 1);
  CHECK(mlp.flatten_params().size() == mlp_spec({64, 64}).param_count());
  ClassifierModel conv = build_classifier(conv_spec({8, 8}), 1);
  CHECK(conv.flatten_params().size() == conv_spec({8, 8}).param_count());
}

TEST_CASE("spec validation rejects malformed architectures") {
  CHECK_THROWS_AS(mlp_spec({64}, 0).validate(), std::invalid_argument);
  CHECK_THROWS_AS(mlp_spec({}, 32).validate(), std::invalid_argument);
  CHECK_THROWS_AS(mlp_spec({64}, 32, 1).validate(), std::invalid_argument);
  CHECK_THROWS_AS(conv_spec({8}, 2, 4).validate(), std::invalid_argument);
  CHECK_NOTHROW(mlp_spec({64}).validate());
  CHECK_NOTHROW(conv_spec({8}).validate());
  CHECK(mlp_spec({48, 24}).feature_dim() == 24);
}

TEST_CASE("same spec and seed build bit-identical parameters") {
  ModelSpec spec = mlp_spec({16, 16}, 8, 4);
  ParamVector a = build_classifier(spec, 42).flatten_params();
  ParamVector b = build_classifier(spec, 42).flatten_params();
  CHECK(a.values == b.values);
  CHECK(a.layout == b.layout);

  ParamVector c = build_classifier(spec, 43).flatten_params();
  CHECK(a.values != c.values);
}

TEST_CASE("initialization stays inside the fan-in bounds") {
  ModelSpec spec = mlp_spec({16}, 64, 4);
  ClassifierModel model = build_classifier(spec, 5);
  // First dense layer: fan-in 64 -> |w| < sqrt(6/64).
  auto params = model.params();
  const double bound = std::sqrt(6.0 / 64.0);
  bool any_nonzero = false;
  for (double w : params[0].data()) {
    CHECK(std::abs(w) < bound);
    any_nonzero = any_nonzero || w != 0.0;
  }
  CHECK(any_nonzero);
}

TEST_CASE("flatten and load round-trip reproduces the forward function") {
  ModelSpec spec = mlp_spec({12, 10}, 6, 5);
  ClassifierModel a = build_classifier(spec, 7);
  ClassifierModel b = build_classifier(spec, 8);  // different start

  ParamVector snapshot = a.flatten_params();
  b.load_params(snapshot);

  Rng rng(9);
  Tensor batch = random_tensor(rng, {4, 6}, -2.0, 2.0);
  Graph ga, gb;
  Tensor la = a.forward_logits(ga, batch);
  Tensor lb = b.forward_logits(gb, batch);
  CHECK(std::equal(la.data().begin(), la.data().end(), lb.data().begin()));

  // Layout mismatches are rejected rather than silently misassigned.
  ClassifierModel other = build_classifier(mlp_spec({12, 11}, 6, 5), 7);
  CHECK_THROWS_AS(other.load_params(snapshot), std::invalid_argument);
}

TEST_CASE("two models from equal specs share a flattened layout") {
  ModelSpec spec = mlp_spec({24, 16}, 10, 3);
  ParamVector a = build_classifier(spec, 1).flatten_params();
  ParamVector b = build_classifier(spec, 99).flatten_params();
  CHECK(a.layout_matches(b));

  std::set<std::string> names;
  for (const auto& entry : a.layout) {
    CHECK(names.insert(entry.name).second);  // every slot appears exactly once
  }
}

TEST_CASE("surrogate uploads exclude the public head") {
  ModelSpec spec = mlp_spec({20, 20}, 16, 4);
  SurrogateModel surrogate = build_surrogate(spec, 10, 3);

  CHECK(surrogate.params().size() == surrogate.upload_params().size() + 2);
  CHECK(surrogate.flatten_params().size() == spec.param_count());

  // The upload layout must be interchangeable with a plain classifier of
  // the same spec: that is what the server aggregates and redistributes.
  ClassifierModel proxy = build_classifier(spec, 4);
  CHECK(surrogate.flatten_params().layout_matches(proxy.flatten_params()));

  // Loading the aggregate must leave the public head untouched.
  std::vector<double> public_before(surrogate.public_head.weight.data().begin(),
                                    surrogate.public_head.weight.data().end());
  surrogate.load_params(proxy.flatten_params());
  CHECK(std::equal(public_before.begin(), public_before.end(),
                   surrogate.public_head.weight.data().begin()));
  // ... while the trunk+private function now matches the donor model.
  Rng rng(11);
  Tensor batch = random_tensor(rng, {3, 16}, -1.0, 1.0);
  Graph ga, gb;
  Tensor ls = surrogate.forward_private_logits(ga, batch);
  Tensor lp = proxy.forward_logits(gb, batch);
  CHECK(std::equal(ls.data().begin(), ls.data().end(), lp.data().begin()));
}

TEST_CASE("surrogate heads consume the same trunk features") {
  ModelSpec spec = mlp_spec({8}, 6, 3);
  SurrogateModel surrogate = build_surrogate(spec, 5, 13);
  CHECK(surrogate.private_head.num_classes() == 3);
  CHECK(surrogate.public_head.num_classes() == 5);
  CHECK(surrogate.trunk.output_dim() == 8);

  Rng rng(14);
  Tensor batch = random_tensor(rng, {2, 6}, -1.0, 1.0);
  Graph g;
  Tensor priv = surrogate.forward_private_logits(g, batch);
  Tensor pub = surrogate.forward_public_logits(g, batch);
  CHECK(priv.shape() == Shape{2, 3});
  CHECK(pub.shape() == Shape{2, 5});
}

TEST_CASE("mlp forward shapes and gradient flow through all parameters") {
  ModelSpec spec = mlp_spec({10, 6}, 4, 3);
  ClassifierModel model = build_classifier(spec, 21);
  Rng rng(22);
  Tensor batch = random_tensor(rng, {5, 4}, -1.0, 1.0);

  Graph g;
  Tensor logits = model.forward_logits(g, batch);
  REQUIRE(logits.shape() == Shape{5, 3});
  g.backward(g.mean(logits));
  for (const auto& p : model.params()) {
    CHECK(p.requires_grad());
    CHECK_FALSE(p.grad().empty());
  }
}

TEST_CASE("conv trunk emits per-pixel logits in both layouts") {
  ModelSpec spec = conv_spec({4, 4});
  ClassifierModel model = build_classifier(spec, 31);
  Rng rng(32);
  Tensor image = random_tensor(rng, {2, 5, 5, 1}, -1.0, 1.0);

  Graph g;
  Tensor rows = model.forward_logits(g, image);
  REQUIRE(rows.shape() == Shape{2 * 5 * 5, 2});
  Tensor pixels = model.forward_pixel_logits(g, image);
  REQUIRE(pixels.shape() == Shape{2, 5, 5, 2});
  CHECK(std::equal(rows.data().begin(), rows.data().end(),
                   pixels.data().begin()));
}

TEST_CASE("layout json round-trips") {
  ParamLayout layout = build_classifier(mlp_spec({7}, 5, 2), 1)
                           .flatten_params()
                           .layout;
  ParamLayout back = layout_from_json(layout_to_json(layout));
  CHECK(back == layout);
}

TEST_CASE("checkpoint files round-trip bit-exactly and reject corruption") {
  ModelSpec spec = mlp_spec({9, 5}, 4, 3);
  ParamVector pv = build_classifier(spec, 17).flatten_params();
  const std::string path = "test_checkpoint_roundtrip.fhck";
  save_checkpoint(path, pv);
  ParamVector back = load_checkpoint(path);
  CHECK(back.values == pv.values);
  CHECK(back.layout == pv.layout);

  // Truncate the file: the loader must throw, not fabricate parameters.
  {
    FILE* f = std::fopen(path.c_str(), "rb+");
    REQUIRE(f != nullptr);
    std::fseek(f, 0, SEEK_END);
    long size = std::ftell(f);
    (void)size;
    REQUIRE(std::freopen(path.c_str(), "wb", f) != nullptr);
    std::fputs("FHCKgarbage", f);
    std::fclose(f);
  }
  CHECK_THROWS(load_checkpoint(path));
  std::remove(path.c_str());
  CHECK_THROWS(load_checkpoint("missing_checkpoint.fhck"));
}
