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

#include "fedhelp/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "fedhelp/losses.hpp"
#include "fedhelp/optim.hpp"
#include "fedhelp/rng.hpp"
#include "fedhelp/serialize.hpp"

namespace fedhelp {

namespace {

constexpr std::uint64_t kOracleTrainStream = 0x6f726163;  // shuffle stream

}  // namespace

std::vector<std::vector<double>> OracleModel::evaluate(
    const Tensor& batch) const {
  Graph g;
  // For conv models forward_logits yields per-pixel rows; the row softmax
  // below then produces H*W concatenated binary distributions per image.
  Tensor logits = model.forward_logits(g, batch);
  const std::vector<double> probs =
      softmax_rows(logits.data(), model.spec.num_classes);
  const std::size_t b = batch.shape()[0];
  std::vector<std::vector<double>> out(b);
  const std::size_t per_datum = probs.size() / b;
  if (per_datum != values_per_datum) {
    throw std::logic_error("OracleModel: output width drifted");
  }
  for (std::size_t i = 0; i < b; ++i) {
    out[i].assign(probs.begin() + static_cast<std::ptrdiff_t>(i * per_datum),
                  probs.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_datum));
  }
  return out;
}

OracleModel make_classification_oracle(const std::string& id,
                                       std::uint64_t seed,
                                       const LabeledDataset& pretrain) {
  if (pretrain.size() == 0) {
    throw std::invalid_argument("make_classification_oracle: empty shard");
  }
  ModelSpec spec;
  spec.kind = ModelSpec::Kind::mlp;
  spec.input_dim = pretrain.feature_dim();
  spec.hidden = {128, 128};
  spec.num_classes = pretrain.num_classes;

  OracleModel oracle;
  oracle.id = id;
  oracle.model = build_classifier(spec, seed);
  oracle.values_per_datum = spec.num_classes;

  SgdMomentum opt(0.05, 0.9);
  Rng rng(hash_combine(seed, kOracleTrainStream));
  const auto params = oracle.model.params();
  constexpr std::size_t kEpochs = 30, kBatch = 64;
  for (std::size_t epoch = 0; epoch < kEpochs; ++epoch) {
    for (const auto& batch : epoch_batches(pretrain.size(), kBatch, rng)) {
      Graph g;
      Tensor x = rows_subset(pretrain.features, batch);
      std::vector<std::size_t> y;
      y.reserve(batch.size());
      for (auto i : batch) y.push_back(pretrain.labels[i]);
      Tensor loss = cross_entropy(g, oracle.model.forward_logits(g, x), y);
      SgdMomentum::zero_grad(params);
      g.backward(loss);
      opt.step(params);
    }
  }
  return oracle;
}

OracleModel make_segmentation_oracle(const std::string& id, std::uint64_t seed,
                                     const SegDataset& pretrain) {
  if (pretrain.size() == 0) {
    throw std::invalid_argument("make_segmentation_oracle: empty shard");
  }
  ModelSpec spec;
  spec.kind = ModelSpec::Kind::conv_pixel;
  spec.input_dim = 1;
  spec.hidden = {16, 16};
  spec.kernel_size = 3;
  spec.num_classes = 2;

  OracleModel oracle;
  oracle.id = id;
  oracle.model = build_classifier(spec, seed);
  oracle.values_per_datum = pretrain.height * pretrain.width * 2;

  SgdMomentum opt(0.05, 0.9);
  Rng rng(hash_combine(seed, kOracleTrainStream));
  const auto params = oracle.model.params();
  constexpr std::size_t kEpochs = 20, kBatch = 8;
  for (std::size_t epoch = 0; epoch < kEpochs; ++epoch) {
    for (const auto& batch : epoch_batches(pretrain.size(), kBatch, rng)) {
      Graph g;
      Tensor x = rows_subset(pretrain.images, batch);
      std::vector<std::size_t> mask;
      std::vector<double> beta;
      for (auto i : batch) {
        for (int v : pretrain.masks[i]) mask.push_back(static_cast<std::size_t>(v));
        beta.insert(beta.end(), pretrain.beta[i].begin(), pretrain.beta[i].end());
      }
      Tensor logits = oracle.model.forward_pixel_logits(g, x);
      Tensor loss = weighted_pixel_ce(g, logits, mask, beta);
      SgdMomentum::zero_grad(params);
      g.backward(loss);
      opt.step(params);
    }
  }
  return oracle;
}

std::size_t OracleCache::warm_up(const std::vector<OracleModel>& oracles,
                                 const Tensor& public_features,
                                 const std::vector<std::uint64_t>& datum_ids) {
  if (oracles.empty()) {
    throw std::invalid_argument("warm_up: no oracles");
  }
  if (!public_features.defined() ||
      public_features.shape()[0] != datum_ids.size()) {
    throw std::invalid_argument("warm_up: one id per public datum required");
  }
  for (const auto& o : oracles) {
    if (o.values_per_datum != oracles.front().values_per_datum) {
      throw std::invalid_argument(
          "warm_up: oracle output width mismatch between '" +
          oracles.front().id + "' and '" + o.id + "'");
    }
  }
  if (oracle_ids_.empty()) {
    for (const auto& o : oracles) {
      oracle_ids_.push_back(o.id);
      counters_.emplace(o.id, 0);
    }
    values_per_datum_ = oracles.front().values_per_datum;
  } else {
    std::vector<std::string> ids;
    for (const auto& o : oracles) ids.push_back(o.id);
    if (ids != oracle_ids_ ||
        oracles.front().values_per_datum != values_per_datum_) {
      throw std::invalid_argument(
          "warm_up: oracle set differs from the warmed cache");
    }
  }

  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < datum_ids.size(); ++i) {
    if (entries_.find(datum_ids[i]) == entries_.end()) missing.push_back(i);
  }
  if (missing.empty()) return 0;

  for (std::size_t i : missing) {
    entries_[datum_ids[i]].assign(oracles.size() * values_per_datum_, 0.0);
  }
  constexpr std::size_t kChunk = 256;
  std::size_t evaluations = 0;
  for (std::size_t start = 0; start < missing.size(); start += kChunk) {
    const std::vector<std::size_t> chunk(
        missing.begin() + static_cast<std::ptrdiff_t>(start),
        missing.begin() +
            static_cast<std::ptrdiff_t>(std::min(missing.size(), start + kChunk)));
    Tensor rows = rows_subset(public_features, chunk);
    for (std::size_t m = 0; m < oracles.size(); ++m) {
      auto dists = oracles[m].evaluate(rows);
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        auto& slot = entries_[datum_ids[chunk[i]]];
        std::copy(dists[i].begin(), dists[i].end(),
                  slot.begin() + static_cast<std::ptrdiff_t>(m * values_per_datum_));
      }
      counters_[oracles[m].id] += chunk.size();
      evaluations += chunk.size();
    }
  }
  return evaluations;
}

Tensor OracleCache::get_distributions(
    const std::vector<std::uint64_t>& datum_ids) const {
  const std::size_t m = num_apis();
  if (m == 0) {
    throw std::logic_error("get_distributions: cache never warmed");
  }
  std::vector<double> data(datum_ids.size() * m * values_per_datum_);
  for (std::size_t i = 0; i < datum_ids.size(); ++i) {
    auto it = entries_.find(datum_ids[i]);
    if (it == entries_.end()) {
      throw std::out_of_range("oracle cache miss for datum id " +
                              std::to_string(datum_ids[i]));
    }
    std::copy(it->second.begin(), it->second.end(),
              data.begin() +
                  static_cast<std::ptrdiff_t>(i * m * values_per_datum_));
  }
  return Tensor::from_data({datum_ids.size(), m, values_per_datum_},
                           std::move(data), false);
}

std::uint64_t OracleCache::total_evaluations() const {
  std::uint64_t total = 0;
  for (const auto& [id, n] : counters_) total += n;
  return total;
}

namespace {
constexpr char kCacheMagic[4] = {'F', 'H', 'O', 'C'};
constexpr std::uint32_t kCacheVersion = 1;
}  // namespace

void OracleCache::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  io::write_magic(os, kCacheMagic);
  io::write_le<std::uint32_t>(os, kCacheVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(num_apis()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries_.size()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(values_per_datum_));
  for (const auto& [id, values] : entries_) {
    for (std::size_t m = 0; m < num_apis(); ++m) {
      io::write_le<std::uint64_t>(os, id);
      io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(m));
      for (std::size_t v = 0; v < values_per_datum_; ++v) {
        io::write_f64(os, values[m * values_per_datum_ + v]);
      }
    }
  }
  nlohmann::json trailer = {{"oracle_ids", oracle_ids_},
                            {"counters", counters_}};
  const std::string text = trailer.dump();
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw std::runtime_error("write failed on " + path);
}

OracleCache OracleCache::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  io::expect_magic(is, kCacheMagic, "oracle cache");
  const auto version = io::read_le<std::uint32_t>(is, "cache version");
  if (version != kCacheVersion) {
    throw std::runtime_error("oracle cache version " + std::to_string(version) +
                             " unsupported");
  }
  const auto m = io::read_le<std::uint32_t>(is, "oracle count");
  const auto p = io::read_le<std::uint32_t>(is, "datum count");
  const auto width = io::read_le<std::uint32_t>(is, "values per datum");
  OracleCache cache;
  cache.values_per_datum_ = width;
  for (std::uint64_t rec = 0; rec < std::uint64_t{m} * p; ++rec) {
    const auto id = io::read_le<std::uint64_t>(is, "cache record id");
    const auto idx = io::read_le<std::uint16_t>(is, "cache oracle index");
    if (idx >= m) throw std::runtime_error("oracle index out of range in " + path);
    auto& slot = cache.entries_[id];
    if (slot.empty()) slot.assign(std::size_t{m} * width, 0.0);
    for (std::uint32_t v = 0; v < width; ++v) {
      slot[std::size_t{idx} * width + v] = io::read_f64(is, "cache record");
    }
  }
  if (cache.entries_.size() != p) {
    throw std::runtime_error("oracle cache datum count mismatch in " + path);
  }
  const auto len = io::read_le<std::uint32_t>(is, "cache trailer length");
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw std::runtime_error("truncated cache trailer in " + path);
  auto trailer = nlohmann::json::parse(text);
  cache.oracle_ids_ = trailer.at("oracle_ids").get<std::vector<std::string>>();
  cache.counters_ =
      trailer.at("counters").get<std::map<std::string, std::uint64_t>>();
  if (cache.oracle_ids_.size() != m) {
    throw std::runtime_error("oracle id list mismatch in " + path);
  }
  return cache;
}

}  // namespace fedhelp
