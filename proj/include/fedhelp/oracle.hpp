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

// Frozen teacher oracles and their one-time-access cache. Each oracle is a
// fixed pre-trained model; it is evaluated on every public datum exactly
// once during warm-up, and every later consumer reads the persisted
// probability vectors. The raw-evaluation counters make the one-time
// property directly testable. After warm-up the cache is immutable and can
// be shared read-only across concurrent client tasks.

#ifndef FEDHELP_ORACLE_HPP_
#define FEDHELP_ORACLE_HPP_

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedhelp/data.hpp"
#include "fedhelp/nn.hpp"
#include "fedhelp/tensor.hpp"

namespace fedhelp {

// A frozen teacher. Parameters never change after construction, so the same
// (spec, seed, pre-training data) triple yields identical outputs forever.
struct OracleModel {
  std::string id;
  ClassifierModel model;

  // Values cached per public datum: the class count for classification
  // oracles, H*W*classes for per-pixel oracles.
  std::size_t values_per_datum = 0;

  // Raw model evaluation: per-datum probability vectors for the given
  // feature rows ([B x d]) or images ([B x H x W x 1]). Bookkeeping of
  // evaluation counts lives in the cache, not here.
  std::vector<std::vector<double>> evaluate(const Tensor& batch) const;
};

// Wide MLP briefly pre-trained on `pretrain` (a held-out shard of the
// public distribution, never the cached public set itself) so its outputs
// carry label signal, then frozen.
OracleModel make_classification_oracle(const std::string& id,
                                       std::uint64_t seed,
                                       const LabeledDataset& pretrain);

// Wide per-pixel conv model briefly pre-trained on held-out segmentation
// grids, then frozen. Emits H*W concatenated per-pixel binary
// distributions per datum.
OracleModel make_segmentation_oracle(const std::string& id, std::uint64_t seed,
                                     const SegDataset& pretrain);

// Cache of oracle outputs keyed by (public datum id, oracle index).
class OracleCache {
 public:
  OracleCache() = default;

  // Evaluates every (datum, oracle) pair not already cached and records the
  // raw evaluations in the per-oracle counters. Returns how many raw
  // evaluations this call performed; calling again with a warm cache
  // performs none. Throws if an oracle's output width disagrees with the
  // first oracle's, or if `oracles` disagrees with a previously warmed
  // oracle set.
  std::size_t warm_up(const std::vector<OracleModel>& oracles,
                      const Tensor& public_features,
                      const std::vector<std::uint64_t>& datum_ids);

  // Pure cache read: [B x M x values_per_datum] constant tensor in the
  // order of `datum_ids`. Counters never change. Throws on a missing id —
  // a cache miss is an error, never a silent re-query.
  Tensor get_distributions(const std::vector<std::uint64_t>& datum_ids) const;

  std::size_t num_apis() const { return oracle_ids_.size(); }
  std::size_t num_data() const { return entries_.size(); }
  std::size_t values_per_datum() const { return values_per_datum_; }
  const std::vector<std::string>& oracle_ids() const { return oracle_ids_; }

  // Total raw model evaluations per oracle id since construction/load.
  const std::map<std::string, std::uint64_t>& query_counter() const {
    return counters_;
  }
  std::uint64_t total_evaluations() const;

  // Binary round trip (bit-exact, byte-stable record order). Throws on a
  // bad magic, version mismatch, or truncation.
  void save(const std::string& path) const;
  static OracleCache load(const std::string& path);

 private:
  std::vector<std::string> oracle_ids_;  // position = oracle index
  std::size_t values_per_datum_ = 0;
  // datum id -> M concatenated probability vectors (oracle-index order)
  std::map<std::uint64_t, std::vector<double>> entries_;
  std::map<std::string, std::uint64_t> counters_;
};

}  // namespace fedhelp

#endif  // FEDHELP_ORACLE_HPP_
