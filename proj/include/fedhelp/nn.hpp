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

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedhelp/tensor.hpp"

namespace fedhelp {

/// Architecture descriptor. Fully determines parameter shapes: two models
/// built from equal specs have identical flattened-parameter layouts.
struct ModelSpec {
  enum class Kind { mlp, conv_pixel };
  Kind kind = Kind::mlp;
  /// Feature count (mlp) or input channels (conv_pixel).
  std::size_t input_dim = 0;
  /// Hidden widths (mlp) or per-layer channel counts (conv_pixel).
  std::vector<std::size_t> hidden;
  std::size_t kernel_size = 3;  // conv_pixel trunks only
  std::size_t num_classes = 0;

  void validate() const;
  /// Trunk feature width (last hidden size).
  std::size_t feature_dim() const;
  /// Total parameter count of trunk + one head.
  std::size_t param_count() const;
  bool operator==(const ModelSpec&) const = default;
};

/// One flattened-parameter slot: name plus shape, in fixed flatten order.
struct ParamEntry {
  std::string name;
  Shape shape;
  bool operator==(const ParamEntry&) const = default;
};
using ParamLayout = std::vector<ParamEntry>;

/// Flat f64 parameter vector plus its layout table — the unit of upload,
/// aggregation, and checkpointing.
struct ParamVector {
  std::vector<double> values;
  ParamLayout layout;

  std::size_t size() const { return values.size(); }
  bool layout_matches(const ParamVector& other) const {
    return layout == other.layout;
  }
};

std::string layout_to_json(const ParamLayout& layout);
ParamLayout layout_from_json(const std::string& json_text);

/// Trunk of stacked dense or conv layers, ReLU between layers. Conv trunks
/// consume NHWC images and expose per-pixel features as rows.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;

  /// Forward to a [rows x feature_dim] matrix; rows = batch for mlp trunks,
  /// batch*H*W for conv trunks.
  Tensor forward(Graph& g, const Tensor& input) const;

  std::size_t output_dim() const { return output_dim_; }
  ModelSpec::Kind kind() const { return kind_; }
  std::vector<Tensor> params() const;

 private:
  struct Layer {
    Tensor weight;  // dense [in x out] or conv [k,k,ci,co]
    Tensor bias;
  };
  ModelSpec::Kind kind_ = ModelSpec::Kind::mlp;
  std::vector<Layer> layers_;
  std::size_t output_dim_ = 0;
  friend struct ModelBuilder;
};

/// Final classification layer over trunk features.
struct Head {
  Tensor weight;  // [feature_dim x num_classes]
  Tensor bias;    // [num_classes]
  std::size_t num_classes() const { return bias.size(); }
};

/// Trunk + single head; used for large-client models, proxies, and the
/// frozen knowledge oracles.
struct ClassifierModel {
  ModelSpec spec;
  FeatureExtractor trunk;
  Head head;

  /// Raw pre-softmax logits, [B x C] (mlp) or flattened [B*H*W x C] rows
  /// (conv trunks).
  Tensor forward_logits(Graph& g, const Tensor& batch) const;
  /// Per-pixel logits reshaped back to [B,H,W,C]; conv trunks only.
  Tensor forward_pixel_logits(Graph& g, const Tensor& image) const;

  std::vector<Tensor> params() const;
  ParamVector flatten_params() const;
  void load_params(const ParamVector& pv);
};

/// Small-client model: one shared trunk feeding a private-task head and an
/// auxiliary public-task head. Only trunk + private head are uploaded; the
/// public head exists to absorb the public-task distribution shift and
/// never leaves the client.
struct SurrogateModel {
  ModelSpec spec;              // trunk + private head architecture
  std::size_t public_classes = 0;
  FeatureExtractor trunk;
  Head private_head;
  Head public_head;

  Tensor forward_private_logits(Graph& g, const Tensor& batch) const;
  Tensor forward_public_logits(Graph& g, const Tensor& batch) const;
  Tensor forward_private_pixel_logits(Graph& g, const Tensor& image) const;
  Tensor forward_public_pixel_logits(Graph& g, const Tensor& image) const;

  /// All parameters including the public head (checkpointing).
  std::vector<Tensor> params() const;
  /// Upload subset: trunk + private head, laid out identically to a
  /// ClassifierModel built from the same spec.
  std::vector<Tensor> upload_params() const;
  ParamVector flatten_params() const;  // upload subset
  void load_params(const ParamVector& pv);
};

/// Seeded Kaiming-style uniform initialization; same (spec, seed) yields
/// bit-identical parameters.
ClassifierModel build_classifier(const ModelSpec& spec, std::uint64_t seed);
SurrogateModel build_surrogate(const ModelSpec& spec,
                               std::size_t public_classes, std::uint64_t seed);

ParamVector flatten(const std::vector<Tensor>& params,
                    const std::vector<std::string>& names);

/// Checkpoint file: "FHCK" magic, u32 version, u32 layout JSON length,
/// layout JSON, little-endian f64 values. Bit-exact round trip.
void save_checkpoint(const std::string& path, const ParamVector& pv);
ParamVector load_checkpoint(const std::string& path);

}  // namespace fedhelp
