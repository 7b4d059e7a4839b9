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

#include "fedhelp/nn.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "fedhelp/rng.hpp"
#include "fedhelp/serialize.hpp"

namespace fedhelp {

void ModelSpec::validate() const {
  if (input_dim == 0) throw std::invalid_argument("ModelSpec: input_dim must be > 0");
  if (hidden.empty()) throw std::invalid_argument("ModelSpec: needs at least one hidden layer");
  for (auto w : hidden)
    if (w == 0) throw std::invalid_argument("ModelSpec: zero-width layer");
  if (num_classes < 2) {
    throw std::invalid_argument("ModelSpec: head needs >= 2 classes, got " +
                                std::to_string(num_classes));
  }
  if (kind == Kind::conv_pixel && (kernel_size == 0 || kernel_size % 2 == 0)) {
    throw std::invalid_argument("ModelSpec: conv kernel size must be odd");
  }
}

std::size_t ModelSpec::feature_dim() const { return hidden.back(); }

std::size_t ModelSpec::param_count() const {
  std::size_t n = 0;
  std::size_t in = input_dim;
  for (auto w : hidden) {
    if (kind == Kind::mlp) {
      n += in * w + w;
    } else {
      n += kernel_size * kernel_size * in * w + w;
    }
    in = w;
  }
  n += feature_dim() * num_classes + num_classes;
  return n;
}

namespace {

Tensor init_uniform(Rng& rng, Shape shape, double bound) {
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

Head build_head(Rng& rng, std::size_t feature_dim, std::size_t classes) {
  const double wb = std::sqrt(6.0 / static_cast<double>(feature_dim));
  const double bb = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  Head h;
  h.weight = init_uniform(rng, {feature_dim, classes}, wb);
  h.bias = init_uniform(rng, {classes}, bb);
  return h;
}

}  // namespace

struct ModelBuilder {
  static void trunk(const ModelSpec& spec, Rng& rng, FeatureExtractor& fx) {
    fx.kind_ = spec.kind;
    fx.layers_.clear();
    std::size_t in = spec.input_dim;
    for (auto width : spec.hidden) {
      FeatureExtractor::Layer layer;
      if (spec.kind == ModelSpec::Kind::mlp) {
        const double wb = std::sqrt(6.0 / static_cast<double>(in));
        layer.weight = init_uniform(rng, {in, width}, wb);
        layer.bias = init_uniform(
            rng, {width}, 1.0 / std::sqrt(static_cast<double>(in)));
      } else {
        const std::size_t k = spec.kernel_size;
        const double fan_in = static_cast<double>(k * k * in);
        layer.weight = init_uniform(rng, {k, k, in, width}, std::sqrt(6.0 / fan_in));
        layer.bias = init_uniform(rng, {width}, 1.0 / std::sqrt(fan_in));
      }
      fx.layers_.push_back(std::move(layer));
      in = width;
    }
    fx.output_dim_ = in;
  }
  static const std::vector<FeatureExtractor::Layer>& layers(
      const FeatureExtractor& fx) {
    return fx.layers_;
  }
};

Tensor FeatureExtractor::forward(Graph& g, const Tensor& input) const {
  Tensor x = input;
  if (kind_ == ModelSpec::Kind::mlp) {
    for (const auto& layer : layers_) {
      x = g.relu(g.add_rowvec(g.matmul(x, layer.weight), layer.bias));
    }
    return x;
  }
  for (const auto& layer : layers_) {
    x = g.relu(g.conv2d(x, layer.weight, layer.bias));
  }
  // Per-pixel features as rows for the (1x1-equivalent) dense head.
  return g.flatten_rows(x);
}

std::vector<Tensor> FeatureExtractor::params() const {
  std::vector<Tensor> out;
  out.reserve(layers_.size() * 2);
  for (const auto& layer : layers_) {
    out.push_back(layer.weight);
    out.push_back(layer.bias);
  }
  return out;
}

namespace {

std::vector<std::string> trunk_head_names(std::size_t trunk_layers) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < trunk_layers; ++i) {
    names.push_back("trunk." + std::to_string(i) + ".weight");
    names.push_back("trunk." + std::to_string(i) + ".bias");
  }
  names.push_back("head.weight");
  names.push_back("head.bias");
  return names;
}

Tensor head_logits(Graph& g, const Tensor& features, const Head& head) {
  return g.add_rowvec(g.matmul(features, head.weight), head.bias);
}

void check_input_dim(const ModelSpec& spec, const Tensor& batch) {
  if (spec.kind == ModelSpec::Kind::mlp) {
    if (batch.shape().size() != 2 || batch.shape()[1] != spec.input_dim) {
      throw std::invalid_argument("forward: batch " + shape_str(batch.shape()) +
                                  " does not match input_dim " +
                                  std::to_string(spec.input_dim));
    }
  } else {
    if (batch.shape().size() != 4 || batch.shape()[3] != spec.input_dim) {
      throw std::invalid_argument("forward: image " + shape_str(batch.shape()) +
                                  " does not match input channels " +
                                  std::to_string(spec.input_dim));
    }
  }
}

}  // namespace

Tensor ClassifierModel::forward_logits(Graph& g, const Tensor& batch) const {
  check_input_dim(spec, batch);
  return head_logits(g, trunk.forward(g, batch), head);
}

Tensor ClassifierModel::forward_pixel_logits(Graph& g, const Tensor& image) const {
  if (spec.kind != ModelSpec::Kind::conv_pixel) {
    throw std::invalid_argument("forward_pixel_logits: mlp trunk has no pixels");
  }
  check_input_dim(spec, image);
  const std::size_t b = image.shape()[0], h = image.shape()[1],
                    w = image.shape()[2];
  Tensor rows = head_logits(g, trunk.forward(g, image), head);
  return g.reshape(rows, {b, h, w, head.num_classes()});
}

std::vector<Tensor> ClassifierModel::params() const {
  auto out = trunk.params();
  out.push_back(head.weight);
  out.push_back(head.bias);
  return out;
}

ParamVector ClassifierModel::flatten_params() const {
  return flatten(params(), trunk_head_names(ModelBuilder::layers(trunk).size()));
}

void ClassifierModel::load_params(const ParamVector& pv) {
  auto ps = params();
  ParamVector own = flatten_params();
  if (!own.layout_matches(pv)) {
    throw std::invalid_argument("load_params: layout mismatch");
  }
  std::size_t offset = 0;
  for (auto& p : ps) {
    auto dst = p.mutable_data();
    std::copy_n(pv.values.begin() + offset, dst.size(), dst.begin());
    offset += dst.size();
  }
}

Tensor SurrogateModel::forward_private_logits(Graph& g, const Tensor& batch) const {
  check_input_dim(spec, batch);
  return head_logits(g, trunk.forward(g, batch), private_head);
}

Tensor SurrogateModel::forward_public_logits(Graph& g, const Tensor& batch) const {
  check_input_dim(spec, batch);
  return head_logits(g, trunk.forward(g, batch), public_head);
}

Tensor SurrogateModel::forward_private_pixel_logits(Graph& g,
                                                    const Tensor& image) const {
  check_input_dim(spec, image);
  const std::size_t b = image.shape()[0], h = image.shape()[1],
                    w = image.shape()[2];
  Tensor rows = head_logits(g, trunk.forward(g, image), private_head);
  return g.reshape(rows, {b, h, w, private_head.num_classes()});
}

Tensor SurrogateModel::forward_public_pixel_logits(Graph& g,
                                                   const Tensor& image) const {
  check_input_dim(spec, image);
  const std::size_t b = image.shape()[0], h = image.shape()[1],
                    w = image.shape()[2];
  Tensor rows = head_logits(g, trunk.forward(g, image), public_head);
  return g.reshape(rows, {b, h, w, public_head.num_classes()});
}

std::vector<Tensor> SurrogateModel::params() const {
  auto out = upload_params();
  out.push_back(public_head.weight);
  out.push_back(public_head.bias);
  return out;
}

std::vector<Tensor> SurrogateModel::upload_params() const {
  auto out = trunk.params();
  out.push_back(private_head.weight);
  out.push_back(private_head.bias);
  return out;
}

ParamVector SurrogateModel::flatten_params() const {
  return flatten(upload_params(),
                 trunk_head_names(ModelBuilder::layers(trunk).size()));
}

void SurrogateModel::load_params(const ParamVector& pv) {
  ParamVector own = flatten_params();
  if (!own.layout_matches(pv)) {
    throw std::invalid_argument("load_params: layout mismatch");
  }
  std::size_t offset = 0;
  for (auto& p : upload_params()) {
    auto dst = p.mutable_data();
    std::copy_n(pv.values.begin() + offset, dst.size(), dst.begin());
    offset += dst.size();
  }
}

ClassifierModel build_classifier(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ClassifierModel model;
  model.spec = spec;
  ModelBuilder::trunk(spec, rng, model.trunk);
  model.head = build_head(rng, spec.feature_dim(), spec.num_classes);
  return model;
}

SurrogateModel build_surrogate(const ModelSpec& spec,
                               std::size_t public_classes, std::uint64_t seed) {
  spec.validate();
  if (public_classes < 2) {
    throw std::invalid_argument("build_surrogate: public head needs >= 2 classes");
  }
  Rng rng(seed);
  SurrogateModel model;
  model.spec = spec;
  model.public_classes = public_classes;
  ModelBuilder::trunk(spec, rng, model.trunk);
  model.private_head = build_head(rng, spec.feature_dim(), spec.num_classes);
  model.public_head = build_head(rng, spec.feature_dim(), public_classes);
  return model;
}

ParamVector flatten(const std::vector<Tensor>& params,
                    const std::vector<std::string>& names) {
  if (params.size() != names.size()) {
    throw std::invalid_argument("flatten: name/param count mismatch");
  }
  ParamVector pv;
  for (std::size_t i = 0; i < params.size(); ++i) {
    pv.layout.push_back({names[i], params[i].shape()});
    pv.values.insert(pv.values.end(), params[i].data().begin(),
                     params[i].data().end());
  }
  return pv;
}

std::string layout_to_json(const ParamLayout& layout) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : layout) {
    j.push_back({{"name", e.name}, {"shape", e.shape}});
  }
  return j.dump();
}

ParamLayout layout_from_json(const std::string& json_text) {
  ParamLayout layout;
  auto j = nlohmann::json::parse(json_text);
  for (const auto& e : j) {
    layout.push_back({e.at("name").get<std::string>(), e.at("shape").get<Shape>()});
  }
  return layout;
}

namespace {
constexpr char kCheckpointMagic[4] = {'F', 'H', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const ParamVector& pv) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  io::write_magic(os, kCheckpointMagic);
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  const std::string layout_json = layout_to_json(pv.layout);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(layout_json.size()));
  os.write(layout_json.data(), static_cast<std::streamsize>(layout_json.size()));
  for (double v : pv.values) io::write_f64(os, v);
  if (!os) throw std::runtime_error("write failed on " + path);
}

ParamVector load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  io::expect_magic(is, kCheckpointMagic, "checkpoint");
  const auto version = io::read_le<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " unsupported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  const auto json_len = io::read_le<std::uint32_t>(is, "layout length");
  std::string layout_json(json_len, '\0');
  is.read(layout_json.data(), json_len);
  if (!is) throw std::runtime_error("truncated checkpoint layout in " + path);
  ParamVector pv;
  pv.layout = layout_from_json(layout_json);
  std::size_t total = 0;
  for (const auto& e : pv.layout) total += shape_size(e.shape);
  pv.values.resize(total);
  for (auto& v : pv.values) v = io::read_f64(is, "checkpoint values");
  return pv;
}

}  // namespace fedhelp
