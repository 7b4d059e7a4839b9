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

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fedhelp {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense f64 tensor, row-major. A Tensor is a shared handle: copies alias the
/// same storage. Gradients are allocated lazily on first accumulation and
/// accumulate across backward calls until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  std::span<double> mutable_data() const;

  /// Gradient values; empty span if no gradient has been accumulated yet.
  std::span<const double> grad() const;
  /// Zeroes the gradient buffer (allocating it if absent).
  void zero_grad() const;

  /// Value of a scalar (size-1) tensor.
  double item() const;
  double at(std::size_t flat_index) const;

  /// Leaf copy of the same values with requires_grad=false. Backward never
  /// crosses a detach: the stop-gradient primitive for distillation teachers.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
  };
  std::shared_ptr<Impl> impl_;

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  void accumulate_grad(const std::vector<double>& g);
  friend class Graph;
};

/// Append-only tape of operation records. Rebuilt per forward pass
/// (define-by-run). Nodes are appended in execution order, so input node ids
/// are always smaller than the consuming node's id; backward replays the
/// tape in strict reverse append order.
///
/// A Graph and its tensors belong to one training task at a time; concurrent
/// client tasks must use disjoint graphs.
class Graph {
 public:
  // --- primitive ops -------------------------------------------------------
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  /// [R x C] matrix plus length-C row vector (bias broadcast).
  Tensor add_rowvec(const Tensor& m, const Tensor& v);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scalar_mul(const Tensor& a, double s);
  Tensor relu(const Tensor& a);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  /// Elementwise x*log(x) with 0*log(0) := 0.
  Tensor xlogx(const Tensor& a);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor reshape(const Tensor& a, Shape new_shape);
  /// Collapse all leading axes: [d0,...,dk,C] -> [d0*...*dk, C].
  Tensor flatten_rows(const Tensor& a);
  /// Log-softmax along the last axis, max-shifted so exp never overflows.
  Tensor log_softmax(const Tensor& a);
  /// Select entries (row, col) from a [R x C] tensor -> [n].
  Tensor gather_pairs(const Tensor& a,
                      std::vector<std::pair<std::size_t, std::size_t>> idx);
  /// Select whole rows from a [R x C] tensor -> [n x C].
  Tensor take_rows(const Tensor& a, std::vector<std::size_t> rows);
  /// Elementwise product with a constant weight vector (no grad to weights).
  Tensor scale_elems(const Tensor& a, std::vector<double> weights);
  /// out[b,v] = sum_m alpha[b,m] * dists[b,m,v]; alpha [B x M], dists [B x M x V].
  Tensor weighted_mixture(const Tensor& alpha, const Tensor& dists);
  /// 2D convolution, NHWC, stride 1, zero "same" padding.
  /// image [B,H,W,Ci], kernel [kh,kw,Ci,Co], bias [Co] -> [B,H,W,Co].
  Tensor conv2d(const Tensor& image, const Tensor& kernel, const Tensor& bias);

  /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate; callers
  /// zero them between steps. Throws if loss is not a size-1 tensor.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor output;
    std::function<void()> backprop;  // reads output grad, accumulates inputs
  };
  std::vector<Node> nodes_;
};

// Non-graph helpers used by losses and evaluation.
/// Row-wise softmax of a [.. x C] tensor's raw data (stabilized).
std::vector<double> softmax_rows(std::span<const double> logits,
                                 std::size_t row_width);
/// Argmax per row, ties broken by lower index.
std::vector<std::size_t> argmax_rows(std::span<const double> values,
                                     std::size_t row_width);

}  // namespace fedhelp
