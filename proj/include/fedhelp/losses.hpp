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

// Training objectives: cross-entropy, KL terms, API-mixture guidance for
// surrogate training, the asymmetric forward/ranking distillation pair for
// large clients, and their per-pixel segmentation counterparts.
//
// All losses are pure functions over tensors recorded on a caller-supplied
// Graph, so they are safe to evaluate concurrently from independent client
// tasks. Gradient-stop conventions are part of each function's contract:
// forward distillation treats the teacher as a constant, ranking
// distillation derives its target index sets from constants.

#ifndef FEDHELP_LOSSES_HPP_
#define FEDHELP_LOSSES_HPP_

#include <cstddef>
#include <vector>

#include "fedhelp/tensor.hpp"

namespace fedhelp {

// Learnable per-(public datum, oracle) mixture pre-weights. A row softmax
// turns row p into the contribution scores alpha[p][m], which always sum to
// one. Trained jointly with the surrogate by whatever optimizer owns it.
struct ApiMixture {
  Tensor logits_alpha;  // [P x M], requires_grad

  std::size_t num_data() const {
    return logits_alpha.defined() ? logits_alpha.shape()[0] : 0;
  }
  std::size_t num_apis() const {
    return logits_alpha.defined() ? logits_alpha.shape()[1] : 0;
  }
};

// Creates mixture pre-weights initialized to zero (uniform scores after the
// row softmax) for `num_data` public examples and `num_apis` oracles.
ApiMixture make_api_mixture(std::size_t num_data, std::size_t num_apis);

// Scalar multipliers of the composite objectives plus the ranking set size.
struct LossWeights {
  double lambda_r = 0.1;      // guidance KL weight inside the public term
  double lambda_j = 0.2;      // public term weight in the small-client loss
  double lambda_f = 1.0;      // forward (large -> proxy) distillation weight
  double lambda_b = 0.2;      // ranking (proxy -> large) distillation weight
  std::size_t omega_size = 3; // top-ranked classes imitated by ranking KD

  // Throws std::invalid_argument if any multiplier is negative or
  // omega_size is zero.
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

// Border-emphasis weight map parameters for segmentation training.
struct WeightMapParams {
  double beta0 = 10.0;
  double sigma = 5.0;
  std::vector<double> class_balance;  // per-class base weight (index = class)
};

// Mean over the batch of -log softmax(logits)[label].
// Throws std::out_of_range for labels >= C.
Tensor cross_entropy(Graph& g, const Tensor& logits,
                     const std::vector<std::size_t>& labels);

// Mean over rows of sum_c p_c * (log p_c - log softmax(q)_c) with
// 0*log 0 := 0. Rows of `p` must sum to one within 1e-9 (else
// std::invalid_argument). Gradient flows into `p` only if `p` is part of
// the graph and requires it; pass a constant tensor for the usual
// target-side stop.
Tensor kl_divergence(Graph& g, const Tensor& p, const Tensor& q_logits);

// Public-data objective of a small client: mean over the batch of
//   CE(public_logits, label) + lambda_r * KL(mixture of oracle dists || public head).
// `oracle_dists` is a constant [B x M x C_pub] tensor of cached oracle
// outputs; `rows` maps batch positions to rows of `mixture.logits_alpha`.
// Gradient reaches both the public head and the mixture logits.
//
// M == 0 with lambda_r > 0 is a configuration error. M == 0 with
// lambda_r == 0 degrades to plain public cross-entropy, as does
// lambda_r == 0 with oracles present (the KL term is dropped entirely, so
// the result is bit-identical to cross_entropy).
Tensor guidance_loss(Graph& g, const Tensor& public_logits,
                     const std::vector<std::size_t>& labels,
                     const Tensor& oracle_dists, const ApiMixture& mixture,
                     const std::vector<std::size_t>& rows, double lambda_r);

// J = private_ce + lambda_j * guidance. `guidance` may be undefined when
// lambda_j == 0 (the term is skipped); otherwise it must be defined.
Tensor joint_small_loss(Graph& g, const Tensor& private_ce,
                        const Tensor& guidance, double lambda_j);

// Mean KL(softmax(teacher) || softmax(student)). The teacher side is
// snapshotted into a constant, so gradients reach student parameters only.
Tensor forward_kd(Graph& g, const Tensor& teacher_logits,
                  const Tensor& student_logits);

// Indexes of the k largest logits per row, ties broken toward the lower
// class index. Reads forward values only (no gradient path).
std::vector<std::vector<std::size_t>> top_omega(const Tensor& logits,
                                                std::size_t k);

// Mean over the batch of -sum_{r in omega_b} log softmax(large_logits)_r.
// The per-row index sets come from top_omega on (constant) proxy logits, so
// gradients reach the large model only. Throws on an empty set.
Tensor ranking_kd(Graph& g, const Tensor& large_logits,
                  const std::vector<std::vector<std::size_t>>& omega);

// G = private_ce + lambda_f * fwd + lambda_b * rank. A term tensor may be
// undefined when its multiplier is zero; an undefined term with a nonzero
// multiplier is an error.
Tensor large_client_loss(Graph& g, const Tensor& private_ce, const Tensor& fwd,
                         const Tensor& rank, double lambda_f, double lambda_b);

// KL(softmax(large)||softmax(proxy)) + KL(softmax(proxy)||softmax(large)),
// each direction stopping its own teacher, so gradients reach both models.
// Ablation replacement for the ranking term.
Tensor symmetric_kd(Graph& g, const Tensor& large_logits,
                    const Tensor& proxy_logits);

// Per-class weights proportional to inverse class frequency, scaled so the
// pixel-mean of the resulting map is exactly one. Classes absent from the
// mask get weight zero.
std::vector<double> inverse_frequency_balance(const std::vector<int>& mask,
                                              std::size_t num_classes);

// beta[p] = class_balance[mask[p]] + beta0 * exp(-(d1[p]+d2[p])^2 / (2 sigma^2)).
// `d1` and `d2` are the distances to the nearest and second-nearest
// foreground component borders. Throws if sigma <= 0 or sizes disagree.
std::vector<double> weight_map(const std::vector<int>& mask,
                               const std::vector<double>& d1,
                               const std::vector<double>& d2,
                               const WeightMapParams& params);

// Border-weighted segmentation cross-entropy:
//   sum_pixels beta * CE(pixel logits, mask) / sum_pixels beta.
// `pixel_logits` is [B x H x W x C]; `mask` and `beta` are flattened
// B*H*W sequences in the same pixel order.
Tensor weighted_pixel_ce(Graph& g, const Tensor& pixel_logits,
                         const std::vector<std::size_t>& mask,
                         const std::vector<double>& beta);

// Segmentation counterpart of guidance_loss: border-weighted sum over
// pixels of CE(public head, mask) + lambda_r * KL(oracle mixture || public
// head), normalized by the weight total. `oracle_dists` is
// [B x M x (H*W*C)] — per-pixel distributions concatenated per datum — and
// the per-datum mixture scores apply to every pixel of that datum.
// lambda_r == 0 reduces bit-identically to weighted_pixel_ce; M == 0 with
// lambda_r > 0 is a configuration error.
Tensor pixel_guidance_loss(Graph& g, const Tensor& public_pixel_logits,
                           const std::vector<std::size_t>& mask,
                           const std::vector<double>& beta,
                           const Tensor& oracle_dists,
                           const ApiMixture& mixture,
                           const std::vector<std::size_t>& rows,
                           double lambda_r);

// Per-pixel forward distillation: KL summed over each image's pixels, then
// meaned over the batch. Both inputs are [B x H x W x C].
Tensor pixel_forward_kd(Graph& g, const Tensor& teacher_pixel_logits,
                        const Tensor& student_pixel_logits);

// Per-pixel ranking distillation with per-pixel index sets (one entry per
// pixel, row-major over B, H, W), summed over pixels and meaned over the
// batch.
Tensor pixel_ranking_kd(Graph& g, const Tensor& large_pixel_logits,
                        const std::vector<std::vector<std::size_t>>& omega);

}  // namespace fedhelp

#endif  // FEDHELP_LOSSES_HPP_
