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

#include "fedhelp/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fedhelp {

namespace {

void require_2d(const Tensor& t, const char* what) {
  if (!t.defined() || t.shape().size() != 2) {
    throw std::invalid_argument(std::string(what) + ": expected a 2-D tensor");
  }
}

void require_pixel_4d(const Tensor& t, const char* what) {
  if (!t.defined() || t.shape().size() != 4) {
    throw std::invalid_argument(std::string(what) +
                                ": expected a [B,H,W,C] tensor");
  }
}

std::vector<std::pair<std::size_t, std::size_t>> label_pairs(
    const std::vector<std::size_t>& labels, std::size_t num_classes,
    const char* what) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= num_classes) {
      throw std::out_of_range(std::string(what) + ": label " +
                              std::to_string(labels[b]) + " out of range [0, " +
                              std::to_string(num_classes) + ")");
    }
    pairs.emplace_back(b, labels[b]);
  }
  return pairs;
}

// Shared core of the batch and per-pixel ranking losses: total negative
// log-probability of the target sets, divided by `denom`.
Tensor ranking_core(Graph& g, const Tensor& logits,
                    const std::vector<std::vector<std::size_t>>& omega,
                    double denom, const char* what) {
  const std::size_t rows = logits.shape()[0];
  const std::size_t classes = logits.shape()[1];
  if (omega.size() != rows) {
    throw std::invalid_argument(std::string(what) +
                                ": one index set per row required");
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t b = 0; b < rows; ++b) {
    if (omega[b].empty()) {
      throw std::invalid_argument(std::string(what) + ": empty target set");
    }
    for (std::size_t r : omega[b]) {
      if (r >= classes) {
        throw std::out_of_range(std::string(what) + ": class index " +
                                std::to_string(r) + " out of range");
      }
      pairs.emplace_back(b, r);
    }
  }
  Tensor picked = g.gather_pairs(g.log_softmax(logits), pairs);
  return g.scalar_mul(g.sum(picked), -1.0 / denom);
}

// Mean KL over rows with an optional row-count override so per-pixel
// variants can renormalize from "mean over pixels" to "mean over images".
Tensor mean_kl(Graph& g, const Tensor& p, const Tensor& q_logits,
               double denom) {
  Tensor diff = g.sub(g.xlogx(p), g.mul(p, g.log_softmax(q_logits)));
  return g.scalar_mul(g.sum(diff), 1.0 / denom);
}

Tensor constant_softmax(const Tensor& logits) {
  require_2d(logits, "constant_softmax");
  std::vector<double> probs = softmax_rows(logits.data(), logits.shape()[1]);
  return Tensor::from_data(logits.shape(), std::move(probs), false);
}

}  // namespace

ApiMixture make_api_mixture(std::size_t num_data, std::size_t num_apis) {
  ApiMixture mixture;
  if (num_apis > 0) {
    mixture.logits_alpha = Tensor::zeros({num_data, num_apis}, true);
  }
  return mixture;
}

void LossWeights::validate() const {
  if (lambda_r < 0 || lambda_j < 0 || lambda_f < 0 || lambda_b < 0) {
    throw std::invalid_argument("LossWeights: multipliers must be nonnegative");
  }
  if (omega_size == 0) {
    throw std::invalid_argument("LossWeights: omega_size must be positive");
  }
}

Tensor cross_entropy(Graph& g, const Tensor& logits,
                     const std::vector<std::size_t>& labels) {
  require_2d(logits, "cross_entropy");
  if (labels.size() != logits.shape()[0]) {
    throw std::invalid_argument("cross_entropy: one label per row required");
  }
  auto pairs = label_pairs(labels, logits.shape()[1], "cross_entropy");
  Tensor picked = g.gather_pairs(g.log_softmax(logits), pairs);
  return g.scalar_mul(g.sum(picked),
                      -1.0 / static_cast<double>(labels.size()));
}

Tensor kl_divergence(Graph& g, const Tensor& p, const Tensor& q_logits) {
  require_2d(p, "kl_divergence");
  require_2d(q_logits, "kl_divergence");
  if (p.shape() != q_logits.shape()) {
    throw std::invalid_argument("kl_divergence: shape mismatch " +
                                shape_str(p.shape()) + " vs " +
                                shape_str(q_logits.shape()));
  }
  const std::size_t rows = p.shape()[0], cols = p.shape()[1];
  auto data = p.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (data[r * cols + c] < 0.0) {
        throw std::invalid_argument("kl_divergence: negative probability");
      }
      s += data[r * cols + c];
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw std::invalid_argument("kl_divergence: row " + std::to_string(r) +
                                  " sums to " + std::to_string(s) +
                                  ", expected 1");
    }
  }
  return mean_kl(g, p, q_logits, static_cast<double>(rows));
}

Tensor guidance_loss(Graph& g, const Tensor& public_logits,
                     const std::vector<std::size_t>& labels,
                     const Tensor& oracle_dists, const ApiMixture& mixture,
                     const std::vector<std::size_t>& rows, double lambda_r) {
  Tensor ce = cross_entropy(g, public_logits, labels);
  if (lambda_r == 0.0) return ce;  // term removed; bit-identical to the CE
  if (mixture.num_apis() == 0) {
    throw std::invalid_argument(
        "guidance_loss: lambda_r > 0 requires at least one oracle");
  }
  if (!oracle_dists.defined() || oracle_dists.shape().size() != 3) {
    throw std::invalid_argument(
        "guidance_loss: oracle distributions must be [B,M,C]");
  }
  const std::size_t batch = public_logits.shape()[0];
  if (rows.size() != batch || oracle_dists.shape()[0] != batch ||
      oracle_dists.shape()[1] != mixture.num_apis() ||
      oracle_dists.shape()[2] != public_logits.shape()[1]) {
    throw std::invalid_argument("guidance_loss: batch/oracle shape mismatch");
  }
  Tensor alpha_rows = g.take_rows(mixture.logits_alpha, rows);
  Tensor alpha = g.exp(g.log_softmax(alpha_rows));
  Tensor target = g.weighted_mixture(alpha, oracle_dists);
  Tensor kl = kl_divergence(g, target, public_logits);
  return g.add(ce, g.scalar_mul(kl, lambda_r));
}

Tensor joint_small_loss(Graph& g, const Tensor& private_ce,
                        const Tensor& guidance, double lambda_j) {
  if (!private_ce.defined()) {
    throw std::invalid_argument("joint_small_loss: private term required");
  }
  if (lambda_j == 0.0) return private_ce;
  if (!guidance.defined()) {
    throw std::invalid_argument(
        "joint_small_loss: lambda_j > 0 requires a guidance term");
  }
  return g.add(private_ce, g.scalar_mul(guidance, lambda_j));
}

Tensor forward_kd(Graph& g, const Tensor& teacher_logits,
                  const Tensor& student_logits) {
  require_2d(teacher_logits, "forward_kd");
  require_2d(student_logits, "forward_kd");
  if (teacher_logits.shape() != student_logits.shape()) {
    throw std::invalid_argument("forward_kd: shape mismatch " +
                                shape_str(teacher_logits.shape()) + " vs " +
                                shape_str(student_logits.shape()));
  }
  return kl_divergence(g, constant_softmax(teacher_logits), student_logits);
}

std::vector<std::vector<std::size_t>> top_omega(const Tensor& logits,
                                                std::size_t k) {
  require_2d(logits, "top_omega");
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  if (k == 0 || k > cols) {
    throw std::invalid_argument("top_omega: k must be in [1, " +
                                std::to_string(cols) + "]");
  }
  auto data = logits.data();
  std::vector<std::vector<std::size_t>> out(rows);
  std::vector<std::size_t> order(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return data[r * cols + a] > data[r * cols + b];
                     });
    out[r].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

Tensor ranking_kd(Graph& g, const Tensor& large_logits,
                  const std::vector<std::vector<std::size_t>>& omega) {
  require_2d(large_logits, "ranking_kd");
  return ranking_core(g, large_logits, omega,
                      static_cast<double>(large_logits.shape()[0]),
                      "ranking_kd");
}

Tensor large_client_loss(Graph& g, const Tensor& private_ce, const Tensor& fwd,
                         const Tensor& rank, double lambda_f, double lambda_b) {
  if (!private_ce.defined()) {
    throw std::invalid_argument("large_client_loss: private term required");
  }
  Tensor total = private_ce;
  if (lambda_f != 0.0) {
    if (!fwd.defined()) {
      throw std::invalid_argument(
          "large_client_loss: lambda_f > 0 requires a forward term");
    }
    total = g.add(total, g.scalar_mul(fwd, lambda_f));
  }
  if (lambda_b != 0.0) {
    if (!rank.defined()) {
      throw std::invalid_argument(
          "large_client_loss: lambda_b > 0 requires a ranking term");
    }
    total = g.add(total, g.scalar_mul(rank, lambda_b));
  }
  return total;
}

Tensor symmetric_kd(Graph& g, const Tensor& large_logits,
                    const Tensor& proxy_logits) {
  return g.add(forward_kd(g, large_logits, proxy_logits),
               forward_kd(g, proxy_logits, large_logits));
}

std::vector<double> inverse_frequency_balance(const std::vector<int>& mask,
                                              std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int v : mask) {
    if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
      throw std::out_of_range("inverse_frequency_balance: mask value " +
                              std::to_string(v) + " out of range");
    }
    ++counts[static_cast<std::size_t>(v)];
  }
  std::size_t present = 0;
  for (auto c : counts)
    if (c > 0) ++present;
  std::vector<double> weights(num_classes, 0.0);
  if (present == 0) return weights;
  // w_c = N / (present * n_c) makes the pixel-mean of w[mask] exactly one.
  const double scale =
      static_cast<double>(mask.size()) / static_cast<double>(present);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] > 0) weights[c] = scale / static_cast<double>(counts[c]);
  }
  return weights;
}

std::vector<double> weight_map(const std::vector<int>& mask,
                               const std::vector<double>& d1,
                               const std::vector<double>& d2,
                               const WeightMapParams& params) {
  if (params.sigma <= 0.0) {
    throw std::invalid_argument("weight_map: sigma must be positive");
  }
  if (d1.size() != mask.size() || d2.size() != mask.size()) {
    throw std::invalid_argument("weight_map: size mismatch");
  }
  const double inv_two_sigma_sq = 1.0 / (2.0 * params.sigma * params.sigma);
  std::vector<double> beta(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto cls = static_cast<std::size_t>(mask[i]);
    if (mask[i] < 0 || cls >= params.class_balance.size()) {
      throw std::out_of_range("weight_map: mask value " +
                              std::to_string(mask[i]) +
                              " has no class-balance entry");
    }
    const double d = d1[i] + d2[i];
    beta[i] = params.class_balance[cls] +
              params.beta0 * std::exp(-d * d * inv_two_sigma_sq);
  }
  return beta;
}

Tensor weighted_pixel_ce(Graph& g, const Tensor& pixel_logits,
                         const std::vector<std::size_t>& mask,
                         const std::vector<double>& beta) {
  require_pixel_4d(pixel_logits, "weighted_pixel_ce");
  const std::size_t pixels =
      pixel_logits.shape()[0] * pixel_logits.shape()[1] * pixel_logits.shape()[2];
  if (mask.size() != pixels || beta.size() != pixels) {
    throw std::invalid_argument(
        "weighted_pixel_ce: mask/weight size must equal B*H*W");
  }
  Tensor rows = g.flatten_rows(pixel_logits);
  auto pairs = label_pairs(mask, rows.shape()[1], "weighted_pixel_ce");
  Tensor picked = g.gather_pairs(g.log_softmax(rows), pairs);
  const double beta_total = std::accumulate(beta.begin(), beta.end(), 0.0);
  if (beta_total <= 0.0) {
    throw std::invalid_argument("weighted_pixel_ce: weights sum to zero");
  }
  return g.scalar_mul(g.sum(g.scale_elems(picked, beta)), -1.0 / beta_total);
}

Tensor pixel_guidance_loss(Graph& g, const Tensor& public_pixel_logits,
                           const std::vector<std::size_t>& mask,
                           const std::vector<double>& beta,
                           const Tensor& oracle_dists,
                           const ApiMixture& mixture,
                           const std::vector<std::size_t>& rows,
                           double lambda_r) {
  Tensor ce = weighted_pixel_ce(g, public_pixel_logits, mask, beta);
  if (lambda_r == 0.0) return ce;
  if (mixture.num_apis() == 0) {
    throw std::invalid_argument(
        "pixel_guidance_loss: lambda_r > 0 requires at least one oracle");
  }
  const auto& shape = public_pixel_logits.shape();
  const std::size_t batch = shape[0];
  const std::size_t pixels = shape[1] * shape[2];
  const std::size_t classes = shape[3];
  if (!oracle_dists.defined() || oracle_dists.shape().size() != 3 ||
      oracle_dists.shape()[0] != batch ||
      oracle_dists.shape()[1] != mixture.num_apis() ||
      oracle_dists.shape()[2] != pixels * classes || rows.size() != batch) {
    throw std::invalid_argument(
        "pixel_guidance_loss: oracle distribution shape mismatch");
  }
  Tensor alpha_rows = g.take_rows(mixture.logits_alpha, rows);
  Tensor alpha = g.exp(g.log_softmax(alpha_rows));
  // Mixing over oracles commutes with the per-pixel layout: every pixel row
  // of the result is the same convex combination of that pixel's per-oracle
  // distributions.
  Tensor target =
      g.reshape(g.weighted_mixture(alpha, oracle_dists),
                {batch * pixels, classes});
  Tensor diff = g.sub(g.xlogx(target),
                      g.mul(target, g.log_softmax(g.flatten_rows(
                                        public_pixel_logits))));
  // Border weights apply per pixel; expand each to that pixel's C entries.
  std::vector<double> beta_expanded(batch * pixels * classes);
  for (std::size_t p = 0; p < batch * pixels; ++p) {
    for (std::size_t c = 0; c < classes; ++c) {
      beta_expanded[p * classes + c] = beta[p];
    }
  }
  const double beta_total = std::accumulate(beta.begin(), beta.end(), 0.0);
  Tensor kl = g.scalar_mul(g.sum(g.scale_elems(diff, beta_expanded)),
                           1.0 / beta_total);
  return g.add(ce, g.scalar_mul(kl, lambda_r));
}

Tensor pixel_forward_kd(Graph& g, const Tensor& teacher_pixel_logits,
                        const Tensor& student_pixel_logits) {
  require_pixel_4d(teacher_pixel_logits, "pixel_forward_kd");
  require_pixel_4d(student_pixel_logits, "pixel_forward_kd");
  if (teacher_pixel_logits.shape() != student_pixel_logits.shape()) {
    throw std::invalid_argument("pixel_forward_kd: shape mismatch");
  }
  const auto& shape = teacher_pixel_logits.shape();
  const double batch = static_cast<double>(shape[0]);
  Tensor teacher_rows = g.flatten_rows(teacher_pixel_logits);
  Tensor student_rows = g.flatten_rows(student_pixel_logits);
  // Sum of per-pixel KL divided by B == per-row KL summed then / B.
  return mean_kl(g, constant_softmax(teacher_rows), student_rows, batch);
}

Tensor pixel_ranking_kd(Graph& g, const Tensor& large_pixel_logits,
                        const std::vector<std::vector<std::size_t>>& omega) {
  require_pixel_4d(large_pixel_logits, "pixel_ranking_kd");
  const auto& shape = large_pixel_logits.shape();
  Tensor rows = g.flatten_rows(large_pixel_logits);
  return ranking_core(g, rows, omega, static_cast<double>(shape[0]),
                      "pixel_ranking_kd");
}

}  // namespace fedhelp
