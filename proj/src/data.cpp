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

#include "fedhelp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <queue>
#include <stdexcept>

#include <json.hpp>

#include "fedhelp/losses.hpp"
#include "fedhelp/rng.hpp"
#include "fedhelp/serialize.hpp"

namespace fedhelp {

namespace {

// Stream tags keep the independent generator substreams decorrelated.
constexpr std::uint64_t kMeanStream = 0x6d65616e;    // class means
constexpr std::uint64_t kPrivStream = 0x70726976;    // private feature noise
constexpr std::uint64_t kPubStream = 0x7075626c;     // public feature noise
constexpr std::uint64_t kShiftStream = 0x73686966;   // public mean offsets
constexpr std::uint64_t kPartStream = 0x70617274;    // partition shuffles
constexpr std::uint64_t kSegStream = 0x7365676dULL;  // segmentation blobs

// Public datum ids live above this offset so they can never collide with
// private ids (which are plain row indices).
constexpr std::uint64_t kPublicIdOffset = 1ULL << 32;

std::vector<double> class_mean(std::uint64_t seed, std::size_t cls,
                               std::size_t dim) {
  Rng rng(hash_combine(seed, kMeanStream, cls));
  std::vector<double> mean(dim);
  for (auto& v : mean) v = rng.normal();
  return mean;
}

std::vector<std::size_t> balanced_labels(std::size_t n,
                                         std::size_t num_classes, Rng& rng) {
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % num_classes;
  rng.shuffle(labels);
  return labels;
}

LabeledDataset sample_clusters(std::uint64_t seed,
                               const std::vector<std::vector<double>>& means,
                               std::size_t n, double spread,
                               std::uint64_t noise_stream,
                               std::uint64_t id_offset) {
  const std::size_t num_classes = means.size();
  const std::size_t dim = means.front().size();
  Rng rng(hash_combine(seed, noise_stream));
  LabeledDataset ds;
  ds.num_classes = num_classes;
  ds.seed = seed;
  ds.labels = balanced_labels(n, num_classes, rng);
  ds.ids.resize(n);
  std::vector<double> feats(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    ds.ids[i] = id_offset + i;
    const auto& mean = means[ds.labels[i]];
    for (std::size_t j = 0; j < dim; ++j) {
      feats[i * dim + j] = mean[j] + spread * rng.normal();
    }
  }
  ds.features = Tensor::from_data({n, dim}, std::move(feats), false);
  return ds;
}

}  // namespace

void PartitionPlan::validate(std::size_t source_size) const {
  if (clients.empty()) {
    throw std::invalid_argument("PartitionPlan: no clients");
  }
  std::size_t total = 0;
  for (const auto& q : clients) {
    if (q.train_size == 0) {
      throw std::invalid_argument("PartitionPlan: empty training shard");
    }
    total += q.train_size + q.test_size;
  }
  if (total > source_size) {
    throw std::invalid_argument("PartitionPlan: quotas need " +
                                std::to_string(total) + " samples, source has " +
                                std::to_string(source_size));
  }
}

PartitionPlan isic19_ratio_plan(std::size_t n) {
  static constexpr double kWeights[] = {9930, 3163, 2690, 655, 351, 180};
  const double total_weight =
      std::accumulate(std::begin(kWeights), std::end(kWeights), 0.0);
  PartitionPlan plan;
  for (double w : kWeights) {
    const double share = static_cast<double>(n) * w / total_weight;
    PartitionPlan::ClientQuota q;
    q.train_size = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(share * 0.8)));
    q.test_size = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(share * 0.2)));
    plan.clients.push_back(q);
  }
  plan.validate(n);
  return plan;
}

LabeledDataset make_classification(std::uint64_t seed, std::size_t num_classes,
                                   std::size_t dim, std::size_t n,
                                   double spread) {
  if (num_classes < 2) {
    throw std::invalid_argument("make_classification: need >= 2 classes");
  }
  if (n < num_classes) {
    throw std::invalid_argument("make_classification: n < num_classes");
  }
  std::vector<std::vector<double>> means(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    means[c] = class_mean(seed, c, dim);
  }
  return sample_clusters(seed, means, n, spread, kPrivStream, 0);
}

LabeledDataset make_public_set(std::uint64_t seed, std::size_t public_classes,
                               std::size_t p, double shift, std::size_t dim,
                               double spread) {
  if (public_classes < 2) {
    throw std::invalid_argument("make_public_set: need >= 2 classes");
  }
  if (p == 0) {
    throw std::invalid_argument("make_public_set: need at least one sample");
  }
  std::vector<std::vector<double>> means(public_classes);
  for (std::size_t c = 0; c < public_classes; ++c) {
    std::vector<double> mean = class_mean(seed, c, dim);
    // Rotate consecutive coordinate planes by `shift` radians ...
    const double cs = std::cos(shift), sn = std::sin(shift);
    for (std::size_t j = 0; j + 1 < dim; j += 2) {
      const double a = mean[j], b = mean[j + 1];
      mean[j] = cs * a - sn * b;
      mean[j + 1] = sn * a + cs * b;
    }
    // ... and translate along a seeded per-class unit direction.
    Rng dir_rng(hash_combine(seed, kShiftStream, c));
    std::vector<double> dir(dim);
    double norm = 0.0;
    for (auto& v : dir) {
      v = dir_rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (std::size_t j = 0; j < dim; ++j) mean[j] += shift * dir[j] / norm;
    }
    means[c] = std::move(mean);
  }
  return sample_clusters(seed, means, p, spread, kPubStream, kPublicIdOffset);
}

namespace {

LabeledDataset gather_rows(const LabeledDataset& src,
                           const std::vector<std::size_t>& rows) {
  const std::size_t dim = src.feature_dim();
  LabeledDataset out;
  out.num_classes = src.num_classes;
  out.seed = src.seed;
  std::vector<double> feats(rows.size() * dim);
  auto data = src.features.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(rows[i] * dim), dim,
                feats.begin() + static_cast<std::ptrdiff_t>(i * dim));
    out.labels.push_back(src.labels[rows[i]]);
    out.ids.push_back(src.ids[rows[i]]);
  }
  out.features = Tensor::from_data({rows.size(), dim}, std::move(feats), false);
  return out;
}

// Largest-remainder rounding of n * proportions into integer counts that
// sum exactly to n.
std::vector<std::size_t> apportion(std::size_t n,
                                   const std::vector<double>& proportions) {
  const std::size_t k = proportions.size();
  std::vector<std::size_t> counts(k);
  std::vector<std::pair<double, std::size_t>> remainders(k);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double ideal = static_cast<double>(n) * proportions[i];
    counts[i] = static_cast<std::size_t>(std::floor(ideal));
    assigned += counts[i];
    remainders[i] = {ideal - std::floor(ideal), i};
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n && i < k; ++i, ++assigned) {
    ++counts[remainders[i].second];
  }
  return counts;
}

}  // namespace

std::vector<ClientSplit> partition(const LabeledDataset& data,
                                   const PartitionPlan& plan,
                                   double dirichlet_alpha, std::uint64_t seed) {
  plan.validate(data.size());
  if (dirichlet_alpha <= 0.0) {
    throw std::invalid_argument("partition: dirichlet_alpha must be positive");
  }
  const std::size_t num_classes = data.num_classes;
  Rng rng(hash_combine(seed, kPartStream));

  std::vector<std::vector<std::size_t>> pools(num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    pools[data.labels[i]].push_back(i);
  }
  for (auto& pool : pools) rng.shuffle(pool);

  std::vector<ClientSplit> out;
  for (const auto& quota : plan.clients) {
    const std::size_t want = quota.train_size + quota.test_size;
    std::vector<double> props = rng.dirichlet(dirichlet_alpha, num_classes);
    std::vector<std::size_t> counts = apportion(want, props);

    std::vector<std::size_t> rows;
    rows.reserve(want);
    for (std::size_t c = 0; c < num_classes; ++c) {
      const std::size_t take = std::min(counts[c], pools[c].size());
      rows.insert(rows.end(), pools[c].end() - static_cast<std::ptrdiff_t>(take),
                  pools[c].end());
      pools[c].resize(pools[c].size() - take);
    }
    // Dirichlet draws can demand more of a label than remains; fill the
    // shortfall from whichever pools still have the most samples.
    while (rows.size() < want) {
      std::size_t richest = 0;
      for (std::size_t c = 1; c < num_classes; ++c) {
        if (pools[c].size() > pools[richest].size()) richest = c;
      }
      if (pools[richest].empty()) {
        throw std::invalid_argument("partition: source exhausted");
      }
      rows.push_back(pools[richest].back());
      pools[richest].pop_back();
    }
    rng.shuffle(rows);

    ClientSplit split;
    split.train = gather_rows(
        data, {rows.begin(),
               rows.begin() + static_cast<std::ptrdiff_t>(quota.train_size)});
    split.test = gather_rows(
        data, {rows.begin() + static_cast<std::ptrdiff_t>(quota.train_size),
               rows.end()});
    out.push_back(std::move(split));
  }
  return out;
}

namespace {

// 4-connectivity component labeling; returns labels (-1 = background) and
// the component count.
std::pair<std::vector<int>, int> label_components(const std::vector<int>& mask,
                                                  std::size_t h,
                                                  std::size_t w) {
  std::vector<int> labels(mask.size(), -1);
  int next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (mask[start] == 0 || labels[start] != -1) continue;
    labels[start] = next;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t r = p / w, c = p % w;
      const std::size_t neighbors[4] = {
          r > 0 ? p - w : p, r + 1 < h ? p + w : p,
          c > 0 ? p - 1 : p, c + 1 < w ? p + 1 : p};
      for (std::size_t q : neighbors) {
        if (q != p && mask[q] == 1 && labels[q] == -1) {
          labels[q] = next;
          stack.push_back(q);
        }
      }
    }
    ++next;
  }
  return {std::move(labels), next};
}

// Multi-source chamfer-weighted Dijkstra from the given seed pixels.
std::vector<double> chamfer_distance(const std::vector<std::size_t>& sources,
                                     std::size_t h, std::size_t w) {
  constexpr double kInf = 1e30;
  const double diag = std::sqrt(2.0);
  std::vector<double> dist(h * w, kInf);
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  for (std::size_t s : sources) {
    dist[s] = 0.0;
    heap.emplace(0.0, s);
  }
  while (!heap.empty()) {
    auto [d, p] = heap.top();
    heap.pop();
    if (d > dist[p]) continue;
    const std::size_t r = p / w, c = p % w;
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        if (dr == 0 && dc == 0) continue;
        const auto nr = static_cast<std::ptrdiff_t>(r) + dr;
        const auto nc = static_cast<std::ptrdiff_t>(c) + dc;
        if (nr < 0 || nc < 0 || nr >= static_cast<std::ptrdiff_t>(h) ||
            nc >= static_cast<std::ptrdiff_t>(w)) {
          continue;
        }
        const std::size_t q =
            static_cast<std::size_t>(nr) * w + static_cast<std::size_t>(nc);
        const double nd = d + ((dr == 0 || dc == 0) ? 1.0 : diag);
        if (nd < dist[q]) {
          dist[q] = nd;
          heap.emplace(nd, q);
        }
      }
    }
  }
  return dist;
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> distance_transforms(
    const std::vector<int>& mask, std::size_t h, std::size_t w) {
  if (mask.size() != h * w) {
    throw std::invalid_argument("distance_transforms: mask size mismatch");
  }
  for (int v : mask) {
    if (v != 0 && v != 1) {
      throw std::invalid_argument("distance_transforms: mask must be binary");
    }
  }
  auto [labels, count] = label_components(mask, h, w);

  // Border pixels per component: foreground with a background 4-neighbor
  // (grid edges count as background).
  std::vector<std::vector<std::size_t>> borders(
      static_cast<std::size_t>(std::max(count, 0)));
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (mask[p] == 0) continue;
    const std::size_t r = p / w, c = p % w;
    const bool on_border =
        r == 0 || r + 1 == h || c == 0 || c + 1 == w || mask[p - w] == 0 ||
        mask[p + w] == 0 || mask[p - 1] == 0 || mask[p + 1] == 0;
    if (on_border) borders[static_cast<std::size_t>(labels[p])].push_back(p);
  }

  const double saturate = static_cast<double>(h + w);
  std::vector<double> d1(h * w, saturate), d2(h * w, saturate);
  if (count >= 1) {
    std::vector<std::vector<double>> per_comp;
    per_comp.reserve(borders.size());
    for (const auto& b : borders) per_comp.push_back(chamfer_distance(b, h, w));
    for (std::size_t p = 0; p < h * w; ++p) {
      double best = per_comp[0][p], second = saturate;
      for (std::size_t k = 1; k < per_comp.size(); ++k) {
        const double d = per_comp[k][p];
        if (d < best) {
          second = best;
          best = d;
        } else if (d < second) {
          second = d;
        }
      }
      d1[p] = best;
      d2[p] = count >= 2 ? second : saturate;
    }
  }
  return {std::move(d1), std::move(d2)};
}

SegDataset make_segmentation(std::uint64_t seed, std::size_t n, std::size_t h,
                             std::size_t w, double beta0, double sigma) {
  if (h == 0 || w == 0 || h > 64 || w > 64) {
    throw std::invalid_argument("make_segmentation: grid must be within 64x64");
  }
  SegDataset ds;
  ds.height = h;
  ds.width = w;
  std::vector<double> images(n * h * w);

  for (std::size_t img = 0; img < n; ++img) {
    Rng rng(hash_combine(seed, kSegStream, img));
    std::vector<double> field(h * w);
    std::vector<int> mask(h * w);
    // Redraw blob layouts until the foreground fraction is reasonable;
    // overwhelming majority of draws pass on the first try.
    for (int attempt = 0;; ++attempt) {
      const std::size_t blobs = 1 + rng.next_below(3);
      std::vector<double> cy(blobs), cx(blobs), radius(blobs);
      for (std::size_t b = 0; b < blobs; ++b) {
        cy[b] = rng.uniform(0.15, 0.85) * static_cast<double>(h);
        cx[b] = rng.uniform(0.15, 0.85) * static_cast<double>(w);
        radius[b] = rng.uniform(0.10, 0.28) * static_cast<double>(std::min(h, w));
      }
      std::size_t fg = 0;
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          double v = 0.0;
          for (std::size_t b = 0; b < blobs; ++b) {
            const double dy = (static_cast<double>(r) + 0.5) - cy[b];
            const double dx = (static_cast<double>(c) + 0.5) - cx[b];
            v += std::exp(-(dy * dy + dx * dx) / (2.0 * radius[b] * radius[b]));
          }
          field[r * w + c] = v;
          mask[r * w + c] = v > 0.5 ? 1 : 0;
          fg += static_cast<std::size_t>(mask[r * w + c]);
        }
      }
      const double frac = static_cast<double>(fg) / static_cast<double>(h * w);
      if (frac >= 0.05 && frac <= 0.6) break;
      if (attempt > 1000) {
        throw std::runtime_error("make_segmentation: rejection loop stuck");
      }
    }
    // The observation applies a per-image contrast/brightness jitter and
    // heavy pixel noise on top of the latent blob field, so a single pixel's
    // intensity does not determine its label; models must denoise from
    // context and calibrate contrast across images, which rewards training
    // pools larger than a handful of grids.
    const double gain = rng.uniform(0.75, 1.25);
    const double bias = rng.uniform(-0.15, 0.15);
    for (std::size_t p = 0; p < h * w; ++p) {
      images[img * h * w + p] = gain * field[p] + bias + 0.30 * rng.normal();
    }
    auto [d1, d2] = distance_transforms(mask, h, w);
    WeightMapParams params;
    params.beta0 = beta0;
    params.sigma = sigma;
    params.class_balance = inverse_frequency_balance(mask, 2);
    ds.beta.push_back(weight_map(mask, d1, d2, params));
    ds.masks.push_back(std::move(mask));
    ds.d1.push_back(std::move(d1));
    ds.d2.push_back(std::move(d2));
  }
  ds.images = Tensor::from_data({n, h, w, 1}, std::move(images), false);
  return ds;
}

LabeledDataset dataset_slice(const LabeledDataset& data, std::size_t start,
                             std::size_t count) {
  if (start + count > data.size()) {
    throw std::out_of_range("dataset_slice: range exceeds dataset");
  }
  std::vector<std::size_t> rows(count);
  std::iota(rows.begin(), rows.end(), start);
  return gather_rows(data, rows);
}

SegDataset seg_slice(const SegDataset& data, std::size_t start,
                     std::size_t count) {
  if (start + count > data.size()) {
    throw std::out_of_range("seg_slice: range exceeds dataset");
  }
  SegDataset out;
  out.height = data.height;
  out.width = data.width;
  std::vector<std::size_t> rows(count);
  std::iota(rows.begin(), rows.end(), start);
  out.images = rows_subset(data.images, rows);
  for (std::size_t i = start; i < start + count; ++i) {
    out.masks.push_back(data.masks[i]);
    out.d1.push_back(data.d1[i]);
    out.d2.push_back(data.d2[i]);
    out.beta.push_back(data.beta[i]);
  }
  return out;
}

Tensor rows_subset(const Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t lead = t.shape()[0];
  const std::size_t row_size = t.size() / lead;
  Shape shape = t.shape();
  shape[0] = rows.size();
  std::vector<double> data(rows.size() * row_size);
  auto src = t.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * row_size),
                row_size,
                data.begin() + static_cast<std::ptrdiff_t>(i * row_size));
  }
  return Tensor::from_data(std::move(shape), std::move(data), false);
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n,
                                                    std::size_t batch_size,
                                                    Rng& rng) {
  if (batch_size == 0) {
    throw std::invalid_argument("epoch_batches: batch size must be positive");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(
                                             std::min(n, i + batch_size)));
  }
  return batches;
}

namespace {
constexpr std::uint32_t kDatasetVersion = 1;
}

void save_dataset(const std::string& path, const LabeledDataset& dataset) {
  nlohmann::json header = {
      {"shape", dataset.features.shape()},
      {"classes", dataset.num_classes},
      {"seed", dataset.seed},
      {"version", kDatasetVersion},
      {"labels", dataset.labels},
      {"ids", dataset.ids},
  };
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : dataset.features.data()) io::write_f64(os, v);
  if (!os) throw std::runtime_error("write failed on " + path);
}

LabeledDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  const auto len = io::read_le<std::uint32_t>(is, "dataset header length");
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw std::runtime_error("truncated dataset header in " + path);
  auto header = nlohmann::json::parse(text);
  if (header.at("version").get<std::uint32_t>() != kDatasetVersion) {
    throw std::runtime_error("unsupported dataset version in " + path);
  }
  LabeledDataset ds;
  Shape shape = header.at("shape").get<Shape>();
  ds.num_classes = header.at("classes").get<std::size_t>();
  ds.seed = header.at("seed").get<std::uint64_t>();
  ds.labels = header.at("labels").get<std::vector<std::size_t>>();
  ds.ids = header.at("ids").get<std::vector<std::uint64_t>>();
  std::vector<double> feats(shape_size(shape));
  for (auto& v : feats) v = io::read_f64(is, "dataset features");
  ds.features = Tensor::from_data(std::move(shape), std::move(feats), false);
  return ds;
}

}  // namespace fedhelp
