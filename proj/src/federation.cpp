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

#include "fedhelp/federation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <limits>
#include <stdexcept>

#include "fedhelp/rng.hpp"
#include "fedhelp/serialize.hpp"

namespace fedhelp {

namespace {

constexpr std::uint64_t kModelStream = 0x6d6f646c;  // client model init

void check_nonempty_train(const ClientHandle& client) {
  if (client.train_size() == 0) {
    throw std::invalid_argument("client " + std::to_string(client.id) +
                                ": empty private dataset");
  }
}

// Flattens the batch's masks and weight maps in pixel order.
void collect_pixels(const SegDataset& data,
                    const std::vector<std::size_t>& batch,
                    std::vector<std::size_t>* mask, std::vector<double>* beta) {
  mask->clear();
  beta->clear();
  for (std::size_t i : batch) {
    for (int v : data.masks[i]) mask->push_back(static_cast<std::size_t>(v));
    beta->insert(beta->end(), data.beta[i].begin(), data.beta[i].end());
  }
}

std::vector<std::size_t> draw_public_batch(Rng& rng, std::size_t public_size,
                                           std::size_t batch_size) {
  std::vector<std::size_t> rows(batch_size);
  for (auto& r : rows) r = rng.next_below(public_size);
  return rows;
}

double term_value(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

}  // namespace

ClientHandle make_small_client(std::size_t id, TaskKind task,
                               const ModelSpec& spec,
                               std::size_t public_classes,
                               std::size_t public_size, std::size_t num_apis,
                               std::uint64_t seed) {
  ClientHandle client;
  client.id = id;
  client.kind = ClientKind::small;
  client.task = task;
  client.surrogate =
      build_surrogate(spec, public_classes, hash_combine(seed, id, kModelStream));
  client.mixture = make_api_mixture(public_size, num_apis);
  return client;
}

ClientHandle make_large_client(std::size_t id, TaskKind task,
                               const ModelSpec& large_spec,
                               const ModelSpec& proxy_spec,
                               std::uint64_t seed) {
  ClientHandle client;
  client.id = id;
  client.kind = ClientKind::large;
  client.task = task;
  client.large =
      build_classifier(large_spec, hash_combine(seed, id, kModelStream));
  client.proxy = build_classifier(
      proxy_spec, hash_combine(hash_combine(seed, id, kModelStream), 1));
  return client;
}

ParamVector small_client_round(ClientHandle& client, const ParamVector* global,
                               const PublicData& pub,
                               const FederationConfig& config,
                               std::size_t round, TrainStats* stats) {
  check_nonempty_train(client);
  if (global) client.surrogate.load_params(*global);
  if (!client.optimizer) {
    client.optimizer =
        std::make_unique<SgdMomentum>(config.lr_small, config.momentum);
  }
  const bool use_public = config.weights.lambda_j > 0.0;
  const std::size_t public_size = pub.size(client.task);
  if (use_public && public_size == 0) {
    throw std::invalid_argument("client " + std::to_string(client.id) +
                                ": guidance enabled but no public data");
  }
  std::vector<Tensor> params = client.surrogate.params();
  if (client.mixture.num_apis() > 0) {
    params.push_back(client.mixture.logits_alpha);
  }

  Rng rng(hash_combine(config.seed, client.id, round));
  const std::size_t n = client.train_size();
  TrainStats sums;
  std::size_t steps = 0;
  std::vector<std::size_t> mask, pub_mask;
  std::vector<double> beta, pub_beta;

  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    for (const auto& batch : epoch_batches(n, config.batch_size, rng)) {
      Graph g;
      Tensor private_loss, guidance;
      if (client.task == TaskKind::classification) {
        Tensor x = rows_subset(client.train.features, batch);
        std::vector<std::size_t> y;
        y.reserve(batch.size());
        for (auto i : batch) y.push_back(client.train.labels[i]);
        private_loss =
            cross_entropy(g, client.surrogate.forward_private_logits(g, x), y);
        if (use_public) {
          const auto rows =
              draw_public_batch(rng, public_size, config.batch_size);
          Tensor px = rows_subset(pub.classification.features, rows);
          std::vector<std::size_t> py;
          py.reserve(rows.size());
          for (auto r : rows) py.push_back(pub.classification.labels[r]);
          Tensor dists;
          if (pub.cache) {
            std::vector<std::uint64_t> ids;
            ids.reserve(rows.size());
            for (auto r : rows) ids.push_back(pub.classification.ids[r]);
            dists = pub.cache->get_distributions(ids);
          }
          guidance = guidance_loss(
              g, client.surrogate.forward_public_logits(g, px), py, dists,
              client.mixture, rows, config.weights.lambda_r);
        }
      } else {
        Tensor x = rows_subset(client.seg_train.images, batch);
        collect_pixels(client.seg_train, batch, &mask, &beta);
        private_loss = weighted_pixel_ce(
            g, client.surrogate.forward_private_pixel_logits(g, x), mask, beta);
        if (use_public) {
          const auto rows =
              draw_public_batch(rng, public_size, config.batch_size);
          Tensor px = rows_subset(pub.segmentation.images, rows);
          collect_pixels(pub.segmentation, rows, &pub_mask, &pub_beta);
          Tensor dists;
          if (pub.cache) {
            std::vector<std::uint64_t> ids;
            ids.reserve(rows.size());
            for (auto r : rows) ids.push_back(pub.segmentation_ids[r]);
            dists = pub.cache->get_distributions(ids);
          }
          guidance = pixel_guidance_loss(
              g, client.surrogate.forward_public_pixel_logits(g, px), pub_mask,
              pub_beta, dists, client.mixture, rows, config.weights.lambda_r);
        }
      }
      Tensor loss =
          joint_small_loss(g, private_loss, guidance, config.weights.lambda_j);
      SgdMomentum::zero_grad(params);
      g.backward(loss);
      client.optimizer->step(params);
      sums.ce += private_loss.item();
      sums.guidance += term_value(guidance);
      ++steps;
    }
  }
  if (stats && steps > 0) {
    stats->ce = sums.ce / static_cast<double>(steps);
    stats->guidance = sums.guidance / static_cast<double>(steps);
    stats->fkd = 0.0;
    stats->rkd = 0.0;
  }
  return client.surrogate.flatten_params();
}

ParamVector large_client_round(ClientHandle& client, const ParamVector* global,
                               const FederationConfig& config,
                               std::size_t round, TrainStats* stats) {
  check_nonempty_train(client);
  if (global) client.proxy.load_params(*global);
  if (!client.optimizer) {
    client.optimizer =
        std::make_unique<SgdMomentum>(config.lr_large, config.momentum);
  }
  std::vector<Tensor> params = client.large.params();
  for (auto& p : client.proxy.params()) params.push_back(p);

  const double lambda_f = config.weights.lambda_f;
  const double lambda_b = config.weights.lambda_b;
  const bool need_proxy = lambda_f > 0.0 || lambda_b > 0.0;

  Rng rng(hash_combine(config.seed, client.id, round));
  const std::size_t n = client.train_size();
  TrainStats sums;
  std::size_t steps = 0;
  std::vector<std::size_t> mask;
  std::vector<double> beta;

  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    for (const auto& batch : epoch_batches(n, config.batch_size, rng)) {
      Graph g;
      Tensor ce, fwd, rank;
      if (client.task == TaskKind::classification) {
        Tensor x = rows_subset(client.train.features, batch);
        std::vector<std::size_t> y;
        y.reserve(batch.size());
        for (auto i : batch) y.push_back(client.train.labels[i]);
        Tensor large_logits = client.large.forward_logits(g, x);
        ce = cross_entropy(g, large_logits, y);
        if (need_proxy) {
          Tensor proxy_logits = client.proxy.forward_logits(g, x);
          if (lambda_f > 0.0) fwd = forward_kd(g, large_logits, proxy_logits);
          if (lambda_b > 0.0) {
            if (config.symmetric_backward) {
              rank = symmetric_kd(g, large_logits, proxy_logits);
            } else {
              rank = ranking_kd(g, large_logits,
                                top_omega(proxy_logits,
                                          config.weights.omega_size));
            }
          }
        }
      } else {
        Tensor x = rows_subset(client.seg_train.images, batch);
        collect_pixels(client.seg_train, batch, &mask, &beta);
        Tensor large_logits = client.large.forward_pixel_logits(g, x);
        ce = weighted_pixel_ce(g, large_logits, mask, beta);
        if (need_proxy) {
          Tensor proxy_logits = client.proxy.forward_pixel_logits(g, x);
          if (lambda_f > 0.0) {
            fwd = pixel_forward_kd(g, large_logits, proxy_logits);
          }
          if (lambda_b > 0.0) {
            if (config.symmetric_backward) {
              rank = g.add(pixel_forward_kd(g, large_logits, proxy_logits),
                           pixel_forward_kd(g, proxy_logits, large_logits));
            } else {
              rank = pixel_ranking_kd(
                  g, large_logits,
                  top_omega(g.flatten_rows(proxy_logits),
                            config.weights.omega_size));
            }
          }
        }
      }
      Tensor loss = large_client_loss(g, ce, fwd, rank, lambda_f, lambda_b);
      SgdMomentum::zero_grad(params);
      g.backward(loss);
      client.optimizer->step(params);
      sums.ce += ce.item();
      sums.fkd += term_value(fwd);
      sums.rkd += term_value(rank);
      ++steps;
    }
  }
  if (stats && steps > 0) {
    stats->ce = sums.ce / static_cast<double>(steps);
    stats->guidance = 0.0;
    stats->fkd = sums.fkd / static_cast<double>(steps);
    stats->rkd = sums.rkd / static_cast<double>(steps);
  }
  return client.proxy.flatten_params();
}

ParamVector fedavg_aggregate(
    const std::vector<std::pair<ParamVector, std::uint64_t>>& uploads) {
  if (uploads.empty()) {
    throw std::invalid_argument("fedavg_aggregate: no uploads");
  }
  const ParamVector& first = uploads.front().first;
  ParamVector out;
  out.layout = first.layout;
  out.values.assign(first.values.size(), 0.0);
  double total_weight = 0.0;
  for (const auto& [pv, weight] : uploads) {
    if (!pv.layout_matches(first)) {
      throw std::invalid_argument("fedavg_aggregate: layout mismatch");
    }
    if (weight == 0) {
      throw std::invalid_argument("fedavg_aggregate: zero client weight");
    }
    const auto w = static_cast<double>(weight);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      out.values[i] += w * pv.values[i];
    }
    total_weight += w;
  }
  for (auto& v : out.values) v /= total_weight;
  return out;
}

namespace {

EvalMetrics eval_classification(const std::vector<double>& logits,
                                std::size_t num_classes,
                                const std::vector<std::size_t>& labels) {
  const auto preds = argmax_rows(logits, num_classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (preds[i] == labels[i]) ++correct;
  }
  EvalMetrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  return m;
}

EvalMetrics eval_segmentation(const std::vector<double>& pixel_logits,
                              const SegDataset& data) {
  const std::size_t pixels = data.height * data.width;
  const auto preds = argmax_rows(pixel_logits, 2);
  std::size_t correct = 0, total = 0;
  double dice_sum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::size_t inter = 0, pred_fg = 0, true_fg = 0;
    for (std::size_t q = 0; q < pixels; ++q) {
      const std::size_t pred = preds[i * pixels + q];
      const auto truth = static_cast<std::size_t>(data.masks[i][q]);
      correct += pred == truth;
      pred_fg += pred;
      true_fg += truth;
      inter += pred == 1 && truth == 1;
    }
    total += pixels;
    dice_sum += (pred_fg + true_fg == 0)
                    ? 1.0
                    : 2.0 * static_cast<double>(inter) /
                          static_cast<double>(pred_fg + true_fg);
  }
  EvalMetrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  m.dice = dice_sum / static_cast<double>(data.size());
  return m;
}

}  // namespace

EvalMetrics evaluate_client(const ClientHandle& client) {
  Graph g;
  if (client.task == TaskKind::classification) {
    if (client.test.size() == 0) {
      throw std::invalid_argument("evaluate_client: empty test set");
    }
    Tensor logits =
        client.kind == ClientKind::small
            ? client.surrogate.forward_private_logits(g, client.test.features)
            : client.large.forward_logits(g, client.test.features);
    std::vector<double> vals(logits.data().begin(), logits.data().end());
    return eval_classification(vals, logits.shape()[1], client.test.labels);
  }
  if (client.seg_test.size() == 0) {
    throw std::invalid_argument("evaluate_client: empty test set");
  }
  Tensor logits =
      client.kind == ClientKind::small
          ? client.surrogate.forward_private_logits(g, client.seg_test.images)
          : client.large.forward_logits(g, client.seg_test.images);
  std::vector<double> vals(logits.data().begin(), logits.data().end());
  return eval_segmentation(vals, client.seg_test);
}

FederationState run_federation(std::vector<ClientHandle>& clients,
                               const PublicData& pub,
                               const FederationConfig& config) {
  if (clients.empty()) {
    throw std::invalid_argument("run_federation: no clients");
  }
  for (std::size_t i = 1; i < clients.size(); ++i) {
    if (clients[i].id <= clients[i - 1].id) {
      throw std::invalid_argument(
          "run_federation: clients must be in ascending id order");
    }
  }
  config.weights.validate();

  FederationState state;
  bool have_global = false;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stagnant = 0;

  for (std::size_t t = 1; t <= config.t_max; ++t) {
    const ParamVector* global = have_global ? &state.global : nullptr;
    std::vector<ParamVector> uploads(clients.size());
    std::vector<TrainStats> stats(clients.size());

    auto run_client = [&](std::size_t k) {
      ClientHandle& c = clients[k];
      try {
        uploads[k] = c.kind == ClientKind::small
                         ? small_client_round(c, global, pub, config, t,
                                              &stats[k])
                         : large_client_round(c, global, config, t, &stats[k]);
      } catch (const std::exception& e) {
        throw std::runtime_error("round " + std::to_string(t) + ", client " +
                                 std::to_string(c.id) + ": " + e.what());
      }
    };

    if (config.parallel && clients.size() > 1) {
      std::vector<std::future<void>> tasks;
      tasks.reserve(clients.size());
      for (std::size_t k = 0; k < clients.size(); ++k) {
        tasks.push_back(std::async(std::launch::async, run_client, k));
      }
      for (auto& task : tasks) task.get();
    } else {
      for (std::size_t k = 0; k < clients.size(); ++k) run_client(k);
    }

    RoundReport report;
    report.round = t;
    std::vector<std::size_t> upload_sizes(clients.size(), 0);
    for (std::size_t k = 0; k < clients.size(); ++k) {
      upload_sizes[k] = uploads[k].values.size();
    }
    if (config.aggregate) {
      std::vector<std::pair<ParamVector, std::uint64_t>> weighted;
      weighted.reserve(clients.size());
      for (std::size_t k = 0; k < clients.size(); ++k) {
        weighted.emplace_back(
            std::move(uploads[k]),
            config.uniform_weights ? 1 : clients[k].train_size());
      }
      state.global = fedavg_aggregate(weighted);
      have_global = true;
      report.aggregation_checksum =
          io::fnv1a64(state.global.values.data(),
                      state.global.values.size() * sizeof(double));
    }

    double acc_sum = 0.0;
    for (std::size_t k = 0; k < clients.size(); ++k) {
      ClientRoundRow row;
      row.round = t;
      row.client_id = clients[k].id;
      row.kind = clients[k].kind;
      row.losses = stats[k];
      row.eval = evaluate_client(clients[k]);
      row.upload_bytes =
          config.aggregate ? upload_sizes[k] * sizeof(double) : 0;
      acc_sum += row.eval.accuracy;
      report.rows.push_back(std::move(row));
    }
    report.mean_accuracy = acc_sum / static_cast<double>(clients.size());
    state.history.push_back(std::move(report));

    if (state.history.back().mean_accuracy > best + config.epsilon) {
      best = state.history.back().mean_accuracy;
      stagnant = 0;
    } else {
      ++stagnant;
      if (stagnant >= config.patience) {
        state.early_stopped = true;
        break;
      }
    }
  }

  state.rounds_run = state.history.size();
  const std::size_t window = std::min<std::size_t>(10, state.history.size());
  state.final_accuracy.assign(clients.size(), 0.0);
  const bool seg = clients.front().task == TaskKind::segmentation;
  if (seg) state.final_dice.assign(clients.size(), 0.0);
  for (std::size_t r = state.history.size() - window; r < state.history.size();
       ++r) {
    for (std::size_t k = 0; k < clients.size(); ++k) {
      state.final_accuracy[k] += state.history[r].rows[k].eval.accuracy;
      if (seg) state.final_dice[k] += state.history[r].rows[k].eval.dice;
    }
  }
  for (auto& a : state.final_accuracy) a /= static_cast<double>(window);
  for (auto& d : state.final_dice) d /= static_cast<double>(window);
  return state;
}

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(const std::string& path,
                       const std::vector<RoundReport>& history) {
  std::ofstream os(path, std::ios::binary);  // binary: byte-stable newlines
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "round,client_id,kind,loss_ce,loss_guidance,loss_fkd,loss_rkd,acc,dice\n";
  for (const auto& report : history) {
    for (const auto& row : report.rows) {
      os << row.round << ',' << row.client_id << ','
         << (row.kind == ClientKind::small ? "small" : "large") << ','
         << format_double(row.losses.ce) << ','
         << format_double(row.losses.guidance) << ','
         << format_double(row.losses.fkd) << ','
         << format_double(row.losses.rkd) << ','
         << format_double(row.eval.accuracy) << ',';
      if (row.eval.dice >= 0.0) os << format_double(row.eval.dice);
      os << '\n';
    }
  }
  if (!os) throw std::runtime_error("write failed on " + path);
}

}  // namespace fedhelp
