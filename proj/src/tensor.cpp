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

#include "fedhelp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fedhelp {

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {
[[noreturn]] void shape_error(const std::string& op, const Shape& a,
                              const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b));
}
}  // namespace

// --- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_size(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_size(shape) != data.size()) {
    throw std::invalid_argument("Tensor::from_data: " + shape_str(shape) +
                                " does not hold " + std::to_string(data.size()) +
                                " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() const { return impl_->data; }

std::span<const double> Tensor::grad() const {
  if (!impl_ || impl_->grad.empty()) return {};
  return impl_->grad;
}

void Tensor::zero_grad() const {
  impl_->grad.assign(impl_->data.size(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("Tensor::item: tensor has size " +
                                std::to_string(size()));
  }
  return impl_->data[0];
}

double Tensor::at(std::size_t flat_index) const { return impl_->data[flat_index]; }

Tensor Tensor::detach() const {
  return from_data(impl_->shape, impl_->data, false);
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
  if (!impl_->requires_grad) return;
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) impl_->grad[i] += g[i];
}

// --- Graph -----------------------------------------------------------------

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0]) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = &bd[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  const bool ng = a.requires_grad() || b.requires_grad();
  Tensor result = Tensor::from_data({m, n}, std::move(out), ng);
  if (ng) {
    Tensor ta = a, tb = b, to = result;
    nodes_.push_back({result, [ta, tb, to, m, k, n]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      if (ta.requires_grad()) {
        std::vector<double> ga(m * k, 0.0);
        const auto bd2 = tb.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = &g[i * n];
            const double* brow = &bd2[p * n];
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] = acc;
          }
        }
        ta.accumulate_grad(ga);
      }
      if (tb.requires_grad()) {
        std::vector<double> gb(k * n, 0.0);
        const auto ad2 = ta.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ad2[i * k + p];
            const double* grow = &g[i * n];
            double* gbrow = &gb[p * n];
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
        tb.accumulate_grad(gb);
      }
    }});
  }
  return result;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  const bool ng = a.requires_grad() || b.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, tb = b, to = result;
    nodes_.push_back({result, [ta, tb, to]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(g.begin(), g.end());
      ta.accumulate_grad(gv);
      tb.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.shape().size() != 2 || v.shape().size() != 1 ||
      m.shape()[1] != v.shape()[0]) {
    shape_error("add_rowvec", m.shape(), v.shape());
  }
  const std::size_t rows = m.shape()[0], cols = m.shape()[1];
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = m.data()[r * cols + c] + v.data()[c];
  const bool ng = m.requires_grad() || v.requires_grad();
  Tensor result = Tensor::from_data(m.shape(), std::move(out), ng);
  if (ng) {
    Tensor tm = m, tv = v, to = result;
    nodes_.push_back({result, [tm, tv, to, rows, cols]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      if (tm.requires_grad()) {
        std::vector<double> gm(g.begin(), g.end());
        tm.accumulate_grad(gm);
      }
      if (tv.requires_grad()) {
        std::vector<double> gv(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
        tv.accumulate_grad(gv);
      }
    }});
  }
  return result;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  const bool ng = a.requires_grad() || b.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, tb = b, to = result;
    nodes_.push_back({result, [ta, tb, to]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      if (ta.requires_grad()) {
        std::vector<double> gv(g.begin(), g.end());
        ta.accumulate_grad(gv);
      }
      if (tb.requires_grad()) {
        std::vector<double> gv(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] = -g[i];
        tb.accumulate_grad(gv);
      }
    }});
  }
  return result;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  const bool ng = a.requires_grad() || b.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, tb = b, to = result;
    nodes_.push_back({result, [ta, tb, to]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      if (ta.requires_grad()) {
        std::vector<double> gv(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] = g[i] * tb.data()[i];
        ta.accumulate_grad(gv);
      }
      if (tb.requires_grad()) {
        std::vector<double> gv(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] = g[i] * ta.data()[i];
        tb.accumulate_grad(gv);
      }
    }});
  }
  return result;
}

Tensor Graph::scalar_mul(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, to = result;
    nodes_.push_back({result, [ta, to, s]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] = g[i] * s;
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, to = result;
    nodes_.push_back({result, [ta, to]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(g.size());
      for (std::size_t i = 0; i < g.size(); ++i)
        gv[i] = ta.data()[i] > 0.0 ? g[i] : 0.0;
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, to = result;
    nodes_.push_back({result, [ta, to]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] = g[i] * to.data()[i];
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, to = result;
    nodes_.push_back({result, [ta, to]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] = g[i] / ta.data()[i];
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::xlogx(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = x > 0.0 ? x * std::log(x) : 0.0;
  }
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, to = result;
    nodes_.push_back({result, [ta, to]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = ta.data()[i];
        gv[i] = x > 0.0 ? g[i] * (std::log(x) + 1.0) : 0.0;
      }
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data({1}, {total}, ng);
  if (ng) {
    Tensor ta = a, to = result;
    nodes_.push_back({result, [ta, to]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(ta.size(), g[0]);
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::mean(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const double n = static_cast<double>(a.size());
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data({1}, {total / n}, ng);
  if (ng) {
    Tensor ta = a, to = result;
    nodes_.push_back({result, [ta, to, n]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(ta.size(), g[0] / n);
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::reshape(const Tensor& a, Shape new_shape) {
  if (shape_size(new_shape) != a.size()) {
    shape_error("reshape", a.shape(), new_shape);
  }
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data(std::move(new_shape),
                                    {a.data().begin(), a.data().end()}, ng);
  if (ng) {
    Tensor ta = a, to = result;
    nodes_.push_back({result, [ta, to]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(g.begin(), g.end());
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::flatten_rows(const Tensor& a) {
  if (a.shape().empty()) shape_error("flatten_rows", a.shape(), {});
  const std::size_t cols = a.shape().back();
  return reshape(a, {a.size() / cols, cols});
}

Tensor Graph::log_softmax(const Tensor& a) {
  if (a.shape().empty() || a.shape().back() < 1) {
    throw std::invalid_argument("log_softmax: needs a class axis, got " +
                                shape_str(a.shape()));
  }
  const std::size_t c = a.shape().back();
  const std::size_t rows = a.size() / c;
  std::vector<double> out(a.size());
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &ad[r * c];
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = row[j] - lse;
  }
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, to = result;
    nodes_.push_back({result, [ta, to, rows, c]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(g.size());
      for (std::size_t r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < c; ++j) gsum += g[r * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          const double p = std::exp(to.data()[r * c + j]);
          gv[r * c + j] = g[r * c + j] - p * gsum;
        }
      }
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::gather_pairs(
    const Tensor& a, std::vector<std::pair<std::size_t, std::size_t>> idx) {
  if (a.shape().size() != 2) shape_error("gather_pairs", a.shape(), {});
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto [r, c] = idx[i];
    if (r >= rows || c >= cols) {
      throw std::out_of_range("gather_pairs: index (" + std::to_string(r) +
                              "," + std::to_string(c) + ") outside " +
                              shape_str(a.shape()));
    }
    out[i] = a.data()[r * cols + c];
  }
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data({idx.size()}, std::move(out), ng);
  if (ng) {
    Tensor ta = a, to = result;
    auto ids = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(
        std::move(idx));
    nodes_.push_back({result, [ta, to, ids, cols]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(ta.size(), 0.0);
      for (std::size_t i = 0; i < ids->size(); ++i) {
        const auto [r, c] = (*ids)[i];
        gv[r * cols + c] += g[i];
      }
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::take_rows(const Tensor& a, std::vector<std::size_t> rows) {
  if (a.shape().size() != 2) shape_error("take_rows", a.shape(), {});
  const std::size_t nrows = a.shape()[0], cols = a.shape()[1];
  std::vector<double> out(rows.size() * cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= nrows) {
      throw std::out_of_range("take_rows: row " + std::to_string(rows[i]) +
                              " outside " + shape_str(a.shape()));
    }
    std::copy_n(&a.data()[rows[i] * cols], cols, &out[i * cols]);
  }
  const bool ng = a.requires_grad();
  Tensor result =
      Tensor::from_data({rows.size(), cols}, std::move(out), ng);
  if (ng) {
    Tensor ta = a, to = result;
    auto ids = std::make_shared<std::vector<std::size_t>>(std::move(rows));
    nodes_.push_back({result, [ta, to, ids, cols]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(ta.size(), 0.0);
      for (std::size_t i = 0; i < ids->size(); ++i)
        for (std::size_t c = 0; c < cols; ++c)
          gv[(*ids)[i] * cols + c] += g[i * cols + c];
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::scale_elems(const Tensor& a, std::vector<double> weights) {
  if (weights.size() != a.size()) {
    throw std::invalid_argument("scale_elems: " + std::to_string(weights.size()) +
                                " weights for tensor " + shape_str(a.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * weights[i];
  const bool ng = a.requires_grad();
  Tensor result = Tensor::from_data(a.shape(), std::move(out), ng);
  if (ng) {
    Tensor ta = a, to = result;
    auto w = std::make_shared<std::vector<double>>(std::move(weights));
    nodes_.push_back({result, [ta, to, w]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gv(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] = g[i] * (*w)[i];
      ta.accumulate_grad(gv);
    }});
  }
  return result;
}

Tensor Graph::weighted_mixture(const Tensor& alpha, const Tensor& dists) {
  if (alpha.shape().size() != 2 || dists.shape().size() != 3 ||
      alpha.shape()[0] != dists.shape()[0] ||
      alpha.shape()[1] != dists.shape()[1]) {
    shape_error("weighted_mixture", alpha.shape(), dists.shape());
  }
  const std::size_t b = alpha.shape()[0], m = alpha.shape()[1],
                    v = dists.shape()[2];
  std::vector<double> out(b * v, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double a = alpha.data()[i * m + j];
      const double* drow = &dists.data()[(i * m + j) * v];
      double* orow = &out[i * v];
      for (std::size_t q = 0; q < v; ++q) orow[q] += a * drow[q];
    }
  const bool ng = alpha.requires_grad() || dists.requires_grad();
  Tensor result = Tensor::from_data({b, v}, std::move(out), ng);
  if (ng) {
    Tensor ta = alpha, td = dists, to = result;
    nodes_.push_back({result, [ta, td, to, b, m, v]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      if (ta.requires_grad()) {
        std::vector<double> ga(b * m, 0.0);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            const double* drow = &td.data()[(i * m + j) * v];
            for (std::size_t q = 0; q < v; ++q) acc += g[i * v + q] * drow[q];
            ga[i * m + j] = acc;
          }
        ta.accumulate_grad(ga);
      }
      if (td.requires_grad()) {
        std::vector<double> gd(b * m * v, 0.0);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            const double a = ta.data()[i * m + j];
            for (std::size_t q = 0; q < v; ++q)
              gd[(i * m + j) * v + q] = a * g[i * v + q];
          }
        td.accumulate_grad(gd);
      }
    }});
  }
  return result;
}

Tensor Graph::conv2d(const Tensor& image, const Tensor& kernel,
                     const Tensor& bias) {
  if (image.shape().size() != 4 || kernel.shape().size() != 4 ||
      bias.shape().size() != 1 || image.shape()[3] != kernel.shape()[2] ||
      kernel.shape()[3] != bias.shape()[0]) {
    shape_error("conv2d", image.shape(), kernel.shape());
  }
  const std::size_t b = image.shape()[0], h = image.shape()[1],
                    w = image.shape()[2], ci = image.shape()[3];
  const std::size_t kh = kernel.shape()[0], kw = kernel.shape()[1],
                    co = kernel.shape()[3];
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  std::vector<double> out(b * h * w * co);
  const auto img = image.data();
  const auto ker = kernel.data();
  const auto bs = bias.data();
  // Index helpers capture their dimensions by value: the backprop closure
  // below outlives this stack frame.
  auto iidx = [h, w, ci](std::size_t n, std::size_t y, std::size_t x,
                         std::size_t c) {
    return ((n * h + y) * w + x) * ci + c;
  };
  auto kidx = [kw, ci, co](std::size_t dy, std::size_t dx, std::size_t c,
                           std::size_t o) {
    return ((dy * kw + dx) * ci + c) * co + o;
  };
  auto oidx = [h, w, co](std::size_t n, std::size_t y, std::size_t x,
                         std::size_t o) {
    return ((n * h + y) * w + x) * co + o;
  };
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t o = 0; o < co; ++o) {
          double acc = bs[o];
          for (std::size_t dy = 0; dy < kh; ++dy) {
            const long sy = static_cast<long>(y + dy) - ph;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const long sx = static_cast<long>(x + dx) - pw;
              if (sx < 0 || sx >= static_cast<long>(w)) continue;
              for (std::size_t c = 0; c < ci; ++c)
                acc += img[iidx(n, sy, sx, c)] * ker[kidx(dy, dx, c, o)];
            }
          }
          out[oidx(n, y, x, o)] = acc;
        }
  const bool ng =
      image.requires_grad() || kernel.requires_grad() || bias.requires_grad();
  Tensor result = Tensor::from_data({b, h, w, co}, std::move(out), ng);
  if (ng) {
    Tensor ti = image, tk = kernel, tb = bias, to = result;
    nodes_.push_back({result, [ti, tk, tb, to, b, h, w, ci, kh, kw, co, ph, pw,
                               iidx, kidx, oidx]() mutable {
      const auto g = to.grad();
      if (g.empty()) return;
      std::vector<double> gi(ti.requires_grad() ? ti.size() : 0, 0.0);
      std::vector<double> gk(tk.requires_grad() ? tk.size() : 0, 0.0);
      std::vector<double> gb(tb.requires_grad() ? tb.size() : 0, 0.0);
      const auto img = ti.data();
      const auto ker = tk.data();
      for (std::size_t n = 0; n < b; ++n)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t o = 0; o < co; ++o) {
              const double go = g[oidx(n, y, x, o)];
              if (!gb.empty()) gb[o] += go;
              for (std::size_t dy = 0; dy < kh; ++dy) {
                const long sy = static_cast<long>(y + dy) - ph;
                if (sy < 0 || sy >= static_cast<long>(h)) continue;
                for (std::size_t dx = 0; dx < kw; ++dx) {
                  const long sx = static_cast<long>(x + dx) - pw;
                  if (sx < 0 || sx >= static_cast<long>(w)) continue;
                  for (std::size_t c = 0; c < ci; ++c) {
                    if (!gk.empty())
                      gk[kidx(dy, dx, c, o)] += img[iidx(n, sy, sx, c)] * go;
                    if (!gi.empty())
                      gi[iidx(n, sy, sx, c)] += ker[kidx(dy, dx, c, o)] * go;
                  }
                }
              }
            }
      if (!gi.empty()) ti.accumulate_grad(gi);
      if (!gk.empty()) tk.accumulate_grad(gk);
      if (!gb.empty()) tb.accumulate_grad(gb);
    }});
  }
  return result;
}

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  }
  // Locate the node that produced the loss; replay the tape backwards from it.
  std::size_t start = nodes_.size();
  for (std::size_t i = nodes_.size(); i > 0; --i) {
    if (nodes_[i - 1].output.same_storage(loss)) {
      start = i;
      break;
    }
  }
  // Intermediate (node-output) gradients are scratch space for one sweep.
  // Clearing them here makes repeated backward calls add exactly
  // dLoss/dLeaf to the leaves each time instead of compounding stale
  // upstream sums. Leaves are never node outputs, so they keep accumulating.
  for (std::size_t i = 0; i < start; ++i) {
    if (!nodes_[i].output.grad().empty()) nodes_[i].output.zero_grad();
  }
  // Seed d(loss)/d(loss) = 1.
  Tensor seed = loss;
  if (seed.impl_->grad.empty()) seed.impl_->grad.assign(1, 0.0);
  seed.impl_->grad[0] += 1.0;
  for (std::size_t i = start; i > 0; --i) nodes_[i - 1].backprop();
}

// --- non-graph helpers -------------------------------------------------------

std::vector<double> softmax_rows(std::span<const double> logits,
                                 std::size_t row_width) {
  std::vector<double> out(logits.size());
  const std::size_t rows = logits.size() / row_width;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &logits[r * row_width];
    double mx = row[0];
    for (std::size_t j = 1; j < row_width; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < row_width; ++j) {
      out[r * row_width + j] = std::exp(row[j] - mx);
      denom += out[r * row_width + j];
    }
    for (std::size_t j = 0; j < row_width; ++j) out[r * row_width + j] /= denom;
  }
  return out;
}

std::vector<std::size_t> argmax_rows(std::span<const double> values,
                                     std::size_t row_width) {
  const std::size_t rows = values.size() / row_width;
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row_width; ++j)
      if (values[r * row_width + j] > values[r * row_width + best]) best = j;
    out[r] = best;
  }
  return out;
}

}  // namespace fedhelp
