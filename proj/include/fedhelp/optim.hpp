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

#ifndef FEDHELP_OPTIM_HPP_
#define FEDHELP_OPTIM_HPP_

#include <stdexcept>
#include <vector>

#include "fedhelp/tensor.hpp"

namespace fedhelp {

// Minibatch SGD with classical momentum: v <- mu*v + g, theta <- theta - lr*v.
// The caller must pass the same parameter list (same order, same tensors) on
// every step so velocity buffers stay aligned. Parameters that received no
// gradient this step are treated as having g = 0.
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum)
      : lr_(learning_rate), momentum_(momentum) {
    if (learning_rate <= 0.0) {
      throw std::invalid_argument("SgdMomentum: learning rate must be positive");
    }
    if (momentum < 0.0 || momentum >= 1.0) {
      throw std::invalid_argument("SgdMomentum: momentum must be in [0, 1)");
    }
  }

  void step(const std::vector<Tensor>& params) {
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity_[i].assign(params[i].size(), 0.0);
      }
    }
    if (velocity_.size() != params.size()) {
      throw std::invalid_argument("SgdMomentum: parameter list changed size");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto grad = params[i].grad();
      auto data = params[i].mutable_data();
      auto& vel = velocity_[i];
      if (vel.size() != data.size()) {
        throw std::invalid_argument("SgdMomentum: parameter shape changed");
      }
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = grad.empty() ? 0.0 : grad[j];
        vel[j] = momentum_ * vel[j] + g;
        data[j] -= lr_ * vel[j];
      }
    }
  }

  static void zero_grad(const std::vector<Tensor>& params) {
    for (const auto& p : params) p.zero_grad();
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace fedhelp

#endif  // FEDHELP_OPTIM_HPP_
