// Copyright 2026 The badd-mnist Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>

#include "badd/network.hpp"

namespace badd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Classic L2: wd * theta is added to the gradient before the moment
  /// updates (not decoupled AdamW).
  double weight_decay = 1e-4;
};

template <typename T>
struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  TensorMap<T> first_moment;
  TensorMap<T> second_moment;
};

/// One Adam update of every parameter named in `grads`. Moments are created
/// lazily (zero) on first use and must shape-match their parameters.
template <typename T>
void adam_step(TensorMap<T>& params, const TensorMap<T>& grads, OptimizerState<T>& opt, double lr) {
  if (!(lr > 0)) throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
  ++opt.step;
  const auto& c = opt.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw RuntimeError("gradient for unknown parameter '" + name + "'");
    Tensor<T>& p = it->second;
    require_shape(g, p.shape(), "gradient of " + name);
    auto [m_it, m_new] = opt.first_moment.try_emplace(name, p.shape());
    auto [v_it, v_new] = opt.second_moment.try_emplace(name, p.shape());
    Tensor<T>& m = m_it->second;
    Tensor<T>& v = v_it->second;
    require_shape(m, p.shape(), "first moment of " + name);
    require_shape(v, p.shape(), "second moment of " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]) + c.weight_decay * static_cast<double>(p[i]);
      const double mi = c.beta1 * static_cast<double>(m[i]) + (1 - c.beta1) * gi;
      const double vi = c.beta2 * static_cast<double>(v[i]) + (1 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
    }
  }
}

/// Step decay: lr0 for epochs [0, total/3), lr0/f for [total/3, 2*total/3),
/// lr0/f^2 afterwards (boundaries floored).
struct LRSchedule {
  std::size_t total_epochs = 0;
  double initial_lr = 1e-3;
  double decay_factor = 10;

  LRSchedule(std::size_t total, double lr0, double factor = 10)
      : total_epochs(total), initial_lr(lr0), decay_factor(factor) {
    if (total < 3) throw ConfigError("step schedule needs at least 3 epochs, got " + std::to_string(total));
    if (!(lr0 > 0)) throw ConfigError("initial learning rate must be positive");
    if (!(factor >= 1)) throw ConfigError("decay factor must be >= 1");
  }

  std::size_t first_boundary() const { return total_epochs / 3; }
  std::size_t second_boundary() const { return 2 * total_epochs / 3; }

  /// 0, 1 or 2.
  int segment(std::size_t epoch) const {
    if (epoch >= total_epochs)
      throw ConfigError("epoch " + std::to_string(epoch) + " outside schedule of " + std::to_string(total_epochs));
    return (epoch >= first_boundary() ? 1 : 0) + (epoch >= second_boundary() ? 1 : 0);
  }

  double lr_at_epoch(std::size_t epoch) const {
    return initial_lr / std::pow(decay_factor, segment(epoch));
  }
};

}  // namespace badd
