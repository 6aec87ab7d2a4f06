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

#include <cstdint>
#include <span>

#include "badd/tensor.hpp"

namespace badd {

template <typename T>
struct CrossEntropy {
  double mean_loss = 0;
  Tensor<T> per_sample;     // (N)
  Tensor<T> probabilities;  // (N, K)
};

/// Softmax cross-entropy with integer targets. Computed through a shifted
/// log-sum-exp in double; the mean is a left-to-right sum of per-sample
/// losses divided by N.
template <typename T>
CrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw RuntimeError("logits must be (N,K), got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw ConfigError("cross-entropy needs at least 2 classes");
  if (targets.size() != n)
    throw RuntimeError("got " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " logits rows");
  CrossEntropy<T> out{0.0, Tensor<T>({n}), Tensor<T>({n, k})};
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = targets[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw ConfigError("target " + std::to_string(y) + " out of range [0," + std::to_string(k) + ")");
    const T* z = logits.data() + i * k;
    double mx = static_cast<double>(z[0]);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j)
      out.probabilities[i * k + j] = static_cast<T>(std::exp(static_cast<double>(z[j]) - lse));
    const double li = lse - static_cast<double>(z[static_cast<std::size_t>(y)]);
    out.per_sample[i] = static_cast<T>(li);
    total += static_cast<double>(out.per_sample[i]);
  }
  out.mean_loss = total / static_cast<double>(n);
  return out;
}

/// d(sum_i w_i * loss_i)/d logits, given softmax probabilities.
/// Uniform weights 1/N give the gradient of the mean loss.
template <typename T>
Tensor<T> cross_entropy_logit_grad(const Tensor<T>& probabilities, std::span<const int> targets,
                                   std::span<const double> weights) {
  const std::size_t n = probabilities.dim(0), k = probabilities.dim(1);
  Tensor<T> d(probabilities.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights[i];
    for (std::size_t j = 0; j < k; ++j) {
      const double onehot = static_cast<std::size_t>(targets[i]) == j ? 1.0 : 0.0;
      d[i * k + j] = static_cast<T>(w * (static_cast<double>(probabilities[i * k + j]) - onehot));
    }
  }
  return d;
}

template <typename T>
Tensor<T> cross_entropy_mean_grad(const Tensor<T>& probabilities, std::span<const int> targets) {
  std::vector<double> w(probabilities.dim(0), 1.0 / static_cast<double>(probabilities.dim(0)));
  return cross_entropy_logit_grad(probabilities, targets, w);
}

}  // namespace badd
