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

#include <random>

#include "badd/training.hpp"

namespace badd::testing {

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(s));
  for (auto& v : t.vec()) v = static_cast<T>(u(rng));
  return t;
}

/// Randomises every parameter and buffer (gamma and running_var kept
/// positive) so no coordinate sits at a special value.
template <typename T>
void jitter_state(ModelState<T>& s, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& [k, t] : s.params) {
    const bool positive = k.ends_with(".gamma");
    for (auto& v : t.vec()) v = static_cast<T>(positive ? 1.0 + u(rng) : static_cast<double>(v) + u(rng));
  }
  for (auto& [k, t] : s.buffers) {
    const bool positive = k.ends_with(".running_var");
    for (auto& v : t.vec()) v = static_cast<T>(positive ? 1.0 + u(rng) : u(rng));
  }
}

/// conv(ci -> co, k, stride, pad) -> relu -> global pool -> linear(co -> K)
inline NetworkSpec conv_pool_linear_spec(std::size_t ci, std::size_t co, std::size_t k, std::size_t stride,
                                         std::size_t pad, std::size_t classes) {
  NetworkSpec s;
  s.layers = {{LayerKind::conv2d, "conv", ci, co, k, stride, pad},
              {LayerKind::relu, "relu", co, co, 0, 1, 0},
              {LayerKind::avgpool_global, "pool", co, co, 0, 1, 0},
              {LayerKind::linear, "fc", co, classes, 0, 1, 0}};
  s.feature_dim = co;
  s.num_classes = classes;
  s.validate();
  return s;
}

/// Tiny synthetic MNIST-shaped split: a bright square whose position
/// depends on the digit.
inline MnistSplit synthetic_mnist(std::size_t n, std::uint64_t seed) {
  MnistSplit m;
  std::mt19937_64 rng(seed);
  m.pixels.assign(n * kImagePixels, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int d = static_cast<int>(rng() % 10);
    m.labels.push_back(d);
    const std::size_t r0 = 4 + static_cast<std::size_t>(d / 5) * 10, c0 = 3 + static_cast<std::size_t>(d % 5) * 4;
    for (std::size_t r = r0; r < r0 + 8; ++r)
      for (std::size_t c = c0; c < c0 + 3; ++c) m.pixels[i * kImagePixels + r * kImageSide + c] = 255;
  }
  return m;
}

}  // namespace badd::testing
