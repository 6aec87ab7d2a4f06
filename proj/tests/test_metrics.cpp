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

#include <gtest/gtest.h>

#include "badd/metrics.hpp"
#include "test_util.hpp"

using namespace badd;
using badd::testing::conv_pool_linear_spec;
using badd::testing::jitter_state;
using badd::testing::random_tensor;
using badd::testing::synthetic_mnist;

namespace {

const std::vector<std::size_t> kTiny{3, 4, 4, 5};

BiasedDataset make(std::size_t n, double q, std::uint64_t seed) {
  BiasSpec s;
  s.q = q;
  s.seed = seed;
  return generate_biased_mnist(synthetic_mnist(n, seed), s);
}

}  // namespace

TEST(LossDecomposition, WorkedExample) {
  const std::vector<double> l{1, 2, 3, 4};
  const std::vector<std::uint8_t> a{1, 0, 1, 0};
  const auto d = loss_decomposition<double>(l, a);
  EXPECT_DOUBLE_EQ(d.loss, 2.5);
  EXPECT_DOUBLE_EQ(d.loss_aligned, 1.0);
  EXPECT_DOUBLE_EQ(d.loss_conflicting, 1.5);
  EXPECT_EQ(d.n_aligned, 2u);
  EXPECT_EQ(d.n_conflicting, 2u);
}

TEST(LossDecomposition, SumsToTotalForRandomBatches) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<double> l(n);
    std::vector<std::uint8_t> a(n);
    for (std::size_t i = 0; i < n; ++i) {
      l[i] = u(rng);
      a[i] = rng() % 2;
    }
    const auto d = loss_decomposition<double>(l, a);
    EXPECT_NEAR(d.loss, d.loss_aligned + d.loss_conflicting, 1e-12);
    EXPECT_EQ(d.n_aligned + d.n_conflicting, n);
  }
}

TEST(LossDecomposition, SingleGroupAndErrors) {
  const std::vector<double> l{0.5, 1.5};
  const std::vector<std::uint8_t> all{1, 1};
  const auto d = loss_decomposition<double>(l, all);
  EXPECT_EQ(d.loss_conflicting, 0);
  EXPECT_EQ(d.loss_aligned, d.loss);
  EXPECT_THROW(loss_decomposition<double>(l, std::vector<std::uint8_t>{1}), RuntimeError);
  EXPECT_THROW(loss_decomposition<double>(std::vector<double>{}, std::vector<std::uint8_t>{}), RuntimeError);
}

TEST(Spikes, IsolatedSpikeIsFound) {
  std::vector<double> l(120, 0.5);
  l[50] = 6;
  const auto s = detect_loss_spikes(l);
  EXPECT_EQ(s.count, 1u);
  EXPECT_EQ(s.spike_batches, (std::vector<std::size_t>{50}));
  EXPECT_EQ(s.max_loss_aligned, 6);
  EXPECT_EQ(s.windowed_max, (std::vector<double>{6, 0.5}));
}

TEST(Spikes, ThresholdIsStrictAndFirstBatchExempt) {
  std::vector<double> l{100, 1, 10, 10.0001};
  // Median before index 2 is median(100, 1) = 50.5; later batches sit below.
  const auto s = detect_loss_spikes(l, 10);
  EXPECT_EQ(s.count, 0u);
  const std::vector<double> m{1, 10, 1};
  EXPECT_EQ(detect_loss_spikes(m, 10).count, 0u);
  const std::vector<double> p{1, 10.5};
  EXPECT_EQ(detect_loss_spikes(p, 10).spike_batches, (std::vector<std::size_t>{1}));
}

TEST(Spikes, MedianUsesOnlyTheTrailingWindow) {
  std::vector<double> l(150, 0.001);
  l.resize(250, 1.0);
  l.push_back(5.0);
  // Window 40: the jump to 1.0 spikes until ones are the trailing majority
  // (20 batches); the final 5.0 sits within 10x of that median.
  const auto w40 = detect_loss_spikes(l, 10, 40);
  EXPECT_EQ(w40.count, 20u);
  EXPECT_EQ(w40.spike_batches.front(), 150u);
  EXPECT_EQ(w40.spike_batches.back(), 169u);
  // Window 300 keeps the 0.001 majority in view, so 5.0 spikes.
  EXPECT_EQ(detect_loss_spikes(l, 10, 300).spike_batches.back(), 250u);
}

TEST(Spikes, ScaleInvariant) {
  std::mt19937_64 rng(2);
  std::lognormal_distribution<double> d(0, 2);
  std::vector<double> l(300), scaled(300);
  for (std::size_t i = 0; i < l.size(); ++i) {
    l[i] = d(rng);
    scaled[i] = 37.5 * l[i];
  }
  EXPECT_EQ(detect_loss_spikes(l).spike_batches, detect_loss_spikes(scaled).spike_batches);
  EXPECT_THROW(detect_loss_spikes(std::vector<double>{}), RuntimeError);
  EXPECT_THROW(detect_loss_spikes(l, 10, 0), ConfigError);
}

TEST(Cosine, Properties) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Real> a(7), b(7), sa(7);
    for (std::size_t i = 0; i < 7; ++i) {
      a[i] = n(rng);
      b[i] = n(rng);
      sa[i] = 3.0f * a[i];
    }
    const double c = cosine_similarity(a, b);
    EXPECT_LE(std::abs(c), 1.0);
    EXPECT_DOUBLE_EQ(c, cosine_similarity(b, a));
    EXPECT_NEAR(cosine_similarity(sa, b), c, 1e-6);
    EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-12);
  }
  const std::vector<Real> x{1, 0}, y{0, 2}, z{0, 0}, w{-2, 0};
  EXPECT_EQ(cosine_similarity(x, y), 0.0);
  EXPECT_EQ(cosine_similarity(x, w), -1.0);
  EXPECT_EQ(cosine_similarity(z, z), 1.0);
  EXPECT_EQ(cosine_similarity(x, z), 0.0);
  EXPECT_THROW(cosine_similarity(x, std::vector<Real>{1}), RuntimeError);
}

TEST(Similarity, ColourBlindNetworkScoresOne) {
  // Zero first-layer weights: h no longer depends on the image.
  auto m = build_simple_convnet<Real>(kTiny, 10, 4);
  m.state.params.at("conv1.weight").fill(0);
  const auto ds = make(6, 0.9, 4);
  const auto p = color_variation_similarity(m.spec, m.state, ds, default_background_palette(), 4);
  EXPECT_EQ(p.per_sample.size(), 4u);
  EXPECT_NEAR(p.mean, 1.0, 1e-12);
}

TEST(Similarity, RangeAndSampleCount) {
  auto m = build_simple_convnet<Real>(kTiny, 10, 5);
  jitter_state(m.state, 6);
  const auto ds = make(30, 0.9, 5);
  const auto p = color_variation_similarity(m.spec, m.state, ds, default_background_palette(), 0);
  EXPECT_EQ(p.per_sample.size(), 30u);
  for (double v : p.per_sample) {
    EXPECT_GE(v, -1);
    EXPECT_LE(v, 1);
  }
  // Duplicated colours give identical renderings.
  ColorPalette twin{{{0.2f, 0.4f, 0.6f}, {0.2f, 0.4f, 0.6f}}};
  EXPECT_NEAR(color_variation_similarity(m.spec, m.state, ds, twin, 3).mean, 1.0, 1e-6);
  ColorPalette one{{{0.2f, 0.4f, 0.6f}}};
  EXPECT_THROW(color_variation_similarity(m.spec, m.state, ds, one), ConfigError);
}

TEST(BackgroundActivation, PointwiseConvOracle) {
  // 1x1 conv: the activation at a background pixel is relu(W c + b).
  auto spec = conv_pool_linear_spec(3, 2, 1, 1, 0, 10);
  auto st = init_model<Real>(spec, 7);
  auto& w = st.params.at("conv.weight");
  const float wv[2][3] = {{1.0f, -0.5f, 0.25f}, {-1.0f, 0.0f, 0.0f}};
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 3; ++i) w[o * 3 + i] = wv[o][i];
  st.params.at("conv.bias")[1] = 2.0f;
  std::vector<Real> g(kImagePixels, 0);
  for (std::size_t p = 0; p < 100; ++p) g[p] = 1.0f;  // foreground stripe
  const RGB c{0.4f, 0.2f, 0.8f};
  const auto img = colorize_background(g, c);
  // ch0: 0.4 - 0.1 + 0.2 = 0.5; ch1: -0.4 + 2 = 1.6; mean 1.05
  EXPECT_NEAR(bias_region_activation(spec, st, img.vec(), g, 1), 1.05, 1e-6);
  std::vector<Real> full(kImagePixels, 1.0f);
  EXPECT_THROW(bias_region_activation(spec, st, colorize_background(full, c).vec(), full, 1), RuntimeError);
  EXPECT_THROW(bias_region_activation(spec, st, img.vec(), g, 2), ConfigError);
}

TEST(BackgroundActivation, DatasetMeanMatchesPerImage) {
  auto m = build_simple_convnet<Real>(kTiny, 10, 8);
  const auto ds = make(5, 0.9, 8);
  double s = 0;
  for (std::size_t i = 0; i < 5; ++i) s += bias_region_activation(m.spec, m.state, ds.image(i), ds.gray_image(i));
  EXPECT_NEAR(mean_bias_region_activation(m.spec, m.state, ds, 1, 5), s / 5, 1e-9);
  for (std::size_t block = 1; block <= 4; ++block)
    EXPECT_GE(mean_bias_region_activation(m.spec, m.state, ds, block, 5), 0);
}

TEST(GradContribution, GroupsReassembleTheFullGradient) {
  auto m = build_simple_convnet<double>(kTiny, 10, 9);
  jitter_state(m.state, 10, 0.2);
  const auto x = random_tensor<double>({12, 3, 28, 28}, 11, 0, 1);
  std::vector<int> y(12);
  std::vector<std::uint8_t> a(12);
  for (std::size_t i = 0; i < 12; ++i) {
    y[i] = int(i % 10);
    a[i] = i % 3 != 0;
  }
  for (auto mode : {Mode::eval, Mode::train}) {
    const auto g = grad_contribution(m.spec, m.state, x, y, a, mode);
    ASSERT_TRUE(g.aligned && g.conflicting && g.reassembly_error);
    EXPECT_EQ(g.aligned->count, 8u);
    EXPECT_EQ(g.conflicting->count, 4u);
    EXPECT_LT(*g.reassembly_error, 1e-12);
    EXPECT_EQ(g.aligned->block_norms.size(), m.state.params.size());
    double sq = 0;
    for (const auto& [k, v] : g.aligned->block_norms) sq += v * v;
    EXPECT_NEAR(g.aligned->total_norm, std::sqrt(sq), 1e-12);
  }
}

TEST(GradContribution, SigmaGradientMatchesFiniteDifference) {
  auto m = build_simple_convnet<double>(kTiny, 10, 12);
  const auto x = random_tensor<double>({6, 3, 28, 28}, 13, 0, 1);
  const std::vector<int> y{0, 1, 2, 3, 4, 5};
  const std::vector<std::uint8_t> a{1, 1, 1, 1, 1, 1};
  const auto g = grad_contribution(m.spec, m.state, x, y, a);
  EXPECT_FALSE(g.conflicting);
  EXPECT_FALSE(g.reassembly_error);
  // Only the head moves in this check, so the norm restricted to fc.* is
  // compared against central differences of mean sigma_true.
  auto mean_sigma = [&](const ModelState<double>& st) {
    const auto c = forward(m.spec, st, x, Mode::eval);
    const auto ce = softmax_cross_entropy(c.logits, y);
    double s = 0;
    for (std::size_t i = 0; i < 6; ++i) s += ce.probabilities[i * 10 + std::size_t(y[i])];
    return s / 6;
  };
  EXPECT_NEAR(g.aligned->mean_sigma, mean_sigma(m.state), 1e-12);
  double sq = 0;
  for (const auto* name : {"fc.weight", "fc.bias"}) {
    const auto& p = m.state.param(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto plus = m.state, minus = m.state;
      plus.params.at(name)[i] += 1e-6;
      minus.params.at(name)[i] -= 1e-6;
      const double d = (mean_sigma(plus) - mean_sigma(minus)) / 2e-6;
      sq += d * d;
    }
  }
  // a0_norm covers every tensor, so it bounds the head part from above.
  EXPECT_GE(g.aligned->a0_norm + 1e-9, std::sqrt(sq));
  EXPECT_GT(std::sqrt(sq), 0);
}

TEST(GradContribution, HeadOnlySigmaGradientIsExact) {
  // Lone linear layer: every parameter is in the head, so a0_norm equals
  // the finite-difference norm.
  NetworkSpec spec;
  spec.layers = {{LayerKind::linear, "fc", 4, 3, 0, 1, 0}};
  spec.feature_dim = 4;
  spec.num_classes = 3;
  auto st = init_model<double>(spec, 14);
  jitter_state(st, 15);
  const auto x = random_tensor<double>({5, 4, 1, 1}, 16);
  const std::vector<int> y{0, 1, 2, 1, 0};
  const std::vector<std::uint8_t> a{1, 0, 1, 1, 0};
  const auto g = grad_contribution(spec, st, x, y, a);
  auto mean_sigma = [&](const ModelState<double>& s) {
    const auto ce = softmax_cross_entropy(forward(spec, s, x, Mode::eval).logits, y);
    double t = 0;
    for (std::size_t i : {0u, 2u, 3u}) t += ce.probabilities[i * 3 + std::size_t(y[i])];
    return t / 3;
  };
  double sq = 0;
  for (const auto& [name, p] : st.params)
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto plus = st, minus = st;
      plus.params.at(name)[i] += 1e-6;
      minus.params.at(name)[i] -= 1e-6;
      const double d = (mean_sigma(plus) - mean_sigma(minus)) / 2e-6;
      sq += d * d;
    }
  EXPECT_NEAR(g.aligned->a0_norm, std::sqrt(sq), 1e-7);
  EXPECT_NEAR(*g.reassembly_error, 0, 1e-14);
}
