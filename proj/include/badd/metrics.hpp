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

// Diagnostics: group loss decomposition, per-group gradient contributions,
// colour-variation similarity of h, background activations and loss spikes.

#pragma once

#include <algorithm>
#include <map>
#include <optional>

#include "badd/datasets.hpp"
#include "badd/models.hpp"

namespace badd {

struct LossDecomposition {
  double loss = 0;
  double loss_aligned = 0;
  double loss_conflicting = 0;
  std::size_t n_aligned = 0;
  std::size_t n_conflicting = 0;
};

/// L_A and L_C are both sums over their group divided by the full batch
/// size N, so L = L_A + L_C.
template <typename T>
LossDecomposition loss_decomposition(std::span<const T> per_sample, std::span<const std::uint8_t> aligned) {
  if (per_sample.size() != aligned.size())
    throw RuntimeError("loss_decomposition: " + std::to_string(per_sample.size()) + " losses vs " +
                       std::to_string(aligned.size()) + " flags");
  if (per_sample.empty()) throw RuntimeError("loss_decomposition: empty batch");
  LossDecomposition d;
  double total = 0, sa = 0, sc = 0;
  for (std::size_t i = 0; i < per_sample.size(); ++i) {
    const double l = static_cast<double>(per_sample[i]);
    total += l;
    if (aligned[i]) {
      sa += l;
      ++d.n_aligned;
    } else {
      sc += l;
      ++d.n_conflicting;
    }
  }
  const double n = static_cast<double>(per_sample.size());
  d.loss = total / n;
  d.loss_aligned = sa / n;
  d.loss_conflicting = sc / n;
  return d;
}

// ---------------------------------------------------------------------------
// Gradient contributions per group.

struct GroupGradient {
  std::size_t count = 0;
  /// L2 norm of d(mean group loss)/d(param) per parameter tensor.
  std::map<std::string, double> block_norms;
  double total_norm = 0;
  /// Mean softmax probability of the true class.
  double mean_sigma = 0;
  /// Norm of the group-mean d(sigma_true)/d(theta).
  double a0_norm = 0;
};

struct GradContribution {
  std::optional<GroupGradient> aligned;
  std::optional<GroupGradient> conflicting;
  /// Max over parameter tensors of || g_full - (n_A g_A + n_C g_C)/N ||;
  /// absent when one group is empty.
  std::optional<double> reassembly_error;
};

/// One shared forward pass; each group's gradient is a backward pass with
/// the upstream logit gradient restricted to that group (weights 1/n_G).
template <typename T>
GradContribution grad_contribution(const NetworkSpec& spec, const ModelState<T>& state, const Tensor<T>& batch,
                                   std::span<const int> targets, std::span<const std::uint8_t> aligned,
                                   Mode mode = Mode::eval, const Injection<T>& inj = {}) {
  const std::size_t n = batch.dim(0);
  if (targets.size() != n || aligned.size() != n) throw RuntimeError("grad_contribution: length mismatch");
  const auto cache = forward(spec, state, batch, mode, inj);
  const auto ce = softmax_cross_entropy(cache.logits, targets);
  const std::size_t k = spec.num_classes;

  auto run_group = [&](bool want_aligned) -> std::optional<std::pair<GroupGradient, TensorMap<T>>> {
    std::vector<double> w(n, 0.0);
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < n; ++i) cnt += (aligned[i] != 0) == want_aligned;
    if (cnt == 0) return std::nullopt;
    GroupGradient gg;
    gg.count = cnt;
    Tensor<T> da({n, k});
    for (std::size_t i = 0; i < n; ++i) {
      if ((aligned[i] != 0) != want_aligned) continue;
      w[i] = 1.0 / static_cast<double>(cnt);
      const auto y = static_cast<std::size_t>(targets[i]);
      const double s = static_cast<double>(ce.probabilities[i * k + y]);
      gg.mean_sigma += s / static_cast<double>(cnt);
      for (std::size_t j = 0; j < k; ++j) {
        const double p = static_cast<double>(ce.probabilities[i * k + j]);
        da[i * k + j] = static_cast<T>(w[i] * s * ((j == y ? 1.0 : 0.0) - p));
      }
    }
    auto g = backward_from_logits(spec, state, cache, cross_entropy_logit_grad(ce.probabilities, targets, w));
    double sq = 0;
    for (const auto& [name, t] : g.params) {
      const double nrm = l2_norm(t);
      if (!std::isfinite(nrm)) throw RuntimeError("non-finite gradient in " + name);
      gg.block_norms[name] = nrm;
      sq += nrm * nrm;
    }
    gg.total_norm = std::sqrt(sq);
    auto a0 = backward_from_logits(spec, state, cache, da);
    double sa = 0;
    for (const auto& [name, t] : a0.params) sa += std::pow(l2_norm(t), 2);
    gg.a0_norm = std::sqrt(sa);
    return std::make_pair(std::move(gg), std::move(g.params));
  };

  GradContribution out;
  auto ga = run_group(true);
  auto gc = run_group(false);
  if (ga) out.aligned = ga->first;
  if (gc) out.conflicting = gc->first;
  if (ga && gc) {
    const auto full = backward_from_logits(spec, state, cache, cross_entropy_mean_grad(ce.probabilities, targets));
    const double na = static_cast<double>(ga->first.count), nc = static_cast<double>(gc->first.count);
    double worst = 0;
    for (const auto& [name, f] : full.params) {
      const auto& a = ga->second.at(name);
      const auto& c = gc->second.at(name);
      double sq = 0;
      for (std::size_t i = 0; i < f.size(); ++i) {
        const double r = (na * static_cast<double>(a[i]) + nc * static_cast<double>(c[i])) / static_cast<double>(n);
        sq += std::pow(static_cast<double>(f[i]) - r, 2);
      }
      worst = std::max(worst, std::sqrt(sq));
    }
    out.reassembly_error = worst;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Representation similarity across background colours.

/// Both-zero vectors count as identical; one zero vector gives 0.
inline double cosine_similarity(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) throw RuntimeError("cosine_similarity: length mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * double(b[i]);
    aa += double(a[i]) * double(a[i]);
    bb += double(b[i]) * double(b[i]);
  }
  if (aa == 0 && bb == 0) return 1.0;
  if (aa == 0 || bb == 0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

struct SimilarityProbe {
  std::vector<double> per_sample;
  double mean = 0;
};

/// Mean pairwise cosine of h over one rendering per palette colour, for the
/// first `max_samples` gray images of `ds` (0 = all).
inline SimilarityProbe color_variation_similarity(const NetworkSpec& spec, const ModelState<Real>& state,
                                                  const BiasedDataset& ds, const ColorPalette& palette,
                                                  std::size_t max_samples = 256) {
  const std::size_t m = palette.colors.size();
  if (m < 2) throw ConfigError("similarity probe needs at least 2 palette colours");
  const std::size_t n = max_samples ? std::min(max_samples, ds.size()) : ds.size();
  if (n == 0) throw RuntimeError("similarity probe on an empty dataset");
  SimilarityProbe p;
  const std::size_t per_batch = std::max<std::size_t>(1, 256 / m);
  for (std::size_t s0 = 0; s0 < n; s0 += per_batch) {
    const std::size_t s1 = std::min(n, s0 + per_batch);
    Tensor<Real> x({(s1 - s0) * m, 3, kImageSide, kImageSide});
    for (std::size_t s = s0; s < s1; ++s) {
      const auto g = ds.gray_image(s);
      for (std::size_t c = 0; c < m; ++c) {
        const auto img = colorize_background(g, palette.colors[c]);
        std::copy(img.vec().begin(), img.vec().end(), x.data() + ((s - s0) * m + c) * img.size());
      }
    }
    const auto h = forward(spec, state, x, Mode::eval).features;
    const std::size_t f = h.dim(1);
    for (std::size_t s = 0; s < s1 - s0; ++s) {
      double acc = 0;
      std::size_t pairs = 0;
      for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = a + 1; b < m; ++b, ++pairs)
          acc += cosine_similarity({h.data() + (s * m + a) * f, f}, {h.data() + (s * m + b) * f, f});
      p.per_sample.push_back(acc / double(pairs));
    }
  }
  double t = 0;
  for (double v : p.per_sample) t += v;
  p.mean = t / double(p.per_sample.size());
  return p;
}

// ---------------------------------------------------------------------------
// Background-region activations.

/// Index of the ReLU closing block `block` (1-based).
inline std::size_t block_relu_layer(const NetworkSpec& spec, std::size_t block) {
  std::size_t seen = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == LayerKind::relu && ++seen == block) return i;
  throw ConfigError("layer index " + std::to_string(block) + " out of range");
}

/// Mean post-ReLU activation of block `block` over pixels whose gray
/// intensity is below the foreground threshold, averaged over channels.
inline double bias_region_activation(const NetworkSpec& spec, const ModelState<Real>& state,
                                     std::span<const Real> rgb, std::span<const Real> gray, std::size_t block = 1,
                                     Real threshold = kForegroundThreshold) {
  if (gray.size() != kImagePixels || rgb.size() != 3 * kImagePixels)
    throw RuntimeError("bias_region_activation expects one 3x28x28 image");
  std::vector<std::size_t> mask;
  for (std::size_t p = 0; p < kImagePixels; ++p)
    if (gray[p] < threshold) mask.push_back(p);
  if (mask.empty()) throw RuntimeError("background mask is empty");
  const std::size_t layer = block_relu_layer(spec, block);
  Tensor<Real> x({1, 3, kImageSide, kImageSide}, std::vector<Real>(rgb.begin(), rgb.end()));
  const auto c = forward(spec, state, x, Mode::eval);
  const auto& a = c.outputs[layer];
  if (a.dim(2) != kImageSide || a.dim(3) != kImageSide) throw RuntimeError("block does not preserve 28x28 extent");
  const std::size_t ch = a.dim(1);
  double s = 0;
  for (std::size_t k = 0; k < ch; ++k)
    for (auto p : mask) s += double(a[k * kImagePixels + p]);
  return s / double(ch * mask.size());
}

/// Dataset mean of bias_region_activation over the first `max_samples`.
inline double mean_bias_region_activation(const NetworkSpec& spec, const ModelState<Real>& state,
                                          const BiasedDataset& ds, std::size_t block = 1,
                                          std::size_t max_samples = 256) {
  const std::size_t n = max_samples ? std::min(max_samples, ds.size()) : ds.size();
  double s = 0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = ds.gray_image(i);
    if (std::none_of(g.begin(), g.end(), [](Real v) { return v < kForegroundThreshold; })) continue;
    s += bias_region_activation(spec, state, ds.image(i), g, block);
    ++used;
  }
  if (!used) throw RuntimeError("no sample with a background region");
  return s / double(used);
}

// ---------------------------------------------------------------------------
// Loss spikes.

struct SpikeStats {
  double threshold = 10;
  std::size_t window = 100;
  std::size_t count = 0;
  double max_loss_aligned = 0;
  std::vector<std::size_t> spike_batches;
  /// Max L_A over consecutive blocks of `window` batches.
  std::vector<double> windowed_max;
};

/// A batch spikes when its L_A exceeds threshold times the median L_A of
/// the preceding (up to `window`) batches. The first batch never spikes.
inline SpikeStats detect_loss_spikes(std::span<const double> loss_aligned, double threshold = 10,
                                     std::size_t window = 100) {
  if (loss_aligned.empty()) throw RuntimeError("detect_loss_spikes: empty trace");
  if (window == 0) throw ConfigError("spike window must be positive");
  SpikeStats s;
  s.threshold = threshold;
  s.window = window;
  std::vector<double> buf;
  for (std::size_t i = 0; i < loss_aligned.size(); ++i) {
    const double l = loss_aligned[i];
    s.max_loss_aligned = std::max(s.max_loss_aligned, l);
    if (i % window == 0) s.windowed_max.push_back(l);
    else s.windowed_max.back() = std::max(s.windowed_max.back(), l);
    if (i == 0) continue;
    const std::size_t lo = i > window ? i - window : 0;
    buf.assign(loss_aligned.begin() + static_cast<std::ptrdiff_t>(lo), loss_aligned.begin() + static_cast<std::ptrdiff_t>(i));
    const auto mid = buf.begin() + static_cast<std::ptrdiff_t>(buf.size() / 2);
    std::nth_element(buf.begin(), mid, buf.end());
    double med = *mid;
    if (buf.size() % 2 == 0) med = 0.5 * (med + *std::max_element(buf.begin(), mid));
    if (l > threshold * med) {
      ++s.count;
      s.spike_batches.push_back(i);
    }
  }
  return s;
}

}  // namespace badd
