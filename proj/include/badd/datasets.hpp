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

// Biased-MNIST style datasets. Each digit class d owns background colour
// bg_palette[d] (and foreground colour fg_palette[d] for the FB variant).
// A sample takes its class colour with probability q and otherwise one of
// the 9 remaining colours uniformly; foreground and background draws are
// independent.

#pragma once

#include <array>
#include <optional>
#include <random>

#include "badd/idx.hpp"

namespace badd {

using RGB = std::array<Real, 3>;

inline constexpr std::size_t kNumColors = 10;
inline constexpr std::size_t kImageSide = 28;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
/// Gray intensity at or above which a pixel counts as digit stroke.
inline constexpr Real kForegroundThreshold = Real(0.1);

struct ColorPalette {
  std::vector<RGB> colors;

  /// Exactly 10 colours in [0,1]^3, pairwise Euclidean distance > 0.25.
  void validate() const {
    if (colors.size() != kNumColors)
      throw ConfigError("palette needs " + std::to_string(kNumColors) + " colours, got " + std::to_string(colors.size()));
    for (const auto& c : colors)
      for (auto v : c)
        if (!(v >= 0 && v <= 1)) throw ConfigError("palette channel outside [0,1]");
    if (min_distance() <= 0.25) throw ConfigError("palette colours are closer than 0.25");
  }

  double min_distance() const {
    double best = 1e9;
    for (std::size_t i = 0; i < colors.size(); ++i)
      for (std::size_t j = i + 1; j < colors.size(); ++j) {
        double d = 0;
        for (int k = 0; k < 3; ++k) d += std::pow(double(colors[i][k]) - double(colors[j][k]), 2);
        best = std::min(best, std::sqrt(d));
      }
    return best;
  }

  friend bool operator==(const ColorPalette&, const ColorPalette&) = default;
};

/// Saturated primaries/secondaries plus orange, pink, violet and gray;
/// all points of the {0, .5, 1}^3 grid, so min pairwise distance is 0.5.
inline ColorPalette default_background_palette() {
  return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1},
           {0, 1, 1}, {1, .5f, 0}, {1, 0, .5f}, {.5f, 0, 1}, {.5f, .5f, .5f}}};
}

/// Ten further grid points disjoint from the background palette.
inline ColorPalette default_foreground_palette() {
  return {{{1, 1, .5f}, {1, .5f, 1}, {.5f, 1, 1}, {1, .5f, .5f}, {.5f, 1, .5f},
           {.5f, .5f, 1}, {0, .5f, 1}, {0, 1, .5f}, {.5f, 1, 0}, {.5f, 0, .5f}}};
}

/// Digit strokes blend toward white, background toward `color`:
/// out = g * 1 + (1 - g) * color, per channel. gray holds 784 values in [0,1].
inline Tensor<Real> colorize_background(std::span<const Real> gray, const RGB& color) {
  if (gray.size() != kImagePixels) throw RuntimeError("gray image must have 784 pixels");
  Tensor<Real> out({3, kImageSide, kImageSide});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < kImagePixels; ++p) {
      const Real g = gray[p];
      out[c * kImagePixels + p] = g + (1 - g) * color[c];
    }
  return out;
}

/// Re-tints stroke pixels (gray >= threshold) to gray * color; background
/// pixels are untouched.
inline Tensor<Real> colorize_foreground(const Tensor<Real>& rgb, std::span<const Real> gray, const RGB& color,
                                       Real threshold = kForegroundThreshold) {
  require_shape(rgb, {3, kImageSide, kImageSide}, "colorize_foreground input");
  if (gray.size() != kImagePixels) throw RuntimeError("gray image must have 784 pixels");
  Tensor<Real> out = rgb;
  for (std::size_t p = 0; p < kImagePixels; ++p) {
    if (gray[p] < threshold) continue;
    for (std::size_t c = 0; c < 3; ++c) out[c * kImagePixels + p] = gray[p] * color[c];
  }
  return out;
}

struct BiasSpec {
  double q = 0.99;
  ColorPalette bg_palette = default_background_palette();
  std::optional<ColorPalette> fg_palette;
  std::uint64_t seed = 0;

  bool multi_attribute() const { return fg_palette.has_value(); }

  void validate() const {
    if (!(q > 0 && q <= 1)) throw ConfigError("q must lie in (0,1], got " + std::to_string(q));
    bg_palette.validate();
    if (fg_palette) {
      fg_palette->validate();
      if (*fg_palette == bg_palette) throw ConfigError("foreground and background palettes must differ");
    }
  }
};

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

/// Structure-of-arrays dataset. Attribute vectors are empty when the
/// dataset has been stripped of protected-attribute labels.
struct BiasedDataset {
  Split split = Split::train;
  BiasSpec spec;
  std::vector<Real> images;         // N x 3 x 28 x 28
  std::vector<std::uint8_t> gray;   // N x 28 x 28, raw MNIST bytes
  std::vector<int> digits;
  std::vector<int> bg_index;        // empty when stripped
  std::vector<int> fg_index;        // empty unless FB variant
  std::vector<std::uint8_t> aligned_bg, aligned_fg, aligned;

  std::size_t size() const { return digits.size(); }
  bool has_attributes() const { return !bg_index.empty(); }
  bool has_fg() const { return !fg_index.empty(); }

  std::span<const Real> image(std::size_t i) const { return {images.data() + i * 3 * kImagePixels, 3 * kImagePixels}; }
  std::vector<Real> gray_image(std::size_t i) const {
    std::vector<Real> g(kImagePixels);
    for (std::size_t p = 0; p < kImagePixels; ++p) g[p] = Real(gray[i * kImagePixels + p]) / Real(255);
    return g;
  }

  /// (B, 3, 28, 28) for the given sample indices.
  Tensor<Real> batch(std::span<const std::size_t> idx) const {
    Tensor<Real> t({idx.size(), 3, kImageSide, kImageSide});
    for (std::size_t b = 0; b < idx.size(); ++b)
      std::copy_n(images.data() + idx[b] * 3 * kImagePixels, 3 * kImagePixels, t.data() + b * 3 * kImagePixels);
    return t;
  }

  std::vector<int> targets(std::span<const std::size_t> idx) const {
    std::vector<int> t(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) t[b] = digits[idx[b]];
    return t;
  }
};

/// Alignment is a pure function of (digit, colour indices).
inline bool is_aligned(int digit, int color_index) { return digit == color_index; }

namespace detail {
/// Independent generator per (seed, sample index) so generation order does
/// not matter.
inline std::mt19937_64 sample_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(std::uint64_t(index) >> 32)};
  return std::mt19937_64(seq);
}

inline int draw_color(std::mt19937_64& rng, int digit, double q) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < q) return digit;
  std::uniform_int_distribution<int> other(0, static_cast<int>(kNumColors) - 2);
  const int j = other(rng);
  return j < digit ? j : j + 1;
}

inline BiasedDataset generate(const MnistSplit& base, const BiasSpec& spec, Split split, std::size_t limit) {
  spec.validate();
  if (base.rows != kImageSide || base.cols != kImageSide) throw RuntimeError("expected 28x28 MNIST images");
  const std::size_t n = limit ? std::min(limit, base.size()) : base.size();
  BiasedDataset ds;
  ds.split = split;
  ds.spec = spec;
  ds.images.resize(n * 3 * kImagePixels);
  ds.gray.assign(base.pixels.begin(), base.pixels.begin() + static_cast<std::ptrdiff_t>(n * kImagePixels));
  ds.digits.assign(base.labels.begin(), base.labels.begin() + static_cast<std::ptrdiff_t>(n));
  ds.bg_index.resize(n);
  ds.aligned_bg.resize(n);
  ds.aligned.resize(n);
  if (spec.fg_palette) {
    ds.fg_index.resize(n);
    ds.aligned_fg.resize(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = sample_rng(spec.seed, i);
    const int d = ds.digits[i];
    const int bg = draw_color(rng, d, spec.q);
    const auto gray = ds.gray_image(i);
    Tensor<Real> img = colorize_background(gray, spec.bg_palette.colors[static_cast<std::size_t>(bg)]);
    ds.bg_index[i] = bg;
    ds.aligned_bg[i] = is_aligned(d, bg);
    bool all = ds.aligned_bg[i];
    if (spec.fg_palette) {
      const int fg = draw_color(rng, d, spec.q);
      img = colorize_foreground(img, gray, spec.fg_palette->colors[static_cast<std::size_t>(fg)]);
      ds.fg_index[i] = fg;
      ds.aligned_fg[i] = is_aligned(d, fg);
      all = all && ds.aligned_fg[i];
    }
    ds.aligned[i] = all;
    std::copy(img.vec().begin(), img.vec().end(), ds.images.begin() + static_cast<std::ptrdiff_t>(i * 3 * kImagePixels));
  }
  return ds;
}
}  // namespace detail

/// Background-colour bias only. `limit` caps the sample count (0 = all).
inline BiasedDataset generate_biased_mnist(const MnistSplit& base, const BiasSpec& spec, Split split = Split::train,
                                           std::size_t limit = 0) {
  if (spec.fg_palette) throw ConfigError("generate_biased_mnist: spec carries a foreground palette");
  return detail::generate(base, spec, split, limit);
}

/// Background and foreground colour biases, drawn independently.
inline BiasedDataset generate_fb_biased_mnist(const MnistSplit& base, const BiasSpec& spec, Split split = Split::train,
                                              std::size_t limit = 0) {
  if (!spec.fg_palette) throw ConfigError("generate_fb_biased_mnist: spec lacks a foreground palette");
  return detail::generate(base, spec, split, limit);
}

/// Copy without protected-attribute labels (images and digits only).
inline BiasedDataset strip_attributes(const BiasedDataset& ds) {
  BiasedDataset out = ds;
  out.bg_index.clear();
  out.fg_index.clear();
  out.aligned_bg.clear();
  out.aligned_fg.clear();
  out.aligned.clear();
  return out;
}

struct CorrelationAudit {
  std::array<double, kNumColors> bg_rate{};
  std::optional<std::array<double, kNumColors>> fg_rate;
  std::array<std::size_t, kNumColors> class_count{};
  double overall_bg = 0;
  std::optional<double> overall_fg;
  double overall_aligned = 0;
  std::size_t n_aligned = 0, n_conflicting = 0;
};

/// Empirical per-class alignment rates and group sizes |A|, |C|.
inline CorrelationAudit audit_correlation(const BiasedDataset& ds) {
  if (ds.size() == 0) throw RuntimeError("cannot audit an empty dataset");
  if (!ds.has_attributes()) throw RuntimeError("cannot audit a dataset without attribute labels");
  CorrelationAudit a;
  std::array<std::size_t, kNumColors> bg_hits{}, fg_hits{};
  std::size_t all_bg = 0, all_fg = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto d = static_cast<std::size_t>(ds.digits[i]);
    ++a.class_count[d];
    bg_hits[d] += ds.aligned_bg[i];
    all_bg += ds.aligned_bg[i];
    if (ds.has_fg()) {
      fg_hits[d] += ds.aligned_fg[i];
      all_fg += ds.aligned_fg[i];
    }
    if (ds.aligned[i]) ++a.n_aligned;
    else ++a.n_conflicting;
  }
  const double n = static_cast<double>(ds.size());
  for (std::size_t d = 0; d < kNumColors; ++d)
    a.bg_rate[d] = a.class_count[d] ? double(bg_hits[d]) / double(a.class_count[d]) : 0.0;
  a.overall_bg = double(all_bg) / n;
  a.overall_aligned = double(a.n_aligned) / n;
  if (ds.has_fg()) {
    std::array<double, kNumColors> fr{};
    for (std::size_t d = 0; d < kNumColors; ++d)
      fr[d] = a.class_count[d] ? double(fg_hits[d]) / double(a.class_count[d]) : 0.0;
    a.fg_rate = fr;
    a.overall_fg = double(all_fg) / n;
  }
  return a;
}

/// 3 * sqrt(q (1 - q) / n)
inline double binomial_band(double q, std::size_t n) { return 3.0 * std::sqrt(q * (1 - q) / double(n)); }

}  // namespace badd
