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

#include <array>

#include "badd/datasets.hpp"
#include "badd/network.hpp"

namespace badd {

template <typename T = Real>
struct Model {
  NetworkSpec spec;
  ModelState<T> state;
};

/// Four conv(7x7, stride 1, pad 3) -> batchnorm -> relu blocks, global
/// average pooling and a linear head. h has dimension widths[3].
inline NetworkSpec simple_convnet_spec(std::span<const std::size_t> widths, std::size_t num_classes,
                                       std::size_t input_channels = 3, std::size_t concat_dim = 0) {
  if (widths.size() != 4) throw ConfigError("SimpleConvNet needs exactly 4 widths, got " + std::to_string(widths.size()));
  if (num_classes < 2) throw ConfigError("SimpleConvNet needs K >= 2, got " + std::to_string(num_classes));
  NetworkSpec spec;
  std::size_t in = input_channels;
  for (std::size_t b = 0; b < 4; ++b) {
    if (widths[b] == 0) throw ConfigError("channel widths must be positive");
    const auto id = std::to_string(b + 1);
    spec.layers.push_back({LayerKind::conv2d, "conv" + id, in, widths[b], 7, 1, 3});
    spec.layers.push_back({LayerKind::batchnorm, "bn" + id, widths[b], widths[b], 0, 1, 0});
    spec.layers.push_back({LayerKind::relu, "relu" + id, widths[b], widths[b], 0, 1, 0});
    in = widths[b];
  }
  spec.layers.push_back({LayerKind::avgpool_global, "pool", in, in, 0, 1, 0});
  spec.layers.push_back({LayerKind::linear, "fc", in + concat_dim, num_classes, 0, 1, 0});
  spec.feature_dim = in;
  spec.num_classes = num_classes;
  spec.concat_dim = concat_dim;
  spec.validate();
  return spec;
}

template <typename T = Real>
Model<T> build_simple_convnet(std::span<const std::size_t> widths, std::size_t num_classes, std::uint64_t seed,
                              std::size_t input_channels = 3, std::size_t concat_dim = 0) {
  Model<T> m;
  m.spec = simple_convnet_spec(widths, num_classes, input_channels, concat_dim);
  m.state = init_model<T>(m.spec, seed);
  return m;
}

/// Closed form: sum(49*c_in*c_out + c_out) + 2*sum(c_out) + (F+concat)*K + K.
inline std::size_t simple_convnet_param_count(std::span<const std::size_t> widths, std::size_t num_classes,
                                              std::size_t input_channels = 3, std::size_t concat_dim = 0) {
  std::size_t n = 0, in = input_channels;
  for (auto w : widths) {
    n += 7 * 7 * in * w + w + 2 * w;
    in = w;
  }
  return n + (in + concat_dim) * num_classes + num_classes;
}

/// Spatially pooled activation of block `layer_index` (1-based; the last
/// block is h itself), eval mode, one row per sample.
template <typename T>
Tensor<T> extract_features(const NetworkSpec& spec, const ModelState<T>& state, const Tensor<T>& x,
                           std::size_t layer_index) {
  const std::size_t tap = spec.tap_layer(layer_index);
  auto c = forward(spec, state, x, Mode::eval);
  const auto& out = c.outputs[tap];
  return out.rank() == 4 ? ops::global_avgpool_forward(out) : out;
}

enum class Attribute { bg, fg };

inline std::string to_string(Attribute a) { return a == Attribute::bg ? "bg" : "fg"; }

inline Attribute attribute_from_string(const std::string& s) {
  if (s == "bg") return Attribute::bg;
  if (s == "fg") return Attribute::fg;
  throw ConfigError("unknown attribute '" + s + "' (expected bg or fg)");
}

/// Protected-attribute labels of `ds` for `a`; throws when absent.
inline const std::vector<int>& attribute_labels(const BiasedDataset& ds, Attribute a) {
  if (a == Attribute::bg) {
    if (ds.bg_index.empty()) throw ConfigError("dataset carries no background attribute labels");
    return ds.bg_index;
  }
  if (ds.fg_index.empty()) throw ConfigError("dataset carries no foreground attribute labels");
  return ds.fg_index;
}

enum class BiasSourceKind { classifier, label_embedding };

inline std::string to_string(BiasSourceKind k) {
  return k == BiasSourceKind::classifier ? "classifier" : "label-embedding";
}

inline BiasSourceKind bias_source_kind_from_string(const std::string& s) {
  if (s == "classifier") return BiasSourceKind::classifier;
  if (s == "label-embedding") return BiasSourceKind::label_embedding;
  throw ConfigError("unknown bias source '" + s + "' (expected classifier or label-embedding)");
}

/// Frozen network trained to predict one protected attribute.
struct BiasClassifier {
  Attribute attribute = Attribute::bg;
  Model<Real> model;
  /// (dim, tap width) fixed random map, present only when widths differ.
  std::optional<Tensor<Real>> projection;
};

/// Produces b for the main model at injection block `block`.
struct BiasSource {
  BiasSourceKind kind = BiasSourceKind::classifier;
  std::size_t block = 4;
  std::size_t dim = 0;
  std::uint64_t projection_seed = 0;
  std::vector<BiasClassifier> classifiers;
  /// Label embedding E, shape (dim, 10 or 20): bg one-hot then fg one-hot.
  Tensor<Real> embedding;
  bool has_fg = false;
  /// When set the embedding is not updated during training.
  bool frozen = false;

  std::size_t onehot_dim() const { return has_fg ? 2 * kNumColors : kNumColors; }
};

/// Seeded Gaussian map with std 1/sqrt(in).
inline Tensor<Real> random_projection(std::size_t out, std::size_t in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(in)));
  Tensor<Real> p({out, in});
  for (auto& v : p.vec()) v = static_cast<Real>(normal(rng));
  return p;
}

/// Wraps trained attribute classifiers. Each classifier's pooled tap at
/// `block` is projected to `dim` when its width differs; features of
/// several classifiers are summed.
inline BiasSource make_classifier_source(std::vector<BiasClassifier> classifiers, std::size_t block,
                                         std::size_t dim, std::uint64_t projection_seed) {
  if (classifiers.empty()) throw ConfigError("classifier bias source needs at least one classifier");
  BiasSource s;
  s.kind = BiasSourceKind::classifier;
  s.block = block;
  s.dim = dim;
  s.projection_seed = projection_seed;
  for (std::size_t i = 0; i < classifiers.size(); ++i) {
    auto& c = classifiers[i];
    const std::size_t w = c.model.spec.tap_width(block);
    if (w != dim) c.projection = random_projection(dim, w, projection_seed + i);
    else c.projection.reset();
    s.has_fg = s.has_fg || c.attribute == Attribute::fg;
  }
  s.classifiers = std::move(classifiers);
  return s;
}

/// Label-embedding source with E initialised N(0, 1/onehot_dim) from
/// `seed`, or zero when `zero` is set.
inline BiasSource make_embedding_source(std::size_t dim, bool has_fg, std::size_t block, std::uint64_t seed,
                                        bool zero = false) {
  if (dim == 0) throw ConfigError("embedding dimension must be positive");
  BiasSource s;
  s.kind = BiasSourceKind::label_embedding;
  s.block = block;
  s.dim = dim;
  s.has_fg = has_fg;
  s.projection_seed = seed;
  s.embedding = zero ? Tensor<Real>({dim, s.onehot_dim()}) : random_projection(dim, s.onehot_dim(), seed);
  return s;
}

/// b = E * onehot(t); t holds the bg index and, for two-attribute sources,
/// the fg index.
inline Tensor<Real> embed_protected_label(const BiasSource& s, std::span<const int> t) {
  if (s.kind != BiasSourceKind::label_embedding) throw ConfigError("bias source is not a label embedding");
  const std::size_t want = s.has_fg ? 2 : 1;
  if (t.size() != want)
    throw ConfigError("attribute tuple has " + std::to_string(t.size()) + " entries, expected " + std::to_string(want));
  Tensor<Real> b({s.dim});
  for (std::size_t a = 0; a < t.size(); ++a) {
    if (t[a] < 0 || t[a] >= static_cast<int>(kNumColors))
      throw ConfigError("attribute index " + std::to_string(t[a]) + " out of range [0,10)");
    const std::size_t col = a * kNumColors + static_cast<std::size_t>(t[a]);
    for (std::size_t f = 0; f < s.dim; ++f) b[f] += s.embedding.at(f, col);
  }
  return b;
}

/// (B, dim) bias features for dataset rows `idx`.
inline Tensor<Real> bias_features(const BiasSource& s, const BiasedDataset& ds, std::span<const std::size_t> idx) {
  Tensor<Real> b({idx.size(), s.dim});
  if (s.kind == BiasSourceKind::label_embedding) {
    const auto& bg = attribute_labels(ds, Attribute::bg);
    const std::vector<int>* fg = s.has_fg ? &attribute_labels(ds, Attribute::fg) : nullptr;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::vector<int> t{bg[idx[r]]};
      if (fg) t.push_back((*fg)[idx[r]]);
      const auto e = embed_protected_label(s, t);
      std::copy(e.vec().begin(), e.vec().end(), b.data() + r * s.dim);
    }
    return b;
  }
  const auto x = ds.batch(idx);
  for (const auto& c : s.classifiers) {
    auto f = extract_features(c.model.spec, c.model.state, x, s.block);
    if (c.projection) f = ops::linear_forward(f, *c.projection, Tensor<Real>({s.dim}));
    require_shape(f, b.shape(), "bias classifier features");
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += f[i];
  }
  return b;
}

}  // namespace badd
