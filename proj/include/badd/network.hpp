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

// Sequential networks over the fixed layer vocabulary. A network is a
// NetworkSpec (pure description) plus a ModelState (named parameters and
// batchnorm buffers). forward() is pure: in train mode it returns the
// updated running statistics in the cache and the caller commits them with
// commit_running_stats().

#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "badd/layers.hpp"
#include "badd/loss.hpp"

namespace badd {

enum class LayerKind { conv2d, batchnorm, relu, avgpool_global, linear };

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::avgpool_global: return "avgpool-global";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv2d") return LayerKind::conv2d;
  if (s == "batchnorm") return LayerKind::batchnorm;
  if (s == "relu") return LayerKind::relu;
  if (s == "avgpool-global") return LayerKind::avgpool_global;
  if (s == "linear") return LayerKind::linear;
  throw RuntimeError("unknown layer kind '" + s + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  /// Extra head inputs appended after h (concatenation ablation); 0 otherwise.
  std::size_t concat_dim = 0;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;

  std::size_t input_channels() const { return layers.front().in_channels; }

  /// Throws unless the final layer is linear with output K and input
  /// feature_dim (+ concat_dim).
  void validate() const {
    if (layers.empty() || layers.back().kind != LayerKind::linear)
      throw ConfigError("network must end with a linear layer");
    const auto& head = layers.back();
    if (head.out_channels != num_classes)
      throw ConfigError("head output " + std::to_string(head.out_channels) + " != num_classes " +
                        std::to_string(num_classes));
    if (head.in_channels != feature_dim + concat_dim)
      throw ConfigError("head input " + std::to_string(head.in_channels) + " != feature_dim " +
                        std::to_string(feature_dim) + " + concat_dim " + std::to_string(concat_dim));
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  }

  /// Layer indices after which block k (1-based) is tapped. Blocks are the
  /// ReLU outputs, except the last one which is the pooled feature vector h.
  std::vector<std::size_t> taps() const {
    std::vector<std::size_t> relus;
    std::optional<std::size_t> pool;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].kind == LayerKind::relu) relus.push_back(i);
      if (layers[i].kind == LayerKind::avgpool_global) pool = i;
    }
    if (!pool) return relus;
    std::vector<std::size_t> out;
    for (auto r : relus)
      if (r < *pool) out.push_back(r);
    if (!out.empty()) out.back() = *pool;
    return out;
  }

  std::size_t tap_layer(std::size_t block) const {
    const auto t = taps();
    if (block < 1 || block > t.size())
      throw ConfigError("layer index " + std::to_string(block) + " out of range [1," +
                        std::to_string(t.size()) + "]");
    return t[block - 1];
  }

  /// Channel width of the activation at block k.
  std::size_t tap_width(std::size_t block) const {
    const std::size_t idx = tap_layer(block);
    for (std::size_t i = idx + 1; i-- > 0;)
      if (layers[i].kind == LayerKind::conv2d || layers[i].kind == LayerKind::linear)
        return layers[i].out_channels;
    throw ConfigError("no channel-producing layer before tap");
  }
};

struct ParamInfo {
  std::string name;
  Shape shape;
};

/// Trainable parameters in a fixed order (layer order; weight before bias).
inline std::vector<ParamInfo> parameter_layout(const NetworkSpec& spec) {
  std::vector<ParamInfo> out;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::conv2d:
        out.push_back({l.name + ".weight", {l.out_channels, l.in_channels, l.kernel, l.kernel}});
        out.push_back({l.name + ".bias", {l.out_channels}});
        break;
      case LayerKind::batchnorm:
        out.push_back({l.name + ".gamma", {l.in_channels}});
        out.push_back({l.name + ".beta", {l.in_channels}});
        break;
      case LayerKind::linear:
        out.push_back({l.name + ".weight", {l.out_channels, l.in_channels}});
        out.push_back({l.name + ".bias", {l.out_channels}});
        break;
      default:
        break;
    }
  }
  return out;
}

inline std::vector<ParamInfo> buffer_layout(const NetworkSpec& spec) {
  std::vector<ParamInfo> out;
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::batchnorm) {
      out.push_back({l.name + ".running_mean", {l.in_channels}});
      out.push_back({l.name + ".running_var", {l.in_channels}});
    }
  return out;
}

inline std::size_t parameter_count(const NetworkSpec& spec) {
  std::size_t n = 0;
  for (const auto& p : parameter_layout(spec)) n += shape_numel(p.shape);
  return n;
}

template <typename T>
using TensorMap = std::map<std::string, Tensor<T>>;

template <typename T>
struct ModelState {
  TensorMap<T> params;
  TensorMap<T> buffers;

  friend bool operator==(const ModelState&, const ModelState&) = default;

  const Tensor<T>& param(const std::string& n) const {
    auto it = params.find(n);
    if (it == params.end()) throw RuntimeError("missing parameter '" + n + "'");
    return it->second;
  }
  const Tensor<T>& buffer(const std::string& n) const {
    auto it = buffers.find(n);
    if (it == buffers.end()) throw RuntimeError("missing buffer '" + n + "'");
    return it->second;
  }

  template <typename U>
  ModelState<U> cast() const {
    ModelState<U> out;
    for (const auto& [k, v] : params) out.params.emplace(k, v.template cast<U>());
    for (const auto& [k, v] : buffers) out.buffers.emplace(k, v.template cast<U>());
    return out;
  }
};

/// Every layout entry present with matching shape, and nothing else.
template <typename T>
void validate_state(const NetworkSpec& spec, const ModelState<T>& state) {
  const auto params = parameter_layout(spec);
  if (params.size() != state.params.size())
    throw RuntimeError("model state has " + std::to_string(state.params.size()) + " parameters, spec expects " +
                       std::to_string(params.size()));
  for (const auto& p : params) require_shape(state.param(p.name), p.shape, p.name);
  for (const auto& b : buffer_layout(spec)) require_shape(state.buffer(b.name), b.shape, b.name);
}

/// Kaiming-normal (fan-in) init: std sqrt(2/fan_in) for conv weights and
/// sqrt(1/fan_in) for linear weights; zero biases, unit gamma, zero beta.
/// Concatenation heads draw the h-block first so it matches the plain head.
template <typename T>
ModelState<T> init_model(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ModelState<T> st;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::conv2d) {
      Tensor<T> w({l.out_channels, l.in_channels, l.kernel, l.kernel});
      const double sd = std::sqrt(2.0 / static_cast<double>(l.in_channels * l.kernel * l.kernel));
      for (auto& v : w.vec()) v = static_cast<T>(sd * normal(rng));
      st.params.emplace(l.name + ".weight", std::move(w));
      st.params.emplace(l.name + ".bias", Tensor<T>({l.out_channels}));
    } else if (l.kind == LayerKind::batchnorm) {
      st.params.emplace(l.name + ".gamma", Tensor<T>({l.in_channels}, T{1}));
      st.params.emplace(l.name + ".beta", Tensor<T>({l.in_channels}));
      st.buffers.emplace(l.name + ".running_mean", Tensor<T>({l.in_channels}));
      st.buffers.emplace(l.name + ".running_var", Tensor<T>({l.in_channels}, T{1}));
    } else if (l.kind == LayerKind::linear) {
      const bool is_head = &l == &spec.layers.back();
      const std::size_t main_in = is_head ? spec.feature_dim : l.in_channels;
      Tensor<T> w({l.out_channels, l.in_channels});
      const double sd = std::sqrt(1.0 / static_cast<double>(main_in));
      for (std::size_t k = 0; k < l.out_channels; ++k)
        for (std::size_t f = 0; f < main_in; ++f) w.at(k, f) = static_cast<T>(sd * normal(rng));
      for (std::size_t k = 0; k < l.out_channels; ++k)
        for (std::size_t f = main_in; f < l.in_channels; ++f) w.at(k, f) = static_cast<T>(sd * normal(rng));
      st.params.emplace(l.name + ".weight", std::move(w));
      st.params.emplace(l.name + ".bias", Tensor<T>({l.out_channels}));
    }
  }
  return st;
}

enum class Mode { train, eval };

/// Features added into the network during a forward pass.
template <typename T>
struct Injection {
  /// (N, C) vector added (broadcast spatially) to the output of block
  /// `block` (1-based tap index).
  const Tensor<T>* add = nullptr;
  std::size_t block = 0;
  /// (N, concat_dim) appended to h before the head.
  const Tensor<T>* concat = nullptr;
};

template <typename T>
struct ForwardCache {
  Mode mode = Mode::eval;
  Tensor<T> input;
  /// outputs[i] is the output of layer i (after any injection at i).
  std::vector<Tensor<T>> outputs;
  std::vector<ops::BatchNormSaved<T>> bn_saved;
  /// Running statistics after this forward (train mode only).
  TensorMap<T> running_updates;
  std::optional<std::size_t> inject_after;
  bool concatenated = false;
  Tensor<T> head_input;  // [h ; b] when concatenated
  Tensor<T> features;  // h: pooled penultimate output, before injection
  Tensor<T> logits;

  const Tensor<T>& layer_input(std::size_t i) const { return i == 0 ? input : outputs[i - 1]; }
};

namespace detail {
template <typename T>
Tensor<T> concat_columns(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t n = a.dim(0), fa = a.dim(1), fb = b.dim(1);
  if (b.dim(0) != n) throw RuntimeError("concat: batch size mismatch");
  Tensor<T> out({n, fa + fb});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a.data() + i * fa, a.data() + (i + 1) * fa, out.data() + i * (fa + fb));
    std::copy(b.data() + i * fb, b.data() + (i + 1) * fb, out.data() + i * (fa + fb) + fa);
  }
  return out;
}

/// (N, ...) viewed as (N, F) for fully connected layers.
template <typename T>
Tensor<T> flatten_rows(const Tensor<T>& x) {
  return x.rank() == 2 ? x : x.reshaped({x.dim(0), x.size() / x.dim(0)});
}
}  // namespace detail

template <typename T>
ForwardCache<T> forward(const NetworkSpec& spec, const ModelState<T>& state, const Tensor<T>& batch,
                        Mode mode, const Injection<T>& inj = {}, double bn_eps = 1e-5,
                        double bn_momentum = 0.1) {
  if (batch.rank() != 4 || batch.dim(1) != spec.input_channels())
    throw RuntimeError("batch shape " + shape_str(batch.shape()) + " does not match network input channels " +
                       std::to_string(spec.input_channels()));
  ForwardCache<T> c;
  c.mode = mode;
  c.input = batch;
  c.outputs.reserve(spec.layers.size());
  c.bn_saved.resize(spec.layers.size());
  if (inj.add) c.inject_after = spec.tap_layer(inj.block);
  if (inj.concat && spec.concat_dim == 0) throw RuntimeError("network has no concatenation inputs");
  if (!inj.concat && spec.concat_dim != 0 && mode == Mode::train)
    throw RuntimeError("concatenation network trained without concatenated features");
  std::optional<std::size_t> pool_index;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == LayerKind::avgpool_global) pool_index = i;

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const Tensor<T>& x = c.layer_input(i);
    Tensor<T> y;
    switch (l.kind) {
      case LayerKind::conv2d:
        y = ops::conv2d_forward(x, state.param(l.name + ".weight"), state.param(l.name + ".bias"), l.stride,
                                l.padding);
        break;
      case LayerKind::batchnorm:
        if (mode == Mode::train) {
          Tensor<T> rm = state.buffer(l.name + ".running_mean");
          Tensor<T> rv = state.buffer(l.name + ".running_var");
          y = ops::batchnorm_forward_train(x, state.param(l.name + ".gamma"), state.param(l.name + ".beta"), rm, rv,
                                           bn_eps, bn_momentum, c.bn_saved[i]);
          c.running_updates.emplace(l.name + ".running_mean", std::move(rm));
          c.running_updates.emplace(l.name + ".running_var", std::move(rv));
        } else {
          y = ops::batchnorm_forward_eval(x, state.param(l.name + ".gamma"), state.param(l.name + ".beta"),
                                          state.buffer(l.name + ".running_mean"),
                                          state.buffer(l.name + ".running_var"), bn_eps);
        }
        break;
      case LayerKind::relu:
        y = ops::relu_forward(x);
        break;
      case LayerKind::avgpool_global:
        y = ops::global_avgpool_forward(x);
        break;
      case LayerKind::linear: {
        const bool is_head = i + 1 == spec.layers.size();
        if (is_head && inj.concat) {
          c.concatenated = true;
          c.head_input = detail::concat_columns(x, *inj.concat);
          y = ops::linear_forward(c.head_input, state.param(l.name + ".weight"), state.param(l.name + ".bias"));
        } else if (is_head && spec.concat_dim != 0) {
          // Inference on h alone: only the h-block of W is used.
          const auto& w = state.param(l.name + ".weight");
          Tensor<T> wh({l.out_channels, spec.feature_dim});
          for (std::size_t k = 0; k < l.out_channels; ++k)
            for (std::size_t f = 0; f < spec.feature_dim; ++f) wh.at(k, f) = w.at(k, f);
          y = ops::linear_forward(x, wh, state.param(l.name + ".bias"));
        } else {
          y = ops::linear_forward(detail::flatten_rows(x), state.param(l.name + ".weight"),
                                  state.param(l.name + ".bias"));
        }
        break;
      }
    }
    if (pool_index && i == *pool_index) c.features = y;
    if (c.inject_after && *c.inject_after == i) ops::add_channel_vector(y, *inj.add);
    require_finite(y, "output of layer '" + l.name + "'");
    c.outputs.push_back(std::move(y));
  }
  if (!pool_index) c.features = spec.layers.size() >= 2 ? c.outputs[c.outputs.size() - 2] : batch;
  c.logits = c.outputs.back();
  return c;
}

template <typename T>
void commit_running_stats(ModelState<T>& state, const ForwardCache<T>& cache) {
  for (const auto& [k, v] : cache.running_updates) state.buffers.at(k) = v;
}

template <typename T>
struct Gradients {
  TensorMap<T> params;
  /// d/d(injected vector), shape (N, C), present when an injection was used.
  std::optional<Tensor<T>> injected;
  /// d/d(concatenated features), shape (N, concat_dim).
  std::optional<Tensor<T>> concatenated;
  /// d/d(input batch), when requested.
  std::optional<Tensor<T>> input;
};

/// Backpropagates an upstream logit gradient through a cached forward pass.
/// Layers before `stop_at_layer` are not visited (their parameters get no
/// gradient), which makes head-only backward passes cheap.
template <typename T>
Gradients<T> backward_from_logits(const NetworkSpec& spec, const ModelState<T>& state, const ForwardCache<T>& c,
                                  const Tensor<T>& dlogits, bool need_input_grad = false,
                                  double bn_eps = 1e-5, std::size_t stop_at_layer = 0) {
  require_shape(dlogits, c.logits.shape(), "logit gradient");
  Gradients<T> g;
  Tensor<T> dy = dlogits;
  for (std::size_t i = spec.layers.size(); i-- > stop_at_layer;) {
    const auto& l = spec.layers[i];
    const Tensor<T>& x = c.layer_input(i);
    if (c.inject_after && *c.inject_after == i) g.injected = ops::sum_spatial(dy);
    const bool need_dx = i > stop_at_layer || need_input_grad;
    switch (l.kind) {
      case LayerKind::conv2d: {
        auto r = ops::conv2d_backward(x, state.param(l.name + ".weight"), dy, l.stride, l.padding, need_dx);
        g.params[l.name + ".weight"] = std::move(r.dweight);
        g.params[l.name + ".bias"] = std::move(r.dbias);
        dy = std::move(r.dinput);
        break;
      }
      case LayerKind::batchnorm: {
        auto r = c.mode == Mode::train
                     ? ops::batchnorm_backward_train(x, state.param(l.name + ".gamma"), dy, c.bn_saved[i])
                     : ops::batchnorm_backward_eval(x, state.param(l.name + ".gamma"),
                                                    state.buffer(l.name + ".running_mean"),
                                                    state.buffer(l.name + ".running_var"), bn_eps, dy);
        g.params[l.name + ".gamma"] = std::move(r.dgamma);
        g.params[l.name + ".beta"] = std::move(r.dbeta);
        dy = std::move(r.dinput);
        break;
      }
      case LayerKind::relu:
        dy = ops::relu_backward(x, dy);
        break;
      case LayerKind::avgpool_global:
        dy = ops::global_avgpool_backward(x.shape(), dy);
        break;
      case LayerKind::linear: {
        const bool is_head = i + 1 == spec.layers.size();
        if (is_head && c.concatenated) {
          auto r = ops::linear_backward(c.head_input, state.param(l.name + ".weight"), dy);
          g.params[l.name + ".weight"] = std::move(r.dweight);
          g.params[l.name + ".bias"] = std::move(r.dbias);
          const std::size_t n = r.dinput.dim(0), fh = spec.feature_dim, fb = spec.concat_dim;
          Tensor<T> dh({n, fh}), db({n, fb});
          for (std::size_t s = 0; s < n; ++s) {
            std::copy_n(r.dinput.data() + s * (fh + fb), fh, dh.data() + s * fh);
            std::copy_n(r.dinput.data() + s * (fh + fb) + fh, fb, db.data() + s * fb);
          }
          g.concatenated = std::move(db);
          dy = std::move(dh);
          break;
        }
        if (is_head && spec.concat_dim != 0 && !c.concatenated) {
          const auto& w = state.param(l.name + ".weight");
          Tensor<T> wh({l.out_channels, spec.feature_dim});
          for (std::size_t k = 0; k < l.out_channels; ++k)
            for (std::size_t f = 0; f < spec.feature_dim; ++f) wh.at(k, f) = w.at(k, f);
          auto r = ops::linear_backward(x, wh, dy);
          Tensor<T> dw(w.shape());
          for (std::size_t k = 0; k < l.out_channels; ++k)
            for (std::size_t f = 0; f < spec.feature_dim; ++f) dw.at(k, f) = r.dweight.at(k, f);
          g.params[l.name + ".weight"] = std::move(dw);
          g.params[l.name + ".bias"] = std::move(r.dbias);
          dy = std::move(r.dinput);
          break;
        }
        auto r = ops::linear_backward(detail::flatten_rows(x), state.param(l.name + ".weight"), dy);
        g.params[l.name + ".weight"] = std::move(r.dweight);
        g.params[l.name + ".bias"] = std::move(r.dbias);
        dy = r.dinput.reshaped(x.shape());
        break;
      }
    }
    if (!need_dx) break;
  }
  if (need_input_grad && stop_at_layer == 0) g.input = std::move(dy);
  return g;
}

}  // namespace badd
