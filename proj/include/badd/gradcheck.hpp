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

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <type_traits>
#include <random>
#include <set>

#include "badd/network.hpp"

namespace badd {

struct GradCheckOptions {
  Mode mode = Mode::eval;
  /// Coordinates sampled per parameter tensor (all when the tensor is smaller).
  std::size_t per_param = 24;
  std::uint64_t seed = 0;
  /// Parameters left out of the sample.
  std::set<std::string> exclude;
  /// Relative-error threshold used for `fraction_within`.
  double tolerance = 1e-4;
  /// Numeric derivative: a single central difference at `epsilon`, or
  /// Ridders' extrapolation starting from step `epsilon` and shrinking it.
  /// Ridders picks its step per coordinate from its own error estimate,
  /// so tiny gradients and nearby ReLU kinks stop dominating the max.
  enum class Method { central, ridders } method = Method::central;
  /// Halve the step (up to `max_halvings` times) until no ReLU input changes
  /// sign at +-step, so the difference quotient stays on one linear piece.
  /// Coordinates that still straddle a kink are skipped and counted.
  bool avoid_kinks = false;
  int max_halvings = 30;
  /// Evaluate the numeric side in double even when T is float.
  bool double_oracle = false;
};

/// Ridders' polynomial extrapolation of central differences; f(step)
/// returns the loss at the coordinate shifted by step.
template <typename F>
double ridders_derivative(F&& f, double h) {
  constexpr int kTab = 10;
  constexpr double kCon = 1.4, kCon2 = kCon * kCon, kSafe = 2.0;
  double a[kTab][kTab];
  a[0][0] = (f(h) - f(-h)) / (2 * h);
  double err = std::numeric_limits<double>::max(), best = a[0][0];
  for (int i = 1; i < kTab; ++i) {
    h /= kCon;
    a[0][i] = (f(h) - f(-h)) / (2 * h);
    double fac = kCon2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1);
      fac *= kCon2;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= kSafe * err) break;
  }
  return best;
}

struct GradCheckReport {
  double max_relative_error = 0;
  std::string worst_coordinate;
  std::size_t coordinates = 0;
  double fraction_within = 1;
  std::size_t kinked = 0;
  /// max over tensors of ||a - n|| / max(||a||, ||n||, 1e-8) on the sampled
  /// coordinates; robust to single coordinates whose gradient sits at the
  /// cancellation floor of the difference quotient.
  double max_tensor_relative_error = 0;
  std::string worst_tensor;
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

namespace detail {

/// Walks the sampled coordinates, comparing `analytic` against a numeric
/// derivative of the loss evaluated in precision U.
template <typename U, typename G>
GradCheckReport compare_numeric(const NetworkSpec& spec, const ModelState<U>& state, const Tensor<U>& batch,
                                std::span<const int> targets, double epsilon, const GradCheckOptions& opt,
                                const Injection<U>& inj, const G& analytic) {
  auto relu_pattern = [&](const ForwardCache<U>& c) {
    std::vector<bool> on;
    for (std::size_t l = 0; l < spec.layers.size(); ++l)
      if (spec.layers[l].kind == LayerKind::relu)
        for (auto v : c.layer_input(l).vec()) on.push_back(v > 0);
    return on;
  };
  const auto base_pattern =
      opt.avoid_kinks ? relu_pattern(forward(spec, state, batch, opt.mode, inj)) : std::vector<bool>{};

  std::mt19937_64 rng(opt.seed);
  GradCheckReport rep;
  std::size_t ok = 0;
  ModelState<U> probe = state;
  for (const auto& info : parameter_layout(spec)) {
    if (opt.exclude.count(info.name)) continue;
    const auto& g = analytic.params.at(info.name);
    Tensor<U>& p = probe.params.at(info.name);
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opt.per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.per_param);
    }
    double diff2 = 0, a2 = 0, n2 = 0;
    for (auto i : idx) {
      const U orig = p[i];
      auto shifted = [&](double step) {
        p[i] = static_cast<U>(static_cast<double>(orig) + step);
        return forward(spec, probe, batch, opt.mode, inj);
      };
      auto at = [&](double step) {
        return static_cast<double>(softmax_cross_entropy(shifted(step).logits, targets).mean_loss);
      };
      double h = epsilon;
      if (opt.avoid_kinks) {
        auto smooth = [&](double step) { return relu_pattern(shifted(step)) == base_pattern; };
        int halvings = 0;
        while (!(smooth(h) && smooth(-h)) && halvings++ < opt.max_halvings) h /= 2;
        if (halvings > opt.max_halvings) {
          p[i] = orig;
          ++rep.kinked;
          continue;
        }
      }
      const double numeric = opt.method == GradCheckOptions::Method::ridders
                                 ? ridders_derivative(at, h)
                                 : (at(h) - at(-h)) / (2 * h);
      p[i] = orig;
      const double a = static_cast<double>(g[i]);
      const double err = relative_error(a, numeric);
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      ++rep.coordinates;
      if (err <= opt.tolerance) ++ok;
      if (err > rep.max_relative_error || rep.worst_coordinate.empty()) {
        rep.max_relative_error = err;
        rep.worst_coordinate = info.name + "[" + std::to_string(i) + "]";
      }
    }
    const double terr = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    if (terr > rep.max_tensor_relative_error || rep.worst_tensor.empty()) {
      rep.max_tensor_relative_error = terr;
      rep.worst_tensor = info.name;
    }
  }
  rep.fraction_within = rep.coordinates ? static_cast<double>(ok) / static_cast<double>(rep.coordinates) : 1.0;
  return rep;
}

}  // namespace detail

/// Compares backward() against finite differences of the mean
/// cross-entropy on sampled parameter coordinates. Train-mode forwards
/// are pure, so batch statistics are recomputed for every perturbation.
template <typename T>
GradCheckReport grad_check(const NetworkSpec& spec, const ModelState<T>& state, const Tensor<T>& batch,
                           std::span<const int> targets, double epsilon, const GradCheckOptions& opt = {},
                           const Injection<T>& inj = {}) {
  const auto cache = forward(spec, state, batch, opt.mode, inj);
  const auto ce = softmax_cross_entropy(cache.logits, targets);
  const auto grads = backward_from_logits(spec, state, cache, cross_entropy_mean_grad(ce.probabilities, targets));
  if (!opt.double_oracle || std::is_same_v<T, double>)
    return detail::compare_numeric(spec, state, batch, targets, epsilon, opt, inj, grads);
  // Same parameters, evaluated in double: isolates the analytic gradient's
  // own rounding from the oracle's cancellation.
  const auto sd = state.template cast<double>();
  const auto bd = batch.template cast<double>();
  std::optional<Tensor<double>> add, cat;
  Injection<double> id;
  id.block = inj.block;
  if (inj.add) id.add = &add.emplace(inj.add->template cast<double>());
  if (inj.concat) id.concat = &cat.emplace(inj.concat->template cast<double>());
  return detail::compare_numeric(spec, sd, bd, targets, epsilon, opt, id, grads);
}

}  // namespace badd
