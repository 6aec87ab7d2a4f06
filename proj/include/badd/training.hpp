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

// Training loops: plain cross-entropy, BAdd (b added to the representation
// at a chosen block during training only), the concatenation variant, and
// head fine-tuning on h with a frozen backbone.

#pragma once

#include <algorithm>
#include <functional>
#include <numeric>

#include "badd/metrics.hpp"
#include "badd/optim.hpp"

namespace badd {

enum class TrainMode { vanilla, badd_add, badd_concat };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::vanilla: return "vanilla";
    case TrainMode::badd_add: return "badd-add";
    case TrainMode::badd_concat: return "badd-concat";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "vanilla") return TrainMode::vanilla;
  if (s == "badd-add") return TrainMode::badd_add;
  if (s == "badd-concat") return TrainMode::badd_concat;
  throw ConfigError("unknown mode '" + s + "' (expected vanilla, badd-add or badd-concat)");
}

struct TrainConfig {
  std::size_t epochs = 80;
  std::size_t batch_size = 128;
  double initial_lr = 1e-3;
  double weight_decay = 1e-4;
  double decay_factor = 10;
  TrainMode mode = TrainMode::vanilla;
  std::size_t injection_layer = 4;
  BiasSourceKind bias_source = BiasSourceKind::classifier;
  std::uint64_t seed = 1;
  std::size_t finetune_epochs = 20;
  bool reinit_head = false;
  bool freeze_embedding = false;
  std::vector<std::size_t> widths{16, 32, 64, 128};
  /// Epochs used to train each bias-capturing classifier.
  std::size_t bias_epochs = 5;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(initial_lr >= 0)) throw ConfigError("initial_lr must be non-negative");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (injection_layer < 1 || injection_layer > 4)
      throw ConfigError("injection_layer must lie in {1,2,3,4}, got " + std::to_string(injection_layer));
    if (mode == TrainMode::badd_concat && injection_layer != 4)
      throw ConfigError("concatenation is only defined at the head (injection_layer 4)");
    if (widths.size() != 4) throw ConfigError("widths must list 4 channel counts");
    if (bias_epochs == 0) throw ConfigError("bias_epochs must be positive");
  }

  /// Step schedule when it fits (>= 3 epochs, lr > 0), constant otherwise.
  double lr_at(std::size_t epoch) const {
    if (epochs >= 3 && initial_lr > 0) return LRSchedule(epochs, initial_lr, decay_factor).lr_at_epoch(epoch);
    return initial_lr;
  }

  /// First epoch of the second schedule segment.
  std::size_t second_segment_start() const { return epochs >= 3 ? epochs / 3 : 0; }
};

struct BatchRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0;
  double loss_aligned = 0;
  double loss_conflicting = 0;
  std::size_t n_aligned = 0;
  std::size_t n_conflicting = 0;
  /// False when the dataset carries no alignment flags.
  bool grouped = true;

  friend bool operator==(const BatchRecord&, const BatchRecord&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double mean_loss = 0;
  double train_acc = 0;
};

struct TrainTrace {
  std::vector<BatchRecord> batches;
  std::vector<EpochRecord> epochs;

  std::vector<double> loss_aligned() const {
    std::vector<double> v;
    v.reserve(batches.size());
    for (const auto& b : batches) v.push_back(b.loss_aligned);
    return v;
  }

  /// Max L_A over batches with epoch >= `from_epoch`.
  double max_loss_aligned_from(std::size_t from_epoch) const {
    double m = 0;
    for (const auto& b : batches)
      if (b.epoch >= from_epoch) m = std::max(m, b.loss_aligned);
    return m;
  }
};

/// Permutation of [0, n) fixed by (seed, epoch) and shared by every mode.
inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x0bad0bd1u};
  std::mt19937_64 rng(seq);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

/// Main model for `cfg`; concatenation heads get `bias_dim` extra inputs.
inline Model<Real> build_main_model(const TrainConfig& cfg, std::size_t bias_dim = 0) {
  return build_simple_convnet<Real>(cfg.widths, kNumColors, cfg.seed, 3,
                                    cfg.mode == TrainMode::badd_concat ? bias_dim : 0);
}

namespace detail {

inline AdamConfig adam_config(const TrainConfig& cfg) {
  AdamConfig a;
  a.weight_decay = cfg.weight_decay;
  return a;
}

/// Shared loop. `bias` (when set) provides b for a batch of dataset rows and
/// `bias_grad` receives d/db for those rows.
struct BiasHooks {
  std::function<Tensor<Real>(std::span<const std::size_t>)> features;
  std::function<void(std::span<const std::size_t>, const Tensor<Real>&)> gradient;
  std::function<void(double)> step;
};

inline TrainTrace fit(Model<Real>& m, const BiasedDataset& ds, std::span<const int> targets, const TrainConfig& cfg,
                      const BiasHooks* hooks) {
  cfg.validate();
  if (ds.size() == 0) throw RuntimeError("cannot train on an empty dataset");
  if (targets.size() != ds.size()) throw RuntimeError("target count does not match dataset size");
  OptimizerState<Real> opt;
  opt.config = adam_config(cfg);
  TrainTrace trace;
  std::size_t step = 0;
  const bool concat = cfg.mode == TrainMode::badd_concat;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    const auto order = shuffled_order(ds.size(), cfg.seed, epoch);
    EpochRecord er{epoch, lr, 0, 0};
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b0, std::min(cfg.batch_size, order.size() - b0));
      const auto x = ds.batch(idx);
      std::vector<int> y(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) y[r] = targets[idx[r]];
      Tensor<Real> bias;
      Injection<Real> inj;
      if (hooks) {
        bias = hooks->features(idx);
        if (concat) inj.concat = &bias;
        else {
          inj.add = &bias;
          inj.block = cfg.injection_layer;
        }
      }
      auto cache = forward(m.spec, m.state, x, Mode::train, inj);
      const auto ce = softmax_cross_entropy(cache.logits, y);
      BatchRecord rec;
      rec.epoch = epoch;
      rec.step = step++;
      rec.loss = ce.mean_loss;
      if (!ds.aligned.empty()) {
        std::vector<std::uint8_t> flags(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) flags[r] = ds.aligned[idx[r]];
        const auto d = loss_decomposition<Real>(ce.per_sample.span(), flags);
        rec.loss_aligned = d.loss_aligned;
        rec.loss_conflicting = d.loss_conflicting;
        rec.n_aligned = d.n_aligned;
        rec.n_conflicting = d.n_conflicting;
      } else {
        rec.grouped = false;
      }
      trace.batches.push_back(rec);
      er.mean_loss += ce.mean_loss * double(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const Real* z = ce.probabilities.data() + r * m.spec.num_classes;
        correct += static_cast<std::size_t>(std::max_element(z, z + m.spec.num_classes) - z) ==
                   static_cast<std::size_t>(y[r]);
      }

      const auto g = backward_from_logits(m.spec, m.state, cache, cross_entropy_mean_grad(ce.probabilities, y));
      commit_running_stats(m.state, cache);
      if (lr > 0) adam_step(m.state.params, g.params, opt, lr);
      if (hooks && hooks->gradient) {
        const auto& gb = concat ? g.concatenated : g.injected;
        if (!gb) throw RuntimeError("missing gradient for bias features");
        hooks->gradient(idx, *gb);
        if (lr > 0 && hooks->step) hooks->step(lr);
      }
    }
    er.mean_loss /= double(ds.size());
    er.train_acc = double(correct) / double(ds.size());
    trace.epochs.push_back(er);
  }
  return trace;
}

/// b for every dataset row, computed once (frozen sources only).
inline Tensor<Real> precompute_bias(const BiasSource& s, const BiasedDataset& ds, std::size_t chunk = 256) {
  Tensor<Real> all({ds.size(), s.dim});
  std::vector<std::size_t> idx;
  for (std::size_t i0 = 0; i0 < ds.size(); i0 += chunk) {
    idx.resize(std::min(chunk, ds.size() - i0));
    std::iota(idx.begin(), idx.end(), i0);
    const auto b = bias_features(s, ds, idx);
    std::copy(b.vec().begin(), b.vec().end(), all.data() + i0 * s.dim);
  }
  return all;
}

inline Tensor<Real> gather_rows(const Tensor<Real>& all, std::span<const std::size_t> idx) {
  const std::size_t f = all.dim(1);
  Tensor<Real> out({idx.size(), f});
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(all.data() + idx[r] * f, f, out.data() + r * f);
  return out;
}

/// Training driver for either bias-injecting mode.
inline TrainTrace fit_with_source(Model<Real>& m, BiasSource& src, const BiasedDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  const bool concat = cfg.mode == TrainMode::badd_concat;
  const std::size_t want = concat ? m.spec.concat_dim : m.spec.tap_width(cfg.injection_layer);
  if (src.dim != want)
    throw ConfigError("bias source dimension " + std::to_string(src.dim) + " does not match " +
                      (concat ? std::string("concatenation width ") : std::string("block width ")) +
                      std::to_string(want));
  if (!concat && src.block != cfg.injection_layer)
    throw ConfigError("bias source built for block " + std::to_string(src.block) + ", injection_layer is " +
                      std::to_string(cfg.injection_layer));
  BiasHooks hooks;
  Tensor<Real> cached;
  if (src.kind == BiasSourceKind::classifier) {
    cached = precompute_bias(src, ds);
    hooks.features = [&](std::span<const std::size_t> idx) { return gather_rows(cached, idx); };
    return fit(m, ds, ds.digits, cfg, &hooks);
  }
  attribute_labels(ds, Attribute::bg);
  if (src.has_fg) attribute_labels(ds, Attribute::fg);
  hooks.features = [&](std::span<const std::size_t> idx) { return bias_features(src, ds, idx); };
  if (src.frozen) return fit(m, ds, ds.digits, cfg, &hooks);
  OptimizerState<Real> eopt;
  eopt.config = adam_config(cfg);
  Tensor<Real> de;
  hooks.gradient = [&](std::span<const std::size_t> idx, const Tensor<Real>& db) {
    de = Tensor<Real>(src.embedding.shape());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::vector<std::size_t> cols{static_cast<std::size_t>(ds.bg_index[idx[r]])};
      if (src.has_fg) cols.push_back(kNumColors + static_cast<std::size_t>(ds.fg_index[idx[r]]));
      for (auto col : cols)
        for (std::size_t f = 0; f < src.dim; ++f) de.at(f, col) += db.at(r, f);
    }
  };
  hooks.step = [&](double lr) {
    TensorMap<Real> p{{"embedding", std::move(src.embedding)}};
    adam_step(p, TensorMap<Real>{{"embedding", de}}, eopt, lr);
    src.embedding = std::move(p.at("embedding"));
  };
  return fit(m, ds, ds.digits, cfg, &hooks);
}

}  // namespace detail

/// Plain cross-entropy training on the digit labels.
inline TrainTrace train_vanilla(Model<Real>& m, const BiasedDataset& ds, const TrainConfig& cfg) {
  if (cfg.mode != TrainMode::vanilla) throw ConfigError("train_vanilla requires mode vanilla");
  return detail::fit(m, ds, ds.digits, cfg, nullptr);
}

/// Training predictions use h + b (or block_k + b broadcast spatially).
/// A label-embedding source that is not frozen is updated jointly.
inline TrainTrace train_badd(Model<Real>& m, BiasSource& src, const BiasedDataset& ds, const TrainConfig& cfg) {
  if (cfg.mode != TrainMode::badd_add) throw ConfigError("train_badd requires mode badd-add");
  return detail::fit_with_source(m, src, ds, cfg);
}

/// Training predictions use W [h ; b] + rho; `m` must have a widened head.
inline TrainTrace train_concat(Model<Real>& m, BiasSource& src, const BiasedDataset& ds, const TrainConfig& cfg) {
  if (cfg.mode != TrainMode::badd_concat) throw ConfigError("train_concat requires mode badd-concat");
  if (m.spec.concat_dim == 0) throw ConfigError("train_concat needs a model built with a concatenation head");
  return detail::fit_with_source(m, src, ds, cfg);
}

/// SimpleConvNet trained to predict protected attribute `a` from the image.
/// Its seed is offset from the main model's so the two never coincide.
inline BiasClassifier train_bias_capturing(const BiasedDataset& ds, Attribute a, const TrainConfig& cfg) {
  const auto& labels = attribute_labels(ds, a);
  TrainConfig c = cfg;
  c.mode = TrainMode::vanilla;
  c.epochs = cfg.bias_epochs;
  c.seed = cfg.seed + (a == Attribute::bg ? 1000 : 2000);
  BiasClassifier bc;
  bc.attribute = a;
  bc.model = build_simple_convnet<Real>(c.widths, kNumColors, c.seed);
  detail::fit(bc.model, ds, labels, c, nullptr);
  return bc;
}

/// Pooled h for every row, eval mode.
inline Tensor<Real> compute_features(const Model<Real>& m, const BiasedDataset& ds, std::size_t chunk = 256) {
  Tensor<Real> h({ds.size(), m.spec.feature_dim});
  std::vector<std::size_t> idx;
  for (std::size_t i0 = 0; i0 < ds.size(); i0 += chunk) {
    idx.resize(std::min(chunk, ds.size() - i0));
    std::iota(idx.begin(), idx.end(), i0);
    const auto f = forward(m.spec, m.state, ds.batch(idx), Mode::eval).features;
    std::copy(f.vec().begin(), f.vec().end(), h.data() + i0 * m.spec.feature_dim);
  }
  return h;
}

/// Retrains only the head on sigma(W h + rho) with the backbone frozen
/// (batchnorm in eval mode) at lr0/100. Reads images and digits only. For
/// concatenation heads only the h-block of W is trained and used.
inline Model<Real> finetune_head(const Model<Real>& trained, const BiasedDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  Model<Real> m = trained;
  if (cfg.finetune_epochs == 0) return m;
  if (ds.size() == 0) throw RuntimeError("cannot fine-tune on an empty dataset");
  const auto& head = m.spec.layers.back();
  const std::size_t k = head.out_channels, f = m.spec.feature_dim;
  Tensor<Real> w({k, f});
  const auto& wfull = m.state.param(head.name + ".weight");
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < f; ++j) w.at(i, j) = wfull.at(i, j);
  TensorMap<Real> params{{"weight", std::move(w)}, {"bias", m.state.param(head.name + ".bias")}};
  if (cfg.reinit_head) {
    std::mt19937_64 rng(cfg.seed + 3000);
    std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / double(f)));
    for (auto& v : params.at("weight").vec()) v = static_cast<Real>(normal(rng));
    params.at("bias").fill(0);
  }
  const auto h = compute_features(m, ds);
  OptimizerState<Real> opt;
  opt.config = detail::adam_config(cfg);
  const double lr = cfg.initial_lr / 100;
  for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    const auto order = shuffled_order(ds.size(), cfg.seed + 4000, epoch);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b0, std::min(cfg.batch_size, order.size() - b0));
      const auto hb = detail::gather_rows(h, idx);
      std::vector<int> y(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) y[r] = ds.digits[idx[r]];
      const auto z = ops::linear_forward(hb, params.at("weight"), params.at("bias"));
      const auto ce = softmax_cross_entropy(z, y);
      auto g = ops::linear_backward(hb, params.at("weight"), cross_entropy_mean_grad(ce.probabilities, y));
      if (lr > 0)
        adam_step(params, TensorMap<Real>{{"weight", std::move(g.dweight)}, {"bias", std::move(g.dbias)}}, opt, lr);
    }
  }
  auto& wout = m.state.params.at(head.name + ".weight");
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < f; ++j) wout.at(i, j) = params.at("weight").at(i, j);
  m.state.params.at(head.name + ".bias") = params.at("bias");
  return m;
}

struct EvalResult {
  std::size_t n = 0;
  double unbiased_acc = 0;
  std::optional<double> conflicting_acc;
  std::optional<double> aligned_acc;
  std::size_t n_conflicting = 0, n_aligned = 0;
};

/// Argmax predictions on h alone (eval mode).
inline std::vector<int> predict(const Model<Real>& m, const BiasedDataset& ds, std::size_t chunk = 256) {
  std::vector<int> out(ds.size());
  std::vector<std::size_t> idx;
  const std::size_t k = m.spec.num_classes;
  for (std::size_t i0 = 0; i0 < ds.size(); i0 += chunk) {
    idx.resize(std::min(chunk, ds.size() - i0));
    std::iota(idx.begin(), idx.end(), i0);
    const auto z = forward(m.spec, m.state, ds.batch(idx), Mode::eval).logits;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const Real* row = z.data() + r * k;
      out[i0 + r] = static_cast<int>(std::max_element(row, row + k) - row);
    }
  }
  return out;
}

/// Overall accuracy plus accuracies on conflicting and aligned subsets; a
/// subset that is empty (or unknown) is reported absent.
inline EvalResult evaluate(const Model<Real>& m, const BiasedDataset& ds) {
  if (ds.size() == 0) throw RuntimeError("cannot evaluate on an empty dataset");
  const auto pred = predict(m, ds);
  EvalResult r;
  r.n = ds.size();
  std::size_t ok = 0, ok_a = 0, ok_c = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const bool hit = pred[i] == ds.digits[i];
    ok += hit;
    if (ds.aligned.empty()) continue;
    if (ds.aligned[i]) {
      ++r.n_aligned;
      ok_a += hit;
    } else {
      ++r.n_conflicting;
      ok_c += hit;
    }
  }
  r.unbiased_acc = double(ok) / double(r.n);
  if (r.n_aligned) r.aligned_acc = double(ok_a) / double(r.n_aligned);
  if (r.n_conflicting) r.conflicting_acc = double(ok_c) / double(r.n_conflicting);
  return r;
}

/// Accuracy of a bias classifier on attribute `a` of `ds`.
inline double attribute_accuracy(const BiasClassifier& c, const BiasedDataset& ds) {
  const auto& labels = attribute_labels(ds, c.attribute);
  const auto pred = predict(c.model, ds);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) ok += pred[i] == labels[i];
  return double(ok) / double(ds.size());
}

struct PipelineResult {
  /// State at the end of the main training phase, before fine-tuning.
  Model<Real> trained;
  /// Deployed model: fine-tuned head on h (vanilla runs are fine-tuned too).
  Model<Real> model;
  std::optional<BiasSource> source;
  /// Held-out attribute accuracy of each bias classifier.
  std::vector<double> bias_accuracy;
  TrainTrace trace;
  EvalResult eval;
};

/// Background classifier, plus a foreground one when `train` has it.
inline std::vector<BiasClassifier> train_bias_classifiers(const BiasedDataset& train, const TrainConfig& cfg) {
  std::vector<BiasClassifier> cls;
  cls.push_back(train_bias_capturing(train, Attribute::bg, cfg));
  if (train.has_fg()) cls.push_back(train_bias_capturing(train, Attribute::fg, cfg));
  return cls;
}

/// Builds the bias source required by cfg.mode (none for vanilla).
/// `pretrained` skips classifier training; pass the output of
/// train_bias_classifiers for the same data, seed, widths and bias_epochs
/// to get the same source without paying for it twice.
inline std::optional<BiasSource> build_bias_source(const BiasedDataset& train, const TrainConfig& cfg,
                                                   std::size_t dim,
                                                   const std::vector<BiasClassifier>* pretrained = nullptr) {
  if (cfg.mode == TrainMode::vanilla) return std::nullopt;
  const std::size_t block = cfg.mode == TrainMode::badd_concat ? 4 : cfg.injection_layer;
  if (cfg.bias_source == BiasSourceKind::label_embedding) {
    auto s = make_embedding_source(dim, train.has_fg(), block, cfg.seed + 5000);
    s.frozen = cfg.freeze_embedding;
    return s;
  }
  auto cls = pretrained ? *pretrained : train_bias_classifiers(train, cfg);
  if (cls.size() != (train.has_fg() ? 2u : 1u)) throw ConfigError("pretrained classifiers do not match the dataset");
  return make_classifier_source(std::move(cls), block, dim, cfg.seed + 6000);
}

/// Train (selected mode), fine-tune the head on h, evaluate on `test`.
inline PipelineResult run_pipeline(const BiasedDataset& train, const BiasedDataset& test, const TrainConfig& cfg,
                                   const std::vector<BiasClassifier>* pretrained = nullptr) {
  cfg.validate();
  PipelineResult r;
  Model<Real> probe = build_main_model(cfg);
  const std::size_t dim = cfg.mode == TrainMode::badd_add ? probe.spec.tap_width(cfg.injection_layer)
                                                           : probe.spec.feature_dim;
  r.source = build_bias_source(train, cfg, dim, pretrained);
  if (r.source && r.source->kind == BiasSourceKind::classifier && test.has_attributes())
    for (const auto& c : r.source->classifiers) r.bias_accuracy.push_back(attribute_accuracy(c, test));
  Model<Real> m = cfg.mode == TrainMode::badd_concat ? build_main_model(cfg, dim) : std::move(probe);
  switch (cfg.mode) {
    case TrainMode::vanilla: r.trace = train_vanilla(m, train, cfg); break;
    case TrainMode::badd_add: r.trace = train_badd(m, *r.source, train, cfg); break;
    case TrainMode::badd_concat: r.trace = train_concat(m, *r.source, train, cfg); break;
  }
  r.trained = m;
  r.model = finetune_head(m, strip_attributes(train), cfg);
  r.eval = evaluate(r.model, test);
  return r;
}

}  // namespace badd
