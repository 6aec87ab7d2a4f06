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

#include <set>

#include "test_util.hpp"

using namespace badd;
using badd::testing::synthetic_mnist;

namespace {

BiasedDataset make(std::size_t n, double q, std::uint64_t seed, bool fb = false, Split split = Split::train) {
  BiasSpec s;
  s.q = q;
  s.seed = seed;
  if (fb) {
    s.fg_palette = default_foreground_palette();
    return generate_fb_biased_mnist(synthetic_mnist(n, seed), s, split);
  }
  return generate_biased_mnist(synthetic_mnist(n, seed), s, split);
}

TrainConfig small_config(TrainMode mode = TrainMode::vanilla) {
  TrainConfig c;
  c.widths = {4, 4, 6, 8};
  c.epochs = 3;
  c.batch_size = 16;
  c.finetune_epochs = 2;
  c.bias_epochs = 1;
  c.mode = mode;
  c.seed = 5;
  return c;
}

bool same_except_head(const ModelState<Real>& a, const ModelState<Real>& b) {
  if (a.buffers != b.buffers) return false;
  for (const auto& [k, t] : a.params)
    if (!k.starts_with("fc.") && t != b.param(k)) return false;
  return true;
}

}  // namespace

TEST(ShuffledOrder, PermutationFixedBySeedAndEpoch) {
  const auto a = shuffled_order(100, 3, 0);
  std::set<std::size_t> s(a.begin(), a.end());
  EXPECT_EQ(s.size(), 100u);
  EXPECT_EQ(*s.rbegin(), 99u);
  EXPECT_EQ(a, shuffled_order(100, 3, 0));
  EXPECT_NE(a, shuffled_order(100, 3, 1));
  EXPECT_NE(a, shuffled_order(100, 4, 0));
}

TEST(TrainConfig, Validation) {
  auto c = small_config(TrainMode::badd_concat);
  c.injection_layer = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.injection_layer = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.initial_lr = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(train_mode_from_string("badd-concat"), TrainMode::badd_concat);
  EXPECT_THROW(train_mode_from_string("badd"), ConfigError);
}

TEST(TrainConfig, LearningRateFollowsSchedule) {
  TrainConfig c;
  c.epochs = 9;
  EXPECT_DOUBLE_EQ(c.lr_at(0), 1e-3);
  EXPECT_DOUBLE_EQ(c.lr_at(3), 1e-4);
  EXPECT_DOUBLE_EQ(c.lr_at(8), 1e-5);
  EXPECT_EQ(c.second_segment_start(), 3u);
  c.epochs = 2;
  EXPECT_DOUBLE_EQ(c.lr_at(1), 1e-3);
}

TEST(Fit, DeterministicAcrossRuns) {
  const auto ds = make(64, 0.9, 1);
  const auto cfg = small_config();
  auto a = build_main_model(cfg), b = build_main_model(cfg);
  const auto ta = train_vanilla(a, ds, cfg);
  const auto tb = train_vanilla(b, ds, cfg);
  EXPECT_EQ(ta.batches, tb.batches);
  EXPECT_EQ(a.state, b.state);
  EXPECT_EQ(ta.batches.size(), 3u * 4u);
  ASSERT_EQ(ta.epochs.size(), 3u);
  EXPECT_DOUBLE_EQ(ta.epochs[1].lr, cfg.lr_at(1));
}

TEST(Fit, LossEqualsAlignedPlusConflicting) {
  const auto ds = make(80, 0.7, 2);
  const auto cfg = small_config();
  auto m = build_main_model(cfg);
  const auto t = train_vanilla(m, ds, cfg);
  for (const auto& b : t.batches) {
    EXPECT_TRUE(b.grouped);
    EXPECT_NEAR(b.loss, b.loss_aligned + b.loss_conflicting, 1e-6 * std::max(1.0, b.loss));
    EXPECT_GE(b.loss_aligned, 0);
    EXPECT_GE(b.loss_conflicting, 0);
  }
  std::size_t na = 0, nc = 0;
  for (const auto& b : t.batches)
    if (b.epoch == 0) {
      na += b.n_aligned;
      nc += b.n_conflicting;
    }
  EXPECT_EQ(na, audit_correlation(ds).n_aligned);
  EXPECT_EQ(na + nc, ds.size());
}

TEST(Fit, StrippedDatasetTrainsUngrouped) {
  const auto ds = strip_attributes(make(32, 0.9, 3));
  const auto cfg = small_config();
  auto m = build_main_model(cfg);
  const auto t = train_vanilla(m, ds, cfg);
  for (const auto& b : t.batches) EXPECT_FALSE(b.grouped);
}

TEST(Fit, ZeroLearningRateLeavesParametersUntouched) {
  const auto ds = make(48, 0.9, 4);
  auto cfg = small_config();
  cfg.initial_lr = 0;
  auto m = build_main_model(cfg);
  const auto before = m.state;
  train_vanilla(m, ds, cfg);
  EXPECT_EQ(m.state.params, before.params);
  EXPECT_NE(m.state.buffers, before.buffers);
}

TEST(Fit, TrainingReducesLoss) {
  const auto ds = make(128, 0.9, 5);
  auto cfg = small_config();
  cfg.epochs = 4;
  cfg.initial_lr = 1e-2;
  auto m = build_main_model(cfg);
  const auto t = train_vanilla(m, ds, cfg);
  EXPECT_LT(t.epochs.back().mean_loss, t.epochs.front().mean_loss);
}

// With b = 0 the BAdd forward and backward reduce exactly to vanilla.
TEST(Badd, ZeroBiasReproducesVanillaBitForBit) {
  const auto ds = make(64, 0.9, 6);
  const auto vcfg = small_config();
  auto v = build_main_model(vcfg);
  const auto tv = train_vanilla(v, ds, vcfg);
  for (std::size_t layer = 1; layer <= 4; ++layer) {
    auto bcfg = small_config(TrainMode::badd_add);
    bcfg.injection_layer = layer;
    bcfg.bias_source = BiasSourceKind::label_embedding;
    auto b = build_main_model(bcfg);
    auto src = make_embedding_source(b.spec.tap_width(layer), false, layer, 0, true);
    src.frozen = true;
    const auto tb = train_badd(b, src, ds, bcfg);
    EXPECT_EQ(tb.batches, tv.batches) << "layer " << layer;
    EXPECT_EQ(b.state, v.state) << "layer " << layer;
  }
}

TEST(Badd, InformativeBiasLowersTrainingLossOfAlignedSamples) {
  // b that already encodes the label explains the aligned samples, so the
  // main model sees a smaller aligned loss than vanilla.
  const auto ds = make(96, 0.95, 7);
  auto cfg = small_config(TrainMode::badd_add);
  auto m = build_main_model(cfg);
  auto src = make_embedding_source(8, false, 4, 1);
  // Column c points along head row c, so b alone scores colour c highest.
  const auto& w = m.state.param("fc.weight");
  for (std::size_t c = 0; c < 10; ++c)
    for (std::size_t f = 0; f < 8; ++f) src.embedding.at(f, c) = 20 * w.at(c, f);
  src.frozen = true;
  auto v = build_main_model(small_config());
  const auto tv = train_vanilla(v, ds, small_config());
  const auto tb = train_badd(m, src, ds, cfg);
  EXPECT_LT(tb.batches.front().loss_aligned, tv.batches.front().loss_aligned);
}

TEST(Badd, EmbeddingTrainsUnlessFrozen) {
  const auto ds = make(48, 0.9, 8, true);
  auto cfg = small_config(TrainMode::badd_add);
  cfg.bias_source = BiasSourceKind::label_embedding;
  auto m = build_main_model(cfg);
  auto src = make_embedding_source(8, true, 4, 2);
  const auto e0 = src.embedding;
  auto m2 = m;
  train_badd(m, src, ds, cfg);
  EXPECT_NE(src.embedding, e0);
  auto frozen = make_embedding_source(8, true, 4, 2);
  frozen.frozen = true;
  train_badd(m2, frozen, ds, cfg);
  EXPECT_EQ(frozen.embedding, e0);
}

TEST(Badd, EmbeddingGradientMatchesFiniteDifference) {
  // d/dE of the mean loss of one batch, compared coordinatewise.
  const auto ds = make(16, 0.8, 9, true);
  auto cfg = small_config(TrainMode::badd_add);
  cfg.epochs = 1;
  cfg.batch_size = 16;
  auto m = build_main_model(cfg);
  auto src = make_embedding_source(8, true, 4, 3);
  const auto order = shuffled_order(ds.size(), cfg.seed, 0);
  auto loss_at = [&](const BiasSource& s) {
    const auto b = bias_features(s, ds, order);
    Injection<Real> inj;
    inj.add = &b;
    inj.block = 4;
    const auto c = forward(m.spec, m.state, ds.batch(order), Mode::eval, inj);
    return double(softmax_cross_entropy(c.logits, ds.targets(order)).mean_loss);
  };
  const auto b = bias_features(src, ds, order);
  Injection<Real> inj;
  inj.add = &b;
  inj.block = 4;
  const auto c = forward(m.spec, m.state, ds.batch(order), Mode::eval, inj);
  const auto ce = softmax_cross_entropy(c.logits, ds.targets(order));
  const auto g = backward_from_logits(m.spec, m.state, c, cross_entropy_mean_grad(ce.probabilities, ds.targets(order)));
  ASSERT_TRUE(g.injected);
  // Column bg=k receives the sum of db over rows with that colour.
  for (std::size_t col : {std::size_t(ds.bg_index[order[0]]), kNumColors + std::size_t(ds.fg_index[order[0]])}) {
    for (std::size_t f = 0; f < 8; f += 3) {
      double analytic = 0;
      for (std::size_t r = 0; r < order.size(); ++r) {
        const bool hit = col < kNumColors ? std::size_t(ds.bg_index[order[r]]) == col
                                          : std::size_t(ds.fg_index[order[r]]) + kNumColors == col;
        if (hit) analytic += g.injected->at(r, f);
      }
      auto plus = src, minus = src;
      const Real eps = 1e-2f;
      plus.embedding.at(f, col) += eps;
      minus.embedding.at(f, col) -= eps;
      const double numeric = (loss_at(plus) - loss_at(minus)) / (2 * eps);
      EXPECT_NEAR(analytic, numeric, 2e-3 + 2e-2 * std::abs(numeric)) << col << "," << f;
    }
  }
}

TEST(Badd, SourceMismatchesAreRejected) {
  const auto ds = make(16, 0.9, 10);
  auto cfg = small_config(TrainMode::badd_add);
  auto m = build_main_model(cfg);
  auto wrong_dim = make_embedding_source(5, false, 4, 1);
  EXPECT_THROW(train_badd(m, wrong_dim, ds, cfg), ConfigError);
  auto wrong_block = make_embedding_source(8, false, 2, 1);
  EXPECT_THROW(train_badd(m, wrong_block, ds, cfg), ConfigError);
  auto fg = make_embedding_source(8, true, 4, 1);
  EXPECT_THROW(train_badd(m, fg, ds, cfg), ConfigError);
  EXPECT_THROW(train_vanilla(m, ds, cfg), ConfigError);
  EXPECT_THROW(train_badd(m, fg, ds, small_config()), ConfigError);
}

TEST(Concat, TrainsWidenedHeadAndInfersFromH) {
  const auto ds = make(48, 0.9, 11);
  auto cfg = small_config(TrainMode::badd_concat);
  auto m = build_main_model(cfg, 6);
  EXPECT_EQ(m.spec.concat_dim, 6u);
  auto src = make_embedding_source(6, false, 4, 4);
  train_concat(m, src, ds, cfg);
  // Deployed inference ignores the b-block of W.
  const std::vector<std::size_t> idx{0, 1, 2};
  auto z = forward(m.spec, m.state, ds.batch(idx), Mode::eval).logits;
  auto m0 = m;
  auto& w = m0.state.params.at("fc.weight");
  for (std::size_t k = 0; k < 10; ++k)
    for (std::size_t f = 8; f < 14; ++f) w.at(k, f) = 1e3f;
  EXPECT_EQ(forward(m0.spec, m0.state, ds.batch(idx), Mode::eval).logits, z);
  auto plain = build_main_model(small_config(TrainMode::badd_concat));
  EXPECT_THROW(train_concat(plain, src, ds, cfg), ConfigError);
}

TEST(Finetune, OnlyTheHeadChanges) {
  const auto ds = make(64, 0.9, 12);
  auto cfg = small_config();
  auto m = build_main_model(cfg);
  train_vanilla(m, ds, cfg);
  const auto f = finetune_head(m, strip_attributes(ds), cfg);
  EXPECT_TRUE(same_except_head(m.state, f.state));
  EXPECT_NE(f.state.param("fc.weight"), m.state.param("fc.weight"));
  // Stripped and attributed datasets give the same result.
  EXPECT_EQ(finetune_head(m, ds, cfg).state, f.state);
  cfg.finetune_epochs = 0;
  EXPECT_EQ(finetune_head(m, ds, cfg).state, m.state);
}

TEST(Finetune, ReinitialisedHeadIsSeeded) {
  const auto ds = make(32, 0.9, 13);
  auto cfg = small_config();
  auto m = build_main_model(cfg);
  cfg.reinit_head = true;
  cfg.initial_lr = 0;
  const auto a = finetune_head(m, ds, cfg);
  const auto b = finetune_head(m, ds, cfg);
  EXPECT_EQ(a.state, b.state);
  EXPECT_NE(a.state.param("fc.weight"), m.state.param("fc.weight"));
  for (auto v : a.state.param("fc.bias").vec()) EXPECT_EQ(v, 0);
  EXPECT_TRUE(same_except_head(m.state, a.state));
}

TEST(Finetune, ConcatHeadKeepsBiasBlock) {
  const auto ds = make(32, 0.9, 14);
  auto cfg = small_config(TrainMode::badd_concat);
  auto m = build_main_model(cfg, 4);
  const auto f = finetune_head(m, ds, cfg);
  const auto& w0 = m.state.param("fc.weight");
  const auto& w1 = f.state.param("fc.weight");
  bool h_changed = false;
  for (std::size_t k = 0; k < 10; ++k) {
    for (std::size_t j = 0; j < 8; ++j) h_changed = h_changed || w0.at(k, j) != w1.at(k, j);
    for (std::size_t j = 8; j < 12; ++j) EXPECT_EQ(w0.at(k, j), w1.at(k, j));
  }
  EXPECT_TRUE(h_changed);
}

TEST(Evaluate, SubsetAccuraciesMatchPredictions) {
  const auto ds = make(100, 0.6, 15, false, Split::test);
  const auto m = build_main_model(small_config());
  const auto p = predict(m, ds);
  const auto r = evaluate(m, ds);
  std::size_t ok = 0, ok_c = 0, nc = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ok += p[i] == ds.digits[i];
    if (!ds.aligned[i]) {
      ++nc;
      ok_c += p[i] == ds.digits[i];
    }
  }
  EXPECT_DOUBLE_EQ(r.unbiased_acc, double(ok) / 100);
  ASSERT_TRUE(r.conflicting_acc);
  EXPECT_DOUBLE_EQ(*r.conflicting_acc, double(ok_c) / double(nc));
  EXPECT_EQ(r.n_conflicting, nc);
  EXPECT_EQ(r.n_aligned + r.n_conflicting, 100u);
}

TEST(Evaluate, PerfectClassifierScoresOne) {
  auto ds = make(40, 0.5, 16);
  const auto m = build_main_model(small_config());
  const auto p = predict(m, ds);
  ds.digits = p;  // relabel so the classifier is perfect by construction
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds.aligned_bg[i] = ds.bg_index[i] == ds.digits[i];
    ds.aligned[i] = ds.aligned_bg[i];
  }
  const auto r = evaluate(m, ds);
  EXPECT_EQ(r.unbiased_acc, 1.0);
  EXPECT_EQ(r.conflicting_acc.value_or(1.0), 1.0);
  EXPECT_EQ(r.aligned_acc.value_or(1.0), 1.0);
}

TEST(Evaluate, AbsentSubsetsAreReportedAbsent) {
  const auto m = build_main_model(small_config());
  const auto all_aligned = make(30, 1.0, 17);
  const auto r = evaluate(m, all_aligned);
  EXPECT_FALSE(r.conflicting_acc);
  EXPECT_TRUE(r.aligned_acc);
  const auto s = evaluate(m, strip_attributes(all_aligned));
  EXPECT_FALSE(s.conflicting_acc);
  EXPECT_FALSE(s.aligned_acc);
  EXPECT_THROW(evaluate(m, BiasedDataset{}), RuntimeError);
}

TEST(Pipeline, EndToEndForEveryMode) {
  const auto train = make(64, 0.9, 18, true);
  const auto test = make(40, 0.1, 19, true, Split::test);
  for (auto mode : {TrainMode::vanilla, TrainMode::badd_add, TrainMode::badd_concat}) {
    auto cfg = small_config(mode);
    const auto r = run_pipeline(train, test, cfg);
    EXPECT_TRUE(same_except_head(r.trained.state, r.model.state));
    EXPECT_EQ(r.eval.n, 40u);
    EXPECT_EQ(r.trace.batches.size(), 12u);
    if (mode == TrainMode::vanilla) {
      EXPECT_FALSE(r.source);
      EXPECT_TRUE(r.bias_accuracy.empty());
    } else {
      ASSERT_TRUE(r.source);
      EXPECT_EQ(r.source->classifiers.size(), 2u);
      EXPECT_EQ(r.bias_accuracy.size(), 2u);
    }
  }
  auto cfg = small_config(TrainMode::badd_add);
  cfg.bias_source = BiasSourceKind::label_embedding;
  cfg.injection_layer = 2;
  const auto r = run_pipeline(train, test, cfg);
  EXPECT_EQ(r.source->dim, 4u);
  EXPECT_EQ(r.source->embedding.shape(), (Shape{4, 20}));
}

TEST(Pipeline, PretrainedClassifiersReproduceFreshOnes) {
  const auto train = make(64, 0.9, 18, true);
  const auto test = make(40, 0.1, 19, true, Split::test);
  auto cfg = small_config(TrainMode::badd_add);
  const auto cls = train_bias_classifiers(train, cfg);
  const auto fresh = run_pipeline(train, test, cfg);
  const auto reused = run_pipeline(train, test, cfg, &cls);
  EXPECT_EQ(fresh.model.state, reused.model.state);
  EXPECT_EQ(fresh.bias_accuracy, reused.bias_accuracy);
  // One classifier is not enough for a two-attribute dataset.
  const std::vector<BiasClassifier> one{cls[0]};
  EXPECT_THROW(run_pipeline(train, test, cfg, &one), ConfigError);
}
