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

#include "test_util.hpp"

using namespace badd;
using badd::testing::random_tensor;
using badd::testing::synthetic_mnist;

namespace {

const std::vector<std::size_t> kTiny{4, 4, 6, 8};

BiasedDataset tiny_dataset(std::size_t n, bool fb, std::uint64_t seed = 1) {
  BiasSpec s;
  s.q = 0.9;
  s.seed = seed;
  if (fb) {
    s.fg_palette = default_foreground_palette();
    return generate_fb_biased_mnist(synthetic_mnist(n, seed), s);
  }
  return generate_biased_mnist(synthetic_mnist(n, seed), s);
}

}  // namespace

TEST(SimpleConvNet, ParamCountMatchesClosedForm) {
  for (const auto& w : {std::vector<std::size_t>{16, 32, 64, 128}, std::vector<std::size_t>{8, 16, 32, 64}, kTiny}) {
    const auto m = build_simple_convnet<Real>(w, 10, 1);
    EXPECT_EQ(parameter_count(m.spec), simple_convnet_param_count(w, 10));
    std::size_t n = 0;
    for (const auto& [k, t] : m.state.params) n += t.size();
    EXPECT_EQ(n, simple_convnet_param_count(w, 10));
  }
  // 3*49*16+16+32 + 16*49*32+32+64 + 32*49*64+64+128 + 64*49*128+128+256 + 128*10+10
  EXPECT_EQ(simple_convnet_param_count(std::vector<std::size_t>{16, 32, 64, 128}, 10), 531210u);
  EXPECT_EQ(simple_convnet_param_count(std::vector<std::size_t>{16, 32, 64, 128}, 10, 3, 128), 531210u + 1280u);
}

TEST(SimpleConvNet, OutputShapesAndFeatureDim) {
  const auto m = build_simple_convnet<Real>(kTiny, 10, 3);
  const auto x = random_tensor<Real>({5, 3, 28, 28}, 4, 0, 1);
  const auto c = forward(m.spec, m.state, x, Mode::eval);
  EXPECT_EQ(c.logits.shape(), (Shape{5, 10}));
  EXPECT_EQ(c.features.shape(), (Shape{5, 8}));
  EXPECT_EQ(m.spec.feature_dim, 8u);
  for (std::size_t k = 1; k <= 4; ++k) {
    const auto f = extract_features(m.spec, m.state, x, k);
    EXPECT_EQ(f.shape(), (Shape{5, kTiny[k - 1]}));
    EXPECT_EQ(m.spec.tap_width(k), kTiny[k - 1]);
  }
  EXPECT_EQ(extract_features(m.spec, m.state, x, 4), c.features);
  EXPECT_THROW(extract_features(m.spec, m.state, x, 0), ConfigError);
  EXPECT_THROW(extract_features(m.spec, m.state, x, 5), ConfigError);
}

TEST(SimpleConvNet, BlockFeaturesAreNonNegativePooledRelu) {
  auto m = build_simple_convnet<Real>(kTiny, 10, 5);
  const auto x = random_tensor<Real>({3, 3, 28, 28}, 6, 0, 1);
  for (std::size_t k = 1; k <= 4; ++k) {
    const auto f = extract_features(m.spec, m.state, x, k);
    for (auto v : f.vec()) EXPECT_GE(v, 0);
  }
}

TEST(SimpleConvNet, InitIsSeededAndHeadBiasZero) {
  const auto a = build_simple_convnet<Real>(kTiny, 10, 7);
  const auto b = build_simple_convnet<Real>(kTiny, 10, 7);
  const auto c = build_simple_convnet<Real>(kTiny, 10, 8);
  EXPECT_EQ(a.state, b.state);
  EXPECT_NE(a.state, c.state);
  for (auto v : a.state.param("fc.bias").vec()) EXPECT_EQ(v, 0);
  // The concatenation head shares its h-block with the plain head.
  const auto wide = build_simple_convnet<Real>(kTiny, 10, 7, 3, 5);
  const auto& w = wide.state.param("fc.weight");
  const auto& w0 = a.state.param("fc.weight");
  for (std::size_t k = 0; k < 10; ++k)
    for (std::size_t f = 0; f < 8; ++f) EXPECT_EQ(w.at(k, f), w0.at(k, f));
}

TEST(SimpleConvNet, RejectsBadShapes) {
  EXPECT_THROW(build_simple_convnet<Real>(std::vector<std::size_t>{4, 4, 4}, 10, 1), ConfigError);
  EXPECT_THROW(build_simple_convnet<Real>(std::vector<std::size_t>{4, 0, 4, 4}, 10, 1), ConfigError);
  EXPECT_THROW(build_simple_convnet<Real>(kTiny, 1, 1), ConfigError);
}

TEST(LabelEmbedding, EmbedsOneHotColumns) {
  auto s = make_embedding_source(4, false, 4, 1);
  EXPECT_EQ(s.embedding.shape(), (Shape{4, 10}));
  const std::vector<int> t{3};
  const auto b = embed_protected_label(s, t);
  for (std::size_t f = 0; f < 4; ++f) EXPECT_EQ(b[f], s.embedding.at(f, 3));
  EXPECT_THROW(embed_protected_label(s, std::vector<int>{10}), ConfigError);
  EXPECT_THROW(embed_protected_label(s, std::vector<int>{1, 2}), ConfigError);
}

TEST(LabelEmbedding, TwoAttributesSumColumns) {
  auto s = make_embedding_source(3, true, 4, 2);
  EXPECT_EQ(s.embedding.shape(), (Shape{3, 20}));
  const auto b = embed_protected_label(s, std::vector<int>{2, 7});
  for (std::size_t f = 0; f < 3; ++f) EXPECT_FLOAT_EQ(b[f], s.embedding.at(f, 2) + s.embedding.at(f, 17));
  EXPECT_THROW(embed_protected_label(s, std::vector<int>{2}), ConfigError);
}

TEST(LabelEmbedding, ZeroInitAndDatasetRows) {
  const auto ds = tiny_dataset(20, true);
  auto z = make_embedding_source(5, true, 4, 3, true);
  const std::vector<std::size_t> idx{0, 4, 9};
  const auto b0 = bias_features(z, ds, idx);
  for (auto v : b0.vec()) EXPECT_EQ(v, 0);
  auto s = make_embedding_source(5, true, 4, 3);
  const auto b = bias_features(s, ds, idx);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto e = embed_protected_label(s, std::vector<int>{ds.bg_index[idx[r]], ds.fg_index[idx[r]]});
    for (std::size_t f = 0; f < 5; ++f) EXPECT_EQ(b.at(r, f), e[f]);
  }
  EXPECT_THROW(bias_features(s, strip_attributes(ds), idx), ConfigError);
  EXPECT_THROW(make_embedding_source(0, false, 4, 1), ConfigError);
}

TEST(LabelEmbedding, InitVarianceIsInverseOneHotDim) {
  const auto s = make_embedding_source(500, false, 4, 9);
  double ss = 0;
  for (auto v : s.embedding.vec()) ss += double(v) * v;
  EXPECT_NEAR(ss / double(s.embedding.size()), 0.1, 0.01);
}

TEST(ClassifierSource, UsesPooledTapAndProjectsOnlyOnWidthMismatch) {
  const auto ds = tiny_dataset(12, false);
  BiasClassifier c;
  c.model = build_simple_convnet<Real>(kTiny, 10, 11);
  const std::vector<std::size_t> idx{1, 2, 3};
  const auto same = make_classifier_source({c}, 4, 8, 6001);
  EXPECT_FALSE(same.classifiers[0].projection);
  EXPECT_EQ(bias_features(same, ds, idx), extract_features(c.model.spec, c.model.state, ds.batch(idx), 4));
  const auto l2 = make_classifier_source({c}, 2, 4, 6001);
  EXPECT_FALSE(l2.classifiers[0].projection);
  EXPECT_EQ(bias_features(l2, ds, idx), extract_features(c.model.spec, c.model.state, ds.batch(idx), 2));
  const auto proj = make_classifier_source({c}, 4, 16, 6001);
  ASSERT_TRUE(proj.classifiers[0].projection);
  EXPECT_EQ(proj.classifiers[0].projection->shape(), (Shape{16, 8}));
  EXPECT_EQ(bias_features(proj, ds, idx).shape(), (Shape{3, 16}));
  EXPECT_EQ(*proj.classifiers[0].projection, random_projection(16, 8, 6001));
  EXPECT_THROW(make_classifier_source({}, 4, 8, 1), ConfigError);
}

TEST(ClassifierSource, TwoClassifiersSum) {
  const auto ds = tiny_dataset(12, true);
  BiasClassifier bg, fg;
  bg.model = build_simple_convnet<Real>(kTiny, 10, 21);
  fg.attribute = Attribute::fg;
  fg.model = build_simple_convnet<Real>(kTiny, 10, 22);
  const auto s = make_classifier_source({bg, fg}, 4, 8, 1);
  EXPECT_TRUE(s.has_fg);
  const std::vector<std::size_t> idx{0, 5};
  const auto x = ds.batch(idx);
  const auto a = extract_features(bg.model.spec, bg.model.state, x, 4);
  const auto b = extract_features(fg.model.spec, fg.model.state, x, 4);
  const auto sum = bias_features(s, ds, idx);
  for (std::size_t i = 0; i < sum.size(); ++i) EXPECT_FLOAT_EQ(sum[i], a[i] + b[i]);
}

TEST(ClassifierSource, AttributeLabelsRequirePresence) {
  const auto ds = tiny_dataset(5, false);
  EXPECT_EQ(&attribute_labels(ds, Attribute::bg), &ds.bg_index);
  EXPECT_THROW(attribute_labels(ds, Attribute::fg), ConfigError);
  EXPECT_THROW(attribute_labels(strip_attributes(ds), Attribute::bg), ConfigError);
  EXPECT_EQ(attribute_from_string("fg"), Attribute::fg);
  EXPECT_THROW(attribute_from_string("hue"), ConfigError);
  EXPECT_EQ(bias_source_kind_from_string(to_string(BiasSourceKind::label_embedding)), BiasSourceKind::label_embedding);
  EXPECT_THROW(bias_source_kind_from_string("oracle"), ConfigError);
}

TEST(BiasCapturing, LearnsBackgroundColour) {
  const auto ds = tiny_dataset(400, false, 3);
  TrainConfig cfg;
  cfg.widths = kTiny;
  cfg.bias_epochs = 9;
  cfg.batch_size = 16;
  cfg.initial_lr = 1e-2;
  const auto c = train_bias_capturing(ds, Attribute::bg, cfg);
  EXPECT_EQ(c.attribute, Attribute::bg);
  BiasSpec t;
  t.q = 0.1;
  t.seed = 4;
  const auto test = generate_biased_mnist(synthetic_mnist(200, 5), t, Split::test);
  // Chance is 0.1 on the decorrelated test split.
  EXPECT_GT(attribute_accuracy(c, test), 0.6);
  // Seeded apart from the main model.
  EXPECT_NE(c.model.state, build_simple_convnet<Real>(kTiny, 10, cfg.seed).state);
}
