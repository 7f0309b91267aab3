// Copyright 2026 The drtab Authors.
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

#include "drtab/model.hpp"

#include <cmath>
#include <numeric>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace drtab {
namespace {

using testing::random_dataset;
using testing::random_schema;

std::shared_ptr<const Schema> bank_like_schema() {
  const std::vector<std::size_t> cards{12, 4, 8, 3, 3, 3, 2, 10, 5, 3};
  std::vector<FeatureSpec> feats;
  for (std::size_t j = 0; j < cards.size(); ++j) {
    std::vector<std::string> vocab;
    for (std::size_t v = 0; v < cards[j]; ++v) vocab.push_back("v" + std::to_string(v));
    feats.push_back(FeatureSpec::categorical("f" + std::to_string(j), vocab));
  }
  return std::make_shared<const Schema>(std::move(feats), "y",
                                        std::array<std::string, 2>{"no", "yes"});
}

// Direct scalar cross-entropy: -log(exp(l[t]) / sum exp(l)).
double naive_ce(const std::vector<double>& l, std::size_t t) {
  double z = 0.0;
  for (double v : l) z += std::exp(v);
  return -std::log(std::exp(l[t]) / z);
}

TEST(InitModel, HeadsMatchSchema) {
  const auto schema = bank_like_schema();
  const auto m = init_model(schema, 192, EncoderVariant::kMlp, 43);
  EXPECT_EQ(m.d, 192u);
  ASSERT_EQ(m.layout.head_w.size(), 10u);
  for (std::size_t j = 0; j < 10; ++j) {
    EXPECT_EQ(m.tensors[m.layout.head_w[j]].shape[0],
              static_cast<std::size_t>(schema->categorical(j).cardinality()));
    EXPECT_EQ(m.tensors[m.layout.head_b[j]].shape[0],
              static_cast<std::size_t>(schema->categorical(j).cardinality()));
    // vocabulary + UNK + MASK rows
    EXPECT_EQ(m.tensors[m.layout.cat_embed[j]].shape[0],
              static_cast<std::size_t>(schema->categorical(j).cardinality()) + 2);
  }
  for (const auto& t : m.tensors) EXPECT_TRUE(t.trainable);
}

TEST(InitModel, DeterministicAndValidated) {
  Rng rng(1);
  const auto schema = random_schema(rng, 3, 2);
  for (auto v : {EncoderVariant::kMlp, EncoderVariant::kAttnLite}) {
    const auto a = init_model(schema, 16, v, 43);
    const auto b = init_model(schema, 16, v, 43);
    EXPECT_EQ(params_blob(a.tensors), params_blob(b.tensors));
    EXPECT_NE(params_blob(a.tensors), params_blob(init_model(schema, 16, v, 44).tensors));
  }
  EXPECT_THROW(init_model(schema, 0, EncoderVariant::kMlp, 43), ConfigError);
  EXPECT_THROW(init_model(schema, 1, EncoderVariant::kMlp, 43), ConfigError);
  EXPECT_THROW(parse_encoder_variant("transformer"), ConfigError);
  EXPECT_EQ(parse_encoder_variant("attn-lite"), EncoderVariant::kAttnLite);
}

TEST(ApplyMask, RateZeroIsIdentity) {
  Rng rng(2);
  const auto ds = random_dataset(random_schema(rng, 3, 2), 50, rng);
  const auto mb = apply_mask(ds, 0.0, 43);
  EXPECT_TRUE(std::all_of(mb.mask.begin(), mb.mask.end(), [](auto v) { return v == 0; }));
  EXPECT_EQ(mb.input.cat, ds.cat);
  EXPECT_EQ(mb.input.cont, ds.cont);
}

TEST(ApplyMask, RateAndGuarantees) {
  Rng rng(3);
  const auto schema = random_schema(rng, 6, 4);
  const auto ds = random_dataset(schema, 1000, rng);  // 10,000 cells
  const auto mb = apply_mask(ds, 0.15, 43);
  const auto masked = std::accumulate(mb.mask.begin(), mb.mask.end(), std::size_t{0});
  const double frac = static_cast<double>(masked) / static_cast<double>(mb.mask.size());
  EXPECT_GE(frac, 0.13);
  EXPECT_LE(frac, 0.17);
  for (std::size_t i = 0; i < ds.n; ++i) {
    bool visible = false;
    for (std::size_t f = 0; f < 10; ++f) {
      if (!mb.masked(i, f)) visible = true;
      if (f < 6) {
        const auto expect = mb.masked(i, f) ? schema->categorical(f).mask_index() : ds.cat_at(i, f);
        EXPECT_EQ(mb.input.cat[i * 6 + f], expect);
      } else if (mb.masked(i, f)) {
        EXPECT_EQ(mb.input.cont[i * 4 + f - 6], 0.0);
        EXPECT_EQ(mb.input.cont_masked[i * 4 + f - 6], 1);
      }
    }
    EXPECT_TRUE(visible);
  }
  EXPECT_EQ(mb.original.cat, ds.cat);  // targets stay uncorrupted
  EXPECT_EQ(apply_mask(ds, 0.15, 43).mask, mb.mask);
  EXPECT_THROW(apply_mask(ds, 1.0, 43), ConfigError);
}

TEST(ApplyMask, HighRateStillLeavesOneVisible) {
  Rng rng(4);
  const auto ds = random_dataset(random_schema(rng, 2, 0), 300, rng);
  const auto mb = apply_mask(ds, 0.95, 7);
  for (std::size_t i = 0; i < ds.n; ++i) EXPECT_FALSE(mb.masked(i, 0) && mb.masked(i, 1));
}

class ForwardLatentTest : public ::testing::TestWithParam<EncoderVariant> {};

TEST_P(ForwardLatentTest, ShapeDeterminismAndRowIndependence) {
  Rng rng(5);
  const auto schema = random_schema(rng, 3, 2);
  const auto m = init_model(schema, 12, GetParam(), 43);
  auto ds = random_dataset(schema, 30, rng);
  // Duplicate row 0 into row 1.
  for (std::size_t j = 0; j < 3; ++j) ds.cat[1 * 3 + j] = ds.cat[j];
  for (std::size_t l = 0; l < 2; ++l) ds.cont[1 * 2 + l] = ds.cont[l];

  const auto lat = forward_latent(m, ds);
  EXPECT_EQ(lat.n, 30u);
  EXPECT_EQ(lat.d, 12u);
  EXPECT_EQ(lat.z.size(), 30u * 12u);
  for (double v : lat.z) EXPECT_TRUE(std::isfinite(v));
  for (std::size_t e = 0; e < 12; ++e) EXPECT_EQ(lat.row(0)[e], lat.row(1)[e]);

  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span(perm));
  const auto lat_perm = forward_latent(m, ds.subset(perm));
  for (std::size_t i = 0; i < 30; ++i) {
    for (std::size_t e = 0; e < 12; ++e) EXPECT_EQ(lat_perm.row(i)[e], lat.row(perm[i])[e]);
  }
  // Singleton batches reproduce the full-batch latents bit for bit.
  for (std::size_t i = 0; i < 30; i += 7) {
    const std::vector<std::size_t> one{i};
    const auto single = forward_latent(m, ds.subset(one));
    for (std::size_t e = 0; e < 12; ++e) EXPECT_EQ(single.row(0)[e], lat.row(i)[e]);
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, ForwardLatentTest,
                         ::testing::Values(EncoderVariant::kMlp, EncoderVariant::kAttnLite));

TEST(ForwardLatent, SchemaMismatch) {
  Rng rng(6);
  const auto m = init_model(random_schema(rng, 3, 1), 8, EncoderVariant::kMlp, 1);
  const auto other = random_dataset(random_schema(rng, 2, 1), 5, rng);
  EXPECT_THROW(forward_latent(m, other), DataError);
}

TEST(Reconstruct, AritiesAndZeroHeads) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto schema = random_schema(rng, 1 + rng.index(4), rng.index(3), 9);
    auto m = init_model(schema, 8, EncoderVariant::kMlp, 43);
    const auto ds = random_dataset(schema, 4, rng);
    const auto out = reconstruct(m, forward_latent(m, ds));
    ASSERT_EQ(out.arity.size(), schema->k() + schema->c());
    for (std::size_t j = 0; j < schema->k(); ++j) {
      EXPECT_EQ(out.arity[j], static_cast<std::size_t>(schema->categorical(j).cardinality()));
    }
    for (std::size_t l = 0; l < schema->c(); ++l) EXPECT_EQ(out.arity[schema->k() + l], 1u);
  }
  const auto schema = bank_like_schema();
  auto m = init_model(schema, 8, EncoderVariant::kMlp, 43);
  for (std::size_t f = 0; f < 10; ++f) {
    for (auto t : {m.layout.head_w[f], m.layout.head_b[f]}) {
      std::fill(m.tensors[t].values.begin(), m.tensors[t].values.end(), 0.0);
    }
  }
  const auto ds = random_dataset(schema, 6, rng);
  const auto out = reconstruct(m, forward_latent(m, ds));
  EXPECT_EQ(out.arity.size(), 10u);
  for (const auto& block : out.blocks) {
    for (double v : block) EXPECT_EQ(v, 0.0);
  }
  LatentBatch wrong{1, 4, std::vector<double>(4, 0.0), {0}};
  EXPECT_THROW(reconstruct(m, wrong), ConfigError);
}

EncodedDataset hand_dataset(std::vector<FeatureSpec> feats, std::vector<std::int32_t> cat,
                            std::vector<double> cont, std::size_t n) {
  EncodedDataset ds;
  ds.schema = std::make_shared<const Schema>(std::move(feats), "y",
                                             std::array<std::string, 2>{"0", "1"});
  ds.n = n;
  ds.cat = std::move(cat);
  ds.cont = std::move(cont);
  ds.labels.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) ds.row_ids.push_back(static_cast<std::int64_t>(i));
  return ds;
}

TEST(MlmLoss, UniformLogitsAndExactContinuous) {
  const auto ds = hand_dataset(
      {FeatureSpec::categorical("a", {"x", "y"}), FeatureSpec::continuous("b", 0, 1)}, {1}, {0.7},
      1);
  Reconstruction out{1, {2, 1}, {{0.0, 0.0}, {0.7}}};
  const auto r = mlm_loss(out, ds);
  EXPECT_NEAR(r.total, std::log(2.0), 1e-15);
  EXPECT_NEAR(r.total, 0.693147, 1e-6);
}

TEST(MlmLoss, PerfectReconstructionNearZero) {
  const auto ds = hand_dataset(
      {FeatureSpec::categorical("a", {"x", "y", "z"}), FeatureSpec::continuous("b", 0, 1)}, {2, 0},
      {0.25, -1.5}, 2);
  Reconstruction out{2, {3, 1}, {{0.0, 0.0, 20.0, 20.0, 0.0, 0.0}, {0.25, -1.5}}};
  EXPECT_LT(mlm_loss(out, ds).total, 1e-6);
}

TEST(MlmLoss, TwoSamplesAgainstDirectEvaluation) {
  const auto ds = hand_dataset(
      {FeatureSpec::categorical("a", {"p", "q"}), FeatureSpec::categorical("b", {"r", "s", "t"})},
      {0, 2, 1, 0}, {}, 2);
  const std::vector<double> a0{0.3, -1.2}, a1{2.0, 0.5};
  const std::vector<double> b0{0.1, 0.4, -0.7}, b1{1.5, -2.0, 0.25};
  Reconstruction out{2, {2, 3}, {{0.3, -1.2, 2.0, 0.5}, {0.1, 0.4, -0.7, 1.5, -2.0, 0.25}}};
  const double expected =
      0.5 * ((naive_ce(a0, 0) + naive_ce(b0, 2)) + (naive_ce(a1, 1) + naive_ce(b1, 0)));
  const auto r = mlm_loss(out, ds);
  EXPECT_NEAR(r.total, expected, 1e-12);
  EXPECT_NEAR(r.per_feature[0] + r.per_feature[1], r.total, 1e-12);
  EXPECT_NEAR(r.per_sample_per_feature[1 * 2 + 1], naive_ce(b1, 0), 1e-12);
}

TEST(MlmLoss, AdditivityOnRandomInstances) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto schema = random_schema(rng, 1 + rng.index(4), rng.index(3));
    const auto ds = random_dataset(schema, 1 + rng.index(20), rng);
    const auto m = init_model(schema, 6, EncoderVariant::kMlp, rng.next_u64());
    const auto r = mlm_loss(reconstruct(m, forward_latent(m, ds)), ds);
    const std::size_t nf = schema->k() + schema->c();
    double direct = 0.0;
    for (std::size_t i = 0; i < ds.n; ++i) {
      double row = 0.0;
      for (std::size_t f = 0; f < nf; ++f) row += r.per_sample_per_feature[i * nf + f];
      direct += row;
    }
    direct /= static_cast<double>(ds.n);
    EXPECT_NEAR(r.total, direct, 1e-9);
    EXPECT_NEAR(std::accumulate(r.per_feature.begin(), r.per_feature.end(), 0.0), r.total, 1e-9);
  }
}

TEST(MlmLoss, Misalignment) {
  const auto ds = hand_dataset({FeatureSpec::categorical("a", {"p", "q"})}, {0, 1}, {}, 2);
  Reconstruction out{1, {2}, {{0.0, 0.0}}};
  EXPECT_THROW(mlm_loss(out, ds), DataError);
  Reconstruction wrong_arity{2, {3}, {std::vector<double>(6, 0.0)}};
  EXPECT_THROW(mlm_loss(wrong_arity, ds), DataError);
}

TEST(MlmLoss, FusedPathMatchesComposedOps) {
  Rng rng(9);
  for (auto v : {EncoderVariant::kMlp, EncoderVariant::kAttnLite}) {
    const auto schema = random_schema(rng, 3, 2);
    const auto ds = random_dataset(schema, 25, rng);
    const auto m = init_model(schema, 8, v, 43);
    const auto mb = apply_mask(ds, 0.3, 11);
    const auto composed = mlm_loss(reconstruct(m, forward_latent(m, mb)), ds);
    const auto fused = mlm_loss_and_grad(m, mb.input, mb.original, nullptr, nullptr);
    EXPECT_NEAR(fused.total, composed.total, 1e-12);
    for (std::size_t f = 0; f < 5; ++f) EXPECT_NEAR(fused.per_feature[f], composed.per_feature[f], 1e-12);
  }
}

double relative_grad_error(const ModelParams& m, const MaskedBatch& mb,
                           const FeatureRowWeights* w) {
  GradSet g = zero_grads(m.tensors);
  mlm_loss_and_grad(m, mb.input, mb.original, w, &g);
  auto loss = [&](const ParamSet& ps) {
    ModelParams copy = m;
    copy.tensors = ps;
    return mlm_loss_and_grad(copy, mb.input, mb.original, w, nullptr).total;
  };
  return grad_check(loss, m.tensors, g, {.eps = 1e-5, .max_coords = 100000});
}

class GradientTest : public ::testing::TestWithParam<EncoderVariant> {};

TEST_P(GradientTest, AnalyticMatchesFiniteDifferences) {
  Rng rng(10);
  for (int trial = 0; trial < 3; ++trial) {
    const auto schema = random_schema(rng, 3, 1);
    const auto ds = random_dataset(schema, 20, rng);
    const auto m = init_model(schema, 8, GetParam(), rng.next_u64());
    const auto mb = apply_mask(ds, 0.25, rng.next_u64());
    EXPECT_LT(relative_grad_error(m, mb, nullptr), 1e-4);
    FeatureRowWeights w{1, std::vector<double>(20, 1.0)};
    for (std::size_t i = 0; i < 20; i += 3) w.row_weight[i] = 20.0;
    EXPECT_LT(relative_grad_error(m, mb, &w), 1e-4);
  }
}

TEST_P(GradientTest, FrozenTensorsGetNoGradient) {
  Rng rng(12);
  const auto schema = random_schema(rng, 3, 1);
  const auto ds = random_dataset(schema, 10, rng);
  auto m = init_model(schema, 8, GetParam(), 1);
  m.set_all_trainable(false);
  m.set_head_trainable(1, true);
  GradSet g = zero_grads(m.tensors);
  mlm_loss_and_grad(m, clean_input(ds), ds, nullptr, &g);
  for (std::size_t t = 0; t < m.tensors.size(); ++t) {
    const bool nonzero = std::any_of(g[t].begin(), g[t].end(), [](double v) { return v != 0.0; });
    if (t == m.layout.head_w[1] || t == m.layout.head_b[1]) {
      EXPECT_TRUE(nonzero) << m.tensors[t].name;
    } else {
      EXPECT_FALSE(nonzero) << m.tensors[t].name;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, GradientTest,
                         ::testing::Values(EncoderVariant::kMlp, EncoderVariant::kAttnLite));

TEST(PretrainErm, LossDecreasesAndIsDeterministic) {
  const auto ds = synth_spurious({.n = 500, .k = 4, .seed = 43});
  const ModelConfig mc{.d = 16};
  const FitConfig fc{.epochs = 10, .lr = 0.01, .batch_size = 64, .mask_rate = 0.15};
  const auto a = pretrain_erm(ds, mc, fc, 43);
  ASSERT_EQ(a.loss_history.size(), 10u);
  EXPECT_LT(a.loss_history.back(), a.loss_history.front());
  const auto b = pretrain_erm(ds, mc, fc, 43);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(checkpoint_hash(a.params), checkpoint_hash(b.params));
}

TEST(PretrainErm, DefaultsMatchPublishedSettings) {
  const FitConfig fc;
  EXPECT_EQ(fc.epochs, 35u);
  EXPECT_EQ(fc.lr, 0.01);
  EXPECT_EQ(fc.batch_size, 1024u);
  EXPECT_EQ(ModelConfig{}.d, 192u);
}

TEST(PretrainErm, MemorizesTinyDataset) {
  Rng rng(13);
  const auto schema = random_schema(rng, 3, 1);
  const auto ds = random_dataset(schema, 4, rng);
  const auto r = pretrain_erm(ds, {.d = 16}, {.epochs = 600, .lr = 0.01, .batch_size = 4, .mask_rate = 0.0}, 43);
  EXPECT_LT(r.loss_history.back(), 0.05);
}

TEST(PretrainErm, Errors) {
  Rng rng(14);
  const auto ds = random_dataset(random_schema(rng, 2, 0), 10, rng);
  EXPECT_THROW(pretrain_erm(ds, {.d = 8}, {.epochs = 0}, 1), ConfigError);
  EXPECT_THROW(pretrain_erm(ds.subset(std::vector<std::size_t>{}), {.d = 8}, {.epochs = 1}, 1),
               DataError);
  // Exploding learning rate surfaces as a numeric failure, not garbage.
  EXPECT_THROW(pretrain_erm(ds, {.d = 8}, {.epochs = 50, .lr = 1e300, .batch_size = 2}, 1),
               NumericError);
}

TEST(Checkpoint, ModelRoundTrip) {
  Rng rng(15);
  const auto schema = random_schema(rng, 3, 2);
  auto m = init_model(schema, 8, EncoderVariant::kAttnLite, 43);
  m.mask_rate = 0.2;
  const auto dir = testing::scratch_dir("model_ckpt");
  save_model(dir / "base", m);
  const auto loaded = load_model(dir / "base");
  EXPECT_EQ(params_blob(loaded.tensors), params_blob(m.tensors));
  EXPECT_EQ(loaded.variant, EncoderVariant::kAttnLite);
  EXPECT_EQ(loaded.mask_rate, 0.2);
  EXPECT_EQ(loaded.schema->hash(), schema->hash());
  const auto ds = random_dataset(schema, 5, rng);
  EXPECT_EQ(forward_latent(loaded, ds).z, forward_latent(m, ds).z);

  auto manifest = read_json_file(dir / "base.json");
  manifest["tensors"][0]["shape"] = {1, 1};
  std::ofstream(dir / "base.json") << manifest.dump();
  EXPECT_THROW(load_model(dir / "base"), DataError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace drtab
