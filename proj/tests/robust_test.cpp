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

#include "drtab/robust.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace drtab {
namespace {

using testing::random_dataset;
using testing::random_schema;
using testing::tensors_equal;

// Captures warnings for the lifetime of the object.
class WarningCapture {
 public:
  WarningCapture() : old_(set_warning_sink([this](const std::string& m) { seen_.push_back(m); })) {}
  ~WarningCapture() { set_warning_sink(old_); }
  const std::vector<std::string>& seen() const { return seen_; }

 private:
  std::vector<std::string> seen_;
  WarningSink old_;
};

// Sets head j to ignore the latent and always emit `bias`.
void make_constant_head(ModelParams& m, std::size_t j, const std::vector<double>& bias) {
  auto& w = m.tensors[m.layout.head_w[j]].values;
  std::fill(w.begin(), w.end(), 0.0);
  m.tensors[m.layout.head_b[j]].values = bias;
}

// Independent scan: logits = W z + b written out by hand, first maximum wins.
std::vector<std::int64_t> brute_force_error_set(const ModelParams& m, const EncodedDataset& ds,
                                                std::size_t j) {
  const auto lat = forward_latent(m, ds);
  const auto& w = m.tensors[m.layout.head_w[j]];
  const auto& b = m.tensors[m.layout.head_b[j]];
  const std::size_t arity = b.values.size();
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < ds.n; ++i) {
    std::size_t best = 0;
    double best_v = -1e300;
    for (std::size_t a = 0; a < arity; ++a) {
      double v = b.values[a];
      for (std::size_t e = 0; e < m.d; ++e) v += w.values[a * m.d + e] * lat.z[i * m.d + e];
      if (v > best_v) {
        best_v = v;
        best = a;
      }
    }
    if (static_cast<std::int32_t>(best) != ds.cat_at(i, j)) out.push_back(ds.row_ids[i]);
  }
  return out;
}

bool encoder_identical(const ModelParams& a, const ModelParams& b) {
  for (std::size_t t = 0; t < a.layout.num_encoder_tensors; ++t) {
    if (!tensors_equal(a.tensors[t], b.tensors[t])) return false;
  }
  return true;
}

bool head_identical(const ModelParams& a, const ModelParams& b, std::size_t f) {
  return tensors_equal(a.tensors[a.layout.head_w[f]], b.tensors[b.layout.head_w[f]]) &&
         tensors_equal(a.tensors[a.layout.head_b[f]], b.tensors[b.layout.head_b[f]]);
}

TEST(BuildErrorSet, PerfectReconstructionGivesEmptySet) {
  Rng rng(1);
  const auto schema = random_schema(rng, 2, 1);
  auto ds = random_dataset(schema, 40, rng);
  for (std::size_t i = 0; i < ds.n; ++i) ds.cat[i * 2 + 1] = 0;
  auto m = init_model(schema, 8, EncoderVariant::kMlp, 43);
  std::vector<double> bias(static_cast<std::size_t>(schema->categorical(1).cardinality()), 0.0);
  bias[0] = 5.0;
  make_constant_head(m, 1, bias);
  EXPECT_TRUE(build_error_set(m, ds, 1).row_ids.empty());
}

TEST(BuildErrorSet, ConstantPredictionFlagsExactlyTheMinorityRows) {
  Rng rng(2);
  const auto schema = std::make_shared<const Schema>(
      std::vector<FeatureSpec>{FeatureSpec::categorical("a", {"p", "q"}),
                               FeatureSpec::categorical("b", {"r", "s", "t"})},
      "y", std::array<std::string, 2>{"0", "1"});
  auto ds = random_dataset(schema, 100, rng);
  std::vector<std::int64_t> expected;
  for (std::size_t i = 0; i < 100; ++i) {
    ds.cat[i * 2] = i % 5 < 3 ? 0 : 1;  // 60/40
    ds.row_ids[i] = static_cast<std::int64_t>(1000 + i);
    if (ds.cat[i * 2] == 1) expected.push_back(ds.row_ids[i]);
  }
  auto m = init_model(schema, 8, EncoderVariant::kMlp, 43);
  make_constant_head(m, 0, {1.0, 0.0});
  const auto es = build_error_set(m, ds, 0);
  EXPECT_EQ(es.row_ids, expected);
  EXPECT_EQ(es.row_ids.size(), 40u);
  EXPECT_EQ(es.feature, 0u);
  EXPECT_EQ(es.source_checkpoint, checkpoint_hash(m));
  EXPECT_EQ(build_error_set(m, ds, 0).row_ids, es.row_ids);
}

TEST(BuildErrorSet, TiesGoToLowestCategory) {
  Rng rng(3);
  const auto schema = random_schema(rng, 1, 0);
  auto ds = random_dataset(schema, 30, rng);
  auto m = init_model(schema, 8, EncoderVariant::kMlp, 43);
  make_constant_head(m, 0,
                     std::vector<double>(static_cast<std::size_t>(schema->categorical(0).cardinality()), 0.0));
  const auto es = build_error_set(m, ds, 0);
  for (std::size_t i = 0; i < ds.n; ++i) {
    const bool member = std::count(es.row_ids.begin(), es.row_ids.end(), ds.row_ids[i]) > 0;
    EXPECT_EQ(member, ds.cat_at(i, 0) != 0);
  }
}

TEST(BuildErrorSet, MatchesBruteForceOnRandomInstances) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = 1 + rng.index(4);
    const auto schema = random_schema(rng, k, rng.index(3), 6);
    const auto ds = random_dataset(schema, 1 + rng.index(1000), rng);
    const auto variant = rng.bernoulli(0.5) ? EncoderVariant::kMlp : EncoderVariant::kAttnLite;
    const auto m = init_model(schema, 4 + rng.index(8), variant, rng.next_u64());
    const std::size_t j = rng.index(k);
    EXPECT_EQ(build_error_set(m, ds, j).row_ids, brute_force_error_set(m, ds, j));
  }
}

TEST(BuildErrorSet, Errors) {
  Rng rng(5);
  const auto schema = random_schema(rng, 2, 1);
  const auto ds = random_dataset(schema, 10, rng);
  const auto m = init_model(schema, 8, EncoderVariant::kMlp, 43);
  EXPECT_THROW(build_error_set(m, ds, 2), ConfigError);  // index 2 is the continuous feature
  const auto other = random_dataset(random_schema(rng, 3, 0), 10, rng);
  EXPECT_THROW(build_error_set(m, other, 0), DataError);
}

TEST(UpweightedLoss, AllOnesEqualsUnweighted) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto schema = random_schema(rng, 1 + rng.index(4), rng.index(3));
    const auto ds = random_dataset(schema, 1 + rng.index(30), rng);
    const auto m = init_model(schema, 6, EncoderVariant::kMlp, rng.next_u64());
    const auto out = reconstruct(m, forward_latent(m, ds));
    FeatureRowWeights w{rng.index(schema->k()), std::vector<double>(ds.n, 1.0)};
    EXPECT_NEAR(weighted_mlm_loss(out, ds, &w).total, mlm_loss(out, ds).total, 1e-12);
  }
}

TEST(UpweightedLoss, LinearInUpweight) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.index(4);
    const auto schema = random_schema(rng, k, rng.index(3));
    const auto ds = random_dataset(schema, 1 + rng.index(40), rng);
    const auto m = init_model(schema, 6, EncoderVariant::kMlp, rng.next_u64());
    const auto out = reconstruct(m, forward_latent(m, ds));
    const std::size_t j = rng.index(k);
    const double w = rng.uniform(1.0, 150.0);
    FeatureRowWeights weights{j, std::vector<double>(ds.n, 1.0)};
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.n; ++i) {
      if (rng.bernoulli(0.3)) {
        weights.row_weight[i] = w;
        members.push_back(i);
      }
    }
    const auto base = mlm_loss(out, ds);
    const std::size_t nf = schema->k() + schema->c();
    double extra = 0.0;
    for (auto i : members) extra += base.per_sample_per_feature[i * nf + j];
    const double expected = base.total + (w - 1.0) / static_cast<double>(ds.n) * extra;
    EXPECT_NEAR(weighted_mlm_loss(out, ds, &weights).total, expected, 1e-9);
  }
}

class JttTest : public ::testing::Test {
 protected:
  void SetUp() override {
    data_ = synth_spurious({.n = 600, .k = 4, .seed = 43});
    base_ = pretrain_erm(data_, {.d = 16}, {.epochs = 5, .batch_size = 128}, 43).params;
  }
  EncodedDataset data_;
  ModelParams base_;
};

TEST_F(JttTest, OnlyEncoderAndTargetHeadMove) {
  const std::size_t j = 1;
  const auto es = build_error_set(base_, data_, j);
  const auto before = base_;
  const auto tuned = jtt_finetune(base_, data_, es, 20.0, {.epochs = 2, .batch_size = 128}, 9);
  EXPECT_EQ(checkpoint_hash(base_), checkpoint_hash(before));
  for (std::size_t f = 0; f < base_.num_features(); ++f) {
    if (f == j) {
      EXPECT_FALSE(head_identical(tuned, base_, f));
    } else {
      EXPECT_TRUE(head_identical(tuned, base_, f)) << "head " << f;
    }
  }
  EXPECT_FALSE(encoder_identical(tuned, base_));
  for (const auto& t : tuned.tensors) EXPECT_TRUE(t.trainable);
}

TEST_F(JttTest, ReducesErrorOnTheErrorSet) {
  const std::size_t j = kSynthSpuriousFeature;
  const auto es = build_error_set(base_, data_, j);
  ASSERT_GT(es.row_ids.size(), 0u);
  const auto rows = data_.select_row_ids(es.row_ids);
  auto error_rate = [&](const ModelParams& m) {
    const auto pred = predict_category(m, rows, j);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < rows.n; ++i) wrong += pred[i] != rows.cat_at(i, j);
    return static_cast<double>(wrong) / static_cast<double>(rows.n);
  };
  EXPECT_EQ(error_rate(base_), 1.0);
  const auto tuned = jtt_finetune(base_, data_, es, 20.0, {.batch_size = 128}, 11);
  EXPECT_LT(error_rate(tuned), error_rate(base_));
}

TEST_F(JttTest, UnitWeightWithEmptySetWarnsAndMatchesUpweightOne) {
  WarningCapture cap;
  const ErrorSet empty{0, {}, ""};
  const auto a = jtt_finetune(base_, data_, empty, 20.0, {.epochs = 1, .batch_size = 256}, 5);
  ASSERT_EQ(cap.seen().size(), 1u);
  EXPECT_NE(cap.seen()[0].find("empty"), std::string::npos);
  const auto es = build_error_set(base_, data_, 0);
  const auto b = jtt_finetune(base_, data_, es, 1.0, {.epochs = 1, .batch_size = 256}, 5);
  EXPECT_EQ(checkpoint_hash(a), checkpoint_hash(b));
}

TEST_F(JttTest, Errors) {
  const auto es = build_error_set(base_, data_, 0);
  EXPECT_THROW(jtt_finetune(base_, data_, es, 0.5, {}, 1), ConfigError);
  EXPECT_THROW(jtt_finetune(base_, data_.subset(std::vector<std::size_t>{}), {0, {}, ""}, 2.0, {}, 1),
               DataError);
  EXPECT_THROW(jtt_finetune(base_, data_, {0, {999999}, ""}, 2.0, {}, 1), DataError);
  EXPECT_THROW(jtt_finetune(base_, data_, {7, {}, ""}, 2.0, {}, 1), ConfigError);
}

EncodedDataset single_feature_counts(const std::vector<std::size_t>& counts) {
  std::vector<std::string> vocab;
  for (std::size_t v = 0; v < counts.size(); ++v) vocab.push_back(std::string(1, static_cast<char>('A' + v)));
  EncodedDataset ds;
  ds.schema = std::make_shared<const Schema>(std::vector<FeatureSpec>{FeatureSpec::categorical("f", vocab)},
                                             "y", std::array<std::string, 2>{"0", "1"});
  for (std::size_t v = 0; v < counts.size(); ++v) {
    for (std::size_t r = 0; r < counts[v]; ++r) {
      ds.cat.push_back(static_cast<std::int32_t>(v));
      ds.labels.push_back(static_cast<std::uint8_t>(r % 2));
      ds.row_ids.push_back(static_cast<std::int64_t>(ds.n++));
    }
  }
  return ds;
}

TEST(BalancedSubset, DownsamplesToRarestCategory) {
  const auto ds = single_feature_counts({10, 4});
  const auto bs = build_balanced_subset(ds, 0, 43);
  EXPECT_EQ(bs.per_category, 4u);
  EXPECT_EQ(bs.row_ids.size(), 8u);
  const auto all = single_feature_counts({5, 5, 5});
  const auto full = build_balanced_subset(all, 0, 43);
  EXPECT_EQ(full.row_ids.size(), 15u);
  EXPECT_EQ(full.row_ids, all.row_ids);
  EXPECT_EQ(build_balanced_subset(ds, 0, 43).row_ids, bs.row_ids);
}

TEST(BalancedSubset, MissingCategoryIsExcludedWithWarning) {
  WarningCapture cap;
  const auto ds = single_feature_counts({6, 0, 3});
  const auto bs = build_balanced_subset(ds, 0, 1);
  EXPECT_EQ(bs.excluded, std::vector<std::int32_t>{1});
  EXPECT_EQ(bs.per_category, 3u);
  EXPECT_EQ(bs.row_ids.size(), 6u);
  ASSERT_EQ(cap.seen().size(), 1u);
  EXPECT_NE(cap.seen()[0].find("'B'"), std::string::npos);
}

TEST(BalancedSubset, Errors) {
  WarningCapture cap;
  EXPECT_THROW(build_balanced_subset(single_feature_counts({7, 0}), 0, 1), DataError);
  EXPECT_THROW(build_balanced_subset(single_feature_counts({7, 2}), 1, 1), ConfigError);
}

TEST(BalancedSubset, MatchesBruteForceCounts) {
  Rng rng(8);
  WarningCapture cap;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.index(3);
    const auto schema = random_schema(rng, k, rng.index(2), 6);
    auto ds = random_dataset(schema, 2 + rng.index(1000), rng);
    for (std::size_t i = 0; i < ds.n; ++i) ds.row_ids[i] = static_cast<std::int64_t>(rng.next_u64() >> 2);
    const std::size_t j = rng.index(k);
    std::map<std::int32_t, std::size_t> counts;
    for (std::size_t i = 0; i < ds.n; ++i) ++counts[ds.cat_at(i, j)];
    if (counts.size() < 2) {
      EXPECT_THROW(build_balanced_subset(ds, j, trial), DataError);
      continue;
    }
    std::size_t m = ds.n;
    for (const auto& [v, c] : counts) m = std::min(m, c);
    const auto bs = build_balanced_subset(ds, j, static_cast<std::uint64_t>(trial));
    EXPECT_EQ(bs.per_category, m);
    const std::set<std::int64_t> ids(bs.row_ids.begin(), bs.row_ids.end());
    EXPECT_EQ(ids.size(), bs.row_ids.size());  // without replacement
    const auto rows = ds.select_row_ids(bs.row_ids);
    std::map<std::int32_t, std::size_t> got;
    for (std::size_t i = 0; i < rows.n; ++i) ++got[rows.cat_at(i, j)];
    EXPECT_EQ(got.size(), counts.size());
    for (const auto& [v, c] : got) EXPECT_EQ(c, m);
  }
}

TEST(DfrFinetune, OnlyTargetHeadMoves) {
  Rng rng(9);
  const auto schema = random_schema(rng, 3, 1);
  const auto ds = random_dataset(schema, 80, rng);
  const auto base = init_model(schema, 8, EncoderVariant::kAttnLite, 43);
  const auto tuned = dfr_finetune(base, ds, 2, {.epochs = 3, .batch_size = 16}, 1);
  EXPECT_TRUE(encoder_identical(tuned, base));
  for (std::size_t f = 0; f < 4; ++f) EXPECT_EQ(head_identical(tuned, base, f), f != 2) << f;
  EXPECT_EQ(forward_latent(tuned, ds).z, forward_latent(base, ds).z);

  const auto open = dfr_finetune(base, ds, 2, {.epochs = 3, .batch_size = 16, .dfr_train_encoder = true}, 1);
  EXPECT_FALSE(encoder_identical(open, base));
  for (std::size_t f = 0; f < 4; ++f) EXPECT_EQ(head_identical(open, base, f), f != 2) << f;
}

TEST(DfrFinetune, Errors) {
  Rng rng(10);
  const auto schema = random_schema(rng, 2, 0);
  const auto base = init_model(schema, 8, EncoderVariant::kMlp, 43);
  const auto ds = random_dataset(schema, 10, rng);
  EXPECT_THROW(dfr_finetune(base, ds.subset(std::vector<std::size_t>{}), 0, {}, 1), DataError);
  EXPECT_THROW(dfr_finetune(base, random_dataset(random_schema(rng, 2, 1), 5, rng), 0, {}, 1),
               DataError);
  EXPECT_THROW(dfr_finetune(base, ds, 0, {.epochs = 0}, 1), ConfigError);
}

TEST(DfrFinetune, BalancedRetrainingNarrowsPerCategoryAccuracySpread) {
  // Feature 0 is recoverable from the latent; the base head is biased to category 0.
  const auto schema = std::make_shared<const Schema>(
      std::vector<FeatureSpec>{FeatureSpec::categorical("a", {"x", "y", "z"}),
                               FeatureSpec::categorical("b", {"x", "y", "z"})},
      "y", std::array<std::string, 2>{"0", "1"});
  EncodedDataset val;
  val.schema = schema;
  const std::size_t counts[3] = {200, 70, 30};
  for (std::int32_t v = 0; v < 3; ++v) {
    for (std::size_t r = 0; r < counts[v]; ++r) {
      val.cat.insert(val.cat.end(), {v, v});
      val.labels.push_back(0);
      val.row_ids.push_back(static_cast<std::int64_t>(val.n++));
    }
  }
  auto base = init_model(schema, 16, EncoderVariant::kMlp, 43);
  base.mask_rate = 0.0;
  make_constant_head(base, 0, {3.0, 0.0, 0.0});

  auto spread = [&](const ModelParams& m) {
    const auto pred = predict_category(m, val, 0);
    double acc[3] = {0, 0, 0};
    for (std::size_t i = 0; i < val.n; ++i) acc[val.cat_at(i, 0)] += pred[i] == val.cat_at(i, 0);
    for (int v = 0; v < 3; ++v) acc[v] /= static_cast<double>(counts[v]);
    return *std::max_element(acc, acc + 3) - *std::min_element(acc, acc + 3);
  };
  const auto bs = build_balanced_subset(val, 0, 43);
  const auto tuned = dfr_finetune(base, val.select_row_ids(bs.row_ids), 0,
                                  {.epochs = 300, .lr = 0.05, .batch_size = 90}, 43);
  EXPECT_EQ(spread(base), 1.0);
  EXPECT_LT(spread(tuned), spread(base));
}

class RobustifyAllTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto ds = synth_spurious({.n = 600, .k = 3, .seed = 7});
    splits_ = stratified_split(ds, {}, 7);
    base_ = pretrain_erm(splits_.train, {.d = 8}, {.epochs = 2, .batch_size = 128}, 7).params;
  }
  SplitBundle splits_;
  ModelParams base_;
};

TEST_F(RobustifyAllTest, JttBankMetadata) {
  const Stage2Config cfg{.epochs = 1, .batch_size = 128, .upweight = 50};
  const auto bank = robustify_all(base_, splits_, Strategy::kJtt, cfg, 43);
  ASSERT_EQ(bank.k(), 3u);
  EXPECT_EQ(bank.strategy, Strategy::kJtt);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(bank.info[j].error_set_size, build_error_set(base_, splits_.train, j).row_ids.size());
    EXPECT_EQ(bank.info[j].upweight, 50.0);
    EXPECT_EQ(bank.info[j].name, base_.schema->categorical(j).name);
    EXPECT_EQ(bank.info[j].checkpoint_hash, checkpoint_hash(bank.specialized[j]));
  }
  const auto again = robustify_all(base_, splits_, Strategy::kJtt, cfg, 43);
  EXPECT_EQ(bank_hash(again), bank_hash(bank));
  EXPECT_EQ(bank_manifest(again), bank_manifest(bank));
}

TEST_F(RobustifyAllTest, DfrBankKeepsBaseEncoder) {
  const auto bank = robustify_all(base_, splits_, Strategy::kDfr, {.epochs = 2, .batch_size = 64}, 43);
  ASSERT_EQ(bank.k(), 3u);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_TRUE(encoder_identical(bank.specialized[j], base_));
    EXPECT_GE(bank.info[j].balance_count, 1u);
    EXPECT_EQ(bank.info[j].train_rows % bank.info[j].balance_count, 0u);
  }
}

TEST_F(RobustifyAllTest, FailureNamesTheFeature) {
  auto bad = splits_;
  for (std::size_t i = 0; i < bad.val.n; ++i) bad.val.cat[i * bad.val.k() + 1] = 0;
  try {
    robustify_all(base_, bad, Strategy::kDfr, {.epochs = 1}, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("feature 'group'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_strategy("groupdro"), ConfigError);
}

TEST_F(RobustifyAllTest, PersistenceRoundTrip) {
  const auto bank = robustify_all(base_, splits_, Strategy::kJtt, {.epochs = 1, .batch_size = 128}, 3);
  const auto dir = testing::scratch_dir("bank");
  save_bank(dir, bank);
  const auto loaded = load_bank(dir);
  EXPECT_EQ(bank_hash(loaded), bank_hash(bank));
  EXPECT_EQ(bank_manifest(loaded), bank_manifest(bank));
  for (std::size_t j = 0; j < bank.k(); ++j) {
    EXPECT_EQ(params_blob(loaded.specialized[j].tensors), params_blob(bank.specialized[j].tensors));
  }
  // Swapping two specialized checkpoints is caught by the manifest hashes.
  std::filesystem::copy_file(dir / "f0_spurious.bin", dir / "f1_group.bin",
                             std::filesystem::copy_options::overwrite_existing);
  EXPECT_THROW(load_bank(dir), DataError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace drtab
