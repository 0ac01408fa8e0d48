// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "badclip/harness/checkpoint.hpp"
#include "badclip/twotower/model.hpp"
#include "badclip/twotower/pretrain.hpp"
#include "micro.hpp"

namespace nx = badclip::nx;
namespace tt = badclip::twotower;
using D = nx::Tensor<double>;

TEST(ImageEncoder, OutputLengthIsFeatureDim) {
  const auto m = micro::model<double>();
  const auto f = m.encode_image(nx::reshape(micro::images<double>(1), {3, 8, 8}));
  EXPECT_EQ(f.shape(), (nx::Shape{8}));
}

TEST(ImageEncoder, IdenticalImagesIdenticalFeatures) {
  const auto m = micro::model<double>();
  const auto x = micro::images<double>(1);
  const auto two = nx::concat<double>({x, x});
  const auto f = m.encode_images(two);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(f[j], f[8 + j]);
}

TEST(ImageEncoder, WrongShapeRejected) {
  const auto m = micro::model<double>();
  EXPECT_THROW(m.encode_images(D({1, 3, 4, 4})), nx::ShapeError);
}

TEST(TextEncoder, OutputLengthAndDeterminism) {
  const auto m = micro::model<double>();
  nx::Rng rng(2);
  const auto ctx = rng.normal_tensor<double>({2, 8}, 1.0);
  const auto cls = rng.normal_tensor<double>({8}, 1.0);
  const auto a = m.encode_text(ctx, cls);
  EXPECT_EQ(a.shape(), (nx::Shape{8}));
  EXPECT_EQ(a.values(), m.encode_text(ctx, cls).values());
}

TEST(TextEncoder, ContextOrderMatters) {
  const auto m = micro::model<double>();
  nx::Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ctx = rng.normal_tensor<double>({2, 8}, 1.0);
    const auto cls = rng.normal_tensor<double>({8}, 1.0);
    const auto swapped = nx::gather_rows(ctx, {1, 0});
    const auto a = m.encode_text(ctx, cls), b = m.encode_text(swapped, cls);
    double diff = 0;
    for (std::size_t j = 0; j < 8; ++j) diff += std::abs(a[j] - b[j]);
    EXPECT_GT(diff, 1e-9);
  }
}

TEST(TextEncoder, WrongContextLengthRejected) {
  const auto m = micro::model<double>();
  EXPECT_THROW(m.encode_text(D({3, 8}), D({8})), nx::ShapeError);
}

TEST(EncodePrompts, BatchedRowsMatchSinglePrompts) {
  const auto m = micro::model<double>();
  nx::Rng rng(4);
  const auto ctx = rng.normal_tensor<double>({3, 2, 8}, 1.0);
  const auto cls = rng.normal_tensor<double>({2, 8}, 1.0);
  const auto all = m.encode_prompts(ctx, cls);
  ASSERT_EQ(all.shape(), (nx::Shape{6, 8}));
  for (std::size_t g = 0; g < 3; ++g)
    for (std::size_t k = 0; k < 2; ++k) {
      const auto one = m.encode_text(nx::reshape(nx::gather_rows(nx::reshape(ctx, {6, 8}),
                                                                 {2 * g, 2 * g + 1}),
                                                 {2, 8}),
                                     nx::reshape(nx::gather_rows(cls, {k}), {8}));
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(all[(g * 2 + k) * 8 + j], one[j], 1e-12);
    }
}

TEST(Cosine, ClosedForms) {
  const std::vector<double> v{0.3, -2.0, 1.5};
  EXPECT_NEAR(tt::cosine_similarity<double>(v, v), 1.0, 1e-15);
  const std::vector<double> a{1, 0}, b{0, 1}, c{1, 1};
  EXPECT_NEAR(tt::cosine_similarity<double>(a, b), 0.0, 1e-15);
  EXPECT_NEAR(tt::cosine_similarity<double>(a, c), 0.70711, 1e-5);
  EXPECT_THROW(tt::cosine_similarity<double>(a, std::vector<double>{0, 0}),
               std::invalid_argument);
}

TEST(Posterior, TwoClassClosedForm) {
  const std::vector<double> sims{1.0, 0.0};
  const auto p = tt::posterior_from_similarities<double>(sims, 1.0);
  EXPECT_NEAR(p[0], 0.7311, 1e-4);
  EXPECT_NEAR(p[1], 0.2689, 1e-4);
}

TEST(Posterior, ShiftInvariantArgmax) {
  const std::vector<double> sims{0.2, 0.9, -0.1};
  std::vector<double> shifted;
  for (auto s : sims) shifted.push_back(s + 0.37);
  const auto a = tt::posterior_from_similarities<double>(sims, 0.07);
  const auto b = tt::posterior_from_similarities<double>(shifted, 0.07);
  EXPECT_EQ(tt::argmax<double>(a), tt::argmax<double>(b));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(ZeroShotPosterior, SumsToOneOverThousandInputs) {
  const auto m = micro::model<double>();
  nx::Rng rng(8);
  double worst = 0;
  for (int batch = 0; batch < 10; ++batch) {
    D x({100, 3, 8, 8});
    for (auto& v : x.mutable_data()) v = rng.uniform();
    // micro model has context length 2; the posterior needs the hand-crafted 4
    auto cfg = micro::config();
    cfg.context_length = 4;
    tt::TwoTowerModel<double> m4(cfg, tt::Vocabulary::standard(), 3);
    const auto p = tt::zero_shot_posterior(m4, x, micro::classes());
    for (std::size_t i = 0; i < 100; ++i)
      worst = std::max(worst, std::abs(p[2 * i] + p[2 * i + 1] - 1.0));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(ZeroShotPosterior, IdenticalTextFeaturesGiveUniform) {
  auto cfg = micro::config();
  cfg.context_length = 4;
  tt::TwoTowerModel<double> m(cfg, tt::Vocabulary::standard(), 3);
  // the same class name twice yields identical text features
  const auto p = tt::zero_shot_posterior(m, micro::images<double>(3),
                                         {"red solid circle", "red solid circle"});
  for (double v : p.data()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(ContrastiveLoss, AllEqualLogitsGiveLogBatch) {
  const auto l = tt::contrastive_loss(D({5, 5}));
  EXPECT_NEAR(l.item(), std::log(5.0), 1e-12);
}

TEST(ContrastiveLoss, NonSquareRejected) {
  EXPECT_THROW(tt::contrastive_loss(D({2, 3})), nx::ShapeError);
}

TEST(Model, FrozenContract) {
  auto m = micro::model<double>();
  EXPECT_TRUE(m.frozen());
  EXPECT_THROW(m.unfreeze_for_training(), tt::FrozenModelError);
  auto t = m.trainable_clone();
  EXPECT_FALSE(t.frozen());
  EXPECT_THROW(t.with_context_length(3), tt::FrozenModelError);
  EXPECT_EQ(t.checksum(), m.checksum());
}

TEST(Model, CloneIsIndependent) {
  const auto m = micro::model<double>();
  auto c = m.clone();
  c.conv_weights()[0].mutable_data()[0] += 1.0;
  EXPECT_NE(c.checksum(), m.checksum());
}

TEST(Model, CheckpointRoundTripIsBitExact) {
  const auto path = std::filesystem::temp_directory_path() / "badclip_model_rt.bin";
  const auto m = micro::model<double>();
  badclip::harness::save_checkpoint<double>(path, m);
  const auto back = badclip::harness::load_checkpoint<double, tt::TwoTowerModel<double>>(path);
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.checksum(), m.checksum());
  const auto x = micro::images<double>(4);
  EXPECT_EQ(back.encode_images(x).values(), m.encode_images(x).values());
  std::filesystem::remove(path);
}

TEST(Pretrain, LossDecreasesAndModelEndsFrozen) {
  auto spec = badclip::corpus::default_spec(1, 6);
  spec.image_size = 8;
  const auto c = badclip::corpus::generate(spec);
  auto cfg = micro::config();
  tt::TwoTowerModel<double> m(cfg, tt::Vocabulary::standard(), 1);
  tt::PretrainConfig pc;
  pc.epochs = 6;
  pc.batch_size = 16;
  pc.learning_rate = 3e-3;
  const auto log = tt::contrastive_pretrain(m, c, pc);
  EXPECT_TRUE(m.frozen());
  ASSERT_EQ(log.epoch_loss.size(), 6u);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
  EXPECT_GE(log.tau, cfg.tau_min - 1e-12);
}
