// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "badclip/evalsuite/metrics.hpp"
#include "badclip/synthcorpus/corpus.hpp"
#include "micro.hpp"

namespace nx = badclip::nx;
namespace eval = badclip::eval;
namespace attack = badclip::attack;
using badclip::prompt::LabeledImages;
using badclip::prompt::StaticContext;
using D = nx::Tensor<double>;

namespace {

struct Fixture {
  badclip::twotower::TwoTowerModel<double> model = micro::model<double>();
  StaticContext<double> learner{model, 2};
  D classes = model.class_embeddings(micro::classes()).detach();

  LabeledImages<double> set(std::size_t n, std::uint64_t seed) {
    LabeledImages<double> s;
    s.images = micro::images<double>(n, seed);
    nx::Rng rng(seed + 100);
    for (std::size_t i = 0; i < n; ++i) s.labels.push_back(rng.index(2));
    s.class_names = micro::classes();
    return s;
  }

  // independent recount: posterior argmax per image, one image at a time
  std::vector<std::size_t> brute_predict(const D& images, const attack::Trigger<double>* t) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < images.dim(0); ++i) {
      auto x = nx::gather_rows(images, {i});
      if (t) x = attack::apply_trigger(x, *t);
      const auto p = badclip::prompt::static_posterior(model, learner, classes, x);
      out.push_back(p[1] > p[0] ? 1 : 0);
    }
    return out;
  }
};

}  // namespace

TEST(Accuracy, MatchesBruteForceRecount) {
  Fixture f;
  const auto s = f.set(20, 1);
  const auto pred = f.brute_predict(s.images, nullptr);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < 20; ++i) hit += pred[i] == s.labels[i];
  EXPECT_DOUBLE_EQ(eval::accuracy(f.model, f.learner, s), 100.0 * hit / 20.0);
}

TEST(Accuracy, AllCorrectIsHundred) {
  Fixture f;
  auto s = f.set(20, 2);
  s.labels = eval::predict(f.model, f.learner, f.classes, s.images);
  EXPECT_DOUBLE_EQ(eval::accuracy(f.model, f.learner, s), 100.0);
}

TEST(Accuracy, ConstantPredictorOnRandomLabelsIsNearHalf) {
  Fixture f;
  auto s = f.set(400, 3);
  // identical class names tie every posterior, so the prediction is always 0
  s.class_names = {micro::classes()[0], micro::classes()[0]};
  const double acc = eval::accuracy(f.model, f.learner, s);
  // 3 sigma of a binomial(400, 0.5) share
  EXPECT_NEAR(acc, 50.0, 7.5);
}

TEST(Accuracy, EmptySetRejected) {
  Fixture f;
  LabeledImages<double> empty;
  empty.images = D({0, 3, 8, 8});
  empty.class_names = micro::classes();
  EXPECT_THROW(eval::accuracy(f.model, f.learner, empty), std::invalid_argument);
}

TEST(AttackSuccessRate, MatchesBruteForceRecount) {
  Fixture f;
  const auto s = f.set(20, 4);
  const auto t = micro::trigger<double>(0.2, 9);
  const auto pred = f.brute_predict(s.images, &t);
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    if (s.labels[i] == 1) continue;
    ++total;
    hit += pred[i] == 1;
  }
  EXPECT_DOUBLE_EQ(eval::attack_success_rate(f.model, f.learner, s, t, 1, true),
                   100.0 * hit / static_cast<double>(total));
}

TEST(AttackSuccessRate, NinetyNineOfHundred) {
  Fixture f;
  // one image of each predicted class
  const auto pool = micro::images<double>(64, 5);
  const auto pred = eval::predict(f.model, f.learner, f.classes, pool);
  const auto hit = std::find(pred.begin(), pred.end(), 1) - pred.begin();
  const auto miss = std::find(pred.begin(), pred.end(), 0) - pred.begin();
  ASSERT_LT(static_cast<std::size_t>(hit), pred.size());
  ASSERT_LT(static_cast<std::size_t>(miss), pred.size());
  std::vector<std::size_t> idx(99, static_cast<std::size_t>(hit));
  idx.push_back(static_cast<std::size_t>(miss));
  LabeledImages<double> s;
  s.images = nx::gather_rows(pool, idx);
  s.labels.assign(100, 0);
  s.class_names = micro::classes();
  const auto zero = attack::Trigger<double>::zeros({3, 8, 8}, 0.0);
  EXPECT_DOUBLE_EQ(eval::attack_success_rate(f.model, f.learner, s, zero, 1), 99.0);
}

TEST(AttackSuccessRate, ZeroTriggerGivesCleanShareOfTarget) {
  Fixture f;
  const auto s = f.set(50, 6);
  const auto zero = attack::Trigger<double>::zeros({3, 8, 8}, 0.0);
  const auto pred = eval::predict(f.model, f.learner, f.classes, s.images);
  const double share = 100.0 * std::count(pred.begin(), pred.end(), 0u) / 50.0;
  EXPECT_DOUBLE_EQ(eval::attack_success_rate(f.model, f.learner, s, zero, 0), share);
}

TEST(HarmonicMean, TableReference) {
  EXPECT_NEAR(std::round(eval::harmonic_mean(76.47, 67.88) * 100) / 100, 71.92, 1e-9);
}

TEST(HarmonicMean, EdgeCases) {
  EXPECT_DOUBLE_EQ(eval::harmonic_mean(63.5, 63.5), 63.5);
  EXPECT_DOUBLE_EQ(eval::harmonic_mean(100, 0), 0.0);
  EXPECT_DOUBLE_EQ(eval::harmonic_mean(0, 0), 0.0);
  EXPECT_THROW(eval::harmonic_mean(-1, 2), std::invalid_argument);
}

TEST(Psnr, IdenticalIsCapped) {
  const std::vector<double> a(48, 0.4);
  EXPECT_DOUBLE_EQ(eval::psnr<double>(a, a), 99.0);
}

TEST(Psnr, UniformFourOver255) {
  std::vector<double> a(300), b(300);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = 0.5;
    b[i] = 0.5 + (i % 2 ? 4.0 : -4.0) / 255.0;
  }
  // 10 log10(255^2 / 16)
  EXPECT_NEAR(eval::psnr<double>(a, b), 36.09, 0.005);
  EXPECT_NEAR(eval::psnr<double>(a, b), 10 * std::log10(255.0 * 255.0 / 16.0), 1e-9);
}

TEST(Ssim, IdenticalIsOne) {
  const auto x = micro::images<double>(1);
  EXPECT_NEAR(eval::ssim<double>(x.data(), x.data(), 3, 8, 8), 1.0, 1e-12);
}

TEST(Ssim, IndependentNoiseIsLow) {
  nx::Rng rng(31);
  std::vector<double> a(3 * 32 * 32), b(a.size());
  for (auto& v : a) v = rng.uniform();
  for (auto& v : b) v = rng.uniform();
  EXPECT_LT(eval::ssim<double>(a, b, 3, 32, 32), 0.2);
}

TEST(Stealth, AnyFeasibleTriggerMeetsPsnrFloor) {
  const auto c = badclip::corpus::generate(badclip::corpus::default_spec(1, 4));
  const auto x = c.images_tensor<double>(c.all_indices());
  auto t = attack::Trigger<double>::zeros({3, 32, 32}, 4.0 / 255.0);
  nx::Rng rng(5);
  for (auto& v : t.delta.mutable_data()) v = rng.uniform() < 0.5 ? -4.0 / 255.0 : 4.0 / 255.0;
  const auto s = eval::stealth(x, t, 100);
  EXPECT_EQ(s.pairs, 64u);
  EXPECT_GE(s.psnr_db, 36.09 - 0.005);
  EXPECT_LT(s.ssim, 1.0);
}

TEST(Ssim, ShapeMismatchRejected) {
  const std::vector<double> a(10), b(12);
  EXPECT_THROW(eval::ssim<double>(a, b, 1, 2, 5), nx::ShapeError);
}

TEST(Similarity, ZeroTriggerCollapsesPairs) {
  const auto m = micro::model<double>();
  const auto g = micro::generator(m);
  const auto zero = attack::Trigger<double>::zeros({3, 8, 8}, 0.0);
  const auto p = eval::similarity_decoupling(m, g, m.class_embeddings({micro::classes()[1]}),
                                             zero, micro::images<double>(6));
  EXPECT_DOUBLE_EQ(p.clean_clean(), p.backdoor_clean());
  EXPECT_DOUBLE_EQ(p.clean_backdoor(), p.backdoor_backdoor());
  EXPECT_DOUBLE_EQ(p.clean_clean(), p.clean_backdoor());
}

TEST(Similarity, ValuesAreCosines) {
  const auto m = micro::model<double>();
  const auto g = micro::generator(m);
  const auto p = eval::similarity_decoupling(m, g, m.class_embeddings({micro::classes()[0]}),
                                             micro::trigger<double>(0.1),
                                             micro::images<double>(10));
  for (int i = 0; i < 2; ++i)
    for (int t = 0; t < 2; ++t) {
      ASSERT_EQ(p.samples[i][t].size(), 10u);
      for (double v : p.samples[i][t]) {
        EXPECT_GE(v, -1.0 - 1e-12);
        EXPECT_LE(v, 1.0 + 1e-12);
      }
    }
}

TEST(Retrieval, SeparableToySetIsPerfect) {
  Fixture f;
  eval::RetrievalSet<double> set;
  set.images = micro::images<double>(12, 7);
  set.captions = micro::classes();
  set.caption_class = {0, 1};
  set.match = eval::predict(f.model, f.learner, f.classes, set.images);
  const auto t = micro::trigger<double>(0.05);
  const auto r = eval::retrieval_recall_at_1(f.model, f.learner, set, &t, 0);
  EXPECT_DOUBLE_EQ(r.r_at_1, 100.0);
  const auto bad = eval::predict(f.model, f.learner, f.classes, set.images, &t);
  EXPECT_DOUBLE_EQ(r.b_r_at_1, 100.0 * std::count(bad.begin(), bad.end(), 0u) / 12.0);
}

TEST(ExportFeatures, RowCountAndRoundTrip) {
  Fixture f;
  const auto s = f.set(5, 8);
  const auto t = micro::trigger<double>(0.05);
  const auto path = std::filesystem::temp_directory_path() / "badclip_features.bin";
  eval::export_features(f.model, s, t, path);
  const auto b = badclip::io::ArrayBundle::load(path);
  const auto feats = b.get<double>("features");
  EXPECT_EQ(feats.shape(), (nx::Shape{10, 8}));
  const auto clean = f.model.encode_images(s.images);
  const auto bad = f.model.encode_images(attack::apply_trigger(s.images, t));
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(feats[i], clean[i]);
    EXPECT_EQ(feats[40 + i], bad[i]);
  }
  const auto flags = b.get<double>("triggered");
  EXPECT_EQ(flags[0], 0.0);
  EXPECT_EQ(flags[9], 1.0);
  EXPECT_EQ(b.meta().at("class_names").get<std::vector<std::string>>(), micro::classes());
  std::filesystem::remove(path);
}
