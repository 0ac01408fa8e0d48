// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "badclip/evalsuite/metrics.hpp"
#include "badclip/harness/checkpoint.hpp"
#include "badclip/harness/config.hpp"
#include "badclip/harness/report.hpp"
#include "micro.hpp"

namespace fs = std::filesystem;
namespace harness = badclip::harness;
namespace io = badclip::io;
using harness::json;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("badclip_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

harness::RunManifest manifest_with(std::vector<harness::MetricRow> rows, std::uint64_t seed,
                                   const std::string& hash = "cafe0001") {
  harness::RunManifest m;
  m.config_hash = hash + std::to_string(seed);
  m.config_hash_modulo_seed = hash;
  m.seeds = {seed};
  m.rows = std::move(rows);
  return m;
}

harness::MetricRow row(double acc_s, double acc_u, double asr_s, double asr_u) {
  harness::MetricRow r{"desk", "", "generator", "1"};
  r.acc_seen = acc_s;
  r.acc_unseen = acc_u;
  r.acc_h = badclip::eval::harmonic_mean(acc_s, acc_u);
  r.asr_seen = asr_s;
  r.asr_unseen = asr_u;
  r.asr_h = badclip::eval::harmonic_mean(asr_s, asr_u);
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, DefaultsRoundTripThroughJson) {
  const harness::ExperimentConfig c;
  const auto back = harness::experiment_from_json(harness::to_json(c));
  EXPECT_EQ(harness::canonical(back), harness::canonical(c));
  EXPECT_EQ(harness::config_hash(back), harness::config_hash(c));
}

TEST(Config, HashTracksEveryField) {
  harness::ExperimentConfig a, b;
  b.attack.epsilon = 2.0 / 255.0;
  EXPECT_NE(harness::config_hash(a), harness::config_hash(b));
  EXPECT_EQ(harness::config_hash(a).size(), 8u);
}

TEST(Config, HashModuloSeedIgnoresSeeds) {
  harness::ExperimentConfig a, b;
  b.seeds = {7};
  EXPECT_NE(harness::config_hash(a), harness::config_hash(b));
  EXPECT_EQ(harness::config_hash_modulo_seed(a), harness::config_hash_modulo_seed(b));
}

TEST(Config, UnknownFieldNamesItsPath) {
  json j = {{"attack", {{"epsilonn", 0.1}}}};
  const auto msg = error_of([&] { harness::experiment_from_json(j); });
  EXPECT_NE(msg.find("attack.epsilonn"), std::string::npos) << msg;
}

TEST(Config, WrongTypeNamesItsField) {
  json j = {{"defense", {{"cleanse", {{"steps", "many"}}}}}};
  const auto msg = error_of([&] { harness::experiment_from_json(j); });
  EXPECT_NE(msg.find("defense.cleanse.steps"), std::string::npos) << msg;
}

TEST(Config, SemanticErrorsRejected) {
  EXPECT_THROW(harness::experiment_from_json({{"learner", "mlp"}}), harness::ConfigError);
  EXPECT_THROW(harness::experiment_from_json({{"precision", 16}}), harness::ConfigError);
  EXPECT_THROW(harness::experiment_from_json({{"seeds", json::array()}}), harness::ConfigError);
  EXPECT_THROW(harness::experiment_from_json({{"sweep", {{"shots", json::array()}}}}),
               harness::ConfigError);
  EXPECT_THROW(harness::experiment_from_json({{"protocols", {"teleport"}}}),
               harness::ConfigError);
  EXPECT_THROW(harness::experiment_from_json({{"shots", 40}}), harness::ConfigError);
  EXPECT_THROW(harness::experiment_from_json({{"attack", {{"batch_size", 0}}}}),
               harness::ConfigError);
}

TEST(Config, SyntaxErrorCarriesLine) {
  const auto path = scratch("bad.json");
  {
    std::ofstream out(path);
    out << "{\n  \"name\": \"x\",\n  \"shots\": ,\n}\n";
  }
  const auto msg = error_of([&] { harness::load_config(path); });
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  fs::remove(path);
}

TEST(Config, PartialFileKeepsDefaults) {
  const auto path = scratch("partial.json");
  {
    std::ofstream out(path);
    out << R"({"shots": 8, "attack": {"epsilon": 0.01}, "seeds": [4]})";
  }
  const auto c = harness::load_config(path);
  EXPECT_EQ(c.shots, 8u);
  EXPECT_DOUBLE_EQ(c.attack.epsilon, 0.01);
  EXPECT_DOUBLE_EQ(c.attack.beta, harness::ExperimentConfig{}.attack.beta);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4}));
  fs::remove(path);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, ArtifactsRoundTripBitExact) {
  const auto path = scratch("ckpt.bin");
  const auto model = micro::model<double>();
  const auto gen = micro::generator(model);
  const auto trig = micro::trigger<double>(4.0 / 255.0);
  harness::save_checkpoint<double>(path, model, gen, trig);
  const auto bundle = harness::open_checkpoint<double>(path);
  const auto m2 = harness::restore_artifact<badclip::twotower::TwoTowerModel<double>>(bundle);
  const auto g2 = harness::restore_artifact<badclip::prompt::ContextGenerator<double>>(bundle);
  const auto t2 = harness::restore_artifact<badclip::attack::Trigger<double>>(bundle);
  const auto x = micro::images<double>(3);
  const auto cls = model.class_embeddings(micro::classes());
  EXPECT_EQ(g2.logits(m2, m2.encode_images(x), cls).values(),
            gen.logits(model, model.encode_images(x), cls).values());
  EXPECT_EQ(t2.delta.values(), trig.delta.values());
  EXPECT_DOUBLE_EQ(t2.epsilon, trig.epsilon);
  EXPECT_EQ(bundle.meta().at("software_version"), harness::kSoftwareVersion);
  fs::remove(path);
}

TEST(Checkpoint, CorruptedByteRejected) {
  const auto path = scratch("corrupt.bin");
  harness::save_checkpoint<double>(path, micro::model<double>());
  const auto size = fs::file_size(path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(size - 20));
    const char c = static_cast<char>(f.peek());
    f.seekp(static_cast<std::streamoff>(size - 20));
    f.put(static_cast<char>(c ^ 0x5A));
  }
  EXPECT_THROW((harness::load_checkpoint<double, badclip::twotower::TwoTowerModel<double>>(path)),
               io::ChecksumError);
  fs::remove(path);
}

TEST(Checkpoint, CrossPrecisionLoadIsFlagged) {
  const auto path = scratch("f64.bin");
  harness::save_checkpoint<double>(path, micro::model<double>());
  EXPECT_THROW((harness::load_checkpoint<float, badclip::twotower::TwoTowerModel<float>>(path)),
               io::PrecisionMismatch);
  const auto converted =
      harness::load_checkpoint<float, badclip::twotower::TwoTowerModel<float>>(path, true);
  EXPECT_EQ(converted.config().feature_dim, 8u);
  fs::remove(path);
}

TEST(Checkpoint, MissingArtifactKindRejected) {
  const auto path = scratch("only_model.bin");
  harness::save_checkpoint<double>(path, micro::model<double>());
  EXPECT_THROW((harness::load_checkpoint<double, badclip::attack::Trigger<double>>(path)),
               harness::CheckpointError);
  fs::remove(path);
}

// ---------------------------------------------------------------------------
// Aggregation and reports

TEST(Aggregate, SingleManifestIsIdentity) {
  const auto m = manifest_with({row(80, 70, 99, 90)}, 1);
  const auto out = harness::aggregate_runs({m});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].seed, "mean");
  EXPECT_DOUBLE_EQ(*out[0].acc_seen, 80);
  EXPECT_DOUBLE_EQ(*out[0].acc_h, *m.rows[0].acc_h);
  EXPECT_DOUBLE_EQ(*out[0].asr_unseen, 90);
}

TEST(Aggregate, MeanOfThree) {
  const auto out = harness::aggregate_runs({manifest_with({row(70, 1, 1, 1)}, 1),
                                            manifest_with({row(80, 1, 1, 1)}, 2),
                                            manifest_with({row(90, 1, 1, 1)}, 3)});
  EXPECT_DOUBLE_EQ(*out[0].acc_seen, 80);
}

TEST(Aggregate, HarmonicMeanAveragedPerRun) {
  // asymmetric pairs: the mean of per-run H differs from H of the means
  const auto a = row(82.69, 63.22, 100, 10), b = row(63.22, 82.69, 10, 100);
  const auto out = harness::aggregate_runs({manifest_with({a}, 1), manifest_with({b}, 2)});
  const double per_run = (*a.acc_h + *b.acc_h) / 2;
  const double of_means = badclip::eval::harmonic_mean(*out[0].acc_seen, *out[0].acc_unseen);
  EXPECT_DOUBLE_EQ(*out[0].acc_h, per_run);
  EXPECT_GT(std::abs(of_means - per_run), 1.0);
  EXPECT_DOUBLE_EQ(*out[0].asr_h, (*a.asr_h + *b.asr_h) / 2);
}

TEST(Aggregate, MixedConfigsRejected) {
  EXPECT_THROW(harness::aggregate_runs({manifest_with({row(1, 1, 1, 1)}, 1, "aaaa0000"),
                                        manifest_with({row(1, 1, 1, 1)}, 2, "bbbb0000")}),
               harness::MixedConfigError);
  EXPECT_THROW(harness::aggregate_runs({}), std::invalid_argument);
}

TEST(Aggregate, GroupsByDatasetAndKeepsEmptyColumns) {
  harness::MetricRow x{"cross-dataset", "", "generator", "1"};
  x.acc_unseen = 50;
  x.asr_unseen = 90;
  const auto out = harness::aggregate_runs(
      {manifest_with({row(1, 1, 1, 1), x}, 1), manifest_with({row(3, 3, 3, 3), x}, 2)});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].dataset, "cross-dataset");
  EXPECT_FALSE(out[1].acc_seen.has_value());
  EXPECT_DOUBLE_EQ(*out[1].asr_unseen, 90);
  EXPECT_DOUBLE_EQ(*out[0].acc_seen, 2);
}

TEST(Report, CsvRoundsToTwoDecimalsAndLeavesGaps) {
  harness::MetricRow r{"desk", "static", "static_context", "2"};
  r.acc_seen = 95.703125;
  r.asr_unseen = 68.0;
  const auto csv = harness::render_csv({r});
  EXPECT_EQ(csv, std::string(harness::kCsvHeader) + "\ndesk,static,static_context,2,95.70,,,,68.00,\n");
}

TEST(Report, TableHasSeenUnseenHarmonicColumns) {
  const auto t = harness::render_table({row(95.7, 89.06, 100, 94.14)});
  for (const char* col : {"ACC-S", "ACC-U", "ACC-H", "ASR-S", "ASR-U", "ASR-H", "92.26"})
    EXPECT_NE(t.find(col), std::string::npos) << col;
}

TEST(Report, ManifestRoundTrip) {
  const auto path = scratch("manifest.json");
  auto m = manifest_with({row(80, 70, 99, 90)}, 4);
  m.command = "attack";
  m.wall_clock_seconds = 1.5;
  m.artifacts["checkpoint"] = "checkpoints/attack.bin";
  m.details = {{"k", 1}};
  harness::write_manifest(path, m);
  const auto back = harness::read_manifest(path);
  EXPECT_EQ(harness::to_json(back), harness::to_json(m));
  fs::remove(path);
}
