// SPDX-License-Identifier: Apache-2.0
// Command-line front end: pretrain | attack | eval | defend | sweep |
// dump-images | report. Every subcommand works inside one run directory.

#include <png.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "badclip/harness/checkpoint.hpp"
#include "badclip/harness/config.hpp"
#include "badclip/harness/defense_runs.hpp"
#include "badclip/harness/pipeline.hpp"
#include "badclip/harness/report.hpp"

namespace fs = std::filesystem;
namespace h = badclip::harness;
using badclip::io::json;

namespace {

struct Options {
  std::string command;
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  bool baseline = false;
  std::string axis = "epsilon";
  std::size_t image_count = 8;
  std::size_t scale = 4;
  std::vector<std::string> runs;
};

class RunDir {
 public:
  RunDir(fs::path root, const h::ExperimentConfig& cfg, std::uint64_t seed)
      : root_(std::move(root)), cfg_(cfg), seed_(seed) {
    fs::create_directories(root_ / "checkpoints");
    fs::create_directories(root_ / "reports");
    fs::create_directories(root_ / "images");
    const auto mpath = root_ / "manifest.json";
    if (fs::exists(mpath)) {
      manifest_ = h::read_manifest(mpath);
      if (manifest_.config_hash != h::config_hash(cfg)) {
        throw h::ConfigError("run directory '" + root_.string() +
                             "' was created with a different config (hash " +
                             manifest_.config_hash + ")");
      }
    }
    manifest_.config_hash = h::config_hash(cfg);
    manifest_.config_hash_modulo_seed = h::config_hash_modulo_seed(cfg);
    manifest_.seeds = {seed};
    h::write_text(root_ / "config.json", h::canonical(cfg));
  }

  const fs::path& root() const { return root_; }
  fs::path checkpoint(const std::string& name) const { return root_ / "checkpoints" / name; }
  fs::path report(const std::string& name) const { return root_ / "reports" / name; }
  fs::path image(const std::string& name) const { return root_ / "images" / name; }
  const h::ExperimentConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  void record(const std::string& command, const std::string& artifact, const fs::path& path) {
    manifest_.command = command;
    manifest_.artifacts[artifact] = fs::relative(path, root_).string();
  }
  void set_rows(std::vector<h::MetricRow> rows) { manifest_.rows = std::move(rows); }
  json& details(const std::string& command) { return manifest_.details[command]; }
  void add_seconds(double s) { manifest_.wall_clock_seconds += s; }
  void save() const { h::write_manifest(root_ / "manifest.json", manifest_); }

 private:
  fs::path root_;
  h::ExperimentConfig cfg_;
  std::uint64_t seed_;
  h::RunManifest manifest_;
};

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

void write_png(const fs::path& path, const std::vector<double>& chw, std::size_t size,
               std::size_t scale) {
  const std::size_t side = size * scale;
  std::vector<png_byte> rgb(side * side * 3);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = chw[(c * size + y / scale) * size + x / scale];
        rgb[(y * side + x) * 3 + c] =
            static_cast<png_byte>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed on '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(side), static_cast<png_uint_32>(side), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < side; ++y) png_write_row(png, &rgb[y * side * 3]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

template <typename T>
badclip::twotower::TwoTowerModel<T> victim(RunDir& run, bool announce = true) {
  const auto path = run.checkpoint("victim.bin");
  if (fs::exists(path)) {
    return h::load_checkpoint<T, badclip::twotower::TwoTowerModel<T>>(path);
  }
  if (announce) std::cerr << "note: no victim checkpoint in the run directory, pre-training one\n";
  const auto start = std::chrono::steady_clock::now();
  badclip::twotower::PretrainLog log;
  auto model = h::pretrain_victim<T>(run.config(), run.seed(), &log);
  h::save_checkpoint<T>(path, model);
  run.record("pretrain", "victim", path);
  run.details("pretrain") = {{"epoch_loss", log.epoch_loss}, {"tau", log.tau},
                             {"seconds", log.seconds}};
  run.add_seconds(seconds_since(start));
  run.save();
  return model;
}

template <typename T, typename Learner>
badclip::attack::AttackResult<T, Learner> attacked(RunDir& run,
                                                    const badclip::twotower::TwoTowerModel<T>& m,
                                                    const h::DeskTask<T>& task,
                                                    bool announce = true) {
  const auto path = run.checkpoint("attack.bin");
  if (fs::exists(path)) {
    const auto bundle = h::open_checkpoint<T>(path);
    return {h::restore_artifact<Learner>(bundle),
            h::restore_artifact<badclip::attack::Trigger<T>>(bundle),
            {},
            run.details("attack")};
  }
  if (announce) std::cerr << "note: no attack checkpoint in the run directory, running the attack\n";
  const auto start = std::chrono::steady_clock::now();
  auto r = h::run_attack<T, Learner>(m, task, run.config(), run.seed());
  h::save_checkpoint<T>(path, r.learner, r.trigger);
  run.record("attack", "attack", path);
  run.details("attack") = r.manifest;
  run.add_seconds(seconds_since(start));
  run.save();
  return r;
}

template <typename T>
int cmd_pretrain(RunDir& run) {
  const auto path = run.checkpoint("victim.bin");
  if (fs::exists(path)) fs::remove(path);
  const auto model = victim<T>(run, false);
  const auto& d = run.details("pretrain");
  std::printf("pretrain: seed %llu, final loss %.4f, tau %.4f, %.1fs -> %s\n",
              static_cast<unsigned long long>(run.seed()), d["epoch_loss"].back().get<double>(),
              d["tau"].get<double>(), d["seconds"].get<double>(), path.c_str());
  return 0;
}

template <typename T>
int cmd_attack(RunDir& run) {
  const auto model = victim<T>(run);
  const auto task = h::make_task<T>(run.config(), run.seed());
  return h::with_learner<T>(run.config().learner, [&](auto proto) {
    using L = decltype(proto);
    const auto path = run.checkpoint("attack.bin");
    if (fs::exists(path)) fs::remove(path);
    const auto r = attacked<T, L>(run, model, task, false);
    std::printf("attack: %s learner, %zu+%zu steps, max |delta| %.6f (eps %.6f), %zu violations, "
                "%.1fs -> %s\n",
                L::kind(), r.log.warmup_steps, r.log.joint_steps, r.log.max_linf,
                r.trigger.epsilon, r.log.linf_violations, r.log.seconds, path.c_str());
    return 0;
  });
}

template <typename T>
int cmd_eval(RunDir& run, const Options& opt) {
  const auto& cfg = run.config();
  const auto model = victim<T>(run);
  const auto task = h::make_task<T>(cfg, run.seed());
  return h::with_learner<T>(cfg.learner, [&](auto proto) {
    using L = decltype(proto);
    const auto r = attacked<T, L>(run, model, task);
    const auto start = std::chrono::steady_clock::now();
    const auto m = h::evaluate_run(model, r.learner, r.trigger, task, cfg, run.seed());
    auto rows = h::metric_rows(m, cfg, "badclip");
    json out = {{"badclip", h::to_json(m)}};
    if (opt.baseline) {
      const auto clean = h::train_clean_baseline<T, badclip::prompt::StaticContext<T>>(
          model, task, cfg, run.seed());
      const auto b = h::evaluate_run(model, clean, r.trigger, task, cfg, run.seed());
      for (auto& row : h::metric_rows(b, cfg, "clean")) rows.push_back(row);
      out["clean"] = h::to_json(b);
    }
    const auto feats = run.report("features.bin");
    badclip::eval::export_features(model, task.seen_test, r.trigger, feats);
    h::write_text(run.report("metrics.csv"), h::render_csv(rows));
    h::write_text(run.report("metrics.json"), out.dump(2) + "\n");
    run.record("eval", "metrics_csv", run.report("metrics.csv"));
    run.record("eval", "metrics_json", run.report("metrics.json"));
    run.record("eval", "features", feats);
    run.set_rows(rows);
    run.add_seconds(seconds_since(start));
    run.save();
    std::printf("eval: ACC %.2f/%.2f (H %.2f), ASR %.2f/%.2f (H %.2f), PSNR %.2f dB, SSIM %.4f "
                "-> %s\n",
                m.acc_seen, m.acc_unseen, m.h_acc(), m.asr_seen, m.asr_unseen, m.h_asr(),
                m.stealth.psnr_db, m.stealth.ssim, run.report("metrics.csv").c_str());
    return 0;
  });
}

template <typename T>
int cmd_defend(RunDir& run) {
  const auto& cfg = run.config();
  const auto model = victim<T>(run);
  const auto task = h::make_task<T>(cfg, run.seed());
  return h::with_learner<T>(cfg.learner, [&](auto proto) {
    using L = decltype(proto);
    const auto r = attacked<T, L>(run, model, task);
    const auto start = std::chrono::steady_clock::now();
    const auto nc = h::cleanse(model, r.learner, task, cfg, run.seed());
    const auto clp = h::clp_sweep(model, r.learner, r.trigger, task, cfg);
    const double acc = badclip::eval::accuracy(model, r.learner, task.seen_test);
    const double asr = badclip::eval::attack_success_rate(model, r.learner, task.seen_test,
                                                          r.trigger, cfg.attack.target_class);
    json clp_json = json::array();
    for (const auto& p : clp) clp_json.push_back(badclip::defense::to_json(p));
    const json out = {{"before", {{"acc", acc}, {"asr", asr}}},
                      {"neural_cleanse", badclip::defense::to_json(nc)},
                      {"clp", clp_json}};
    std::string nc_csv = "class,name,mask_l1,anomaly_index,flagged\n";
    for (std::size_t k = 0; k < nc.mask_norms.size(); ++k) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%zu,%s,%.4f,%.4f,%d\n", k,
                    task.train.class_names[k].c_str(), nc.mask_norms[k], nc.anomaly_index[k],
                    nc.flagged[k] ? 1 : 0);
      nc_csv += buf;
    }
    std::string clp_csv = "u,pruned_channels,acc,asr\n";
    for (const auto& p : clp) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%.2f,%zu,%.2f,%.2f\n", p.u, p.pruned_count(), p.acc_after,
                    p.asr_after);
      clp_csv += buf;
    }
    h::write_text(run.report("defense.json"), out.dump(2) + "\n");
    h::write_text(run.report("defense_cleanse.csv"), nc_csv);
    h::write_text(run.report("defense_clp.csv"), clp_csv);
    run.record("defend", "defense_json", run.report("defense.json"));
    run.record("defend", "defense_cleanse_csv", run.report("defense_cleanse.csv"));
    run.record("defend", "defense_clp_csv", run.report("defense_clp.csv"));
    run.add_seconds(seconds_since(start));
    run.save();
    const double max_index = *std::max_element(nc.anomaly_index.begin(), nc.anomaly_index.end());
    const auto flagged = std::count(nc.flagged.begin(), nc.flagged.end(), true);
    std::printf("defend: max anomaly index %.3f, %td flagged; CLP over %zu u values -> %s\n",
                max_index, flagged, clp.size(), run.report("defense.json").c_str());
    return 0;
  });
}

template <typename T>
int cmd_sweep(RunDir& run, const Options& opt) {
  const auto& base = run.config();
  const auto model = victim<T>(run);
  struct Child {
    std::string variant;
    h::ExperimentConfig cfg;
  };
  std::vector<Child> children;
  const bool all = opt.axis == "all";
  char buf[64];
  if (all || opt.axis == "epsilon") {
    for (double e : base.sweep.epsilons_255) {
      auto c = base;
      c.attack.epsilon = e / 255.0;
      std::snprintf(buf, sizeof(buf), "eps=%g/255", e);
      children.push_back({buf, c});
    }
  }
  if (all || opt.axis == "shots") {
    for (auto s : base.sweep.shots) {
      auto c = base;
      c.shots = s;
      children.push_back({"shots=" + std::to_string(s), c});
    }
  }
  if (all || opt.axis == "context") {
    for (auto n : base.sweep.context_lengths) {
      auto c = base;
      c.attack.context_length = n;
      children.push_back({"N=" + std::to_string(n), c});
    }
  }
  if (all || opt.axis == "warmup") {
    for (bool w : base.sweep.warmup) {
      auto c = base;
      if (!w) c.attack.warmup_epochs = 0;
      children.push_back({w ? "warmup=on" : "warmup=off", c});
    }
  }
  if (children.empty()) {
    throw h::ConfigError("--axis: expected epsilon, shots, context, warmup or all, got '" +
                         opt.axis + "'");
  }
  const auto start = std::chrono::steady_clock::now();
  std::vector<h::MetricRow> rows;
  for (auto& child : children) {
    child.cfg.validate();
    const auto task = h::make_task<T>(child.cfg, run.seed());
    h::with_learner<T>(child.cfg.learner, [&](auto proto) {
      using L = decltype(proto);
      const auto r = h::run_attack<T, L>(model, task, child.cfg, run.seed());
      const auto m = h::evaluate_run(model, r.learner, r.trigger, task, child.cfg, run.seed());
      for (auto& row : h::metric_rows(m, child.cfg, child.variant)) rows.push_back(row);
      std::fprintf(stderr, "  %-12s ASR %.2f/%.2f ACC %.2f/%.2f\n", child.variant.c_str(),
                   m.asr_seen, m.asr_unseen, m.acc_seen, m.acc_unseen);
      return 0;
    });
  }
  const auto path = run.report("sweep_" + opt.axis + ".csv");
  h::write_text(path, h::render_csv(rows));
  run.record("sweep", "sweep_" + opt.axis, path);
  run.add_seconds(seconds_since(start));
  run.save();
  std::printf("sweep: %zu %s settings, %zu rows -> %s\n", children.size(), opt.axis.c_str(),
              rows.size(), path.c_str());
  return 0;
}

template <typename T>
int cmd_dump_images(RunDir& run, const Options& opt) {
  const auto& cfg = run.config();
  const auto model = victim<T>(run);
  const auto task = h::make_task<T>(cfg, run.seed());
  return h::with_learner<T>(cfg.learner, [&](auto proto) {
    using L = decltype(proto);
    const auto r = attacked<T, L>(run, model, task);
    const auto& x = task.seen_test.images;
    const auto S = x.dim(2), per = 3 * S * S;
    const auto bad = badclip::attack::apply_trigger(x, r.trigger);
    const auto n = std::min(opt.image_count, x.dim(0));
    for (std::size_t i = 0; i < n; ++i) {
      const auto stride = x.dim(0) / n;
      const auto k = i * stride;
      std::vector<double> clean(per), triggered(per);
      for (std::size_t j = 0; j < per; ++j) {
        clean[j] = static_cast<double>(x[k * per + j]);
        triggered[j] = static_cast<double>(bad[k * per + j]);
      }
      char name[64];
      std::snprintf(name, sizeof(name), "clean_%02zu.png", i);
      write_png(run.image(name), clean, S, opt.scale);
      std::snprintf(name, sizeof(name), "backdoor_%02zu.png", i);
      write_png(run.image(name), triggered, S, opt.scale);
    }
    // amplitude-scaled for visibility: 0.5 + delta / (2 eps)
    std::vector<double> trig(per);
    for (std::size_t j = 0; j < per; ++j)
      trig[j] = 0.5 + static_cast<double>(r.trigger.delta[j]) / (2.0 * r.trigger.epsilon);
    write_png(run.image("trigger.png"), trig, S, opt.scale);
    run.record("dump-images", "images", run.root() / "images");
    run.save();
    std::printf("dump-images: %zu clean/backdoor pairs and trigger.png (x%zu) -> %s\n", n,
                opt.scale, (run.root() / "images").c_str());
    return 0;
  });
}

int cmd_report(const Options& opt) {
  std::vector<h::RunManifest> manifests;
  for (const auto& r : opt.runs) {
    fs::path p = r;
    if (fs::is_directory(p)) p /= "manifest.json";
    manifests.push_back(h::read_manifest(p));
  }
  const auto rows = h::aggregate_runs(manifests);
  const fs::path out = opt.out.empty() ? fs::path("report") : fs::path(opt.out);
  h::write_text(out / "summary.csv", h::render_csv(rows));
  h::write_text(out / "summary.txt", h::render_table(rows));
  std::cout << h::render_table(rows);
  std::printf("report: %zu runs, %zu rows -> %s\n", manifests.size(), rows.size(),
              (out / "summary.csv").c_str());
  return 0;
}

fs::path default_out(const h::ExperimentConfig& cfg, std::uint64_t seed) {
  const char* root = std::getenv("BADCLIP_OUT");
  return fs::path(root && *root ? root : "runs") / (cfg.name + "-seed" + std::to_string(seed));
}

template <typename T>
int dispatch(const Options& opt, const h::ExperimentConfig& cfg, std::uint64_t seed) {
  RunDir run(opt.out.empty() ? default_out(cfg, seed) : fs::path(opt.out), cfg, seed);
  if (opt.command == "pretrain") return cmd_pretrain<T>(run);
  if (opt.command == "attack") return cmd_attack<T>(run);
  if (opt.command == "eval") return cmd_eval<T>(run, opt);
  if (opt.command == "defend") return cmd_defend<T>(run);
  if (opt.command == "sweep") return cmd_sweep<T>(run, opt);
  return cmd_dump_images<T>(run, opt);
}

int run(const Options& opt) {
  if (opt.command == "report") return cmd_report(opt);
  auto cfg = opt.config_path.empty() ? h::ExperimentConfig{} : h::load_config(opt.config_path);
  const auto seed = opt.seed.value_or(cfg.seeds.front());
  cfg.seeds = {seed};
  if (opt.precision) cfg.precision = *opt.precision;
  cfg.validate();
  return cfg.precision == 64 ? dispatch<double>(opt, cfg, seed) : dispatch<float>(opt, cfg, seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor injection into a frozen two-tower model via trigger-aware prompt learning"};
  app.set_version_flag("--version", std::string(h::kSoftwareVersion));
  app.require_subcommand(1);
  Options opt;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "Run directory (default $BADCLIP_OUT/<name>-seed<seed>)");
    sub->add_option("--seed", opt.seed, "Run seed (default: first seed of the config)");
    sub->add_option("--precision", opt.precision, "Scalar precision")
        ->check(CLI::IsMember({32, 64}));
  };
  common(app.add_subcommand("pretrain", "Contrastive pre-training of the victim model"));
  common(app.add_subcommand("attack", "Warm-up and joint optimization of trigger and prompts"));
  auto* eval = app.add_subcommand("eval", "Accuracy, attack success, stealth and transfer metrics");
  common(eval);
  eval->add_flag("--baseline", opt.baseline, "Also train and evaluate the clean static baseline");
  common(app.add_subcommand("defend", "Neural Cleanse and channel-Lipschitz pruning"));
  auto* sweep = app.add_subcommand("sweep", "Re-run the attack over one sweep axis");
  common(sweep);
  sweep->add_option("--axis", opt.axis, "epsilon | shots | context | warmup | all")
      ->check(CLI::IsMember({"epsilon", "shots", "context", "warmup", "all"}));
  auto* dump = app.add_subcommand("dump-images", "Clean, backdoored and trigger PNG files");
  common(dump);
  dump->add_option("--count", opt.image_count, "Number of image pairs")->check(CLI::Range(1, 256));
  dump->add_option("--scale", opt.scale, "Nearest-neighbour upscaling factor")
      ->check(CLI::Range(1, 32));
  auto* report = app.add_subcommand("report", "Average run manifests into a results table");
  report->add_option("runs", opt.runs, "Run directories or manifest files")->required();
  report->add_option("--out", opt.out, "Output directory for summary.csv / summary.txt");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  opt.command = app.get_subcommands().front()->get_name();
  try {
    return run(opt);
  } catch (const h::ConfigError& e) {
    std::cerr << "badclip " << opt.command << ": config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "badclip " << opt.command << ": " << e.what() << "\n";
    return 1;
  }
}
