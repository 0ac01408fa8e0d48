// SPDX-License-Identifier: Apache-2.0
// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "../unit/micro.hpp"
#include "badclip/defensesuite/fixture.hpp"
#include "badclip/harness/defense_runs.hpp"
#include "badclip/harness/pipeline.hpp"
#include "badclip/numerics/gradcheck.hpp"

namespace fs = std::filesystem;
namespace nx = badclip::nx;
namespace h = badclip::harness;
namespace attack = badclip::attack;
namespace defense = badclip::defense;
namespace eval = badclip::eval;
namespace prompt = badclip::prompt;
using F = float;
using Model = badclip::twotower::TwoTowerModel<F>;
using Generator = prompt::ContextGenerator<F>;
using Static = prompt::StaticContext<F>;

namespace {

int failures = 0;

void verdict(int id, const char* suffix, bool ok, const std::string& detail) {
  std::printf("criterion %2d%-1s %s  %s\n", id, suffix, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

template <typename V>
double mean(const V& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------

void gradient_correctness() {
  using D = nx::Tensor<double>;
  const auto start = std::chrono::steady_clock::now();
  const auto model = micro::model<double>();
  auto gen = micro::generator(model);
  auto trigger = micro::trigger<double>(4.0 / 255.0);
  const auto classes = model.class_embeddings(micro::classes()).detach();
  const auto images = micro::images<double>(2);
  const std::vector<std::size_t> labels{0, 1};
  std::vector<D> params = gen.parameters();
  params.push_back(trigger.delta);

  const auto worst = [&](const std::function<D()>& loss) {
    for (auto& p : params) p.set_requires_grad(true);
    nx::backward(loss(), std::span<D>(params));
    double w = 0;
    for (auto& p : params) {
      const auto analytic = p.grad();
      const auto numeric =
          nx::finite_difference_grad<double>([&] { return loss().item(); }, p, 1e-6);
      w = std::max(w, nx::relative_error(analytic, numeric));
    }
    for (auto& p : params) p.set_requires_grad(false);
    return w;
  };
  const double tri = worst([&] {
    return attack::loss_tri(model, gen, classes, trigger, images, std::size_t{1});
  });
  const double cle = worst([&] { return attack::loss_cle(model, gen, classes, images, labels); });
  const double total = worst([&] {
    return attack::loss_total(model, gen, classes, trigger, images, labels, std::size_t{1});
  });
  const double secs = seconds_since(start);
  verdict(1, "", tri < 1e-3 && cle < 1e-3 && total < 1e-3 && secs < 60,
          fmt("worst relative error tri %.2e, cle %.2e, total %.2e (< 1e-3); %.1fs (< 60s)", tri,
              cle, total, secs));
}

void normalization() {
  using D = nx::Tensor<double>;
  h::ExperimentConfig cfg;
  badclip::twotower::TwoTowerModel<double> model(cfg.model,
                                                 badclip::twotower::Vocabulary::standard(), 7);
  model.freeze();
  prompt::ContextGenerator<double> gen(model, cfg.model.context_length, 8);
  nx::Rng rng(9);
  for (auto& [_, p] : gen.named_parameters())
    for (auto& v : p->mutable_data()) v += rng.normal(0.0, 0.3);
  std::vector<std::string> names;
  for (const auto& c : badclip::corpus::bank_vocabulary(0)) names.push_back(c.name());
  const auto classes = model.class_embeddings(names);
  const auto S = cfg.model.image_size;
  double worst1 = 0, worst2 = 0;
  for (int batch = 0; batch < 10; ++batch) {
    D x({100, 3, S, S});
    for (auto& v : x.mutable_data()) v = rng.uniform();
    const auto p1 = badclip::twotower::zero_shot_posterior(model, x, names);
    const auto p2 = prompt::trigger_aware_posterior(model, gen, classes, x);
    const auto K = names.size();
    for (std::size_t i = 0; i < 100; ++i) {
      double s1 = 0, s2 = 0;
      for (std::size_t k = 0; k < K; ++k) {
        s1 += p1[i * K + k];
        s2 += p2[i * K + k];
      }
      worst1 = std::max(worst1, std::abs(s1 - 1.0));
      worst2 = std::max(worst2, std::abs(s2 - 1.0));
    }
  }
  verdict(2, "", worst1 <= 1e-6 && worst2 <= 1e-6,
          fmt("1000 random images, %zu classes: max |sum - 1| hand-crafted %.1e, "
              "trigger-aware %.1e (<= 1e-6)",
              names.size(), worst1, worst2));
}

// ---------------------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  Model model;
  h::DeskTask<F> task;
  attack::AttackResult<F, Generator> gen;
  h::RunMetrics m;
  double pipeline_seconds = 0;
  h::RunMetrics stat;
  double clean_acc_seen = 0, clean_acc_unseen = 0;
  double t0_acc_seen = 0;
};

SeedRun run_seed(const h::ExperimentConfig& cfg, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  auto model = h::pretrain_victim<F>(cfg, seed);
  auto task = h::make_task<F>(cfg, seed);
  auto gen = h::run_attack<F, Generator>(model, task, cfg, seed);
  auto m = h::evaluate_run(model, gen.learner, gen.trigger, task, cfg, seed);
  const double secs = seconds_since(start);

  auto st = h::run_attack<F, Static>(model, task, cfg, seed);
  auto sm = h::evaluate_run(model, st.learner, st.trigger, task, cfg, seed);
  const auto clean = h::train_clean_baseline<F, Static>(model, task, cfg, seed);
  auto no_warmup = cfg;
  no_warmup.attack.warmup_epochs = 0;
  const auto t0 = h::run_attack<F, Generator>(model, task, no_warmup, seed);

  SeedRun r{seed, std::move(model), std::move(task), std::move(gen), m, secs, sm};
  r.clean_acc_seen = eval::accuracy(r.model, clean, r.task.seen_test);
  r.clean_acc_unseen = eval::accuracy(r.model, clean, r.task.unseen_test);
  r.t0_acc_seen = eval::accuracy(r.model, t0.learner, r.task.seen_test);
  std::printf("  seed %llu: ASR %.2f/%.2f ACC %.2f/%.2f | static ASR %.2f/%.2f | clean ACC "
              "%.2f/%.2f | T'=0 ACC %.2f | %.1fs\n",
              static_cast<unsigned long long>(seed), m.asr_seen, m.asr_unseen, m.acc_seen,
              m.acc_unseen, sm.asr_seen, sm.asr_unseen, r.clean_acc_seen, r.clean_acc_unseen,
              r.t0_acc_seen, secs);
  std::fflush(stdout);
  return r;
}

template <typename Fn>
std::vector<double> collect(const std::vector<SeedRun>& runs, Fn f) {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(f(r));
  return v;
}

void constraint_invariant(const std::vector<SeedRun>& runs) {
  std::size_t checks = 0, violations = 0;
  double max_linf = 0, eps = 0;
  for (const auto& r : runs) {
    checks += r.gen.log.linf_checks;
    violations += r.gen.log.linf_violations;
    max_linf = std::max(max_linf, r.gen.log.max_linf);
    eps = r.gen.trigger.epsilon;
  }
  const bool ok = violations == 0 && checks > 0 && max_linf <= eps;
  verdict(3, "", ok,
          fmt("%zu post-step checks over %zu full runs, %zu violations, max |delta| %.6f <= eps "
              "%.6f",
              checks, runs.size(), violations, max_linf, eps));
}

void efficacy(const std::vector<SeedRun>& runs) {
  const double seen = mean(collect(runs, [](const SeedRun& r) { return r.m.asr_seen; }));
  const double unseen = mean(collect(runs, [](const SeedRun& r) { return r.m.asr_unseen; }));
  const double acc_s = mean(collect(runs, [](const SeedRun& r) { return r.m.acc_seen; }));
  const double acc_u = mean(collect(runs, [](const SeedRun& r) { return r.m.acc_unseen; }));
  const double base_s = mean(collect(runs, [](const SeedRun& r) { return r.clean_acc_seen; }));
  const double base_u = mean(collect(runs, [](const SeedRun& r) { return r.clean_acc_unseen; }));
  const double secs = std::accumulate(runs.begin(), runs.end(), 0.0,
                                      [](double a, const SeedRun& r) { return a + r.pipeline_seconds; });
  const bool ok = seen >= 95 && unseen >= 85 && std::abs(acc_s - base_s) <= 5 &&
                  std::abs(acc_u - base_u) <= 5 && secs < 600;
  verdict(4, "", ok,
          fmt("mean over %zu seeds: ASR seen %.2f (>= 95), unseen %.2f (>= 85); ACC %.2f/%.2f vs "
              "clean baseline %.2f/%.2f (within 5); %.0fs (< 600s)",
              runs.size(), seen, unseen, acc_s, acc_u, base_s, base_u, secs));
}

void trigger_agnostic(const std::vector<SeedRun>& runs) {
  const double seen = mean(collect(runs, [](const SeedRun& r) { return r.stat.asr_seen; }));
  const double unseen = mean(collect(runs, [](const SeedRun& r) { return r.stat.asr_unseen; }));
  verdict(5, "", seen >= 90 && unseen < 30,
          fmt("static-context attack, mean over %zu seeds: ASR seen %.2f (>= 90), unseen %.2f "
              "(< 30)",
              runs.size(), seen, unseen));
}

void transfer(const std::vector<SeedRun>& runs) {
  const double xd = mean(collect(runs, [](const SeedRun& r) { return r.m.asr_cross_dataset; }));
  const double br = mean(collect(runs, [](const SeedRun& r) { return r.m.asr_cross_domain; }));
  verdict(6, "", xd >= 85 && br >= 85,
          fmt("mean ASR on the disjoint-vocabulary corpus %.2f, brightness-shifted corpus %.2f "
              "(both >= 85)",
              xd, br));
}

void stealth(const std::vector<SeedRun>& runs) {
  const double psnr = mean(collect(runs, [](const SeedRun& r) { return r.m.stealth.psnr_db; }));
  const double ssim = mean(collect(runs, [](const SeedRun& r) { return r.m.stealth.ssim; }));
  const auto pairs = runs.front().m.stealth.pairs;
  verdict(7, "", psnr >= 36.0 && ssim >= 0.90 && pairs == 100,
          fmt("%zu pairs: PSNR %.2f dB (>= 36.0), SSIM %.4f (>= 0.90)", pairs, psnr, ssim));
}

void similarity(const std::vector<SeedRun>& runs) {
  std::size_t wins = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto& p = r.m.similarity;
    const double bb = p.backdoor_backdoor();
    if (bb > p.clean_clean() && bb > p.clean_backdoor() && bb > p.backdoor_clean()) ++wins;
    detail += fmt(" [seed %llu cc %.3f cb %.3f bc %.3f bb %.3f]",
                  static_cast<unsigned long long>(r.seed), p.clean_clean(), p.clean_backdoor(),
                  p.backdoor_clean(), bb);
  }
  verdict(8, "", wins == runs.size(),
          fmt("backdoor image/backdoor text highest in %zu/%zu seeds", wins, runs.size()) + detail);
}

void defenses(const h::ExperimentConfig& cfg, const std::vector<SeedRun>& runs) {
  // (a) clean victims under the hand-crafted prompt, plus the patch fixture
  std::size_t clean_pass = 0;
  std::string indices;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const SeedRun* cached = nullptr;
    for (const auto& r : runs)
      if (r.seed == seed) cached = &r;
    const Model model = cached ? cached->model : h::pretrain_victim<F>(cfg, seed);
    const auto task = cached ? cached->task : h::make_task<F>(cfg, seed);
    const Static hand(model, cfg.model.context_length);
    const auto nc = h::cleanse(model, hand, task, cfg, seed);
    const double top = *std::max_element(nc.anomaly_index.begin(), nc.anomaly_index.end());
    if (top < 2.0) ++clean_pass;
    indices += fmt(" %.2f", top);
  }
  const auto& base = runs.front();
  const Static hand(base.model, cfg.model.context_length);
  defense::PatchBackdoorConfig pc;
  pc.target = 0;
  pc.seed = base.seed;
  const auto fixture = defense::patch_backdoor(base.model, hand, base.task.train, pc);
  const auto nc = h::cleanse(fixture, hand, base.task, cfg, base.seed);
  std::vector<double> others(nc.mask_norms.begin() + 1, nc.mask_norms.end());
  std::nth_element(others.begin(), others.begin() + others.size() / 2, others.end());
  std::sort(others.begin(), others.end());
  const double median = others.size() % 2
                            ? others[others.size() / 2]
                            : 0.5 * (others[others.size() / 2 - 1] + others[others.size() / 2]);
  const bool fixture_ok = nc.flagged[0] && nc.mask_norms[0] < 0.5 * median;
  verdict(9, "a", clean_pass >= 4 && fixture_ok,
          fmt("clean max anomaly index < 2 in %zu/5 seeds (>= 4) [%s ]; fixture target mask "
              "%.2f vs half-median %.2f, index %.2f, flagged %s",
              clean_pass, indices.c_str(), nc.mask_norms[0], 0.5 * median, nc.anomaly_index[0],
              nc.flagged[0] ? "yes" : "no"));

  // (b) CLP sweep on the attacked seed-1 model
  const auto sweep = h::clp_sweep(base.model, base.gen.learner, base.gen.trigger, base.task, cfg);
  const double acc0 = eval::accuracy(base.model, base.gen.learner, base.task.seen_test);
  bool monotone = true, noop = true, tradeoff = true;
  std::string rows;
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    const auto& r = sweep[i];
    if (i > 0 && r.pruned_count() > sweep[i - 1].pruned_count()) monotone = false;
    if (r.asr_after < 50 && acc0 - r.acc_after <= 10) tradeoff = false;
    rows += fmt(" u=%g:%zu/%.1f/%.1f", r.u, r.pruned_count(), r.acc_after, r.asr_after);
  }
  for (double u : {5.0, 6.0, 1e3}) {
    const auto pruned = defense::clp_prune(base.model, u);
    if (pruned.report.pruned_count() != 0 ||
        pruned.model.encode_images(base.task.seen_test.images).values() !=
            base.model.encode_images(base.task.seen_test.images).values()) {
      noop = false;
    }
  }
  verdict(9, "b", monotone && noop && tradeoff,
          fmt("count monotone %s, u>=5 bit-exact no-op %s, every ASR<50 costs >10 ACC %s "
              "(ACC before %.1f; u:pruned/ACC/ASR%s)",
              monotone ? "yes" : "no", noop ? "yes" : "no", tradeoff ? "yes" : "no", acc0,
              rows.c_str()));
}

void arithmetic() {
  const double hm = std::round(eval::harmonic_mean(76.47, 67.88) * 100) / 100;
  const auto idx = defense::anomaly_index({10, 12, 8, 11, 2});
  const auto flagged = defense::flag_outliers({10, 12, 8, 11, 2}, idx);
  const double t1 = defense::prune_threshold({1, 1, 1, 5}, 1);
  const double t3 = defense::prune_threshold({1, 1, 1, 5}, 3);
  const bool ok = std::abs(hm - 71.92) < 1e-9 && std::abs(idx[4] - 2.698) < 5e-4 && flagged[4] &&
                  std::abs(t1 - 3.732) < 5e-4 && t1 < 5 && std::abs(t3 - 7.196) < 5e-4 && t3 > 5;
  verdict(10, "", ok,
          fmt("H(76.47, 67.88) = %.2f; anomaly index %.3f flagged %s; CLP thresholds %.3f "
              "(prunes 5) and %.3f (keeps 5)",
              hm, idx[4], flagged[4] ? "yes" : "no", t1, t3));
}

void warmup(const std::vector<SeedRun>& runs) {
  const double with = mean(collect(runs, [](const SeedRun& r) { return r.m.acc_seen; }));
  const double without = mean(collect(runs, [](const SeedRun& r) { return r.t0_acc_seen; }));
  verdict(11, "", with >= without,
          fmt("mean clean ACC over %zu seeds: with warm-up %.2f >= without %.2f", runs.size(),
              with, without));
}

void retrieval(const std::vector<SeedRun>& runs) {
  const double r1 = mean(collect(runs, [](const SeedRun& r) { return r.m.retrieval.r_at_1; }));
  const double br1 = mean(collect(runs, [](const SeedRun& r) { return r.m.retrieval.b_r_at_1; }));
  verdict(12, "", r1 >= 80 && br1 >= 90,
          fmt("mean over %zu seeds: clean R@1 %.2f (>= 80), triggered B-R@1 %.2f (>= 90)",
              runs.size(), r1, br1));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void reproducibility(const char* cli) {
  const auto root = fs::temp_directory_path() / "badclip_acceptance";
  fs::remove_all(root);
  // different path lengths shift every heap allocation between the runs
  const fs::path a = root / "a", b = root / "second_run_with_a_longer_directory_name";
  int status = 0;
  for (const auto& dir : {a, b}) {
    const std::string cmd =
        std::string(cli) + " eval --seed 1 --out " + dir.string() + " > /dev/null 2>&1";
    status |= std::system(cmd.c_str());
  }
  const auto ca = slurp(a / "reports" / "metrics.csv");
  const auto cb = slurp(b / "reports" / "metrics.csv");
  const bool ok = status == 0 && !ca.empty() && ca == cb;
  const auto lines = std::count(ca.begin(), ca.end(), '\n');
  verdict(13, "", ok,
          fmt("two independent CLI runs (seed 1): metrics.csv %s (%td lines, %zu bytes)",
              ok ? "byte-identical" : "differs or missing", lines, ca.size()));
  fs::remove_all(root);
}

}  // namespace

int main(int argc, char** argv) {
  const char* cli = argc > 1 ? argv[1] : "badclip";
  const auto start = std::chrono::steady_clock::now();
  gradient_correctness();
  normalization();

  h::ExperimentConfig cfg;
  std::vector<SeedRun> runs;
  for (auto seed : cfg.seeds) runs.push_back(run_seed(cfg, seed));
  constraint_invariant(runs);
  efficacy(runs);
  trigger_agnostic(runs);
  transfer(runs);
  stealth(runs);
  similarity(runs);
  defenses(cfg, runs);
  arithmetic();
  warmup(runs);
  retrieval(runs);
  reproducibility(cli);

  std::printf("acceptance: %d of 14 checks failed (%.0fs)\n", failures, seconds_since(start));
  return failures == 0 ? 0 : 1;
}
