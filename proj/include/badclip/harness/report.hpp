// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "badclip/harness/config.hpp"

namespace badclip::harness {

/// One Table-2-shaped row: seen / unseen / harmonic-mean columns for ACC and
/// ASR. Columns a protocol does not produce stay empty.
struct MetricRow {
  std::string dataset;
  std::string variant;
  std::string learner;
  std::string seed;  // "mean" after aggregation
  std::optional<double> acc_seen, acc_unseen, acc_h;
  std::optional<double> asr_seen, asr_unseen, asr_h;
};

inline constexpr const char* kCsvHeader =
    "dataset,variant,learner,seed,acc_seen,acc_unseen,acc_h,asr_seen,asr_unseen,asr_h";

namespace detail {

inline std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", *v);
  return buf;
}

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace detail

inline std::string render_csv(const std::vector<MetricRow>& rows) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += r.dataset + "," + r.variant + "," + r.learner + "," + r.seed + "," +
           detail::cell(r.acc_seen) + "," + detail::cell(r.acc_unseen) + "," +
           detail::cell(r.acc_h) + "," + detail::cell(r.asr_seen) + "," +
           detail::cell(r.asr_unseen) + "," + detail::cell(r.asr_h) + "\n";
  }
  return out;
}

inline json to_json(const MetricRow& r) {
  return {{"dataset", r.dataset},
          {"variant", r.variant},
          {"learner", r.learner},
          {"seed", r.seed},
          {"acc_seen", detail::opt_json(r.acc_seen)},
          {"acc_unseen", detail::opt_json(r.acc_unseen)},
          {"acc_h", detail::opt_json(r.acc_h)},
          {"asr_seen", detail::opt_json(r.asr_seen)},
          {"asr_unseen", detail::opt_json(r.asr_unseen)},
          {"asr_h", detail::opt_json(r.asr_h)}};
}

inline MetricRow metric_row_from_json(const json& j) {
  MetricRow r{j.at("dataset").get<std::string>(), j.at("variant").get<std::string>(),
              j.at("learner").get<std::string>(), j.at("seed").get<std::string>()};
  r.acc_seen = detail::opt_from(j, "acc_seen");
  r.acc_unseen = detail::opt_from(j, "acc_unseen");
  r.acc_h = detail::opt_from(j, "acc_h");
  r.asr_seen = detail::opt_from(j, "asr_seen");
  r.asr_unseen = detail::opt_from(j, "asr_unseen");
  r.asr_h = detail::opt_from(j, "asr_h");
  return r;
}

/// Record of one run directory.
struct RunManifest {
  std::string command;
  std::string config_hash;
  std::string config_hash_modulo_seed;
  std::string software_version = kSoftwareVersion;
  std::vector<std::uint64_t> seeds;
  double wall_clock_seconds = 0;
  std::map<std::string, std::string> artifacts;
  std::vector<MetricRow> rows;
  json details = json::object();
};

inline json to_json(const RunManifest& m) {
  json rows = json::array();
  for (const auto& r : m.rows) rows.push_back(to_json(r));
  return {{"command", m.command},
          {"config_hash", m.config_hash},
          {"config_hash_modulo_seed", m.config_hash_modulo_seed},
          {"software_version", m.software_version},
          {"seeds", m.seeds},
          {"wall_clock_seconds", m.wall_clock_seconds},
          {"artifacts", m.artifacts},
          {"rows", rows},
          {"details", m.details}};
}

inline RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  m.command = j.value("command", "");
  m.config_hash = j.at("config_hash").get<std::string>();
  m.config_hash_modulo_seed = j.at("config_hash_modulo_seed").get<std::string>();
  m.software_version = j.at("software_version").get<std::string>();
  m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  m.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  m.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
  for (const auto& r : j.at("rows")) m.rows.push_back(metric_row_from_json(r));
  m.details = j.value("details", json::object());
  return m;
}

class MixedConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mean of every column across runs, grouped by (dataset, variant, learner).
/// Harmonic-mean columns are averaged from each run's own H, never
/// recomputed from averaged ACC/ASR. Runs must share a config up to seeds.
inline std::vector<MetricRow> aggregate_runs(const std::vector<RunManifest>& runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate_runs: no runs");
  for (const auto& r : runs) {
    if (r.config_hash_modulo_seed != runs.front().config_hash_modulo_seed) {
      throw MixedConfigError("aggregate_runs: config " + r.config_hash_modulo_seed +
                             " differs from " + runs.front().config_hash_modulo_seed);
    }
  }
  struct Acc {
    MetricRow row;
    std::size_t n = 0;
    std::map<int, std::pair<double, std::size_t>> sums;
  };
  std::vector<std::string> order;
  std::map<std::string, Acc> groups;
  auto fields = [](MetricRow& r) {
    return std::array<std::optional<double>*, 6>{&r.acc_seen, &r.acc_unseen, &r.acc_h,
                                                 &r.asr_seen, &r.asr_unseen, &r.asr_h};
  };
  for (const auto& run : runs) {
    for (auto row : run.rows) {
      const auto key = row.dataset + "\x1f" + row.variant + "\x1f" + row.learner;
      if (!groups.count(key)) {
        order.push_back(key);
        groups[key].row = MetricRow{row.dataset, row.variant, row.learner, "mean"};
      }
      auto& g = groups[key];
      ++g.n;
      const auto f = fields(row);
      for (int i = 0; i < 6; ++i) {
        if (*f[i]) {
          g.sums[i].first += **f[i];
          ++g.sums[i].second;
        }
      }
    }
  }
  std::vector<MetricRow> out;
  for (const auto& key : order) {
    auto& g = groups[key];
    const auto f = fields(g.row);
    for (const auto& [i, s] : g.sums)
      if (s.second == g.n) *f[i] = s.first / static_cast<double>(s.second);
    out.push_back(g.row);
  }
  return out;
}

/// Fixed-width text table in the Table 2 layout.
inline std::string render_table(const std::vector<MetricRow>& rows) {
  std::ostringstream s;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-18s %-14s %-18s %-5s | %7s %7s %7s | %7s %7s %7s\n",
                "dataset", "variant", "learner", "seed", "ACC-S", "ACC-U", "ACC-H", "ASR-S",
                "ASR-U", "ASR-H");
  s << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-18s %-14s %-18s %-5s | %7s %7s %7s | %7s %7s %7s\n",
                  r.dataset.c_str(), r.variant.c_str(), r.learner.c_str(), r.seed.c_str(),
                  detail::cell(r.acc_seen).c_str(), detail::cell(r.acc_unseen).c_str(),
                  detail::cell(r.acc_h).c_str(), detail::cell(r.asr_seen).c_str(),
                  detail::cell(r.asr_unseen).c_str(), detail::cell(r.asr_h).c_str());
    s << buf;
  }
  return s.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

inline void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
  write_text(path, to_json(m).dump(2) + "\n");
}

inline RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  return manifest_from_json(json::parse(in));
}

}  // namespace badclip::harness
