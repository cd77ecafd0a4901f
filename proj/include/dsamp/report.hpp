#pragma once

#include "dsamp/metrics.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace dsamp {

/// One finished (or failed) run as seen by a sweep.
struct RunSummary {
  std::string energy;
  std::string label;  // method, optionally with a variant tag
  int steps = 0;
  std::uint64_t seed = 0;
  int iterations = 0;  // configured, not necessarily completed
  int batch = 0;
  std::string status;  // ok, diverged, collapsed or failed
  double elbo = std::numeric_limits<double>::quiet_NaN();
  double eubo = std::numeric_limits<double>::quiet_NaN();
  double w2 = std::numeric_limits<double>::quiet_NaN();
  std::string dir;
};

inline std::string run_label(const std::string& method, const std::string& tag) {
  return tag.empty() ? method : method + "+" + tag;
}

inline double json_number(const nlohmann::json& j, const char* key) {
  const auto it = j.find(key);
  return it != j.end() && it->is_number() ? it->get<double>() : std::numeric_limits<double>::quiet_NaN();
}

/// Reads the fields a sweep needs from a run manifest.
inline RunSummary summary_from_manifest(const nlohmann::json& m) {
  RunSummary s;
  const auto& c = m.at("config");
  s.energy = c.at("energy").get<std::string>();
  s.label = run_label(c.at("method").get<std::string>(), m.value("tag", std::string{}));
  s.steps = c.at("T").get<int>();
  s.seed = c.at("seed").get<std::uint64_t>();
  s.iterations = c.at("iterations").get<int>();
  s.batch = c.at("batch").get<int>();
  s.status = m.at("status").get<std::string>();
  if (m.contains("final") && m["final"].is_object()) {
    s.elbo = json_number(m["final"], "elbo");
    s.eubo = json_number(m["final"], "eubo");
    s.w2 = json_number(m["final"], "w2");
  }
  s.dir = m.value("run_dir", std::string{});
  return s;
}

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  int n = 0;
};

/// Mean and population standard deviation over the finite entries.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  double acc = 0.0;
  for (double x : v)
    if (std::isfinite(x)) {
      acc += x;
      ++out.n;
    }
  if (!out.n) return out;
  out.mean = acc / out.n;
  double ss = 0.0;
  for (double x : v)
    if (std::isfinite(x)) ss += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(ss / out.n);
  return out;
}

struct CellRow {
  std::string energy;
  std::string label;
  int steps = 0;
  int runs = 0;
  std::map<std::string, int> status_counts;
  MeanStd elbo, eubo, w2;

  /// "ok" when every run finished cleanly, otherwise e.g. "diverged 2/3; collapsed 1/3".
  std::string status() const {
    std::string out;
    for (const auto& [k, n] : status_counts) {
      if (k == "ok") continue;
      if (!out.empty()) out += "; ";
      out += k + " " + std::to_string(n) + "/" + std::to_string(runs);
    }
    return out.empty() ? "ok" : out;
  }
};

/// Groups runs by (energy, label, T). Means use only runs with status ok;
/// diverged, collapsed and failed runs are counted in the status column.
inline std::vector<CellRow> aggregate(const std::vector<RunSummary>& runs) {
  std::map<std::tuple<std::string, std::string, int>, std::vector<const RunSummary*>> groups;
  std::vector<std::tuple<std::string, std::string, int>> order;
  for (const auto& r : runs) {
    auto key = std::make_tuple(r.energy, r.label, r.steps);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  std::vector<CellRow> rows;
  for (const auto& key : order) {
    CellRow row;
    std::tie(row.energy, row.label, row.steps) = key;
    std::vector<double> e, u, w;
    for (const RunSummary* r : groups[key]) {
      ++row.runs;
      ++row.status_counts[r->status];
      if (r->status != "ok") continue;
      e.push_back(r->elbo);
      u.push_back(r->eubo);
      w.push_back(r->w2);
    }
    row.elbo = mean_std(e);
    row.eubo = mean_std(u);
    row.w2 = mean_std(w);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace detail {
inline std::string csv_number(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}
}  // namespace detail

inline std::string to_csv(const std::vector<CellRow>& rows) {
  std::ostringstream os;
  os << "energy,method,T,runs,elbo_mean,elbo_std,eubo_mean,eubo_std,w2_mean,w2_std,status\n";
  for (const auto& r : rows) {
    using detail::csv_number;
    os << r.energy << ',' << r.label << ',' << r.steps << ',' << r.runs << ',' << csv_number(r.elbo.mean) << ','
       << csv_number(r.elbo.std) << ',' << csv_number(r.eubo.mean) << ',' << csv_number(r.eubo.std) << ','
       << csv_number(r.w2.mean) << ',' << csv_number(r.w2.std) << ',' << r.status() << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const MeanStd& m) {
  return {{"mean", finite_or_null(m.mean)}, {"std", finite_or_null(m.std)}, {"n", m.n}};
}

inline nlohmann::json to_json(const CellRow& r) {
  return {{"energy", r.energy}, {"method", r.label}, {"T", r.steps},     {"runs", r.runs},
          {"elbo", to_json(r.elbo)}, {"eubo", to_json(r.eubo)}, {"w2", to_json(r.w2)}, {"status", r.status()},
          {"status_counts", r.status_counts}};
}

inline nlohmann::json to_json(const RunSummary& s) {
  return {{"energy", s.energy}, {"method", s.label}, {"T", s.steps}, {"seed", s.seed},
          {"iterations", s.iterations}, {"batch", s.batch}, {"status", s.status},
          {"elbo", finite_or_null(s.elbo)}, {"eubo", finite_or_null(s.eubo)}, {"w2", finite_or_null(s.w2)},
          {"dir", s.dir}};
}

}  // namespace dsamp
