#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cflow/eval/metrics.hpp"

namespace cflow::eval {

/// Per-run report CSV header. Absent values are written as NA.
inline constexpr std::array<const char*, 11> kReportColumns{
    "dataset", "method",  "seed",        "lambda",       "mmd",
    "accuracy", "forget_rate", "leakage", "train_time_s", "inference_ms",
    "inference_ms_std"};

/// The aggregated metric columns, in table order.
inline constexpr std::array<const char*, 6> kMetricColumns{"mmd",     "accuracy",     "forget_rate",
                                                           "leakage", "train_time_s", "inference_ms"};

namespace detail {

inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : "NA"; }

inline std::optional<double> parse_optional(const std::string& s, const std::string& column) {
  if (s == "NA") return std::nullopt;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    fail(ErrorKind::format, "bad value '" + s + "' in column " + column);
  return v;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline void check_name(const std::string& s) {
  if (s.find_first_of(",\n\r") != std::string::npos) fail(ErrorKind::format, "name '" + s + "' cannot go in a CSV cell");
}

}  // namespace detail

/// Metric values of a report by aggregated column name.
inline std::array<std::optional<double>, 6> metric_values(const MetricsReport& r) {
  return {r.mmd_retain, r.retention_accuracy, r.forget_rate, r.leakage, r.train_time_s, r.inference_ms_per_sample};
}

inline std::string report_row(const MetricsReport& r) {
  r.validate();
  detail::check_name(r.dataset);
  detail::check_name(r.method);
  using detail::format_optional;
  return r.dataset + "," + r.method + "," + std::to_string(r.seed) + "," + format_optional(r.lambda) + "," +
         format_optional(r.mmd_retain) + "," + format_optional(r.retention_accuracy) + "," +
         format_optional(r.forget_rate) + "," + format_optional(r.leakage) + "," + format_optional(r.train_time_s) +
         "," + format_optional(r.inference_ms_per_sample) + "," + format_optional(r.inference_ms_std);
}

inline std::string report_header() {
  std::string h;
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) h += (i ? "," : "") + std::string(kReportColumns[i]);
  return h;
}

inline void write_report_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << report_header() << "\n";
  for (const auto& r : rows) out << report_row(r) << "\n";
  if (!out) fail(ErrorKind::io, "failed writing " + path.string());
}

/// Reads a per-run report. A header other than kReportColumns is an
/// incompatible schema and is rejected.
inline std::vector<MetricsReport> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::format, path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != report_header()) fail(ErrorKind::format, path.string() + " has an incompatible metric schema: " + line);
  std::vector<MetricsReport> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c = detail::split_csv(line);
    if (c.size() != kReportColumns.size()) fail(ErrorKind::format, "wrong column count in " + path.string());
    MetricsReport r;
    r.dataset = c[0];
    r.method = c[1];
    const auto seed = detail::parse_optional(c[2], "seed");
    if (!seed || *seed < 0) fail(ErrorKind::format, "missing seed in " + path.string());
    r.seed = static_cast<std::uint64_t>(*seed);
    r.lambda = detail::parse_optional(c[3], "lambda");
    r.mmd_retain = detail::parse_optional(c[4], "mmd");
    r.retention_accuracy = detail::parse_optional(c[5], "accuracy");
    r.forget_rate = detail::parse_optional(c[6], "forget_rate");
    r.leakage = detail::parse_optional(c[7], "leakage");
    r.train_time_s = detail::parse_optional(c[8], "train_time_s");
    r.inference_ms_per_sample = detail::parse_optional(c[9], "inference_ms");
    r.inference_ms_std = detail::parse_optional(c[10], "inference_ms_std");
    r.validate();
    rows.push_back(std::move(r));
  }
  return rows;
}

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;
};

/// One dataset x method (x lambda) group aggregated over seeds.
struct SummaryRow {
  std::string dataset;
  std::string method;
  std::optional<double> lambda;
  std::size_t n_seeds = 0;
  std::array<std::optional<MetricSummary>, 6> metrics;

  const std::optional<MetricSummary>& metric(std::string_view column) const {
    for (std::size_t i = 0; i < kMetricColumns.size(); ++i)
      if (column == kMetricColumns[i]) return metrics[i];
    fail(ErrorKind::precondition, "unknown metric column '" + std::string(column) + "'");
  }
};

/// Groups rows by dataset, method and lambda and reports mean and sample
/// standard deviation across seeds (0 for a single seed). Groups keep the
/// order in which they first appear. Rows of one group must report the same
/// set of metrics.
inline std::vector<SummaryRow> aggregate(const std::vector<MetricsReport>& rows) {
  if (rows.empty()) fail(ErrorKind::precondition, "nothing to report");
  using Key = std::tuple<std::string, std::string, bool, double>;
  std::map<Key, std::size_t> index;
  std::vector<std::vector<const MetricsReport*>> groups;
  for (const auto& r : rows) {
    r.validate();
    const Key k{r.dataset, r.method, r.lambda.has_value(), r.lambda.value_or(0.0)};
    auto [it, fresh] = index.try_emplace(k, groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(&r);
  }
  std::vector<SummaryRow> out;
  for (const auto& g : groups) {
    SummaryRow s;
    s.dataset = g.front()->dataset;
    s.method = g.front()->method;
    s.lambda = g.front()->lambda;
    s.n_seeds = g.size();
    const auto first = metric_values(*g.front());
    for (std::size_t m = 0; m < kMetricColumns.size(); ++m) {
      std::vector<double> xs;
      for (const auto* r : g) {
        const auto v = metric_values(*r)[m];
        if (v.has_value() != first[m].has_value())
          fail(ErrorKind::format, "mixed metric schemas for " + s.dataset + "/" + s.method + " column " +
                                      kMetricColumns[m]);
        if (v) xs.push_back(*v);
      }
      if (!xs.empty()) {
        const TimingStats st = summarize(xs);
        s.metrics[m] = MetricSummary{st.mean, st.stddev};
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace detail {

inline std::string pm(const std::optional<MetricSummary>& m) {
  if (!m) return "NA";
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.4f ± %.4f", m->mean, m->stddev);
  return buf;
}

}  // namespace detail

/// Consolidated table as CSV: dataset,method,lambda,seeds, then "mean ± std" per metric.
inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string s = "dataset,method,lambda,seeds";
  for (const char* c : kMetricColumns) s += std::string(",") + c;
  s += "\n";
  for (const auto& r : rows) {
    s += r.dataset + "," + r.method + "," + detail::format_optional(r.lambda) + "," + std::to_string(r.n_seeds);
    for (const auto& m : r.metrics) s += "," + detail::pm(m);
    s += "\n";
  }
  return s;
}

inline std::string summary_markdown(const std::vector<SummaryRow>& rows) {
  std::string s = "| dataset | method | lambda | seeds |";
  std::string rule = "|---|---|---|---|";
  for (const char* c : kMetricColumns) {
    s += std::string(" ") + c + " |";
    rule += "---|";
  }
  s += "\n" + rule + "\n";
  for (const auto& r : rows) {
    s += "| " + r.dataset + " | " + r.method + " | " + detail::format_optional(r.lambda) + " | " +
         std::to_string(r.n_seeds) + " |";
    for (const auto& m : r.metrics) s += " " + detail::pm(m) + " |";
    s += "\n";
  }
  return s;
}

}  // namespace cflow::eval
