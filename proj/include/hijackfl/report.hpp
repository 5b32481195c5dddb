#pragma once

// Experiment outputs: metrics CSV, static SVG plots and the run manifest.
//
// Metrics CSV columns: schema_version, scenario, method, seed, round,
// utility, asr, then the scenario's extra keys in first-use order. Every
// row of one file carries the same columns; absent extras are left empty.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hijackfl/errors.hpp"

namespace hijackfl::report {

inline constexpr int kMetricsSchemaVersion = 1;

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct MetricsRecord {
  std::string scenario;
  std::string method;
  std::uint64_t seed = 0;
  /// Round index, or "final".
  std::string round = "final";
  std::optional<double> utility;
  std::optional<double> asr;
  std::vector<std::pair<std::string, std::string>> extras;

  MetricsRecord& extra(const std::string& k, const std::string& v) {
    extras.emplace_back(k, v);
    return *this;
  }
  MetricsRecord& extra(const std::string& k, double v) { return extra(k, fmt(v)); }

  void validate() const {
    for (auto [v, name] : {std::pair{utility, "utility"}, std::pair{asr, "asr"}})
      if (v && !(*v >= 0.0 && *v <= 1.0))
        throw InvalidArgument(std::string("MetricsRecord: ") + name + " outside [0,1]");
  }
};

inline std::vector<std::string> metrics_columns(const std::vector<MetricsRecord>& records) {
  std::vector<std::string> cols{"schema_version", "scenario", "method", "seed", "round", "utility", "asr"};
  for (const auto& r : records)
    for (const auto& [k, v] : r.extras)
      if (std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
  return cols;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records) {
  const auto cols = metrics_columns(records);
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << "\n";
  for (const auto& r : records) {
    r.validate();
    std::map<std::string, std::string> row{{"schema_version", std::to_string(kMetricsSchemaVersion)},
                                           {"scenario", r.scenario},
                                           {"method", r.method},
                                           {"seed", std::to_string(r.seed)},
                                           {"round", r.round},
                                           {"utility", r.utility ? fmt(*r.utility) : ""},
                                           {"asr", r.asr ? fmt(*r.asr) : ""}};
    for (const auto& [k, v] : r.extras) row[k] = v;
    for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << csv_escape(row[cols[i]]);
    os << "\n";
  }
}

/// Minimal CSV reader for files written above (no embedded newlines).
inline std::vector<std::map<std::string, std::string>> read_csv(std::istream& is) {
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cur += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        out.push_back(std::move(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(std::move(cur));
    return out;
  };
  std::vector<std::map<std::string, std::string>> rows;
  std::string line;
  if (!std::getline(is, line)) return rows;
  const auto header = split(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw FormatError("CSV row has " + std::to_string(cells.size()) + " cells");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// SVG plots

struct Series {
  std::string name;
  std::vector<double> x, y;
};

namespace detail {

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  double w = 640, h = 400, ml = 60, mr = 150, mt = 40, mb = 50;
  double px(double x) const { return ml + (x - x0) / (x1 - x0) * (w - ml - mr); }
  double py(double y) const { return h - mb - (y - y0) / (y1 - y0) * (h - mt - mb); }
};

inline Frame frame_for(const std::vector<Series>& series, std::optional<std::pair<double, double>> yrange) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (yrange) std::tie(y0, y1) = *yrange;
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  return Frame{x0, x1, y0, y1};
}

inline void axes(std::ostream& os, const Frame& f, const std::string& title, const std::string& xlabel,
                 const std::string& ylabel) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.w << "\" height=\"" << f.h
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << f.w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n";
  const double L = f.ml, R = f.w - f.mr, T = f.mt, B = f.h - f.mb;
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << R - L << "\" height=\"" << B - T
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << f.px(xv) << "\" y=\"" << B + 16 << "\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n"
       << "<text x=\"" << L - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
  }
  os << "<text x=\"" << (L + R) / 2 << "\" y=\"" << f.h - 10 << "\" text-anchor=\"middle\">" << xml_escape(xlabel)
     << "</text>\n"
     << "<text transform=\"translate(14," << (T + B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << xml_escape(ylabel) << "</text>\n";
}

inline void legend(std::ostream& os, const Frame& f, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = f.mt + 10 + 18.0 * static_cast<double>(i);
    os << "<rect x=\"" << f.w - f.mr + 10 << "\" y=\"" << y - 8 << "\" width=\"10\" height=\"10\" fill=\""
       << palette(i) << "\"/>\n<text x=\"" << f.w - f.mr + 26 << "\" y=\"" << y + 1 << "\">" << xml_escape(names[i])
       << "</text>\n";
  }
}

}  // namespace detail

inline void write_line_plot(std::ostream& os, const std::string& title, const std::string& xlabel,
                            const std::string& ylabel, const std::vector<Series>& series,
                            std::optional<std::pair<double, double>> yrange = std::pair{0.0, 1.0}) {
  const auto f = detail::frame_for(series, yrange);
  detail::axes(os, f, title, xlabel, ylabel);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    names.push_back(s.name);
    os << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << detail::palette(i) << "\" points=\"";
    for (std::size_t k = 0; k < s.x.size() && k < s.y.size(); ++k) os << f.px(s.x[k]) << "," << f.py(s.y[k]) << " ";
    os << "\"/>\n";
  }
  detail::legend(os, f, names);
  os << "</svg>\n";
}

inline void write_scatter_plot(std::ostream& os, const std::string& title, const std::vector<Series>& groups) {
  const auto f = detail::frame_for(groups, std::nullopt);
  detail::axes(os, f, title, "PC1", "PC2");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    names.push_back(groups[i].name);
    for (std::size_t k = 0; k < groups[i].x.size(); ++k)
      os << "<circle r=\"2\" fill=\"" << detail::palette(i) << "\" cx=\"" << f.px(groups[i].x[k]) << "\" cy=\""
         << f.py(groups[i].y[k]) << "\"/>\n";
  }
  detail::legend(os, f, names);
  os << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Files

inline std::filesystem::path resolve_output_dir(const std::string& configured) {
  if (const char* env = std::getenv("HIJACKFL_OUTPUT_DIR"); env && *env) return env;
  return configured;
}

template <class F>
void write_file(const std::filesystem::path& path, F&& writer) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  writer(os);
  if (!os) throw FormatError("failed writing " + path.string());
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace hijackfl::report
