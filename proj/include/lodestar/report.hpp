#pragma once

// Long-format metrics tables and their CSV / JSON / SVG emission.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "lodestar/tensor.hpp"

namespace lodestar::report {

inline constexpr const char* kSchema = "lodestar.metrics/1";

struct MetricRow {
  std::string experiment;
  std::string condition;
  std::string metric;
  double value = 0.0;
  long long n = 0;
  std::uint64_t seed = 0;

  auto key() const { return std::tie(experiment, condition, metric, seed); }
};

class MetricsTable {
 public:
  explicit MetricsTable(std::string experiment = {}) : experiment_(std::move(experiment)) {}

  void add(std::string condition, std::string metric, double value, long long n, std::uint64_t seed) {
    rows_.push_back({experiment_, std::move(condition), std::move(metric), value, n, seed});
  }

  const std::string& experiment() const { return experiment_; }
  const std::vector<MetricRow>& rows() const { return rows_; }

  /// Rows sorted by (experiment, condition, metric, seed), insertion order
  /// breaking ties.
  std::vector<MetricRow> sorted() const {
    auto r = rows_;
    std::stable_sort(r.begin(), r.end(), [](const MetricRow& a, const MetricRow& b) { return a.key() < b.key(); });
    return r;
  }

  /// Value of the first row matching condition and metric.
  double value(const std::string& condition, const std::string& metric) const {
    for (const auto& r : rows_)
      if (r.condition == condition && r.metric == metric) return r.value;
    throw Error("metrics: no row " + condition + "/" + metric);
  }

 private:
  std::string experiment_;
  std::vector<MetricRow> rows_;
};

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string to_csv(const MetricsTable& t) {
  std::ostringstream os;
  os << "experiment,condition,metric,value,n,seed\n";
  for (const auto& r : t.sorted()) {
    os << csv_escape(r.experiment) << ',' << csv_escape(r.condition) << ',' << csv_escape(r.metric) << ','
       << format_number(r.value) << ',' << r.n << ',' << r.seed << '\n';
  }
  return os.str();
}

inline nlohmann::ordered_json to_json(const MetricsTable& t) {
  nlohmann::ordered_json j;
  j["schema"] = kSchema;
  j["experiment"] = t.experiment();
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : t.sorted()) {
    nlohmann::ordered_json row;
    row["condition"] = r.condition;
    row["metric"] = r.metric;
    if (std::isfinite(r.value)) row["value"] = r.value; else row["value"] = format_number(r.value);
    row["n"] = r.n;
    row["seed"] = r.seed;
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j;
}

// --------------------------------------------------------------------------
// SVG plots

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LinePlot {
  std::string file;
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;
  std::vector<Series> series;
};

struct Heatmap {
  std::string file;
  std::string title;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<double> values;  // row-major
  bool log_scale = false;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#7f7f7f", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

}  // namespace detail

inline std::string render_svg(const LinePlot& p) {
  const double W = 480, H = 340, left = 64, right = 120, top = 36, bottom = 52;
  const double pw = W - left - right, ph = H - top - bottom;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  auto ty = [&](double v) { return p.log_y ? std::log10(v) : v; };
  for (const auto& s : p.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i]) || (p.log_y && !(s.y[i] > 0))) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, ty(s.y[i]));
      ymax = std::max(ymax, ty(s.y[i]));
    }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto sx = [&](double v) { return left + (v - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double v) { return top + ph - (ty(v) - ymin) / (ymax - ymin) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
     << detail::xml_escape(p.title) << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = xmin + (xmax - xmin) * t / 4.0;
    const double yv = ymin + (ymax - ymin) * t / 4.0;
    os << "<text x=\"" << detail::fmt(sx(xv)) << "\" y=\"" << top + ph + 16
       << "\" text-anchor=\"middle\" font-size=\"10\">" << format_number(xv) << "</text>\n";
    const double ypix = top + ph - (yv - ymin) / (ymax - ymin) * ph;
    os << "<text x=\"" << left - 4 << "\" y=\"" << detail::fmt(ypix + 3)
       << "\" text-anchor=\"end\" font-size=\"10\">" << format_number(p.log_y ? std::pow(10.0, yv) : yv)
       << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << detail::xml_escape(p.x_label) << "</text>\n";
  os << "<text x=\"14\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
     << top + ph / 2 << ")\">" << detail::xml_escape(p.y_label) << "</text>\n";
  for (std::size_t k = 0; k < p.series.size(); ++k) {
    const auto& s = p.series[k];
    const char* color = detail::kPalette[k % std::size(detail::kPalette)];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i]) || (p.log_y && !(s.y[i] > 0))) continue;
      if (!pts.empty()) pts += ' ';
      pts += detail::fmt(sx(s.x[i])) + "," + detail::fmt(sy(s.y[i]));
    }
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"" << pts << "\"/>\n";
    const double ly = top + 12 + 16 * static_cast<double>(k);
    os << "<line x1=\"" << left + pw + 8 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 24 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 28 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">"
       << detail::xml_escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string render_svg(const Heatmap& m) {
  const std::size_t rows = m.row_labels.size(), cols = m.col_labels.size();
  if (m.values.size() != rows * cols) throw Error("heatmap: value count does not match labels");
  const double cell = 56, left = 90, top = 60;
  const double W = left + cell * cols + 20, H = top + cell * rows + 20;
  auto tv = [&](double v) { return m.log_scale ? std::log10(std::max(v, 1e-300)) : v; };
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : m.values)
    if (std::isfinite(v)) lo = std::min(lo, tv(v)), hi = std::max(hi, tv(v));
  if (!(hi > lo)) hi = lo + 1;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
     << detail::xml_escape(m.title) << "</text>\n";
  for (std::size_t c = 0; c < cols; ++c) {
    os << "<text x=\"" << left + cell * (c + 0.5) << "\" y=\"" << top - 8
       << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::xml_escape(m.col_labels[c]) << "</text>\n";
  }
  for (std::size_t r = 0; r < rows; ++r) {
    os << "<text x=\"" << left - 6 << "\" y=\"" << top + cell * (r + 0.5) + 4
       << "\" text-anchor=\"end\" font-size=\"11\">" << detail::xml_escape(m.row_labels[r]) << "</text>\n";
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = m.values[r * cols + c];
      const double t = std::isfinite(v) ? (tv(v) - lo) / (hi - lo) : 0.0;
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - t)));
      char color[16];
      std::snprintf(color, sizeof color, "#%02x%02xff", shade, shade);
      os << "<rect x=\"" << left + cell * c << "\" y=\"" << top + cell * r << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"" << color << "\" stroke=\"white\"/>\n";
      char label[32];
      std::snprintf(label, sizeof label, "%.2g", v);
      os << "<text x=\"" << left + cell * (c + 0.5) << "\" y=\"" << top + cell * (r + 0.5) + 4
         << "\" text-anchor=\"middle\" font-size=\"10\" fill=\"" << (t > 0.6 ? "white" : "black") << "\">"
         << label << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

struct Report {
  std::vector<MetricsTable> tables;
  std::vector<LinePlot> line_plots;
  std::vector<Heatmap> heatmaps;
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("write failed: " + path.string());
}

/// Writes <experiment>.csv and <experiment>.json per table, summary.json and
/// every plot into out_dir. Returns the written paths in order.
inline std::vector<std::filesystem::path> emit_report(const Report& r, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& t : r.tables) {
    const std::string stem = t.experiment().empty() ? "metrics" : t.experiment();
    written.push_back(out_dir / (stem + ".csv"));
    write_text(written.back(), to_csv(t));
    written.push_back(out_dir / (stem + ".json"));
    write_text(written.back(), to_json(t).dump(2) + "\n");
  }
  if (!r.summary.empty()) {
    written.push_back(out_dir / "summary.json");
    write_text(written.back(), r.summary.dump(2) + "\n");
  }
  for (const auto& p : r.line_plots) {
    written.push_back(out_dir / p.file);
    write_text(written.back(), render_svg(p));
  }
  for (const auto& h : r.heatmaps) {
    written.push_back(out_dir / h.file);
    write_text(written.back(), render_svg(h));
  }
  return written;
}

}  // namespace lodestar::report
