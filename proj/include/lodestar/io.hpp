#pragma once

// Frame stacks on disk and the CSV schemas shared by the command-line tools.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lodestar/ltsr.hpp"
#include "lodestar/report.hpp"
#include "lodestar/track.hpp"

namespace lodestar::io {

/// Every frame in an LTSR file (single frame or stack) or in all *.ltsr
/// files of a directory, in file-name order.
inline std::vector<Image> load_frames(const std::filesystem::path& path) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".ltsr") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error("no .ltsr files in " + path.string());
  } else if (std::filesystem::is_regular_file(path)) {
    files.push_back(path);
  } else {
    throw Error("frames not found: " + path.string());
  }
  std::vector<Image> frames;
  for (const auto& f : files) {
    const auto a = ltsr::load(f.string());
    for (std::size_t i = 0; i < ltsr::frame_count(a); ++i) frames.push_back(ltsr::to_tensor<double>(a, i));
  }
  return frames;
}

/// Writes frame_00000.ltsr, frame_00001.ltsr, ... into `dir`.
inline void save_frames(const std::vector<Image>& frames, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05zu.ltsr", i);
    ltsr::save((dir / name).string(), ltsr::from_tensor(frames[i]));
  }
}

struct TruthRow {
  int frame = 0;
  int id = 0;
  double x = 0.0;
  double y = 0.0;
  std::optional<double> z;
  std::optional<double> polarizability;
};

inline std::string opt(const std::optional<double>& v) { return v ? report::format_number(*v) : std::string{}; }

inline std::string truth_csv(const std::vector<TruthRow>& rows) {
  std::ostringstream os;
  os << "frame,id,x,y,z,polarizability\n";
  for (const auto& r : rows) {
    os << r.frame << ',' << r.id << ',' << report::format_number(r.x) << ',' << report::format_number(r.y) << ','
       << opt(r.z) << ',' << opt(r.polarizability) << '\n';
  }
  return os.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<TruthRow> read_truth_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw Error("empty truth file " + path.string());
  const auto header = split_csv_line(line);
  auto col = [&](const std::string& name) -> int {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  const int cf = col("frame"), ci = col("id"), cx = col("x"), cy = col("y"), cz = col("z"), cp = col("polarizability");
  if (cf < 0 || cx < 0 || cy < 0) throw Error("truth CSV needs frame, x and y columns");
  std::vector<TruthRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    auto num = [&](int c) -> std::optional<double> {
      if (c < 0 || c >= static_cast<int>(f.size()) || f[c].empty()) return std::nullopt;
      try {
        return std::stod(f[c]);
      } catch (const std::exception&) {
        throw Error("truth CSV line " + std::to_string(lineno) + ": bad number '" + f[c] + "'");
      }
    };
    TruthRow r;
    const auto frame = num(cf), x = num(cx), y = num(cy);
    if (!frame || !x || !y) throw Error("truth CSV line " + std::to_string(lineno) + ": missing frame/x/y");
    r.frame = static_cast<int>(*frame);
    r.id = ci >= 0 && num(ci) ? static_cast<int>(*num(ci)) : 0;
    r.x = *x;
    r.y = *y;
    r.z = num(cz);
    r.polarizability = num(cp);
    rows.push_back(r);
  }
  return rows;
}

inline std::string detections_csv(const std::vector<track::Detection>& dets) {
  std::ostringstream os;
  os << "frame,x_px,y_px,z_um,polarizability_um3,score\n";
  for (const auto& d : dets) {
    os << d.frame << ',' << report::format_number(d.x) << ',' << report::format_number(d.y) << ',' << opt(d.z) << ','
       << opt(d.polarizability) << ',' << report::format_number(d.score) << '\n';
  }
  return os.str();
}

inline std::string tracks_csv(const std::vector<track::Track>& tracks) {
  std::ostringstream os;
  os << "track_id,frame,x,y,z,polarizability\n";
  for (const auto& t : tracks)
    for (const auto& d : t.detections) {
      os << t.id << ',' << d.frame << ',' << report::format_number(d.x) << ',' << report::format_number(d.y) << ','
         << opt(d.z) << ',' << opt(d.polarizability) << '\n';
    }
  return os.str();
}

inline std::string loss_csv(const std::vector<distill::LossRecord>& curve) {
  std::ostringstream os;
  os << "step,disagreement,consistency\n";
  for (const auto& r : curve) {
    os << r.step << ',' << report::format_number(r.disagreement) << ',' << report::format_number(r.consistency) << '\n';
  }
  return os.str();
}

}  // namespace lodestar::io
