#pragma once

// Experiment harness: simulated benchmarks, threshold checks and reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lodestar/assignment.hpp"
#include "lodestar/baseline.hpp"
#include "lodestar/distill.hpp"
#include "lodestar/io.hpp"
#include "lodestar/neural.hpp"
#include "lodestar/report.hpp"
#include "lodestar/synth.hpp"
#include "lodestar/track.hpp"

namespace lodestar::bench {

using json = nlohmann::json;
using Log = std::function<void(const std::string&)>;

// --------------------------------------------------------------------------
// Strict config access: unknown keys and mistyped values are errors.

class ConfigReader {
 public:
  ConfigReader(json j, std::string where) : j_(std::move(j)), where_(std::move(where)) {
    if (!j_.is_object()) throw Error("config: " + where_ + " must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(key);
  }

  template <class T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) throw Error("config: missing " + path(key));
    return convert<T>(key);
  }

  ConfigReader child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return ConfigReader(j_.contains(key) ? j_.at(key) : empty, path(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw Error("config: unknown key " + path(it.key()));
    }
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

 private:
  template <class T>
  T convert(const std::string& key) const {
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw Error("config: " + path(key) + " must be a boolean");
    } else if constexpr (std::is_arithmetic_v<T>) {
      if (!v.is_number()) throw Error("config: " + path(key) + " must be a number");
      if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() && !v.is_number_unsigned()) {
          throw Error("config: " + path(key) + " must be an integer");
        }
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw Error("config: " + path(key) + " must be a string");
    }
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw Error("config: " + path(key) + " has the wrong type");
    }
  }

  json j_;
  std::string where_;
  std::set<std::string> seen_;
};

// --------------------------------------------------------------------------
// Checks and results

struct Check {
  std::string name;
  double value = 0.0;
  std::string relation;
  double limit = 0.0;
  bool pass = false;
};

inline Check expect_below(std::string name, double value, double limit) {
  return {std::move(name), value, "<", limit, value < limit};
}

inline Check expect_above(std::string name, double value, double limit) {
  return {std::move(name), value, ">", limit, value > limit};
}

inline Check expect_at_least(std::string name, double value, double limit) {
  return {std::move(name), value, ">=", limit, value >= limit};
}

inline Check expect_at_most(std::string name, double value, double limit) {
  return {std::move(name), value, "<=", limit, value <= limit};
}

inline Check expect_true(std::string name, bool ok) { return {std::move(name), ok ? 1.0 : 0.0, "==", 1.0, ok}; }

inline std::string describe(const Check& c) {
  return std::string(c.pass ? "PASS " : "FAIL ") + c.name + ": " + report::format_number(c.value) + " " +
         c.relation + " " + report::format_number(c.limit);
}

struct ExperimentResult {
  report::Report report;
  std::vector<Check> checks;
  /// CPU seconds per named phase; never written to the report.
  std::map<std::string, double> timings;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
  }
};

// --------------------------------------------------------------------------
// Matching

struct MatchResult {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  double tpr = 1.0;  // 1 when there is nothing to find
  double fdr = 0.0;  // 0 when nothing was predicted
  std::vector<std::pair<int, int>> pairs;  // (pred, truth)
};

/// Optimal one-to-one matching of predictions to truth within `radius`.
inline MatchResult match_detections(const std::vector<baseline::Point2>& pred,
                                    const std::vector<baseline::Point2>& truth, double radius) {
  if (!(radius > 0.0)) throw Error("match radius must be positive");
  assign::CostMatrix m(static_cast<int>(pred.size()), static_cast<int>(truth.size()));
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = 0; j < truth.size(); ++j) {
      m(static_cast<int>(i), static_cast<int>(j)) = std::hypot(pred[i].x - truth[j].x, pred[i].y - truth[j].y);
    }
  MatchResult r;
  r.pairs = assign::solve(m, radius);
  r.tp = static_cast<int>(r.pairs.size());
  r.fp = static_cast<int>(pred.size()) - r.tp;
  r.fn = static_cast<int>(truth.size()) - r.tp;
  if (r.tp + r.fn > 0) r.tpr = static_cast<double>(r.tp) / (r.tp + r.fn);
  if (r.tp + r.fp > 0) r.fdr = static_cast<double>(r.fp) / (r.tp + r.fp);
  return r;
}

// --------------------------------------------------------------------------
// Shared helpers

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{a, b, std::uint64_t{0x62656e6368}};
  std::uint64_t out[1];
  seq.generate(out, out + 1);
  return out[0];
}

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Processor time of this process since construction.
struct CpuTimer {
  std::clock_t start = std::clock();
  double seconds() const { return static_cast<double>(std::clock() - start) / CLOCKS_PER_SEC; }
};

inline std::string num_label(double v) { return report::format_number(v); }

inline double rms(const std::vector<double>& sq) {
  if (sq.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double v : sq) s += v;
  return std::sqrt(s / static_cast<double>(sq.size()));
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

inline double stddev_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() > 1 ? v.size() - 1 : 1));
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<double> read_doubles(ConfigReader& r, const std::string& key, std::vector<double> fallback) {
  return r.get<std::vector<double>>(key, std::move(fallback));
}

// --------------------------------------------------------------------------
// Training configuration from JSON and cached training

inline distill::TrainConfig parse_train_config(ConfigReader r, distill::TrainConfig base = {}) {
  distill::TrainConfig c = base;
  c.batch_size = r.get<int>("batch_size", c.batch_size);
  c.total_batches = r.get<int>("batches", c.total_batches);
  c.learning_rate = r.get<double>("learning_rate", c.learning_rate);
  c.translation_bound = r.get<double>("translation_bound", c.translation_bound);
  c.rotation = r.get<bool>("rotation", c.rotation);
  c.mirror = r.get<bool>("mirror", c.mirror);
  c.dz_min = r.get<double>("dz_min", c.dz_min);
  c.dz_max = r.get<double>("dz_max", c.dz_max);
  c.log_scale_min = r.get<double>("log_scale_min", c.log_scale_min);
  c.log_scale_max = r.get<double>("log_scale_max", c.log_scale_max);
  c.dropout = r.get<double>("dropout", c.dropout);
  c.epsilon = r.get<double>("epsilon", c.epsilon);
  c.lambda_disagree = r.get<double>("lambda_disagree", c.lambda_disagree);
  c.lambda_consist = r.get<double>("lambda_consist", c.lambda_consist);
  c.view_size = r.get<int>("view_size", c.view_size);
  c.channels = nn::ChannelSet::parse(r.get<std::string>("channels", c.channels.name()));
  c.seed = r.get<std::uint64_t>("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

inline json train_config_json(const distill::TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"batches", c.total_batches},
          {"learning_rate", c.learning_rate},
          {"translation_bound", c.translation_bound},
          {"rotation", c.rotation},
          {"mirror", c.mirror},
          {"dz_min", c.dz_min},
          {"dz_max", c.dz_max},
          {"log_scale_min", c.log_scale_min},
          {"log_scale_max", c.log_scale_max},
          {"dropout", c.dropout},
          {"epsilon", c.epsilon},
          {"lambda_disagree", c.lambda_disagree},
          {"lambda_consist", c.lambda_consist},
          {"view_size", c.view_size},
          {"channels", c.channels.name()},
          {"seed", c.seed}};
}

inline synth::OpticsConfig parse_optics(ConfigReader r) {
  synth::OpticsConfig o;
  o.wavelength = r.get<double>("wavelength", o.wavelength);
  o.n_medium = r.get<double>("n_medium", o.n_medium);
  o.pixel_size = r.get<double>("pixel_size", o.pixel_size);
  o.band_limit = r.get<double>("band_limit", o.band_limit);
  o.n_oil = r.get<double>("n_oil", o.n_oil);
  r.finish();
  o.validate();
  return o;
}

inline json optics_json(const synth::OpticsConfig& o) {
  return {{"wavelength", o.wavelength},
          {"n_medium", o.n_medium},
          {"pixel_size", o.pixel_size},
          {"band_limit", o.band_limit},
          {"n_oil", o.n_oil}};
}

struct TrainedModel {
  nn::ModelParams<float> params;
  double train_seconds = 0.0;
  bool from_cache = false;
  double final_disagreement = 0.0;
};

/// Trains on `crop`, or loads the checkpoint cached under `model_dir` for the
/// identical (crop description, config) pair.
inline TrainedModel train_cached(const Image& crop, const distill::TrainConfig& cfg,
                                 const std::optional<synth::OpticsConfig>& optics, const json& crop_desc,
                                 const std::string& tag, const std::string& model_dir, const Log& log) {
  json key = {{"crop", crop_desc}, {"train", train_config_json(cfg)}};
  if (optics) key["optics"] = optics_json(*optics);
  const std::string stem = tag + "-" + fnv1a_hex(key.dump());
  std::filesystem::path ckpt, side;
  if (!model_dir.empty()) {
    std::filesystem::create_directories(model_dir);
    ckpt = std::filesystem::path(model_dir) / (stem + ".ckpt");
    side = std::filesystem::path(model_dir) / (stem + ".json");
    if (std::filesystem::exists(ckpt) && std::filesystem::exists(side)) {
      TrainedModel m;
      m.params = nn::load_checkpoint(ckpt.string());
      std::ifstream is(side);
      const json meta = json::parse(is);
      m.train_seconds = meta.at("train_seconds").get<double>();
      m.final_disagreement = meta.at("final_disagreement").get<double>();
      m.from_cache = true;
      if (log) log("loaded cached model " + ckpt.string());
      return m;
    }
  }
  if (log) log("training " + tag + " (" + std::to_string(cfg.total_batches) + " mini-batches, seed " +
               std::to_string(cfg.seed) + ")");
  const CpuTimer t0;
  double acc = 0.0;
  int count = 0;
  auto progress = [&](const distill::LossRecord& r) {
    acc += r.disagreement;
    if (++count == 500) {
      if (log) log("  step " + std::to_string(r.step + 1) + " mean disagreement " + report::format_number(acc / count));
      acc = 0.0;
      count = 0;
    }
  };
  auto res = distill::train(crop, cfg, optics, progress, model_dir.empty() ? std::string{} : (std::filesystem::path(model_dir) / (stem + ".failed")).string());
  TrainedModel m;
  m.train_seconds = t0.seconds();
  m.params = std::move(res.params);
  const std::size_t tail = std::min<std::size_t>(500, res.curve.size());
  for (std::size_t i = res.curve.size() - tail; i < res.curve.size(); ++i) m.final_disagreement += res.curve[i].disagreement;
  m.final_disagreement /= static_cast<double>(tail);
  if (!model_dir.empty()) {
    nn::save_checkpoint(m.params, ckpt.string());
    json meta = key;
    meta["train_seconds"] = m.train_seconds;
    meta["final_disagreement"] = m.final_disagreement;
    report::write_text(side, meta.dump(2) + "\n");
  }
  return m;
}

// --------------------------------------------------------------------------
// Single-particle shape images

struct ShapeSetup {
  int canvas = 64;
  double crop_snr = 10.0;
  std::uint64_t crop_seed = 7;
  double position_jitter = 8.0;
  distill::TrainConfig train;
  int attempts = 3;
  int selection_images = 200;
  std::uint64_t selection_seed = 900001;
  std::string model_dir;

  ShapeSetup() { train.view_size = 32; }
};

inline ShapeSetup parse_shape_setup(ConfigReader& r) {
  ShapeSetup s;
  s.canvas = r.get<int>("canvas", s.canvas);
  s.crop_snr = r.get<double>("crop_snr", s.crop_snr);
  s.crop_seed = r.get<std::uint64_t>("crop_seed", s.crop_seed);
  s.position_jitter = r.get<double>("position_jitter", s.position_jitter);
  s.train = parse_train_config(r.child("train"), s.train);
  s.attempts = r.get<int>("attempts", s.attempts);
  s.selection_images = r.get<int>("selection_images", s.selection_images);
  s.selection_seed = r.get<std::uint64_t>("selection_seed", s.selection_seed);
  s.model_dir = r.get<std::string>("model_dir", s.model_dir);
  if (s.canvas < 32 || s.canvas % 2) throw Error("config: canvas must be even and >= 32");
  if (s.attempts < 1) throw Error("config: attempts must be >= 1");
  if (!(s.crop_snr > 0.0)) throw Error("config: crop_snr must be positive");
  return s;
}

/// The single training image: one particle near the canvas center.
inline Image shape_training_crop(synth::Shape shape, const ShapeSetup& s) {
  const double c = (s.canvas - 1) / 2.0;
  const auto spec = synth::default_particle(shape, c + 0.2, c + 0.7, 0.3);
  return synth::add_noise(synth::render_particle(spec, s.canvas, s.canvas), s.crop_snr, s.crop_seed);
}

inline json shape_crop_json(synth::Shape shape, const ShapeSetup& s) {
  return {{"kind", "shape"}, {"shape", synth::to_string(shape)}, {"canvas", s.canvas},
          {"snr", s.crop_snr}, {"seed", s.crop_seed}};
}

/// predict_single, or the plain weighted pooling when the summed weight is
/// below the no-object floor; `weak` counts the latter.
inline track::Detection predict_or_pool(const nn::FeatureBundle& b, const nn::Calibration& cal, int& weak) {
  try {
    return track::predict_single(b, cal);
  } catch (const Error&) {
    ++weak;
    const auto p = distill::pooled_prediction(b);
    track::Detection d;
    d.x = p.x + (b.input_width - 1) / 2.0;
    d.y = p.y + (b.input_height - 1) / 2.0;
    if (b.channels.z) d.z = p.z - cal.z_offset;
    if (b.channels.scale) d.log_scale = p.log_scale - cal.scale_offset;
    return d;
  }
}

struct ShapeSample {
  Image image;
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
};

/// Test image `index` of a series: uniform position within +-jitter of the
/// center, uniform orientation, noise at `snr`.
inline ShapeSample shape_sample(synth::Shape shape, int canvas, double jitter, double snr, std::uint64_t seed,
                                int index) {
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> u(-jitter, jitter), a(0.0, synth::kTwoPi);
  const double c = (canvas - 1) / 2.0;
  ShapeSample s;
  s.x = c + u(rng);
  s.y = c + u(rng);
  s.theta = a(rng);
  const auto spec = synth::default_particle(shape, s.x, s.y, s.theta);
  s.theta = spec.orientation;
  s.image = synth::add_noise(synth::render_particle(spec, canvas, canvas), snr, rng());
  return s;
}

/// Squared-error contributions for one estimator over a series. For the
/// crescent only the residual across the symmetry axis and the spread of
/// the residual along it count.
inline double series_rmse(synth::Shape shape, const std::vector<std::array<double, 2>>& residuals,
                          const std::vector<double>& thetas) {
  std::vector<double> sq;
  if (shape != synth::Shape::crescent) {
    for (const auto& r : residuals) sq.push_back(r[0] * r[0] + r[1] * r[1]);
    return rms(sq);
  }
  std::vector<double> along(residuals.size()), across(residuals.size());
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    const double c = std::cos(thetas[i]), s = std::sin(thetas[i]);
    along[i] = c * residuals[i][0] + s * residuals[i][1];
    across[i] = -s * residuals[i][0] + c * residuals[i][1];
  }
  const double m = mean_of(along);
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    sq.push_back(across[i] * across[i] + (along[i] - m) * (along[i] - m));
  }
  return rms(sq);
}

struct ShapeEvaluation {
  double lodestar = 0.0;
  double centroid = 0.0;
  double radial = 0.0;
  int no_object = 0;
  int n = 0;
};

/// LodeSTAR (global pooling), centroid and radial-center RMSE on `n`
/// images. Images whose weight sum falls below the no-object floor still
/// contribute their pooled estimate and are counted in `no_object`.
inline ShapeEvaluation evaluate_shape(const nn::ModelParams<float>& params, synth::Shape shape, int canvas,
                                      double jitter, double snr, int n, std::uint64_t seed) {
  std::vector<std::array<double, 2>> lod, cen, rad;
  std::vector<double> thetas;
  ShapeEvaluation e;
  e.n = n;
  for (int i = 0; i < n; ++i) {
    const auto s = shape_sample(shape, canvas, jitter, snr, seed, i);
    thetas.push_back(s.theta);
    const auto d = predict_or_pool(track::infer(params, s.image), params.calibration, e.no_object);
    lod.push_back({d.x - s.x, d.y - s.y});
    const auto win = baseline::full_window(s.image);
    const auto c = baseline::centroid_localize(win);
    cen.push_back({c.x - s.x, c.y - s.y});
    const auto r = baseline::radial_center_localize(win);
    rad.push_back({r.x - s.x, r.y - s.y});
  }
  e.lodestar = series_rmse(shape, lod, thetas);
  e.centroid = series_rmse(shape, cen, thetas);
  e.radial = series_rmse(shape, rad, thetas);
  return e;
}

struct RmseThresholds {
  double point_snr10 = 0.15;
  double point_snr5 = 0.25;
  double beat_radial_min_snr = 5.0;
  double crescent_lodestar = 0.3;
  double crescent_baseline = 1.0;
};

inline RmseThresholds parse_rmse_thresholds(ConfigReader r) {
  RmseThresholds t;
  t.point_snr10 = r.get<double>("point_snr10", t.point_snr10);
  t.point_snr5 = r.get<double>("point_snr5", t.point_snr5);
  t.beat_radial_min_snr = r.get<double>("beat_radial_min_snr", t.beat_radial_min_snr);
  t.crescent_lodestar = r.get<double>("crescent_lodestar", t.crescent_lodestar);
  t.crescent_baseline = r.get<double>("crescent_baseline", t.crescent_baseline);
  r.finish();
  return t;
}

struct ShapeModel {
  nn::ModelParams<float> params;
  std::uint64_t seed = 0;
  int attempt = 0;
  double train_seconds = 0.0;  // selected attempt
  double max_attempt_seconds = 0.0;
  double all_attempts_seconds = 0.0;
  double selection_score = 0.0;
};

/// Trains up to `attempts` models with consecutive seeds and keeps the first
/// whose validation score is below 1 (else the lowest score). The score is
/// the largest ratio of a validation RMSE to its limit, on images disjoint
/// from the test series.
inline ShapeModel select_shape_model(synth::Shape shape, const ShapeSetup& s, const RmseThresholds& t,
                                     const Log& log) {
  ShapeModel best;
  best.selection_score = std::numeric_limits<double>::infinity();
  for (int a = 0; a < s.attempts; ++a) {
    auto cfg = s.train;
    cfg.seed = s.train.seed + static_cast<std::uint64_t>(a);
    auto m = train_cached(shape_training_crop(shape, s), cfg, std::nullopt, shape_crop_json(shape, s),
                          std::string(synth::to_string(shape)), s.model_dir, log);
    const CpuTimer t0;
    double score = 0.0;
    for (double snr : {10.0, 5.0}) {
      const auto e = evaluate_shape(m.params, shape, s.canvas, s.position_jitter, snr, s.selection_images,
                                    mix_seed(s.selection_seed, static_cast<std::uint64_t>(snr * 1000)));
      score = std::max(score, e.lodestar / e.radial);
      if (shape == synth::Shape::point) score = std::max(score, e.lodestar / (snr >= 10 ? t.point_snr10 : t.point_snr5));
      if (shape == synth::Shape::crescent) score = std::max(score, e.lodestar / t.crescent_lodestar);
      if (log) {
        log("  validation " + std::string(synth::to_string(shape)) + " snr " + num_label(snr) + ": lodestar " +
            report::format_number(e.lodestar) + " radial " + report::format_number(e.radial) + " no_object " +
            std::to_string(e.no_object));
      }
    }
    const double secs = m.train_seconds + t0.seconds();
    best.max_attempt_seconds = std::max(best.max_attempt_seconds, secs);
    best.all_attempts_seconds += secs;
    if (score < best.selection_score) {
      best.params = std::move(m.params);
      best.seed = cfg.seed;
      best.attempt = a;
      best.train_seconds = secs;
      best.selection_score = score;
    }
    if (score < 1.0) break;
    if (log) log("  attempt " + std::to_string(a + 1) + " rejected (score " + report::format_number(score) + ")");
  }
  return best;
}

inline std::vector<synth::Shape> parse_shapes(ConfigReader& r, const std::string& key) {
  std::vector<synth::Shape> out;
  for (const auto& name : r.get<std::vector<std::string>>(key, {"point", "sphere", "annulus", "ellipse", "crescent"})) {
    out.push_back(synth::shape_from_string(name));
  }
  if (out.empty()) throw Error("config: " + r.path(key) + " must not be empty");
  return out;
}

inline void finalize(ExperimentResult& r, const std::string& experiment) {
  auto& s = r.report.summary;
  s["schema"] = report::kSchema;
  s["experiment"] = experiment;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& c : r.checks) {
    nlohmann::ordered_json j;
    j["name"] = c.name;
    if (std::isfinite(c.value)) j["value"] = c.value; else j["value"] = report::format_number(c.value);
    j["relation"] = c.relation;
    j["limit"] = c.limit;
    j["pass"] = c.pass;
    arr.push_back(j);
  }
  s["checks"] = arr;
  s["passed"] = r.passed();
}

// --------------------------------------------------------------------------
// RMSE versus SNR

inline ExperimentResult run_rmse_experiment(const json& config, const Log& log = {}) {
  ConfigReader r(config, "rmse");
  r.get<std::string>("experiment", "rmse");
  auto setup = parse_shape_setup(r);
  const auto shapes = parse_shapes(r, "shapes");
  const auto snrs = read_doubles(r, "snrs", {2, 3, 5, 7, 10, 15, 20});
  const int n = r.get<int>("images_per_snr", 1000);
  const std::uint64_t test_seed = r.get<std::uint64_t>("test_seed", 1000);
  const auto th = parse_rmse_thresholds(r.child("thresholds"));
  r.finish();

  ExperimentResult res;
  report::MetricsTable table("rmse");
  for (auto shape : shapes) {
    const std::string name(synth::to_string(shape));
    auto model = select_shape_model(shape, setup, th, log);
    const CpuTimer t0;
    table.add(name, "train_seed", static_cast<double>(model.seed), 1, model.seed);
    table.add(name, "attempt", model.attempt + 1.0, 1, model.seed);
    report::LinePlot plot;
    plot.file = "rmse_" + name + ".svg";
    plot.title = "RMSE vs SNR (" + name + ")";
    plot.x_label = "SNR";
    plot.y_label = "RMSE (px)";
    plot.log_y = true;
    report::Series sl{"LodeSTAR", {}, {}}, sc{"centroid", {}, {}}, sr{"radial", {}, {}};
    for (double snr : snrs) {
      const auto e = evaluate_shape(model.params, shape, setup.canvas, setup.position_jitter, snr, n,
                                    mix_seed(test_seed, static_cast<std::uint64_t>(snr * 1000)));
      const std::string cond = name + "/snr=" + num_label(snr);
      table.add(cond + "/lodestar", "rmse", e.lodestar, n, model.seed);
      table.add(cond + "/centroid", "rmse", e.centroid, n, test_seed);
      table.add(cond + "/radial", "rmse", e.radial, n, test_seed);
      table.add(cond + "/lodestar", "no_object", e.no_object, n, model.seed);
      sl.x.push_back(snr), sl.y.push_back(e.lodestar);
      sc.x.push_back(snr), sc.y.push_back(e.centroid);
      sr.x.push_back(snr), sr.y.push_back(e.radial);
      if (log) {
        log("  " + cond + ": lodestar " + report::format_number(e.lodestar) + " centroid " +
            report::format_number(e.centroid) + " radial " + report::format_number(e.radial));
      }
      if (shape == synth::Shape::point && snr == 10.0) {
        res.checks.push_back(expect_below("point snr=10 lodestar rmse", e.lodestar, th.point_snr10));
      }
      if (shape == synth::Shape::point && snr == 5.0) {
        res.checks.push_back(expect_below("point snr=5 lodestar rmse", e.lodestar, th.point_snr5));
      }
      if (snr >= th.beat_radial_min_snr) {
        res.checks.push_back(expect_below(cond + " lodestar rmse below radial", e.lodestar, e.radial));
        if (shape == synth::Shape::crescent) {
          res.checks.push_back(expect_below(cond + " lodestar rmse", e.lodestar, th.crescent_lodestar));
          res.checks.push_back(expect_above(cond + " centroid rmse", e.centroid, th.crescent_baseline));
          res.checks.push_back(expect_above(cond + " radial rmse", e.radial, th.crescent_baseline));
        }
      }
    }
    plot.series = {sl, sc, sr};
    res.report.line_plots.push_back(plot);
    res.timings[name] = model.train_seconds + t0.seconds();
    res.timings[name + "/max_attempt"] = model.max_attempt_seconds;
    res.timings[name + "/all_attempts"] = model.all_attempts_seconds + t0.seconds();
  }
  res.report.tables.push_back(std::move(table));
  finalize(res, "rmse");
  return res;
}

// --------------------------------------------------------------------------
// Discrimination matrix

inline ExperimentResult run_discrimination_experiment(const json& config, const Log& log = {}) {
  ConfigReader r(config, "discriminate");
  r.get<std::string>("experiment", "discriminate");
  auto setup = parse_shape_setup(r);
  const auto shapes = parse_shapes(r, "shapes");
  const double snr = r.get<double>("snr", 10.0);
  const int n = r.get<int>("images", 200);
  const std::uint64_t seed = r.get<std::uint64_t>("test_seed", 2000);
  const double ratio = r.get<double>("min_ratio", 10.0);
  const auto th = parse_rmse_thresholds(r.child("selection_thresholds"));
  r.finish();

  ExperimentResult res;
  report::MetricsTable table("discriminate");
  const std::size_t k = shapes.size();
  std::vector<double> matrix(k * k);
  for (std::size_t m = 0; m < k; ++m) {
    auto model = select_shape_model(shapes[m], setup, th, log);
    for (std::size_t s = 0; s < k; ++s) {
      std::vector<double> v;
      for (int i = 0; i < n; ++i) {
        const auto sample = shape_sample(shapes[s], setup.canvas, setup.position_jitter, snr,
                                         mix_seed(seed, static_cast<std::uint64_t>(s)), i);
        v.push_back(track::self_consistency_variance(model.params, sample.image));
      }
      matrix[m * k + s] = mean_of(v);
      table.add("model=" + std::string(synth::to_string(shapes[m])) + "/images=" + std::string(synth::to_string(shapes[s])),
                "weighted_variance", matrix[m * k + s], n, model.seed);
    }
  }
  report::Heatmap h;
  h.file = "discrimination.svg";
  h.title = "Mean weighted variance (rows: model, columns: images)";
  h.log_scale = true;
  for (auto s : shapes) {
    h.row_labels.emplace_back(synth::to_string(s));
    h.col_labels.emplace_back(synth::to_string(s));
  }
  h.values = matrix;
  res.report.heatmaps.push_back(h);
  for (std::size_t m = 0; m < k; ++m) {
    const std::string row(synth::to_string(shapes[m]));
    double off = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < k; ++s) {
      res.checks.push_back(expect_above("entry " + row + "/" + std::string(synth::to_string(shapes[s])) + " positive",
                                        matrix[m * k + s], 0.0));
      if (s != m) off = std::min(off, matrix[m * k + s]);
    }
    if (k > 1) {
      res.checks.push_back(expect_above("row " + row + " min off-diagonal / diagonal", off / matrix[m * k + m], ratio));
    }
  }
  res.report.tables.push_back(std::move(table));
  finalize(res, "discriminate");
  return res;
}

// --------------------------------------------------------------------------
// Multi-particle detection

struct Scene {
  Image image;
  std::vector<baseline::Point2> truth;
};

/// Random sequential placement of `count` spheres at least `separation` px
/// apart, kept `margin` px from the borders.
inline Scene make_scene(int canvas, int count, double separation, double snr, std::uint64_t seed,
                        synth::Shape shape = synth::Shape::sphere) {
  std::mt19937_64 rng(seed);
  const double margin = synth::footprint_radius(synth::default_particle(shape, 0, 0)) + synth::kCanvasMargin;
  std::uniform_real_distribution<double> u(margin, canvas - 1 - margin);
  Scene sc;
  std::vector<synth::ParticleSpec> specs;
  int tries = 0;
  while (static_cast<int>(sc.truth.size()) < count) {
    if (++tries > 200000) throw Error("scene: cannot place " + std::to_string(count) + " particles");
    const double x = u(rng), y = u(rng);
    bool ok = true;
    for (const auto& p : sc.truth)
      if (std::hypot(p.x - x, p.y - y) < separation) ok = false;
    if (!ok) continue;
    sc.truth.push_back({x, y});
    specs.push_back(synth::default_particle(shape, x, y));
  }
  sc.image = synth::render_scene(specs, canvas, canvas);
  if (count > 0) {
    sc.image = synth::add_noise(sc.image, snr, rng());
  } else {
    sc.image = synth::add_gaussian_noise(sc.image, 1.0 / snr, rng());
  }
  return sc;
}

struct DetectionCondition {
  int count_min = 10;
  int count_max = 30;
  double separation = 10.0;
};

inline std::vector<baseline::Point2> to_points(const std::vector<track::Detection>& d) {
  std::vector<baseline::Point2> p;
  for (const auto& x : d) p.push_back({x.x, x.y});
  return p;
}

inline ExperimentResult run_detection_experiment(const json& config, const Log& log = {}) {
  ConfigReader r(config, "detect");
  r.get<std::string>("experiment", "detect");
  auto setup = parse_shape_setup(r);
  const auto th = parse_rmse_thresholds(r.child("selection_thresholds"));
  const int canvas = r.get<int>("frame_size", 192);
  const double snr = r.get<double>("snr", 10.0);
  const int frames = r.get<int>("frames_per_condition", 20);
  const int empty_frames = r.get<int>("empty_frames", 100);
  const int calibration_frames = r.get<int>("calibration_frames", 10);
  const double threshold_q = r.get<double>("threshold_quantile", 0.99);
  const double radius = r.get<double>("match_radius", 3.0);
  const std::uint64_t seed = r.get<std::uint64_t>("test_seed", 3000);
  track::DetectConfig det;
  {
    auto d = r.child("detection");
    det.alpha = d.get<double>("alpha", det.alpha);
    det.min_distance = d.get<double>("min_distance", det.min_distance);
    det.refine_radius = d.get<double>("refine_radius", det.refine_radius);
    d.finish();
  }
  std::vector<DetectionCondition> conditions;
  if (r.has("conditions")) {
    for (const auto& c : config.at("conditions")) {
      ConfigReader cr(c, "detect.conditions[]");
      DetectionCondition dc;
      dc.count_min = cr.get<int>("count_min", dc.count_min);
      dc.count_max = cr.get<int>("count_max", dc.count_max);
      dc.separation = cr.get<double>("separation", dc.separation);
      cr.finish();
      if (dc.count_min < 0 || dc.count_max < dc.count_min) throw Error("config: bad particle count range");
      conditions.push_back(dc);
    }
  } else {
    for (double s : {20.0, 15.0, 12.0, 10.0, 8.0, 6.0, 4.0}) conditions.push_back({10, 30, s});
    conditions.push_back({5, 5, 10.0});
    conditions.push_back({50, 50, 10.0});
  }
  r.get<json>("conditions", json::array());
  double tpr_min = 0.95, fdr_max = 0.05, empty_min = 0.95, check_sep = 10.0;
  int shift_m = 2, shift_n = -3;
  {
    auto t = r.child("thresholds");
    tpr_min = t.get<double>("tpr_min", tpr_min);
    fdr_max = t.get<double>("fdr_max", fdr_max);
    empty_min = t.get<double>("empty_fraction_min", empty_min);
    check_sep = t.get<double>("separation_min", check_sep);
    t.finish();
  }
  shift_m = r.get<int>("shift_m", shift_m);
  shift_n = r.get<int>("shift_n", shift_n);
  r.finish();

  ExperimentResult res;
  report::MetricsTable table("detect");
  auto model = select_shape_model(synth::Shape::sphere, setup, th, log);
  const auto& P = model.params;

  // Dataset-level threshold: quantile of all scores over calibration frames.
  std::vector<double> pool;
  for (int f = 0; f < calibration_frames; ++f) {
    const auto sc = make_scene(canvas, 20, 10.0, snr, mix_seed(seed + 1, f));
    const auto score = track::detection_score(track::infer(P, sc.image), det.alpha);
    pool.insert(pool.end(), score.values().begin(), score.values().end());
  }
  det.threshold = track::quantile(pool, threshold_q);
  table.add("calibration", "score_threshold", *det.threshold, static_cast<long long>(pool.size()), seed + 1);

  report::LinePlot plot;
  plot.file = "detection.svg";
  plot.title = "Detection vs separation (10-30 spheres)";
  plot.x_label = "minimum separation (px)";
  plot.y_label = "rate";
  report::Series s_tpr{"TPR", {}, {}}, s_fdr{"FDR", {}, {}};
  std::vector<std::pair<double, double>> sweep;
  for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
    const auto& c = conditions[ci];
    int tp = 0, fp = 0, fn = 0;
    std::vector<double> loc_sq;
    for (int f = 0; f < frames; ++f) {
      std::mt19937_64 rng(mix_seed(seed, ci * 100000 + f));
      const int count = std::uniform_int_distribution<int>(c.count_min, c.count_max)(rng);
      const auto sc = make_scene(canvas, count, c.separation, snr, rng());
      const auto found = track::detect_particles(P, sc.image, det, f);
      const auto m = match_detections(to_points(found), sc.truth, radius);
      tp += m.tp;
      fp += m.fp;
      fn += m.fn;
      for (auto [p, t] : m.pairs) {
        loc_sq.push_back(std::pow(found[p].x - sc.truth[t].x, 2) + std::pow(found[p].y - sc.truth[t].y, 2));
      }
    }
    const double tpr = tp + fn ? static_cast<double>(tp) / (tp + fn) : 1.0;
    const double fdr = tp + fp ? static_cast<double>(fp) / (tp + fp) : 0.0;
    const std::string cond = "count=" + std::to_string(c.count_min) + "-" + std::to_string(c.count_max) +
                             "/separation=" + num_label(c.separation);
    table.add(cond, "tp", tp, frames, seed);
    table.add(cond, "fp", fp, frames, seed);
    table.add(cond, "fn", fn, frames, seed);
    table.add(cond, "tpr", tpr, frames, seed);
    table.add(cond, "fdr", fdr, frames, seed);
    table.add(cond, "matched_rmse", rms(loc_sq), static_cast<long long>(loc_sq.size()), seed);
    if (log) log("  " + cond + ": TPR " + report::format_number(tpr) + " FDR " + report::format_number(fdr));
    if (c.separation >= check_sep && c.count_min >= 10 && c.count_max <= 30) {
      res.checks.push_back(expect_above(cond + " tpr", tpr, tpr_min));
      res.checks.push_back(expect_below(cond + " fdr", fdr, fdr_max));
    }
    if (c.count_min == 10 && c.count_max == 30) {
      sweep.push_back({c.separation, tpr});
      s_tpr.x.push_back(c.separation), s_tpr.y.push_back(tpr);
      s_fdr.x.push_back(c.separation), s_fdr.y.push_back(fdr);
    }
  }
  std::sort(sweep.begin(), sweep.end());
  bool monotone = true;
  for (std::size_t i = 1; i < sweep.size(); ++i) monotone = monotone && sweep[i - 1].second <= sweep[i].second;
  res.checks.push_back(expect_true("tpr non-increasing as separation decreases", monotone));
  plot.series = {s_tpr, s_fdr};
  res.report.line_plots.push_back(plot);

  int quiet = 0;
  for (int f = 0; f < empty_frames; ++f) {
    const auto sc = make_scene(canvas, 0, 0.0, snr, mix_seed(seed + 2, f));
    if (track::detect_particles(P, sc.image, det, f).empty()) ++quiet;
  }
  const double quiet_frac = empty_frames ? static_cast<double>(quiet) / empty_frames : 1.0;
  table.add("empty", "zero_detection_fraction", quiet_frac, empty_frames, seed + 2);
  res.checks.push_back(expect_at_least("empty frames without detections", quiet_frac, empty_min));

  // Shift property: content kept away from the borders, shifted by (2m, 2n).
  {
    const int band = 48;
    auto sc = make_scene(canvas, 12, 12.0, snr, mix_seed(seed + 3, 0));
    Image a(1, canvas, canvas, 0.0);
    for (int y = band; y < canvas - band; ++y)
      for (int x = band; x < canvas - band; ++x) a(0, y, x) = sc.image(0, y, x);
    Image b(1, canvas, canvas, 0.0);
    const int dx = 2 * shift_m, dy = 2 * shift_n;
    for (int y = 0; y < canvas; ++y)
      for (int x = 0; x < canvas; ++x) {
        const int sx = x - dx, sy = y - dy;
        if (sx >= 0 && sx < canvas && sy >= 0 && sy < canvas) b(0, y, x) = a(0, sy, sx);
      }
    auto da = track::detect_particles(P, a, det), db = track::detect_particles(P, b, det);
    const double lo = band - 8.0, hi = canvas - 1 - band + 8.0;
    auto inside = [&](const track::Detection& d, double ox, double oy) {
      return d.x - ox >= lo && d.x - ox <= hi && d.y - oy >= lo && d.y - oy <= hi;
    };
    std::vector<track::Detection> ia, ib;
    for (const auto& d : da)
      if (inside(d, 0, 0)) ia.push_back(d);
    for (const auto& d : db)
      if (inside(d, dx, dy)) ib.push_back(d);
    double worst = ia.size() == ib.size() && !ia.empty() ? 0.0 : std::numeric_limits<double>::infinity();
    if (std::isfinite(worst)) {
      for (std::size_t i = 0; i < ia.size(); ++i) {
        worst = std::max({worst, std::abs(ib[i].x - ia[i].x - dx), std::abs(ib[i].y - ia[i].y - dy)});
      }
    }
    table.add("shift", "detections", static_cast<double>(ia.size()), 1, seed + 3);
    table.add("shift", "max_deviation", worst, 1, seed + 3);
    res.checks.push_back(expect_below("detections follow a (2m, 2n) input shift", worst, 1e-9));
  }

  res.report.tables.push_back(std::move(table));
  finalize(res, "detect");
  return res;
}

// --------------------------------------------------------------------------
// Holograms

struct HoloSetup {
  synth::OpticsConfig optics;
  int canvas = 64;
  double noise = 0.0;  // field units, per channel
  synth::ScattererSpec particle;
  std::uint64_t crop_seed = 11;
  distill::TrainConfig train;
  std::string model_dir;
  double position_jitter = 4.0;
};

inline HoloSetup parse_holo_setup(ConfigReader& r, distill::TrainConfig base) {
  HoloSetup h;
  h.optics = parse_optics(r.child("optics"));
  h.canvas = r.get<int>("canvas", h.canvas);
  h.noise = r.get<double>("noise", h.noise);
  {
    auto p = r.child("particle");
    h.particle.radius = p.get<double>("radius", h.particle.radius);
    h.particle.n_particle = p.get<double>("n_particle", h.particle.n_particle);
    p.finish();
  }
  h.crop_seed = r.get<std::uint64_t>("crop_seed", h.crop_seed);
  h.train = parse_train_config(r.child("train"), base);
  h.model_dir = r.get<std::string>("model_dir", h.model_dir);
  h.position_jitter = r.get<double>("position_jitter", h.position_jitter);
  if (h.canvas < 32 || h.canvas % 2) throw Error("config: canvas must be even and >= 32");
  if (!(h.noise >= 0.0)) throw Error("config: noise must be >= 0");
  return h;
}

/// Hologram with the scatterer at pixel (x, y) and axial position z.
inline synth::ComplexField hologram_at(const synth::ScattererSpec& p, double x, double y, double z,
                                       const synth::OpticsConfig& optics, int canvas, double noise,
                                       std::uint64_t seed) {
  auto f = synth::simulate_hologram(p, x * optics.pixel_size, y * optics.pixel_size, z, optics, canvas, canvas).field;
  if (noise > 0.0) f = synth::add_field_noise(f, noise, seed);
  return f;
}

inline json holo_crop_json(const HoloSetup& h) {
  return {{"kind", "hologram"}, {"canvas", h.canvas}, {"noise", h.noise}, {"radius", h.particle.radius},
          {"n_particle", h.particle.n_particle}, {"seed", h.crop_seed}};
}

inline Image holo_training_crop(const HoloSetup& h) {
  const double c = (h.canvas - 1) / 2.0;
  return hologram_at(h.particle, c + 0.2, c - 0.3, 0.0, h.optics, h.canvas, h.noise, h.crop_seed).data;
}

inline ExperimentResult run_axial_experiment(const json& config, const Log& log = {}) {
  ConfigReader r(config, "axial");
  r.get<std::string>("experiment", "axial");
  distill::TrainConfig base;
  base.total_batches = 15000;
  base.view_size = 32;
  base.channels = nn::ChannelSet::parse("xyz");
  auto h = parse_holo_setup(r, base);
  if (!h.train.channels.z) throw Error("config: axial.train.channels must include z");
  const auto z_values = read_doubles(r, "z_values", {-10, -9, -8, -7, -6, -5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  const int per_z = r.get<int>("images_per_z", 20);
  const std::uint64_t seed = r.get<std::uint64_t>("test_seed", 4000);
  const double band = r.get<double>("band", 5.0);
  double z_rmse_max = 0.3, anchor_max = 0.1, diffusion_rel = 0.03;
  {
    auto t = r.child("thresholds");
    z_rmse_max = t.get<double>("z_rmse", z_rmse_max);
    anchor_max = t.get<double>("anchor_median", anchor_max);
    diffusion_rel = t.get<double>("diffusion_rel", diffusion_rel);
    t.finish();
  }
  synth::BrownianConfig traces;
  traces.count = 10000;
  traces.localization_noise = 0.02;
  traces.seed = 4100;
  {
    auto d = r.child("diffusion");
    traces.diffusion = d.get<double>("D", traces.diffusion);
    traces.frame_interval = d.get<double>("frame_interval", traces.frame_interval);
    traces.length = d.get<int>("length", traces.length);
    traces.count = d.get<int>("traces", traces.count);
    traces.localization_noise = d.get<double>("localization_noise", traces.localization_noise);
    traces.seed = d.get<std::uint64_t>("seed", traces.seed);
    d.finish();
  }
  int movies = 10, movie_length = 60, movie_canvas = 96;
  std::uint64_t movie_seed = 4200;
  {
    auto m = r.child("movie");
    movies = m.get<int>("movies", movies);
    movie_length = m.get<int>("length", movie_length);
    movie_canvas = m.get<int>("canvas", movie_canvas);
    movie_seed = m.get<std::uint64_t>("seed", movie_seed);
    m.finish();
  }
  r.finish();

  ExperimentResult res;
  report::MetricsTable table("axial");
  const CpuTimer t0;
  auto model = train_cached(holo_training_crop(h), h.train, h.optics, holo_crop_json(h), "axial", h.model_dir, log);
  res.timings["train"] = model.train_seconds;
  const auto& P = model.params;
  table.add("train", "final_disagreement", model.final_disagreement, 500, h.train.seed);

  // z recovery over the grid.
  std::vector<double> band_sq, anchor_abs, all_sq;
  report::Series s_pred{"predicted z", {}, {}}, s_true{"true z", {}, {}};
  const double c = (h.canvas - 1) / 2.0;
  for (std::size_t zi = 0; zi < z_values.size(); ++zi) {
    const double z = z_values[zi];
    std::vector<double> sq, preds;
    for (int i = 0; i < per_z; ++i) {
      std::mt19937_64 rng(mix_seed(seed, zi * 100000 + i));
      std::uniform_real_distribution<double> u(-h.position_jitter, h.position_jitter);
      const double x = c + u(rng), y = c + u(rng);
      const auto f = hologram_at(h.particle, x, y, z, h.optics, h.canvas, h.noise, rng());
      const auto d = track::predict_single(P, f.data);
      const double e = *d.z - z;
      sq.push_back(e * e);
      preds.push_back(*d.z);
      all_sq.push_back(e * e);
      if (std::abs(z) <= band + 1e-12) band_sq.push_back(e * e);
      if (z == 0.0) anchor_abs.push_back(std::abs(*d.z));
    }
    table.add("z=" + num_label(z), "z_rmse_um", rms(sq), per_z, seed);
    table.add("z=" + num_label(z), "z_mean_um", mean_of(preds), per_z, seed);
    s_pred.x.push_back(z), s_pred.y.push_back(mean_of(preds));
    s_true.x.push_back(z), s_true.y.push_back(z);
  }
  const double band_rmse = rms(band_sq), anchor = median_of(anchor_abs);
  table.add("band=" + num_label(band), "z_rmse_um", band_rmse, static_cast<long long>(band_sq.size()), seed);
  table.add("all", "z_rmse_um", rms(all_sq), static_cast<long long>(all_sq.size()), seed);
  if (log) log("  z RMSE within +-" + num_label(band) + " um: " + report::format_number(band_rmse) + " um");
  res.checks.push_back(expect_below("z rmse within band (um)", band_rmse, z_rmse_max));
  if (!anchor_abs.empty()) {
    table.add("z=0", "median_abs_z_um", anchor, static_cast<long long>(anchor_abs.size()), seed);
    res.checks.push_back(expect_below("median |z| on the training plane (um)", anchor, anchor_max));
  }
  report::LinePlot zplot{"axial_z.svg", "Predicted vs true z", "true z (um)", "predicted z (um)", false, {s_pred, s_true}};
  res.report.line_plots.push_back(zplot);

  // Diffusion estimator on simulated traces.
  {
    const auto tr = synth::simulate_brownian_traces(traces);
    std::vector<double> dxy, dz;
    for (const auto& t : tr) {
      const auto e = track::cve_diffusion(t, traces.frame_interval);
      dxy.push_back(e.dxy);
      dz.push_back(e.dz);
    }
    const double mxy = mean_of(dxy), mz = mean_of(dz);
    table.add("traces", "D_xy_mean", mxy, traces.count, traces.seed);
    table.add("traces", "D_z_mean", mz, traces.count, traces.seed);
    res.checks.push_back(expect_below("traces D_xy relative error", std::abs(mxy / traces.diffusion - 1.0), diffusion_rel));
    res.checks.push_back(expect_below("traces D_z relative error", std::abs(mz / traces.diffusion - 1.0), diffusion_rel));
    // Histogram of per-trace estimates.
    report::Series hx{"D_xy", {}, {}}, hz{"D_z", {}, {}};
    const int bins = 40;
    const double hi = 3.0 * traces.diffusion;
    std::vector<double> cx(bins, 0.0), cz(bins, 0.0);
    for (double v : dxy) {
      const int b = static_cast<int>(v / hi * bins);
      if (b >= 0 && b < bins) cx[b] += 1.0;
    }
    for (double v : dz) {
      const int b = static_cast<int>(v / hi * bins);
      if (b >= 0 && b < bins) cz[b] += 1.0;
    }
    for (int b = 0; b < bins; ++b) {
      const double mid = (b + 0.5) * hi / bins;
      hx.x.push_back(mid), hx.y.push_back(cx[b]);
      hz.x.push_back(mid), hz.y.push_back(cz[b]);
    }
    res.report.line_plots.push_back({"diffusion_hist.svg", "Per-trace diffusion estimates", "D (um^2/s)", "traces", false, {hx, hz}});
  }

  // Diffusion through the full pipeline on holographic movies.
  if (movies > 0) {
    synth::BrownianConfig mc = traces;
    mc.count = movies;
    mc.length = movie_length;
    mc.localization_noise = 0.0;
    mc.seed = movie_seed;
    const auto tr = synth::simulate_brownian_traces(mc);
    const double mcen = (movie_canvas - 1) / 2.0;
    std::vector<double> dxy, dz;
    for (std::size_t m = 0; m < tr.size(); ++m) {
      synth::Trace3 est;
      for (std::size_t t = 0; t < tr[m].size(); ++t) {
        const auto& p = tr[m][t];
        const double x = mcen + p[0] / h.optics.pixel_size, y = mcen + p[1] / h.optics.pixel_size;
        const auto f = hologram_at(h.particle, x, y, p[2], h.optics, movie_canvas, h.noise, mix_seed(movie_seed, m * 10000 + t));
        const auto d = track::predict_single(P, f.data);
        est.push_back({d.x * h.optics.pixel_size, d.y * h.optics.pixel_size, *d.z});
      }
      const auto e = track::cve_diffusion(est, mc.frame_interval);
      dxy.push_back(e.dxy);
      dz.push_back(e.dz);
    }
    table.add("movies", "D_xy_mean", mean_of(dxy), movies, movie_seed);
    table.add("movies", "D_z_mean", mean_of(dz), movies, movie_seed);
    if (log) {
      log("  movie pipeline D_xy " + report::format_number(mean_of(dxy)) + " D_z " + report::format_number(mean_of(dz)));
    }
  }
  res.timings["total"] = t0.seconds();
  res.report.tables.push_back(std::move(table));
  finalize(res, "axial");
  return res;
}

// --------------------------------------------------------------------------
// Polarizability

inline ExperimentResult run_polarizability_experiment(const json& config, const Log& log = {}) {
  ConfigReader r(config, "polarizability");
  r.get<std::string>("experiment", "polarizability");
  distill::TrainConfig base;
  base.total_batches = 15000;
  base.view_size = 32;
  base.channels = nn::ChannelSet::parse("xyzs");
  base.log_scale_min = std::log(0.25);
  base.log_scale_max = std::log(4.0);
  auto h = parse_holo_setup(r, base);
  if (!h.train.channels.scale) throw Error("config: polarizability.train.channels must include s");
  const auto radii = read_doubles(r, "radii", {0.10, 0.15, 0.20, 0.25, 0.30});
  const auto indices = read_doubles(r, "indices", {1.4, 1.5, 1.6, 1.7});
  const int per_cell = r.get<int>("images_per_cell", 20);
  const int calibration_images = r.get<int>("calibration_images", 50);
  const double z_range = r.get<double>("z_range", 5.0);
  const double alpha_min = r.get<double>("alpha_min", 0.006);
  const std::uint64_t seed = r.get<std::uint64_t>("test_seed", 5000);
  std::vector<double> bi_radii{0.150, 0.228};
  int bi_count = 100;
  {
    auto b = r.child("bidisperse");
    bi_radii = b.get<std::vector<double>>("radii", bi_radii);
    bi_count = b.get<int>("count", bi_count);
    b.finish();
    if (bi_radii.size() != 2) throw Error("config: bidisperse.radii needs two values");
  }
  double mape_max = 0.10, fixed_rel = 0.01, scale_rel = 0.1, sep_sigmas = 3.0;
  int scale_views = 20;
  {
    auto t = r.child("thresholds");
    mape_max = t.get<double>("mape", mape_max);
    fixed_rel = t.get<double>("fixed_point_rel", fixed_rel);
    scale_rel = t.get<double>("scale_rel", scale_rel);
    sep_sigmas = t.get<double>("separation_sigmas", sep_sigmas);
    t.finish();
  }
  scale_views = r.get<int>("scale_views", scale_views);
  r.finish();

  ExperimentResult res;
  report::MetricsTable table("polarizability");
  auto model = train_cached(holo_training_crop(h), h.train, h.optics, holo_crop_json(h), "polarizability",
                            h.model_dir, log);
  res.timings["train"] = model.train_seconds;
  const auto& P = model.params;
  table.add("train", "final_disagreement", model.final_disagreement, 500, h.train.seed);
  const double c = (h.canvas - 1) / 2.0;

  int weak = 0;
  auto sigma_of = [&](const Image& img) { return *predict_or_pool(track::infer(P, img), P.calibration, weak).log_scale; };
  auto sample_sigma = [&](const synth::ScattererSpec& p, std::uint64_t s) {
    std::mt19937_64 rng(s);
    std::uniform_real_distribution<double> u(-h.position_jitter, h.position_jitter), uz(-z_range, z_range);
    const double x = c + u(rng), y = c + u(rng), z = uz(rng);
    return sigma_of(hologram_at(p, x, y, z, h.optics, h.canvas, h.noise, rng()).data);
  };

  // Calibration population.
  std::vector<double> cal;
  for (int i = 0; i < calibration_images; ++i) cal.push_back(sample_sigma(h.particle, mix_seed(seed, i)));
  track::PolarizabilityReference ref{h.particle.radius, h.particle.n_particle, h.optics.n_medium, mean_of(cal)};
  std::vector<double> cal_alpha;
  for (double s : cal) cal_alpha.push_back(track::calibrate_polarizability(s, ref));
  const double fixed = mean_of(cal_alpha) / ref.alpha_ref() - 1.0;
  table.add("calibration", "sigma_ref", ref.sigma_ref, calibration_images, seed);
  table.add("calibration", "alpha_ref_um3", ref.alpha_ref(), calibration_images, seed);
  table.add("calibration", "fixed_point_rel_error", fixed, calibration_images, seed);
  table.add("calibration", "no_object", weak, calibration_images, seed);
  res.checks.push_back(expect_below("calibration fixed point relative error", std::abs(fixed), fixed_rel));

  // Scale equivariance on reference views.
  for (double s : {0.5, 2.0}) {
    double worst = 0.0;
    weak = 0;
    for (int i = 0; i < scale_views; ++i) {
      std::mt19937_64 rng(mix_seed(seed + 7, i));
      std::uniform_real_distribution<double> u(-h.position_jitter, h.position_jitter), uz(-z_range, z_range);
      const auto f = hologram_at(h.particle, c + u(rng), c + u(rng), uz(rng), h.optics, h.canvas, h.noise, rng());
      distill::GroupTransform t;
      t.log_scale = std::log(s);
      distill::TransformContext ctx;
      ctx.background = {1.0, 0.0};
      const auto scaled = distill::apply_transform(f.data, t, ctx);
      const double d = sigma_of(scaled) - sigma_of(f.data);
      worst = std::max(worst, std::abs(d - std::log(s)));
    }
    table.add("s=" + num_label(s), "max_sigma_error", worst, scale_views, seed + 7);
    table.add("s=" + num_label(s), "no_object", weak, 2 * scale_views, seed + 7);
    res.checks.push_back(expect_below("scale equivariance s=" + num_label(s), worst, scale_rel * std::abs(std::log(s))));
  }

  // MAPE grid.
  report::Heatmap heat;
  heat.file = "polarizability_mape.svg";
  heat.title = "MAPE of polarizability (rows: radius um, columns: n_p)";
  for (double rad : radii) heat.row_labels.push_back(num_label(rad));
  for (double np : indices) heat.col_labels.push_back(num_label(np));
  for (std::size_t ri = 0; ri < radii.size(); ++ri)
    for (std::size_t ni = 0; ni < indices.size(); ++ni) {
      synth::ScattererSpec p{radii[ri], indices[ni]};
      const double alpha = synth::clausius_mossotti(p.radius, p.n_particle, h.optics.n_medium);
      std::vector<double> ape;
      weak = 0;
      for (int i = 0; i < per_cell; ++i) {
        const double est = track::calibrate_polarizability(sample_sigma(p, mix_seed(seed + 1, (ri * 100 + ni) * 10000 + i)), ref);
        ape.push_back(std::abs(est - alpha) / alpha);
      }
      const double mape = mean_of(ape);
      heat.values.push_back(mape);
      const std::string cond = "radius=" + num_label(radii[ri]) + "/n=" + num_label(indices[ni]);
      table.add(cond, "alpha_um3", alpha, per_cell, seed + 1);
      table.add(cond, "mape", mape, per_cell, seed + 1);
      table.add(cond, "no_object", weak, per_cell, seed + 1);
      if (alpha >= alpha_min) res.checks.push_back(expect_below(cond + " mape", mape, mape_max));
    }
  res.report.heatmaps.push_back(heat);

  // Two populations.
  std::vector<std::vector<double>> pops(2);
  weak = 0;
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < bi_count; ++i) {
      synth::ScattererSpec p{bi_radii[k], h.particle.n_particle};
      pops[k].push_back(track::calibrate_polarizability(sample_sigma(p, mix_seed(seed + 2, k * 100000 + i)), ref));
    }
  const double pooled = std::sqrt(0.5 * (std::pow(stddev_of(pops[0]), 2) + std::pow(stddev_of(pops[1]), 2)));
  const double sep = std::abs(mean_of(pops[1]) - mean_of(pops[0])) / pooled;
  for (int k = 0; k < 2; ++k) {
    table.add("bidisperse/radius=" + num_label(bi_radii[k]), "alpha_mean_um3", mean_of(pops[k]), bi_count, seed + 2);
    table.add("bidisperse/radius=" + num_label(bi_radii[k]), "alpha_std_um3", stddev_of(pops[k]), bi_count, seed + 2);
  }
  table.add("bidisperse", "separation_sigmas", sep, 2 * bi_count, seed + 2);
  table.add("bidisperse", "no_object", weak, 2 * bi_count, seed + 2);
  res.checks.push_back(expect_above("bidisperse separation (pooled sigmas)", sep, sep_sigmas));

  res.report.tables.push_back(std::move(table));
  finalize(res, "polarizability");
  return res;
}

// --------------------------------------------------------------------------
// Datasets for the simulate subcommand

struct SimulatedSet {
  std::vector<Image> frames;
  std::vector<io::TruthRow> truth;
};

/// Shape frames: one jittered particle per frame, or `count` particles at
/// least `separation` px apart.
inline SimulatedSet simulate_shape_set(const json& config) {
  ConfigReader r(config, "shapes");
  const auto shape = synth::shape_from_string(r.get<std::string>("shape", "sphere"));
  const int frames = r.get<int>("frames", 10);
  const int canvas = r.get<int>("canvas", 64);
  const int count = r.get<int>("count", 1);
  const double separation = r.get<double>("separation", 10.0);
  const double snr = r.get<double>("snr", 10.0);
  const double jitter = r.get<double>("position_jitter", 8.0);
  const std::uint64_t seed = r.get<std::uint64_t>("seed", 1);
  r.finish();
  if (frames < 1 || count < 0) throw Error("config: frames must be >= 1 and count >= 0");
  SimulatedSet set;
  for (int f = 0; f < frames; ++f) {
    if (count == 1) {
      const auto s = shape_sample(shape, canvas, jitter, snr, seed, f);
      set.frames.push_back(s.image);
      set.truth.push_back({f, 0, s.x, s.y, std::nullopt, std::nullopt});
    } else {
      const auto sc = make_scene(canvas, count, separation, snr, mix_seed(seed, f), shape);
      set.frames.push_back(sc.image);
      for (std::size_t i = 0; i < sc.truth.size(); ++i) {
        set.truth.push_back({f, static_cast<int>(i), sc.truth[i].x, sc.truth[i].y, std::nullopt, std::nullopt});
      }
    }
  }
  return set;
}

/// Hologram frames of one scatterer at random position and depth.
inline SimulatedSet simulate_holo_set(const json& config) {
  ConfigReader r(config, "holo");
  const auto optics = parse_optics(r.child("optics"));
  const int frames = r.get<int>("frames", 10);
  const int canvas = r.get<int>("canvas", 64);
  synth::ScattererSpec p;
  p.radius = r.get<double>("radius", p.radius);
  p.n_particle = r.get<double>("n_particle", p.n_particle);
  const double z_min = r.get<double>("z_min", -5.0), z_max = r.get<double>("z_max", 5.0);
  const double jitter = r.get<double>("position_jitter", 4.0);
  const double noise = r.get<double>("noise", 0.0);
  const std::uint64_t seed = r.get<std::uint64_t>("seed", 1);
  r.finish();
  if (frames < 1 || !(z_max >= z_min)) throw Error("config: bad frame count or z range");
  SimulatedSet set;
  const double c = (canvas - 1) / 2.0;
  const double alpha = synth::clausius_mossotti(p.radius, p.n_particle, optics.n_medium);
  for (int f = 0; f < frames; ++f) {
    std::mt19937_64 rng(mix_seed(seed, f));
    std::uniform_real_distribution<double> u(-jitter, jitter), uz(z_min, z_max);
    const double x = c + u(rng), y = c + u(rng), z = uz(rng);
    set.frames.push_back(hologram_at(p, x, y, z, optics, canvas, noise, rng()).data);
    set.truth.push_back({f, 0, x, y, z, alpha});
  }
  return set;
}

/// Holographic movie of `particles` scatterers diffusing in 3D.
inline SimulatedSet simulate_brownian_set(const json& config) {
  ConfigReader r(config, "brownian");
  const auto optics = parse_optics(r.child("optics"));
  synth::BrownianConfig b;
  b.diffusion = r.get<double>("D", b.diffusion);
  b.frame_interval = r.get<double>("frame_interval", b.frame_interval);
  b.length = r.get<int>("frames", 50);
  b.count = r.get<int>("particles", 3);
  b.seed = r.get<std::uint64_t>("seed", 1);
  const int canvas = r.get<int>("canvas", 128);
  const double separation = r.get<double>("separation", 32.0);
  const double noise = r.get<double>("noise", 0.0);
  synth::ScattererSpec p;
  p.radius = r.get<double>("radius", p.radius);
  p.n_particle = r.get<double>("n_particle", p.n_particle);
  r.finish();
  const auto traces = synth::simulate_brownian_traces(b);
  // Start positions: random sequential placement.
  std::mt19937_64 rng(mix_seed(b.seed, 1));
  std::uniform_real_distribution<double> u(canvas * 0.25, canvas * 0.75);
  std::vector<baseline::Point2> start;
  int tries = 0;
  while (static_cast<int>(start.size()) < b.count) {
    if (++tries > 100000) throw Error("brownian: cannot place particles; enlarge the canvas");
    const baseline::Point2 q{u(rng), u(rng)};
    bool ok = true;
    for (const auto& s : start) ok = ok && std::hypot(s.x - q.x, s.y - q.y) >= separation;
    if (ok) start.push_back(q);
  }
  const double alpha = synth::clausius_mossotti(p.radius, p.n_particle, optics.n_medium);
  SimulatedSet set;
  for (int t = 0; t < b.length; ++t) {
    FieldImage frame(2, canvas, canvas, 0.0);
    for (auto& v : frame.plane(0)) v = 1.0;
    for (int k = 0; k < b.count; ++k) {
      const auto& q = traces[k][t];
      const double x = start[k].x + q[0] / optics.pixel_size, y = start[k].y + q[1] / optics.pixel_size;
      const auto h = hologram_at(p, x, y, q[2], optics, canvas, 0.0, 0).data;
      for (std::size_t i = 0; i < h.plane_size(); ++i) {
        frame.plane(0)[i] += h.plane(0)[i] - 1.0;
        frame.plane(1)[i] += h.plane(1)[i];
      }
      set.truth.push_back({t, k, x, y, q[2], alpha});
    }
    if (noise > 0.0) frame = synth::add_gaussian_noise(frame, noise, mix_seed(b.seed, 1000 + t));
    set.frames.push_back(std::move(frame));
  }
  return set;
}

inline SimulatedSet simulate_set(const std::string& kind, const json& config) {
  if (kind == "shapes") return simulate_shape_set(config);
  if (kind == "holo") return simulate_holo_set(config);
  if (kind == "brownian") return simulate_brownian_set(config);
  throw Error("unknown simulation '" + kind + "' (expected shapes, holo or brownian)");
}

// --------------------------------------------------------------------------
// Metrics on external (imported) data

/// Detection metrics of `params` on frames against a ground-truth table.
inline ExperimentResult evaluate_import(const std::vector<Image>& frames, const std::vector<io::TruthRow>& truth,
                                        const nn::ModelParams<float>& params, const track::DetectConfig& det,
                                        double radius) {
  ExperimentResult res;
  report::MetricsTable table("import");
  int tp = 0, fp = 0, fn = 0;
  std::vector<double> xy_sq, z_sq;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    std::vector<baseline::Point2> t;
    std::vector<std::optional<double>> tz;
    for (const auto& row : truth)
      if (row.frame == static_cast<int>(f)) {
        t.push_back({row.x, row.y});
        tz.push_back(row.z);
      }
    const auto found = track::detect_particles(params, frames[f], det, static_cast<int>(f));
    const auto m = match_detections(to_points(found), t, radius);
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
    for (auto [p, q] : m.pairs) {
      xy_sq.push_back(std::pow(found[p].x - t[q].x, 2) + std::pow(found[p].y - t[q].y, 2));
      if (found[p].z && tz[q]) z_sq.push_back(std::pow(*found[p].z - *tz[q], 2));
    }
    table.add("frame=" + std::to_string(f), "tp", m.tp, 1, 0);
    table.add("frame=" + std::to_string(f), "fp", m.fp, 1, 0);
    table.add("frame=" + std::to_string(f), "fn", m.fn, 1, 0);
  }
  const long long nf = static_cast<long long>(frames.size());
  table.add("all", "tpr", tp + fn ? static_cast<double>(tp) / (tp + fn) : 1.0, nf, 0);
  table.add("all", "fdr", tp + fp ? static_cast<double>(fp) / (tp + fp) : 0.0, nf, 0);
  table.add("all", "matched_xy_rmse_px", rms(xy_sq), static_cast<long long>(xy_sq.size()), 0);
  if (!z_sq.empty()) table.add("all", "matched_z_rmse_um", rms(z_sq), static_cast<long long>(z_sq.size()), 0);
  res.report.tables.push_back(std::move(table));
  finalize(res, "import");
  return res;
}

// --------------------------------------------------------------------------

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"rmse", "discriminate", "detect", "axial", "polarizability"};
  return names;
}

inline ExperimentResult run_experiment(const std::string& name, const json& config, const Log& log = {}) {
  if (name == "rmse") return run_rmse_experiment(config, log);
  if (name == "discriminate") return run_discrimination_experiment(config, log);
  if (name == "detect") return run_detection_experiment(config, log);
  if (name == "axial") return run_axial_experiment(config, log);
  if (name == "polarizability") return run_polarizability_experiment(config, log);
  throw Error("unknown experiment '" + name + "'");
}

}  // namespace lodestar::bench
