#pragma once

// Inference: single-object pooling, multi-object detection from the score
// map, refinement, frame linking, axial correction, polarizability
// calibration and diffusion estimation.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "lodestar/assignment.hpp"
#include "lodestar/distill.hpp"
#include "lodestar/neural.hpp"
#include "lodestar/synth.hpp"

namespace lodestar::track {

struct Detection {
  double x = 0.0;  // px, pixel-center coordinates of the input image
  double y = 0.0;
  std::optional<double> z;               // um
  std::optional<double> log_scale;       // sigma
  std::optional<double> polarizability;  // um^3
  double score = 0.0;
  int frame = 0;
};

struct Track {
  int id = 0;
  std::vector<Detection> detections;
  int gaps = 0;
};

/// Normalizes `image`, runs the network and bundles the raw output.
inline nn::FeatureBundle infer(const nn::ModelParams<float>& params, const Image& image) {
  const auto input = nn::normalize_input<float>(image, nn::default_normalization(params.arch.channels));
  return nn::make_bundle(params, nn::forward(params, input), image.height(), image.width());
}

namespace detail {

inline void fill_extras(Detection& d, const std::vector<double>& pooled, const nn::ChannelSet& ch,
                        const nn::Calibration& cal) {
  if (ch.z) d.z = pooled[ch.z_index()] - cal.z_offset;
  if (ch.scale) d.log_scale = pooled[ch.scale_index()] - cal.scale_offset;
}

}  // namespace detail

/// Weighted global pooling with inference weights.
inline Detection predict_single(const nn::FeatureBundle& b, const nn::Calibration& cal = {}) {
  const auto p = nn::decode_positions(b);
  const auto w = nn::inference_weights(b);
  double sw = 0.0;
  for (double v : w.values()) sw += v;
  if (!(sw >= 1e-6 * static_cast<double>(w.size()))) throw Error("no object");
  auto m = distill::weighted_mean(p, w);
  for (auto& v : m) v /= sw;
  Detection d;
  d.x = m[0] + (b.input_width - 1) / 2.0;
  d.y = m[1] + (b.input_height - 1) / 2.0;
  detail::fill_extras(d, m, b.channels, cal);
  d.score = sw;
  return d;
}

inline Detection predict_single(const nn::ModelParams<float>& params, const Image& image) {
  return predict_single(infer(params, image), params.calibration);
}

/// c = 1 / (v + 1e-9), v the 3x3 population variance of every decoded
/// channel summed over channels; windows are truncated at the borders.
inline Tensor<double> cluster_metric(const nn::FeatureBundle& b) {
  const auto p = nn::decode_positions(b);
  const int h = p.height(), w = p.width();
  Tensor<double> c(1, h, w, 0.0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double v = 0.0;
      for (int k = 0; k < p.channels(); ++k) {
        double s = 0.0, s2 = 0.0;
        int n = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int ii = i + di, jj = j + dj;
            if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
            s += p(k, ii, jj);
            ++n;
          }
        const double mean = s / n;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int ii = i + di, jj = j + dj;
            if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
            const double d = p(k, ii, jj) - mean;
            s2 += d * d;
          }
        v += s2 / n;
      }
      c(0, i, j) = 1.0 / (v + 1e-9);
    }
  return c;
}

/// score = w^alpha * c^(1 - alpha) with inference weights.
inline Tensor<double> detection_score(const nn::FeatureBundle& b, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("alpha must lie in [0, 1]");
  const auto w = nn::inference_weights(b);
  const auto c = cluster_metric(b);
  Tensor<double> s(1, w.height(), w.width());
  for (std::size_t i = 0; i < s.size(); ++i) {
    s.values()[i] = std::pow(w.values()[i], alpha) * std::pow(c.values()[i], 1.0 - alpha);
  }
  return s;
}

/// Linearly interpolated q-quantile.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error("quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw Error("quantile must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return values[lo] + f * (values[hi] - values[lo]);
}

struct Seed {
  int i = 0;  // map row
  int j = 0;  // map column
  double score = 0.0;
};

/// Strict 8-neighborhood maxima above `threshold`, greedily suppressed
/// within `min_distance` map pixels in descending score order.
inline std::vector<Seed> detect_above(const Tensor<double>& score, double threshold,
                                      double min_distance) {
  const int h = score.height(), w = score.width();
  std::vector<Seed> peaks;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double v = score(0, i, j);
      if (!(v > threshold)) continue;
      bool is_max = true;
      for (int di = -1; di <= 1 && is_max; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          if (!di && !dj) continue;
          const int ii = i + di, jj = j + dj;
          if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
          if (score(0, ii, jj) >= v) {
            is_max = false;
            break;
          }
        }
      if (is_max) peaks.push_back({i, j, v});
    }
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const Seed& a, const Seed& b) { return a.score > b.score; });
  std::vector<Seed> kept;
  const double d2 = min_distance * min_distance;
  for (const auto& p : peaks) {
    bool clear = true;
    for (const auto& k : kept) {
      const double di = p.i - k.i, dj = p.j - k.j;
      if (di * di + dj * dj <= d2) {
        clear = false;
        break;
      }
    }
    if (clear) kept.push_back(p);
  }
  return kept;
}

/// Detection with the threshold set at the q-quantile of this map.
inline std::vector<Seed> detect(const Tensor<double>& score, double q = 0.99, double min_distance = 2.5) {
  std::vector<double> v(score.values().begin(), score.values().end());
  return detect_above(score, quantile(std::move(v), q), min_distance);
}

/// Weighted average of the decoded maps over the disc of radius r (map
/// pixels) around the seed, in input-pixel coordinates.
inline Detection refine(const Seed& seed, const nn::FeatureBundle& b, double radius,
                        const nn::Calibration& cal = {}) {
  if (seed.i < 0 || seed.i >= b.height() || seed.j < 0 || seed.j >= b.width()) {
    throw Error("seed outside the feature map");
  }
  const auto& ch = b.channels;
  const int nf = ch.features();
  const auto rho = b.raw.plane(b.rho_channel());
  const int r = static_cast<int>(std::floor(radius));
  std::vector<double> acc(nf, 0.0);
  double sw = 0.0;
  int count = 0;
  for (int di = -r; di <= r; ++di)
    for (int dj = -r; dj <= r; ++dj) {
      if (di * di + dj * dj > radius * radius) continue;
      const int ii = seed.i + di, jj = seed.j + dj;
      if (ii < 0 || ii >= b.height() || jj < 0 || jj >= b.width()) continue;
      const double w = nn::sigmoid(rho[ii * b.width() + jj]);
      acc[0] += (b.raw(0, ii, jj) + nn::kStride * dj) * w;
      acc[1] += (b.raw(1, ii, jj) + nn::kStride * di) * w;
      for (int k = 2; k < nf; ++k) acc[k] += b.raw(k, ii, jj) * w;
      sw += w;
      ++count;
    }
  std::vector<double> m(nf);
  if (count == 1) {
    for (int k = 0; k < nf; ++k) m[k] = b.raw(k, seed.i, seed.j);
  } else {
    if (!(sw > 0.0)) throw Error("refine: zero weight around seed");
    for (int k = 0; k < nf; ++k) m[k] = acc[k] / sw;
  }
  // Seed grid position in absolute input coordinates.
  const double gx = (seed.j + 0.5) * nn::kStride - 0.5;
  const double gy = (seed.i + 0.5) * nn::kStride - 0.5;
  Detection d;
  d.x = gx + m[0];
  d.y = gy + m[1];
  detail::fill_extras(d, m, ch, cal);
  d.score = seed.score;
  return d;
}

struct DetectConfig {
  double alpha = 0.1;
  double quantile = 0.99;
  double min_distance = 5.0;  // input px
  double refine_radius = 3.0; // map px
  /// Absolute score threshold; replaces the per-frame quantile when set.
  std::optional<double> threshold;
};

/// Full multi-object pipeline on one image.
inline std::vector<Detection> detect_particles(const nn::FeatureBundle& b, const DetectConfig& cfg,
                                               const nn::Calibration& cal = {}, int frame = 0) {
  const auto score = detection_score(b, cfg.alpha);
  const double d = cfg.min_distance / nn::kStride;
  const auto seeds = cfg.threshold ? detect_above(score, *cfg.threshold, d) : detect(score, cfg.quantile, d);
  std::vector<Detection> out;
  for (const auto& s : seeds) {
    Detection det = refine(s, b, cfg.refine_radius, cal);
    det.frame = frame;
    out.push_back(det);
  }
  return out;
}

inline std::vector<Detection> detect_particles(const nn::ModelParams<float>& params, const Image& image,
                                               const DetectConfig& cfg, int frame = 0) {
  return detect_particles(infer(params, image), cfg, params.calibration, frame);
}

/// Frame-to-frame linking by minimum-cost assignment within max_dist (xy).
inline std::vector<Track> link_tracks(const std::vector<std::vector<Detection>>& frames, double max_dist) {
  if (!(max_dist > 0.0)) throw Error("linking distance must be positive");
  std::vector<Track> tracks;
  std::vector<int> active;  // indices into tracks, one per previous-frame detection
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& cur = frames[f];
    std::vector<int> next(cur.size(), -1);
    if (!active.empty() && !cur.empty()) {
      assign::CostMatrix m(static_cast<int>(active.size()), static_cast<int>(cur.size()));
      for (std::size_t a = 0; a < active.size(); ++a) {
        const auto& last = tracks[active[a]].detections.back();
        for (std::size_t c = 0; c < cur.size(); ++c) {
          m(static_cast<int>(a), static_cast<int>(c)) = std::hypot(cur[c].x - last.x, cur[c].y - last.y);
        }
      }
      for (auto [a, c] : assign::solve(m, max_dist)) next[c] = active[a];
    }
    active.clear();
    for (std::size_t c = 0; c < cur.size(); ++c) {
      int t = next[c];
      if (t < 0) {
        t = static_cast<int>(tracks.size());
        tracks.push_back(Track{t, {}, 0});
      }
      tracks[t].detections.push_back(cur[c]);
      active.push_back(t);
    }
  }
  return tracks;
}

inline std::vector<Track> filter_tracks(const std::vector<Track>& tracks, std::size_t min_length) {
  std::vector<Track> out;
  for (const auto& t : tracks)
    if (t.detections.size() >= min_length) out.push_back(t);
  return out;
}

/// z = z_raw * n_oil / n_medium.
inline double correct_axial(double z_raw, const synth::OpticsConfig& optics) {
  return z_raw * optics.n_oil / optics.n_medium;
}

struct PolarizabilityReference {
  double radius = 0.228;  // um
  double n_particle = 1.58;
  double n_medium = 1.33;
  double sigma_ref = 0.0;

  double alpha_ref() const { return synth::clausius_mossotti(radius, n_particle, n_medium); }
};

/// alpha = alpha_ref * exp(sigma - sigma_ref).
inline double calibrate_polarizability(double sigma, const PolarizabilityReference& ref) {
  return ref.alpha_ref() * std::exp(sigma - ref.sigma_ref);
}

struct DiffusionEstimate {
  double dx = 0.0;
  double dy = 0.0;
  double dz = 0.0;
  double dxy = 0.0;  // mean of dx and dy
  bool drift_warning = false;
};

namespace detail {

struct AxisStats {
  double d = 0.0;
  bool drift = false;
};

inline AxisStats cve_axis(const std::vector<double>& pos, double dt) {
  const std::size_t n = pos.size();
  std::vector<double> step(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) step[i] = pos[i + 1] - pos[i];
  double msd = 0.0, cov = 0.0;
  for (double s : step) msd += s * s;
  msd /= static_cast<double>(step.size());
  for (std::size_t i = 0; i + 1 < step.size(); ++i) cov += step[i] * step[i + 1];
  cov /= static_cast<double>(step.size() - 1);
  AxisStats a;
  a.d = msd / (2.0 * dt) + cov / dt;
  a.drift = msd > 0.0 && cov / msd > 0.5;
  return a;
}

}  // namespace detail

/// Covariance-based estimator D = <d^2>/(2 dt) + <d_n d_(n+1)>/dt per axis.
inline DiffusionEstimate cve_diffusion(const synth::Trace3& trace, double dt) {
  if (trace.size() < 3) throw Error("trace needs at least 3 points");
  if (!(dt > 0.0)) throw Error("frame interval must be positive");
  std::vector<double> xs, ys, zs;
  for (const auto& p : trace) {
    xs.push_back(p[0]);
    ys.push_back(p[1]);
    zs.push_back(p[2]);
  }
  const auto ax = detail::cve_axis(xs, dt), ay = detail::cve_axis(ys, dt), az = detail::cve_axis(zs, dt);
  DiffusionEstimate e;
  e.dx = ax.d;
  e.dy = ay.d;
  e.dz = az.d;
  e.dxy = 0.5 * (ax.d + ay.d);
  e.drift_warning = ax.drift || ay.drift || az.drift;
  return e;
}

/// Weighted variance of the decoded maps about their weighted mean, with
/// inference weights normalized to sum 1, summed over channels.
inline double self_consistency_variance(const nn::FeatureBundle& b) {
  const auto p = nn::decode_positions(b);
  auto w = nn::inference_weights(b);
  double sw = 0.0;
  for (double v : w.values()) sw += v;
  if (!(sw > 0.0)) throw Error("no object");
  for (auto& v : w.values()) v /= sw;
  const auto mean = distill::weighted_mean(p, w);
  double var = 0.0;
  for (int k = 0; k < p.channels(); ++k) {
    const auto pk = p.plane(k);
    for (std::size_t i = 0; i < pk.size(); ++i) var += w.values()[i] * (pk[i] - mean[k]) * (pk[i] - mean[k]);
  }
  return var;
}

inline double self_consistency_variance(const nn::ModelParams<float>& params, const Image& image) {
  return self_consistency_variance(infer(params, image));
}

}  // namespace lodestar::track
