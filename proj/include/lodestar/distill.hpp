#pragma once

// Geometric self-distillation: transformed views of one image, pooled
// predictions mapped back through the inverse transforms, and the
// disagreement + internal-consistency losses that train the network.

#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <random>
#include <string>
#include <vector>

#include "lodestar/neural.hpp"
#include "lodestar/synth.hpp"

namespace lodestar::distill {

/// One element of the augmentation group. The affine part maps a point p,
/// taken relative to the image center, to R(theta) M p + t, where M negates
/// x when `mirror` is set.
struct GroupTransform {
  double tx = 0.0;
  double ty = 0.0;
  double theta = 0.0;
  bool mirror = false;
  double dz = 0.0;         // um
  double log_scale = 0.0;  // ln s

  static GroupTransform identity() { return {}; }
};

/// A prediction in image-center-relative coordinates plus optional extras.
struct Prediction {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double log_scale = 0.0;
};

/// Forward action of the affine part on a center-relative point.
inline std::array<double, 2> apply_to_point(double x, double y, const GroupTransform& t) {
  if (t.mirror) x = -x;
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  return {c * x - s * y + t.tx, s * x + c * y + t.ty};
}

/// Maps a prediction made on the transformed image back to the original frame.
inline Prediction invert_prediction(const Prediction& p, const GroupTransform& t) {
  const double dx = p.x - t.tx, dy = p.y - t.ty;
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  double x = c * dx + s * dy;
  const double y = -s * dx + c * dy;
  if (t.mirror) x = -x;
  return {x, y, p.z - t.dz, p.log_scale - t.log_scale};
}

/// Jacobian of the inverse affine map (row-major 2x2).
inline std::array<double, 4> inverse_jacobian(const GroupTransform& t) {
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  const double m = t.mirror ? -1.0 : 1.0;
  return {m * c, m * s, -s, c};
}

struct TransformContext {
  /// Per-channel background; signal scaling and propagation act on
  /// (image - background).
  std::vector<double> background;
  /// Optics for axial propagation of two-channel (Re, Im) fields.
  std::optional<synth::OpticsConfig> optics;
};

namespace detail {

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

inline double sample_bilinear(std::span<const double> plane, int h, int w, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const int xa = reflect_index(x0, w), xb = reflect_index(x0 + 1, w);
  const int ya = reflect_index(y0, h), yb = reflect_index(y0 + 1, h);
  const double v00 = plane[ya * w + xa], v01 = plane[ya * w + xb];
  const double v10 = plane[yb * w + xa], v11 = plane[yb * w + xb];
  if (ax == 0.0 && ay == 0.0) return v00;
  return (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11);
}

// Angular-spectrum propagation of (image - background), zero-padded to
// twice the size so the scattered wave does not wrap around.
inline void propagate_signal(Image& img, const std::vector<double>& bg,
                             const synth::OpticsConfig& optics, double dz) {
  if (img.channels() != 2) throw Error("axial propagation needs a two-channel field");
  const int h = img.height(), w = img.width();
  const int ph = 2 * h, pw = 2 * w, oy = h / 2, ox = w / 2;
  synth::ComplexField padded{FieldImage(2, ph, pw, 0.0), optics};
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) padded.data(c, y + oy, x + ox) = img(c, y, x) - bg[c];
  padded = synth::propagate_field(padded, dz);
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img(c, y, x) = padded.data(c, y + oy, x + ox) + bg[c];
}

}  // namespace detail

/// Resamples `image` under `t`: rotation/mirror about the image center then
/// translation (bilinear, reflect padding); then propagation by t.dz; then
/// the background-subtracted signal is multiplied by exp(t.log_scale).
inline Image apply_transform(const Image& image, const GroupTransform& t,
                             const TransformContext& ctx = {}) {
  const int h = image.height(), w = image.width();
  std::vector<double> bg = ctx.background;
  bg.resize(image.channels(), 0.0);
  Image out(image.channels(), h, w);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  const double m = t.mirror ? -1.0 : 1.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double qx = x - cx - t.tx, qy = y - cy - t.ty;
      const double sx = m * (c * qx + s * qy) + cx;
      const double sy = (-s * qx + c * qy) + cy;
      for (int ch = 0; ch < image.channels(); ++ch) {
        out(ch, y, x) = detail::sample_bilinear(image.plane(ch), h, w, sx, sy);
      }
    }
  if (t.dz != 0.0) {
    if (!ctx.optics) throw Error("apply_transform: axial offset needs optics");
    detail::propagate_signal(out, bg, *ctx.optics, t.dz);
  }
  if (t.log_scale != 0.0) {
    const double k = std::exp(t.log_scale);
    for (int ch = 0; ch < out.channels(); ++ch)
      for (auto& v : out.plane(ch)) v = bg[ch] + (v - bg[ch]) * k;
  }
  return out;
}

// --------------------------------------------------------------------------
// Training configuration and transform sampling

struct TrainConfig {
  int batch_size = 8;
  int total_batches = 5000;
  double learning_rate = 0.001;
  /// Per-axis translation bound in px; negative means a quarter of the view.
  double translation_bound = -1.0;
  bool rotation = true;
  bool mirror = true;
  double dz_min = -10.0, dz_max = 10.0;
  double log_scale_min = std::log(0.5), log_scale_max = std::log(2.0);
  double dropout = 0.01;
  double epsilon = 1e-6;
  double lambda_disagree = 1.0;
  double lambda_consist = 1.0;
  /// Side of the square training views cut from the center of each
  /// transformed image; 0 keeps the full image.
  int view_size = 0;
  nn::ChannelSet channels;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size < 2) throw Error("train: batch size must be at least 2");
    if (total_batches < 1) throw Error("train: need at least one mini-batch");
    if (!(learning_rate > 0.0)) throw Error("train: learning rate must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("train: dropout must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw Error("train: epsilon must be positive");
    if (channels.z && !(dz_max > dz_min)) throw Error("train: empty axial range");
    if (channels.scale && !(log_scale_max > log_scale_min)) throw Error("train: empty scale range");
  }
};

class TransformSampler {
 public:
  TransformSampler(const TrainConfig& cfg, double bound, std::uint64_t seed)
      : cfg_(cfg), bound_(bound), rng_(seed) {}

  GroupTransform operator()() {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    GroupTransform t;
    t.tx = bound_ * (2.0 * unit(rng_) - 1.0);
    t.ty = bound_ * (2.0 * unit(rng_) - 1.0);
    if (cfg_.rotation) t.theta = synth::wrap_angle(synth::kTwoPi * unit(rng_));
    if (cfg_.mirror) t.mirror = unit(rng_) < 0.5;
    if (cfg_.channels.z) t.dz = cfg_.dz_min + (cfg_.dz_max - cfg_.dz_min) * unit(rng_);
    if (cfg_.channels.scale) {
      t.log_scale = cfg_.log_scale_min + (cfg_.log_scale_max - cfg_.log_scale_min) * unit(rng_);
    }
    return t;
  }

 private:
  TrainConfig cfg_;
  double bound_;
  std::mt19937_64 rng_;
};

// --------------------------------------------------------------------------
// Weights and losses

/// Inverted-dropout factors (0 or 1/(1-rate)) for one weight map.
inline Tensor<double> dropout_mask(int h, int w, double rate, std::mt19937_64& rng) {
  Tensor<double> m(1, h, w, 1.0);
  if (rate <= 0.0) return m;
  std::bernoulli_distribution drop(rate);
  const double keep = 1.0 / (1.0 - rate);
  for (auto& v : m.values()) v = drop(rng) ? 0.0 : keep;
  return m;
}

/// Training-time weights w = (D[S(rho)] + eps) / (eps M N + sum D[S(rho)]).
inline Tensor<double> training_weights(std::span<const double> rho, const Tensor<double>& mask,
                                       double epsilon) {
  Tensor<double> w(1, mask.height(), mask.width());
  double sum = 0.0;
  for (std::size_t i = 0; i < rho.size(); ++i) {
    w.values()[i] = mask.values()[i] * nn::sigmoid(rho[i]);
    sum += w.values()[i];
  }
  const double z = epsilon * static_cast<double>(rho.size()) + sum;
  for (auto& v : w.values()) v = (v + epsilon) / z;
  return w;
}

inline Tensor<double> training_weights(std::span<const double> rho, int h, int w, double rate,
                                       double epsilon, std::mt19937_64& rng) {
  return training_weights(rho, dropout_mask(h, w, rate, rng), epsilon);
}

/// Weighted mean of every feature channel.
inline std::vector<double> weighted_mean(const Tensor<double>& features, const Tensor<double>& w) {
  std::vector<double> m(features.channels(), 0.0);
  for (int k = 0; k < features.channels(); ++k) {
    const auto p = features.plane(k);
    for (std::size_t i = 0; i < p.size(); ++i) m[k] += p[i] * w.values()[i];
  }
  return m;
}

/// Internal-consistency loss sum_k sum_ij |p^k_ij - sum p^k w| w_ij.
inline double consistency_loss(const Tensor<double>& features, const Tensor<double>& w) {
  const auto mean = weighted_mean(features, w);
  double loss = 0.0;
  for (int k = 0; k < features.channels(); ++k) {
    const auto p = features.plane(k);
    for (std::size_t i = 0; i < p.size(); ++i) loss += std::abs(p[i] - mean[k]) * w.values()[i];
  }
  return loss;
}

/// Mean over the batch of the L1 distance between each prediction vector and
/// the batch mean.
inline double disagreement_loss(const std::vector<std::vector<double>>& preds) {
  if (preds.size() < 2) throw Error("disagreement loss needs at least two predictions");
  const std::size_t nf = preds.front().size();
  std::vector<double> mean(nf, 0.0);
  for (const auto& p : preds)
    for (std::size_t k = 0; k < nf; ++k) mean[k] += p[k];
  for (auto& m : mean) m /= static_cast<double>(preds.size());
  double loss = 0.0;
  for (const auto& p : preds)
    for (std::size_t k = 0; k < nf; ++k) loss += std::abs(p[k] - mean[k]);
  return loss / static_cast<double>(preds.size());
}

inline std::vector<double> to_vector(const Prediction& p, const nn::ChannelSet& ch) {
  std::vector<double> v{p.x, p.y};
  if (ch.z) v.push_back(p.z);
  if (ch.scale) v.push_back(p.log_scale);
  return v;
}

inline Prediction from_vector(const std::vector<double>& v, const nn::ChannelSet& ch) {
  Prediction p{v[0], v[1]};
  if (ch.z) p.z = v[ch.z_index()];
  if (ch.scale) p.log_scale = v[ch.scale_index()];
  return p;
}

inline double sign(double v) { return (v > 0.0) - (v < 0.0); }

struct HeadResult {
  double loss = 0.0;
  double disagreement = 0.0;
  double consistency = 0.0;  // mean over views
  std::vector<Prediction> back_transformed;
  std::vector<Tensor<double>> grad_raw;  // dLoss/d(raw output) per view
};

/// Loss and its gradient with respect to each view's raw network output,
/// given the views' bundles, their transforms and fixed dropout masks.
inline HeadResult distillation_head(const std::vector<nn::FeatureBundle>& views,
                                    const std::vector<GroupTransform>& transforms,
                                    const std::vector<Tensor<double>>& masks,
                                    const TrainConfig& cfg) {
  const std::size_t batch = views.size();
  if (batch < 2 || transforms.size() != batch || masks.size() != batch) {
    throw Error("distillation head: inconsistent batch");
  }
  const auto& ch = views.front().channels;
  const int nf = ch.features();
  const double inv_b = 1.0 / static_cast<double>(batch);

  HeadResult r;
  std::vector<Tensor<double>> positions(batch), weights(batch);
  std::vector<std::vector<double>> pooled(batch), back(batch);
  double consistency_sum = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    positions[b] = nn::decode_positions(views[b]);
    weights[b] = training_weights(views[b].raw.plane(views[b].rho_channel()), masks[b], cfg.epsilon);
    pooled[b] = weighted_mean(positions[b], weights[b]);
    consistency_sum += consistency_loss(positions[b], weights[b]);
    const Prediction q = invert_prediction(from_vector(pooled[b], ch), transforms[b]);
    r.back_transformed.push_back(q);
    back[b] = to_vector(q, ch);
  }
  r.disagreement = disagreement_loss(back);
  r.consistency = consistency_sum * inv_b;
  r.loss = cfg.lambda_disagree * r.disagreement + cfg.lambda_consist * r.consistency;

  // dL/dq for every view.
  std::vector<double> mean(nf, 0.0), sign_mean(nf, 0.0);
  for (const auto& q : back)
    for (int k = 0; k < nf; ++k) mean[k] += q[k] * inv_b;
  for (const auto& q : back)
    for (int k = 0; k < nf; ++k) sign_mean[k] += sign(q[k] - mean[k]) * inv_b;

  for (std::size_t b = 0; b < batch; ++b) {
    const auto& view = views[b];
    const auto& p = positions[b];
    const auto& w = weights[b];
    std::vector<double> gq(nf);
    for (int k = 0; k < nf; ++k) {
      gq[k] = cfg.lambda_disagree * inv_b * (sign(back[b][k] - mean[k]) - sign_mean[k]);
    }
    // dL/d(pooled)
    const auto jac = inverse_jacobian(transforms[b]);
    std::vector<double> g_pool(nf);
    g_pool[0] = jac[0] * gq[0] + jac[2] * gq[1];
    g_pool[1] = jac[1] * gq[0] + jac[3] * gq[1];
    for (int k = 2; k < nf; ++k) g_pool[k] = gq[k];
    const double lc = cfg.lambda_consist * inv_b;
    const std::size_t n = w.size();
    for (int k = 0; k < nf; ++k) {
      double s = 0.0;
      const auto pk = p.plane(k);
      for (std::size_t i = 0; i < n; ++i) s += w.values()[i] * sign(pk[i] - pooled[b][k]);
      g_pool[k] -= lc * s;
    }

    Tensor<double> grad(view.raw.channels(), view.height(), view.width(), 0.0);
    std::vector<double> g_w(n, 0.0);
    for (int k = 0; k < nf; ++k) {
      const auto pk = p.plane(k);
      auto gk = grad.plane(k);
      for (std::size_t i = 0; i < n; ++i) {
        const double diff = pk[i] - pooled[b][k];
        gk[i] = lc * w.values()[i] * sign(diff) + g_pool[k] * w.values()[i];
        g_w[i] += lc * std::abs(diff) + g_pool[k] * pk[i];
      }
    }
    // Through the normalization w = (u + eps) / (eps n + sum u).
    const auto rho = view.raw.plane(view.rho_channel());
    double u_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) u_sum += masks[b].values()[i] * nn::sigmoid(rho[i]);
    const double z = cfg.epsilon * static_cast<double>(n) + u_sum;
    double gw_dot_w = 0.0;
    for (std::size_t i = 0; i < n; ++i) gw_dot_w += g_w[i] * w.values()[i];
    auto grho = grad.plane(view.rho_channel());
    for (std::size_t i = 0; i < n; ++i) {
      const double g_u = (g_w[i] - gw_dot_w) / z;
      const double sg = nn::sigmoid(rho[i]);
      grho[i] = g_u * masks[b].values()[i] * sg * (1.0 - sg);
    }
    r.grad_raw.push_back(std::move(grad));
  }
  return r;
}

// --------------------------------------------------------------------------
// Trainer

struct LossRecord {
  int step = 0;
  double disagreement = 0.0;
  double consistency = 0.0;
};

struct TrainResult {
  nn::ModelParams<float> params;
  std::vector<LossRecord> curve;
};

/// Source image prepared for training: already normalized, so the transform
/// background is zero.
struct TrainingImage {
  Image data;
  std::optional<synth::OpticsConfig> optics;
};

using ProgressFn = std::function<void(const LossRecord&)>;

/// Pooled prediction of one image with inference (sigmoid) weights, in
/// center-relative coordinates, before calibration.
inline Prediction pooled_prediction(const nn::FeatureBundle& b) {
  const auto p = nn::decode_positions(b);
  const auto w = nn::inference_weights(b);
  double sw = 0.0;
  for (double v : w.values()) sw += v;
  auto m = weighted_mean(p, w);
  for (auto& v : m) v /= sw;
  return from_vector(m, b.channels);
}

inline TrainResult train(const Image& crop, const TrainConfig& cfg,
                         const std::optional<synth::OpticsConfig>& optics = std::nullopt,
                         const ProgressFn& progress = {}, const std::string& dump_path = {}) {
  cfg.validate();
  const int view = cfg.view_size > 0 ? cfg.view_size : std::min(crop.height(), crop.width());
  if (std::min(crop.height(), crop.width()) < 32) throw Error("train: crop side must be >= 32 px");
  if (view > std::min(crop.height(), crop.width()) || view % 2) {
    throw Error("train: view size must be even and fit inside the crop");
  }
  if (cfg.channels.z && (!optics || crop.channels() != 2)) {
    throw Error("train: the axial channel needs a two-channel field and optics");
  }

  nn::Architecture arch;
  arch.input_channels = crop.channels();
  arch.channels = cfg.channels;

  // Derive independent streams from the seed.
  std::seed_seq seq{cfg.seed, std::uint64_t{0x4c6f6465}};
  std::array<std::uint64_t, 3> seeds{};
  seq.generate(seeds.begin(), seeds.end());

  TrainResult result;
  result.params = nn::init_params<float>(arch, seeds[0]);
  auto& params = result.params;
  const double bound = cfg.translation_bound >= 0 ? cfg.translation_bound : view / 4.0;
  TransformSampler sampler(cfg, bound, seeds[1]);
  std::mt19937_64 dropout_rng(seeds[2]);

  const Image source = nn::normalize_input<double>(crop, nn::default_normalization(cfg.channels));
  TransformContext ctx;
  ctx.optics = optics;

  nn::AdamSettings adam;
  adam.learning_rate = cfg.learning_rate;

  const std::size_t batch = cfg.batch_size;
  std::vector<nn::ForwardCache<float>> caches(batch);
  std::vector<nn::FeatureBundle> bundles(batch);
  std::vector<GroupTransform> transforms(batch);
  std::vector<Tensor<double>> masks(batch);
  std::vector<Tensor<float>> inputs(batch);

  for (int step = 0; step < cfg.total_batches; ++step) {
    for (std::size_t b = 0; b < batch; ++b) {
      transforms[b] = sampler();
      Image v = apply_transform(source, transforms[b], ctx);
      if (view != v.height() || view != v.width()) v = synth::center_crop(v, view, view);
      inputs[b] = v.cast<float>();
      const auto raw = nn::forward(params, inputs[b], &caches[b]);
      bundles[b] = nn::make_bundle(params, raw, view, view);
      masks[b] = dropout_mask(raw.height(), raw.width(), cfg.dropout, dropout_rng);
    }
    const HeadResult head = distillation_head(bundles, transforms, masks, cfg);
    if (!std::isfinite(head.loss)) {
      if (!dump_path.empty()) {
        nn::save_checkpoint(params, dump_path + ".ckpt");
        std::vector<Tensor<float>> batch_inputs(inputs.begin(), inputs.end());
        ltsr::save(dump_path + ".batch.ltsr", ltsr::stack(batch_inputs));
      }
      throw Error("train: non-finite loss at mini-batch " + std::to_string(step) +
                  (dump_path.empty() ? "" : " (diagnostics written to " + dump_path + ".*)"));
    }
    auto grads = nn::Gradients<float>::zeros_like(params);
    for (std::size_t b = 0; b < batch; ++b) {
      nn::backward(params, caches[b], head.grad_raw[b].cast<float>(), grads);
    }
    nn::adam_step(params, grads, adam);
    LossRecord rec{step, head.disagreement, head.consistency};
    result.curve.push_back(rec);
    if (progress) progress(rec);
  }

  // Anchor the extra channels on the untransformed source, which defines
  // z = 0 and log-scale 0.
  const auto raw = nn::forward(params, source.cast<float>());
  const auto pred = pooled_prediction(nn::make_bundle(params, raw, source.height(), source.width()));
  params.calibration.z_offset = cfg.channels.z ? pred.z : 0.0;
  params.calibration.scale_offset = cfg.channels.scale ? pred.log_scale : 0.0;
  return result;
}

}  // namespace lodestar::distill
