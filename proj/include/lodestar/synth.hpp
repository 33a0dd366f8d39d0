#pragma once

// Synthetic data: fluorescence-like particle images, scalar-field holograms
// with angular-spectrum propagation, and Brownian traces.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "lodestar/fft.hpp"
#include "lodestar/tensor.hpp"

namespace lodestar::synth {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

enum class Shape { point, sphere, annulus, ellipse, crescent };

inline constexpr std::array<Shape, 5> kAllShapes = {Shape::point, Shape::sphere, Shape::annulus,
                                                    Shape::ellipse, Shape::crescent};

inline std::string_view to_string(Shape s) {
  switch (s) {
    case Shape::point: return "point";
    case Shape::sphere: return "sphere";
    case Shape::annulus: return "annulus";
    case Shape::ellipse: return "ellipse";
    case Shape::crescent: return "crescent";
  }
  return "?";
}

inline Shape shape_from_string(std::string_view name) {
  for (Shape s : kAllShapes) {
    if (to_string(s) == name) return s;
  }
  throw Error("unknown particle shape '" + std::string(name) + "'");
}

inline double wrap_angle(double theta) {
  double t = std::fmod(theta, kTwoPi);
  if (t < 0) t += kTwoPi;
  if (t >= kTwoPi) t = 0.0;
  return t;
}

/// One particle to render. Size parameters by shape:
///   point    - size_a: PSF standard deviation
///   sphere   - size_a: radius
///   annulus  - size_a: outer radius, size_b: inner radius
///   ellipse  - size_a: semi-axis along the orientation, size_b: across it
///   crescent - size_a: outer disc radius, size_b: bite disc radius; the bite
///              disc is offset by size_a/2 along the orientation axis
/// `x`, `y` is the ground-truth position (the outer disc center for the
/// crescent) in pixel-center coordinates.
struct ParticleSpec {
  Shape shape = Shape::point;
  double x = 0.0;
  double y = 0.0;
  double orientation = 0.0;
  double size_a = 1.0;
  double size_b = 1.0;
  double intensity = 1.0;

  void validate() const {
    if (!(size_a > 0.0) || !(size_b > 0.0)) throw Error("particle sizes must be positive");
    if (!(intensity > 0.0)) throw Error("particle intensity must be positive");
    if (shape == Shape::annulus && size_b >= size_a) {
      throw Error("annulus inner radius must be below the outer radius");
    }
  }
};

/// Canonical geometry used by the benchmarks.
inline ParticleSpec default_particle(Shape shape, double x, double y, double orientation = 0.0,
                                     double intensity = 1.0) {
  ParticleSpec p;
  p.shape = shape;
  p.x = x;
  p.y = y;
  p.orientation = wrap_angle(orientation);
  p.intensity = intensity;
  switch (shape) {
    case Shape::point: p.size_a = 1.0; p.size_b = 1.0; break;
    case Shape::sphere: p.size_a = 4.0; p.size_b = 4.0; break;
    case Shape::annulus: p.size_a = 6.0; p.size_b = 3.5; break;
    case Shape::ellipse: p.size_a = 6.0; p.size_b = 3.0; break;
    case Shape::crescent: p.size_a = 6.0; p.size_b = 5.0; break;
  }
  return p;
}

inline constexpr int kSupersample = 4;
inline constexpr double kBlurSigma = 1.0;
inline constexpr int kBlurRadius = 4;
inline constexpr int kCanvasMargin = 4;

/// Radius (px) beyond which a rendered particle is zero.
inline double footprint_radius(const ParticleSpec& p) {
  switch (p.shape) {
    case Shape::point: return 4.0 * p.size_a;
    case Shape::crescent: return p.size_a + kBlurRadius;
    default: return std::max(p.size_a, p.size_b) + kBlurRadius;
  }
}

namespace detail {

// Unblurred analytic profile at offset (dx, dy) from the particle position.
inline double profile(const ParticleSpec& p, double dx, double dy) {
  const double c = std::cos(p.orientation), s = std::sin(p.orientation);
  const double u = c * dx + s * dy;   // along the orientation axis
  const double v = -s * dx + c * dy;  // across it
  const double r2 = dx * dx + dy * dy;
  switch (p.shape) {
    case Shape::point: return 0.0;
    case Shape::sphere: {
      const double q = 1.0 - r2 / (p.size_a * p.size_a);
      return q > 0.0 ? std::sqrt(q) : 0.0;
    }
    case Shape::annulus:
      return (r2 <= p.size_a * p.size_a && r2 >= p.size_b * p.size_b) ? 1.0 : 0.0;
    case Shape::ellipse: {
      const double e = (u * u) / (p.size_a * p.size_a) + (v * v) / (p.size_b * p.size_b);
      return e <= 1.0 ? 1.0 : 0.0;
    }
    case Shape::crescent: {
      if (r2 > p.size_a * p.size_a) return 0.0;
      const double bu = u - 0.5 * p.size_a;
      return (bu * bu + v * v) <= p.size_b * p.size_b ? 0.0 : 1.0;
    }
  }
  return 0.0;
}

inline std::vector<double> blur_kernel() {
  std::vector<double> k(2 * kBlurRadius + 1);
  double sum = 0.0;
  for (int i = -kBlurRadius; i <= kBlurRadius; ++i) {
    k[i + kBlurRadius] = std::exp(-0.5 * i * i / (kBlurSigma * kBlurSigma));
    sum += k[i + kBlurRadius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable zero-padded blur of one plane.
inline void blur_plane(std::span<double> plane, int h, int w) {
  const auto k = blur_kernel();
  std::vector<double> tmp(plane.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int t = -kBlurRadius; t <= kBlurRadius; ++t) {
        const int xx = x + t;
        if (xx >= 0 && xx < w) acc += k[t + kBlurRadius] * plane[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int t = -kBlurRadius; t <= kBlurRadius; ++t) {
        const int yy = y + t;
        if (yy >= 0 && yy < h) acc += k[t + kBlurRadius] * tmp[yy * w + x];
      }
      plane[y * w + x] = acc;
    }
}

}  // namespace detail

/// Noiseless single-channel rendering of `spec` on a height x width canvas,
/// scaled so its brightest pixel equals `spec.intensity`.
inline Image render_particle(const ParticleSpec& spec, int height, int width) {
  spec.validate();
  const double r = footprint_radius(spec);
  if (spec.x - r < kCanvasMargin || spec.y - r < kCanvasMargin ||
      spec.x + r > width - 1 - kCanvasMargin || spec.y + r > height - 1 - kCanvasMargin) {
    throw Error("particle out of canvas");
  }
  Image img(1, height, width, 0.0);
  auto plane = img.plane(0);
  if (spec.shape == Shape::point) {
    const double s2 = 2.0 * spec.size_a * spec.size_a;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double dx = x - spec.x, dy = y - spec.y;
        plane[y * width + x] = std::exp(-(dx * dx + dy * dy) / s2);
      }
  } else {
    const double step = 1.0 / kSupersample;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        if (std::abs(x - spec.x) > r + 1 || std::abs(y - spec.y) > r + 1) continue;
        double acc = 0.0;
        for (int sy = 0; sy < kSupersample; ++sy)
          for (int sx = 0; sx < kSupersample; ++sx) {
            const double px = x - 0.5 + (sx + 0.5) * step;
            const double py = y - 0.5 + (sy + 0.5) * step;
            acc += detail::profile(spec, px - spec.x, py - spec.y);
          }
        plane[y * width + x] = acc / (kSupersample * kSupersample);
      }
    detail::blur_plane(plane, height, width);
  }
  const double peak = *std::max_element(plane.begin(), plane.end());
  if (!(peak > 0.0)) throw Error("particle rendered empty");
  for (auto& v : plane) v *= spec.intensity / peak;
  return img;
}

/// Sum of several renderings on one canvas.
inline Image render_scene(const std::vector<ParticleSpec>& specs, int height, int width) {
  Image img(1, height, width, 0.0);
  for (const auto& s : specs) {
    const Image one = render_particle(s, height, width);
    for (std::size_t i = 0; i < img.size(); ++i) img.values()[i] += one.values()[i];
  }
  return img;
}

inline constexpr double kNoiselessSnr = std::numeric_limits<double>::infinity();

/// Additive white Gaussian noise with an absolute standard deviation.
inline Image add_gaussian_noise(const Image& image, double sigma, std::uint64_t seed) {
  Image out = image;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  for (auto& v : out.values()) v += normal(rng);
  return out;
}

/// Adds Gaussian noise with sigma = (peak - background) / snr. An infinite
/// snr returns the image unchanged.
inline Image add_noise(const Image& image, double snr, std::uint64_t seed,
                       double background = 0.0) {
  if (!(snr > 0.0)) throw Error("snr must be positive");
  if (std::isinf(snr)) return image;
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : image.values()) peak = std::max(peak, v - background);
  if (!(peak > 0.0)) throw Error("image has no signal above background");
  return add_gaussian_noise(image, peak / snr, seed);
}

// --------------------------------------------------------------------------
// Holography

struct OpticsConfig {
  double wavelength = 0.633;  // um, vacuum
  double n_medium = 1.33;
  double pixel_size = 0.25;  // um / px
  double band_limit = 0.6;   // numerical aperture of the pupil
  double n_oil = 1.5;

  void validate() const {
    if (!(wavelength > 0.0)) throw Error("optics: wavelength must be positive");
    if (!(n_medium >= 1.0)) throw Error("optics: medium index must be >= 1");
    if (!(pixel_size > 0.0)) throw Error("optics: pixel size must be positive");
    if (!(band_limit > 0.0 && band_limit <= n_medium)) {
      throw Error("optics: band limit must lie in (0, n_medium]");
    }
    if (!(n_oil > 0.0)) throw Error("optics: oil index must be positive");
  }
  double medium_wavenumber() const { return kTwoPi * n_medium / wavelength; }
};

/// Complex field stored as two planes (Re, Im).
struct ComplexField {
  FieldImage data;
  OpticsConfig optics;

  int height() const { return data.height(); }
  int width() const { return data.width(); }
  std::complex<double> at(int y, int x) const { return {data(0, y, x), data(1, y, x)}; }
};

struct ScattererSpec {
  double radius = 0.228;  // um
  double n_particle = 1.58;
};

/// Clausius-Mossotti polarizability alpha = 3V (np^2 - nm^2)/(np^2 + 2 nm^2), in um^3.
inline double clausius_mossotti(double radius, double n_particle, double n_medium) {
  const double volume = 4.0 / 3.0 * std::numbers::pi * radius * radius * radius;
  const double np2 = n_particle * n_particle, nm2 = n_medium * n_medium;
  return 3.0 * volume * (np2 - nm2) / (np2 + 2.0 * nm2);
}

/// Peak in-focus scattered amplitude per unit polarizability (field units / um^3).
inline constexpr double kScatterGain = 25.0;

struct Hologram {
  ComplexField field;
  double polarizability = 0.0;
  bool low_signal = false;
};

namespace detail {

inline std::vector<std::complex<double>> to_complex(const FieldImage& f) {
  std::vector<std::complex<double>> g(f.plane_size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = {f.plane(0)[i], f.plane(1)[i]};
  return g;
}

inline FieldImage from_complex(const std::vector<std::complex<double>>& g, int h, int w) {
  FieldImage f(2, h, w);
  for (std::size_t i = 0; i < g.size(); ++i) {
    f.plane(0)[i] = g[i].real();
    f.plane(1)[i] = g[i].imag();
  }
  return f;
}

inline void check_field(const FieldImage& f) {
  if (f.channels() != 2) throw Error("complex field must have 2 channels");
  if (f.height() < 16 || f.width() < 16) throw Error("complex field must be at least 16x16");
}

}  // namespace detail

/// Angular-spectrum propagation by dz (um). Evanescent components are zeroed;
/// dz == 0 is the identity.
inline ComplexField propagate_field(const ComplexField& field, double dz) {
  detail::check_field(field.data);
  if (dz == 0.0) return field;
  const int h = field.height(), w = field.width();
  const double k = field.optics.medium_wavenumber();
  auto g = detail::to_complex(field.data);
  fft::transform2d(g, h, w, false);
  const double dkx = kTwoPi / (w * field.optics.pixel_size);
  const double dky = kTwoPi / (h * field.optics.pixel_size);
  for (int y = 0; y < h; ++y) {
    const double ky = fft::frequency_index(y, h) * dky;
    for (int x = 0; x < w; ++x) {
      const double kx = fft::frequency_index(x, w) * dkx;
      const double kz2 = k * k - kx * kx - ky * ky;
      auto& c = g[static_cast<std::size_t>(y) * w + x];
      if (kz2 <= 0.0) {
        c = 0.0;
      } else {
        const double phase = dz * std::sqrt(kz2);
        c *= std::complex<double>(std::cos(phase), std::sin(phase));
      }
    }
  }
  fft::transform2d(g, h, w, true);
  return {detail::from_complex(g, h, w), field.optics};
}

/// Sum of |F|^2 over the propagating (non-evanescent) part of the spectrum,
/// normalized to real-space units.
inline double propagating_power(const ComplexField& field) {
  detail::check_field(field.data);
  const int h = field.height(), w = field.width();
  const double k = field.optics.medium_wavenumber();
  auto g = detail::to_complex(field.data);
  fft::transform2d(g, h, w, false);
  const double dkx = kTwoPi / (w * field.optics.pixel_size);
  const double dky = kTwoPi / (h * field.optics.pixel_size);
  double power = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double kx = fft::frequency_index(x, w) * dkx;
      const double ky = fft::frequency_index(y, h) * dky;
      if (kx * kx + ky * ky < k * k) power += std::norm(g[static_cast<std::size_t>(y) * w + x]);
    }
  return power / (static_cast<double>(h) * w);
}

/// Weak-scatterer hologram: F = 1 + s, where s is the band-limited point
/// response of a Rayleigh scatterer with Clausius-Mossotti polarizability,
/// centered at (x, y) um from pixel (0, 0) and propagated by z um.
inline Hologram simulate_hologram(const ScattererSpec& particle, double x_um, double y_um,
                                  double z_um, const OpticsConfig& optics, int height, int width,
                                  double gain = kScatterGain) {
  optics.validate();
  if (height < 16 || width < 16) throw Error("hologram canvas must be at least 16x16");
  if (!(particle.radius > 0.0)) throw Error("scatterer radius must be positive");
  Hologram out;
  out.polarizability = clausius_mossotti(particle.radius, particle.n_particle, optics.n_medium);
  out.low_signal = std::abs(out.polarizability * gain) < 1e-3;

  const double k_pupil = kTwoPi * optics.band_limit / optics.wavelength;
  const double dkx = kTwoPi / (width * optics.pixel_size);
  const double dky = kTwoPi / (height * optics.pixel_size);
  std::vector<std::complex<double>> g(static_cast<std::size_t>(height) * width, 0.0);
  std::size_t inside = 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double kx = fft::frequency_index(x, width) * dkx;
      const double ky = fft::frequency_index(y, height) * dky;
      if (kx * kx + ky * ky <= k_pupil * k_pupil) {
        const double phase = -(kx * x_um + ky * y_um);
        g[static_cast<std::size_t>(y) * width + x] = {std::cos(phase), std::sin(phase)};
        ++inside;
      }
    }
  if (inside == 0) throw Error("hologram pupil contains no frequency samples");
  // Peak of the in-focus point response is 1 after this scaling; the
  // scattered wave lags the reference by a quarter period.
  const std::complex<double> amplitude(0.0, gain * out.polarizability *
                                                static_cast<double>(height) * width /
                                                static_cast<double>(inside));
  for (auto& c : g) c *= amplitude;
  fft::transform2d(g, height, width, true);
  ComplexField scattered{detail::from_complex(g, height, width), optics};
  scattered = propagate_field(scattered, z_um);
  for (auto& v : scattered.data.plane(0)) v += 1.0;
  out.field = std::move(scattered);
  return out;
}

/// Gaussian noise of absolute standard deviation `sigma` on both channels.
inline ComplexField add_field_noise(const ComplexField& field, double sigma, std::uint64_t seed) {
  return {add_gaussian_noise(field.data, sigma, seed), field.optics};
}

/// Center crop of a planar tensor.
template <class T>
Tensor<T> center_crop(const Tensor<T>& t, int height, int width) {
  if (height > t.height() || width > t.width()) throw Error("crop larger than source");
  const int oy = (t.height() - height) / 2, ox = (t.width() - width) / 2;
  Tensor<T> out(t.channels(), height, width);
  for (int c = 0; c < t.channels(); ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out(c, y, x) = t(c, y + oy, x + ox);
  return out;
}

// --------------------------------------------------------------------------
// Brownian motion

struct BrownianConfig {
  double diffusion = 0.97;      // um^2 / s
  double frame_interval = 1.0 / 30.0;  // s
  int length = 100;             // frames
  int count = 1;
  double localization_noise = 0.0;  // um
  std::uint64_t seed = 0;

  void validate() const {
    if (!(diffusion >= 0.0)) throw Error("brownian: diffusion must be >= 0");
    if (!(frame_interval > 0.0)) throw Error("brownian: frame interval must be positive");
    if (length < 2 || count < 1) throw Error("brownian: trace length must be >= 2");
    if (!(localization_noise >= 0.0)) throw Error("brownian: noise must be >= 0");
  }
};

using Point3 = std::array<double, 3>;
using Trace3 = std::vector<Point3>;

/// Independent Gaussian increments of variance 2 D dt per axis, starting at
/// the origin, with optional per-frame localization noise.
inline std::vector<Trace3> simulate_brownian_traces(const BrownianConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double step = std::sqrt(2.0 * cfg.diffusion * cfg.frame_interval);
  std::vector<Trace3> traces(cfg.count);
  for (auto& trace : traces) {
    trace.resize(cfg.length);
    Point3 p{0.0, 0.0, 0.0};
    for (int t = 0; t < cfg.length; ++t) {
      if (t > 0) {
        for (auto& c : p) c += step * normal(rng);
      }
      trace[t] = p;
    }
    if (cfg.localization_noise > 0.0) {
      for (auto& q : trace)
        for (auto& c : q) c += cfg.localization_noise * normal(rng);
    }
  }
  return traces;
}

}  // namespace lodestar::synth
