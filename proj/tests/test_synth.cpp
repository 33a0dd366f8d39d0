#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lodestar/synth.hpp"

using namespace lodestar;
using namespace lodestar::synth;

namespace {

std::pair<double, double> brute_centroid(const Image& img) {
  double sx = 0, sy = 0, s = 0;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      sx += img(0, y, x) * x;
      sy += img(0, y, x) * y;
      s += img(0, y, x);
    }
  return {sx / s, sy / s};
}

ComplexField reference_hologram(double z = 0.0) {
  OpticsConfig optics;
  return simulate_hologram({}, 31.5 * optics.pixel_size, 31.5 * optics.pixel_size, z, optics, 64, 64).field;
}

}  // namespace

TEST(Render, PointCentroidAtPlacement) {
  const auto img = render_particle(default_particle(Shape::point, 32, 32), 64, 64);
  const auto [cx, cy] = brute_centroid(img);
  EXPECT_NEAR(cx, 32.0, 1e-6);
  EXPECT_NEAR(cy, 32.0, 1e-6);
}

TEST(Render, SphereCentroidSubPixel) {
  const auto img = render_particle(default_particle(Shape::sphere, 30.25, 33.5), 64, 64);
  const auto [cx, cy] = brute_centroid(img);
  EXPECT_NEAR(cx, 30.25, 0.02);
  EXPECT_NEAR(cy, 33.5, 0.02);
}

TEST(Render, PeakEqualsIntensity) {
  for (Shape s : kAllShapes) {
    const auto img = render_particle(default_particle(s, 31.3, 32.6, 0.4, 2.5), 64, 64);
    EXPECT_NEAR(*std::max_element(img.values().begin(), img.values().end()), 2.5, 1e-12) << to_string(s);
  }
}

TEST(Render, CrescentHalfTurnIsPointReflection) {
  const double theta = 0.7;
  const auto a = render_particle(default_particle(Shape::crescent, 32, 31, theta), 64, 64);
  const auto b = render_particle(default_particle(Shape::crescent, 32, 31, theta + std::numbers::pi), 64, 64);
  double worst = 0.0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const int rx = 64 - x, ry = 62 - y;
      const double ref = (rx >= 0 && rx < 64 && ry >= 0 && ry < 64) ? b(0, ry, rx) : 0.0;
      worst = std::max(worst, std::abs(a(0, y, x) - ref));
    }
  EXPECT_LT(worst, 1e-4);
}

TEST(Render, OutOfCanvas) {
  try {
    render_particle(default_particle(Shape::annulus, 5, 30), 64, 64);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "particle out of canvas");
  }
}

TEST(Render, IntegerShiftCovariance) {
  for (Shape s : kAllShapes) {
    const auto a = render_particle(default_particle(s, 30.3, 31.7, 1.1), 64, 64);
    const auto b = render_particle(default_particle(s, 33.3, 27.7, 1.1), 64, 64);
    double worst = 0.0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const int sx = x - 3, sy = y + 4;
        const double ref = (sx >= 0 && sy < 64) ? a(0, sy, sx) : 0.0;
        worst = std::max(worst, std::abs(b(0, y, x) - ref));
      }
    EXPECT_LT(worst, 1e-3) << to_string(s);
  }
}

TEST(Render, OrientationWrapped) {
  EXPECT_DOUBLE_EQ(default_particle(Shape::ellipse, 30, 30, -0.5).orientation, 2 * std::numbers::pi - 0.5);
  EXPECT_DOUBLE_EQ(wrap_angle(2 * std::numbers::pi), 0.0);
}

TEST(Noise, InfiniteSnrIsIdentity) {
  const auto img = render_particle(default_particle(Shape::point, 32, 32), 64, 64);
  EXPECT_EQ(add_noise(img, kNoiselessSnr, 1), img);
}

TEST(Noise, DeterministicPerSeed) {
  const auto img = render_particle(default_particle(Shape::point, 32, 32), 64, 64);
  EXPECT_EQ(add_noise(img, 5, 42), add_noise(img, 5, 42));
  EXPECT_FALSE(add_noise(img, 5, 42) == add_noise(img, 5, 43));
}

TEST(Noise, NonPositiveSnrRejected) {
  const auto img = render_particle(default_particle(Shape::point, 32, 32), 64, 64);
  EXPECT_THROW(add_noise(img, 0.0, 1), Error);
  EXPECT_THROW(add_noise(img, -2.0, 1), Error);
}

TEST(Noise, RealizedSnrMatchesRequest) {
  const auto img = render_particle(default_particle(Shape::point, 32, 32), 64, 64);
  const double snr = 7.0;
  double var = 0.0;
  std::size_t n = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto noisy = add_noise(img, snr, seed);
    for (std::size_t i = 0; i < img.size(); ++i) {
      const double d = noisy.values()[i] - img.values()[i];
      var += d * d;
      ++n;
    }
  }
  const double realized = 1.0 / std::sqrt(var / static_cast<double>(n));
  EXPECT_NEAR(realized / snr, 1.0, 0.03);
}

TEST(Noise, ZeroMeanPerturbation) {
  const auto img = render_particle(default_particle(Shape::sphere, 32, 32), 64, 64);
  const auto noisy = add_noise(img, 4.0, 9);
  double mean = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) mean += noisy.values()[i] - img.values()[i];
  mean /= static_cast<double>(img.size());
  EXPECT_LT(std::abs(mean), 3.0 * 0.25 / 64.0);
}

TEST(Hologram, CentroSymmetricAtFocus) {
  const auto f = reference_hologram();
  double worst = 0.0;
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) worst = std::max(worst, std::abs(f.data(c, y, x) - f.data(c, 63 - y, 63 - x)));
  EXPECT_LT(worst, 1e-6);
}

TEST(Hologram, ClausiusMossottiClosedForm) {
  const double r = 0.228, np = 1.58, nm = 1.33;
  const double v = 4.0 / 3.0 * std::numbers::pi * std::pow(r, 3);
  const double expected = 3.0 * v * (np * np - nm * nm) / (np * np + 2.0 * nm * nm);
  EXPECT_DOUBLE_EQ(clausius_mossotti(r, np, nm), expected);
  OpticsConfig optics;
  EXPECT_DOUBLE_EQ(simulate_hologram({r, np}, 8, 8, 0, optics, 64, 64).polarizability, expected);
}

TEST(Hologram, ScatteredPartLinearInPolarizability) {
  OpticsConfig optics;
  const double r = 0.2;
  const auto a = simulate_hologram({r, 1.58}, 7.9, 8.1, 2.0, optics, 64, 64);
  const auto b = simulate_hologram({r * std::cbrt(2.0), 1.58}, 7.9, 8.1, 2.0, optics, 64, 64);
  ASSERT_NEAR(b.polarizability / a.polarizability, 2.0, 1e-12);
  double worst = 0.0, peak = 0.0;
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const double bg = c == 0 ? 1.0 : 0.0;
        const double sa = a.field.data(c, y, x) - bg, sb = b.field.data(c, y, x) - bg;
        worst = std::max(worst, std::abs(sb - 2.0 * sa));
        peak = std::max(peak, std::abs(sa));
      }
  EXPECT_LT(worst / peak, 1e-6);
}

TEST(Hologram, LowSignalFlagged) {
  OpticsConfig optics;
  EXPECT_TRUE(simulate_hologram({0.2, 1.3301}, 8, 8, 0, optics, 64, 64).low_signal);
  EXPECT_FALSE(simulate_hologram({0.2, 1.58}, 8, 8, 0, optics, 64, 64).low_signal);
}

TEST(Propagation, ZeroIsIdentity) {
  const auto f = reference_hologram(3.0);
  EXPECT_LT(max_abs_diff(propagate_field(f, 0.0).data, f.data), 1e-9);
}

TEST(Propagation, RoundTrip) {
  const auto f = reference_hologram();
  const auto back = propagate_field(propagate_field(f, 5.0), -5.0);
  EXPECT_LT(max_abs_diff(back.data, f.data), 1e-6);
}

TEST(Propagation, Composes) {
  const auto f = reference_hologram(1.0);
  const auto two = propagate_field(propagate_field(f, 2.5), -4.0);
  const auto one = propagate_field(f, -1.5);
  EXPECT_LT(max_abs_diff(two.data, one.data), 1e-6);
}

TEST(Propagation, ConservesPropagatingPower) {
  const auto f = reference_hologram();
  const double p0 = propagating_power(f);
  for (double dz : {-7.0, 0.5, 12.0}) EXPECT_NEAR(propagating_power(propagate_field(f, dz)) / p0, 1.0, 1e-6);
}

TEST(Propagation, EvanescentComponentsRemoved) {
  OpticsConfig optics;
  optics.pixel_size = 0.1;  // Nyquist beyond the medium wavenumber
  ComplexField f{FieldImage(2, 32, 32, 0.0), optics};
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) f.data(0, y, x) = (x % 2 ? 1.0 : -1.0);
  const auto out = propagate_field(f, 0.1);
  EXPECT_LT(max_abs_diff(out.data, FieldImage(2, 32, 32, 0.0)), 1e-9);
}

TEST(Optics, Validation) {
  OpticsConfig o;
  o.band_limit = 1.4;
  EXPECT_THROW(o.validate(), Error);
  o = {};
  o.wavelength = 0;
  EXPECT_THROW(o.validate(), Error);
}

TEST(Brownian, IncrementVariance) {
  BrownianConfig cfg;
  cfg.count = 1000;
  cfg.seed = 5;
  const auto traces = simulate_brownian_traces(cfg);
  double s2 = 0.0;
  std::size_t n = 0;
  for (const auto& t : traces) {
    EXPECT_EQ(t.front(), (Point3{0, 0, 0}));
    for (std::size_t i = 1; i < t.size(); ++i)
      for (int a = 0; a < 3; ++a) {
        const double d = t[i][a] - t[i - 1][a];
        s2 += d * d;
        ++n;
      }
  }
  EXPECT_NEAR(s2 / n / (2.0 * cfg.diffusion * cfg.frame_interval), 1.0, 0.015);
}

TEST(Brownian, Deterministic) {
  BrownianConfig cfg;
  cfg.count = 3;
  cfg.seed = 11;
  cfg.localization_noise = 0.02;
  EXPECT_EQ(simulate_brownian_traces(cfg), simulate_brownian_traces(cfg));
}

TEST(Brownian, InvalidConfig) {
  BrownianConfig cfg;
  cfg.frame_interval = 0;
  EXPECT_THROW(simulate_brownian_traces(cfg), Error);
  cfg = {};
  cfg.length = 1;
  EXPECT_THROW(simulate_brownian_traces(cfg), Error);
}

TEST(Crop, CenterCrop) {
  Image img(1, 6, 6);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) img(0, y, x) = 10 * y + x;
  const auto c = center_crop(img, 2, 4);
  EXPECT_EQ(c(0, 0, 0), 21);
  EXPECT_EQ(c(0, 1, 3), 34);
}
