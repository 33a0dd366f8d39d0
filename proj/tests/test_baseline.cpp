#include <gtest/gtest.h>

#include <cmath>

#include "lodestar/baseline.hpp"

using namespace lodestar;
using namespace lodestar::baseline;

namespace {

Image gaussian(int n, double cx, double cy, double sigma, double amp = 1.0, double bg = 0.0) {
  Image img(1, n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      img(0, y, x) = bg + amp * std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * sigma * sigma));
  return img;
}

Image mirror_x(const Image& img) {
  Image out(1, img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) out(0, y, x) = img(0, y, img.width() - 1 - x);
  return out;
}

Image transpose(const Image& img) {
  Image out(1, img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) out(0, x, y) = img(0, y, x);
  return out;
}

Image rotate90(const Image& img) {  // (x, y) -> (n - 1 - y, x)
  const int n = img.width();
  Image out(1, n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) out(0, x, n - 1 - y) = img(0, y, x);
  return out;
}

Image asymmetric_blob(int n) {
  Image img = gaussian(n, 9.3, 11.6, 2.0);
  const auto second = gaussian(n, 13.1, 8.2, 1.4, 0.6);
  for (std::size_t i = 0; i < img.size(); ++i) img.values()[i] += second.values()[i];
  return img;
}

}  // namespace

TEST(Centroid, SymmetricGaussianExact) {
  const auto p = centroid_localize(full_window(gaussian(21, 10.0, 10.0, 2.0)));
  EXPECT_NEAR(p.x, 10.0, 1e-6);
  EXPECT_NEAR(p.y, 10.0, 1e-6);
}

TEST(Centroid, HandPlusPattern) {
  Image img(1, 7, 7, 0.0);
  img(0, 2, 3) = 1;
  img(0, 3, 2) = 1;
  img(0, 3, 3) = 4;
  img(0, 3, 4) = 1;
  img(0, 4, 3) = 1;
  const auto p = centroid_localize(full_window(img));
  EXPECT_DOUBLE_EQ(p.x, 3.0);
  EXPECT_DOUBLE_EQ(p.y, 3.0);
}

TEST(Centroid, SmallOffsetBias) {
  const auto p = centroid_localize(full_window(gaussian(31, 15.3, 15.0, 2.0)));
  EXPECT_LT(std::abs(p.x - 15.3), 0.02);
}

TEST(Centroid, BackgroundSubtractedAndScaleInvariant) {
  const auto a = centroid_localize(full_window(gaussian(25, 11.4, 12.9, 2.0, 1.0, 0.0)));
  const auto b = centroid_localize(full_window(gaussian(25, 11.4, 12.9, 2.0, 3.0, 0.0)));
  EXPECT_NEAR(a.x, b.x, 1e-12);
  EXPECT_NEAR(a.y, b.y, 1e-12);
  const auto c = centroid_localize(full_window(gaussian(25, 11.4, 12.9, 2.0, 1.0, 5.0)));
  EXPECT_NEAR(a.x, c.x, 1e-3);
}

TEST(Centroid, EmptyCrop) {
  try {
    centroid_localize(full_window(Image(1, 9, 9, 2.0)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty crop");
  }
}

TEST(Radial, NoiselessGaussianCenter) {
  const double c = 15.0;
  const auto p = radial_center_localize(full_window(gaussian(31, c + 0.37, c - 0.21, 2.0)));
  EXPECT_NEAR(p.x, c + 0.37, 0.03);
  EXPECT_NEAR(p.y, c - 0.21, 0.03);
}

TEST(Radial, DegenerateGradients) {
  try {
    radial_center_localize(full_window(Image(1, 9, 9, 1.0)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "degenerate gradients");
  }
}

TEST(Covariance, Reflections) {
  const int n = 23;
  const auto img = asymmetric_blob(n);
  for (int method = 0; method < 2; ++method) {
    auto loc = [&](const Image& im) {
      const auto w = full_window(im);
      return method ? radial_center_localize(w) : centroid_localize(w);
    };
    const auto p = loc(img);
    const auto m = loc(mirror_x(img));
    EXPECT_NEAR(m.x, n - 1 - p.x, 1e-9) << method;
    EXPECT_NEAR(m.y, p.y, 1e-9) << method;
    const auto t = loc(transpose(img));
    EXPECT_NEAR(t.x, p.y, 1e-9) << method;
    EXPECT_NEAR(t.y, p.x, 1e-9) << method;
    const auto r = loc(rotate90(img));
    EXPECT_NEAR(r.x, n - 1 - p.y, 1e-9) << method;
    EXPECT_NEAR(r.y, p.x, 1e-9) << method;
  }
}

TEST(Covariance, IntegerTranslationOfCrop) {
  const auto img = gaussian(40, 17.3, 21.8, 2.0);
  const auto a = crop_around(img, 17, 22, 6);
  const auto shifted = gaussian(40, 20.3, 19.8, 2.0);
  const auto b = crop_around(shifted, 20, 20, 6);
  EXPECT_NEAR(centroid_localize(b).x - centroid_localize(a).x, 3.0, 1e-9);
  EXPECT_NEAR(centroid_localize(b).y - centroid_localize(a).y, -2.0, 1e-9);
  EXPECT_NEAR(radial_center_localize(b).x - radial_center_localize(a).x, 3.0, 1e-9);
  EXPECT_NEAR(radial_center_localize(b).y - radial_center_localize(a).y, -2.0, 1e-9);
}

TEST(CropWindow, Validation) {
  const auto img = gaussian(30, 15, 15, 2.0);
  EXPECT_THROW(crop_around(img, 15, 15, 2), Error);
  EXPECT_THROW(crop_around(img, 2, 15, 5), Error);
  const auto c = crop_around(img, 15, 15, 5);
  EXPECT_EQ(c.side(), 11);
  EXPECT_EQ(c.x0, 10);
  EXPECT_THROW(full_window(Image(1, 5, 5)), Error);
  EXPECT_THROW(full_window(Image(2, 9, 9)), Error);
}

TEST(CropWindow, BorderMedianBackground) {
  Image img(1, 9, 9, 2.0);
  img(0, 0, 0) = 100.0;
  img(0, 4, 4) = 50.0;
  EXPECT_DOUBLE_EQ(full_window(img).background, 2.0);
}
