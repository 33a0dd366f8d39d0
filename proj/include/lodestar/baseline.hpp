#pragma once

// Classical localization references: background-subtracted intensity
// centroid and the radial-symmetry center.

#include <algorithm>
#include <cmath>
#include <vector>

#include "lodestar/tensor.hpp"

namespace lodestar::baseline {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Single-channel sub-image with its offset in the parent image and a
/// background estimate.
struct CropWindow {
  Image data;
  int x0 = 0;
  int y0 = 0;
  double background = 0.0;

  int side() const { return data.width(); }

  void validate() const {
    if (data.channels() != 1) throw Error("crop window must be single-channel");
    if (data.width() != data.height()) throw Error("crop window must be square");
    if (data.width() < 7) throw Error("crop window side must be at least 7 px");
  }
};

/// Median of the outermost ring of pixels.
inline double border_median(const Image& img) {
  const int h = img.height(), w = img.width();
  std::vector<double> ring;
  for (int x = 0; x < w; ++x) {
    ring.push_back(img(0, 0, x));
    if (h > 1) ring.push_back(img(0, h - 1, x));
  }
  for (int y = 1; y < h - 1; ++y) {
    ring.push_back(img(0, y, 0));
    if (w > 1) ring.push_back(img(0, y, w - 1));
  }
  std::sort(ring.begin(), ring.end());
  const std::size_t n = ring.size();
  return n % 2 ? ring[n / 2] : 0.5 * (ring[n / 2 - 1] + ring[n / 2]);
}

/// Whole image as one window.
inline CropWindow full_window(const Image& img) {
  CropWindow c{img, 0, 0, border_median(img)};
  c.validate();
  return c;
}

/// Odd-sided window of half-width `half` around integer pixel (cx, cy).
inline CropWindow crop_around(const Image& img, int cx, int cy, int half) {
  if (half < 3) throw Error("crop half-width must be at least 3");
  const int side = 2 * half + 1;
  const int x0 = cx - half, y0 = cy - half;
  if (x0 < 0 || y0 < 0 || x0 + side > img.width() || y0 + side > img.height()) {
    throw Error("crop window leaves the image");
  }
  Image d(1, side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) d(0, y, x) = img(0, y0 + y, x0 + x);
  CropWindow c{std::move(d), x0, y0, 0.0};
  c.background = border_median(c.data);
  c.validate();
  return c;
}

/// Centroid of max(I - background, 0), in parent-image coordinates.
inline Point2 centroid_localize(const CropWindow& crop) {
  crop.validate();
  double sx = 0.0, sy = 0.0, s = 0.0;
  for (int y = 0; y < crop.data.height(); ++y)
    for (int x = 0; x < crop.data.width(); ++x) {
      const double v = std::max(crop.data(0, y, x) - crop.background, 0.0);
      sx += v * x;
      sy += v * y;
      s += v;
    }
  if (!(s > 0.0)) throw Error("empty crop");
  return {crop.x0 + sx / s, crop.y0 + sy / s};
}

/// Radial-symmetry center: gradients at the (n-1) x (n-1) half-pixel grid,
/// 3x3 box smoothing, then the point minimizing the weighted squared
/// distances to the lines through each grid point along its gradient.
inline Point2 radial_center_localize(const CropWindow& crop) {
  crop.validate();
  const int n = crop.data.width();
  const int m = n - 1;
  const auto& I = crop.data;
  std::vector<double> gx(m * m), gy(m * m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const double a = I(0, i, j), b = I(0, i, j + 1), c = I(0, i + 1, j), d = I(0, i + 1, j + 1);
      gx[i * m + j] = 0.5 * ((b - a) + (d - c));
      gy[i * m + j] = 0.5 * ((c - a) + (d - b));
    }
  auto box = [m](const std::vector<double>& g) {
    std::vector<double> out(g.size(), 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        double s = 0.0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int ii = i + di, jj = j + dj;
            if (ii >= 0 && ii < m && jj >= 0 && jj < m) s += g[ii * m + jj];
          }
        out[i * m + j] = s / 9.0;
      }
    return out;
  };
  gx = box(gx);
  gy = box(gy);

  double mag_sum = 0.0, cx = 0.0, cy = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const double g2 = gx[i * m + j] * gx[i * m + j] + gy[i * m + j] * gy[i * m + j];
      mag_sum += g2;
      cx += g2 * (j + 0.5);
      cy += g2 * (i + 0.5);
    }
  if (!(mag_sum > 0.0)) throw Error("degenerate gradients");
  cx /= mag_sum;
  cy /= mag_sum;

  double a11 = 0.0, a12 = 0.0, a22 = 0.0, b1 = 0.0, b2 = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const double ux = gx[i * m + j], uy = gy[i * m + j];
      const double g2 = ux * ux + uy * uy;
      if (g2 == 0.0) continue;
      const double px = j + 0.5, py = i + 0.5;
      const double dist = std::max(std::hypot(px - cx, py - cy), 1e-6);
      const double w = g2 / dist;
      const double g = std::sqrt(g2);
      const double nx = -uy / g, ny = ux / g;  // normal to the gradient line
      const double proj = nx * px + ny * py;
      a11 += w * nx * nx;
      a12 += w * nx * ny;
      a22 += w * ny * ny;
      b1 += w * nx * proj;
      b2 += w * ny * proj;
    }
  const double det = a11 * a22 - a12 * a12;
  const double scale = a11 * a22 + a12 * a12;
  if (!(std::abs(det) > 1e-12 * scale) || !std::isfinite(det)) throw Error("degenerate gradients");
  const double x = (a22 * b1 - a12 * b2) / det;
  const double y = (a11 * b2 - a12 * b1) / det;
  return {crop.x0 + x, crop.y0 + y};
}

}  // namespace lodestar::baseline
