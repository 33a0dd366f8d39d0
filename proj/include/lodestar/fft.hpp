#pragma once

#include <complex>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace lodestar::fft {

using Complex = std::complex<double>;

/// In-place 2D DFT of a row-major height x width grid. The inverse is
/// normalized by 1/(height*width).
inline void transform2d(std::vector<Complex>& grid, int height, int width, bool inverse) {
  Eigen::FFT<double> engine;
  std::vector<Complex> in, out;

  in.resize(width);
  for (int y = 0; y < height; ++y) {
    std::copy_n(grid.begin() + static_cast<std::ptrdiff_t>(y) * width, width, in.begin());
    if (inverse) engine.inv(out, in); else engine.fwd(out, in);
    std::copy_n(out.begin(), width, grid.begin() + static_cast<std::ptrdiff_t>(y) * width);
  }
  in.resize(height);
  for (int x = 0; x < width; ++x) {
    for (int y = 0; y < height; ++y) in[y] = grid[static_cast<std::size_t>(y) * width + x];
    if (inverse) engine.inv(out, in); else engine.fwd(out, in);
    for (int y = 0; y < height; ++y) grid[static_cast<std::size_t>(y) * width + x] = out[y];
  }
}

/// Signed frequency index of DFT bin `i` for a transform of length `n`.
inline int frequency_index(int i, int n) { return i < (n + 1) / 2 ? i : i - n; }

}  // namespace lodestar::fft
