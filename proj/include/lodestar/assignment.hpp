#pragma once

// Minimum-cost one-to-one assignment (Hungarian algorithm, O(n^3)) on a
// rectangular cost matrix, with an optional maximum admissible cost.

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "lodestar/tensor.hpp"

namespace lodestar::assign {

/// Row-major rows x cols cost matrix.
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> cost;

  CostMatrix() = default;
  CostMatrix(int r, int c, double fill = 0.0) : rows(r), cols(c), cost(static_cast<std::size_t>(r) * c, fill) {}
  double& operator()(int r, int c) { return cost[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return cost[static_cast<std::size_t>(r) * cols + c]; }
};

/// Square-matrix Hungarian solver; returns the column assigned to each row.
inline std::vector<int> hungarian_square(const std::vector<double>& a, int n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[static_cast<std::size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

/// Optimal pairs (row, col) with cost <= max_cost (all finite pairs when
/// max_cost is infinite). Pairs above the threshold are never matched and
/// never displace admissible pairs.
inline std::vector<std::pair<int, int>> solve(const CostMatrix& m,
                                              double max_cost = std::numeric_limits<double>::infinity()) {
  std::vector<std::pair<int, int>> pairs;
  if (m.rows == 0 || m.cols == 0) return pairs;
  double admissible_sum = 0.0;
  for (double c : m.cost) {
    if (std::isnan(c)) throw Error("assignment: NaN cost");
    if (c <= max_cost && std::isfinite(c)) admissible_sum += std::abs(c);
  }
  // Padded square problem: leaving a row or column unmatched costs `skip`,
  // inadmissible pairs cost more than two skips.
  const double forbidden = 4.0 * (admissible_sum + 1.0);
  const double skip = forbidden / 2.0;
  const int n = m.rows + m.cols;
  std::vector<double> a(static_cast<std::size_t>(n) * n, 0.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double v;
      if (r < m.rows && c < m.cols) {
        const double x = m(r, c);
        v = (x <= max_cost && std::isfinite(x)) ? x : 4.0 * forbidden;
      } else if (r < m.rows || c < m.cols) {
        v = skip;
      } else {
        v = 0.0;
      }
      a[static_cast<std::size_t>(r) * n + c] = v;
    }
  const auto sol = hungarian_square(a, n);
  for (int r = 0; r < m.rows; ++r) {
    const int c = sol[r];
    if (c >= 0 && c < m.cols && m(r, c) <= max_cost && std::isfinite(m(r, c))) pairs.emplace_back(r, c);
  }
  return pairs;
}

/// Total cost of a set of pairs.
inline double total_cost(const CostMatrix& m, const std::vector<std::pair<int, int>>& pairs) {
  double s = 0.0;
  for (auto [r, c] : pairs) s += m(r, c);
  return s;
}

}  // namespace lodestar::assign
