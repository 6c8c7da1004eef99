#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include "dagg/rng.hpp"

namespace dagg::testing {

// Minimum of v^T G v over the simplex grid with spacing 1/steps, by enumeration.
// Supports K in {1, 2, 3}.
inline double grid_minimum(const std::vector<std::vector<double>>& g, int steps) {
  const std::size_t k = g.size();
  auto value = [&](const std::vector<double>& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) s += v[i] * g[i][j] * v[j];
    return s;
  };
  double best = std::numeric_limits<double>::infinity();
  if (k == 1) return g[0][0];
  for (int a = 0; a <= steps; ++a) {
    if (k == 2) {
      const double x = static_cast<double>(a) / steps;
      best = std::min(best, value({x, 1.0 - x}));
      continue;
    }
    for (int b = 0; a + b <= steps; ++b) {
      const double x = static_cast<double>(a) / steps, y = static_cast<double>(b) / steps;
      best = std::min(best, value({x, y, static_cast<double>(steps - a - b) / steps}));
    }
  }
  return best;
}

inline std::vector<std::vector<double>> random_rows(Rng& rng, std::size_t k, std::size_t d) {
  std::vector<std::vector<double>> rows(k, std::vector<double>(d));
  for (auto& row : rows) {
    for (auto& x : row) x = rng.normal();
  }
  return rows;
}

}  // namespace dagg::testing
