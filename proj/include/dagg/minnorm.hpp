#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dagg/error.hpp"

namespace dagg {

struct SimplexPoint {
  std::vector<double> weights;
  bool degenerate = false;  // all gradients were exactly zero
  double gap = 0.0;         // Frank-Wolfe duality gap at exit
  std::size_t iterations = 0;
};

// Raised when the iteration budget runs out; carries the last feasible iterate.
class NotConverged : public Error {
 public:
  NotConverged(SimplexPoint last, double gap)
      : Error(ErrorCode::NotConverged, "min-norm solver stopped with duality gap " + std::to_string(gap)),
        last_(std::move(last)),
        gap_(gap) {}
  const SimplexPoint& last() const { return last_; }
  double gap() const { return gap_; }

 private:
  SimplexPoint last_;
  double gap_;
};

struct GradientMatrix {
  std::vector<std::vector<double>> rows;
  std::vector<std::vector<double>> gram;
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "dot of vectors with lengths " + std::to_string(a.size()) +
                                                               " and " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::vector<std::vector<double>> gram_of(const std::vector<std::vector<double>>& rows) {
  const std::size_t k = rows.size();
  std::vector<std::vector<double>> g(k, std::vector<double>(k));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i; j < k; ++j) g[i][j] = g[j][i] = dot(rows[i], rows[j]);
  }
  return g;
}

inline double quadratic_form(const std::vector<std::vector<double>>& gram, const std::vector<double>& v) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t j = 0; j < v.size(); ++j) s += v[i] * gram[i][j] * v[j];
  }
  return s;
}

namespace detail {

// Clip to [0,1] and renormalize so the emitted point is exactly feasible.
inline std::vector<double> onto_simplex(std::vector<double> v) {
  double total = 0.0;
  for (auto& x : v) {
    x = std::clamp(x, 0.0, 1.0);
    total += x;
  }
  if (total <= 0.0) {
    std::fill(v.begin(), v.end(), 1.0 / static_cast<double>(v.size()));
  } else {
    for (auto& x : v) x /= total;
  }
  return v;
}

// Minimizer over t in [0,1] of || t*a + (1-t)*b ||^2 given the three inner products.
inline double segment_weight(double aa, double ab, double bb) {
  const double denom = aa + bb - 2.0 * ab;
  if (denom <= 1e-12 * (aa + bb)) return 0.5;
  return std::clamp((bb - ab) / denom, 0.0, 1.0);
}

// Duality gap 2(v^T G v - min_i (Gv)_i) and objective at v.
inline std::pair<double, double> gap_and_value(const std::vector<std::vector<double>>& g, const std::vector<double>& v) {
  double value = 0.0, lowest = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.size(); ++i) {
    double gv = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) gv += g[i][j] * v[j];
    value += v[i] * gv;
    lowest = std::min(lowest, gv);
  }
  return {2.0 * (value - lowest), value};
}

// Minimizer of the objective on the affine hull of the support of v, from its
// KKT system. Empty when the system is singular.
inline std::optional<std::vector<double>> face_optimum(const std::vector<std::vector<double>>& g,
                                                       const std::vector<double>& v) {
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] > 0.0) support.push_back(i);
  }
  const std::size_t m = support.size(), n = m + 1;
  std::vector<std::vector<double>> a(n, std::vector<double>(n + 1, 0.0));
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < m; ++c) a[r][c] = g[support[r]][support[c]];
    a[r][m] = 1.0;
    a[m][r] = 1.0;
  }
  a[m][n] = 1.0;
  double scale = 0.0;
  for (std::size_t r = 0; r < m; ++r) scale = std::max(scale, std::abs(a[r][r]));
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    }
    if (std::abs(a[pivot][col]) <= 1e-12 * scale) return std::nullopt;
    std::swap(a[col], a[pivot]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c <= n; ++c) a[r][c] -= f * a[col][c];
    }
  }
  std::vector<double> w(v.size(), 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    w[support[r]] = a[r][n] / a[r][r];
  }
  return w;
}

}  // namespace detail

inline SimplexPoint two_vector_minnorm(const std::vector<double>& g1, const std::vector<double>& g2) {
  if (g1.size() != g2.size()) fail(ErrorCode::ShapeMismatch, "two_vector_minnorm: vector lengths differ");
  double diff_sq = 0.0, cross = 0.0;
  bool all_zero = true;
  for (std::size_t i = 0; i < g1.size(); ++i) {
    const double d = g2[i] - g1[i];
    diff_sq += d * d;
    cross += d * g2[i];
    all_zero = all_zero && g1[i] == 0.0 && g2[i] == 0.0;
  }
  if (all_zero) return {{0.5, 0.5}, true};
  if (diff_sq == 0.0) return {{0.5, 0.5}};
  const double gamma = std::clamp(cross / diff_sq, 0.0, 1.0);
  return {detail::onto_simplex({gamma, 1.0 - gamma})};
}

inline constexpr std::size_t kDefaultFwIters = 250;
inline constexpr double kDefaultFwTol = 1e-7;

// Minimizes v^T G v over the simplex with away-step Frank-Wolfe and exact line
// search, plus a jump to the current face's optimum whenever that optimum is
// feasible. Exits when the duality gap 2(v^T G v - min_i (Gv)_i) is <= tol.
inline SimplexPoint frank_wolfe_minnorm(const std::vector<std::vector<double>>& gram,
                                        std::size_t max_iters = kDefaultFwIters, double tol = kDefaultFwTol) {
  const std::size_t k = gram.size();
  if (k == 0) fail(ErrorCode::DegenerateInput, "frank_wolfe_minnorm needs K >= 1");
  double scale = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (gram[i].size() != k) fail(ErrorCode::ShapeMismatch, "gram matrix must be square");
    scale = std::max(scale, std::abs(gram[i][i]));
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(gram[i][j] - gram[j][i]) > 1e-8 * std::max(1.0, scale)) {
        fail(ErrorCode::DegenerateInput, "gram matrix is not symmetric");
      }
    }
  }
  bool all_zero = true;
  for (const auto& row : gram) {
    for (double x : row) all_zero = all_zero && x == 0.0;
  }
  if (all_zero) return {std::vector<double>(k, 1.0 / static_cast<double>(k)), true};
  if (k == 1) return {{1.0}};
  if (k == 2) {
    const double t = detail::segment_weight(gram[0][0], gram[0][1], gram[1][1]);
    return {detail::onto_simplex({t, 1.0 - t})};
  }

  std::vector<double> v(k, 1.0 / static_cast<double>(k));
  std::vector<double> gv(k);
  double gap = 0.0;
  for (std::size_t iter = 0; iter <= max_iters; ++iter) {
    for (std::size_t i = 0; i < k; ++i) {
      gv[i] = 0.0;
      for (std::size_t j = 0; j < k; ++j) gv[i] += gram[i][j] * v[j];
    }
    double vgv = 0.0;
    for (std::size_t i = 0; i < k; ++i) vgv += v[i] * gv[i];
    std::size_t s = 0, a = k;
    for (std::size_t i = 1; i < k; ++i) {
      if (gv[i] < gv[s]) s = i;
    }
    for (std::size_t i = 0; i < k; ++i) {
      if (v[i] > 0.0 && (a == k || gv[i] > gv[a])) a = i;
    }
    gap = 2.0 * (vgv - gv[s]);
    if (gap <= tol) return {detail::onto_simplex(v), false, std::max(0.0, gap), iter};
    if (iter == max_iters) break;

    // Direction d = e_s - v (toward) or v - e_a (away), whichever descends faster.
    const bool toward = (vgv - gv[s]) >= (gv[a] - vgv);
    double max_step = 1.0;
    std::vector<double> d(k);
    if (toward) {
      for (std::size_t i = 0; i < k; ++i) d[i] = -v[i];
      d[s] += 1.0;
    } else {
      for (std::size_t i = 0; i < k; ++i) d[i] = v[i];
      d[a] -= 1.0;
      max_step = v[a] >= 1.0 ? 1.0 : v[a] / (1.0 - v[a]);
    }
    double dgv = 0.0, dgd = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      dgv += d[i] * gv[i];
      for (std::size_t j = 0; j < k; ++j) dgd += d[i] * gram[i][j] * d[j];
    }
    const double step = dgd > 0.0 ? std::clamp(-dgv / dgd, 0.0, max_step) : max_step;
    for (std::size_t i = 0; i < k; ++i) v[i] = std::max(0.0, v[i] + step * d[i]);
    if (!toward && step == max_step) v[a] = 0.0;
    // Move toward the affine optimum of the current face, stopping at the
    // simplex boundary. The objective is convex along the segment, so this
    // never increases it.
    if (auto w = detail::face_optimum(gram, v)) {
      double theta = 1.0;
      std::size_t hit = k;
      for (std::size_t i = 0; i < k; ++i) {
        if ((*w)[i] < 0.0 && v[i] > 0.0) {
          const double t = v[i] / (v[i] - (*w)[i]);
          if (t < theta) theta = t, hit = i;
        }
      }
      std::vector<double> next(k);
      for (std::size_t i = 0; i < k; ++i) next[i] = std::max(0.0, v[i] + theta * ((*w)[i] - v[i]));
      if (hit < k) next[hit] = 0.0;
      if (detail::gap_and_value(gram, next).second <= detail::gap_and_value(gram, v).second) v = std::move(next);
    }
  }
  throw NotConverged({detail::onto_simplex(v), false, gap, max_iters}, gap);
}

// Lays out per-path gradients in canonical parameter order; parameters a path
// does not touch become zero blocks.
inline GradientMatrix flatten_path_gradients(
    const std::vector<std::map<std::string, std::vector<double>>>& per_path,
    const std::vector<std::pair<std::string, std::size_t>>& param_order) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> blocks;  // name -> (offset, size)
  std::size_t total = 0;
  for (const auto& [name, size] : param_order) {
    blocks[name] = {total, size};
    total += size;
  }
  GradientMatrix out;
  for (const auto& grads : per_path) {
    std::vector<double> row(total, 0.0);
    for (const auto& [name, g] : grads) {
      auto it = blocks.find(name);
      if (it == blocks.end()) fail(ErrorCode::UnknownParameter, "gradient for unknown parameter '" + name + "'");
      const auto [offset, size] = it->second;
      if (g.size() != size) {
        fail(ErrorCode::ShapeMismatch, "gradient for '" + name + "' has " + std::to_string(g.size()) +
                                           " entries, parameter has " + std::to_string(size));
      }
      std::copy(g.begin(), g.end(), row.begin() + static_cast<std::ptrdiff_t>(offset));
    }
    out.rows.push_back(std::move(row));
  }
  out.gram = gram_of(out.rows);
  return out;
}

}  // namespace dagg
