#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dagg/tensor.hpp"

// Differentiable operations over Tensor. Every reduction runs sequentially in
// index order so forward values are bit-reproducible.
namespace dagg::ops {

namespace kernel {

// c[m,n] += a[m,k] * b[k,n]
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
inline void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// c[m,n] += a[k,m]^T * b[k,n]
inline void mm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// cols[c*kh*kw + r*kw + s, oy*out_w + ox] = x[c, oy*stride + r - pad, ox*stride + s - pad]
inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t r = 0; r < g.kh; ++r) {
      for (std::size_t s = 0; s < g.kw; ++s) {
        double* row = cols + ((c * g.kh + r) * g.kw + s) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + r) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + s) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * g.out_w + ox] = inside ? x[(c * g.height + iy) * g.width + ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t r = 0; r < g.kh; ++r) {
      for (std::size_t s = 0; s < g.kw; ++s) {
        const double* row = cols + ((c * g.kh + r) * g.kw + s) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + r) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + s) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            x[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace kernel

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& a, std::size_t rank, std::string_view op) {
  if (a.rank() != rank) {
    fail(ErrorCode::ShapeMismatch,
         std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

inline Tensor make(Shape shape, std::vector<double> values) { return Tensor::from_data(std::move(shape), std::move(values)); }

inline Tape& tape() { return Tape::active(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::tape().record("add", {a, b}, detail::make(a.shape(), std::move(out)),
                               [](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (const auto& dst : gin) {
                                   for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
                                 }
                               });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::tape().record("sub", {a, b}, detail::make(a.shape(), std::move(out)),
                               [](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
                                 for (std::size_t i = 0; i < gin[1].size(); ++i) gin[1][i] -= g[i];
                               });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::tape().record("mul", {a, b}, detail::make(a.shape(), std::move(out)),
                               [ai, bi](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i] * bi->data[i];
                                 for (std::size_t i = 0; i < gin[1].size(); ++i) gin[1][i] += g[i] * ai->data[i];
                               });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  return detail::tape().record("scale", {a}, detail::make(a.shape(), std::move(out)),
                               [c](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += c * g[i];
                               });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  auto ai = a.impl();
  return detail::tape().record("square", {a}, detail::make(a.shape(), std::move(out)),
                               [ai](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += 2.0 * ai->data[i] * g[i];
                               });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  std::vector<double> saved = out;
  return detail::tape().record("exp", {a}, detail::make(a.shape(), std::move(out)),
                               [saved = std::move(saved)](std::span<const double> g,
                                                          std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += saved[i] * g[i];
                               });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x[i]);
  auto ai = a.impl();
  return detail::tape().record("log", {a}, detail::make(a.shape(), std::move(out)),
                               [ai](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i] / ai->data[i];
                               });
}

// Subgradient at exactly zero is 0.
inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  auto ai = a.impl();
  return detail::tape().record("relu", {a}, detail::make(a.shape(), std::move(out)),
                               [ai](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) {
                                   if (ai->data[i] > 0.0) gin[0][i] += g[i];
                                 }
                               });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return detail::tape().record("sum", {a}, Tensor::scalar(acc),
                               [](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (double& d : gin[0]) d += g[0];
                               });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) fail(ErrorCode::ShapeMismatch, "mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    fail(ErrorCode::ShapeMismatch, "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::tape().record("reshape", {a}, detail::make(std::move(shape), std::move(out)),
                               [](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
                               });
}

// [N, ...] -> [N, prod(...)]
inline Tensor flatten(const Tensor& a) {
  if (a.rank() < 1) fail(ErrorCode::ShapeMismatch, "flatten of a scalar");
  return reshape(a, {a.dim(0), a.numel() / std::max<std::size_t>(a.dim(0), 1)});
}

// Scalars -> [K]
inline Tensor stack(const std::vector<Tensor>& scalars) {
  std::vector<double> out;
  out.reserve(scalars.size());
  for (const auto& s : scalars) out.push_back(s.item());
  return detail::tape().record("stack", std::span<const Tensor>(scalars), detail::make({scalars.size()}, std::move(out)),
                               [](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t k = 0; k < gin.size(); ++k) {
                                   if (!gin[k].empty()) gin[k][0] += g[k];
                                 }
                               });
}

// x[K] -> x[i] as a scalar.
inline Tensor index(const Tensor& a, std::size_t i) {
  if (i >= a.numel()) fail(ErrorCode::ShapeMismatch, "index out of range");
  return detail::tape().record("index", {a}, Tensor::scalar(a.data()[i]),
                               [i](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 if (!gin[0].empty()) gin[0][i] += g[0];
                               });
}

// [N, D, rest...] -> [N, rest...] summing over axis 1.
inline Tensor sum_axis1(const Tensor& a) {
  if (a.rank() < 2) fail(ErrorCode::ShapeMismatch, "sum_axis1 needs rank >= 2");
  const std::size_t n = a.dim(0), d = a.dim(1), inner = a.numel() / (n * std::max<std::size_t>(d, 1));
  Shape shape{n};
  for (std::size_t i = 2; i < a.rank(); ++i) shape.push_back(a.dim(i));
  std::vector<double> out(n * inner, 0.0);
  const auto x = a.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < d; ++c) {
      const double* src = x.data() + (b * d + c) * inner;
      double* dst = out.data() + b * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return detail::tape().record("sum_axis1", {a}, detail::make(std::move(shape), std::move(out)),
                               [n, d, inner](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t b = 0; b < n; ++b) {
                                   for (std::size_t c = 0; c < d; ++c) {
                                     double* dst = gin[0].data() + (b * d + c) * inner;
                                     const double* src = g.data() + b * inner;
                                     for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                                   }
                                 }
                               });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorCode::ShapeMismatch, "matmul inner dimensions " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernel::mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::tape().record("matmul", {a, b}, detail::make({m, n}, std::move(out)),
                               [ai, bi, m, k, n](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 // dA = dC B^T, dB = A^T dC
                                 if (!gin[0].empty()) kernel::mm_nt(g.data(), bi->data.data(), gin[0].data(), m, n, k);
                                 if (!gin[1].empty()) kernel::mm_tn(ai->data.data(), g.data(), gin[1].data(), m, k, n);
                               });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return detail::tape().record("transpose", {a}, detail::make({n, m}, std::move(out)),
                               [m, n](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += g[j * m + i];
                               });
}

// [B, M, N] -> [B, N, M]
inline Tensor transpose12(const Tensor& a) {
  detail::require_rank(a, 3, "transpose12");
  const std::size_t bsz = a.dim(0), m = a.dim(1), n = a.dim(2);
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[(b * n + j) * m + i] = x[(b * m + i) * n + j];
  return detail::tape().record("transpose12", {a}, detail::make({bsz, n, m}, std::move(out)),
                               [bsz, m, n](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t b = 0; b < bsz; ++b)
                                   for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < n; ++j)
                                       gin[0][(b * m + i) * n + j] += g[(b * n + j) * m + i];
                               });
}

// Batched a[B,M,K] * b[B,P,K]^T -> [B,M,P]
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 3, "bmm_nt");
  detail::require_rank(b, 3, "bmm_nt");
  const std::size_t bsz = a.dim(0), m = a.dim(1), k = a.dim(2), p = b.dim(1);
  if (b.dim(0) != bsz || b.dim(2) != k) {
    fail(ErrorCode::ShapeMismatch, "bmm_nt " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(bsz * m * p, 0.0);
  for (std::size_t s = 0; s < bsz; ++s) {
    kernel::mm_nt(a.data().data() + s * m * k, b.data().data() + s * p * k, out.data() + s * m * p, m, k, p);
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::tape().record(
      "bmm_nt", {a, b}, detail::make({bsz, m, p}, std::move(out)),
      [ai, bi, bsz, m, k, p](std::span<const double> g, std::span<const std::span<double>> gin) {
        for (std::size_t s = 0; s < bsz; ++s) {
          const double* gs = g.data() + s * m * p;
          // dA[M,K] = dC[M,P] B[P,K];  dB[P,K] = dC^T[P,M] A[M,K]
          if (!gin[0].empty()) kernel::mm_nn(gs, bi->data.data() + s * p * k, gin[0].data() + s * m * k, m, p, k);
          if (!gin[1].empty()) kernel::mm_tn(gs, ai->data.data() + s * m * k, gin[1].data() + s * p * k, m, p, k);
        }
      });
}

// x[N,C] + bias[C] broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank(x, 2, "add_row_bias");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (bias.numel() != c) fail(ErrorCode::ShapeMismatch, "add_row_bias: bias length");
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bv = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
  return detail::tape().record("add_row_bias", {x, bias}, detail::make(x.shape(), std::move(out)),
                               [n, c](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
                                 if (!gin[1].empty()) {
                                   for (std::size_t i = 0; i < n; ++i)
                                     for (std::size_t j = 0; j < c; ++j) gin[1][j] += g[i * c + j];
                                 }
                               });
}

// x[N,D,H,W] + bias[D] broadcast over batch and space.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank(x, 4, "add_channel_bias");
  const std::size_t n = x.dim(0), d = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (bias.numel() != d) fail(ErrorCode::ShapeMismatch, "add_channel_bias: bias length");
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bv = bias.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < d; ++c) {
      double* dst = out.data() + (b * d + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += bv[c];
    }
  return detail::tape().record("add_channel_bias", {x, bias}, detail::make(x.shape(), std::move(out)),
                               [n, d, hw](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
                                 if (!gin[1].empty()) {
                                   for (std::size_t b = 0; b < n; ++b)
                                     for (std::size_t c = 0; c < d; ++c) {
                                       const double* src = g.data() + (b * d + c) * hw;
                                       double acc = 0.0;
                                       for (std::size_t i = 0; i < hw; ++i) acc += src[i];
                                       gin[1][c] += acc;
                                     }
                                 }
                               });
}

// Cross-correlation of input[N,C,H,W] with kernel[D,C,kh,kw]. `pad` zero
// pixels are added on every border; pad = 0 is a valid convolution.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride = 1, std::size_t pad = 0) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(weight, 4, "conv2d kernel");
  if (stride == 0) fail(ErrorCode::BadShape, "conv2d stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t d = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c) {
    fail(ErrorCode::ShapeMismatch,
         "conv2d channels: input " + shape_str(input.shape()) + " kernel " + shape_str(weight.shape()));
  }
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    fail(ErrorCode::ShapeMismatch,
         "conv2d kernel " + shape_str(weight.shape()) + " exceeds input " + shape_str(input.shape()));
  }
  kernel::ConvGeometry geo{c, h, w, kh, kw, stride, pad, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1};
  const std::size_t patch = geo.patch(), positions = geo.positions();
  std::vector<double> out(n * d * positions, 0.0);
  std::vector<double> cols(patch * positions);
  const auto x = input.data();
  for (std::size_t b = 0; b < n; ++b) {
    kernel::im2col(x.data() + b * c * h * w, geo, cols.data());
    kernel::mm_nn(weight.data().data(), cols.data(), out.data() + b * d * positions, d, patch, positions);
  }
  auto xi = input.impl();
  auto wi = weight.impl();
  return detail::tape().record(
      "conv2d", {input, weight}, detail::make({n, d, geo.out_h, geo.out_w}, std::move(out)),
      [xi, wi, geo, n, d](std::span<const double> g, std::span<const std::span<double>> gin) {
        const std::size_t patch = geo.patch(), positions = geo.positions();
        const std::size_t in_size = geo.channels * geo.height * geo.width;
        std::vector<double> cols(patch * positions);
        std::vector<double> dcols(patch * positions);
        for (std::size_t b = 0; b < n; ++b) {
          const double* gb = g.data() + b * d * positions;
          if (!gin[1].empty()) {
            kernel::im2col(xi->data.data() + b * in_size, geo, cols.data());
            kernel::mm_nt(gb, cols.data(), gin[1].data(), d, positions, patch);
          }
          if (!gin[0].empty()) {
            std::fill(dcols.begin(), dcols.end(), 0.0);
            kernel::mm_tn(wi->data.data(), gb, dcols.data(), d, patch, positions);
            kernel::col2im_add(dcols.data(), geo, gin[0].data() + b * in_size);
          }
        }
      });
}

// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
inline Tensor avgpool2(const Tensor& x) {
  detail::require_rank(x, 4, "avgpool2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) fail(ErrorCode::BadShape, "avgpool2 on " + shape_str(x.shape()));
  std::vector<double> out(n * c * oh * ow);
  const auto v = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = v.data() + p * h * w;
    double* dst = out.data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double* q = src + 2 * i * w + 2 * j;
        dst[i * ow + j] = 0.25 * (q[0] + q[1] + q[w] + q[w + 1]);
      }
  }
  return detail::tape().record("avgpool2", {x}, detail::make({n, c, oh, ow}, std::move(out)),
                               [n, c, h, w, oh, ow](std::span<const double> g, std::span<const std::span<double>> gin) {
                                 for (std::size_t p = 0; p < n * c; ++p) {
                                   double* dst = gin[0].data() + p * h * w;
                                   const double* src = g.data() + p * oh * ow;
                                   for (std::size_t i = 0; i < oh; ++i)
                                     for (std::size_t j = 0; j < ow; ++j) {
                                       const double q = 0.25 * src[i * ow + j];
                                       double* t = dst + 2 * i * w + 2 * j;
                                       t[0] += q;
                                       t[1] += q;
                                       t[w] += q;
                                       t[w + 1] += q;
                                     }
                                 }
                               });
}

// ---------------------------------------------------------------------------
// Row-wise ops over the last axis

// Each row r (last axis) becomes r / max(|r|, eps).
inline Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12) {
  if (a.rank() < 1) fail(ErrorCode::ShapeMismatch, "l2_normalize_rows of a scalar");
  const std::size_t len = a.shape().back();
  const std::size_t rows = len == 0 ? 0 : a.numel() / len;
  std::vector<double> out(a.numel());
  std::vector<double> norms(rows);
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < len; ++i) ss += x[r * len + i] * x[r * len + i];
    const double nrm = std::sqrt(ss);
    norms[r] = nrm;
    const double denom = std::max(nrm, eps);
    for (std::size_t i = 0; i < len; ++i) out[r * len + i] = x[r * len + i] / denom;
  }
  auto result = detail::make(a.shape(), std::move(out));
  std::vector<double> y(result.data().begin(), result.data().end());
  return detail::tape().record(
      "l2_normalize_rows", {a}, result,
      [y = std::move(y), norms = std::move(norms), rows, len, eps](std::span<const double> g,
                                                                   std::span<const std::span<double>> gin) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = y.data() + r * len;
          const double* gr = g.data() + r * len;
          double* dr = gin[0].data() + r * len;
          if (norms[r] > eps) {
            // d(x/|x|) = (g - y (y.g)) / |x|
            double dot = 0.0;
            for (std::size_t i = 0; i < len; ++i) dot += yr[i] * gr[i];
            for (std::size_t i = 0; i < len; ++i) dr[i] += (gr[i] - yr[i] * dot) / norms[r];
          } else {
            for (std::size_t i = 0; i < len; ++i) dr[i] += gr[i] / eps;
          }
        }
      });
}

// Euclidean norm of each row (last axis): [..., M] -> [...]. The gradient at
// an all-zero row is taken as 0.
inline Tensor row_norms(const Tensor& a) {
  if (a.rank() < 1) fail(ErrorCode::ShapeMismatch, "row_norms of a scalar");
  const std::size_t len = a.shape().back();
  const std::size_t rows = len == 0 ? 0 : a.numel() / len;
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<double> out(rows);
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < len; ++i) ss += x[r * len + i] * x[r * len + i];
    out[r] = std::sqrt(ss);
  }
  auto ai = a.impl();
  std::vector<double> norms = out;
  return detail::tape().record(
      "row_norms", {a}, detail::make(std::move(shape), std::move(out)),
      [ai, norms = std::move(norms), rows, len](std::span<const double> g, std::span<const std::span<double>> gin) {
        for (std::size_t r = 0; r < rows; ++r) {
          if (norms[r] == 0.0) continue;
          const double s = g[r] / norms[r];
          for (std::size_t i = 0; i < len; ++i) gin[0][r * len + i] += s * ai->data[r * len + i];
        }
      });
}

// Log-softmax over the last axis with the max-shift.
inline Tensor log_softmax_rows(const Tensor& a) {
  if (a.rank() < 1) fail(ErrorCode::ShapeMismatch, "log_softmax_rows of a scalar");
  const std::size_t len = a.shape().back();
  const std::size_t rows = len == 0 ? 0 : a.numel() / len;
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * len;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xr[i]);
    double se = 0.0;
    for (std::size_t i = 0; i < len; ++i) se += std::exp(xr[i] - mx);
    const double lse = mx + std::log(se);
    for (std::size_t i = 0; i < len; ++i) out[r * len + i] = xr[i] - lse;
  }
  std::vector<double> saved = out;
  return detail::tape().record(
      "log_softmax_rows", {a}, detail::make(a.shape(), std::move(out)),
      [saved = std::move(saved), rows, len](std::span<const double> g, std::span<const std::span<double>> gin) {
        // d/dx_i = g_i - softmax_i * sum_j g_j
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0.0;
          for (std::size_t i = 0; i < len; ++i) gs += g[r * len + i];
          for (std::size_t i = 0; i < len; ++i) {
            gin[0][r * len + i] += g[r * len + i] - std::exp(saved[r * len + i]) * gs;
          }
        }
      });
}

inline Tensor softmax_rows(const Tensor& a) { return exp(log_softmax_rows(a)); }

// x[N,C], labels[N] -> x[n, labels[n]] as [N]
inline Tensor pick(const Tensor& x, std::span<const int> labels) {
  detail::require_rank(x, 2, "pick");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (labels.size() != n) fail(ErrorCode::ShapeMismatch, "pick: label count");
  std::vector<double> out(n);
  std::vector<std::size_t> cols(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) fail(ErrorCode::ShapeMismatch, "pick: label range");
    cols[i] = static_cast<std::size_t>(labels[i]);
    out[i] = x.data()[i * c + cols[i]];
  }
  return detail::tape().record("pick", {x}, detail::make({n}, std::move(out)),
                               [cols = std::move(cols), c](std::span<const double> g,
                                                           std::span<const std::span<double>> gin) {
                                 for (std::size_t i = 0; i < cols.size(); ++i) gin[0][i * c + cols[i]] += g[i];
                               });
}

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

}  // namespace dagg::ops
