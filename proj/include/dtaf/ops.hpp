#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "dtaf/errors.hpp"
#include "dtaf/fft.hpp"
#include "dtaf/random.hpp"
#include "dtaf/tensor.hpp"

namespace dtaf {

// Floor applied to log arguments in the KL ops.
inline constexpr double kLogClamp = 1e-12;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
using VecMapC = Eigen::Map<const Eigen::VectorXd>;

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Splits a shape around `axis` into (outer, length, inner) for strided loops.
struct AxisView {
  std::size_t outer = 1, length = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
    Node& p = parent(self, 0);
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = detail::parent(self, k);
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = detail::parent(self, k);
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      const double sign = k == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// Subgradient 0 at the kink.
inline Tensor abs(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// tanh approximation of GELU; smooth everywhere.
inline Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return detail::unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
      [](double v, double) {
        double t = std::tanh(c * (v + a * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      });
}

// Multiplies by a fixed array (masks, constant weights). No gradient to `c`.
inline Tensor mul_const(const Tensor& x, std::vector<double> c) {
  if (c.size() != x.size()) throw ShapeError("mul_const: constant size mismatch");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c[i];
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [c = std::move(c)](detail::Node& self) {
                               auto& g = detail::parent(self, 0).ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c[i];
                             });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tensor::make_result({1}, {s}, {x}, [](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ------------------------------------------------------------- shape moves

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return Tensor::make_result(std::move(shape), x.values(), {x}, [](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(-2), c = x.dim(-1), batch = x.size() / (r * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x[b * r * c + i * c + j];
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [r, c, batch](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
  });
}

inline Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  const std::size_t ax = a.normalize_axis(axis);
  if (a.rank() != b.rank()) throw ShapeError("concat: rank mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != ax && a.shape()[i] != b.shape()[i]) {
      throw ShapeError("concat: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  auto va = detail::axis_view(a.shape(), ax);
  auto vb = detail::axis_view(b.shape(), ax);
  const std::size_t ca = va.length * va.inner, cb = vb.length * vb.inner;
  Shape shape = a.shape();
  shape[ax] += b.shape()[ax];
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  for (std::size_t o = 0; o < va.outer; ++o) {
    out.insert(out.end(), a.values().begin() + o * ca, a.values().begin() + (o + 1) * ca);
    out.insert(out.end(), b.values().begin() + o * cb, b.values().begin() + (o + 1) * cb);
  }
  return Tensor::make_result(std::move(shape), std::move(out), {a, b},
                             [outer = va.outer, ca, cb](detail::Node& self) {
                               auto& pa = detail::parent(self, 0);
                               auto& pb = detail::parent(self, 1);
                               for (std::size_t o = 0; o < outer; ++o) {
                                 const double* src = self.grad.data() + o * (ca + cb);
                                 if (pa.requires_grad) {
                                   auto& g = pa.ensure_grad();
                                   for (std::size_t i = 0; i < ca; ++i) g[o * ca + i] += src[i];
                                 }
                                 if (pb.requires_grad) {
                                   auto& g = pb.ensure_grad();
                                   for (std::size_t i = 0; i < cb; ++i) g[o * cb + i] += src[ca + i];
                                 }
                               }
                             });
}

// Column j of the last axis, kept as a size-1 trailing dim.
inline Tensor select_last(const Tensor& x, std::size_t j) {
  const std::size_t n = x.dim(-1), rows = x.size() / n;
  if (j >= n) throw ShapeError("select_last: index " + std::to_string(j) + " out of range for " + shape_str(x.shape()));
  Shape shape = x.shape();
  shape.back() = 1;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = x[r * n + j];
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [n, j, rows](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) g[r * n + j] += self.grad[r];
  });
}

// Overlapping windows of length `len` at `stride` along the last axis:
// [..., T] -> [..., N, len] with N = (T - len) / stride + 1.
inline Tensor unfold(const Tensor& x, std::size_t len, std::size_t stride) {
  const std::size_t t = x.dim(-1);
  if (len == 0 || len > t || stride == 0) {
    throw ShapeError("unfold: invalid window " + std::to_string(len) + "/" + std::to_string(stride) +
                     " for length " + std::to_string(t));
  }
  const std::size_t n = (t - len) / stride + 1, rows = x.size() / t;
  Shape shape = x.shape();
  shape.back() = n;
  shape.push_back(len);
  std::vector<double> out(rows * n * len);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < len; ++l) out[(r * n + i) * len + l] = x[r * t + i * stride + l];
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [t, n, len, stride, rows](detail::Node& self) {
                               auto& g = detail::parent(self, 0).ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t l = 0; l < len; ++l)
                                     g[r * t + i * stride + l] += self.grad[(r * n + i) * len + l];
                             });
}

// ---------------------------------------------------------------- broadcasts

// x[..., d] * g[..., 1]: one scalar per row, broadcast along the last axis.
inline Tensor scale_rows(const Tensor& x, const Tensor& g) {
  Shape expect = x.shape();
  expect.back() = 1;
  if (g.shape() != expect) {
    throw ShapeError("scale_rows: expected factor shape " + shape_str(expect) + ", got " + shape_str(g.shape()));
  }
  const std::size_t d = x.dim(-1), rows = g.size();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = x[r * d + k] * g[r];
  return Tensor::make_result(x.shape(), std::move(out), {x, g}, [d, rows](detail::Node& self) {
    auto& px = detail::parent(self, 0);
    auto& pg = detail::parent(self, 1);
    if (px.requires_grad) {
      auto& gx = px.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < d; ++k) gx[r * d + k] += self.grad[r * d + k] * pg.value[r];
    }
    if (pg.requires_grad) {
      auto& gg = pg.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += self.grad[r * d + k] * px.value[r * d + k];
        gg[r] += acc;
      }
    }
  });
}

// y = x * scale[r] + shift[r] per row of the last axis, constants not tracked.
inline Tensor rescale_rows(const Tensor& x, std::vector<double> scale_by, const std::vector<double>& shift) {
  const std::size_t d = x.dim(-1), rows = x.size() / d;
  if (scale_by.size() != rows || shift.size() != rows) throw ShapeError("rescale_rows: one scale/shift per row required");
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = x[r * d + k] * scale_by[r] + shift[r];
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [d, rows, s = std::move(scale_by)](detail::Node& self) {
                               auto& g = detail::parent(self, 0).ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t k = 0; k < d; ++k) g[r * d + k] += self.grad[r * d + k] * s[r];
                             });
}

// ----------------------------------------------------------------- products

// x[..., in] W[out, in]^T + b[out]. `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(1), out_dim = weight.dim(0), rows = x.size() / in;
  if (bias.defined() && bias.shape() != Shape{out_dim}) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<double> out(rows * out_dim);
  {
    detail::MapC X(x.values().data(), rows, in);
    detail::MapC W(weight.values().data(), out_dim, in);
    detail::Map Y(out.data(), rows, out_dim);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) Y.rowwise() += detail::VecMapC(bias.values().data(), out_dim).transpose();
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result(std::move(shape), std::move(out), std::move(parents),
                             [rows, in, out_dim](detail::Node& self) {
                               auto& px = detail::parent(self, 0);
                               auto& pw = detail::parent(self, 1);
                               detail::MapC G(self.grad.data(), rows, out_dim);
                               if (px.requires_grad) {
                                 detail::Map GX(px.ensure_grad().data(), rows, in);
                                 GX.noalias() += G * detail::MapC(pw.value.data(), out_dim, in);
                               }
                               if (pw.requires_grad) {
                                 detail::Map GW(pw.ensure_grad().data(), out_dim, in);
                                 GW.noalias() += G.transpose() * detail::MapC(px.value.data(), rows, in);
                               }
                               if (self.parents.size() > 2) {
                                 auto& pb = detail::parent(self, 2);
                                 if (pb.requires_grad) {
                                   auto& gb = pb.ensure_grad();
                                   for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t o = 0; o < out_dim; ++o) gb[o] += G(r, o);
                                 }
                               }
                             });
}

// a[..., p, q] x b[..., q, r]. `b` is either rank 2 (shared across the batch)
// or carries the same leading dims as `a`.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  auto mismatch = [&] {
    return ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const std::size_t p = a.dim(-2), q = a.dim(-1), r = b.dim(-1);
  if (b.dim(-2) != q) throw mismatch();
  const bool shared = b.rank() == 2;
  if (!shared) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw mismatch();
    }
  }
  const std::size_t batch = a.size() / (p * q);
  Shape shape = a.shape();
  shape.back() = r;
  std::vector<double> out(batch * p * r);
  if (shared) {
    detail::Map(out.data(), batch * p, r).noalias() =
        detail::MapC(a.values().data(), batch * p, q) * detail::MapC(b.values().data(), q, r);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      detail::Map(out.data() + i * p * r, p, r).noalias() =
          detail::MapC(a.values().data() + i * p * q, p, q) * detail::MapC(b.values().data() + i * q * r, q, r);
    }
  }
  return Tensor::make_result(std::move(shape), std::move(out), {a, b},
                             [p, q, r, batch, shared](detail::Node& self) {
                               auto& pa = detail::parent(self, 0);
                               auto& pb = detail::parent(self, 1);
                               if (shared) {
                                 detail::MapC G(self.grad.data(), batch * p, r);
                                 if (pa.requires_grad)
                                   detail::Map(pa.ensure_grad().data(), batch * p, q).noalias() +=
                                       G * detail::MapC(pb.value.data(), q, r).transpose();
                                 if (pb.requires_grad)
                                   detail::Map(pb.ensure_grad().data(), q, r).noalias() +=
                                       detail::MapC(pa.value.data(), batch * p, q).transpose() * G;
                                 return;
                               }
                               for (std::size_t i = 0; i < batch; ++i) {
                                 detail::MapC G(self.grad.data() + i * p * r, p, r);
                                 if (pa.requires_grad)
                                   detail::Map(pa.ensure_grad().data() + i * p * q, p, q).noalias() +=
                                       G * detail::MapC(pb.value.data() + i * q * r, q, r).transpose();
                                 if (pb.requires_grad)
                                   detail::Map(pb.ensure_grad().data() + i * q * r, q, r).noalias() +=
                                       detail::MapC(pa.value.data() + i * p * q, p, q).transpose() * G;
                               }
                             });
}

// --------------------------------------------------------------- nonlinear

// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const auto v = detail::axis_view(x.shape(), x.normalize_axis(axis));
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.length * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.length; ++k) mx = std::max(mx, x[base + k * v.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < v.length; ++k) {
        double e = std::exp(x[base + k * v.inner] - mx);
        out[base + k * v.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < v.length; ++k) out[base + k * v.inner] /= z;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [v](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.length * v.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < v.length; ++k) {
          std::size_t i = base + k * v.inner;
          dot += self.grad[i] * self.value[i];
        }
        for (std::size_t k = 0; k < v.length; ++k) {
          std::size_t i = base + k * v.inner;
          g[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

// Moving average over the last axis with (kernel-1)/2 edge-replicated samples
// on each side, so the output length equals the input length.
inline Tensor avg_pool_1d_replicate(const Tensor& x, std::size_t kernel) {
  if (kernel == 0 || kernel % 2 == 0) {
    throw ConfigError("avg_pool_1d_replicate: kernel must be odd and positive, got " + std::to_string(kernel));
  }
  const std::size_t d = x.dim(-1), rows = x.size() / d;
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const double inv = 1.0 / static_cast<double>(kernel);
  auto clamp = [d](std::ptrdiff_t i) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(d) - 1));
  };
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0.0;
      for (std::ptrdiff_t o = -half; o <= half; ++o) acc += x[r * d + clamp(static_cast<std::ptrdiff_t>(i) + o)];
      out[r * d + i] = acc * inv;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [d, rows, half, inv, clamp](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < d; ++i) {
        const double gi = self.grad[r * d + i] * inv;
        for (std::ptrdiff_t o = -half; o <= half; ++o) g[r * d + clamp(static_cast<std::ptrdiff_t>(i) + o)] += gi;
      }
  });
}

// Identifies one dropout site and pass: masks are a pure function of
// (rng.seed, stream, step, element index).
struct DropoutKey {
  CounterRng rng;
  std::uint64_t stream = 0;
  std::uint64_t step = 0;
};

// Inverted dropout; identity when !training or rate == 0.
inline Tensor dropout(const Tensor& x, double rate, const DropoutKey& key, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = key.rng.uniform(key.stream, key.step, i) < rate ? 0.0 : keep_scale;
  }
  return mul_const(x, std::move(mask));
}

// ------------------------------------------------------------- divergences

// KL(p || q) summed over the last axis and averaged over the leading rows.
// Log arguments are floored at kLogClamp so 0 * log 0 contributes 0.
inline Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  detail::require_same_shape(p, q, "kl_divergence");
  const std::size_t n = p.size();
  const double rows = static_cast<double>(n / p.dim(-1));
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += p[i] * (std::log(std::max(p[i], kLogClamp)) - std::log(std::max(q[i], kLogClamp)));
  }
  return Tensor::make_result({1}, {acc / rows}, {p, q}, [n, rows](detail::Node& self) {
    auto& pp = detail::parent(self, 0);
    auto& pq = detail::parent(self, 1);
    const double g = self.grad[0] / rows;
    if (pp.requires_grad) {
      auto& gp = pp.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        double pv = pp.value[i];
        double d = std::log(std::max(pv, kLogClamp)) - std::log(std::max(pq.value[i], kLogClamp));
        if (pv > kLogClamp) d += 1.0;
        gp[i] += g * d;
      }
    }
    if (pq.requires_grad) {
      auto& gq = pq.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (pq.value[i] > kLogClamp) gq[i] -= g * pp.value[i] / pq.value[i];
      }
    }
  });
}

// All ordered-pair divergences between the rows of p[..., N, d]:
// out[..., i, j] = KL(p_i || p_j). The diagonal is exactly zero.
inline Tensor pairwise_kl(const Tensor& p) {
  if (p.rank() < 2) throw ShapeError("pairwise_kl needs rank >= 2, got " + shape_str(p.shape()));
  const std::size_t n = p.dim(-2), d = p.dim(-1), batch = p.size() / (n * d);
  std::vector<double> logp(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) logp[i] = std::log(std::max(p[i], kLogClamp));
  Shape shape = p.shape();
  shape.back() = n;
  std::vector<double> out(batch * n * n, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* pb = p.values().data() + b * n * d;
    const double* lb = logp.data() + b * n * d;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += pb[i * d + k] * (lb[i * d + k] - lb[j * d + k]);
        out[(b * n + i) * n + j] = acc;
      }
  }
  return Tensor::make_result(std::move(shape), std::move(out), {p},
                             [n, d, batch, logp = std::move(logp)](detail::Node& self) {
                               auto& pp = detail::parent(self, 0);
                               auto& g = pp.ensure_grad();
                               for (std::size_t b = 0; b < batch; ++b) {
                                 const double* pb = pp.value.data() + b * n * d;
                                 const double* lb = logp.data() + b * n * d;
                                 double* gb = g.data() + b * n * d;
                                 for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < n; ++j) {
                                     if (i == j) continue;
                                     const double gij = self.grad[(b * n + i) * n + j];
                                     if (gij == 0.0) continue;
                                     for (std::size_t k = 0; k < d; ++k) {
                                       const double pik = pb[i * d + k];
                                       double di = lb[i * d + k] - lb[j * d + k];
                                       if (pik > kLogClamp) di += 1.0;
                                       gb[i * d + k] += gij * di;
                                       if (pb[j * d + k] > kLogClamp) gb[j * d + k] -= gij * pik / pb[j * d + k];
                                     }
                                   }
                               }
                             });
}

// ---------------------------------------------------------------- spectra

// Half spectrum of a real signal, packed as a tensor [..., d/2+1, 2] holding
// (real, imaginary) pairs so it can flow through the graph.
class ComplexSpectrum {
 public:
  ComplexSpectrum() = default;
  explicit ComplexSpectrum(Tensor packed) : packed_(std::move(packed)) {
    if (packed_.rank() < 2 || packed_.dim(-1) != 2) {
      throw ShapeError("complex spectrum needs a trailing (re, im) axis, got " + shape_str(packed_.shape()));
    }
  }

  const Tensor& tensor() const { return packed_; }
  std::size_t bins() const { return packed_.dim(-2); }
  std::size_t rows() const { return packed_.size() / (2 * bins()); }

  std::complex<double> at(std::size_t row, std::size_t bin) const {
    const std::size_t i = (row * bins() + bin) * 2;
    return {packed_[i], packed_[i + 1]};
  }
  double magnitude(std::size_t row, std::size_t bin) const { return std::abs(at(row, bin)); }

 private:
  Tensor packed_;
};

// Unnormalized forward real DFT along the last axis (length d, even).
inline ComplexSpectrum rfft(const Tensor& x) {
  const std::size_t d = x.dim(-1), rows = x.size() / d, nb = d / 2 + 1;
  if (d % 2 != 0) throw ConfigError("rfft needs an even length, got " + std::to_string(d));
  Shape shape = x.shape();
  shape.back() = nb;
  shape.push_back(2);
  std::vector<double> out(rows * nb * 2);
  std::vector<fft::cd> bins(nb);
  for (std::size_t r = 0; r < rows; ++r) {
    fft::real_forward(std::span<const double>(x.values().data() + r * d, d), bins);
    for (std::size_t k = 0; k < nb; ++k) {
      out[(r * nb + k) * 2] = bins[k].real();
      out[(r * nb + k) * 2 + 1] = bins[k].imag();
    }
  }
  // Adjoint: dx_n = Re(sum_k G_k e^{+2 pi i k n / d}) over the stored bins.
  return ComplexSpectrum(Tensor::make_result(std::move(shape), std::move(out), {x}, [d, rows, nb](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    std::vector<fft::cd> buf(d);
    for (std::size_t r = 0; r < rows; ++r) {
      std::fill(buf.begin(), buf.end(), fft::cd{});
      for (std::size_t k = 0; k < nb; ++k) buf[k] = {self.grad[(r * nb + k) * 2], self.grad[(r * nb + k) * 2 + 1]};
      fft::inverse_unnormalized(buf);
      for (std::size_t n = 0; n < d; ++n) g[r * d + n] += buf[n].real();
    }
  }));
}

// Inverse of rfft with 1/d normalization; irfft(rfft(x), d) == x.
inline Tensor irfft(const ComplexSpectrum& s, std::size_t d) {
  const Tensor& t = s.tensor();
  const std::size_t nb = s.bins(), rows = s.rows();
  if (d == 0 || d % 2 != 0) throw ConfigError("irfft needs an even length, got " + std::to_string(d));
  if (nb != d / 2 + 1) {
    throw ShapeError("irfft: " + std::to_string(nb) + " bins given, length " + std::to_string(d) + " needs " +
                     std::to_string(d / 2 + 1));
  }
  Shape shape(t.shape().begin(), t.shape().end() - 1);
  shape.back() = d;
  std::vector<double> out(rows * d);
  std::vector<fft::cd> bins(nb);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < nb; ++k) bins[k] = {t[(r * nb + k) * 2], t[(r * nb + k) * 2 + 1]};
    fft::real_inverse(bins, std::span<double>(out.data() + r * d, d));
  }
  // Adjoint: dS_k = (c_k / d) * FFT(g)_k with c_k = 2 on interior bins, 1 on
  // DC and Nyquist whose imaginary parts never reach the output.
  return Tensor::make_result(std::move(shape), std::move(out), {t}, [d, rows, nb](detail::Node& self) {
    auto& g = detail::parent(self, 0).ensure_grad();
    std::vector<fft::cd> buf(d);
    const double inv = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t n = 0; n < d; ++n) buf[n] = {self.grad[r * d + n], 0.0};
      fft::forward(buf);
      for (std::size_t k = 0; k < nb; ++k) {
        const bool edge = k == 0 || k == nb - 1;
        const double c = (edge ? 1.0 : 2.0) * inv;
        g[(r * nb + k) * 2] += c * buf[k].real();
        if (!edge) g[(r * nb + k) * 2 + 1] += c * buf[k].imag();
      }
    }
  });
}

}  // namespace dtaf
