#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "diffclip/autodiff.hpp"
#include "diffclip/errors.hpp"
#include "diffclip/tensor.hpp"

// Differentiable operations over Var. Each op computes its value eagerly and
// registers a backward rule that accumulates (+=) into its inputs' gradients.

namespace diffclip {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}
inline MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

// Index decomposition for a reduction/normalisation along one axis:
// flat index = (o * n + k) * inner + i.
struct AxisLayout {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                         shape_str(shape));
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_matrix(const Var& a, const char* op) {
  if (a.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

inline void add_into(Tensor& dst, const Tensor& src, double scale = 1.0) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner extents differ " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  }
  Tensor out(Shape{av.rows(), bv.cols()});
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  const auto ia = a.id(), ib = b.id();
  return a.tape().emit("matmul", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    const auto gm = detail::as_matrix(g);
    if (t.requires_grad(ia)) {
      detail::as_matrix(t.grad_buffer(ia)).noalias() += gm * detail::as_matrix(t.value(ib)).transpose();
    }
    if (t.requires_grad(ib)) {
      detail::as_matrix(t.grad_buffer(ib)).noalias() += detail::as_matrix(t.value(ia)).transpose() * gm;
    }
  });
}

/// a · bᵀ without materialising the transpose.
inline Var matmul_nt(Var a, Var b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: inner extents differ " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()) + "^T");
  }
  Tensor out(Shape{av.rows(), bv.rows()});
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv).transpose();
  const auto ia = a.id(), ib = b.id();
  return a.tape().emit("matmul_nt", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    const auto gm = detail::as_matrix(g);
    if (t.requires_grad(ia)) {
      detail::as_matrix(t.grad_buffer(ia)).noalias() += gm * detail::as_matrix(t.value(ib));
    }
    if (t.requires_grad(ib)) {
      detail::as_matrix(t.grad_buffer(ib)).noalias() += gm.transpose() * detail::as_matrix(t.value(ia));
    }
  });
}

inline Var transpose(Var a) {
  detail::require_matrix(a, "transpose");
  const Tensor& av = a.value();
  Tensor out(Shape{av.cols(), av.rows()});
  detail::as_matrix(out) = detail::as_matrix(av).transpose();
  const auto ia = a.id();
  return a.tape().emit("transpose", std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    detail::as_matrix(t.grad_buffer(ia)) += detail::as_matrix(g).transpose();
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const auto ia = a.id();
  return a.tape().emit("reshape", std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    detail::add_into(t.grad_buffer(ia), g);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  detail::add_into(out, b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().emit("add", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) detail::add_into(t.grad_buffer(ia), g);
    if (t.requires_grad(ib)) detail::add_into(t.grad_buffer(ib), g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  detail::add_into(out, b.value(), -1.0);
  const auto ia = a.id(), ib = b.id();
  return a.tape().emit("sub", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) detail::add_into(t.grad_buffer(ia), g);
    if (t.requires_grad(ib)) detail::add_into(t.grad_buffer(ib), g, -1.0);
  });
}

/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  {
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().emit("mul", std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    auto gd = g.data();
    if (t.requires_grad(ia)) {
      auto ga = t.grad_buffer(ia).data();
      auto bv = t.value(ib).data();
      for (std::size_t i = 0; i < gd.size(); ++i) ga[i] += gd[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib).data();
      auto av = t.value(ia).data();
      for (std::size_t i = 0; i < gd.size(); ++i) gb[i] += gd[i] * av[i];
    }
  });
}

/// a (m×n) + row (n or 1×n), broadcast over rows.
inline Var add_row(Var a, Var row) {
  detail::require_matrix(a, "add_row");
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.size() != av.cols()) {
    throw DimensionError("add_row: row " + shape_str(rv.shape()) + " does not match " + shape_str(av.shape()));
  }
  Tensor out = av;
  const std::size_t m = av.rows(), n = av.cols();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += rv[c];
  const auto ia = a.id(), ir = row.id();
  return a.tape().emit("add_row", std::move(out), {a, row}, [ia, ir, m, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) detail::add_into(t.grad_buffer(ia), g);
    if (t.requires_grad(ir)) {
      Tensor& gr = t.grad_buffer(ir);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gr[c] += g[r * n + c];
    }
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  const auto ia = a.id();
  return a.tape().emit("scale", std::move(out), {a}, [ia, c](Tape& t, const Tensor& g) {
    detail::add_into(t.grad_buffer(ia), g, c);
  });
}

/// s · a for a scalar Var s.
inline Var scale_by(Var a, Var s) {
  if (s.value().size() != 1) throw DimensionError("scale_by: factor must be scalar, got " + shape_str(s.shape()));
  const double c = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  const auto ia = a.id(), is = s.id();
  return a.tape().emit("scale_by", std::move(out), {a, s}, [ia, is](Tape& t, const Tensor& g) {
    const double c = t.value(is)[0];
    if (t.requires_grad(ia)) detail::add_into(t.grad_buffer(ia), g, c);
    if (t.requires_grad(is)) {
      const Tensor& av = t.value(ia);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      t.grad_buffer(is)[0] += acc;
    }
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::exp(v);
  const auto ia = a.id();
  const auto io = a.tape().num_nodes();
  return a.tape().emit("exp", std::move(out), {a}, [ia, io](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    const Tensor& y = t.value(io);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

/// Exact (erf-based) GELU.
inline Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  const auto ia = a.id();
  return a.tape().emit("gelu", std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    const Tensor& x = t.value(ia);
    const double inv_sqrt_2pi = std::numbers::inv_sqrtpi * kInvSqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      ga[i] += g[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const auto ia = a.id();
  return a.tape().emit("sum", Tensor::scalar(s), {a}, [ia](Tape& t, const Tensor& g) {
    for (double& v : t.grad_buffer(ia).data()) v += g[0];
  });
}

/// Inner product of two equally shaped tensors, as a scalar.
inline Var dot(Var a, Var b) {
  detail::require_same_shape(a, b, "dot");
  double s = 0.0;
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().emit("dot", Tensor::scalar(s), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) detail::add_into(t.grad_buffer(ia), t.value(ib), g[0]);
    if (t.requires_grad(ib)) detail::add_into(t.grad_buffer(ib), t.value(ia), g[0]);
  });
}

/// Mean along one axis; the axis is removed (rank-1 input gives shape [1]).
inline Var mean(Var a, std::size_t axis) {
  const Shape& in = a.shape();
  const auto l = detail::axis_layout(in, axis, "mean");
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (i != axis) out_shape.push_back(in[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  const Tensor& x = a.value();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t k = 0; k < l.n; ++k)
      for (std::size_t i = 0; i < l.inner; ++i) out[o * l.inner + i] += x[(o * l.n + k) * l.inner + i];
  for (double& v : out.data()) v /= static_cast<double>(l.n);
  const auto ia = a.id();
  return a.tape().emit("mean", std::move(out), {a}, [ia, l](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    const double inv = 1.0 / static_cast<double>(l.n);
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t k = 0; k < l.n; ++k)
        for (std::size_t i = 0; i < l.inner; ++i) ga[(o * l.n + k) * l.inner + i] += g[o * l.inner + i] * inv;
  });
}

// ---------------------------------------------------------------------------
// Normalisations

/// Softmax along `axis`, max-subtracted.
inline Var softmax(Var a, std::size_t axis) {
  const auto l = detail::axis_layout(a.shape(), axis, "softmax");
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.n * l.inner + i;
      double mx = x[base];
      for (std::size_t k = 1; k < l.n; ++k) mx = std::max(mx, x[base + k * l.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < l.n; ++k) {
        const double e = std::exp(x[base + k * l.inner] - mx);
        y[base + k * l.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < l.n; ++k) y[base + k * l.inner] /= z;
    }
  }
  const auto ia = a.id();
  const auto io = a.tape().num_nodes();
  return a.tape().emit("softmax", std::move(y), {a}, [ia, io, l](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(io);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t base = o * l.n * l.inner + i;
        double s = 0.0;
        for (std::size_t k = 0; k < l.n; ++k) s += g[base + k * l.inner] * y[base + k * l.inner];
        for (std::size_t k = 0; k < l.n; ++k) {
          const std::size_t j = base + k * l.inner;
          ga[j] += y[j] * (g[j] - s);
        }
      }
    }
  });
}

/// Row softmax of an N×M score matrix with entries (i, j > i) masked to zero weight.
inline Var causal_softmax(Var a) {
  detail::require_matrix(a, "causal_softmax");
  const Tensor& x = a.value();
  const std::size_t n = x.rows(), m = x.cols();
  Tensor y(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t last = std::min(r, m - 1);
    const double* xr = &x.data()[r * m];
    double* yr = &y.data()[r * m];
    double mx = xr[0];
    for (std::size_t c = 1; c <= last; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (std::size_t c = 0; c <= last; ++c) z += (yr[c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c <= last; ++c) yr[c] /= z;
  }
  const auto ia = a.id();
  const auto io = a.tape().num_nodes();
  return a.tape().emit("causal_softmax", std::move(y), {a}, [ia, io, n, m](Tape& t, const Tensor& g) {
    const Tensor& y = t.value(io);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < m; ++c) s += g[r * m + c] * y[r * m + c];
      for (std::size_t c = 0; c < m; ++c) ga[r * m + c] += y[r * m + c] * (g[r * m + c] - s);
    }
  });
}

/// Layer norm over the last axis with affine gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match last extent of " + shape_str(xv.shape()));
  }
  const std::size_t rows = xv.size() / n;
  Tensor y(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &xv.data()[r * n];
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (xr[c] - mu) * is;
      xhat[r * n + c] = h;
      y[r * n + c] = h * gv[c] + bv[c];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().emit(
      "layer_norm", std::move(y), {x, gain, bias},
      [ix, ig, ib, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        if (t.requires_grad(ix)) {
          Tensor& gx = t.grad_buffer(ix);
          const Tensor& gv = t.value(ig);
          std::vector<double> gh(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              gh[c] = g[r * n + c] * gv[c];
              m1 += gh[c];
              m2 += gh[c] * xhat[r * n + c];
            }
            m1 /= static_cast<double>(n);
            m2 /= static_cast<double>(n);
            for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += inv_std[r] * (gh[c] - m1 - xhat[r * n + c] * m2);
          }
        }
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad_buffer(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * xhat[r * n + c];
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
        }
      });
}

/// x / sqrt(mean(x²) + eps) over the last axis, no affine.
inline Var rms_norm(Var x, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("rms_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor y(xv.shape());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t c = 0; c < n; ++c) ms += xv[r * n + c] * xv[r * n + c];
    inv_rms[r] = 1.0 / std::sqrt(ms / static_cast<double>(n) + eps);
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] = xv[r * n + c] * inv_rms[r];
  }
  const auto ix = x.id();
  return x.tape().emit("rms_norm", std::move(y), {x},
                       [ix, n, rows, inv_rms = std::move(inv_rms)](Tape& t, const Tensor& g) {
                         const Tensor& xv = t.value(ix);
                         Tensor& gx = t.grad_buffer(ix);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double gdotx = 0.0;
                           for (std::size_t c = 0; c < n; ++c) gdotx += g[r * n + c] * xv[r * n + c];
                           const double ir = inv_rms[r];
                           const double k = ir * ir * ir * gdotx / static_cast<double>(n);
                           for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += g[r * n + c] * ir - xv[r * n + c] * k;
                         }
                       });
}

/// Scales every slice along `axis` to unit L2 norm. A zero slice is a numeric error.
inline Var l2_normalize(Var a, std::size_t axis) {
  const auto l = detail::axis_layout(a.shape(), axis, "l2_normalize");
  const Tensor& x = a.value();
  Tensor y(x.shape());
  std::vector<double> norms(l.outer * l.inner);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.n * l.inner + i;
      double ss = 0.0;
      for (std::size_t k = 0; k < l.n; ++k) ss += x[base + k * l.inner] * x[base + k * l.inner];
      const double nrm = std::sqrt(ss);
      if (!(nrm > 0.0) || !std::isfinite(nrm)) throw NumericError("l2_normalize: zero or non-finite slice norm");
      norms[o * l.inner + i] = nrm;
      for (std::size_t k = 0; k < l.n; ++k) y[base + k * l.inner] = x[base + k * l.inner] / nrm;
    }
  }
  const auto ia = a.id();
  const auto io = a.tape().num_nodes();
  return a.tape().emit("l2_normalize", std::move(y), {a},
                       [ia, io, l, norms = std::move(norms)](Tape& t, const Tensor& g) {
                         const Tensor& y = t.value(io);
                         Tensor& ga = t.grad_buffer(ia);
                         for (std::size_t o = 0; o < l.outer; ++o) {
                           for (std::size_t i = 0; i < l.inner; ++i) {
                             const std::size_t base = o * l.n * l.inner + i;
                             double yg = 0.0;
                             for (std::size_t k = 0; k < l.n; ++k) yg += y[base + k * l.inner] * g[base + k * l.inner];
                             const double inv = 1.0 / norms[o * l.inner + i];
                             for (std::size_t k = 0; k < l.n; ++k) {
                               const std::size_t j = base + k * l.inner;
                               ga[j] += (g[j] - y[j] * yg) * inv;
                             }
                           }
                         }
                       });
}

/// Mean over rows of -log softmax(logits[r])[targets[r]], via log-sum-exp.
inline Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets) {
  detail::require_matrix(logits, "cross_entropy_rows");
  const Tensor& x = logits.value();
  const std::size_t m = x.rows(), n = x.cols();
  if (targets.size() != m) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(x.shape()));
  }
  for (std::size_t tg : targets) {
    if (tg >= n) throw DimensionError("cross_entropy_rows: target " + std::to_string(tg) + " out of range");
  }
  std::vector<double> lse(m);
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    double mx = x[r * n];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, x[r * n + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(x[r * n + c] - mx);
    lse[r] = mx + std::log(z);
    loss += lse[r] - x[r * n + targets[r]];
  }
  loss /= static_cast<double>(m);
  const auto il = logits.id();
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return logits.tape().emit("cross_entropy_rows", Tensor::scalar(loss), {logits},
                            [il, m, n, tg = std::move(tg), lse = std::move(lse)](Tape& t, const Tensor& g) {
                              const Tensor& x = t.value(il);
                              Tensor& gx = t.grad_buffer(il);
                              const double s = g[0] / static_cast<double>(m);
                              for (std::size_t r = 0; r < m; ++r) {
                                for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += s * std::exp(x[r * n + c] - lse[r]);
                                gx[r * n + tg[r]] -= s;
                              }
                            });
}

// ---------------------------------------------------------------------------
// Structural

/// Sub-range [start, start+length) along `axis`.
inline Var narrow(Var a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto l = detail::axis_layout(a.shape(), axis, "narrow");
  if (length == 0 || start + length > l.n) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  Shape s = a.shape();
  s[axis] = length;
  Tensor out(s);
  const Tensor& x = a.value();
  for (std::size_t o = 0; o < l.outer; ++o)
    std::copy_n(&x.data()[(o * l.n + start) * l.inner], length * l.inner, &out.data()[o * length * l.inner]);
  const auto ia = a.id();
  return a.tape().emit("narrow", std::move(out), {a}, [ia, l, start, length](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < l.outer; ++o) {
      double* dst = &ga.data()[(o * l.n + start) * l.inner];
      const double* src = &g.data()[o * length * l.inner];
      for (std::size_t j = 0; j < length * l.inner; ++j) dst[j] += src[j];
    }
  });
}

/// Rectangular sub-block of a matrix.
inline Var block(Var a, std::size_t row0, std::size_t rows, std::size_t col0, std::size_t cols) {
  detail::require_matrix(a, "block");
  const Tensor& x = a.value();
  const std::size_t n = x.cols();
  if (rows == 0 || cols == 0 || row0 + rows > x.rows() || col0 + cols > n) {
    throw DimensionError("block: [" + std::to_string(row0) + "+" + std::to_string(rows) + ", " +
                         std::to_string(col0) + "+" + std::to_string(cols) + "] outside " + shape_str(x.shape()));
  }
  Tensor out(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(&x.data()[(row0 + r) * n + col0], cols, &out.data()[r * cols]);
  const auto ia = a.id();
  return a.tape().emit("block", std::move(out), {a}, [ia, n, row0, rows, col0, cols](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[(row0 + r) * n + col0 + c] += g[r * cols + c];
  });
}

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis " + std::to_string(axis) + " invalid for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  const auto l = detail::axis_layout(out_shape, axis, "concat");
  Tensor out(out_shape);
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.shape()[axis];
    const Tensor& x = p.value();
    for (std::size_t o = 0; o < l.outer; ++o)
      std::copy_n(&x.data()[o * w * l.inner], w * l.inner, &out.data()[(o * l.n + off) * l.inner]);
    ids.push_back(p.id());
    offsets.push_back(off);
    widths.push_back(w);
    off += w;
  }
  return parts[0].tape().emit("concat", std::move(out), parts,
                              [l, ids = std::move(ids), offsets = std::move(offsets),
                               widths = std::move(widths)](Tape& t, const Tensor& g) {
                                for (std::size_t p = 0; p < ids.size(); ++p) {
                                  if (!t.requires_grad(ids[p])) continue;
                                  Tensor& gp = t.grad_buffer(ids[p]);
                                  const std::size_t w = widths[p];
                                  for (std::size_t o = 0; o < l.outer; ++o) {
                                    const double* src = &g.data()[(o * l.n + offsets[p]) * l.inner];
                                    double* dst = &gp.data()[o * w * l.inner];
                                    for (std::size_t j = 0; j < w * l.inner; ++j) dst[j] += src[j];
                                  }
                                }
                              });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Splits `axis` into `parts` equal pieces.
inline std::vector<Var> split(Var a, std::size_t axis, std::size_t parts) {
  const auto l = detail::axis_layout(a.shape(), axis, "split");
  if (parts == 0 || l.n % parts != 0) {
    throw DimensionError("split: axis " + std::to_string(axis) + " of " + shape_str(a.shape()) +
                         " not divisible into " + std::to_string(parts) + " parts");
  }
  const std::size_t w = l.n / parts;
  std::vector<Var> out;
  out.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) out.push_back(narrow(a, axis, p * w, w));
  return out;
}

/// Rows of a 2-D table selected by index (repeats allowed; backward scatters).
inline Var gather_rows(Var table, std::span<const std::size_t> indices) {
  detail::require_matrix(table, "gather_rows");
  const Tensor& x = table.value();
  const std::size_t n = x.cols();
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  for (std::size_t i : indices) {
    if (i >= x.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
    }
  }
  Tensor out(Shape{indices.size(), n});
  for (std::size_t r = 0; r < indices.size(); ++r) std::copy_n(&x.data()[indices[r] * n], n, &out.data()[r * n]);
  const auto it = table.id();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return table.tape().emit("gather_rows", std::move(out), {table}, [it, n, idx = std::move(idx)](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_buffer(it);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < n; ++c) gt[idx[r] * n + c] += g[r * n + c];
  });
}

}  // namespace diffclip
