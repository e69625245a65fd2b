#pragma once

// Differentiable operators. Feature maps are laid out [C, H, W]; token
// matrices are [N, C]. Reductions accumulate in double.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <span>
#include <vector>

#include "mvgsr/autodiff/tensor.hpp"

namespace mvgsr::ad {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    fail(Errc::ShapeMismatch, std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void require_ndim(const Tensor<T>& a, std::size_t n, const char* op) {
  if (a.ndim() != n)
    fail(Errc::ShapeMismatch, std::string(op) + ": expected " + std::to_string(n) + "-d input, got " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  check_finite(a, "add");
  check_finite(b, "add");
  auto pa = a.impl(), pb = b.impl();
  Tensor<T> out = make_output<T>(a.shape(), "add", {a, b}, [pa, pb](TensorImpl<T>& o) {
    for (auto* g : {grad_of(pa), grad_of(pb)})
      if (g)
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  check_finite(a, "sub");
  check_finite(b, "sub");
  auto pa = a.impl(), pb = b.impl();
  Tensor<T> out = make_output<T>(a.shape(), "sub", {a, b}, [pa, pb](TensorImpl<T>& o) {
    if (T* g = grad_of(pa))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (T* g = grad_of(pb))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
  });
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  check_finite(a, "mul");
  check_finite(b, "mul");
  auto pa = a.impl(), pb = b.impl();
  Tensor<T> out = make_output<T>(a.shape(), "mul", {a, b}, [pa, pb](TensorImpl<T>& o) {
    if (T* g = grad_of(pa))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pb->data[i];
    if (T* g = grad_of(pb))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pa->data[i];
  });
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  check_finite(a, "scale");
  auto pa = a.impl();
  Tensor<T> out = make_output<T>(a.shape(), "scale", {a}, [pa, s](TensorImpl<T>& o) {
    if (T* g = grad_of(pa))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += s * o.grad[i];
  });
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = s * a.data()[i];
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  check_finite(a, "relu");
  auto& kinks = KinkMonitor::current();
  if (kinks.active)
    for (T v : a.values()) kinks.mix(v > T(0));
  auto pa = a.impl();
  Tensor<T> out = make_output<T>(a.shape(), "relu", {a}, [pa](TensorImpl<T>& o) {
    if (T* g = grad_of(pa))
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (pa->data[i] > T(0)) g[i] += o.grad[i];
  });
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = std::max(a.data()[i], T(0));
  return out;
}

/// Copy with a new shape of the same element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    fail(Errc::ShapeMismatch, "reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  auto pa = a.impl();
  Tensor<T> out = make_output<T>(std::move(shape), "reshape", {a}, [pa](TensorImpl<T>& o) {
    if (T* g = grad_of(pa))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
  out.values() = a.values();
  return out;
}

// ---------------------------------------------------------------------------
// reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  check_finite(a, "sum");
  auto pa = a.impl();
  Tensor<T> out = make_output<T>({1}, "sum", {a}, [pa](TensorImpl<T>& o) {
    if (T* g = grad_of(pa))
      for (std::size_t i = 0; i < pa->data.size(); ++i) g[i] += o.grad[0];
  });
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v);
  out.data()[0] = static_cast<T>(acc);
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(a.numel())));
}

/// mean(|a|); the subgradient at 0 is 0.
template <typename T>
Tensor<T> mean_abs(const Tensor<T>& a) {
  check_finite(a, "mean_abs");
  auto& kinks = KinkMonitor::current();
  if (kinks.active)
    for (T v : a.values()) kinks.mix(static_cast<std::uint64_t>((v > T(0)) - (v < T(0)) + 1));
  auto pa = a.impl();
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(a.numel()));
  Tensor<T> out = make_output<T>({1}, "mean_abs", {a}, [pa, inv_n](TensorImpl<T>& o) {
    if (T* g = grad_of(pa)) {
      const T s = o.grad[0] * inv_n;
      for (std::size_t i = 0; i < pa->data.size(); ++i) {
        const T v = pa->data[i];
        g[i] += v > T(0) ? s : (v < T(0) ? -s : T(0));
      }
    }
  });
  double acc = 0.0;
  for (T v : a.values()) acc += std::abs(static_cast<double>(v));
  out.data()[0] = static_cast<T>(acc / static_cast<double>(a.numel()));
  return out;
}

/// Mean absolute error.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  return mean_abs(sub(pred, target));
}

// ---------------------------------------------------------------------------
// linear algebra

/// [M, K] x [K, N] -> [M, N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_ndim(a, 2, "matmul");
  detail::require_ndim(b, 2, "matmul");
  if (a.dim(1) != b.dim(0))
    fail(Errc::ShapeMismatch, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  check_finite(a, "matmul");
  check_finite(b, "matmul");
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  auto pa = a.impl(), pb = b.impl();
  Tensor<T> out = make_output<T>({a.dim(0), b.dim(1)}, "matmul", {a, b}, [pa, pb, m, k, n](TensorImpl<T>& o) {
    CMatMap<T> dy(o.grad.data(), m, n);
    if (T* g = grad_of(pa)) MatMap<T>(g, m, k).noalias() += dy * CMatMap<T>(pb->data.data(), k, n).transpose();
    if (T* g = grad_of(pb)) MatMap<T>(g, k, n).noalias() += CMatMap<T>(pa->data.data(), m, k).transpose() * dy;
  });
  MatMap<T>(out.data(), m, n).noalias() = CMatMap<T>(a.data(), m, k) * CMatMap<T>(b.data(), k, n);
  return out;
}

namespace detail {

struct ConvGeom {
  std::size_t cin, h, w, kh, kw, stride, pad, ho, wo;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw_out;
        const T* plane = x + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw_out;
        T* plane = dx + c * g.h * g.w;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const T* src = row + oy * g.wo;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution (cross-correlation) with zero padding.
/// x: [Cin, H, W], weight: [Cout, Cin, kh, kw], bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride = 1, int pad = 0) {
  detail::require_ndim(x, 3, "conv2d");
  detail::require_ndim(weight, 4, "conv2d");
  if (weight.dim(1) != x.dim(0))
    fail(Errc::ShapeMismatch, "conv2d input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0)))
    fail(Errc::ShapeMismatch, "conv2d bias " + shape_str(bias.shape()));
  if (stride < 1 || pad < 0) fail(Errc::InvalidArgument, "conv2d stride/pad");
  check_finite(x, "conv2d");
  check_finite(weight, "conv2d");
  if (bias.defined()) check_finite(bias, "conv2d");

  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), weight.dim(2), weight.dim(3),
                     static_cast<std::size_t>(stride), static_cast<std::size_t>(pad), 0, 0};
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) fail(Errc::ShapeMismatch, "conv2d kernel larger than input");
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  const std::size_t cout = weight.dim(0);
  const auto kdim = static_cast<Eigen::Index>(g.cin * g.kh * g.kw);
  const auto npix = static_cast<Eigen::Index>(g.ho * g.wo);
  const auto ecout = static_cast<Eigen::Index>(cout);

  auto px = x.impl(), pw = weight.impl(), pb = bias.impl();
  Tensor<T> out = make_output<T>({cout, g.ho, g.wo}, "conv2d", {x, weight, bias}, [px, pw, pb, g, kdim, npix, ecout](TensorImpl<T>& o) {
    CMatMap<T> dy(o.grad.data(), ecout, npix);
    std::vector<T> cols_buf;
    const T* cols = px->data.data();
    if (!g.pointwise()) {
      cols_buf.resize(static_cast<std::size_t>(kdim * npix));
      detail::im2col(px->data.data(), g, cols_buf.data());
      cols = cols_buf.data();
    }
    if (T* gw = grad_of(pw)) MatMap<T>(gw, ecout, kdim).noalias() += dy * CMatMap<T>(cols, kdim, npix).transpose();
    if (T* gb = grad_of(pb))
      for (Eigen::Index c = 0; c < ecout; ++c) {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < npix; ++i) acc += static_cast<double>(dy(c, i));
        gb[c] += static_cast<T>(acc);
      }
    if (T* gx = grad_of(px)) {
      if (g.pointwise()) {
        MatMap<T>(gx, kdim, npix).noalias() += CMatMap<T>(pw->data.data(), ecout, kdim).transpose() * dy;
      } else {
        RowMat<T> dcols = CMatMap<T>(pw->data.data(), ecout, kdim).transpose() * dy;
        detail::col2im_add(dcols.data(), g, gx);
      }
    }
  });

  std::vector<T> cols_buf;
  const T* cols = x.data();
  if (!g.pointwise()) {
    cols_buf.resize(static_cast<std::size_t>(kdim * npix));
    detail::im2col(x.data(), g, cols_buf.data());
    cols = cols_buf.data();
  }
  MatMap<T> y(out.data(), ecout, npix);
  y.noalias() = CMatMap<T>(weight.data(), ecout, kdim) * CMatMap<T>(cols, kdim, npix);
  if (bias.defined())
    for (Eigen::Index c = 0; c < ecout; ++c) y.row(c).array() += bias.data()[c];
  return out;
}

// ---------------------------------------------------------------------------
// normalization and attention primitives

/// Softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.ndim()) fail(Errc::ShapeMismatch, "softmax axis out of range");
  check_finite(a, "softmax");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  const std::size_t n = a.dim(axis);

  Tensor<T> out = make_output<T>(a.shape(), "softmax", {a}, nullptr);
  T* y = out.data();
  const T* x = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(x[base + i * inner] - mx);
        y[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) y[base + i * inner] = static_cast<T>(y[base + i * inner] / z);
    }

  if (auto& node = out.get()->node) {
    auto pa = a.impl();
    // The output values are needed in backward; copy them so the closure does
    // not own its own output.
    std::vector<T> yv = out.values();
    node->backward = [pa, yv = std::move(yv), outer, inner, n](TensorImpl<T>& o) {
      T* g = grad_of(pa);
      if (!g) return;
      for (std::size_t oo = 0; oo < outer; ++oo)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = oo * n * inner + in;
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += static_cast<double>(yv[base + i * inner]) * o.grad[base + i * inner];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = base + i * inner;
            g[k] += yv[k] * static_cast<T>(o.grad[k] - dot);
          }
        }
    };
  }
  return out;
}

/// Layer normalization over the last axis with affine gamma/beta of that size.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5) {
  if (a.ndim() < 1) fail(Errc::ShapeMismatch, "layernorm on scalar");
  const std::size_t c = a.shape().back();
  if (gamma.numel() != c || beta.numel() != c)
    fail(Errc::ShapeMismatch, "layernorm affine size vs " + shape_str(a.shape()));
  check_finite(a, "layernorm");
  check_finite(gamma, "layernorm");
  check_finite(beta, "layernorm");
  const std::size_t rows = a.numel() / c;

  std::vector<T> xhat(a.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data() + r * c;
    double mu = 0.0;
    for (std::size_t i = 0; i < c; ++i) mu += x[i];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(is);
    for (std::size_t i = 0; i < c; ++i) xhat[r * c + i] = static_cast<T>((x[i] - mu) * is);
  }

  auto pa = a.impl(), pg = gamma.impl(), pb = beta.impl();
  Tensor<T> out = make_output<T>(a.shape(), "layernorm", {a, gamma, beta}, nullptr);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < c; ++i)
      out.data()[r * c + i] = xhat[r * c + i] * gamma.data()[i] + beta.data()[i];

  if (auto& node = out.get()->node) {
    node->backward = [pa, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c](TensorImpl<T>& o) {
      T* ga = grad_of(pa);
      T* gg = grad_of(pg);
      T* gb = grad_of(pb);
      const T* gamma_v = pg->data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* dy = o.grad.data() + r * c;
        const T* xh = xhat.data() + r * c;
        if (gg)
          for (std::size_t i = 0; i < c; ++i) gg[i] += dy[i] * xh[i];
        if (gb)
          for (std::size_t i = 0; i < c; ++i) gb[i] += dy[i];
        if (ga) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t i = 0; i < c; ++i) {
            const double d = static_cast<double>(dy[i]) * gamma_v[i];
            m1 += d;
            m2 += d * xh[i];
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          for (std::size_t i = 0; i < c; ++i) {
            const double d = static_cast<double>(dy[i]) * gamma_v[i];
            ga[r * c + i] += static_cast<T>(inv_std[r] * (d - m1 - xh[i] * m2));
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// layout

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) fail(Errc::ShapeMismatch, "concat of nothing");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) fail(Errc::ShapeMismatch, "concat axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != s0.size()) fail(Errc::ShapeMismatch, "concat rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis && p.dim(i) != s0[i])
        fail(Errc::ShapeMismatch, "concat " + shape_str(p.shape()) + " vs " + shape_str(s0));
    check_finite(p, "concat");
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  const std::size_t out_axis = out_shape[axis];

  std::vector<ImplPtr<T>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  Tensor<T> out = make_output<T>(out_shape, "concat", parts, [impls, outer, inner, out_axis, axis](TensorImpl<T>& o) {
    std::size_t offset = 0;
    for (const auto& p : impls) {
      const std::size_t n = p->shape[axis];
      if (T* g = grad_of(p))
        for (std::size_t oo = 0; oo < outer; ++oo) {
          const T* src = o.grad.data() + (oo * out_axis + offset) * inner;
          T* dst = g + oo * n * inner;
          for (std::size_t i = 0; i < n * inner; ++i) dst[i] += src[i];
        }
      offset += n;
    }
  });
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.dim(axis);
    for (std::size_t oo = 0; oo < outer; ++oo)
      std::copy_n(p.data() + oo * n * inner, n * inner, out.data() + (oo * out_axis + offset) * inner);
    offset += n;
  }
  return out;
}

/// 2x2 average pooling with stride 2 on [C, H, W] (odd trailing row/col dropped).
template <typename T>
Tensor<T> avgpool2(const Tensor<T>& x) {
  detail::require_ndim(x, 3, "avgpool2");
  check_finite(x, "avgpool2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) fail(Errc::ShapeMismatch, "avgpool2 input too small");
  auto px = x.impl();
  Tensor<T> out = make_output<T>({c, ho, wo}, "avgpool2", {x}, [px, c, h, w, ho, wo](TensorImpl<T>& o) {
    T* g = grad_of(px);
    if (!g) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xx = 0; xx < wo; ++xx) {
          const T d = T(0.25) * o.grad[(ch * ho + y) * wo + xx];
          T* base = g + (ch * h + 2 * y) * w + 2 * xx;
          base[0] += d;
          base[1] += d;
          base[w] += d;
          base[w + 1] += d;
        }
  });
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        const T* base = x.data() + (ch * h + 2 * y) * w + 2 * xx;
        out.data()[(ch * ho + y) * wo + xx] = T(0.25) * (base[0] + base[1] + base[w] + base[w + 1]);
      }
  return out;
}

/// Depth-to-space: [C*r*r, H, W] -> [C, H*r, W*r], out[c, y*r+i, x*r+j] = in[c*r*r + i*r + j, y, x].
template <typename T>
Tensor<T> pixel_rearrange_up(const Tensor<T>& x, std::size_t r) {
  detail::require_ndim(x, 3, "pixel_rearrange_up");
  if (r == 0 || x.dim(0) % (r * r) != 0)
    fail(Errc::ShapeMismatch, "pixel_rearrange_up channels " + std::to_string(x.dim(0)) + " not divisible by r^2");
  check_finite(x, "pixel_rearrange_up");
  const std::size_t c = x.dim(0) / (r * r), h = x.dim(1), w = x.dim(2);
  auto index = [c, h, w, r](std::size_t ch, std::size_t y, std::size_t xx, std::size_t i, std::size_t j) {
    (void)c;
    const std::size_t src = ((ch * r * r + i * r + j) * h + y) * w + xx;
    const std::size_t dst = (ch * h * r + y * r + i) * (w * r) + xx * r + j;
    return std::pair{src, dst};
  };
  auto px = x.impl();
  Tensor<T> out = make_output<T>({c, h * r, w * r}, "pixel_rearrange_up", {x}, [px, c, h, w, r, index](TensorImpl<T>& o) {
    T* g = grad_of(px);
    if (!g) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
              auto [src, dst] = index(ch, y, xx, i, j);
              g[src] += o.grad[dst];
            }
  });
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) {
            auto [src, dst] = index(ch, y, xx, i, j);
            out.data()[dst] = x.data()[src];
          }
  return out;
}

/// [C, H, W] -> [H*W, C]
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  detail::require_ndim(x, 3, "to_tokens");
  check_finite(x, "to_tokens");
  const auto c = static_cast<Eigen::Index>(x.dim(0));
  const auto n = static_cast<Eigen::Index>(x.dim(1) * x.dim(2));
  auto px = x.impl();
  Tensor<T> out = make_output<T>({x.dim(1) * x.dim(2), x.dim(0)}, "to_tokens", {x}, [px, c, n](TensorImpl<T>& o) {
    if (T* g = grad_of(px)) MatMap<T>(g, c, n) += CMatMap<T>(o.grad.data(), n, c).transpose();
  });
  MatMap<T>(out.data(), n, c) = CMatMap<T>(x.data(), c, n).transpose();
  return out;
}

/// [H*W, C] -> [C, H, W]
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& t, std::size_t h, std::size_t w) {
  detail::require_ndim(t, 2, "from_tokens");
  if (t.dim(0) != h * w) fail(Errc::ShapeMismatch, "from_tokens token count vs " + std::to_string(h) + "x" + std::to_string(w));
  check_finite(t, "from_tokens");
  const auto c = static_cast<Eigen::Index>(t.dim(1));
  const auto n = static_cast<Eigen::Index>(h * w);
  auto pt = t.impl();
  Tensor<T> out = make_output<T>({t.dim(1), h, w}, "from_tokens", {t}, [pt, c, n](TensorImpl<T>& o) {
    if (T* g = grad_of(pt)) MatMap<T>(g, n, c) += CMatMap<T>(o.grad.data(), c, n).transpose();
  });
  MatMap<T>(out.data(), c, n) = CMatMap<T>(t.data(), n, c).transpose();
  return out;
}

/// Forward differences along x: [C, H, W] -> [C, H, W-1].
template <typename T>
Tensor<T> diff_x(const Tensor<T>& x) {
  detail::require_ndim(x, 3, "diff_x");
  check_finite(x, "diff_x");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (w < 2) fail(Errc::ShapeMismatch, "diff_x needs width >= 2");
  auto px = x.impl();
  Tensor<T> out = make_output<T>({c, h, w - 1}, "diff_x", {x}, [px, c, h, w](TensorImpl<T>& o) {
    T* g = grad_of(px);
    if (!g) return;
    for (std::size_t r = 0; r < c * h; ++r)
      for (std::size_t i = 0; i + 1 < w; ++i) {
        const T d = o.grad[r * (w - 1) + i];
        g[r * w + i + 1] += d;
        g[r * w + i] -= d;
      }
  });
  for (std::size_t r = 0; r < c * h; ++r)
    for (std::size_t i = 0; i + 1 < w; ++i) out.data()[r * (w - 1) + i] = x.data()[r * w + i + 1] - x.data()[r * w + i];
  return out;
}

/// Forward differences along y: [C, H, W] -> [C, H-1, W].
template <typename T>
Tensor<T> diff_y(const Tensor<T>& x) {
  detail::require_ndim(x, 3, "diff_y");
  check_finite(x, "diff_y");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 2) fail(Errc::ShapeMismatch, "diff_y needs height >= 2");
  auto px = x.impl();
  Tensor<T> out = make_output<T>({c, h - 1, w}, "diff_y", {x}, [px, c, h, w](TensorImpl<T>& o) {
    T* g = grad_of(px);
    if (!g) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y + 1 < h; ++y)
        for (std::size_t i = 0; i < w; ++i) {
          const T d = o.grad[(ch * (h - 1) + y) * w + i];
          g[(ch * h + y + 1) * w + i] += d;
          g[(ch * h + y) * w + i] -= d;
        }
  });
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y + 1 < h; ++y)
      for (std::size_t i = 0; i < w; ++i)
        out.data()[(ch * (h - 1) + y) * w + i] = x.data()[(ch * h + y + 1) * w + i] - x.data()[(ch * h + y) * w + i];
  return out;
}

/// Separable linear resampling: out[c] = Ry * x[c] * Rx^T with Ry [Ho, H]
/// and Rx [Wo, W] given row-major.
template <typename T>
Tensor<T> separable(const Tensor<T>& x, const RowMat<T>& ry, const RowMat<T>& rx) {
  detail::require_ndim(x, 3, "separable");
  if (static_cast<std::size_t>(ry.cols()) != x.dim(1) || static_cast<std::size_t>(rx.cols()) != x.dim(2))
    fail(Errc::ShapeMismatch, "separable resampling matrices vs " + shape_str(x.shape()));
  check_finite(x, "separable");
  const std::size_t c = x.dim(0);
  const auto h = static_cast<Eigen::Index>(x.dim(1)), w = static_cast<Eigen::Index>(x.dim(2));
  const auto ho = ry.rows(), wo = rx.rows();
  auto px = x.impl();
  Tensor<T> out = make_output<T>({c, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)}, "separable", {x},
                                 [px, ry, rx, c, h, w, ho, wo](TensorImpl<T>& o) {
                                   T* g = grad_of(px);
                                   if (!g) return;
                                   for (std::size_t ch = 0; ch < c; ++ch) {
                                     CMatMap<T> dy(o.grad.data() + ch * ho * wo, ho, wo);
                                     MatMap<T>(g + ch * h * w, h, w).noalias() += ry.transpose() * dy * rx;
                                   }
                                 });
  for (std::size_t ch = 0; ch < c; ++ch)
    MatMap<T>(out.data() + ch * ho * wo, ho, wo).noalias() = ry * CMatMap<T>(x.data() + ch * h * w, h, w) * rx.transpose();
  return out;
}

// ---------------------------------------------------------------------------
// sampling

template <typename T>
struct SampleResult {
  Tensor<T> values;      // [P, C]
  std::vector<T> mask;   // in-bounds bilinear weight per point
};

namespace detail {

struct Bilinear {
  std::size_t idx[4];
  double w[4];
  int n = 0;
  double mass = 0.0;
};

/// Bilinear taps at continuous pixel coordinate (u, v); out-of-bounds
/// corners are dropped.
inline Bilinear bilinear_taps(double u, double v, std::size_t h, std::size_t w) {
  Bilinear b;
  const double fx = std::floor(u), fy = std::floor(v);
  const double ax = u - fx, ay = v - fy;
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const long xs[2] = {x0, x0 + 1};
  const long ys[2] = {y0, y0 + 1};
  const double wx[2] = {1.0 - ax, ax};
  const double wy[2] = {1.0 - ay, ay};
  for (int j = 0; j < 2; ++j)
    for (int i = 0; i < 2; ++i) {
      const double wt = wx[i] * wy[j];
      if (wt == 0.0) continue;
      if (xs[i] < 0 || ys[j] < 0 || xs[i] >= static_cast<long>(w) || ys[j] >= static_cast<long>(h)) continue;
      b.idx[b.n] = static_cast<std::size_t>(ys[j]) * w + static_cast<std::size_t>(xs[i]);
      b.w[b.n] = wt;
      b.mass += wt;
      ++b.n;
    }
  return b;
}

}  // namespace detail

/// Samples a [C, H, W] map at P continuous pixel coordinates (u = column,
/// v = row, interleaved). Points outside the map read zeros.
template <typename T>
SampleResult<T> bilinear_sample(const Tensor<T>& feat, std::span<const double> coords) {
  detail::require_ndim(feat, 3, "bilinear_sample");
  if (coords.size() % 2 != 0) fail(Errc::ShapeMismatch, "bilinear_sample coords must be (u, v) pairs");
  check_finite(feat, "bilinear_sample");
  for (double c : coords)
    if (!std::isfinite(c)) fail(Errc::NonFiniteInput, "bilinear_sample coordinate");
  const std::size_t c = feat.dim(0), h = feat.dim(1), w = feat.dim(2), p = coords.size() / 2;
  std::vector<detail::Bilinear> taps(p);
  for (std::size_t i = 0; i < p; ++i) taps[i] = detail::bilinear_taps(coords[2 * i], coords[2 * i + 1], h, w);

  SampleResult<T> res;
  res.mask.resize(p);
  auto pf = feat.impl();
  res.values = make_output<T>({p, c}, "bilinear_sample", {feat}, [pf, taps, c, h, w](TensorImpl<T>& o) {
    T* g = grad_of(pf);
    if (!g) return;
    for (std::size_t i = 0; i < taps.size(); ++i)
      for (int t = 0; t < taps[i].n; ++t)
        for (std::size_t ch = 0; ch < c; ++ch)
          g[ch * h * w + taps[i].idx[t]] += static_cast<T>(taps[i].w[t]) * o.grad[i * c + ch];
  });
  for (std::size_t i = 0; i < p; ++i) {
    res.mask[i] = static_cast<T>(taps[i].mass);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (int t = 0; t < taps[i].n; ++t) acc += taps[i].w[t] * feat.data()[ch * h * w + taps[i].idx[t]];
      res.values.data()[i * c + ch] = static_cast<T>(acc);
    }
  }
  return res;
}

/// Elementwise copy into another scalar type, without history.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> v(t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(t.data()[i]);
  return Tensor<To>::from(t.shape(), std::move(v));
}

}  // namespace mvgsr::ad
