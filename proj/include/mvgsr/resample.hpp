#pragma once

// Separable bicubic resampling. Downsampling stretches the kernel by the
// factor (anti-aliasing); upsampling uses the plain 4-tap kernel. Borders
// use half-sample symmetric reflection and every row of weights is
// renormalized to sum to one.

#include <Eigen/Core>

#include <cmath>
#include <vector>

#include "mvgsr/autodiff/ops.hpp"
#include "mvgsr/error.hpp"
#include "mvgsr/image.hpp"

namespace mvgsr::resample {

struct ResampleConfig {
  double kernel_a = -0.5;
  int factor = 2;
};

using Matrix = ad::RowMat<double>;

/// Keys cubic convolution kernel.
inline double cubic_kernel(double t, double a = -0.5) {
  t = std::abs(t);
  if (t < 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

/// Half-sample symmetric reflection into [0, n).
inline int reflect_index(long j, int n) {
  const long period = 2L * n;
  j %= period;
  if (j < 0) j += period;
  return static_cast<int>(j < n ? j : period - 1 - j);
}

namespace detail {

// Row i samples source position `center(i)` with taps spaced by `stretch`.
template <typename CenterFn>
Matrix kernel_matrix(int n_out, int n_in, double stretch, double a, CenterFn center) {
  Matrix m = Matrix::Zero(n_out, n_in);
  const double radius = 2.0 * stretch;
  for (int i = 0; i < n_out; ++i) {
    const double c = center(i);
    const long lo = static_cast<long>(std::floor(c - radius));
    const long hi = static_cast<long>(std::ceil(c + radius));
    double total = 0.0;
    for (long j = lo; j <= hi; ++j) {
      const double w = cubic_kernel((static_cast<double>(j) - c) / stretch, a);
      if (w == 0.0) continue;
      m(i, reflect_index(j, n_in)) += w;
      total += w;
    }
    m.row(i) /= total;
  }
  return m;
}

}  // namespace detail

/// [n/factor x n] anti-aliased downsampling weights. Output sample i sits at
/// source coordinate (i + 0.5) * factor - 0.5.
inline Matrix downsample_matrix(int n, int factor, double a = -0.5) {
  if (factor < 1) fail(Errc::InvalidArgument, "resampling factor must be >= 1");
  if (n % factor != 0)
    fail(Errc::NonDivisibleExtent, "extent " + std::to_string(n) + " not divisible by " + std::to_string(factor));
  const double f = factor;
  return detail::kernel_matrix(n / factor, n, f, a, [f](int i) { return (i + 0.5) * f - 0.5; });
}

/// [n*factor x n] bicubic interpolation weights; output sample o sits at
/// source coordinate (o + 0.5) / factor - 0.5.
inline Matrix upsample_matrix(int n, int factor, double a = -0.5) {
  if (factor < 1) fail(Errc::InvalidArgument, "resampling factor must be >= 1");
  const double f = factor;
  return detail::kernel_matrix(n * factor, n, 1.0, a, [f](int o) { return (o + 0.5) / f - 0.5; });
}

inline Image apply_separable(const Image& img, const Matrix& ry, const Matrix& rx) {
  Image out(img.channels, static_cast<int>(ry.rows()), static_cast<int>(rx.rows()));
  for (int c = 0; c < img.channels; ++c) {
    Eigen::Map<const ad::RowMat<float>> src(img.data.data() + c * img.plane_size(), img.height, img.width);
    const Matrix res = ry * src.cast<double>() * rx.transpose();
    Eigen::Map<ad::RowMat<float>>(out.data.data() + c * out.plane_size(), out.height, out.width) = res.cast<float>();
  }
  return out;
}

inline Image downsample_aa(const Image& img, const ResampleConfig& cfg) {
  return apply_separable(img, downsample_matrix(img.height, cfg.factor, cfg.kernel_a),
                         downsample_matrix(img.width, cfg.factor, cfg.kernel_a));
}

inline Image upsample_bicubic(const Image& img, int factor, double a = -0.5) {
  return apply_separable(img, upsample_matrix(img.height, factor, a), upsample_matrix(img.width, factor, a));
}

// ---------------------------------------------------------------------------
// differentiable versions on [C, H, W] tensors

template <typename T>
ad::Tensor<T> to_tensor(const Image& img, bool requires_grad = false) {
  std::vector<T> v(img.data.begin(), img.data.end());
  return ad::Tensor<T>::from({static_cast<std::size_t>(img.channels), static_cast<std::size_t>(img.height),
                              static_cast<std::size_t>(img.width)},
                             std::move(v), requires_grad);
}

template <typename T>
Image to_image(const ad::Tensor<T>& t) {
  if (t.ndim() != 3) fail(Errc::ShapeMismatch, "image tensor must be [C,H,W]");
  Image img(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)));
  for (std::size_t i = 0; i < t.numel(); ++i) img.data[i] = static_cast<float>(t.data()[i]);
  return img;
}

template <typename T>
ad::Tensor<T> downsample_aa(const ad::Tensor<T>& x, const ResampleConfig& cfg) {
  if (x.ndim() != 3) fail(Errc::ShapeMismatch, "downsample_aa expects [C,H,W]");
  const ad::RowMat<T> ry = downsample_matrix(static_cast<int>(x.dim(1)), cfg.factor, cfg.kernel_a).cast<T>();
  const ad::RowMat<T> rx = downsample_matrix(static_cast<int>(x.dim(2)), cfg.factor, cfg.kernel_a).cast<T>();
  return ad::separable(x, ry, rx);
}

template <typename T>
ad::Tensor<T> upsample_bicubic(const ad::Tensor<T>& x, int factor, double a = -0.5) {
  if (x.ndim() != 3) fail(Errc::ShapeMismatch, "upsample_bicubic expects [C,H,W]");
  const ad::RowMat<T> ry = upsample_matrix(static_cast<int>(x.dim(1)), factor, a).cast<T>();
  const ad::RowMat<T> rx = upsample_matrix(static_cast<int>(x.dim(2)), factor, a).cast<T>();
  return ad::separable(x, ry, rx);
}

/// L1 between the anti-aliased downsample of `render` and the LR ground truth.
template <typename T>
ad::Tensor<T> subpixel_loss(const ad::Tensor<T>& render, const ad::Tensor<T>& lr_gt, const ResampleConfig& cfg) {
  ad::Tensor<T> down = downsample_aa(render, cfg);
  if (down.shape() != lr_gt.shape())
    fail(Errc::ShapeMismatch, "downsampled render " + ad::shape_str(down.shape()) + " vs LR " + ad::shape_str(lr_gt.shape()));
  return ad::l1_loss(down, lr_gt);
}

inline void check_lambda_ren(double lambda_ren) {
  if (!(lambda_ren >= 0.0 && lambda_ren <= 1.0))
    fail(Errc::LambdaOutOfRange, "lambda_ren must lie in [0, 1]");
}

/// lambda_ren * l_ren + (1 - lambda_ren) * l_sp. The endpoints return the
/// respective operand exactly.
inline double loss_3dgs(double l_ren, double l_sp, double lambda_ren) {
  check_lambda_ren(lambda_ren);
  if (lambda_ren == 1.0) return l_ren;
  if (lambda_ren == 0.0) return l_sp;
  return lambda_ren * l_ren + (1.0 - lambda_ren) * l_sp;
}

template <typename T>
ad::Tensor<T> loss_3dgs(const ad::Tensor<T>& l_ren, const ad::Tensor<T>& l_sp, double lambda_ren) {
  check_lambda_ren(lambda_ren);
  if (l_ren.numel() != 1 || l_sp.numel() != 1) fail(Errc::ShapeMismatch, "loss_3dgs takes scalar losses");
  return ad::add(ad::scale(l_ren, static_cast<T>(lambda_ren)), ad::scale(l_sp, static_cast<T>(1.0 - lambda_ren)));
}

}  // namespace mvgsr::resample
