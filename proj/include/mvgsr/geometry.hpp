#pragma once

// Two-view epipolar geometry. Everything here runs in double precision.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mvgsr/camera.hpp"
#include "mvgsr/error.hpp"

namespace mvgsr::geometry {

using Vec2 = Eigen::Vector2d;

struct FundamentalMatrix {
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
  int src_view = 0;
  int dst_view = 0;
  bool valid = false;
};

/// Normalized line a*u + b*v + c = 0 with a^2 + b^2 = 1.
struct Line {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;

  double distance(const Vec2& p) const { return std::abs(a * p.x() + b * p.y() + c); }
};

struct EpipolarSegment {
  Line line;
  Vec2 p0 = Vec2::Zero();
  Vec2 p1 = Vec2::Zero();
  bool inside = false;
};

inline Eigen::Matrix3d skew(const Eigen::Vector3d& t) {
  Eigen::Matrix3d s;
  s << 0.0, -t.z(), t.y(), t.z(), 0.0, -t.x(), -t.y(), t.x(), 0.0;
  return s;
}

/// Fundamental matrix mapping pixels of camera i to epipolar lines in camera j.
/// Pairs whose baseline is below 1e-9 * scene_scale are returned invalid.
inline FundamentalMatrix fundamental(const Camera& cam_i, const Camera& cam_j, double scene_scale = 1.0) {
  for (const Camera* c : {&cam_i, &cam_j}) {
    if (!(std::abs(c->intrinsics.fx) > 1e-12) || !(std::abs(c->intrinsics.fy) > 1e-12))
      fail(Errc::SingularIntrinsics, "focal length is zero");
  }
  FundamentalMatrix f;
  f.src_view = cam_i.pose.view_id;
  f.dst_view = cam_j.pose.view_id;

  // X_j = R * X_i + t
  const Eigen::Matrix3d r = cam_j.pose.r_wc() * cam_i.pose.r_wc().transpose();
  const Eigen::Vector3d t = cam_j.pose.t_wc() - r * cam_i.pose.t_wc();
  if (t.norm() < 1e-9 * scene_scale) return f;

  const Eigen::Matrix3d k_i_inv = cam_i.intrinsics.K().inverse();
  const Eigen::Matrix3d k_j_inv = cam_j.intrinsics.K().inverse();
  Eigen::Matrix3d m = k_j_inv.transpose() * skew(t) * r * k_i_inv;
  const double n = m.norm();
  if (!(n > 0.0)) return f;
  f.m = m / n;
  f.valid = true;
  return f;
}

/// Canonical sign: a > 0, or a == 0 and b > 0.
inline Line normalize_line(const Eigen::Vector3d& l) {
  const double n = std::hypot(l.x(), l.y());
  if (!(n >= 1e-12)) fail(Errc::ZeroLine, "query maps to the null line (epipole)");
  Line out{l.x() / n, l.y() / n, l.z() / n};
  const bool flip = std::abs(out.a) > 1e-12 ? out.a < 0.0 : out.b < 0.0;
  if (flip) out = {-out.a, -out.b, -out.c};
  if (out.a == 0.0) out.a = 0.0;  // drop negative zero
  return out;
}

inline Line epipolar_line(const FundamentalMatrix& f, const Vec2& x) {
  if (!f.valid) fail(Errc::DegeneratePair, "fundamental matrix is degenerate");
  return normalize_line(f.m * Eigen::Vector3d(x.x(), x.y(), 1.0));
}

/// Intersection of `line` with the pixel rectangle [0, w-1] x [0, h-1].
inline EpipolarSegment clip_to_rect(const Line& line, int width, int height) {
  constexpr double kSlack = 1e-9;
  EpipolarSegment seg;
  seg.line = line;
  const double xmax = width - 1.0;
  const double ymax = height - 1.0;

  // Parametrize p(t) = foot + t * dir.
  const Vec2 foot(-line.c * line.a, -line.c * line.b);
  const Vec2 dir(-line.b, line.a);
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  auto slab = [&](double p, double d, double lo, double hi) {
    if (std::abs(d) < 1e-15) return p >= lo - kSlack && p <= hi + kSlack;
    double a = (lo - p) / d;
    double b = (hi - p) / d;
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
    return true;
  };
  if (!slab(foot.x(), dir.x(), 0.0, xmax) || !slab(foot.y(), dir.y(), 0.0, ymax)) return seg;
  if (t0 > t1 + kSlack) return seg;
  if (t0 > t1) t1 = t0;

  auto clamp = [&](Vec2 p) {
    p.x() = std::clamp(p.x(), 0.0, xmax);
    p.y() = std::clamp(p.y(), 0.0, ymax);
    return p;
  };
  Vec2 a = clamp(foot + t0 * dir);
  Vec2 b = clamp(foot + t1 * dir);
  if (b.x() < a.x() || (b.x() == a.x() && b.y() < a.y())) std::swap(a, b);
  seg.p0 = a;
  seg.p1 = b;
  seg.inside = true;
  return seg;
}

inline std::vector<Vec2> sample_segment(const EpipolarSegment& seg, int k) {
  if (!seg.inside) fail(Errc::EmptySegment, "epipolar line misses the image");
  if (k < 1) fail(Errc::InvalidArgument, "sample count must be positive");
  std::vector<Vec2> pts;
  pts.reserve(static_cast<std::size_t>(k));
  if (k == 1) {
    pts.push_back(seg.p0);
    return pts;
  }
  const Vec2 d = seg.p1 - seg.p0;
  for (int i = 0; i < k; ++i) {
    if (i == k - 1) {
      pts.push_back(seg.p1);
    } else {
      pts.push_back(seg.p0 + (static_cast<double>(i) / (k - 1)) * d);
    }
  }
  return pts;
}

/// Intrinsics of a feature map obtained by `stride`-fold downsampling.
inline CameraIntrinsics scale_intrinsics(const CameraIntrinsics& k, int stride) {
  if (stride < 1) fail(Errc::InvalidArgument, "stride must be >= 1");
  if (stride == 1) return k;
  CameraIntrinsics out = k;
  const double s = stride;
  out.fx = k.fx / s;
  out.fy = k.fy / s;
  out.cx = (k.cx + 0.5) / s - 0.5;
  out.cy = (k.cy + 0.5) / s - 0.5;
  out.width = k.width / stride;
  out.height = k.height / stride;
  return out;
}

inline Vec2 project(const Camera& cam, const Eigen::Vector3d& world) {
  const Eigen::Vector3d h = cam.project_h(world);
  return {h.x() / h.z(), h.y() / h.z()};
}

}  // namespace mvgsr::geometry
