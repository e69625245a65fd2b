#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mvgsr/error.hpp"

namespace mvgsr {

enum class CameraModel { SimplePinhole, Pinhole };

inline const char* camera_model_name(CameraModel m) {
  return m == CameraModel::Pinhole ? "PINHOLE" : "SIMPLE_PINHOLE";
}

/// Pinhole calibration. Pixel centers sit at integer coordinates.
struct CameraIntrinsics {
  CameraModel model = CameraModel::Pinhole;
  int width = 0;
  int height = 0;
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  Eigen::Matrix3d K() const {
    Eigen::Matrix3d k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  void validate() const {
    if (width <= 0 || height <= 0) fail(Errc::InvalidArgument, "camera extent must be positive");
    if (!(fx > 0.0) || !(fy > 0.0)) fail(Errc::SingularIntrinsics, "focal lengths must be positive");
    if (cx < 0.0 || cx > width || cy < 0.0 || cy > height)
      fail(Errc::InvalidArgument, "principal point outside the image");
    if (model == CameraModel::SimplePinhole && fx != fy)
      fail(Errc::InvalidArgument, "SIMPLE_PINHOLE requires fx == fy");
  }

  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

/// Camera-to-world pose. `center` is the optical center in world units and
/// `view_dir` the optical axis (third column of `rotation`).
struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d view_dir = Eigen::Vector3d::UnitZ();
  int view_id = 0;
  std::string image_name;

  static CameraPose from_world_to_camera(const Eigen::Matrix3d& r_wc, const Eigen::Vector3d& t_wc,
                                         int view_id = 0, std::string name = {}) {
    CameraPose p;
    p.rotation = r_wc.transpose();
    p.center = -(r_wc.transpose() * t_wc);
    p.view_dir = p.rotation.col(2).normalized();
    p.view_id = view_id;
    p.image_name = std::move(name);
    return p;
  }

  /// Builds a camera at `center` looking at `target`, with image rows
  /// running along `down` as closely as possible.
  static CameraPose look_at(const Eigen::Vector3d& center, const Eigen::Vector3d& target,
                            const Eigen::Vector3d& down, int view_id = 0, std::string name = {}) {
    const Eigen::Vector3d z = (target - center).normalized();
    Eigen::Vector3d y = down - down.dot(z) * z;
    if (y.norm() < 1e-12) y = z.unitOrthogonal();
    y.normalize();
    const Eigen::Vector3d x = y.cross(z);
    CameraPose p;
    p.rotation.col(0) = x;
    p.rotation.col(1) = y;
    p.rotation.col(2) = z;
    p.center = center;
    p.view_dir = z;
    p.view_id = view_id;
    p.image_name = std::move(name);
    return p;
  }

  Eigen::Matrix3d r_wc() const { return rotation.transpose(); }
  Eigen::Vector3d t_wc() const { return -(rotation.transpose() * center); }

  Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const {
    return rotation.transpose() * (world - center);
  }

  void validate() const {
    const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (ortho > 1e-9) fail(Errc::InvalidArgument, "rotation is not orthonormal");
    if (std::abs(rotation.determinant() - 1.0) > 1e-9) fail(Errc::InvalidArgument, "rotation determinant != +1");
    if (std::abs(view_dir.norm() - 1.0) > 1e-12) fail(Errc::InvalidArgument, "view_dir is not unit length");
    if ((view_dir - rotation.col(2)).cwiseAbs().maxCoeff() > 1e-9)
      fail(Errc::InvalidArgument, "view_dir differs from the optical axis");
  }
};

struct Camera {
  CameraIntrinsics intrinsics;
  CameraPose pose;

  /// Homogeneous pixel coordinates of a world point (depth in the last slot).
  Eigen::Vector3d project_h(const Eigen::Vector3d& world) const {
    return intrinsics.K() * pose.to_camera(world);
  }
};

struct PoseManifest {
  struct Entry {
    int view_id = 0;
    CameraIntrinsics intrinsics;
    CameraPose pose;
  };
  std::vector<Entry> cameras;
  double scene_scale = 1.0;

  const Entry* find(int view_id) const {
    for (const auto& e : cameras)
      if (e.view_id == view_id) return &e;
    return nullptr;
  }

  const Entry& at(int view_id) const {
    if (const Entry* e = find(view_id)) return *e;
    fail(Errc::UnknownView, "view " + std::to_string(view_id) + " not in manifest");
  }

  Camera camera(int view_id) const {
    const Entry& e = at(view_id);
    return {e.intrinsics, e.pose};
  }

  std::vector<int> view_ids() const {
    std::vector<int> ids;
    ids.reserve(cameras.size());
    for (const auto& e : cameras) ids.push_back(e.view_id);
    return ids;
  }
};

/// Max distance of the centers from their centroid; 1.0 when fewer than two
/// distinct centers exist.
inline double compute_scene_scale(const std::vector<Eigen::Vector3d>& centers) {
  if (centers.size() < 2) return 1.0;
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& c : centers) centroid += c;
  centroid /= static_cast<double>(centers.size());
  double r = 0.0;
  for (const auto& c : centers) r = std::max(r, (c - centroid).norm());
  return r > 0.0 ? r : 1.0;
}

inline void refresh_scene_scale(PoseManifest& m) {
  std::vector<Eigen::Vector3d> centers;
  for (const auto& e : m.cameras) centers.push_back(e.pose.center);
  m.scene_scale = compute_scene_scale(centers);
}

}  // namespace mvgsr
