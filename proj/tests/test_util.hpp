#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "mvgsr/camera.hpp"

namespace mvgsr::testing {

/// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mvgsr_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

inline CameraIntrinsics simple_intrinsics(int w, int h, double f) {
  CameraIntrinsics k;
  k.model = CameraModel::Pinhole;
  k.width = w;
  k.height = h;
  k.fx = f;
  k.fy = f;
  k.cx = (w - 1) / 2.0;
  k.cy = (h - 1) / 2.0;
  return k;
}

/// n cameras on a horizontal circle of `radius` looking at the origin.
inline PoseManifest ring_manifest(int n, double radius, const CameraIntrinsics& k) {
  PoseManifest m;
  for (int i = 0; i < n; ++i) {
    const double a = 2.0 * M_PI * i / n;
    const Eigen::Vector3d c(radius * std::cos(a), 0.0, radius * std::sin(a));
    PoseManifest::Entry e;
    e.view_id = i;
    e.intrinsics = k;
    e.pose = CameraPose::look_at(c, Eigen::Vector3d::Zero(), Eigen::Vector3d(0, -1, 0), i, "img" + std::to_string(i));
    m.cameras.push_back(e);
  }
  refresh_scene_scale(m);
  return m;
}

}  // namespace mvgsr::testing
