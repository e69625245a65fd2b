#pragma once

// Procedural multi-view scenes: a textured square patch on the plane
// n . X = offset, viewed by a seeded camera rig. Correspondences between
// views are exact (plane-induced), which makes every geometric claim
// checkable against ground truth.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "mvgsr/camera.hpp"
#include "mvgsr/colmap_io.hpp"
#include "mvgsr/error.hpp"
#include "mvgsr/geometry.hpp"
#include "mvgsr/image.hpp"
#include "mvgsr/resample.hpp"

namespace mvgsr::synth {

enum class RigKind { RingInward, Arc, RandomHemisphere };

inline const char* rig_kind_name(RigKind k) {
  switch (k) {
    case RigKind::RingInward: return "ring_inward";
    case RigKind::Arc: return "arc";
    case RigKind::RandomHemisphere: return "random_hemisphere";
  }
  return "ring_inward";
}

inline RigKind parse_rig_kind(const std::string& s) {
  if (s == "ring_inward") return RigKind::RingInward;
  if (s == "arc") return RigKind::Arc;
  if (s == "random_hemisphere") return RigKind::RandomHemisphere;
  fail(Errc::InvalidArgument, "unknown rig kind '" + s + "'");
}

struct Plane {
  Eigen::Vector3d normal = Eigen::Vector3d::UnitY();
  double offset = 0.0;
};

struct SceneConfig {
  RigKind kind = RigKind::RingInward;
  int cams = 16;
  double radius = 4.0;
  double elevation_deg = 35.0;  // ring and arc rigs
  double fov_deg = 50.0;
  int hr_size = 128;
  int factor = 2;
  int channels = 1;
  std::uint64_t seed = 0;
  double patch_half = 4.0;  // textured square [-h, h]^2 in plane coordinates
  int texture_size = 320;
  double checker_amp = 0.12;  // high-frequency overlay; 0 for a smooth texture
  int checker_period = 6;     // texels
  int noise_base_cells = 4;        // lattice cells across the texture in the coarsest octave
  int noise_octaves = 6;
  double noise_persistence = 0.6;  // amplitude ratio between successive noise octaves
};

/// Pinhole intrinsics for a square image of `size` pixels and the given
/// horizontal field of view.
inline CameraIntrinsics make_intrinsics(int size, double fov_deg) {
  CameraIntrinsics k;
  k.model = CameraModel::Pinhole;
  k.width = k.height = size;
  k.fx = k.fy = 0.5 * size / std::tan(0.5 * fov_deg * M_PI / 180.0);
  k.cx = k.cy = (size - 1) / 2.0;
  return k;
}

/// Intrinsics of the same camera sampled on a grid `factor` times finer.
inline CameraIntrinsics upscale_intrinsics(const CameraIntrinsics& k, int factor) {
  CameraIntrinsics out = k;
  out.fx = k.fx * factor;
  out.fy = k.fy * factor;
  out.cx = (k.cx + 0.5) * factor - 0.5;
  out.cy = (k.cy + 0.5) * factor - 0.5;
  out.width = k.width * factor;
  out.height = k.height * factor;
  return out;
}

/// Camera rig with all optical axes through the origin. Rings and arcs sit
/// at `elevation_deg` above the y = 0 plane; with elevation 0 a ring of four
/// puts centers at (+-r, 0, 0) and (0, 0, +-r). Only the hemisphere rig uses
/// the seed.
inline PoseManifest gen_rig(RigKind kind, int n, double radius, std::uint64_t seed, const CameraIntrinsics& k,
                            double elevation_deg = 0.0) {
  if (n < 2) fail(Errc::InvalidArgument, "a rig needs at least two cameras");
  if (!(radius > 0.0)) fail(Errc::InvalidArgument, "rig radius must be positive");
  PoseManifest m;
  std::mt19937_64 rng(seed ^ 0x5eedf00dull);
  auto place = [&](int i, double azimuth, double elevation) {
    const Eigen::Vector3d c(radius * std::cos(elevation) * std::cos(azimuth), radius * std::sin(elevation),
                            radius * std::cos(elevation) * std::sin(azimuth));
    char name[16];
    std::snprintf(name, sizeof(name), "%03d.png", i);
    PoseManifest::Entry e;
    e.view_id = i;
    e.intrinsics = k;
    e.pose = CameraPose::look_at(c, Eigen::Vector3d::Zero(), Eigen::Vector3d(0, -1, 0), i, name);
    m.cameras.push_back(std::move(e));
  };
  const double elev = elevation_deg * M_PI / 180.0;
  for (int i = 0; i < n; ++i) {
    switch (kind) {
      case RigKind::RingInward:
        place(i, 2.0 * M_PI * i / n, elev);
        break;
      case RigKind::Arc:
        place(i, M_PI / 2 + (-M_PI / 3 + (2.0 * M_PI / 3) * i / (n - 1)), elev);
        break;
      case RigKind::RandomHemisphere: {
        const double az = 2.0 * M_PI * ad::uniform01(rng);
        const double el = (20.0 + 55.0 * ad::uniform01(rng)) * M_PI / 180.0;
        place(i, az, el);
        break;
      }
    }
  }
  refresh_scene_scale(m);
  return m;
}

// ---------------------------------------------------------------------------
// texture

namespace detail {

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

/// Seeded value noise: `octaves` lattices of doubling resolution.
inline Image value_noise(int size, int channels, std::uint64_t seed, int base_cells, int octaves,
                         double persistence) {
  Image img(channels, size, size, 0.0f);
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 17);
  double amp = 1.0, total = 0.0;
  for (int o = 0; o < octaves; ++o) {
    const int cells = base_cells << o;
    for (int c = 0; c < channels; ++c) {
      std::vector<double> lattice(static_cast<std::size_t>(cells + 1) * (cells + 1));
      for (double& v : lattice) v = ad::uniform01(rng);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double gx = (x + 0.5) / size * cells, gy = (y + 0.5) / size * cells;
          const int x0 = std::min(static_cast<int>(gx), cells - 1), y0 = std::min(static_cast<int>(gy), cells - 1);
          const double tx = smoothstep(gx - x0), ty = smoothstep(gy - y0);
          auto at = [&](int i, int j) { return lattice[static_cast<std::size_t>(j) * (cells + 1) + i]; };
          const double v = (1 - ty) * ((1 - tx) * at(x0, y0) + tx * at(x0 + 1, y0)) +
                           ty * ((1 - tx) * at(x0, y0 + 1) + tx * at(x0 + 1, y0 + 1));
          img.at(c, y, x) += static_cast<float>(amp * v);
        }
    }
    total += amp;
    amp *= persistence;
  }
  for (float& v : img.data) v = static_cast<float>(v / total);
  return img;
}

}  // namespace detail

inline Image make_texture(const SceneConfig& cfg) {
  Image tex = detail::value_noise(cfg.texture_size, cfg.channels, cfg.seed, cfg.noise_base_cells, cfg.noise_octaves,
                                  cfg.noise_persistence);
  // Stretch contrast to roughly [0.1, 0.9] and add the checker overlay.
  for (int c = 0; c < tex.channels; ++c) {
    float lo = 1.0f, hi = 0.0f;
    for (int y = 0; y < tex.height; ++y)
      for (int x = 0; x < tex.width; ++x) {
        lo = std::min(lo, tex.at(c, y, x));
        hi = std::max(hi, tex.at(c, y, x));
      }
    const double span = std::max(1e-6, static_cast<double>(hi - lo));
    const double amp = cfg.checker_amp;
    for (int y = 0; y < tex.height; ++y)
      for (int x = 0; x < tex.width; ++x) {
        const int cell = (x / cfg.checker_period + y / cfg.checker_period) & 1;
        const double base = 0.1 + (0.8 - amp) * (tex.at(c, y, x) - lo) / span;
        tex.at(c, y, x) = static_cast<float>(base + (cell ? amp : 0.0));
      }
  }
  return tex;
}

// ---------------------------------------------------------------------------

struct SynthScene {
  SceneConfig cfg;
  Plane plane;
  Image texture;
  PoseManifest rig;  // high-resolution intrinsics
  std::vector<Image> hr_images;
  std::vector<Image> lr_images;

  /// The same rig with low-resolution intrinsics.
  PoseManifest lr_rig() const {
    PoseManifest m = rig;
    for (auto& e : m.cameras) e.intrinsics = geometry::scale_intrinsics(e.intrinsics, cfg.factor);
    return m;
  }

  int index_of(int view_id) const {
    for (std::size_t i = 0; i < rig.cameras.size(); ++i)
      if (rig.cameras[i].view_id == view_id) return static_cast<int>(i);
    fail(Errc::UnknownView, "view " + std::to_string(view_id) + " not in scene");
  }
};

/// In-plane orthonormal axes (e1, e2) used for texture coordinates.
inline std::pair<Eigen::Vector3d, Eigen::Vector3d> plane_axes(const Plane& p) {
  const Eigen::Vector3d n = p.normal.normalized();
  const Eigen::Vector3d ref = std::abs(n.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitZ();
  const Eigen::Vector3d e1 = (ref - ref.dot(n) * n).normalized();
  return {e1, n.cross(e1)};
}

/// Ray through pixel (u, v) of `cam` intersected with the plane; nullopt
/// when the ray is parallel to it or hits it behind the camera.
inline std::optional<Eigen::Vector3d> backproject(const Camera& cam, const Plane& plane, double u, double v) {
  const auto& k = cam.intrinsics;
  const Eigen::Vector3d d_cam((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
  const Eigen::Vector3d d = cam.pose.rotation * d_cam;
  const double denom = plane.normal.dot(d);
  if (std::abs(denom) < 1e-15) return std::nullopt;
  const double t = (plane.offset - plane.normal.dot(cam.pose.center)) / denom;
  if (!(t > 0.0)) return std::nullopt;
  return cam.pose.center + t * d;
}

/// Continuous texel coordinates of a plane point, or nullopt off the patch.
inline std::optional<Eigen::Vector2d> texel_of(const SynthScene& s, const Eigen::Vector3d& x) {
  const auto [e1, e2] = plane_axes(s.plane);
  const Eigen::Vector3d origin = s.plane.offset * s.plane.normal.normalized();
  const double a = e1.dot(x - origin), b = e2.dot(x - origin);
  const double h = s.cfg.patch_half;
  if (std::abs(a) > h || std::abs(b) > h) return std::nullopt;
  const double n = s.texture.width;
  return Eigen::Vector2d((a + h) / (2 * h) * n - 0.5, (b + h) / (2 * h) * n - 0.5);
}

/// Bilinear texture lookup with edge clamping.
inline float sample_texture(const Image& tex, int c, double u, double v) {
  u = std::clamp(u, 0.0, tex.width - 1.0);
  v = std::clamp(v, 0.0, tex.height - 1.0);
  const int x0 = std::min(static_cast<int>(u), tex.width - 2), y0 = std::min(static_cast<int>(v), tex.height - 2);
  const double tx = u - x0, ty = v - y0;
  return static_cast<float>((1 - ty) * ((1 - tx) * tex.at(c, y0, x0) + tx * tex.at(c, y0, x0 + 1)) +
                            ty * ((1 - tx) * tex.at(c, y0 + 1, x0) + tx * tex.at(c, y0 + 1, x0 + 1)));
}

/// Texture value on the plane, 0 off the patch.
inline float plane_value(const SynthScene& s, const Eigen::Vector3d& x, int c) {
  auto t = texel_of(s, x);
  return t ? sample_texture(s.texture, c, t->x(), t->y()) : 0.0f;
}

/// Renders view `view_id` at `width` x `height` pixels (same field of view
/// as the rig camera). Pixels whose ray misses the plane are 0.
inline Image render_plane(const SynthScene& s, int view_id, int width, int height) {
  Camera cam = s.rig.camera(view_id);
  if (width != cam.intrinsics.width || height != cam.intrinsics.height) {
    const double sx = static_cast<double>(width) / cam.intrinsics.width;
    const double sy = static_cast<double>(height) / cam.intrinsics.height;
    auto& k = cam.intrinsics;
    k.fx *= sx;
    k.fy *= sy;
    k.cx = (k.cx + 0.5) * sx - 0.5;
    k.cy = (k.cy + 0.5) * sy - 0.5;
    k.width = width;
    k.height = height;
  }
  Image img(s.texture.channels, height, width, 0.0f);
  std::size_t hits = 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      auto p = backproject(cam, s.plane, x, y);
      if (!p) continue;
      ++hits;
      for (int c = 0; c < img.channels; ++c) img.at(c, y, x) = plane_value(s, *p, c);
    }
  if (hits == 0) fail(Errc::PlaneBehindCamera, "plane not visible from view " + std::to_string(view_id));
  return img;
}

/// Pixel of view j showing the same plane point as `pixel` in view i, or
/// nullopt when the point is behind either camera or outside view j.
inline std::optional<Eigen::Vector2d> gt_correspondence(const SynthScene& s, int view_i, const Eigen::Vector2d& pixel,
                                                        int view_j, const PoseManifest& rig) {
  const Camera ci = rig.camera(view_i);
  if (view_i == view_j) return pixel;
  auto x = backproject(ci, s.plane, pixel.x(), pixel.y());
  if (!x) return std::nullopt;
  const Camera cj = rig.camera(view_j);
  const Eigen::Vector3d h = cj.project_h(*x);
  if (!(h.z() > 0.0)) return std::nullopt;
  const Eigen::Vector2d p(h.x() / h.z(), h.y() / h.z());
  if (p.x() < 0.0 || p.y() < 0.0 || p.x() > cj.intrinsics.width - 1.0 || p.y() > cj.intrinsics.height - 1.0)
    return std::nullopt;
  return p;
}

/// Same as above on the high-resolution rig.
inline std::optional<Eigen::Vector2d> gt_correspondence(const SynthScene& s, int view_i, const Eigen::Vector2d& pixel,
                                                        int view_j) {
  return gt_correspondence(s, view_i, pixel, view_j, s.rig);
}

/// True when the pixel of the given rig camera sees the textured patch.
inline bool sees_patch(const SynthScene& s, const PoseManifest& rig, int view, const Eigen::Vector2d& pixel) {
  auto x = backproject(rig.camera(view), s.plane, pixel.x(), pixel.y());
  return x && texel_of(s, *x).has_value();
}

inline SynthScene generate(const SceneConfig& cfg) {
  if (cfg.hr_size % cfg.factor != 0) fail(Errc::NonDivisibleExtent, "hr size must be divisible by the factor");
  if (cfg.channels != 1 && cfg.channels != 3) fail(Errc::InvalidArgument, "channels must be 1 or 3");
  SynthScene s;
  s.cfg = cfg;
  s.texture = make_texture(cfg);
  s.rig = gen_rig(cfg.kind, cfg.cams, cfg.radius, cfg.seed, make_intrinsics(cfg.hr_size, cfg.fov_deg),
                  cfg.elevation_deg);
  for (const auto& e : s.rig.cameras) {
    s.hr_images.push_back(render_plane(s, e.view_id, cfg.hr_size, cfg.hr_size));
    s.lr_images.push_back(resample::downsample_aa(s.hr_images.back(), {-0.5, cfg.factor}));
  }
  return s;
}

// ---------------------------------------------------------------------------
// scene directory: poses.json (low-resolution intrinsics), hr/NNN.png,
// lr/NNN.png, meta.json

inline constexpr int kSceneSchemaVersion = 1;

inline nlohmann::json meta_to_json(const SceneConfig& c, const Plane& p) {
  return {{"schema_version", kSceneSchemaVersion},
          {"kind", rig_kind_name(c.kind)},
          {"cams", c.cams},
          {"radius", c.radius},
          {"elevation_deg", c.elevation_deg},
          {"fov_deg", c.fov_deg},
          {"hr_size", c.hr_size},
          {"lr_size", c.hr_size / c.factor},
          {"factor", c.factor},
          {"channels", c.channels},
          {"seed", c.seed},
          {"patch_half", c.patch_half},
          {"texture_size", c.texture_size},
          {"checker_amp", c.checker_amp},
          {"checker_period", c.checker_period},
          {"noise_base_cells", c.noise_base_cells},
          {"noise_octaves", c.noise_octaves},
          {"noise_persistence", c.noise_persistence},
          {"plane", {{"normal", {p.normal.x(), p.normal.y(), p.normal.z()}}, {"offset", p.offset}}}};
}

inline std::pair<SceneConfig, Plane> meta_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSceneSchemaVersion)
      fail(Errc::SchemaVersionMismatch, "scene meta schema_version");
    SceneConfig c;
    c.kind = parse_rig_kind(j.at("kind").get<std::string>());
    c.cams = j.at("cams").get<int>();
    c.radius = j.at("radius").get<double>();
    c.elevation_deg = j.at("elevation_deg").get<double>();
    c.fov_deg = j.at("fov_deg").get<double>();
    c.hr_size = j.at("hr_size").get<int>();
    c.factor = j.at("factor").get<int>();
    c.channels = j.at("channels").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.patch_half = j.at("patch_half").get<double>();
    c.texture_size = j.at("texture_size").get<int>();
    c.checker_amp = j.at("checker_amp").get<double>();
    c.checker_period = j.at("checker_period").get<int>();
    c.noise_base_cells = j.at("noise_base_cells").get<int>();
    c.noise_octaves = j.at("noise_octaves").get<int>();
    c.noise_persistence = j.at("noise_persistence").get<double>();
    Plane p;
    const auto n = j.at("plane").at("normal").get<std::vector<double>>();
    if (n.size() != 3) fail(Errc::MalformedFile, "plane normal must have 3 entries");
    p.normal = {n[0], n[1], n[2]};
    p.offset = j.at("plane").at("offset").get<double>();
    return {c, p};
  } catch (const nlohmann::json::exception& ex) {
    fail(Errc::MalformedFile, std::string("scene meta: ") + ex.what());
  }
}

inline std::string image_file_name(int view_id) {
  char name[16];
  std::snprintf(name, sizeof(name), "%03d.png", view_id);
  return name;
}

inline void save_scene(const SynthScene& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "hr");
  std::filesystem::create_directories(dir / "lr");
  colmap::write_manifest(s.lr_rig(), dir / "poses.json");
  colmap::detail::write_file(dir / "meta.json", meta_to_json(s.cfg, s.plane).dump(2) + "\n");
  for (std::size_t i = 0; i < s.rig.cameras.size(); ++i) {
    const std::string name = image_file_name(s.rig.cameras[i].view_id);
    write_png(s.hr_images[i], dir / "hr" / name);
    write_png(s.lr_images[i], dir / "lr" / name);
  }
}

/// Loads a scene directory. Images come from disk (8-bit); the texture is
/// regenerated from the seed so geometric oracles remain available.
inline SynthScene load_scene(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(Errc::IoError, "scene directory " + dir.string() + " not found");
  std::ifstream in(dir / "meta.json");
  if (!in) fail(Errc::IoError, "cannot open " + (dir / "meta.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    fail(Errc::MalformedFile, "meta.json: " + std::string(ex.what()));
  }
  SynthScene s;
  std::tie(s.cfg, s.plane) = meta_from_json(j);
  s.texture = make_texture(s.cfg);
  PoseManifest lr = colmap::read_manifest(dir / "poses.json");
  s.rig = lr;
  for (auto& e : s.rig.cameras) e.intrinsics = upscale_intrinsics(e.intrinsics, s.cfg.factor);
  for (const auto& e : s.rig.cameras) {
    const std::string name = image_file_name(e.view_id);
    s.hr_images.push_back(read_png(dir / "hr" / name));
    s.lr_images.push_back(read_png(dir / "lr" / name));
  }
  return s;
}

/// True when `dir` looks like a scene directory (has meta.json).
inline bool is_scene_dir(const std::filesystem::path& dir) { return std::filesystem::exists(dir / "meta.json"); }

}  // namespace mvgsr::synth
