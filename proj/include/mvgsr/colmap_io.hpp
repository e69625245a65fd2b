#pragma once

// COLMAP sparse-model ingestion (cameras/images, text and binary) and the
// camera-to-world pose manifest.

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include <array>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mvgsr/camera.hpp"
#include "mvgsr/error.hpp"

namespace mvgsr::colmap {

enum class Format { Text, Binary };

struct CameraRecord {
  std::uint32_t id = 0;
  CameraIntrinsics intrinsics;
  friend bool operator==(const CameraRecord&, const CameraRecord&) = default;
};

/// Raw world-to-camera pose of one registered image.
struct ImageRecord {
  std::uint32_t id = 0;
  std::uint32_t camera_id = 0;
  std::array<double, 4> qvec{1.0, 0.0, 0.0, 0.0};  // (qw, qx, qy, qz)
  std::array<double, 3> tvec{0.0, 0.0, 0.0};
  std::string name;
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;

  Eigen::Matrix3d rotation() const {
    return Eigen::Quaterniond(qvec[0], qvec[1], qvec[2], qvec[3]).toRotationMatrix();
  }
  Eigen::Vector3d translation() const { return {tvec[0], tvec[1], tvec[2]}; }
};

namespace detail {

// COLMAP model ids and parameter counts, indexed by model id.
inline constexpr std::array<std::pair<const char*, int>, 11> kModels{{
    {"SIMPLE_PINHOLE", 3},
    {"PINHOLE", 4},
    {"SIMPLE_RADIAL", 4},
    {"RADIAL", 5},
    {"OPENCV", 8},
    {"OPENCV_FISHEYE", 8},
    {"FULL_OPENCV", 12},
    {"FOV", 5},
    {"SIMPLE_RADIAL_FISHEYE", 4},
    {"RADIAL_FISHEYE", 5},
    {"THIN_PRISM_FISHEYE", 12},
}};

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::IoError, "short write to " + path.string());
}

/// Bounds-checked little-endian cursor; every overrun is a MalformedFile.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T read() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string read_cstring() {
    std::size_t end = pos_;
    while (end < bytes_.size() && bytes_[end] != 0) ++end;
    if (end >= bytes_.size()) fail(Errc::MalformedFile, "unterminated string at byte offset " + std::to_string(pos_));
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), end - pos_);
    pos_ = end + 1;
    return s;
  }

  void skip(std::uint64_t n) {
    need(n);
    pos_ += static_cast<std::size_t>(n);
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_end() const {
    if (pos_ != bytes_.size())
      fail(Errc::MalformedFile, "trailing bytes after last record at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_)
      fail(Errc::MalformedFile, "truncated record at byte offset " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

class ByteWriter {
 public:
  template <typename T>
  void write(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void write_cstring(const std::string& s) {
    buf_.append(s);
    buf_.push_back('\0');
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

inline CameraIntrinsics intrinsics_from_params(CameraModel model, std::uint64_t w, std::uint64_t h,
                                               const std::vector<double>& p) {
  CameraIntrinsics k;
  k.model = model;
  k.width = static_cast<int>(w);
  k.height = static_cast<int>(h);
  if (model == CameraModel::SimplePinhole) {
    k.fx = k.fy = p[0];
    k.cx = p[1];
    k.cy = p[2];
  } else {
    k.fx = p[0];
    k.fy = p[1];
    k.cx = p[2];
    k.cy = p[3];
  }
  return k;
}

inline std::vector<double> params_of(const CameraIntrinsics& k) {
  if (k.model == CameraModel::SimplePinhole) return {k.fx, k.cx, k.cy};
  return {k.fx, k.fy, k.cx, k.cy};
}

inline std::array<double, 4> checked_unit_quaternion(std::array<double, 4> q, const std::string& where) {
  const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  if (!std::isfinite(n) || std::abs(n - 1.0) > 1e-3)
    fail(Errc::NonUnitQuaternion, "quaternion norm " + format_double(n) + " " + where);
  // Leave already-unit quaternions bit-exact so text/binary round trips are lossless.
  if (std::abs(n - 1.0) > 1e-15)
    for (double& c : q) c /= n;
  return q;
}

inline bool is_blank_or_comment(const std::string& line) {
  const auto first = line.find_first_not_of(" \t\r");
  return first == std::string::npos || line[first] == '#';
}

}  // namespace detail

// ---------------------------------------------------------------------------
// cameras

inline std::vector<CameraRecord> parse_cameras_text(std::istream& in) {
  std::vector<CameraRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::is_blank_or_comment(line)) continue;
    const std::string where = "at line " + std::to_string(lineno);
    std::istringstream ss(line);
    long long id = -1;
    std::string model_name;
    long long w = 0, h = 0;
    if (!(ss >> id >> model_name >> w >> h) || id < 0 || w <= 0 || h <= 0)
      fail(Errc::MalformedFile, "bad camera header " + where);
    CameraModel model;
    if (model_name == "PINHOLE") {
      model = CameraModel::Pinhole;
    } else if (model_name == "SIMPLE_PINHOLE") {
      model = CameraModel::SimplePinhole;
    } else {
      fail(Errc::UnsupportedModel, "camera model " + model_name + " " + where);
    }
    const std::size_t n_params = model == CameraModel::Pinhole ? 4 : 3;
    std::vector<double> params;
    double v;
    while (ss >> v) params.push_back(v);
    if (!ss.eof() || params.size() != n_params)
      fail(Errc::MalformedFile, "expected " + std::to_string(n_params) + " parameters " + where);
    CameraRecord rec{static_cast<std::uint32_t>(id),
                     detail::intrinsics_from_params(model, static_cast<std::uint64_t>(w),
                                                    static_cast<std::uint64_t>(h), params)};
    out.push_back(rec);
  }
  return out;
}

inline std::vector<CameraRecord> parse_cameras_binary(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto count = r.read<std::uint64_t>();
  // Each record occupies at least 24 bytes; reject absurd counts before reserving.
  if (count > r.remaining() / 24 + 1) fail(Errc::MalformedFile, "camera count exceeds file size");
  std::vector<CameraRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const auto id = r.read<std::uint32_t>();
    const auto model_id = r.read<std::int32_t>();
    const auto w = r.read<std::uint64_t>();
    const auto h = r.read<std::uint64_t>();
    if (model_id < 0 || model_id >= static_cast<int>(detail::kModels.size()))
      fail(Errc::MalformedFile, "unknown camera model id " + std::to_string(model_id) + " at byte offset " +
                                    std::to_string(at));
    std::vector<double> params(static_cast<std::size_t>(detail::kModels[model_id].second));
    for (double& p : params) p = r.read<double>();
    if (model_id > 1)
      fail(Errc::UnsupportedModel,
           std::string("camera model ") + detail::kModels[model_id].first + " at byte offset " + std::to_string(at));
    if (w == 0 || h == 0 || w > (1u << 30) || h > (1u << 30))
      fail(Errc::MalformedFile, "bad camera extent at byte offset " + std::to_string(at));
    out.push_back({id, detail::intrinsics_from_params(model_id == 1 ? CameraModel::Pinhole : CameraModel::SimplePinhole,
                                                      w, h, params)});
  }
  r.expect_end();
  return out;
}

inline std::vector<CameraRecord> parse_cameras(const std::filesystem::path& path, Format format) {
  if (format == Format::Text) {
    std::ifstream in(path);
    if (!in) fail(Errc::IoError, "cannot open " + path.string());
    return parse_cameras_text(in);
  }
  const auto bytes = detail::read_file(path);
  return parse_cameras_binary(bytes);
}

inline std::string cameras_to_text(const std::vector<CameraRecord>& cams) {
  std::ostringstream os;
  os << "# Camera list with one line of data per camera:\n"
     << "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n"
     << "# Number of cameras: " << cams.size() << "\n";
  for (const auto& c : cams) {
    os << c.id << ' ' << camera_model_name(c.intrinsics.model) << ' ' << c.intrinsics.width << ' '
       << c.intrinsics.height;
    for (double p : detail::params_of(c.intrinsics)) os << ' ' << detail::format_double(p);
    os << '\n';
  }
  return os.str();
}

inline std::string cameras_to_binary(const std::vector<CameraRecord>& cams) {
  detail::ByteWriter w;
  w.write<std::uint64_t>(cams.size());
  for (const auto& c : cams) {
    w.write<std::uint32_t>(c.id);
    w.write<std::int32_t>(c.intrinsics.model == CameraModel::Pinhole ? 1 : 0);
    w.write<std::uint64_t>(static_cast<std::uint64_t>(c.intrinsics.width));
    w.write<std::uint64_t>(static_cast<std::uint64_t>(c.intrinsics.height));
    for (double p : detail::params_of(c.intrinsics)) w.write<double>(p);
  }
  return w.bytes();
}

// ---------------------------------------------------------------------------
// images

inline std::vector<ImageRecord> parse_images_text(std::istream& in) {
  std::vector<ImageRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::is_blank_or_comment(line)) continue;
    const std::string where = "at line " + std::to_string(lineno);
    std::istringstream ss(line);
    long long id = -1, cam = -1;
    std::array<double, 4> q{};
    std::array<double, 3> t{};
    std::string name;
    if (!(ss >> id >> q[0] >> q[1] >> q[2] >> q[3] >> t[0] >> t[1] >> t[2] >> cam) || id < 0 || cam < 0)
      fail(Errc::MalformedFile, "bad image record " + where);
    ss >> std::ws;
    std::getline(ss, name);
    while (!name.empty() && (name.back() == '\r' || name.back() == ' ')) name.pop_back();
    if (name.empty()) fail(Errc::MalformedFile, "missing image name " + where);
    // The 2D observation line always follows, possibly empty.
    std::string points;
    if (!std::getline(in, points)) fail(Errc::MalformedFile, "missing POINTS2D line after line " + std::to_string(lineno));
    ++lineno;
    out.push_back({static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(cam),
                   detail::checked_unit_quaternion(q, where), t, name});
  }
  return out;
}

inline std::vector<ImageRecord> parse_images_binary(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto count = r.read<std::uint64_t>();
  if (count > r.remaining() / 73 + 1) fail(Errc::MalformedFile, "image count exceeds file size");
  std::vector<ImageRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string where = "at byte offset " + std::to_string(r.offset());
    ImageRecord rec;
    rec.id = r.read<std::uint32_t>();
    for (double& c : rec.qvec) c = r.read<double>();
    for (double& c : rec.tvec) c = r.read<double>();
    rec.camera_id = r.read<std::uint32_t>();
    rec.name = r.read_cstring();
    const auto n_points = r.read<std::uint64_t>();
    if (n_points > r.remaining() / 24) fail(Errc::MalformedFile, "truncated POINTS2D block " + where);
    r.skip(n_points * 24);
    rec.qvec = detail::checked_unit_quaternion(rec.qvec, where);
    out.push_back(std::move(rec));
  }
  r.expect_end();
  return out;
}

inline std::vector<ImageRecord> parse_images(const std::filesystem::path& path, Format format) {
  if (format == Format::Text) {
    std::ifstream in(path);
    if (!in) fail(Errc::IoError, "cannot open " + path.string());
    return parse_images_text(in);
  }
  const auto bytes = detail::read_file(path);
  return parse_images_binary(bytes);
}

inline std::string images_to_text(const std::vector<ImageRecord>& imgs) {
  std::ostringstream os;
  os << "# Image list with two lines of data per image:\n"
     << "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n"
     << "#   POINTS2D[] as (X, Y, POINT3D_ID)\n"
     << "# Number of images: " << imgs.size() << ", mean observations per image: 0\n";
  for (const auto& im : imgs) {
    os << im.id;
    for (double c : im.qvec) os << ' ' << detail::format_double(c);
    for (double c : im.tvec) os << ' ' << detail::format_double(c);
    os << ' ' << im.camera_id << ' ' << im.name << "\n\n";
  }
  return os.str();
}

inline std::string images_to_binary(const std::vector<ImageRecord>& imgs) {
  detail::ByteWriter w;
  w.write<std::uint64_t>(imgs.size());
  for (const auto& im : imgs) {
    w.write<std::uint32_t>(im.id);
    for (double c : im.qvec) w.write<double>(c);
    for (double c : im.tvec) w.write<double>(c);
    w.write<std::uint32_t>(im.camera_id);
    w.write_cstring(im.name);
    w.write<std::uint64_t>(0);
  }
  return w.bytes();
}

/// World-to-camera record for a camera-to-world pose.
inline ImageRecord image_record_from_pose(const CameraPose& pose, std::uint32_t camera_id) {
  const Eigen::Quaterniond q(pose.r_wc());
  const Eigen::Vector3d t = pose.t_wc();
  ImageRecord rec;
  rec.id = static_cast<std::uint32_t>(pose.view_id);
  rec.camera_id = camera_id;
  rec.qvec = {q.w(), q.x(), q.y(), q.z()};
  rec.tvec = {t.x(), t.y(), t.z()};
  rec.name = pose.image_name;
  return rec;
}

// ---------------------------------------------------------------------------
// manifest

/// Converts raw COLMAP records into the camera-to-world manifest, ordered by
/// image id.
inline PoseManifest build_manifest(const std::vector<CameraRecord>& cams, const std::vector<ImageRecord>& imgs) {
  std::map<std::uint32_t, CameraIntrinsics> by_id;
  for (const auto& c : cams) by_id[c.id] = c.intrinsics;

  std::map<std::uint32_t, const ImageRecord*> sorted;
  for (const auto& im : imgs) {
    if (!sorted.emplace(im.id, &im).second) fail(Errc::DuplicateViewId, "image id " + std::to_string(im.id));
  }

  PoseManifest m;
  for (const auto& [id, im] : sorted) {
    auto it = by_id.find(im->camera_id);
    if (it == by_id.end())
      fail(Errc::DanglingCameraRef,
           "image " + std::to_string(id) + " references camera " + std::to_string(im->camera_id));
    it->second.validate();
    PoseManifest::Entry e;
    e.view_id = static_cast<int>(id);
    e.intrinsics = it->second;
    e.pose = CameraPose::from_world_to_camera(im->rotation(), im->translation(), e.view_id, im->name);
    m.cameras.push_back(std::move(e));
  }
  refresh_scene_scale(m);
  return m;
}

inline constexpr int kManifestSchemaVersion = 1;

inline nlohmann::json manifest_to_json(const PoseManifest& m) {
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& e : m.cameras) {
    const auto& k = e.intrinsics;
    const auto& p = e.pose;
    std::vector<double> rot;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rot.push_back(p.rotation(r, c));
    cams.push_back({
        {"view_id", e.view_id},
        {"image_name", p.image_name},
        {"intrinsics",
         {{"model", camera_model_name(k.model)},
          {"width", k.width},
          {"height", k.height},
          {"fx", k.fx},
          {"fy", k.fy},
          {"cx", k.cx},
          {"cy", k.cy}}},
        {"extrinsics",
         {{"rotation_c2w", rot},
          {"center", {p.center.x(), p.center.y(), p.center.z()}},
          {"view_dir", {p.view_dir.x(), p.view_dir.y(), p.view_dir.z()}}}},
    });
  }
  return {{"schema_version", kManifestSchemaVersion}, {"scene_scale", m.scene_scale}, {"cameras", cams}};
}

inline PoseManifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kManifestSchemaVersion)
      fail(Errc::SchemaVersionMismatch, "expected schema_version " + std::to_string(kManifestSchemaVersion));
    PoseManifest m;
    m.scene_scale = j.at("scene_scale").get<double>();
    std::set<int> seen;
    for (const auto& c : j.at("cameras")) {
      PoseManifest::Entry e;
      e.view_id = c.at("view_id").get<int>();
      if (!seen.insert(e.view_id).second) fail(Errc::DuplicateViewId, "view " + std::to_string(e.view_id));
      const auto& k = c.at("intrinsics");
      const auto model = k.at("model").get<std::string>();
      if (model == "PINHOLE") {
        e.intrinsics.model = CameraModel::Pinhole;
      } else if (model == "SIMPLE_PINHOLE") {
        e.intrinsics.model = CameraModel::SimplePinhole;
      } else {
        fail(Errc::UnsupportedModel, "camera model " + model);
      }
      e.intrinsics.width = k.at("width").get<int>();
      e.intrinsics.height = k.at("height").get<int>();
      e.intrinsics.fx = k.at("fx").get<double>();
      e.intrinsics.fy = k.at("fy").get<double>();
      e.intrinsics.cx = k.at("cx").get<double>();
      e.intrinsics.cy = k.at("cy").get<double>();
      const auto& x = c.at("extrinsics");
      const auto rot = x.at("rotation_c2w").get<std::vector<double>>();
      const auto ctr = x.at("center").get<std::vector<double>>();
      const auto dir = x.at("view_dir").get<std::vector<double>>();
      if (rot.size() != 9 || ctr.size() != 3 || dir.size() != 3) fail(Errc::MalformedFile, "bad extrinsics block");
      for (int r = 0; r < 3; ++r)
        for (int col = 0; col < 3; ++col) e.pose.rotation(r, col) = rot[r * 3 + col];
      e.pose.center = {ctr[0], ctr[1], ctr[2]};
      e.pose.view_dir = {dir[0], dir[1], dir[2]};
      e.pose.view_id = e.view_id;
      e.pose.image_name = c.value("image_name", std::string{});
      m.cameras.push_back(std::move(e));
    }
    return m;
  } catch (const nlohmann::json::exception& ex) {
    fail(Errc::MalformedFile, std::string("manifest: ") + ex.what());
  }
}

inline void write_manifest(const PoseManifest& m, const std::filesystem::path& path) {
  detail::write_file(path, manifest_to_json(m).dump(2) + "\n");
}

inline PoseManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoError, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    fail(Errc::MalformedFile, path.string() + ": " + ex.what());
  }
  return manifest_from_json(j);
}

/// Loads a sparse model directory holding cameras.{txt,bin} and images.{txt,bin}.
inline PoseManifest load_sparse_model(const std::filesystem::path& dir, Format format) {
  const char* ext = format == Format::Text ? ".txt" : ".bin";
  return build_manifest(parse_cameras(dir / (std::string("cameras") + ext), format),
                        parse_images(dir / (std::string("images") + ext), format));
}

}  // namespace mvgsr::colmap
