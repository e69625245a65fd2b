#pragma once

// MVTF tensor files: "MVTF", u32 version (1), u32 ndim, ndim x u64 extents,
// then float32 values, all little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mvgsr/autodiff/tensor.hpp"
#include "mvgsr/error.hpp"

namespace mvgsr::ad {

static_assert(std::endian::native == std::endian::little, "MVTF I/O assumes a little-endian host");

inline constexpr std::uint32_t kMvtfVersion = 1;

struct MvtfBlob {
  Shape shape;
  std::vector<float> values;
};

inline std::string mvtf_encode(const Shape& shape, const float* values) {
  std::string out = "MVTF";
  auto put = [&out](const auto& v) { out.append(reinterpret_cast<const char*>(&v), sizeof(v)); };
  put(kMvtfVersion);
  put(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t e : shape) put(static_cast<std::uint64_t>(e));
  out.append(reinterpret_cast<const char*>(values), numel_of(shape) * sizeof(float));
  return out;
}

inline MvtfBlob mvtf_decode(const std::string& bytes, const std::string& what = "MVTF data") {
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (bytes.size() - pos < n) fail(Errc::MalformedFile, what + ": truncated at byte " + std::to_string(pos));
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  char magic[4];
  take(magic, 4);
  if (std::memcmp(magic, "MVTF", 4) != 0) fail(Errc::MalformedFile, what + ": bad magic");
  std::uint32_t version = 0, ndim = 0;
  take(&version, 4);
  if (version != kMvtfVersion) fail(Errc::SchemaVersionMismatch, what + ": version " + std::to_string(version));
  take(&ndim, 4);
  if (ndim > 16) fail(Errc::MalformedFile, what + ": implausible rank " + std::to_string(ndim));
  MvtfBlob blob;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::uint64_t e = 0;
    take(&e, 8);
    if (e != 0 && count > (bytes.size() / sizeof(float)) / e) fail(Errc::MalformedFile, what + ": extents exceed payload");
    count *= e;
    blob.shape.push_back(static_cast<std::size_t>(e));
  }
  if (bytes.size() - pos != count * sizeof(float))
    fail(Errc::MalformedFile, what + ": payload size does not match extents");
  blob.values.resize(count);
  take(blob.values.data(), count * sizeof(float));
  return blob;
}

inline void write_mvtf(const std::filesystem::path& path, const Shape& shape, const float* values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  const std::string bytes = mvtf_encode(shape, values);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::IoError, "short write to " + path.string());
}

template <typename T>
void write_mvtf(const std::filesystem::path& path, const Tensor<T>& t) {
  std::vector<float> v(t.values().begin(), t.values().end());
  write_mvtf(path, t.shape(), v.data());
}

inline MvtfBlob read_mvtf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoError, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return mvtf_decode(bytes, path.string());
}

}  // namespace mvgsr::ad
