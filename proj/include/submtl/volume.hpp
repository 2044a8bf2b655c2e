#ifndef SUBMTL_VOLUME_HPP
#define SUBMTL_VOLUME_HPP

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "submtl/common.hpp"

namespace submtl {

/// Volume extent in voxels: depth, height, width.
struct Dims {
  std::uint32_t d = 0;
  std::uint32_t h = 0;
  std::uint32_t w = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(d) * h * w;
  }
  bool divisible_by(std::uint32_t p) const {
    return p > 0 && d % p == 0 && h % p == 0 && w % p == 0;
  }
  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& dims) {
  return std::to_string(dims.d) + "x" + std::to_string(dims.h) + "x" +
         std::to_string(dims.w);
}

/// One subject's baseline scan. Voxels are row-major with depth outermost.
struct Volume {
  std::string subject_id;
  Dims dims;
  std::vector<float> voxels;

  float at(std::size_t z, std::size_t y, std::size_t x) const {
    return voxels[(z * dims.h + y) * dims.w + x];
  }
  float& at(std::size_t z, std::size_t y, std::size_t x) {
    return voxels[(z * dims.h + y) * dims.w + x];
  }
};

inline void validate(const Volume& v) {
  const std::string who = "volume '" + v.subject_id + "'";
  require(v.dims.d >= 1 && v.dims.h >= 1 && v.dims.w >= 1, ErrorKind::data,
          who + ": every dimension must be >= 1");
  require(v.voxels.size() == v.dims.voxels(), ErrorKind::data,
          who + ": voxel count does not match dims " + to_string(v.dims));
  for (float x : v.voxels)
    require(std::isfinite(x), ErrorKind::data,
            who + ": non-finite intensity");
}

struct NormalizedVolume {
  Volume volume;
  bool degenerate = false;  ///< input was constant; output is all zeros
};

/// Z-score intensities (population sd). Constant volumes come back as zeros
/// with `degenerate` set.
inline NormalizedVolume normalize_volume(const Volume& v) {
  validate(v);
  NormalizedVolume out{v, false};
  const auto n = static_cast<double>(v.voxels.size());
  double mean = 0.0;
  for (float x : v.voxels) mean += x;
  mean /= n;
  double ss = 0.0;
  for (float x : v.voxels) {
    const double d = x - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / n);
  if (!(sd > 0.0) || sd < 1e-12 * std::max(1.0, std::abs(mean))) {
    std::fill(out.volume.voxels.begin(), out.volume.voxels.end(), 0.0f);
    out.degenerate = true;
    return out;
  }
  for (float& x : out.volume.voxels)
    x = static_cast<float>((x - mean) / sd);
  return out;
}

// ---------------------------------------------------------------------------
// Raw volume files: 16-byte magic, three u32 LE dims, then f32 LE voxels.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 16> kVolumeMagic = {
    'S', 'U', 'B', 'S', 'C', 'O', 'R', 'E', 'V', 'O', 'L', 0, 0, 0, 0, 0};

namespace detail {

inline void put_u32_le(std::vector<char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32_le(std::vector<char>& buf, float f) {
  put_u32_le(buf, std::bit_cast<std::uint32_t>(f));
}

inline float get_f32_le(const unsigned char* p) {
  return std::bit_cast<float>(get_u32_le(p));
}

}  // namespace detail

inline std::vector<char> encode_volume(const Volume& v) {
  std::vector<char> buf;
  buf.reserve(16 + 12 + 4 * v.voxels.size());
  buf.insert(buf.end(), kVolumeMagic.begin(), kVolumeMagic.end());
  detail::put_u32_le(buf, v.dims.d);
  detail::put_u32_le(buf, v.dims.h);
  detail::put_u32_le(buf, v.dims.w);
  for (float x : v.voxels) detail::put_f32_le(buf, x);
  return buf;
}

inline void write_volume(const std::filesystem::path& path, const Volume& v) {
  validate(v);
  const auto buf = encode_volume(v);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::data,
          "cannot open '" + path.string() + "' for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  require(static_cast<bool>(os), ErrorKind::data,
          "write failed for '" + path.string() + "'");
}

inline Volume read_volume(const std::filesystem::path& path,
                          std::string subject_id = {}) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::data,
          "cannot open volume '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());
  const std::string who = "volume '" + path.string() + "'";
  require(buf.size() >= 28, ErrorKind::data, who + ": truncated header");
  require(std::memcmp(buf.data(), kVolumeMagic.data(), kVolumeMagic.size()) == 0,
          ErrorKind::data, who + ": bad magic");
  Volume v;
  v.subject_id = std::move(subject_id);
  v.dims = {detail::get_u32_le(buf.data() + 16),
            detail::get_u32_le(buf.data() + 20),
            detail::get_u32_le(buf.data() + 24)};
  require(v.dims.d >= 1 && v.dims.h >= 1 && v.dims.w >= 1, ErrorKind::data,
          who + ": zero dimension");
  const std::size_t n = v.dims.voxels();
  require(buf.size() == 28 + 4 * n, ErrorKind::data,
          who + ": payload size does not match dims " + to_string(v.dims));
  v.voxels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    v.voxels[i] = detail::get_f32_le(buf.data() + 28 + 4 * i);
  validate(v);
  return v;
}

}  // namespace submtl

#endif  // SUBMTL_VOLUME_HPP
