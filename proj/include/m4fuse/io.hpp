#pragma once

// M4FV volume files: magic "M4FV", u8 version (1), u8 rank (5), five u32 LE
// dims (B,C,D,H,W), then B*C*D*H*W float32 LE values in buffer order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "m4fuse/tensor.hpp"

namespace m4fuse::io {

inline constexpr std::array<char, 4> kVolumeMagic{'M', '4', 'F', 'V'};
inline constexpr std::uint8_t kVolumeVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated stream reading u32");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace detail

/// Writes one M4FV record. Tensors of rank < 5 are padded with leading ones.
inline void write_volume(std::ostream& os, const Tensor<float>& t) {
  if (t.rank() > 5) throw ShapeError("M4FV holds at most rank 5, got " + shape_str(t.shape()));
  Shape s(5 - t.rank(), 1);
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  os.write(kVolumeMagic.data(), 4);
  os.put(static_cast<char>(kVolumeVersion));
  os.put(static_cast<char>(5));
  for (auto d : s) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (float v : t.vec()) detail::put_f32(os, v);
  if (!os) throw IoError("write failed");
}

inline Tensor<float> read_volume(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kVolumeMagic.data(), 4) != 0) throw IoError("bad M4FV magic");
  int version = is.get();
  int rank = is.get();
  if (version != kVolumeVersion) throw IoError("unsupported M4FV version " + std::to_string(version));
  if (rank != 5) throw IoError("unsupported M4FV rank " + std::to_string(rank));
  Shape s(5);
  for (auto& d : s) {
    d = detail::get_u32(is);
    if (d == 0) throw IoError("zero dimension in M4FV header");
  }
  std::vector<float> data(shape_size(s));
  for (auto& v : data) v = detail::get_f32(is);
  return Tensor<float>(s, std::move(data));
}

inline void save_volume(const std::filesystem::path& path, const Tensor<float>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_volume(os, t);
}

inline Tensor<float> load_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_volume(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace m4fuse::io
