#pragma once

// Small file helpers shared by datasets, checkpoints and reports: raw
// little-endian float32 blobs, binary PGM export, and whole-file reads.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "coffee/tensor.hpp"

namespace coffee {

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Error::Kind::io, "cannot open for writing: " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw Error(Error::Kind::io, "write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Error::Kind::io, "cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(Error::Kind::io, "read failed: " + path.string());
  return bytes;
}

// float32 <-> little-endian bytes, independent of host endianness.
inline void append_f32le(std::string& out, const float* vals, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    uint32_t u;
    static_assert(sizeof(u) == sizeof(float));
    std::char_traits<char>::copy(reinterpret_cast<char*>(&u),
                                 reinterpret_cast<const char*>(&vals[i]), 4);
    out.push_back(char(u & 0xff));
    out.push_back(char((u >> 8) & 0xff));
    out.push_back(char((u >> 16) & 0xff));
    out.push_back(char((u >> 24) & 0xff));
  }
}

inline void read_f32le(const std::string& bytes, size_t offset, float* vals, size_t n,
                       const std::string& what) {
  if (offset + 4 * n > bytes.size())
    throw Error(Error::Kind::io, what + ": truncated float32 blob (need " +
                                     std::to_string(offset + 4 * n) + " bytes, have " +
                                     std::to_string(bytes.size()) + ")");
  for (size_t i = 0; i < n; ++i) {
    const size_t o = offset + 4 * i;
    const uint32_t u = uint32_t(uint8_t(bytes[o])) | uint32_t(uint8_t(bytes[o + 1])) << 8 |
                       uint32_t(uint8_t(bytes[o + 2])) << 16 | uint32_t(uint8_t(bytes[o + 3])) << 24;
    std::char_traits<char>::copy(reinterpret_cast<char*>(&vals[i]),
                                 reinterpret_cast<const char*>(&u), 4);
  }
}

// Binary PGM (P5), one byte per pixel, for eyeballing 16x16 images.
inline void write_pgm(const std::filesystem::path& path, const float* pixels, int w, int h) {
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (int i = 0; i < w * h; ++i) {
    float v = pixels[i];
    if (v < 0.0f) v = 0.0f;
    if (v > 1.0f) v = 1.0f;
    bytes.push_back(char(uint8_t(v * 255.0f + 0.5f)));
  }
  write_file(path, bytes);
}

}  // namespace coffee
