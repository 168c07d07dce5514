#pragma once

// Little-endian stream primitives shared by the binary file formats.
// Everything is written byte-by-byte so files are identical across hosts.

#include <cstring>
#include <fstream>
#include <string>

#include "mwformer/tensor.hpp"

namespace mwf {
namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u8(std::ostream& os, std::uint8_t v) { put_bytes(os, &v, 1); }

inline void put_u16(std::ostream& os, std::uint16_t v) {
  std::uint8_t b[2];
  for (int i = 0; i < 2; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  put_bytes(os, b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  put_bytes(os, b, 8);
}

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw IoError("truncated file: " + path);
}

inline std::uint8_t get_u8(std::istream& is, const std::string& path) {
  std::uint8_t v;
  get_bytes(is, &v, 1, path);
  return v;
}

inline std::uint16_t get_u16(std::istream& is, const std::string& path) {
  std::uint8_t b[2];
  get_bytes(is, b, 2, path);
  std::uint16_t v = 0;
  for (int i = 0; i < 2; ++i) v = static_cast<std::uint16_t>(v | (b[i] << (8 * i)));
  return v;
}

inline std::uint32_t get_u32(std::istream& is, const std::string& path) {
  std::uint8_t b[4];
  get_bytes(is, b, 4, path);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const std::string& path) {
  std::uint8_t b[8];
  get_bytes(is, b, 8, path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline float get_f32(std::istream& is, const std::string& path) {
  const std::uint32_t bits = get_u32(is, path);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline double get_f64(std::istream& is, const std::string& path) {
  const std::uint64_t bits = get_u64(is, path);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void put_tensor_f32(std::ostream& os, const Tensor<float>& t) {
  put_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d = 0; d < t.rank(); ++d) put_u64(os, t.size(d));
  for (float v : t.values()) put_f32(os, v);
}

inline Tensor<float> get_tensor_f32(std::istream& is, const std::string& path) {
  const std::uint8_t ndim = get_u8(is, path);
  if (ndim == 0 || ndim > 8) throw IoError("implausible tensor rank in " + path);
  Shape shape(ndim);
  std::size_t numel = 1;
  for (auto& d : shape) {
    d = get_u64(is, path);
    if (d == 0 || numel > (1u << 28) / d) throw IoError("implausible tensor dims in " + path);
    numel *= d;
  }
  std::vector<float> data(numel);
  for (float& v : data) v = get_f32(is, path);
  return Tensor<float>::from(std::move(shape), std::move(data));
}

}  // namespace detail
}  // namespace mwf
