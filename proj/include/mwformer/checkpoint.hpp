#pragma once

// MWFC checkpoint container: an ordered list of named tensors in a flat
// little-endian layout with a CRC32 over the entry payload. Rewriting a
// loaded checkpoint reproduces the file byte for byte, which is what the
// resume-equivalence guarantees lean on.
//
// layout: magic "MWFC", u32 version=1, u32 entry count; per entry:
//   u16 name length, name bytes, u8 dtype (0=f32, 1=f64), u8 ndim,
//   u64 dims..., raw little-endian data; after the last entry a u32 CRC32
//   of everything between the header and the checksum.

#include <map>
#include <sstream>

#include <zlib.h>

#include "mwformer/serialize.hpp"

namespace mwf {

constexpr std::uint32_t kMwfcVersion = 1;

namespace detail {

inline std::uint32_t crc32_of(const std::string& bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off),
                  static_cast<uInt>(chunk));
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

class Checkpoint {
 public:
  enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

  struct Entry {
    std::string name;
    Dtype dtype = Dtype::f32;
    Shape dims;
    std::vector<float> f32;
    std::vector<double> f64;
  };

  void put_f32(const std::string& name, Shape dims, std::vector<float> data) {
    Entry e;
    e.name = name;
    e.dtype = Dtype::f32;
    e.dims = std::move(dims);
    e.f32 = std::move(data);
    if (shape_numel(e.dims) != e.f32.size())
      throw ContractError("checkpoint entry '" + name + "': dims " + shape_str(e.dims) +
                          " disagree with " + std::to_string(e.f32.size()) + " values");
    insert(std::move(e));
  }

  void put_f64(const std::string& name, Shape dims, std::vector<double> data) {
    Entry e;
    e.name = name;
    e.dtype = Dtype::f64;
    e.dims = std::move(dims);
    e.f64 = std::move(data);
    if (shape_numel(e.dims) != e.f64.size())
      throw ContractError("checkpoint entry '" + name + "': dims " + shape_str(e.dims) +
                          " disagree with " + std::to_string(e.f64.size()) + " values");
    insert(std::move(e));
  }

  /// Scalars are stored as rank-1 [1] f64 entries.
  void put_scalar(const std::string& name, double v) { put_f64(name, {1}, {v}); }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("checkpoint has no entry '" + name + "'");
    return entries_[it->second];
  }

  const std::vector<float>& get_f32(const std::string& name, const Shape& expect) const {
    const Entry& e = entry(name);
    if (e.dtype != Dtype::f32)
      throw IoError("checkpoint entry '" + name + "' is not f32");
    if (e.dims != expect)
      throw IoError("checkpoint entry '" + name + "' has shape " + shape_str(e.dims) +
                    ", expected " + shape_str(expect));
    return e.f32;
  }

  const std::vector<double>& get_f64(const std::string& name, const Shape& expect) const {
    const Entry& e = entry(name);
    if (e.dtype != Dtype::f64)
      throw IoError("checkpoint entry '" + name + "' is not f64");
    if (e.dims != expect)
      throw IoError("checkpoint entry '" + name + "' has shape " + shape_str(e.dims) +
                    ", expected " + shape_str(expect));
    return e.f64;
  }

  double get_scalar(const std::string& name) const { return get_f64(name, {1})[0]; }

  const std::vector<Entry>& entries() const { return entries_; }

  void save(const std::string& path) const {
    std::ostringstream payload(std::ios::binary);
    for (const Entry& e : entries_) {
      if (e.name.size() > 0xffff)
        throw ContractError("checkpoint entry name too long: " + e.name);
      detail::put_u16(payload, static_cast<std::uint16_t>(e.name.size()));
      detail::put_bytes(payload, e.name.data(), e.name.size());
      detail::put_u8(payload, static_cast<std::uint8_t>(e.dtype));
      detail::put_u8(payload, static_cast<std::uint8_t>(e.dims.size()));
      for (std::size_t d : e.dims) detail::put_u64(payload, d);
      if (e.dtype == Dtype::f32)
        for (float v : e.f32) detail::put_f32(payload, v);
      else
        for (double v : e.f64) detail::put_f64(payload, v);
    }
    const std::string body = payload.str();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("MWFC", 4);
    detail::put_u32(os, kMwfcVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(entries_.size()));
    detail::put_bytes(os, body.data(), body.size());
    detail::put_u32(os, detail::crc32_of(body));
    os.flush();
    if (!os) throw IoError("write failed: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    std::ostringstream raw(std::ios::binary);
    raw << is.rdbuf();
    const std::string file = raw.str();
    if (file.size() < 16 || file.compare(0, 4, "MWFC") != 0)
      throw IoError("not an MWFC checkpoint (bad magic): " + path);

    std::istringstream hdr(file.substr(4, 8), std::ios::binary);
    const std::uint32_t version = detail::get_u32(hdr, path);
    if (version != kMwfcVersion)
      throw IoError("unsupported MWFC version " + std::to_string(version) + " in " + path);
    const std::uint32_t count = detail::get_u32(hdr, path);

    const std::string body = file.substr(12, file.size() - 16);
    std::istringstream tail(file.substr(file.size() - 4), std::ios::binary);
    if (detail::get_u32(tail, path) != detail::crc32_of(body))
      throw IoError("checksum mismatch (corrupt checkpoint): " + path);

    Checkpoint out;
    std::istringstream es(body, std::ios::binary);
    for (std::uint32_t i = 0; i < count; ++i) {
      Entry e;
      const std::uint16_t len = detail::get_u16(es, path);
      e.name.resize(len);
      detail::get_bytes(es, e.name.data(), len, path);
      const std::uint8_t dt = detail::get_u8(es, path);
      if (dt > 1) throw IoError("unknown dtype code in " + path);
      e.dtype = static_cast<Dtype>(dt);
      const std::uint8_t ndim = detail::get_u8(es, path);
      if (ndim == 0 || ndim > 8) throw IoError("implausible tensor rank in " + path);
      e.dims.resize(ndim);
      std::size_t numel = 1;
      for (auto& d : e.dims) {
        d = detail::get_u64(es, path);
        if (d == 0 || numel > (1u << 28) / d)
          throw IoError("implausible tensor dims in " + path);
        numel *= d;
      }
      if (e.dtype == Dtype::f32) {
        e.f32.resize(numel);
        for (float& v : e.f32) v = detail::get_f32(es, path);
      } else {
        e.f64.resize(numel);
        for (double& v : e.f64) v = detail::get_f64(es, path);
      }
      out.insert(std::move(e));
    }
    if (es.peek() != std::istringstream::traits_type::eof())
      throw IoError("trailing bytes after last entry in " + path);
    return out;
  }

 private:
  void insert(Entry e) {
    if (index_.count(e.name))
      throw ContractError("duplicate checkpoint entry '" + e.name + "'");
    index_[e.name] = entries_.size();
    entries_.push_back(std::move(e));
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace mwf
