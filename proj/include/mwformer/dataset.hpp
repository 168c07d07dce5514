#pragma once

// MWDS sample container: a flat little-endian binary format holding weather
// sample pairs plus the seeds they were generated from, so any file can be
// cross-checked against regeneration bit-for-bit.
//
// layout: magic "MWDS", u32 version=1, u64 sample count; per sample:
//   u64 seed, u8 class-set bitmask, f32 severity, u8 split tag,
//   clean tensor, degraded tensor — each as u8 ndim, u64 dims..., f32 data.

#include <cstring>
#include <fstream>
#include <string>

#include "mwformer/config.hpp"
#include "mwformer/serialize.hpp"
#include "mwformer/weather.hpp"

namespace mwf {

constexpr std::uint32_t kMwdsVersion = 1;

inline void write_mwds(const std::string& path, const std::vector<WeatherSample>& samples) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("MWDS", 4);
  detail::put_u32(os, kMwdsVersion);
  detail::put_u64(os, samples.size());
  for (const WeatherSample& s : samples) {
    detail::put_u64(os, s.seed);
    detail::put_u8(os, weather_bitmask(s.classes));
    detail::put_f32(os, s.severity);
    detail::put_u8(os, static_cast<std::uint8_t>(s.split));
    detail::put_tensor_f32(os, s.clean);
    detail::put_tensor_f32(os, s.degraded);
  }
  os.flush();
  if (!os) throw IoError("write failed: " + path);
}

inline std::vector<WeatherSample> read_mwds(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  char magic[4];
  detail::get_bytes(is, magic, 4, path);
  if (std::memcmp(magic, "MWDS", 4) != 0)
    throw IoError("not an MWDS container (bad magic): " + path);
  const std::uint32_t version = detail::get_u32(is, path);
  if (version != kMwdsVersion)
    throw IoError("unsupported MWDS version " + std::to_string(version) + " in " + path);
  const std::uint64_t count = detail::get_u64(is, path);

  std::vector<WeatherSample> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    WeatherSample s;
    s.seed = detail::get_u64(is, path);
    try {
      s.classes = weather_from_bitmask(detail::get_u8(is, path));
    } catch (const IoError& e) {
      throw IoError(std::string(e.what()) + " in " + path);
    }
    s.severity = detail::get_f32(is, path);
    const std::uint8_t split = detail::get_u8(is, path);
    if (split > 2) throw IoError("invalid split tag in " + path);
    s.split = static_cast<Split>(split);
    s.clean = detail::get_tensor_f32(is, path);
    s.degraded = detail::get_tensor_f32(is, path);
    out.push_back(std::move(s));
  }
  return out;
}

/// 8-bit binary PPM (P6) export for eyeballing samples.
inline void write_ppm(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 3 || img.size(0) != 3)
    throw DimensionError("write_ppm: expects a [3,H,W] image, got " +
                         shape_str(img.shape()));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  const std::size_t h = img.size(1), w = img.size(2);
  os << "P6\n" << w << " " << h << "\n255\n";
  const auto& v = img.values();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float f = v[(c * h + y) * w + x];
        const int q = static_cast<int>(std::lround(255.0 * (f < 0.f ? 0.f : (f > 1.f ? 1.f : f))));
        os.put(static_cast<char>(q));
      }
  os.flush();
  if (!os) throw IoError("write failed: " + path);
}

/// Reads a binary (P6) PPM with 8-bit samples into a [3,H,W] float image in
/// [0,1]. Comments and arbitrary whitespace in the header are tolerated.
inline Tensor<float> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);

  const auto next_token = [&]() -> std::string {
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
      if (ch == '#') {  // comment to end of line
        while ((ch = is.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw IoError("truncated PPM header: " + path);
    return tok;
  };

  if (next_token() != "P6") throw IoError("not a binary PPM (P6) file: " + path);
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token());
    h = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    throw IoError("malformed PPM header: " + path);
  }
  if (w == 0 || h == 0) throw IoError("empty PPM image: " + path);
  if (maxval != 255)
    throw IoError("unsupported PPM maxval " + std::to_string(maxval) + " in " + path +
                  " (only 255 is supported)");
  // The header terminator is the single whitespace byte just consumed by
  // next_token(); pixel data follows immediately.
  std::vector<unsigned char> raw(3 * w * h);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size())
    throw IoError("truncated PPM pixel data: " + path);

  std::vector<float> v(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        v[(c * h + y) * w + x] = raw[(y * w + x) * 3 + c] / 255.f;
  return Tensor<float>::from({3, h, w}, std::move(v));
}

/// Dataset settings from config text (`dataset.*` keys).
inline DatasetConfig dataset_config_from(const Config& c) {
  DatasetConfig d;
  if (c.has("dataset.counts")) {
    const std::vector<std::size_t> counts = c.count_list("dataset.counts");
    if (counts.size() != d.counts.size())
      throw ConfigError("dataset.counts: expected " + std::to_string(d.counts.size()) +
                        " per-class counts, got " + std::to_string(counts.size()));
    std::copy(counts.begin(), counts.end(), d.counts.begin());
  }
  d.height = c.count("dataset.height", d.height);
  d.width = c.count("dataset.width", d.width);
  d.seed = c.count("dataset.seed", d.seed);
  d.severity_lo = static_cast<float>(c.number("dataset.severity_lo", d.severity_lo));
  d.severity_hi = static_cast<float>(c.number("dataset.severity_hi", d.severity_hi));
  d.validate();
  return d;
}

}  // namespace mwf
