#pragma once

// Synthetic weather corpus: procedurally generated clean scenes plus three
// parameterized degradations (drops, streaks+haze veil, flakes). Every
// sample is a pure function of (seed, config), so containers can store seeds
// and samples can be regenerated bit-exactly.

#include <array>
#include <cstdint>
#include <string>

#include "mwformer/tensor.hpp"

namespace mwf {

enum class Weather : std::uint8_t { Drop = 0, StreakHaze = 1, Flake = 2 };

constexpr std::array<Weather, 3> kAllWeather{Weather::Drop, Weather::StreakHaze,
                                             Weather::Flake};

inline const char* to_string(Weather w) {
  switch (w) {
    case Weather::Drop: return "drop";
    case Weather::StreakHaze: return "streak_haze";
    case Weather::Flake: return "flake";
  }
  throw ContractError("unknown weather class id " +
                      std::to_string(static_cast<int>(w)));
}

inline Weather weather_from_string(const std::string& s) {
  for (Weather w : kAllWeather)
    if (s == to_string(w)) return w;
  throw ConfigError("unknown weather class '" + s + "' (drop, streak_haze, flake)");
}

inline std::uint8_t weather_bitmask(const std::vector<Weather>& classes) {
  std::uint8_t m = 0;
  for (Weather w : classes) m |= static_cast<std::uint8_t>(1u << static_cast<unsigned>(w));
  return m;
}

/// Decodes a class-set bitmask in ascending class order (the canonical
/// application order for stored samples).
inline std::vector<Weather> weather_from_bitmask(std::uint8_t mask) {
  std::vector<Weather> out;
  for (Weather w : kAllWeather)
    if (mask & (1u << static_cast<unsigned>(w))) out.push_back(w);
  if (out.empty() || (mask >> 3) != 0)
    throw IoError("invalid weather class bitmask " + std::to_string(int(mask)));
  return out;
}

namespace detail {

constexpr std::uint64_t kCleanSalt = 0x636c65616eULL;    // scene generator stream
constexpr std::uint64_t kClassSalt = 0x77656174686572ULL;  // per-class degradation stream
constexpr std::uint64_t kSeveritySalt = 0x736576ULL;
constexpr std::uint64_t kSplitSalt = 0x73706c6974ULL;
constexpr std::uint64_t kHybridSalt = 0x687962ULL;

inline float clamp01f(float v) { return v < 0.f ? 0.f : (v > 1.f ? 1.f : v); }

inline float& px(std::vector<float>& img, std::size_t c, std::size_t y, std::size_t x,
                 std::size_t h, std::size_t w) {
  return img[(c * h + y) * w + x];
}

}  // namespace detail

/// Procedural clean scene: a directional two-color gradient, 3-8 random
/// rectangles/disks, and a coarse value-noise texture. Values in [0,1].
inline Tensor<float> gen_clean(std::uint64_t seed, std::size_t h, std::size_t w) {
  if (h < 16 || w < 16)
    throw ConfigError("gen_clean: minimum size is 16x16, requested " + std::to_string(h) +
                      "x" + std::to_string(w));
  Rng rng(mix_seed(seed, detail::kCleanSalt));
  std::vector<float> img(3 * h * w, 0.f);

  // gradient background
  float c0[3], c1[3];
  for (float& v : c0) v = static_cast<float>(rng.uniform());
  for (float& v : c1) v = static_cast<float>(rng.uniform());
  const double ang = rng.uniform(0.0, 6.283185307179586);
  const double dx = std::cos(ang), dy = std::sin(ang);
  const double norm = std::abs(dx) + std::abs(dy) + 1e-12;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / static_cast<double>(w - 1) - 0.5;
      const double fy = static_cast<double>(y) / static_cast<double>(h - 1) - 0.5;
      double t = 0.5 + (fx * dx + fy * dy) / norm;
      t = t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
      for (std::size_t c = 0; c < 3; ++c)
        detail::px(img, c, y, x, h, w) =
            static_cast<float>(c0[c] + t * (c1[c] - c0[c]));
    }

  // foreground shapes
  const int shapes = rng.range_int(3, 8);
  for (int s = 0; s < shapes; ++s) {
    const bool disk = rng.uniform() < 0.5;
    float col[3];
    for (float& v : col) v = static_cast<float>(rng.uniform());
    const long cx = static_cast<long>(rng.below(w));
    const long cy = static_cast<long>(rng.below(h));
    const long size = rng.range_int(static_cast<int>(h / 8), static_cast<int>(h / 3));
    const float alpha = static_cast<float>(rng.uniform(0.6, 1.0));
    const long r = std::max<long>(1, size / 2);
    for (long y = cy - r; y <= cy + r; ++y) {
      if (y < 0 || y >= static_cast<long>(h)) continue;
      for (long x = cx - r; x <= cx + r; ++x) {
        if (x < 0 || x >= static_cast<long>(w)) continue;
        if (disk && (x - cx) * (x - cx) + (y - cy) * (y - cy) > r * r) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          float& v = detail::px(img, c, y, x, h, w);
          v = v + alpha * (col[c] - v);
        }
      }
    }
  }

  // low-amplitude value noise on a 5x5 knot grid, bilinearly interpolated
  constexpr std::size_t kKnots = 5;
  float knots[kKnots][kKnots];
  for (auto& row : knots)
    for (float& v : row) v = static_cast<float>(rng.uniform(-0.05, 0.05));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double gy = static_cast<double>(y) / (h - 1) * (kKnots - 1);
      const double gx = static_cast<double>(x) / (w - 1) * (kKnots - 1);
      const std::size_t iy = std::min<std::size_t>(static_cast<std::size_t>(gy), kKnots - 2);
      const std::size_t ix = std::min<std::size_t>(static_cast<std::size_t>(gx), kKnots - 2);
      const double fy = gy - iy, fx = gx - ix;
      const double n = (1 - fy) * ((1 - fx) * knots[iy][ix] + fx * knots[iy][ix + 1]) +
                       fy * ((1 - fx) * knots[iy + 1][ix] + fx * knots[iy + 1][ix + 1]);
      for (std::size_t c = 0; c < 3; ++c) {
        float& v = detail::px(img, c, y, x, h, w);
        v = detail::clamp01f(v + static_cast<float>(n));
      }
    }

  return Tensor<float>::from({3, h, w}, std::move(img));
}

namespace detail {

inline void apply_drop(std::vector<float>& img, std::size_t h, std::size_t w,
                       float severity, Rng& rng) {
  // water drops: elliptical regions showing blurred, slightly brightened
  // content (refraction-ish). Blur is taken from a snapshot so overlapping
  // drops do not compound.
  const std::vector<float> src = img;
  const int count = rng.range_int(5, 5 + static_cast<int>(std::lround(15.0 * severity)));
  for (int i = 0; i < count; ++i) {
    const long cx = static_cast<long>(rng.below(w));
    const long cy = static_cast<long>(rng.below(h));
    const long rx = rng.range_int(2, std::max(3, static_cast<int>(w / 6)));
    const long ry = rng.range_int(2, std::max(3, static_cast<int>(h / 6)));
    const float brighten =
        1.f + 0.3f * severity * static_cast<float>(rng.uniform(0.5, 1.0));
    for (long y = cy - ry; y <= cy + ry; ++y) {
      if (y < 0 || y >= static_cast<long>(h)) continue;
      for (long x = cx - rx; x <= cx + rx; ++x) {
        if (x < 0 || x >= static_cast<long>(w)) continue;
        const double d = static_cast<double>((x - cx) * (x - cx)) / (rx * rx) +
                         static_cast<double>((y - cy) * (y - cy)) / (ry * ry);
        if (d > 1.0) continue;
        const float blend = 0.8f * static_cast<float>(1.0 - d);  // soft edge
        for (std::size_t c = 0; c < 3; ++c) {
          float acc = 0.f;
          int n = 0;
          for (long by = y - 1; by <= y + 1; ++by)
            for (long bx = x - 1; bx <= x + 1; ++bx) {
              if (by < 0 || by >= static_cast<long>(h) || bx < 0 ||
                  bx >= static_cast<long>(w))
                continue;
              acc += src[(c * h + by) * w + bx];
              ++n;
            }
          const float blurred = clamp01f(acc / static_cast<float>(n) * brighten + 0.03f);
          float& v = px(img, c, y, x, h, w);
          v = v + blend * (blurred - v);
        }
      }
    }
  }
}

inline void apply_streak_haze(std::vector<float>& img, std::size_t h, std::size_t w,
                              float severity, Rng& rng) {
  // oriented bright streaks sharing a dominant near-vertical angle, then a
  // global veil: out = (1-t)*img + t with t = 0.3*severity
  const int count = rng.range_int(8, 8 + static_cast<int>(std::lround(22.0 * severity)));
  const double base = rng.uniform(-0.35, 0.35);
  for (int i = 0; i < count; ++i) {
    const double x0 = rng.uniform(0.0, static_cast<double>(w - 1));
    const double y0 = rng.uniform(0.0, static_cast<double>(h - 1));
    const int len = rng.range_int(static_cast<int>(h / 4), static_cast<int>(h / 2));
    const double ang = base + rng.uniform(-0.1, 0.1);
    const double sx = std::sin(ang), sy = std::cos(ang);
    const float a = 0.25f + 0.35f * severity * static_cast<float>(rng.uniform(0.6, 1.0));
    for (int t = 0; t < len; ++t) {
      const long x = std::lround(x0 + t * sx);
      const long y = std::lround(y0 + t * sy);
      if (x < 0 || x >= static_cast<long>(w) || y < 0 || y >= static_cast<long>(h))
        continue;
      for (std::size_t c = 0; c < 3; ++c) {
        float& v = px(img, c, y, x, h, w);
        v = v + a * (1.f - v);
      }
    }
  }
  const float t = 0.3f * severity;
  for (float& v : img) v = (1.f - t) * v + t;
}

inline void apply_flake(std::vector<float>& img, std::size_t h, std::size_t w,
                        float severity, Rng& rng) {
  // white near-circular dots, radius 1-3 px; strictly interior disks keep
  // each dot within pi*r^2 pixels
  const int count = rng.range_int(30, 30 + static_cast<int>(std::lround(120.0 * severity)));
  for (int i = 0; i < count; ++i) {
    const long cx = static_cast<long>(rng.below(w));
    const long cy = static_cast<long>(rng.below(h));
    const long r = rng.range_int(1, 3);
    const float a = static_cast<float>(rng.uniform(0.75, 0.95));
    for (long y = cy - r; y <= cy + r; ++y) {
      if (y < 0 || y >= static_cast<long>(h)) continue;
      for (long x = cx - r; x <= cx + r; ++x) {
        if (x < 0 || x >= static_cast<long>(w)) continue;
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) >= r * r) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          float& v = px(img, c, y, x, h, w);
          v = v + a * (1.f - v);
        }
      }
    }
  }
}

}  // namespace detail

/// Applies each degradation class in list order. Class i draws from its own
/// sub-stream mix_seed(seed, class-id), which is what makes multi-class
/// application equal the composition of single-class applications with the
/// same master seed.
inline Tensor<float> degrade(const Tensor<float>& clean, const std::vector<Weather>& classes,
                             float severity, std::uint64_t seed) {
  if (classes.empty()) throw ContractError("degrade: empty degradation class list");
  if (!(severity > 0.f) || severity > 1.f)
    throw ContractError("degrade: severity " + std::to_string(severity) +
                        " outside (0, 1]");
  if (clean.rank() != 3 || clean.size(0) != 3)
    throw DimensionError("degrade: expects a [3,H,W] image, got " +
                         shape_str(clean.shape()));
  const std::size_t h = clean.size(1), w = clean.size(2);
  std::vector<float> img = clean.values();
  for (Weather cls : classes) {
    Rng rng(mix_seed(seed, detail::kClassSalt + static_cast<std::uint64_t>(cls)));
    switch (cls) {
      case Weather::Drop: detail::apply_drop(img, h, w, severity, rng); break;
      case Weather::StreakHaze: detail::apply_streak_haze(img, h, w, severity, rng); break;
      case Weather::Flake: detail::apply_flake(img, h, w, severity, rng); break;
    }
    for (float& v : img) v = detail::clamp01f(v);
  }
  return Tensor<float>::from({3, h, w}, std::move(img));
}

// ---------------------------------------------------------------------------
// sample plumbing
// ---------------------------------------------------------------------------

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  throw ContractError("unknown split tag");
}

struct WeatherSample {
  std::uint64_t seed = 0;
  std::vector<Weather> classes;
  float severity = 1.f;
  Split split = Split::train;
  Tensor<float> clean;
  Tensor<float> degraded;
};

struct DatasetConfig {
  std::array<std::size_t, 3> counts{200, 200, 200};  // per class, kAllWeather order
  std::size_t height = 32;
  std::size_t width = 32;
  std::uint64_t seed = 1234;
  float severity_lo = 0.3f;
  float severity_hi = 1.0f;

  void validate() const {
    for (std::size_t n : counts)
      if (n == 0) throw ConfigError("dataset: per-class counts must be positive");
    if (!(severity_lo > 0.f) || severity_hi > 1.f || severity_lo > severity_hi)
      throw ConfigError("dataset: severity range must satisfy 0 < lo <= hi <= 1");
  }
};

/// Regenerates one sample purely from its identity fields.
inline WeatherSample regen_sample(std::uint64_t seed, const std::vector<Weather>& classes,
                                  float severity, Split split, std::size_t h,
                                  std::size_t w) {
  WeatherSample s;
  s.seed = seed;
  s.classes = classes;
  s.severity = severity;
  s.split = split;
  s.clean = gen_clean(seed, h, w);
  s.degraded = degrade(s.clean, classes, severity, seed);
  return s;
}

/// Builds the balanced single-class corpus: per class, a seeded shuffle
/// assigns floor(10%) to val, floor(10%) to test, the rest to train.
inline std::vector<WeatherSample> make_samples(const DatasetConfig& cfg) {
  cfg.validate();
  std::vector<WeatherSample> out;
  for (std::size_t ci = 0; ci < kAllWeather.size(); ++ci) {
    const Weather cls = kAllWeather[ci];
    const std::size_t n = cfg.counts[ci];
    const std::size_t n_val = n / 10, n_test = n / 10;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle(mix_seed(cfg.seed, detail::kSplitSalt + ci));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    std::vector<Split> tag(n, Split::train);
    for (std::size_t i = 0; i < n_val; ++i) tag[order[i]] = Split::val;
    for (std::size_t i = 0; i < n_test; ++i) tag[order[n_val + i]] = Split::test;

    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t sample_seed = mix_seed(cfg.seed, ci, i);
      Rng sr(mix_seed(sample_seed, detail::kSeveritySalt));
      const float severity = cfg.severity_lo + (cfg.severity_hi - cfg.severity_lo) *
                                                   static_cast<float>(sr.uniform());
      out.push_back(
          regen_sample(sample_seed, {cls}, severity, tag[i], cfg.height, cfg.width));
    }
  }
  return out;
}

/// Evaluation-only multi-class samples (e.g. streaks+flakes for cascade
/// tests); these combinations never appear in training corpora.
inline std::vector<WeatherSample> make_hybrid_samples(std::size_t count,
                                                      const std::vector<Weather>& classes,
                                                      std::size_t h, std::size_t w,
                                                      std::uint64_t seed,
                                                      float severity_lo = 0.5f,
                                                      float severity_hi = 1.0f) {
  if (count == 0) throw ConfigError("hybrid set: count must be positive");
  if (classes.size() < 2)
    throw ConfigError("hybrid set: needs at least two degradation classes");
  std::vector<WeatherSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t sample_seed = mix_seed(seed, detail::kHybridSalt, i);
    Rng sr(mix_seed(sample_seed, detail::kSeveritySalt));
    const float severity =
        severity_lo + (severity_hi - severity_lo) * static_cast<float>(sr.uniform());
    out.push_back(regen_sample(sample_seed, classes, severity, Split::test, h, w));
  }
  return out;
}

}  // namespace mwf
