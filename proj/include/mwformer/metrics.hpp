#pragma once

// Image quality metrics, computed at value level (no autodiff involvement).
// Accumulation is always in double regardless of the tensor element type.

#include "mwformer/tensor.hpp"

namespace mwf {

/// Peak signal-to-noise ratio for [0,1]-range images: 10*log10(1/MSE).
/// Identical images would be +inf, so MSE below 1e-10 reports the cap 100 dB.
template <typename T>
double psnr(const Tensor<T>& y, const Tensor<T>& t) {
  if (y.shape() != t.shape())
    throw DimensionError("psnr: shape mismatch " + shape_str(y.shape()) + " vs " +
                         shape_str(t.shape()));
  if (y.numel() == 0) throw DimensionError("psnr: empty tensors");
  double mse = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const double e = static_cast<double>(y.values()[i]) - static_cast<double>(t.values()[i]);
    mse += e * e;
  }
  mse /= static_cast<double>(y.numel());
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

/// 11x11 Gaussian window, sigma 1.5, normalized to sum 1.
inline const std::array<double, 121>& ssim_window() {
  static const std::array<double, 121> w = [] {
    std::array<double, 121> out{};
    double sum = 0.0;
    for (int y = 0; y < 11; ++y)
      for (int x = 0; x < 11; ++x) {
        const double dy = y - 5, dx = x - 5;
        const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
        out[y * 11 + x] = g;
        sum += g;
      }
    for (double& v : out) v /= sum;
    return out;
  }();
  return w;
}

}  // namespace detail

/// Structural similarity: mean local SSIM over all fully-contained 11x11
/// Gaussian windows (sigma 1.5, K1=0.01, K2=0.03, L=1), per channel, then
/// averaged across channels.
template <typename T>
double ssim(const Tensor<T>& y, const Tensor<T>& t) {
  if (y.shape() != t.shape())
    throw DimensionError("ssim: shape mismatch " + shape_str(y.shape()) + " vs " +
                         shape_str(t.shape()));
  if (y.rank() != 3)
    throw DimensionError("ssim: expects [C,H,W] images, got " + shape_str(y.shape()));
  const std::size_t c = y.size(0), h = y.size(1), w = y.size(2);
  if (h < 11 || w < 11)
    throw DimensionError("ssim: image " + shape_str(y.shape()) +
                         " smaller than the 11x11 window");

  constexpr double kC1 = 0.01 * 0.01;  // (K1*L)^2
  constexpr double kC2 = 0.03 * 0.03;  // (K2*L)^2
  const auto& win = detail::ssim_window();

  double total = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* a = y.data() + ch * h * w;
    const T* b = t.data() + ch * h * w;
    double acc = 0.0;
    std::size_t windows = 0;
    for (std::size_t oy = 0; oy + 11 <= h; ++oy)
      for (std::size_t ox = 0; ox + 11 <= w; ++ox) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int wy = 0; wy < 11; ++wy)
          for (int wx = 0; wx < 11; ++wx) {
            const double g = win[wy * 11 + wx];
            const double va = a[(oy + wy) * w + ox + wx];
            const double vb = b[(oy + wy) * w + ox + wx];
            mx += g * va;
            my += g * vb;
            mxx += g * va * va;
            myy += g * vb * vb;
            mxy += g * va * vb;
          }
        const double vx = mxx - mx * mx;
        const double vy = myy - my * my;
        const double cov = mxy - mx * my;
        acc += ((2 * mx * my + kC1) * (2 * cov + kC2)) /
               ((mx * mx + my * my + kC1) * (vx + vy + kC2));
        ++windows;
      }
    total += acc / static_cast<double>(windows);
  }
  return total / static_cast<double>(c);
}

}  // namespace mwf
