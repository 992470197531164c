#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fiwhn/tensor.hpp"

namespace fiwhn {

/// Cubic convolution kernel with a = -0.5.
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

namespace detail {

struct AxisTaps {
  std::size_t first = 0;
  std::vector<double> weights;
};

// One output sample per entry. On downscale the kernel is stretched by the
// scale factor (antialiasing); taps falling outside the input are dropped
// and the rest renormalized.
inline std::vector<AxisTaps> resample_taps(std::size_t in, std::size_t out) {
  const double scale = double(in) / double(out);
  const double stretch = std::max(scale, 1.0);
  const double support = 2.0 * stretch;
  std::vector<AxisTaps> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double center = (double(i) + 0.5) * scale;
    const auto lo = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(center - support + 0.5)));
    const auto hi = static_cast<std::ptrdiff_t>(std::min(double(in), std::floor(center + support + 0.5)));
    auto& t = taps[i];
    t.first = static_cast<std::size_t>(lo);
    double total = 0.0;
    for (std::ptrdiff_t j = lo; j < hi; ++j) {
      const double w = cubic_kernel((double(j) - center + 0.5) / stretch);
      t.weights.push_back(w);
      total += w;
    }
    if (total != 0.0)
      for (auto& w : t.weights) w /= total;
  }
  return taps;
}

}  // namespace detail

/// Separable bicubic resize of a [N, C, H, W] map to (out_h, out_w).
template <typename T>
Tensor<T> bicubic_resize(const Tensor<T>& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 4) throw ShapeError("bicubic_resize: expected [N,C,H,W], got " + shape_str(img.shape()));
  if (out_h == 0 || out_w == 0) throw ShapeError("bicubic_resize: output size must be positive");
  const std::size_t planes = img.dim(0) * img.dim(1), h = img.dim(2), w = img.dim(3);
  if (out_h == h && out_w == w) return img;

  const auto rows = detail::resample_taps(h, out_h);
  const auto cols = detail::resample_taps(w, out_w);
  Tensor<T> out(Shape{img.dim(0), img.dim(1), out_h, out_w});
  std::vector<double> tmp(h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = img.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& t = cols[x];
        double acc = 0.0;
        for (std::size_t k = 0; k < t.weights.size(); ++k) acc += t.weights[k] * double(src[y * w + t.first + k]);
        tmp[y * out_w + x] = acc;
      }
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& t = rows[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < t.weights.size(); ++k) acc += t.weights[k] * tmp[(t.first + k) * out_w + x];
        dst[y * out_w + x] = static_cast<T>(acc);
      }
    }
  }
  return out;
}

}  // namespace fiwhn
