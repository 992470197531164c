#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fiwhn/tensor.hpp"

namespace fiwhn {

/// Full-range BT.601 luma weights.
inline constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

/// Luma plane of one image in a [N,3,H,W] batch, in [0,1] units.
struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double operator()(std::size_t y, std::size_t x) const { return v[y * w + x]; }
};

template <typename T>
Plane rgb_to_y(const Tensor<T>& img, std::size_t n = 0) {
  if (img.rank() != 4 || img.dim(1) != 3) throw ShapeError("rgb_to_y: expected [N,3,H,W], got " + shape_str(img.shape()));
  Plane p{img.dim(2), img.dim(3), {}};
  p.v.resize(p.h * p.w);
  for (std::size_t y = 0; y < p.h; ++y)
    for (std::size_t x = 0; x < p.w; ++x)
      p.v[y * p.w + x] = kLumaR * double(img.at(n, 0, y, x)) + kLumaG * double(img.at(n, 1, y, x)) +
                         kLumaB * double(img.at(n, 2, y, x));
  return p;
}

/// Drops `border` pixels from every side.
inline Plane crop_border(const Plane& p, std::size_t border) {
  if (p.h <= 2 * border || p.w <= 2 * border) throw ShapeError("image too small for a border crop of " + std::to_string(border));
  Plane out{p.h - 2 * border, p.w - 2 * border, {}};
  out.v.reserve(out.h * out.w);
  for (std::size_t y = 0; y < out.h; ++y)
    for (std::size_t x = 0; x < out.w; ++x) out.v.push_back(p(y + border, x + border));
  return out;
}

namespace detail {

template <typename T>
void require_metric_pair(const Tensor<T>& sr, const Tensor<T>& hr, const char* op) {
  if (sr.shape() != hr.shape())
    throw ShapeError(std::string(op) + ": " + shape_str(sr.shape()) + " vs " + shape_str(hr.shape()));
}

}  // namespace detail

/// PSNR on the Y channel after cropping `scale` pixels per border, peak 1.
/// Identical inputs give +infinity.
template <typename T>
double psnr_y(const Tensor<T>& sr, const Tensor<T>& hr, std::size_t scale, std::size_t n = 0) {
  detail::require_metric_pair(sr, hr, "psnr_y");
  const Plane a = crop_border(rgb_to_y(sr, n), scale), b = crop_border(rgb_to_y(hr, n), scale);
  double mse = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) mse += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
  mse /= double(a.v.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

inline std::vector<double> gaussian_window_1d(std::size_t size = kSsimWindow, double sigma = kSsimSigma) {
  std::vector<double> g(size);
  const double c = (double(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) total += g[i] = std::exp(-(double(i) - c) * (double(i) - c) / (2 * sigma * sigma));
  for (double& v : g) v /= total;
  return g;
}

/// Valid-region separable filtering with `g` along both axes.
inline Plane filter_valid(const Plane& p, const std::vector<double>& g) {
  const std::size_t k = g.size();
  Plane rows{p.h, p.w - k + 1, std::vector<double>(p.h * (p.w - k + 1))};
  for (std::size_t y = 0; y < rows.h; ++y)
    for (std::size_t x = 0; x < rows.w; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * p(y, x + i);
      rows.v[y * rows.w + x] = acc;
    }
  Plane out{p.h - k + 1, rows.w, std::vector<double>((p.h - k + 1) * rows.w)};
  for (std::size_t y = 0; y < out.h; ++y)
    for (std::size_t x = 0; x < out.w; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * rows(y + i, x);
      out.v[y * out.w + x] = acc;
    }
  return out;
}

/// Mean SSIM of two luma planes (11x11 Gaussian, sigma 1.5, K1 0.01, K2 0.03, range 1).
inline double ssim_plane(const Plane& a, const Plane& b) {
  if (a.h < kSsimWindow || a.w < kSsimWindow)
    throw ShapeError("ssim: image " + std::to_string(a.h) + "x" + std::to_string(a.w) + " smaller than the 11x11 window");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto g = gaussian_window_1d();
  Plane aa = a, bb = b, ab = a;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    aa.v[i] = a.v[i] * a.v[i];
    bb.v[i] = b.v[i] * b.v[i];
    ab.v[i] = a.v[i] * b.v[i];
  }
  const Plane mu_a = filter_valid(a, g), mu_b = filter_valid(b, g);
  const Plane e_aa = filter_valid(aa, g), e_bb = filter_valid(bb, g), e_ab = filter_valid(ab, g);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
    const double ma = mu_a.v[i], mb = mu_b.v[i];
    const double va = e_aa.v[i] - ma * ma, vb = e_bb.v[i] - mb * mb, cov = e_ab.v[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / double(mu_a.v.size());
}

template <typename T>
double ssim_y(const Tensor<T>& sr, const Tensor<T>& hr, std::size_t scale, std::size_t n = 0) {
  detail::require_metric_pair(sr, hr, "ssim_y");
  return ssim_plane(crop_border(rgb_to_y(sr, n), scale), crop_border(rgb_to_y(hr, n), scale));
}

struct MetricReport {
  std::string dataset;
  std::size_t scale = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::size_t n_images = 0;
};

struct ImageScore {
  std::string id;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

/// Averages per-image scores.
inline MetricReport summarize(const std::string& dataset, std::size_t scale, const std::vector<ImageScore>& scores) {
  MetricReport r{dataset, scale, 0.0, 0.0, scores.size()};
  if (scores.empty()) return r;
  for (const auto& s : scores) {
    r.psnr_db += s.psnr_db;
    r.ssim += s.ssim;
  }
  r.psnr_db /= double(scores.size());
  r.ssim /= double(scores.size());
  return r;
}

}  // namespace fiwhn
