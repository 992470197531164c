#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fiwhn/datapipe.hpp"
#include "fiwhn/image_io.hpp"
#include "fiwhn/metrics.hpp"
#include "fiwhn/network.hpp"

namespace fiwhn {

/// Super-resolves one LR image [1,3,h,w] without recording a graph.
template <typename T>
Tensor<T> super_resolve(const Model<T>& model, const Tensor<T>& lr) {
  NoGradGuard guard;
  return model(Var<T>(lr)).value();
}

/// Clamped to [0,1] and rounded to 8 bits, as written to disk.
template <typename T>
Tensor<T> to_display(const Tensor<T>& img) {
  return quantize(img);
}

template <typename T>
std::vector<ImageScore> score_model(const Model<T>& model, const std::vector<ImagePair<T>>& corpus) {
  std::vector<ImageScore> out;
  for (const auto& p : corpus) {
    const Tensor<T> sr = to_display(super_resolve(model, p.lr));
    out.push_back({p.id, psnr_y(sr, p.hr, p.scale), ssim_y(sr, p.hr, p.scale)});
  }
  return out;
}

/// Scores of plain bicubic upsampling under the same pipeline.
template <typename T>
std::vector<ImageScore> score_bicubic(const std::vector<ImagePair<T>>& corpus) {
  std::vector<ImageScore> out;
  for (const auto& p : corpus) {
    const Tensor<T> sr = to_display(bicubic_resize(p.lr, p.hr.dim(2), p.hr.dim(3)));
    out.push_back({p.id, psnr_y(sr, p.hr, p.scale), ssim_y(sr, p.hr, p.scale)});
  }
  return out;
}

inline void write_scores_csv(const std::vector<ImageScore>& scores, const std::filesystem::path& path) {
  std::ofstream os(path);
  os << "image,psnr_db,ssim\n" << std::setprecision(10);
  for (const auto& s : scores) os << s.id << ',' << s.psnr_db << ',' << s.ssim << '\n';
}

struct ComplexityReport {
  std::uint64_t params = 0;
  std::uint64_t multi_adds = 0;
  double ms_per_image = 0.0;            // median; 0 when latency was not measured
  std::size_t out_h = 720, out_w = 1280;  // resolution the multi-adds refer to
  std::size_t latency_h = 0, latency_w = 0;  // LR extent of the timed passes
  std::vector<LayerCost> layers;
};

struct ProfileOptions {
  std::size_t out_h = 720, out_w = 1280;
  Extent latency_lr{0, 0};  // 0x0 skips timing
  std::size_t runs = 20;
};

template <typename T>
double median_latency_ms(const Model<T>& model, Extent lr, std::size_t runs, std::uint64_t seed = 0) {
  Rng rng(seed);
  const Tensor<T> img = uniform_tensor<T>(Shape{1, 3, lr.h, lr.w}, 1.0, rng);
  std::vector<double> times;
  for (std::size_t i = 0; i < std::max<std::size_t>(runs, 1); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)super_resolve(model, img);
    times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  return n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

/// Closed-form counts from the architecture; optional timed passes.
template <typename T>
ComplexityReport profile(const Model<T>& model, const ProfileOptions& opts = {}) {
  ComplexityReport r;
  r.out_h = opts.out_h;
  r.out_w = opts.out_w;
  r.layers = model.costs(lr_extent(opts.out_h, opts.out_w, model.config().scale));
  r.params = total_params(r.layers);
  r.multi_adds = total_multi_adds(r.layers);
  if (opts.latency_lr.h && opts.latency_lr.w) {
    r.latency_h = opts.latency_lr.h;
    r.latency_w = opts.latency_lr.w;
    r.ms_per_image = median_latency_ms(model, opts.latency_lr, opts.runs);
  }
  return r;
}

inline void write_layer_csv(const ComplexityReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  os << "layer,params,multi_adds\n";
  for (const auto& l : r.layers) os << l.path << ',' << l.params << ',' << l.multi_adds << '\n';
}

/// "725.0K" / "35.60G" style figures.
inline std::string human_count(double v) {
  const char* suffix[] = {"", "K", "M", "G", "T"};
  int i = 0;
  while (v >= 1000.0 && i < 4) {
    v /= 1000.0;
    ++i;
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(i >= 3 ? 2 : 1) << v << suffix[i];
  return os.str();
}

}  // namespace fiwhn
