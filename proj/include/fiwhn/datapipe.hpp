#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fiwhn/image_io.hpp"
#include "fiwhn/nn.hpp"
#include "fiwhn/resize.hpp"
#include "fiwhn/tensor.hpp"

// Corpus layout under a root directory:
//
//   root/HR/*.png                   high-resolution images
//   root/LR_bicubic/X<s>/*.png      optional LR counterparts, same file name
//                                   or "<stem>x<s>.png" (DIV2K naming)
//   root/manifest.txt               optional, one HR path per line relative to root/HR
//
// A root without an HR/ folder is treated as HR-only: its own PNGs are the
// HR images. Missing LR images are generated with bicubic_resize.
namespace fiwhn {

template <typename T>
struct ImagePair {
  Tensor<T> lr;  // [1, 3, h, w]
  Tensor<T> hr;  // [1, 3, s*h, s*w]
  std::size_t scale = 2;
  std::string id;
};

/// Crops the top-left region whose sides are multiples of `scale`.
template <typename T>
Tensor<T> crop_to_multiple(const Tensor<T>& img, std::size_t scale) {
  const std::size_t h = img.dim(2) / scale * scale, w = img.dim(3) / scale * scale;
  if (h == 0 || w == 0) throw ShapeError("image smaller than the scale factor");
  if (h == img.dim(2) && w == img.dim(3)) return img;
  Tensor<T> out(Shape{img.dim(0), img.dim(1), h, w});
  for (std::size_t n = 0; n < img.dim(0); ++n)
    for (std::size_t c = 0; c < img.dim(1); ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out.at(n, c, y, x) = img.at(n, c, y, x);
  return out;
}

/// HR cropped to a scale multiple, LR by bicubic downscaling.
template <typename T>
ImagePair<T> degrade(const Tensor<T>& hr, std::size_t scale, std::string id = {}) {
  ImagePair<T> p;
  p.hr = crop_to_multiple(hr, scale);
  p.lr = bicubic_resize(p.hr, p.hr.dim(2) / scale, p.hr.dim(3) / scale);
  for (auto& v : p.lr.values()) v = std::clamp(v, T(0), T(1));
  p.scale = scale;
  p.id = std::move(id);
  return p;
}

struct PatchSpec {
  std::size_t lr_patch = 48;
  bool rotate = true;
  bool flip = true;
  std::uint64_t seed = 0;
};

/// Where a patch came from and how it was transformed.
struct PatchDraw {
  std::size_t lr_y = 0, lr_x = 0;
  int quarter_turns = 0;  // counter-clockwise
  bool flipped = false;    // horizontal flip, applied after rotation
};

/// Rotates a [N,C,H,W] map by `k` counter-clockwise quarter turns.
template <typename T>
Tensor<T> rotate90(const Tensor<T>& img, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return img;
  const std::size_t n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  const bool swap = (k % 2) == 1;
  Tensor<T> out(Shape{n, c, swap ? w : h, swap ? h : w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const T v = img.at(b, ch, y, x);
          if (k == 1) out.at(b, ch, w - 1 - x, y) = v;
          else if (k == 2) out.at(b, ch, h - 1 - y, w - 1 - x) = v;
          else out.at(b, ch, x, h - 1 - y) = v;
        }
  return out;
}

template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& img) {
  Tensor<T> out(img.shape());
  const std::size_t w = img.dim(3);
  for (std::size_t b = 0; b < img.dim(0); ++b)
    for (std::size_t c = 0; c < img.dim(1); ++c)
      for (std::size_t y = 0; y < img.dim(2); ++y)
        for (std::size_t x = 0; x < w; ++x) out.at(b, c, y, x) = img.at(b, c, y, w - 1 - x);
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > img.dim(2) || x0 + w > img.dim(3)) throw ShapeError("crop window outside the image");
  Tensor<T> out(Shape{img.dim(0), img.dim(1), h, w});
  for (std::size_t b = 0; b < img.dim(0); ++b)
    for (std::size_t c = 0; c < img.dim(1); ++c)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(&img.at(b, c, y0 + y, x0), w, &out.at(b, c, y, 0));
  return out;
}

/// Aligned LR/HR crop with a shared random rotation and flip. The draw is
/// a pure function of (spec.seed, draw_index).
template <typename T>
ImagePair<T> sample_patch(const ImagePair<T>& pair, const PatchSpec& spec, std::uint64_t draw_index,
                          PatchDraw* record = nullptr) {
  const std::size_t p = spec.lr_patch, s = pair.scale;
  const std::size_t h = pair.lr.dim(2), w = pair.lr.dim(3);
  if (h < p || w < p)
    throw ShapeError("sample_patch: LR image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than patch " +
                     std::to_string(p));
  Rng rng(derive_seed(spec.seed, draw_index));
  PatchDraw d;
  d.lr_y = rng.below(h - p + 1);
  d.lr_x = rng.below(w - p + 1);
  d.quarter_turns = spec.rotate ? int(rng.below(4)) : 0;
  d.flipped = spec.flip ? rng.below(2) == 1 : false;

  ImagePair<T> out;
  out.scale = s;
  out.id = pair.id;
  out.lr = crop(pair.lr, d.lr_y, d.lr_x, p, p);
  out.hr = crop(pair.hr, d.lr_y * s, d.lr_x * s, p * s, p * s);
  out.lr = rotate90(out.lr, d.quarter_turns);
  out.hr = rotate90(out.hr, d.quarter_turns);
  if (d.flipped) {
    out.lr = flip_horizontal(out.lr);
    out.hr = flip_horizontal(out.hr);
  }
  if (record) *record = d;
  return out;
}

/// Stacks equally sized [1,C,H,W] maps along the batch axis.
template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& items) {
  if (items.empty()) throw ShapeError("stack: no items");
  const Shape s = items.front()->shape();
  Tensor<T> out(Shape{items.size(), s[1], s[2], s[3]});
  const std::size_t per = numel(s);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != s) throw ShapeError("stack: shape mismatch");
    std::copy_n(items[i]->data(), per, out.data() + i * per);
  }
  return out;
}

struct LoadIssue {
  std::string path;
  std::string message;
};

template <typename T>
struct Corpus {
  std::vector<ImagePair<T>> pairs;
  std::vector<LoadIssue> issues;
};

namespace detail {

inline std::vector<std::filesystem::path> list_png(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Directory holding the HR images of a corpus root.
inline std::filesystem::path hr_dir(const std::filesystem::path& root) {
  return std::filesystem::is_directory(root / "HR") ? root / "HR" : root;
}

inline std::filesystem::path lr_dir(const std::filesystem::path& root, std::size_t scale) {
  return root / "LR_bicubic" / ("X" + std::to_string(scale));
}

/// HR image paths in deterministic order (manifest order if present,
/// otherwise sorted by file name).
inline std::vector<std::filesystem::path> corpus_hr_paths(const std::filesystem::path& root) {
  const auto manifest = root / "manifest.txt";
  if (std::filesystem::is_regular_file(manifest)) {
    std::vector<std::filesystem::path> out;
    std::ifstream in(manifest);
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty() && line.front() != '#') out.push_back(hr_dir(root) / line);
    }
    return out;
  }
  return detail::list_png(hr_dir(root));
}

/// Loads every pair it can. Unreadable or inconsistent files are reported
/// in `issues` and skipped.
template <typename T = float>
Corpus<T> load_corpus(const std::filesystem::path& root, std::size_t scale) {
  if (!std::filesystem::is_directory(root)) throw ImageError("corpus root " + root.string() + " is not a directory");
  Corpus<T> corpus;
  const auto lr_root = lr_dir(root, scale);
  for (const auto& hr_path : corpus_hr_paths(root)) {
    try {
      const Tensor<T> hr = read_png<T>(hr_path);
      ImagePair<T> pair;
      const auto stem = hr_path.stem().string();
      std::filesystem::path lr_path = lr_root / hr_path.filename();
      if (!std::filesystem::exists(lr_path)) lr_path = lr_root / (stem + "x" + std::to_string(scale) + ".png");
      if (std::filesystem::exists(lr_path)) {
        pair.hr = crop_to_multiple(hr, scale);
        pair.lr = read_png<T>(lr_path);
        pair.scale = scale;
        pair.id = stem;
        if (pair.lr.dim(2) * scale != pair.hr.dim(2) || pair.lr.dim(3) * scale != pair.hr.dim(3))
          throw ImageError("LR image " + lr_path.string() + " does not match HR size / scale");
      } else {
        pair = degrade(hr, scale, stem);
      }
      corpus.pairs.push_back(std::move(pair));
    } catch (const std::exception& e) {
      corpus.issues.push_back({hr_path.string(), e.what()});
    }
  }
  return corpus;
}

/// Band-limited synthetic RGB image: a sum of random oriented sinusoids
/// with spatial frequency at most `max_cycles` cycles per pixel, mapped into
/// [0, 1].
template <typename T = float>
Tensor<T> synthetic_image(std::size_t h, std::size_t w, std::uint64_t seed, double max_cycles = 0.2,
                          std::size_t waves = 12) {
  Rng rng(seed);
  struct Wave {
    double fy, fx, phase, amp[3];
  };
  std::vector<Wave> ws(waves);
  for (auto& wv : ws) {
    const double f = rng.uniform(0.02, max_cycles), theta = rng.uniform(0.0, 3.14159265358979323846);
    wv.fy = f * std::sin(theta);
    wv.fx = f * std::cos(theta);
    wv.phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double base = rng.uniform(0.5, 1.0);
    for (double& a : wv.amp) a = base * rng.uniform(0.6, 1.0);
  }
  std::vector<double> raw(3 * h * w, 0.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (const auto& wv : ws)
          acc += wv.amp[c] * std::sin(2.0 * 3.14159265358979323846 * (wv.fy * double(y) + wv.fx * double(x)) + wv.phase);
        raw[(c * h + y) * w + x] = acc;
      }
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  const double span = std::max(*hi - *lo, 1e-12);
  Tensor<T> img(Shape{1, 3, h, w});
  for (std::size_t i = 0; i < raw.size(); ++i) img[i] = static_cast<T>(0.05 + 0.9 * (raw[i] - *lo) / span);
  return img;
}

template <typename T = float>
std::vector<ImagePair<T>> synthetic_corpus(std::size_t count, std::size_t hr_size, std::size_t scale,
                                           std::uint64_t seed, double max_cycles = 0.2) {
  std::vector<ImagePair<T>> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(degrade(synthetic_image<T>(hr_size, hr_size, derive_seed(seed, i), max_cycles), scale,
                          "synthetic_" + std::to_string(i)));
  return out;
}

}  // namespace fiwhn
