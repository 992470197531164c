#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "fiwhn/tensor.hpp"

namespace fiwhn {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes any PNG to an RGB [1, 3, H, W] map in [0, 1].
template <typename T = float>
Tensor<T> read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw ImageError("cannot decode " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ImageError("cannot decode " + path.string() + ": " + image.message);
  }
  const std::size_t h = image.height, w = image.width;
  Tensor<T> out(Shape{1, 3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(0, c, y, x) = T(buf[(y * w + x) * 3 + c]) / T(255);
  return out;
}

/// Quantizes to 8 bits (clamped to [0, 1], rounded to nearest).
template <typename T>
std::vector<png_byte> quantize_rgb8(const Tensor<T>& img) {
  const std::size_t h = img.dim(2), w = img.dim(3);
  std::vector<png_byte> buf(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(double(img.at(0, c, y, x)), 0.0, 1.0);
        buf[(y * w + x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0));
      }
  return buf;
}

template <typename T>
void write_png(const Tensor<T>& img, const std::filesystem::path& path) {
  if (img.rank() != 4 || img.dim(0) != 1 || img.dim(1) != 3)
    throw ShapeError("write_png: expected [1,3,H,W], got " + shape_str(img.shape()));
  auto buf = quantize_rgb8(img);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.dim(3));
  image.height = static_cast<png_uint_32>(img.dim(2));
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw ImageError("cannot write " + path.string() + ": " + image.message);
}

/// Values rounded to the 8-bit grid, as they would be after a PNG round trip.
template <typename T>
Tensor<T> quantize(const Tensor<T>& img) {
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    out[i] = T(std::lround(std::clamp(double(img[i]), 0.0, 1.0) * 255.0)) / T(255);
  return out;
}

}  // namespace fiwhn
