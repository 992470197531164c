#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fiwhn/datapipe.hpp"

using namespace fiwhn;
namespace fs = std::filesystem;

namespace {

std::vector<double> as_vector(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

Tensor<double> random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(Shape{1, 3, h, w});
  for (auto& v : t.values()) v = rng.uniform();
  return t;
}

// Keys cubic convolution written out directly (a = -0.5).
double keys(double x) {
  x = std::abs(x);
  if (x < 1) return 1.5 * x * x * x - 2.5 * x * x + 1;
  if (x < 2) return -0.5 * x * x * x + 2.5 * x * x - 4 * x + 2;
  return 0;
}

// Direct 2-D resampling: every output pixel sums over the whole input with
// a product kernel stretched on downscale, normalized over in-bounds taps.
Tensor<double> direct_bicubic(const Tensor<double>& img, std::size_t oh, std::size_t ow) {
  const std::size_t h = img.dim(2), w = img.dim(3);
  const double sy = double(h) / oh, sx = double(w) / ow;
  const double ky = std::max(sy, 1.0), kx = std::max(sx, 1.0);
  Tensor<double> out(Shape{1, img.dim(1), oh, ow});
  for (std::size_t c = 0; c < img.dim(1); ++c)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double cy = (i + 0.5) * sy - 0.5, cx = (j + 0.5) * sx - 0.5;
        double acc = 0, norm = 0;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double k = keys((y - cy) / ky) * keys((x - cx) / kx);
            acc += k * img.at(0, c, y, x);
            norm += k;
          }
        out.at(0, c, i, j) = acc / norm;
      }
  return out;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("fiwhn_test_datapipe_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// HR made of constant s x s blocks, one per LR pixel.
ImagePair<double> block_pair(std::size_t h, std::size_t w, std::size_t s, std::uint64_t seed) {
  ImagePair<double> p;
  p.scale = s;
  p.lr = random_image(h, w, seed);
  p.hr = Tensor<double>(Shape{1, 3, h * s, w * s});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h * s; ++y)
      for (std::size_t x = 0; x < w * s; ++x) p.hr.at(0, c, y, x) = p.lr.at(0, c, y / s, x / s);
  return p;
}

}  // namespace

// ---- bicubic ------------------------------------------------------------

TEST(Bicubic, KernelValues) {
  EXPECT_EQ(cubic_kernel(0.0), 1.0);
  EXPECT_EQ(cubic_kernel(1.0), 0.0);
  EXPECT_EQ(cubic_kernel(2.0), 0.0);
  EXPECT_DOUBLE_EQ(cubic_kernel(0.5), 0.5625);
  EXPECT_DOUBLE_EQ(cubic_kernel(1.5), -0.0625);
  for (double x : {0.1, 0.7, 1.3, 1.9}) EXPECT_NEAR(cubic_kernel(x), keys(x), 1e-14);
}

TEST(Bicubic, SameSizeIsIdentity) {
  const auto img = random_image(5, 7, 1);
  EXPECT_EQ(max_abs_diff(bicubic_resize(img, 5, 7), img), 0.0);
}

TEST(Bicubic, ConstantImageIsPreserved) {
  const Tensor<double> img(Shape{1, 3, 9, 6}, 0.375);
  for (auto [oh, ow] : {std::pair{3, 2}, {18, 12}, {27, 5}, {4, 4}}) {
    const auto out = bicubic_resize(img, oh, ow);
    for (double v : out.values()) EXPECT_NEAR(v, 0.375, 1e-14);
  }
}

TEST(Bicubic, RampDownscaleMatchesDirectOracle) {
  Tensor<double> ramp(Shape{1, 1, 4, 4});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) ramp.at(0, 0, y, x) = (4.0 * y + x) / 15.0;
  const auto got = bicubic_resize(ramp, 2, 2);
  EXPECT_LT(max_abs_diff(got, direct_bicubic(ramp, 2, 2)), 1e-14);
  // A symmetric kernel keeps the ramp's mirror symmetry.
  EXPECT_NEAR(got.at(0, 0, 0, 0) + got.at(0, 0, 1, 1), 1.0, 1e-14);
  EXPECT_NEAR(got.at(0, 0, 0, 1) + got.at(0, 0, 1, 0), 1.0, 1e-14);
}

TEST(Bicubic, MatchesDirectOracleOnRandomImages) {
  const auto img = random_image(12, 10, 2);
  for (auto [oh, ow] : {std::pair{6, 5}, {4, 5}, {3, 3}, {24, 20}, {36, 30}, {7, 13}})
    EXPECT_LT(max_abs_diff(bicubic_resize(img, oh, ow), direct_bicubic(img, oh, ow)), 1e-12) << oh << "x" << ow;
}

TEST(Bicubic, UpscaleReproducesLinearInterior) {
  Tensor<double> ramp(Shape{1, 1, 8, 8});
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) ramp.at(0, 0, y, x) = 0.1 * y + 0.05 * x;
  const auto up = bicubic_resize(ramp, 16, 16);
  for (std::size_t i = 4; i < 12; ++i)
    for (std::size_t j = 4; j < 12; ++j) {
      const double y = (i + 0.5) / 2 - 0.5, x = (j + 0.5) / 2 - 0.5;
      EXPECT_NEAR(up.at(0, 0, i, j), 0.1 * y + 0.05 * x, 1e-13);
    }
}

TEST(Bicubic, ZeroSizeIsRejected) {
  const auto img = random_image(4, 4, 3);
  EXPECT_THROW(bicubic_resize(img, 0, 4), ShapeError);
  EXPECT_THROW(bicubic_resize(Tensor<double>(Shape{3, 4, 4}), 2, 2), ShapeError);
}

// ---- degradation and patches --------------------------------------------

TEST(Degrade, CropsToScaleMultipleAndDownscales) {
  const auto hr = random_image(13, 11, 4);
  const auto p = degrade(hr, 3, "a");
  EXPECT_EQ(p.hr.shape(), (Shape{1, 3, 12, 9}));
  EXPECT_EQ(p.lr.shape(), (Shape{1, 3, 4, 3}));
  for (double v : p.lr.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(degrade(random_image(2, 8, 5), 3), ShapeError);
}

TEST(Geometry, RotationHandCase) {
  Tensor<double> img(Shape{1, 1, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  // One counter-clockwise turn: the right column becomes the top row.
  EXPECT_EQ(as_vector(rotate90(img, 1)), (std::vector<double>{3, 6, 2, 5, 1, 4}));
  EXPECT_EQ(as_vector(rotate90(img, 2)), (std::vector<double>{6, 5, 4, 3, 2, 1}));
  EXPECT_EQ(as_vector(flip_horizontal(img)), (std::vector<double>{3, 2, 1, 6, 5, 4}));
}

TEST(Geometry, RotationsCompose) {
  const auto img = random_image(5, 3, 6);
  EXPECT_EQ(max_abs_diff(rotate90(rotate90(img, 2), 2), img), 0.0);
  EXPECT_EQ(max_abs_diff(rotate90(rotate90(img, 1), 3), img), 0.0);
  EXPECT_EQ(max_abs_diff(rotate90(img, -1), rotate90(img, 3)), 0.0);
  EXPECT_EQ(max_abs_diff(flip_horizontal(flip_horizontal(img)), img), 0.0);
}

TEST(SamplePatch, ConstantImageGivesConstantPatches) {
  ImagePair<double> p;
  p.scale = 2;
  p.lr = Tensor<double>(Shape{1, 3, 10, 12}, 0.25);
  p.hr = Tensor<double>(Shape{1, 3, 20, 24}, 0.25);
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto q = sample_patch(p, PatchSpec{4, true, true, 7}, i);
    EXPECT_EQ(q.lr.shape(), (Shape{1, 3, 4, 4}));
    EXPECT_EQ(q.hr.shape(), (Shape{1, 3, 8, 8}));
    for (double v : q.lr.values()) EXPECT_EQ(v, 0.25);
    for (double v : q.hr.values()) EXPECT_EQ(v, 0.25);
  }
}

TEST(SamplePatch, LrAndHrStayAlignedUnderAugmentation) {
  for (std::size_t s : {2, 3, 4}) {
    const auto pair = block_pair(11, 9, s, 8 + s);
    int turns[4] = {0, 0, 0, 0}, flips = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
      PatchDraw d;
      const auto q = sample_patch(pair, PatchSpec{5, true, true, 9}, i, &d);
      ++turns[d.quarter_turns];
      flips += d.flipped;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 5 * s; ++y)
          for (std::size_t x = 0; x < 5 * s; ++x)
            ASSERT_EQ(q.hr.at(0, c, y, x), q.lr.at(0, c, y / s, x / s)) << "draw " << i;
    }
    for (int t : turns) EXPECT_GT(t, 0);
    EXPECT_GT(flips, 0);
    EXPECT_LT(flips, 100);
  }
}

TEST(SamplePatch, RecordedDrawReproducesPatch) {
  const auto pair = block_pair(12, 12, 2, 10);
  PatchDraw d;
  const auto q = sample_patch(pair, PatchSpec{6, true, true, 3}, 17, &d);
  auto lr = rotate90(crop(pair.lr, d.lr_y, d.lr_x, 6, 6), d.quarter_turns);
  if (d.flipped) lr = flip_horizontal(lr);
  EXPECT_EQ(max_abs_diff(lr, q.lr), 0.0);
}

TEST(SamplePatch, DeterministicInSeedAndIndex) {
  const auto pair = block_pair(12, 12, 2, 11);
  const PatchSpec spec{4, true, true, 5};
  EXPECT_EQ(max_abs_diff(sample_patch(pair, spec, 3).hr, sample_patch(pair, spec, 3).hr), 0.0);
  bool differs = false;
  for (std::uint64_t i = 0; i < 5 && !differs; ++i)
    differs = max_abs_diff(sample_patch(pair, spec, i).lr, sample_patch(pair, PatchSpec{4, true, true, 6}, i).lr) > 0;
  EXPECT_TRUE(differs);
}

TEST(SamplePatch, TooSmallImageIsRejected) {
  const auto pair = block_pair(4, 8, 2, 12);
  EXPECT_THROW(sample_patch(pair, PatchSpec{5, true, true, 0}, 0), ShapeError);
}

TEST(Stack, BatchesAndChecksShapes) {
  const auto a = random_image(3, 3, 13), b = random_image(3, 3, 14), c = random_image(3, 4, 15);
  const auto s = stack<double>({&a, &b});
  EXPECT_EQ(s.shape(), (Shape{2, 3, 3, 3}));
  EXPECT_EQ(s[a.size()], b[0]);
  EXPECT_THROW(stack<double>({&a, &c}), ShapeError);
  EXPECT_THROW(stack<double>({}), ShapeError);
}

// ---- corpus loading -----------------------------------------------------

TEST(Corpus, EmptyFolderGivesNoPairs) {
  const auto dir = temp_dir("empty");
  const auto c = load_corpus<double>(dir, 2);
  EXPECT_TRUE(c.pairs.empty());
  EXPECT_TRUE(c.issues.empty());
  EXPECT_THROW(load_corpus<double>(dir / "missing", 2), ImageError);
}

TEST(Corpus, HrOnlyFolderGeneratesLr) {
  const auto dir = temp_dir("hr_only");
  for (int i = 0; i < 3; ++i) write_png(random_image(16 + i, 12, 20 + i), dir / ("img" + std::to_string(i) + ".png"));
  const auto c = load_corpus<double>(dir, 2);
  ASSERT_EQ(c.pairs.size(), 3u);
  EXPECT_TRUE(c.issues.empty());
  EXPECT_EQ(c.pairs[0].id, "img0");
  EXPECT_EQ(c.pairs[1].hr.shape(), (Shape{1, 3, 16, 12}));
  EXPECT_EQ(c.pairs[1].lr.shape(), (Shape{1, 3, 8, 6}));
  EXPECT_EQ(c.pairs[2].lr.shape(), (Shape{1, 3, 9, 6}));
}

TEST(Corpus, PrefersProvidedLrAndHonorsManifest) {
  const auto dir = temp_dir("with_lr");
  fs::create_directories(dir / "HR");
  fs::create_directories(lr_dir(dir, 2));
  write_png(random_image(8, 8, 30), dir / "HR" / "b.png");
  write_png(random_image(8, 8, 31), dir / "HR" / "a.png");
  const Tensor<double> lr(Shape{1, 3, 4, 4}, 0.0);
  write_png(lr, lr_dir(dir, 2) / "bx2.png");
  std::ofstream(dir / "manifest.txt") << "b.png\na.png\n";
  const auto c = load_corpus<double>(dir, 2);
  ASSERT_EQ(c.pairs.size(), 2u);
  EXPECT_EQ(c.pairs[0].id, "b");
  for (double v : c.pairs[0].lr.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(c.pairs[1].id, "a");
}

TEST(Corpus, MismatchedLrIsReported) {
  const auto dir = temp_dir("mismatch");
  fs::create_directories(dir / "HR");
  fs::create_directories(lr_dir(dir, 2));
  write_png(random_image(8, 8, 32), dir / "HR" / "a.png");
  write_png(random_image(3, 4, 33), lr_dir(dir, 2) / "a.png");
  const auto c = load_corpus<double>(dir, 2);
  EXPECT_TRUE(c.pairs.empty());
  ASSERT_EQ(c.issues.size(), 1u);
  EXPECT_NE(c.issues[0].message.find("does not match"), std::string::npos);
}

TEST(Corpus, PngRoundTripWithinHalfStep) {
  const auto dir = temp_dir("roundtrip");
  const auto img = random_image(7, 5, 34);
  write_png(img, dir / "x.png");
  const auto back = read_png<double>(dir / "x.png");
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_LE(max_abs_diff(back, img), 1.0 / 510.0 + 1e-12);
  EXPECT_EQ(max_abs_diff(back, quantize(img)), 0.0);
}

TEST(Corpus, CorruptFileIsItemized) {
  const auto dir = temp_dir("corrupt");
  write_png(random_image(8, 8, 35), dir / "good.png");
  std::ofstream(dir / "bad.png") << "definitely not a png";
  const auto c = load_corpus<double>(dir, 2);
  ASSERT_EQ(c.pairs.size(), 1u);
  ASSERT_EQ(c.issues.size(), 1u);
  EXPECT_NE(c.issues[0].path.find("bad.png"), std::string::npos);
  EXPECT_FALSE(c.issues[0].message.empty());
}

// ---- synthetic data -----------------------------------------------------

TEST(Synthetic, DeterministicAndInRange) {
  const auto a = synthetic_image<double>(20, 30, 5), b = synthetic_image<double>(20, 30, 5),
             c = synthetic_image<double>(20, 30, 6);
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
  EXPECT_GT(max_abs_diff(a, c), 0.0);
  for (double v : a.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const auto corpus = synthetic_corpus<double>(3, 24, 3, 1);
  ASSERT_EQ(corpus.size(), 3u);
  EXPECT_EQ(corpus[2].lr.shape(), (Shape{1, 3, 8, 8}));
  EXPECT_EQ(corpus[2].scale, 3u);
}
