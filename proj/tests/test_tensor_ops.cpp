#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fiwhn/ops.hpp"
#include "fiwhn/nn.hpp"
#include "gradcheck.hpp"

using namespace fiwhn;
using fiwhn::testing::check_gradients;
using fiwhn::testing::probe_weights;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double bound = 1.0) {
  Rng rng(seed);
  return uniform_tensor<double>(std::move(s), bound, rng);
}

// Direct zero-padded grouped convolution.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, std::size_t pad,
                          std::size_t groups) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2), cin_g = cin / groups, cout_g = cout / groups;
  Tensor<double> out(Shape{n, cout, h, wd});
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx) {
          double acc = b.size() ? b[o] : 0.0;
          const std::size_t g = o / cout_g;
          for (std::size_t ci = 0; ci < cin_g; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long sy = long(y + ky) - long(pad), sx = long(xx + kx) - long(pad);
                if (sy < 0 || sx < 0 || sy >= long(h) || sx >= long(wd)) continue;
                acc += w.at(o, ci, ky, kx) * x.at(bi, g * cin_g + ci, std::size_t(sy), std::size_t(sx));
              }
          out.at(bi, o, y, xx) = acc;
        }
  return out;
}

}  // namespace

TEST(Conv2d, MatchesDirectConvolution) {
  for (std::size_t groups : {1, 2}) {
    const auto x = random_tensor(Shape{2, 4, 5, 6}, 1);
    const auto w = random_tensor(Shape{6, 4 / groups, 3, 3}, 2);
    const auto b = random_tensor(Shape{6}, 3);
    const auto y = ops::conv2d(Var<double>(x), Var<double>(w), Var<double>(b), 1, groups);
    EXPECT_LT(max_abs_diff(y.value(), naive_conv(x, w, b, 1, groups)), 1e-12) << "groups=" << groups;
  }
  const auto x = random_tensor(Shape{1, 3, 4, 4}, 4);
  const auto w = random_tensor(Shape{5, 3, 1, 1}, 5);
  const auto y = ops::conv2d(Var<double>(x), Var<double>(w), Var<double>(), 0, 1);
  EXPECT_LT(max_abs_diff(y.value(), naive_conv(x, w, Tensor<double>(), 0, 1)), 1e-12);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  for (std::size_t groups : {1, 2}) {
    Var<double> x(random_tensor(Shape{2, 4, 5, 4}, 10), true);
    Var<double> w(random_tensor(Shape{4, 4 / groups, 3, 3}, 11), true);
    Var<double> b(random_tensor(Shape{4}, 12), true);
    const auto probe = probe_weights(Shape{2, 4, 5, 4}, 13);
    const auto rep = check_gradients([&] { return ops::weighted_sum(ops::conv2d(x, w, b, 1, groups), probe); },
                                     {{"x", x}, {"w", w}, {"b", b}}, 30, 14);
    EXPECT_LT(rep.max_rel_error, 1e-6);
    EXPECT_EQ(rep.kinks, 0u);
  }
}

TEST(WeightNorm, EffectiveKernelHasGainNorm) {
  const auto v = random_tensor(Shape{3, 2, 3, 3}, 20);
  const Tensor<double> g(Shape{3}, std::vector<double>{0.5, 2.0, 1.5});
  const auto w = ops::weight_norm(Var<double>(v), Var<double>(g)).value();
  for (std::size_t o = 0; o < 3; ++o) {
    double ss = 0.0;
    for (std::size_t i = 0; i < 18; ++i) ss += w[o * 18 + i] * w[o * 18 + i];
    EXPECT_NEAR(std::sqrt(ss), g[o], 1e-12);
  }
}

TEST(WeightNorm, ZeroDirectionGivesZeroKernel) {
  const auto w = ops::weight_norm(Var<double>(Tensor<double>(Shape{2, 1, 1, 1})), Var<double>(Tensor<double>(Shape{2}, 3.0)));
  for (double x : w.value().values()) EXPECT_EQ(x, 0.0);
}

TEST(WeightNorm, GradientsMatchFiniteDifferences) {
  Var<double> v(random_tensor(Shape{3, 2, 3, 3}, 21), true);
  Var<double> g(random_tensor(Shape{3}, 22), true);
  const auto probe = probe_weights(Shape{3, 2, 3, 3}, 23);
  const auto rep =
      check_gradients([&] { return ops::weighted_sum(ops::weight_norm(v, g), probe); }, {{"v", v}, {"g", g}}, 20, 24);
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

TEST(PixelShuffle, HandArrangement) {
  // Channel c = i*2 + j supplies sub-pixel (i, j) of every 2x2 output cell.
  Tensor<double> x(Shape{1, 4, 2, 2});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = double(i);
  const auto y = ops::pixel_shuffle(Var<double>(x), 2).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  const double expected[4][4] = {{0, 4, 1, 5}, {8, 12, 9, 13}, {2, 6, 3, 7}, {10, 14, 11, 15}};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(0, 0, r, c), expected[r][c]) << r << "," << c;
}

TEST(PixelShuffle, GradientIsThePermutation) {
  Var<double> x(random_tensor(Shape{1, 9, 2, 3}, 30), true);
  const auto probe = probe_weights(Shape{1, 1, 6, 9}, 31);
  const auto rep = check_gradients([&] { return ops::weighted_sum(ops::pixel_shuffle(x, 3), probe); }, {{"x", x}}, 54, 32);
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(ChannelShuffle, InterleavesTwoGroups) {
  Tensor<double> x(Shape{1, 6, 1, 1});
  for (std::size_t c = 0; c < 6; ++c) x[c] = double(c);
  const auto y = ops::channel_shuffle(Var<double>(x), 2).value();
  const std::vector<double> expected{0, 3, 1, 4, 2, 5};
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), expected);
}

TEST(ChannelShuffle, IsAPermutationOfChannelTensors) {
  const auto x = random_tensor(Shape{1, 8, 3, 3}, 40);
  const auto y = ops::channel_shuffle(Var<double>(x), 4).value();
  auto channels = [](const Tensor<double>& t) {
    std::vector<std::vector<double>> out;
    for (std::size_t c = 0; c < t.dim(1); ++c) out.emplace_back(&t.at(0, c, 0, 0), &t.at(0, c, 0, 0) + 9);
    std::sort(out.begin(), out.end());
    return out;
  };
  EXPECT_EQ(channels(x), channels(y));
}

TEST(Pooling, MeanAndPopulationStd) {
  Tensor<double> x(Shape{1, 2, 2, 2}, std::vector<double>{0, 1, 0, 1, 3, 3, 3, 3});
  const auto m = ops::mean_pool(Var<double>(x)).value();
  const auto s = ops::std_pool(Var<double>(x)).value();
  EXPECT_DOUBLE_EQ(m[0], 0.5);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(m[1], 3.0);
  EXPECT_DOUBLE_EQ(s[1], 0.0);
}

TEST(Pooling, StdGradientAtZeroSpreadIsZero) {
  Var<double> x(Tensor<double>(Shape{1, 1, 1, 1}, 2.0), true);
  backward(ops::sum(ops::std_pool(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_TRUE(std::isfinite(x.grad()[0]));
}

TEST(Pooling, GradientsMatchFiniteDifferences) {
  Var<double> x(random_tensor(Shape{2, 3, 4, 3}, 50), true);
  const auto probe = probe_weights(Shape{2, 3, 1, 1}, 51);
  const auto rep = check_gradients(
      [&] { return ops::add(ops::weighted_sum(ops::std_pool(x), probe), ops::weighted_sum(ops::mean_pool(x), probe)); },
      {{"x", x}}, 72, 52);
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Var<double> a(random_tensor(Shape{1, 3, 2, 2}, 60), true);
  Var<double> b(random_tensor(Shape{1, 3, 2, 2}, 61), true);
  Var<double> gate(random_tensor(Shape{1, 3, 1, 1}, 62), true);
  Var<double> s(Tensor<double>::scalar(0.7), true);
  const auto probe = probe_weights(Shape{1, 3, 2, 2}, 63);
  const auto rep = check_gradients(
      [&] {
        auto h = ops::mul(ops::sigmoid(a), ops::gelu(b));
        h = ops::add(h, ops::mul_channel(a, gate));
        h = ops::mul_scalar(ops::scale(h, 1.5), s);
        return ops::weighted_sum(h, probe);
      },
      {{"a", a}, {"b", b}, {"gate", gate}, {"s", s}}, 12, 64);
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

TEST(Elementwise, GeluUsesTheErfForm) {
  const double xs[] = {-2.0, -0.5, 0.0, 0.3, 1.7};
  Tensor<double> x(Shape{5}, std::vector<double>(std::begin(xs), std::end(xs)));
  const auto y = ops::gelu(Var<double>(x)).value();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(y[i], 0.5 * xs[i] * (1.0 + std::erf(xs[i] / std::sqrt(2.0))), 1e-15);
}

TEST(Channels, SliceThenConcatIsIdentity) {
  const auto x = random_tensor(Shape{2, 5, 3, 2}, 70);
  const Var<double> v(x);
  const auto y = ops::concat_channels<double>({ops::slice_channels(v, 0, 3), ops::slice_channels(v, 3, 2)});
  EXPECT_EQ(max_abs_diff(y.value(), x), 0.0);
}

TEST(Channels, ConcatGradient) {
  Var<double> a(random_tensor(Shape{1, 2, 2, 2}, 71), true);
  Var<double> b(random_tensor(Shape{1, 3, 2, 2}, 72), true);
  const auto probe = probe_weights(Shape{1, 3, 2, 2}, 73);
  const auto rep = check_gradients(
      [&] { return ops::weighted_sum(ops::slice_channels(ops::concat_channels<double>({a, b}), 1, 3), probe); },
      {{"a", a}, {"b", b}}, 12, 74);
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(Tokens, FoldUnfoldRoundTripIsExact) {
  const auto x = random_tensor(Shape{2, 6, 3, 5}, 80);
  const auto t = ops::to_tokens(Var<double>(x));
  ASSERT_EQ(t.shape(), (Shape{2, 15, 6}));
  EXPECT_EQ(t.value()[(1 * 15 + 7) * 6 + 4], x.at(1, 4, 1, 2));
  EXPECT_EQ(max_abs_diff(ops::from_tokens(t, 3, 5).value(), x), 0.0);
  EXPECT_THROW(ops::from_tokens(t, 4, 4), ShapeError);
}

TEST(Tokens, LinearAndLayerNormGradients) {
  Var<double> x(random_tensor(Shape{2, 5, 6}, 90), true);
  Var<double> w(random_tensor(Shape{4, 6}, 91), true);
  Var<double> b(random_tensor(Shape{4}, 92), true);
  Var<double> gamma(random_tensor(Shape{6}, 93), true);
  Var<double> beta(random_tensor(Shape{6}, 94), true);
  const auto probe = probe_weights(Shape{2, 5, 4}, 95);
  const auto rep = check_gradients(
      [&] { return ops::weighted_sum(ops::linear(ops::layer_norm(x, gamma, beta), w, b), probe); },
      {{"x", x}, {"w", w}, {"b", b}, {"gamma", gamma}, {"beta", beta}}, 20, 96);
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

TEST(Tokens, LayerNormNormalizesEachToken) {
  const auto x = random_tensor(Shape{1, 3, 8}, 97, 5.0);
  const auto y = ops::layer_norm(Var<double>(x), Var<double>(Tensor<double>(Shape{8}, 1.0)),
                                 Var<double>(Tensor<double>(Shape{8}, 0.0)))
                     .value();
  for (std::size_t t = 0; t < 3; ++t) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 8; ++i) m += y[t * 8 + i] / 8;
    for (std::size_t i = 0; i < 8; ++i) v += (y[t * 8 + i] - m) * (y[t * 8 + i] - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Var<double> x(random_tensor(Shape{1, 1, 2, 2}, 100), true);
  NoGradGuard guard;
  const auto y = ops::relu(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, SharedInputAccumulates) {
  Var<double> x(Tensor<double>(Shape{1}, 3.0), true);
  backward(ops::sum(ops::mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Shapes, MismatchesAreRejected) {
  const Var<double> a(Tensor<double>(Shape{1, 2, 2, 2}));
  const Var<double> b(Tensor<double>(Shape{1, 3, 2, 2}));
  EXPECT_THROW(ops::add(a, b), ShapeError);
  EXPECT_THROW(ops::l1_loss(a, b.value()), ShapeError);
  EXPECT_THROW(ops::channel_shuffle(b, 2), ShapeError);
}
