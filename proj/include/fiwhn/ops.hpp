#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "fiwhn/autograd.hpp"
#include "fiwhn/blas.hpp"
#include "fiwhn/tensor.hpp"

// Differentiable kernels. Every op computes its forward value eagerly and,
// when recording, attaches a closure that pushes gradients to its inputs.
namespace fiwhn::ops {

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
            std::size_t out_h, std::size_t out_w, T* col) {
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((c * k + ki) * k + kj) * out_h * out_w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh + ki) - ipad;
          T* dst = row + oh * out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = img + (c * h + static_cast<std::size_t>(ih)) * w;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow + kj) - ipad;
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
            std::size_t out_h, std::size_t out_w, T* img) {
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((c * k + ki) * k + kj) * out_h * out_w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh + ki) - ipad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = img + (c * h + static_cast<std::size_t>(ih)) * w;
          const T* src = row + oh * out_w;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow + kj) - ipad;
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(w)) dst[iw] += src[ow];
          }
        }
      }
}

template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& x, F f, D derivative) {
  const auto& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  return make_result<T>(std::move(y), {x}, [x, derivative](Node<T>& self) {
    const auto& xv = x.value();
    const auto& yv = self.value;
    auto& gx = x.node()->grad_buffer();
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * derivative(xv[i], yv[i]);
  });
}

}  // namespace detail

/// 2-D convolution, stride 1, zero padding. Weight is [C_out, C_in/groups, k, k].
/// `bias` may be an undefined Var.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t padding,
              std::size_t groups = 1) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (groups == 0 || cin % groups || cout % groups || weight.dim(1) * groups != cin || weight.dim(3) != k)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()) + " groups=" + std::to_string(groups));
  if (h + 2 * padding < k || w + 2 * padding < k) throw ShapeError("conv2d: kernel larger than padded input");
  if (bias.defined() && (bias.shape() != Shape{cout}))
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  const std::size_t oh = h + 2 * padding - k + 1, ow = w + 2 * padding - k + 1;
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  const std::size_t kk = cin_g * k * k, hw = oh * ow;
  const bool pointwise = (k == 1 && padding == 0);

  Tensor<T> y(Shape{n, cout, oh, ow});
  std::vector<T> col(pointwise ? 0 : kk * hw);
  const T* wv = weight.value().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t g = 0; g < groups; ++g) {
      const T* src = x.value().data() + (b * cin + g * cin_g) * h * w;
      const T* cols = src;
      if (!pointwise) {
        detail::im2col(src, cin_g, h, w, k, padding, oh, ow, col.data());
        cols = col.data();
      }
      T* dst = y.data() + (b * cout + g * cout_g) * hw;
      blas::gemm(false, false, int(cout_g), int(hw), int(kk), T(1), wv + g * cout_g * kk, int(kk), cols, int(hw),
                 T(0), dst, int(hw));
    }
  if (bias.defined())
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < cout; ++c) {
        T* dst = y.data() + (b * cout + c) * hw;
        const T bc = bias.value()[c];
        for (std::size_t i = 0; i < hw; ++i) dst[i] += bc;
      }

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(y), inputs, [=](Node<T>& self) {
    const T* gy = self.grad.data();
    std::vector<T> col(pointwise ? 0 : kk * hw);
    std::vector<T> dcol(pointwise ? 0 : kk * hw);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t g = 0; g < groups; ++g) {
        const T* src = x.value().data() + (b * cin + g * cin_g) * h * w;
        const T* gyg = gy + (b * cout + g * cout_g) * hw;
        if (weight.requires_grad()) {
          const T* cols = src;
          if (!pointwise) {
            detail::im2col(src, cin_g, h, w, k, padding, oh, ow, col.data());
            cols = col.data();
          }
          T* gw = weight.node()->grad_buffer().data() + g * cout_g * kk;
          blas::gemm(false, true, int(cout_g), int(kk), int(hw), T(1), gyg, int(hw), cols, int(hw), T(1), gw,
                     int(kk));
        }
        if (x.requires_grad()) {
          T* gx = x.node()->grad_buffer().data() + (b * cin + g * cin_g) * h * w;
          const T* wg = weight.value().data() + g * cout_g * kk;
          if (pointwise) {
            blas::gemm(true, false, int(kk), int(hw), int(cout_g), T(1), wg, int(kk), gyg, int(hw), T(1), gx,
                       int(hw));
          } else {
            blas::gemm(true, false, int(kk), int(hw), int(cout_g), T(1), wg, int(kk), gyg, int(hw), T(0),
                       dcol.data(), int(hw));
            detail::col2im(dcol.data(), cin_g, h, w, k, padding, oh, ow, gx);
          }
        }
      }
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = bias.node()->grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < cout; ++c) {
          const T* src = gy + (b * cout + c) * hw;
          T acc = 0;
          for (std::size_t i = 0; i < hw; ++i) acc += src[i];
          gb[c] += acc;
        }
    }
  });
}

/// Per-output-channel weight normalization: w = g * v / ||v||. A zero
/// direction yields a zero kernel.
template <typename T>
Var<T> weight_norm(const Var<T>& direction, const Var<T>& gain) {
  const std::size_t cout = direction.dim(0);
  if (gain.shape() != Shape{cout}) throw ShapeError("weight_norm: gain shape " + shape_str(gain.shape()));
  const std::size_t per = direction.size() / cout;
  std::vector<T> norms(cout);
  Tensor<T> w(direction.shape());
  for (std::size_t o = 0; o < cout; ++o) {
    const T* v = direction.value().data() + o * per;
    T ss = 0;
    for (std::size_t i = 0; i < per; ++i) ss += v[i] * v[i];
    norms[o] = std::sqrt(ss);
    const T scale = norms[o] > T(0) ? gain.value()[o] / norms[o] : T(0);
    for (std::size_t i = 0; i < per; ++i) w[o * per + i] = scale * v[i];
  }
  return make_result<T>(std::move(w), {direction, gain}, [=](Node<T>& self) {
    for (std::size_t o = 0; o < cout; ++o) {
      if (!(norms[o] > T(0))) continue;
      const T* v = direction.value().data() + o * per;
      const T* gw = self.grad.data() + o * per;
      T dot = 0;
      for (std::size_t i = 0; i < per; ++i) dot += gw[i] * v[i];
      if (gain.requires_grad()) gain.node()->grad_buffer()[o] += dot / norms[o];
      if (direction.requires_grad()) {
        T* gv = direction.node()->grad_buffer().data() + o * per;
        const T g = gain.value()[o];
        const T n3 = norms[o] * norms[o] * norms[o];
        for (std::size_t i = 0; i < per; ++i) gv[i] += g * gw[i] / norms[o] - g * dot * v[i] / n3;
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> y = a.value();
  y += b.value();
  return make_result<T>(std::move(y), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) a.node()->grad_buffer() += self.grad;
    if (b.requires_grad()) b.node()->grad_buffer() += self.grad;
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Tensor<T>& constant) {
  a.value().require_same_shape(constant, "add");
  Tensor<T> y = a.value();
  y += constant;
  return make_result<T>(std::move(y), {a}, [a](Node<T>& self) { a.node()->grad_buffer() += self.grad; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) {
      auto& g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.value()[i];
    }
  });
}

/// x scaled by a learnable scalar of shape [1].
template <typename T>
Var<T> mul_scalar(const Var<T>& x, const Var<T>& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar: multiplier must be a scalar");
  const T sv = s.value()[0];
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sv * x.value()[i];
  return make_result<T>(std::move(y), {x, s}, [x, s](Node<T>& self) {
    if (x.requires_grad()) {
      auto& g = x.node()->grad_buffer();
      const T sv = s.value()[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * self.grad[i];
    }
    if (s.requires_grad()) {
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x.value()[i];
      s.node()->grad_buffer()[0] += acc;
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = c * x.value()[i];
  return make_result<T>(std::move(y), {x}, [x, c](Node<T>& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v / std::sqrt(T(2)))); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v / std::sqrt(T(2))));
        const T pdf = std::exp(T(-0.5) * v * v) / std::sqrt(T(2) * T(3.14159265358979323846));
        return cdf + v * pdf;
      });
}

/// Multiplies each channel of x [N,C,H,W] by gate [N,C,1,1].
template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& gate) {
  detail::require_rank(x.shape(), 4, "mul_channel");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gate.shape() != Shape{n, c, 1, 1})
    throw ShapeError("mul_channel: gate " + shape_str(gate.shape()) + " for input " + shape_str(x.shape()));
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < n * c; ++i)
    for (std::size_t j = 0; j < hw; ++j) y[i * hw + j] = x.value()[i * hw + j] * gate.value()[i];
  return make_result<T>(std::move(y), {x, gate}, [=](Node<T>& self) {
    if (x.requires_grad()) {
      auto& g = x.node()->grad_buffer();
      for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += self.grad[i * hw + j] * gate.value()[i];
    }
    if (gate.requires_grad()) {
      auto& g = gate.node()->grad_buffer();
      for (std::size_t i = 0; i < n * c; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < hw; ++j) acc += self.grad[i * hw + j] * x.value()[i * hw + j];
        g[i] += acc;
      }
    }
  });
}

/// Channels [begin, begin+count) of x [N,C,H,W].
template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x.shape(), 4, "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (count == 0 || begin + count > c) throw ShapeError("slice_channels: range out of bounds");
  Tensor<T> y(Shape{n, count, x.dim(2), x.dim(3)});
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(x.value().data() + (b * c + begin) * hw, count * hw, y.data() + b * count * hw);
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < count * hw; ++i) g[(b * c + begin) * hw + i] += self.grad[b * count * hw + i];
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  const auto& s0 = parts.front().shape();
  detail::require_rank(s0, 4, "concat_channels");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: " + shape_str(s) + " vs " + shape_str(s0));
    total += s[1];
  }
  const std::size_t n = s0[0], hw = s0[2] * s0[3];
  Tensor<T> y(Shape{n, total, s0[2], s0[3]});
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.dim(1);
      std::copy_n(p.value().data() + b * c * hw, c * hw, y.data() + (b * total + off) * hw);
      off += c;
    }
  }
  return make_result<T>(std::move(y), parts, [=](Node<T>& self) {
    for (std::size_t b = 0; b < n; ++b) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t c = p.dim(1);
        if (p.requires_grad()) {
          auto& g = p.node()->grad_buffer();
          for (std::size_t i = 0; i < c * hw; ++i) g[b * c * hw + i] += self.grad[(b * total + off) * hw + i];
        }
        off += c;
      }
    }
  });
}

/// Source channel feeding output channel `out` under a ShuffleNet-style
/// shuffle with `groups` groups: view as [groups, C/groups], transpose.
inline std::size_t shuffle_source(std::size_t out, std::size_t channels, std::size_t groups) {
  const std::size_t per = channels / groups;
  return (out % groups) * per + out / groups;
}

template <typename T>
Var<T> channel_shuffle(const Var<T>& x, std::size_t groups) {
  detail::require_rank(x.shape(), 4, "channel_shuffle");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups) throw ShapeError("channel_shuffle: channels not divisible by groups");
  Tensor<T> y(x.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < c; ++o)
      std::copy_n(x.value().data() + (b * c + shuffle_source(o, c, groups)) * hw, hw, y.data() + (b * c + o) * hw);
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < c; ++o) {
        const std::size_t src = shuffle_source(o, c, groups);
        for (std::size_t i = 0; i < hw; ++i) g[(b * c + src) * hw + i] += self.grad[(b * c + o) * hw + i];
      }
  });
}

/// Sub-pixel rearrangement [N, C*s*s, H, W] -> [N, C, H*s, W*s]; output pixel
/// (h*s+i, w*s+j) of channel c comes from input channel c*s*s + i*s + j.
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t s) {
  detail::require_rank(x.shape(), 4, "pixel_shuffle");
  const std::size_t n = x.dim(0), cs = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (s == 0 || cs % (s * s)) throw ShapeError("pixel_shuffle: channels not divisible by scale^2");
  const std::size_t c = cs / (s * s);
  Tensor<T> y(Shape{n, c, h * s, w * s});
  auto index = [=](std::size_t b, std::size_t ch, std::size_t i, std::size_t j, std::size_t hh, std::size_t ww) {
    return ((b * cs + ch * s * s + i * s + j) * h + hh) * w + ww;
  };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t hh = 0; hh < h; ++hh)
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t ww = 0; ww < w; ++ww)
            for (std::size_t j = 0; j < s; ++j)
              y.at(b, ch, hh * s + i, ww * s + j) = x.value()[index(b, ch, i, j, hh, ww)];
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t hh = 0; hh < h; ++hh)
          for (std::size_t i = 0; i < s; ++i)
            for (std::size_t ww = 0; ww < w; ++ww)
              for (std::size_t j = 0; j < s; ++j)
                g[index(b, ch, i, j, hh, ww)] += self.grad.at(b, ch, hh * s + i, ww * s + j);
  });
}

/// Spatial mean per channel: [N,C,H,W] -> [N,C,1,1].
template <typename T>
Var<T> mean_pool(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "mean_pool");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{x.dim(0), x.dim(1), 1, 1});
  for (std::size_t i = 0; i < nc; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < hw; ++j) acc += x.value()[i * hw + j];
    y[i] = acc / T(hw);
  }
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += self.grad[i] / T(hw);
  });
}

/// Spatial population standard deviation per channel. The gradient at zero
/// spread is taken as zero.
template <typename T>
Var<T> std_pool(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "std_pool");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{x.dim(0), x.dim(1), 1, 1});
  std::vector<T> means(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    const T* v = x.value().data() + i * hw;
    T mean = 0;
    for (std::size_t j = 0; j < hw; ++j) mean += v[j];
    mean /= T(hw);
    T var = 0;
    for (std::size_t j = 0; j < hw; ++j) var += (v[j] - mean) * (v[j] - mean);
    means[i] = mean;
    y[i] = std::sqrt(var / T(hw));
  }
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < nc; ++i) {
      const T sd = self.value[i];
      if (!(sd > T(0))) continue;
      const T* v = x.value().data() + i * hw;
      for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += self.grad[i] * (v[j] - means[i]) / (T(hw) * sd);
    }
  });
}

/// Row-major fold of a map [N,C,H,W] into tokens [N,H*W,C].
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "to_tokens");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{n, hw, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t t = 0; t < hw; ++t) y[(b * hw + t) * c + ch] = x.value()[(b * c + ch) * hw + t];
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t t = 0; t < hw; ++t) g[(b * c + ch) * hw + t] += self.grad[(b * hw + t) * c + ch];
  });
}

/// Inverse of to_tokens: [N,H*W,D] -> [N,D,H,W].
template <typename T>
Var<T> from_tokens(const Var<T>& t, std::size_t h, std::size_t w) {
  detail::require_rank(t.shape(), 3, "from_tokens");
  const std::size_t n = t.dim(0), hw = t.dim(1), d = t.dim(2);
  if (hw != h * w)
    throw ShapeError("from_tokens: " + std::to_string(hw) + " tokens cannot unfold to " + std::to_string(h) + "x" +
                     std::to_string(w));
  Tensor<T> y(Shape{n, d, h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < d; ++ch)
      for (std::size_t i = 0; i < hw; ++i) y[(b * d + ch) * hw + i] = t.value()[(b * hw + i) * d + ch];
  return make_result<T>(std::move(y), {t}, [=](Node<T>& self) {
    auto& g = t.node()->grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < d; ++ch)
        for (std::size_t i = 0; i < hw; ++i) g[(b * hw + i) * d + ch] += self.grad[(b * d + ch) * hw + i];
  });
}

/// Affine map over the last axis: y = x W^T + b, W is [D_out, D_in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const std::size_t din = x.shape().back(), dout = weight.dim(0);
  if (weight.shape() != Shape{dout, din}) throw ShapeError("linear: weight " + shape_str(weight.shape()));
  const std::size_t rows = x.size() / din;
  Shape ys = x.shape();
  ys.back() = dout;
  Tensor<T> y(ys);
  blas::gemm(false, true, int(rows), int(dout), int(din), T(1), x.value().data(), int(din), weight.value().data(),
             int(din), T(0), y.data(), int(dout));
  if (bias.defined())
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < dout; ++o) y[r * dout + o] += bias.value()[o];
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(y), inputs, [=](Node<T>& self) {
    if (x.requires_grad())
      blas::gemm(false, false, int(rows), int(din), int(dout), T(1), self.grad.data(), int(dout),
                 weight.value().data(), int(din), T(1), x.node()->grad_buffer().data(), int(din));
    if (weight.requires_grad())
      blas::gemm(true, false, int(dout), int(din), int(rows), T(1), self.grad.data(), int(dout), x.value().data(),
                 int(din), T(1), weight.node()->grad_buffer().data(), int(din));
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = bias.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < dout; ++o) gb[o] += self.grad[r * dout + o];
    }
  });
}

/// Normalization over the last axis with learnable affine parameters.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) throw ShapeError("layer_norm: affine shape mismatch");
  Tensor<T> y(x.shape());
  std::vector<T> xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* v = x.value().data() + r * d;
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += v[i];
    mean /= T(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (v[i] - mean) * (v[i] - mean);
    var /= T(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (v[i] - mean) * inv_std[r];
      y[r * d + i] = xhat[r * d + i] * gamma.value()[i] + beta.value()[i];
    }
  }
  return make_result<T>(std::move(y), {x, gamma, beta}, [=](Node<T>& self) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gy = self.grad.data() + r * d;
      const T* xh = xhat.data() + r * d;
      if (gamma.requires_grad()) {
        auto& gg = gamma.node()->grad_buffer();
        for (std::size_t i = 0; i < d; ++i) gg[i] += gy[i] * xh[i];
      }
      if (beta.requires_grad()) {
        auto& gb = beta.node()->grad_buffer();
        for (std::size_t i = 0; i < d; ++i) gb[i] += gy[i];
      }
      if (x.requires_grad()) {
        T sum_g = 0, sum_gx = 0;
        for (std::size_t i = 0; i < d; ++i) {
          const T gi = gy[i] * gamma.value()[i];
          sum_g += gi;
          sum_gx += gi * xh[i];
        }
        T* gx = x.node()->grad_buffer().data() + r * d;
        for (std::size_t i = 0; i < d; ++i) {
          const T gi = gy[i] * gamma.value()[i];
          gx[i] += inv_std[r] * (gi - sum_g / T(d) - xh[i] * sum_gx / T(d));
        }
      }
    }
  });
}

/// Bookkeeping from the most recent split_attention call on this thread.
struct AttentionStats {
  std::size_t entries_per_head = 0;  // score entries materialized for one (batch, head)
  std::size_t largest_group = 0;
};

namespace detail {
inline thread_local AttentionStats last_attention_stats;
}

inline AttentionStats last_attention_stats() { return detail::last_attention_stats; }

/// Token range [begin, end) of group `g` when T tokens are padded up to a
/// multiple of `splits` and cut into equal contiguous groups. Padding tokens
/// are excluded, which is the same as masking them out of the softmax.
inline std::pair<std::size_t, std::size_t> attention_group(std::size_t tokens, std::size_t splits, std::size_t g) {
  const std::size_t group = (tokens + splits - 1) / splits;
  const std::size_t begin = std::min(tokens, g * group);
  return {begin, std::min(tokens, begin + group)};
}

/// Multi-head attention restricted to `splits` contiguous token groups.
/// q, k, v are [N, T, D] with D divisible by `heads`.
template <typename T>
Var<T> split_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads, std::size_t splits) {
  detail::require_rank(q.shape(), 3, "split_attention");
  if (q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("split_attention: q/k/v shapes differ: " + shape_str(q.shape()) + " " + shape_str(k.shape()) +
                     " " + shape_str(v.shape()));
  const std::size_t n = q.dim(0), tokens = q.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads) throw ShapeError("split_attention: dim not divisible by heads");
  if (splits == 0) throw ShapeError("split_attention: splits must be positive");
  const std::size_t dk = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(dk));

  // probs[(b*heads + h)*splits + g] holds the group's softmax matrix.
  auto probs = std::make_shared<std::vector<std::vector<T>>>(n * heads * splits);
  Tensor<T> out(q.shape());
  std::size_t per_head = 0, largest = 0;
  for (std::size_t g = 0; g < splits; ++g) {
    const auto [lo, hi] = attention_group(tokens, splits, g);
    per_head += (hi - lo) * (hi - lo);
    largest = std::max(largest, hi - lo);
  }
  detail::last_attention_stats = {per_head, largest};

  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t g = 0; g < splits; ++g) {
        const auto [lo, hi] = attention_group(tokens, splits, g);
        const std::size_t m = hi - lo;
        if (m == 0) continue;
        const std::size_t base = (b * tokens + lo) * d + h * dk;
        auto& p = (*probs)[(b * heads + h) * splits + g];
        p.assign(m * m, T(0));
        blas::gemm(false, true, int(m), int(m), int(dk), inv_sqrt, q.value().data() + base, int(d),
                   k.value().data() + base, int(d), T(0), p.data(), int(m));
        for (std::size_t r = 0; r < m; ++r) {
          T* row = p.data() + r * m;
          const T mx = *std::max_element(row, row + m);
          T sum = 0;
          for (std::size_t c = 0; c < m; ++c) sum += (row[c] = std::exp(row[c] - mx));
          for (std::size_t c = 0; c < m; ++c) row[c] /= sum;
        }
        blas::gemm(false, false, int(m), int(dk), int(m), T(1), p.data(), int(m), v.value().data() + base, int(d),
                   T(0), out.data() + base, int(d));
      }

  return make_result<T>(std::move(out), {q, k, v}, [=](Node<T>& self) {
    std::vector<T> dp, ds;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t g = 0; g < splits; ++g) {
          const auto [lo, hi] = attention_group(tokens, splits, g);
          const std::size_t m = hi - lo;
          if (m == 0) continue;
          const std::size_t base = (b * tokens + lo) * d + h * dk;
          const auto& p = (*probs)[(b * heads + h) * splits + g];
          const T* go = self.grad.data() + base;
          if (v.requires_grad())
            blas::gemm(true, false, int(m), int(dk), int(m), T(1), p.data(), int(m), go, int(d), T(1),
                       v.node()->grad_buffer().data() + base, int(d));
          if (!q.requires_grad() && !k.requires_grad()) continue;
          dp.assign(m * m, T(0));
          blas::gemm(false, true, int(m), int(m), int(dk), T(1), go, int(d), v.value().data() + base, int(d), T(0),
                     dp.data(), int(m));
          ds.assign(m * m, T(0));
          for (std::size_t r = 0; r < m; ++r) {
            T dot = 0;
            for (std::size_t c = 0; c < m; ++c) dot += dp[r * m + c] * p[r * m + c];
            for (std::size_t c = 0; c < m; ++c) ds[r * m + c] = p[r * m + c] * (dp[r * m + c] - dot);
          }
          if (q.requires_grad())
            blas::gemm(false, false, int(m), int(dk), int(m), inv_sqrt, ds.data(), int(m), k.value().data() + base,
                       int(d), T(1), q.node()->grad_buffer().data() + base, int(d));
          if (k.requires_grad())
            blas::gemm(true, false, int(m), int(dk), int(m), inv_sqrt, ds.data(), int(m), q.value().data() + base,
                       int(d), T(1), k.node()->grad_buffer().data() + base, int(d));
        }
  });
}

/// Mean absolute error over all elements.
template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Tensor<T>& target) {
  pred.value().require_same_shape(target, "l1_loss");
  T acc = 0;
  for (std::size_t i = 0; i < target.size(); ++i) acc += std::abs(pred.value()[i] - target[i]);
  const T count = T(target.size());
  return make_result<T>(Tensor<T>::scalar(acc / count), {pred}, [pred, target, count](Node<T>& self) {
    auto& g = pred.node()->grad_buffer();
    const T gs = self.grad[0] / count;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T diff = pred.value()[i] - target[i];
      g[i] += diff > T(0) ? gs : (diff < T(0) ? -gs : T(0));
    }
  });
}

/// sum_i x_i * weights_i, a scalar probe used for directional derivatives.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  x.value().require_same_shape(weights, "weighted_sum");
  T acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += x.value()[i] * weights[i];
  return make_result<T>(Tensor<T>::scalar(acc), {x}, [x, weights](Node<T>& self) {
    auto& g = x.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * weights[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  return weighted_sum(x, Tensor<T>(x.shape(), T(1)));
}

}  // namespace fiwhn::ops
