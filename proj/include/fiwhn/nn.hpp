#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fiwhn/autograd.hpp"
#include "fiwhn/ops.hpp"
#include "fiwhn/tensor.hpp"

namespace fiwhn {

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
  bool trainable = true;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// Closed-form cost of one layer for a given spatial extent.
struct LayerCost {
  std::string path;
  std::uint64_t params = 0;
  std::uint64_t multi_adds = 0;
};

/// Spatial extent of the feature maps a layer runs on.
struct Extent {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t pixels() const noexcept { return h * w; }
};

inline std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// Portable uniform draws on top of mt19937_64 (the standard distributions
/// are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }
  double normal() {
    const double u1 = 1.0 - uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// Seed for an independent stream derived from a base seed and indices.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ b);
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// Stride-1 "same" convolution with bias and optional weight normalization.
/// Initialization follows the usual fan-in uniform rule.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng, bool weight_norm = false,
         std::size_t groups = 1)
      : in_(in), out_(out), kernel_(kernel), groups_(groups), weight_norm_(weight_norm) {
    if (in == 0 || out == 0 || groups == 0 || in % groups || out % groups)
      throw ConfigError("Conv2d: invalid channels " + std::to_string(in) + "->" + std::to_string(out) +
                        " groups=" + std::to_string(groups));
    const double bound = 1.0 / std::sqrt(double(in / groups * kernel * kernel));
    weight_ = Var<T>(uniform_tensor<T>(Shape{out, in / groups, kernel, kernel}, bound, rng), true);
    bias_ = Var<T>(uniform_tensor<T>(Shape{out}, bound, rng), true);
    if (weight_norm_) {
      Tensor<T> g(Shape{out});
      const std::size_t per = in / groups * kernel * kernel;
      for (std::size_t o = 0; o < out; ++o) {
        T ss = 0;
        for (std::size_t i = 0; i < per; ++i) ss += weight_.value()[o * per + i] * weight_.value()[o * per + i];
        g[o] = std::sqrt(ss);
      }
      gain_ = Var<T>(std::move(g), true);
    }
  }

  Var<T> operator()(const Var<T>& x) const {
    if (x.dim(1) != in_)
      throw ConfigError("Conv2d: expected " + std::to_string(in_) + " input channels, got " +
                        std::to_string(x.dim(1)));
    const Var<T> w = weight_norm_ ? ops::weight_norm(weight_, gain_) : weight_;
    return ops::conv2d(x, w, bias_, kernel_ / 2, groups_);
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    if (weight_norm_) {
      out.push_back({join_path(prefix, "weight_g"), gain_});
      out.push_back({join_path(prefix, "weight_v"), weight_});
    } else {
      out.push_back({join_path(prefix, "weight"), weight_});
    }
    out.push_back({join_path(prefix, "bias"), bias_});
  }

  static std::uint64_t param_count(std::size_t in, std::size_t out, std::size_t k, std::size_t groups,
                                   bool weight_norm) {
    return std::uint64_t(k) * k * in * out / groups + out + (weight_norm ? out : 0);
  }

  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    out.push_back({prefix, param_count(in_, out_, kernel_, groups_, weight_norm_),
                   std::uint64_t(e.pixels()) * kernel_ * kernel_ * in_ * out_ / groups_});
  }

  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }
  std::size_t kernel() const noexcept { return kernel_; }
  const Var<T>& weight() const noexcept { return weight_; }
  const Var<T>& bias() const noexcept { return bias_; }
  const Var<T>& gain() const noexcept { return gain_; }
  bool weight_normalized() const noexcept { return weight_norm_; }

  /// Overwrites the effective kernel. With weight normalization the gain is
  /// reset to the kernel norms so the effective weight equals `w` exactly
  /// (up to rounding).
  void set_weight(const Tensor<T>& w) {
    weight_.mutable_value() = w;
    if (!weight_norm_) return;
    const std::size_t per = w.size() / out_;
    for (std::size_t o = 0; o < out_; ++o) {
      T ss = 0;
      for (std::size_t i = 0; i < per; ++i) ss += w[o * per + i] * w[o * per + i];
      gain_.mutable_value()[o] = std::sqrt(ss);
    }
  }
  void set_bias(const Tensor<T>& b) { bias_.mutable_value() = b; }

 private:
  std::size_t in_ = 0, out_ = 0, kernel_ = 1, groups_ = 1;
  bool weight_norm_ = false;
  Var<T> weight_, bias_, gain_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) : in_(in), out_(out) {
    const double bound = 1.0 / std::sqrt(double(in));
    weight_ = Var<T>(uniform_tensor<T>(Shape{out, in}, bound, rng), true);
    bias_ = Var<T>(uniform_tensor<T>(Shape{out}, bound, rng), true);
  }
  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight_, bias_); }
  void parameters(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({join_path(prefix, "weight"), weight_});
    out.push_back({join_path(prefix, "bias"), bias_});
  }
  void cost(const std::string& prefix, std::size_t tokens, std::vector<LayerCost>& out) const {
    out.push_back({prefix, std::uint64_t(in_) * out_ + out_, std::uint64_t(tokens) * in_ * out_});
  }

 private:
  std::size_t in_ = 0, out_ = 0;
  Var<T> weight_, bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim)
      : dim_(dim), gamma_(Tensor<T>(Shape{dim}, T(1)), true), beta_(Tensor<T>(Shape{dim}), true) {}
  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma_, beta_); }
  void parameters(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({join_path(prefix, "weight"), gamma_});
    out.push_back({join_path(prefix, "bias"), beta_});
  }
  // Normalization arithmetic is not a multiply-accumulate and is not counted.
  void cost(const std::string& prefix, std::vector<LayerCost>& out) const { out.push_back({prefix, 2 * dim_, 0}); }

 private:
  std::size_t dim_ = 0;
  Var<T> gamma_, beta_;
};

/// Learnable scalar multiplier, initialized to 1.
template <typename T>
Var<T> make_multiplier(T init = T(1)) {
  return Var<T>(Tensor<T>::scalar(init), true);
}

/// Zeroes every learnable tensor except the scalar multipliers, which keep
/// their values.
template <typename T>
void zero_weights(const ParamList<T>& params) {
  for (const auto& p : params) {
    if (p.name.find("lambda_") != std::string::npos) continue;
    Var<T> v = p.var;
    v.mutable_value().fill(T(0));
  }
}

template <typename T>
std::uint64_t count_elements(const ParamList<T>& params) {
  std::uint64_t n = 0;
  for (const auto& p : params) n += p.var.size();
  return n;
}

inline std::uint64_t total_params(const std::vector<LayerCost>& costs) {
  std::uint64_t n = 0;
  for (const auto& c : costs) n += c.params;
  return n;
}

inline std::uint64_t total_multi_adds(const std::vector<LayerCost>& costs) {
  std::uint64_t n = 0;
  for (const auto& c : costs) n += c.multi_adds;
  return n;
}

}  // namespace fiwhn
