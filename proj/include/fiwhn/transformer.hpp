#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fiwhn/nn.hpp"
#include "fiwhn/ops.hpp"

namespace fiwhn {

struct ETConfig {
  std::size_t dim = 144;
  std::size_t heads = 4;
  std::size_t splits = 4;
  double mlp_ratio = 2.0;

  std::size_t head_dim() const { return dim / heads; }
  std::size_t hidden() const { return static_cast<std::size_t>(std::lround(double(dim) * mlp_ratio)); }
  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads) throw ConfigError("ETConfig: dim must be divisible by heads");
    if (splits == 0) throw ConfigError("ETConfig: splits must be positive");
    if (!(mlp_ratio > 0.0) || hidden() == 0) throw ConfigError("ETConfig: mlp_ratio must be positive");
  }
};

/// Token-split multi-head attention on already projected q, k, v.
template <typename T>
Var<T> split_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const ETConfig& cfg) {
  return ops::split_attention(q, k, v, cfg.heads, cfg.splits);
}

/// Pre-norm transformer block whose attention is confined to token groups:
///   t + Proj(Attn(QKV(LN(t))))  then  + MLP(LN(.)), MLP = Linear-GELU-Linear.
template <typename T>
class EfficientTransformer {
 public:
  EfficientTransformer() = default;
  EfficientTransformer(const ETConfig& cfg, Rng& rng)
      : cfg_(cfg),
        norm1_(cfg.dim),
        q_(cfg.dim, cfg.dim, rng),
        k_(cfg.dim, cfg.dim, rng),
        v_(cfg.dim, cfg.dim, rng),
        proj_(cfg.dim, cfg.dim, rng),
        norm2_(cfg.dim),
        fc1_(cfg.dim, cfg.hidden(), rng),
        fc2_(cfg.hidden(), cfg.dim, rng) {
    cfg_.validate();
  }

  Var<T> operator()(const Var<T>& t) const {
    if (t.shape().size() != 3 || t.dim(2) != cfg_.dim)
      throw ShapeError("et_block: expected [N,T," + std::to_string(cfg_.dim) + "] tokens, got " +
                       shape_str(t.shape()));
    const Var<T> h = norm1_(t);
    const Var<T> attn = split_attention(q_(h), k_(h), v_(h), cfg_);
    const Var<T> mid = ops::add(t, proj_(attn));
    return ops::add(mid, fc2_(ops::gelu(fc1_(norm2_(mid)))));
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    norm1_.parameters(join_path(prefix, "norm1"), out);
    q_.parameters(join_path(prefix, "attn.q"), out);
    k_.parameters(join_path(prefix, "attn.k"), out);
    v_.parameters(join_path(prefix, "attn.v"), out);
    proj_.parameters(join_path(prefix, "attn.proj"), out);
    norm2_.parameters(join_path(prefix, "norm2"), out);
    fc1_.parameters(join_path(prefix, "mlp.fc1"), out);
    fc2_.parameters(join_path(prefix, "mlp.fc2"), out);
  }

  /// Attention matmuls per (batch, head, group) of m tokens: m*m*d_k for
  /// the scores and again for the weighted values.
  static std::uint64_t attention_multi_adds(std::size_t tokens, const ETConfig& cfg) {
    std::uint64_t total = 0;
    for (std::size_t g = 0; g < cfg.splits; ++g) {
      const auto [lo, hi] = ops::attention_group(tokens, cfg.splits, g);
      const std::uint64_t m = hi - lo;
      total += 2 * m * m * cfg.head_dim();
    }
    return total * cfg.heads;
  }

  void cost(const std::string& prefix, std::size_t tokens, std::vector<LayerCost>& out) const {
    norm1_.cost(join_path(prefix, "norm1"), out);
    q_.cost(join_path(prefix, "attn.q"), tokens, out);
    k_.cost(join_path(prefix, "attn.k"), tokens, out);
    v_.cost(join_path(prefix, "attn.v"), tokens, out);
    out.push_back({join_path(prefix, "attn.matmul"), 0, attention_multi_adds(tokens, cfg_)});
    proj_.cost(join_path(prefix, "attn.proj"), tokens, out);
    norm2_.cost(join_path(prefix, "norm2"), out);
    fc1_.cost(join_path(prefix, "mlp.fc1"), tokens, out);
    fc2_.cost(join_path(prefix, "mlp.fc2"), tokens, out);
  }

  const ETConfig& config() const noexcept { return cfg_; }

 private:
  ETConfig cfg_;
  LayerNorm<T> norm1_;
  Linear<T> q_, k_, v_, proj_;
  LayerNorm<T> norm2_;
  Linear<T> fc1_, fc2_;
};

/// Image -> tokens: 3x3 conv 3 -> D, then row-major fold.
template <typename T>
class Embed {
 public:
  Embed() = default;
  Embed(std::size_t dim, Rng& rng) : conv_(3, dim, 3, rng) {}
  Var<T> operator()(const Var<T>& img) const {
    if (img.shape().size() != 4 || img.dim(1) != 3)
      throw ShapeError("embed: expected a 3-channel image, got " + shape_str(img.shape()));
    return ops::to_tokens(conv_(img));
  }
  void parameters(const std::string& prefix, ParamList<T>& out) const {
    conv_.parameters(join_path(prefix, "conv"), out);
  }
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    conv_.cost(join_path(prefix, "conv"), e, out);
  }
  Conv2d<T>& conv() { return conv_; }

 private:
  Conv2d<T> conv_;
};

/// CNN map -> tokens: 1x1 conv C -> D, then fold.
template <typename T>
class CrTransform {
 public:
  CrTransform() = default;
  CrTransform(std::size_t channels, std::size_t dim, Rng& rng) : conv_(channels, dim, 1, rng) {}
  Var<T> operator()(const Var<T>& f) const { return ops::to_tokens(conv_(f)); }
  void parameters(const std::string& prefix, ParamList<T>& out) const {
    conv_.parameters(join_path(prefix, "conv"), out);
  }
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    conv_.cost(join_path(prefix, "conv"), e, out);
  }
  Conv2d<T>& conv() { return conv_; }

 private:
  Conv2d<T> conv_;
};

/// Tokens -> CNN map: unfold to (h, w), then 1x1 conv D -> C.
template <typename T>
class RcTransform {
 public:
  RcTransform() = default;
  RcTransform(std::size_t dim, std::size_t channels, Rng& rng) : conv_(dim, channels, 1, rng) {}
  Var<T> operator()(const Var<T>& tokens, std::size_t h, std::size_t w) const {
    return conv_(ops::from_tokens(tokens, h, w));
  }
  void parameters(const std::string& prefix, ParamList<T>& out) const {
    conv_.parameters(join_path(prefix, "conv"), out);
  }
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    conv_.cost(join_path(prefix, "conv"), e, out);
  }
  Conv2d<T>& conv() { return conv_; }

 private:
  Conv2d<T> conv_;
};

}  // namespace fiwhn
