#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fiwhn/core_blocks.hpp"
#include "fiwhn/nn.hpp"
#include "fiwhn/ops.hpp"
#include "fiwhn/resize.hpp"
#include "fiwhn/transformer.hpp"

namespace fiwhn {

enum class Topology { ct_series, tc_series, parallel, interactive };

inline std::string_view topology_name(Topology t) {
  switch (t) {
    case Topology::ct_series: return "ct_series";
    case Topology::tc_series: return "tc_series";
    case Topology::parallel: return "parallel";
    case Topology::interactive: return "interactive";
  }
  return "unknown";
}

inline Topology parse_topology(std::string_view s) {
  if (s == "ct" || s == "ct_series") return Topology::ct_series;
  if (s == "tc" || s == "tc_series") return Topology::tc_series;
  if (s == "parallel") return Topology::parallel;
  if (s == "interactive") return Topology::interactive;
  throw ConfigError("unknown topology '" + std::string(s) + "' (expected ct, tc, parallel or interactive)");
}

struct FIWHNConfig {
  std::size_t scale = 4;
  std::size_t cnn_channels = 32;
  std::size_t t_dim = 144;
  std::size_t n_fswg = 2;
  std::size_t wdibs_per_fswg = 3;
  std::size_t et_blocks = 2;
  std::size_t fuse_groups = 2;
  Topology topology = Topology::interactive;
  bool additive_injection = true;  // off: concat + 1x1 conv before the second FSWG
  WDIBConfig wdib;
  ETConfig et;

  /// Copies the trunk widths into the nested block configs.
  void sync_widths() {
    wdib.channels = cnn_channels;
    et.dim = t_dim;
  }

  void validate() const {
    if (scale < 2 || scale > 4) throw ConfigError("scale must be 2, 3 or 4, got " + std::to_string(scale));
    if (cnn_channels == 0 || t_dim == 0) throw ConfigError("widths must be positive");
    if (wdib.channels != cnn_channels || et.dim != t_dim)
      throw ConfigError("nested block widths disagree with cnn_channels/t_dim");
    if (n_fswg == 0 || wdibs_per_fswg == 0) throw ConfigError("need at least one FSWG with one WDIB");
    if (topology == Topology::interactive && n_fswg < 2)
      throw ConfigError("the interactive topology needs at least two FSWGs");
    if (et_blocks == 0) throw ConfigError("need at least one transformer block");
    if (fuse_groups == 0 || cnn_channels % fuse_groups) throw ConfigError("fuse_groups must divide cnn_channels");
    wdib.validate();
    et.validate();
  }
};

/// Concat two maps, grouped 1x1 conv 2C -> C, channel shuffle.
template <typename T>
class CgsFuse {
 public:
  CgsFuse() = default;
  CgsFuse(std::size_t channels, std::size_t groups, Rng& rng)
      : groups_(groups), conv_(2 * channels, channels, 1, rng, false, groups) {}

  Var<T> operator()(const Var<T>& a, const Var<T>& b) const {
    a.value().require_same_shape(b.value(), "cgs_fuse");
    return ops::channel_shuffle(conv_(ops::concat_channels<T>({a, b})), groups_);
  }
  void parameters(const std::string& prefix, ParamList<T>& out) const {
    conv_.parameters(join_path(prefix, "conv"), out);
  }
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    conv_.cost(join_path(prefix, "conv"), e, out);
  }
  Conv2d<T>& conv() { return conv_; }

 private:
  std::size_t groups_ = 2;
  Conv2d<T> conv_;
};

/// Feature shuffle weighted group: WDIBs in sequence, adjacent outputs
/// folded through CGS units, adaptive-weighted residual.
template <typename T>
class Fswg {
 public:
  struct Output {
    Var<T> out;
    std::vector<Var<T>> taps;  // W_1..W_k
  };

  Fswg() = default;
  Fswg(const FIWHNConfig& cfg, Rng& rng) {
    for (std::size_t i = 0; i < cfg.wdibs_per_fswg; ++i) blocks_.emplace_back(cfg.wdib, rng);
    for (std::size_t i = 0; i + 1 < cfg.wdibs_per_fswg; ++i) fuse_.emplace_back(cfg.cnn_channels, cfg.fuse_groups, rng);
    scalars_.trainable = cfg.wdib.adaptive_multipliers;
  }

  /// F = CGS_{k-1}(...CGS_1(W_1, W_2)..., W_k); out = lambda_x (F + W_k) + lambda_res x.
  Output operator()(const Var<T>& x) const {
    Output o;
    Var<T> h = x;
    for (const auto& b : blocks_) {
      h = b(h);
      o.taps.push_back(h);
    }
    Var<T> fused = o.taps.front();
    for (std::size_t i = 0; i < fuse_.size(); ++i) fused = fuse_[i](fused, o.taps[i + 1]);
    o.out = ops::add(ops::mul_scalar(ops::add(fused, o.taps.back()), scalars_.lambda_x),
                     ops::mul_scalar(x, scalars_.lambda_res));
    return o;
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].parameters(join_path(prefix, "wdib." + std::to_string(i)), out);
    for (std::size_t i = 0; i < fuse_.size(); ++i)
      fuse_[i].parameters(join_path(prefix, "cgs." + std::to_string(i)), out);
    scalars_.parameters(prefix, out);
  }
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].cost(join_path(prefix, "wdib." + std::to_string(i)), e, out);
    for (std::size_t i = 0; i < fuse_.size(); ++i) fuse_[i].cost(join_path(prefix, "cgs." + std::to_string(i)), e, out);
    scalars_.cost(join_path(prefix, "multipliers"), out);
  }

  std::vector<Wdib<T>>& blocks() { return blocks_; }
  std::vector<CgsFuse<T>>& fuse_units() { return fuse_; }
  AdaptiveScalarPair<T>& scalars() { return scalars_; }

 private:
  std::vector<Wdib<T>> blocks_;
  std::vector<CgsFuse<T>> fuse_;
  AdaptiveScalarPair<T> scalars_;
};

/// Which intermediate tap of the first FSWG feeds the transformer branch (W_2).
inline std::size_t interaction_tap(std::size_t wdibs_per_fswg) { return wdibs_per_fswg >= 2 ? 1 : 0; }

/// Structural counters collected during one forward.
struct ForwardTrace {
  int interaction_tap_reads = 0;
};

/// The full hybrid super-resolution network for any of the four
/// CNN/Transformer topologies.
template <typename T>
class Model {
 public:
  explicit Model(FIWHNConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t c = cfg_.cnn_channels, d = cfg_.t_dim;
    head_ = Conv2d<T>(3, c, 3, rng);
    embed_ = Embed<T>(d, rng);
    for (std::size_t i = 0; i < cfg_.n_fswg; ++i) fswgs_.emplace_back(cfg_, rng);
    for (std::size_t i = 0; i < cfg_.et_blocks; ++i) ets_.emplace_back(cfg_.et, rng);
    if (cfg_.topology != Topology::parallel) cr_ = CrTransform<T>(c, d, rng);
    rc_ = RcTransform<T>(d, c, rng);
    if (cfg_.topology == Topology::interactive && !cfg_.additive_injection) inject_ = Conv2d<T>(2 * c, c, 1, rng);
    fuse_ = Conv2d<T>(2 * c, c, 1, rng);
    tail_ = Conv2d<T>(c, 3 * cfg_.scale * cfg_.scale, 3, rng);
  }

  /// LR image [N,3,H,W] -> SR image [N,3,sH,sW]. Output is not clamped.
  Var<T> operator()(const Var<T>& img, ForwardTrace* trace = nullptr) const {
    if (img.shape().size() != 4 || img.dim(1) != 3)
      throw ShapeError("fiwhn_forward: expected [N,3,H,W], got " + shape_str(img.shape()));
    const Var<T> shallow = head_(img);
    const Var<T> tokens = embed_(img);
    const Var<T> deep = deep_features(shallow, tokens, img.dim(2), img.dim(3), trace);
    return upsample_reconstruct(deep, shallow, img.value());
  }

  /// F_D for the configured topology from the CNN stem output and the
  /// embedded tokens.
  Var<T> deep_features(const Var<T>& f_c, const Var<T>& f_t, std::size_t h, std::size_t w,
                       ForwardTrace* trace = nullptr) const {
    if (f_c.dim(2) != h || f_c.dim(3) != w || f_t.dim(1) != h * w)
      throw ShapeError("deep_features: CNN map " + shape_str(f_c.shape()) + " and tokens " +
                       shape_str(f_t.shape()) + " disagree");
    switch (cfg_.topology) {
      case Topology::interactive: return interaction_forward(f_c, f_t, h, w, trace);
      case Topology::ct_series: {
        const Var<T> local = run_cnn(f_c);
        const Var<T> global = run_transformer(ops::add(cr_(local), f_t));
        return fuse(local, rc_(global, h, w));
      }
      case Topology::tc_series: {
        const Var<T> global = rc_(run_transformer(ops::add(cr_(f_c), f_t)), h, w);
        return fuse(run_cnn(global), global);
      }
      case Topology::parallel: {
        const Var<T> local = run_cnn(f_c);
        return fuse(local, rc_(run_transformer(f_t), h, w));
      }
    }
    throw ConfigError("unknown topology");
  }

  /// Interactive topology: the W_2 tap of the first FSWG is lifted to
  /// tokens, added to the embedded tokens and passed through the ET stack;
  /// the result enriches the input of the second FSWG and is fused with
  /// the final CNN output.
  Var<T> interaction_forward(const Var<T>& f_c, const Var<T>& f_t, std::size_t h, std::size_t w,
                             ForwardTrace* trace = nullptr) const {
    if (cfg_.topology != Topology::interactive) throw ConfigError("interaction_forward needs the interactive topology");
    const auto first = fswgs_.front()(f_c);
    const Var<T>& tap = first.taps.at(interaction_tap(cfg_.wdibs_per_fswg));
    if (trace) ++trace->interaction_tap_reads;
    const Var<T> global = run_transformer(ops::add(cr_(tap), f_t));
    const Var<T> global_map = rc_(global, h, w);
    Var<T> local = cfg_.additive_injection ? ops::add(first.out, global_map)
                                           : (*inject_)(ops::concat_channels<T>({first.out, global_map}));
    for (std::size_t i = 1; i < fswgs_.size(); ++i) local = fswgs_[i](local).out;
    return fuse(local, global_map);
  }

  /// conv3x3(f_d + shallow) -> pixel shuffle, plus the bicubic upsampled
  /// input.
  Var<T> upsample_reconstruct(const Var<T>& f_d, const Var<T>& shallow, const Tensor<T>& img) const {
    f_d.value().require_same_shape(shallow.value(), "upsample_reconstruct");
    const std::size_t s = cfg_.scale;
    const Var<T> detail = ops::pixel_shuffle(tail_(ops::add(f_d, shallow)), s);
    return ops::add(detail, bicubic_resize(img, img.dim(2) * s, img.dim(3) * s));
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    head_.parameters("head", out);
    embed_.parameters("embed", out);
    for (std::size_t i = 0; i < fswgs_.size(); ++i) fswgs_[i].parameters("fswg." + std::to_string(i), out);
    for (std::size_t i = 0; i < ets_.size(); ++i) ets_[i].parameters("et." + std::to_string(i), out);
    if (cfg_.topology != Topology::parallel) cr_.parameters("cr", out);
    rc_.parameters("rc", out);
    if (inject_) inject_->parameters("inject", out);
    fuse_.parameters("fuse", out);
    tail_.parameters("tail", out);
    return out;
  }

  /// Closed-form per-layer costs for an LR input of extent `lr`.
  std::vector<LayerCost> costs(Extent lr) const {
    std::vector<LayerCost> out;
    const std::size_t tokens = lr.pixels();
    head_.cost("head", lr, out);
    embed_.cost("embed", lr, out);
    for (std::size_t i = 0; i < fswgs_.size(); ++i) fswgs_[i].cost("fswg." + std::to_string(i), lr, out);
    for (std::size_t i = 0; i < ets_.size(); ++i) ets_[i].cost("et." + std::to_string(i), tokens, out);
    if (cfg_.topology != Topology::parallel) cr_.cost("cr", lr, out);
    rc_.cost("rc", lr, out);
    if (inject_) inject_->cost("inject", lr, out);
    fuse_.cost("fuse", lr, out);
    tail_.cost("tail", lr, out);
    return out;
  }

  const FIWHNConfig& config() const noexcept { return cfg_; }
  std::vector<Fswg<T>>& fswgs() { return fswgs_; }
  std::vector<EfficientTransformer<T>>& transformers() { return ets_; }

 private:
  Var<T> run_cnn(Var<T> x) const {
    for (const auto& g : fswgs_) x = g(x).out;
    return x;
  }
  Var<T> run_transformer(Var<T> t) const {
    for (const auto& et : ets_) t = et(t);
    return t;
  }
  Var<T> fuse(const Var<T>& local, const Var<T>& global) const {
    return fuse_(ops::concat_channels<T>({local, global}));
  }

  FIWHNConfig cfg_;
  Conv2d<T> head_;
  Embed<T> embed_;
  std::vector<Fswg<T>> fswgs_;
  std::vector<EfficientTransformer<T>> ets_;
  CrTransform<T> cr_;
  RcTransform<T> rc_;
  std::optional<Conv2d<T>> inject_;
  Conv2d<T> fuse_, tail_;
};

/// LR extent whose SR output has the given resolution.
inline Extent lr_extent(std::size_t out_h, std::size_t out_w, std::size_t scale) {
  return Extent{out_h / scale, out_w / scale};
}

}  // namespace fiwhn
