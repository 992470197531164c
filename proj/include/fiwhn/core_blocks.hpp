#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fiwhn/nn.hpp"
#include "fiwhn/ops.hpp"

namespace fiwhn {

/// Hyperparameters of one wide-residual distillation interaction block.
struct WDIBConfig {
  std::size_t channels = 32;
  double distill_ratio = 0.5;
  std::size_t wide_channels = 120;
  std::size_t ccl_reduction = 4;

  // Ablation switches. All on is the full block.
  bool wide_activation = true;       // off: plain conv3x3-ReLU-conv3x3 residual units
  bool use_wrdc = true;              // split/distill pathway
  bool use_scf = true;               // off: concat + 1x1 fusion
  bool use_interaction = true;       // off: coarse features are added instead of multiplied
  bool adaptive_multipliers = true;  // off: multipliers frozen at 1

  /// Distilled width: C * ratio rounded half-down, so the remaining part
  /// gets the larger half on ties.
  std::size_t distill_channels() const {
    return static_cast<std::size_t>(std::ceil(double(channels) * distill_ratio - 0.5));
  }
  std::size_t remain_channels() const { return channels - distill_channels(); }
  std::size_t ccl_hidden() const { return (channels + ccl_reduction - 1) / ccl_reduction; }

  void validate() const {
    if (channels == 0) throw ConfigError("WDIBConfig: channels must be positive");
    if (!(distill_ratio > 0.0 && distill_ratio < 1.0)) throw ConfigError("WDIBConfig: distill_ratio must be in (0,1)");
    if (distill_channels() == 0 || remain_channels() == 0)
      throw ConfigError("WDIBConfig: distill ratio leaves an empty split for " + std::to_string(channels) +
                        " channels");
    if (wide_activation && wide_channels <= channels)
      throw ConfigError("WDIBConfig: wide_channels must exceed channels");
    if (ccl_reduction == 0) throw ConfigError("WDIBConfig: ccl_reduction must be positive");
  }
};

/// Contiguous channel split: the first C - round(C*ratio) channels remain,
/// the rest are distilled.
template <typename T>
std::pair<Var<T>, Var<T>> channel_split(const Var<T>& x, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("channel_split: ratio must be in (0,1)");
  WDIBConfig shape;
  shape.channels = x.dim(1);
  shape.distill_ratio = ratio;
  const std::size_t distill = shape.distill_channels(), remain = shape.remain_channels();
  if (distill == 0 || remain == 0)
    throw ConfigError("channel_split: ratio " + std::to_string(ratio) + " leaves an empty part of " +
                      std::to_string(x.dim(1)) + " channels");
  return {ops::slice_channels(x, 0, remain), ops::slice_channels(x, remain, distill)};
}

/// Main path of the wide residual units: 1x1 up to the wide width, ReLU,
/// 1x1 back down, 3x3. Every convolution is weight-normalized.
template <typename T>
class WideFeature {
 public:
  WideFeature() = default;
  WideFeature(std::size_t in, std::size_t out, const WDIBConfig& cfg, Rng& rng)
      : in_(in), out_(out), wide_(cfg.wide_activation) {
    if (wide_) {
      up_ = Conv2d<T>(in, cfg.wide_channels, 1, rng, true);
      down_ = Conv2d<T>(cfg.wide_channels, out, 1, rng, true);
      conv3_ = Conv2d<T>(out, out, 3, rng, true);
    } else {
      down_ = Conv2d<T>(in, out, 3, rng, true);
      conv3_ = Conv2d<T>(out, out, 3, rng, true);
    }
  }

  /// `pre_activation`, when given, receives the tensor fed to the ReLU.
  Var<T> operator()(const Var<T>& x, Var<T>* pre_activation = nullptr) const {
    if (x.dim(1) != in_)
      throw ConfigError("wide_feature: expected " + std::to_string(in_) + " channels, got " +
                        std::to_string(x.dim(1)));
    Var<T> h = wide_ ? up_(x) : down_(x);
    if (pre_activation) *pre_activation = h;
    h = ops::relu(h);
    if (wide_) h = down_(h);
    return conv3_(h);
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    if (wide_) up_.parameters(join_path(prefix, "up"), out);
    down_.parameters(join_path(prefix, "down"), out);
    conv3_.parameters(join_path(prefix, "conv3"), out);
  }
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    if (wide_) up_.cost(join_path(prefix, "up"), e, out);
    down_.cost(join_path(prefix, "down"), e, out);
    conv3_.cost(join_path(prefix, "conv3"), e, out);
  }

  Conv2d<T>& up() { return up_; }
  Conv2d<T>& down() { return down_; }
  Conv2d<T>& conv3() { return conv3_; }
  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  bool wide_ = true;
  Conv2d<T> up_, down_, conv3_;
};

/// Pair of learnable multipliers on the main and residual paths.
template <typename T>
struct AdaptiveScalarPair {
  Var<T> lambda_x = make_multiplier<T>();
  Var<T> lambda_res = make_multiplier<T>();
  bool trainable = true;

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({join_path(prefix, "lambda_x"), lambda_x, trainable});
    out.push_back({join_path(prefix, "lambda_res"), lambda_res, trainable});
  }
  void cost(const std::string& prefix, std::vector<LayerCost>& out) const { out.push_back({prefix, 2, 0}); }
};

/// Wide identical residual weighting: lambda_x * wide(x) + lambda_res * x.
template <typename T>
class Wirw {
 public:
  Wirw() = default;
  Wirw(const WDIBConfig& cfg, Rng& rng) : body_(cfg.channels, cfg.channels, cfg, rng) {
    scalars_.trainable = cfg.adaptive_multipliers;
  }

  Var<T> operator()(const Var<T>& x) const {
    return ops::add(ops::mul_scalar(body_(x), scalars_.lambda_x), ops::mul_scalar(x, scalars_.lambda_res));
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    body_.parameters(join_path(prefix, "body"), out);
    scalars_.parameters(prefix, out);
  }
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    body_.cost(join_path(prefix, "body"), e, out);
    scalars_.cost(join_path(prefix, "multipliers"), out);
  }

  WideFeature<T>& body() { return body_; }
  AdaptiveScalarPair<T>& scalars() { return scalars_; }

 private:
  WideFeature<T> body_;
  AdaptiveScalarPair<T> scalars_;
};

/// Wide convolutional residual weighting: the shortcut is a 3x3 conv that
/// restores the pre-split width.
template <typename T>
class Wcrw {
 public:
  Wcrw() = default;
  Wcrw(std::size_t in, const WDIBConfig& cfg, Rng& rng)
      : body_(in, cfg.channels, cfg, rng), shortcut_(in, cfg.channels, 3, rng, true) {
    scalars_.trainable = cfg.adaptive_multipliers;
  }

  Var<T> operator()(const Var<T>& x) const {
    return ops::add(ops::mul_scalar(body_(x), scalars_.lambda_x),
                    ops::mul_scalar(shortcut_(x), scalars_.lambda_res));
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    body_.parameters(join_path(prefix, "body"), out);
    shortcut_.parameters(join_path(prefix, "shortcut"), out);
    scalars_.parameters(prefix, out);
  }
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    body_.cost(join_path(prefix, "body"), e, out);
    shortcut_.cost(join_path(prefix, "shortcut"), e, out);
    scalars_.cost(join_path(prefix, "multipliers"), out);
  }

  WideFeature<T>& body() { return body_; }
  Conv2d<T>& shortcut() { return shortcut_; }
  AdaptiveScalarPair<T>& scalars() { return scalars_; }

 private:
  WideFeature<T> body_;
  Conv2d<T> shortcut_;
  AdaptiveScalarPair<T> scalars_;
};

/// Combination coefficient learning: channel gate averaging the sigmoid
/// responses to mean- and std-pooled statistics. The reduce/expand 1x1
/// convolutions are shared by both statistics.
template <typename T>
class Ccl {
 public:
  Ccl() = default;
  Ccl(std::size_t channels, std::size_t reduction, Rng& rng)
      : channels_(channels),
        reduce_(channels, (channels + reduction - 1) / reduction, 1, rng),
        expand_((channels + reduction - 1) / reduction, channels, 1, rng) {}

  /// Returns a [N, C, 1, 1] gate with entries in (0, 1).
  Var<T> operator()(const Var<T>& x) const {
    if (x.dim(1) != channels_)
      throw ConfigError("ccl: expected " + std::to_string(channels_) + " channels, got " + std::to_string(x.dim(1)));
    const Var<T> avg = ops::sigmoid(expand_(reduce_(ops::mean_pool(x))));
    const Var<T> sd = ops::sigmoid(expand_(reduce_(ops::std_pool(x))));
    return ops::scale(ops::add(avg, sd), T(0.5));
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    reduce_.parameters(join_path(prefix, "reduce"), out);
    expand_.parameters(join_path(prefix, "expand"), out);
  }
  void cost(const std::string& prefix, std::vector<LayerCost>& out) const {
    // Both statistics pass through the pair of 1x1 convs at 1x1 extent.
    std::vector<LayerCost> once;
    reduce_.cost(join_path(prefix, "reduce"), Extent{1, 1}, once);
    expand_.cost(join_path(prefix, "expand"), Extent{1, 1}, once);
    for (auto& c : once) c.multi_adds *= 2;
    out.insert(out.end(), once.begin(), once.end());
  }

  Conv2d<T>& reduce() { return reduce_; }
  Conv2d<T>& expand() { return expand_; }

 private:
  std::size_t channels_ = 0;
  Conv2d<T> reduce_, expand_;
};

/// Paired skip connection: x + y * M(y).
template <typename T>
Var<T> paired_skip(const Var<T>& x, const Var<T>& y, const Ccl<T>& gate) {
  x.value().require_same_shape(y.value(), "paired_skip");
  return ops::add(x, ops::mul_channel(y, gate(y)));
}

/// Coarse-feature branch: sigmoid(conv3x3(x_distill)), widening to C.
template <typename T>
class DistillBranch {
 public:
  DistillBranch() = default;
  DistillBranch(std::size_t in, std::size_t out, Rng& rng) : conv_(in, out, 3, rng) {}
  Var<T> operator()(const Var<T>& x) const { return ops::sigmoid(conv_(x)); }
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

/// Self-calibrating fusion of two branch outputs:
///   f = conv1x1([a, b]);  s = a * M_a(f) + b * M_b(f);  out = conv3x3(s).
/// With calibration disabled it reduces to conv1x1([a, b]).
template <typename T>
class Scf {
 public:
  Scf() = default;
  Scf(std::size_t channels, std::size_t reduction, bool calibrate, Rng& rng)
      : calibrate_(calibrate), fuse_(2 * channels, channels, 1, rng) {
    if (calibrate_) {
      gate_a_ = Ccl<T>(channels, reduction, rng);
      gate_b_ = Ccl<T>(channels, reduction, rng);
      refine_ = Conv2d<T>(channels, channels, 3, rng);
    }
  }

  Var<T> operator()(const Var<T>& a, const Var<T>& b) const {
    a.value().require_same_shape(b.value(), "scf");
    const Var<T> fused = fuse_(ops::concat_channels<T>({a, b}));
    if (!calibrate_) return fused;
    const Var<T> mixed = ops::add(ops::mul_channel(a, gate_a_(fused)), ops::mul_channel(b, gate_b_(fused)));
    return refine_(mixed);
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    fuse_.parameters(join_path(prefix, "fuse"), out);
    if (!calibrate_) return;
    gate_a_.parameters(join_path(prefix, "gate_a"), out);
    gate_b_.parameters(join_path(prefix, "gate_b"), out);
    refine_.parameters(join_path(prefix, "refine"), out);
  }
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    fuse_.cost(join_path(prefix, "fuse"), e, out);
    if (!calibrate_) return;
    gate_a_.cost(join_path(prefix, "gate_a"), out);
    gate_b_.cost(join_path(prefix, "gate_b"), out);
    refine_.cost(join_path(prefix, "refine"), e, out);
  }

  Conv2d<T>& fuse() { return fuse_; }
  Conv2d<T>& refine() { return refine_; }
  Ccl<T>& gate_a() { return gate_a_; }
  Ccl<T>& gate_b() { return gate_b_; }

 private:
  bool calibrate_ = true;
  Conv2d<T> fuse_;
  Ccl<T> gate_a_, gate_b_;
  Conv2d<T> refine_;
};

/// Intermediate values of one WDIB forward, for inspection in tests.
template <typename T>
struct WdibTrace {
  Var<T> x1, x2, u_prev, v_prev, u, v, distill_u, distill_d, x_i, x_j;
  int distill_events = 0;
};

/// Wide-residual distillation interaction block. One WIRW and one WCRW
/// unit are shared by every application inside the block.
template <typename T>
class Wdib {
 public:
  Wdib() = default;
  Wdib(const WDIBConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t c = cfg.channels;
    wirw_ = Wirw<T>(cfg, rng);
    wcrw_ = Wcrw<T>(cfg.use_wrdc ? cfg.remain_channels() : c, cfg, rng);
    first_u_ = Ccl<T>(c, cfg.ccl_reduction, rng);
    first_d_ = Ccl<T>(c, cfg.ccl_reduction, rng);
    second_u_ = Ccl<T>(c, cfg.ccl_reduction, rng);
    second_d_ = Ccl<T>(c, cfg.ccl_reduction, rng);
    if (cfg.use_wrdc) {
      distill_u_ = DistillBranch<T>(cfg.distill_channels(), c, rng);
      distill_d_ = DistillBranch<T>(cfg.distill_channels(), c, rng);
    }
    scf_ = Scf<T>(c, cfg.ccl_reduction, cfg.use_scf, rng);
  }

  Var<T> operator()(const Var<T>& x, WdibTrace<T>* trace = nullptr) const {
    if (x.dim(1) != cfg_.channels)
      throw ConfigError("wdib: expected " + std::to_string(cfg_.channels) + " channels, got " +
                        std::to_string(x.dim(1)));
    WdibTrace<T> local;
    WdibTrace<T>& tr = trace ? *trace : local;

    Var<T> remain1 = wirw_(x), distill1;
    if (cfg_.use_wrdc) {
      std::tie(remain1, distill1) = channel_split(remain1, cfg_.distill_ratio);
      ++tr.distill_events;
    }
    tr.x1 = wcrw_(remain1);
    tr.v_prev = paired_skip(x, tr.x1, first_u_);
    tr.u_prev = paired_skip(tr.x1, x, first_d_);

    Var<T> remain2 = wirw_(tr.v_prev), distill2;
    if (cfg_.use_wrdc) {
      std::tie(remain2, distill2) = channel_split(remain2, cfg_.distill_ratio);
      ++tr.distill_events;
    }
    tr.x2 = wcrw_(remain2);
    tr.v = paired_skip(tr.x2, tr.u_prev, second_u_);
    tr.u = paired_skip(tr.u_prev, tr.x2, second_d_);

    tr.x_i = tr.u;
    tr.x_j = tr.v;
    if (cfg_.use_wrdc) {
      tr.distill_u = distill_u_(distill1);
      tr.distill_d = distill_d_(distill2);
      if (cfg_.use_interaction) {
        tr.x_i = ops::mul(tr.u, tr.distill_u);
        tr.x_j = ops::mul(tr.v, tr.distill_d);
      } else {
        tr.x_i = ops::add(tr.u, tr.distill_u);
        tr.x_j = ops::add(tr.v, tr.distill_d);
      }
    }
    return ops::add(scf_(wirw_(tr.x_i), wirw_(tr.x_j)), x);
  }

  void parameters(const std::string& prefix, ParamList<T>& out) const {
    wirw_.parameters(join_path(prefix, "wirw"), out);
    wcrw_.parameters(join_path(prefix, "wcrw"), out);
    first_u_.parameters(join_path(prefix, "ccl_first_u"), out);
    first_d_.parameters(join_path(prefix, "ccl_first_d"), out);
    second_u_.parameters(join_path(prefix, "ccl_second_u"), out);
    second_d_.parameters(join_path(prefix, "ccl_second_d"), out);
    if (cfg_.use_wrdc) {
      distill_u_.parameters(join_path(prefix, "distill_u"), out);
      distill_d_.parameters(join_path(prefix, "distill_d"), out);
    }
    scf_.parameters(join_path(prefix, "scf"), out);
  }

  /// Per-layer cost. The shared WIRW runs four times per forward and the
  /// shared WCRW twice; their multi-adds are scaled accordingly.
  void cost(const std::string& prefix, Extent e, std::vector<LayerCost>& out) const {
    auto repeated = [&](auto& unit, const std::string& name, std::uint64_t times) {
      std::vector<LayerCost> part;
      unit.cost(join_path(prefix, name), e, part);
      for (auto& c : part) c.multi_adds *= times;
      out.insert(out.end(), part.begin(), part.end());
    };
    repeated(wirw_, "wirw", 4);
    repeated(wcrw_, "wcrw", 2);
    first_u_.cost(join_path(prefix, "ccl_first_u"), out);
    first_d_.cost(join_path(prefix, "ccl_first_d"), out);
    second_u_.cost(join_path(prefix, "ccl_second_u"), out);
    second_d_.cost(join_path(prefix, "ccl_second_d"), out);
    if (cfg_.use_wrdc) {
      distill_u_.cost(join_path(prefix, "distill_u"), e, out);
      distill_d_.cost(join_path(prefix, "distill_d"), e, out);
    }
    scf_.cost(join_path(prefix, "scf"), e, out);
  }

  const WDIBConfig& config() const noexcept { return cfg_; }
  Wirw<T>& wirw() { return wirw_; }
  Wcrw<T>& wcrw() { return wcrw_; }
  Scf<T>& scf() { return scf_; }
  DistillBranch<T>& distill_u() { return distill_u_; }
  DistillBranch<T>& distill_d() { return distill_d_; }

 private:
  WDIBConfig cfg_;
  Wirw<T> wirw_;
  Wcrw<T> wcrw_;
  Ccl<T> first_u_, first_d_, second_u_, second_d_;
  DistillBranch<T> distill_u_, distill_d_;
  Scf<T> scf_;
};

}  // namespace fiwhn
