#pragma once

#include <algorithm>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "fiwhn/network.hpp"

namespace fiwhn {

/// Optimizer and schedule settings. Rates default to the published recipe;
/// `steps` is the desk-scale length of a run.
struct TrainConfig {
  double lr0 = 5e-4;
  double lr_min = 6.25e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  std::size_t steps = 200;
  std::size_t batch = 16;
  std::size_t lr_patch = 48;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const {
    if (!(lr0 > 0.0) || !(lr_min > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(lr_min < lr0)) throw ConfigError("lr_min must be below lr0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (batch == 0 || lr_patch == 0) throw ConfigError("batch and lr_patch must be positive");
  }
};

struct RunConfig {
  FIWHNConfig model;
  TrainConfig train;
};

inline nlohmann::json to_json(const FIWHNConfig& c) {
  return {
      {"scale", c.scale},
      {"cnn_channels", c.cnn_channels},
      {"t_dim", c.t_dim},
      {"n_fswg", c.n_fswg},
      {"wdibs_per_fswg", c.wdibs_per_fswg},
      {"et_blocks", c.et_blocks},
      {"fuse_groups", c.fuse_groups},
      {"topology", std::string(topology_name(c.topology))},
      {"additive_injection", c.additive_injection},
      {"wdib",
       {{"distill_ratio", c.wdib.distill_ratio},
        {"wide_channels", c.wdib.wide_channels},
        {"ccl_reduction", c.wdib.ccl_reduction},
        {"wide_activation", c.wdib.wide_activation},
        {"use_wrdc", c.wdib.use_wrdc},
        {"use_scf", c.wdib.use_scf},
        {"use_interaction", c.wdib.use_interaction},
        {"adaptive_multipliers", c.wdib.adaptive_multipliers}}},
      {"et", {{"heads", c.et.heads}, {"splits", c.et.splits}, {"mlp_ratio", c.et.mlp_ratio}}},
  };
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"lr0", t.lr0},     {"lr_min", t.lr_min},       {"beta1", t.beta1},
          {"beta2", t.beta2}, {"eps", t.eps},             {"grad_clip", t.grad_clip},
          {"steps", t.steps}, {"batch", t.batch},         {"lr_patch", t.lr_patch},
          {"seed", t.seed},   {"checkpoint_every", t.checkpoint_every}};
}

inline nlohmann::json to_json(const RunConfig& r) { return {{"model", to_json(r.model)}, {"train", to_json(r.train)}}; }

namespace detail {
template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}
}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline FIWHNConfig model_config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"scale", "cnn_channels", "t_dim", "n_fswg", "wdibs_per_fswg", "et_blocks",
                                "fuse_groups", "topology", "additive_injection", "wdib", "et"};
  for (const auto& [key, _] : j.items())
    if (std::find(std::begin(known), std::end(known), key) == std::end(known))
      throw ConfigError("unknown model config field '" + key + "'");
  FIWHNConfig c;
  detail::read_opt(j, "scale", c.scale);
  detail::read_opt(j, "cnn_channels", c.cnn_channels);
  detail::read_opt(j, "t_dim", c.t_dim);
  detail::read_opt(j, "n_fswg", c.n_fswg);
  detail::read_opt(j, "wdibs_per_fswg", c.wdibs_per_fswg);
  detail::read_opt(j, "et_blocks", c.et_blocks);
  detail::read_opt(j, "fuse_groups", c.fuse_groups);
  detail::read_opt(j, "additive_injection", c.additive_injection);
  if (j.contains("topology")) c.topology = parse_topology(j.at("topology").get<std::string>());
  if (j.contains("wdib")) {
    const auto& w = j.at("wdib");
    detail::read_opt(w, "distill_ratio", c.wdib.distill_ratio);
    detail::read_opt(w, "wide_channels", c.wdib.wide_channels);
    detail::read_opt(w, "ccl_reduction", c.wdib.ccl_reduction);
    detail::read_opt(w, "wide_activation", c.wdib.wide_activation);
    detail::read_opt(w, "use_wrdc", c.wdib.use_wrdc);
    detail::read_opt(w, "use_scf", c.wdib.use_scf);
    detail::read_opt(w, "use_interaction", c.wdib.use_interaction);
    detail::read_opt(w, "adaptive_multipliers", c.wdib.adaptive_multipliers);
  }
  if (j.contains("et")) {
    const auto& e = j.at("et");
    detail::read_opt(e, "heads", c.et.heads);
    detail::read_opt(e, "splits", c.et.splits);
    detail::read_opt(e, "mlp_ratio", c.et.mlp_ratio);
  }
  c.sync_widths();
  return c;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig t;
  detail::read_opt(j, "lr0", t.lr0);
  detail::read_opt(j, "lr_min", t.lr_min);
  detail::read_opt(j, "beta1", t.beta1);
  detail::read_opt(j, "beta2", t.beta2);
  detail::read_opt(j, "eps", t.eps);
  detail::read_opt(j, "grad_clip", t.grad_clip);
  detail::read_opt(j, "steps", t.steps);
  detail::read_opt(j, "batch", t.batch);
  detail::read_opt(j, "lr_patch", t.lr_patch);
  detail::read_opt(j, "seed", t.seed);
  detail::read_opt(j, "checkpoint_every", t.checkpoint_every);
  return t;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig r;
  if (j.contains("model")) r.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) r.train = train_config_from_json(j.at("train"));
  return r;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return run_config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

}  // namespace fiwhn
