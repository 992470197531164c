#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fiwhn/checkpoint.hpp"
#include "fiwhn/config.hpp"
#include "fiwhn/datapipe.hpp"
#include "fiwhn/network.hpp"

namespace fiwhn {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// lr_min + (lr0 - lr_min)(1 + cos(pi step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total, const TrainConfig& cfg) {
  if (total == 0) throw ConfigError("cosine_lr: total must be positive");
  if (step > total) throw ConfigError("cosine_lr: step beyond total");
  return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * double(step) / double(total)));
}

/// Adam without weight decay. Frozen parameters are skipped.
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape(), T(0));
      v_.emplace_back(p.var.shape(), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      Var<T> v = p.var;
      v.zero_grad();
    }
  }

  /// Global L2 norm of the trainable gradients.
  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      if (p.trainable)
        for (T g : p.var.grad().values()) s += double(g) * double(g);
    return std::sqrt(s);
  }

  void step(double lr) {
    ++t_;
    double clip = 1.0;
    if (cfg_.grad_clip > 0.0) {
      const double norm = grad_norm();
      if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_)), bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    const T step_size = T(lr / bc1), denom_scale = T(1.0 / std::sqrt(bc2)), eps = T(cfg_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].trainable) continue;
      Var<T> var = params_[i].var;
      const Tensor<T>& g = var.grad();
      Tensor<T>& w = var.mutable_value();
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T gj = g[j] * T(clip);
        m[j] = b1 * m[j] + (T(1) - b1) * gj;
        v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
        w[j] -= step_size * m[j] / (std::sqrt(v[j]) * denom_scale + eps);
      }
    }
  }

  std::size_t steps_taken() const noexcept { return t_; }

  void store(Checkpoint& ck) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ck.arrays["optim.m." + params_[i].name] = m_[i].template cast<float>();
      ck.arrays["optim.v." + params_[i].name] = v_[i].template cast<float>();
    }
  }

  void restore(const Checkpoint& ck, std::size_t steps_taken) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto m = ck.arrays.find("optim.m." + params_[i].name), v = ck.arrays.find("optim.v." + params_[i].name);
      if (m == ck.arrays.end() || v == ck.arrays.end())
        throw CheckpointError("checkpoint lacks optimizer state for '" + params_[i].name + "'");
      m_[i] = m->second.template cast<T>();
      v_[i] = v->second.template cast<T>();
    }
    t_ = steps_taken;
  }

 private:
  ParamList<T> params_;
  TrainConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

/// One recorded optimization step.
struct StepRecord {
  std::size_t step = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  bool deterministic_log = false;  // wall_ms written as 0 in metrics.csv
  std::filesystem::path resume;   // checkpoint to continue from
  std::size_t stop_after = 0;      // stop early after this many total steps (0: run to cfg.steps)
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> history;  // includes records restored on resume
};

inline std::string format_record(const StepRecord& r, bool with_wall) {
  std::ostringstream os;
  os << r.step << ',' << std::setprecision(17) << r.lr << ',' << r.loss << ','
     << std::fixed << std::setprecision(3) << (with_wall ? r.wall_ms : 0.0);
  return os.str();
}

inline constexpr const char* kMetricsHeader = "step,lr,loss,wall_ms";

/// Reads a metrics CSV written by train().
inline std::vector<StepRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TrainingError("cannot read metrics file " + path.string());
  std::vector<StepRecord> out;
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw TrainingError(path.string() + " lacks the metrics header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    StepRecord r;
    char comma;
    std::istringstream ls(line);
    if (!(ls >> r.step >> comma >> r.lr >> comma >> r.loss >> comma >> r.wall_ms))
      throw TrainingError("malformed metrics row: " + line);
    out.push_back(r);
  }
  return out;
}

/// Batch composition for a step: image indices and patch draw indices.
struct BatchPlan {
  std::vector<std::size_t> images;
  std::vector<std::uint64_t> draws;
};

inline BatchPlan plan_batch(std::uint64_t seed, std::size_t step, std::size_t batch, std::size_t corpus_size) {
  BatchPlan p;
  for (std::size_t i = 0; i < batch; ++i) {
    Rng rng(derive_seed(seed, step, i));
    p.images.push_back(rng.below(corpus_size));
    p.draws.push_back(std::uint64_t(step) * batch + i);
  }
  return p;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> assemble_batch(const std::vector<ImagePair<T>>& corpus, const BatchPlan& plan,
                                               const PatchSpec& spec) {
  std::vector<ImagePair<T>> patches;
  for (std::size_t i = 0; i < plan.images.size(); ++i)
    patches.push_back(sample_patch(corpus[plan.images[i]], spec, plan.draws[i]));
  std::vector<const Tensor<T>*> lr, hr;
  for (const auto& p : patches) {
    lr.push_back(&p.lr);
    hr.push_back(&p.hr);
  }
  return {stack(lr), stack(hr)};
}

namespace detail {

inline std::string batch_diagnostic(std::size_t step, const BatchPlan& plan,
                                    const std::vector<std::string>& ids) {
  std::ostringstream os;
  os << "non-finite loss at step " << step << ", batch images [";
  for (std::size_t i = 0; i < plan.images.size(); ++i)
    os << (i ? ", " : "") << ids[plan.images[i]] << " (draw " << plan.draws[i] << ")";
  os << "]";
  return os.str();
}

}  // namespace detail

/// Archive with model, optimizer state, run config and step counter.
template <typename T>
Checkpoint training_checkpoint(const Model<T>& model, const Adam<T>& optim, const TrainConfig& cfg,
                               std::size_t step) {
  Checkpoint ck = model_checkpoint(model);
  ck.config["train"] = to_json(cfg);
  ck.config["state"] = {{"step", step}};
  optim.store(ck);
  return ck;
}

/// L1 training with Adam and a cosine schedule over cfg.steps steps. The
/// model's parameters are updated in place.
template <typename T>
TrainResult train(Model<T>& model, const std::vector<ImagePair<T>>& corpus, const TrainConfig& cfg,
                  const TrainOptions& opts = {}) {
  cfg.validate();
  if (corpus.empty()) throw TrainingError("training corpus is empty");
  for (const auto& p : corpus)
    if (p.scale != model.config().scale)
      throw TrainingError("image " + p.id + " has scale " + std::to_string(p.scale) + ", model expects " +
                          std::to_string(model.config().scale));

  const ParamList<T> params = model.parameters();
  Adam<T> optim(params, cfg);
  TrainResult result;
  std::size_t start = 0;

  if (!opts.resume.empty()) {
    const Checkpoint ck = load_checkpoint(opts.resume);
    restore_parameters(params, ck);
    if (!ck.config.contains("state")) throw CheckpointError("checkpoint has no training state");
    start = ck.config.at("state").at("step").get<std::size_t>();
    if (start > cfg.steps) throw TrainingError("checkpoint step beyond the configured run length");
    optim.restore(ck, start);
    const auto prior = opts.resume.parent_path() / "metrics.csv";
    if (std::filesystem::exists(prior))
      for (const auto& r : read_metrics(prior))
        if (r.step <= start) result.history.push_back(r);
  }

  std::ofstream metrics;
  auto save = [&](std::size_t step) {
    if (opts.out_dir.empty()) return;
    save_checkpoint(training_checkpoint(model, optim, cfg, step), opts.out_dir / "checkpoint.bin");
  };
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    metrics.open(opts.out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw TrainingError("cannot write metrics in " + opts.out_dir.string());
    metrics << kMetricsHeader << '\n';
    for (const auto& r : result.history) metrics << format_record(r, !opts.deterministic_log) << '\n';
    metrics.flush();
  }

  std::vector<std::string> ids;
  for (const auto& p : corpus) ids.push_back(p.id);
  const PatchSpec spec{cfg.lr_patch, true, true, cfg.seed};
  const std::size_t end = opts.stop_after ? std::min(opts.stop_after, cfg.steps) : cfg.steps;

  for (std::size_t step = start; step < end; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(step, cfg.steps, cfg);
    const BatchPlan plan = plan_batch(cfg.seed, step, cfg.batch, corpus.size());
    auto [lr_batch, hr_batch] = assemble_batch(corpus, plan, spec);

    optim.zero_grad();
    const Var<T> loss = ops::l1_loss(model(Var<T>(std::move(lr_batch))), hr_batch);
    const double value = double(loss.value()[0]);
    if (!std::isfinite(value)) {
      const std::string msg = detail::batch_diagnostic(step + 1, plan, ids);
      if (!opts.out_dir.empty()) std::ofstream(opts.out_dir / "nonfinite_batch.txt") << msg << '\n';
      throw TrainingError(msg);
    }
    backward(loss);
    optim.step(lr);

    StepRecord rec{step + 1, lr, value,
                   std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
    result.history.push_back(rec);
    if (metrics.is_open()) metrics << format_record(rec, !opts.deterministic_log) << '\n' << std::flush;
    if (opts.on_step) opts.on_step(rec);
    if (cfg.checkpoint_every && (step + 1) % cfg.checkpoint_every == 0) save(step + 1);
  }

  const std::size_t done = std::max(start, end);
  save(done);
  result.checkpoint = training_checkpoint(model, optim, cfg, done);
  return result;
}

}  // namespace fiwhn
