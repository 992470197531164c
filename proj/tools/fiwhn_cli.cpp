// fiwhn: data preparation, training, evaluation, single-image SR, profiling
// and ablation runs. Exit codes: 0 success, 1 failed work, 2 usage or
// configuration error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "fiwhn/ablation.hpp"
#include "fiwhn/checkpoint.hpp"
#include "fiwhn/evaluation.hpp"
#include "fiwhn/manifest.hpp"
#include "fiwhn/training.hpp"

namespace fs = std::filesystem;
using namespace fiwhn;

namespace {

constexpr double kReferenceParams = 725e3;
constexpr double kReferenceMultiAdds = 35.6e9;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonFlags {
  std::optional<std::size_t> scale;
  std::optional<std::string> topology;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::string config;
  std::string out;
};

void add_model_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--scale", f.scale, "upscaling factor (2, 3 or 4)");
  cmd->add_option("--topology", f.topology, "ct, tc, parallel or interactive");
  cmd->add_option("--config", f.config, "JSON run config")->check(CLI::ExistingFile);
}

/// Config file first, then command-line overrides.
RunConfig resolve_config(const CommonFlags& f) {
  RunConfig rc = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (f.scale) rc.model.scale = *f.scale;
  if (f.topology) rc.model.topology = parse_topology(*f.topology);
  if (f.seed) rc.train.seed = *f.seed;
  if (f.steps) rc.train.steps = *f.steps;
  rc.model.sync_widths();
  rc.model.validate();
  rc.train.validate();
  return rc;
}

std::string data_root_or_env(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("FIWHN_DATA_ROOT")) return env;
  return {};
}

void report_issues(const std::vector<LoadIssue>& issues) {
  for (const auto& i : issues) std::cerr << "  failed: " << i.path << ": " << i.message << '\n';
}

std::vector<unsigned char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int cmd_prepare(const std::string& root_flag, std::size_t scale, const std::string& out) {
  const std::string root = data_root_or_env(root_flag);
  if (root.empty()) throw UsageError("prepare: no data root (use --data or FIWHN_DATA_ROOT)");
  if (!fs::is_directory(root)) {
    std::cerr << "prepare: data root " << root << " does not exist\n";
    return 1;
  }
  if (scale < 2 || scale > 4) throw ConfigError("scale must be 2, 3 or 4");
  auto manifest = RunManifest::begin("prepare", {{"data", root}, {"scale", scale}}, 0);
  if (!out.empty()) manifest.write(out);

  const fs::path lr_root = lr_dir(root, scale);
  fs::create_directories(lr_root);
  std::size_t written = 0, kept = 0, failed = 0;
  for (const auto& hr_path : corpus_hr_paths(root)) {
    try {
      const auto pair = degrade(read_png<float>(hr_path), scale);
      const fs::path target = lr_root / hr_path.filename();
      const fs::path tmp = lr_root / (hr_path.filename().string() + ".tmp");
      write_png(pair.lr, tmp);
      if (fs::exists(target) && file_bytes(target) == file_bytes(tmp)) {
        fs::remove(tmp);
        ++kept;
      } else {
        fs::rename(tmp, target);
        ++written;
      }
    } catch (const std::exception& e) {
      std::cerr << "  failed: " << hr_path.string() << ": " << e.what() << '\n';
      ++failed;
    }
  }
  std::cout << "prepare: " << written << " written, " << kept << " unchanged, " << failed << " failed in "
            << lr_root.string() << '\n';
  manifest.finished = utc_timestamp();
  manifest.status = failed ? "partial" : "ok";
  manifest.outputs = {lr_root.string()};
  if (!out.empty()) manifest.write(out);
  return failed ? 1 : 0;
}

int cmd_train(const CommonFlags& f, const std::string& data_flag, std::size_t synthetic, const std::string& resume,
              std::size_t stop_after, bool deterministic) {
  const RunConfig rc = resolve_config(f);
  if (f.out.empty()) throw UsageError("train: --out is required");

  std::vector<ImagePair<float>> corpus;
  const std::string root = data_root_or_env(data_flag);
  if (synthetic) {
    corpus = synthetic_corpus<float>(synthetic, 64, rc.model.scale, rc.train.seed);
  } else {
    if (root.empty()) throw UsageError("train: no data (use --data, FIWHN_DATA_ROOT or --synthetic N)");
    auto loaded = load_corpus<float>(root, rc.model.scale);
    report_issues(loaded.issues);
    corpus = std::move(loaded.pairs);
    if (corpus.empty()) {
      std::cerr << "train: no usable images under " << root << '\n';
      return 1;
    }
  }

  auto manifest = RunManifest::begin("train", to_json(rc), rc.train.seed);
  manifest.config["data"] = synthetic ? "synthetic:" + std::to_string(synthetic) : root;
  manifest.write(f.out);

  Model<float> model(rc.model, rc.train.seed);
  TrainOptions opts;
  opts.out_dir = f.out;
  opts.deterministic_log = deterministic;
  opts.resume = resume;
  opts.stop_after = stop_after;
  std::ofstream timing;
  if (deterministic) {
    timing.open(fs::path(f.out) / "timing.csv");
    timing << "step,wall_ms\n";
    opts.on_step = [&](const StepRecord& r) { timing << r.step << ',' << r.wall_ms << '\n'; };
  }
  const auto result = train(model, corpus, rc.train, opts);
  if (!result.history.empty())
    std::cout << "train: " << result.history.size() << " steps, final loss " << result.history.back().loss << '\n';

  manifest.finished = utc_timestamp();
  manifest.status = "ok";
  manifest.outputs = {(fs::path(f.out) / "checkpoint.bin").string(), (fs::path(f.out) / "metrics.csv").string()};
  if (deterministic) manifest.outputs.push_back((fs::path(f.out) / "timing.csv").string());
  manifest.write(f.out);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_flag, const std::string& sr_dir,
             std::optional<std::size_t> sr_scale, const std::string& out) {
  if (out.empty()) throw UsageError("eval: --out is required");
  const std::string root = data_root_or_env(data_flag);
  if (root.empty()) throw UsageError("eval: no dataset (use --data or FIWHN_DATA_ROOT)");
  if (checkpoint.empty() == sr_dir.empty()) throw UsageError("eval: give exactly one of --checkpoint or --sr-dir");

  auto manifest = RunManifest::begin("eval", {{"checkpoint", checkpoint}, {"data", root}, {"sr_dir", sr_dir}}, 0);
  manifest.write(out);

  std::optional<Model<float>> model;
  std::size_t scale = 0;
  if (!checkpoint.empty()) {
    model.emplace(model_from_checkpoint<float>(load_checkpoint(checkpoint)));
    scale = model->config().scale;
  } else {
    if (!sr_scale) throw UsageError("eval: --scale is required with --sr-dir");
    if (*sr_scale < 2 || *sr_scale > 4) throw ConfigError("scale must be 2, 3 or 4");
    scale = *sr_scale;
  }
  auto corpus = load_corpus<float>(root, scale);
  std::vector<ImageScore> scores;
  std::vector<LoadIssue> issues = corpus.issues;
  for (const auto& p : corpus.pairs) {
    try {
      Tensor<float> sr;
      if (model) {
        sr = to_display(super_resolve(*model, p.lr));
      } else {
        sr = read_png<float>(fs::path(sr_dir) / (p.id + ".png"));
      }
      scores.push_back({p.id, psnr_y(sr, p.hr, scale), ssim_y(sr, p.hr, scale)});
    } catch (const std::exception& e) {
      issues.push_back({p.id, e.what()});
    }
  }
  write_scores_csv(scores, fs::path(out) / "scores.csv");
  const MetricReport r = summarize(fs::path(root).filename().string(), scale, scores);
  const nlohmann::json report = {{"dataset", r.dataset},
                                 {"scale", r.scale},
                                 {"psnr_db", std::isinf(r.psnr_db) ? nlohmann::json("inf") : nlohmann::json(r.psnr_db)},
                                 {"ssim", r.ssim},
                                 {"n_images", r.n_images}};
  std::ofstream(fs::path(out) / "report.json") << report.dump(2) << '\n';
  std::cout << "eval " << r.dataset << " x" << r.scale << ": PSNR " << std::fixed << std::setprecision(4) << r.psnr_db
            << " dB, SSIM " << r.ssim << " over " << r.n_images << " images\n";
  report_issues(issues);

  manifest.finished = utc_timestamp();
  manifest.status = issues.empty() ? "ok" : "partial";
  manifest.outputs = {(fs::path(out) / "scores.csv").string(), (fs::path(out) / "report.json").string()};
  manifest.write(out);
  return issues.empty() ? 0 : 1;
}

int cmd_sr(const std::string& checkpoint, const std::string& in, const std::string& out) {
  if (checkpoint.empty() || in.empty() || out.empty()) throw UsageError("sr: --checkpoint, --in and --out are required");
  const Model<float> model = model_from_checkpoint<float>(load_checkpoint(checkpoint));
  const Tensor<float> lr = read_png<float>(in);
  const Tensor<float> sr = super_resolve(model, lr);
  write_png(sr, out);
  std::cout << "sr: " << lr.dim(3) << "x" << lr.dim(2) << " -> " << sr.dim(3) << "x" << sr.dim(2) << " " << out << '\n';
  return 0;
}

int cmd_profile(const CommonFlags& f, std::size_t latency_size, std::size_t runs) {
  const RunConfig rc = resolve_config(f);
  auto manifest = RunManifest::begin("profile", to_json(rc.model), 0);
  if (!f.out.empty()) manifest.write(f.out);

  const Model<float> model(rc.model, 0);
  ProfileOptions opts;
  opts.latency_lr = {latency_size, latency_size};
  opts.runs = runs;
  const ComplexityReport r = profile(model, opts);
  std::cout << std::fixed << std::setprecision(1);
  std::cout << "topology " << topology_name(rc.model.topology) << ", x" << rc.model.scale << '\n';
  std::cout << "params      " << r.params << " (" << human_count(double(r.params)) << ", reference 725K, "
            << std::showpos << 100.0 * (double(r.params) / kReferenceParams - 1.0) << std::noshowpos << "%)\n";
  std::cout << "multi-adds  " << r.multi_adds << " at " << r.out_w << "x" << r.out_h << " output ("
            << human_count(double(r.multi_adds)) << ", reference 35.6G, " << std::showpos
            << 100.0 * (double(r.multi_adds) / kReferenceMultiAdds - 1.0) << std::noshowpos << "%)\n";
  if (latency_size)
    std::cout << "latency     " << std::setprecision(2) << r.ms_per_image << " ms median of " << runs << " runs at "
              << latency_size << "x" << latency_size << " LR input\n";
  if (!f.out.empty()) {
    write_layer_csv(r, fs::path(f.out) / "layers.csv");
    const nlohmann::json j = {{"params", r.params},
                              {"multi_adds", r.multi_adds},
                              {"resolution", {r.out_w, r.out_h}},
                              {"ms_per_image", r.ms_per_image},
                              {"latency_lr", {r.latency_w, r.latency_h}}};
    std::ofstream(fs::path(f.out) / "report.json") << j.dump(2) << '\n';
    manifest.finished = utc_timestamp();
    manifest.status = "ok";
    manifest.outputs = {(fs::path(f.out) / "layers.csv").string(), (fs::path(f.out) / "report.json").string()};
    manifest.write(f.out);
  }
  return 0;
}

int cmd_ablate(const std::string& suite_name_flag, const CommonFlags& f, std::size_t n_seeds) {
  const Suite suite = parse_suite(suite_name_flag);
  if (f.out.empty()) throw UsageError("ablate: --out is required");
  ToyBudget budget;
  if (f.steps) budget.train.steps = *f.steps;
  if (f.seed) budget.data_seed = *f.seed;
  budget.seeds.clear();
  for (std::size_t i = 0; i < n_seeds; ++i) budget.seeds.push_back(i);

  auto manifest = RunManifest::begin("ablate", {{"suite", suite_name_flag}, {"model", to_json(budget.base)}, {"train", to_json(budget.train)}},
                       budget.data_seed);
  manifest.config["seeds"] = budget.seeds;
  manifest.write(f.out);

  const AblationTable table = ablate(suite, budget, [](const std::string& s) { std::cerr << "  " << s << '\n'; });
  {
    std::ofstream csv(fs::path(f.out) / "ablation.csv");
    write_ablation_csv(table, csv);
  }
  const std::string text = format_ablation_table(table);
  std::ofstream(fs::path(f.out) / "ablation.txt") << text;
  std::cout << text;

  manifest.finished = utc_timestamp();
  manifest.status = "ok";
  manifest.outputs = {(fs::path(f.out) / "ablation.csv").string(), (fs::path(f.out) / "ablation.txt").string()};
  manifest.write(f.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FIWHN super-resolution toolkit"};
  app.require_subcommand(1);

  std::string data, checkpoint, in, sr_dir, resume, suite;
  std::size_t prepare_scale = 2, synthetic = 0, stop_after = 0, latency = 48, runs = 20, seeds = 3;
  bool deterministic = false;
  CommonFlags f;

  auto* prepare = app.add_subcommand("prepare", "generate LR_bicubic/X<s> from HR images");
  prepare->add_option("--data", data, "dataset root (default: $FIWHN_DATA_ROOT)");
  prepare->add_option("--scale", prepare_scale, "upscaling factor");
  prepare->add_option("--out", f.out, "directory for the run manifest");

  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_model_flags(train_cmd, f);
  train_cmd->add_option("--seed", f.seed, "run seed");
  train_cmd->add_option("--steps", f.steps, "optimization steps");
  train_cmd->add_option("--out", f.out, "output directory")->required();
  train_cmd->add_option("--data", data, "dataset root (default: $FIWHN_DATA_ROOT)");
  train_cmd->add_option("--synthetic", synthetic, "train on N synthetic 64x64 images instead of a dataset");
  train_cmd->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train_cmd->add_option("--stop-after", stop_after, "stop after this many steps of the schedule (resumable)");
  train_cmd->add_flag("--deterministic", deterministic, "write wall_ms as 0 in metrics.csv (timings go to timing.csv)");

  auto* eval_cmd = app.add_subcommand("eval", "Y-channel PSNR/SSIM on a dataset");
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint");
  eval_cmd->add_option("--sr-dir", sr_dir, "score existing SR images (<id>.png) instead of a model");
  eval_cmd->add_option("--data", data, "dataset root (default: $FIWHN_DATA_ROOT)");
  eval_cmd->add_option("--scale", f.scale, "scale used with --sr-dir");
  eval_cmd->add_option("--out", f.out, "output directory")->required();

  auto* sr_cmd = app.add_subcommand("sr", "super-resolve one PNG");
  sr_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  sr_cmd->add_option("--in", in, "input PNG")->required();
  sr_cmd->add_option("--out", f.out, "output PNG")->required();

  auto* profile_cmd = app.add_subcommand("profile", "parameter, multi-add and latency report");
  add_model_flags(profile_cmd, f);
  profile_cmd->add_option("--out", f.out, "directory for report.json and layers.csv");
  profile_cmd->add_option("--latency-size", latency, "LR side length of the timed passes (0 skips timing)");
  profile_cmd->add_option("--runs", runs, "timed passes");

  auto* ablate_cmd = app.add_subcommand("ablate", "toy-scale ablation suite");
  ablate_cmd->add_option("--suite", suite, "topology, wide_width, wdib_parts or wdib_count")->required();
  ablate_cmd->add_option("--out", f.out, "output directory")->required();
  ablate_cmd->add_option("--steps", f.steps, "training steps per variant");
  ablate_cmd->add_option("--seed", f.seed, "data seed");
  ablate_cmd->add_option("--seeds", seeds, "number of model seeds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*prepare) return cmd_prepare(data, prepare_scale, f.out);
    if (*train_cmd) return cmd_train(f, data, synthetic, resume, stop_after, deterministic);
    if (*eval_cmd) return cmd_eval(checkpoint, data, sr_dir, f.scale, f.out);
    if (*sr_cmd) return cmd_sr(checkpoint, in, f.out);
    if (*profile_cmd) return cmd_profile(f, latency, runs);
    if (*ablate_cmd) return cmd_ablate(suite, f, seeds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
