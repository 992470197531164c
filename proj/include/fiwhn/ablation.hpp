#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fiwhn/evaluation.hpp"
#include "fiwhn/training.hpp"

namespace fiwhn {

enum class Suite { topology, wide_width, wdib_parts, wdib_count };

inline Suite parse_suite(std::string_view s) {
  if (s == "topology") return Suite::topology;
  if (s == "wide_width") return Suite::wide_width;
  if (s == "wdib_parts") return Suite::wdib_parts;
  if (s == "wdib_count") return Suite::wdib_count;
  throw ConfigError("unknown ablation suite '" + std::string(s) + "' (topology, wide_width, wdib_parts, wdib_count)");
}

inline std::string_view suite_name(Suite s) {
  switch (s) {
    case Suite::topology: return "topology";
    case Suite::wide_width: return "wide_width";
    case Suite::wdib_parts: return "wdib_parts";
    case Suite::wdib_count: return "wdib_count";
  }
  return "?";
}

/// Shared training and data budget for every variant of a suite.
struct ToyBudget {
  FIWHNConfig base = [] {
    FIWHNConfig c;
    c.scale = 2;
    c.cnn_channels = 16;
    c.t_dim = 32;
    c.wdibs_per_fswg = 2;
    c.et_blocks = 1;
    c.wdib.wide_channels = 48;
    c.sync_widths();
    return c;
  }();
  TrainConfig train = [] {
    TrainConfig t;
    t.steps = 200;
    t.batch = 4;
    t.lr_patch = 16;
    return t;
  }();
  std::size_t n_train = 8, n_test = 4, hr_size = 64;
  double max_cycles = 0.2;
  std::uint64_t data_seed = 11;
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct Variant {
  std::string name;
  FIWHNConfig config;
};

inline std::vector<Variant> suite_variants(Suite suite, const FIWHNConfig& base) {
  std::vector<Variant> out;
  auto with = [&](std::string name, auto edit) {
    FIWHNConfig c = base;
    edit(c);
    c.sync_widths();
    out.push_back({std::move(name), c});
  };
  switch (suite) {
    case Suite::topology:
      for (Topology t : {Topology::ct_series, Topology::tc_series, Topology::parallel, Topology::interactive})
        with(std::string(topology_name(t)), [t](FIWHNConfig& c) { c.topology = t; });
      break;
    case Suite::wide_width: {
      // Widths keep the 64/32 and 120/32 ratios at the toy base width.
      const std::size_t c0 = base.cnn_channels;
      with("plain_residual", [](FIWHNConfig& c) { c.wdib.wide_activation = false; });
      with("wide_" + std::to_string(2 * c0), [c0](FIWHNConfig& c) { c.wdib.wide_channels = 2 * c0; });
      with("wide_" + std::to_string(c0 * 120 / 32), [c0](FIWHNConfig& c) { c.wdib.wide_channels = c0 * 120 / 32; });
      break;
    }
    case Suite::wdib_parts: {
      auto parts = [](bool wrdc, bool scf, bool bi, bool mult) {
        return [=](FIWHNConfig& c) {
          c.wdib.use_wrdc = wrdc;
          c.wdib.use_scf = scf;
          c.wdib.use_interaction = bi;
          c.wdib.adaptive_multipliers = mult;
        };
      };
      with("none", parts(false, false, false, false));
      with("wrdc", parts(true, false, false, false));
      with("scf", parts(false, true, false, false));
      with("bi", parts(false, false, true, false));
      with("multipliers", parts(false, false, false, true));
      with("all", parts(true, true, true, true));
      break;
    }
    case Suite::wdib_count:
      for (std::size_t k : {2, 3, 4}) with("wdibs_" + std::to_string(k), [k](FIWHNConfig& c) { c.wdibs_per_fswg = k; });
      break;
  }
  return out;
}

struct AblationRow {
  std::string variant;
  std::uint64_t params = 0;
  std::uint64_t multi_adds = 0;  // at 1280x720 output
  std::vector<double> psnr, ssim;  // per seed
  double psnr_mean = 0, psnr_sd = 0, ssim_mean = 0, ssim_sd = 0;
};

struct AblationTable {
  Suite suite = Suite::topology;
  double bicubic_psnr = 0.0, bicubic_ssim = 0.0;
  std::vector<AblationRow> rows;  // ranked by mean PSNR, best first
};

/// Sample mean and standard deviation (n - 1 denominator).
inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= double(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / double(v.size() - 1))};
}

/// Trains every variant of `suite` under the same budget and scores it on
/// a held-out synthetic set.
inline AblationTable ablate(Suite suite, const ToyBudget& budget,
                            const std::function<void(const std::string&)>& log = {}) {
  const auto train_set = synthetic_corpus<float>(budget.n_train, budget.hr_size, budget.base.scale, budget.data_seed,
                                                 budget.max_cycles);
  const auto test_set = synthetic_corpus<float>(budget.n_test, budget.hr_size, budget.base.scale,
                                                derive_seed(budget.data_seed, 0xE7A1), budget.max_cycles);
  AblationTable table;
  table.suite = suite;
  const MetricReport bic = summarize("synthetic", budget.base.scale, score_bicubic(test_set));
  table.bicubic_psnr = bic.psnr_db;
  table.bicubic_ssim = bic.ssim;

  for (const auto& v : suite_variants(suite, budget.base)) {
    AblationRow row;
    row.variant = v.name;
    for (std::uint64_t seed : budget.seeds) {
      Model<float> model(v.config, seed);
      if (row.psnr.empty()) {
        const auto rep = profile(model);
        row.params = rep.params;
        row.multi_adds = rep.multi_adds;
      }
      TrainConfig tc = budget.train;
      tc.seed = seed;
      train(model, train_set, tc);
      const MetricReport r = summarize("synthetic", v.config.scale, score_model(model, test_set));
      row.psnr.push_back(r.psnr_db);
      row.ssim.push_back(r.ssim);
      if (log) {
        std::ostringstream os;
        os << v.name << " seed " << seed << ": " << std::fixed << std::setprecision(3) << r.psnr_db << " dB";
        log(os.str());
      }
    }
    std::tie(row.psnr_mean, row.psnr_sd) = mean_sd(row.psnr);
    std::tie(row.ssim_mean, row.ssim_sd) = mean_sd(row.ssim);
    table.rows.push_back(std::move(row));
  }
  std::stable_sort(table.rows.begin(), table.rows.end(),
                   [](const AblationRow& a, const AblationRow& b) { return a.psnr_mean > b.psnr_mean; });
  return table;
}

inline const AblationRow& find_row(const AblationTable& t, const std::string& variant) {
  for (const auto& r : t.rows)
    if (r.variant == variant) return r;
  throw ConfigError("no ablation row named " + variant);
}

inline void write_ablation_csv(const AblationTable& t, std::ostream& os) {
  os << "rank,variant,params,multi_adds,psnr_mean,psnr_sd,ssim_mean,ssim_sd\n";
  os << std::setprecision(10);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    os << i + 1 << ',' << r.variant << ',' << r.params << ',' << r.multi_adds << ',' << r.psnr_mean << ','
       << r.psnr_sd << ',' << r.ssim_mean << ',' << r.ssim_sd << '\n';
  }
}

inline std::string format_ablation_table(const AblationTable& t) {
  std::size_t name_w = 7;
  for (const auto& r : t.rows) name_w = std::max(name_w, r.variant.size());
  std::ostringstream os;
  os << std::left << std::setw(int(name_w)) << "variant" << std::right << std::setw(10) << "params" << std::setw(12)
     << "multi-adds" << std::setw(20) << "PSNR (dB)" << std::setw(20) << "SSIM" << '\n';
  os << std::string(name_w + 62, '-') << '\n';
  for (const auto& r : t.rows) {
    std::ostringstream p, s;
    p << std::fixed << std::setprecision(3) << r.psnr_mean << " +- " << r.psnr_sd;
    s << std::fixed << std::setprecision(4) << r.ssim_mean << " +- " << r.ssim_sd;
    os << std::left << std::setw(int(name_w)) << r.variant << std::right << std::setw(10) << human_count(double(r.params))
       << std::setw(12) << human_count(double(r.multi_adds)) << std::setw(20) << p.str() << std::setw(20) << s.str()
       << '\n';
  }
  std::ostringstream b;
  b << std::fixed << std::setprecision(3) << t.bicubic_psnr << " dB / " << std::setprecision(4) << t.bicubic_ssim;
  os << "bicubic reference: " << b.str() << '\n';
  return os.str();
}

}  // namespace fiwhn
