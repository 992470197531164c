#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "fiwhn/training.hpp"

using namespace fiwhn;
namespace fs = std::filesystem;

namespace {

FIWHNConfig toy_model() {
  FIWHNConfig c;
  c.scale = 2;
  c.cnn_channels = 8;
  c.t_dim = 16;
  c.n_fswg = 2;
  c.wdibs_per_fswg = 1;
  c.et_blocks = 1;
  c.wdib.wide_channels = 16;
  c.sync_widths();
  return c;
}

TrainConfig toy_train(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch = 2;
  t.lr_patch = 8;
  t.seed = 3;
  return t;
}

std::vector<ImagePair<float>> toy_corpus() { return synthetic_corpus<float>(4, 32, 2, 17); }

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("fiwhn_test_training_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<double> losses(const std::vector<StepRecord>& h) {
  std::vector<double> out;
  for (const auto& r : h) out.push_back(r.loss);
  return out;
}

}  // namespace

// ---- loss ---------------------------------------------------------------

TEST(L1Loss, ExamplesAndBruteForce) {
  Rng rng(1);
  Tensor<float> a(Shape{2, 3, 4, 5});
  for (auto& v : a.values()) v = float(rng.uniform());
  EXPECT_EQ(ops::l1_loss(Var<float>(a), a).value()[0], 0.0f);

  Tensor<float> b = a;
  for (auto& v : b.values()) v += 0.1f;
  EXPECT_NEAR(ops::l1_loss(Var<float>(a), b).value()[0], 0.1, 1e-6);

  for (auto& v : b.values()) v = float(rng.uniform());
  double brute = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) brute += std::abs(double(a[i]) - double(b[i]));
  brute /= double(a.size());
  EXPECT_NEAR(ops::l1_loss(Var<float>(a), b).value()[0], brute, 1e-7);
}

TEST(L1Loss, GradientIsSignOverCount) {
  Var<double> p(Tensor<double>(Shape{1, 4}, std::vector<double>{1.0, -1.0, 0.5, 2.0}), true);
  const Tensor<double> target(Shape{1, 4}, std::vector<double>{0.0, 0.0, 0.5, 3.0});
  backward(ops::l1_loss(p, target));
  EXPECT_EQ(p.grad()[0], 0.25);
  EXPECT_EQ(p.grad()[1], -0.25);
  EXPECT_EQ(p.grad()[2], 0.0);
  EXPECT_EQ(p.grad()[3], -0.25);
  EXPECT_THROW(ops::l1_loss(p, Tensor<double>(Shape{1, 3})), ShapeError);
}

// ---- schedule -----------------------------------------------------------

TEST(CosineSchedule, EndpointsAndMidpoint) {
  const TrainConfig cfg;
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, cfg), 5e-4);
  EXPECT_DOUBLE_EQ(cosine_lr(100, 100, cfg), 6.25e-6);
  EXPECT_NEAR(cosine_lr(50, 100, cfg), 2.53125e-4, 1e-15);
  for (std::size_t s = 1; s <= 100; ++s) EXPECT_LT(cosine_lr(s, 100, cfg), cosine_lr(s - 1, 100, cfg));
  EXPECT_THROW(cosine_lr(0, 0, cfg), ConfigError);
  EXPECT_THROW(cosine_lr(101, 100, cfg), ConfigError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lr_min = 1e-3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

// ---- optimizer ----------------------------------------------------------

TEST(Adam, MatchesHandComputedSteps) {
  Var<double> w(Tensor<double>::scalar(1.0), true);
  TrainConfig cfg;
  Adam<double> opt({{"w", w, true}}, cfg);
  const double g[2] = {0.5, -0.25};
  double m = 0, v = 0, expect = 1.0;
  for (int t = 1; t <= 2; ++t) {
    opt.zero_grad();
    backward(ops::weighted_sum(w, Tensor<double>::scalar(g[t - 1])));
    opt.step(1e-2);
    m = 0.9 * m + 0.1 * g[t - 1];
    v = 0.999 * v + 0.001 * g[t - 1] * g[t - 1];
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    expect -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(w.value()[0], expect, 1e-12) << "step " << t;
  }
  EXPECT_EQ(opt.steps_taken(), 2u);
}

TEST(Adam, FrozenParametersAreSkipped) {
  Var<double> a(Tensor<double>::scalar(1.0), true), b(Tensor<double>::scalar(1.0), true);
  Adam<double> opt({{"a", a, true}, {"b", b, false}}, TrainConfig{});
  backward(ops::add(ops::weighted_sum(a, Tensor<double>::scalar(1.0)), ops::weighted_sum(b, Tensor<double>::scalar(1.0))));
  opt.step(0.1);
  EXPECT_LT(a.value()[0], 1.0);
  EXPECT_EQ(b.value()[0], 1.0);
}

TEST(Adam, ClipsGlobalNorm) {
  Var<double> a(Tensor<double>(Shape{2}, std::vector<double>{0.0, 0.0}), true);
  TrainConfig cfg;
  cfg.grad_clip = 1.0;
  Adam<double> opt({{"a", a, true}}, cfg);
  backward(ops::weighted_sum(a, Tensor<double>(Shape{2}, std::vector<double>{3.0, 4.0})));
  EXPECT_DOUBLE_EQ(opt.grad_norm(), 5.0);
  opt.step(0.1);
  // First Adam step moves each coordinate by ~lr regardless of scale.
  EXPECT_NEAR(a.value()[0], -0.1, 1e-6);
  EXPECT_NEAR(a.value()[1], -0.1, 1e-6);
}

// ---- batches ------------------------------------------------------------

TEST(BatchPlan, DeterministicAndInRange) {
  const auto a = plan_batch(5, 7, 16, 3), b = plan_batch(5, 7, 16, 3), c = plan_batch(5, 8, 16, 3);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.draws, b.draws);
  EXPECT_NE(a.draws, c.draws);
  for (std::size_t i : a.images) EXPECT_LT(i, 3u);
  EXPECT_EQ(a.draws.front(), 7u * 16u);
}

TEST(BatchPlan, AssemblesAlignedBatch) {
  const auto corpus = toy_corpus();
  const auto plan = plan_batch(1, 0, 3, corpus.size());
  const auto [lr, hr] = assemble_batch(corpus, plan, PatchSpec{8, true, true, 1});
  EXPECT_EQ(lr.shape(), (Shape{3, 3, 8, 8}));
  EXPECT_EQ(hr.shape(), (Shape{3, 3, 16, 16}));
}

// ---- training loop ------------------------------------------------------

TEST(Train, ZeroStepsLeavesWeightsUnchanged) {
  Model<float> m(toy_model(), 4);
  const Model<float> ref(toy_model(), 4);
  const auto r = train(m, toy_corpus(), toy_train(0));
  EXPECT_TRUE(r.history.empty());
  const auto a = m.parameters(), b = ref.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(max_abs_diff(a[i].var.value(), b[i].var.value()), 0.0f) << a[i].name;
}

TEST(Train, LossSequenceIsBitwiseReproducible) {
  Model<float> m1(toy_model(), 5), m2(toy_model(), 5);
  const auto r1 = train(m1, toy_corpus(), toy_train(6));
  const auto r2 = train(m2, toy_corpus(), toy_train(6));
  ASSERT_EQ(r1.history.size(), 6u);
  EXPECT_EQ(losses(r1.history), losses(r2.history));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(r1.history[i].step, i + 1);
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  const auto dir = temp_dir("resume");
  Model<float> full(toy_model(), 6);
  const auto reference = train(full, toy_corpus(), toy_train(6));

  Model<float> first(toy_model(), 6);
  TrainOptions part;
  part.out_dir = dir / "a";
  part.stop_after = 3;
  train(first, toy_corpus(), toy_train(6), part);
  ASSERT_TRUE(fs::exists(dir / "a" / "checkpoint.bin"));
  EXPECT_EQ(read_metrics(dir / "a" / "metrics.csv").size(), 3u);

  Model<float> second(toy_model(), 99);
  TrainOptions cont;
  cont.out_dir = dir / "b";
  cont.resume = dir / "a" / "checkpoint.bin";
  const auto resumed = train(second, toy_corpus(), toy_train(6), cont);
  EXPECT_EQ(losses(resumed.history), losses(reference.history));
  EXPECT_EQ(read_metrics(dir / "b" / "metrics.csv").size(), 6u);
  const auto a = full.parameters(), b = second.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(max_abs_diff(a[i].var.value(), b[i].var.value()), 0.0f) << a[i].name;
}

TEST(Train, DeterministicLogZeroesWallTime) {
  const auto dir = temp_dir("metrics");
  Model<float> m(toy_model(), 7);
  TrainOptions o;
  o.out_dir = dir;
  o.deterministic_log = true;
  train(m, toy_corpus(), toy_train(2), o);
  std::ifstream in(dir / "metrics.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, kMetricsHeader);
  const auto rows = read_metrics(dir / "metrics.csv");
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) EXPECT_EQ(r.wall_ms, 0.0);
  EXPECT_DOUBLE_EQ(rows[0].lr, 5e-4);
}

TEST(Train, LossDecreasesOnToyData) {
  Model<float> m(toy_model(), 8);
  TrainConfig cfg = toy_train(40);
  cfg.batch = 4;
  const auto h = train(m, toy_corpus(), cfg).history;
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    head += h[i].loss;
    tail += h[h.size() - 1 - i].loss;
  }
  EXPECT_LT(tail, 0.5 * head);
}

TEST(Train, EveryMultiplierReceivesGradient) {
  Model<double> m(toy_model(), 9);
  const auto corpus = synthetic_corpus<double>(2, 16, 2, 3);
  const auto [lr, hr] = assemble_batch(corpus, plan_batch(0, 0, 2, 2), PatchSpec{8, true, true, 0});
  backward(ops::l1_loss(m(Var<double>(lr)), hr));
  std::size_t seen = 0;
  for (const auto& p : m.parameters()) {
    if (p.name.find("lambda_") == std::string::npos) continue;
    ++seen;
    EXPECT_NE(p.var.grad()[0], 0.0) << p.name;
  }
  // Two per FSWG, four per WDIB.
  EXPECT_EQ(seen, 2u * (2 + 1 * 4));
}

TEST(Train, FrozenMultipliersStayAtOne) {
  FIWHNConfig c = toy_model();
  c.wdib.adaptive_multipliers = false;
  Model<float> m(c, 10);
  train(m, toy_corpus(), toy_train(3));
  for (const auto& p : m.parameters())
    if (p.name.find("lambda_") != std::string::npos) {
      EXPECT_FALSE(p.trainable);
      EXPECT_EQ(p.var.value()[0], 1.0f) << p.name;
    }
}

TEST(Train, NonFiniteLossIsReported) {
  const auto dir = temp_dir("nonfinite");
  auto corpus = toy_corpus();
  for (auto& p : corpus)
    for (auto& v : p.lr.values()) v = std::numeric_limits<float>::quiet_NaN();
  Model<float> m(toy_model(), 11);
  TrainOptions o;
  o.out_dir = dir;
  try {
    train(m, corpus, toy_train(3), o);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("synthetic_"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(fs::exists(dir / "nonfinite_batch.txt"));
}

TEST(Train, RejectsBadInputs) {
  Model<float> m(toy_model(), 12);
  EXPECT_THROW(train(m, {}, toy_train(1)), TrainingError);
  EXPECT_THROW(train(m, synthetic_corpus<float>(1, 24, 3, 0), toy_train(1)), TrainingError);
  TrainConfig bad = toy_train(1);
  bad.lr_patch = 0;
  EXPECT_THROW(train(m, toy_corpus(), bad), ConfigError);
}
