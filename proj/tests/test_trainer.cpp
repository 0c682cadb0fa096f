#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "shmfm/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

using namespace shmfm;
namespace fs = std::filesystem;

namespace {

std::vector<SpectrogramWindow> random_windows(std::size_t n, std::uint64_t seed, bool with_targets = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal;
  std::vector<SpectrogramWindow> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].image.resize(kImageSide, kImageSide);
    // A smooth image per window plus noise, with a per-window level the regressor can pick up.
    const float level = static_cast<float>(i % 5);
    for (Index r = 0; r < kImageSide; ++r)
      for (Index c = 0; c < kImageSide; ++c)
        out[i].image(r, c) = std::sin(0.1f * static_cast<float>(c) * (1.0f + 0.2f * level)) + 0.3f * normal(rng);
    if (with_targets) out[i].target = level;
  }
  return out;
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "shmfm_test_trainer";
  fs::create_directories(dir);
  return dir / name;
}

TrainPlan tiny_plan(Phase phase) {
  TrainPlan p;
  p.phase = phase;
  p.base_lr = 1e-3;
  p.epochs = 2;
  p.batch_size = 4;
  p.warmup_epochs = 0;
  p.seed = 9;
  return p;
}

}  // namespace

TEST_CASE("phase defaults") {
  const TrainPlan pre = TrainPlan::pretrain_defaults();
  CHECK(pre.base_lr == 2.5e-4);
  CHECK(pre.epochs == 200);
  CHECK(pre.batch_size == 128);
  CHECK(pre.warmup_epochs == 100);
  CHECK(pre.mask_ratio == 0.8);
  const TrainPlan ad = TrainPlan::finetune_ad_defaults();
  CHECK(ad.base_lr == 2.5e-3);
  CHECK(ad.epochs == 400);
  CHECK(ad.batch_size == 64);
  CHECK(ad.weight_decay == 0.05);
  const TrainPlan tle = TrainPlan::finetune_tle_defaults();
  CHECK(tle.base_lr == 2.5e-6);
  CHECK(tle.epochs == 500);
  CHECK(tle.batch_size == 8);
  const TrainPlan big = TrainPlan::finetune_tle_large_defaults();
  CHECK(big.epochs == 200);
  CHECK(big.batch_size == 128);
  CHECK(big.weight_decay == 0.05);
  CHECK(parse_phase("finetune_kd") == Phase::finetune_kd);
  CHECK_THROWS_AS(parse_phase("warmup"), ConfigError);
  TrainPlan bad = pre;
  bad.warmup_epochs = 300;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(pre.hash() == TrainPlan::pretrain_defaults().hash());
  CHECK(pre.hash() != ad.hash());
}

TEST_CASE("learning-rate schedule") {
  const TrainPlan p = TrainPlan::pretrain_defaults();
  CHECK(lr_at(p, 0) == 0.0);
  CHECK(lr_at(p, 100) == 2.5e-4);
  CHECK(lr_at(p, 50) == doctest::Approx(1.25e-4).epsilon(1e-14));
  for (int e = 100; e < 200; ++e) {
    const double closed = 2.5e-4 * 0.5 * (1.0 + std::cos(std::numbers::pi * (e - 100) / 100.0));
    CHECK(std::abs(lr_at(p, e) - closed) <= 1e-12);
    if (e > 100) CHECK(lr_at(p, e) <= lr_at(p, e - 1));
  }
  // Continuity at the warmup boundary: last warmup step is one increment below base_lr.
  CHECK(lr_at(p, 100) - lr_at(p, 99) == doctest::Approx(2.5e-6).epsilon(1e-12));
  CHECK_THROWS_AS(lr_at(p, 200), ConfigError);
  CHECK_THROWS_AS(lr_at(p, -1), ConfigError);
  const TrainPlan ad = TrainPlan::finetune_ad_defaults();
  CHECK(lr_at(ad, 0) == 2.5e-3);
}

TEST_CASE("AdamW single step matches a hand-rolled update") {
  ParamLayout layout;
  layout.add("w", 1, 3, true);
  layout.add("b", 1, 2, false);
  Vector<double> p(5), g(5);
  p << 0.5, -1.0, 2.0, 0.1, -0.3;
  g << 0.2, -0.4, 1e-3, 3.0, -0.05;
  AdamWConfig cfg;
  AdamW<double> opt(layout, cfg);
  Vector<double> expected = p;
  const double lr = 1e-2, wd = 0.05;
  for (int step = 1; step <= 2; ++step) {
    opt.step(p, g, lr, wd);
  }
  // Oracle: two identical-gradient steps.
  Vector<double> m = Vector<double>::Zero(5), v = Vector<double>::Zero(5);
  for (int t = 1; t <= 2; ++t) {
    for (int i = 0; i < 5; ++i) {
      if (i < 3) expected(i) -= lr * wd * expected(i);
      m(i) = 0.9 * m(i) + 0.1 * g(i);
      v(i) = 0.95 * v(i) + 0.05 * g(i) * g(i);
      const double mh = m(i) / (1.0 - std::pow(0.9, t));
      const double vh = v(i) / (1.0 - std::pow(0.95, t));
      expected(i) -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 5; ++i) CHECK(p(i) == doctest::Approx(expected(i)).epsilon(1e-14));

  // Without decay, scaling the gradient leaves the first step unchanged up to eps/sqrt(v).
  Vector<double> a(5), b(5);
  a << 1, 2, 3, 4, 5;
  b = a;
  AdamW<double> o1(layout), o2(layout);
  o1.step(a, g, lr, 0.0);
  o2.step(b, g * 1000.0, lr, 0.0);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("gradient clipping") {
  Vector<double> g(3);
  g << 0.1, 0.2, 0.2;
  const Vector<double> keep = g;
  CHECK(clip_gradients(g, 1.0) == doctest::Approx(0.3));
  CHECK(g == keep);

  Vector<double> big(2);
  big << 6.0, 8.0;
  const Vector<double> dir = big;
  CHECK(clip_gradients(big, 1.0) == doctest::Approx(10.0));
  CHECK(big.norm() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(big.dot(dir) / (big.norm() * dir.norm()) == doctest::Approx(1.0).epsilon(1e-12));

  Vector<double> bad(2);
  bad << 1.0, std::nan("");
  CHECK_THROWS_AS(clip_gradients(bad, 1.0), TrainingError);
  CHECK_THROWS_AS(clip_gradients(g, 0.0), ConfigError);
}

TEST_CASE("KD loss arithmetic") {
  KDConfig kd;
  const std::vector<double> ys1{2.0}, yt1{2.0}, y1{0.0};
  CHECK(std::abs(kd_loss(ys1, yt1, y1, kd) - 1.0) <= 1e-12);
  const std::vector<double> same{1.5, 2.5};
  CHECK(kd_loss(same, same, same, kd) == 0.0);
  const std::vector<double> ys{1.0, 3.0}, yt{2.0, 1.0}, y{0.0, 3.0};
  const double expected = 0.5 * 0.5 + 0.5 * std::sqrt(2.5);
  CHECK(std::abs(kd_loss(ys, yt, y, kd) - expected) <= 1e-12);
  CHECK(kd_loss(ys, yt, y, kd) == doctest::Approx(1.0406).epsilon(1e-4));
  CHECK_THROWS_AS((KDConfig{0.7, 0.7}.validate()), ConfigError);
}

TEST_CASE("pretraining is reproducible and reduces the loss") {
  const auto data = random_windows(8, 1);
  auto a = make_mae<float>(ModelConfig::family(24, 16), 3);
  auto b = a;
  TrainPlan plan = tiny_plan(Phase::pretrain);
  plan.epochs = 5;
  plan.batch_size = 2;
  const TrainLog la = pretrain(a, data, plan);
  const TrainLog lb = pretrain(b, data, plan);
  REQUIRE(la.step_losses.size() == 20);
  CHECK(la.step_losses == lb.step_losses);
  CHECK(a.params == b.params);
  CHECK(la.epochs.size() == 5);
  for (std::size_t e = 0; e < la.epochs.size(); ++e) {
    CHECK(la.epochs[e].epoch == static_cast<int>(e));
    CHECK(la.epochs[e].lr == lr_at(plan, static_cast<int>(e)));
  }

  auto c = make_mae<float>(ModelConfig::family(24, 16), 3);
  TrainPlan other = plan;
  other.seed = 10;
  CHECK(pretrain(c, data, other).step_losses != la.step_losses);

  // Fixed worker count: two identical threaded runs agree bitwise.
  auto t1 = make_mae<float>(ModelConfig::family(24, 16), 3);
  auto t2 = t1;
  TrainPlan threaded = plan;
  threaded.threads = 2;
  threaded.batch_size = 4;
  CHECK(pretrain(t1, data, threaded).step_losses == pretrain(t2, data, threaded).step_losses);
  CHECK(t1.params == t2.params);

  CHECK_THROWS_AS(pretrain(c, std::span<const SpectrogramWindow>{}, plan), DataError);
}

TEST_CASE("anomaly fine-tuning rejects anomalous windows") {
  auto data = random_windows(4, 2);
  auto m = make_mae<float>(ModelConfig::family(24, 16), 4);
  const Index before = m.size();
  TrainPlan plan = tiny_plan(Phase::finetune_ad);
  plan.epochs = 1;
  CHECK_NOTHROW(finetune_ad(m, data, plan));
  CHECK(m.size() == before);
  CHECK(m.has_decoder());
  data[2].tag = WindowTag::anomaly;
  CHECK_THROWS_AS(finetune_ad(m, data, plan), DataError);
}

TEST_CASE("divergence aborts with a diagnostic") {
  auto data = random_windows(4, 3);
  data[1].image(0, 0) = std::numeric_limits<float>::infinity();
  auto m = make_mae<float>(ModelConfig::family(24, 16), 5);
  TrainPlan plan = tiny_plan(Phase::pretrain);
  CHECK_THROWS_AS(pretrain(m, data, plan), TrainingError);
}

TEST_CASE("traffic fine-tuning") {
  const auto data = random_windows(20, 4, true);
  auto m = attach_regression_head(make_mae<float>(ModelConfig::family(24, 16), 6), mean_target(data), 7);
  TrainPlan plan = tiny_plan(Phase::finetune_tle);
  plan.epochs = 30;
  plan.base_lr = 3e-3;
  const TrainLog log = finetune_tle(m, data, plan);
  CHECK(log.epochs.back().loss < 0.5 * log.epochs.front().loss);

  auto unlabeled = random_windows(4, 5);
  CHECK_THROWS_AS(finetune_tle(m, unlabeled, plan), DataError);
  auto no_head = make_mae<float>(ModelConfig::family(24, 16), 6);
  CHECK_THROWS_AS(finetune_tle(no_head, data, plan), ModeError);
}

TEST_CASE("distillation") {
  const auto data = random_windows(12, 6, true);
  const auto teacher = attach_regression_head(make_mae<float>(ModelConfig::family(48, 32), 8), 2.0, 9);
  const auto teacher_before = predict(teacher, data);
  const auto start = attach_regression_head(make_mae<float>(ModelConfig::family(24, 16), 10), 2.0, 11);
  TrainPlan plan = tiny_plan(Phase::finetune_kd);
  plan.epochs = 3;

  auto student = start;
  finetune_kd(student, teacher, data, plan, KDConfig{});
  CHECK(predict(teacher, data) == teacher_before);
  CHECK(student.params != start.params);

  // alpha_kd = 0 is plain MAE fine-tuning, step for step.
  auto kd_only_task = start;
  auto mae_run = start;
  const TrainLog a = finetune_kd(kd_only_task, teacher, data, plan, KDConfig{1.0, 0.0});
  TrainPlan mae_plan = plan;
  mae_plan.phase = Phase::finetune_tle;
  mae_plan.loss = SupervisedLoss::mae;
  const TrainLog b = finetune_tle(mae_run, data, mae_plan);
  CHECK(a.step_losses == b.step_losses);
  CHECK(kd_only_task.params == mae_run.params);

  const auto headless = make_mae<float>(ModelConfig::family(48, 32), 8);
  auto s2 = start;
  CHECK_THROWS_AS(finetune_kd(s2, headless, data, plan, KDConfig{}), ConfigError);
}

TEST_CASE("reconstruction errors use per-window seeds") {
  const auto data = random_windows(5, 7);
  const auto m = make_mae<float>(ModelConfig::family(24, 16), 12);
  const auto e = reconstruction_errors(m, data, 77);
  const auto tail = reconstruction_errors(m, std::span(data).subspan(2), 77, 2);
  CHECK(e[2] == tail[0]);
  CHECK(e[4] == tail[2]);
  CHECK(e[3] == static_cast<double>(reconstruction_error(m, data[3].image, 77ULL ^ 3ULL)));
}

TEST_CASE("checkpoint round trip") {
  for (const auto& [e, d] : std::vector<std::pair<Index, Index>>{{24, 16}, {48, 32}}) {
    const auto m = make_mae<float>(ModelConfig::family(e, d), 13);
    const fs::path p = temp_path("ck_" + std::to_string(e) + ".maec");
    save_checkpoint(m, p, 0xabcdefULL);
    const Checkpoint ck = load_checkpoint(p);
    CHECK(ck.model.config == m.config);
    CHECK(ck.model.params == m.params);
    CHECK(ck.model.has_decoder());
    CHECK(ck.provenance == 0xabcdefULL);
    CHECK(ck.adam.beta2 == 0.95);
    if (e == 48) {
      MESSAGE("(48,32) checkpoint: ", fs::file_size(p), " bytes");
      CHECK(fs::file_size(p) < 700000);
    }
  }
  const auto reg = attach_regression_head(make_mae<float>(ModelConfig::family(24, 16), 14), 1.5, 15);
  const fs::path rp = temp_path("reg.maec");
  save_checkpoint(reg, rp);
  const Checkpoint rck = load_checkpoint(rp);
  CHECK(rck.model.has_reg_head());
  CHECK_FALSE(rck.model.has_decoder());
  CHECK(rck.model.params == reg.params);
}

TEST_CASE("checkpoint corruption is detected") {
  const auto m = make_mae<float>(ModelConfig::family(24, 16), 16);
  const fs::path p = temp_path("corrupt.maec");
  save_checkpoint(m, p);
  std::string bytes;
  {
    std::ifstream in(p, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << content;
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  write(bad_magic);
  CHECK_THROWS_AS(load_checkpoint(p), FormatError);

  write(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(p), FormatError);

  std::string bad_version = bytes;
  bad_version[4] = 9;
  write(bad_version);
  CHECK_THROWS_AS(load_checkpoint(p), FormatError);

  write(bytes + "extra");
  CHECK_THROWS_AS(load_checkpoint(p), FormatError);

  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.maec")), Error);
}

TEST_CASE("train log csv") {
  TrainLog log;
  log.epochs.push_back({0, 1e-3, 0.5, std::nullopt, 0.1});
  log.epochs.push_back({1, 5e-4, 0.25, 0.9, 0.1});
  const fs::path p = temp_path("log.csv");
  log.write_csv(p);
  std::ifstream in(p);
  std::string header, first, second;
  std::getline(in, header);
  std::getline(in, first);
  std::getline(in, second);
  CHECK(header == "epoch,lr,loss,val_metric,seconds");
  CHECK(first.rfind("0,0.001,0.5,,", 0) == 0);
  CHECK(second.rfind("1,0.0005,0.25,0.9,", 0) == 0);
}
