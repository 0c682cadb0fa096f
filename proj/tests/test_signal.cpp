#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "shmfm/signal.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

using namespace shmfm;

namespace {

RawRecording ramp(Index n) {
  RawRecording r;
  r.samples = Eigen::VectorXd::LinSpaced(n, 0.0, static_cast<double>(n - 1));
  return r;
}

// Brute-force one-sided DFT magnitude of a Hann-windowed frame.
double dft_mag(const Eigen::VectorXd& x, Index start, Index bin) {
  std::complex<double> acc = 0.0;
  for (Index n = 0; n < kFftSize; ++n) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / kFftSize);
    acc += w * x(start + n) *
           std::exp(std::complex<double>(0.0, -2.0 * std::numbers::pi * static_cast<double>(n * bin) / kFftSize));
  }
  return std::abs(acc);
}

}  // namespace

TEST_CASE("make_windows offsets and counts") {
  PipelineConfig cfg{5.0, 2.0, 0.0, VehicleClass::any};
  const auto w = make_windows(ramp(900), cfg);
  REQUIRE(w.size() == 3);
  CHECK(w[0].start_index == 0);
  CHECK(w[1].start_index == 200);
  CHECK(w[2].start_index == 400);
  for (const auto& x : w) CHECK(x.values.size() == 500);

  CHECK(make_windows(ramp(400), cfg).empty());
  CHECK_THROWS_AS(make_windows(RawRecording{}, cfg), DataError);

  const auto traffic = make_windows(ramp(186000), PipelineConfig::traffic(2.0));
  CHECK(traffic.size() == 901);
  CHECK(traffic.front().values.size() == 6000);
}

TEST_CASE("window extraction is shift consistent") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  RawRecording rec;
  rec.samples.resize(3000);
  for (Index i = 0; i < rec.size(); ++i) rec.samples(i) = normal(rng);
  const auto w = make_windows(rec, PipelineConfig::anomaly_detection());
  for (std::size_t i = 0; i < w.size(); ++i)
    CHECK(w[i].values == rec.samples.segment(static_cast<Index>(i) * 200, 500));
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS((PipelineConfig{1.0, 2.0, 0.0, VehicleClass::any}.validate()), ConfigError);
  CHECK_THROWS_AS((PipelineConfig{5.0, 0.0, 0.0, VehicleClass::any}.validate()), ConfigError);
  CHECK_THROWS_AS((PipelineConfig{5.0, 2.0, -1.0, VehicleClass::any}.validate()), ConfigError);
  CHECK(PipelineConfig::anomaly_detection().energy_threshold == doctest::Approx(3.125e-5));
  CHECK(PipelineConfig::traffic().energy_threshold == doctest::Approx(1.25e-6));
  CHECK(std::llround(PipelineConfig::anomaly_detection().window_s * 100) == 500);
}

TEST_CASE("energy filter") {
  TimeWindow zero;
  zero.values = Eigen::VectorXd::Zero(500);
  zero.raw_energy = window_energy(zero.values);
  CHECK_FALSE(energy_keep(zero, 1e-12));

  const double a = 0.01;
  TimeWindow alt;
  alt.values.resize(500);
  for (Index i = 0; i < 500; ++i) alt.values(i) = i % 2 ? -a : a;
  alt.raw_energy = window_energy(alt.values);
  CHECK(alt.raw_energy == doctest::Approx(a * a).epsilon(1e-12));
  CHECK(energy_keep(alt, a * a * 0.999));
  CHECK_FALSE(energy_keep(alt, a * a * 1.001));
}

TEST_CASE("energy filtering commutes with window order") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal;
  RawRecording rec;
  rec.samples.resize(5000);
  for (Index i = 0; i < rec.size(); ++i) rec.samples(i) = normal(rng) * (1.0 + std::sin(i * 0.002));
  const auto w = make_windows(rec, PipelineConfig::anomaly_detection());
  std::vector<Index> kept_then_index, index_then_kept;
  for (const auto& x : w)
    if (energy_keep(x, 1.0)) kept_then_index.push_back(x.start_index);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto& x = make_windows(rec, PipelineConfig::anomaly_detection())[i];
    if (energy_keep(x, 1.0)) index_then_kept.push_back(x.start_index);
  }
  CHECK(kept_then_index == index_then_kept);
}

TEST_CASE("normalize") {
  TimeWindow w;
  w.values.resize(400);
  for (Index i = 0; i < 400; ++i) w.values(i) = i % 2 ? 3.0 : 1.0;
  const auto n = normalize(w);
  for (Index i = 0; i < 400; ++i) CHECK(n.values(i) == doctest::Approx(i % 2 ? 1.0 : -1.0).epsilon(1e-7));

  TimeWindow c;
  c.values = Eigen::VectorXd::Constant(100, 4.2);
  CHECK(normalize(c).values.cwiseAbs().maxCoeff() < 1e-6);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal(3.0, 2.0);
  TimeWindow r;
  r.values.resize(1000);
  for (Index i = 0; i < 1000; ++i) r.values(i) = normal(rng);
  const auto once = normalize(r);
  const double mean = once.values.mean();
  const double sd = std::sqrt((once.values.array() - mean).square().mean());
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(sd - 1.0) < 1e-6);
  CHECK((normalize(once).values - once.values).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("spectrogram geometry") {
  CHECK(spectrogram_hop(500) == 3);
  CHECK(spectrogram_hop(6000) == 58);
  CHECK_THROWS_AS(spectrogram_hop(150), ConfigError);
  CHECK_NOTHROW(spectrogram_hop(400));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  for (Index t : {500, 6000}) {
    Eigen::VectorXd x(t);
    for (Index i = 0; i < t; ++i) x(i) = normal(rng);
    const Image img = spectrogram(x);
    CHECK(img.rows() == 100);
    CHECK(img.cols() == 100);
    CHECK(img.allFinite());
    CHECK(std::abs(img.cast<double>().mean()) < 1e-5);
  }
}

TEST_CASE("spectrogram magnitudes match a direct DFT") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  Eigen::VectorXd x(500);
  for (Index i = 0; i < 500; ++i) x(i) = normal(rng);
  const Eigen::MatrixXd mag = stft_magnitude(x);
  for (Index f : {0, 17, 99})
    for (Index b : {0, 1, 33, 99}) CHECK(mag(f, b) == doctest::Approx(dft_mag(x, f * 3, b)).epsilon(1e-10));
}

TEST_CASE("pure sinusoid peaks at its bin") {
  const double fs = 100.0;
  for (double f0 : {5.0, 12.3, 31.0}) {
    Eigen::VectorXd x(500);
    for (Index i = 0; i < 500; ++i) x(i) = std::sin(2.0 * std::numbers::pi * f0 * i / fs);
    const Image img = spectrogram(x);
    const auto expected = static_cast<Index>(std::lround(f0 * kFftSize / fs));
    for (Index f = 0; f < 100; ++f) {
      Index arg = 0;
      img.row(f).maxCoeff(&arg);
      CHECK(arg == expected);
      // Cross-check against the brute-force DFT argmax.
      Index best = 0;
      double best_mag = -1.0;
      for (Index b = 0; b < kBins; ++b) {
        const double m = dft_mag(x, f * 3, b);
        if (m > best_mag) {
          best_mag = m;
          best = b;
        }
      }
      CHECK(arg == best);
    }
  }
}

TEST_CASE("white noise spreads power over bins") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Eigen::VectorXd x(500);
    for (Index i = 0; i < 500; ++i) x(i) = normal(rng);
    const Eigen::MatrixXd power = stft_magnitude(x).array().square();
    const Eigen::VectorXd per_bin = power.colwise().sum().transpose();
    CHECK(per_bin.maxCoeff() / per_bin.sum() < 0.1);
  }
}

TEST_CASE("spectrogram is deterministic") {
  Eigen::VectorXd x = Eigen::VectorXd::Random(6000);
  const Image a = spectrogram(x);
  const Image b = spectrogram(x);
  CHECK(a == b);
}

TEST_CASE("compute_target") {
  std::vector<std::uint8_t> labels(500, 0);
  for (int i = 100; i < 130; ++i) labels[static_cast<std::size_t>(i)] = 1;
  CHECK(compute_target(labels, VehicleClass::light) == 3.0);
  CHECK(compute_target(labels, VehicleClass::heavy) == 0.0);
  CHECK(compute_target(labels, VehicleClass::any) == 3.0);

  std::vector<std::uint8_t> zeros(500, 0);
  for (auto k : {VehicleClass::light, VehicleClass::heavy, VehicleClass::any}) CHECK(compute_target(zeros, k) == 0.0);

  std::vector<std::uint8_t> half(500, 0);
  for (int i = 495; i < 500; ++i) half[static_cast<std::size_t>(i)] = 2;
  CHECK(compute_target(half, VehicleClass::heavy) == 0.5);

  std::vector<std::uint8_t> bad(10, 3);
  CHECK_THROWS_AS(compute_target(bad, VehicleClass::any), DataError);
}

TEST_CASE("compute_target matches brute-force counting") {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> label(0, 2);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::uint8_t> l(500);
    for (auto& v : l) v = static_cast<std::uint8_t>(label(rng));
    int light = 0, heavy = 0, any = 0;
    for (auto v : l) {
      light += v == 1;
      heavy += v == 2;
      any += v != 0;
    }
    CHECK(compute_target(l, VehicleClass::light) == light / 10.0);
    CHECK(compute_target(l, VehicleClass::heavy) == heavy / 10.0);
    CHECK(compute_target(l, VehicleClass::any) == any / 10.0);
  }
}

TEST_CASE("build_dataset composition") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal;
  RawRecording rec;
  rec.samples.resize(2500);
  rec.labels.assign(2500, 0);
  for (Index i = 0; i < rec.size(); ++i) rec.samples(i) = 0.02 * normal(rng);
  // Silence the third window's exclusive span so it drops below threshold.
  for (Index i = 1000; i < 2500; ++i) rec.samples(i) *= 1e-4;
  for (std::size_t i = 0; i < 30; ++i) rec.labels[i + 100] = 1;

  PipelineConfig cfg = PipelineConfig::anomaly_detection();
  cfg.vehicle_class = VehicleClass::light;
  const Dataset ds = build_dataset(std::span(&rec, 1), cfg, {.keep_time_windows = true, .tag = WindowTag::normal});
  CHECK(ds.candidates == 11);
  CHECK(ds.windows.size() + ds.dropped_by_energy == ds.candidates);
  CHECK(ds.dropped_by_energy > 0);
  CHECK(ds.time_windows.size() == ds.windows.size());
  REQUIRE(!ds.windows.empty());
  CHECK(ds.windows[0].target == 3.0);
  CHECK(ds.windows[0].tag == WindowTag::normal);

  const auto [train, test] = chronological_split(ds.windows, 0.7);
  CHECK(train.size() == static_cast<std::size_t>(ds.windows.size() * 0.7));
  CHECK(train.size() + test.size() == ds.windows.size());

  PipelineConfig strict = cfg;
  strict.energy_threshold = 1.0;
  const Dataset none = build_dataset(std::span(&rec, 1), strict);
  CHECK(none.windows.empty());
  CHECK(none.dropped_by_energy == none.candidates);

  RawRecording other = rec;
  other.fs = 50.0;
  std::vector<RawRecording> mixed{rec, other};
  CHECK_THROWS_AS(build_dataset(mixed, cfg), DataError);
}
