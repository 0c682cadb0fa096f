#include "shmfm/signal.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace shmfm {

void RawRecording::validate() const {
  if (!(fs > 0.0)) throw DataError("recording sampling rate must be positive");
  if (!labels.empty() && static_cast<Index>(labels.size()) != samples.size())
    throw DataError("label count " + std::to_string(labels.size()) + " does not match sample count " +
                    std::to_string(samples.size()));
}

void PipelineConfig::validate() const {
  if (!(stride_s > 0.0)) throw ConfigError("stride_s must be positive");
  if (window_s < stride_s) throw ConfigError("window_s must be >= stride_s");
  if (!(energy_threshold >= 0.0)) throw ConfigError("energy_threshold must be >= 0");
}

PipelineConfig PipelineConfig::anomaly_detection() {
  return {.window_s = 5.0, .stride_s = 2.0, .energy_threshold = 3.125e-5, .vehicle_class = VehicleClass::any};
}

PipelineConfig PipelineConfig::traffic(double stride_s, VehicleClass k) {
  return {.window_s = 60.0, .stride_s = stride_s, .energy_threshold = 1.25e-6, .vehicle_class = k};
}

double window_energy(const Eigen::Ref<const Eigen::VectorXd>& values) {
  if (values.size() == 0) return 0.0;
  const double mean = values.mean();
  return (values.array() - mean).square().mean();
}

std::vector<TimeWindow> make_windows(const RawRecording& rec, const PipelineConfig& cfg) {
  rec.validate();
  cfg.validate();
  if (rec.size() == 0) throw DataError("empty recording");
  const auto length = static_cast<Index>(std::llround(rec.fs * cfg.window_s));
  const auto hop = static_cast<Index>(std::llround(rec.fs * cfg.stride_s));
  if (length <= 0 || hop <= 0) throw ConfigError("window or stride shorter than one sample");

  std::vector<TimeWindow> out;
  if (rec.size() < length) return out;
  const Index count = (rec.size() - length) / hop + 1;
  out.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    TimeWindow w;
    w.start_index = i * hop;
    w.values = rec.samples.segment(w.start_index, length);
    w.raw_energy = window_energy(w.values);
    out.push_back(std::move(w));
  }
  return out;
}

bool energy_keep(const TimeWindow& w, double threshold) { return w.raw_energy >= threshold; }

TimeWindow normalize(const TimeWindow& w) {
  TimeWindow out = w;
  const Index n = w.values.size();
  if (n == 0) return out;
  const double mean = w.values.mean();
  const double var = (w.values.array() - mean).square().sum() / static_cast<double>(n);
  const double denom = std::sqrt(var) + kNormalizeEpsilon;
  out.values = (w.values.array() - mean) / denom;
  return out;
}

Index spectrogram_hop(Index window_length) {
  const Index hop = (window_length - kFftSize) / (kFrames - 1);
  if (window_length < kFftSize || hop < 1)
    throw ConfigError("window of " + std::to_string(window_length) +
                      " samples is too short for a 100-frame spectrogram");
  return hop;
}

namespace {

struct DftBasis {
  Eigen::VectorXd hann;
  Eigen::MatrixXd cos_part;  // kFftSize x kBins
  Eigen::MatrixXd sin_part;

  DftBasis() : hann(kFftSize), cos_part(kFftSize, kBins), sin_part(kFftSize, kBins) {
    const double two_pi = 2.0 * std::numbers::pi;
    for (Index n = 0; n < kFftSize; ++n) {
      hann(n) = 0.5 - 0.5 * std::cos(two_pi * static_cast<double>(n) / static_cast<double>(kFftSize));
      for (Index b = 0; b < kBins; ++b) {
        // Reduce the phase index first so large n*b products stay exact.
        const auto k = static_cast<double>((n * b) % kFftSize);
        const double phase = two_pi * k / static_cast<double>(kFftSize);
        cos_part(n, b) = std::cos(phase);
        sin_part(n, b) = std::sin(phase);
      }
    }
  }
};

const DftBasis& dft_basis() {
  static const DftBasis basis;
  return basis;
}

}  // namespace

Eigen::MatrixXd stft_magnitude(const Eigen::Ref<const Eigen::VectorXd>& values) {
  const Index hop = spectrogram_hop(values.size());
  const DftBasis& basis = dft_basis();
  Eigen::MatrixXd frames(kFrames, kFftSize);
  for (Index f = 0; f < kFrames; ++f)
    frames.row(f) = values.segment(f * hop, kFftSize).cwiseProduct(basis.hann).transpose();
  const Eigen::MatrixXd re = frames * basis.cos_part;
  const Eigen::MatrixXd im = frames * basis.sin_part;
  return (re.array().square() + im.array().square()).sqrt().matrix();
}

Image spectrogram(const Eigen::Ref<const Eigen::VectorXd>& values) {
  const Eigen::ArrayXXd logmag = stft_magnitude(values).array().log1p();
  const double mean = logmag.mean();
  const double var = (logmag - mean).square().mean();
  const double sd = std::sqrt(var);
  Image image(kFrames, kBins);
  if (sd < 1e-12) {
    image.setZero();
  } else {
    image = ((logmag - mean) / sd).cast<float>().matrix();
  }
  return image;
}

double compute_target(std::span<const std::uint8_t> labels, VehicleClass k) {
  std::size_t count = 0;
  for (std::uint8_t l : labels) {
    if (l > 2) throw DataError("label value " + std::to_string(l) + " outside {0,1,2}");
    if (k == VehicleClass::any ? l != 0 : l == static_cast<std::uint8_t>(k)) ++count;
  }
  return static_cast<double>(count) / 10.0;
}

Dataset build_dataset(std::span<const RawRecording> recs, const PipelineConfig& cfg, const BuildOptions& opts) {
  Dataset ds;
  if (recs.empty()) return ds;
  const double fs = recs.front().fs;
  for (const RawRecording& rec : recs) {
    if (rec.fs != fs) throw DataError("recordings have inconsistent sampling rates");
    for (TimeWindow& w : make_windows(rec, cfg)) {
      ++ds.candidates;
      if (!energy_keep(w, cfg.energy_threshold)) {
        ++ds.dropped_by_energy;
        continue;
      }
      TimeWindow norm = normalize(w);
      SpectrogramWindow sw;
      sw.image = spectrogram(norm.values);
      sw.tag = opts.tag;
      if (rec.has_labels()) {
        const std::span<const std::uint8_t> slice(rec.labels.data() + w.start_index,
                                                  static_cast<std::size_t>(w.values.size()));
        sw.target = compute_target(slice, cfg.vehicle_class);
      }
      ds.windows.push_back(std::move(sw));
      if (opts.keep_time_windows) ds.time_windows.push_back(std::move(norm));
    }
  }
  return ds;
}

}  // namespace shmfm
