#pragma once

#include "shmfm/common.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace shmfm {

/// Uniformly sampled z-axis acceleration with optional per-sample labels in {0,1,2}.
struct RawRecording {
  Eigen::VectorXd samples;
  double fs = 100.0;
  std::vector<std::uint8_t> labels;  // empty, or one label per sample

  bool has_labels() const { return !labels.empty(); }
  Index size() const { return samples.size(); }
  void validate() const;
};

enum class VehicleClass { light = 1, heavy = 2, any = 0 };

struct PipelineConfig {
  double window_s = 5.0;
  double stride_s = 2.0;
  double energy_threshold = 3.125e-5;
  VehicleClass vehicle_class = VehicleClass::any;

  void validate() const;

  /// 5 s windows, 2 s stride (anomaly detection use case).
  static PipelineConfig anomaly_detection();
  /// 60 s windows with the given stride (traffic use cases).
  static PipelineConfig traffic(double stride_s = 2.0, VehicleClass k = VehicleClass::light);
};

struct TimeWindow {
  Eigen::VectorXd values;
  Index start_index = 0;
  double raw_energy = 0.0;
};

enum class WindowTag : std::uint8_t { normal = 0, anomaly = 1 };

struct SpectrogramWindow {
  Image image;
  std::optional<double> target;
  std::optional<WindowTag> tag;
};

/// Mean squared de-meaned amplitude.
double window_energy(const Eigen::Ref<const Eigen::VectorXd>& values);

std::vector<TimeWindow> make_windows(const RawRecording& rec, const PipelineConfig& cfg);

bool energy_keep(const TimeWindow& w, double threshold);

inline constexpr double kNormalizeEpsilon = 1e-8;

TimeWindow normalize(const TimeWindow& w);

// STFT geometry: Hann window of 198 samples, 100 one-sided bins, hop chosen so that
// exactly 100 frames fit into the window.
inline constexpr Index kFftSize = 198;
inline constexpr Index kFrames = 100;
inline constexpr Index kBins = 100;

/// Hop between STFT frames for a window of length T; throws ConfigError if fewer than 100 frames fit.
Index spectrogram_hop(Index window_length);

/// |STFT| magnitudes (frames x bins) before log compression.
Eigen::MatrixXd stft_magnitude(const Eigen::Ref<const Eigen::VectorXd>& values);

/// log(1 + |STFT|), standardized over the whole image.
Image spectrogram(const Eigen::Ref<const Eigen::VectorXd>& values);

double compute_target(std::span<const std::uint8_t> labels, VehicleClass k);

struct Dataset {
  std::vector<SpectrogramWindow> windows;
  std::vector<TimeWindow> time_windows;  // normalized, aligned with `windows`
  std::size_t candidates = 0;
  std::size_t dropped_by_energy = 0;
};

struct BuildOptions {
  bool keep_time_windows = false;
  std::optional<WindowTag> tag;  // applied to every window of the recording
};

Dataset build_dataset(std::span<const RawRecording> recs, const PipelineConfig& cfg,
                      const BuildOptions& opts = {});

/// Chronological split; the first floor(n * train_fraction) windows go to the training side.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> chronological_split(const std::vector<T>& items,
                                                               double train_fraction) {
  const auto n_train = static_cast<std::size_t>(static_cast<double>(items.size()) * train_fraction);
  return {std::vector<T>(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_train)),
          std::vector<T>(items.begin() + static_cast<std::ptrdiff_t>(n_train), items.end())};
}

}  // namespace shmfm
