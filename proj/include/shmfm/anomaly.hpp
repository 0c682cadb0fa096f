#pragma once

#include "shmfm/common.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace shmfm {

struct ThresholdConfig {
  double step_fraction = 0.01;
  int max_steps = 10000;

  void validate() const;
};

struct Calibration {
  double threshold = 0.0;
  double initial = 0.0;  // mean(train) + std(calibration day)
  int steps = 0;
};

/// Start at mean(train_errors) + std(calibration_errors) and raise by initial * step_fraction
/// until no calibration error exceeds the threshold.
Calibration calibrate_threshold(std::span<const double> train_errors, std::span<const double> calibration_errors,
                                const ThresholdConfig& cfg = {});

/// Causal median over the trailing L values (partial windows at the start; lower median for
/// even counts).
std::vector<double> median_smooth(std::span<const double> errors, int filter_len);

enum class Verdict : std::uint8_t { normal = 0, anomaly = 1 };

/// Anomaly iff value > threshold.
std::vector<Verdict> classify(std::span<const double> smoothed, double threshold);

struct AdMetrics {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::optional<double> accuracy;     // unset when there are no windows
  std::optional<double> sensitivity;  // unset without anomalous truth
  std::optional<double> specificity;  // unset without normal truth
};

AdMetrics ad_metrics(std::span<const Verdict> verdicts, std::span<const Verdict> truth);

inline constexpr int kFilterLengths[] = {1, 15, 30, 60, 120, 240};

/// Writes window_index, raw_error, smoothed_error, verdict, truth.
void write_verdicts_csv(const std::filesystem::path& path, std::span<const double> raw,
                        std::span<const double> smoothed, std::span<const Verdict> verdicts,
                        std::span<const Verdict> truth);

}  // namespace shmfm
