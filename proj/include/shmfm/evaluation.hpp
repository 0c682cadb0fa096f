#pragma once

#include "shmfm/anomaly.hpp"
#include "shmfm/mae.hpp"
#include "shmfm/signal.hpp"
#include "shmfm/trainer.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace shmfm {

/// Denominator of the percentage metrics. The default divides by the mean prediction.
enum class PercentBase { mean_prediction, mean_truth };

struct RegressionMetrics {
  std::size_t n = 0;
  double mse = 0.0;
  double mae = 0.0;
  std::optional<double> r2;       // unset for constant truth
  std::optional<double> mse_pct;  // unset when the base mean is zero
  std::optional<double> mae_pct;
};

RegressionMetrics regression_metrics(std::span<const double> y_pred, std::span<const double> y_true,
                                     PercentBase base = PercentBase::mean_prediction);

struct MetricsReport {
  std::string task;
  std::string model;
  std::size_t samples = 0;
  std::optional<RegressionMetrics> regression;
  std::vector<std::pair<int, AdMetrics>> detection;  // per median filter length
};

/// One row per (report, metric) pair: task,model,samples,filter_len,metric,value.
void write_reports_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports);
std::string format_reports(std::span<const MetricsReport> reports);

void write_predictions_csv(const std::filesystem::path& path, std::span<const double> y_true,
                           std::span<const double> y_pred);
/// Returns (y_true, y_pred).
std::pair<std::vector<double>, std::vector<double>> read_predictions_csv(const std::filesystem::path& path);

/// Anomaly-detection report for every filter length from raw errors, threshold and truth.
MetricsReport detection_report(std::string task, std::string model, std::span<const double> errors, double threshold,
                               std::span<const Verdict> truth, std::span<const int> filter_lengths);

struct CalibratedDetection {
  MetricsReport report;
  std::vector<double> thresholds;  // one per filter length
};

/// For each filter length L: smooth the calibration-day errors with L, calibrate the threshold on
/// them (so the smoothed detector is fully specific on that day) and score the smoothed test errors.
CalibratedDetection calibrated_detection(std::string task, std::string model, std::span<const double> train_errors,
                                         std::span<const double> calibration_errors,
                                         std::span<const double> test_errors, std::span<const Verdict> truth,
                                         std::span<const int> filter_lengths, const ThresholdConfig& cfg = {});

// ---------------------------------------------------------------------------------------
// Pretraining ablation: No Pretrain / Pretrain UC / Pretrain All.

enum class Regime { no_pretrain, pretrain_uc, pretrain_all };

std::string to_string(Regime r);

struct AblationTask {
  std::string name;
  std::vector<SpectrogramWindow> train;  // full training split (pretraining input)
  std::vector<SpectrogramWindow> test;   // empty for pretraining-only contributors
  bool evaluated() const { return !test.empty(); }
};

struct AblationSpec {
  ModelConfig model = ModelConfig::family(24, 16);
  TrainPlan pretrain = TrainPlan::pretrain_defaults();
  TrainPlan finetune = TrainPlan::finetune_tle_defaults();
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double finetune_fraction = 1.0;  // evenly strided subset of each task's training windows
  std::vector<Regime> regimes{Regime::no_pretrain, Regime::pretrain_uc, Regime::pretrain_all};
};

struct AblationResult {
  std::string task;
  Regime regime = Regime::no_pretrain;
  std::uint64_t seed = 0;
  std::uint64_t finetune_hash = 0;
  std::size_t pretrain_windows = 0;
  std::size_t finetune_windows = 0;
  std::optional<RegressionMetrics> metrics;
  std::string error;  // non-empty when the regime failed
};

/// Evenly strided subset keeping ceil(n * fraction) windows (at least one).
std::vector<SpectrogramWindow> strided_subset(std::span<const SpectrogramWindow> windows, double fraction);

using AblationProgress = std::function<void(const AblationResult&)>;

std::vector<AblationResult> ablation_protocol(const AblationSpec& spec, std::span<const AblationTask> tasks,
                                              const AblationProgress& progress = {});

std::string format_ablation(std::span<const AblationResult> results);
void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationResult> results);

}  // namespace shmfm
