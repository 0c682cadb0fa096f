#include "shmfm/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

namespace shmfm {

void ThresholdConfig::validate() const {
  if (!(step_fraction > 0.0)) throw ConfigError("step_fraction must be positive");
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
}

Calibration calibrate_threshold(std::span<const double> train_errors, std::span<const double> calibration_errors,
                                const ThresholdConfig& cfg) {
  cfg.validate();
  if (train_errors.empty() || calibration_errors.empty()) throw DataError("threshold calibration needs errors");
  const double train_mean =
      std::accumulate(train_errors.begin(), train_errors.end(), 0.0) / static_cast<double>(train_errors.size());
  const double cal_mean = std::accumulate(calibration_errors.begin(), calibration_errors.end(), 0.0) /
                          static_cast<double>(calibration_errors.size());
  double ss = 0.0;
  for (double e : calibration_errors) ss += (e - cal_mean) * (e - cal_mean);
  const double cal_std = std::sqrt(ss / static_cast<double>(calibration_errors.size()));

  Calibration c;
  c.initial = train_mean + cal_std;
  const double worst = *std::max_element(calibration_errors.begin(), calibration_errors.end());
  const double step = c.initial * cfg.step_fraction;
  c.threshold = c.initial;
  while (worst > c.threshold) {
    if (c.steps >= cfg.max_steps || !(step > 0.0))
      throw DataError("threshold calibration did not reach full specificity after " + std::to_string(c.steps) +
                      " steps (initial " + std::to_string(c.initial) + ", max calibration error " +
                      std::to_string(worst) + ")");
    ++c.steps;
    c.threshold = c.initial + step * c.steps;
  }
  return c;
}

std::vector<double> median_smooth(std::span<const double> errors, int filter_len) {
  if (errors.empty()) throw DataError("cannot smooth an empty series");
  if (filter_len < 1) throw ConfigError("median filter length must be >= 1");
  const auto len = static_cast<std::size_t>(filter_len);
  std::vector<double> out(errors.size());
  std::vector<double> window;
  window.reserve(len);
  for (std::size_t i = 0; i < errors.size(); ++i) {
    const std::size_t begin = i + 1 >= len ? i + 1 - len : 0;
    window.assign(errors.begin() + static_cast<std::ptrdiff_t>(begin), errors.begin() + static_cast<std::ptrdiff_t>(i) + 1);
    const auto mid = window.begin() + static_cast<std::ptrdiff_t>((window.size() - 1) / 2);
    std::nth_element(window.begin(), mid, window.end());
    out[i] = *mid;
  }
  return out;
}

std::vector<Verdict> classify(std::span<const double> smoothed, double threshold) {
  std::vector<Verdict> out;
  out.reserve(smoothed.size());
  for (double e : smoothed) out.push_back(e > threshold ? Verdict::anomaly : Verdict::normal);
  return out;
}

AdMetrics ad_metrics(std::span<const Verdict> verdicts, std::span<const Verdict> truth) {
  if (verdicts.size() != truth.size()) throw DataError("verdict and truth lengths differ");
  AdMetrics m;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    const bool pred = verdicts[i] == Verdict::anomaly;
    const bool actual = truth[i] == Verdict::anomaly;
    if (pred && actual) ++m.tp;
    else if (!pred && !actual) ++m.tn;
    else if (pred) ++m.fp;
    else ++m.fn;
  }
  const auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.accuracy = ratio(m.tp + m.tn, verdicts.size());
  m.sensitivity = ratio(m.tp, m.tp + m.fn);
  m.specificity = ratio(m.tn, m.tn + m.fp);
  return m;
}

void write_verdicts_csv(const std::filesystem::path& path, std::span<const double> raw,
                        std::span<const double> smoothed, std::span<const Verdict> verdicts,
                        std::span<const Verdict> truth) {
  if (smoothed.size() != raw.size() || verdicts.size() != raw.size() || (!truth.empty() && truth.size() != raw.size()))
    throw DataError("verdict csv columns differ in length");
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "window_index,raw_error,smoothed_error,verdict,truth\n";
  out.precision(10);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out << i << ',' << raw[i] << ',' << smoothed[i] << ','
        << (verdicts[i] == Verdict::anomaly ? "anomaly" : "normal") << ',';
    if (i < truth.size()) out << (truth[i] == Verdict::anomaly ? "anomaly" : "normal");
    out << '\n';
  }
}

}  // namespace shmfm
