#include "shmfm/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace shmfm {

RegressionMetrics regression_metrics(std::span<const double> y_pred, std::span<const double> y_true,
                                     PercentBase base) {
  if (y_pred.size() != y_true.size())
    throw DataError("prediction count " + std::to_string(y_pred.size()) + " differs from truth count " +
                    std::to_string(y_true.size()));
  if (y_pred.empty()) throw DataError("regression metrics need at least one sample");
  const auto n = static_cast<double>(y_pred.size());
  RegressionMetrics m;
  m.n = y_pred.size();
  double sq = 0.0, ab = 0.0, mean_true = 0.0, mean_pred = 0.0;
  for (std::size_t i = 0; i < y_pred.size(); ++i) {
    const double r = y_true[i] - y_pred[i];
    sq += r * r;
    ab += std::abs(r);
    mean_true += y_true[i];
    mean_pred += y_pred[i];
  }
  mean_true /= n;
  mean_pred /= n;
  m.mse = sq / n;
  m.mae = ab / n;
  double tot = 0.0;
  for (double y : y_true) tot += (y - mean_true) * (y - mean_true);
  if (tot > 0.0) m.r2 = 1.0 - sq / tot;
  const double denom = base == PercentBase::mean_prediction ? mean_pred : mean_true;
  if (denom != 0.0) {
    m.mse_pct = 100.0 * m.mse / denom;
    m.mae_pct = 100.0 * m.mae / denom;
  }
  return m;
}

namespace {

std::string fmt(std::optional<double> v, const char* spec = "%.6g") {
  if (!v) return "undefined";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, *v);
  return buf;
}

std::string csv_value(std::optional<double> v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

}  // namespace

void write_reports_csv(const std::filesystem::path& path, std::span<const MetricsReport> reports) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "task,model,samples,filter_len,metric,value\n";
  for (const MetricsReport& r : reports) {
    const std::string head = r.task + ',' + r.model + ',' + std::to_string(r.samples) + ',';
    if (r.regression) {
      const RegressionMetrics& m = *r.regression;
      out << head << ",mse," << csv_value(m.mse) << '\n';
      out << head << ",mae," << csv_value(m.mae) << '\n';
      out << head << ",r2," << csv_value(m.r2) << '\n';
      out << head << ",mse_pct," << csv_value(m.mse_pct) << '\n';
      out << head << ",mae_pct," << csv_value(m.mae_pct) << '\n';
    }
    for (const auto& [len, ad] : r.detection) {
      out << head << len << ",accuracy," << csv_value(ad.accuracy) << '\n';
      out << head << len << ",sensitivity," << csv_value(ad.sensitivity) << '\n';
      out << head << len << ",specificity," << csv_value(ad.specificity) << '\n';
    }
  }
}

std::string format_reports(std::span<const MetricsReport> reports) {
  std::ostringstream os;
  char buf[256];
  for (const MetricsReport& r : reports) {
    os << r.task << " / " << r.model << " (" << r.samples << " windows)\n";
    if (r.regression) {
      const RegressionMetrics& m = *r.regression;
      std::snprintf(buf, sizeof buf, "  %-10s %-10s %-10s %-10s %-10s\n", "MSE", "MAE", "R2", "MSE%", "MAE%");
      os << buf;
      std::snprintf(buf, sizeof buf, "  %-10s %-10s %-10s %-10s %-10s\n", fmt(m.mse).c_str(), fmt(m.mae).c_str(),
                    fmt(m.r2, "%.4f").c_str(), fmt(m.mse_pct, "%.2f").c_str(), fmt(m.mae_pct, "%.2f").c_str());
      os << buf;
    }
    if (!r.detection.empty()) {
      std::snprintf(buf, sizeof buf, "  %-6s %-10s %-12s %-12s\n", "L", "accuracy", "sensitivity", "specificity");
      os << buf;
      for (const auto& [len, ad] : r.detection) {
        std::snprintf(buf, sizeof buf, "  %-6d %-10s %-12s %-12s\n", len, fmt(ad.accuracy, "%.4f").c_str(),
                      fmt(ad.sensitivity, "%.4f").c_str(), fmt(ad.specificity, "%.4f").c_str());
        os << buf;
      }
    }
  }
  return os.str();
}

void write_predictions_csv(const std::filesystem::path& path, std::span<const double> y_true,
                           std::span<const double> y_pred) {
  if (y_true.size() != y_pred.size()) throw DataError("prediction and truth counts differ");
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "index,y_true,y_pred\n";
  char buf[96];
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i, y_true[i], y_pred[i]);
    out << buf;
  }
}

std::pair<std::vector<double>, std::vector<double>> read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<double> truth, pred;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::size_t idx = 0;
    double t = 0.0, p = 0.0;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf", &idx, &t, &p) != 3)
      throw FormatError(path.string() + ":" + std::to_string(row) + ": malformed prediction row");
    truth.push_back(t);
    pred.push_back(p);
  }
  return {std::move(truth), std::move(pred)};
}

MetricsReport detection_report(std::string task, std::string model, std::span<const double> errors, double threshold,
                               std::span<const Verdict> truth, std::span<const int> filter_lengths) {
  MetricsReport r;
  r.task = std::move(task);
  r.model = std::move(model);
  r.samples = errors.size();
  for (int len : filter_lengths) {
    const std::vector<double> smoothed = median_smooth(errors, len);
    r.detection.emplace_back(len, ad_metrics(classify(smoothed, threshold), truth));
  }
  return r;
}

CalibratedDetection calibrated_detection(std::string task, std::string model, std::span<const double> train_errors,
                                         std::span<const double> calibration_errors,
                                         std::span<const double> test_errors, std::span<const Verdict> truth,
                                         std::span<const int> filter_lengths, const ThresholdConfig& cfg) {
  if (test_errors.size() != truth.size()) throw DataError("test errors and truth differ in length");
  CalibratedDetection out;
  out.report.task = std::move(task);
  out.report.model = std::move(model);
  out.report.samples = test_errors.size();
  for (int len : filter_lengths) {
    const double th = calibrate_threshold(train_errors, median_smooth(calibration_errors, len), cfg).threshold;
    out.thresholds.push_back(th);
    out.report.detection.emplace_back(len, ad_metrics(classify(median_smooth(test_errors, len), th), truth));
  }
  return out;
}

// ---------------------------------------------------------------------------------------

std::string to_string(Regime r) {
  switch (r) {
    case Regime::no_pretrain: return "no_pretrain";
    case Regime::pretrain_uc: return "pretrain_uc";
    case Regime::pretrain_all: return "pretrain_all";
  }
  return "unknown";
}

std::vector<SpectrogramWindow> strided_subset(std::span<const SpectrogramWindow> windows, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fine-tune fraction must lie in (0, 1]");
  if (windows.empty()) return {};
  const auto keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(static_cast<double>(windows.size()) * fraction - 1e-9)));
  std::vector<SpectrogramWindow> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.push_back(windows[i * windows.size() / keep]);
  return out;
}

std::vector<AblationResult> ablation_protocol(const AblationSpec& spec, std::span<const AblationTask> tasks,
                                              const AblationProgress& progress) {
  spec.model.validate();
  std::vector<SpectrogramWindow> all_train;
  for (const AblationTask& t : tasks) all_train.insert(all_train.end(), t.train.begin(), t.train.end());

  std::vector<AblationResult> results;
  for (std::uint64_t seed : spec.seeds) {
    const MaeModel<float> init = make_mae<float>(spec.model, derive_seed(seed, "ablation.init"));
    TrainPlan pre = spec.pretrain;
    pre.phase = Phase::pretrain;
    pre.seed = derive_seed(seed, "ablation.pretrain");
    TrainPlan fine = spec.finetune;
    fine.phase = Phase::finetune_tle;
    fine.seed = derive_seed(seed, "ablation.finetune");

    std::optional<MaeModel<float>> pretrained_all;
    std::string all_error;
    for (const AblationTask& task : tasks) {
      if (!task.evaluated()) continue;
      const std::vector<SpectrogramWindow> ft = strided_subset(task.train, spec.finetune_fraction);
      for (Regime regime : spec.regimes) {
        AblationResult res;
        res.task = task.name;
        res.regime = regime;
        res.seed = seed;
        res.finetune_hash = fine.hash();
        res.finetune_windows = ft.size();
        try {
          MaeModel<float> base = init;
          if (regime == Regime::pretrain_uc) {
            pretrain(base, task.train, pre);
            res.pretrain_windows = task.train.size();
          } else if (regime == Regime::pretrain_all) {
            if (!pretrained_all && all_error.empty()) {
              try {
                pretrained_all = init;
                pretrain(*pretrained_all, all_train, pre);
              } catch (const std::exception& e) {
                pretrained_all.reset();
                all_error = e.what();
              }
            }
            if (!pretrained_all) throw Error(all_error);
            base = *pretrained_all;
            res.pretrain_windows = all_train.size();
          }
          MaeModel<float> student = attach_regression_head(base, mean_target(ft), derive_seed(seed, "ablation.head"));
          finetune_tle(student, ft, fine);
          std::vector<double> truth;
          truth.reserve(task.test.size());
          for (const auto& w : task.test) {
            if (!w.target) throw DataError("test window without target in task " + task.name);
            truth.push_back(*w.target);
          }
          res.metrics = regression_metrics(predict(student, task.test), truth);
        } catch (const std::exception& e) {
          res.error = e.what();
        }
        if (progress) progress(res);
        results.push_back(std::move(res));
      }
    }
  }
  return results;
}

std::string format_ablation(std::span<const AblationResult> results) {
  // task -> seed -> regime -> MAE%
  std::map<std::string, std::map<std::uint64_t, std::map<Regime, std::string>>> table;
  for (const AblationResult& r : results)
    table[r.task][r.seed][r.regime] =
        !r.error.empty() ? "failed" : fmt(r.metrics ? r.metrics->mae_pct : std::nullopt, "%.2f");
  std::ostringstream os;
  char buf[160];
  for (const auto& [task, seeds] : table) {
    os << "MAE% for " << task << '\n';
    std::snprintf(buf, sizeof buf, "  %-8s %-14s %-14s %-14s\n", "seed", "no_pretrain", "pretrain_uc", "pretrain_all");
    os << buf;
    for (const auto& [seed, row] : seeds) {
      auto cell = [&](Regime g) {
        const auto it = row.find(g);
        return it == row.end() ? std::string("-") : it->second;
      };
      std::snprintf(buf, sizeof buf, "  %-8llu %-14s %-14s %-14s\n", static_cast<unsigned long long>(seed),
                    cell(Regime::no_pretrain).c_str(), cell(Regime::pretrain_uc).c_str(),
                    cell(Regime::pretrain_all).c_str());
      os << buf;
    }
  }
  return os.str();
}

void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationResult> results) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "task,regime,seed,finetune_hash,pretrain_windows,finetune_windows,mse,mae,r2,mse_pct,mae_pct,error\n";
  for (const AblationResult& r : results) {
    out << r.task << ',' << to_string(r.regime) << ',' << r.seed << ',' << r.finetune_hash << ',' << r.pretrain_windows
        << ',' << r.finetune_windows << ',';
    if (r.metrics)
      out << csv_value(r.metrics->mse) << ',' << csv_value(r.metrics->mae) << ',' << csv_value(r.metrics->r2) << ','
          << csv_value(r.metrics->mse_pct) << ',' << csv_value(r.metrics->mae_pct) << ',';
    else
      out << ",,,,,";
    std::string err = r.error;
    for (char& c : err)
      if (c == ',' || c == '\n') c = ';';
    out << err << '\n';
  }
}

}  // namespace shmfm
