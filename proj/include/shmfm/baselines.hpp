#pragma once

#include "shmfm/common.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <vector>

namespace shmfm {

// ---------------------------------------------------------------------------------------
// PCA reconstruction baseline for anomaly detection, fitted on normal time windows.

struct PcaModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // T x n_comp, orthonormal columns, descending variance
  Eigen::VectorXd explained_variance;

  Index dim() const { return mean.size(); }
  Index n_components() const { return components.cols(); }
};

/// n_comp = T / compression_factor (integer floor).
PcaModel pca_fit(std::span<const Eigen::VectorXd> windows, int compression_factor);
PcaModel pca_fit_components(std::span<const Eigen::VectorXd> windows, Index n_components);

/// Mean squared residual after projecting onto the principal subspace.
double pca_error(const PcaModel& model, const Eigen::Ref<const Eigen::VectorXd>& window);
Eigen::VectorXd pca_residual(const PcaModel& model, const Eigen::Ref<const Eigen::VectorXd>& window);

void save_pca(const PcaModel& model, const std::filesystem::path& path);
PcaModel load_pca(const std::filesystem::path& path);

// ---------------------------------------------------------------------------------------
// Statistical window features for the regression baselines.

inline constexpr Index kFeatureCount = 8;

struct FeatureVector {
  // mean, std, min, max, skewness, kurtosis (non-excess), rms, zero crossings
  std::array<double, kFeatureCount> values{};
  bool degenerate = false;  // zero variance: skewness and kurtosis reported as 0

  double mean() const { return values[0]; }
  double stddev() const { return values[1]; }
  double min() const { return values[2]; }
  double max() const { return values[3]; }
  double skewness() const { return values[4]; }
  double kurtosis() const { return values[5]; }
  double rms() const { return values[6]; }
  double zero_crossings() const { return values[7]; }
};

FeatureVector extract_features(const Eigen::Ref<const Eigen::VectorXd>& window);

/// Stacks feature vectors into an (n x 8) matrix.
Eigen::MatrixXd feature_matrix(std::span<const FeatureVector> features);

/// k-nearest-neighbour regressor on per-dimension standardized features.
class KnnRegressor {
 public:
  KnnRegressor(Eigen::MatrixXd features, Eigen::VectorXd targets, int k = 7);

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& query) const;
  int k() const { return k_; }

 private:
  Eigen::MatrixXd standardized_;
  Eigen::VectorXd targets_;
  Eigen::RowVectorXd mean_;
  Eigen::RowVectorXd scale_;
  int k_;
};

/// Convenience wrapper: fit + single prediction.
double knn_predict(const Eigen::MatrixXd& train_features, const Eigen::VectorXd& train_targets,
                   const Eigen::Ref<const Eigen::RowVectorXd>& query, int k = 7);

struct LinearRegressor {
  Eigen::VectorXd weights;
  double intercept = 0.0;

  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const { return x.dot(weights) + intercept; }
};

inline constexpr double kRidgeJitter = 1e-8;

/// Least squares with intercept via ridge-jittered normal equations.
LinearRegressor linreg_fit(const Eigen::MatrixXd& features, const Eigen::VectorXd& targets);
double linreg_predict(const LinearRegressor& model, const Eigen::Ref<const Eigen::RowVectorXd>& x);

}  // namespace shmfm
