#include "shmfm/baselines.hpp"

#include "shmfm/io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace shmfm {

PcaModel pca_fit(std::span<const Eigen::VectorXd> windows, int compression_factor) {
  if (compression_factor < 1) throw ConfigError("compression factor must be >= 1");
  if (windows.empty()) throw DataError("PCA needs at least one window");
  const Index n_comp = windows.front().size() / compression_factor;
  if (n_comp < 1) throw ConfigError("compression factor leaves no components");
  return pca_fit_components(windows, n_comp);
}

PcaModel pca_fit_components(std::span<const Eigen::VectorXd> windows, Index n_components) {
  if (n_components < 1) throw ConfigError("PCA needs at least one component");
  if (static_cast<Index>(windows.size()) < n_components)
    throw DataError("PCA with " + std::to_string(n_components) + " components needs at least that many windows, got " +
                    std::to_string(windows.size()));
  const Index dim = windows.front().size();
  Eigen::MatrixXd data(static_cast<Index>(windows.size()), dim);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (windows[i].size() != dim) throw DataError("PCA windows differ in length");
    data.row(static_cast<Index>(i)) = windows[i].transpose();
  }
  PcaModel m;
  m.mean = data.colwise().mean().transpose();
  data.rowwise() -= m.mean.transpose();
  const double denom = std::max<double>(1.0, static_cast<double>(data.rows() - 1));
  const Eigen::MatrixXd cov = (data.transpose() * data) / denom;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw Error("covariance eigen-decomposition failed");
  // Eigenvalues ascend; take the trailing columns in reverse.
  const Index k = std::min(n_components, dim);
  m.components.resize(dim, k);
  m.explained_variance.resize(k);
  for (Index c = 0; c < k; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(dim - 1 - c);
    Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    m.components.col(c) = v;
    m.explained_variance(c) = std::max(0.0, eig.eigenvalues()(dim - 1 - c));
  }
  return m;
}

Eigen::VectorXd pca_residual(const PcaModel& model, const Eigen::Ref<const Eigen::VectorXd>& window) {
  if (window.size() != model.dim())
    throw DataError("window length " + std::to_string(window.size()) + " does not match PCA dimension " +
                    std::to_string(model.dim()));
  const Eigen::VectorXd centered = window - model.mean;
  return centered - model.components * (model.components.transpose() * centered);
}

double pca_error(const PcaModel& model, const Eigen::Ref<const Eigen::VectorXd>& window) {
  return pca_residual(model, window).squaredNorm() / static_cast<double>(model.dim());
}

namespace {
constexpr std::array<char, 4> kPcaMagic{'P', 'C', 'A', 'M'};

NamedTensor to_tensor(std::string name, const Eigen::MatrixXd& m) {
  NamedTensor t;
  t.name = std::move(name);
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  // Row-major on disk.
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m.cast<float>();
  t.data.assign(rm.data(), rm.data() + rm.size());
  return t;
}

Eigen::MatrixXd from_tensor(const TensorContainer& box, const std::string& name, const std::filesystem::path& path) {
  const NamedTensor* t = box.find(name);
  if (!t || t->dims.size() != 2) throw FormatError(path.string() + ": missing or malformed tensor " + name);
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> rm(
      t->data.data(), t->dims[0], t->dims[1]);
  return rm.cast<double>();
}
}  // namespace

void save_pca(const PcaModel& model, const std::filesystem::path& path) {
  TensorContainer box;
  box.magic = kPcaMagic;
  box.meta = "dim=" + std::to_string(model.dim()) + "\nn_components=" + std::to_string(model.n_components()) + "\n";
  box.tensors.push_back(to_tensor("mean", model.mean));
  box.tensors.push_back(to_tensor("components", model.components));
  box.tensors.push_back(to_tensor("explained_variance", model.explained_variance));
  write_container(path, box);
}

PcaModel load_pca(const std::filesystem::path& path) {
  const TensorContainer box = read_container(path, kPcaMagic, 1);
  PcaModel m;
  m.mean = from_tensor(box, "mean", path).col(0);
  m.components = from_tensor(box, "components", path);
  m.explained_variance = from_tensor(box, "explained_variance", path).col(0);
  if (m.components.rows() != m.mean.size() || m.explained_variance.size() != m.components.cols())
    throw FormatError(path.string() + ": inconsistent PCA tensor shapes");
  return m;
}

FeatureVector extract_features(const Eigen::Ref<const Eigen::VectorXd>& window) {
  if (window.size() == 0) throw DataError("cannot extract features from an empty window");
  const auto n = static_cast<double>(window.size());
  FeatureVector f;
  const double mean = window.mean();
  const Eigen::ArrayXd c = window.array() - mean;
  const double m2 = c.square().sum() / n;
  const double m3 = c.cube().sum() / n;
  const double m4 = c.square().square().sum() / n;
  double crossings = 0;
  for (Index i = 1; i < window.size(); ++i)
    if ((c(i - 1) < 0.0) != (c(i) < 0.0)) crossings += 1;
  f.values[0] = mean;
  f.values[1] = std::sqrt(m2);
  f.values[2] = window.minCoeff();
  f.values[3] = window.maxCoeff();
  if (std::sqrt(m2) > 1e-12 * std::max(1.0, std::abs(mean))) {
    f.values[4] = m3 / std::pow(m2, 1.5);
    f.values[5] = m4 / (m2 * m2);
  } else {
    f.degenerate = true;
    crossings = 0;
  }
  f.values[6] = std::sqrt(window.squaredNorm() / n);
  f.values[7] = crossings;
  return f;
}

Eigen::MatrixXd feature_matrix(std::span<const FeatureVector> features) {
  Eigen::MatrixXd m(static_cast<Index>(features.size()), kFeatureCount);
  for (std::size_t i = 0; i < features.size(); ++i)
    for (Index j = 0; j < kFeatureCount; ++j) m(static_cast<Index>(i), j) = features[i].values[static_cast<std::size_t>(j)];
  return m;
}

KnnRegressor::KnnRegressor(Eigen::MatrixXd features, Eigen::VectorXd targets, int k)
    : targets_(std::move(targets)), k_(k) {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (features.rows() != targets_.size()) throw DataError("feature and target counts differ");
  if (features.rows() < k)
    throw DataError("kNN with k=" + std::to_string(k) + " needs at least k training points");
  mean_ = features.colwise().mean();
  const Eigen::MatrixXd centered = features.rowwise() - mean_;
  scale_ = (centered.array().square().colwise().sum() / static_cast<double>(features.rows())).sqrt().matrix();
  for (Index j = 0; j < scale_.size(); ++j)
    if (!(scale_(j) > 0.0)) scale_(j) = 1.0;
  standardized_ = centered.array().rowwise() / scale_.array();
}

double KnnRegressor::predict(const Eigen::Ref<const Eigen::RowVectorXd>& query) const {
  if (query.size() != standardized_.cols()) throw DataError("query dimension mismatch");
  const Eigen::RowVectorXd q = (query - mean_).array() / scale_.array();
  const Eigen::VectorXd dist = (standardized_.rowwise() - q).rowwise().squaredNorm();
  std::vector<Index> order(static_cast<std::size_t>(dist.size()));
  std::iota(order.begin(), order.end(), Index{0});
  const auto kk = static_cast<std::ptrdiff_t>(k_);
  std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](Index a, Index b) {
    return dist(a) < dist(b) || (dist(a) == dist(b) && a < b);
  });
  double sum = 0.0;
  for (std::ptrdiff_t i = 0; i < kk; ++i) sum += targets_(order[static_cast<std::size_t>(i)]);
  return sum / static_cast<double>(k_);
}

double knn_predict(const Eigen::MatrixXd& train_features, const Eigen::VectorXd& train_targets,
                   const Eigen::Ref<const Eigen::RowVectorXd>& query, int k) {
  return KnnRegressor(train_features, train_targets, k).predict(query);
}

LinearRegressor linreg_fit(const Eigen::MatrixXd& features, const Eigen::VectorXd& targets) {
  if (features.rows() != targets.size()) throw DataError("feature and target counts differ");
  if (features.rows() == 0) throw DataError("linear regression needs data");
  const Index d = features.cols();
  Eigen::MatrixXd design(features.rows(), d + 1);
  design.leftCols(d) = features;
  design.col(d).setOnes();
  Eigen::MatrixXd gram = design.transpose() * design;
  gram.diagonal().array() += kRidgeJitter;
  const Eigen::VectorXd w = gram.ldlt().solve(design.transpose() * targets);
  LinearRegressor m;
  m.weights = w.head(d);
  m.intercept = w(d);
  return m;
}

double linreg_predict(const LinearRegressor& model, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  return model.predict(x);
}

}  // namespace shmfm
