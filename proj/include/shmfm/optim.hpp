#pragma once

#include "shmfm/common.hpp"
#include "shmfm/nn.hpp"

#include <cmath>
#include <string>

namespace shmfm {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

/// AdamW with decoupled weight decay, restricted to slots flagged `decay` (linear weights).
template <typename Scalar>
class AdamW {
 public:
  AdamW(const ParamLayout& layout, AdamWConfig cfg = {})
      : cfg_(cfg),
        m_(Vector<Scalar>::Zero(layout.size())),
        v_(Vector<Scalar>::Zero(layout.size())),
        decay_mask_(Vector<Scalar>::Zero(layout.size())) {
    for (const TensorSlot& s : layout.slots())
      if (s.decay) decay_mask_.segment(s.offset, s.size()).setOnes();
  }

  void step(Vector<Scalar>& params, const Vector<Scalar>& grad, double lr, double weight_decay) {
    ++t_;
    const auto b1 = static_cast<Scalar>(cfg_.beta1);
    const auto b2 = static_cast<Scalar>(cfg_.beta2);
    const auto bias1 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const auto bias2 = static_cast<Scalar>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const auto eps = static_cast<Scalar>(cfg_.eps);
    const auto lr_s = static_cast<Scalar>(lr);
    const auto decay = static_cast<Scalar>(lr * weight_decay);
    params.array() -= decay * decay_mask_.array() * params.array();
    m_ = b1 * m_ + (Scalar(1) - b1) * grad;
    v_.array() = b2 * v_.array() + (Scalar(1) - b2) * grad.array().square();
    params.array() -= lr_s * (m_.array() / bias1) / ((v_.array() / bias2).sqrt() + eps);
  }

  long steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  Vector<Scalar> m_;
  Vector<Scalar> v_;
  Vector<Scalar> decay_mask_;
  long t_ = 0;
};

/// Global L2-norm clipping. Returns the norm before scaling.
template <typename Scalar>
double clip_gradients(Vector<Scalar>& grad, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("max_norm must be positive");
  const double norm = std::sqrt(grad.template cast<double>().squaredNorm());
  if (!std::isfinite(norm)) throw TrainingError("non-finite gradient (norm " + std::to_string(norm) + ")");
  if (norm > max_norm) grad *= static_cast<Scalar>(max_norm / norm);
  return norm;
}

}  // namespace shmfm
