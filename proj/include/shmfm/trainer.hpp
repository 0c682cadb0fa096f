#pragma once

#include "shmfm/mae.hpp"
#include "shmfm/optim.hpp"
#include "shmfm/signal.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace shmfm {

enum class Phase { pretrain, finetune_ad, finetune_tle, finetune_kd };

enum class SupervisedLoss { mse, mae };

std::string to_string(Phase p);
Phase parse_phase(const std::string& s);

struct TrainPlan {
  Phase phase = Phase::pretrain;
  double base_lr = 2.5e-4;
  double weight_decay = 0.05;
  int epochs = 200;
  int batch_size = 128;
  int warmup_epochs = 100;
  double mask_ratio = 0.8;
  std::uint64_t seed = 0;
  double max_grad_norm = 1.0;
  AdamWConfig adam;
  int threads = 1;
  SupervisedLoss loss = SupervisedLoss::mse;

  void validate() const;

  /// Self-supervised pretraining: lr 2.5e-4, 200 epochs, batch 128, 100 warmup epochs.
  static TrainPlan pretrain_defaults();
  /// Anomaly-detection fine-tune: lr 2.5e-3, 400 epochs, batch 64.
  static TrainPlan finetune_ad_defaults();
  /// Traffic fine-tune, small-data case (UC2): lr 2.5e-6, 500 epochs, batch 8.
  static TrainPlan finetune_tle_defaults();
  /// Traffic fine-tune, large-data case (UC3): lr 2.5e-6, 200 epochs, batch 128.
  static TrainPlan finetune_tle_large_defaults();

  /// Stable textual form; identical plans hash identically.
  std::string canonical() const;
  std::uint64_t hash() const;
};

struct KDConfig {
  double alpha_task = 0.5;
  double alpha_kd = 0.5;

  void validate() const;
};

/// Learning rate for an epoch: linear warmup from 0, then a half cosine down to 0.
double lr_at(const TrainPlan& plan, int epoch);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> val_metric;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;

  void write_csv(const std::filesystem::path& path) const;
};

/// Optional per-epoch validation hook; its value is stored as the epoch's val_metric.
using EpochHook = std::function<std::optional<double>(int epoch, const MaeModel<float>& model)>;

/// Self-supervised masked reconstruction over all windows (targets and tags ignored).
TrainLog pretrain(MaeModel<float>& model, std::span<const SpectrogramWindow> windows, const TrainPlan& plan,
                  const EpochHook& hook = {});

/// Same objective restricted to normal-state windows; rejects anomaly-tagged input.
TrainLog finetune_ad(MaeModel<float>& model, std::span<const SpectrogramWindow> windows, const TrainPlan& plan,
                     const EpochHook& hook = {});

/// Supervised regression of the window target (squared error by default, plan.loss selects).
TrainLog finetune_tle(MaeModel<float>& model, std::span<const SpectrogramWindow> windows, const TrainPlan& plan,
                      const EpochHook& hook = {});

/// Distillation loss for one batch: alpha_task * MAE(student, truth) + alpha_kd * RMSE(student, teacher).
double kd_loss(std::span<const double> student, std::span<const double> teacher, std::span<const double> truth,
               const KDConfig& kd);

/// Fine-tunes `student` against targets and a frozen teacher's predictions.
TrainLog finetune_kd(MaeModel<float>& student, const MaeModel<float>& teacher,
                     std::span<const SpectrogramWindow> windows, const TrainPlan& plan, const KDConfig& kd,
                     const EpochHook& hook = {});

/// Regression predictions for a set of windows.
std::vector<double> predict(const MaeModel<float>& model, std::span<const SpectrogramWindow> windows);

/// Reconstruction errors with per-window mask seeds global_seed ^ window_index.
std::vector<double> reconstruction_errors(const MaeModel<float>& model, std::span<const SpectrogramWindow> windows,
                                          std::uint64_t global_seed, std::size_t first_index = 0);

/// Mean target of windows carrying one; 0 when none do.
double mean_target(std::span<const SpectrogramWindow> windows);

// ---------------------------------------------------------------------------------------
// Checkpoints.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  MaeModel<float> model;
  AdamWConfig adam;
  std::uint64_t provenance = 0;
};

void save_checkpoint(const MaeModel<float>& model, const std::filesystem::path& path, std::uint64_t provenance = 0,
                     const AdamWConfig& adam = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace shmfm
