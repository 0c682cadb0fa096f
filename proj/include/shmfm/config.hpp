#pragma once

// INI experiment configuration. Sections mirror the library types:
//
//   [run]        seed, threads
//   [pipeline]   window_s, stride_s, energy_threshold, vehicle_class (light|heavy|any)
//   [model]      e_dim, d_dim, n_blocks, patch_size, e_heads, d_heads, mlp_ratio, mask_ratio
//   [train]      phase, base_lr, weight_decay, epochs, batch_size, warmup_epochs, mask_ratio,
//                max_grad_norm, beta1, beta2, adam_eps, loss (mse|mae)
//   [kd]         alpha_task, alpha_kd
//   [threshold]  step_fraction, max_steps
//   [bridge]     modal_freqs, modal_amps, damping (comma lists), excitation_rate, noise_std,
//                anomaly_shift, fs, seed
//   [traffic]    arrival_rate_light, arrival_rate_heavy, pulse_amp_light, pulse_amp_heavy,
//                pulse_dur_s, crossing_frames, rate_modulation, modulation_period_s, seed
//   [synth]      normal_s, damaged_s, traffic_s, format (bin|csv)
//   [eval]       filter_lengths, percent_base (prediction|truth), train_fraction, seed
//   [baseline]   kind (pca|knn|linreg), compression_factor, k
//   [ablation]   tasks, seeds, finetune_fraction, plus pretrain_* / finetune_* plan overrides
//   [paths]      free-form named paths, resolved relative to the config file
//
// Unknown sections or keys are rejected.

#include "shmfm/anomaly.hpp"
#include "shmfm/evaluation.hpp"
#include "shmfm/mae.hpp"
#include "shmfm/signal.hpp"
#include "shmfm/synth.hpp"
#include "shmfm/trainer.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace shmfm {

struct SynthSettings {
  double normal_s = 3600.0;
  double damaged_s = 1800.0;
  double traffic_s = 3600.0;
  std::string format = "bin";
};

struct EvalSettings {
  std::vector<int> filter_lengths{1, 15, 30, 60, 120, 240};
  PercentBase percent_base = PercentBase::mean_prediction;
  double train_fraction = 0.7;
  std::optional<std::uint64_t> seed;  // mask seed for reconstruction errors; run seed when unset
};

struct BaselineSettings {
  std::string kind = "pca";
  int compression_factor = 32;
  int k = 7;
};

struct AblationSettings {
  std::vector<std::string> tasks;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double finetune_fraction = 0.1;
  TrainPlan pretrain = TrainPlan::pretrain_defaults();
  TrainPlan finetune = TrainPlan::finetune_tle_defaults();
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  PipelineConfig pipeline;
  ModelConfig model = ModelConfig::family(24, 16);
  TrainPlan train;                // defaults of [train] phase (pretrain when unset) plus overrides
  bool train_phase_set = false;  // [train] phase given explicitly
  std::vector<std::pair<std::string, std::string>> train_overrides;
  KDConfig kd;
  ThresholdConfig threshold;
  BridgeConfig bridge;
  bool bridge_seed_set = false;
  TrafficConfig traffic;
  bool traffic_seed_set = false;
  SynthSettings synth;
  EvalSettings eval;
  BaselineSettings baseline;
  AblationSettings ablation;
  std::map<std::string, std::vector<std::filesystem::path>> paths;  // comma lists allowed

  /// Defaults of `phase` with the [train] overrides applied.
  TrainPlan plan_for(Phase phase) const;

  /// Single path entry or ConfigError naming the missing key.
  const std::filesystem::path& path(const std::string& key) const;
  std::vector<std::filesystem::path> path_list(const std::string& key) const;
  bool has_path(const std::string& key) const { return paths.count(key) != 0; }

  /// Resolved configuration as normalized INI text (stable across key order and formatting).
  std::string canonical() const;
  std::uint64_t hash() const { return fnv1a(canonical()); }
};

/// Parses INI text; relative paths are resolved against `base_dir`.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

std::vector<std::string> split_list(const std::string& text);

}  // namespace shmfm
