#pragma once

// Seeded synthetic bridge vibration: damped structural modes re-excited at random epochs,
// ambient noise, an optional stiffness-change proxy (all modal frequencies scaled down), and
// vehicle passages with camera-style labels (10-sample groups per frame).

#include "shmfm/common.hpp"
#include "shmfm/signal.hpp"

#include <cstdint>
#include <vector>

namespace shmfm {

struct BridgeConfig {
  std::vector<double> modal_freqs{2.9, 6.3, 11.7, 17.4, 24.8};        // Hz
  std::vector<double> modal_amps{0.02, 0.015, 0.011, 0.008, 0.006};  // g (steady-state RMS)
  std::vector<double> damping{0.8, 1.0, 1.4, 1.8, 2.2};              // amplitude decay rate, 1/s
  double excitation_rate = 5.0;                                      // re-excitations per second
  double noise_std = 0.004;                                          // g
  double anomaly_shift = 0.93;
  double fs = 100.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TrafficConfig {
  double arrival_rate_light = 6.0;  // vehicles / minute
  double arrival_rate_heavy = 2.0;
  double pulse_amp_light = 0.04;  // g
  double pulse_amp_heavy = 0.09;
  double pulse_dur_s = 3.0;
  int crossing_frames = 3;          // camera frames (10 samples each) labelled per vehicle
  double rate_modulation = 0.6;     // relative amplitude of slow traffic-density swings
  double modulation_period_s = 900.0;
  std::uint64_t seed = 2;

  void validate() const;
};

/// Ambient vibration; `damaged` scales every modal frequency by anomaly_shift while keeping
/// the excitation and noise streams identical.
RawRecording gen_ambient(const BridgeConfig& cfg, double duration_s, bool damaged);

struct VehicleEvent {
  VehicleClass cls = VehicleClass::light;
  double arrival_s = 0.0;
  Index label_start = 0;  // first labelled sample
  Index label_len = 0;    // multiple of 10 unless clipped at the recording end
};

struct TrafficRecording {
  RawRecording recording;  // with labels
  std::vector<VehicleEvent> events;
};

TrafficRecording gen_traffic(const BridgeConfig& bridge, const TrafficConfig& traffic, double duration_s);

/// Target of a window computed from the generator's own vehicle bookkeeping.
double bookkept_target(const std::vector<VehicleEvent>& events, Index window_start, Index window_len, VehicleClass k);

/// Stable hash of the generator configuration (for manifests).
std::uint64_t config_hash(const BridgeConfig& bridge);
std::uint64_t config_hash(const BridgeConfig& bridge, const TrafficConfig& traffic);

}  // namespace shmfm
