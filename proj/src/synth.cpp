#include "shmfm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>

namespace shmfm {

void BridgeConfig::validate() const {
  if (modal_freqs.empty()) throw ConfigError("bridge needs at least one mode");
  if (modal_amps.size() != modal_freqs.size() || damping.size() != modal_freqs.size())
    throw ConfigError("modal_freqs, modal_amps and damping must have equal length");
  if (!(fs > 0.0)) throw ConfigError("fs must be positive");
  for (double f : modal_freqs)
    if (!(f > 0.0 && f < fs / 2.0)) throw ConfigError("modal frequencies must lie in (0, fs/2)");
  for (double d : damping)
    if (d < 0.0) throw ConfigError("damping must be >= 0");
  if (noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
  if (excitation_rate < 0.0) throw ConfigError("excitation_rate must be >= 0");
  if (!(anomaly_shift > 0.0 && anomaly_shift <= 1.0)) throw ConfigError("anomaly_shift must lie in (0, 1]");
}

void TrafficConfig::validate() const {
  if (arrival_rate_light < 0.0 || arrival_rate_heavy < 0.0) throw ConfigError("arrival rates must be >= 0");
  if (!(pulse_amp_heavy > pulse_amp_light)) throw ConfigError("heavy pulse amplitude must exceed light");
  if (!(pulse_dur_s > 0.0)) throw ConfigError("pulse_dur_s must be positive");
  if (crossing_frames < 1) throw ConfigError("crossing_frames must be >= 1");
  if (rate_modulation < 0.0 || rate_modulation >= 1.0) throw ConfigError("rate_modulation must lie in [0, 1)");
  if (!(modulation_period_s > 0.0)) throw ConfigError("modulation_period_s must be positive");
}

RawRecording gen_ambient(const BridgeConfig& cfg, double duration_s, bool damaged) {
  cfg.validate();
  if (duration_s < 1.0) throw ConfigError("duration must be at least 1 s");
  const auto n = static_cast<Index>(std::llround(duration_s * cfg.fs));
  const double shift = damaged ? cfg.anomaly_shift : 1.0;
  std::mt19937_64 kick_rng(derive_seed(cfg.seed, "synth.kicks"));
  std::mt19937_64 noise_rng(derive_seed(cfg.seed, "synth.noise"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  const std::size_t modes = cfg.modal_freqs.size();
  std::vector<std::complex<double>> state(modes), step(modes);
  std::vector<double> kick_scale(modes);
  for (std::size_t m = 0; m < modes; ++m) {
    const double omega = 2.0 * std::numbers::pi * cfg.modal_freqs[m] * shift;
    step[m] = std::exp(std::complex<double>(-cfg.damping[m], omega) / cfg.fs);
    // Kick variance chosen so the steady-state RMS of the mode is modal_amps[m].
    kick_scale[m] = cfg.excitation_rate > 0.0
                        ? cfg.modal_amps[m] * std::sqrt(2.0 * std::max(cfg.damping[m], 1e-3) / cfg.excitation_rate)
                        : 0.0;
    const double phase = 2.0 * std::numbers::pi * uniform(kick_rng);
    state[m] = std::polar(cfg.modal_amps[m] * std::numbers::sqrt2, phase);
  }

  RawRecording rec;
  rec.fs = cfg.fs;
  rec.samples.resize(n);
  const double kick_prob = cfg.excitation_rate / cfg.fs;
  for (Index i = 0; i < n; ++i) {
    double value = 0.0;
    for (std::size_t m = 0; m < modes; ++m) value += state[m].imag();
    rec.samples(i) = value + cfg.noise_std * normal(noise_rng);
    for (std::size_t m = 0; m < modes; ++m) {
      state[m] *= step[m];
      if (kick_prob > 0.0 && uniform(kick_rng) < kick_prob) {
        const double re = normal(kick_rng), im = normal(kick_rng);
        state[m] += kick_scale[m] * std::complex<double>(re, im) / std::numbers::sqrt2;
      }
    }
  }
  return rec;
}

namespace {

std::vector<double> arrivals(double rate_per_min, double modulation, double period_s, double phase, double duration_s,
                             std::mt19937_64& rng) {
  std::vector<double> out;
  if (rate_per_min <= 0.0) return out;
  const double peak = rate_per_min / 60.0 * (1.0 + modulation);
  std::exponential_distribution<double> gap(peak);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  double t = 0.0;
  while (true) {
    t += gap(rng);
    if (t >= duration_s) break;
    const double rate = rate_per_min / 60.0 * (1.0 + modulation * std::sin(2.0 * std::numbers::pi * t / period_s + phase));
    if (uniform(rng) * peak <= rate) out.push_back(t);
  }
  return out;
}

}  // namespace

TrafficRecording gen_traffic(const BridgeConfig& bridge, const TrafficConfig& traffic, double duration_s) {
  traffic.validate();
  if (duration_s < 60.0) throw ConfigError("traffic recordings must last at least 60 s");
  TrafficRecording out;
  out.recording = gen_ambient(bridge, duration_s, false);
  RawRecording& rec = out.recording;
  const Index n = rec.size();
  rec.labels.assign(static_cast<std::size_t>(n), 0);

  std::mt19937_64 rng(derive_seed(traffic.seed, "synth.traffic"));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double phase = 2.0 * std::numbers::pi * uniform(rng);

  std::vector<VehicleEvent> events;
  for (double t : arrivals(traffic.arrival_rate_light, traffic.rate_modulation, traffic.modulation_period_s, phase,
                           duration_s, rng))
    events.push_back({VehicleClass::light, t, 0, 0});
  for (double t : arrivals(traffic.arrival_rate_heavy, traffic.rate_modulation, traffic.modulation_period_s, phase,
                           duration_s, rng))
    events.push_back({VehicleClass::heavy, t, 0, 0});
  std::sort(events.begin(), events.end(),
            [](const VehicleEvent& a, const VehicleEvent& b) { return a.arrival_s < b.arrival_s; });

  const auto pulse_len = static_cast<Index>(std::llround(traffic.pulse_dur_s * rec.fs));
  const Index frame = 10;
  const Index label_len = frame * traffic.crossing_frames;
  Index next_free = 0;  // two vehicles never share a camera frame on the crossing line
  for (VehicleEvent& ev : events) {
    const auto start = static_cast<Index>(std::floor(ev.arrival_s * rec.fs));
    const double amp = (ev.cls == VehicleClass::heavy ? traffic.pulse_amp_heavy : traffic.pulse_amp_light) *
                       (0.7 + 0.6 * uniform(rng));
    std::vector<double> phases(bridge.modal_freqs.size());
    for (double& p : phases) p = 2.0 * std::numbers::pi * uniform(rng);
    double amp_norm = 0.0;
    for (double a : bridge.modal_amps) amp_norm += a;
    for (Index i = 0; i < pulse_len && start + i < n; ++i) {
      const double tau = static_cast<double>(i) / rec.fs;
      const double env = std::pow(std::sin(std::numbers::pi * static_cast<double>(i) / static_cast<double>(pulse_len)), 2);
      double carrier = 0.0;
      for (std::size_t m = 0; m < bridge.modal_freqs.size(); ++m)
        carrier += bridge.modal_amps[m] / amp_norm * std::sin(2.0 * std::numbers::pi * bridge.modal_freqs[m] * tau + phases[m]);
      carrier = 0.8 * carrier * 2.0 + 0.2 * normal(rng);
      rec.samples(start + i) += amp * env * carrier;
    }
    const Index centre = start + pulse_len / 2;
    Index label_start = std::max(centre / frame * frame, next_free);
    if (label_start >= n) {
      ev.label_start = n;
      ev.label_len = 0;
      continue;
    }
    const Index len = std::min(label_len, n - label_start);
    for (Index i = 0; i < len; ++i) {
      auto& l = rec.labels[static_cast<std::size_t>(label_start + i)];
      l = std::max<std::uint8_t>(l, static_cast<std::uint8_t>(ev.cls));  // heavy wins on conflict
    }
    ev.label_start = label_start;
    ev.label_len = len;
    next_free = label_start + len;
  }
  out.events = std::move(events);
  return out;
}

double bookkept_target(const std::vector<VehicleEvent>& events, Index window_start, Index window_len, VehicleClass k) {
  Index count = 0;
  for (const VehicleEvent& ev : events) {
    if (k != VehicleClass::any && ev.cls != k) continue;
    const Index lo = std::max(ev.label_start, window_start);
    const Index hi = std::min(ev.label_start + ev.label_len, window_start + window_len);
    if (hi > lo) count += hi - lo;
  }
  return static_cast<double>(count) / 10.0;
}

namespace {
std::string describe(const BridgeConfig& b) {
  std::string s;
  char buf[64];
  auto add = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%s=%.17g;", key, v);
    s += buf;
  };
  for (std::size_t m = 0; m < b.modal_freqs.size(); ++m) {
    add("f", b.modal_freqs[m]);
    add("a", b.modal_amps[m]);
    add("d", b.damping[m]);
  }
  add("rate", b.excitation_rate);
  add("noise", b.noise_std);
  add("shift", b.anomaly_shift);
  add("fs", b.fs);
  s += "seed=" + std::to_string(b.seed);
  return s;
}
}  // namespace

std::uint64_t config_hash(const BridgeConfig& bridge) { return fnv1a(describe(bridge)); }

std::uint64_t config_hash(const BridgeConfig& bridge, const TrafficConfig& t) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.17g;%.17g;%.17g;%.17g;%.17g;%d;%.17g;%.17g;%llu", t.arrival_rate_light,
                t.arrival_rate_heavy, t.pulse_amp_light, t.pulse_amp_heavy, t.pulse_dur_s, t.crossing_frames,
                t.rate_modulation, t.modulation_period_s, static_cast<unsigned long long>(t.seed));
  return fnv1a(buf, config_hash(bridge));
}

}  // namespace shmfm
