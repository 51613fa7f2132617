#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "betof/core.hpp"

namespace betof {

/// Burst-mode timing. All times in seconds.
struct TimingConfig {
  double t_burst = 5e-6;       // 200 kHz burst period
  double t_m = 50e-9;          // modulation / demodulation window
  double tau = 0.0;            // demodulation delay
  double pulse_width = 20e-9;  // laser pulse width
  int samples = 1000;          // M, samples per window
  int n_rep = 1;               // bursts accumulated per exposure

  void validate() const {
    if (!(pulse_width > 0.0)) throw ConfigError("pulse_width must be > 0");
    if (!(pulse_width <= t_m * (1 + 1e-12))) throw ConfigError("pulse_width must not exceed T_m");
    if (!(t_m <= t_burst * (1 + 1e-12))) throw ConfigError("T_m must not exceed T_burst");
    if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
    if (!(tau <= (t_burst - t_m) * (1 + 1e-12) + 1e-18)) throw ConfigError("tau must not exceed T_burst - T_m");
    if (samples < 2) throw ConfigError("sample count M must be >= 2");
    if (n_rep < 1) throw ConfigError("N_rep must be >= 1");
  }

  double sample_period() const { return t_m / samples; }

  /// Whole burst period in sample steps (the circular length of the echo).
  std::int64_t burst_samples() const { return std::llround(t_burst / sample_period()); }

  /// Number of 'on' samples of the rectangular pulse on the window grid.
  int pulse_samples() const {
    return static_cast<int>(std::lround(static_cast<double>(samples) * pulse_width / t_m));
  }

  /// d(shift in samples) / d(depth in meters).
  double shift_per_meter() const { return 2.0 / (kSpeedOfLight * sample_period()); }

  /// Echo delay relative to the window start, in samples, for a depth in meters.
  double shift_samples(double depth) const { return (2.0 * depth / kSpeedOfLight - tau) / sample_period(); }
};

/// Distance fall-off: max(floor, (reference_distance / d)^exponent), capped at 1.
struct AttenuationModel {
  double reference_distance = 1.0;
  double exponent = 2.0;
  double floor = 1e-12;

  void validate() const {
    if (!(reference_distance > 0.0)) throw ConfigError("attenuation reference_distance must be > 0");
    if (!(exponent >= 0.0)) throw ConfigError("attenuation exponent must be >= 0");
    if (!(floor > 0.0 && floor <= 1.0)) throw ConfigError("attenuation floor must lie in (0,1]");
  }
};

/// Sensor noise: Poisson shot + dark counts and Gaussian readout.
struct NoiseModel {
  double dark_expectation = 0.0;  // E(n_d), photoelectrons
  double readout_sigma = 0.0;     // sigma_r, photoelectrons
  double photon_scale = 1.0;      // photoelectrons per unit clean signal
  std::uint64_t seed = 0;

  void validate() const {
    if (!(dark_expectation >= 0.0)) throw ConfigError("dark_expectation must be >= 0");
    if (!(readout_sigma >= 0.0)) throw ConfigError("readout_sigma must be >= 0");
    if (!(photon_scale > 0.0)) throw ConfigError("photon_scale must be > 0");
  }
};

/// c * T_burst / 2.
inline double max_unambiguous_range(const TimingConfig& timing) { return kSpeedOfLight * timing.t_burst / 2.0; }

/// [c*tau/2, c*(tau+T_m)/2], the depths observable in one exposure.
inline std::pair<double, double> depth_window(const TimingConfig& timing) {
  return {kSpeedOfLight * timing.tau / 2.0, kSpeedOfLight * (timing.tau + timing.t_m) / 2.0};
}

/// Delay that places the window start at the given depth.
inline double tau_for_window_start(double depth) { return 2.0 * depth / kSpeedOfLight; }

/// Emitted rectangular pulse sampled on the window grid (unit amplitude, aligned to the cycle start).
inline std::vector<double> emission_waveform(const TimingConfig& timing) {
  timing.validate();
  std::vector<double> w(static_cast<std::size_t>(timing.samples), 0.0);
  const int on = std::min(timing.pulse_samples(), timing.samples);
  for (int j = 0; j < on; ++j) w[static_cast<std::size_t>(j)] = 1.0;
  return w;
}

struct AttenuationValue {
  double value;
  double derivative;  // d(value)/d(depth); zero where clamped
};

inline AttenuationValue attenuation_with_derivative(const AttenuationModel& model, double depth) {
  if (!(depth > 0.0)) throw DomainError("attenuation requires depth > 0");
  const double raw = std::pow(model.reference_distance / depth, model.exponent);
  if (raw >= 1.0) return {1.0, 0.0};
  if (raw <= model.floor) return {model.floor, 0.0};
  return {raw, -model.exponent * raw / depth};
}

inline double attenuation(const AttenuationModel& model, double depth) {
  return attenuation_with_derivative(model, depth).value;
}

}  // namespace betof
