#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "betof/coding_set.hpp"
#include "betof/core.hpp"
#include "betof/scene.hpp"
#include "betof/timing.hpp"

namespace betof {

/// Correlates each code row with the circularly shifted rectangular pulse.
///
/// On the window grid the echo of a pixel whose delay is s = n + phi samples
/// (0 <= phi < 1) is the linear interpolation
///     echo_j = phi * chi_{n+1}(j) + (1 - phi) * chi_n(j),
/// where chi_m(j) = 1 iff (j - m) mod P lies inside the pulse, P being the
/// burst length in samples. Each chi_m restricted to [0, M) is at most two
/// contiguous runs, so correlations reduce to prefix-sum lookups.
class PulseCorrelator {
 public:
  PulseCorrelator(const CodingSet& coding, const TimingConfig& timing)
      : K_(coding.K), M_(coding.M), period_(timing.burst_samples()),
        width_(std::min<std::int64_t>(timing.pulse_samples(), timing.burst_samples())),
        prefix_(static_cast<std::size_t>(coding.K) * (coding.M + 1), 0.0) {
    for (int i = 0; i < K_; ++i) {
      double* p = prefix_.data() + static_cast<std::size_t>(i) * (M_ + 1);
      for (int j = 0; j < M_; ++j) p[j + 1] = p[j] + coding.at(i, j);
    }
  }

  int channels() const { return K_; }
  int samples() const { return M_; }

  /// Calls f(lo, hi) for each half-open run of window samples covered by chi_lag.
  template <typename F>
  void for_each_run(std::int64_t lag, F&& f) const {
    std::int64_t start = lag % period_;
    if (start < 0) start += period_;
    for (std::int64_t base : {start, start - period_}) {
      const std::int64_t lo = std::max<std::int64_t>(base, 0);
      const std::int64_t hi = std::min<std::int64_t>(base + width_, M_);
      if (lo < hi) f(static_cast<int>(lo), static_cast<int>(hi));
    }
  }

  /// sum_j D_i(j) * chi_lag(j)
  double overlap(int channel, std::int64_t lag) const {
    const double* p = prefix_.data() + static_cast<std::size_t>(channel) * (M_ + 1);
    double s = 0.0;
    for_each_run(lag, [&](int lo, int hi) { s += p[hi] - p[lo]; });
    return s;
  }

  /// sum_j D_i(j)
  double code_sum(int channel) const { return prefix_[static_cast<std::size_t>(channel) * (M_ + 1) + M_]; }

 private:
  int K_;
  int M_;
  std::int64_t period_;
  std::int64_t width_;
  std::vector<double> prefix_;
};

/// Echo placement and gain of one pixel.
struct EchoGeometry {
  std::int64_t lag = 0;  // n = floor(shift)
  double frac = 0.0;     // phi = shift - n
  double gain = 0.0;     // N_rep * scale * albedo * F(d)
  double dgain = 0.0;    // d(gain)/d(depth)
  bool lit = false;      // false for invalid pixels (depth <= 0)
};

/// Accumulates dL/dD for a K x M code set. Run updates are applied through a
/// difference array so each pixel costs O(K) regardless of M.
class CodeGradientAccumulator {
 public:
  CodeGradientAccumulator(int K, int M)
      : K_(K), M_(M), diff_(static_cast<std::size_t>(K) * (M + 1), 0.0), uniform_(static_cast<std::size_t>(K), 0.0) {}

  void add_run(int channel, int lo, int hi, double v) {
    double* d = diff_.data() + static_cast<std::size_t>(channel) * (M_ + 1);
    d[lo] += v;
    d[hi] -= v;
  }
  void add_uniform(int channel, double v) { uniform_[static_cast<std::size_t>(channel)] += v; }

  /// Dense K x M gradient.
  std::vector<double> gradient() const {
    std::vector<double> g(static_cast<std::size_t>(K_) * M_, 0.0);
    for (int i = 0; i < K_; ++i) {
      const double* d = diff_.data() + static_cast<std::size_t>(i) * (M_ + 1);
      double run = 0.0;
      for (int j = 0; j < M_; ++j) {
        run += d[j];
        g[static_cast<std::size_t>(i) * M_ + j] = run + uniform_[static_cast<std::size_t>(i)];
      }
    }
    return g;
  }

 private:
  int K_;
  int M_;
  std::vector<double> diff_;
  std::vector<double> uniform_;
};

/// Discretized coded-exposure forward model for one code set.
///
/// For pixel s and channel i (midpoint Riemann sum, dt / T_m = 1 / M):
///   I_i = gain * sum_j echo_j D_i(j) / M + I_amb * sum_j D_i(j) / M
/// The ambient term is in photoelectrons and is not multiplied by the photon scale.
class ForwardModel {
 public:
  ForwardModel(const CodingSet& coding, const TimingConfig& timing, const AttenuationModel& att)
      : timing_(timing), att_(att), corr_(coding, timing) {
    timing.validate();
    att.validate();
    if (coding.M != timing.samples) throw ConfigError("coding M does not match timing sample count");
    if (std::abs(coding.timing.t_m - timing.t_m) > 1e-12 * timing.t_m)
      throw ConfigError("coding T_m does not match timing T_m");
    if (coding.K < 3) throw ConfigError("at least K = 3 measurements are required");
  }

  int channels() const { return corr_.channels(); }
  int samples() const { return corr_.samples(); }
  const TimingConfig& timing() const { return timing_; }
  const PulseCorrelator& correlator() const { return corr_; }

  EchoGeometry geometry(double depth, double albedo, double scale) const {
    EchoGeometry g;
    if (!(depth > 0.0)) return g;
    const double shift = timing_.shift_samples(depth);
    const double n = std::floor(shift);
    g.lag = static_cast<std::int64_t>(n);
    g.frac = shift - n;
    const auto f = attenuation_with_derivative(att_, depth);
    const double k = timing_.n_rep * scale * albedo;
    g.gain = k * f.value;
    g.dgain = k * f.derivative;
    g.lit = true;
    return g;
  }

  /// Clean expectation I_i and its depth derivative for every channel.
  void response(const EchoGeometry& g, double ambient, std::span<double> value, std::span<double> slope) const {
    const double inv_m = 1.0 / samples();
    for (int i = 0; i < channels(); ++i) {
      const double amb = ambient * corr_.code_sum(i) * inv_m;
      if (!g.lit) {
        value[static_cast<std::size_t>(i)] = amb;
        if (!slope.empty()) slope[static_cast<std::size_t>(i)] = 0.0;
        continue;
      }
      const double s0 = corr_.overlap(i, g.lag);
      const double s1 = corr_.overlap(i, g.lag + 1);
      const double echo = g.frac * s1 + (1.0 - g.frac) * s0;
      value[static_cast<std::size_t>(i)] = g.gain * echo * inv_m + amb;
      if (!slope.empty()) {
        // One-sided (right) derivative at integer shifts.
        slope[static_cast<std::size_t>(i)] =
            (g.gain * (s1 - s0) * timing_.shift_per_meter() + g.dgain * echo) * inv_m;
      }
    }
  }

  /// Adds, for each channel i and sample j,
  ///   d_value[i] * dI_i/dD_ij + d_slope[i] * d(dI_i/dd)/dD_ij
  /// to the accumulator.
  void accumulate(const EchoGeometry& g, double ambient, std::span<const double> d_value,
                  std::span<const double> d_slope, CodeGradientAccumulator& acc) const {
    const double inv_m = 1.0 / samples();
    const double spm = timing_.shift_per_meter();
    for (int i = 0; i < channels(); ++i) {
      const double dv = d_value[static_cast<std::size_t>(i)];
      const double ds = d_slope.empty() ? 0.0 : d_slope[static_cast<std::size_t>(i)];
      if (dv != 0.0) acc.add_uniform(i, dv * ambient * inv_m);
      if (!g.lit) continue;
      // d(echo_j)/dD = echo_j; d(slope)/dD = gain*spm*(chi_{n+1} - chi_n) + dgain*echo_j
      const double echo_coef = (dv * g.gain + ds * g.dgain) * inv_m;
      const double edge_coef = ds * g.gain * spm * inv_m;
      const double w1 = echo_coef * g.frac + edge_coef;
      const double w0 = echo_coef * (1.0 - g.frac) - edge_coef;
      if (w1 != 0.0) corr_.for_each_run(g.lag + 1, [&](int lo, int hi) { acc.add_run(i, lo, hi, w1); });
      if (w0 != 0.0) corr_.for_each_run(g.lag, [&](int lo, int hi) { acc.add_run(i, lo, hi, w0); });
    }
  }

 private:
  TimingConfig timing_;
  AttenuationModel att_;
  PulseCorrelator corr_;
};

/// K per-pixel measurement grids, clean and (optionally) noisy.
struct MeasurementStack {
  int K = 0;
  std::vector<Grid<double>> clean;
  std::vector<Grid<double>> noisy;
  Grid<unsigned char> valid;
  double snr_db = std::numeric_limits<double>::quiet_NaN();

  int width() const { return valid.width(); }
  int height() const { return valid.height(); }
  bool has_noisy() const { return !noisy.empty(); }

  /// Measurements of one pixel (noisy when available, else clean).
  void pixel(std::size_t p, std::span<double> out) const {
    const auto& src = has_noisy() ? noisy : clean;
    for (int i = 0; i < K; ++i) out[static_cast<std::size_t>(i)] = src[static_cast<std::size_t>(i)][p];
  }
};

inline MeasurementStack empty_stack(int K, int width, int height) {
  MeasurementStack s;
  s.K = K;
  s.clean.assign(static_cast<std::size_t>(K), Grid<double>(width, height));
  s.valid = Grid<unsigned char>(width, height, 0);
  return s;
}

/// Clean measurements I_i(s) for every pixel and channel.
inline MeasurementStack integrate_measurements(const Scene& scene, const CodingSet& coding, const TimingConfig& timing,
                                               const AttenuationModel& att, double photon_scale = 1.0) {
  scene.validate();
  if (!(photon_scale > 0.0)) throw ConfigError("photon_scale must be > 0");
  const ForwardModel model(coding, timing, att);
  MeasurementStack st = empty_stack(coding.K, scene.width(), scene.height());
  std::vector<double> value(static_cast<std::size_t>(coding.K));
  for (std::size_t p = 0; p < scene.depth.size(); ++p) {
    st.valid[p] = scene.valid(p) ? 1 : 0;
    const auto g = model.geometry(scene.depth[p], scene.albedo[p], photon_scale);
    model.response(g, scene.ambient[p], value, {});
    for (int i = 0; i < coding.K; ++i) st.clean[static_cast<std::size_t>(i)][p] = value[static_cast<std::size_t>(i)];
  }
  return st;
}

/// X = Poisson(I + E(n_d)) + N(0, sigma_r^2) drawn with one counter-based
/// stream per (channel, pixel), so the result is independent of evaluation order.
inline double sample_measurement(double clean, const NoiseModel& noise, std::uint64_t seed, std::uint64_t stream,
                                 std::uint64_t index) {
  auto rng = SplitMix64::for_stream(seed, stream, index);
  const double mean = std::max(clean, 0.0) + noise.dark_expectation;
  if (!std::isfinite(mean)) throw NumericError("non-finite photon count expectation");
  double x = 0.0;
  // Past ~1e12 counts the Poisson law is Gaussian to well below double
  // resolution, and the integer sampler would overflow or stall.
  if (mean > 1e12)
    x = std::normal_distribution<double>(mean, std::sqrt(mean))(rng);
  else if (mean > 0.0)
    x = static_cast<double>(std::poisson_distribution<std::int64_t>(mean)(rng));
  if (noise.readout_sigma > 0.0) x += std::normal_distribution<double>(0.0, noise.readout_sigma)(rng);
  return x;
}

/// 10 log10( mean(I^2) / mean((X - I)^2) ) over valid pixels.
inline double realized_snr_db(const MeasurementStack& stack) {
  if (!stack.has_noisy()) throw StateError("stack has no noisy measurements");
  double sig = 0.0, err = 0.0;
  for (int i = 0; i < stack.K; ++i) {
    const auto& c = stack.clean[static_cast<std::size_t>(i)];
    const auto& x = stack.noisy[static_cast<std::size_t>(i)];
    for (std::size_t p = 0; p < c.size(); ++p) {
      if (!stack.valid[p]) continue;
      sig += c[p] * c[p];
      err += (x[p] - c[p]) * (x[p] - c[p]);
    }
  }
  return 10.0 * std::log10(sig / err);
}

inline MeasurementStack apply_noise(MeasurementStack stack, const NoiseModel& noise) {
  noise.validate();
  if (stack.clean.size() != static_cast<std::size_t>(stack.K)) throw StateError("stack has no clean measurements");
  stack.noisy.clear();
  for (int i = 0; i < stack.K; ++i) {
    const auto& c = stack.clean[static_cast<std::size_t>(i)];
    Grid<double> x(c.width(), c.height());
    for (std::size_t p = 0; p < c.size(); ++p)
      x[p] = sample_measurement(c[p], noise, noise.seed, 100 + static_cast<std::uint64_t>(i), p);
    stack.noisy.push_back(std::move(x));
  }
  stack.snr_db = realized_snr_db(stack);
  return stack;
}

/// E[(X - I)^2] for one measurement: variance I + E(n_d) + sigma_r^2 plus the
/// squared dark-count offset E(n_d)^2.
inline double expected_noise_power(double clean, const NoiseModel& noise) {
  return std::max(clean, 0.0) + noise.dark_expectation + noise.readout_sigma * noise.readout_sigma +
         noise.dark_expectation * noise.dark_expectation;
}

/// Expected SNR (dB) of a clean stack under a noise model, without sampling.
inline double expected_snr_db(const MeasurementStack& stack, const NoiseModel& noise) {
  double sig = 0.0, pow = 0.0;
  for (int i = 0; i < stack.K; ++i) {
    const auto& c = stack.clean[static_cast<std::size_t>(i)];
    for (std::size_t p = 0; p < c.size(); ++p) {
      if (!stack.valid[p]) continue;
      sig += c[p] * c[p];
      pow += expected_noise_power(c[p], noise);
    }
  }
  return 10.0 * std::log10(sig / pow);
}

/// Finds the scale k such that measurements k * signal + offset reach the
/// target expected SNR. `signal` and `offset` are flattened valid entries.
inline double calibrate_scale(std::span<const double> signal, std::span<const double> offset, const NoiseModel& noise,
                              double target_db, double tol_db = 1e-6) {
  noise.validate();
  if (signal.size() != offset.size()) throw ConfigError("calibration signal/offset size mismatch");
  double sum_sig = 0.0;
  for (double v : signal) sum_sig += std::abs(v);
  if (signal.empty() || !(sum_sig > 0.0)) throw CalibrationError("cannot calibrate: clean signal is identically zero");

  auto snr = [&](double k) {
    double s = 0.0, p = 0.0;
    for (std::size_t n = 0; n < signal.size(); ++n) {
      const double I = k * signal[n] + offset[n];
      s += I * I;
      p += expected_noise_power(I, noise);
    }
    return 10.0 * std::log10(s / p);
  };

  double lo = 1e-12, hi = 1.0;
  if (snr(lo) > target_db) throw CalibrationError("target SNR is below the ambient-only floor");
  int guard = 0;
  while (snr(hi) < target_db) {
    hi *= 4.0;
    if (++guard > 200) throw CalibrationError("target SNR unreachable");
  }
  for (int it = 0; it < 400; ++it) {
    const double mid = std::sqrt(lo * hi);
    const double v = snr(mid);
    if (std::abs(v - target_db) < tol_db) return mid;
    (v < target_db ? lo : hi) = mid;
  }
  return std::sqrt(lo * hi);
}

/// Photon scale at which the scene's clean measurements have the target expected SNR.
inline double calibrate_photon_scale(const Scene& scene, const CodingSet& coding, const TimingConfig& timing,
                                     const AttenuationModel& att, const NoiseModel& noise, double target_snr_db) {
  const ForwardModel model(coding, timing, att);
  std::vector<double> signal, offset;
  std::vector<double> unit(static_cast<std::size_t>(coding.K)), amb(static_cast<std::size_t>(coding.K));
  for (std::size_t p = 0; p < scene.depth.size(); ++p) {
    if (!scene.valid(p)) continue;
    const auto g = model.geometry(scene.depth[p], scene.albedo[p], 1.0);
    model.response(g, 0.0, unit, {});
    model.response(EchoGeometry{}, scene.ambient[p], amb, {});
    for (int i = 0; i < coding.K; ++i) {
      signal.push_back(unit[static_cast<std::size_t>(i)]);
      offset.push_back(amb[static_cast<std::size_t>(i)]);
    }
  }
  return calibrate_scale(signal, offset, noise, target_snr_db);
}

// Stack CSV: "stack,K,W,H,noisy" header, then one row per pixel in raster
// order: valid flag followed by K values (noisy if present, else clean).
// Shortest round-trip formatting keeps save/load exact.
inline void save_stack_csv(const std::string& path, const MeasurementStack& st) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  const auto& src = st.has_noisy() ? st.noisy : st.clean;
  out << "stack," << st.K << ',' << st.width() << ',' << st.height() << ',' << (st.has_noisy() ? 1 : 0) << '\n';
  for (std::size_t p = 0; p < st.valid.size(); ++p) {
    out << int(st.valid[p]);
    for (const auto& ch : src) out << ',' << format_double(ch[p]);
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Loads a stack CSV; the values land in `noisy` when the file says so.
inline MeasurementStack load_stack_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  auto fields = [](std::string_view s) {
    std::vector<std::string_view> f;
    for (std::size_t at = 0;;) {
      const auto c = s.find(',', at);
      f.push_back(s.substr(at, c == std::string_view::npos ? std::string_view::npos : c - at));
      if (c == std::string_view::npos) return f;
      at = c + 1;
    }
  };
  if (!std::getline(in, line)) throw ConfigError("stack CSV '" + path + "' is empty");
  const auto h = fields(line);
  if (h.size() != 5 || h[0] != "stack") throw ConfigError("stack CSV '" + path + "' has a bad header");
  const double k = parse_double(h[1]), w = parse_double(h[2]), ht = parse_double(h[3]);
  if (k < 1 || w < 1 || ht < 1 || k != std::floor(k) || w != std::floor(w) || ht != std::floor(ht))
    throw ConfigError("stack CSV '" + path + "' has bad dimensions");
  MeasurementStack st = empty_stack(static_cast<int>(k), static_cast<int>(w), static_cast<int>(ht));
  const bool noisy = parse_double(h[4]) != 0.0;
  if (noisy) st.noisy = st.clean;
  auto& dst = noisy ? st.noisy : st.clean;
  for (std::size_t p = 0; p < st.valid.size(); ++p) {
    if (!std::getline(in, line)) throw ConfigError("stack CSV '" + path + "' is truncated");
    const auto f = fields(line);
    if (f.size() != static_cast<std::size_t>(st.K) + 1)
      throw ConfigError("stack CSV row " + std::to_string(p) + " does not hold K values");
    st.valid[p] = parse_double(f[0]) != 0.0 ? 1 : 0;
    for (int i = 0; i < st.K; ++i) dst[static_cast<std::size_t>(i)][p] = parse_double(f[static_cast<std::size_t>(i) + 1]);
  }
  return st;
}

}  // namespace betof
