#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "betof/coding_set.hpp"
#include "betof/physics.hpp"
#include "betof/scene.hpp"

namespace betof {

struct DepthEstimate {
  Grid<double> depth;
  Grid<unsigned char> valid;
  std::string method;
  std::optional<double> mae_mm;

  double invalid_fraction() const {
    if (valid.size() == 0) return 0.0;
    std::size_t bad = 0;
    for (std::size_t p = 0; p < valid.size(); ++p) bad += valid[p] ? 0 : 1;
    return static_cast<double>(bad) / valid.size();
  }
};

inline DepthEstimate empty_estimate(int width, int height, std::string method) {
  return {Grid<double>(width, height, 0.0), Grid<unsigned char>(width, height, 0), std::move(method), std::nullopt};
}

/// Mean |d_pred - d_gt| in millimeters over pixels valid in both estimate and scene.
inline double mae(const DepthEstimate& estimate, const Scene& scene) {
  if (!estimate.depth.same_shape(scene.depth)) throw ConfigError("estimate and scene dimensions differ");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < scene.depth.size(); ++p) {
    if (!estimate.valid[p] || !scene.valid(p)) continue;
    sum += std::abs(estimate.depth[p] - scene.depth[p]);
    ++n;
  }
  if (n == 0) throw NumericError("MAE undefined: no valid pixels");
  return 1000.0 * sum / static_cast<double>(n);
}

/// d = c (phi1 + phi2) T_burst / (4 pi): coarse delay phase plus in-window phase.
inline double compose_depth(double phi1, double phi2, const TimingConfig& timing) {
  return kSpeedOfLight * (phi1 + phi2) * timing.t_burst / (4.0 * kPi);
}

/// Phase of measurements taken at demodulation offsets {0, pi/2, pi, 3pi/2},
/// following I_k = B + A cos(phi + k pi/2). Returns nullopt at zero contrast.
inline std::optional<double> phase_shift_4step(std::span<const double> I) {
  const double num = I[3] - I[1];
  const double den = I[0] - I[2];
  if (num == 0.0 && den == 0.0) return std::nullopt;
  double phi = std::atan2(num, den);
  if (phi < 0.0) phi += 2.0 * kPi;
  if (phi >= 2.0 * kPi) phi = 0.0;
  return phi;
}

/// Continuous-wave emission/demodulation shape for the iToF baselines.
enum class Waveform { Sine, Square };

/// Correlation of emission and demodulation at phase offset psi (mean 1/4).
inline double amcw_correlation(Waveform w, double psi) {
  if (w == Waveform::Sine) return 0.25 * (1.0 + std::cos(psi));
  double wrapped = std::remainder(psi, 2.0 * kPi);  // (-pi, pi]
  return 0.5 - std::abs(wrapped) / (2.0 * kPi);
}

inline double unambiguous_range(double freq) { return kSpeedOfLight / (2.0 * freq); }

/// Four-step AMCW measurements per frequency: channels [4f, 4f+4) hold frequency f.
/// Ambient passes the 50% duty demodulation gate unscaled.
inline MeasurementStack simulate_amcw(const Scene& scene, std::span<const double> freqs, Waveform waveform,
                                      const AttenuationModel& att, double photon_scale = 1.0, int n_rep = 1) {
  scene.validate();
  att.validate();
  for (double f : freqs)
    if (!(f > 0.0)) throw ConfigError("modulation frequency must be > 0");
  const int K = 4 * static_cast<int>(freqs.size());
  MeasurementStack st = empty_stack(K, scene.width(), scene.height());
  for (std::size_t p = 0; p < scene.depth.size(); ++p) {
    const bool lit = scene.valid(p);
    st.valid[p] = lit ? 1 : 0;
    const double gain = lit ? n_rep * photon_scale * scene.albedo[p] * attenuation(att, scene.depth[p]) : 0.0;
    for (std::size_t f = 0; f < freqs.size(); ++f) {
      const double phi = lit ? 4.0 * kPi * freqs[f] * scene.depth[p] / kSpeedOfLight : 0.0;
      for (int k = 0; k < 4; ++k)
        st.clean[4 * f + static_cast<std::size_t>(k)][p] =
            gain * amcw_correlation(waveform, phi + k * kPi / 2.0) + 0.5 * scene.ambient[p];
    }
  }
  return st;
}

/// Photon scale that brings an AMCW stack of the scene to the target expected SNR.
inline double calibrate_amcw_scale(const Scene& scene, std::span<const double> freqs, Waveform waveform,
                                   const AttenuationModel& att, const NoiseModel& noise, double target_snr_db) {
  const auto unit = simulate_amcw(scene, freqs, waveform, att, 1.0);
  std::vector<double> signal, offset;
  for (const auto& ch : unit.clean)
    for (std::size_t p = 0; p < ch.size(); ++p) {
      if (!unit.valid[p]) continue;
      offset.push_back(0.5 * scene.ambient[p]);
      signal.push_back(ch[p] - offset.back());
    }
  return calibrate_scale(signal, offset, noise, target_snr_db);
}

/// Wrapped single-frequency depth from channels [offset, offset+4).
inline DepthEstimate decode_single_frequency(const MeasurementStack& stack, double freq, int channel_offset = 0) {
  DepthEstimate est = empty_estimate(stack.width(), stack.height(), "single-freq");
  std::array<double, 4> I{};
  std::vector<double> all(static_cast<std::size_t>(stack.K));
  for (std::size_t p = 0; p < stack.valid.size(); ++p) {
    if (!stack.valid[p]) continue;
    stack.pixel(p, all);
    for (int k = 0; k < 4; ++k) I[static_cast<std::size_t>(k)] = all[static_cast<std::size_t>(channel_offset + k)];
    const auto phi = phase_shift_4step(I);
    if (!phi) continue;
    est.depth[p] = kSpeedOfLight * *phi / (4.0 * kPi * freq);
    est.valid[p] = 1;
  }
  return est;
}

/// Wrap-count fraction beyond which a dual-frequency pixel is flagged invalid.
inline constexpr double kUnwrapTolerance = 0.35;

/// Unwraps the high-frequency depth (channels 4..7) with the low-frequency one (0..3).
inline DepthEstimate decode_dual_frequency(const MeasurementStack& stack, double f_low, double f_high) {
  if (!(f_low < f_high)) throw ConfigError("dual-frequency decode requires f_low < f_high");
  if (stack.K != 8) throw ConfigError("dual-frequency decode expects 8 channels");
  const auto low = decode_single_frequency(stack, f_low, 0);
  const auto high = decode_single_frequency(stack, f_high, 4);
  const double range_high = unambiguous_range(f_high);
  DepthEstimate est = empty_estimate(stack.width(), stack.height(), "dual-freq");
  for (std::size_t p = 0; p < est.valid.size(); ++p) {
    if (!low.valid[p] || !high.valid[p]) continue;
    const double x = (low.depth[p] - high.depth[p]) / range_high;
    const double k = std::round(x);
    if (std::abs(x - k) > kUnwrapTolerance) continue;
    est.depth[p] = high.depth[p] + k * range_high;
    est.valid[p] = 1;
  }
  return est;
}

/// Simulates and decodes a 4-step AMCW camera at one frequency; depths beyond
/// c/(2 freq) come back wrapped. No noise is drawn when `noise` is empty.
inline DepthEstimate itof_single_frequency(const Scene& scene, double freq, const std::optional<NoiseModel>& noise,
                                           const AttenuationModel& att, Waveform waveform = Waveform::Sine) {
  const double f[] = {freq};
  auto stack = simulate_amcw(scene, f, waveform, att, noise ? noise->photon_scale : 1.0);
  if (noise) stack = apply_noise(std::move(stack), *noise);
  auto est = decode_single_frequency(stack, freq);
  est.mae_mm = mae(est, scene);
  return est;
}

inline DepthEstimate itof_dual_frequency(const Scene& scene, double f_low, double f_high,
                                         const std::optional<NoiseModel>& noise, const AttenuationModel& att,
                                         Waveform waveform = Waveform::Sine) {
  if (!(f_low > 0.0 && f_low < f_high)) throw ConfigError("dual-frequency requires 0 < f_low < f_high");
  const double f[] = {f_low, f_high};
  auto stack = simulate_amcw(scene, f, waveform, att, noise ? noise->photon_scale : 1.0);
  if (noise) stack = apply_noise(std::move(stack), *noise);
  auto est = decode_dual_frequency(stack, f_low, f_high);
  est.method = waveform == Waveform::Sine ? "dual-freq-sine" : "dual-freq-square";
  est.mae_mm = mae(est, scene);
  return est;
}

/// Precomputed zero-mean unit-norm signatures across the depth window.
struct LookupTable {
  int K = 0;
  double grid_step = 0.0;
  std::vector<double> depth_grid;
  std::vector<double> signatures;  // depth_grid.size() x K
  int excluded = 0;                // degenerate depths dropped from the grid

  std::span<const double> signature(std::size_t n) const {
    return {signatures.data() + n * static_cast<std::size_t>(K), static_cast<std::size_t>(K)};
  }
};

/// Zero-means and unit-normalizes v in place; returns the norm before scaling.
inline double normalize_zero_mean(std::span<double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double norm = 0.0;
  for (double& x : v) {
    x -= mean;
    norm += x * x;
  }
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (double& x : v) x /= norm;
  return norm;
}

inline LookupTable build_lookup(const CodingSet& coding, const TimingConfig& timing, const AttenuationModel& att,
                                double grid_step) {
  if (!coding.frozen) throw StateError("lookup tables are built from frozen codes");
  if (!(grid_step > 0.0)) throw ConfigError("grid_step must be > 0");
  const ForwardModel model(coding, timing, att);
  const auto [lo, hi] = depth_window(timing);
  LookupTable t;
  t.K = coding.K;
  t.grid_step = grid_step;
  const auto K = static_cast<std::size_t>(coding.K);
  std::vector<double> sig(K);
  const auto count = static_cast<std::size_t>(std::floor((hi - lo) / grid_step + 1e-9)) + 1;
  for (std::size_t n = 0; n < count; ++n) {
    const double d = lo + static_cast<double>(n) * grid_step;
    const auto g = model.geometry(d, 1.0, 1.0);
    model.response(g, 0.0, sig, {});
    double peak = 0.0;
    for (double v : sig) peak = std::max(peak, std::abs(v));
    const double norm = normalize_zero_mean(sig);
    if (!g.lit || !(norm > 1e-12 * peak) || peak == 0.0) {
      ++t.excluded;
      continue;
    }
    t.depth_grid.push_back(d);
    t.signatures.insert(t.signatures.end(), sig.begin(), sig.end());
  }
  if (t.depth_grid.empty())
    throw NumericError("every lookup signature is degenerate: the codes cannot resolve depth");
  return t;
}

/// Zero-normalized cross-correlation against the table, with optional
/// parabolic refinement between the best entry and its grid neighbours.
inline DepthEstimate decode_lookup(const MeasurementStack& stack, const LookupTable& table, bool refine = true) {
  if (stack.K != table.K) throw ConfigError("stack channel count does not match lookup table");
  DepthEstimate est = empty_estimate(stack.width(), stack.height(), "lookup");
  const auto K = static_cast<std::size_t>(stack.K);
  const std::size_t N = table.depth_grid.size();
  std::vector<double> x(K), score(N);
  for (std::size_t p = 0; p < stack.valid.size(); ++p) {
    if (!stack.valid[p]) continue;
    stack.pixel(p, x);
    if (!(normalize_zero_mean(x) > 0.0)) continue;
    std::size_t best = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const double* s = table.signatures.data() + n * K;
      double dot = 0.0;
      for (std::size_t i = 0; i < K; ++i) dot += x[i] * s[i];
      score[n] = dot;
      if (dot > score[best]) best = n;
    }
    double d = table.depth_grid[best];
    // An exact match (score 1 up to rounding) is already the answer; the
    // correlation peak is a cusp there, so a parabola would pull it sideways.
    if (refine && best > 0 && best + 1 < N && score[best] < 1.0 - 1e-12) {
      const double step = table.grid_step;
      const bool adjacent = std::abs(table.depth_grid[best + 1] - d - step) < 1e-6 * step &&
                            std::abs(d - table.depth_grid[best - 1] - step) < 1e-6 * step;
      const double denom = score[best - 1] - 2.0 * score[best] + score[best + 1];
      if (adjacent && denom < 0.0) {
        const double delta = std::clamp(0.5 * (score[best - 1] - score[best + 1]) / denom, -0.5, 0.5);
        d += delta * step;
      }
    }
    est.depth[p] = d;
    est.valid[p] = 1;
  }
  return est;
}

}  // namespace betof
