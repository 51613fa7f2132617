#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "betof/coding_set.hpp"
#include "betof/physics.hpp"
#include "betof/scene.hpp"

namespace betof {

struct LossResult {
  double value = 0.0;
  std::vector<double> gradient;  // K x M, same layout as CodingSet::values
  int excluded = 0;              // pixels skipped (Fisher only)
};

/// Quartic with minima at 0 and 1: 4(x-0.5)^4 - 2(x-0.5)^2.
inline double double_well_value(double x) {
  const double u = x - 0.5;
  const double u2 = u * u;
  return 4.0 * u2 * u2 - 2.0 * u2;
}

inline double double_well_derivative(double x) {
  const double u = x - 0.5;
  return 16.0 * u * u * u - 4.0 * u;
}

inline LossResult loss_double_well(const CodingSet& coding) {
  if (coding.frozen) throw StateError("double-well loss applies to unfrozen codes");
  LossResult r{0.0, std::vector<double>(coding.values.size())};
  for (std::size_t n = 0; n < coding.values.size(); ++n) {
    r.value += double_well_value(coding.values[n]);
    r.gradient[n] = double_well_derivative(coding.values[n]);
  }
  return r;
}

inline double sign_or_zero(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Total variation along each code row; subgradient uses sign(0) = 0.
inline LossResult loss_first_difference(const CodingSet& coding) {
  if (coding.frozen) throw StateError("first-difference loss applies to unfrozen codes");
  LossResult r{0.0, std::vector<double>(coding.values.size(), 0.0)};
  for (int i = 0; i < coding.K; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * coding.M;
    for (int j = 0; j + 1 < coding.M; ++j) {
      const double d = coding.values[base + j + 1] - coding.values[base + j];
      r.value += std::abs(d);
      const double s = sign_or_zero(d);
      r.gradient[base + j + 1] += s;
      r.gradient[base + j] -= s;
    }
  }
  return r;
}

/// Proximal operator of lambda * sum_j |x[j+1] - x[j]| (1-D total variation
/// denoising), solved exactly in place by Condat's direct algorithm.
inline void prox_total_variation(std::span<double> x, double lambda) {
  const int n = static_cast<int>(x.size());
  if (n < 2 || !(lambda > 0.0)) return;
  const std::vector<double> in(x.begin(), x.end());
  double* out = x.data();
  int k = 0, k0 = 0, kplus = 0, kminus = 0;
  double umin = lambda, umax = -lambda;
  double vmin = in[0] - lambda, vmax = in[0] + lambda;
  const double two = 2.0 * lambda;
  for (;;) {
    while (k == n - 1) {
      if (umin < 0.0) {
        do out[k0++] = vmin; while (k0 <= kminus);
        k = kminus = k0;
        vmin = in[k];
        umin = lambda;
        umax = vmin + umin - vmax;
      } else if (umax > 0.0) {
        do out[k0++] = vmax; while (k0 <= kplus);
        k = kplus = k0;
        vmax = in[k];
        umax = -lambda;
        umin = vmax + umax - vmin;
      } else {
        vmin += umin / (k - k0 + 1);
        do out[k0++] = vmin; while (k0 <= k);
        return;
      }
    }
    if ((umin += in[k + 1] - vmin) < -lambda) {
      do out[k0++] = vmin; while (k0 <= kminus);
      k = kminus = kplus = k0;
      vmin = in[k];
      vmax = vmin + two;
      umin = lambda;
      umax = -lambda;
    } else if ((umax += in[k + 1] - vmax) > lambda) {
      do out[k0++] = vmax; while (k0 <= kplus);
      k = kminus = kplus = k0;
      vmax = in[k];
      vmin = vmax - two;
      umin = lambda;
      umax = -lambda;
    } else {
      ++k;
      if (umin >= lambda) {
        kminus = k;
        vmin += (umin - lambda) / (kminus - k0 + 1);
        umin = lambda;
      }
      if (umax <= -lambda) {
        kplus = k;
        vmax += (umax + lambda) / (kplus - k0 + 1);
        umax = -lambda;
      }
    }
  }
}

/// Weight 1/(2 sigma^4) + 1/sigma^2 and its derivative with respect to sigma^2.
struct FisherWeight {
  double w;
  double dw_dvar;
};

inline FisherWeight fisher_weight(double var) {
  return {0.5 / (var * var) + 1.0 / var, -1.0 / (var * var * var) - 1.0 / (var * var)};
}

/// Fisher term of one pixel, -sum_i w(sigma_i^2) (dE(I_i)/dd)^2, with
///   sigma_i^2 = E(I_i) + E(n_d) + sigma_r^2.
/// Adds `scale` times its code gradient to `acc`. Returns nullopt when some
/// sigma_i vanishes (the pixel carries no usable information).
inline std::optional<double> fisher_pixel(const ForwardModel& model, const EchoGeometry& g, double ambient,
                                          const NoiseModel& noise, double scale, CodeGradientAccumulator& acc) {
  const auto K = static_cast<std::size_t>(model.channels());
  thread_local std::vector<double> value, slope, dv, ds;
  value.resize(K);
  slope.resize(K);
  dv.resize(K);
  ds.resize(K);
  model.response(g, ambient, value, slope);
  const double floor_var = noise.dark_expectation + noise.readout_sigma * noise.readout_sigma;
  for (std::size_t k = 0; k < K; ++k)
    if (!(value[k] + floor_var > 0.0)) return std::nullopt;
  double loss = 0.0;
  bool any = false;
  for (std::size_t k = 0; k < K; ++k) {
    const auto fw = fisher_weight(value[k] + floor_var);
    loss -= fw.w * slope[k] * slope[k];
    dv[k] = -scale * fw.dw_dvar * slope[k] * slope[k];
    ds[k] = -scale * 2.0 * fw.w * slope[k];
    any = any || dv[k] != 0.0 || ds[k] != 0.0;
  }
  if (any) model.accumulate(g, ambient, dv, ds, acc);
  return loss;
}

/// Fisher guidance loss summed over a set of pixels, with its code gradient.
/// Pixels where some sigma_i vanishes are skipped and counted in `excluded`.
template <typename PixelRange>
LossResult fisher_over_pixels(const ForwardModel& model, const Scene& scene, const NoiseModel& noise,
                              const PixelRange& pixels) {
  LossResult r;
  CodeGradientAccumulator acc(model.channels(), model.samples());
  for (std::size_t p : pixels) {
    if (!scene.valid(p)) continue;
    const auto g = model.geometry(scene.depth[p], scene.albedo[p], noise.photon_scale);
    const auto v = fisher_pixel(model, g, scene.ambient[p], noise, 1.0, acc);
    if (!v) {
      ++r.excluded;
      continue;
    }
    r.value += *v;
  }
  r.gradient = acc.gradient();
  return r;
}

inline LossResult loss_fisher(const Scene& scene, const CodingSet& coding, const TimingConfig& timing,
                              const AttenuationModel& att, const NoiseModel& noise) {
  scene.validate();
  noise.validate();
  const ForwardModel model(coding, timing, att);
  std::vector<std::size_t> all(scene.depth.size());
  for (std::size_t p = 0; p < all.size(); ++p) all[p] = p;
  return fisher_over_pixels(model, scene, noise, all);
}

/// Analytic dE(I_i)/dd for every pixel, K values per pixel (row-major by pixel).
inline std::vector<double> depth_derivatives(const Scene& scene, const CodingSet& coding, const TimingConfig& timing,
                                             const AttenuationModel& att, double photon_scale) {
  const ForwardModel model(coding, timing, att);
  const auto K = static_cast<std::size_t>(coding.K);
  std::vector<double> out(scene.depth.size() * K), value(K);
  for (std::size_t p = 0; p < scene.depth.size(); ++p) {
    const auto g = model.geometry(scene.depth[p], scene.albedo[p], photon_scale);
    model.response(g, scene.ambient[p], value, std::span<double>(out.data() + p * K, K));
  }
  return out;
}

}  // namespace betof
