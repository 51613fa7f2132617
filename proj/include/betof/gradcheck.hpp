#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "betof/learn.hpp"

namespace betof {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  int checked = 0;
  bool pass() const { return checked > 0 && max_rel_error < threshold; }
};

namespace gradcheck {

inline CodingSet random_codes(int K, const TimingConfig& t, std::uint64_t seed) {
  CodingSet c(K, t);
  for (std::size_t n = 0; n < c.values.size(); ++n) c.values[n] = SplitMix64::for_stream(seed, 5, n).uniform();
  return c;
}

inline Scene ramp(double lo, double hi, int w, int h, double ambient = 0.0) {
  SceneSpec s;
  s.kind = SceneKind::Ramp;
  s.d_min = lo;
  s.d_max = hi;
  s.width = w;
  s.height = h;
  s.albedo_pattern = AlbedoPattern::Gradient;
  s.ambient_level = ambient;
  return generate_scene(s);
}

inline TimingConfig timing(double tau, int samples) {
  TimingConfig t;
  t.tau = tau;
  t.samples = samples;
  return t;
}

inline std::size_t pick(std::uint64_t seed, int k, std::size_t n) {
  return static_cast<std::size_t>(SplitMix64::for_stream(seed, 6, static_cast<std::uint64_t>(k))() % n);
}

}  // namespace gradcheck

inline GradCheckResult check_double_well(std::uint64_t seed = 21) {
  GradCheckResult out{"double-well", 0.0, 1e-5, 0};
  const CodingSet c = gradcheck::random_codes(4, gradcheck::timing(0.0, 100), seed);
  const auto r = loss_double_well(c);
  const double h = 1e-5;
  for (int k = 0; k < 100; ++k, ++out.checked) {
    const std::size_t n = gradcheck::pick(seed, k, c.values.size());
    CodingSet p = c, m = c;
    p.values[n] += h;
    m.values[n] -= h;
    const double fd = (loss_double_well(p).value - loss_double_well(m).value) / (2 * h);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(r.gradient[n], fd, 1e-6));
  }
  return out;
}

/// Central differences of the first-difference loss away from ties, where it is smooth.
inline GradCheckResult check_first_difference(std::uint64_t seed = 22) {
  GradCheckResult out{"first-difference", 0.0, 1e-5, 0};
  const int M = 100;
  const CodingSet c = gradcheck::random_codes(4, gradcheck::timing(0.0, M), seed);
  const auto r = loss_first_difference(c);
  const double h = 1e-7;
  for (std::size_t n = 0; n < c.values.size() && out.checked < 100; ++n) {
    const int j = static_cast<int>(n % M);
    bool tie = false;
    for (int nb : {j - 1, j + 1})
      if (nb >= 0 && nb < M && std::abs(c.values[n] - c.values[n - j + nb]) < 10 * h) tie = true;
    if (tie) continue;
    CodingSet p = c, m = c;
    p.values[n] += h;
    m.values[n] -= h;
    const double fd = (loss_first_difference(p).value - loss_first_difference(m).value) / (2 * h);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(r.gradient[n], fd, 1e-6));
    ++out.checked;
  }
  return out;
}

/// dE(I_i)/dd against 1 mm central differences, at depths whose probes share a sample interval.
inline GradCheckResult check_fisher_depth(std::uint64_t seed = 4) {
  GradCheckResult out{"fisher-depth-derivative", 0.0, 1e-4, 0};
  const TimingConfig t = gradcheck::timing(tau_for_window_start(30.0), 1000);
  const Scene s = gradcheck::ramp(30.05, 33.0, 64, 8);
  const CodingSet codes = gradcheck::random_codes(4, t, seed);
  const AttenuationModel att;
  const double scale = 1e4;
  const auto analytic = depth_derivatives(s, codes, t, att, scale);
  const ForwardModel model(codes, t, att);
  const double h = 1e-3;
  std::vector<double> vp(4), vm(4);
  for (std::size_t p = 0; p < s.depth.size(); ++p) {
    const double d = s.depth[p];
    if (std::floor(t.shift_samples(d + h)) != std::floor(t.shift_samples(d - h))) continue;
    model.response(model.geometry(d + h, s.albedo[p], scale), s.ambient[p], vp, {});
    model.response(model.geometry(d - h, s.albedo[p], scale), s.ambient[p], vm, {});
    for (std::size_t i = 0; i < 4; ++i) {
      const double fd = (vp[i] - vm[i]) / (2 * h);
      out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic[p * 4 + i], fd, 1e-9));
    }
    ++out.checked;
  }
  return out;
}

inline GradCheckResult check_fisher_codes(std::uint64_t seed = 5) {
  GradCheckResult out{"fisher-code-gradient", 0.0, 1e-4, 0};
  const TimingConfig t = gradcheck::timing(tau_for_window_start(30.0), 200);
  const Scene s = gradcheck::ramp(30.1, 33.0, 16, 8, 0.3);
  const CodingSet codes = gradcheck::random_codes(4, t, seed);
  const AttenuationModel att;
  const NoiseModel noise{0.5, 1.0, 2e4, 0};
  const auto r = loss_fisher(s, codes, t, att, noise);
  const double h = 1e-5;
  for (int k = 0; k < 100; ++k, ++out.checked) {
    const std::size_t n = gradcheck::pick(seed, k, codes.values.size());
    CodingSet p = codes, m = codes;
    p.values[n] += h;
    m.values[n] -= h;
    const double fd = (loss_fisher(s, p, t, att, noise).value - loss_fisher(s, m, t, att, noise).value) / (2 * h);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(r.gradient[n], fd, 1e-9 * std::abs(r.value)));
  }
  return out;
}

/// A decoder with every parameter random, so no gradient is trivially zero.
inline MlpDecoder random_decoder(int K, std::uint64_t seed, double lo = 0.0, double hi = 7.5) {
  MlpDecoder d = make_decoder(K, {16, 16}, Activation::Tanh, lo, hi, seed);
  for (std::size_t n = 0; n < d.params.size(); ++n)
    d.params[n] = 0.8 * (2.0 * SplitMix64::for_stream(seed, 8, n).uniform() - 1.0);
  return d;
}

/// Parameter gradients of the decoder output, step 1e-5. The window offset is
/// zero so roundoff in the output does not swamp small derivatives; the
/// floor 1e-3 caps the relative error of derivatives below central-difference noise.
inline GradCheckResult check_decoder(std::uint64_t seed = 9) {
  GradCheckResult out{"decoder-backward", 0.0, 1e-5, 0};
  MlpDecoder d = random_decoder(4, seed);
  std::vector<double> feat(5);
  for (std::size_t i = 0; i < feat.size(); ++i) feat[i] = 2.0 * SplitMix64::for_stream(seed, 3, i).uniform() - 1.0;
  DecoderTape tape;
  decoder_forward(d, feat, &tape);
  std::vector<double> grad(d.params.size(), 0.0);
  decoder_backward(d, tape, 1.0, grad);
  const double h = 1e-5;
  for (int k = 0; k < 100; ++k, ++out.checked) {
    const std::size_t n = gradcheck::pick(seed, k, d.params.size());
    const double keep = d.params[n];
    d.params[n] = keep + h;
    const double up = decoder_forward(d, feat);
    d.params[n] = keep - h;
    const double dn = decoder_forward(d, feat);
    d.params[n] = keep;
    out.max_rel_error = std::max(out.max_rel_error, relative_error(grad[n], (up - dn) / (2 * h), 1e-3));
  }
  return out;
}

/// Whole pipeline: perturb one code sample, re-simulate the clean
/// measurements, add the same noise offsets, re-decode, and re-evaluate every
/// loss term on an 8 x 8 scene.
inline GradCheckResult check_end_to_end(std::uint64_t seed = 13) {
  GradCheckResult out{"end-to-end-code-gradient", 0.0, 1e-3, 0};
  const int M = 200;
  const TimingConfig t = gradcheck::timing(tau_for_window_start(30.0), M);
  const Scene s = gradcheck::ramp(30.2, 36.0, 8, 8, 0.5);
  const CodingSet codes = gradcheck::random_codes(4, t, seed);
  const AttenuationModel att;
  const NoiseModel noise{0.5, 1.0, 2e4, seed};
  const auto [lo, hi] = depth_window(t);
  MlpDecoder dec = random_decoder(4, seed, lo, hi);
  dec.intensity_scale = 50.0;
  std::vector<BatchEntry> batch;
  for (std::size_t p = 0; p < s.depth.size(); ++p) batch.push_back({&s, p});
  const ForwardModel model(codes, t, att);
  const auto eps = detail::draw_offsets(model, batch, noise, seed);
  LossWeights w;
  w.schedule.clear();
  w.gamma1 = 1e-3;
  w.gamma2 = 0.5;
  w.gamma3 = 0.2;
  auto eval = [&](const CodingSet& c) {
    return composite_loss(dec, batch, eps, c, t, att, noise, w, Reduction::Sum);
  };
  const auto r = eval(codes);
  double gmax = 0.0;
  for (double g : r.code_gradient) gmax = std::max(gmax, std::abs(g));
  const double h = 1e-6;
  for (int k = 0; k < 400 && out.checked < 40; ++k) {
    const std::size_t n = gradcheck::pick(seed, k, codes.values.size());
    const int j = static_cast<int>(n % M);
    bool tie = false;
    for (int nb : {j - 1, j + 1})
      if (nb >= 0 && nb < M && std::abs(codes.values[n] - codes.values[n - j + nb]) < 10 * h) tie = true;
    if (tie) continue;
    CodingSet p = codes, m = codes;
    p.values[n] += h;
    m.values[n] -= h;
    const double fd = (eval(p).parts.total - eval(m).parts.total) / (2 * h);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(r.code_gradient[n], fd, 1e-6 * gmax));
    ++out.checked;
  }
  return out;
}

inline std::vector<GradCheckResult> run_gradient_checks() {
  return {check_double_well(), check_first_difference(), check_fisher_depth(),
          check_fisher_codes(), check_decoder(),         check_end_to_end()};
}

}  // namespace betof
