#include <gtest/gtest.h>

#include <cmath>

#include "betof/decode.hpp"

using namespace betof;

namespace {

Scene plane(double depth, int size = 8, double albedo = 0.8) {
  return Scene{Grid<double>(size, size, albedo), Grid<double>(size, size, 0.0), Grid<double>(size, size, depth)};
}

Scene ramp(double lo, double hi, int w = 64) {
  SceneSpec spec;
  spec.d_min = lo;
  spec.d_max = hi;
  spec.width = w;
  spec.height = 8;
  return generate_scene(spec);
}

TimingConfig window_from(double start) {
  TimingConfig t;
  t.tau = tau_for_window_start(start);
  return t;
}

}  // namespace

TEST(Compose, WindowStartAndArithmetic) {
  TimingConfig t;
  t.tau = 200e-9;
  const double phi1 = 2 * kPi * t.tau / t.t_burst;
  EXPECT_NEAR(compose_depth(phi1, 0.0, t), kSpeedOfLight * t.tau / 2, 1e-9);
  const double phi2 = 2 * kPi * 25e-9 / t.t_burst;
  EXPECT_NEAR(compose_depth(phi1, phi2, t), 33.727, 1e-3);
  const auto [lo, hi] = depth_window(t);
  double prev = -1.0;
  for (int k = 0; k < 100; ++k) {
    const double p2 = 2 * kPi * t.t_m / t.t_burst * k / 100.0;
    const double d = compose_depth(phi1, p2, t);
    EXPECT_GE(d, lo - 1e-9);
    EXPECT_LT(d, hi);
    EXPECT_GT(d, prev);
    prev = d;
  }
}

TEST(PhaseShift, RecoversPhase) {
  for (double phi : {0.0, 1.0, 2.5, 4.0, 6.2}) {
    std::array<double, 4> I{};
    for (int k = 0; k < 4; ++k) I[static_cast<std::size_t>(k)] = 1.0 + std::cos(phi + k * kPi / 2);
    const auto got = phase_shift_4step(I);
    ASSERT_TRUE(got.has_value());
    EXPECT_NEAR(*got, phi, 1e-12);
  }
  std::array<double, 4> flat{5, 5, 5, 5};
  EXPECT_FALSE(phase_shift_4step(flat).has_value());
}

TEST(SingleFrequency, WrapsBeyondRange) {
  const double f = 15e6;
  EXPECT_NEAR(unambiguous_range(f), 9.993, 1e-3);
  const auto est = itof_single_frequency(plane(12.0), f, std::nullopt, AttenuationModel{});
  for (std::size_t p = 0; p < est.depth.size(); ++p) EXPECT_NEAR(est.depth[p], 12.0 - unambiguous_range(f), 1e-3);
  EXPECT_NEAR(est.depth[0], 2.007, 1e-3);
  const auto in_range = itof_single_frequency(plane(5.0), f, std::nullopt, AttenuationModel{});
  EXPECT_NEAR(in_range.depth[0], 5.0, 1e-6);
  EXPECT_NEAR(unambiguous_range(2 * f), unambiguous_range(f) / 2, 1e-12);
}

TEST(SingleFrequency, WrapIdentityProperty) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto rng = SplitMix64::for_stream(seed, 3, 0);
    const double f = 1e6 + 40e6 * rng.uniform();
    const double d = 0.1 + 100.0 * rng.uniform();
    const auto est = itof_single_frequency(plane(d), f, std::nullopt, AttenuationModel{});
    const double R = unambiguous_range(f);
    const double diff = std::remainder(est.depth[0] - d, R);
    EXPECT_NEAR(diff, 0.0, 1e-6) << "f=" << f << " d=" << d;
  }
}

TEST(DualFrequency, UnwrapsFarPlane) {
  const auto est = itof_dual_frequency(plane(62.0), 1e6, 15e6, std::nullopt, AttenuationModel{});
  for (std::size_t p = 0; p < est.depth.size(); ++p) {
    ASSERT_TRUE(est.valid[p]);
    EXPECT_NEAR(est.depth[p], 62.0, 1e-6);
  }
  const auto near = itof_dual_frequency(plane(4.0), 1e6, 15e6, std::nullopt, AttenuationModel{});
  const auto single = itof_single_frequency(plane(4.0), 15e6, std::nullopt, AttenuationModel{});
  EXPECT_NEAR(near.depth[0], single.depth[0], 1e-9);
}

TEST(DualFrequency, MorePreciseThanLowFrequencyAlone) {
  const Scene s = ramp(5.0, 90.0);
  // Square correlation leaves a systematic phase error that scales with range.
  const auto dual = itof_dual_frequency(s, 1e6, 15e6, std::nullopt, AttenuationModel{}, Waveform::Square);
  const auto low = itof_single_frequency(s, 1e6, std::nullopt, AttenuationModel{}, Waveform::Square);
  EXPECT_LT(*dual.mae_mm, *low.mae_mm);
  // Same ordering with shot noise on sine correlation.
  NoiseModel noise{0.0, 0.0, 1e5, 17};
  const auto dual_n = itof_dual_frequency(s, 1e6, 15e6, noise, AttenuationModel{});
  const auto low_n = itof_single_frequency(s, 1e6, noise, AttenuationModel{});
  EXPECT_LT(*dual_n.mae_mm, *low_n.mae_mm);
}

TEST(DualFrequency, InconsistentWrapIsFlagged) {
  MeasurementStack st = empty_stack(8, 1, 1);
  st.valid[0] = 1;
  // Low-frequency phase says 0.45 of a high-frequency period away from the high estimate.
  const double f_low = 1e6, f_high = 15e6;
  const double d_high = 2.0;
  const double d_low = d_high + 0.45 * unambiguous_range(f_high);
  for (int k = 0; k < 4; ++k) {
    st.clean[static_cast<std::size_t>(k)][0] = 1 + std::cos(4 * kPi * f_low * d_low / kSpeedOfLight + k * kPi / 2);
    st.clean[static_cast<std::size_t>(4 + k)][0] = 1 + std::cos(4 * kPi * f_high * d_high / kSpeedOfLight + k * kPi / 2);
  }
  const auto est = decode_dual_frequency(st, f_low, f_high);
  EXPECT_FALSE(est.valid[0]);
}

TEST(Lookup, GridSizeOverPrototypeWindow) {
  const TimingConfig t = window_from(29.9792458);
  const auto table = build_lookup(square_codes(4, t), t, AttenuationModel{}, 0.01);
  EXPECT_EQ(table.depth_grid.size(), 750u);
  const auto [lo, hi] = depth_window(t);
  for (std::size_t n = 0; n < table.depth_grid.size(); ++n) {
    EXPECT_GE(table.depth_grid[n], lo);
    EXPECT_LE(table.depth_grid[n], hi);
    if (n) {
      EXPECT_GT(table.depth_grid[n], table.depth_grid[n - 1]);
    }
    double sum = 0.0, norm = 0.0;
    for (double v : table.signature(n)) {
      sum += v;
      norm += v * v;
    }
    EXPECT_NEAR(sum, 0.0, 1e-12);
    EXPECT_NEAR(norm, 1.0, 1e-12);
  }
}

TEST(Lookup, SignaturesIgnoreAlbedoScale) {
  const TimingConfig t = window_from(30.0);
  const CodingSet codes = square_codes(4, t);
  const auto table = build_lookup(codes, t, AttenuationModel{}, 0.05);
  for (double albedo : {0.05, 0.3, 1.0}) {
    Scene s = plane(31.5, 8, albedo);
    const auto st = integrate_measurements(s, codes, t, AttenuationModel{}, 123.0);
    std::vector<double> x(4);
    st.pixel(0, x);
    normalize_zero_mean(x);
    const auto ref = table.signature(30);  // 30.0 + 30 * 0.05 = 31.5
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(x[static_cast<std::size_t>(i)], ref[static_cast<std::size_t>(i)], 1e-9);
  }
}

TEST(Lookup, IdenticalCodesAreUnobservable) {
  const TimingConfig t = window_from(30.0);
  CodingSet same = square_codes(4, t);
  for (int i = 1; i < 4; ++i)
    for (int j = 0; j < same.M; ++j) same.at(i, j) = same.at(0, j);
  EXPECT_THROW(build_lookup(same, t, AttenuationModel{}, 0.01), NumericError);
  CodingSet soft(4, t, 0.5);
  EXPECT_THROW(build_lookup(soft, t, AttenuationModel{}, 0.01), StateError);
}

// Square gates cannot tell shifts apart once the echo sits wholly inside the
// last gate (shift >= 3M/4), so square-code sweeps stay below that depth.
constexpr double kSquareResolvable = 30.0 + 0.75 * 7.4948;

TEST(Lookup, OnGridDepthsAreExact) {
  const TimingConfig t = window_from(30.0);
  const CodingSet codes = square_codes(4, t);
  const auto table = build_lookup(codes, t, AttenuationModel{}, 0.01);
  for (std::size_t n = 5; table.depth_grid[n] < kSquareResolvable; n += 37) {
    const double d = table.depth_grid[n];
    const auto st = integrate_measurements(plane(d), codes, t, AttenuationModel{}, 10.0);
    const auto est = decode_lookup(st, table, true);
    EXPECT_EQ(est.depth[0], d);
  }
}

TEST(Lookup, OffGridErrorBounded) {
  const TimingConfig t = window_from(30.0);
  const CodingSet codes = square_codes(4, t);
  const double step = 0.01;
  const auto table = build_lookup(codes, t, AttenuationModel{}, step);
  double worst_raw = 0.0, sum_raw = 0.0, sum_ref = 0.0;
  for (int k = 0; k < 100; ++k) {
    const double d = 30.0 + 0.013 + 5.5 * k / 100.0;
    const auto st = integrate_measurements(plane(d, 8), codes, t, AttenuationModel{}, 10.0);
    const double raw = std::abs(decode_lookup(st, table, false).depth[0] - d);
    const double ref = std::abs(decode_lookup(st, table, true).depth[0] - d);
    worst_raw = std::max(worst_raw, raw);
    sum_raw += raw;
    sum_ref += ref;
  }
  EXPECT_LE(worst_raw, step / 2 + 1e-9);
  EXPECT_LT(sum_ref, sum_raw);
}

TEST(Lookup, GainOffsetInvarianceProperty) {
  const TimingConfig t = window_from(30.0);
  const CodingSet codes = square_codes(4, t);
  const auto table = build_lookup(codes, t, AttenuationModel{}, 0.02);
  SceneSpec spec;
  spec.kind = SceneKind::Sphere;
  spec.d_min = 30.2;
  spec.d_max = 33.0;
  spec.width = spec.height = 16;
  const Scene s = generate_scene(spec);
  auto st = integrate_measurements(s, codes, t, AttenuationModel{}, 1e5);
  st = apply_noise(st, NoiseModel{0.0, 0.0, 1.0, 4});
  const auto base = decode_lookup(st, table);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto rng = SplitMix64::for_stream(seed, 1, 0);
    const double alpha = 0.01 + 20.0 * rng.uniform();
    const double beta = -100.0 + 200.0 * rng.uniform();
    MeasurementStack moved = st;
    for (auto& g : moved.noisy)
      for (auto& v : g.data()) v = alpha * v + beta;
    const auto est = decode_lookup(moved, table);
    for (std::size_t p = 0; p < est.depth.size(); ++p) EXPECT_NEAR(est.depth[p], base.depth[p], 1e-9);
  }
}

TEST(Lookup, ZeroVariancePixelIsInvalid) {
  const TimingConfig t = window_from(30.0);
  const auto table = build_lookup(square_codes(4, t), t, AttenuationModel{}, 0.05);
  MeasurementStack st = empty_stack(4, 2, 1);
  st.valid[0] = st.valid[1] = 1;
  for (int i = 0; i < 4; ++i) st.clean[static_cast<std::size_t>(i)][0] = 3.0;
  st.clean[0][1] = 4.0;
  const auto est = decode_lookup(st, table);
  EXPECT_FALSE(est.valid[0]);
  EXPECT_TRUE(est.valid[1]);
}

TEST(BurstVersusSingleFrequency, WrapContrast) {
  // Inside a window that starts beyond c T_m / 2, burst decoding stays put
  // while the single-frequency camera at f = 1/T_m wraps.
  const TimingConfig t = window_from(30.0);
  const CodingSet codes = square_codes(4, t);
  const auto table = build_lookup(codes, t, AttenuationModel{}, 0.01);
  const double f = 1.0 / t.t_m;
  for (double d : {30.3, 31.0, 32.2, 34.9, 35.5}) {
    const Scene s = plane(d);
    const auto st = integrate_measurements(s, codes, t, AttenuationModel{}, 10.0);
    EXPECT_NEAR(decode_lookup(st, table).depth[0], d, 0.005);
    const auto single = itof_single_frequency(s, f, std::nullopt, AttenuationModel{});
    EXPECT_GT(std::abs(single.depth[0] - d), 1.0);
  }
}

TEST(Mae, Examples) {
  const Scene s = plane(10.0, 8);
  DepthEstimate e = empty_estimate(8, 8, "x");
  for (std::size_t p = 0; p < e.depth.size(); ++p) {
    e.depth[p] = 10.0;
    e.valid[p] = 1;
  }
  EXPECT_EQ(mae(e, s), 0.0);
  for (auto& d : e.depth.data()) d = 10.010;
  EXPECT_NEAR(mae(e, s), 10.0, 1e-9);
  for (std::size_t p = 0; p < e.depth.size(); ++p) e.depth[p] = p % 2 ? 10.010 : 9.970;
  EXPECT_NEAR(mae(e, s), 20.0, 1e-9);
  for (auto& v : e.valid.data()) v = 0;
  EXPECT_THROW(mae(e, s), NumericError);
}
