#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <unistd.h>

#include "betof/bench.hpp"
#include "betof/gradcheck.hpp"

using namespace betof;

namespace {

TimingConfig window_at(double start, int samples = 1000) {
  TimingConfig t;
  t.tau = tau_for_window_start(start);
  t.samples = samples;
  return t;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("betof_learn_" + std::to_string(::getpid())) / name;
  std::filesystem::create_directories(p.parent_path());
  return p;
}

// Dual projected gradient on min 0.5|x - y|^2 + lambda sum |x_{i+1} - x_i|;
// slow but obviously correct.
std::vector<double> tv_prox_oracle(const std::vector<double>& y, double lambda) {
  const std::size_t n = y.size();
  std::vector<double> z(n - 1, 0.0), x(n);
  auto primal = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      double dtz = 0.0;
      if (i > 0) dtz += z[i - 1];
      if (i + 1 < n) dtz -= z[i];
      x[i] = y[i] - dtz;
    }
  };
  for (int it = 0; it < 200000; ++it) {
    primal();
    for (std::size_t i = 0; i + 1 < n; ++i) z[i] = std::clamp(z[i] + 0.25 * (x[i + 1] - x[i]), -lambda, lambda);
  }
  primal();
  return x;
}

std::vector<Scene> planes_across(const TimingConfig& t, int n, double inset) {
  const auto [lo, hi] = depth_window(t);
  std::vector<Scene> out;
  for (int i = 0; i < n; ++i) {
    SceneSpec s;
    s.kind = SceneKind::Plane;
    s.d_min = s.d_max = lo + inset + (hi - lo - 2 * inset) * (i + 0.5) / n;
    s.albedo_pattern = AlbedoPattern::Constant;
    out.push_back(generate_scene(s));
  }
  return out;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 3;
  c.steps_per_epoch = 4;
  c.batch = 128;
  c.finetune_epochs = 1;
  c.switch_interval = 1;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Optimizer, SgdStep) {
  Optimizer o(OptimizerKind::Sgd, 2);
  std::vector<double> p{1.0, -2.0}, g{0.5, -1.0};
  o.step(p, g, 0.1);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  EXPECT_DOUBLE_EQ(p[1], -1.9);
}

TEST(Optimizer, AdamFirstStepHasLearningRateMagnitude) {
  Optimizer o(OptimizerKind::Adam, 3);
  std::vector<double> p{0.0, 0.0, 0.0}, g{3.0, -1e-3, 0.0};
  o.step(p, g, 0.01);
  EXPECT_NEAR(p[0], -0.01, 1e-10);
  EXPECT_NEAR(p[1], 0.01, 1e-7);
  EXPECT_EQ(p[2], 0.0);
}

TEST(Optimizer, RejectsSizeMismatchAndUnknownNames) {
  Optimizer o(OptimizerKind::Sgd, 2);
  std::vector<double> p{0.0}, g{0.0};
  EXPECT_THROW(o.step(p, g, 0.1), StateError);
  EXPECT_THROW(parse_optimizer("lbfgs"), ConfigError);
  EXPECT_EQ(parse_optimizer("gd"), OptimizerKind::Sgd);
}

TEST(TotalVariationProx, MatchesDualOracle) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    std::vector<double> y(40);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = SplitMix64::for_stream(seed, 1, i).uniform();
    for (double lambda : {0.01, 0.1, 0.7}) {
      auto x = y;
      prox_total_variation(x, lambda);
      const auto ref = tv_prox_oracle(y, lambda);
      for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(x[i], ref[i], 1e-9) << "seed " << seed << " i " << i;
    }
  }
}

TEST(TotalVariationProx, LargeLambdaGivesTheMean) {
  std::vector<double> x{0.0, 1.0, 0.0, 1.0, 1.0};
  prox_total_variation(x, 100.0);
  for (double v : x) EXPECT_NEAR(v, 0.6, 1e-12);
}

TEST(Decoder, UntrainedOutputIsWindowMidpoint) {
  const MlpDecoder d = make_decoder(4, {8, 8}, Activation::Tanh, 30.0, 37.5, 1);
  const std::vector<double> f{0.3, -0.1, 0.5, -0.7, 1.2};
  EXPECT_DOUBLE_EQ(decoder_forward(d, f), 33.75);
}

TEST(Decoder, DeterministicAndInsideWindow) {
  const MlpDecoder d = random_decoder(4, 3, 30.0, 37.5);
  std::vector<double> f(5);
  for (int k = 0; k < 500; ++k) {
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = 20.0 * (SplitMix64::for_stream(k, 2, i).uniform() - 0.5);
    const double y = decoder_forward(d, f);
    EXPECT_EQ(y, decoder_forward(d, f));
    EXPECT_GE(y, 30.0);
    EXPECT_LE(y, 37.5);
  }
}

TEST(Decoder, RejectsNonFiniteInput) {
  const MlpDecoder d = make_decoder(4, {8}, Activation::Relu, 0.0, 7.5, 1);
  std::vector<double> f{0.0, 0.0, std::nan(""), 0.0, 1.0};
  EXPECT_THROW(decoder_forward(d, f), NumericError);
}

TEST(Decoder, BackwardMatchesFiniteDifferences) {
  const auto r = check_decoder();
  EXPECT_EQ(r.checked, 100);
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Decoder, ReluBackwardMatchesFiniteDifferences) {
  MlpDecoder d = random_decoder(4, 12);
  d.activation = Activation::Relu;
  std::vector<double> f{0.4, -0.2, 0.9, -0.6, 0.3};
  DecoderTape tape;
  decoder_forward(d, f, &tape);
  std::vector<double> grad(d.params.size(), 0.0);
  decoder_backward(d, tape, 1.0, grad);
  double worst = 0.0;
  for (std::size_t n = 0; n < d.params.size(); ++n) {
    const double keep = d.params[n];
    d.params[n] = keep + 1e-6;
    const double up = decoder_forward(d, f);
    d.params[n] = keep - 1e-6;
    const double dn = decoder_forward(d, f);
    d.params[n] = keep;
    worst = std::max(worst, relative_error(grad[n], (up - dn) / 2e-6, 1e-3));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Decoder, ZeroUpstreamGivesZeroGradients) {
  const MlpDecoder d = random_decoder(4, 4);
  std::vector<double> f{0.1, 0.2, -0.3, 0.0, 0.8};
  DecoderTape tape;
  decoder_forward(d, f, &tape);
  std::vector<double> grad(d.params.size(), 0.0);
  const auto dx = decoder_backward(d, tape, 0.0, grad);
  for (double g : grad) EXPECT_EQ(g, 0.0);
  for (double g : dx) EXPECT_EQ(g, 0.0);
}

// With no hidden layer the map is affine before the output scaling, so the
// input gradient is the weight row times the scaling derivative.
TEST(Decoder, LinearLayerInputGradientIsWeightRow) {
  MlpDecoder d = make_decoder(4, {}, Activation::Tanh, 0.0, 2.0, 1);
  for (std::size_t n = 0; n < d.params.size(); ++n) d.params[n] = 0.1 * static_cast<double>(n) - 0.2;
  std::vector<double> f{0.5, -0.5, 0.25, -0.25, 1.0};
  DecoderTape tape;
  const double y = decoder_forward(d, f, &tape);
  std::vector<double> grad(d.params.size(), 0.0);
  const auto dx = decoder_backward(d, tape, 1.0, grad);
  const double s = y / 2.0;  // sigmoid(z)
  const double scale = 2.0 * s * (1.0 - s);
  ASSERT_EQ(dx.size(), 5u);
  for (std::size_t i = 0; i < dx.size(); ++i)
    EXPECT_NEAR(dx[i] / scale, d.params[d.weight_offset(0) + i], 1e-14);
}

TEST(Decoder, CheckpointRoundTripIsExact) {
  const MlpDecoder d = random_decoder(4, 8, 30.0, 37.5);
  const auto path = scratch_dir("decoder.csv");
  save_decoder_csv(path.string(), d);
  const MlpDecoder e = load_decoder_csv(path.string());
  EXPECT_EQ(e.params, d.params);
  EXPECT_EQ(e.widths, d.widths);
  EXPECT_EQ(e.lo, d.lo);
  EXPECT_EQ(e.hi, d.hi);
  EXPECT_EQ(e.activation, d.activation);
}

TEST(Features, ZeroMeanUnitNormPlusIntensity) {
  const std::vector<double> x{4.0, 1.0, 2.0, 5.0};
  std::vector<double> f(5);
  make_features(x, 6.0, f);
  double mean = 0.0, norm = 0.0;
  for (int i = 0; i < 4; ++i) mean += f[static_cast<std::size_t>(i)] / 4.0;
  for (int i = 0; i < 4; ++i) norm += f[static_cast<std::size_t>(i)] * f[static_cast<std::size_t>(i)];
  EXPECT_NEAR(mean, 0.0, 1e-15);
  EXPECT_NEAR(norm, 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(f[4], 2.0);
}

TEST(Curriculum, Schedule) {
  TrainConfig c;
  EXPECT_EQ(curriculum_snr(5, c).db, 5.23);
  EXPECT_FALSE(curriculum_snr(5, c).random);
  EXPECT_EQ(curriculum_snr(15, c).db, 3.68);
  EXPECT_EQ(curriculum_snr(25, c).db, 2.22);
  const auto r = curriculum_snr(35, c);
  EXPECT_TRUE(r.random);
  EXPECT_EQ(r.lo, 2.22);
  EXPECT_EQ(r.hi, 5.23);
  EXPECT_THROW(curriculum_snr(-1, c), ConfigError);
}

TEST(Curriculum, PureFunctionOfEpochAndConfig) {
  TrainConfig c;
  for (int e = 0; e < 80; ++e) {
    const auto a = curriculum_snr(e, c), b = curriculum_snr(e, c);
    EXPECT_EQ(a.random, b.random);
    EXPECT_EQ(a.db, b.db);
  }
}

TEST(TrainConfig, LearningRateScheduleAndValidation) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(c.lr_at(9), 0.01);
  EXPECT_DOUBLE_EQ(c.lr_at(10), 0.007);
  EXPECT_DOUBLE_EQ(c.lr_at(25), 0.01 * 0.7 * 0.7);
  c.lr_decay = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.snr_levels.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(LossWeights, ScheduleSwitchesAtEpochForty) {
  LossWeights w;
  EXPECT_EQ(w.at_epoch(39).gamma1, 5e-4);
  EXPECT_EQ(w.at_epoch(39).gamma2, 5e-2);
  EXPECT_EQ(w.at_epoch(40).gamma1, 5e-5);
  EXPECT_EQ(w.at_epoch(40).gamma2, 1.0);
  EXPECT_EQ(w.at_epoch(40).gamma3, 5.0);
  w.gamma2 = -1.0;
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(CompositeLoss, ComponentMinima) {
  const TimingConfig t = window_at(30.0);
  CodingSet codes = square_codes(4, t);
  codes.frozen = false;
  SceneSpec spec;
  spec.kind = SceneKind::Ramp;
  const Scene s = generate_scene(spec);
  std::vector<double> d(s.depth.data().begin(), s.depth.data().end());
  const auto r = composite_loss(d, d, codes, s, t, AttenuationModel{}, NoiseModel{1, 1, 1e4, 0}, LossWeights{});
  EXPECT_EQ(r.parts.mse, 0.0);
  EXPECT_DOUBLE_EQ(r.parts.dw, -0.25 * 4 * 1000);
}

TEST(CompositeLoss, ZeroWeightsReduceToMse) {
  const TimingConfig t = window_at(30.0, 200);
  const CodingSet codes = gradcheck::random_codes(4, t, 2);
  SceneSpec spec;
  spec.kind = SceneKind::Sphere;
  spec.width = spec.height = 8;
  const Scene s = generate_scene(spec);
  std::vector<double> gt(s.depth.data().begin(), s.depth.data().end()), pred = gt;
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] += 0.01 * static_cast<double>(i % 7);
  double mse = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) mse += (pred[i] - gt[i]) * (pred[i] - gt[i]);
  const auto r = composite_loss(pred, gt, codes, s, t, AttenuationModel{}, NoiseModel{1, 1, 1e4, 0},
                                LossWeights::mse_only());
  EXPECT_DOUBLE_EQ(r.parts.total, mse);
  EXPECT_DOUBLE_EQ(r.parts.mse, mse);
  for (double g : r.code_gradient) EXPECT_EQ(g, 0.0);
}

TEST(CompositeLoss, RejectsNegativeWeights) {
  const TimingConfig t = window_at(30.0, 200);
  const CodingSet codes = gradcheck::random_codes(4, t, 2);
  SceneSpec spec;
  const Scene s = generate_scene(spec);
  LossWeights w;
  w.gamma1 = -1.0;
  const std::vector<double> none;
  EXPECT_THROW(composite_loss(none, none, codes, s, t, AttenuationModel{}, NoiseModel{1, 1, 1, 0}, w), ConfigError);
}

TEST(CompositeLoss, EndToEndCodeGradientMatchesFiniteDifferences) {
  const auto r = check_end_to_end();
  EXPECT_GE(r.checked, 30);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(GradientSuites, AllPass) {
  for (const auto& r : run_gradient_checks()) {
    EXPECT_TRUE(r.pass()) << r.name << " max_rel_error " << r.max_rel_error;
    EXPECT_GT(r.checked, 0) << r.name;
  }
}

TEST(TrainJoint, DeterministicForFixedSeed) {
  const TimingConfig t = window_at(30.0);
  const std::vector<Scene> train{bucket_scene({30, 33, {}}, 16, 16, 0.2, 1, 0, true),
                                 bucket_scene({30, 33, {}}, 16, 16, 0.2, 2, 2, true)};
  const std::vector<Scene> val{bucket_scene({30, 33, {}}, 16, 16, 0.2, 3, 0, false)};
  CodingSet init = xavier_codes(4, t, 9);
  const auto a = train_joint(train, val, init, t, AttenuationModel{}, NoiseModel{1, 1, 1, 0}, quick_config());
  const auto b = train_joint(train, val, init, t, AttenuationModel{}, NoiseModel{1, 1, 1, 0}, quick_config());
  EXPECT_EQ(a.coding, b.coding);
  EXPECT_EQ(a.decoder.params, b.decoder.params);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].loss.total, b.log[i].loss.total);
    EXPECT_EQ(a.log[i].val_mae_mm, b.log[i].val_mae_mm);
  }
  EXPECT_TRUE(a.coding.frozen);
  EXPECT_EQ(a.log.size(), 4u);
  EXPECT_EQ(a.log.back().phase, "finetune");
}

TEST(TrainJoint, RejectsBadInputs) {
  const TimingConfig t = window_at(30.0);
  const std::vector<Scene> train{bucket_scene({30, 33, {}}, 16, 16, 0.2, 1, 0, true)};
  EXPECT_THROW(train_joint({}, {}, xavier_codes(4, t, 1), t, {}, {}, quick_config()), ConfigError);
  EXPECT_THROW(train_joint(train, {}, square_codes(4, t), t, {}, {}, quick_config()), StateError);
}

TEST(TrainJoint, DivergenceKeepsLastFiniteCheckpoint) {
  const TimingConfig t = window_at(30.0);
  const std::vector<Scene> train{bucket_scene({30, 33, {}}, 16, 16, 0.2, 1, 0, true)};
  TrainConfig c = quick_config();
  c.lr = 1e200;
  c.optimizer = OptimizerKind::Sgd;
  CodingSet init = square_codes(4, t);
  init.frozen = false;
  const auto r = train_joint(train, {}, init, t, AttenuationModel{}, NoiseModel{1, 1, 1, 0}, c);
  EXPECT_TRUE(r.aborted);
  EXPECT_FALSE(r.abort_reason.empty());
  EXPECT_TRUE(std::all_of(r.decoder.params.begin(), r.decoder.params.end(), [](double v) { return std::isfinite(v); }));
  EXPECT_NO_THROW(r.coding.validate());
}

// Noise-free planes across the window: the decoder should beat the lookup
// grid step. Constant albedo keeps the intensity feature informative where
// the code signatures are flat.
TEST(TrainJoint, NoiseFreePlanesBeatGridStep) {
  const TimingConfig t = window_at(30.0);
  TrainConfig c;
  c.epochs = 50;
  c.steps_per_epoch = 50;
  c.noiseless = true;
  c.seed = 0;
  CodingSet init = square_codes(4, t);
  init.frozen = false;
  const auto r = train_joint(planes_across(t, 64, 0.0), planes_across(t, 5, 0.3), init, t, AttenuationModel{},
                             NoiseModel{1, 1, 1, 0}, c);
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  EXPECT_LT(r.log.back().val_mae_mm, 10.0);
  EXPECT_LT(r.moved_fraction, 0.01);
}

TEST(TrainJoint, BinarizesAndPredictsInsideWindow) {
  const TimingConfig t = window_at(30.0);
  std::vector<Scene> train;
  for (int i = 0; i < 6; ++i) train.push_back(bucket_scene({30, 33, {}}, 64, 64, 0.2, 100 + i, i, true));
  const std::vector<Scene> val{bucket_scene({30, 33, {}}, 64, 64, 0.2, 7, 2, false)};
  TrainConfig c;
  c.epochs = 60;
  c.seed = 1;
  CodingSet init = square_codes(4, t);
  init.frozen = false;
  const auto r = train_joint(train, val, init, t, AttenuationModel{}, NoiseModel{1, 1, 1, 0}, c);
  ASSERT_FALSE(r.aborted) << r.abort_reason;
  EXPECT_LT(r.moved_fraction, 0.01);
  EXPECT_EQ(r.log.size(), 70u);

  NoiseModel nm{1, 1, 1, 3};
  nm.photon_scale = calibrate_photon_scale(val[0], r.coding, t, AttenuationModel{}, nm, 5.23);
  const auto st = apply_noise(integrate_measurements(val[0], r.coding, t, AttenuationModel{}, nm.photon_scale), nm);
  const auto est = decode_mlp(st, r.decoder);
  const auto [lo, hi] = depth_window(t);
  for (std::size_t p = 0; p < est.depth.size(); ++p) {
    ASSERT_TRUE(est.valid[p]);
    EXPECT_GE(est.depth[p], lo);
    EXPECT_LE(est.depth[p], hi);
  }

  const auto path = scratch_dir("train_log.csv");
  save_train_log_csv(path.string(), r.log);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 71);
}

TEST(OptimizeCodes, BinarizesWithFewTransitions) {
  const TimingConfig t = window_at(30.0);
  const Scene s = design_scene(t);
  std::vector<int> with, without;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CodeOptConfig c;
    const auto r = optimize_codes(s, xavier_codes(4, t, seed), t, AttenuationModel{}, NoiseModel{1, 1, 1, 0}, c);
    EXPECT_GE(near_binary_fraction(r.coding), 0.99);
    const auto fr = freeze_binary(r.coding);
    EXPECT_LT(fr.moved_fraction, 0.01);
    for (int n : transition_count(fr.coding)) with.push_back(n);
    c.weights.gamma3 = 0.0;
    const auto r0 = optimize_codes(s, xavier_codes(4, t, seed), t, AttenuationModel{}, NoiseModel{1, 1, 1, 0}, c);
    for (int n : transition_count(freeze_binary(r0.coding).coding)) without.push_back(n);
  }
  std::sort(with.begin(), with.end());
  std::sort(without.begin(), without.end());
  EXPECT_LE(with[with.size() / 2], without[without.size() / 2]);
}

TEST(OptimizeCodes, RejectsFrozenStart) {
  const TimingConfig t = window_at(30.0);
  EXPECT_THROW(optimize_codes(design_scene(t, 8, 8), square_codes(4, t), t, {}, NoiseModel{1, 1, 1, 0}, {}),
               StateError);
}

TEST(DesignScene, SweepsTheWindow) {
  const TimingConfig t = window_at(60.0);
  const Scene s = design_scene(t, 16, 16);
  const auto [lo, hi] = depth_window(t);
  EXPECT_GT(s.depth[0], lo);
  EXPECT_LT(s.depth[s.depth.size() - 1], hi);
  for (std::size_t p = 1; p < s.depth.size(); ++p) EXPECT_GT(s.depth[p], s.depth[p - 1]);
}
