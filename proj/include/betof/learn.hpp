#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "betof/coding_set.hpp"
#include "betof/decode.hpp"
#include "betof/losses.hpp"
#include "betof/mlp.hpp"
#include "betof/optim.hpp"

namespace betof {

/// gamma1 (Fisher), gamma2 (double well), gamma3 (first difference), plus
/// epoch-keyed overrides of gamma1 and gamma2.
struct LossWeights {
  struct Change {
    int epoch;
    double gamma1;
    double gamma2;
  };
  double gamma1 = 5e-4;
  double gamma2 = 5e-2;
  double gamma3 = 5.0;
  std::vector<Change> schedule{{40, 5e-5, 1.0}};

  void validate() const {
    if (!(gamma1 >= 0.0 && gamma2 >= 0.0 && gamma3 >= 0.0)) throw ConfigError("loss weights must be >= 0");
    for (const auto& c : schedule)
      if (!(c.gamma1 >= 0.0 && c.gamma2 >= 0.0) || c.epoch < 0) throw ConfigError("bad loss weight schedule entry");
  }

  /// Weights in force at `epoch` (latest schedule entry not after it).
  LossWeights at_epoch(int epoch) const {
    LossWeights w = *this;
    int best = -1;
    for (const auto& c : schedule)
      if (c.epoch <= epoch && c.epoch >= best) {
        best = c.epoch;
        w.gamma1 = c.gamma1;
        w.gamma2 = c.gamma2;
      }
    w.schedule.clear();
    return w;
  }

  static LossWeights mse_only() { return LossWeights{0.0, 0.0, 0.0, {}}; }
};

/// How the first-difference term moves the codes: its subgradient, or an
/// exact proximal step after the smooth terms (no sign chatter at ties).
enum class FirstDifferenceStep { Prox, Subgradient };

inline FirstDifferenceStep parse_first_difference_step(std::string_view s) {
  if (s == "prox") return FirstDifferenceStep::Prox;
  if (s == "subgradient") return FirstDifferenceStep::Subgradient;
  throw ConfigError("unknown first_difference_step '" + std::string(s) + "' (expected prox or subgradient)");
}

/// Sum: the literal sums of the loss equations. Mean: MSE and Fisher averaged
/// over pixels so step sizes do not depend on the batch size; double-well and
/// first-difference describe the codes, not the batch, and stay summed.
enum class Reduction { Sum, Mean };

inline Reduction parse_reduction(std::string_view s) {
  if (s == "sum") return Reduction::Sum;
  if (s == "mean") return Reduction::Mean;
  throw ConfigError("unknown reduction '" + std::string(s) + "' (expected sum or mean)");
}

struct LossParts {
  double total = 0.0;
  double mse = 0.0;
  double fisher = 0.0;
  double dw = 0.0;
  double first = 0.0;
};

/// One training sample: a scene pixel and, optionally, its fixed noise draw
/// X - I (reparameterized noise, so gradients see only the clean model).
struct BatchEntry {
  const Scene* scene;
  std::size_t pixel;
};

struct CompositeResult {
  LossParts parts;
  std::vector<double> code_gradient;     // K x M
  std::vector<double> decoder_gradient;  // same layout as decoder params
  std::vector<double> predictions;       // per batch entry, NaN where skipped
  int excluded = 0;
};

namespace detail {

inline void add_regularizers(const CodingSet& coding, const LossWeights& w, CompositeResult& r) {
  if (coding.frozen) return;  // frozen codes are constants; their regularizers carry no gradient
  const auto dw = loss_double_well(coding);
  const auto first = loss_first_difference(coding);
  r.parts.dw = dw.value;
  r.parts.first = first.value;
  for (std::size_t n = 0; n < r.code_gradient.size(); ++n)
    r.code_gradient[n] += w.gamma2 * dw.gradient[n] + w.gamma3 * first.gradient[n];
}

inline void finish(const LossWeights& w, CompositeResult& r) {
  r.parts.total = r.parts.mse + w.gamma1 * r.parts.fisher + w.gamma2 * r.parts.dw + w.gamma3 * r.parts.first;
}

}  // namespace detail

/// Composite loss from given predictions. Code gradients here come from the
/// Fisher and regularizer terms only; the MSE path to the codes needs the
/// decoder (see the overload below).
inline CompositeResult composite_loss(std::span<const double> pred, std::span<const double> gt, const CodingSet& coding,
                                      const Scene& scene, const TimingConfig& timing, const AttenuationModel& att,
                                      const NoiseModel& noise, const LossWeights& weights,
                                      Reduction red = Reduction::Sum) {
  weights.validate();
  if (pred.size() != gt.size()) throw ConfigError("prediction and ground truth sizes differ");
  CompositeResult r;
  r.code_gradient.assign(coding.values.size(), 0.0);
  r.predictions.assign(pred.begin(), pred.end());
  double mse = 0.0;
  for (std::size_t n = 0; n < pred.size(); ++n) mse += (pred[n] - gt[n]) * (pred[n] - gt[n]);
  r.parts.mse = red == Reduction::Mean && !pred.empty() ? mse / static_cast<double>(pred.size()) : mse;
  if (weights.gamma1 > 0.0) {
    const ForwardModel model(coding, timing, att);
    std::vector<std::size_t> all(scene.depth.size());
    for (std::size_t p = 0; p < all.size(); ++p) all[p] = p;
    auto f = fisher_over_pixels(model, scene, noise, all);
    std::size_t n = 0;
    for (std::size_t p = 0; p < all.size(); ++p) n += scene.valid(p) ? 1 : 0;
    const double per = red == Reduction::Mean && n > 0 ? 1.0 / static_cast<double>(n) : 1.0;
    r.parts.fisher = per * f.value;
    r.excluded = f.excluded;
    for (std::size_t k = 0; k < r.code_gradient.size(); ++k) r.code_gradient[k] += weights.gamma1 * per * f.gradient[k];
  }
  detail::add_regularizers(coding, weights, r);
  detail::finish(weights, r);
  return r;
}

/// Full composite loss over a batch: simulate clean measurements with the
/// current codes, add the fixed noise offsets, decode with the MLP, and
/// backpropagate MSE into both the decoder and the codes. `noise_offsets`
/// holds K values per entry (empty for noise-free). Fisher is evaluated on
/// the batch pixels.
inline CompositeResult composite_loss(const MlpDecoder& decoder, std::span<const BatchEntry> batch,
                                      std::span<const double> noise_offsets, const CodingSet& coding,
                                      const TimingConfig& timing, const AttenuationModel& att,
                                      const NoiseModel& noise, const LossWeights& weights,
                                      Reduction red = Reduction::Sum) {
  weights.validate();
  const ForwardModel model(coding, timing, att);
  const auto K = static_cast<std::size_t>(coding.K);
  if (decoder.channels() != coding.K) throw ConfigError("decoder input width does not match K + 1");
  if (!noise_offsets.empty() && noise_offsets.size() != batch.size() * K)
    throw ConfigError("noise offsets must hold K values per batch entry");

  CompositeResult r;
  r.decoder_gradient.assign(decoder.params.size(), 0.0);
  r.predictions.assign(batch.size(), std::nan(""));
  CodeGradientAccumulator acc(coding.K, coding.M);
  std::vector<double> value(K), x(K), feat(K + 1), dx(K);
  DecoderTape tape;
  std::size_t used = 0;
  for (const auto& e : batch)
    if (e.scene->valid(e.pixel)) ++used;
  const double per_pixel = red == Reduction::Mean && used > 0 ? 1.0 / static_cast<double>(used) : 1.0;
  const double fisher_scale = weights.gamma1 * per_pixel;

  double mse = 0.0, fisher = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Scene& s = *batch[b].scene;
    const std::size_t p = batch[b].pixel;
    if (!s.valid(p)) continue;
    const auto g = model.geometry(s.depth[p], s.albedo[p], noise.photon_scale);
    if (weights.gamma1 > 0.0) {
      const auto f = fisher_pixel(model, g, s.ambient[p], noise, fisher_scale, acc);
      if (f)
        fisher += *f;
      else
        ++r.excluded;
    }
    model.response(g, s.ambient[p], value, {});
    for (std::size_t i = 0; i < K; ++i) x[i] = value[i] + (noise_offsets.empty() ? 0.0 : noise_offsets[b * K + i]);
    const double norm = make_features(x, decoder.intensity_scale, feat);
    if (!(norm > 0.0)) {
      ++r.excluded;
      continue;
    }
    const double pred = decoder_forward(decoder, feat, &tape);
    r.predictions[b] = pred;
    const double res = pred - s.depth[p];
    mse += res * res;
    const auto dfeat = decoder_backward(decoder, tape, 2.0 * res * per_pixel, r.decoder_gradient);
    features_backward(feat, norm, decoder.intensity_scale, dfeat, dx);
    model.accumulate(g, s.ambient[p], dx, {}, acc);
  }
  r.parts.mse = per_pixel * mse;
  r.parts.fisher = per_pixel * fisher;
  r.code_gradient = acc.gradient();
  detail::add_regularizers(coding, weights, r);
  detail::finish(weights, r);
  return r;
}

/// Runs the decoder on a stack (noisy channels when present).
inline DepthEstimate decode_mlp(const MeasurementStack& stack, const MlpDecoder& decoder) {
  if (stack.K != decoder.channels()) throw ConfigError("stack channel count does not match decoder");
  DepthEstimate est = empty_estimate(stack.width(), stack.height(), "mlp");
  const auto K = static_cast<std::size_t>(stack.K);
  std::vector<double> x(K), feat(K + 1);
  for (std::size_t p = 0; p < stack.valid.size(); ++p) {
    if (!stack.valid[p]) continue;
    stack.pixel(p, x);
    if (!(make_features(x, decoder.intensity_scale, feat) > 0.0)) continue;
    est.depth[p] = decoder_forward(decoder, feat);
    est.valid[p] = 1;
  }
  return est;
}

struct TrainConfig {
  int epochs = 200;
  int steps_per_epoch = 20;
  int batch = 1024;  // pixels per step
  double lr = 0.01;
  double code_lr_scale = 10.0;  // code step = lr * code_lr_scale
  double lr_decay = 0.7;
  int decay_interval = 10;
  std::vector<double> snr_levels{5.23, 3.68, 2.22};  // high to low
  int switch_interval = 10;
  LossWeights weights;
  OptimizerKind optimizer = OptimizerKind::Adam;     // decoder parameters
  OptimizerKind code_optimizer = OptimizerKind::Sgd;  // code samples
  FirstDifferenceStep first_step = FirstDifferenceStep::Prox;
  Reduction reduction = Reduction::Sum;
  std::vector<int> hidden{32, 32};
  Activation activation = Activation::Tanh;
  int finetune_epochs = 10;  // decoder-only epochs after freezing
  bool noiseless = false;    // skip noise sampling entirely
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (steps_per_epoch < 1 || batch < 1) throw ConfigError("steps_per_epoch and batch must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
    if (decay_interval < 1 || switch_interval < 1) throw ConfigError("decay and switch intervals must be >= 1");
    if (snr_levels.empty()) throw ConfigError("curriculum needs at least one SNR level");
    if (!(code_lr_scale >= 0.0)) throw ConfigError("code_lr_scale must be >= 0");
    if (finetune_epochs < 0) throw ConfigError("finetune_epochs must be >= 0");
    weights.validate();
  }

  double lr_at(int epoch) const { return lr * std::pow(lr_decay, epoch / decay_interval); }
};

struct SnrTarget {
  bool random = false;
  double db = 0.0;  // fixed level when !random
  double lo = 0.0;  // range of the random draw
  double hi = 0.0;
};

/// One level per switch interval in the configured order, then uniform random
/// in [lowest, highest] (drawn per batch).
inline SnrTarget curriculum_snr(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  if (cfg.snr_levels.empty()) throw ConfigError("curriculum needs at least one SNR level");
  const auto [lo, hi] = std::minmax_element(cfg.snr_levels.begin(), cfg.snr_levels.end());
  SnrTarget t{false, 0.0, *lo, *hi};
  const auto stage = static_cast<std::size_t>(epoch / cfg.switch_interval);
  if (stage < cfg.snr_levels.size()) {
    t.db = cfg.snr_levels[stage];
  } else {
    t.random = true;
  }
  return t;
}

struct TrainLogRow {
  int epoch = 0;
  std::string phase;  // joint or finetune
  std::string snr;    // dB or "random"
  double lr = 0.0;
  LossParts loss;
  double val_mae_mm = 0.0;
  std::string optimizer;
};

struct TrainResult {
  CodingSet coding;  // frozen
  MlpDecoder decoder;
  std::vector<TrainLogRow> log;
  double moved_fraction = 0.0;
  CodingSet soft;  // codes just before freezing
  bool aborted = false;
  std::string abort_reason;
};

inline void save_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& log) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write training log: " + path);
  f << "epoch,phase,snr_target,lr,loss_total,loss_mse,loss_fisher,loss_dw,loss_first,val_mae_mm,optimizer\n";
  for (const auto& r : log)
    f << r.epoch << ',' << r.phase << ',' << r.snr << ',' << format_double(r.lr) << ','
      << format_double(r.loss.total) << ',' << format_double(r.loss.mse) << ',' << format_double(r.loss.fisher) << ','
      << format_double(r.loss.dw) << ',' << format_double(r.loss.first) << ',' << format_double(r.val_mae_mm) << ','
      << r.optimizer << '\n';
  if (!f) throw IoError("failed writing training log: " + path);
}

namespace detail {

/// Photon scale bringing the given pixels to the target expected SNR.
inline double calibrate_entries(const ForwardModel& model, std::span<const BatchEntry> batch, const NoiseModel& noise,
                                double target_db) {
  const auto K = static_cast<std::size_t>(model.channels());
  std::vector<double> signal, offset, unit(K), amb(K);
  for (const auto& e : batch) {
    if (!e.scene->valid(e.pixel)) continue;
    model.response(model.geometry(e.scene->depth[e.pixel], e.scene->albedo[e.pixel], 1.0), 0.0, unit, {});
    model.response(EchoGeometry{}, e.scene->ambient[e.pixel], amb, {});
    signal.insert(signal.end(), unit.begin(), unit.end());
    offset.insert(offset.end(), amb.begin(), amb.end());
  }
  return calibrate_scale(signal, offset, noise, target_db, 1e-4);
}

inline std::vector<double> draw_offsets(const ForwardModel& model, std::span<const BatchEntry> batch,
                                        const NoiseModel& noise, std::uint64_t seed) {
  const auto K = static_cast<std::size_t>(model.channels());
  std::vector<double> eps(batch.size() * K, 0.0), value(K);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& e = batch[b];
    if (!e.scene->valid(e.pixel)) continue;
    model.response(model.geometry(e.scene->depth[e.pixel], e.scene->albedo[e.pixel], noise.photon_scale),
                   e.scene->ambient[e.pixel], value, {});
    for (std::size_t i = 0; i < K; ++i)
      eps[b * K + i] = sample_measurement(value[i], noise, seed, 100 + i, b) - value[i];
  }
  return eps;
}

/// One code update: optimizer step on `grad`, optional first-difference prox
/// with weight lr * gamma3 per row, then projection onto [0, 1].
inline void update_codes(CodingSet& coding, Optimizer& opt, std::span<const double> grad, double lr, double gamma3,
                         FirstDifferenceStep mode) {
  opt.step(coding.values, grad, lr);
  if (mode == FirstDifferenceStep::Prox && gamma3 > 0.0)
    for (int i = 0; i < coding.K; ++i) prox_total_variation(coding.row(i), lr * gamma3);
  for (double& v : coding.values) v = std::clamp(v, 0.0, 1.0);
}

/// Weights used for the gradient: with the prox step, gamma3 leaves the gradient.
inline LossWeights gradient_weights(LossWeights w, FirstDifferenceStep mode) {
  if (mode == FirstDifferenceStep::Prox) w.gamma3 = 0.0;
  return w;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace detail

/// Mean MAE (mm) of the decoder over validation scenes at a given SNR (noise-free
/// when `snr_db` is empty). Noise uses a fixed seed so epochs are comparable.
inline double validation_mae(const std::vector<Scene>& scenes, const CodingSet& coding, const MlpDecoder& decoder,
                             const TimingConfig& timing, const AttenuationModel& att, NoiseModel noise,
                             std::optional<double> snr_db) {
  double sum = 0.0;
  for (std::size_t n = 0; n < scenes.size(); ++n) {
    const Scene& s = scenes[n];
    if (snr_db) noise.photon_scale = calibrate_photon_scale(s, coding, timing, att, noise, *snr_db);
    auto st = integrate_measurements(s, coding, timing, att, snr_db ? noise.photon_scale : 1.0);
    if (snr_db) {
      NoiseModel nm = noise;
      nm.seed = SplitMix64::mix(noise.seed + 0x9e37 * (n + 1));
      st = apply_noise(std::move(st), nm);
    }
    sum += mae(decode_mlp(st, decoder), s);
  }
  return sum / static_cast<double>(scenes.size());
}

/// Joint code + decoder optimization with the SNR curriculum, followed by
/// binarization and decoder-only fine-tuning on the frozen codes.
inline TrainResult train_joint(const std::vector<Scene>& train, const std::vector<Scene>& validation,
                               const CodingSet& initial, const TimingConfig& timing, const AttenuationModel& att,
                               const NoiseModel& noise, const TrainConfig& cfg) {
  cfg.validate();
  noise.validate();
  if (train.empty()) throw ConfigError("train_joint needs at least one training scene");
  if (initial.K < 3) throw ConfigError("at least K = 3 measurements are required");
  if (initial.frozen) throw StateError("joint training starts from unfrozen codes");
  for (const auto& s : train) s.validate();

  std::vector<BatchEntry> pool;
  for (const auto& s : train)
    for (std::size_t p = 0; p < s.depth.size(); ++p)
      if (s.valid(p)) pool.push_back({&s, p});
  if (pool.empty()) throw ConfigError("training scenes have no valid pixels");

  const auto [lo, hi] = depth_window(timing);
  TrainResult res;
  res.coding = initial;
  res.decoder = make_decoder(initial.K, cfg.hidden, cfg.activation, lo, hi, SplitMix64::mix(cfg.seed + 17));

  const auto high = *std::max_element(cfg.snr_levels.begin(), cfg.snr_levels.end());
  const auto mid_snr = 0.5 * (high + *std::min_element(cfg.snr_levels.begin(), cfg.snr_levels.end()));

  // Total-intensity feature scale: mean clean total at the highest SNR.
  {
    const ForwardModel model(res.coding, timing, att);
    NoiseModel nm = noise;
    nm.photon_scale = cfg.noiseless ? 1.0 : detail::calibrate_entries(model, pool, noise, high);
    std::vector<double> v(static_cast<std::size_t>(initial.K));
    double tot = 0.0;
    for (const auto& e : pool) {
      model.response(model.geometry(e.scene->depth[e.pixel], e.scene->albedo[e.pixel], nm.photon_scale),
                     e.scene->ambient[e.pixel], v, {});
      for (double x : v) tot += x;
    }
    res.decoder.intensity_scale = tot > 0.0 ? tot / static_cast<double>(pool.size()) : 1.0;
  }

  Optimizer code_opt(cfg.code_optimizer, res.coding.values.size());
  Optimizer dec_opt(cfg.optimizer, res.decoder.params.size());
  const std::string opt_name = optimizer_name(cfg.optimizer) + "/" + optimizer_name(cfg.code_optimizer);
  CodingSet good_codes = res.coding;
  MlpDecoder good_decoder = res.decoder;
  std::vector<BatchEntry> batch(static_cast<std::size_t>(cfg.batch));
  std::uint64_t step = 0;

  auto run_epoch = [&](int epoch, int log_epoch, bool joint, double lr) -> std::optional<TrainLogRow> {
    const SnrTarget target = curriculum_snr(epoch, cfg);
    const LossWeights w = joint ? cfg.weights.at_epoch(epoch) : LossWeights::mse_only();
    TrainLogRow row;
    row.epoch = log_epoch;
    row.phase = joint ? "joint" : "finetune";
    row.snr = cfg.noiseless ? "inf" : (target.random ? "random" : format_double(target.db));
    row.lr = lr;
    row.optimizer = opt_name;
    for (int k = 0; k < cfg.steps_per_epoch; ++k, ++step) {
      auto rng = SplitMix64::for_stream(cfg.seed, 11, step);
      for (auto& e : batch) e = pool[static_cast<std::size_t>(rng() % pool.size())];
      const ForwardModel model(res.coding, timing, att);
      NoiseModel nm = noise;
      std::vector<double> eps;
      if (!cfg.noiseless) {
        const double db = target.random ? target.lo + (target.hi - target.lo) * rng.uniform() : target.db;
        nm.photon_scale = detail::calibrate_entries(model, batch, noise, db);
        eps = detail::draw_offsets(model, batch, nm, SplitMix64::mix(cfg.seed ^ (0x5851f42d4c957f2dULL * (step + 1))));
      }
      auto r = composite_loss(res.decoder, batch, eps, res.coding, timing, att, nm,
                              detail::gradient_weights(w, cfg.first_step), cfg.reduction);
      r.parts.total += (w.gamma3 - detail::gradient_weights(w, cfg.first_step).gamma3) * r.parts.first;
      if (!std::isfinite(r.parts.total) || !detail::all_finite(r.code_gradient) ||
          !detail::all_finite(r.decoder_gradient))
        return std::nullopt;
      dec_opt.step(res.decoder.params, r.decoder_gradient, lr);
      if (joint) {
        detail::update_codes(res.coding, code_opt, r.code_gradient, lr * cfg.code_lr_scale, w.gamma3, cfg.first_step);
      }
      const double inv = 1.0 / cfg.steps_per_epoch;
      row.loss.total += inv * r.parts.total;
      row.loss.mse += inv * r.parts.mse;
      row.loss.fisher += inv * r.parts.fisher;
      row.loss.dw += inv * r.parts.dw;
      row.loss.first += inv * r.parts.first;
    }
    if (!detail::all_finite(res.decoder.params)) return std::nullopt;
    const std::optional<double> val_snr =
        cfg.noiseless ? std::nullopt : std::optional<double>(target.random ? mid_snr : target.db);
    row.val_mae_mm = validation.empty() ? std::nan("")
                                        : validation_mae(validation, res.coding, res.decoder, timing, att, noise, val_snr);
    return row;
  };

  std::string failure;
  // A numeric failure inside an epoch (e.g. codes driven to all-zero so SNR
  // calibration is impossible) counts as divergence, like a non-finite loss.
  auto guarded = [&](int epoch, int log_epoch, bool joint, double lr) -> std::optional<TrainLogRow> {
    try {
      auto row = run_epoch(epoch, log_epoch, joint, lr);
      if (!row) failure = "loss became non-finite";
      return row;
    } catch (const NumericError& e) {
      failure = e.what();
      return std::nullopt;
    }
  };

  auto abort = [&](int epoch) {
    res.aborted = true;
    res.abort_reason = failure + " at epoch " + std::to_string(epoch) + "; kept last finite checkpoint";
    res.coding = good_codes;
    res.decoder = good_decoder;
  };

  for (int epoch = 0; epoch < cfg.epochs && !res.aborted; ++epoch) {
    auto row = guarded(epoch, epoch, true, cfg.lr_at(epoch));
    if (!row) {
      abort(epoch);
      break;
    }
    res.log.push_back(*row);
    good_codes = res.coding;
    good_decoder = res.decoder;
  }

  res.soft = res.coding;
  const auto fr = freeze_binary(res.coding);
  res.coding = fr.coding;
  res.moved_fraction = fr.moved_fraction;
  good_codes = res.coding;
  if (res.aborted) return res;

  const double ft_lr = cfg.lr_at(cfg.epochs - 1);
  dec_opt.resize(res.decoder.params.size());
  // Fine-tuning sees the full SNR range (the curriculum's random stage).
  const int random_epoch = cfg.switch_interval * static_cast<int>(cfg.snr_levels.size());
  for (int k = 0; k < cfg.finetune_epochs; ++k) {
    auto row = guarded(random_epoch, cfg.epochs + k, false, ft_lr);
    if (!row) {
      abort(cfg.epochs + k);
      break;
    }
    res.log.push_back(*row);
    good_decoder = res.decoder;
  }
  return res;
}

struct CodeOptConfig {
  int steps = 500;
  int steps_per_epoch = 10;  // epoch index drives the gamma and lr schedules
  double lr = 0.01;
  double lr_decay = 0.7;
  int decay_interval = 10;
  double snr_db = 30.0;  // design SNR; photon scale calibrated at this level
  LossWeights weights;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  FirstDifferenceStep first_step = FirstDifferenceStep::Prox;
  Reduction reduction = Reduction::Sum;

  void validate() const {
    if (steps < 1 || steps_per_epoch < 1) throw ConfigError("steps and steps_per_epoch must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
    if (decay_interval < 1) throw ConfigError("decay_interval must be >= 1");
    weights.validate();
  }
};

struct CodeOptLogRow {
  int step = 0;
  double lr = 0.0;
  LossParts loss;
  double near_binary = 0.0;
};

struct CodeOptResult {
  CodingSet coding;  // unfrozen, box-feasible
  std::vector<CodeOptLogRow> log;
};

/// Raster sweep of depths across the whole window at a fixed albedo and no
/// ambient. A ramp only has `width` distinct depths, and the Fisher gradient
/// then chops the codes into a comb matched to them.
inline Scene design_scene(const TimingConfig& timing, int width = 64, int height = 64, double albedo = 0.5) {
  if (width < 1 || height < 1) throw ConfigError("design scene needs a positive size");
  const auto [lo, hi] = depth_window(timing);
  Scene s;
  s.depth = Grid<double>(width, height, 0.0);
  s.albedo = Grid<double>(width, height, albedo);
  s.ambient = Grid<double>(width, height, 0.0);
  const double n = static_cast<double>(s.depth.size());
  for (std::size_t p = 0; p < s.depth.size(); ++p) s.depth[p] = lo + (hi - lo) * (static_cast<double>(p) + 0.5) / n;
  s.validate();
  return s;
}

/// Decoder-free code design: Fisher guidance plus the binarization and
/// transition regularizers, evaluated on one scene.
inline CodeOptResult optimize_codes(const Scene& scene, const CodingSet& initial, const TimingConfig& timing,
                                    const AttenuationModel& att, const NoiseModel& noise, const CodeOptConfig& cfg) {
  cfg.validate();
  scene.validate();
  if (initial.frozen) throw StateError("code optimization starts from unfrozen codes");
  CodeOptResult res{initial, {}};
  Optimizer opt(cfg.optimizer, initial.values.size());
  NoiseModel nm = noise;
  const std::vector<double> none;
  for (int step = 0; step < cfg.steps; ++step) {
    const int epoch = step / cfg.steps_per_epoch;
    const double lr = cfg.lr * std::pow(cfg.lr_decay, epoch / cfg.decay_interval);
    if (step % cfg.steps_per_epoch == 0)
      nm.photon_scale = calibrate_photon_scale(scene, res.coding, timing, att, noise, cfg.snr_db);
    const auto w = cfg.weights.at_epoch(epoch);
    auto r = composite_loss(none, none, res.coding, scene, timing, att, nm, detail::gradient_weights(w, cfg.first_step),
                            cfg.reduction);
    r.parts.total += (w.gamma3 - detail::gradient_weights(w, cfg.first_step).gamma3) * r.parts.first;
    if (!std::isfinite(r.parts.total) || !detail::all_finite(r.code_gradient))
      throw NumericError("code optimization diverged at step " + std::to_string(step));
    detail::update_codes(res.coding, opt, r.code_gradient, lr, w.gamma3, cfg.first_step);
    if (step % cfg.steps_per_epoch == 0 || step + 1 == cfg.steps)
      res.log.push_back({step, lr, r.parts, near_binary_fraction(res.coding)});
  }
  return res;
}

}  // namespace betof
