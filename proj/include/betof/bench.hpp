#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "betof/decode.hpp"
#include "betof/learn.hpp"

namespace betof {

enum class Method { SingleFreq, DualFreqSine, DualFreqSquare, LookupLearned, MlpLearned, LookupSquare };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::SingleFreq,    Method::DualFreqSine, Method::DualFreqSquare,
                                     Method::LookupLearned, Method::MlpLearned,   Method::LookupSquare};
  return m;
}

inline std::string method_name(Method m) {
  switch (m) {
    case Method::SingleFreq: return "single-freq";
    case Method::DualFreqSine: return "dual-freq-sine";
    case Method::DualFreqSquare: return "dual-freq-square";
    case Method::LookupLearned: return "lookup+learned-codes";
    case Method::MlpLearned: return "mlp+learned-codes";
    case Method::LookupSquare: return "lookup+square-codes";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : all_methods())
    if (method_name(m) == s) return m;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

/// Starting point of the learned codes.
enum class CodeInit { Xavier, Square };

inline CodeInit parse_code_init(std::string_view s) {
  if (s == "xavier") return CodeInit::Xavier;
  if (s == "square") return CodeInit::Square;
  throw ConfigError("unknown code init '" + std::string(s) + "' (expected xavier or square)");
}

inline bool uses_learned_codes(Method m) { return m == Method::LookupLearned || m == Method::MlpLearned; }

struct Bucket {
  double lo = 0.0;  // meters
  double hi = 0.0;
  std::optional<double> tau;  // delay override, seconds

  std::string label() const { return format_double(lo) + "-" + format_double(hi); }
};

/// Parses "0-3" style labels.
inline Bucket parse_bucket(std::string_view s) {
  const auto dash = s.find('-', 1);
  if (dash == std::string_view::npos) throw ConfigError("bucket '" + std::string(s) + "' must look like lo-hi");
  try {
    return {parse_double(s.substr(0, dash)), parse_double(s.substr(dash + 1)), std::nullopt};
  } catch (const std::exception&) {
    throw ConfigError("bucket '" + std::string(s) + "' must look like lo-hi");
  }
}

/// Codes and decoder for one bucket, trained in the run or loaded from disk.
struct LearnedModel {
  CodingSet coding;
  MlpDecoder decoder;
  double moved_fraction = 0.0;
  bool aborted = false;
  std::string abort_reason;
  double train_seconds = 0.0;
};

struct ExperimentPlan {
  std::vector<Bucket> buckets{{0.0, 3.0, {}}, {30.0, 33.0, {}}, {60.0, 63.0, {}}, {90.0, 93.0, {}}};
  std::vector<double> snr_levels{5.23, 3.68, 2.22};  // H, M, L
  std::vector<Method> methods = all_methods();
  int scenes_per_cell = 3;
  int width = 64;
  int height = 64;
  double ambient = 0.2;
  double single_freq = 9.3e6;
  double dual_low = 1e6;
  double dual_high = 15e6;
  double grid_step = 0.01;
  int K = 4;
  int train_scenes = 6;
  CodeInit code_init = CodeInit::Square;  // xavier starts collapse to near-identical gates
  std::uint64_t seed = 1;
  int threads = 0;  // 0: one per hardware thread
  TimingConfig timing;  // tau is replaced per bucket
  AttenuationModel attenuation;
  NoiseModel noise{1.0, 1.0, 1.0, 0};
  TrainConfig train = [] {
    TrainConfig t;
    t.epochs = 60;  // desk-scale budget for the whole matrix
    return t;
  }();
  std::vector<std::optional<LearnedModel>> pretrained;  // per bucket; empty entries are trained

  void validate() const {
    if (buckets.empty()) throw ConfigError("plan needs at least one bucket");
    if (snr_levels.empty()) throw ConfigError("plan needs at least one SNR level");
    if (methods.empty()) throw ConfigError("plan needs at least one method");
    if (scenes_per_cell < 1) throw ConfigError("scenes_per_cell must be >= 1");
    if (train_scenes < 1) throw ConfigError("train_scenes must be >= 1");
    if (K < 3) throw ConfigError("at least K = 3 measurements are required");
    if (!(grid_step > 0.0)) throw ConfigError("grid_step must be > 0");
    if (!(single_freq > 0.0) || !(dual_low > 0.0 && dual_low < dual_high))
      throw ConfigError("modulation frequencies must satisfy 0 < dual_low < dual_high");
    if (ambient < 0.0) throw ConfigError("ambient must be >= 0");
    if (!pretrained.empty() && pretrained.size() != buckets.size())
      throw ConfigError("pretrained models must be given per bucket");
    for (std::size_t b = 0; b < buckets.size(); ++b) {
      const auto& x = buckets[b];
      if (!(x.lo >= 0.0 && x.lo < x.hi)) throw ConfigError("bucket " + x.label() + " needs 0 <= lo < hi");
      for (std::size_t c = 0; c < b; ++c)
        if (x.lo < buckets[c].hi && buckets[c].lo < x.hi)
          throw ConfigError("buckets " + buckets[c].label() + " and " + x.label() + " overlap");
    }
    timing.validate();
    attenuation.validate();
    noise.validate();
    train.validate();
  }
};

/// Delay for a bucket: the override, or the one placing the window start at lo.
/// Throws if the bucket does not fit inside the resulting window.
inline TimingConfig bucket_timing(const ExperimentPlan& plan, const Bucket& b) {
  TimingConfig t = plan.timing;
  t.tau = b.tau ? *b.tau : tau_for_window_start(b.lo);
  t.validate();
  const auto [lo, hi] = depth_window(t);
  if (b.lo < lo - 1e-9 || b.hi > hi + 1e-9)
    throw ConfigError("bucket " + b.label() + " m does not fit the depth window [" + format_double(lo) + ", " +
                      format_double(hi) + "] m");
  return t;
}

struct ResultRow {
  Method method{};
  std::string bucket;
  double snr_db = 0.0;
  double mae_mm = 0.0;
  double invalid_fraction = 0.0;
  double runtime_ms = 0.0;
};

struct ResultTable {
  std::vector<ResultRow> rows;
  std::vector<std::string> bucket_labels;
  std::vector<double> snr_levels;
};

/// Everything a bench run produces: the table plus artifacts for emit_table.
struct BenchRun {
  ResultTable table;
  std::vector<LearnedModel> learned;        // per bucket (empty coding if unused)
  std::vector<Grid<double>> ground_truth;   // first scene of each bucket
  std::vector<Grid<double>> previews;       // first-scene estimate per row
};

/// Procedural scene number `index` of a bucket. Evaluation scenes cycle ramp,
/// staircase and sphere; training scenes add planes. Albedo patterns rotate.
inline Scene bucket_scene(const Bucket& b, int width, int height, double ambient, std::uint64_t seed, int index,
                          bool training) {
  static constexpr SceneKind eval_kinds[] = {SceneKind::Ramp, SceneKind::Staircase, SceneKind::Sphere};
  static constexpr SceneKind train_kinds[] = {SceneKind::Ramp, SceneKind::Staircase, SceneKind::Sphere,
                                              SceneKind::Plane};
  static constexpr AlbedoPattern patterns[] = {AlbedoPattern::Gradient, AlbedoPattern::Checker,
                                               AlbedoPattern::NoiseTexture, AlbedoPattern::Constant};
  SceneSpec s;
  s.kind = training ? train_kinds[index % 4] : eval_kinds[index % 3];
  s.albedo_pattern = patterns[(index + (training ? 1 : 0)) % 4];
  s.width = width;
  s.height = height;
  s.d_min = b.lo;
  s.d_max = b.hi;
  s.ambient_level = ambient;
  s.seed = seed;
  return generate_scene(s);
}

namespace detail {

inline std::uint64_t plan_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return SplitMix64::for_stream(seed, 100 + a, (b << 20) ^ c)();
}

inline LearnedModel train_bucket(const ExperimentPlan& plan, std::size_t bi, const TimingConfig& t) {
  const Bucket& b = plan.buckets[bi];
  std::vector<Scene> train, val;
  for (int i = 0; i < plan.train_scenes; ++i)
    train.push_back(bucket_scene(b, plan.width, plan.height, plan.ambient,
                                 plan_stream(plan.seed, 2, bi, static_cast<std::uint64_t>(i)), i, true));
  val.push_back(bucket_scene(b, plan.width, plan.height, plan.ambient, plan_stream(plan.seed, 3, bi), 2, false));
  TrainConfig cfg = plan.train;
  cfg.snr_levels = plan.snr_levels;
  cfg.seed = plan_stream(plan.seed, 4, bi);
  const auto start = std::chrono::steady_clock::now();
  CodingSet init = plan.code_init == CodeInit::Square ? square_codes(plan.K, t)
                                                      : xavier_codes(plan.K, t, plan_stream(plan.seed, 5, bi));
  init.frozen = false;
  auto r = train_joint(train, val, init, t, plan.attenuation, plan.noise, cfg);
  LearnedModel m{std::move(r.coding), std::move(r.decoder), r.moved_fraction, r.aborted, r.abort_reason, 0.0};
  m.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

struct BucketOutput {
  std::vector<ResultRow> rows;
  std::vector<Grid<double>> previews;
  Grid<double> ground_truth;
  LearnedModel learned;
};

inline Grid<double> masked_depth(const DepthEstimate& e) {
  Grid<double> g = e.depth;
  for (std::size_t p = 0; p < g.size(); ++p)
    if (!e.valid[p]) g[p] = 0.0;
  return g;
}

inline BucketOutput run_bucket(const ExperimentPlan& plan, std::size_t bi) {
  const Bucket& b = plan.buckets[bi];
  const TimingConfig t = bucket_timing(plan, b);
  BucketOutput out;
  const bool need_learned =
      std::any_of(plan.methods.begin(), plan.methods.end(), [](Method m) { return uses_learned_codes(m); });
  if (need_learned) {
    if (!plan.pretrained.empty() && plan.pretrained[bi]) {
      out.learned = *plan.pretrained[bi];
      if (!out.learned.coding.frozen) throw StateError("pretrained codes for bucket " + b.label() + " are not frozen");
      if (out.learned.coding.K != plan.K || out.learned.coding.M != t.samples)
        throw ConfigError("pretrained codes for bucket " + b.label() + " do not match K and samples");
      out.learned.coding.timing = t;
    } else {
      out.learned = train_bucket(plan, bi, t);
    }
  }
  const CodingSet square = square_codes(plan.K, t);
  const LookupTable square_table = build_lookup(square, t, plan.attenuation, plan.grid_step);
  std::optional<LookupTable> learned_table;
  if (need_learned) learned_table = build_lookup(out.learned.coding, t, plan.attenuation, plan.grid_step);

  std::vector<Scene> scenes;
  for (int i = 0; i < plan.scenes_per_cell; ++i)
    scenes.push_back(bucket_scene(b, plan.width, plan.height, plan.ambient,
                                  plan_stream(plan.seed, 1, bi, static_cast<std::uint64_t>(i)), i, false));
  out.ground_truth = scenes.front().depth;

  const double single[] = {plan.single_freq};
  const double dual[] = {plan.dual_low, plan.dual_high};
  for (double snr : plan.snr_levels) {
    for (Method m : plan.methods) {
      const auto start = std::chrono::steady_clock::now();
      ResultRow row{m, b.label(), snr, 0.0, 0.0, 0.0};
      // The noise seed ignores the SNR level, so levels share random numbers
      // and only the photon budget changes between them.
      for (std::size_t si = 0; si < scenes.size(); ++si) {
        const Scene& s = scenes[si];
        NoiseModel nm = plan.noise;
        nm.seed = plan_stream(plan.seed, 6, bi, (si << 8) + static_cast<std::uint64_t>(m));
        DepthEstimate est;
        switch (m) {
          case Method::SingleFreq:
          case Method::DualFreqSine:
          case Method::DualFreqSquare: {
            const bool one = m == Method::SingleFreq;
            const auto wf = m == Method::DualFreqSquare ? Waveform::Square : Waveform::Sine;
            const std::span<const double> f = one ? std::span<const double>(single) : std::span<const double>(dual);
            nm.photon_scale = calibrate_amcw_scale(s, f, wf, plan.attenuation, plan.noise, snr);
            auto st = apply_noise(simulate_amcw(s, f, wf, plan.attenuation, nm.photon_scale), nm);
            est = one ? decode_single_frequency(st, plan.single_freq)
                      : decode_dual_frequency(st, plan.dual_low, plan.dual_high);
            break;
          }
          case Method::LookupSquare:
          case Method::LookupLearned:
          case Method::MlpLearned: {
            const CodingSet& c = m == Method::LookupSquare ? square : out.learned.coding;
            nm.photon_scale = calibrate_photon_scale(s, c, t, plan.attenuation, plan.noise, snr);
            auto st = apply_noise(integrate_measurements(s, c, t, plan.attenuation, nm.photon_scale), nm);
            if (m == Method::MlpLearned)
              est = decode_mlp(st, out.learned.decoder);
            else
              est = decode_lookup(st, m == Method::LookupSquare ? square_table : *learned_table);
            break;
          }
        }
        double err = 0.0;
        try {
          err = mae(est, s);
        } catch (const NumericError&) {
          throw NumericError("no valid pixels for " + method_name(m) + " in bucket " + b.label() + " at " +
                             format_double(snr) + " dB");
        }
        row.mae_mm += err / static_cast<double>(scenes.size());
        row.invalid_fraction += est.invalid_fraction() / static_cast<double>(scenes.size());
        if (si == 0) out.previews.push_back(masked_depth(est));
      }
      row.runtime_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      out.rows.push_back(row);
    }
  }
  return out;
}

}  // namespace detail

/// Runs every bucket x SNR x method cell. Buckets run in parallel; results are
/// collected in plan order, so everything except runtimes is a pure function
/// of the plan.
inline BenchRun run_plan(const ExperimentPlan& plan) {
  plan.validate();
  for (const auto& b : plan.buckets) bucket_timing(plan, b);

  const std::size_t n = plan.buckets.size();
  std::vector<std::optional<detail::BucketOutput>> outs(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        outs[i] = detail::run_bucket(plan, i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min<std::size_t>(n, plan.threads > 0 ? static_cast<std::size_t>(plan.threads) : hw);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  BenchRun run;
  run.table.snr_levels = plan.snr_levels;
  for (std::size_t i = 0; i < n; ++i) {
    auto& o = *outs[i];
    run.table.bucket_labels.push_back(plan.buckets[i].label());
    run.table.rows.insert(run.table.rows.end(), o.rows.begin(), o.rows.end());
    for (auto& g : o.previews) run.previews.push_back(std::move(g));
    run.ground_truth.push_back(std::move(o.ground_truth));
    run.learned.push_back(std::move(o.learned));
  }
  return run;
}

/// MAE of one cell; throws if the table does not hold it.
inline const ResultRow& find_row(const ResultTable& t, Method m, const std::string& bucket, double snr) {
  for (const auto& r : t.rows)
    if (r.method == m && r.bucket == bucket && r.snr_db == snr) return r;
  throw ConfigError("no row for " + method_name(m) + " / " + bucket + " / " + format_double(snr));
}

inline std::string render_csv(const ResultTable& t, bool with_runtime) {
  std::string s = with_runtime ? "method,bucket,snr_db,runtime_ms\n" : "method,bucket,snr_db,mae_mm,invalid_fraction\n";
  for (const auto& r : t.rows) {
    s += method_name(r.method) + "," + r.bucket + "," + format_double(r.snr_db) + ",";
    s += with_runtime ? format_double(r.runtime_ms) : format_double(r.mae_mm) + "," + format_double(r.invalid_fraction);
    s += "\n";
  }
  return s;
}

/// Methods down the side, buckets across, one H/M/L sub-column per SNR level.
inline std::string render_text(const ResultTable& t) {
  std::vector<std::string> methods;
  for (const auto& r : t.rows)
    if (std::find(methods.begin(), methods.end(), method_name(r.method)) == methods.end())
      methods.push_back(method_name(r.method));
  const std::size_t S = t.snr_levels.size();
  auto sub = [&](std::size_t k) -> std::string {
    if (S == 3) return k == 0 ? "H" : (k == 1 ? "M" : "L");
    return "S" + std::to_string(k + 1);
  };
  constexpr int cw = 9;
  char buf[128];
  std::string out = "MAE (mm)";
  for (std::size_t k = 0; k < S; ++k) out += "  " + sub(k) + " = " + format_double(t.snr_levels[k]) + " dB";
  out += "\n\n";
  std::snprintf(buf, sizeof buf, "%-22s", "method");
  std::string h1 = buf, h2(22, ' ');
  for (const auto& b : t.bucket_labels) {
    std::snprintf(buf, sizeof buf, " | %*s", static_cast<int>(cw * S), (b + " m").c_str());
    h1 += buf;
    h2 += " | ";
    for (std::size_t k = 0; k < S; ++k) {
      std::snprintf(buf, sizeof buf, "%*s", cw, sub(k).c_str());
      h2 += buf;
    }
  }
  out += h1 + "\n" + h2 + "\n" + std::string(h2.size(), '-') + "\n";
  for (const auto& m : methods) {
    std::snprintf(buf, sizeof buf, "%-22s", m.c_str());
    std::string line = buf;
    for (const auto& b : t.bucket_labels) {
      line += " | ";
      for (double snr : t.snr_levels) {
        const ResultRow* hit = nullptr;
        for (const auto& r : t.rows)
          if (method_name(r.method) == m && r.bucket == b && r.snr_db == snr) hit = &r;
        if (hit)
          std::snprintf(buf, sizeof buf, "%*.1f", cw, hit->mae_mm);
        else
          std::snprintf(buf, sizeof buf, "%*s", cw, "-");
        line += buf;
      }
    }
    out += line + "\n";
  }
  return out;
}

namespace detail {
inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
  if (!f) throw IoError("write failed for " + p.string());
}
}  // namespace detail

/// Key-value lines recorded in manifest.txt; `config_hash` identifies the input.
struct RunInfo {
  std::string config_hash;
  std::uint64_t seed = 0;
};

/// Writes results.csv (deterministic), timing.csv (runtimes), results.txt,
/// per-cell depth PFMs, learned codes/decoders and manifest.txt under `dir`.
inline std::vector<std::string> emit_table(const BenchRun& run, const std::string& dir, const RunInfo& info) {
  const auto& t = run.table;
  if (t.rows.empty()) throw ConfigError("refusing to emit an empty result table");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "depth", ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
  std::vector<std::string> files;
  auto put = [&](const std::string& rel, const std::string& text) {
    detail::write_text(fs::path(dir) / rel, text);
    files.push_back(rel);
  };
  put("results.csv", render_csv(t, false));
  put("timing.csv", render_csv(t, true));
  put("results.txt", render_text(t));
  for (std::size_t b = 0; b < run.ground_truth.size() && b < t.bucket_labels.size(); ++b) {
    const std::string rel = "depth/gt_" + t.bucket_labels[b] + ".pfm";
    save_depth_pfm((fs::path(dir) / rel).string(), run.ground_truth[b]);
    files.push_back(rel);
  }
  for (std::size_t i = 0; i < run.previews.size() && i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    std::string name = method_name(r.method);
    std::replace(name.begin(), name.end(), '+', '_');
    const std::string rel = "depth/" + name + "_" + r.bucket + "_" + format_double(r.snr_db) + "dB.pfm";
    save_depth_pfm((fs::path(dir) / rel).string(), run.previews[i]);
    files.push_back(rel);
  }
  std::string notes;
  for (std::size_t b = 0; b < run.learned.size() && b < t.bucket_labels.size(); ++b) {
    const auto& m = run.learned[b];
    if (m.coding.values.empty()) continue;
    const std::string codes = "codes_" + t.bucket_labels[b] + ".csv";
    const std::string dec = "decoder_" + t.bucket_labels[b] + ".csv";
    save_coding_csv((fs::path(dir) / codes).string(), m.coding);
    save_decoder_csv((fs::path(dir) / dec).string(), m.decoder);
    files.push_back(codes);
    files.push_back(dec);
    notes += "moved_fraction." + t.bucket_labels[b] + " = " + format_double(m.moved_fraction) + "\n";
    if (m.aborted) notes += "training_aborted." + t.bucket_labels[b] + " = " + m.abort_reason + "\n";
  }
  std::string manifest = "config_hash = " + info.config_hash + "\nseed = " + std::to_string(info.seed) +
                         "\nrows = " + std::to_string(t.rows.size()) + "\n" + notes;
  for (const auto& f : files) manifest += "artifact = " + f + "\n";
  put("manifest.txt", manifest);
  return files;
}

}  // namespace betof
