#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "betof/bench.hpp"
#include "betof/config.hpp"
#include "betof/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace betof;

namespace {

enum Exit { kOk = 0, kConfig = 1, kNumeric = 2 };

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = "out";
};

Config load_config(const Globals& g) { return g.config.empty() ? Config{} : Config::from_file(g.config); }

fs::path prepare_out(const Globals& g) {
  std::error_code ec;
  fs::create_directories(g.out, ec);
  if (ec) throw IoError("cannot create output directory '" + g.out + "': " + ec.message());
  return fs::path(g.out);
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f || !(f << text)) throw IoError("cannot write '" + p.string() + "'");
}

std::string transitions_text(const CodingSet& c) {
  std::string s;
  for (int n : transition_count(c)) s += (s.empty() ? "" : ",") + std::to_string(n);
  return s;
}

// Codes from [coding]: a CSV path, or generated square / xavier codes.
CodingSet coding_from(const Config& c, const TimingConfig& t, std::uint64_t seed, const std::string& default_init) {
  const std::string path = c.str("coding", "path", "");
  if (!path.empty()) {
    CodingSet codes = load_coding_csv(path, t);
    codes.timing = t;
    if (codes.M != t.samples) throw ConfigError("codes in '" + path + "' do not match [timing] samples");
    return codes;
  }
  const int K = c.integer("coding", "k", 4);
  const std::string init = c.str("coding", "init", default_init);
  if (init == "square") return square_codes(K, t);
  if (init == "xavier") return xavier_codes(K, t, seed);
  throw ConfigError("[coding] init must be square or xavier");
}

int cmd_simulate(const Globals& g) {
  const Config c = load_config(g);
  const SceneSpec spec = scene_from(c, g.seed);
  const Scene scene = generate_scene(spec);
  scene.validate();
  const TimingConfig t = timing_from(c, tau_for_window_start(spec.d_min));
  const AttenuationModel att = attenuation_from(c);
  NoiseModel noise = noise_from(c, g.seed);
  const CodingSet codes = coding_from(c, t, g.seed, "square");
  // An explicit photon scale wins; otherwise calibrate to the target SNR.
  if (!c.has("noise", "photon_scale"))
    noise.photon_scale = calibrate_photon_scale(scene, codes, t, att, noise, c.num("noise", "snr_db", 5.23));
  auto stack = integrate_measurements(scene, codes, t, att, noise.photon_scale);
  if (!c.flag("noise", "noiseless", false)) stack = apply_noise(std::move(stack), noise);

  const auto dir = prepare_out(g);
  save_stack_csv((dir / "stack.csv").string(), stack);
  save_coding_csv((dir / "codes.csv").string(), codes);
  save_depth_pfm((dir / "depth_gt.pfm").string(), scene.depth);
  for (int i = 0; i < stack.K; ++i) {
    const auto k = static_cast<std::size_t>(i);
    io::write_pfm((dir / ("clean_" + std::to_string(i) + ".pfm")).string(), stack.clean[k]);
    if (stack.has_noisy()) io::write_pfm((dir / ("noisy_" + std::to_string(i) + ".pfm")).string(), stack.noisy[k]);
  }

  // Pixels whose depth lies outside the window cannot be decoded; they are
  // written as 0 (invalid) in the decoded map and counted.
  const auto [lo, hi] = depth_window(t);
  std::size_t outside = 0;
  for (std::size_t p = 0; p < scene.depth.size(); ++p)
    if (scene.valid(p) && (scene.depth[p] < lo || scene.depth[p] > hi)) ++outside;
  std::string summary = "photon_scale = " + format_double(noise.photon_scale) + "\n";
  if (stack.has_noisy()) summary += "realized_snr_db = " + format_double(realized_snr_db(stack)) + "\n";
  summary += "window_m = " + format_double(lo) + "," + format_double(hi) + "\n";
  summary += "outside_window = " + std::to_string(outside) + "\n";
  if (codes.frozen) {
    const auto table = build_lookup(codes, t, att, c.num("decode", "grid_step_m", 0.01));
    auto est = decode_lookup(stack, table);
    for (std::size_t p = 0; p < scene.depth.size(); ++p)
      if (!scene.valid(p) || scene.depth[p] < lo || scene.depth[p] > hi) est.valid[p] = 0;
    Grid<double> depth = est.depth;
    for (std::size_t p = 0; p < depth.size(); ++p)
      if (!est.valid[p]) depth[p] = 0.0;
    save_depth_pfm((dir / "depth_lookup.pfm").string(), depth);
    if (outside < scene.depth.size()) {
      try {
        summary += "lookup_mae_mm = " + format_double(mae(est, scene)) + "\n";
      } catch (const NumericError&) {
      }
    }
  }
  write_file(dir / "summary.txt", summary);
  std::printf("%s", summary.c_str());
  if (outside > 0)
    std::fprintf(stderr, "warning: %zu pixel(s) outside the depth window [%g, %g] m marked invalid\n", outside, lo,
                 hi);
  return kOk;
}

int cmd_optimize(const Globals& g) {
  const Config c = load_config(g);
  const SceneSpec spec = scene_from(c, g.seed);
  const TimingConfig t = timing_from(c, tau_for_window_start(spec.d_min));
  const AttenuationModel att = attenuation_from(c);
  const NoiseModel noise = noise_from(c, g.seed);
  const CodeOptConfig cfg = optimize_from(c);
  CodingSet init = coding_from(c, t, g.seed, "xavier");
  init.frozen = false;
  const Scene design =
      design_scene(t, c.integer("optimize", "design_width", 64), c.integer("optimize", "design_height", 64));
  const auto res = optimize_codes(design, init, t, att, noise, cfg);
  const auto fr = freeze_binary(res.coding);

  const auto dir = prepare_out(g);
  save_coding_csv((dir / "codes_soft.csv").string(), res.coding);
  save_coding_csv((dir / "codes.csv").string(), fr.coding);
  std::string log = "step,lr,total,fisher,dw,first,near_binary\n";
  for (const auto& r : res.log)
    log += std::to_string(r.step) + "," + format_double(r.lr) + "," + format_double(r.loss.total) + "," +
           format_double(r.loss.fisher) + "," + format_double(r.loss.dw) + "," + format_double(r.loss.first) + "," +
           format_double(r.near_binary) + "\n";
  write_file(dir / "optimize_log.csv", log);
  const std::string summary = "near_binary_fraction = " + format_double(near_binary_fraction(res.coding)) +
                              "\nmoved_fraction = " + format_double(fr.moved_fraction) +
                              "\ntransitions = " + transitions_text(fr.coding) + "\n";
  write_file(dir / "summary.txt", summary);
  std::printf("%s", summary.c_str());
  return kOk;
}

int cmd_train(const Globals& g) {
  const Config c = load_config(g);
  const SceneSpec spec = scene_from(c, g.seed);
  const TimingConfig t = timing_from(c, tau_for_window_start(spec.d_min));
  const AttenuationModel att = attenuation_from(c);
  const NoiseModel noise = noise_from(c, g.seed);
  const TrainConfig cfg = train_from(c, g.seed);
  const Bucket range{spec.d_min, spec.d_max, std::nullopt};
  const int n = c.integer("train", "train_scenes", 6);
  if (n < 1) throw ConfigError("[train] train_scenes must be >= 1");
  std::vector<Scene> train, val;
  for (int i = 0; i < n; ++i)
    train.push_back(bucket_scene(range, spec.width, spec.height, spec.ambient_level,
                                 SplitMix64::for_stream(g.seed, 21, static_cast<std::uint64_t>(i))(), i, true));
  val.push_back(bucket_scene(range, spec.width, spec.height, spec.ambient_level,
                             SplitMix64::for_stream(g.seed, 22, 0)(), 2, false));
  const auto init_name = c.str("train", "code_init", "square");
  CodingSet init = c.has("coding", "path") ? coding_from(c, t, g.seed, init_name)
                   : init_name == "square" ? square_codes(c.integer("coding", "k", 4), t)
                   : init_name == "xavier" ? xavier_codes(c.integer("coding", "k", 4), t, g.seed)
                                           : throw ConfigError("[train] code_init must be square or xavier");
  init.frozen = false;
  const auto res = train_joint(train, val, init, t, att, noise, cfg);

  const auto dir = prepare_out(g);
  save_coding_csv((dir / "codes.csv").string(), res.coding);
  save_decoder_csv((dir / "decoder.csv").string(), res.decoder);
  save_train_log_csv((dir / "train_log.csv").string(), res.log);
  std::string summary = "moved_fraction = " + format_double(res.moved_fraction) +
                        "\ntransitions = " + transitions_text(res.coding) + "\n";
  if (!res.log.empty()) summary += "final_val_mae_mm = " + format_double(res.log.back().val_mae_mm) + "\n";
  if (res.aborted) summary += "aborted = " + res.abort_reason + "\n";
  write_file(dir / "summary.txt", summary);
  std::printf("%s", summary.c_str());
  if (res.aborted) {
    std::fprintf(stderr, "error: %s\n", res.abort_reason.c_str());
    return kNumeric;
  }
  return kOk;
}

int cmd_decode(const Globals& g) {
  const Config c = load_config(g);
  const std::string method = c.str("decode", "method", "lookup");
  const std::string stack_path = c.str("decode", "stack", (fs::path(g.out) / "stack.csv").string());
  const MeasurementStack stack = load_stack_csv(stack_path);
  const AttenuationModel att = attenuation_from(c);
  DepthEstimate est;
  if (method == "lookup" || method == "mlp") {
    const std::string codes_path = c.str("decode", "codes", (fs::path(g.out) / "codes.csv").string());
    TimingConfig base = timing_from(c);
    const CodingSet codes = load_coding_csv(codes_path, base);
    if (codes.K != stack.K) throw ConfigError("codes and stack disagree on K");
    if (method == "lookup") {
      est = decode_lookup(stack, build_lookup(codes, codes.timing, att, c.num("decode", "grid_step_m", 0.01)),
                          c.flag("decode", "refine", true));
    } else {
      const std::string dec = c.str("decode", "decoder", (fs::path(g.out) / "decoder.csv").string());
      est = decode_mlp(stack, load_decoder_csv(dec));
    }
  } else if (method == "single-freq") {
    est = decode_single_frequency(stack, c.num("decode", "freq_mhz", 15.0) * 1e6);
  } else if (method == "dual-freq") {
    est = decode_dual_frequency(stack, c.num("decode", "f_low_mhz", 1.0) * 1e6,
                                c.num("decode", "f_high_mhz", 15.0) * 1e6);
  } else {
    throw ConfigError("[decode] method must be lookup, mlp, single-freq or dual-freq");
  }
  Grid<double> depth = est.depth;
  for (std::size_t p = 0; p < depth.size(); ++p)
    if (!est.valid[p]) depth[p] = 0.0;
  const auto dir = prepare_out(g);
  save_depth_pfm((dir / "depth.pfm").string(), depth);
  std::string summary = "method = " + method + "\ninvalid_fraction = " + format_double(est.invalid_fraction()) + "\n";
  if (c.has("decode", "ground_truth")) {
    const Scene gt = load_depth_map(c.str("decode", "ground_truth", ""), DepthFormat::Pfm, 1.0);
    summary += "mae_mm = " + format_double(mae(est, gt)) + "\n";
  }
  write_file(dir / "decode_summary.txt", summary);
  std::printf("%s", summary.c_str());
  return kOk;
}

int cmd_bench(const Globals& g) {
  const Config c = load_config(g);
  ExperimentPlan plan = plan_from(c, g.seed);
  const std::string learned = c.str("bench", "learned_dir", "");
  if (!learned.empty()) {
    plan.pretrained.assign(plan.buckets.size(), std::nullopt);
    for (std::size_t b = 0; b < plan.buckets.size(); ++b) {
      const auto label = plan.buckets[b].label();
      LearnedModel m;
      m.coding = load_coding_csv((fs::path(learned) / ("codes_" + label + ".csv")).string(), plan.timing);
      m.decoder = load_decoder_csv((fs::path(learned) / ("decoder_" + label + ".csv")).string());
      plan.pretrained[b] = std::move(m);
    }
  }
  const auto run = run_plan(plan);
  const auto dir = prepare_out(g);
  emit_table(run, dir.string(), {c.hash(), g.seed});
  std::printf("%s", render_text(run.table).c_str());
  for (std::size_t b = 0; b < run.learned.size(); ++b)
    if (run.learned[b].aborted)
      std::fprintf(stderr, "warning: training for bucket %s aborted: %s\n", run.table.bucket_labels[b].c_str(),
                   run.learned[b].abort_reason.c_str());
  return kOk;
}

int cmd_check_gradients(const Globals& g) {
  const auto results = run_gradient_checks();
  bool ok = true;
  std::string csv = "suite,max_rel_error,threshold,checked,pass\n";
  for (const auto& r : results) {
    std::printf("%-26s max_rel_error %.3e  threshold %.0e  (%d checks)  %s\n", r.name.c_str(), r.max_rel_error,
                r.threshold, r.checked, r.pass() ? "PASS" : "FAIL");
    csv += r.name + "," + format_double(r.max_rel_error) + "," + format_double(r.threshold) + "," +
           std::to_string(r.checked) + "," + (r.pass() ? "1" : "0") + "\n";
    ok = ok && r.pass();
  }
  if (!g.out.empty()) write_file(prepare_out(g) / "gradients.csv", csv);
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"betof: burst-encodable time-of-flight simulator"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master seed (u64)");
  app.add_option("--out", g.out, "output directory")->capture_default_str();

  struct Cmd {
    const char* name;
    const char* help;
    int (*run)(const Globals&);
  };
  const Cmd cmds[] = {
      {"simulate", "one scene -> measurement stack and depth PFMs", cmd_simulate},
      {"optimize-codes", "Fisher + regularizer code design without a decoder", cmd_optimize},
      {"train", "joint code + decoder training", cmd_train},
      {"decode", "measurement stack + codes -> depth", cmd_decode},
      {"bench", "distance bucket x SNR x method matrix", cmd_bench},
      {"check-gradients", "finite-difference gradient suites", cmd_check_gradients},
  };
  const Cmd* chosen = nullptr;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->fallthrough();
    sub->callback([&chosen, &c] { chosen = &c; });
  }

  // Name a mistyped subcommand instead of CLI11's generic complaint.
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" || a == "--seed" || a == "--out") {
      ++i;
      continue;
    }
    if (a.empty() || a[0] == '-') continue;
    bool known = false;
    for (const auto& c : cmds) known = known || a == c.name;
    if (!known) {
      std::cerr << "error: unknown subcommand '" << a << "'\n\n" << app.help();
      return kConfig;
    }
    break;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kConfig;
  }

  try {
    return chosen->run(g);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  }
}
