// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Criterion 9 runs the default plan for seeds 1, 2 and 3 and judges
// the per-cell means; per-seed detail is printed for the record.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "betof/bench.hpp"
#include "betof/gradcheck.hpp"

using namespace betof;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& title, double budget_s, const std::function<Verdict()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0.0 && secs > budget_s) {
    v.pass = false;
    v.detail += "; over runtime budget of " + format_double(budget_s) + " s";
  }
  if (!v.pass) ++failures;
  std::printf("criterion %2d: %s  %s (%s) [%.1f s]\n", id, v.pass ? "PASS" : "FAIL", title.c_str(), v.detail.c_str(),
              secs);
  std::fflush(stdout);
}

std::string fmt(double v, int prec = 4) {
  char b[64];
  std::snprintf(b, sizeof b, "%.*f", prec, v);
  return b;
}

Scene plane(double depth, int size = 64) {
  return Scene{Grid<double>(size, size, 0.8), Grid<double>(size, size, 0.0), Grid<double>(size, size, depth)};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("betof_accept_" + std::to_string(::getpid())) / name;
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + BETOF_CLI + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TimingConfig window_from(double start) {
  TimingConfig t;
  t.tau = tau_for_window_start(start);
  return t;
}

Verdict closed_form() {
  TimingConfig t;
  t.tau = 200e-9;
  const double r = max_unambiguous_range(t);
  const auto [lo, hi] = depth_window(t);
  const bool ok = std::abs(r - 749.481) <= 1e-3 && std::abs(lo - 29.979) <= 1e-3 && std::abs(hi - 37.474) <= 1e-3;
  return {ok, "d_mur " + fmt(r) + " m, window [" + fmt(lo) + ", " + fmt(hi) + "] m"};
}

Verdict phase_wrap() {
  const auto single = itof_single_frequency(plane(12.0), 15e6, std::nullopt, AttenuationModel{});
  double worst_single = 0.0;
  for (double d : single.depth.data()) worst_single = std::max(worst_single, std::abs(d - 2.007));

  const double step = 0.01;
  const TimingConfig t = window_from(10.0);
  const CodingSet codes = square_codes(4, t);
  const auto table = build_lookup(codes, t, AttenuationModel{}, step);
  const auto est = decode_lookup(integrate_measurements(plane(12.0), codes, t, AttenuationModel{}), table, true);
  double worst_lookup = 0.0;
  for (std::size_t p = 0; p < est.depth.size(); ++p)
    worst_lookup = std::max(worst_lookup, est.valid[p] ? std::abs(est.depth[p] - 12.0) : 1e9);
  const bool ok = worst_single <= 1e-3 && worst_lookup <= step / 2;
  return {ok, "15 MHz gives " + fmt(single.depth[0]) + " m, lookup gives " + fmt(est.depth[0]) + " m"};
}

Verdict noise_stats() {
  constexpr int kDraws = 1'000'000;
  const NoiseModel n{100.0, 5.0, 1.0, 2024};
  double sum = 0.0, sum2 = 0.0;
  for (int k = 0; k < kDraws; ++k) {
    const double x = sample_measurement(1e4, n, n.seed, 0, static_cast<std::uint64_t>(k));
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / kDraws;
  const double var = (sum2 - kDraws * mean * mean) / (kDraws - 1);
  const bool ok = std::abs(mean - 10100.0) <= 0.02 * 10100.0 && std::abs(var - 10125.0) <= 0.02 * 10125.0;
  return {ok, "mean " + fmt(mean, 2) + ", variance " + fmt(var, 2)};
}

Verdict gradients() {
  bool ok = true;
  std::string d;
  for (const auto& r : run_gradient_checks()) {
    ok = ok && r.pass();
    char b[128];
    std::snprintf(b, sizeof b, "%s%s %.1e", d.empty() ? "" : ", ", r.name.c_str(), r.max_rel_error);
    d += b;
  }
  const int code = run_cli("--out " + scratch("grad").string() + " check-gradients");
  ok = ok && code == 0;
  return {ok, d + "; check-gradients exit " + std::to_string(code)};
}

CodeOptResult optimize(std::uint64_t seed, double gamma3) {
  const TimingConfig t = window_from(30.0);
  CodeOptConfig c;
  c.weights.gamma3 = gamma3;
  return optimize_codes(design_scene(t), xavier_codes(4, t, seed), t, AttenuationModel{}, NoiseModel{1, 1, 1, 0}, c);
}

Verdict binarization() {
  const auto r = optimize(1, LossWeights{}.gamma3);
  const double nb = near_binary_fraction(r.coding);
  const double moved = freeze_binary(r.coding).moved_fraction;
  return {nb >= 0.99 && moved < 0.01, "near-binary " + fmt(100 * nb, 2) + "%, moved " + fmt(100 * moved, 2) + "%"};
}

Verdict first_difference() {
  std::vector<int> with, without;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (int n : transition_count(freeze_binary(optimize(seed, 5.0).coding).coding)) with.push_back(n);
    for (int n : transition_count(freeze_binary(optimize(seed, 0.0).coding).coding)) without.push_back(n);
  }
  std::sort(with.begin(), with.end());
  std::sort(without.begin(), without.end());
  const int a = with[with.size() / 2], b = without[without.size() / 2];
  return {a <= b, "median transitions " + std::to_string(a) + " with gamma3 = 5, " + std::to_string(b) + " without"};
}

// Square gates cannot resolve echoes sitting wholly in the last gate, so the
// sweep stays below three quarters of the window.
Verdict lookup_exactness() {
  const double step = 0.01;
  const TimingConfig t = window_from(30.0);
  const CodingSet codes = square_codes(4, t);
  const auto table = build_lookup(codes, t, AttenuationModel{}, step);
  const auto [lo, hi] = depth_window(t);
  const double top = lo + 0.75 * (hi - lo);
  int on_grid_bad = 0, on_grid = 0;
  for (std::size_t n = 0; n < table.depth_grid.size() && table.depth_grid[n] < top; n += 7, ++on_grid) {
    const double d = table.depth_grid[n];
    if (decode_lookup(integrate_measurements(plane(d, 8), codes, t, AttenuationModel{}), table, false).depth[0] != d)
      ++on_grid_bad;
  }
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const double d = lo + 0.0037 + (top - lo - 0.01) * k / 99.0;
    const auto est = decode_lookup(integrate_measurements(plane(d, 8), codes, t, AttenuationModel{}), table, false);
    worst = std::max(worst, std::abs(est.depth[0] - d));
  }
  return {on_grid_bad == 0 && worst <= step / 2 + 1e-12,
          std::to_string(on_grid - on_grid_bad) + "/" + std::to_string(on_grid) + " on-grid exact, off-grid max " +
              fmt(1000 * worst, 3) + " mm"};
}

Verdict dual_unwrap() {
  const auto est = itof_dual_frequency(plane(62.0), 1e6, 15e6, std::nullopt, AttenuationModel{});
  double worst = 0.0;
  for (std::size_t p = 0; p < est.depth.size(); ++p)
    worst = std::max(worst, est.valid[p] ? std::abs(est.depth[p] - 62.0) : 1e9);
  return {worst <= 0.01, "62 m plane decodes to " + fmt(est.depth[0]) + " m"};
}

struct TrendCells {
  std::map<std::tuple<Method, std::string, double>, double> mean;
  std::vector<ResultTable> per_seed;
};

TrendCells run_trend_plans() {
  TrendCells c;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ExperimentPlan p;
    p.seed = seed;
    c.per_seed.push_back(run_plan(p).table);
  }
  for (const auto& t : c.per_seed)
    for (const auto& r : t.rows) c.mean[{r.method, r.bucket, r.snr_db}] += r.mae_mm / 3.0;
  return c;
}

Verdict trends(const TrendCells& c) {
  const ExperimentPlan p;
  const auto& t = c.per_seed.front();
  auto mean = [&](Method m, const std::string& b, double s) { return c.mean.at({m, b, s}); };

  int monotone_bad = 0, seed_bad = 0;
  for (Method m : p.methods)
    for (const auto& b : t.bucket_labels) {
      for (std::size_t k = 1; k < p.snr_levels.size(); ++k)
        if (mean(m, b, p.snr_levels[k]) < mean(m, b, p.snr_levels[k - 1])) ++monotone_bad;
      for (const auto& st : c.per_seed)
        for (std::size_t k = 1; k < p.snr_levels.size(); ++k)
          if (find_row(st, m, b, p.snr_levels[k]).mae_mm < find_row(st, m, b, p.snr_levels[k - 1]).mae_mm) {
            ++seed_bad;
            break;
          }
    }

  int wins = 0;
  for (const auto& b : t.bucket_labels)
    for (double s : p.snr_levels)
      if (mean(Method::MlpLearned, b, s) < mean(Method::LookupSquare, b, s)) ++wins;

  const double h = p.snr_levels.front();
  const double range = unambiguous_range(p.single_freq);
  bool single_ok = true, betof_ok = true;
  double single_min = 1e300, betof_max = 0.0;
  for (std::size_t bi = 0; bi < p.buckets.size(); ++bi) {
    const auto& b = t.bucket_labels[bi];
    if (p.buckets[bi].hi > range) {
      const double v = mean(Method::SingleFreq, b, h);
      single_min = std::min(single_min, v);
      single_ok = single_ok && v > 1000.0;
    }
    for (Method m : {Method::LookupLearned, Method::MlpLearned, Method::LookupSquare}) {
      const double v = mean(m, b, h);
      betof_max = std::max(betof_max, v);
      betof_ok = betof_ok && v < 100.0;
    }
  }

  const bool a = monotone_bad == 0, bb = wins >= 10, cc = single_ok && betof_ok;
  std::string d = std::string("(a) ") + (a ? "pass" : "fail") + ": " + std::to_string(monotone_bad) +
                  " H->L decreases in 3-seed means, " + std::to_string(seed_bad) + "/72 per-seed rows non-monotone";
  d += std::string("; (b) ") + (bb ? "pass" : "fail") + ": mlp+learned wins " + std::to_string(wins) + "/12";
  d += std::string("; (c) ") + (cc ? "pass" : "fail") + ": single-freq min " + fmt(single_min, 0) +
       " mm beyond range, BE-ToF max " + fmt(betof_max, 0) + " mm at H";
  return {a && bb && cc, d};
}

void print_trend_table(const TrendCells& c) {
  ResultTable avg = c.per_seed.front();
  for (auto& r : avg.rows) r.mae_mm = c.mean.at({r.method, r.bucket, r.snr_db});
  std::printf("\n3-seed mean table:\n%s\n", render_text(avg).c_str());
}

Verdict determinism() {
  const std::string cfg = std::string(BETOF_SOURCE_DIR) + "/configs/default.ini";
  const auto a = scratch("bench_a"), b = scratch("bench_b");
  const int ca = run_cli("--config \"" + cfg + "\" --seed 1 --out " + a.string() + " bench");
  const int cb = run_cli("--config \"" + cfg + "\" --seed 1 --out " + b.string() + " bench");
  if (ca != 0 || cb != 0) return {false, "bench exits " + std::to_string(ca) + ", " + std::to_string(cb)};
  int same = 0, total = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() != ".csv" || e.path().filename() == "timing.csv") continue;
    ++total;
    if (slurp(e.path()) == slurp(b / e.path().filename())) ++same;
  }
  return {total > 0 && same == total,
          std::to_string(same) + "/" + std::to_string(total) + " CSV files byte-identical (timing.csv excluded)"};
}

}  // namespace

int main() {
  criterion(1, "closed-form constants", 1, closed_form);
  criterion(2, "phase-wrap demonstration", 10, phase_wrap);
  criterion(3, "noise-model statistics", 30, noise_stats);
  criterion(4, "gradient oracles", 120, gradients);
  criterion(5, "binarization after optimize-codes", 300, binarization);
  criterion(6, "first-difference effect", 900, first_difference);
  criterion(7, "analytic decoder exactness", 60, lookup_exactness);
  criterion(8, "dual-frequency unwrap", 10, dual_unwrap);
  TrendCells cells;
  criterion(9, "bench trend reproduction", 3 * 1800, [&] {
    cells = run_trend_plans();
    return trends(cells);
  });
  if (!cells.per_seed.empty()) print_trend_table(cells);
  criterion(10, "bench determinism", 0, determinism);
  std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
