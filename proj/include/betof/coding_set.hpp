#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "betof/core.hpp"
#include "betof/timing.hpp"

namespace betof {

/// K demodulation gates sampled at M points over one window.
struct CodingSet {
  int K = 4;
  int M = 1000;
  std::vector<double> values;  // K x M, row-major
  TimingConfig timing;
  bool frozen = false;

  CodingSet() = default;
  CodingSet(int k, const TimingConfig& t, double fill = 0.0)
      : K(k), M(t.samples), values(static_cast<std::size_t>(k) * static_cast<std::size_t>(t.samples), fill),
        timing(t) {
    if (k < 3) throw ConfigError("a coding set needs K >= 3 channels");
  }

  std::span<double> row(int i) { return {values.data() + static_cast<std::size_t>(i) * M, static_cast<std::size_t>(M)}; }
  std::span<const double> row(int i) const {
    return {values.data() + static_cast<std::size_t>(i) * M, static_cast<std::size_t>(M)};
  }
  double& at(int i, int j) { return values[static_cast<std::size_t>(i) * M + j]; }
  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * M + j]; }

  void validate() const {
    if (K < 3) throw ConfigError("a coding set needs K >= 3 channels");
    if (M != timing.samples) throw ConfigError("coding sample count differs from timing M");
    if (values.size() != static_cast<std::size_t>(K) * M) throw ConfigError("coding value count mismatch");
    for (double v : values) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("code value outside [0,1]");
      if (frozen && v != 0.0 && v != 1.0) throw ConfigError("frozen code value is not binary");
    }
  }

  bool operator==(const CodingSet& o) const {
    return K == o.K && M == o.M && values == o.values && frozen == o.frozen;
  }
};

/// Xavier-uniform values centred on 0.5, clamped into [0,1].
inline CodingSet xavier_codes(int K, const TimingConfig& timing, std::uint64_t seed) {
  CodingSet c(K, timing);
  const double bound = std::sqrt(6.0 / (K + c.M));
  for (std::size_t i = 0; i < c.values.size(); ++i) {
    auto rng = SplitMix64::for_stream(seed, 11, i);
    c.values[i] = std::clamp(0.5 + bound * (2.0 * rng.uniform() - 1.0), 0.0, 1.0);
  }
  return c;
}

/// K phase-shifted 50% duty square gates over the window (frozen).
inline CodingSet square_codes(int K, const TimingConfig& timing) {
  CodingSet c(K, timing);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < c.M; ++j) {
      double phase = (j + 0.5) / c.M - static_cast<double>(i) / K;
      phase -= std::floor(phase);
      c.at(i, j) = phase < 0.5 ? 1.0 : 0.0;
    }
  c.frozen = true;
  return c;
}

inline CodingSet project_box(CodingSet coding) {
  for (double& v : coding.values) v = std::clamp(v, 0.0, 1.0);
  return coding;
}

struct FreezeResult {
  CodingSet coding;
  double moved_fraction;  // share of values that moved by more than 0.05
};

inline FreezeResult freeze_binary(const CodingSet& coding, double threshold = 0.5) {
  if (coding.frozen) throw StateError("coding set is already frozen");
  FreezeResult r{coding, 0.0};
  std::size_t moved = 0;
  for (double& v : r.coding.values) {
    const double b = v >= threshold ? 1.0 : 0.0;
    if (std::abs(b - v) > 0.05) ++moved;
    v = b;
  }
  r.coding.frozen = true;
  r.moved_fraction = r.coding.values.empty() ? 0.0 : static_cast<double>(moved) / r.coding.values.size();
  return r;
}

/// Number of 0<->1 flips per channel.
inline std::vector<int> transition_count(const CodingSet& coding) {
  if (!coding.frozen) throw StateError("transition_count requires a frozen coding set");
  std::vector<int> counts(static_cast<std::size_t>(coding.K), 0);
  for (int i = 0; i < coding.K; ++i)
    for (int j = 1; j < coding.M; ++j)
      if (coding.at(i, j) != coding.at(i, j - 1)) ++counts[static_cast<std::size_t>(i)];
  return counts;
}

/// Fraction of samples within `tol` of 0 or 1.
inline double near_binary_fraction(const CodingSet& coding, double tol = 0.05) {
  std::size_t n = 0;
  for (double v : coding.values)
    if (v <= tol || v >= 1.0 - tol) ++n;
  return coding.values.empty() ? 1.0 : static_cast<double>(n) / coding.values.size();
}

// CSV layout: five "name,value" header rows (K, M, T_m, tau, frozen) then K
// rows of M comma-separated values. Values use the shortest round-trip
// representation, so save/load is bit-exact.
inline void save_coding_csv(const std::string& path, const CodingSet& coding) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "K," << coding.K << "\nM," << coding.M << "\nT_m," << format_double(coding.timing.t_m) << "\ntau,"
      << format_double(coding.timing.tau) << "\nfrozen," << (coding.frozen ? 1 : 0) << "\n";
  for (int i = 0; i < coding.K; ++i) {
    for (int j = 0; j < coding.M; ++j) {
      if (j) out << ',';
      out << format_double(coding.at(i, j));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

/// Loads a coding CSV. Timing fields not stored in the file come from `base`.
inline CodingSet load_coding_csv(const std::string& path, TimingConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  auto header = [&](const char* key) {
    if (!std::getline(in, line)) throw ConfigError(std::string("coding CSV missing header row ") + key);
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.substr(0, comma) != key)
      throw ConfigError(std::string("coding CSV expected header row ") + key + ", got '" + line + "'");
    return parse_double(std::string_view(line).substr(comma + 1));
  };
  const double k = header("K");
  const double m = header("M");
  base.t_m = header("T_m");
  base.tau = header("tau");
  const double frozen = header("frozen");
  if (k != std::floor(k) || m != std::floor(m) || k < 3 || m < 2) throw ConfigError("coding CSV has invalid K or M");
  base.samples = static_cast<int>(m);
  CodingSet c(static_cast<int>(k), base);
  c.frozen = frozen != 0.0;
  for (int i = 0; i < c.K; ++i) {
    if (!std::getline(in, line)) throw ConfigError("coding CSV has fewer than K value rows");
    std::string_view rest(line);
    for (int j = 0; j < c.M; ++j) {
      const auto comma = rest.find(',');
      const auto cell = rest.substr(0, comma);
      c.at(i, j) = parse_double(cell);
      if ((comma == std::string_view::npos) != (j == c.M - 1))
        throw ConfigError("coding CSV row " + std::to_string(i) + " does not hold exactly M values");
      if (comma != std::string_view::npos) rest.remove_prefix(comma + 1);
    }
  }
  c.validate();
  return c;
}

}  // namespace betof
