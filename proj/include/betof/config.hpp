#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "betof/bench.hpp"

namespace betof {

/// INI configuration with unit-suffixed keys. Every key is checked against a
/// fixed schema so typos fail loudly instead of silently using defaults.
class Config {
 public:
  Config() = default;

  static Config from_string(const std::string& text) {
    Config c;
    c.text_ = text;
    std::istringstream in(strip_comments(text));
    try {
      boost::property_tree::ini_parser::read_ini(in, c.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
    }
    c.check_schema();
    return c;
  }

  /// Drops ';' and '#' comments, whole-line or after whitespace.
  static std::string strip_comments(const std::string& text) {
    std::istringstream in(text);
    std::string line, out;
    while (std::getline(in, line)) {
      for (std::size_t i = 0; i < line.size(); ++i)
        if ((line[i] == ';' || line[i] == '#') && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
          line.resize(i);
          break;
        }
      while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r')) line.pop_back();
      out += line + "\n";
    }
    return out;
  }

  static Config from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
      return from_string(ss.str());
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }

  bool has(const std::string& section, const std::string& key) const { return raw(section, key).has_value(); }

  std::string str(const std::string& section, const std::string& key, const std::string& fallback) const {
    return raw(section, key).value_or(fallback);
  }

  double num(const std::string& section, const std::string& key, double fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    try {
      return parse_double(*v);
    } catch (const ConfigError&) {
      throw ConfigError("[" + section + "] " + key + " = '" + *v + "' is not a number");
    }
  }

  int integer(const std::string& section, const std::string& key, int fallback) const {
    const double v = num(section, key, fallback);
    if (v != std::floor(v) || std::abs(v) > 2e9) throw ConfigError("[" + section + "] " + key + " must be an integer");
    return static_cast<int>(v);
  }

  bool flag(const std::string& section, const std::string& key, bool fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw ConfigError("[" + section + "] " + key + " must be true or false");
  }

  std::vector<std::string> list(const std::string& section, const std::string& key,
                                const std::vector<std::string>& fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    std::vector<std::string> out;
    std::string cur;
    for (char ch : *v + ",") {
      if (ch == ',') {
        const auto a = cur.find_first_not_of(" \t");
        const auto b = cur.find_last_not_of(" \t");
        if (a == std::string::npos) throw ConfigError("[" + section + "] " + key + " has an empty list entry");
        out.push_back(cur.substr(a, b - a + 1));
        cur.clear();
      } else {
        cur += ch;
      }
    }
    return out;
  }

  std::vector<double> numbers(const std::string& section, const std::string& key,
                              const std::vector<double>& fallback) const {
    if (!has(section, key)) return fallback;
    std::vector<double> out;
    for (const auto& s : list(section, key, {})) {
      try {
        out.push_back(parse_double(s));
      } catch (const ConfigError&) {
        throw ConfigError("[" + section + "] " + key + ": '" + s + "' is not a number");
      }
    }
    return out;
  }

  /// FNV-1a over the raw file text, hex encoded.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text_) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  static const std::map<std::string, std::set<std::string>>& schema() {
    static const std::map<std::string, std::set<std::string>> s{
        {"timing", {"t_burst_us", "t_m_ns", "tau_ns", "pulse_width_ns", "samples", "n_rep"}},
        {"attenuation", {"reference_distance_m", "exponent", "floor"}},
        {"noise", {"dark_e", "readout_sigma_e", "photon_scale", "snr_db", "noiseless"}},
        {"scene",
         {"kind", "width", "height", "d_min_m", "d_max_m", "albedo", "albedo_level", "ambient_e", "path", "format",
          "depth_scale_m"}},
        {"coding", {"k", "init", "path"}},
        {"loss", {"gamma1", "gamma2", "gamma3", "switch_epoch", "gamma1_after", "gamma2_after"}},
        {"optimize",
         {"steps", "steps_per_epoch", "lr", "lr_decay", "decay_interval", "design_snr_db", "optimizer",
          "first_difference", "reduction", "design_width", "design_height"}},
        {"train",
         {"epochs", "steps_per_epoch", "batch", "lr", "code_lr_scale", "lr_decay", "decay_interval", "snr_levels_db",
          "switch_interval", "optimizer", "code_optimizer", "first_difference", "reduction", "hidden", "activation",
          "finetune_epochs", "noiseless", "train_scenes", "code_init"}},
        {"decode",
         {"method", "grid_step_m", "refine", "stack", "codes", "decoder", "ground_truth", "freq_mhz", "f_low_mhz",
          "f_high_mhz"}},
        {"bench",
         {"buckets", "tau_ns", "snr_levels_db", "methods", "scenes_per_cell", "width", "height", "ambient_e",
          "single_freq_mhz", "dual_low_mhz", "dual_high_mhz", "grid_step_m", "k", "train_scenes", "code_init",
          "threads", "epochs", "learned_dir"}},
    };
    return s;
  }

 private:
  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(boost::property_tree::ptree::path_type(key, '\0'));
    if (!v) return std::nullopt;
    return *v;
  }

  void check_schema() const {
    for (const auto& [section, child] : tree_) {
      const auto it = schema().find(section);
      if (it == schema().end()) {
        if (child.empty()) throw ConfigError("key '" + section + "' must sit inside a [section]");
        throw ConfigError("unknown config section [" + section + "]");
      }
      for (const auto& kv : child)
        if (!it->second.count(kv.first)) throw ConfigError("unknown key '" + kv.first + "' in [" + section + "]");
    }
  }

  boost::property_tree::ptree tree_;
  std::string text_;
};

inline TimingConfig timing_from(const Config& c, std::optional<double> default_tau = std::nullopt) {
  TimingConfig t;
  t.t_burst = c.num("timing", "t_burst_us", t.t_burst * 1e6) * 1e-6;
  t.t_m = c.num("timing", "t_m_ns", t.t_m * 1e9) * 1e-9;
  t.pulse_width = c.num("timing", "pulse_width_ns", t.pulse_width * 1e9) * 1e-9;
  t.samples = c.integer("timing", "samples", t.samples);
  t.n_rep = c.integer("timing", "n_rep", t.n_rep);
  t.tau = c.has("timing", "tau_ns") ? c.num("timing", "tau_ns", 0.0) * 1e-9 : default_tau.value_or(0.0);
  t.validate();
  return t;
}

inline AttenuationModel attenuation_from(const Config& c) {
  AttenuationModel a;
  a.reference_distance = c.num("attenuation", "reference_distance_m", a.reference_distance);
  a.exponent = c.num("attenuation", "exponent", a.exponent);
  a.floor = c.num("attenuation", "floor", a.floor);
  a.validate();
  return a;
}

inline NoiseModel noise_from(const Config& c, std::uint64_t seed) {
  NoiseModel n{1.0, 1.0, 1.0, seed};
  n.dark_expectation = c.num("noise", "dark_e", n.dark_expectation);
  n.readout_sigma = c.num("noise", "readout_sigma_e", n.readout_sigma);
  n.photon_scale = c.num("noise", "photon_scale", n.photon_scale);
  n.validate();
  return n;
}

inline SceneSpec scene_from(const Config& c, std::uint64_t seed) {
  SceneSpec s;
  s.kind = parse_scene_kind(c.str("scene", "kind", "ramp"));
  s.width = c.integer("scene", "width", s.width);
  s.height = c.integer("scene", "height", s.height);
  s.d_min = c.num("scene", "d_min_m", s.d_min);
  s.d_max = c.num("scene", "d_max_m", s.d_max);
  s.albedo_pattern = parse_albedo_pattern(c.str("scene", "albedo", "gradient"));
  s.albedo_level = c.num("scene", "albedo_level", s.albedo_level);
  s.ambient_level = c.num("scene", "ambient_e", s.ambient_level);
  s.path = c.str("scene", "path", "");
  const std::string fmt = c.str("scene", "format", "pfm");
  if (fmt != "pfm" && fmt != "pgm16") throw ConfigError("[scene] format must be pfm or pgm16");
  s.format = fmt == "pfm" ? DepthFormat::Pfm : DepthFormat::Pgm16;
  s.scale = c.num("scene", "depth_scale_m", s.scale);
  s.seed = seed;
  if (s.kind == SceneKind::File && s.path.empty()) throw ConfigError("[scene] kind = file needs a path");
  return s;
}

inline LossWeights loss_from(const Config& c) {
  LossWeights w;
  w.gamma1 = c.num("loss", "gamma1", w.gamma1);
  w.gamma2 = c.num("loss", "gamma2", w.gamma2);
  w.gamma3 = c.num("loss", "gamma3", w.gamma3);
  const auto& d = w.schedule.front();
  const int at = c.integer("loss", "switch_epoch", d.epoch);
  const double g1 = c.num("loss", "gamma1_after", d.gamma1);
  const double g2 = c.num("loss", "gamma2_after", d.gamma2);
  w.schedule.clear();
  if (at >= 0) w.schedule.push_back({at, g1, g2});  // negative disables the switch
  w.validate();
  return w;
}

inline std::vector<int> parse_widths(const std::vector<double>& v) {
  std::vector<int> out;
  for (double x : v) {
    if (x != std::floor(x) || x < 1 || x > 4096) throw ConfigError("hidden widths must be integers in [1, 4096]");
    out.push_back(static_cast<int>(x));
  }
  return out;
}

inline TrainConfig train_from(const Config& c, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.integer("train", "epochs", t.epochs);
  t.steps_per_epoch = c.integer("train", "steps_per_epoch", t.steps_per_epoch);
  t.batch = c.integer("train", "batch", t.batch);
  t.lr = c.num("train", "lr", t.lr);
  t.code_lr_scale = c.num("train", "code_lr_scale", t.code_lr_scale);
  t.lr_decay = c.num("train", "lr_decay", t.lr_decay);
  t.decay_interval = c.integer("train", "decay_interval", t.decay_interval);
  t.snr_levels = c.numbers("train", "snr_levels_db", t.snr_levels);
  t.switch_interval = c.integer("train", "switch_interval", t.switch_interval);
  t.weights = loss_from(c);
  t.optimizer = parse_optimizer(c.str("train", "optimizer", optimizer_name(t.optimizer)));
  t.code_optimizer = parse_optimizer(c.str("train", "code_optimizer", optimizer_name(t.code_optimizer)));
  t.first_step = parse_first_difference_step(c.str("train", "first_difference", "prox"));
  t.reduction = parse_reduction(c.str("train", "reduction", "sum"));
  t.hidden = parse_widths(c.numbers("train", "hidden", {32, 32}));
  t.activation = parse_activation(c.str("train", "activation", activation_name(t.activation)));
  t.finetune_epochs = c.integer("train", "finetune_epochs", t.finetune_epochs);
  t.noiseless = c.flag("train", "noiseless", t.noiseless);
  t.seed = seed;
  t.validate();
  return t;
}

inline CodeOptConfig optimize_from(const Config& c) {
  CodeOptConfig o;
  o.steps = c.integer("optimize", "steps", o.steps);
  o.steps_per_epoch = c.integer("optimize", "steps_per_epoch", o.steps_per_epoch);
  o.lr = c.num("optimize", "lr", o.lr);
  o.lr_decay = c.num("optimize", "lr_decay", o.lr_decay);
  o.decay_interval = c.integer("optimize", "decay_interval", o.decay_interval);
  o.snr_db = c.num("optimize", "design_snr_db", o.snr_db);
  o.weights = loss_from(c);
  o.optimizer = parse_optimizer(c.str("optimize", "optimizer", optimizer_name(o.optimizer)));
  o.first_step = parse_first_difference_step(c.str("optimize", "first_difference", "prox"));
  o.reduction = parse_reduction(c.str("optimize", "reduction", "sum"));
  o.validate();
  return o;
}

inline ExperimentPlan plan_from(const Config& c, std::uint64_t seed) {
  ExperimentPlan p;
  if (c.has("bench", "buckets")) {
    p.buckets.clear();
    for (const auto& b : c.list("bench", "buckets", {})) p.buckets.push_back(parse_bucket(b));
  }
  if (c.has("bench", "tau_ns")) {
    const auto taus = c.list("bench", "tau_ns", {});
    if (taus.size() != p.buckets.size()) throw ConfigError("[bench] tau_ns needs one entry per bucket");
    for (std::size_t i = 0; i < taus.size(); ++i)
      if (taus[i] != "auto") p.buckets[i].tau = parse_double(taus[i]) * 1e-9;
  }
  p.snr_levels = c.numbers("bench", "snr_levels_db", p.snr_levels);
  if (c.has("bench", "methods")) {
    p.methods.clear();
    for (const auto& m : c.list("bench", "methods", {})) p.methods.push_back(parse_method(m));
  }
  p.scenes_per_cell = c.integer("bench", "scenes_per_cell", p.scenes_per_cell);
  p.width = c.integer("bench", "width", p.width);
  p.height = c.integer("bench", "height", p.height);
  p.ambient = c.num("bench", "ambient_e", p.ambient);
  p.single_freq = c.num("bench", "single_freq_mhz", p.single_freq * 1e-6) * 1e6;
  p.dual_low = c.num("bench", "dual_low_mhz", p.dual_low * 1e-6) * 1e6;
  p.dual_high = c.num("bench", "dual_high_mhz", p.dual_high * 1e-6) * 1e6;
  p.grid_step = c.num("bench", "grid_step_m", p.grid_step);
  p.K = c.integer("bench", "k", p.K);
  p.train_scenes = c.integer("bench", "train_scenes", p.train_scenes);
  p.code_init = parse_code_init(c.str("bench", "code_init", p.code_init == CodeInit::Square ? "square" : "xavier"));
  p.threads = c.integer("bench", "threads", p.threads);
  p.seed = seed;
  p.timing = timing_from(c);
  p.attenuation = attenuation_from(c);
  p.noise = noise_from(c, seed);
  p.train = train_from(c, seed);
  p.train.epochs = c.integer("bench", "epochs", ExperimentPlan{}.train.epochs);
  p.validate();
  return p;
}

}  // namespace betof
