#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "betof/core.hpp"

namespace betof {

enum class Activation { Relu, Tanh };

inline Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation '" + std::string(s) + "' (expected relu or tanh)");
}

inline std::string activation_name(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }

/// Per-pixel multilayer perceptron. Parameters live in one flat vector, layer
/// by layer, each layer as row-major weights (out x in) followed by biases.
/// The final scalar z maps to depth as lo + (hi - lo) * sigmoid(z).
struct MlpDecoder {
  std::vector<int> widths;  // K+1, hidden..., 1
  Activation activation = Activation::Tanh;
  std::vector<double> params;
  double lo = 0.0;
  double hi = 1.0;
  double intensity_scale = 1.0;  // total-intensity feature divisor

  int layers() const { return static_cast<int>(widths.size()) - 1; }
  int inputs() const { return widths.front(); }
  int channels() const { return widths.front() - 1; }

  std::size_t weight_offset(int l) const {
    std::size_t off = 0;
    for (int k = 0; k < l; ++k)
      off += static_cast<std::size_t>(widths[static_cast<std::size_t>(k)] + 1) * widths[static_cast<std::size_t>(k) + 1];
    return off;
  }
  std::size_t bias_offset(int l) const {
    return weight_offset(l) +
           static_cast<std::size_t>(widths[static_cast<std::size_t>(l)]) * widths[static_cast<std::size_t>(l) + 1];
  }
  static std::size_t parameter_count(const std::vector<int>& w) {
    std::size_t n = 0;
    for (std::size_t k = 0; k + 1 < w.size(); ++k) n += static_cast<std::size_t>(w[k] + 1) * w[k + 1];
    return n;
  }

  void validate() const {
    if (widths.size() < 2 || widths.back() != 1) throw ConfigError("decoder must end in a single output");
    if (widths.front() < 4) throw ConfigError("decoder input width must be K + 1 with K >= 3");
    for (int w : widths)
      if (w < 1) throw ConfigError("decoder layer widths must be >= 1");
    if (params.size() != parameter_count(widths)) throw ConfigError("decoder parameter count does not match widths");
    if (!(hi > lo)) throw ConfigError("decoder output range must satisfy lo < hi");
    if (!(intensity_scale > 0.0)) throw ConfigError("decoder intensity_scale must be > 0");
    for (double p : params)
      if (!std::isfinite(p)) throw NumericError("decoder has non-finite parameters");
  }
};

/// Xavier-uniform hidden weights, zero biases; the output layer starts at zero
/// so an untrained decoder answers the window midpoint.
inline MlpDecoder make_decoder(int K, const std::vector<int>& hidden, Activation act, double lo, double hi,
                               std::uint64_t seed) {
  MlpDecoder d;
  d.widths.push_back(K + 1);
  for (int h : hidden) d.widths.push_back(h);
  d.widths.push_back(1);
  d.activation = act;
  d.lo = lo;
  d.hi = hi;
  d.params.assign(MlpDecoder::parameter_count(d.widths), 0.0);
  for (int l = 0; l + 1 < d.layers(); ++l) {
    const int in = d.widths[static_cast<std::size_t>(l)], out = d.widths[static_cast<std::size_t>(l) + 1];
    const double a = std::sqrt(6.0 / (in + out));
    const std::size_t off = d.weight_offset(l);
    for (std::size_t n = 0; n < static_cast<std::size_t>(in) * out; ++n)
      d.params[off + n] = a * (2.0 * SplitMix64::for_stream(seed, 40 + static_cast<std::uint64_t>(l), n).uniform() - 1.0);
  }
  d.validate();
  return d;
}

/// Activations recorded by a forward pass; a[l] is the input of layer l.
struct DecoderTape {
  std::vector<std::vector<double>> a;
  double z = 0.0;
  double out = 0.0;
};

inline double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

inline double decoder_forward(const MlpDecoder& d, std::span<const double> features, DecoderTape* tape = nullptr) {
  if (features.size() != static_cast<std::size_t>(d.inputs())) throw ConfigError("decoder feature width mismatch");
  for (double f : features)
    if (!std::isfinite(f)) throw NumericError("non-finite decoder input");
  thread_local DecoderTape scratch;
  DecoderTape& t = tape ? *tape : scratch;
  t.a.resize(static_cast<std::size_t>(d.layers()) + 1);
  t.a[0].assign(features.begin(), features.end());
  for (int l = 0; l < d.layers(); ++l) {
    const auto in = static_cast<std::size_t>(d.widths[static_cast<std::size_t>(l)]);
    const auto out = static_cast<std::size_t>(d.widths[static_cast<std::size_t>(l) + 1]);
    const double* W = d.params.data() + d.weight_offset(l);
    const double* b = d.params.data() + d.bias_offset(l);
    const auto& x = t.a[static_cast<std::size_t>(l)];
    auto& y = t.a[static_cast<std::size_t>(l) + 1];
    y.assign(out, 0.0);
    const bool last = l + 1 == d.layers();
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += W[o * in + i] * x[i];
      if (!last) s = d.activation == Activation::Relu ? std::max(0.0, s) : std::tanh(s);
      y[o] = s;
    }
  }
  t.z = t.a.back()[0];
  t.out = d.lo + (d.hi - d.lo) * sigmoid(t.z);
  return t.out;
}

/// Accumulates upstream * d(out)/d(params) into `grad` (same layout as
/// params) and returns upstream * d(out)/d(features).
inline std::vector<double> decoder_backward(const MlpDecoder& d, const DecoderTape& t, double upstream,
                                            std::span<double> grad) {
  if (grad.size() != d.params.size()) throw StateError("decoder gradient buffer has wrong size");
  const double s = sigmoid(t.z);
  std::vector<double> delta{upstream * (d.hi - d.lo) * s * (1.0 - s)};
  for (int l = d.layers() - 1; l >= 0; --l) {
    const auto in = static_cast<std::size_t>(d.widths[static_cast<std::size_t>(l)]);
    const auto out = static_cast<std::size_t>(d.widths[static_cast<std::size_t>(l) + 1]);
    const double* W = d.params.data() + d.weight_offset(l);
    double* gW = grad.data() + d.weight_offset(l);
    double* gb = grad.data() + d.bias_offset(l);
    const auto& x = t.a[static_cast<std::size_t>(l)];
    std::vector<double> prev(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double g = delta[o];
      if (g == 0.0) continue;
      gb[o] += g;
      for (std::size_t i = 0; i < in; ++i) {
        gW[o * in + i] += g * x[i];
        prev[i] += g * W[o * in + i];
      }
    }
    // prev is d/d(activation output of layer l-1); push through that activation.
    if (l > 0) {
      for (std::size_t i = 0; i < in; ++i) {
        const double y = x[i];
        prev[i] *= d.activation == Activation::Relu ? (y > 0.0 ? 1.0 : 0.0) : 1.0 - y * y;
      }
    }
    delta = std::move(prev);
  }
  return delta;
}

/// K zero-mean unit-norm measurements followed by sum(x) / intensity_scale.
/// Returns the norm before scaling; zero means the pixel carries no shape.
inline double make_features(std::span<const double> x, double intensity_scale, std::span<double> out) {
  const std::size_t K = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  const double total = mean;
  mean /= static_cast<double>(K);
  double norm = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    out[i] = x[i] - mean;
    norm += out[i] * out[i];
  }
  norm = std::sqrt(norm);
  for (std::size_t i = 0; i < K; ++i) out[i] = norm > 0.0 ? out[i] / norm : 0.0;
  out[K] = total / intensity_scale;
  return norm;
}

/// Pulls a feature gradient back to the raw measurements:
///   dL/dx = (P g - f (f . g)) / norm + g_total / intensity_scale,
/// where P removes the mean and f are the normalized features.
inline void features_backward(std::span<const double> features, double norm, double intensity_scale,
                              std::span<const double> dfeat, std::span<double> dx) {
  const std::size_t K = dx.size();
  double gmean = 0.0, fg = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    gmean += dfeat[i];
    fg += features[i] * dfeat[i];
  }
  gmean /= static_cast<double>(K);
  const double tail = dfeat[K] / intensity_scale;
  for (std::size_t i = 0; i < K; ++i)
    dx[i] = (norm > 0.0 ? (dfeat[i] - gmean - features[i] * fg) / norm : 0.0) + tail;
}

// Checkpoint: a header line, then per layer "layer,l,in,out", `out` weight rows, one bias row.
inline void save_decoder_csv(const std::string& path, const MlpDecoder& d) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write decoder checkpoint: " + path);
  f << "decoder," << activation_name(d.activation) << ',' << format_double(d.lo) << ',' << format_double(d.hi) << ','
    << format_double(d.intensity_scale) << ',' << d.layers() << '\n';
  for (int l = 0; l < d.layers(); ++l) {
    const int in = d.widths[static_cast<std::size_t>(l)], out = d.widths[static_cast<std::size_t>(l) + 1];
    f << "layer," << l << ',' << in << ',' << out << '\n';
    const double* W = d.params.data() + d.weight_offset(l);
    for (int o = 0; o < out; ++o) {
      for (int i = 0; i < in; ++i) f << (i ? "," : "") << format_double(W[static_cast<std::size_t>(o) * in + i]);
      f << '\n';
    }
    const double* b = d.params.data() + d.bias_offset(l);
    for (int o = 0; o < out; ++o) f << (o ? "," : "") << format_double(b[o]);
    f << '\n';
  }
  if (!f) throw IoError("failed writing decoder checkpoint: " + path);
}

inline MlpDecoder load_decoder_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read decoder checkpoint: " + path);
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    return cells;
  };
  std::string line;
  auto next = [&]() {
    if (!std::getline(f, line)) throw ConfigError("decoder checkpoint truncated: " + path);
    return split(line);
  };
  auto head = next();
  if (head.size() != 6 || head[0] != "decoder") throw ConfigError("not a decoder checkpoint: " + path);
  MlpDecoder d;
  d.activation = parse_activation(head[1]);
  d.lo = parse_double(head[2]);
  d.hi = parse_double(head[3]);
  d.intensity_scale = parse_double(head[4]);
  const int L = std::stoi(head[5]);
  std::vector<std::vector<double>> blocks;
  for (int l = 0; l < L; ++l) {
    auto h = next();
    if (h.size() != 4 || h[0] != "layer" || std::stoi(h[1]) != l) throw ConfigError("bad layer header in " + path);
    const int in = std::stoi(h[2]), out = std::stoi(h[3]);
    if (l == 0) d.widths.push_back(in);
    if (d.widths.back() != in) throw ConfigError("layer widths do not chain in " + path);
    d.widths.push_back(out);
    std::vector<double> W, b;
    for (int o = 0; o < out; ++o) {
      auto row = next();
      if (row.size() != static_cast<std::size_t>(in)) throw ConfigError("weight row has wrong width in " + path);
      for (const auto& c : row) W.push_back(parse_double(c));
    }
    auto brow = next();
    if (brow.size() != static_cast<std::size_t>(out)) throw ConfigError("bias row has wrong width in " + path);
    for (const auto& c : brow) b.push_back(parse_double(c));
    d.params.insert(d.params.end(), W.begin(), W.end());
    d.params.insert(d.params.end(), b.begin(), b.end());
  }
  d.validate();
  return d;
}

}  // namespace betof
