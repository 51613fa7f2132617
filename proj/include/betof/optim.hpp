#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "betof/core.hpp"

namespace betof {

enum class OptimizerKind { Sgd, Adam };

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd" || s == "gd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected sgd or adam)");
}

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

/// One parameter block with its own moment estimates. Adam uses the usual
/// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::Sgd, std::size_t n = 0) : kind_(kind) { resize(n); }

  void resize(std::size_t n) {
    m_.assign(n, 0.0);
    v_.assign(n, 0.0);
    t_ = 0;
  }

  OptimizerKind kind() const { return kind_; }

  void step(std::span<double> params, std::span<const double> grad, double lr) {
    if (params.size() != grad.size() || params.size() != m_.size())
      throw StateError("optimizer parameter/gradient size mismatch");
    if (kind_ == OptimizerKind::Sgd) {
      for (std::size_t n = 0; n < params.size(); ++n) params[n] -= lr * grad[n];
      return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, t_);
    const double c2 = 1.0 - std::pow(b2, t_);
    for (std::size_t n = 0; n < params.size(); ++n) {
      m_[n] = b1 * m_[n] + (1.0 - b1) * grad[n];
      v_[n] = b2 * v_[n] + (1.0 - b2) * grad[n] * grad[n];
      params[n] -= lr * (m_[n] / c1) / (std::sqrt(v_[n] / c2) + eps);
    }
  }

 private:
  OptimizerKind kind_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

}  // namespace betof
