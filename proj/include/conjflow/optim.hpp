#pragma once

// First-order optimizers over flat parameter vectors.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace conjflow {

enum class OptimizerKind { Sgd, Adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Optimizer state for one parameter vector. SGD keeps no state.
template <typename T>
struct Optimizer {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 1e-3;
  AdamSettings adam;
  std::vector<T> m, v;
  std::uint64_t steps = 0;

  Optimizer() = default;
  Optimizer(OptimizerKind k, double learning_rate, std::size_t n) : kind(k), lr(learning_rate) {
    if (kind == OptimizerKind::Adam) {
      m.assign(n, T(0));
      v.assign(n, T(0));
    }
  }

  void step(std::span<T> params, std::span<const T> grad) {
    if (params.size() != grad.size()) throw std::invalid_argument("optimizer: gradient size mismatch");
    ++steps;
    const T a = static_cast<T>(lr);
    if (kind == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= a * grad[i];
      return;
    }
    if (m.size() != params.size()) throw std::invalid_argument("optimizer: state size mismatch");
    const T b1 = static_cast<T>(adam.beta1), b2 = static_cast<T>(adam.beta2), eps = static_cast<T>(adam.epsilon);
    const T c1 = T(1) - static_cast<T>(std::pow(adam.beta1, double(steps)));
    const T c2 = T(1) - static_cast<T>(std::pow(adam.beta2, double(steps)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
      v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
      params[i] -= a * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
};

/// theta_ema <- xi * theta_ema + (1 - xi) * theta_gra, evaluated as theta_ema + (1 - xi)(theta_gra - theta_ema)
template <typename T>
void ema_update(std::span<T> ema, std::span<const T> gra, double xi) {
  if (ema.size() != gra.size()) throw std::invalid_argument("ema_update: size mismatch");
  if (xi == 0.0) {
    std::copy(gra.begin(), gra.end(), ema.begin());
    return;
  }
  const T b = static_cast<T>(1.0 - xi);
  for (std::size_t i = 0; i < ema.size(); ++i) ema[i] += b * (gra[i] - ema[i]);
}

}  // namespace conjflow
