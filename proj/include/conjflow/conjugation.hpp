#pragma once

// Per-level conjugation loss between features and flows:
//
//   L^l = cur  * Lc(delta^l, f^l_prev,     f^l_cur)        (i)
//       + skip * Lc(delta^1, f^l_prev,     f^l_cur)        (ii)
//       + low  * Lc(delta^l, f^{l-1}_prev, f^{l-1}_cur)    (iii)
//       + R(delta^l)
//
// delta^1 never receives gradient from (i) or (ii). At level 1, (i) and (ii)
// are the same penalty and only (iii) + R train the flow.

#include <optional>
#include <stdexcept>
#include <vector>

#include "conjflow/tensor.hpp"
#include "conjflow/warp.hpp"

namespace conjflow {

struct LevelCoefficients {
  double cur = 0.0;
  double skip = 0.0;
  double low = 1.0;
};

struct ConjugationCoefficients {
  std::vector<LevelCoefficients> levels;  // index 0 is level 1
  double smoothness = 1e-4;               // lambda_s
  double magnitude = 1e-3;                // lambda_r
  double low_multiplier = 1.0;            // lambda_m, scales every (iii) term

  const LevelCoefficients& at(int level) const {
    if (level < 1 || level > static_cast<int>(levels.size()))
      throw std::out_of_range("no conjugation coefficients for level " + std::to_string(level));
    return levels[level - 1];
  }

  void validate() const {
    if (levels.empty()) throw std::invalid_argument("conjugation coefficients: no levels");
    for (const auto& c : levels)
      if (c.cur < 0 || c.skip < 0 || c.low < 0) throw std::invalid_argument("conjugation coefficients must be >= 0");
    if (smoothness < 0 || magnitude < 0 || low_multiplier < 0)
      throw std::invalid_argument("regularizer weights must be >= 0");
    if (!(levels[0].low > 0)) throw std::invalid_argument("level-1 flow needs lambda_low > 0");
  }
};

/// lambda_s * mean |grad delta|^2 + lambda_r * mean |delta|^2, forward differences with replicated edges.
template <typename T>
struct RegularizerResult {
  T value = 0;
  Tensor<T> d_flow;
};

template <typename T>
RegularizerResult<T> flow_regularizer_grad(const Tensor<T>& flow, double smoothness, double magnitude,
                                           bool want_grad = true) {
  if (flow.channels() != 2) throw ShapeError("flow_regularizer: flow must have 2 channels");
  const int H = flow.height(), W = flow.width();
  const T inv_n = T(1) / static_cast<T>(flow.plane());
  const T ls = static_cast<T>(smoothness), lr = static_cast<T>(magnitude);
  RegularizerResult<T> r;
  if (want_grad) r.d_flow = Tensor<T>(2, H, W);
  T grad_sq = 0, mag_sq = 0;
  for (int c = 0; c < 2; ++c) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const T v = flow(c, y, x);
        mag_sq += v * v;
        const T dx = x + 1 < W ? flow(c, y, x + 1) - v : T(0);
        const T dy = y + 1 < H ? flow(c, y + 1, x) - v : T(0);
        grad_sq += dx * dx + dy * dy;
        if (want_grad) {
          T& g = r.d_flow(c, y, x);
          g += T(2) * lr * inv_n * v;
          const T k = T(2) * ls * inv_n;
          if (x + 1 < W) {
            g -= k * dx;
            r.d_flow(c, y, x + 1) += k * dx;
          }
          if (y + 1 < H) {
            g -= k * dy;
            r.d_flow(c, y + 1, x) += k * dy;
          }
        }
      }
    }
  }
  r.value = ls * grad_sq * inv_n + lr * mag_sq * inv_n;
  return r;
}

template <typename T>
T flow_regularizer(const Tensor<T>& flow, double smoothness, double magnitude) {
  return flow_regularizer_grad(flow, smoothness, magnitude, false).value;
}

/// Inputs of one level. `base_flow` is delta^1 (the same tensor as `flow` at level 1).
template <typename T>
struct ConjugationInputs {
  int level = 1;
  const Tensor<T>* flow = nullptr;
  const Tensor<T>* base_flow = nullptr;
  const Tensor<T>* feat_prev = nullptr;
  const Tensor<T>* feat_cur = nullptr;
  const Tensor<T>* lower_prev = nullptr;
  const Tensor<T>* lower_cur = nullptr;
};

/// Which sub-terms take part (warm-up scheduling switches them independently).
struct ConjugationTerms {
  bool same_level = true;  // (i) and (ii)
  bool lower_level = true; // (iii) and R
};

template <typename T>
struct ConjugationResult {
  T value = 0;
  T term_cur = 0, term_skip = 0, term_low = 0, term_reg = 0;  // unweighted (i), (ii), (iii) and weighted R
  Tensor<T> d_flow;        // gradient on delta^l (stop rule applied)
  Tensor<T> d_feat_prev, d_feat_cur;
  Tensor<T> d_lower_prev, d_lower_cur;
};

template <typename T>
ConjugationResult<T> conjugation_loss_grad(const ConjugationInputs<T>& in, const ConjugationCoefficients& coeffs,
                                           ConjugationTerms terms = {}, bool want_grad = true) {
  if (in.level < 1) throw std::out_of_range("conjugation_loss: level must be >= 1");
  if (!in.flow || !in.base_flow || !in.feat_prev || !in.feat_cur || !in.lower_prev || !in.lower_cur)
    throw std::invalid_argument("conjugation_loss: missing input tensor");
  const LevelCoefficients& k = coeffs.at(in.level);
  const Tensor<T>& flow = *in.flow;
  Tensor<T>::require_same_grid(flow, *in.base_flow, "conjugation_loss");
  Tensor<T>::require_same_grid(flow, *in.feat_prev, "conjugation_loss");
  Tensor<T>::require_same_grid(flow, *in.lower_prev, "conjugation_loss");

  ConjugationResult<T> r;
  if (want_grad) {
    r.d_flow = Tensor<T>(2, flow.height(), flow.width());
    r.d_feat_prev = Tensor<T>(in.feat_prev->channels(), flow.height(), flow.width());
    r.d_feat_cur = r.d_feat_prev;
    r.d_lower_prev = Tensor<T>(in.lower_prev->channels(), flow.height(), flow.width());
    r.d_lower_cur = r.d_lower_prev;
  }
  auto accumulate = [](Tensor<T>& dst, const Tensor<T>& src, T w) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.storage()[i] += w * src.storage()[i];
  };
  const T w_cur = static_cast<T>(k.cur), w_skip = static_cast<T>(k.skip);
  const T w_low = static_cast<T>(k.low * coeffs.low_multiplier);

  if (terms.same_level) {
    // (i): flow gradient only above level 1.
    if (w_cur != T(0) || !want_grad) {
      auto c = consistency_loss_grad(flow, *in.feat_prev, *in.feat_cur, want_grad);
      r.term_cur = c.value;
      if (want_grad) {
        if (in.level > 1) accumulate(r.d_flow, c.d_flow, w_cur);
        accumulate(r.d_feat_prev, c.d_prev, w_cur);
        accumulate(r.d_feat_cur, c.d_cur, w_cur);
      }
    }
    // (ii): delta^1 is a constant here.
    if (w_skip != T(0) || !want_grad) {
      auto c = consistency_loss_grad(*in.base_flow, *in.feat_prev, *in.feat_cur, want_grad);
      r.term_skip = c.value;
      if (want_grad) {
        accumulate(r.d_feat_prev, c.d_prev, w_skip);
        accumulate(r.d_feat_cur, c.d_cur, w_skip);
      }
    }
  }
  if (terms.lower_level) {
    if (w_low != T(0) || !want_grad) {
      auto c = consistency_loss_grad(flow, *in.lower_prev, *in.lower_cur, want_grad);
      r.term_low = c.value;
      if (want_grad) {
        accumulate(r.d_flow, c.d_flow, w_low);
        accumulate(r.d_lower_prev, c.d_prev, w_low);
        accumulate(r.d_lower_cur, c.d_cur, w_low);
      }
    }
    auto reg = flow_regularizer_grad(flow, coeffs.smoothness, coeffs.magnitude, want_grad);
    r.term_reg = reg.value;
    if (want_grad) accumulate(r.d_flow, reg.d_flow, T(1));
  }
  r.value = (terms.same_level ? w_cur * r.term_cur + w_skip * r.term_skip : T(0)) +
            (terms.lower_level ? w_low * r.term_low + r.term_reg : T(0));
  return r;
}

template <typename T>
T conjugation_loss(const ConjugationInputs<T>& in, const ConjugationCoefficients& coeffs, ConjugationTerms terms = {}) {
  return conjugation_loss_grad(in, coeffs, terms, false).value;
}

/// Sum of the per-level losses. `levels[i]` must describe level i + 1.
template <typename T>
struct TotalConjugation {
  T value = 0;
  std::vector<ConjugationResult<T>> per_level;
};

template <typename T>
TotalConjugation<T> total_conjugation(const std::vector<ConjugationInputs<T>>& levels,
                                      const ConjugationCoefficients& coeffs,
                                      const std::vector<ConjugationTerms>& terms = {}, bool want_grad = true) {
  if (levels.size() != coeffs.levels.size())
    throw std::invalid_argument("total_conjugation: expected " + std::to_string(coeffs.levels.size()) +
                                " levels, got " + std::to_string(levels.size()));
  TotalConjugation<T> t;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i].level != static_cast<int>(i) + 1) throw std::invalid_argument("total_conjugation: level out of order");
    t.per_level.push_back(conjugation_loss_grad(levels[i], coeffs, terms.empty() ? ConjugationTerms{} : terms[i], want_grad));
    t.value += t.per_level.back().value;
  }
  return t;
}

}  // namespace conjflow
