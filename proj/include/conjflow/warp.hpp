#pragma once

// Differentiable backward warping and the Charbonnier consistency penalty.
//
// warp(f, d)(x) = f(x + d(x)), bilinear, with sampling coordinates clamped to
// [0, W-1] x [0, H-1]. The derivative of a clamped coordinate is zero.

#include <cmath>

#include "conjflow/tensor.hpp"

namespace conjflow {

inline constexpr double kCharbonnierEpsilon = 1e-3;
inline constexpr double kCharbonnierExponent = 0.5;

/// Four-neighbour bilinear stencil for one (possibly clamped) sampling position.
template <typename T>
struct BilinearTap {
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  T wx = 0, wy = 0;
  bool live_x = true;  // false when the x coordinate was clamped (zero derivative)
  bool live_y = true;

  BilinearTap(T sx, T sy, int width, int height) {
    const T max_x = static_cast<T>(width - 1), max_y = static_cast<T>(height - 1);
    live_x = sx >= T(0) && sx <= max_x && width > 1;
    live_y = sy >= T(0) && sy <= max_y && height > 1;
    sx = std::clamp(sx, T(0), max_x);
    sy = std::clamp(sy, T(0), max_y);
    x0 = std::min(static_cast<int>(std::floor(sx)), std::max(width - 2, 0));
    y0 = std::min(static_cast<int>(std::floor(sy)), std::max(height - 2, 0));
    x1 = std::min(x0 + 1, width - 1);
    y1 = std::min(y0 + 1, height - 1);
    wx = width > 1 ? sx - static_cast<T>(x0) : T(0);
    wy = height > 1 ? sy - static_cast<T>(y0) : T(0);
  }

  T sample(const T* plane, int width) const {
    const T a = plane[y0 * width + x0], b = plane[y0 * width + x1];
    const T c = plane[y1 * width + x0], d = plane[y1 * width + x1];
    return (T(1) - wy) * ((T(1) - wx) * a + wx * b) + wy * ((T(1) - wx) * c + wx * d);
  }

  // Partial derivatives of sample() with respect to the unclamped coordinates.
  T d_dx(const T* plane, int width) const {
    if (!live_x) return T(0);
    const T a = plane[y0 * width + x0], b = plane[y0 * width + x1];
    const T c = plane[y1 * width + x0], d = plane[y1 * width + x1];
    return (T(1) - wy) * (b - a) + wy * (d - c);
  }
  T d_dy(const T* plane, int width) const {
    if (!live_y) return T(0);
    const T a = plane[y0 * width + x0], b = plane[y0 * width + x1];
    const T c = plane[y1 * width + x0], d = plane[y1 * width + x1];
    return (T(1) - wx) * (c - a) + wx * (d - b);
  }

  void scatter(T* plane, int width, T g) const {
    plane[y0 * width + x0] += g * (T(1) - wy) * (T(1) - wx);
    plane[y0 * width + x1] += g * (T(1) - wy) * wx;
    plane[y1 * width + x0] += g * wy * (T(1) - wx);
    plane[y1 * width + x1] += g * wy * wx;
  }
};

/// Bilinear lookup of every channel of `field` at (y, x) + (dy, dx).
template <typename T>
void sample_vector(const Tensor<T>& field, T sy, T sx, std::span<T> out) {
  const BilinearTap<T> tap(sx, sy, field.width(), field.height());
  for (int c = 0; c < field.channels(); ++c) out[c] = tap.sample(field.channel(c), field.width());
}

template <typename T>
Tensor<T> warp(const Tensor<T>& field, const Tensor<T>& flow) {
  Tensor<T>::require_same_grid(field, flow, "warp");
  if (flow.channels() != 2) throw ShapeError("warp: flow must have 2 channels");
  const int H = field.height(), W = field.width();
  Tensor<T> out(field.channels(), H, W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const BilinearTap<T> tap(x + flow(0, y, x), y + flow(1, y, x), W, H);
      for (int c = 0; c < field.channels(); ++c) out(c, y, x) = tap.sample(field.channel(c), W);
    }
  }
  return out;
}

template <typename T>
FeatureMap<T> warp(const FeatureMap<T>& field, const FlowField<T>& flow) {
  return FeatureMap<T>(warp<T>(static_cast<const Tensor<T>&>(field), flow), field.level());
}

/// Vector-Jacobian product of warp(): accumulates into d_field and d_flow.
template <typename T>
void warp_backward(const Tensor<T>& field, const Tensor<T>& flow, const Tensor<T>& d_out,
                   Tensor<T>* d_field, Tensor<T>* d_flow) {
  const int H = field.height(), W = field.width();
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const BilinearTap<T> tap(x + flow(0, y, x), y + flow(1, y, x), W, H);
      T gu = 0, gv = 0;
      for (int c = 0; c < field.channels(); ++c) {
        const T g = d_out(c, y, x);
        if (g == T(0)) continue;
        if (d_field) tap.scatter(d_field->channel(c), W, g);
        if (d_flow) {
          gu += g * tap.d_dx(field.channel(c), W);
          gv += g * tap.d_dy(field.channel(c), W);
        }
      }
      if (d_flow) {
        (*d_flow)(0, y, x) += gu;
        (*d_flow)(1, y, x) += gv;
      }
    }
  }
}

/// Generalized Charbonnier penalty (|a|^2 + eps)^zeta over the channel vector of every pixel.
template <typename T>
Tensor<T> charbonnier(const Tensor<T>& residual) {
  if (!residual.all_finite()) throw std::domain_error("charbonnier: non-finite residual");
  Tensor<T> out(1, residual.height(), residual.width());
  const std::size_t P = residual.plane();
  for (std::size_t i = 0; i < P; ++i) {
    T sq = 0;
    for (int c = 0; c < residual.channels(); ++c) sq += residual.channel(c)[i] * residual.channel(c)[i];
    out.storage()[i] = static_cast<T>(std::pow(sq + T(kCharbonnierEpsilon), T(kCharbonnierExponent)));
  }
  return out;
}

/// Mean-over-pixels consistency penalty and its gradients with respect to all three inputs.
template <typename T>
struct ConsistencyResult {
  T value = 0;
  Tensor<T> d_flow, d_prev, d_cur;
};

template <typename T>
ConsistencyResult<T> consistency_loss_grad(const Tensor<T>& flow, const Tensor<T>& f_prev,
                                           const Tensor<T>& f_cur, bool want_grad = true) {
  Tensor<T>::require_same_shape(f_prev, f_cur, "consistency_loss");
  Tensor<T>::require_same_grid(f_prev, flow, "consistency_loss");
  if (flow.channels() != 2) throw ShapeError("consistency_loss: flow must have 2 channels");

  const int C = f_prev.channels();
  const std::size_t P = f_prev.plane();
  const Tensor<T> warped = warp(f_cur, flow);
  ConsistencyResult<T> r;
  Tensor<T> d_warped;
  if (want_grad) {
    r.d_prev = Tensor<T>(C, f_prev.height(), f_prev.width());
    d_warped = Tensor<T>(C, f_prev.height(), f_prev.width());
  }
  const T inv_n = T(1) / static_cast<T>(P);
  const T eps = T(kCharbonnierEpsilon), zeta = T(kCharbonnierExponent);
  T total = 0;
  for (std::size_t i = 0; i < P; ++i) {
    T sq = 0;
    for (int c = 0; c < C; ++c) {
      const T a = f_prev.channel(c)[i] - warped.channel(c)[i];
      sq += a * a;
    }
    total += static_cast<T>(std::pow(sq + eps, zeta));
    if (want_grad) {
      const T scale = inv_n * T(2) * zeta * static_cast<T>(std::pow(sq + eps, zeta - T(1)));
      for (int c = 0; c < C; ++c) {
        const T g = scale * (f_prev.channel(c)[i] - warped.channel(c)[i]);
        r.d_prev.channel(c)[i] = g;
        d_warped.channel(c)[i] = -g;
      }
    }
  }
  r.value = total * inv_n;
  if (want_grad) {
    r.d_cur = Tensor<T>(C, f_cur.height(), f_cur.width());
    r.d_flow = Tensor<T>(2, flow.height(), flow.width());
    warp_backward(f_cur, flow, d_warped, &r.d_cur, &r.d_flow);
  }
  return r;
}

template <typename T>
T consistency_loss(const Tensor<T>& flow, const Tensor<T>& f_prev, const Tensor<T>& f_cur) {
  return consistency_loss_grad(flow, f_prev, f_cur, false).value;
}

}  // namespace conjflow
