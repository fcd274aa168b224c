#pragma once

// Minimal dense-prediction network with hand-written backward passes.
//
// The network object describes the architecture only; parameters live in a flat
// buffer owned by the caller so that several weight sets (fast/slow learners)
// can share one architecture, and optimizers/EMA/checkpoints operate on plain
// vectors.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "conjflow/random.hpp"
#include "conjflow/tensor.hpp"

namespace conjflow::nn {

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kLeakySlope = 0.1;

/// Encoder-decoder shape. Spatial size of the output always equals the input's.
struct UNetSpec {
  int in_channels = 3;
  int out_channels = 32;
  int base_width = 8;
  int depth = 2;        // number of stride-2 stages
  int block_convs = 2;  // conv+norm+act units per stage
  bool input_skip = false;  // concatenate the raw input to the last hidden layer
  double head_init_scale = 1.0;
};

/// conv(k x k, stride) -> [instance norm] -> [leaky relu]
struct ConvUnit {
  int cin = 0, cout = 0, kernel = 3, stride = 1;
  bool norm = true, act = true, bias = false;
  std::size_t w_off = 0, b_off = 0, gamma_off = 0, beta_off = 0;

  int pad() const { return kernel / 2; }
  int out_extent(int n) const { return (n + 2 * pad() - kernel) / stride + 1; }
};

namespace detail {

inline int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

template <typename T>
void conv_forward(const ConvUnit& u, std::span<const T> params, const Tensor<T>& in, Tensor<T>& out) {
  const int H = in.height(), W = in.width(), Ho = u.out_extent(H), Wo = u.out_extent(W);
  const int k = u.kernel, s = u.stride, p = u.pad();
  out = Tensor<T>(u.cout, Ho, Wo);
  const T* w = params.data() + u.w_off;
  for (int co = 0; co < u.cout; ++co) {
    T* o = out.channel(co);
    if (u.bias) std::fill(o, o + out.plane(), params[u.b_off + co]);
    for (int ci = 0; ci < u.cin; ++ci) {
      const T* src = in.channel(ci);
      for (int ky = 0; ky < k; ++ky) {
        const int oy_lo = std::max(0, ceil_div(p - ky, s));
        const int oy_hi = std::min(Ho - 1, floor_div(H - 1 + p - ky, s));
        for (int kx = 0; kx < k; ++kx) {
          const T wv = w[((static_cast<std::size_t>(co) * u.cin + ci) * k + ky) * k + kx];
          const int ox_lo = std::max(0, ceil_div(p - kx, s));
          const int ox_hi = std::min(Wo - 1, floor_div(W - 1 + p - kx, s));
          for (int oy = oy_lo; oy <= oy_hi; ++oy) {
            const T* row = src + static_cast<std::size_t>(oy * s + ky - p) * W + (kx - p);
            T* orow = o + static_cast<std::size_t>(oy) * Wo;
            if (s == 1) {
              for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * row[ox];
            } else {
              for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * row[ox * s];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward(const ConvUnit& u, std::span<const T> params, const Tensor<T>& in,
                   const Tensor<T>& d_out, std::span<T> d_params, Tensor<T>* d_in) {
  const int H = in.height(), W = in.width(), Ho = d_out.height(), Wo = d_out.width();
  const int k = u.kernel, s = u.stride, p = u.pad();
  const T* w = params.data() + u.w_off;
  T* dw = d_params.data() + u.w_off;
  if (d_in) *d_in = Tensor<T>(u.cin, H, W);
  for (int co = 0; co < u.cout; ++co) {
    const T* g = d_out.channel(co);
    if (u.bias) {
      T acc = 0;
      for (std::size_t i = 0; i < d_out.plane(); ++i) acc += g[i];
      d_params[u.b_off + co] += acc;
    }
    for (int ci = 0; ci < u.cin; ++ci) {
      const T* src = in.channel(ci);
      T* dsrc = d_in ? d_in->channel(ci) : nullptr;
      for (int ky = 0; ky < k; ++ky) {
        const int oy_lo = std::max(0, ceil_div(p - ky, s));
        const int oy_hi = std::min(Ho - 1, floor_div(H - 1 + p - ky, s));
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t wi = ((static_cast<std::size_t>(co) * u.cin + ci) * k + ky) * k + kx;
          const T wv = w[wi];
          const int ox_lo = std::max(0, ceil_div(p - kx, s));
          const int ox_hi = std::min(Wo - 1, floor_div(W - 1 + p - kx, s));
          T acc = 0;
          for (int oy = oy_lo; oy <= oy_hi; ++oy) {
            const std::size_t in_row = static_cast<std::size_t>(oy * s + ky - p) * W + (kx - p);
            const T* grow = g + static_cast<std::size_t>(oy) * Wo;
            const T* row = src + in_row;
            if (s == 1) {
              for (int ox = ox_lo; ox <= ox_hi; ++ox) acc += grow[ox] * row[ox];
              if (dsrc) {
                T* drow = dsrc + in_row;
                for (int ox = ox_lo; ox <= ox_hi; ++ox) drow[ox] += wv * grow[ox];
              }
            } else {
              for (int ox = ox_lo; ox <= ox_hi; ++ox) acc += grow[ox] * row[ox * s];
              if (dsrc) {
                T* drow = dsrc + in_row;
                for (int ox = ox_lo; ox <= ox_hi; ++ox) drow[ox * s] += wv * grow[ox];
              }
            }
          }
          dw[wi] += acc;
        }
      }
    }
  }
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& in, int height, int width) {
  Tensor<T> out(in.channels(), height, width);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < height; ++y) {
      const int sy = std::min(y / 2, in.height() - 1);
      for (int x = 0; x < width; ++x) out(c, y, x) = in(c, sy, std::min(x / 2, in.width() - 1));
    }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& d_out, int in_height, int in_width) {
  Tensor<T> d_in(d_out.channels(), in_height, in_width);
  for (int c = 0; c < d_out.channels(); ++c)
    for (int y = 0; y < d_out.height(); ++y) {
      const int sy = std::min(y / 2, in_height - 1);
      for (int x = 0; x < d_out.width(); ++x) d_in(c, sy, std::min(x / 2, in_width - 1)) += d_out(c, y, x);
    }
  return d_in;
}

// Split a channel-concatenated gradient back into its two parts.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& t, int first) {
  Tensor<T> a(first, t.height(), t.width()), b(t.channels() - first, t.height(), t.width());
  std::copy(t.storage().begin(), t.storage().begin() + a.size(), a.storage().begin());
  std::copy(t.storage().begin() + a.size(), t.storage().end(), b.storage().begin());
  return {std::move(a), std::move(b)};
}

}  // namespace detail

template <typename T>
struct UnitCache {
  Tensor<T> input;
  Tensor<T> xhat;      // normalized conv output (norm units only)
  Tensor<T> pre_act;   // input to the activation
  std::vector<T> inv_std;
};

/// Activations retained by forward() for a later backward().
template <typename T>
struct Tape {
  std::vector<UnitCache<T>> units;
  std::vector<std::pair<int, int>> skip_sizes;  // spatial size at each encoder stage
  Tensor<T> input;
};

template <typename T>
class UNet {
 public:
  UNet() = default;
  explicit UNet(const UNetSpec& spec) : spec_(spec) {
    if (spec.in_channels <= 0 || spec.out_channels <= 0) throw std::invalid_argument("UNet: channels must be positive");
    if (spec.base_width <= 0 || spec.depth < 0 || spec.block_convs < 1)
      throw std::invalid_argument("UNet: invalid width/depth");
    auto width_at = [&](int s) { return spec.base_width << s; };
    add(spec.in_channels, width_at(0), 3, 1);
    for (int i = 1; i < spec.block_convs; ++i) add(width_at(0), width_at(0), 3, 1);
    for (int s = 1; s <= spec.depth; ++s) {
      add(width_at(s - 1), width_at(s), 3, 2);
      for (int i = 1; i < spec.block_convs; ++i) add(width_at(s), width_at(s), 3, 1);
    }
    for (int s = spec.depth; s >= 1; --s) {
      add(width_at(s) + width_at(s - 1), width_at(s - 1), 3, 1);
      for (int i = 1; i < spec.block_convs; ++i) add(width_at(s - 1), width_at(s - 1), 3, 1);
    }
    const int head_in = width_at(0) + (spec.input_skip ? spec.in_channels : 0);
    add(head_in, spec.out_channels, 1, 1, /*norm=*/false, /*act=*/false, /*bias=*/true);
  }

  const UNetSpec& spec() const { return spec_; }
  std::size_t num_params() const { return num_params_; }
  const std::vector<ConvUnit>& units() const { return units_; }

  /// He-normal convolution weights, unit gain, zero shift; the output head is scaled by head_init_scale.
  void init(std::span<T> params, Rng& rng) const {
    check_size(params.size());
    for (std::size_t i = 0; i < units_.size(); ++i) {
      const ConvUnit& u = units_[i];
      const bool head = i + 1 == units_.size();
      const double fan_in = static_cast<double>(u.cin) * u.kernel * u.kernel;
      const double std = head ? spec_.head_init_scale / std::sqrt(fan_in) : std::sqrt(2.0 / fan_in);
      const std::size_t nw = static_cast<std::size_t>(u.cout) * u.cin * u.kernel * u.kernel;
      for (std::size_t j = 0; j < nw; ++j) params[u.w_off + j] = static_cast<T>(std * standard_normal(rng));
      if (u.bias) std::fill_n(params.begin() + u.b_off, u.cout, T(0));
      if (u.norm) {
        std::fill_n(params.begin() + u.gamma_off, u.cout, T(1));
        std::fill_n(params.begin() + u.beta_off, u.cout, T(0));
      }
    }
  }

  Tensor<T> forward(std::span<const T> params, const Tensor<T>& input, Tape<T>* tape = nullptr) const {
    check_size(params.size());
    if (input.channels() != spec_.in_channels)
      throw ShapeError("UNet: expected " + std::to_string(spec_.in_channels) + " input channels, got " +
                       std::to_string(input.channels()));
    Tape<T> local;
    Tape<T>& tp = tape ? *tape : local;
    tp.units.assign(units_.size(), {});
    tp.skip_sizes.clear();
    tp.input = input;
    const bool keep = tape != nullptr;

    std::size_t ui = 0;
    std::vector<Tensor<T>> skips;
    Tensor<T> a = input;
    for (int s = 0; s <= spec_.depth; ++s) {
      for (int i = 0; i < spec_.block_convs; ++i) a = unit_forward(ui++, params, a, tp, keep);
      tp.skip_sizes.emplace_back(a.height(), a.width());
      skips.push_back(a);
    }
    for (int s = spec_.depth; s >= 1; --s) {
      const Tensor<T>& skip = skips[s - 1];
      a = concat_channels(detail::upsample_nearest(a, skip.height(), skip.width()), skip);
      for (int i = 0; i < spec_.block_convs; ++i) a = unit_forward(ui++, params, a, tp, keep);
    }
    if (spec_.input_skip) a = concat_channels(a, input);
    return unit_forward(ui, params, a, tp, keep);
  }

  /// Accumulates parameter gradients into d_params; returns d(input) when requested.
  Tensor<T> backward(std::span<const T> params, const Tape<T>& tp, const Tensor<T>& d_out, std::span<T> d_params,
                     bool want_input_grad) const {
    check_size(params.size());
    check_size(d_params.size());
    if (tp.units.size() != units_.size() || tp.units.back().input.empty())
      throw std::logic_error("UNet::backward without a recorded forward pass");
    const int w0 = spec_.base_width;
    const int D = spec_.depth, B = spec_.block_convs;
    Tensor<T> d_input;
    if (want_input_grad) d_input = Tensor<T>(spec_.in_channels, tp.input.height(), tp.input.width());

    std::size_t ui = units_.size() - 1;
    Tensor<T> g = unit_backward(ui, params, tp, d_out, d_params, true);
    if (spec_.input_skip) {
      auto [ga, gi] = detail::split_channels(g, w0);
      g = std::move(ga);
      if (want_input_grad) d_input += gi;
    }
    std::vector<Tensor<T>> d_skips(D + 1);
    for (int s = 1; s <= D; ++s) {
      for (int i = B - 1; i >= 0; --i) g = unit_backward(--ui, params, tp, g, d_params, true);
      auto [gu, gs] = detail::split_channels(g, w0 << s);
      d_skips[s - 1] = std::move(gs);
      const auto [h, w] = tp.skip_sizes[s];
      g = detail::upsample_nearest_backward(gu, h, w);
    }
    for (int s = D; s >= 0; --s) {
      if (s < D) g += d_skips[s];
      for (int i = B - 1; i >= 0; --i) {
        const bool first_unit = s == 0 && i == 0;
        g = unit_backward(--ui, params, tp, g, d_params, !first_unit || want_input_grad);
      }
    }
    if (want_input_grad) d_input += g;
    return d_input;
  }

 private:
  void add(int cin, int cout, int k, int stride, bool norm = true, bool act = true, bool bias = false) {
    ConvUnit u;
    u.cin = cin;
    u.cout = cout;
    u.kernel = k;
    u.stride = stride;
    u.norm = norm;
    u.act = act;
    u.bias = bias;
    u.w_off = num_params_;
    num_params_ += static_cast<std::size_t>(cout) * cin * k * k;
    if (bias) {
      u.b_off = num_params_;
      num_params_ += cout;
    }
    if (norm) {
      u.gamma_off = num_params_;
      u.beta_off = num_params_ + cout;
      num_params_ += 2 * static_cast<std::size_t>(cout);
    }
    units_.push_back(u);
  }

  void check_size(std::size_t n) const {
    if (n != num_params_) throw ShapeError("UNet: parameter buffer has wrong size");
  }

  Tensor<T> unit_forward(std::size_t i, std::span<const T> params, const Tensor<T>& x, Tape<T>& tp, bool keep) const {
    const ConvUnit& u = units_[i];
    UnitCache<T>& c = tp.units[i];
    if (keep) c.input = x;
    Tensor<T> z;
    detail::conv_forward(u, params, x, z);
    if (u.norm) {
      const std::size_t n = z.plane();
      c.inv_std.assign(u.cout, T(0));
      for (int ch = 0; ch < u.cout; ++ch) {
        T* zc = z.channel(ch);
        T mean = 0;
        for (std::size_t j = 0; j < n; ++j) mean += zc[j];
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (zc[j] - mean) * (zc[j] - mean);
        var /= static_cast<T>(n);
        const T inv = T(1) / std::sqrt(var + T(kNormEpsilon));
        c.inv_std[ch] = inv;
        for (std::size_t j = 0; j < n; ++j) zc[j] = (zc[j] - mean) * inv;
      }
      if (keep) c.xhat = z;
      for (int ch = 0; ch < u.cout; ++ch) {
        const T gm = params[u.gamma_off + ch], bt = params[u.beta_off + ch];
        T* zc = z.channel(ch);
        for (std::size_t j = 0; j < n; ++j) zc[j] = gm * zc[j] + bt;
      }
    }
    if (u.act) {
      if (keep) c.pre_act = z;
      for (auto& v : z.storage())
        if (v < T(0)) v *= T(kLeakySlope);
    }
    if (!keep) c = UnitCache<T>{};
    return z;
  }

  Tensor<T> unit_backward(std::size_t i, std::span<const T> params, const Tape<T>& tp, const Tensor<T>& d_y,
                          std::span<T> d_params, bool want_input_grad) const {
    const ConvUnit& u = units_[i];
    const UnitCache<T>& c = tp.units[i];
    Tensor<T> g = d_y;
    if (u.act) {
      for (std::size_t j = 0; j < g.size(); ++j)
        if (c.pre_act.storage()[j] < T(0)) g.storage()[j] *= T(kLeakySlope);
    }
    if (u.norm) {
      const std::size_t n = g.plane();
      const T inv_n = T(1) / static_cast<T>(n);
      for (int ch = 0; ch < u.cout; ++ch) {
        T* gc = g.channel(ch);
        const T* xh = c.xhat.channel(ch);
        const T gm = params[u.gamma_off + ch];
        T sum_g = 0, sum_gx = 0;
        for (std::size_t j = 0; j < n; ++j) {
          sum_g += gc[j];
          sum_gx += gc[j] * xh[j];
        }
        d_params[u.gamma_off + ch] += sum_gx;
        d_params[u.beta_off + ch] += sum_g;
        // d xhat = g * gamma; dz = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        const T scale = gm * c.inv_std[ch];
        const T mg = sum_g * inv_n, mgx = sum_gx * inv_n;
        for (std::size_t j = 0; j < n; ++j) gc[j] = scale * (gc[j] - mg - xh[j] * mgx);
      }
    }
    Tensor<T> d_x;
    detail::conv_backward(u, params, c.input, g, d_params, want_input_grad ? &d_x : nullptr);
    return d_x;
  }

  UNetSpec spec_;
  std::vector<ConvUnit> units_;
  std::size_t num_params_ = 0;
};

}  // namespace conjflow::nn
