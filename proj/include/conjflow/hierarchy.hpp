#pragma once

// N-level stack of feature extractors and flow estimators. Every level owns a
// flow network and a feature network; the feature network has two weight sets,
// a gradient-updated one (applied to the earlier frame) and an exponential
// moving average of it (applied to the later frame).

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "conjflow/nn.hpp"
#include "conjflow/random.hpp"
#include "conjflow/tensor.hpp"

namespace conjflow {

/// Raised when a forward pass or a loss produces non-finite values.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LevelSpec {
  int level = 1;
  int input_channels = 3;     // channels of the level below (image channels at level 1)
  int feature_channels = 32;  // per-pixel output of the feature network
  int feature_width = 8;
  int feature_depth = 2;
  int flow_width = 8;
  int flow_depth = 2;
  int block_convs = 2;
  bool feature_input_skip = true;
  bool flow_input_skip = false;
  double flow_head_scale = 0.1;

  nn::UNetSpec feature_net() const {
    return {input_channels, feature_channels, feature_width, feature_depth, block_convs, feature_input_skip, 1.0};
  }
  nn::UNetSpec flow_net() const {
    return {2 * input_channels, 2, flow_width, flow_depth, block_convs, flow_input_skip, flow_head_scale};
  }
};

template <typename T>
struct LevelWeights {
  std::vector<T> flow;  // flow estimator
  std::vector<T> gra;   // fast learner, gradient-updated
  std::vector<T> ema;   // slow learner, moving average of gra
};

template <typename T>
struct ModelState {
  std::vector<LevelSpec> specs;
  std::vector<nn::UNet<T>> feature_nets;
  std::vector<nn::UNet<T>> flow_nets;
  std::vector<LevelWeights<T>> weights;  // index 0 is level 1
  std::uint64_t step = 0;

  int levels() const { return static_cast<int>(specs.size()); }
  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < specs.size(); ++i) n += feature_nets[i].num_params() + flow_nets[i].num_params();
    return n;
  }
};

/// Levels 1..N chained as image -> f^1 -> f^2 ... with matching channel counts.
inline void validate_level_chain(const std::vector<LevelSpec>& specs, int image_channels) {
  if (specs.empty()) throw std::invalid_argument("model needs at least one level");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LevelSpec& s = specs[i];
    const int expected_in = i == 0 ? image_channels : specs[i - 1].feature_channels;
    if (s.level != static_cast<int>(i) + 1)
      throw std::invalid_argument("level specs must be numbered 1..N in order");
    if (s.input_channels != expected_in)
      throw std::invalid_argument("level " + std::to_string(s.level) + " expects " + std::to_string(expected_in) +
                                  " input channels, spec says " + std::to_string(s.input_channels));
    if (s.feature_channels <= 0 || s.feature_depth < 0 || s.flow_depth < 0 || s.block_convs < 1)
      throw std::invalid_argument("level " + std::to_string(s.level) + ": invalid width/depth");
  }
}

/// Standard chain of N levels with the given network shape.
inline std::vector<LevelSpec> make_level_chain(int levels, int image_channels, const LevelSpec& shape) {
  std::vector<LevelSpec> specs;
  for (int l = 1; l <= levels; ++l) {
    LevelSpec s = shape;
    s.level = l;
    s.input_channels = l == 1 ? image_channels : shape.feature_channels;
    specs.push_back(s);
  }
  return specs;
}

template <typename T>
ModelState<T> build_model(const std::vector<LevelSpec>& specs, int image_channels, std::uint64_t seed) {
  validate_level_chain(specs, image_channels);
  ModelState<T> m;
  m.specs = specs;
  Rng rng(seed);
  for (const LevelSpec& s : specs) {
    m.flow_nets.emplace_back(s.flow_net());
    m.feature_nets.emplace_back(s.feature_net());
    LevelWeights<T> w;
    w.flow.resize(m.flow_nets.back().num_params());
    w.gra.resize(m.feature_nets.back().num_params());
    m.flow_nets.back().init(w.flow, rng);
    m.feature_nets.back().init(w.gra, rng);
    w.ema = w.gra;
    m.weights.push_back(std::move(w));
  }
  return m;
}

template <typename T>
FeatureMap<T> forward_features(const nn::UNet<T>& net, std::span<const T> weights, const Tensor<T>& input, int level,
                               nn::Tape<T>* tape = nullptr) {
  Tensor<T> out = net.forward(weights, input, tape);
  if (!out.all_finite()) throw DivergenceError("feature extractor at level " + std::to_string(level) + " diverged");
  return FeatureMap<T>(std::move(out), level);
}

/// Flow for the pair (prev, cur); the two inputs are channel-concatenated in that order.
template <typename T>
FlowField<T> forward_flow(const nn::UNet<T>& net, std::span<const T> weights, const Tensor<T>& f_prev,
                          const Tensor<T>& f_cur, int level, nn::Tape<T>* tape = nullptr) {
  Tensor<T>::require_same_shape(f_prev, f_cur, "forward_flow");
  Tensor<T> out = net.forward(weights, concat_channels(f_prev, f_cur), tape);
  if (!out.all_finite()) throw DivergenceError("flow estimator at level " + std::to_string(level) + " diverged");
  return FlowField<T>(std::move(out), level);
}

/// Per-level outputs of one forward sweep over a frame pair.
template <typename T>
struct PairActivations {
  std::vector<FlowField<T>> flows;        // delta^l, l = 1..N
  std::vector<FeatureMap<T>> feat_prev;   // f^l_{t-1} from the fast learner, l = 0..N
  std::vector<FeatureMap<T>> feat_cur;    // f^l_t from the slow learner, l = 0..N
  std::vector<nn::Tape<T>> flow_tapes;
  std::vector<nn::Tape<T>> feature_tapes;
};

/// Runs every level on (prev, cur): flows from the level below, features from GRA (prev) and EMA (cur).
template <typename T>
PairActivations<T> forward_pair(const ModelState<T>& m, const Tensor<T>& prev, const Tensor<T>& cur, bool record) {
  PairActivations<T> a;
  const int N = m.levels();
  a.feat_prev.emplace_back(prev, 0);
  a.feat_cur.emplace_back(cur, 0);
  if (record) {
    a.flow_tapes.resize(N);
    a.feature_tapes.resize(N);
  }
  for (int l = 1; l <= N; ++l) {
    const auto& w = m.weights[l - 1];
    a.flows.push_back(forward_flow<T>(m.flow_nets[l - 1], w.flow, a.feat_prev[l - 1], a.feat_cur[l - 1], l,
                                      record ? &a.flow_tapes[l - 1] : nullptr));
    a.feat_prev.push_back(forward_features<T>(m.feature_nets[l - 1], w.gra, a.feat_prev[l - 1], l,
                                              record ? &a.feature_tapes[l - 1] : nullptr));
    a.feat_cur.push_back(forward_features<T>(m.feature_nets[l - 1], w.ema, a.feat_cur[l - 1], l));
  }
  return a;
}

/// Slow-learner features of a single frame at every level (index 0 is the frame itself).
template <typename T>
std::vector<FeatureMap<T>> extract_features(const ModelState<T>& m, const Tensor<T>& frame) {
  std::vector<FeatureMap<T>> out;
  out.emplace_back(frame, 0);
  for (int l = 1; l <= m.levels(); ++l)
    out.push_back(forward_features<T>(m.feature_nets[l - 1], m.weights[l - 1].ema, out.back(), l));
  return out;
}

}  // namespace conjflow
