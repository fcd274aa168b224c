#pragma once

// Online training loop. Every consecutive frame pair drives exactly one update:
// flow weights and fast-learner feature weights take a gradient step on the
// summed conjugation + contrastive loss, then the slow learner tracks the fast
// one by exponential moving average.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conjflow/checkpoint.hpp"
#include "conjflow/config.hpp"
#include "conjflow/conjugation.hpp"
#include "conjflow/contrastive.hpp"
#include "conjflow/hierarchy.hpp"
#include "conjflow/optim.hpp"
#include "conjflow/random.hpp"
#include "conjflow/stream.hpp"

namespace conjflow {

// ---------------------------------------------------------------------------
// Warm-up schedule

/// Which networks learn at time t. Index 0 is level 1.
struct ActivationMask {
  std::vector<bool> flow, features;

  bool flow_active(int level) const { return flow.at(level - 1); }
  bool features_active(int level) const { return features.at(level - 1); }
  bool all() const {
    for (std::size_t i = 0; i < flow.size(); ++i)
      if (!flow[i] || !features[i]) return false;
    return true;
  }
};

/// delta^l starts learning at 2(l-1) T frames, f^l at (2l-1) T frames.
inline ActivationMask schedule_active_components(std::int64_t t, std::int64_t t_sched_frames, int levels) {
  if (t < 0) throw std::invalid_argument("schedule: t must be >= 0");
  if (t_sched_frames < 0) throw std::invalid_argument("schedule: warm-up must be >= 0");
  ActivationMask m;
  for (int l = 1; l <= levels; ++l) {
    m.flow.push_back(t >= 2 * (l - 1) * t_sched_frames);
    m.features.push_back(t >= (2 * l - 1) * t_sched_frames);
  }
  return m;
}

inline std::int64_t warmup_frames(const Config& c) {
  return static_cast<std::int64_t>(std::llround(c.trainer.t_sched * double(c.lap_frames())));
}

// ---------------------------------------------------------------------------
// Loss assembly

/// Turns whole term families off (diagnostics and tests); ANDed with the schedule.
struct TermSwitches {
  bool same_level = true;   // conjugation (i) + (ii)
  bool lower_level = true;  // conjugation (iii) + flow regularizer
  bool self = true;         // contrastive
};

template <typename T>
struct LevelTerms {
  T cur = 0, skip = 0, low = 0, reg = 0;  // unweighted consistency values; reg is weighted
  T conj = 0;                             // weighted conjugation loss of the level
  T self = 0, self_in_frame = 0, self_cross = 0;
};

template <typename T>
struct TotalLoss {
  T value = 0;
  std::vector<LevelTerms<T>> levels;
  std::vector<Tensor<T>> d_flow;       // index l-1: gradient on delta^l
  std::vector<Tensor<T>> d_feat_prev;  // index l: gradient on f^l_prev (index 0 unused)
};

template <typename T>
TotalLoss<T> total_loss(const PairActivations<T>& a, const Config& cfg, const ActivationMask& mask, Rng& rng,
                        bool want_grad = true, TermSwitches sw = {}) {
  const int N = static_cast<int>(a.flows.size());
  if (static_cast<int>(cfg.conjugation.levels.size()) != N)
    throw std::invalid_argument("total_loss: config levels do not match activations");
  TotalLoss<T> out;
  out.levels.resize(N);
  if (want_grad) {
    for (int l = 1; l <= N; ++l) out.d_flow.emplace_back(2, a.flows[l - 1].height(), a.flows[l - 1].width());
    out.d_feat_prev.emplace_back();
    for (int l = 1; l <= N; ++l)
      out.d_feat_prev.emplace_back(a.feat_prev[l].channels(), a.feat_prev[l].height(), a.feat_prev[l].width());
  }
  for (int l = 1; l <= N; ++l) {
    LevelTerms<T>& lt = out.levels[l - 1];
    const bool same = sw.same_level && mask.features_active(l);
    const bool lower = sw.lower_level && mask.flow_active(l);
    if (same || lower) {
      ConjugationInputs<T> in{l, &a.flows[l - 1], &a.flows[0], &a.feat_prev[l], &a.feat_cur[l], &a.feat_prev[l - 1],
                              &a.feat_cur[l - 1]};
      auto r = conjugation_loss_grad(in, cfg.conjugation, ConjugationTerms{same, lower}, want_grad);
      lt.cur = r.term_cur;
      lt.skip = r.term_skip;
      lt.low = r.term_low;
      lt.reg = r.term_reg;
      lt.conj = r.value;
      if (want_grad) {
        out.d_flow[l - 1] += r.d_flow;
        out.d_feat_prev[l] += r.d_feat_prev;
        if (l > 1) out.d_feat_prev[l - 1] += r.d_lower_prev;
      }
    }
    if (sw.self && mask.features_active(l)) {
      const auto& flow = a.flows[l - 1];
      const auto dist =
          build_sampling_distribution(flow, a.feat_prev[l], static_threshold(flow, cfg.contrastive), cfg.contrastive.sampling);
      const auto coords = sample_coords(dist, cfg.contrastive.eta, rng);
      auto r = self_supervised_loss_grad<T>(a.feat_prev[l], a.feat_cur[l], flow, coords, cfg.contrastive, want_grad);
      lt.self = r.value;
      lt.self_in_frame = r.in_frame;
      lt.self_cross = r.cross;
      if (want_grad) out.d_feat_prev[l] += r.d_prev;
    }
    out.value += lt.conj + lt.self;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradients and updates

template <typename T>
struct Gradients {
  std::vector<std::vector<T>> flow;  // per level, d loss / d gamma
  std::vector<std::vector<T>> gra;   // per level, d loss / d theta_GRA
  T loss = 0;
  std::vector<LevelTerms<T>> terms;
  std::optional<FlowField<T>> base_flow;  // delta^1 of the un-augmented pair

  void zero_like(const ModelState<T>& m) {
    flow.clear();
    gra.clear();
    for (const auto& w : m.weights) {
      flow.emplace_back(w.flow.size(), T(0));
      gra.emplace_back(w.gra.size(), T(0));
    }
  }
  bool finite() const {
    if (!std::isfinite(double(loss))) return false;
    for (const auto* group : {&flow, &gra})
      for (const auto& v : *group)
        for (T x : v)
          if (!std::isfinite(double(x))) return false;
    return true;
  }
};

/// Backpropagates one pair's loss into `g` (accumulating, scaled by `weight`).
/// EMA outputs and flow-network inputs are constants; levels run from N down to 1.
template <typename T>
TotalLoss<T> accumulate_pair_gradients(const ModelState<T>& m, const Tensor<T>& prev, const Tensor<T>& cur,
                                       const Config& cfg, const ActivationMask& mask, Rng& rng, Gradients<T>& g,
                                       T weight, TermSwitches sw = {}, PairActivations<T>* keep = nullptr) {
  PairActivations<T> a = forward_pair(m, prev, cur, true);
  TotalLoss<T> L = total_loss(a, cfg, mask, rng, true, sw);
  const int N = m.levels();
  if (weight != T(1)) {
    for (auto& d : L.d_flow) d *= weight;
    for (auto& d : L.d_feat_prev) d *= weight;
  }
  for (int l = N; l >= 1; --l) {
    const auto& w = m.weights[l - 1];
    if (mask.flow_active(l))
      m.flow_nets[l - 1].backward(w.flow, a.flow_tapes[l - 1], L.d_flow[l - 1], g.flow[l - 1], false);
    if (mask.features_active(l)) {
      Tensor<T> d_in =
          m.feature_nets[l - 1].backward(w.gra, a.feature_tapes[l - 1], L.d_feat_prev[l], g.gra[l - 1], l > 1);
      if (l > 1) L.d_feat_prev[l - 1] += d_in;
    }
  }
  if (keep) *keep = std::move(a);
  return L;
}

template <typename T>
Gradients<T> compute_gradients(const ModelState<T>& m, const std::vector<FramePair<T>>& pairs, const Config& cfg,
                               const ActivationMask& mask, Rng& rng, TermSwitches sw = {}) {
  if (pairs.empty()) throw std::invalid_argument("compute_gradients: no pairs");
  Gradients<T> g;
  g.zero_like(m);
  const T weight = T(1) / static_cast<T>(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    PairActivations<T> a;
    TotalLoss<T> L = accumulate_pair_gradients(m, pairs[i].prev.pixels, pairs[i].cur.pixels, cfg, mask, rng, g, weight,
                                               sw, i == 0 ? &a : nullptr);
    g.loss += weight * L.value;
    if (i == 0) {
      g.terms = L.levels;
      g.base_flow = a.flows[0];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace detail {

template <typename T>
Tensor<T> resample_crop(const Tensor<T>& img, double x0, double y0, double cw, double ch) {
  const int H = img.height(), W = img.width();
  Tensor<T> out(img.channels(), H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const T sx = static_cast<T>(x0 + (x + 0.5) * cw / W - 0.5);
      const T sy = static_cast<T>(y0 + (y + 0.5) * ch / H - 0.5);
      const BilinearTap<T> tap(sx, sy, W, H);
      for (int c = 0; c < img.channels(); ++c) out(c, y, x) = tap.sample(img.channel(c), W);
    }
  return out;
}

template <typename T>
Tensor<T> flip(const Tensor<T>& img, bool horizontal, bool vertical) {
  Tensor<T> out(img.channels(), img.height(), img.width());
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        out(c, y, x) = img(c, vertical ? img.height() - 1 - y : y, horizontal ? img.width() - 1 - x : x);
  return out;
}

template <typename T>
Tensor<T> gaussian_blur(const Tensor<T>& img, double sigma) {
  if (sigma <= 0) return img;
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  const int H = img.height(), W = img.width();
  Tensor<T> tmp(img.channels(), H, W), out(img.channels(), H, W);
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * double(img(c, y, std::clamp(x + i, 0, W - 1)));
        tmp(c, y, x) = static_cast<T>(acc);
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * double(tmp(c, std::clamp(y + i, 0, H - 1), x));
        out(c, y, x) = static_cast<T>(acc);
      }
  }
  return out;
}

template <typename T>
Tensor<T> color_jitter(const Tensor<T>& img, double strength, Rng& rng) {
  const double brightness = uniform(rng, 1 - strength, 1 + strength);
  const double contrast = uniform(rng, 1 - strength, 1 + strength);
  const double saturation = uniform(rng, 1 - strength, 1 + strength);
  const int C = img.channels();
  Tensor<T> out = img;
  double mean = 0;
  for (T v : img.values()) mean += double(v);
  mean /= double(img.size());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      double gray = 0;
      for (int c = 0; c < C; ++c) gray += double(img(c, y, x)) / C;
      for (int c = 0; c < C; ++c) {
        double v = double(img(c, y, x));
        if (C == 3) v = gray + saturation * (v - gray);
        v = mean + contrast * (v - mean);
        v *= brightness;
        out(c, y, x) = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
    }
  return out;
}

}  // namespace detail

/// The original pair followed by `views` augmented copies. Flips apply to both frames;
/// crop and color distortion to one randomly chosen frame.
template <typename T>
std::vector<FramePair<T>> augment_pair(const FramePair<T>& pair, Rng& rng, const AugmentConfig& aug) {
  std::vector<FramePair<T>> out{pair};
  if (!aug.any()) return out;
  for (int v = 0; v < aug.views; ++v) {
    FramePair<T> p = pair;
    if (aug.crop) {
      const double ratio = uniform(rng, aug.crop_min, 1.0);
      const int W = p.prev.pixels.width(), H = p.prev.pixels.height();
      const double cw = ratio * W, ch = ratio * H;
      const double x0 = uniform(rng, 0, W - cw), y0 = uniform(rng, 0, H - ch);
      Tensor<T>& target = bernoulli(rng, 0.5) ? p.prev.pixels : p.cur.pixels;
      target = detail::resample_crop(target, x0, y0, cw, ch);
    }
    if (aug.flip) {
      const bool h = bernoulli(rng, 0.5), vt = bernoulli(rng, 0.5);
      p.prev.pixels = detail::flip(p.prev.pixels, h, vt);
      p.cur.pixels = detail::flip(p.cur.pixels, h, vt);
    }
    if (aug.color) {
      Tensor<T>& target = bernoulli(rng, 0.5) ? p.prev.pixels : p.cur.pixels;
      target = detail::color_jitter(target, aug.jitter, rng);
      target = detail::gaussian_blur(target, uniform(rng, 0.1, aug.blur_sigma));
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training state

template <typename T>
struct TrainState {
  ModelState<T> model;
  std::vector<Optimizer<T>> flow_opt, feature_opt;
  Rng rng;
  std::int64_t next_frame = 0;  // stream index of the frame that pairs with the next one read
};

template <typename T>
TrainState<T> init_train_state(const Config& cfg) {
  TrainState<T> s;
  s.model = build_model<T>(cfg.level_specs(), cfg.stream.channels, cfg.model.seed);
  for (const auto& w : s.model.weights) {
    s.flow_opt.emplace_back(cfg.trainer.flow_optimizer, cfg.trainer.alpha_m, w.flow.size());
    s.feature_opt.emplace_back(cfg.trainer.feature_optimizer, cfg.trainer.alpha_f, w.gra.size());
  }
  s.rng.seed(cfg.trainer.seed);
  return s;
}

template <typename T>
struct StepReport {
  std::uint64_t step = 0;  // steps completed after this one
  std::int64_t t = 0;      // stream time of the later frame
  T loss = 0;
  std::vector<LevelTerms<T>> terms;
  ActivationMask mask;
  std::size_t pairs = 1;
  bool diverged = false;
  std::string error;
  std::optional<FlowField<T>> base_flow;
};

/// One online update on `pair`: gradient step on flows and GRA weights, then EMA.
/// A non-finite loss or gradient leaves every weight untouched.
template <typename T>
StepReport<T> train_step(TrainState<T>& s, const FramePair<T>& pair, const Config& cfg) {
  if (pair.cur.t != pair.prev.t + 1 && pair.cur.t != pair.prev.t)
    throw std::invalid_argument("train_step: frames must be consecutive");
  StepReport<T> r;
  r.t = pair.cur.t;
  r.mask = schedule_active_components(pair.cur.t, warmup_frames(cfg), s.model.levels());
  try {
    const auto pairs = augment_pair(pair, s.rng, cfg.trainer.augment);
    r.pairs = pairs.size();
    Gradients<T> g = compute_gradients(s.model, pairs, cfg, r.mask, s.rng);
    r.loss = g.loss;
    r.terms = g.terms;
    r.base_flow = std::move(g.base_flow);
    if (!g.finite()) throw DivergenceError("non-finite loss or gradient");
    for (int l = 1; l <= s.model.levels(); ++l) {
      auto& w = s.model.weights[l - 1];
      if (r.mask.flow_active(l)) s.flow_opt[l - 1].step(w.flow, g.flow[l - 1]);
      if (r.mask.features_active(l)) s.feature_opt[l - 1].step(w.gra, g.gra[l - 1]);
      ema_update<T>(w.ema, w.gra, cfg.trainer.xi);
    }
  } catch (const DivergenceError& e) {
    r.diverged = true;
    r.error = e.what();
  } catch (const std::domain_error& e) {
    r.diverged = true;
    r.error = e.what();
  }
  ++s.model.step;
  r.step = s.model.step;
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
Checkpoint to_checkpoint(const TrainState<T>& s, const Config& cfg) {
  Checkpoint c;
  c.config_hash = config_hash(cfg);
  c.put_u64("step", s.model.step);
  c.put_u64("next_frame", static_cast<std::uint64_t>(s.next_frame));
  for (int l = 1; l <= s.model.levels(); ++l) {
    const std::string p = "level" + std::to_string(l) + ".";
    const auto& w = s.model.weights[l - 1];
    c.put_array<T>(p + "flow", w.flow);
    c.put_array<T>(p + "gra", w.gra);
    c.put_array<T>(p + "ema", w.ema);
    for (const auto& [name, opt] : {std::pair{"flow_opt", &s.flow_opt[l - 1]}, std::pair{"feature_opt", &s.feature_opt[l - 1]}}) {
      c.put_u64(p + name + ".steps", opt->steps);
      c.put_array<T>(p + name + ".m", opt->m);
      c.put_array<T>(p + name + ".v", opt->v);
    }
  }
  c.put_blob("rng", save_rng(s.rng));
  c.put_blob("config", to_ini(cfg));
  return c;
}

template <typename T>
TrainState<T> from_checkpoint(const Checkpoint& c, const Config& cfg) {
  if (c.config_hash != config_hash(cfg)) throw CheckpointError("checkpoint was written with a different configuration");
  TrainState<T> s = init_train_state<T>(cfg);
  s.model.step = c.get_u64("step");
  s.next_frame = static_cast<std::int64_t>(c.get_u64("next_frame"));
  for (int l = 1; l <= s.model.levels(); ++l) {
    const std::string p = "level" + std::to_string(l) + ".";
    auto& w = s.model.weights[l - 1];
    c.get_into<T>(p + "flow", w.flow);
    c.get_into<T>(p + "gra", w.gra);
    c.get_into<T>(p + "ema", w.ema);
    for (const auto& [name, opt] : {std::pair{"flow_opt", &s.flow_opt[l - 1]}, std::pair{"feature_opt", &s.feature_opt[l - 1]}}) {
      opt->steps = c.get_u64(p + name + ".steps");
      c.get_into<T>(p + name + ".m", opt->m);
      c.get_into<T>(p + name + ".v", opt->v);
    }
  }
  load_rng(s.rng, c.get_blob("rng"));
  return s;
}

/// Endpoint error of `flow` against `truth`, averaged over pixels where `mask` is set (all when empty).
template <typename T>
double endpoint_error(const Tensor<T>& flow, const Tensor<float>& truth, const std::vector<bool>& mask = {}) {
  Tensor<T>::require_same_grid(flow, flow, "endpoint_error");
  if (truth.height() != flow.height() || truth.width() != flow.width()) throw ShapeError("endpoint_error: grid mismatch");
  double sum = 0;
  std::size_t n = 0;
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      if (!mask.empty() && !mask[std::size_t(y) * flow.width() + x]) continue;
      sum += std::hypot(double(flow(0, y, x)) - truth(0, y, x), double(flow(1, y, x)) - truth(1, y, x));
      ++n;
    }
  return n ? sum / double(n) : 0.0;
}

/// Pixels with non-zero true motion.
inline std::vector<bool> moving_mask(const Tensor<float>& truth) {
  std::vector<bool> m(truth.plane());
  for (int y = 0; y < truth.height(); ++y)
    for (int x = 0; x < truth.width(); ++x)
      m[std::size_t(y) * truth.width() + x] = truth(0, y, x) != 0.0f || truth(1, y, x) != 0.0f;
  return m;
}

// ---------------------------------------------------------------------------
// Run loop

template <typename T>
struct RunOptions {
  std::optional<fs::path> resume;       // checkpoint to continue from
  std::ostream* metrics = nullptr;      // JSON lines
  std::optional<fs::path> checkpoint_dir;
  std::int64_t max_steps = -1;          // -1: config value (0 there means the whole stream)
  // Called after every step with the state and the later frame of the pair.
  std::function<void(const StepReport<T>&, TrainState<T>&, const Frame<float>&)> on_step;
};

template <typename T>
struct RunResult {
  TrainState<T> state;
  std::int64_t steps = 0;
  std::int64_t diverged = 0;
};

inline fs::path checkpoint_path(const fs::path& dir, std::uint64_t step) {
  char name[40];
  std::snprintf(name, sizeof(name), "step_%08llu.ckpt", static_cast<unsigned long long>(step));
  return dir / name;
}

template <typename T>
nlohmann::json step_record(const StepReport<T>& r, double wall, std::optional<double> epe) {
  nlohmann::json j;
  j["step"] = r.step;
  j["t"] = r.t;
  j["loss"] = double(r.loss);
  j["diverged"] = r.diverged;
  if (r.diverged) j["error"] = r.error;
  nlohmann::json levels = nlohmann::json::array();
  for (std::size_t l = 0; l < r.terms.size(); ++l) {
    const auto& t = r.terms[l];
    levels.push_back({{"level", l + 1},
                      {"flow_active", bool(r.mask.flow[l])},
                      {"features_active", bool(r.mask.features[l])},
                      {"conj", double(t.conj)},
                      {"lc_cur", double(t.cur)},
                      {"lc_skip", double(t.skip)},
                      {"lc_low", double(t.low)},
                      {"reg", double(t.reg)},
                      {"self", double(t.self)},
                      {"self_in_frame", double(t.self_in_frame)},
                      {"self_cross", double(t.self_cross)}});
  }
  j["levels"] = levels;
  if (epe) j["epe_moving"] = *epe;
  j["wall_s"] = wall;
  return j;
}

/// Consumes the stream once, in order, one update per consecutive pair.
template <typename T>
RunResult<T> run(const Config& cfg, RunOptions<T> opt = {}) {
  validate(cfg);
  StreamHandle stream = open_stream(cfg.stream);
  RunResult<T> res;
  const auto start = std::chrono::steady_clock::now();
  const std::int64_t max_steps = opt.max_steps >= 0 ? opt.max_steps : cfg.trainer.max_steps;

  bool bootstrap = cfg.trainer.bootstrap_pair;
  if (opt.resume) {
    res.state = from_checkpoint<T>(Checkpoint::load(*opt.resume, config_hash(cfg)), cfg);
    bootstrap = false;
  } else {
    res.state = init_train_state<T>(cfg);
  }
  TrainState<T>& s = res.state;
  if (s.next_frame >= stream.length()) return res;
  stream.skip(s.next_frame);
  Frame<float> prev = stream.next_frame();

  auto finish_step = [&](const StepReport<T>& r, const Frame<float>& cur) {
    ++res.steps;
    if (r.diverged) ++res.diverged;
    const bool log_now = opt.metrics && (r.diverged || (cfg.trainer.log_every > 0 && r.step % cfg.trainer.log_every == 0));
    if (log_now) {
      std::optional<double> epe;
      if (r.base_flow && cur.t >= 1 && stream.has_labels()) {
        const GroundTruth gt = stream.ground_truth(cur.t);
        if (gt.flow && cur.t != prev.t) epe = endpoint_error(*r.base_flow, *gt.flow, moving_mask(*gt.flow));
      }
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      *opt.metrics << step_record(r, wall, epe).dump() << "\n";
      opt.metrics->flush();
    }
    if (opt.on_step) opt.on_step(r, s, cur);
    if (opt.checkpoint_dir && cfg.trainer.checkpoint_every > 0 &&
        r.step % static_cast<std::uint64_t>(cfg.trainer.checkpoint_every) == 0) {
      fs::create_directories(*opt.checkpoint_dir);
      to_checkpoint(s, cfg).save(checkpoint_path(*opt.checkpoint_dir, r.step));
    }
  };

  if (bootstrap) {
    // The first update sees the first frame paired with itself.
    FramePair<T> pair{{prev.pixels.template cast<T>(), prev.t}, {prev.pixels.template cast<T>(), prev.t}};
    const StepReport<T> r = train_step(s, pair, cfg);
    finish_step(r, prev);
  }
  while (!stream.exhausted() && (max_steps <= 0 || res.steps < max_steps)) {
    Frame<float> cur = stream.next_frame();
    FramePair<T> pair{{prev.pixels.template cast<T>(), prev.t}, {cur.pixels.template cast<T>(), cur.t}};
    const StepReport<T> r = train_step(s, pair, cfg);
    s.next_frame = cur.t;
    finish_step(r, cur);
    prev = std::move(cur);
  }
  return res;
}

}  // namespace conjflow
