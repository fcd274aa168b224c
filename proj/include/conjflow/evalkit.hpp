#pragma once

// Evaluation: pixel templates, open-set nearest-template classification,
// macro F1, flow/prediction renderings, and the lap protocol
// (unsupervised laps -> template laps -> held-out evaluation lap).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conjflow/config.hpp"
#include "conjflow/hierarchy.hpp"
#include "conjflow/image_io.hpp"
#include "conjflow/stream.hpp"
#include "conjflow/trainer.hpp"

namespace conjflow {

inline constexpr int kBackground = 0;
inline constexpr double kNormFloor = 1e-8;

// ---------------------------------------------------------------------------
// Templates

struct TemplateEntry {
  std::vector<std::vector<float>> levels;  // one feature vector per level
  int class_id = 0;
  std::int64_t t = 0;  // provenance
  Coord at{0, 0};
};

struct TemplateMemory {
  std::vector<TemplateEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : entries)
      j.push_back({{"class", e.class_id}, {"t", e.t}, {"y", e.at.y}, {"x", e.at.x}, {"levels", e.levels}});
    return j;
  }
  static TemplateMemory from_json(const nlohmann::json& j) {
    TemplateMemory m;
    for (const auto& e : j) {
      TemplateEntry t;
      t.class_id = e.at("class").get<int>();
      t.t = e.at("t").get<std::int64_t>();
      t.at = {e.at("y").get<int>(), e.at("x").get<int>()};
      t.levels = e.at("levels").get<std::vector<std::vector<float>>>();
      m.entries.push_back(std::move(t));
    }
    return m;
  }
};

struct SupervisionPoint {
  std::int64_t t = 0;
  Coord at{0, 0};
  int class_id = 0;
};

/// Appends the per-level feature vectors at `p` (features[0] is level 1, or raw pixels for a baseline).
template <typename T>
void append_template(TemplateMemory& memory, const std::vector<const Tensor<T>*>& features, const SupervisionPoint& p) {
  if (features.empty()) throw std::invalid_argument("append_template: no feature levels");
  TemplateEntry e;
  e.class_id = p.class_id;
  e.t = p.t;
  e.at = p.at;
  for (const Tensor<T>* f : features) {
    if (p.at.y < 0 || p.at.x < 0 || p.at.y >= f->height() || p.at.x >= f->width())
      throw std::out_of_range("supervision point out of bounds");
    std::vector<float> v(f->channels());
    for (int c = 0; c < f->channels(); ++c) v[c] = static_cast<float>((*f)(c, p.at.y, p.at.x));
    for (float x : v)
      if (!std::isfinite(x)) throw std::domain_error("template feature is not finite");
    e.levels.push_back(std::move(v));
  }
  memory.entries.push_back(std::move(e));
}

template <typename T>
std::vector<const Tensor<T>*> level_pointers(const std::vector<FeatureMap<T>>& feats) {
  std::vector<const Tensor<T>*> out;
  for (std::size_t l = 1; l < feats.size(); ++l) out.push_back(&feats[l]);
  return out;
}

inline void check_supervision(const SupervisionPoint& p, const GroundTruth& gt, int width, int height) {
  if (p.at.y < 0 || p.at.x < 0 || p.at.y >= height || p.at.x >= width)
    throw std::out_of_range("supervision point out of bounds at t=" + std::to_string(p.t));
  const int label = gt.labels[std::size_t(p.at.y) * width + p.at.x];
  if (label == kBackground) throw std::invalid_argument("supervision point on an unlabeled pixel at t=" + std::to_string(p.t));
  if (label != p.class_id) throw std::invalid_argument("supervision point class does not match the labels");
}

/// Slow-learner features at every supervision point, read from the stream by time.
template <typename T>
TemplateMemory collect_templates(const ModelState<T>& m, const StreamHandle& stream,
                                 const std::vector<SupervisionPoint>& points) {
  TemplateMemory memory;
  for (const auto& p : points) {
    check_supervision(p, stream.ground_truth(p.t), stream.width(), stream.height());
    const auto feats = extract_features(m, stream.frame_at(p.t).template cast<T>());
    append_template(memory, level_pointers(feats), p);
  }
  return memory;
}

// ---------------------------------------------------------------------------
// Classification

struct Classification {
  int class_id = kBackground;
  double similarity = -1;
  int template_index = -1;
  bool abstained = true;
};

namespace detail {

// Per-level unit normalization, concatenated and scaled so the dot product is the mean per-level cosine.
inline std::vector<double> template_key(const TemplateEntry& e) {
  std::vector<double> key;
  const double scale = 1.0 / static_cast<double>(e.levels.size());
  for (const auto& v : e.levels) {
    double n = 0;
    for (float x : v) n += double(x) * x;
    n = std::max(std::sqrt(n), kNormFloor);
    for (float x : v) key.push_back(double(x) / n * scale);
  }
  return key;
}

}  // namespace detail

/// Nearest template by cosine similarity of the per-level normalized, concatenated features.
/// Abstains (background) when the best similarity is below 1 - tau_abstain.
inline Classification classify(const std::vector<std::vector<double>>& query, const TemplateMemory& memory,
                               double tau_abstain) {
  if (memory.empty()) throw std::invalid_argument("classify: empty template memory");
  std::vector<double> q;
  for (const auto& v : query) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::max(std::sqrt(n), kNormFloor);
    for (double x : v) q.push_back(x / n);
  }
  Classification best;
  for (std::size_t i = 0; i < memory.entries.size(); ++i) {
    const auto& e = memory.entries[i];
    if (e.levels.size() != query.size()) throw std::invalid_argument("classify: feature levels do not match the memory");
    const auto key = detail::template_key(e);
    if (key.size() != q.size()) throw std::invalid_argument("classify: feature sizes do not match the memory");
    double s = 0;
    for (std::size_t k = 0; k < q.size(); ++k) s += q[k] * key[k];
    if (s > best.similarity) {
      best.similarity = s;
      best.template_index = static_cast<int>(i);
      best.class_id = e.class_id;
    }
  }
  best.abstained = best.similarity < 1.0 - tau_abstain;
  if (best.abstained) best.class_id = kBackground;
  return best;
}

/// Classifies every pixel; features[l] is one level (all on the same grid).
template <typename T>
std::vector<int> classify_frame(const std::vector<const Tensor<T>*>& features, const TemplateMemory& memory,
                                double tau_abstain) {
  if (memory.empty()) throw std::invalid_argument("classify_frame: empty template memory");
  if (features.empty()) throw std::invalid_argument("classify_frame: no feature levels");
  const int H = features[0]->height(), W = features[0]->width();
  std::vector<std::vector<double>> keys;
  for (const auto& e : memory.entries) {
    if (e.levels.size() != features.size()) throw std::invalid_argument("classify_frame: feature levels do not match the memory");
    for (std::size_t l = 0; l < features.size(); ++l)
      if (e.levels[l].size() != static_cast<std::size_t>(features[l]->channels()))
        throw std::invalid_argument("classify_frame: feature sizes do not match the memory");
    keys.push_back(detail::template_key(e));
  }
  std::vector<int> pred(std::size_t(H) * W, kBackground);
  std::vector<double> q;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      q.clear();
      for (const Tensor<T>* f : features) {
        double n = 0;
        for (int c = 0; c < f->channels(); ++c) n += double((*f)(c, y, x)) * double((*f)(c, y, x));
        n = std::max(std::sqrt(n), kNormFloor);
        for (int c = 0; c < f->channels(); ++c) q.push_back(double((*f)(c, y, x)) / n);
      }
      double best = -2;
      int cls = kBackground;
      for (std::size_t i = 0; i < keys.size(); ++i) {
        double s = 0;
        for (std::size_t k = 0; k < q.size(); ++k) s += q[k] * keys[i][k];
        if (s > best) {
          best = s;
          cls = memory.entries[i].class_id;
        }
      }
      pred[std::size_t(y) * W + x] = best < 1.0 - tau_abstain ? kBackground : cls;
    }
  }
  return pred;
}

// ---------------------------------------------------------------------------
// Scores

struct ClassScore {
  int class_id = 0;
  std::int64_t tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0, f1 = 0;
  bool present() const { return tp + fp + fn > 0; }
};

struct MetricsReport {
  std::vector<ClassScore> classes;
  double macro_f1 = 0;
  std::int64_t frames = 0, pixels = 0;
  std::optional<double> epe;  // mean level-1 endpoint error on moving pixels
  std::vector<nlohmann::json> per_frame;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["macro_f1"] = macro_f1;
    j["frames"] = frames;
    j["pixels"] = pixels;
    if (epe) j["epe_moving"] = *epe;
    nlohmann::json cls = nlohmann::json::array();
    for (const auto& c : classes)
      cls.push_back({{"class", c.class_id}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"precision", c.precision},
                     {"recall", c.recall}, {"f1", c.f1}, {"present", c.present()}});
    j["classes"] = cls;
    return j;
  }
};

/// Running confusion counts over a declared class set (background included).
class ConfusionCounter {
 public:
  explicit ConfusionCounter(std::vector<int> classes) {
    for (int c : classes) scores_[c].class_id = c;
    if (!scores_.count(kBackground)) scores_[kBackground].class_id = kBackground;
  }

  void add(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size()) throw ShapeError("confusion: prediction and labels differ in size");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const int p = pred[i], t = truth[i];
      if (!scores_.count(t)) throw std::invalid_argument("label " + std::to_string(t) + " not in the class set");
      if (!scores_.count(p)) throw std::invalid_argument("prediction " + std::to_string(p) + " not in the class set");
      if (p == t) {
        ++scores_[t].tp;
      } else {
        ++scores_[p].fp;
        ++scores_[t].fn;
      }
    }
    pixels_ += static_cast<std::int64_t>(pred.size());
  }

  /// Per-class scores; the macro average skips classes that never occur in labels or predictions.
  MetricsReport report() const {
    MetricsReport r;
    r.pixels = pixels_;
    double sum = 0;
    int n = 0;
    for (auto [id, s] : scores_) {
      s.precision = s.tp + s.fp ? double(s.tp) / double(s.tp + s.fp) : 0.0;
      s.recall = s.tp + s.fn ? double(s.tp) / double(s.tp + s.fn) : 0.0;
      s.f1 = 2 * s.tp + s.fp + s.fn ? 2.0 * double(s.tp) / double(2 * s.tp + s.fp + s.fn) : 0.0;
      if (s.present()) {
        sum += s.f1;
        ++n;
      }
      r.classes.push_back(s);
    }
    r.macro_f1 = n ? sum / n : 0.0;
    return r;
  }

 private:
  std::map<int, ClassScore> scores_;
  std::int64_t pixels_ = 0;
};

inline MetricsReport f1_report(const std::vector<int>& pred, const std::vector<int>& truth, const std::vector<int>& classes) {
  ConfusionCounter c(classes);
  c.add(pred, truth);
  auto r = c.report();
  r.frames = 1;
  return r;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline const std::vector<std::array<int, 3>>& color_wheel() {
  static const std::vector<std::array<int, 3>> wheel = [] {
    const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
    std::vector<std::array<int, 3>> w;
    for (int i = 0; i < RY; ++i) w.push_back({255, 255 * i / RY, 0});
    for (int i = 0; i < YG; ++i) w.push_back({255 - 255 * i / YG, 255, 0});
    for (int i = 0; i < GC; ++i) w.push_back({0, 255, 255 * i / GC});
    for (int i = 0; i < CB; ++i) w.push_back({0, 255 - 255 * i / CB, 255});
    for (int i = 0; i < BM; ++i) w.push_back({255 * i / BM, 0, 255});
    for (int i = 0; i < MR; ++i) w.push_back({255, 0, 255 - 255 * i / MR});
    return w;
  }();
  return wheel;
}

}  // namespace detail

/// Flow color coding: hue from direction, saturation from magnitude normalized by `max_magnitude`
/// (the frame maximum when not given). Zero flow is white; beyond the maximum colors darken.
template <typename T>
Image8 render_flow(const Tensor<T>& flow, std::optional<double> max_magnitude = std::nullopt) {
  if (flow.channels() != 2) throw ShapeError("render_flow: flow must have 2 channels");
  if (!flow.all_finite()) throw std::domain_error("render_flow: flow is not finite");
  double maxr = max_magnitude.value_or(0.0);
  if (!max_magnitude)
    for (int y = 0; y < flow.height(); ++y)
      for (int x = 0; x < flow.width(); ++x) maxr = std::max(maxr, std::hypot(double(flow(0, y, x)), double(flow(1, y, x))));
  const auto& wheel = detail::color_wheel();
  const int ncols = static_cast<int>(wheel.size());
  Image8 img(flow.width(), flow.height(), 3);
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      const double u = maxr > 0 ? double(flow(0, y, x)) / maxr : 0.0;
      const double v = maxr > 0 ? double(flow(1, y, x)) / maxr : 0.0;
      const double rad = std::hypot(u, v);
      const double a = std::atan2(-v, -u) / 3.14159265358979323846;
      const double fk = (a + 1.0) / 2.0 * (ncols - 1);
      const int k0 = std::clamp(static_cast<int>(std::floor(fk)), 0, ncols - 1);
      const int k1 = (k0 + 1) % ncols;
      const double f = fk - k0;
      for (int c = 0; c < 3; ++c) {
        double col = (1 - f) * wheel[k0][c] / 255.0 + f * wheel[k1][c] / 255.0;
        col = rad <= 1 ? 1 - rad * (1 - col) : col * 0.75;
        img.at(y, x, c) = static_cast<std::uint8_t>(std::floor(255.0 * col));
      }
    }
  }
  return img;
}

inline constexpr double kOverlayAlpha = 0.5;
inline constexpr double kBackgroundGray = 0.8;
inline constexpr double kBackgroundAlpha = 0.4;

/// Frame with class overlays: objects blended with their palette color, background with light gray.
template <typename T>
Image8 render_prediction(const std::vector<int>& pred, const Tensor<T>& frame) {
  if (pred.size() != frame.plane()) throw ShapeError("render_prediction: prediction does not match the frame");
  Image8 img(frame.width(), frame.height(), 3);
  for (int y = 0; y < frame.height(); ++y) {
    for (int x = 0; x < frame.width(); ++x) {
      const int id = pred[std::size_t(y) * frame.width() + x];
      for (int c = 0; c < 3; ++c) {
        const double pix = double(frame(frame.channels() == 3 ? c : 0, y, x));
        const double v = id == kBackground ? (1 - kBackgroundAlpha) * pix + kBackgroundAlpha * kBackgroundGray
                                           : (1 - kOverlayAlpha) * pix + kOverlayAlpha * class_color(id)[c] / 255.0;
        img.at(y, x, c) = to_byte(v);
      }
    }
  }
  return img;
}

/// Per-frame min-max of the first three channels, for looking at feature maps.
template <typename T>
Image8 render_features(const Tensor<T>& f) {
  Image8 img(f.width(), f.height(), 3);
  for (int c = 0; c < 3; ++c) {
    const int ch = std::min(c, f.channels() - 1);
    double lo = 1e300, hi = -1e300;
    for (int y = 0; y < f.height(); ++y)
      for (int x = 0; x < f.width(); ++x) {
        lo = std::min(lo, double(f(ch, y, x)));
        hi = std::max(hi, double(f(ch, y, x)));
      }
    for (int y = 0; y < f.height(); ++y)
      for (int x = 0; x < f.width(); ++x)
        img.at(y, x, c) = to_byte(hi > lo ? (double(f(ch, y, x)) - lo) / (hi - lo) : 0.5);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Evaluation over a stream segment

/// Declared classes of a stream: from the generator spec, or the labels found in [t_begin, t_end).
inline std::vector<int> stream_classes(const StreamHandle& stream, std::int64_t t_begin, std::int64_t t_end) {
  if (stream.spec().source == SourceKind::Synthetic) return stream.spec().classes();
  std::set<int> ids{kBackground};
  for (std::int64_t t = t_begin; t < t_end; ++t)
    for (int v : stream.ground_truth(t).labels) ids.insert(v);
  return {ids.begin(), ids.end()};
}

struct EvalOptions {
  std::optional<fs::path> render_dir;
  bool per_frame = true;
};

/// Classifies every pixel of frames [t_begin, t_end) with slow-learner features. Read-only on the model.
/// `baseline` classifies normalized raw pixels instead (the memory must hold pixel templates).
template <typename T>
MetricsReport evaluate_lap(const ModelState<T>& m, const StreamHandle& stream, std::int64_t t_begin, std::int64_t t_end,
                           const TemplateMemory& memory, double tau_abstain, const EvalOptions& opt = {},
                           bool baseline = false) {
  if (t_end <= t_begin) throw std::invalid_argument("evaluate_lap: empty segment");
  if (!stream.has_labels()) throw StreamError("evaluate_lap: stream has no labels");
  std::vector<int> classes = stream_classes(stream, t_begin, t_end);
  for (const auto& e : memory.entries)
    if (std::find(classes.begin(), classes.end(), e.class_id) == classes.end()) classes.push_back(e.class_id);
  ConfusionCounter counter(classes);
  MetricsReport out;
  double epe_sum = 0;
  std::int64_t epe_n = 0;
  if (opt.render_dir) fs::create_directories(*opt.render_dir);
  for (std::int64_t t = t_begin; t < t_end; ++t) {
    const GroundTruth gt = stream.ground_truth(t);
    const Tensor<T> frame = stream.frame_at(t).template cast<T>();
    std::vector<int> pred;
    std::vector<FeatureMap<T>> feats;
    if (baseline) {
      pred = classify_frame<T>({&frame}, memory, tau_abstain);
    } else {
      feats = extract_features(m, frame);
      pred = classify_frame(level_pointers(feats), memory, tau_abstain);
    }
    nlohmann::json rec;
    rec["t"] = t;
    rec["macro_f1"] = f1_report(pred, gt.labels, classes).macro_f1;
    std::optional<FlowField<T>> flow1;
    if (!baseline && t >= 1) {
      const Tensor<T> before = stream.frame_at(t - 1).template cast<T>();
      flow1 = forward_flow<T>(m.flow_nets[0], m.weights[0].flow, before, frame, 1);
      if (gt.flow) {
        const auto mask = moving_mask(*gt.flow);
        if (std::find(mask.begin(), mask.end(), true) != mask.end()) {
          const double e = endpoint_error(*flow1, *gt.flow, mask);
          epe_sum += e;
          ++epe_n;
          rec["epe_moving"] = e;
        }
      }
    }
    if (opt.per_frame) out.per_frame.push_back(rec);
    if (opt.render_dir) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06lld", static_cast<long long>(t));
      write_png(*opt.render_dir / (std::string(name) + "_pred.png"), render_prediction(pred, frame));
      if (flow1) write_png(*opt.render_dir / (std::string(name) + "_flow1.png"), render_flow(*flow1));
    }
    counter.add(pred, gt.labels);
  }
  MetricsReport r = counter.report();
  r.frames = t_end - t_begin;
  r.per_frame = std::move(out.per_frame);
  if (epe_n) r.epe = epe_sum / double(epe_n);
  return r;
}

/// Mean level-1 flow magnitude on pairs (I_t, I_t), t in [t_begin, t_end).
template <typename T>
double static_flow_magnitude(const ModelState<T>& m, const StreamHandle& stream, std::int64_t t_begin, std::int64_t t_end) {
  double sum = 0;
  std::size_t n = 0;
  for (std::int64_t t = t_begin; t < t_end; ++t) {
    const Tensor<T> f = stream.frame_at(t).template cast<T>();
    const auto flow = forward_flow<T>(m.flow_nets[0], m.weights[0].flow, f, f, 1);
    for (int y = 0; y < flow.height(); ++y)
      for (int x = 0; x < flow.width(); ++x) sum += std::hypot(double(flow(0, y, x)), double(flow(1, y, x)));
    n += flow.plane();
  }
  return n ? sum / double(n) : 0.0;
}

/// Mean level-1 endpoint error on moving pixels over pairs ending in [t_begin, t_end).
template <typename T>
double segment_epe(const ModelState<T>& m, const StreamHandle& stream, std::int64_t t_begin, std::int64_t t_end) {
  double sum = 0;
  std::int64_t n = 0;
  for (std::int64_t t = std::max<std::int64_t>(t_begin, 1); t < t_end; ++t) {
    const GroundTruth gt = stream.ground_truth(t);
    if (!gt.flow) continue;
    const auto mask = moving_mask(*gt.flow);
    if (std::find(mask.begin(), mask.end(), true) == mask.end()) continue;
    const auto flow = forward_flow<T>(m.flow_nets[0], m.weights[0].flow, stream.frame_at(t - 1).template cast<T>(),
                                      stream.frame_at(t).template cast<T>(), 1);
    sum += endpoint_error(flow, *gt.flow, mask);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("segment_epe: no frames with moving ground truth");
  return sum / double(n);
}

// ---------------------------------------------------------------------------
// Lap protocol

/// Frame ranges of the protocol. A cycle is one lap of every object.
struct ProtocolPlan {
  std::int64_t cycle = 0;
  std::int64_t train_end = 0;       // training uses frames [0, train_end)
  std::int64_t template_begin = 0;  // template laps are [template_begin, train_end)
  std::int64_t eval_begin = 0, eval_end = 0;
  std::vector<SupervisionPoint> points;  // coordinates chosen on the ground-truth labels
};

inline ProtocolPlan plan_protocol(const Config& cfg, const StreamHandle& stream) {
  const EvalConfig& e = cfg.eval;
  if (e.train_laps < 1) throw ConfigError("eval.train_laps must be >= 1 for the lap protocol");
  if (e.eval_laps < 1) throw ConfigError("eval.eval_laps must be >= 1");
  ProtocolPlan p;
  const std::int64_t per_cycle =
      cfg.stream.motion == MotionMode::Alternating ? std::max<std::int64_t>(1, std::int64_t(cfg.stream.objects.size())) : 1;
  p.cycle = cfg.lap_frames() * per_cycle;
  p.train_end = e.train_laps * p.cycle;
  p.template_begin = (e.train_laps - e.template_laps) * p.cycle;
  p.eval_begin = p.train_end;
  p.eval_end = p.eval_begin + e.eval_laps * p.cycle;
  if (p.eval_end > stream.length())
    throw ConfigError("stream has " + std::to_string(stream.length()) + " frames; the protocol needs " +
                      std::to_string(p.eval_end));
  if (e.templates_per_object < 1) return p;

  const std::vector<int> classes = stream_classes(stream, p.template_begin, p.train_end);
  Rng rng(e.seed);
  for (int cls : classes) {
    if (cls == kBackground) continue;
    // In alternating mode each object's templates start at its own first lap inside the template segment.
    std::int64_t offset = 0;
    if (cfg.stream.motion == MotionMode::Alternating)
      for (std::size_t o = 0; o < cfg.stream.objects.size(); ++o)
        if (cfg.stream.objects[o].class_id == cls) {
          offset = std::int64_t(o) * cfg.lap_frames();
          break;
        }
    for (int i = 0; i < e.templates_per_object; ++i) {
      const std::int64_t t = p.template_begin + offset + std::int64_t(i) * e.template_spacing;
      if (t >= p.train_end)
        throw ConfigError("template laps are too short for " + std::to_string(e.templates_per_object) +
                          " templates spaced " + std::to_string(e.template_spacing) + " frames apart");
      const GroundTruth gt = stream.ground_truth(t);
      std::vector<int> idx;
      for (std::size_t k = 0; k < gt.labels.size(); ++k)
        if (gt.labels[k] == cls) idx.push_back(static_cast<int>(k));
      if (idx.empty()) throw std::invalid_argument("class " + std::to_string(cls) + " not visible at t=" + std::to_string(t));
      const int k = idx[uniform_index(rng, idx.size())];
      p.points.push_back({t, {k / stream.width(), k % stream.width()}, cls});
    }
  }
  std::sort(p.points.begin(), p.points.end(), [](const auto& a, const auto& b) { return a.t < b.t; });
  return p;
}

template <typename T>
struct ProtocolResult {
  ProtocolPlan plan;
  RunResult<T> training;
  TemplateMemory memory, baseline_memory;
  MetricsReport report, baseline_report;
  double initial_epe = 0, final_epe = 0;
  double static_flow = 0;  // mean |delta^1(I, I)| over the evaluation frames

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["train_frames"] = plan.train_end;
    j["template_frames"] = nlohmann::json::array();
    for (const auto& p : plan.points) j["template_frames"].push_back({{"t", p.t}, {"class", p.class_id}, {"y", p.at.y}, {"x", p.at.x}});
    j["eval_frames"] = {plan.eval_begin, plan.eval_end};
    j["steps"] = training.steps;
    j["diverged_steps"] = training.diverged;
    j["initial_epe_moving"] = initial_epe;
    j["final_epe_moving"] = final_epe;
    j["static_flow_magnitude"] = static_flow;
    j["model"] = report.to_json();
    j["baseline"] = baseline_report.to_json();
    j["model"].erase("per_frame");
    return j;
  }
};

/// Template-collection hook for the run loop: grabs templates right after the update at each point's frame.
template <typename T>
std::function<void(const StepReport<T>&, TrainState<T>&, const Frame<float>&)> template_hook(
    const StreamHandle& stream, const std::vector<SupervisionPoint>& points, TemplateMemory& memory,
    TemplateMemory* pixel_memory) {
  return [&stream, &points, &memory, pixel_memory](const StepReport<T>&, TrainState<T>& s, const Frame<float>& cur) {
    for (const auto& p : points) {
      if (p.t != cur.t) continue;
      check_supervision(p, stream.ground_truth(p.t), stream.width(), stream.height());
      const Tensor<T> frame = cur.pixels.template cast<T>();
      const auto feats = extract_features(s.model, frame);
      append_template(memory, level_pointers(feats), p);
      if (pixel_memory) append_template<T>(*pixel_memory, {&frame}, p);
    }
  };
}

/// Full protocol: train over the unsupervised laps (collecting templates during the trailing
/// template laps), then classify the held-out evaluation laps without further learning.
template <typename T>
ProtocolResult<T> run_protocol(const Config& cfg, std::ostream* metrics = nullptr, const EvalOptions& eval_opt = {}) {
  validate(cfg);
  StreamHandle stream = open_stream(cfg.stream);
  ProtocolResult<T> res;
  res.plan = plan_protocol(cfg, stream);
  {
    const TrainState<T> init = init_train_state<T>(cfg);
    res.initial_epe = segment_epe(init.model, stream, res.plan.eval_begin, res.plan.eval_end);
  }
  RunOptions<T> ro;
  ro.metrics = metrics;
  ro.max_steps = res.plan.train_end - 1 + (cfg.trainer.bootstrap_pair ? 1 : 0);
  ro.on_step = template_hook<T>(stream, res.plan.points, res.memory, &res.baseline_memory);
  res.training = run<T>(cfg, ro);
  const ModelState<T>& m = res.training.state.model;
  if (res.memory.size() != res.plan.points.size()) throw std::logic_error("protocol: some templates were not collected");
  res.report = evaluate_lap(m, stream, res.plan.eval_begin, res.plan.eval_end, res.memory, cfg.eval.tau_abstain, eval_opt);
  res.baseline_report = evaluate_lap(m, stream, res.plan.eval_begin, res.plan.eval_end, res.baseline_memory,
                                     cfg.eval.tau_abstain, EvalOptions{std::nullopt, false}, true);
  res.final_epe = segment_epe(m, stream, res.plan.eval_begin, res.plan.eval_end);
  res.static_flow = static_flow_magnitude(m, stream, res.plan.eval_begin, res.plan.eval_end);
  return res;
}

}  // namespace conjflow
