#pragma once

// Run configuration: INI sections [stream], [model], [conjugation],
// [contrastive], [trainer], [eval]. Per-level coefficients are comma lists
// (level 1 first); a single value applies to every level.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "conjflow/conjugation.hpp"
#include "conjflow/contrastive.hpp"
#include "conjflow/hierarchy.hpp"
#include "conjflow/optim.hpp"
#include "conjflow/stream.hpp"

namespace conjflow {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int levels = 2;
  LevelSpec shape;  // level and input_channels are filled in per level
  std::uint64_t seed = 1234;
};

struct AugmentConfig {
  bool crop = false;   // (A) random crop of ratio > crop_min, rescaled, on one frame
  bool flip = false;   // (B) horizontal/vertical flips on both frames
  bool color = false;  // (C) color jitter + blur on one frame
  int views = 1;       // augmented pairs added per step
  double crop_min = 0.9;
  double jitter = 0.2;
  double blur_sigma = 1.0;

  bool any() const { return crop || flip || color; }
};

struct TrainerConfig {
  double alpha_f = 1e-3;
  double alpha_m = 1e-4;
  double xi = 0.99;
  double t_sched = 0;  // warm-up, in laps
  OptimizerKind feature_optimizer = OptimizerKind::Sgd;
  OptimizerKind flow_optimizer = OptimizerKind::Adam;
  AugmentConfig augment;
  std::uint64_t seed = 1234;
  bool bootstrap_pair = false;  // also train on (I_0, I_0) before the first real pair
  std::int64_t max_steps = 0;   // 0: whole stream
  std::int64_t checkpoint_every = 0;
  std::int64_t log_every = 50;
  std::string out_dir = "run";
};

struct EvalConfig {
  int train_laps = 0;      // unsupervised laps, template laps included
  int template_laps = 0;   // trailing laps of the training segment used for templates
  int eval_laps = 1;
  int templates_per_object = 3;
  int template_spacing = 100;
  double tau_abstain = 0.1;
  bool render = false;
  std::uint64_t seed = 99;
};

struct Config {
  StreamSpec stream;
  ModelConfig model;
  ConjugationCoefficients conjugation;
  ContrastiveParams contrastive;
  TrainerConfig trainer;
  EvalConfig eval;

  std::vector<LevelSpec> level_specs() const {
    return make_level_chain(model.levels, stream.channels, model.shape);
  }
  std::int64_t lap_frames() const { return stream.lap_frames(); }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<double> parse_list(const std::string& s, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("empty entry in list '" + key + "'");
    try {
      std::size_t used = 0;
      const std::string trimmed = item.substr(b, e - b + 1);
      out.push_back(std::stod(trimmed, &used));
      if (used != trimmed.size()) throw std::invalid_argument(trimmed);
    } catch (const std::exception&) {
      throw ConfigError("bad number in '" + key + "': " + item);
    }
  }
  if (out.empty()) throw ConfigError("empty list '" + key + "'");
  return out;
}

inline std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt_double(v[i]);
  return s;
}

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const std::string& key) {
  std::string all;
  for (const auto& [name, val] : table) {
    if (s == name) return val;
    all += std::string(all.empty() ? "" : ", ") + name;
  }
  throw ConfigError("bad value '" + s + "' for " + key + " (expected one of: " + all + ")");
}

template <typename E>
const char* enum_name(E v, std::initializer_list<std::pair<const char*, E>> table) {
  for (const auto& [name, val] : table)
    if (val == v) return name;
  return "?";
}

inline const std::initializer_list<std::pair<const char*, ShapeKind>>& shape_names() {
  static const std::initializer_list<std::pair<const char*, ShapeKind>> t = {
      {"rect", ShapeKind::Rect}, {"ellipse", ShapeKind::Ellipse}, {"diamond", ShapeKind::Diamond}};
  return t;
}
inline const std::initializer_list<std::pair<const char*, TextureKind>>& texture_names() {
  static const std::initializer_list<std::pair<const char*, TextureKind>> t = {
      {"flat", TextureKind::Flat},       {"stripes_h", TextureKind::StripesH}, {"stripes_v", TextureKind::StripesV},
      {"checker", TextureKind::Checker}, {"waves_h", TextureKind::WavesH},     {"waves_v", TextureKind::WavesV},
      {"blobs", TextureKind::Blobs}};
  return t;
}
inline const std::initializer_list<std::pair<const char*, MotionMode>>& motion_names() {
  static const std::initializer_list<std::pair<const char*, MotionMode>> t = {
      {"simultaneous", MotionMode::Simultaneous}, {"alternating", MotionMode::Alternating}};
  return t;
}
inline const std::initializer_list<std::pair<const char*, SourceKind>>& source_names() {
  static const std::initializer_list<std::pair<const char*, SourceKind>> t = {{"synthetic", SourceKind::Synthetic},
                                                                              {"directory", SourceKind::Directory}};
  return t;
}
inline const std::initializer_list<std::pair<const char*, SamplingMode>>& sampling_names() {
  static const std::initializer_list<std::pair<const char*, SamplingMode>> t = {
      {"motion_features", SamplingMode::MotionFeatures}, {"motion", SamplingMode::Motion}, {"uniform", SamplingMode::Uniform}};
  return t;
}
inline const std::initializer_list<std::pair<const char*, DistanceNorm>>& distance_names() {
  static const std::initializer_list<std::pair<const char*, DistanceNorm>> t = {{"sampled_max", DistanceNorm::SampledMax},
                                                                                {"diagonal", DistanceNorm::Diagonal}};
  return t;
}
inline const std::initializer_list<std::pair<const char*, OptimizerKind>>& optimizer_names() {
  static const std::initializer_list<std::pair<const char*, OptimizerKind>> t = {{"sgd", OptimizerKind::Sgd},
                                                                                 {"adam", OptimizerKind::Adam}};
  return t;
}

// Typed reads that reject malformed values and unknown keys.
class Section {
 public:
  Section(const boost::property_tree::ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  std::string str(const std::string& key, const std::string& def) {
    used_.push_back(key);
    if (!tree_) return def;
    const auto v = tree_->get_optional<std::string>(key);
    return v ? *v : def;
  }
  bool has(const std::string& key) const { return tree_ && tree_->get_child_optional(key); }

  double num(const std::string& key, double def) {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    return parse_list(s, name_ + "." + key).at(0);
  }
  std::int64_t integer(const std::string& key, std::int64_t def) {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("bad integer for " + name_ + "." + key + ": " + s);
    }
  }
  std::uint64_t unsigned_integer(const std::string& key, std::uint64_t def) {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(s, &used);
      if (used != s.size() || s[0] == '-') throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("bad unsigned integer for " + name_ + "." + key + ": " + s);
    }
  }
  bool boolean(const std::string& key, bool def) {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("bad boolean for " + name_ + "." + key + ": " + s);
  }
  std::vector<double> list(const std::string& key, const std::vector<double>& def) {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    return parse_list(s, name_ + "." + key);
  }
  template <typename E>
  E choice(const std::string& key, E def, std::initializer_list<std::pair<const char*, E>> table) {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    return parse_enum(s, table, name_ + "." + key);
  }

  // Keys matching `prefix` are accepted without being listed individually.
  void allow_prefix(const std::string& prefix) { prefixes_.push_back(prefix); }

  void reject_unknown() const {
    if (!tree_) return;
    for (const auto& [key, _] : *tree_) {
      bool known = std::find(used_.begin(), used_.end(), key) != used_.end();
      for (const auto& p : prefixes_) known = known || key.rfind(p, 0) == 0;
      if (!known) throw ConfigError("unknown key '" + key + "' in [" + name_ + "]");
    }
  }

 private:
  const boost::property_tree::ptree* tree_;
  std::string name_;
  std::vector<std::string> used_;
  std::vector<std::string> prefixes_;
};

inline std::array<double, 3> color3(const std::vector<double>& v, const std::string& key) {
  if (v.size() == 1) return {v[0], v[0], v[0]};
  if (v.size() != 3) throw ConfigError(key + ": expected 1 or 3 color components");
  return {v[0], v[1], v[2]};
}

inline std::vector<double> per_level(const std::vector<double>& v, int levels, const std::string& key) {
  if (v.size() == 1) return std::vector<double>(levels, v[0]);
  if (static_cast<int>(v.size()) != levels)
    throw ConfigError(key + ": expected 1 or " + std::to_string(levels) + " values, got " + std::to_string(v.size()));
  return v;
}

}  // namespace detail

/// Parses INI text. `base_dir` resolves relative stream paths.
inline Config parse_config(const std::string& text, const fs::path& base_dir = {}) {
  namespace pt = boost::property_tree;
  pt::ptree root;
  try {
    std::istringstream is(text);
    pt::read_ini(is, root);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [name, _] : root) {
    static const std::vector<std::string> known = {"stream", "model", "conjugation", "contrastive", "trainer", "eval"};
    if (std::find(known.begin(), known.end(), name) == known.end())
      throw ConfigError("unknown config section [" + name + "]");
  }
  auto section = [&](const char* name) {
    const auto child = root.get_child_optional(name);
    return detail::Section(child ? &*child : nullptr, name);
  };
  Config c;

  {
    auto s = section("stream");
    StreamSpec& st = c.stream;
    st.source = s.choice("source", SourceKind::Synthetic, detail::source_names());
    const std::string path = s.str("path", "");
    if (!path.empty()) st.path = fs::path(path).is_absolute() || base_dir.empty() ? fs::path(path) : base_dir / path;
    st.width = static_cast<int>(s.integer("width", st.width));
    st.height = static_cast<int>(s.integer("height", st.height));
    st.channels = static_cast<int>(s.integer("channels", st.channels));
    st.frames = s.integer("frames", 0);
    st.laps = static_cast<int>(s.integer("laps", st.laps));
    st.leg_frames = static_cast<int>(s.integer("leg_frames", st.leg_frames));
    st.motion = s.choice("motion", st.motion, detail::motion_names());
    st.seed = s.unsigned_integer("seed", st.seed);
    st.background = s.num("background", st.background);
    st.textured_background = s.boolean("textured_background", false);
    st.subpixel = s.boolean("subpixel", false);
    st.loop = s.boolean("loop", false);
    const int n = static_cast<int>(s.integer("objects", 0));
    if (n < 0) throw ConfigError("stream.objects must be >= 0");
    for (int i = 1; i <= n; ++i) {
      const std::string p = "obj" + std::to_string(i) + "_";
      ObjectSpec o;
      o.shape = s.choice(p + "shape", o.shape, detail::shape_names());
      const auto size = s.list(p + "size", {double(o.width), double(o.height)});
      o.width = static_cast<int>(size.at(0));
      o.height = static_cast<int>(size.size() > 1 ? size[1] : size[0]);
      const auto start = s.list(p + "start", {0, 0});
      if (start.size() != 2) throw ConfigError(p + "start: expected x, y");
      o.x = start[0];
      o.y = start[1];
      const auto vel = s.list(p + "velocity", {1, 0});
      if (vel.size() != 2) throw ConfigError(p + "velocity: expected vx, vy");
      o.vx = vel[0];
      o.vy = vel[1];
      o.color0 = detail::color3(s.list(p + "color0", {o.color0[0], o.color0[1], o.color0[2]}), p + "color0");
      o.color1 = detail::color3(s.list(p + "color1", {o.color1[0], o.color1[1], o.color1[2]}), p + "color1");
      o.texture = s.choice(p + "texture", o.texture, detail::texture_names());
      o.period = s.num(p + "period", o.period);
      o.class_id = static_cast<int>(s.integer(p + "class", i));
      st.objects.push_back(o);
    }
    s.reject_unknown();
  }
  {
    auto s = section("model");
    c.model.levels = static_cast<int>(s.integer("levels", c.model.levels));
    if (c.model.levels < 1) throw ConfigError("model.levels must be >= 1");
    LevelSpec& sh = c.model.shape;
    sh.feature_channels = static_cast<int>(s.integer("feature_channels", sh.feature_channels));
    sh.feature_width = static_cast<int>(s.integer("feature_width", sh.feature_width));
    sh.feature_depth = static_cast<int>(s.integer("feature_depth", sh.feature_depth));
    sh.flow_width = static_cast<int>(s.integer("flow_width", sh.flow_width));
    sh.flow_depth = static_cast<int>(s.integer("flow_depth", sh.flow_depth));
    sh.block_convs = static_cast<int>(s.integer("block_convs", sh.block_convs));
    sh.feature_input_skip = s.boolean("feature_input_skip", sh.feature_input_skip);
    sh.flow_input_skip = s.boolean("flow_input_skip", sh.flow_input_skip);
    sh.flow_head_scale = s.num("flow_head_scale", sh.flow_head_scale);
    c.model.seed = s.unsigned_integer("seed", c.model.seed);
    s.reject_unknown();
  }
  {
    auto s = section("conjugation");
    const int L = c.model.levels;
    const auto cur = detail::per_level(s.list("lambda_cur", {1e-4}), L, "conjugation.lambda_cur");
    const auto skip = detail::per_level(s.list("lambda_skip", {0}), L, "conjugation.lambda_skip");
    const auto low = detail::per_level(s.list("lambda_low", {1}), L, "conjugation.lambda_low");
    for (int l = 0; l < L; ++l) c.conjugation.levels.push_back({cur[l], skip[l], low[l]});
    c.conjugation.smoothness = s.num("lambda_s", c.conjugation.smoothness);
    c.conjugation.magnitude = s.num("lambda_r", c.conjugation.magnitude);
    c.conjugation.low_multiplier = s.num("lambda_m", c.conjugation.low_multiplier);
    s.reject_unknown();
  }
  {
    auto s = section("contrastive");
    ContrastiveParams& p = c.contrastive;
    p.temperature = s.num("tau", p.temperature);
    p.tau_p = s.num("tau_p", p.tau_p);
    p.tau_n = s.num("tau_n", p.tau_n);
    p.tau_m = s.num("tau_m", p.tau_m);
    p.adaptive_tau_m = s.boolean("adaptive_tau_m", p.adaptive_tau_m);
    p.eta = static_cast<int>(s.integer("eta", p.eta));
    p.keep_fraction = s.num("aleph", p.keep_fraction);
    p.distance_norm = s.choice("distance_norm", p.distance_norm, detail::distance_names());
    p.sampling = s.choice("sampling", p.sampling, detail::sampling_names());
    s.reject_unknown();
  }
  {
    auto s = section("trainer");
    TrainerConfig& t = c.trainer;
    t.alpha_f = s.num("alpha_f", t.alpha_f);
    t.alpha_m = s.num("alpha_m", t.alpha_m);
    t.xi = s.num("xi", t.xi);
    t.t_sched = s.num("t_sched", t.t_sched);
    t.feature_optimizer = s.choice("feature_optimizer", t.feature_optimizer, detail::optimizer_names());
    t.flow_optimizer = s.choice("flow_optimizer", t.flow_optimizer, detail::optimizer_names());
    t.augment.crop = s.boolean("augment_crop", false);
    t.augment.flip = s.boolean("augment_flip", false);
    t.augment.color = s.boolean("augment_color", false);
    t.augment.views = static_cast<int>(s.integer("augment_views", t.augment.views));
    t.augment.crop_min = s.num("augment_crop_min", t.augment.crop_min);
    t.augment.jitter = s.num("augment_jitter", t.augment.jitter);
    t.augment.blur_sigma = s.num("augment_blur_sigma", t.augment.blur_sigma);
    t.seed = s.unsigned_integer("seed", t.seed);
    t.bootstrap_pair = s.boolean("bootstrap_pair", t.bootstrap_pair);
    t.max_steps = s.integer("max_steps", t.max_steps);
    t.checkpoint_every = s.integer("checkpoint_every", t.checkpoint_every);
    t.log_every = s.integer("log_every", t.log_every);
    t.out_dir = s.str("out_dir", t.out_dir);
    s.reject_unknown();
  }
  {
    auto s = section("eval");
    EvalConfig& e = c.eval;
    e.train_laps = static_cast<int>(s.integer("train_laps", e.train_laps));
    e.template_laps = static_cast<int>(s.integer("template_laps", e.template_laps));
    e.eval_laps = static_cast<int>(s.integer("eval_laps", e.eval_laps));
    e.templates_per_object = static_cast<int>(s.integer("templates_per_object", e.templates_per_object));
    e.template_spacing = static_cast<int>(s.integer("template_spacing", e.template_spacing));
    e.tau_abstain = s.num("tau_abstain", e.tau_abstain);
    e.render = s.boolean("render", e.render);
    e.seed = s.unsigned_integer("seed", e.seed);
    s.reject_unknown();
  }
  return c;
}

inline Config load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

/// Checks cross-field invariants.
inline void validate(const Config& c) {
  validate(c.stream);
  validate_level_chain(c.level_specs(), c.stream.channels);
  c.conjugation.validate();
  if (static_cast<int>(c.conjugation.levels.size()) != c.model.levels)
    throw ConfigError("conjugation coefficients do not match model.levels");
  c.contrastive.validate();
  const TrainerConfig& t = c.trainer;
  if (!(t.alpha_f >= 0) || !(t.alpha_m >= 0)) throw ConfigError("trainer: learning rates must be >= 0");
  if (!(t.xi >= 0 && t.xi < 1)) throw ConfigError("trainer: xi must be in [0, 1)");
  if (t.t_sched < 0) throw ConfigError("trainer: t_sched must be >= 0");
  if (t.augment.views < 0) throw ConfigError("trainer: augment_views must be >= 0");
  if (!(t.augment.crop_min > 0 && t.augment.crop_min <= 1)) throw ConfigError("trainer: augment_crop_min must be in (0, 1]");
  const EvalConfig& e = c.eval;
  if (e.template_laps > e.train_laps) throw ConfigError("eval: template_laps exceeds train_laps");
  if (e.templates_per_object < 0 || e.template_spacing < 1) throw ConfigError("eval: bad template cadence");
  if (e.tau_abstain < 0 || e.tau_abstain > 2) throw ConfigError("eval: tau_abstain must be in [0, 2]");
}

/// Canonical INI rendering. With `hashed_only`, output paths, cadences and [eval] are left out.
inline std::string to_ini(const Config& c, bool hashed_only = false) {
  using detail::fmt_double;
  std::ostringstream os;
  const StreamSpec& st = c.stream;
  os << "[stream]\n";
  os << "source=" << detail::enum_name(st.source, detail::source_names()) << "\n";
  if (!hashed_only && !st.path.empty()) os << "path=" << st.path.string() << "\n";
  os << "width=" << st.width << "\nheight=" << st.height << "\nchannels=" << st.channels << "\n";
  os << "frames=" << st.frames << "\nlaps=" << st.laps << "\nleg_frames=" << st.leg_frames << "\n";
  os << "motion=" << detail::enum_name(st.motion, detail::motion_names()) << "\n";
  os << "seed=" << st.seed << "\nbackground=" << fmt_double(st.background) << "\n";
  os << "textured_background=" << (st.textured_background ? "true" : "false") << "\n";
  os << "subpixel=" << (st.subpixel ? "true" : "false") << "\nloop=" << (st.loop ? "true" : "false") << "\n";
  os << "objects=" << st.objects.size() << "\n";
  for (std::size_t i = 0; i < st.objects.size(); ++i) {
    const ObjectSpec& o = st.objects[i];
    const std::string p = "obj" + std::to_string(i + 1) + "_";
    os << p << "shape=" << detail::enum_name(o.shape, detail::shape_names()) << "\n";
    os << p << "size=" << o.width << ", " << o.height << "\n";
    os << p << "start=" << fmt_double(o.x) << ", " << fmt_double(o.y) << "\n";
    os << p << "velocity=" << fmt_double(o.vx) << ", " << fmt_double(o.vy) << "\n";
    os << p << "color0=" << detail::join({o.color0[0], o.color0[1], o.color0[2]}) << "\n";
    os << p << "color1=" << detail::join({o.color1[0], o.color1[1], o.color1[2]}) << "\n";
    os << p << "texture=" << detail::enum_name(o.texture, detail::texture_names()) << "\n";
    os << p << "period=" << fmt_double(o.period) << "\n";
    os << p << "class=" << o.class_id << "\n";
  }
  const LevelSpec& sh = c.model.shape;
  os << "\n[model]\nlevels=" << c.model.levels << "\nfeature_channels=" << sh.feature_channels
     << "\nfeature_width=" << sh.feature_width << "\nfeature_depth=" << sh.feature_depth << "\nflow_width=" << sh.flow_width
     << "\nflow_depth=" << sh.flow_depth << "\nblock_convs=" << sh.block_convs
     << "\nfeature_input_skip=" << (sh.feature_input_skip ? "true" : "false")
     << "\nflow_input_skip=" << (sh.flow_input_skip ? "true" : "false")
     << "\nflow_head_scale=" << fmt_double(sh.flow_head_scale) << "\nseed=" << c.model.seed << "\n";
  std::vector<double> cur, skip, low;
  for (const auto& l : c.conjugation.levels) {
    cur.push_back(l.cur);
    skip.push_back(l.skip);
    low.push_back(l.low);
  }
  os << "\n[conjugation]\nlambda_cur=" << detail::join(cur) << "\nlambda_skip=" << detail::join(skip)
     << "\nlambda_low=" << detail::join(low) << "\nlambda_s=" << fmt_double(c.conjugation.smoothness)
     << "\nlambda_r=" << fmt_double(c.conjugation.magnitude) << "\nlambda_m=" << fmt_double(c.conjugation.low_multiplier)
     << "\n";
  const ContrastiveParams& p = c.contrastive;
  os << "\n[contrastive]\ntau=" << fmt_double(p.temperature) << "\ntau_p=" << fmt_double(p.tau_p)
     << "\ntau_n=" << fmt_double(p.tau_n) << "\ntau_m=" << fmt_double(p.tau_m)
     << "\nadaptive_tau_m=" << (p.adaptive_tau_m ? "true" : "false") << "\neta=" << p.eta
     << "\naleph=" << fmt_double(p.keep_fraction)
     << "\ndistance_norm=" << detail::enum_name(p.distance_norm, detail::distance_names())
     << "\nsampling=" << detail::enum_name(p.sampling, detail::sampling_names()) << "\n";
  const TrainerConfig& t = c.trainer;
  os << "\n[trainer]\nalpha_f=" << fmt_double(t.alpha_f) << "\nalpha_m=" << fmt_double(t.alpha_m)
     << "\nxi=" << fmt_double(t.xi) << "\nt_sched=" << fmt_double(t.t_sched)
     << "\nfeature_optimizer=" << to_string(t.feature_optimizer) << "\nflow_optimizer=" << to_string(t.flow_optimizer)
     << "\naugment_crop=" << (t.augment.crop ? "true" : "false") << "\naugment_flip=" << (t.augment.flip ? "true" : "false")
     << "\naugment_color=" << (t.augment.color ? "true" : "false") << "\naugment_views=" << t.augment.views
     << "\naugment_crop_min=" << fmt_double(t.augment.crop_min) << "\naugment_jitter=" << fmt_double(t.augment.jitter)
     << "\naugment_blur_sigma=" << fmt_double(t.augment.blur_sigma) << "\nseed=" << t.seed
     << "\nbootstrap_pair=" << (t.bootstrap_pair ? "true" : "false") << "\n";
  if (!hashed_only) {
    os << "max_steps=" << t.max_steps << "\ncheckpoint_every=" << t.checkpoint_every << "\nlog_every=" << t.log_every
       << "\nout_dir=" << t.out_dir << "\n";
    const EvalConfig& e = c.eval;
    os << "\n[eval]\ntrain_laps=" << e.train_laps << "\ntemplate_laps=" << e.template_laps << "\neval_laps=" << e.eval_laps
       << "\ntemplates_per_object=" << e.templates_per_object << "\ntemplate_spacing=" << e.template_spacing
       << "\ntau_abstain=" << fmt_double(e.tau_abstain) << "\nrender=" << (e.render ? "true" : "false")
       << "\nseed=" << e.seed << "\n";
  }
  return os.str();
}

/// FNV-1a 64 of the canonical rendering of everything that shapes the learned weights.
inline std::uint64_t config_hash(const Config& c) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : to_ini(c, true)) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace conjflow
