#pragma once

// Frame sources: a synthetic moving-shapes generator with exact labels and flow,
// and a reader for frame directories (frames/%06d.png|pgm, labels/, flow/).
//
// Synthetic objects move back and forth: a lap is `leg_frames` steps forward at
// the object's velocity followed by `leg_frames` steps back. Pixel values are
// quantized to 8 bits so the in-memory stream equals its on-disk copy.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "conjflow/image_io.hpp"
#include "conjflow/random.hpp"
#include "conjflow/tensor.hpp"

namespace conjflow {

enum class SourceKind { Synthetic, Directory };
enum class MotionMode { Simultaneous, Alternating };
enum class ShapeKind { Rect, Ellipse, Diamond };
enum class TextureKind { Flat, StripesH, StripesV, Checker, WavesH, WavesV, Blobs };

class StreamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EndOfStream : public StreamError {
 public:
  EndOfStream() : StreamError("end of stream") {}
};

struct ObjectSpec {
  ShapeKind shape = ShapeKind::Rect;
  int width = 12, height = 12;
  double x = 0, y = 0;    // top-left corner at the start of every lap
  double vx = 1, vy = 0;  // pixels per frame on the outbound leg
  std::array<double, 3> color0{0.9, 0.2, 0.2};
  std::array<double, 3> color1{0.2, 0.2, 0.9};
  TextureKind texture = TextureKind::Flat;
  double period = 8;      // texture period in pixels
  int class_id = 1;
};

struct StreamSpec {
  SourceKind source = SourceKind::Synthetic;
  fs::path path;          // frame directory (directory sources)
  int width = 64, height = 64, channels = 3;
  std::int64_t frames = 0;  // 0: derived from laps
  int laps = 1;
  int leg_frames = 8;
  MotionMode motion = MotionMode::Simultaneous;
  std::uint64_t seed = 7;
  double background = 0.5;
  bool textured_background = false;
  bool subpixel = false;
  bool loop = false;
  std::vector<ObjectSpec> objects;

  int lap_frames() const { return 2 * leg_frames; }

  std::int64_t synthetic_length() const {
    if (frames > 0) return frames;
    const int per_lap = motion == MotionMode::Alternating ? static_cast<int>(objects.size()) : 1;
    return std::int64_t(laps) * lap_frames() * std::max(per_lap, 1);
  }

  std::vector<int> classes() const {
    std::set<int> ids{0};
    for (const auto& o : objects) ids.insert(o.class_id);
    return {ids.begin(), ids.end()};
  }
};

template <typename T>
struct Frame {
  Tensor<T> pixels;
  std::int64_t t = 0;
};

template <typename T>
struct FramePair {
  Frame<T> prev, cur;
};

struct GroundTruth {
  std::vector<int> labels;          // row-major class ids, 0 = background
  std::optional<Tensor<float>> flow;  // pair (t-1, t) in frame t-1 coordinates
};

namespace detail {

inline double leg_offset(std::int64_t phase, int leg) { return phase <= leg ? double(phase) : double(2 * leg - phase); }

inline bool inside_shape(ShapeKind s, double lx, double ly, int w, int h) {
  if (lx < 0 || ly < 0 || lx >= w || ly >= h) return false;
  const double cx = w / 2.0, cy = h / 2.0;
  const double nx = (lx - cx) / cx, ny = (ly - cy) / cy;
  switch (s) {
    case ShapeKind::Rect: return true;
    case ShapeKind::Ellipse: return nx * nx + ny * ny <= 1.0;
    case ShapeKind::Diamond: return std::abs(nx) + std::abs(ny) <= 1.0;
  }
  return false;
}

// Blend weight of color1 at local coordinates (lx, ly).
inline double texture_weight(TextureKind k, double lx, double ly, double period) {
  constexpr double two_pi = 6.283185307179586;
  const double half = period / 2.0;
  switch (k) {
    case TextureKind::Flat: return 0.0;
    case TextureKind::StripesH: return std::fmod(std::floor(ly / half), 2.0) != 0.0 ? 1.0 : 0.0;
    case TextureKind::StripesV: return std::fmod(std::floor(lx / half), 2.0) != 0.0 ? 1.0 : 0.0;
    case TextureKind::Checker: return std::fmod(std::floor(lx / half) + std::floor(ly / half), 2.0) != 0.0 ? 1.0 : 0.0;
    case TextureKind::WavesH: return 0.5 - 0.5 * std::cos(two_pi * ly / period);
    case TextureKind::WavesV: return 0.5 - 0.5 * std::cos(two_pi * lx / period);
    case TextureKind::Blobs:
      return 0.5 - 0.5 * std::cos(two_pi * lx / period) * std::cos(two_pi * ly / period);
  }
  return 0.0;
}

inline double luma(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

inline bool is_integral(double v) { return v == std::floor(v); }

}  // namespace detail

/// Position (top-left) of object `o` at frame t.
inline std::array<double, 2> object_position(const StreamSpec& spec, std::size_t o, std::int64_t t) {
  const ObjectSpec& ob = spec.objects.at(o);
  const int lap = spec.lap_frames();
  const std::int64_t phase = t % lap;
  double k = detail::leg_offset(phase, spec.leg_frames);
  if (spec.motion == MotionMode::Alternating) {
    const std::int64_t lap_index = t / lap;
    if (static_cast<std::size_t>(lap_index % std::int64_t(spec.objects.size())) != o) k = 0;
  }
  return {ob.x + k * ob.vx, ob.y + k * ob.vy};
}

inline void validate(const StreamSpec& spec) {
  if (spec.width <= 1 || spec.height <= 1) throw std::invalid_argument("stream: resolution must be at least 2x2");
  if (spec.channels != 1 && spec.channels != 3) throw std::invalid_argument("stream: channels must be 1 or 3");
  if (spec.source == SourceKind::Directory) return;
  if (spec.leg_frames < 1) throw std::invalid_argument("stream: leg_frames must be >= 1");
  if (spec.frames <= 0 && spec.laps < 1) throw std::invalid_argument("stream: need frames > 0 or laps >= 1");
  if (spec.background < 0 || spec.background > 1) throw std::invalid_argument("stream: background must be in [0, 1]");
  std::set<int> ids;
  for (const auto& o : spec.objects) {
    if (o.width < 1 || o.height < 1) throw std::invalid_argument("stream: object size must be positive");
    if (o.class_id < 1 || o.class_id > 255) throw std::invalid_argument("stream: object class ids must be in [1, 255]");
    if (!(o.period > 0)) throw std::invalid_argument("stream: texture period must be > 0");
    for (double c : o.color0)
      if (c < 0 || c > 1) throw std::invalid_argument("stream: colors must be in [0, 1]");
    for (double c : o.color1)
      if (c < 0 || c > 1) throw std::invalid_argument("stream: colors must be in [0, 1]");
    if (!spec.subpixel && !(detail::is_integral(o.vx) && detail::is_integral(o.vy) && detail::is_integral(o.x) &&
                            detail::is_integral(o.y)))
      throw std::invalid_argument("stream: non-integer motion requires subpixel = true");
  }
  // Every reachable position lies within one lap; check all of them.
  const std::int64_t span = spec.lap_frames() * std::max<std::int64_t>(1, std::int64_t(spec.objects.size()));
  for (std::int64_t t = 0; t < span; ++t) {
    std::vector<std::array<double, 4>> boxes;
    for (std::size_t o = 0; o < spec.objects.size(); ++o) {
      const auto p = object_position(spec, o, t);
      const auto& ob = spec.objects[o];
      if (p[0] < 0 || p[1] < 0 || p[0] + ob.width > spec.width || p[1] + ob.height > spec.height)
        throw std::invalid_argument("stream: object " + std::to_string(o) + " leaves the frame at t=" + std::to_string(t));
      for (const auto& b : boxes)
        if (p[0] < b[2] && b[0] < p[0] + ob.width && p[1] < b[3] && b[1] < p[1] + ob.height)
          throw std::invalid_argument("stream: objects overlap at t=" + std::to_string(t));
      boxes.push_back({p[0], p[1], p[0] + ob.width, p[1] + ob.height});
    }
  }
}

/// Renders synthetic frame t and, optionally, its label grid.
inline Tensor<float> render_synthetic(const StreamSpec& spec, std::int64_t t, std::vector<int>* labels = nullptr) {
  const int W = spec.width, H = spec.height, C = spec.channels;
  std::vector<double> bg(std::size_t(W) * H, spec.background);
  if (spec.textured_background) {
    Rng rng(spec.seed);
    // Smooth value noise: bilinear interpolation of a coarse random lattice.
    const int cell = 8, gw = W / cell + 2, gh = H / cell + 2;
    std::vector<double> lattice(std::size_t(gw) * gh);
    for (auto& v : lattice) v = uniform(rng, 0.25, 0.75);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double fx = double(x) / cell, fy = double(y) / cell;
        const int ix = int(fx), iy = int(fy);
        const double ax = fx - ix, ay = fy - iy;
        auto L = [&](int yy, int xx) { return lattice[std::size_t(yy) * gw + xx]; };
        bg[std::size_t(y) * W + x] = (1 - ay) * ((1 - ax) * L(iy, ix) + ax * L(iy, ix + 1)) +
                                     ay * ((1 - ax) * L(iy + 1, ix) + ax * L(iy + 1, ix + 1));
      }
  }
  std::vector<std::array<double, 3>> rgb(std::size_t(W) * H);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = {bg[i], bg[i], bg[i]};
  if (labels) labels->assign(std::size_t(W) * H, 0);

  const int ss = spec.subpixel ? 4 : 1;
  for (std::size_t o = 0; o < spec.objects.size(); ++o) {
    const ObjectSpec& ob = spec.objects[o];
    const auto pos = object_position(spec, o, t);
    const int x_lo = std::max(0, int(std::floor(pos[0]))), x_hi = std::min(W, int(std::ceil(pos[0] + ob.width)) + 1);
    const int y_lo = std::max(0, int(std::floor(pos[1]))), y_hi = std::min(H, int(std::ceil(pos[1] + ob.height)) + 1);
    for (int y = y_lo; y < y_hi; ++y) {
      for (int x = x_lo; x < x_hi; ++x) {
        std::array<double, 3> acc{0, 0, 0};
        int hits = 0;
        for (int sy = 0; sy < ss; ++sy) {
          for (int sx = 0; sx < ss; ++sx) {
            // Integer mode samples the pixel's own corner so shapes land exactly on the grid.
            const double px = ss == 1 ? x : x + (sx + 0.5) / ss;
            const double py = ss == 1 ? y : y + (sy + 0.5) / ss;
            const double lx = px - pos[0], ly = py - pos[1];
            const std::size_t i = std::size_t(y) * W + x;
            std::array<double, 3> c = {bg[i], bg[i], bg[i]};
            if (detail::inside_shape(ob.shape, lx, ly, ob.width, ob.height)) {
              const double w = detail::texture_weight(ob.texture, lx, ly, ob.period);
              for (int k = 0; k < 3; ++k) c[k] = (1 - w) * ob.color0[k] + w * ob.color1[k];
              ++hits;
            }
            for (int k = 0; k < 3; ++k) acc[k] += c[k];
          }
        }
        if (hits == 0) continue;
        const std::size_t i = std::size_t(y) * W + x;
        for (int k = 0; k < 3; ++k) rgb[i][k] = acc[k] / (ss * ss);
        if (labels) {
          const double cx = ss == 1 ? x : x + 0.5, cy = ss == 1 ? y : y + 0.5;
          if (detail::inside_shape(ob.shape, cx - pos[0], cy - pos[1], ob.width, ob.height)) (*labels)[i] = ob.class_id;
        }
      }
    }
  }
  Tensor<float> out(C, H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto& c = rgb[std::size_t(y) * W + x];
      if (C == 1) out(0, y, x) = to_byte(detail::luma(c)) / 255.0f;
      else
        for (int k = 0; k < 3; ++k) out(k, y, x) = to_byte(c[k]) / 255.0f;
    }
  return out;
}

/// True flow of the pair (t-1, t), expressed on frame t-1: object velocity on its pixels, zero elsewhere.
inline Tensor<float> synthetic_flow(const StreamSpec& spec, std::int64_t t) {
  if (t < 1) throw std::out_of_range("synthetic_flow: needs t >= 1");
  std::vector<int> labels;
  render_synthetic(spec, t - 1, &labels);
  Tensor<float> flow(2, spec.height, spec.width);
  for (std::size_t o = 0; o < spec.objects.size(); ++o) {
    const auto a = object_position(spec, o, t - 1), b = object_position(spec, o, t);
    const float u = static_cast<float>(b[0] - a[0]), v = static_cast<float>(b[1] - a[1]);
    const ObjectSpec& ob = spec.objects[o];
    const int x_lo = std::max(0, int(std::floor(a[0]))), x_hi = std::min(spec.width, int(std::ceil(a[0] + ob.width)) + 1);
    const int y_lo = std::max(0, int(std::floor(a[1]))), y_hi = std::min(spec.height, int(std::ceil(a[1] + ob.height)) + 1);
    for (int y = y_lo; y < y_hi; ++y)
      for (int x = x_lo; x < x_hi; ++x)
        if (labels[std::size_t(y) * spec.width + x] == ob.class_id) {
          flow(0, y, x) = u;
          flow(1, y, x) = v;
        }
  }
  return flow;
}

namespace detail {

inline std::array<int, 2> image_dims(const fs::path& p) {
  if (p.extension() == ".pgm") {
    const Image8 img = read_pgm(p);
    return {img.width, img.height};
  }
  std::ifstream is(p, std::ios::binary);
  unsigned char hdr[24];
  if (!is.read(reinterpret_cast<char*>(hdr), 24) || hdr[1] != 'P' || hdr[2] != 'N' || hdr[3] != 'G')
    throw StreamError("malformed frame file: " + p.string());
  auto be32 = [&](int o) { return int(hdr[o]) << 24 | int(hdr[o + 1]) << 16 | int(hdr[o + 2]) << 8 | int(hdr[o + 3]); };
  return {be32(16), be32(20)};
}

inline bool is_index_name(const std::string& stem) {
  return stem.size() == 6 && std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; });
}

inline fs::path indexed(const fs::path& dir, std::int64_t t, const std::string& ext) {
  char name[32];
  std::snprintf(name, sizeof(name), "%06lld", static_cast<long long>(t));
  return dir / (std::string(name) + ext);
}

}  // namespace detail

/// Single-consumer cursor over a stream.
class StreamHandle {
 public:
  explicit StreamHandle(StreamSpec spec) : spec_(std::move(spec)) {
    validate(spec_);
    if (spec_.source == SourceKind::Synthetic) {
      length_ = spec_.synthetic_length();
      return;
    }
    const fs::path frames = spec_.path / "frames";
    if (!fs::is_directory(frames)) throw StreamError("missing frame directory: " + frames.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(frames)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".png" || ext == ".pgm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.size() < 2) throw StreamError("frame directory needs at least 2 frames: " + frames.string());
    ext_ = files.front().extension().string();
    for (std::size_t i = 0; i < files.size(); ++i) {
      if (!detail::is_index_name(files[i].stem().string()) || files[i].extension() != ext_ ||
          std::stoll(files[i].stem().string()) != static_cast<long long>(i))
        throw StreamError("frame files must be named 000000" + ext_ + ", 000001" + ext_ + ", ...: found " +
                          files[i].filename().string());
      const auto d = detail::image_dims(files[i]);
      if (i == 0) {
        spec_.width = d[0];
        spec_.height = d[1];
      } else if (d[0] != spec_.width || d[1] != spec_.height) {
        throw StreamError("resolution mismatch: " + files[i].filename().string() + " is " + std::to_string(d[0]) + "x" +
                          std::to_string(d[1]) + ", expected " + std::to_string(spec_.width) + "x" +
                          std::to_string(spec_.height));
      }
    }
    spec_.channels = ext_ == ".pgm" ? 1 : 3;
    length_ = static_cast<std::int64_t>(files.size());
  }

  const StreamSpec& spec() const { return spec_; }
  std::int64_t length() const { return length_; }
  std::int64_t position() const { return cursor_; }
  bool exhausted() const { return !spec_.loop && cursor_ >= length_; }
  int width() const { return spec_.width; }
  int height() const { return spec_.height; }
  int channels() const { return spec_.channels; }

  Frame<float> next_frame() {
    if (exhausted()) throw EndOfStream();
    Frame<float> f{frame_at(cursor_), cursor_};
    ++cursor_;
    return f;
  }

  /// Advances the cursor by n frames without producing them.
  void skip(std::int64_t n) {
    if (n < 0) throw std::invalid_argument("skip: negative count");
    if (!spec_.loop && cursor_ + n > length_) throw EndOfStream();
    cursor_ += n;
  }

  /// Random access by stream time (wraps for looping streams).
  Tensor<float> frame_at(std::int64_t t) const {
    const std::int64_t i = source_index(t);
    if (spec_.source == SourceKind::Synthetic) return render_synthetic(spec_, i);
    Tensor<float> f = read_frame<float>(detail::indexed(spec_.path / "frames", i, ext_));
    if (f.width() != spec_.width || f.height() != spec_.height) throw StreamError("resolution mismatch at frame " + std::to_string(i));
    return f;
  }

  bool has_labels() const {
    return spec_.source == SourceKind::Synthetic || fs::is_directory(spec_.path / "labels");
  }

  /// Labels of frame t and true flow of the pair (t-1, t) when available.
  GroundTruth ground_truth(std::int64_t t) const {
    const std::int64_t i = source_index(t);
    GroundTruth g;
    if (spec_.source == SourceKind::Synthetic) {
      render_synthetic(spec_, i, &g.labels);
      if (t >= 1) g.flow = synthetic_flow(spec_, t);
      return g;
    }
    const fs::path lp = detail::indexed(spec_.path / "labels", i, ".png");
    if (!fs::exists(lp)) throw StreamError("missing labels for frame " + std::to_string(i));
    int w = 0, h = 0;
    g.labels = read_labels(lp, &w, &h);
    if (w != spec_.width || h != spec_.height) throw StreamError("label resolution mismatch at frame " + std::to_string(i));
    const fs::path fp = detail::indexed(spec_.path / "flow", i, ".flo");
    if (t >= 1 && fs::exists(fp)) g.flow = read_flo(fp);
    return g;
  }

 private:
  std::int64_t source_index(std::int64_t t) const {
    if (t < 0) throw std::out_of_range("negative frame index");
    if (t >= length_) {
      if (!spec_.loop) throw EndOfStream();
      return t % length_;
    }
    return t;
  }

  StreamSpec spec_;
  std::int64_t length_ = 0;
  std::int64_t cursor_ = 0;
  std::string ext_;
};

inline StreamHandle open_stream(const StreamSpec& spec) { return StreamHandle(spec); }

struct GenerateSummary {
  std::int64_t frames = 0;
  std::int64_t flows = 0;
  std::vector<int> classes;
};

/// Writes frames/, labels/ and flow/ for a synthetic spec. flow/%06d.flo holds the pair (t-1, t).
inline GenerateSummary generate_toy_stream(const StreamSpec& spec, const fs::path& out_dir) {
  if (spec.source != SourceKind::Synthetic) throw std::invalid_argument("generate_toy_stream: spec must be synthetic");
  validate(spec);
  std::error_code ec;
  for (const char* sub : {"frames", "labels", "flow"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  GenerateSummary s;
  s.classes = spec.classes();
  const std::string ext = spec.channels == 1 ? ".pgm" : ".png";
  for (std::int64_t t = 0; t < spec.synthetic_length(); ++t) {
    std::vector<int> labels;
    const Tensor<float> f = render_synthetic(spec, t, &labels);
    write_frame(detail::indexed(out_dir / "frames", t, ext), f);
    write_labels(detail::indexed(out_dir / "labels", t, ".png"), labels, spec.width, spec.height);
    ++s.frames;
    if (t >= 1) {
      write_flo(detail::indexed(out_dir / "flow", t, ".flo"), synthetic_flow(spec, t));
      ++s.flows;
    }
  }
  return s;
}

}  // namespace conjflow
