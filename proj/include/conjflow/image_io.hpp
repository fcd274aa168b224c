#pragma once

// On-disk formats: 8-bit PNG (RGB frames and palette-indexed label maps),
// binary PGM for grayscale frames, and a .flo-style float flow file.
//
// Flow file layout (little-endian): float32 magic 202021.25, int32 height,
// int32 width, then height*width (u, v) float32 pairs in row-major order.

#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <csetjmp>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "conjflow/tensor.hpp"

namespace conjflow {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr float kFloMagic = 202021.25f;

/// Interleaved 8-bit image.
struct Image8 {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> data;  // row-major, channel-interleaved

  Image8() = default;
  Image8(int w, int h, int c) : width(w), height(h), channels(c), data(std::size_t(w) * h * c, 0) {}
  std::uint8_t& at(int y, int x, int c) { return data[(std::size_t(y) * width + x) * channels + c]; }
  std::uint8_t at(int y, int x, int c) const { return data[(std::size_t(y) * width + x) * channels + c]; }
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

template <typename T>
Image8 to_image(const Tensor<T>& t) {
  if (t.channels() != 1 && t.channels() != 3) throw ShapeError("to_image: need 1 or 3 channels");
  Image8 img(t.width(), t.height(), t.channels());
  for (int y = 0; y < t.height(); ++y)
    for (int x = 0; x < t.width(); ++x)
      for (int c = 0; c < t.channels(); ++c) img.at(y, x, c) = to_byte(double(t(c, y, x)));
  return img;
}

template <typename T>
Tensor<T> to_tensor(const Image8& img) {
  Tensor<T> t(img.channels, img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) t(c, y, x) = static_cast<T>(img.at(y, x, c) / 255.0);
  return t;
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const fs::path& p, const char* mode) {
  FilePtr f(std::fopen(p.string().c_str(), mode));
  if (!f) throw IoError("cannot open " + p.string());
  return f;
}

inline void png_warn(png_structp, png_const_charp) {}

// `palette` non-empty means a palette-indexed image with one channel of indices.
inline void write_png_impl(const fs::path& path, const Image8& img, const std::vector<std::array<std::uint8_t, 3>>& palette) {
  if (img.channels != 1 && img.channels != 3) throw IoError("write_png: need 1 or 3 channels");
  FilePtr f = open_file(path, "wb");
  std::vector<png_color> pal;
  for (const auto& c : palette) pal.push_back({c[0], c[1], c[2]});
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path.string());
  }
  {
    png_init_io(png, f.get());
    const int color = !palette.empty() ? PNG_COLOR_TYPE_PALETTE : img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
    png_set_IHDR(png, info, img.width, img.height, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    if (!pal.empty()) {
      png_set_PLTE(png, info, pal.data(), static_cast<int>(pal.size()));
    }
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
      png_write_row(png, const_cast<png_bytep>(img.data.data() + std::size_t(y) * img.width * img.channels));
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
}

// Reads a PNG. Palette images come back as indices when `keep_indices`, else expanded to RGB.
inline Image8 read_png_impl(const fs::path& path, bool keep_indices) {
  FilePtr f = open_file(path, "rb");
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw IoError("not a PNG file: " + path.string());
  Image8 img;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("malformed PNG: " + path.string());
  }
  {
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) {
      if (keep_indices) {
        if (depth < 8) png_set_packing(png);
      } else {
        png_set_palette_to_rgb(png);
      }
    } else if (keep_indices) {
      png_destroy_read_struct(&png, &info, nullptr);
      throw IoError("expected a palette-indexed PNG: " + path.string());
    }
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = static_cast<int>(png_get_channels(png, info));
    img.width = w;
    img.height = h;
    img.channels = c;
    img.data.resize(std::size_t(w) * h * c);
    for (int y = 0; y < img.height; ++y)
      png_read_row(png, img.data.data() + std::size_t(y) * img.width * img.channels, nullptr);
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace detail

inline void write_png(const fs::path& path, const Image8& img) { detail::write_png_impl(path, img, {}); }
inline Image8 read_png(const fs::path& path) { return detail::read_png_impl(path, false); }

/// Deterministic label palette: 0 is black, ids >= 1 get well-separated hues.
inline std::array<std::uint8_t, 3> class_color(int id) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 10> table = {{{0, 0, 0},
                                                                          {230, 25, 75},
                                                                          {60, 180, 75},
                                                                          {0, 130, 200},
                                                                          {255, 225, 25},
                                                                          {145, 30, 180},
                                                                          {245, 130, 48},
                                                                          {70, 240, 240},
                                                                          {240, 50, 230},
                                                                          {128, 128, 0}}};
  if (id >= 0 && id < static_cast<int>(table.size())) return table[id];
  // Golden-ratio walk for larger ids.
  const std::uint32_t h = static_cast<std::uint32_t>(id) * 2654435761u;
  return {static_cast<std::uint8_t>(64 + (h & 0x7f)), static_cast<std::uint8_t>(64 + ((h >> 8) & 0x7f)),
          static_cast<std::uint8_t>(64 + ((h >> 16) & 0x7f))};
}

/// Label grid as a palette PNG whose pixel indices are the class ids.
inline void write_labels(const fs::path& path, const std::vector<int>& labels, int width, int height) {
  if (labels.size() != std::size_t(width) * height) throw IoError("write_labels: size mismatch");
  int max_id = 0;
  for (int v : labels) {
    if (v < 0 || v > 255) throw IoError("write_labels: class id out of [0, 255]");
    max_id = std::max(max_id, v);
  }
  std::vector<std::array<std::uint8_t, 3>> palette;
  for (int i = 0; i <= max_id; ++i) palette.push_back(class_color(i));
  Image8 img(width, height, 1);
  for (std::size_t i = 0; i < labels.size(); ++i) img.data[i] = static_cast<std::uint8_t>(labels[i]);
  detail::write_png_impl(path, img, palette);
}

inline std::vector<int> read_labels(const fs::path& path, int* width = nullptr, int* height = nullptr) {
  const Image8 img = detail::read_png_impl(path, true);
  if (width) *width = img.width;
  if (height) *height = img.height;
  return std::vector<int>(img.data.begin(), img.data.end());
}

inline void write_pgm(const fs::path& path, const Image8& img) {
  if (img.channels != 1) throw IoError("write_pgm: need 1 channel");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline Image8 read_pgm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string s;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!s.empty()) break;
        continue;
      }
      s.push_back(c);
    }
    return s;
  };
  if (token() != "P5") throw IoError("not a binary PGM: " + path.string());
  int w = 0, h = 0, maxv = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxv = std::stoi(token());
  } catch (const std::exception&) {
    throw IoError("malformed PGM header: " + path.string());
  }
  if (w <= 0 || h <= 0 || maxv != 255) throw IoError("unsupported PGM (need 8-bit): " + path.string());
  Image8 img(w, h, 1);
  is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.data.size())) throw IoError("truncated PGM: " + path.string());
  return img;
}

inline void write_flo(const fs::path& path, const Tensor<float>& flow) {
  if (flow.channels() != 2) throw IoError("write_flo: flow must have 2 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  const std::int32_t h = flow.height(), w = flow.width();
  os.write(reinterpret_cast<const char*>(&kFloMagic), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  os.write(reinterpret_cast<const char*>(&w), 4);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float uv[2] = {flow(0, y, x), flow(1, y, x)};
      os.write(reinterpret_cast<const char*>(uv), 8);
    }
  if (!os) throw IoError("write failed: " + path.string());
}

inline Tensor<float> read_flo(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  float magic = 0;
  std::int32_t h = 0, w = 0;
  is.read(reinterpret_cast<char*>(&magic), 4);
  is.read(reinterpret_cast<char*>(&h), 4);
  is.read(reinterpret_cast<char*>(&w), 4);
  if (!is || magic != kFloMagic) throw IoError("bad flow file magic: " + path.string());
  if (h <= 0 || w <= 0 || h > 1 << 15 || w > 1 << 15) throw IoError("bad flow file size: " + path.string());
  Tensor<float> flow(2, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float uv[2];
      is.read(reinterpret_cast<char*>(uv), 8);
      flow(0, y, x) = uv[0];
      flow(1, y, x) = uv[1];
    }
  if (!is) throw IoError("truncated flow file: " + path.string());
  return flow;
}

/// Reads a frame image (.png or .pgm) as a tensor in [0, 1].
template <typename T>
Tensor<T> read_frame(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return to_tensor<T>(read_pgm(path));
  if (ext == ".png") return to_tensor<T>(read_png(path));
  throw IoError("unsupported frame format: " + path.string());
}

template <typename T>
void write_frame(const fs::path& path, const Tensor<T>& frame) {
  if (path.extension() == ".pgm") write_pgm(path, to_image(frame));
  else write_png(path, to_image(frame));
}

}  // namespace conjflow
