#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace conjflow {

/// Raised whenever two grids that must agree in size do not.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense channel-major grid (C x H x W). Value semantics, contiguous storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : c_(channels), h_(height), w_(width) {
    if (channels < 0 || height < 0 || width < 0) throw ShapeError("negative tensor extent");
    data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
  }

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  const T& operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }

  T* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * plane(); }
  const T* channel(int c) const { return data_.data() + static_cast<std::size_t>(c) * plane(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  bool same_shape(const Tensor& o) const { return c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }
  bool same_grid(const Tensor& o) const { return h_ == o.h_ && w_ == o.w_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(*this, o, "tensor +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(c_, h_, w_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.storage()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

  static void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": shape mismatch");
  }
  static void require_same_grid(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_grid(b)) throw ShapeError(std::string(what) + ": spatial size mismatch");
  }

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * h_ + y) * w_ + x;
  }

  int c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> data_;
};

/// Dense per-pixel representation at one level of the hierarchy. Level 0 is the raw frame.
template <typename T>
class FeatureMap : public Tensor<T> {
 public:
  FeatureMap() = default;
  FeatureMap(int channels, int height, int width, int level = 0)
      : Tensor<T>(channels, height, width), level_(level) {}
  FeatureMap(Tensor<T> values, int level) : Tensor<T>(std::move(values)), level_(level) {}

  int level() const { return level_; }
  void set_level(int level) { level_ = level; }

 private:
  int level_ = 0;
};

/// Per-pixel displacement (channel 0 horizontal, channel 1 vertical) in pixels,
/// expressed in the coordinate frame of the earlier frame of a pair.
template <typename T>
class FlowField : public Tensor<T> {
 public:
  FlowField() = default;
  FlowField(int height, int width, int level = 1) : Tensor<T>(2, height, width), level_(level) {}
  FlowField(Tensor<T> values, int level) : Tensor<T>(std::move(values)), level_(level) {
    if (this->channels() != 2) throw ShapeError("flow field must have exactly 2 channels");
  }

  T& u(int y, int x) { return (*this)(0, y, x); }
  T& v(int y, int x) { return (*this)(1, y, x); }
  T u(int y, int x) const { return (*this)(0, y, x); }
  T v(int y, int x) const { return (*this)(1, y, x); }
  T magnitude(int y, int x) const { return std::hypot(u(y, x), v(y, x)); }

  int level() const { return level_; }

 private:
  int level_ = 1;
};

/// Pixel coordinate (row, column).
struct Coord {
  int y = 0;
  int x = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
};

/// Concatenate two tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T>::require_same_grid(a, b, "concat_channels");
  Tensor<T> out(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.storage().begin(), a.storage().end(), out.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), out.storage().begin() + a.size());
  return out;
}

}  // namespace conjflow
