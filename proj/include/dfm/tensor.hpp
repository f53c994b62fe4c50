#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dfm/error.hpp"

namespace dfm {

struct Resolution {
  int height = 0;
  int width = 0;

  friend bool operator==(const Resolution&, const Resolution&) = default;
  std::string str() const { return std::to_string(height) + "x" + std::to_string(width); }
};

/// Dense (channels, height, width) image tensor in row-major order.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : channels_(channels),
        height_(height),
        width_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {
    if (channels <= 0 || height <= 0 || width <= 0) {
      throw InvalidInput("tensor dimensions must be positive");
    }
  }
  Tensor(int channels, Resolution r, T fill = T(0)) : Tensor(channels, r.height, r.width, fill) {}

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  Resolution resolution() const { return {height_, width_}; }
  std::size_t size() const { return data_.size(); }

  bool same_shape(const Tensor& o) const {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
  }

  T& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  T operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(channels_, height_, width_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

template <typename T>
double mean(const Tensor<T>& t) {
  double s = 0.0;
  for (T v : t.values()) s += static_cast<double>(v);
  return s / static_cast<double>(t.size());
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw InvalidInput("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, static_cast<double>(a[i] > b[i] ? a[i] - b[i] : b[i] - a[i]));
  }
  return m;
}

}  // namespace dfm
