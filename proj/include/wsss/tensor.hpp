#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wsss/error.hpp"

namespace wsss {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    require<ShapeError>(d >= 0, "negative dimension in shape ", shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Dense row-major array. Rank is dynamic; the hot paths only use ranks 1-4.
template <typename T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require<ShapeError>(data_.size() == shape_numel(shape_), "tensor data size ", data_.size(),
                        " does not match shape ", shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    require<ShapeError>(axis >= 0 && axis < r, "axis out of range for shape ", shape_str(shape_));
    return shape_[static_cast<std::size_t>(axis)];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(int i, int j) noexcept { return data_[idx2(i, j)]; }
  const T& operator()(int i, int j) const noexcept { return data_[idx2(i, j)]; }
  T& operator()(int c, int i, int j) noexcept { return data_[idx3(c, i, j)]; }
  const T& operator()(int c, int i, int j) const noexcept { return data_[idx3(c, i, j)]; }

  Tensor reshaped(Shape s) const {
    require<ShapeError>(shape_numel(s) == size(), "cannot reshape ", shape_str(shape_), " to ",
                        shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  std::size_t idx2(int i, int j) const noexcept {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) +
           static_cast<std::size_t>(j);
  }
  std::size_t idx3(int c, int i, int j) const noexcept {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(shape_[1]) +
            static_cast<std::size_t>(i)) *
               static_cast<std::size_t>(shape_[2]) +
           static_cast<std::size_t>(j);
  }

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require<ShapeError>(a.same_shape(b), "max_abs_diff: shape mismatch ", shape_str(a.shape()),
                      " vs ", shape_str(b.shape()));
  T m{};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

// Bilinear resampling of a C×H×W block with half-pixel centres (align_corners = false).
template <typename T>
struct BilinearTap {
  int i0, i1;
  T w0, w1;
};

template <typename T>
std::vector<BilinearTap<T>> bilinear_taps(int in, int out) {
  std::vector<BilinearTap<T>> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    const double f = src - i0;
    taps[static_cast<std::size_t>(o)] = {i0, i1, static_cast<T>(1.0 - f), static_cast<T>(f)};
  }
  return taps;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& src, int out_h, int out_w) {
  require<ShapeError>(src.rank() == 3, "resize_bilinear expects C×H×W, got ", shape_str(src.shape()));
  require<ShapeError>(out_h >= 1 && out_w >= 1, "resize target must be at least 1×1");
  const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  if (h == out_h && w == out_w) return src;
  const auto ty = bilinear_taps<T>(h, out_h);
  const auto tx = bilinear_taps<T>(w, out_w);
  Tensor<T> out({c, out_h, out_w});
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < out_h; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const auto& b = tx[static_cast<std::size_t>(x)];
        out(k, y, x) = a.w0 * (b.w0 * src(k, a.i0, b.i0) + b.w1 * src(k, a.i0, b.i1)) +
                       a.w1 * (b.w0 * src(k, a.i1, b.i0) + b.w1 * src(k, a.i1, b.i1));
      }
    }
  return out;
}

}  // namespace wsss
