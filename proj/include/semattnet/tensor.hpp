#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <new>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "semattnet/errors.hpp"

namespace semattnet {

// NCHW extents. Matrices and vectors are stored as (rows, cols, 1, 1).
struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  constexpr std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

// Cache-line aligned storage. Vectorized reductions peel a different number
// of leading elements depending on the buffer address, so unaligned storage
// makes float results vary from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

// Dense NCHW tensor with value semantics.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(s.numel(), fill) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
      throw DimensionError("negative tensor extent " + s.str());
  }
  Tensor(int n, int c, int h, int w, T fill = T(0)) : Tensor(Shape{n, c, h, w}, fill) {}

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  // FeatureMap convention: one sample, C x H x W.
  static Tensor feature(int c, int h, int w, T fill = T(0)) { return Tensor(1, c, h, w, fill); }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  Buffer<T>& vec() { return data_; }
  const Buffer<T>& vec() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  // Pointer to the H x W plane of (n, c).
  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class Rng>
  void fill_uniform(Rng& rng, T lo, T hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : data_) v = static_cast<T>(dist(rng));
  }

  template <class Rng>
  void fill_normal(Rng& rng, T mean, T stddev) {
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : data_) v = static_cast<T>(dist(rng));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(*this, o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  // Single sample `i` as a 1 x C x H x W tensor.
  Tensor sample(int i) const {
    Tensor out(1, shape_.c, shape_.h, shape_.w);
    const std::size_t per = static_cast<std::size_t>(shape_.c) * shape_.plane();
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(per * i), per, out.data());
    return out;
  }

  // Single channel `ch` of every sample as N x 1 x H x W.
  Tensor channel(int ch) const {
    Tensor out(shape_.n, 1, shape_.h, shape_.w);
    for (int b = 0; b < shape_.n; ++b)
      std::copy_n(plane(b, ch), shape_.plane(), out.plane(b, 0));
    return out;
  }

  static void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
      throw DimensionError(std::string(what) + ": shape " + a.shape().str() + " vs " +
                           b.shape().str());
  }

 private:
  Shape shape_{};
  Buffer<T> data_;
};

// Stacks single samples along N. All inputs must share C x H x W.
template <class T>
Tensor<T> stack_batch(std::span<const Tensor<T>> samples) {
  if (samples.empty()) throw DimensionError("stack_batch: empty list");
  const Shape s0 = samples.front().shape();
  int total = 0;
  for (const auto& s : samples) {
    if (s.c() != s0.c || s.h() != s0.h || s.w() != s0.w)
      throw DimensionError("stack_batch: mismatched sample " + s.shape().str());
    total += s.n();
  }
  Tensor<T> out(total, s0.c, s0.h, s0.w);
  T* dst = out.data();
  for (const auto& s : samples) dst = std::copy(s.vec().begin(), s.vec().end(), dst);
  return out;
}

// Concatenates along channels. All inputs must share N x H x W.
template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_channels: empty list");
  const Shape s0 = parts.front().shape();
  int channels = 0;
  for (const auto& p : parts) {
    if (p.n() != s0.n || p.h() != s0.h || p.w() != s0.w)
      throw DimensionError("concat_channels: mismatched part " + p.shape().str() + " vs " +
                           s0.str());
    channels += p.c();
  }
  Tensor<T> out(s0.n, channels, s0.h, s0.w);
  for (int b = 0; b < s0.n; ++b) {
    int offset = 0;
    for (const auto& p : parts) {
      std::copy_n(p.plane(b, 0), static_cast<std::size_t>(p.c()) * p.shape().plane(),
                  out.plane(b, offset));
      offset += p.c();
    }
  }
  return out;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T>::require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace semattnet
