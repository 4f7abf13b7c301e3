#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "m4fuse/errors.hpp"

namespace m4fuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

/// Spatial extent of a rank-5 volume.
struct Dims3 {
  std::size_t d = 1, h = 1, w = 1;
  std::size_t voxels() const { return d * h * w; }
  bool operator==(const Dims3&) const = default;
};

/// Dense row-major array of scalars. Rank-5 tensors are volumes laid out as
/// (B, C, D, H, W) with W fastest; rank-3 tensors are sequences (B, L, C).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_))
      throw ShapeError("buffer length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  static Tensor volume(std::size_t b, std::size_t c, std::size_t d, std::size_t h, std::size_t w, T fill = T{}) {
    return Tensor(Shape{b, c, d, h, w}, fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Rank-5 element access.
  T& at(std::size_t b, std::size_t c, std::size_t d, std::size_t h, std::size_t w) {
    return data_[offset5(b, c, d, h, w)];
  }
  const T& at(std::size_t b, std::size_t c, std::size_t d, std::size_t h, std::size_t w) const {
    return data_[offset5(b, c, d, h, w)];
  }

  std::size_t batch() const { return shape_.at(0); }
  std::size_t channels() const { return shape_.at(1); }
  Dims3 spatial() const {
    require_rank(5, "spatial()");
    return {shape_[2], shape_[3], shape_[4]};
  }

  void require_rank(std::size_t r, const char* where) const {
    if (rank() != r)
      throw ShapeError(std::string(where) + ": expected rank " + std::to_string(r) + ", got shape " +
                       shape_str(shape_));
  }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size()) throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  void check_dims() const {
    for (auto d : shape_)
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape_));
  }

  std::size_t offset5(std::size_t b, std::size_t c, std::size_t d, std::size_t h, std::size_t w) const {
    return (((b * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m{};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max<T>(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace m4fuse
