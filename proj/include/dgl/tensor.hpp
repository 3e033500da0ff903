#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgl {

/// Batch x channels x height x width extents.
struct Shape {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t numel() const { return batch * channels * height * width; }
  std::size_t per_sample() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense 4-D array. Gradients live in Parameter, not here.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return ((b * shape_.channels + c) * shape_.height + y) * shape_.width + x;
  }
  T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) { return data_[offset(b, c, y, x)]; }
  const T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(b, c, y, x)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T{0}); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  /// Copies samples [first, first+count) into a new tensor.
  Tensor slice_batch(std::size_t first, std::size_t count) const {
    Shape s = shape_;
    s.batch = count;
    const auto per = shape_.per_sample();
    std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(first * per),
                       data_.begin() + static_cast<std::ptrdiff_t>((first + count) * per));
    return Tensor(s, std::move(out));
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

inline std::string Shape::str() const {
  return std::to_string(batch) + "x" + std::to_string(channels) + "x" + std::to_string(height) + "x" +
         std::to_string(width);
}

}  // namespace dgl
