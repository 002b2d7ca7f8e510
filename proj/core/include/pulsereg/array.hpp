#pragma once

// Dense row-major arrays with a runtime shape. Images and fields use the
// channels-first layout C x D x H x W, with W (x) varying fastest.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pulsereg/error.hpp"

namespace pulsereg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         [](std::int64_t a, std::int64_t b) { return a * b; });
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
struct Array {
  Shape shape;
  std::vector<T> values;

  Array() = default;
  explicit Array(Shape s, T fill = T{}) : shape(std::move(s)), values(static_cast<std::size_t>(numel(shape)), fill) {}
  Array(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (static_cast<std::int64_t>(values.size()) != numel(shape))
      throw InvalidArgument("Array: value count " + std::to_string(values.size()) +
                            " does not match shape " + to_string(shape));
  }

  [[nodiscard]] std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
  [[nodiscard]] std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
  [[nodiscard]] std::int64_t dim(std::size_t i) const { return shape.at(i); }

  T* data() { return values.data(); }
  const T* data() const { return values.data(); }

  // 4-D accessors (C x D x H x W).
  T& operator()(std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) {
    return values[static_cast<std::size_t>(((c * shape[1] + z) * shape[2] + y) * shape[3] + x)];
  }
  const T& operator()(std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) const {
    return values[static_cast<std::size_t>(((c * shape[1] + z) * shape[2] + y) * shape[3] + x)];
  }

  /// Number of voxels per channel for a 4-D array.
  [[nodiscard]] std::int64_t voxels() const { return shape[1] * shape[2] * shape[3]; }

  template <typename U>
  [[nodiscard]] Array<U> cast() const {
    Array<U> out;
    out.shape = shape;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

/// Copy of channels [first, first + count) of a 4-D array.
template <typename T>
Array<T> channel_slice(const Array<T>& a, std::int64_t first, std::int64_t count) {
  if (a.rank() != 4 || first < 0 || first + count > a.dim(0))
    throw InvalidArgument("channel_slice: channels [" + std::to_string(first) + ", " +
                          std::to_string(first + count) + ") out of range for " + to_string(a.shape));
  Array<T> out(Shape{count, a.dim(1), a.dim(2), a.dim(3)});
  const auto v = a.voxels();
  std::copy(a.values.begin() + first * v, a.values.begin() + (first + count) * v, out.values.begin());
  return out;
}

}  // namespace pulsereg
