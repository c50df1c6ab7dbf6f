#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "encvit/error.hpp"

namespace encvit {

using Shape = std::vector<std::size_t>;

/// Allocator with 64-byte alignment. Vectorized reductions peel differently
/// depending on the start address, so numeric buffers need a fixed alignment
/// for results to be reproducible run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major array. Images are {C, H, W}; batches are {N, C, H, W}.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, const std::vector<T>& data)
      : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

  Tensor(Shape shape, AlignedVector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    detail::require(data_.size() == shape_size(shape_), "tensor",
                    "data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const AlignedVector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Sub-tensor `index` along the leading axis, copied.
  Tensor slice(std::size_t index) const {
    detail::require(rank() >= 1 && index < shape_[0], "tensor",
                    "slice index out of range");
    Shape inner(shape_.begin() + 1, shape_.end());
    const std::size_t n = shape_size(inner);
    return Tensor(std::move(inner),
                  AlignedVector<T>(data_.begin() + index * n,
                                   data_.begin() + (index + 1) * n));
  }

  std::span<T> row(std::size_t index) {
    const std::size_t n = size() / shape_.at(0);
    return std::span<T>(data_).subspan(index * n, n);
  }
  std::span<const T> row(std::size_t index) const {
    const std::size_t n = size() / shape_.at(0);
    return std::span<const T>(data_).subspan(index * n, n);
  }

  /// Same data, new shape of equal size.
  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    AlignedVector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      detail::require(e > 0, "tensor", "extents must be positive");
  }

  Shape shape_;
  AlignedVector<T> data_;
};

/// Stack equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  detail::require(!items.empty(), "tensor", "cannot stack zero tensors");
  Shape shape = items.front().shape();
  AlignedVector<T> data;
  data.reserve(items.size() * items.front().size());
  for (const auto& t : items) {
    detail::require(t.shape() == shape, "tensor", "stack shape mismatch");
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  shape.insert(shape.begin(), items.size());
  return Tensor<T>(std::move(shape), std::move(data));
}

/// Channel/height/width of an image.
struct ImageGeometry {
  std::uint32_t channels = 3;
  std::uint32_t height = 32;
  std::uint32_t width = 32;

  std::size_t pixels() const {
    return std::size_t{channels} * height * width;
  }
  Shape shape() const { return {channels, height, width}; }
  std::string to_string() const;

  friend bool operator==(const ImageGeometry&, const ImageGeometry&) = default;
};

/// Parse "CxHxW", e.g. "3x32x32".
ImageGeometry parse_geometry(const std::string& text);

/// Partition of an image into non-overlapping M x M blocks. Inside a block,
/// pixels are flattened channel-major, then row-major: index = c*M*M + i*M + j.
/// Blocks are enumerated row-major over the grid. Both the encryption and
/// the patch embedding use this one ordering.
struct BlockGrid {
  ImageGeometry image;
  std::uint32_t block = 4;

  BlockGrid(ImageGeometry geometry, std::uint32_t block_size);

  std::uint32_t blocks_x() const { return image.width / block; }
  std::uint32_t blocks_y() const { return image.height / block; }
  std::size_t num_blocks() const {
    return std::size_t{blocks_x()} * blocks_y();
  }
  /// Pixels per block, C*M*M.
  std::size_t block_pixels() const {
    return std::size_t{image.channels} * block * block;
  }
  /// Offset into a {C,H,W} image of pixel k of block b.
  std::size_t offset(std::size_t b, std::size_t k) const;
};

}  // namespace encvit
