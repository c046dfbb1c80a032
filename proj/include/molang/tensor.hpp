#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace molang {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// Two jobs: (1) default-initialize elements, so resize() on float leaves
// memory untouched and fully-overwritten op outputs skip the zero-fill pass;
// (2) align every buffer to 64 bytes, so Eigen's SIMD kernels always take the
// same peeling path and repeated forward passes are bit-identical regardless
// of where the heap placed the buffer.
template <class T>
struct NoInitAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  NoInitAllocator() = default;
  template <class U>
  NoInitAllocator(const NoInitAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <class U>
  bool operator==(const NoInitAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace detail

using FloatBuffer = std::vector<float, detail::NoInitAllocator<float>>;

// Dense row-major f32 tensor.
struct Tensor {
  std::vector<int64_t> shape;
  FloatBuffer data;

  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(static_cast<size_t>(numel_of(t.shape)), 0.0f);
    return t;
  }

  // contents are indeterminate; caller must overwrite every element
  static Tensor uninit(std::vector<int64_t> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.resize(static_cast<size_t>(numel_of(t.shape)));
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, float value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
  }

  static Tensor scalar(float value) { return full({1}, value); }

  static Tensor from(std::vector<int64_t> shape, const std::vector<float>& values) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(values.begin(), values.end());
    if (static_cast<int64_t>(t.data.size()) != numel_of(t.shape)) {
      throw ShapeError("Tensor::from: data length does not match shape");
    }
    return t;
  }

  int64_t numel() const { return numel_of(shape); }
  int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape.size()); }

  float item() const {
    if (numel() != 1) throw ShapeError("Tensor::item: not a scalar");
    return data[0];
  }

  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  static int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
      if (e <= 0) throw ShapeError("Tensor: non-positive extent");
      n *= e;
    }
    return n;
  }
};

std::string shape_str(const std::vector<int64_t>& shape);

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }
}

}  // namespace molang
