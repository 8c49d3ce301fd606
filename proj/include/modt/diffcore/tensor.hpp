#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "modt/errors.hpp"

namespace modt::diff {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Eigen peels unaligned heads off vectorized
/// loops, so results would otherwise depend on where the heap put a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
bool operator==(const Buffer<T>& a, const std::vector<T>& b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major tensor. `grad` is empty until a backward pass (or
/// `ensure_grad`) allocates it, and then always matches `values` in length.
template <class T>
struct Tensor {
  Shape shape;
  Buffer<T> values;
  bool requires_grad = false;
  Buffer<T> grad;

  Tensor() = default;
  Tensor(Shape s, Buffer<T> v, bool rg = false) : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
    check_shape();
  }
  Tensor(Shape s, std::initializer_list<T> v, bool rg = false)
      : shape(std::move(s)), values(v), requires_grad(rg) {
    check_shape();
  }
  Tensor(Shape s, const std::vector<T>& v, bool rg = false)
      : shape(std::move(s)), values(v.begin(), v.end()), requires_grad(rg) {
    check_shape();
  }

  static Tensor zeros(Shape s, bool rg = false) {
    const std::size_t n = shape_numel(s);
    return Tensor(std::move(s), Buffer<T>(n, T(0)), rg);
  }

  std::size_t numel() const noexcept { return values.size(); }  std::size_t rank() const noexcept { return shape.size(); }
  /// Size of the last dimension (1 for a scalar).
  std::size_t cols() const noexcept { return shape.empty() ? 1 : shape.back(); }
  /// Product of all leading dimensions.
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : numel() / cols(); }

  bool has_grad() const noexcept { return !grad.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
  void clear_grad() { grad.clear(); }

  T item() const {
    if (numel() != 1) throw ContractViolation("item() on tensor of shape " + shape_string(shape));
    return values[0];
  }

 private:
  void check_shape() const {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_string(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
  }
};

}  // namespace modt::diff
