#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <new>
#include <string>
#include <vector>

namespace topoforge::nn {

using Shape = std::vector<int>;

/// Storage starts on a 64-byte boundary so vectorized reductions split the
/// same way on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
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
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_size(const Shape& s);
std::string shape_string(const Shape& s);

/// Dense row-major tensor. Axis 0 is the batch axis wherever a batch exists.
template <class T>
struct NdArray {
  Shape shape;
  AlignedVector<T> data;

  NdArray() = default;
  explicit NdArray(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_size(shape), fill) {}
  /// Throws ShapeError when the value count does not match the shape.
  NdArray(Shape s, const std::vector<T>& values);
  NdArray(Shape s, AlignedVector<T> values);
  NdArray(Shape s, std::initializer_list<T> values) : NdArray(std::move(s), AlignedVector<T>(values)) {}

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] int dim(std::size_t axis) const { return shape.at(axis); }
  [[nodiscard]] int batch() const { return shape.empty() ? 0 : shape[0]; }
  [[nodiscard]] T* ptr() { return data.data(); }
  [[nodiscard]] const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  T operator[](std::size_t i) const { return data[i]; }

  [[nodiscard]] bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
  /// Same values, new shape of equal size. Throws ShapeError otherwise.
  [[nodiscard]] NdArray reshaped(Shape s) const;

  bool operator==(const NdArray&) const = default;
};

extern template struct NdArray<float>;
extern template struct NdArray<double>;

}  // namespace topoforge::nn
