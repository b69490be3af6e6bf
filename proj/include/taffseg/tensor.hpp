#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace taff {

using Shape = std::vector<int>;

// Eigen's vectorized reductions peel a different prefix depending on the
// buffer address, so heap alignment would leak into the summation order.
// Fixed 64-byte alignment keeps results independent of allocation history.
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
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles. Rank is not fixed; most code uses 1-4.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::span<const double> data);
  Tensor(Shape shape, Storage data);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int i, int j) { return data_[idx(i, j)]; }
  double at(int i, int j) const { return data_[idx(i, j)]; }
  double& at(int i, int j, int k) { return data_[idx(i, j, k)]; }
  double at(int i, int j, int k) const { return data_[idx(i, j, k)]; }
  double& at(int i, int j, int k, int l) { return data_[idx(i, j, k, l)]; }
  double at(int i, int j, int k, int l) const { return data_[idx(i, j, k, l)]; }

  Tensor reshaped(Shape shape) const;
  void fill(double v);
  bool all_finite() const;

 private:
  std::size_t idx(int i, int j) const {
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t idx(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t idx(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
  }

  Shape shape_;
  Storage data_;
};

}  // namespace taff
