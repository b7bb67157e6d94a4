#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace pop {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Alignment is fixed so that vectorized kernels see
// the same data layout on every run, which keeps results bitwise reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

class GradientTape;
using NodeId = std::size_t;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles. The data is immutable and shared between
// copies; operations always produce new tensors. A tensor produced by an
// operation on a tape-tracked input is itself tracked and refers to its node
// on that tape. The tape must outlive every tensor that refers to it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer data);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::span<const double> values);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  // Size of the last dimension, and the product of the others.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  std::span<const double> data() const {
    return data_ ? std::span<const double>(*data_) : std::span<const double>();
  }
  const double* ptr() const { return data_->data(); }
  double operator[](std::size_t flat) const { return (*data_)[flat]; }
  double item() const;

  bool tracked() const { return tape_ != nullptr; }
  GradientTape* tape() const { return tape_; }
  NodeId node() const { return node_; }

  // Untracked copy sharing the same data.
  Tensor detach() const;
  // Same data viewed with a different shape; untracked.
  Tensor view(Shape shape) const;

 private:
  friend class GradientTape;

  Shape shape_;
  std::shared_ptr<const Buffer> data_;
  GradientTape* tape_ = nullptr;
  NodeId node_ = 0;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace pop
