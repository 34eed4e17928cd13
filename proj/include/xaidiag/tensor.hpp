#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace xaidiag {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// Only rank 1 and rank 2 tensors are used by the engine. A zero extent is
/// allowed for the row dimension so that empty sequences can be represented.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  // Leading extent for rank 2, 1 for rank 1.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool flag) noexcept { requires_grad_ = flag; }

  bool has_grad() const noexcept { return has_grad_; }
  std::span<const double> grad() const noexcept { return grad_; }
  // Allocates a zero buffer on first use.
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad() {
    grad_.clear();
    has_grad_ = false;
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::vector<double> grad_;
  bool has_grad_ = false;
};

}  // namespace xaidiag
