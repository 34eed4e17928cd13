#include "xaidiag/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "xaidiag/error.hpp"

namespace xaidiag {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw Error(ErrorCode::kShapeMismatch, "tensor data length does not match shape");
  }
}

std::size_t Tensor::rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

std::span<double> Tensor::mutable_grad() {
  if (!has_grad_) {
    grad_.assign(data_.size(), 0.0);
    has_grad_ = true;
  }
  return grad_;
}

void Tensor::zero_grad() {
  auto g = mutable_grad();
  std::fill(g.begin(), g.end(), 0.0);
}

}  // namespace xaidiag
