#include "fedkappa/nn/tensor.hpp"

#include <string>

#include "fedkappa/common/error.hpp"

namespace fedkappa::nn {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {
void check_shape(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw Error(ErrorCode::InvalidShape, "tensor shape is empty");
  for (auto d : shape) {
    if (d == 0) throw Error(ErrorCode::InvalidShape, "tensor dimension of size 0");
  }
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_product(shape_), 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_product(shape_) != data_.size()) {
    throw Error(ErrorCode::InvalidShape, "shape product " + std::to_string(shape_product(shape_)) +
                                             " != data length " + std::to_string(data_.size()));
  }
}

}  // namespace fedkappa::nn
