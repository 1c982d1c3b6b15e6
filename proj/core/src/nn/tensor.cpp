#include "pcos/nn/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "pcos/errors.hpp"

namespace pcos::nn {

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != element_count(shape_)) {
    throw ShapeError("tensor of shape " + shape_string(shape_) + " needs " +
                     std::to_string(element_count(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
}

void Tensor::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

void Tensor::add(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw ShapeError("cannot add " + shape_string(other.shape_) + " to " + shape_string(shape_));
  }
  std::transform(values_.begin(), values_.end(), other.values_.begin(), values_.begin(),
                 std::plus<>());
}

Tensor Tensor::reshaped(Shape shape) const {
  if (element_count(shape) != values_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), values_);
}

void require_rank(const Tensor& t, std::size_t expected_rank, const char* who) {
  if (t.rank() != expected_rank) {
    throw ShapeError(std::string(who) + " expects a rank-" + std::to_string(expected_rank) +
                     " tensor, got " + shape_string(t.shape()));
  }
}

}  // namespace pcos::nn
