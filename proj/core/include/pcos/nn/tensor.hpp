#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace pcos::nn {

using Shape = std::vector<int>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles. Image batches use NCHW.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  int dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  /// NCHW element access.
  double& at(int n, int c, int h, int w) { return values_[offset(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const { return values_[offset(n, c, h, w)]; }

  void fill(double value);
  /// this += other (same shape).
  void add(const Tensor& other);
  /// Reinterprets the data with a new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  std::vector<double> values_;
};

/// Throws ShapeError unless `t` has exactly `expected_rank` dimensions.
void require_rank(const Tensor& t, std::size_t expected_rank, const char* who);

}  // namespace pcos::nn
