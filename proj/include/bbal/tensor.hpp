#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bbal {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Every dimension is positive and the
/// value count always equals the product of the shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor vector(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  const double* data() const { return values_.data(); }
  double* data() { return values_.data(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  /// Element access for rank-2 tensors.
  double at(std::size_t row, std::size_t col) const { return values_[row * shape_[1] + col]; }
  double& at(std::size_t row, std::size_t col) { return values_[row * shape_[1] + col]; }

  /// Row view of a tensor whose leading axis indexes samples.
  std::span<const double> row(std::size_t i) const;
  std::span<double> row(std::size_t i);
  std::size_t row_size() const { return shape_.empty() ? 0 : size() / shape_[0]; }

  Tensor reshaped(Shape shape) const;
  /// Copies rows `indices` of the leading axis into a new tensor.
  Tensor gather_rows(std::span<const std::size_t> indices) const;

  bool all_finite() const;
  /// Throws invalid_input naming `where` if any entry is NaN or infinite.
  void require_finite(std::string_view where) const;

  void fill(double value);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Dense kernels over rank-2 tensors. Each output row depends only on the
// matching input row, so batched and per-sample results are bit-identical.

/// [m x k] * [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a^T * b for a [k x m], b [k x n]
Tensor matmul_transpose_a(const Tensor& a, const Tensor& b);
/// a * b^T for a [m x k], b [n x k]
Tensor matmul_transpose_b(const Tensor& a, const Tensor& b);

double l1_distance(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
/// Index of the largest entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> values);

/// FNV-1a over the raw bytes of every value, in order.
std::uint64_t checksum(std::span<const double> values, std::uint64_t seed = 1469598103934665603ull);

}  // namespace bbal
