#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rpt {

/// Raised when operand shapes do not conform for an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);

/// Dense row-major float32 tensor. Plain value type; autodiff lives in Graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor scalar(float v) { return Tensor({1}, {v}); }
  static Tensor identity(int n);
  static Tensor matrix(int rows, int cols, std::initializer_list<float> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  /// Leading extent for 2-D use; vectors are treated as a single row.
  int rows() const { return shape_.size() >= 2 ? shape_[0] : 1; }
  int cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  float item() const;

  std::span<float> row(int r);
  std::span<const float> row(int r) const;

  Tensor reshaped(Shape shape) const;
  void fill(float v);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

std::size_t shape_numel(const Shape& shape);

// Non-differentiable helpers.

/// Index of the maximum element; ties resolve to the lowest index.
int argmax(std::span<const float> values);
/// Indices sorting `values` ascending; stable, so ties keep index order.
std::vector<int> argsort(std::span<const float> values);
float l2_norm(std::span<const float> values);
/// FNV-1a over the raw float bytes; used for bit-exact checksums.
std::uint64_t checksum(std::span<const float> values, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace rpt
