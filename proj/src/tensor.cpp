#include "rpt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace rpt {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 1) throw DimensionError("dimension sizes must be >= 1, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  if (shape_.empty()) throw DimensionError("tensor shape must have at least one axis");
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw DimensionError("tensor shape must have at least one axis");
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " does not match data length " +
                         std::to_string(data_.size()));
  }
}

Tensor Tensor::identity(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0f;
  return t;
}

Tensor Tensor::matrix(int rows, int cols, std::initializer_list<float> values) {
  return Tensor({rows, cols}, std::vector<float>(values));
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw DimensionError("axis out of range for shape " + shape_str(shape_));
  return shape_[axis];
}

float Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

std::span<float> Tensor::row(int r) {
  return std::span<float>(data_).subspan(static_cast<std::size_t>(r) * cols(), cols());
}

std::span<const float> Tensor::row(int r) const {
  return std::span<const float>(data_).subspan(static_cast<std::size_t>(r) * cols(), cols());
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

int argmax(std::span<const float> values) {
  if (values.empty()) throw ContractError("argmax of empty range");
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = static_cast<int>(i);
  }
  return best;
}

std::vector<int> argsort(std::span<const float> values) {
  std::vector<int> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return values[a] < values[b]; });
  return idx;
}

float l2_norm(std::span<const float> values) {
  double s = 0.0;
  for (float v : values) s += static_cast<double>(v) * v;
  return static_cast<float>(std::sqrt(s));
}

std::uint64_t checksum(std::span<const float> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (float v : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 4; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace rpt
