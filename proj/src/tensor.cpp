#include "reet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace reet {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::from(std::initializer_list<float> values) {
  return Tensor(Shape{static_cast<int>(values.size())}, std::vector<float>(values));
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw std::invalid_argument("stack: no tensors");
  Shape shape = items.front().shape();
  shape.insert(shape.begin(), static_cast<int>(items.size()));
  std::vector<float> data;
  data.reserve(shape_numel(shape));
  for (const Tensor& t : items) {
    if (t.shape() != items.front().shape()) throw std::invalid_argument("stack: shape mismatch");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

Tensor unstack_one(const Tensor& batch, int i) {
  if (batch.rank() < 2 || i < 0 || i >= batch.dim(0)) throw std::out_of_range("unstack_one: bad index");
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_numel(inner);
  auto first = batch.data().begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(i));
  return Tensor(std::move(inner), std::vector<float>(first, first + static_cast<std::ptrdiff_t>(n)));
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace reet
