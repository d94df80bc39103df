#pragma once

#include <cassert>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

namespace qoebd {

// Dense row-major float tensor. Owns its storage; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(std::vector<int> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    assert(data_.size() == count(shape_));
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> span() { return data_; }
  std::span<const float> span() const { return data_; }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  void reshape(std::vector<int> shape) {
    assert(count(shape) == data_.size());
    shape_ = std::move(shape);
  }
  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0f); }

  // Contiguous slice along the leading dimension.
  std::span<float> row(int i) {
    const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_[0]);
    return {data_.data() + stride * static_cast<std::size_t>(i), stride};
  }
  std::span<const float> row(int i) const {
    const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_[0]);
    return {data_.data() + stride * static_cast<std::size_t>(i), stride};
  }

  static std::size_t count(const std::vector<int>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

}  // namespace qoebd
