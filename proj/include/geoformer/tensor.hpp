#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "geoformer/errors.hpp"

namespace geoformer::diff {

// Storage precision for checkpoints. Computation is always double; the flag
// controls how the payload is serialized.
enum class Dtype : uint8_t { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "float32" : "float64"; }

/// Dense row-major tensor of doubles.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<size_t> shape, Dtype dtype = Dtype::f64)
      : shape_(std::move(shape)), dtype_(dtype) {
    validate_shape();
    data_.assign(numel_from_shape(shape_), 0.0);
  }

  Tensor(std::vector<size_t> shape, std::vector<double> data, Dtype dtype = Dtype::f64)
      : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
    validate_shape();
    if (data_.size() != numel_from_shape(shape_))
      throw shape_error("tensor data size " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(std::vector<size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t extent(size_t axis) const { return shape_.at(axis); }
  size_t numel() const { return data_.size(); }
  Dtype dtype() const { return dtype_; }
  void set_dtype(Dtype d) { dtype_ = d; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  double& at(std::initializer_list<size_t> idx) { return data_[flat_index(idx)]; }
  double at(std::initializer_list<size_t> idx) const { return data_[flat_index(idx)]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static size_t numel_from_shape(const std::vector<size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), size_t{1}, std::multiplies<>());
  }

  static std::string shape_string(const std::vector<size_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

  std::string shape_string() const { return shape_string(shape_); }

 private:
  size_t flat_index(std::initializer_list<size_t> idx) const {
    size_t flat = 0;
    size_t axis = 0;
    for (size_t i : idx) {
      flat = flat * shape_[axis] + i;
      ++axis;
    }
    return flat;
  }

  void validate_shape() const {
    for (size_t e : shape_)
      if (e < 1) throw shape_error("tensor extents must be >= 1, got " + shape_string(shape_));
  }

  std::vector<size_t> shape_;
  std::vector<double> data_;
  Dtype dtype_ = Dtype::f64;
};

}  // namespace geoformer::diff
