#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ads {

// Dense row-major double tensor. Rank 1 and 2 cover everything the tiny
// transformer needs; the layout descriptor in ParamVector handles naming.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
  Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v) {
    auto n = static_cast<int64_t>(v.size());
    return Tensor({n}, std::move(v));
  }

  static size_t numel_of(const std::vector<int64_t>& s) {
    size_t n = 1;
    for (auto d : s) n *= static_cast<size_t>(d);
    return n;
  }

  size_t numel() const { return data.size(); }
  int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
  double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;
};

// Numerically stable log-softmax (max subtraction). Throws
// std::invalid_argument on an empty input.
std::vector<double> log_softmax(const std::vector<double>& logits);

// In-place variant over a raw row; used by the model forward paths.
void log_softmax_inplace(double* row, size_t n);

}  // namespace ads
