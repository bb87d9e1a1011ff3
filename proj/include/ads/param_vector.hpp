#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ads/tensor.hpp"

namespace ads {

struct LayoutEntry {
  std::string name;
  std::vector<int64_t> shape;
  size_t offset = 0;

  size_t numel() const { return Tensor::numel_of(shape); }
  bool operator==(const LayoutEntry&) const = default;
};

// Flattened model parameters with a layout descriptor. Offsets are contiguous
// in entry order; total length is the sum of entry element counts.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<LayoutEntry> layout);

  static ParamVector zeros_like(const ParamVector& other);

  const std::vector<LayoutEntry>& layout() const { return layout_; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  size_t size() const { return values_.size(); }

  bool same_layout(const ParamVector& other) const { return layout_ == other.layout_; }

  const LayoutEntry& entry(const std::string& name) const;
  bool has_entry(const std::string& name) const;
  std::span<double> slice(const std::string& name);
  std::span<const double> slice(const std::string& name) const;
  Tensor tensor(const std::string& name) const;
  void set_tensor(const std::string& name, const Tensor& t);

  double l2_norm() const;

  // this += alpha * other; layouts must match
  void axpy(double alpha, const ParamVector& other);
  double dot(const ParamVector& other) const;
  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  void save(const std::filesystem::path& path) const;
  static ParamVector load(const std::filesystem::path& path);

 private:
  std::vector<LayoutEntry> layout_;
  std::vector<double> values_;
};

// result[i] = params[i] + sign * epsilon * g[i]; inputs are untouched.
// sign must be +1 or -1 and epsilon > 0.
ParamVector perturb(const ParamVector& params, const ParamVector& g, double epsilon, int sign);

}  // namespace ads
