#include "ads/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ads {

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

void log_softmax_inplace(double* row, size_t n) {
  double mx = row[0];
  for (size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) sum += std::exp(row[i] - mx);
  const double lse = mx + std::log(sum);
  for (size_t i = 0; i < n; ++i) row[i] -= lse;
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("log_softmax: empty input");
  std::vector<double> out = logits;
  log_softmax_inplace(out.data(), out.size());
  return out;
}

}  // namespace ads
