#include "ads/param_vector.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ads {

namespace {

constexpr char kMagic[6] = {'A', 'D', 'S', 'P', 'V', '1'};

static_assert(std::endian::native == std::endian::little,
              "ParamVector binary I/O assumes a little-endian host");

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("ParamVector: truncated file");
  return v;
}

}  // namespace

ParamVector::ParamVector(std::vector<LayoutEntry> layout) : layout_(std::move(layout)) {
  size_t offset = 0;
  for (auto& e : layout_) {
    e.offset = offset;
    offset += e.numel();
  }
  values_.assign(offset, 0.0);
}

ParamVector ParamVector::zeros_like(const ParamVector& other) {
  ParamVector pv;
  pv.layout_ = other.layout_;
  pv.values_.assign(other.values_.size(), 0.0);
  return pv;
}

const LayoutEntry& ParamVector::entry(const std::string& name) const {
  for (const auto& e : layout_)
    if (e.name == name) return e;
  throw std::invalid_argument("ParamVector: no entry named '" + name + "'");
}

bool ParamVector::has_entry(const std::string& name) const {
  return std::any_of(layout_.begin(), layout_.end(),
                     [&](const LayoutEntry& e) { return e.name == name; });
}

std::span<double> ParamVector::slice(const std::string& name) {
  const auto& e = entry(name);
  return {values_.data() + e.offset, e.numel()};
}

std::span<const double> ParamVector::slice(const std::string& name) const {
  const auto& e = entry(name);
  return {values_.data() + e.offset, e.numel()};
}

Tensor ParamVector::tensor(const std::string& name) const {
  const auto& e = entry(name);
  Tensor t(e.shape);
  std::copy_n(values_.data() + e.offset, e.numel(), t.data.data());
  return t;
}

void ParamVector::set_tensor(const std::string& name, const Tensor& t) {
  const auto& e = entry(name);
  if (t.numel() != e.numel())
    throw std::invalid_argument("ParamVector::set_tensor: size mismatch for '" + name + "'");
  std::copy_n(t.data.data(), e.numel(), values_.data() + e.offset);
}

double ParamVector::l2_norm() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return std::sqrt(s);
}

void ParamVector::axpy(double alpha, const ParamVector& other) {
  if (!same_layout(other)) throw std::invalid_argument("ParamVector::axpy: layout mismatch");
  for (size_t i = 0; i < values_.size(); ++i) values_[i] += alpha * other.values_[i];
}

double ParamVector::dot(const ParamVector& other) const {
  if (!same_layout(other)) throw std::invalid_argument("ParamVector::dot: layout mismatch");
  double s = 0.0;
  for (size_t i = 0; i < values_.size(); ++i) s += values_[i] * other.values_[i];
  return s;
}

void ParamVector::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("ParamVector: cannot open " + path.string() + " for write");
  os.write(kMagic, sizeof(kMagic));
  write_raw<uint32_t>(os, static_cast<uint32_t>(layout_.size()));
  for (const auto& e : layout_) {
    write_raw<uint32_t>(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_raw<uint32_t>(os, static_cast<uint32_t>(e.shape.size()));
    for (int64_t d : e.shape) write_raw<uint64_t>(os, static_cast<uint64_t>(d));
  }
  os.write(reinterpret_cast<const char*>(values_.data()),
           static_cast<std::streamsize>(values_.size() * sizeof(double)));
  if (!os) throw std::runtime_error("ParamVector: write failed for " + path.string());
}

ParamVector ParamVector::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("ParamVector: cannot open " + path.string());
  char magic[6];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("ParamVector: bad magic in " + path.string());
  const auto n_entries = read_raw<uint32_t>(is);
  std::vector<LayoutEntry> layout(n_entries);
  for (auto& e : layout) {
    const auto name_len = read_raw<uint32_t>(is);
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    const auto ndim = read_raw<uint32_t>(is);
    e.shape.resize(ndim);
    for (auto& d : e.shape) d = static_cast<int64_t>(read_raw<uint64_t>(is));
  }
  ParamVector pv(std::move(layout));
  is.read(reinterpret_cast<char*>(pv.values_.data()),
          static_cast<std::streamsize>(pv.values_.size() * sizeof(double)));
  if (!is) throw std::runtime_error("ParamVector: truncated values in " + path.string());
  return pv;
}

ParamVector perturb(const ParamVector& params, const ParamVector& g, double epsilon, int sign) {
  if (!params.same_layout(g)) throw std::invalid_argument("perturb: layout mismatch");
  if (epsilon <= 0.0) throw std::invalid_argument("perturb: epsilon must be positive");
  if (sign != 1 && sign != -1) throw std::invalid_argument("perturb: sign must be +1 or -1");
  ParamVector out = params;
  out.axpy(sign * epsilon, g);
  return out;
}

}  // namespace ads
