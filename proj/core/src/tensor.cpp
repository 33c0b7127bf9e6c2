#include "l2aot/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace l2aot {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

static void validate_shape(const Shape& s) {
  for (int64_t d : s) {
    if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(s));
  }
}

Tensor Tensor::zeros(Shape shape) {
  validate_shape(shape);
  auto n = static_cast<size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::make_shared<const std::vector<double>>(n, 0.0), false);
}

Tensor Tensor::full(Shape shape, double value) {
  validate_shape(shape);
  auto n = static_cast<size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::make_shared<const std::vector<double>>(n, value), false);
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  return Tensor(std::move(shape), std::make_shared<const std::vector<double>>(std::move(data)), false);
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

double Tensor::scalar_value() const {
  if (numel() != 1) throw std::invalid_argument("scalar_value on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::with_requires_grad(bool flag) const {
  Tensor t = *this;
  t.requires_grad_ = flag;
  return t;
}

Tensor Tensor::reshaped(Shape shape) const {
  validate_shape(shape);
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                " changes element count");
  }
  return Tensor(std::move(shape), data_, requires_grad_);
}

Tensor Tensor::with_value(int64_t index, double value) const {
  if (index < 0 || index >= numel()) throw std::out_of_range("with_value index out of range");
  auto copy = std::make_shared<std::vector<double>>(*data_);
  (*copy)[static_cast<size_t>(index)] = value;
  return Tensor(shape_, std::move(copy), requires_grad_);
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) return false;
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (std::memcmp(&pa[i], &pb[i], sizeof(double)) != 0) return false;
  }
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) {
    throw std::invalid_argument("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

void ParamSet::add(std::string name, Tensor t) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  items_.emplace_back(std::move(name), std::move(t));
}

void ParamSet::set(const std::string& name, Tensor t) {
  for (auto& [n, v] : items_) {
    if (n == name) {
      if (!same_shape(v.shape(), t.shape())) {
        throw std::invalid_argument("parameter " + name + " shape change " + shape_str(v.shape()) +
                                    " -> " + shape_str(t.shape()));
      }
      v = std::move(t);
      return;
    }
  }
  throw std::invalid_argument("unknown parameter name: " + name);
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& [n, v] : items_) {
    if (n == name) return true;
  }
  return false;
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& [n, v] : items_) {
    if (n == name) return v;
  }
  throw std::invalid_argument("unknown parameter name: " + name);
}

int64_t ParamSet::total_numel() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

}  // namespace l2aot
