#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace l2aot {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense fp64 array, row-major, immutable once constructed. Copies share
// storage; "mutation" helpers return fresh tensors.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool defined() const { return data_ != nullptr; }

  const double* data() const { return data_->data(); }
  std::span<const double> values() const { return {data_->data(), data_->size()}; }
  double at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  double scalar_value() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor with_requires_grad(bool flag) const;

  // Same storage, new shape (numel must match).
  Tensor reshaped(Shape shape) const;
  // Deep copy with one element replaced (finite-difference probing).
  Tensor with_value(int64_t index, double value) const;

  bool all_finite() const;
  bool same_data(const Tensor& other) const { return data_ == other.data_; }

 private:
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> data, bool rg)
      : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(rg) {}

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  bool requires_grad_ = false;
};

bool same_shape(const Shape& a, const Shape& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Insertion-ordered name -> Tensor map. Iteration order is the registration
// order, which keeps serialization and optimizer sweeps deterministic.
class ParamSet {
 public:
  void add(std::string name, Tensor t);
  void set(const std::string& name, Tensor t);  // existing name, same shape
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  size_t size() const { return items_.size(); }
  int64_t total_numel() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

}  // namespace l2aot
