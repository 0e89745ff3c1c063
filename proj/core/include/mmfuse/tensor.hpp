#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mmfuse/error.hpp"
#include "mmfuse/rng.hpp"

namespace mmfuse {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d <= 0) throw ShapeError("shape: extents must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first access
  bool requires_grad = false;
};

// Shared-ownership handle over dense row-major storage. Copying a Tensor
// aliases the same data and gradient buffers.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false) {
    Tensor t;
    int64_t n = shape_numel(s);
    t.p_ = std::make_shared<TensorData<T>>();
    t.p_->shape = std::move(s);
    t.p_->value.assign(size_t(n), T(0));
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape s, T v, bool requires_grad = false) {
    Tensor t = zeros(std::move(s), requires_grad);
    for (T& x : t.p_->value) x = v;
    return t;
  }

  static Tensor from_vector(Shape s, std::vector<T> v, bool requires_grad = false) {
    if (shape_numel(s) != int64_t(v.size()))
      throw ShapeError("from_vector: element count does not match shape " + shape_str(s));
    Tensor t;
    t.p_ = std::make_shared<TensorData<T>>();
    t.p_->shape = std::move(s);
    t.p_->value = std::move(v);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Shape s, Rng& rng, T stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(s), requires_grad);
    for (T& x : t.p_->value) x = T(rng.normal()) * stddev;
    return t;
  }

  bool defined() const { return bool(p_); }
  const Shape& shape() const { return p_->shape; }
  int64_t rank() const { return int64_t(p_->shape.size()); }
  int64_t dim(int64_t i) const { return p_->shape.at(size_t(i)); }
  int64_t numel() const { return int64_t(p_->value.size()); }

  T* data() const { return p_->value.data(); }
  std::vector<T>& value_vector() const { return p_->value; }

  // Zero-filled on first access; accumulated into by backward closures.
  T* grad_data() const {
    if (p_->grad.empty()) p_->grad.assign(p_->value.size(), T(0));
    return p_->grad.data();
  }
  bool has_grad() const { return !p_->grad.empty(); }
  std::vector<T>& grad_vector() const {
    grad_data();
    return p_->grad;
  }
  void zero_grad() const {
    if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), T(0));
  }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool r) const { p_->requires_grad = r; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not scalar " + shape_str(shape()));
    return p_->value[0];
  }
  T grad_item() const {
    if (numel() != 1) throw ShapeError("grad_item: tensor is not scalar");
    return has_grad() ? p_->grad[0] : T(0);
  }

  bool all_finite() const {
    for (T x : p_->value)
      if (!std::isfinite(double(x))) return false;
    return true;
  }

  // Deep copy of values; gradient buffer starts empty.
  Tensor clone() const {
    Tensor t;
    t.p_ = std::make_shared<TensorData<T>>();
    t.p_->shape = p_->shape;
    t.p_->value = p_->value;
    t.p_->requires_grad = p_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& o) const { return p_ == o.p_; }

 private:
  std::shared_ptr<TensorData<T>> p_;
};

}  // namespace mmfuse
