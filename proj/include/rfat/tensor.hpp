#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfat/errors.hpp"

namespace rfat {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major N-d array with an optional gradient buffer.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets a GradTape node write gradients back into tensors owned elsewhere.
/// Use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : s_(std::make_shared<Storage>()) {
    const std::size_t n = numel_of(shape);
    s_->shape = std::move(shape);
    s_->data.assign(n, fill);
  }

  Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<Storage>()) {
    if (values.size() != numel_of(shape)) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const noexcept { return s_ != nullptr; }

  const Shape& shape() const { return storage().shape; }
  std::size_t rank() const { return storage().shape.size(); }
  std::size_t dim(std::size_t axis) const {
    const auto& sh = storage().shape;
    if (axis >= sh.size()) {
      throw ShapeError("Tensor::dim: axis " + std::to_string(axis) +
                       " out of range for " + shape_str(sh));
    }
    return sh[axis];
  }
  std::size_t numel() const { return storage().data.size(); }

  std::span<T> data() { return storage().data; }
  std::span<const T> data() const { return storage().data; }

  bool has_grad() const { return defined() && !s_->grad.empty(); }
  /// Gradient accumulator; writable through const handles since backward
  /// rules accumulate into inputs they only read otherwise.
  std::span<T> grad() const { return storage().grad; }

  /// Allocates a zero gradient buffer if none exists yet.
  void ensure_grad() const {
    const auto& s = storage();
    if (s.grad.size() != s.data.size()) s.grad.assign(s.data.size(), T(0));
  }
  void zero_grad() {
    auto& s = storage();
    if (!s.grad.empty()) std::fill(s.grad.begin(), s.grad.end(), T(0));
  }
  void drop_grad() { storage().grad.clear(); }

  bool requires_grad() const { return defined() && s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    storage().requires_grad = on;
    return *this;
  }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("Tensor::item on shape " + shape_str(shape()));
    }
    return storage().data[0];
  }

  T& at(std::initializer_list<std::size_t> idx) { return storage().data[offset(idx)]; }
  T at(std::initializer_list<std::size_t> idx) const { return storage().data[offset(idx)]; }

  /// Independent copy of the values; no gradient, requires_grad off.
  Tensor clone() const {
    Tensor out;
    out.s_ = std::make_shared<Storage>();
    out.s_->shape = shape();
    out.s_->data = storage().data;
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(numel());
    const auto src = data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(src[i]);
    return Tensor<U>(shape(), std::move(v));
  }

  bool same_storage(const Tensor& other) const noexcept { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    mutable std::vector<T> grad;
    bool requires_grad = false;
  };

  Storage& storage() {
    if (!s_) throw ShapeError("use of an undefined Tensor");
    return *s_;
  }
  const Storage& storage() const {
    if (!s_) throw ShapeError("use of an undefined Tensor");
    return *s_;
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    const auto& sh = storage().shape;
    if (idx.size() != sh.size()) {
      throw ShapeError("Tensor::at: rank mismatch for " + shape_str(sh));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= sh[axis]) {
        throw ShapeError("Tensor::at: index out of range for " + shape_str(sh));
      }
      off = off * sh[axis] + i;
      ++axis;
    }
    return off;
  }

  std::shared_ptr<Storage> s_;
};

}  // namespace rfat
