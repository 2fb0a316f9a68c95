#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coe/error.hpp"

namespace coe {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major n-dimensional array. Element data is shared between
// copies; a tensor is immutable after construction except for its optional
// gradient accumulator. `node` ties the tensor to a position on one tape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_ = std::make_shared<std::vector<T>>(static_cast<std::size_t>(numel(shape_)), T(0));
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    check_extents(shape_);
    if (numel(shape_) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape_));
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    for (auto& e : *t.data_) e = v;
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  bool is_scalar() const { return size() == 1; }

  // Row view: leading extents collapsed, last extent is the row width.
  std::int64_t rows() const { return shape_.empty() ? 1 : size() / shape_.back(); }
  std::int64_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<T> data() { return {data_->data(), data_->size()}; }
  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  T& at(std::int64_t flat) { return (*data_)[static_cast<std::size_t>(flat)]; }
  T at(std::int64_t flat) const { return (*data_)[static_cast<std::size_t>(flat)]; }
  T item() const {
    if (!is_scalar()) throw UsageError("item: tensor " + shape_str(shape_) + " is not scalar");
    return (*data_)[0];
  }

  // --- gradient accumulator (leaves only) ----------------------------------
  void enable_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<T>>(data_->size(), T(0));
  }
  bool has_grad() const { return static_cast<bool>(grad_); }
  std::span<T> grad() { return {grad_->data(), grad_->size()}; }
  std::span<const T> grad() const { return {grad_->data(), grad_->size()}; }
  const std::shared_ptr<std::vector<T>>& grad_storage() const { return grad_; }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  // --- tape binding ---------------------------------------------------------
  // Node ids are only meaningful for the tape that assigned them; `owner`
  // disambiguates stale ids left over from earlier tapes.
  void bind(const void* tape, int node) {
    tape_ = tape;
    node_ = node;
  }
  int node_on(const void* tape) const { return tape_ == tape ? node_ : -1; }

 private:
  static void check_extents(const Shape& shape) {
    for (auto e : shape)
      if (e <= 0) throw ShapeError("tensor: non-positive extent in " + shape_str(shape));
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  const void* tape_ = nullptr;
  int node_ = -1;
};

}  // namespace coe
