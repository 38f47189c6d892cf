#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dalace/error.hpp"

namespace dalace {

// Dense row-major tensor. Storage is shared (cheap copies); every op
// allocates a fresh output, so shared buffers are never mutated except by
// the optimizer, which owns its parameters.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    store_ = std::make_shared<std::vector<T>>(numel(), T(0));
  }

  Tensor(std::vector<int64_t> shape, T fill) : shape_(std::move(shape)) {
    store_ = std::make_shared<std::vector<T>>(numel(), fill);
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor scalar(T v) {
    Tensor t(std::vector<int64_t>{1});
    t.data()[0] = v;
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<T> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    require(int64_t(values.size()) == t.numel(), ErrorCode::ShapeMismatch,
            "value count does not match shape");
    t.store_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  int64_t numel() const {
    int64_t n = 1;
    for (auto d : shape_) n *= d;
    return shape_.empty() ? 0 : n;
  }

  bool defined() const { return store_ != nullptr; }
  int rank() const { return int(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(int i) const { return shape_.at(size_t(i)); }

  T* data() { return store_->data(); }
  const T* data() const { return store_->data(); }
  T& operator[](int64_t i) { return (*store_)[size_t(i)]; }
  const T& operator[](int64_t i) const { return (*store_)[size_t(i)]; }

  // 4-D accessor (B, C, H, W); used by tests and reference oracles, the hot
  // paths index raw pointers directly.
  T& at(int64_t b, int64_t c, int64_t h, int64_t w) {
    return (*store_)[size_t(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at(int64_t b, int64_t c, int64_t h, int64_t w) const {
    return (*store_)[size_t(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.store_ = std::make_shared<std::vector<T>>(*store_);
    return t;
  }

  // Shares storage; only the shape metadata changes.
  Tensor reshaped(std::vector<int64_t> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    t.store_ = store_;
    require(t.numel() == numel(), ErrorCode::ShapeMismatch, "reshape changes element count");
    return t;
  }

  void fill(T v) { std::fill(store_->begin(), store_->end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t = Tensor<U>(shape_);
    for (int64_t i = 0; i < numel(); ++i) t[i] = U((*store_)[size_t(i)]);
    return t;
  }

  bool all_finite() const {
    for (const T& v : *store_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

 private:
  std::vector<int64_t> shape_;
  std::shared_ptr<std::vector<T>> store_;
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  require(a.same_shape(b), ErrorCode::ShapeMismatch,
          std::string(where) + ": " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace dalace
