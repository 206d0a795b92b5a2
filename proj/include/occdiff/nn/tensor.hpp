// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "occdiff/util/error.hpp"

namespace occdiff::nn {

// Dense float32 tensor, row-major, value semantics with shared storage.
// Convention for 3D feature maps: [N, C, X, Y, Z] with Z fastest;
// for 2D maps: [N, C, X, Y]; for matrices: [R, C].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)),
        store_(std::make_shared<std::vector<float>>(count(shape_), 0.0f)) {}
  Tensor(std::vector<int> shape, std::vector<float> values)
      : shape_(std::move(shape)), store_(std::make_shared<std::vector<float>>(std::move(values))) {
    require(static_cast<int64_t>(store_->size()) == count(shape_), Errc::shape_mismatch,
            "tensor data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    std::fill(t.store_->begin(), t.store_->end(), v);
    return t;
  }
  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  bool defined() const { return store_ != nullptr; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  int64_t numel() const { return store_ ? static_cast<int64_t>(store_->size()) : 0; }

  float* data() { return store_->data(); }
  const float* data() const { return store_->data(); }
  float& operator[](int64_t i) { return (*store_)[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return (*store_)[static_cast<size_t>(i)]; }
  float item() const {
    require(numel() == 1, Errc::shape_mismatch, "item() on non-scalar tensor");
    return (*store_)[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Shares storage.
  Tensor reshaped(std::vector<int> shape) const {
    require(count(shape) == numel(), Errc::shape_mismatch, "reshape changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.store_ = store_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.store_ = std::make_shared<std::vector<float>>(*store_);
    return t;
  }

  void fill(float v) { std::fill(store_->begin(), store_->end(), v); }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) s += (i ? "," : "") + std::to_string(shape_[i]);
    return s + "]";
  }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      require(d >= 0, Errc::shape_mismatch, "negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<float>> store_;
};

}  // namespace occdiff::nn
