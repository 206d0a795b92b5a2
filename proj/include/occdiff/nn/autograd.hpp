// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode autodiff over Tensor. Each op records a node
// with its parents and a closure that accumulates into parent gradients.
// backward() walks nodes in reverse creation order, which is a valid
// topological order for a tape built during a single forward pass.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "occdiff/nn/tensor.hpp"

namespace occdiff::nn {

struct Node {
  Tensor val;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  int64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;  // reads this node's grad, accumulates into parents

  Tensor& ensure_grad();
};

// Value-semantics handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  // Leaf constructors.
  static Var constant(Tensor t);
  static Var param(Tensor t);

  bool defined() const { return node_ != nullptr; }
  const Tensor& val() const { return node_->val; }
  Tensor& mutable_val() { return node_->val; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& ensure_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() {
    if (node_ && node_->grad.defined()) node_->grad.fill(0.0f);
  }
  const std::shared_ptr<Node>& node() const { return node_; }

  const std::vector<int>& shape() const { return node_->val.shape(); }
  int dim(int i) const { return node_->val.dim(i); }
  int64_t numel() const { return node_->val.numel(); }

 private:
  std::shared_ptr<Node> node_;
};

// While one of these is alive, ops do not record the tape (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Runs reverse-mode accumulation from a scalar loss. Seeds d(loss)=1.
void backward(const Var& loss);

// ---- ops ----------------------------------------------------------------
// x: [N,C,X,Y,Z]; w: [Cout,Cin,kx,ky,kz] with odd kernel dims, stride 1,
// zero padding k/2; b: [Cout] or undefined Var for no bias.
Var conv3d(const Var& x, const Var& w, const Var& b);

// x: [N,K], w: [M,K], b: [M] or undefined. Returns [N,M].
Var linear(const Var& x, const Var& w, const Var& b);

// x: [N,C,spatial...]; gamma, beta: [C].
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);

Var silu(const Var& x);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, float s);
Var reshape(const Var& x, std::vector<int> shape);
Var stopgrad(const Var& x);

// val = quantized, gradient flows to pre-quantized input unchanged.
Var straight_through(const Var& pre, const Var& quantized);

// Concatenate along dim 1 (channels). All other dims must match.
Var concat_channels(const Var& a, const Var& b);

// Stack single-sample tensors ([1, rest...]) into a batch [N, rest...].
// The same Var may appear several times; its gradient accumulates once per
// occurrence.
Var stack_batch(const std::vector<Var>& xs);

// x: [N,C,X,Y,Z], integer factors.
Var avg_pool3d(const Var& x, int fx, int fy, int fz);
Var upsample3d(const Var& x, int fx, int fy, int fz);

// x: [N,C,X,Y] -> [N,C,X,Y,Z] by repetition along a new trailing z axis.
Var broadcast_z(const Var& x, int Z);

// b: [N,C], broadcast add over spatial dims of x: [N,C,spatial...].
Var add_channel_bias(const Var& x, const Var& b);

// y = x * (1 + s) + t with s, t: [N,C] broadcast over spatial dims.
Var channel_affine(const Var& x, const Var& s, const Var& t);

// Scaled dot-product attention. q: [N,Sq,D]; k,v: [N,Sk,D]. Returns
// softmax(q k^T / sqrt(D)) v with shape [N,Sq,D].
Var attention(const Var& q, const Var& k, const Var& v);

// rows of table ([K,c]) selected by idx (size P); backward scatter-adds.
Var gather_rows(const Var& table, const std::vector<int>& idx);

// x: [N,C,spatial...] -> [N*spatial, C]; position-major rows of channel
// vectors. channels_from_rows inverts given the original shape.
Var rows_from_channels(const Var& x);
Var channels_from_rows(const Var& rows, std::vector<int> shape);

// Scalar losses.
Var mean_all(const Var& x);
Var mse(const Var& a, const Var& b);

// logits: [N,C,spatial...], labels: flat size N*spatial in [0,C),
// class_weights: size C. Mean is weighted: sum_i w[y_i] nll_i / sum_i w[y_i].
Var weighted_cross_entropy(const Var& logits, const std::vector<uint8_t>& labels,
                           const std::vector<float>& class_weights);

}  // namespace occdiff::nn
