// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "occdiff/nn/autograd.hpp"
#include "occdiff/util/rng.hpp"

namespace occdiff::nn {

// Named trainable parameters, in registration order.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init);
  const std::vector<std::pair<std::string, Var>>& all() const { return params_; }
  Var find(const std::string& name) const;
  int64_t scalar_count() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Var>> params_;
};

// Initializers draw from the caller's Rng so model init is reproducible.
Tensor init_normal(Rng& rng, std::vector<int> shape, float stddev);
Tensor init_he(Rng& rng, std::vector<int> shape, int64_t fan_in);
Tensor init_zeros(std::vector<int> shape);
Tensor init_ones(std::vector<int> shape);
Tensor init_uniform(Rng& rng, std::vector<int> shape, float lo, float hi);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  // Applies one update from current grads; does not zero them.
  void step(ParamStore& store);
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Exponential moving average over every parameter; shadow weights are what
// checkpoints store for evaluation.
class Ema {
 public:
  Ema(const ParamStore& store, double decay);
  // Effective decay is min(decay, (1+t)/(10+t)) so early averages track the
  // live weights instead of the random init.
  void update(const ParamStore& store);
  const std::vector<Tensor>& shadow() const { return shadow_; }
  // Copies shadow values into the store (after snapshotting, if needed).
  void copy_to(ParamStore& store) const;
  std::vector<Tensor> snapshot(const ParamStore& store) const;
  static void restore(ParamStore& store, const std::vector<Tensor>& snap);

 private:
  double decay_;
  int64_t steps_ = 0;
  std::vector<Tensor> shadow_;
};

// Scales all grads so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(ParamStore& store, double max_norm);

}  // namespace occdiff::nn
