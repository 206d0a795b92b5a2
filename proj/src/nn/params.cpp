// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/nn/params.hpp"

#include <algorithm>
#include <cmath>

#include "occdiff/nn/kernels.hpp"
#include "occdiff/util/error.hpp"

namespace occdiff::nn {

Var ParamStore::add(const std::string& name, Tensor init) {
  for (const auto& [n, v] : params_)
    require(n != name, Errc::invalid_argument, "duplicate parameter name: " + name);
  Var v = Var::param(std::move(init));
  params_.emplace_back(name, v);
  return v;
}

Var ParamStore::find(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  raise(Errc::invalid_argument, "no such parameter: " + name);
}

int64_t ParamStore::scalar_count() const {
  int64_t n = 0;
  for (const auto& [name, v] : params_) n += v.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, v] : params_) v.zero_grad();
}

Tensor init_normal(Rng& rng, std::vector<int> shape, float stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normalf() * stddev;
  return t;
}

Tensor init_he(Rng& rng, std::vector<int> shape, int64_t fan_in) {
  return init_normal(rng, std::move(shape),
                     std::sqrt(2.0f / static_cast<float>(std::max<int64_t>(1, fan_in))));
}

Tensor init_zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor init_ones(std::vector<int> shape) { return Tensor::full(std::move(shape), 1.0f); }

Tensor init_uniform(Rng& rng, std::vector<int> shape, float lo, float hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniformf() * (hi - lo) + lo;
  return t;
}

void Adam::step(ParamStore& store) {
  auto& params = store.all();
  if (m_.empty()) {
    for (const auto& [name, v] : params) {
      m_.emplace_back(v.val().shape());
      v_.emplace_back(v.val().shape());
    }
  }
  require(m_.size() == params.size(), Errc::invalid_argument, "optimizer/store size mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t p = 0; p < params.size(); ++p) {
    Var v = params[p].second;
    if (!v.grad().defined()) continue;
    float* w = v.mutable_val().data();
    const float* g = v.grad().data();
    float* m = m_[p].data();
    float* ve = v_[p].data();
    const int64_t n = v.numel();
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    for (int64_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      ve[i] = b2 * ve[i] + (1.0f - b2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = ve[i] / bc2;
      w[i] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

Ema::Ema(const ParamStore& store, double decay) : decay_(decay) {
  for (const auto& [name, v] : store.all()) shadow_.push_back(v.val().clone());
}

void Ema::update(const ParamStore& store) {
  const auto& params = store.all();
  require(params.size() == shadow_.size(), Errc::invalid_argument, "ema/store size mismatch");
  ++steps_;
  const double warm = (1.0 + steps_) / (10.0 + steps_);
  const float d = static_cast<float>(std::min(decay_, warm));
  for (size_t p = 0; p < params.size(); ++p) {
    float* s = shadow_[p].data();
    const float* w = params[p].second.val().data();
    for (int64_t i = 0; i < shadow_[p].numel(); ++i) s[i] = d * s[i] + (1.0f - d) * w[i];
  }
}

void Ema::copy_to(ParamStore& store) const {
  const auto& params = store.all();
  require(params.size() == shadow_.size(), Errc::invalid_argument, "ema/store size mismatch");
  for (size_t p = 0; p < params.size(); ++p) {
    Var v = params[p].second;
    std::copy_n(shadow_[p].data(), shadow_[p].numel(), v.mutable_val().data());
  }
}

std::vector<Tensor> Ema::snapshot(const ParamStore& store) const {
  std::vector<Tensor> snap;
  for (const auto& [name, v] : store.all()) snap.push_back(v.val().clone());
  return snap;
}

void Ema::restore(ParamStore& store, const std::vector<Tensor>& snap) {
  const auto& params = store.all();
  require(params.size() == snap.size(), Errc::invalid_argument, "snapshot/store size mismatch");
  for (size_t p = 0; p < params.size(); ++p) {
    Var v = params[p].second;
    std::copy_n(snap[p].data(), snap[p].numel(), v.mutable_val().data());
  }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, v] : store.all()) {
    if (!v.grad().defined()) continue;
    sq += kern::det_dot(v.grad().data(), v.grad().data(), v.numel());
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& [name, v] : store.all()) {
      if (!v.grad().defined()) continue;
      Tensor g = v.grad();
      kern::scale(g.data(), s, g.numel(), g.data());
    }
  }
  return norm;
}

}  // namespace occdiff::nn
