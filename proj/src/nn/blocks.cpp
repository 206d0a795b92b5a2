// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/nn/blocks.hpp"

namespace occdiff::nn {

Conv3dLayer Conv3dLayer::create(ParamStore& store, const std::string& name, int cin, int cout,
                                int k, Rng& rng) {
  return create(store, name, cin, cout, k, k, k, rng);
}

Conv3dLayer Conv3dLayer::create(ParamStore& store, const std::string& name, int cin, int cout,
                                int kx, int ky, int kz, Rng& rng) {
  Conv3dLayer l;
  const int64_t fan_in = static_cast<int64_t>(cin) * kx * ky * kz;
  l.w = store.add(name + ".w", init_he(rng, {cout, cin, kx, ky, kz}, fan_in));
  l.b = store.add(name + ".b", init_zeros({cout}));
  return l;
}

Conv3dLayer Conv3dLayer::create_zero(ParamStore& store, const std::string& name, int cin, int cout,
                                     int k) {
  Conv3dLayer l;
  l.w = store.add(name + ".w", init_zeros({cout, cin, k, k, k}));
  l.b = store.add(name + ".b", init_zeros({cout}));
  return l;
}

LinearLayer LinearLayer::create(ParamStore& store, const std::string& name, int in, int out,
                                Rng& rng) {
  LinearLayer l;
  l.w = store.add(name + ".w", init_he(rng, {out, in}, in));
  l.b = store.add(name + ".b", init_zeros({out}));
  return l;
}

LinearLayer LinearLayer::create_zero(ParamStore& store, const std::string& name, int in, int out) {
  LinearLayer l;
  l.w = store.add(name + ".w", init_zeros({out, in}));
  l.b = store.add(name + ".b", init_zeros({out}));
  return l;
}

GroupNormLayer GroupNormLayer::create(ParamStore& store, const std::string& name, int channels) {
  GroupNormLayer l;
  l.gamma = store.add(name + ".gamma", init_ones({channels}));
  l.beta = store.add(name + ".beta", init_zeros({channels}));
  l.groups = norm_groups(channels);
  return l;
}

ResBlock3d ResBlock3d::create(ParamStore& store, const std::string& name, int channels, Rng& rng) {
  ResBlock3d b;
  b.gn1 = GroupNormLayer::create(store, name + ".gn1", channels);
  b.c1 = Conv3dLayer::create(store, name + ".c1", channels, channels, 3, rng);
  b.gn2 = GroupNormLayer::create(store, name + ".gn2", channels);
  b.c2 = Conv3dLayer::create(store, name + ".c2", channels, channels, 3, rng);
  return b;
}

Var ResBlock3d::operator()(const Var& x) const {
  Var h = c1(silu(gn1(x)));
  h = c2(silu(gn2(h)));
  return add(x, h);
}

int norm_groups(int channels) {
  for (int g = 8; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

}  // namespace occdiff::nn
