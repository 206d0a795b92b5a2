// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small reusable layer bundles. Each create() registers its parameters in
// the given store under "<name>." prefixed entries, so checkpoints address
// weights by stable names.

#pragma once

#include <string>

#include "occdiff/nn/autograd.hpp"
#include "occdiff/nn/params.hpp"
#include "occdiff/util/rng.hpp"

namespace occdiff::nn {

// 3D convolution, odd kernel, stride 1, zero padding k/2.
struct Conv3dLayer {
  Var w, b;
  static Conv3dLayer create(ParamStore& store, const std::string& name, int cin, int cout, int k,
                            Rng& rng);
  static Conv3dLayer create(ParamStore& store, const std::string& name, int cin, int cout, int kx,
                            int ky, int kz, Rng& rng);
  // Zero weights and bias; used where the layer must start as a no-op.
  static Conv3dLayer create_zero(ParamStore& store, const std::string& name, int cin, int cout,
                                 int k);
  Var operator()(const Var& x) const { return conv3d(x, w, b); }
};

struct LinearLayer {
  Var w, b;
  static LinearLayer create(ParamStore& store, const std::string& name, int in, int out, Rng& rng);
  static LinearLayer create_zero(ParamStore& store, const std::string& name, int in, int out);
  Var operator()(const Var& x) const { return linear(x, w, b); }
};

struct GroupNormLayer {
  Var gamma, beta;
  int groups = 1;
  static GroupNormLayer create(ParamStore& store, const std::string& name, int channels);
  Var operator()(const Var& x) const { return group_norm(x, gamma, beta, groups); }
};

// Pre-activation residual block: x + conv(silu(gn(conv(silu(gn(x)))))).
struct ResBlock3d {
  GroupNormLayer gn1, gn2;
  Conv3dLayer c1, c2;
  static ResBlock3d create(ParamStore& store, const std::string& name, int channels, Rng& rng);
  Var operator()(const Var& x) const;
};

// Largest divisor of channels that is <= 8; keeps group sizes sane for
// narrow layers.
int norm_groups(int channels);

}  // namespace occdiff::nn
