// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <vector>

#include "occdiff/diffusion/denoiser.hpp"
#include "occdiff/nn/autograd.hpp"
#include "occdiff/util/error.hpp"

using namespace occdiff;
using namespace occdiff::diffusion;
namespace fs = std::filesystem;

namespace {

DenoiserConfig tiny_config(ConditioningMode mode = ConditioningMode::kConcat) {
  DenoiserConfig c;
  c.latent_channels = 4;
  c.bev_classes = 5;
  c.bev_height = 16;
  c.bev_width = 16;
  c.bev_downsample_factor = 4;
  c.bev_embed_channels = 8;
  c.base_channels = 8;
  c.channel_multipliers = {1, 2};
  c.res_blocks_per_level = 1;
  c.attention_levels = {1};
  c.time_embed_width = 16;
  c.conditioning_mode = mode;
  return c;
}

Tensor random_latent(Rng& rng, std::vector<int> shape) {
  Tensor t(std::move(shape));
  rng.fill_normal({t.data(), static_cast<size_t>(t.numel())});
  return t;
}

voxel::BEVLayout random_bev(int H, int W, int classes, uint64_t seed) {
  voxel::BEVLayout b = voxel::BEVLayout::background(H, W, classes, 0.8f);
  Rng rng(seed);
  for (auto& l : b.labels) l = static_cast<uint8_t>(rng.uniform_int(classes));
  return b;
}

// Zero-initialized layers make a fresh model predict exactly zero; give every
// parameter a small random value so behavioral probes see a nonzero function.
void randomize_params(nn::ParamStore& store, uint64_t seed) {
  Rng rng(seed);
  for (const auto& [name, var] : store.all()) {
    nn::Var v = var;
    float* p = v.mutable_val().data();
    for (int64_t i = 0; i < v.numel(); ++i) p[i] = 0.1f * rng.normalf();
  }
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("config validates and round-trips through json") {
  DenoiserConfig c = tiny_config();
  c.validate();
  DenoiserConfig got = DenoiserConfig::from_json(c.to_json());
  CHECK(got.to_json() == c.to_json());

  DenoiserConfig bad = tiny_config();
  bad.attention_levels = {5};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_config();
  bad.time_embed_width = 15;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_config();
  bad.bev_height = 18;  // not a multiple of the downsample factor
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_config(ConditioningMode::kNone);
  bad.bev_height = 18;  // layout fields are ignored for unconditional models
  bad.validate();

  CHECK(conditioning_mode_from_string("cross_attention") == ConditioningMode::kCrossAttention);
  CHECK_THROWS_AS(conditioning_mode_from_string("nope"), Error);
}

TEST_CASE("embed_bev maps layout dims to latent horizontal dims") {
  DenoiserConfig big = tiny_config();
  big.bev_height = 192;
  big.bev_width = 192;
  Denoiser model(big, 1);
  auto e = model.embed_bev(random_bev(192, 192, 5, 7));
  CHECK(e.values.shape() == std::vector<int>{1, 8, 48, 48});

  Denoiser small(tiny_config(), 1);
  auto e2 = small.embed_bev(random_bev(16, 16, 5, 7));
  CHECK(e2.values.shape() == std::vector<int>{1, 8, 4, 4});

  // Same layout twice gives the identical embedding.
  auto b = random_bev(16, 16, 5, 9);
  CHECK(same_values(small.embed_bev(b).values.val(), small.embed_bev(b).values.val()));

  CHECK_THROWS_AS(small.embed_bev(random_bev(20, 16, 5, 7)), Error);
  CHECK_THROWS_AS(small.embed_bev(random_bev(16, 16, 3, 7)), Error);
  Denoiser uncond(tiny_config(ConditioningMode::kNone), 1);
  CHECK_THROWS_AS(uncond.embed_bev(random_bev(16, 16, 5, 7)), Error);
}

TEST_CASE("null condition token is stable, shaped like an embedding, learnable or zero") {
  Denoiser model(tiny_config(), 3);
  auto n1 = model.null_condition();
  auto n2 = model.null_condition();
  CHECK(same_values(n1.values.val(), n2.values.val()));
  auto e = model.embed_bev(random_bev(16, 16, 5, 7));
  CHECK(n1.values.shape() == e.values.shape());
  // Learned token: spatially constant per channel, not all zero.
  bool nonzero = false;
  for (int64_t i = 0; i < n1.values.numel(); ++i) nonzero |= n1.values.val()[i] != 0.0f;
  CHECK(nonzero);
  for (int c = 0; c < 8; ++c)
    for (int64_t i = 0; i < 16; ++i)
      CHECK(n1.values.val()[c * 16 + i] == n1.values.val()[c * 16]);

  DenoiserConfig zc = tiny_config();
  zc.learned_null_token = false;
  Denoiser zmodel(zc, 3);
  auto nz = zmodel.null_condition();
  for (int64_t i = 0; i < nz.values.numel(); ++i) CHECK(nz.values.val()[i] == 0.0f);

  Denoiser uncond(tiny_config(ConditioningMode::kNone), 3);
  CHECK_THROWS_AS(uncond.null_condition(), Error);
}

TEST_CASE("predict_noise keeps the latent shape in every conditioning mode") {
  Rng rng(11);
  for (auto mode : {ConditioningMode::kConcat, ConditioningMode::kCrossAttention,
                    ConditioningMode::kModulation, ConditioningMode::kNone}) {
    Denoiser model(tiny_config(mode), 5);
    randomize_params(model.params(), 21);
    Tensor z = random_latent(rng, {1, 4, 4, 4, 2});
    Tensor out;
    if (mode == ConditioningMode::kNone) {
      out = model.predict_noise_eval(z, 10, nullptr);
    } else {
      auto e = model.embed_bev(random_bev(16, 16, 5, 7));
      out = model.predict_noise_eval(z, 10, &e);
      // Deterministic: an identical call gives the identical tensor.
      CHECK(same_values(out, model.predict_noise_eval(z, 10, &e)));
      // The null token is a valid condition for the unconditional branch.
      auto nc = model.null_condition();
      Tensor un = model.predict_noise_eval(z, 10, &nc);
      CHECK(un.same_shape(z));
    }
    CHECK(out.same_shape(z));
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(std::isfinite(out[i]));
  }
}

TEST_CASE("condition argument mismatches raise invalid_argument") {
  Rng rng(13);
  Tensor z = random_latent(rng, {1, 4, 4, 4, 2});
  Denoiser cond_model(tiny_config(), 5);
  CHECK_THROWS_AS(cond_model.predict_noise_eval(z, 10, nullptr), Error);
  Denoiser uncond(tiny_config(ConditioningMode::kNone), 5);
  Denoiser helper(tiny_config(), 5);
  auto e = helper.embed_bev(random_bev(16, 16, 5, 7));
  CHECK_THROWS_AS(uncond.predict_noise_eval(z, 10, &e), Error);

  // Timestep count must match the batch.
  auto e2 = cond_model.embed_bev(random_bev(16, 16, 5, 7));
  nn::NoGradGuard ng;
  CHECK_THROWS_AS(cond_model.predict_noise(Var::constant(z.clone()), {1, 2}, &e2), Error);
  CHECK_THROWS_AS(cond_model.predict_noise(Var::constant(z.clone()), {-1}, &e2), Error);
  // Latent dims must be divisible by the level stride.
  Tensor odd = random_latent(rng, {1, 4, 3, 4, 2});
  CHECK_THROWS_AS(cond_model.predict_noise(Var::constant(odd.clone()), {1}, &e2), Error);
}

TEST_CASE("per-sample batching matches single-sample prediction") {
  Rng rng(17);
  Denoiser model(tiny_config(), 5);
  randomize_params(model.params(), 23);
  Tensor z0 = random_latent(rng, {1, 4, 4, 4, 2});
  Tensor z1 = random_latent(rng, {1, 4, 4, 4, 2});
  Tensor zb({2, 4, 4, 4, 2});
  std::copy_n(z0.data(), z0.numel(), zb.data());
  std::copy_n(z1.data(), z1.numel(), zb.data() + z0.numel());
  auto e0 = model.embed_bev(random_bev(16, 16, 5, 31));
  auto e1 = model.embed_bev(random_bev(16, 16, 5, 32));

  nn::NoGradGuard ng;
  BEVEmbedding eb{nn::stack_batch({e0.values, e1.values})};
  Tensor outb = model.predict_noise(Var::constant(zb.clone()), {5, 900}, &eb).val().clone();
  Tensor o0 = model.predict_noise_eval(z0, 5, &e0);
  Tensor o1 = model.predict_noise_eval(z1, 900, &e1);
  for (int64_t i = 0; i < o0.numel(); ++i) {
    CHECK(outb[i] == o0[i]);
    CHECK(outb[o0.numel() + i] == o1[i]);
  }
}

TEST_CASE("concat alignment: layout features are depth-constant and column-aligned") {
  // Probe the 2D->3D injection rule with a pointwise convolution: permuting
  // layout columns (and latent columns identically) permutes output columns.
  Rng rng(19);
  const int c = 3, ce = 2, h = 4, w = 4, d = 3;
  Tensor z = random_latent(rng, {1, c, h, w, d});
  Tensor emb = random_latent(rng, {1, ce, h, w});

  nn::NoGradGuard ng;
  Var bcast = nn::broadcast_z(Var::constant(emb.clone()), d);
  // Depth-constant: every depth slice of the appended channels is identical.
  for (int ch = 0; ch < ce; ++ch)
    for (int x = 0; x < h; ++x)
      for (int y = 0; y < w; ++y)
        for (int zz = 0; zz < d; ++zz)
          CHECK(bcast.val()[((ch * h + x) * w + y) * d + zz] ==
                emb[(ch * h + x) * w + y]);

  Var probe_w = Var::constant(random_latent(rng, {2, c + ce, 1, 1, 1}));
  auto run = [&](const Tensor& zz, const Tensor& ee) {
    Var x = nn::concat_channels(Var::constant(zz.clone()),
                                nn::broadcast_z(Var::constant(ee.clone()), d));
    return nn::conv3d(x, probe_w, Var()).val().clone();
  };
  Tensor base = run(z, emb);

  // Swap columns (0,0) and (3,2) in both inputs.
  auto swap_cols = [&](Tensor& t, int channels, int depth) {
    for (int ch = 0; ch < channels; ++ch)
      for (int zz = 0; zz < depth; ++zz)
        std::swap(t.data()[((ch * h + 0) * w + 0) * depth + zz],
                  t.data()[((ch * h + 3) * w + 2) * depth + zz]);
  };
  Tensor z2 = z.clone(), emb2 = emb.clone();
  swap_cols(z2, c, d);
  swap_cols(emb2, ce, 1);
  Tensor swapped = run(z2, emb2);
  Tensor expect = base.clone();
  swap_cols(expect, 2, d);
  CHECK(same_values(swapped, expect));
}

TEST_CASE("gradients flow into the layout encoder and the null token") {
  Rng rng(23);
  for (auto mode : {ConditioningMode::kConcat, ConditioningMode::kCrossAttention,
                    ConditioningMode::kModulation}) {
    Denoiser model(tiny_config(mode), 5);
    randomize_params(model.params(), 29);
    Tensor z = random_latent(rng, {1, 4, 4, 4, 2});
    auto e = model.embed_bev(random_bev(16, 16, 5, 7));
    Var out = model.predict_noise(Var::constant(z.clone()), {10}, &e);
    nn::backward(nn::mse(out, Var::constant(Tensor::zeros(z.shape()))));
    const auto& stem_w = model.params().find("bev.stem.w");
    REQUIRE(stem_w.grad().defined());
    double asum = 0.0;
    for (int64_t i = 0; i < stem_w.numel(); ++i) asum += std::abs(stem_w.grad()[i]);
    CHECK(asum > 0.0);

    model.params().zero_grads();
    auto nc = model.null_condition();
    Var out2 = model.predict_noise(Var::constant(z.clone()), {10}, &nc);
    nn::backward(nn::mse(out2, Var::constant(Tensor::zeros(z.shape()))));
    const auto& tok = model.params().find("null_cond");
    REQUIRE(tok.grad().defined());
    double tsum = 0.0;
    for (int64_t i = 0; i < tok.numel(); ++i) tsum += std::abs(tok.grad()[i]);
    CHECK(tsum > 0.0);
  }
}

TEST_CASE("mask conditioning accepts the all-ones and all-zeros masks") {
  Rng rng(31);
  DenoiserConfig cfg = tiny_config();
  cfg.mask_conditioning = true;
  Denoiser model(cfg, 5);
  randomize_params(model.params(), 37);
  Tensor z = random_latent(rng, {1, 4, 4, 4, 2});
  auto e = model.embed_bev(random_bev(16, 16, 5, 7));

  Tensor ones({4, 4, 2});
  ones.fill(1.0f);
  MaskCondition all_unknown = MaskCondition::from_single(ones, Tensor::zeros({4, 4, 4, 2}));
  Tensor out1 = model.predict_noise_eval(z, 10, &e, &all_unknown);
  CHECK(out1.same_shape(z));

  Tensor known = random_latent(rng, {4, 4, 4, 2});
  MaskCondition all_known = MaskCondition::from_single(Tensor::zeros({4, 4, 2}), known);
  Tensor out0 = model.predict_noise_eval(z, 10, &e, &all_known);
  CHECK(out0.same_shape(z));

  // Mask argument must match the model's configuration.
  CHECK_THROWS_AS(model.predict_noise_eval(z, 10, &e, nullptr), Error);
  Denoiser plain(tiny_config(), 5);
  auto e2 = plain.embed_bev(random_bev(16, 16, 5, 7));
  CHECK_THROWS_AS(plain.predict_noise_eval(z, 10, &e2, &all_known), Error);
}

TEST_CASE("mask condition validation rejects bad contents") {
  Tensor m({1, 1, 2, 2, 1});
  Tensor zk({1, 3, 2, 2, 1});
  MaskCondition mc{m, zk};
  mc.validate(3);
  mc.mask[0] = 0.5f;
  CHECK_THROWS_AS(mc.validate(3), Error);
  mc.mask[0] = 1.0f;
  mc.z_known[0] = 2.0f;  // nonzero content in an unknown cell
  CHECK_THROWS_AS(mc.validate(3), Error);
  mc.mask[0] = 0.0f;
  mc.validate(3);  // known cells may hold any content
  CHECK_THROWS_AS(mc.validate(2), Error);
}

TEST_CASE("adding mask channels preserves predictions while the new inputs are zero") {
  Rng rng(41);
  Denoiser base(tiny_config(), 5);
  randomize_params(base.params(), 43);
  Tensor z = random_latent(rng, {1, 4, 4, 4, 2});
  auto e = base.embed_bev(random_bev(16, 16, 5, 7));
  Tensor before = base.predict_noise_eval(z, 10, &e);

  Denoiser tuned = base.with_mask_channels();
  CHECK(tuned.config().mask_conditioning);
  auto e2 = tuned.embed_bev(random_bev(16, 16, 5, 7));
  MaskCondition zeros =
      MaskCondition::from_single(Tensor::zeros({4, 4, 2}), Tensor::zeros({4, 4, 4, 2}));
  Tensor after = tuned.predict_noise_eval(z, 10, &e2, &zeros);
  CHECK(same_values(before, after));

  Tensor ones({4, 4, 2});
  ones.fill(1.0f);
  MaskCondition unknown = MaskCondition::from_single(ones, Tensor::zeros({4, 4, 4, 2}));
  Tensor after1 = tuned.predict_noise_eval(z, 10, &e2, &unknown);
  CHECK(same_values(before, after1));

  CHECK_THROWS_AS(tuned.with_mask_channels(), Error);
}

TEST_CASE("time embedding matches the closed form and separates timesteps") {
  Tensor e = sinusoidal_time_embedding({0, 7, 500}, 8);
  REQUIRE(e.shape() == std::vector<int>{3, 8});
  for (int i = 0; i < 4; ++i) {
    CHECK(e[i] == 0.0f);       // sin(0)
    CHECK(e[4 + i] == 1.0f);   // cos(0)
  }
  for (int i = 0; i < 4; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / 4);
    CHECK(e[8 + i] == doctest::Approx(std::sin(7 * f)).epsilon(1e-6));
    CHECK(e[8 + 4 + i] == doctest::Approx(std::cos(7 * f)).epsilon(1e-6));
  }
  bool differs = false;
  for (int i = 0; i < 8; ++i) differs |= e[8 + i] != e[16 + i];
  CHECK(differs);
  CHECK_THROWS_AS(sinusoidal_time_embedding({-1}, 8), Error);
  CHECK_THROWS_AS(sinusoidal_time_embedding({1}, 7), Error);
}

TEST_CASE("checkpoint round trip restores weights, config, and EMA variants") {
  const auto dir = fs::temp_directory_path() / "occdiff_denoiser_ck";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto path = dir / "model.ckpt";

  Denoiser model(tiny_config(ConditioningMode::kModulation), 5);
  randomize_params(model.params(), 47);
  nn::Ema ema(model.params(), 0.5);  // shadow holds the randomized weights
  nn::Var w = model.params().find("in.w");
  const float pre = w.val()[0];
  w.mutable_val()[0] = pre + 42.0f;  // live weights drift after the snapshot
  model.save(path, 5, {{"epoch", 3}}, &ema);

  nlohmann::json meta;
  Denoiser ema_model = Denoiser::load(path, true, &meta);
  CHECK(meta.at("epoch") == 3);
  CHECK(meta.at("config") == model.config().to_json());
  CHECK(ema_model.params().find("in.w").val()[0] == pre);
  Denoiser raw_model = Denoiser::load(path, false);
  CHECK(raw_model.params().find("in.w").val()[0] == pre + 42.0f);

  Rng rng(53);
  Tensor z = random_latent(rng, {1, 4, 4, 4, 2});
  auto e1 = raw_model.embed_bev(random_bev(16, 16, 5, 7));
  Denoiser again = Denoiser::load(path, false);
  auto e2 = again.embed_bev(random_bev(16, 16, 5, 7));
  CHECK(same_values(raw_model.predict_noise_eval(z, 10, &e1),
                    again.predict_noise_eval(z, 10, &e2)));
  fs::remove_all(dir);
}
