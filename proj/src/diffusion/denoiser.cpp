// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/diffusion/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "occdiff/nn/checkpoint.hpp"
#include "occdiff/util/error.hpp"

namespace occdiff::diffusion {

namespace {

bool is_pow2(int v) { return v >= 1 && (v & (v - 1)) == 0; }

int ilog2(int v) {
  int l = 0;
  while ((1 << l) < v) ++l;
  return l;
}

}  // namespace

std::string to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::kConcat: return "concat";
    case ConditioningMode::kCrossAttention: return "cross_attention";
    case ConditioningMode::kModulation: return "modulation";
    case ConditioningMode::kNone: return "none";
  }
  raise(Errc::invalid_argument, "unknown conditioning mode");
}

ConditioningMode conditioning_mode_from_string(const std::string& s) {
  if (s == "concat") return ConditioningMode::kConcat;
  if (s == "cross_attention") return ConditioningMode::kCrossAttention;
  if (s == "modulation") return ConditioningMode::kModulation;
  if (s == "none") return ConditioningMode::kNone;
  raise(Errc::invalid_argument, "unknown conditioning mode: " + s);
}

void DenoiserConfig::validate() const {
  require(latent_channels >= 1, Errc::invalid_argument, "latent_channels must be positive");
  require(base_channels >= 8, Errc::invalid_argument, "base_channels must be at least 8");
  require(!channel_multipliers.empty(), Errc::invalid_argument, "channel_multipliers empty");
  for (int m : channel_multipliers)
    require(m >= 1, Errc::invalid_argument, "channel multipliers must be positive");
  require(res_blocks_per_level >= 1, Errc::invalid_argument, "res_blocks_per_level must be >= 1");
  std::set<int> seen;
  for (int l : attention_levels) {
    require(l >= 0 && l < levels(), Errc::invalid_argument, "attention level out of range");
    require(seen.insert(l).second, Errc::invalid_argument, "duplicate attention level");
  }
  require(time_embed_width >= 16 && time_embed_width % 2 == 0, Errc::invalid_argument,
          "time_embed_width must be even and at least 16");
  if (conditioning_mode != ConditioningMode::kNone) {
    require(bev_classes >= 2, Errc::invalid_argument, "bev_classes must be at least 2");
    require(is_pow2(bev_downsample_factor), Errc::invalid_argument,
            "bev_downsample_factor must be a power of two");
    require(bev_height > 0 && bev_width > 0, Errc::invalid_argument, "layout dims must be positive");
    require(bev_height % bev_downsample_factor == 0 && bev_width % bev_downsample_factor == 0,
            Errc::invalid_argument, "layout dims must be multiples of the downsample factor");
    require(bev_embed_channels >= 4, Errc::invalid_argument,
            "bev_embed_channels must be at least 4");
  }
}

nlohmann::json DenoiserConfig::to_json() const {
  return nlohmann::json{{"latent_channels", latent_channels},
                        {"bev_classes", bev_classes},
                        {"bev_height", bev_height},
                        {"bev_width", bev_width},
                        {"bev_downsample_factor", bev_downsample_factor},
                        {"bev_embed_channels", bev_embed_channels},
                        {"base_channels", base_channels},
                        {"channel_multipliers", channel_multipliers},
                        {"res_blocks_per_level", res_blocks_per_level},
                        {"attention_levels", attention_levels},
                        {"time_embed_width", time_embed_width},
                        {"conditioning_mode", to_string(conditioning_mode)},
                        {"learned_null_token", learned_null_token},
                        {"mask_conditioning", mask_conditioning}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.latent_channels = j.at("latent_channels").get<int>();
  c.bev_classes = j.at("bev_classes").get<int>();
  c.bev_height = j.at("bev_height").get<int>();
  c.bev_width = j.at("bev_width").get<int>();
  c.bev_downsample_factor = j.at("bev_downsample_factor").get<int>();
  c.bev_embed_channels = j.at("bev_embed_channels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
  c.res_blocks_per_level = j.at("res_blocks_per_level").get<int>();
  c.attention_levels = j.at("attention_levels").get<std::vector<int>>();
  c.time_embed_width = j.at("time_embed_width").get<int>();
  c.conditioning_mode = conditioning_mode_from_string(j.at("conditioning_mode").get<std::string>());
  c.learned_null_token = j.at("learned_null_token").get<bool>();
  c.mask_conditioning = j.at("mask_conditioning").get<bool>();
  c.validate();
  return c;
}

MaskCondition MaskCondition::from_single(const Tensor& mask3d, const Tensor& z_known) {
  require(mask3d.ndim() == 3, Errc::shape_mismatch, "mask must be [h,w,d]");
  const int h = mask3d.dim(0), w = mask3d.dim(1), d = mask3d.dim(2);
  MaskCondition mc;
  mc.mask = mask3d.reshaped({1, 1, h, w, d});
  require(z_known.ndim() == 4 || z_known.ndim() == 5, Errc::shape_mismatch,
          "z_known must be [c,h,w,d] or [1,c,h,w,d]");
  const int c = z_known.ndim() == 4 ? z_known.dim(0) : z_known.dim(1);
  mc.z_known = z_known.reshaped({1, c, h, w, d});
  return mc;
}

void MaskCondition::validate(int latent_channels) const {
  require(mask.defined() && z_known.defined(), Errc::invalid_argument,
          "mask condition tensors are undefined");
  require(mask.ndim() == 5 && mask.dim(1) == 1, Errc::shape_mismatch, "mask must be [N,1,h,w,d]");
  require(z_known.ndim() == 5 && z_known.dim(1) == latent_channels, Errc::shape_mismatch,
          "z_known must be [N,c,h,w,d]");
  require(mask.dim(0) == z_known.dim(0) && mask.dim(2) == z_known.dim(2) &&
              mask.dim(3) == z_known.dim(3) && mask.dim(4) == z_known.dim(4),
          Errc::shape_mismatch, "mask and z_known dims disagree");
  const int N = mask.dim(0);
  const int64_t S = mask.numel() / N;
  const int c = z_known.dim(1);
  for (int n = 0; n < N; ++n) {
    const float* m = mask.data() + n * S;
    const float* z = z_known.data() + n * S * c;
    for (int64_t i = 0; i < S; ++i) {
      require(m[i] == 0.0f || m[i] == 1.0f, Errc::invalid_argument, "mask values must be 0 or 1");
      if (m[i] == 1.0f)
        for (int ch = 0; ch < c; ++ch)
          require(z[ch * S + i] == 0.0f, Errc::invalid_argument,
                  "z_known must be zero in unknown cells");
    }
  }
}

Tensor sinusoidal_time_embedding(const std::vector<int>& t, int width) {
  require(width >= 2 && width % 2 == 0, Errc::invalid_argument, "embedding width must be even");
  const int N = static_cast<int>(t.size());
  const int half = width / 2;
  Tensor out({N, width});
  for (int n = 0; n < N; ++n) {
    require(t[n] >= 0, Errc::invalid_argument, "timestep must be non-negative");
    float* row = out.data() + static_cast<int64_t>(n) * width;
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      row[i] = static_cast<float>(std::sin(t[n] * freq));
      row[half + i] = static_cast<float>(std::cos(t[n] * freq));
    }
  }
  return out;
}

Denoiser::TimeResBlock Denoiser::TimeResBlock::create(nn::ParamStore& store,
                                                      const std::string& name, int channels,
                                                      int temb_width, int mod_width, Rng& rng) {
  TimeResBlock b;
  b.gn1 = nn::GroupNormLayer::create(store, name + ".gn1", channels);
  b.c1 = nn::Conv3dLayer::create(store, name + ".c1", channels, channels, 3, rng);
  b.temb = nn::LinearLayer::create(store, name + ".temb", temb_width, channels, rng);
  b.gn2 = nn::GroupNormLayer::create(store, name + ".gn2", channels);
  b.c2 = nn::Conv3dLayer::create_zero(store, name + ".c2", channels, channels, 3);
  if (mod_width > 0) {
    b.mod_s = nn::LinearLayer::create_zero(store, name + ".mod_s", mod_width, channels);
    b.mod_t = nn::LinearLayer::create_zero(store, name + ".mod_t", mod_width, channels);
    b.modulated = true;
  }
  return b;
}

Var Denoiser::TimeResBlock::forward(const Var& x, const Var& silu_temb, const Var& mod) const {
  Var h = c1(nn::silu(gn1(x)));
  h = nn::add_channel_bias(h, temb(silu_temb));
  Var g = gn2(h);
  if (modulated) {
    require(mod.defined(), Errc::invalid_argument, "modulated block without a modulation vector");
    g = nn::channel_affine(g, mod_s(mod), mod_t(mod));
  }
  h = c2(nn::silu(g));
  return nn::add(x, h);
}

Denoiser::AttentionBlock Denoiser::AttentionBlock::create(nn::ParamStore& store,
                                                          const std::string& name, int channels,
                                                          int source_channels, bool cross,
                                                          Rng& rng) {
  AttentionBlock a;
  a.gn = nn::GroupNormLayer::create(store, name + ".gn", channels);
  a.q = nn::LinearLayer::create(store, name + ".q", channels, channels, rng);
  a.k = nn::LinearLayer::create(store, name + ".k", source_channels, channels, rng);
  a.v = nn::LinearLayer::create(store, name + ".v", source_channels, channels, rng);
  a.out = nn::LinearLayer::create_zero(store, name + ".out", channels, channels);
  a.cross = cross;
  return a;
}

Var Denoiser::AttentionBlock::forward(const Var& x, const Var& src_rows, int src_tokens) const {
  const int N = x.dim(0), C = x.dim(1);
  const int S = static_cast<int>(x.numel() / (static_cast<int64_t>(N) * C));
  Var rows = nn::rows_from_channels(gn(x));  // [N*S, C]
  Var qv = nn::reshape(q(rows), {N, S, C});
  Var kv, vv;
  int Sk = S;
  if (cross) {
    require(src_rows.defined(), Errc::invalid_argument, "cross attention without source tokens");
    Sk = src_tokens;
    kv = nn::reshape(k(src_rows), {N, Sk, C});
    vv = nn::reshape(v(src_rows), {N, Sk, C});
  } else {
    kv = nn::reshape(k(rows), {N, Sk, C});
    vv = nn::reshape(v(rows), {N, Sk, C});
  }
  Var att = nn::attention(qv, kv, vv);
  Var o = out(nn::reshape(att, {N * S, C}));
  return nn::add(x, nn::channels_from_rows(o, x.shape()));
}

int Denoiser::input_channels() const {
  int c = cfg_.latent_channels;
  if (cfg_.conditioning_mode == ConditioningMode::kConcat) c += cfg_.bev_embed_channels;
  if (cfg_.mask_conditioning) c += 1 + cfg_.latent_channels;
  return c;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int L = cfg_.levels();
  const int tw = cfg_.time_embed_width;
  const bool conditional = cfg_.conditioning_mode != ConditioningMode::kNone;
  const bool cross = cfg_.conditioning_mode == ConditioningMode::kCrossAttention;
  const int mod_width =
      cfg_.conditioning_mode == ConditioningMode::kModulation ? cfg_.bev_embed_channels : 0;

  temb_l1_ = nn::LinearLayer::create(store_, "temb.l1", tw, tw, rng);
  temb_l2_ = nn::LinearLayer::create(store_, "temb.l2", tw, tw, rng);
  in_conv_ = nn::Conv3dLayer::create(store_, "in", input_channels(), cfg_.channels_at(0), 3, rng);

  auto has_attn = [&](int level) {
    return std::find(cfg_.attention_levels.begin(), cfg_.attention_levels.end(), level) !=
           cfg_.attention_levels.end();
  };

  for (int i = 0; i < L; ++i) {
    DownLevel dl;
    const int ch = cfg_.channels_at(i);
    for (int r = 0; r < cfg_.res_blocks_per_level; ++r) {
      const std::string base = "down" + std::to_string(i) + ".res" + std::to_string(r);
      dl.res.push_back(TimeResBlock::create(store_, base, ch, tw, mod_width, rng));
      if (has_attn(i))
        dl.attn.push_back(AttentionBlock::create(
            store_, "down" + std::to_string(i) + ".attn" + std::to_string(r), ch,
            cross ? cfg_.bev_embed_channels : ch, cross, rng));
    }
    if (i + 1 < L)
      dl.down = nn::Conv3dLayer::create(store_, "down" + std::to_string(i) + ".down", ch,
                                        cfg_.channels_at(i + 1), 3, rng);
    down_.push_back(std::move(dl));
  }

  up_.resize(L);
  for (int i = L - 1; i >= 0; --i) {
    UpLevel ul;
    const int ch = cfg_.channels_at(i);
    ul.merge =
        nn::Conv3dLayer::create(store_, "up" + std::to_string(i) + ".merge", 2 * ch, ch, 3, rng);
    for (int r = 0; r < cfg_.res_blocks_per_level; ++r) {
      const std::string base = "up" + std::to_string(i) + ".res" + std::to_string(r);
      ul.res.push_back(TimeResBlock::create(store_, base, ch, tw, mod_width, rng));
      if (has_attn(i))
        ul.attn.push_back(AttentionBlock::create(
            store_, "up" + std::to_string(i) + ".attn" + std::to_string(r), ch,
            cross ? cfg_.bev_embed_channels : ch, cross, rng));
    }
    if (i > 0)
      ul.up = nn::Conv3dLayer::create(store_, "up" + std::to_string(i) + ".up", ch,
                                      cfg_.channels_at(i - 1), 3, rng);
    up_[i] = std::move(ul);
  }

  head_norm_ = nn::GroupNormLayer::create(store_, "head.gn", cfg_.channels_at(0));
  head_out_ = nn::Conv3dLayer::create_zero(store_, "head.out", cfg_.channels_at(0),
                                           cfg_.latent_channels, 3);

  if (conditional) {
    const int c0 = std::max(8, cfg_.bev_embed_channels / 2);
    bev_stem_ = nn::Conv3dLayer::create(store_, "bev.stem", cfg_.bev_classes, c0, 3, 3, 1, rng);
    int c = c0;
    for (int l = 0; l < ilog2(cfg_.bev_downsample_factor); ++l) {
      const int cn = std::min(2 * c, cfg_.bev_embed_channels);
      bev_widen_.push_back(
          nn::Conv3dLayer::create(store_, "bev.widen" + std::to_string(l), c, cn, 3, 3, 1, rng));
      c = cn;
    }
    bev_head_ = nn::Conv3dLayer::create(store_, "bev.head", c, cfg_.bev_embed_channels, 1, rng);
    if (cfg_.learned_null_token)
      null_token_ = store_.add("null_cond", nn::init_normal(rng, {cfg_.bev_embed_channels}, 0.1f));
    if (mod_width > 0) {
      mod_l1_ = nn::LinearLayer::create(store_, "mod.l1", cfg_.bev_embed_channels,
                                        cfg_.bev_embed_channels, rng);
      mod_l2_ = nn::LinearLayer::create(store_, "mod.l2", cfg_.bev_embed_channels,
                                        cfg_.bev_embed_channels, rng);
    }
  }
}

BEVEmbedding Denoiser::embed_bev(const voxel::BEVLayout& b) {
  require(cfg_.conditioning_mode != ConditioningMode::kNone, Errc::invalid_argument,
          "unconditional model has no layout encoder");
  b.validate();
  require(b.H == cfg_.bev_height && b.W == cfg_.bev_width, Errc::shape_mismatch,
          "layout dims differ from the configured ones");
  require(b.num_classes == cfg_.bev_classes, Errc::invalid_argument,
          "layout class count differs from the configured one");
  Tensor oh = Tensor::zeros({1, cfg_.bev_classes, b.H, b.W, 1});
  for (int x = 0; x < b.H; ++x)
    for (int y = 0; y < b.W; ++y)
      oh[(static_cast<int64_t>(b.at(x, y)) * b.H + x) * b.W + y] = 1.0f;
  Var h = nn::silu(bev_stem_(Var::constant(std::move(oh))));
  for (const auto& widen : bev_widen_) h = nn::silu(widen(nn::avg_pool3d(h, 2, 2, 1)));
  h = bev_head_(h);
  const int hh = b.H / cfg_.bev_downsample_factor, ww = b.W / cfg_.bev_downsample_factor;
  return BEVEmbedding{nn::reshape(h, {1, cfg_.bev_embed_channels, hh, ww})};
}

BEVEmbedding Denoiser::null_condition() {
  require(cfg_.conditioning_mode != ConditioningMode::kNone, Errc::invalid_argument,
          "unconditional model has no condition token");
  const int hh = cfg_.bev_height / cfg_.bev_downsample_factor;
  const int ww = cfg_.bev_width / cfg_.bev_downsample_factor;
  Tensor zeros = Tensor::zeros({1, cfg_.bev_embed_channels, hh, ww});
  if (!cfg_.learned_null_token) return BEVEmbedding{Var::constant(std::move(zeros))};
  Var token = nn::add_channel_bias(Var::constant(std::move(zeros)),
                                   nn::reshape(null_token_, {1, cfg_.bev_embed_channels}));
  return BEVEmbedding{token};
}

Var Denoiser::predict_noise(const Var& z_t, const std::vector<int>& t, const BEVEmbedding* cond,
                            const MaskCondition* mask_cond) {
  require(z_t.defined() && z_t.val().ndim() == 5, Errc::shape_mismatch, "z_t must be [N,c,h,w,d]");
  const int N = z_t.dim(0), c = z_t.dim(1), h = z_t.dim(2), w = z_t.dim(3), d = z_t.dim(4);
  require(c == cfg_.latent_channels, Errc::shape_mismatch, "latent channel count mismatch");
  require(static_cast<int>(t.size()) == N, Errc::invalid_argument,
          "need exactly one timestep per sample");
  const int stride = 1 << (cfg_.levels() - 1);
  require(h % stride == 0 && w % stride == 0 && d % stride == 0, Errc::shape_mismatch,
          "latent dims must be divisible by 2^(levels-1)");

  const bool conditional = cfg_.conditioning_mode != ConditioningMode::kNone;
  if (conditional) {
    require(cond != nullptr, Errc::invalid_argument,
            "conditional model requires a condition; pass null_condition() for the "
            "unconditional branch");
    require(cond->values.defined() && cond->values.val().ndim() == 4, Errc::shape_mismatch,
            "condition must be [N,c_emb,h,w]");
    require(cond->values.dim(0) == N, Errc::shape_mismatch, "condition batch mismatch");
    require(cond->values.dim(1) == cfg_.bev_embed_channels, Errc::shape_mismatch,
            "condition channel mismatch");
  } else {
    require(cond == nullptr, Errc::invalid_argument, "unconditional model given a condition");
  }
  if (cfg_.mask_conditioning) {
    require(mask_cond != nullptr, Errc::invalid_argument,
            "mask-conditioned model requires a mask condition");
    mask_cond->validate(cfg_.latent_channels);
    require(mask_cond->mask.dim(0) == N && mask_cond->mask.dim(2) == h &&
                mask_cond->mask.dim(3) == w && mask_cond->mask.dim(4) == d,
            Errc::shape_mismatch, "mask dims differ from the latent's");
  } else {
    require(mask_cond == nullptr, Errc::invalid_argument,
            "model was not built with mask conditioning");
  }

  Var temb_sin = Var::constant(sinusoidal_time_embedding(t, cfg_.time_embed_width));
  Var silu_temb = nn::silu(temb_l2_(nn::silu(temb_l1_(temb_sin))));

  Var x = z_t;
  Var bev_rows, mod;
  int bev_tokens = 0;
  switch (cfg_.conditioning_mode) {
    case ConditioningMode::kConcat: {
      require(cond->values.dim(2) == h && cond->values.dim(3) == w, Errc::shape_mismatch,
              "condition horizontal dims differ from the latent's");
      x = nn::concat_channels(x, nn::broadcast_z(cond->values, d));
      break;
    }
    case ConditioningMode::kCrossAttention: {
      bev_tokens = cond->values.dim(2) * cond->values.dim(3);
      bev_rows = nn::rows_from_channels(cond->values);
      break;
    }
    case ConditioningMode::kModulation: {
      const int he = cond->values.dim(2), we = cond->values.dim(3);
      Var pooled = nn::avg_pool3d(
          nn::reshape(cond->values, {N, cfg_.bev_embed_channels, he, we, 1}), he, we, 1);
      pooled = nn::reshape(pooled, {N, cfg_.bev_embed_channels});
      mod = mod_l2_(nn::silu(mod_l1_(pooled)));
      break;
    }
    case ConditioningMode::kNone: break;
  }
  if (cfg_.mask_conditioning) {
    // Packed [N, 1+c, h, w, d]: the mask channel then the known content.
    const int64_t S = static_cast<int64_t>(h) * w * d;
    Tensor mk({N, 1 + c, h, w, d});
    for (int n = 0; n < N; ++n) {
      std::copy_n(mask_cond->mask.data() + n * S, S, mk.data() + n * (1 + c) * S);
      std::copy_n(mask_cond->z_known.data() + n * c * S, c * S, mk.data() + n * (1 + c) * S + S);
    }
    x = nn::concat_channels(x, Var::constant(std::move(mk)));
  }

  Var out = run_unet(x, silu_temb, bev_rows, bev_tokens, mod);
  require(out.val().same_shape(z_t.val()), Errc::shape_mismatch,
          "predicted noise shape differs from the input latent");
  return out;
}

Var Denoiser::run_unet(const Var& x, const Var& silu_temb, const Var& bev_rows, int bev_tokens,
                       const Var& mod) {
  const int L = cfg_.levels();
  Var h = in_conv_(x);
  std::vector<Var> skips;
  for (int i = 0; i < L; ++i) {
    for (size_t r = 0; r < down_[i].res.size(); ++r) {
      h = down_[i].res[r].forward(h, silu_temb, mod);
      if (!down_[i].attn.empty()) h = down_[i].attn[r].forward(h, bev_rows, bev_tokens);
    }
    skips.push_back(h);
    if (i + 1 < L) h = down_[i].down(nn::avg_pool3d(h, 2, 2, 2));
  }
  for (int i = L - 1; i >= 0; --i) {
    h = up_[i].merge(nn::concat_channels(h, skips[i]));
    for (size_t r = 0; r < up_[i].res.size(); ++r) {
      h = up_[i].res[r].forward(h, silu_temb, mod);
      if (!up_[i].attn.empty()) h = up_[i].attn[r].forward(h, bev_rows, bev_tokens);
    }
    if (i > 0) h = up_[i].up(nn::upsample3d(h, 2, 2, 2));
  }
  return head_out_(nn::silu(head_norm_(h)));
}

Tensor Denoiser::predict_noise_eval(const Tensor& z_t, int t, const BEVEmbedding* cond,
                                    const MaskCondition* mask_cond) {
  nn::NoGradGuard ng;
  Var out = predict_noise(Var::constant(z_t.clone()), {t}, cond, mask_cond);
  return out.val().clone();
}

Denoiser Denoiser::with_mask_channels() const {
  require(!cfg_.mask_conditioning, Errc::invalid_argument, "model is already mask-conditioned");
  DenoiserConfig cfg = cfg_;
  cfg.mask_conditioning = true;
  Denoiser dst(cfg, 0);
  const int64_t kvol = 27;  // 3x3x3 kernels on the input convolution
  for (const auto& [name, var] : store_.all()) {
    Var dv = dst.store_.find(name);
    if (name == "in.w") {
      const int cout = var.val().dim(0), cin_old = var.val().dim(1);
      const int cin_new = dv.val().dim(1);
      require(cin_new == cin_old + 1 + cfg_.latent_channels, Errc::shape_mismatch,
              "unexpected input conv growth");
      dv.mutable_val().fill(0.0f);
      for (int o = 0; o < cout; ++o)
        std::copy_n(var.val().data() + static_cast<int64_t>(o) * cin_old * kvol, cin_old * kvol,
                    dv.mutable_val().data() + static_cast<int64_t>(o) * cin_new * kvol);
    } else {
      require(dv.val().same_shape(var.val()), Errc::shape_mismatch,
              "parameter shape changed: " + name);
      std::copy_n(var.val().data(), var.numel(), dv.mutable_val().data());
    }
  }
  return dst;
}

void Denoiser::save(const std::filesystem::path& path, uint64_t seed,
                    const nlohmann::json& extra_meta, const nn::Ema* ema) const {
  nn::Checkpoint ck;
  ck.meta = nlohmann::json{{"kind", "denoiser"}, {"config", cfg_.to_json()}, {"seed", seed}};
  for (const auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
  ck.add_store(store_);
  if (ema != nullptr) {
    const auto& all = store_.all();
    require(ema->shadow().size() == all.size(), Errc::shape_mismatch,
            "EMA shadow count does not match parameter count");
    for (size_t i = 0; i < all.size(); ++i) ck.add("ema/" + all[i].first, ema->shadow()[i].clone());
  }
  ck.save(path);
}

Denoiser Denoiser::load(const std::filesystem::path& path, bool prefer_ema,
                        nlohmann::json* meta_out) {
  nn::Checkpoint ck = nn::Checkpoint::load(path);
  require(ck.meta.value("kind", "") == "denoiser", Errc::missing_checkpoint,
          "checkpoint is not a noise predictor");
  Denoiser model(DenoiserConfig::from_json(ck.meta.at("config")),
                 ck.meta.value("seed", uint64_t{0}));
  if (meta_out != nullptr) *meta_out = ck.meta;
  ck.load_store(model.store_);
  if (prefer_ema) {
    for (const auto& [name, var] : model.store_.all()) {
      if (!ck.has("ema/" + name)) continue;
      const Tensor& t = ck.tensor("ema/" + name);
      require(t.same_shape(var.val()), Errc::shape_mismatch, "EMA tensor shape mismatch: " + name);
      nn::Var v = var;
      std::copy_n(t.data(), t.numel(), v.mutable_val().data());
    }
  }
  return model;
}

}  // namespace occdiff::diffusion
