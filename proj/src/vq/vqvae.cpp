// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/vq/vqvae.hpp"

#include <cmath>

#include "occdiff/nn/checkpoint.hpp"
#include "occdiff/util/error.hpp"

namespace occdiff::vq {

namespace {

int ilog2_exact(int v, const char* what) {
  int l = 0;
  int x = v;
  while (x > 1 && (x & 1) == 0) {
    x >>= 1;
    ++l;
  }
  require(x == 1, Errc::config, std::string(what) + " must be a power of two");
  return l;
}

}  // namespace

int AutoencoderConfig::levels() const { return ilog2_exact(downsample_factor, "downsample_factor"); }

void AutoencoderConfig::validate() const {
  require(num_classes >= 2, Errc::config, "num_classes must be >= 2");
  require(downsample_factor == 2 || downsample_factor == 4 || downsample_factor == 8, Errc::config,
          "downsample_factor must be one of 2, 4, 8");
  const int zl = ilog2_exact(z_downsample_factor, "z_downsample_factor");
  require(zl <= levels(), Errc::config, "z_downsample_factor cannot exceed downsample_factor");
  require(base_channels >= 4, Errc::config, "base_channels must be >= 4");
  require(residual_blocks_per_level >= 1, Errc::config, "residual_blocks_per_level must be >= 1");
  require(codebook_size >= 2, Errc::config, "codebook_size must be >= 2");
  require(latent_channels >= 1, Errc::config, "latent_channels must be >= 1");
  require(commitment_beta > 0.0f, Errc::config, "commitment_beta must be positive");
  require(ema_decay > 0.0f && ema_decay < 1.0f, Errc::config, "ema_decay must be in (0,1)");
  if (!class_weights.empty()) {
    require(static_cast<int>(class_weights.size()) == num_classes, Errc::config,
            "class_weights must have one entry per class");
    for (float w : class_weights)
      require(w > 0.0f && std::isfinite(w), Errc::config, "class_weights must be positive");
  }
}

nlohmann::json AutoencoderConfig::to_json() const {
  return nlohmann::json{{"num_classes", num_classes},
                        {"downsample_factor", downsample_factor},
                        {"z_downsample_factor", z_downsample_factor},
                        {"base_channels", base_channels},
                        {"residual_blocks_per_level", residual_blocks_per_level},
                        {"codebook_size", codebook_size},
                        {"latent_channels", latent_channels},
                        {"commitment_beta", commitment_beta},
                        {"class_weights", class_weights},
                        {"ema_decay", ema_decay},
                        {"ema_codebook", ema_codebook}};
}

AutoencoderConfig AutoencoderConfig::from_json(const nlohmann::json& j) {
  AutoencoderConfig c;
  c.num_classes = j.at("num_classes").get<int>();
  c.downsample_factor = j.at("downsample_factor").get<int>();
  c.z_downsample_factor = j.at("z_downsample_factor").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.residual_blocks_per_level = j.at("residual_blocks_per_level").get<int>();
  c.codebook_size = j.at("codebook_size").get<int>();
  c.latent_channels = j.at("latent_channels").get<int>();
  c.commitment_beta = j.at("commitment_beta").get<float>();
  c.class_weights = j.at("class_weights").get<std::vector<float>>();
  c.ema_decay = j.at("ema_decay").get<float>();
  c.ema_codebook = j.at("ema_codebook").get<bool>();
  c.validate();
  return c;
}

std::vector<float> inverse_frequency_weights(const std::vector<int64_t>& class_counts,
                                             float clip_lo, float clip_hi) {
  require(!class_counts.empty(), Errc::invalid_argument, "empty class counts");
  double total = 0.0;
  for (int64_t c : class_counts) total += static_cast<double>(c);
  require(total > 0.0, Errc::invalid_argument, "class counts are all zero");
  const double mean = total / static_cast<double>(class_counts.size());
  std::vector<float> w(class_counts.size());
  for (size_t i = 0; i < class_counts.size(); ++i) {
    const double f = class_counts[i] > 0 ? mean / static_cast<double>(class_counts[i])
                                         : static_cast<double>(clip_hi);
    w[i] = static_cast<float>(std::min<double>(clip_hi, std::max<double>(clip_lo, f)));
  }
  return w;
}

VqVae::VqVae(const AutoencoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int L = cfg_.levels();
  const int zL = ilog2_exact(cfg_.z_downsample_factor, "z_downsample_factor");
  auto ch = [&](int i) { return cfg_.base_channels << i; };

  enc_stem_ = nn::Conv3dLayer::create(store_, "enc.stem", cfg_.num_classes, ch(0), 3, rng);
  for (int i = 0; i < L; ++i) {
    EncLevel lvl;
    lvl.pz = i < zL ? 2 : 1;
    lvl.widen = nn::Conv3dLayer::create(store_, "enc.l" + std::to_string(i) + ".widen", ch(i),
                                        ch(i + 1), 3, rng);
    for (int r = 0; r < cfg_.residual_blocks_per_level; ++r)
      lvl.res.push_back(nn::ResBlock3d::create(
          store_, "enc.l" + std::to_string(i) + ".res" + std::to_string(r), ch(i + 1), rng));
    enc_levels_.push_back(std::move(lvl));
  }
  enc_head_norm_ = nn::GroupNormLayer::create(store_, "enc.head_norm", ch(L));
  enc_head_ = nn::Conv3dLayer::create(store_, "enc.head", ch(L), cfg_.latent_channels, 3, rng);

  dec_stem_ = nn::Conv3dLayer::create(store_, "dec.stem", cfg_.latent_channels, ch(L), 3, rng);
  for (int i = L - 1; i >= 0; --i) {
    DecLevel lvl;
    lvl.pz = i < zL ? 2 : 1;
    for (int r = 0; r < cfg_.residual_blocks_per_level; ++r)
      lvl.res.push_back(nn::ResBlock3d::create(
          store_, "dec.l" + std::to_string(i) + ".res" + std::to_string(r), ch(i + 1), rng));
    lvl.narrow = nn::Conv3dLayer::create(store_, "dec.l" + std::to_string(i) + ".narrow",
                                         ch(i + 1), ch(i), 3, rng);
    dec_levels_.push_back(std::move(lvl));
  }
  dec_head_norm_ = nn::GroupNormLayer::create(store_, "dec.head_norm", ch(0));
  dec_head_ = nn::Conv3dLayer::create(store_, "dec.head", ch(0), cfg_.num_classes, 3, rng);

  codebook_.K = cfg_.codebook_size;
  codebook_.dim = cfg_.latent_channels;
  codebook_.embeddings = store_.add(
      "quantizer.codebook",
      nn::init_normal(rng, {cfg_.codebook_size, cfg_.latent_channels}, 0.5f));
  codebook_.usage_counts.assign(static_cast<size_t>(cfg_.codebook_size), 0);
}

std::vector<int> VqVae::latent_shape(int N, int X, int Y, int Z) const {
  const int f = cfg_.downsample_factor, fz = cfg_.z_downsample_factor;
  require(X % f == 0 && Y % f == 0 && Z % fz == 0, Errc::shape_mismatch,
          "input dims must be multiples of " + std::to_string(f) + " in x/y and " +
              std::to_string(fz) + " in z");
  return {N, cfg_.latent_channels, X / f, Y / f, Z / fz};
}

nn::Var VqVae::encode(const nn::Var& x) const {
  require(x.val().ndim() == 5 && x.dim(1) == cfg_.num_classes, Errc::shape_mismatch,
          "encode expects one-hot [N, num_classes, X, Y, Z]");
  latent_shape(x.dim(0), x.dim(2), x.dim(3), x.dim(4));  // divisibility check
  nn::Var h = enc_stem_(x);
  for (const auto& lvl : enc_levels_) {
    h = nn::avg_pool3d(h, 2, 2, lvl.pz);
    h = lvl.widen(h);
    for (const auto& res : lvl.res) h = res(h);
  }
  return enc_head_(nn::silu(enc_head_norm_(h)));
}

nn::Var VqVae::decode(const nn::Var& z_q) const {
  require(z_q.val().ndim() == 5 && z_q.dim(1) == cfg_.latent_channels, Errc::shape_mismatch,
          "decode expects [N, latent_channels, x, y, z]");
  nn::Var h = dec_stem_(z_q);
  for (const auto& lvl : dec_levels_) {
    for (const auto& res : lvl.res) h = res(h);
    h = lvl.narrow(h);
    h = nn::upsample3d(h, 2, 2, lvl.pz);
  }
  return dec_head_(nn::silu(dec_head_norm_(h)));
}

Tensor VqVae::encode_quantized(const voxel::SemanticOccupancyMap& map) {
  nn::NoGradGuard ng;
  Tensor oh = voxel::to_onehot(map);
  auto shape = oh.shape();
  shape.insert(shape.begin(), 1);
  nn::Var z = encode(nn::Var::constant(oh.reshaped(shape)));
  const auto idx = quantize_indices(z.val(), codebook_);
  return latent_from_indices(idx, codebook_, z.shape());
}

voxel::SemanticOccupancyMap VqVae::decode_to_map(const Tensor& z_q, float voxel_size_xy,
                                                 float voxel_size_z,
                                                 const std::array<float, 3>& origin) const {
  nn::NoGradGuard ng;
  require(z_q.ndim() == 5 && z_q.dim(0) == 1, Errc::shape_mismatch,
          "decode_to_map expects a single-sample latent [1, c, x, y, z]");
  nn::Var logits = decode(nn::Var::constant(z_q));
  auto like = voxel::SemanticOccupancyMap::empty(logits.dim(2), logits.dim(3), logits.dim(4),
                                                 cfg_.num_classes, voxel_size_xy, voxel_size_z,
                                                 origin);
  return voxel::from_onehot(
      logits.val().reshaped({logits.dim(1), logits.dim(2), logits.dim(3), logits.dim(4)}), like);
}

voxel::SemanticOccupancyMap VqVae::reconstruct(const voxel::SemanticOccupancyMap& map) {
  Tensor z_q = encode_quantized(map);
  return decode_to_map(z_q, map.voxel_size_xy, map.voxel_size_z, map.origin);
}

void VqVae::save(const std::filesystem::path& path, const synth::ClassPalette& palette,
                 uint64_t seed, const nlohmann::json& extra_meta, const nn::Ema* ema) const {
  nn::Checkpoint ck;
  ck.meta = nlohmann::json{{"kind", "vqvae"},
                           {"config", cfg_.to_json()},
                           {"palette", palette.to_json()},
                           {"seed", seed}};
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

VqVae VqVae::load(const std::filesystem::path& path, bool prefer_ema,
                  synth::ClassPalette* palette_out) {
  nn::Checkpoint ck = nn::Checkpoint::load(path);
  require(ck.meta.value("kind", "") == "vqvae", Errc::missing_checkpoint,
          "checkpoint is not a vqvae model");
  VqVae model(AutoencoderConfig::from_json(ck.meta.at("config")),
              ck.meta.value("seed", uint64_t{0}));
  if (palette_out != nullptr) *palette_out = synth::ClassPalette::from_json(ck.meta.at("palette"));
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

nn::Var vqvae_loss(const nn::Var& logits, const std::vector<uint8_t>& labels,
                   const QuantizeResult& q, const std::vector<float>& class_weights,
                   float commitment_beta, bool include_codebook_term) {
  const float* pl = logits.val().data();
  for (int64_t i = 0; i < logits.numel(); ++i)
    require(std::isfinite(pl[i]), Errc::numeric, "vqvae loss: non-finite logits");
  nn::Var loss = nn::weighted_cross_entropy(logits, labels, class_weights);
  if (include_codebook_term) loss = nn::add(loss, q.codebook_loss);
  loss = nn::add(loss, nn::scale(q.commitment_loss, commitment_beta));
  require(std::isfinite(loss.val()[0]), Errc::numeric, "vqvae loss is not finite");
  return loss;
}

std::pair<Tensor, std::vector<uint8_t>> batch_one_hot(
    const std::vector<const voxel::SemanticOccupancyMap*>& maps) {
  require(!maps.empty(), Errc::invalid_argument, "batch_one_hot: empty batch");
  const auto& m0 = *maps[0];
  const int N = static_cast<int>(maps.size());
  const int64_t S = static_cast<int64_t>(m0.H) * m0.W * m0.Z;
  Tensor x = Tensor::zeros({N, m0.num_classes, m0.H, m0.W, m0.Z});
  std::vector<uint8_t> labels;
  labels.reserve(static_cast<size_t>(N * S));
  for (int n = 0; n < N; ++n) {
    const auto& m = *maps[static_cast<size_t>(n)];
    require(m.H == m0.H && m.W == m0.W && m.Z == m0.Z && m.num_classes == m0.num_classes,
            Errc::shape_mismatch, "batch_one_hot: mixed shapes in batch");
    float* base = x.data() + static_cast<int64_t>(n) * m0.num_classes * S;
    for (int64_t i = 0; i < S; ++i) {
      const uint8_t l = m.labels[static_cast<size_t>(i)];
      require(l < m.num_classes, Errc::invalid_label, "batch_one_hot: label out of range");
      base[static_cast<int64_t>(l) * S + i] = 1.0f;
      labels.push_back(l);
    }
  }
  return {std::move(x), std::move(labels)};
}

}  // namespace occdiff::vq
