// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/diffusion/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "occdiff/synth/dataset.hpp"
#include "occdiff/util/error.hpp"

namespace occdiff::diffusion {

namespace fs = std::filesystem;

namespace {

struct LatentSet {
  std::vector<Tensor> latents;          // each [1,c,h,w,d], already scaled
  std::vector<voxel::BEVLayout> bevs;   // empty when the model is unconditional
};

// Encodes a split through the frozen autoencoder; maps are loaded one at a
// time so only the latents stay resident.
LatentSet encode_split(const fs::path& dir, const std::vector<synth::FrameRecord>& recs, int cap,
                       vq::VqVae& ae, bool conditional) {
  LatentSet out;
  const size_t n = cap > 0 ? std::min<size_t>(recs.size(), static_cast<size_t>(cap)) : recs.size();
  out.latents.reserve(n);
  if (conditional) out.bevs.reserve(n);
  nn::NoGradGuard ng;
  for (size_t i = 0; i < n; ++i) {
    voxel::SemanticOccupancyMap map = voxel::load_socc(dir / recs[i].socc);
    out.latents.push_back(ae.encode_quantized(map));
    if (conditional) out.bevs.push_back(voxel::load_sbev(dir / recs[i].sbev));
  }
  return out;
}

Tensor stack_latents(const std::vector<Tensor>& latents, const std::vector<size_t>& order,
                     size_t begin, size_t end) {
  const Tensor& first = latents[order[begin]];
  std::vector<int> shape = first.shape();
  shape[0] = static_cast<int>(end - begin);
  Tensor out(shape);
  const int64_t per = first.numel();
  for (size_t i = begin; i < end; ++i)
    std::copy_n(latents[order[i]].data(), per, out.data() + static_cast<int64_t>(i - begin) * per);
  return out;
}

}  // namespace

void DiffusionTrainSchedule::validate() const {
  require(epochs >= 0, Errc::config, "epochs must be >= 0");
  require(batch_size >= 1, Errc::config, "batch_size must be >= 1");
  require(lr > 0.0, Errc::config, "lr must be positive");
  require(cond_dropout >= 0.0f && cond_dropout <= 1.0f, Errc::config,
          "cond_dropout must lie in [0,1]");
  require(ema_decay > 0.0 && ema_decay < 1.0, Errc::config, "ema_decay must lie in (0,1)");
  require(!out_dir.empty(), Errc::config, "out_dir must be set");
}

Denoiser train_denoiser(const fs::path& dataset_dir, vq::VqVae& autoencoder,
                        const DenoiserConfig& config, const DiffusionTrainSchedule& schedule,
                        const NoiseSchedule& ns, DiffusionTrainResult* result) {
  schedule.validate();
  config.validate();
  ns.validate();
  fs::create_directories(schedule.out_dir);

  const bool conditional = config.conditioning_mode != ConditioningMode::kNone;
  synth::Manifest manifest = synth::Manifest::load(dataset_dir / "manifest.jsonl");
  LatentSet train =
      encode_split(dataset_dir, manifest.split("train"), schedule.max_train_frames, autoencoder,
                   conditional);
  LatentSet val = encode_split(dataset_dir, manifest.split("val"), schedule.max_val_frames,
                               autoencoder, conditional);
  require(!train.latents.empty(), Errc::config, "training split is empty");

  const Tensor& z0 = train.latents[0];
  require(z0.dim(1) == config.latent_channels, Errc::config,
          "latent_channels does not match the autoencoder output");
  if (conditional) {
    require(train.bevs[0].H == config.bev_height && train.bevs[0].W == config.bev_width,
            Errc::config, "layout dims do not match the denoiser config");
    require(train.bevs[0].num_classes == config.bev_classes, Errc::config,
            "layout class count does not match the denoiser config");
    require(config.bev_height / config.bev_downsample_factor == z0.dim(2) &&
                config.bev_width / config.bev_downsample_factor == z0.dim(3),
            Errc::config, "layout downsample factor does not match the latent grid");
  }

  // Standardize: one global scale, stored with every checkpoint.
  const float lat_std = latent_std(train.latents);
  require(lat_std > 0.0f, Errc::numeric, "training latents are constant");
  const float inv_std = 1.0f / lat_std;
  for (auto& t : train.latents)
    for (int64_t i = 0; i < t.numel(); ++i) t[i] *= inv_std;
  for (auto& t : val.latents)
    for (int64_t i = 0; i < t.numel(); ++i) t[i] *= inv_std;

  Denoiser model(config, schedule.seed);
  nn::Adam opt({schedule.lr, 0.9, 0.999, 1e-8});
  nn::Ema ema(model.params(), schedule.ema_decay);

  Rng root(schedule.seed);
  Rng shuffle_rng = root.fork(0x50FF);
  Rng batch_rng = root.fork(0xBA7C);

  const fs::path last_path = schedule.out_dir / "last.ckpt";
  std::ofstream log(schedule.out_dir / "train_log.jsonl", std::ios::trunc);

  auto save_ckpt = [&](int epoch, double loss, double val_loss) {
    model.save(last_path, schedule.seed,
               nlohmann::json{{"epoch", epoch},
                              {"loss", loss},
                              {"val_loss", val_loss},
                              {"latent_std", lat_std}},
               &ema);
  };
  save_ckpt(-1, 0.0, 0.0);

  std::vector<size_t> val_order(val.latents.size());
  for (size_t i = 0; i < val_order.size(); ++i) val_order[i] = i;

  // Fixed timestep/noise draws make the validation series comparable across
  // epochs; the rng is re-seeded identically every time.
  auto run_validation = [&]() {
    if (val.latents.empty()) return 0.0;
    nn::NoGradGuard ng;
    Rng vrng(schedule.seed ^ 0xA11DA7Eu);
    double sum = 0.0;
    int batches = 0;
    for (size_t i = 0; i < val.latents.size(); i += static_cast<size_t>(schedule.batch_size)) {
      const size_t end = std::min(val.latents.size(), i + static_cast<size_t>(schedule.batch_size));
      Tensor zb = stack_latents(val.latents, val_order, i, end);
      std::vector<const voxel::BEVLayout*> conds;
      if (conditional)
        for (size_t j = i; j < end; ++j) conds.push_back(&val.bevs[j]);
      Var loss = training_loss(model, zb, conds, ns, {.cond_dropout = 0.0f}, vrng);
      sum += loss.val()[0];
      ++batches;
    }
    return sum / std::max(batches, 1);
  };

  DiffusionTrainResult res;
  res.latent_std = lat_std;
  res.last_checkpoint = last_path;

  std::vector<size_t> order(train.latents.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  const LossOptions opts{.cond_dropout = schedule.cond_dropout,
                         .freeze_bev_encoder = schedule.freeze_bev_encoder};

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng erng = shuffle_rng.fork(static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(erng.uniform_int(static_cast<int>(i)))]);

    double loss_sum = 0.0;
    int steps = 0;
    for (size_t i = 0; i < order.size(); i += static_cast<size_t>(schedule.batch_size)) {
      const size_t end = std::min(order.size(), i + static_cast<size_t>(schedule.batch_size));
      Tensor zb = stack_latents(train.latents, order, i, end);
      std::vector<const voxel::BEVLayout*> conds;
      if (conditional)
        for (size_t j = i; j < end; ++j) conds.push_back(&train.bevs[order[j]]);
      Var loss;
      try {
        loss = training_loss(model, zb, conds, ns, opts, batch_rng);
      } catch (const Error& e) {
        if (e.code() != Errc::numeric) throw;
        raise(Errc::numeric, "training diverged (non-finite loss); last good checkpoint: " +
                                 last_path.string());
      }
      model.params().zero_grads();
      nn::backward(loss);
      nn::clip_grad_norm(model.params(), schedule.grad_clip);
      opt.step(model.params());
      ema.update(model.params());
      loss_sum += loss.val()[0];
      ++steps;
    }

    // Validation runs on the EMA weights.
    auto snap = ema.snapshot(model.params());
    ema.copy_to(model.params());
    const double val_loss = run_validation();
    nn::Ema::restore(model.params(), snap);

    const double mean_loss = loss_sum / std::max(steps, 1);
    save_ckpt(epoch, mean_loss, val_loss);

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    nlohmann::json line{{"epoch", epoch},
                        {"loss", mean_loss},
                        {"val_loss", val_loss},
                        {"latent_std", lat_std},
                        {"seconds", secs}};
    log << line.dump() << "\n";
    log.flush();
    std::fprintf(stderr, "[denoiser] epoch %d loss %.4f val_loss %.4f (%.1fs)\n", epoch, mean_loss,
                 val_loss, secs);

    res.epochs_run = epoch + 1;
    res.final_loss = mean_loss;
    res.final_val_loss = val_loss;
    res.epoch_losses.push_back(mean_loss);
  }

  ema.copy_to(model.params());  // returned model carries the eval weights
  if (result != nullptr) *result = res;
  return model;
}

}  // namespace occdiff::diffusion
