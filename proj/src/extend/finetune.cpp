// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/extend/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <unordered_map>

#include "occdiff/synth/dataset.hpp"
#include "occdiff/util/error.hpp"

namespace occdiff::extend {

namespace fs = std::filesystem;
using diffusion::Denoiser;
using diffusion::DiffusionTrainResult;
using diffusion::DiffusionTrainSchedule;
using diffusion::MaskCondition;
using diffusion::NoiseSchedule;

namespace {

struct PairSet {
  std::vector<Tensor> z0;       // [1,c,h,w,d] target latents, scaled
  std::vector<Tensor> z_known;  // [1,c,h,w,d] known latents, scaled, zero where unknown
  std::vector<Tensor> mask;     // [1,1,h,w,d], 1 = unknown
  std::vector<voxel::BEVLayout> bevs;  // target-frame layouts (conditional models)
};

// Consecutive-frame pairs per scene: the earlier frame projected into the
// later pose is the known region, the later frame is the target. Scenes
// with a single frame contribute nothing.
PairSet build_pairs(const fs::path& dir, const std::vector<synth::FrameRecord>& recs, int cap,
                    vq::VqVae& ae, float inv_std, bool conditional, int f, int fz) {
  std::map<std::string, std::vector<const synth::FrameRecord*>> scenes;
  for (const auto& r : recs) scenes[r.scene_id].push_back(&r);

  PairSet out;
  nn::NoGradGuard ng;
  for (auto& [scene_id, frames] : scenes) {
    if (cap > 0 && out.z0.size() >= static_cast<size_t>(cap)) break;
    if (frames.size() < 2) {
      std::fprintf(stderr, "[extend-ft] scene %s has one frame in this split; skipped\n",
                   scene_id.c_str());
      continue;
    }
    std::sort(frames.begin(), frames.end(),
              [](const synth::FrameRecord* a, const synth::FrameRecord* b) {
                return a->frame_index < b->frame_index;
              });
    std::unordered_map<int64_t, voxel::EgoPose> poses;
    for (const auto& p : voxel::load_poselog(dir / frames[0]->poselog)) poses[p.frame_index] = p;

    voxel::SemanticOccupancyMap prev = voxel::load_socc(dir / frames[0]->socc);
    for (size_t i = 1; i < frames.size(); ++i) {
      if (cap > 0 && out.z0.size() >= static_cast<size_t>(cap)) break;
      voxel::SemanticOccupancyMap cur = voxel::load_socc(dir / frames[i]->socc);
      const auto pa = poses.find(frames[i - 1]->frame_index);
      const auto pb = poses.find(frames[i]->frame_index);
      require(pa != poses.end() && pb != poses.end(), Errc::ingest,
              "pose log is missing a manifest frame");

      OverlapMask om = project(prev, pa->second, pb->second, f, fz);
      Tensor z0 = ae.encode_quantized(cur);
      Tensor zk = ae.encode_quantized(om.x_masked);
      for (int64_t j = 0; j < z0.numel(); ++j) z0[j] *= inv_std;
      const int c = zk.dim(1);
      const int64_t S = om.latent_mask.numel();
      for (int ch = 0; ch < c; ++ch)
        for (int64_t j = 0; j < S; ++j)
          zk[ch * S + j] = om.latent_mask[j] == 1.0f ? 0.0f : zk[ch * S + j] * inv_std;

      out.z0.push_back(std::move(z0));
      out.z_known.push_back(std::move(zk));
      out.mask.push_back(
          om.latent_mask.reshaped({1, 1, om.latent_mask.dim(0), om.latent_mask.dim(1),
                                   om.latent_mask.dim(2)}));
      if (conditional) out.bevs.push_back(voxel::load_sbev(dir / frames[i]->sbev));
      prev = std::move(cur);
    }
  }
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows, const std::vector<size_t>& order, size_t begin,
                  size_t end) {
  std::vector<int> shape = rows[order[begin]].shape();
  shape[0] = static_cast<int>(end - begin);
  Tensor out(shape);
  const int64_t per = rows[order[begin]].numel();
  for (size_t i = begin; i < end; ++i)
    std::copy_n(rows[order[i]].data(), per, out.data() + static_cast<int64_t>(i - begin) * per);
  return out;
}

// Batched mask condition; dropped samples get the all-unknown mask and zero
// known content.
MaskCondition stack_mask_cond(const PairSet& set, const std::vector<size_t>& order, size_t begin,
                              size_t end, const std::vector<char>& dropped) {
  MaskCondition mc;
  mc.mask = stack_rows(set.mask, order, begin, end);
  mc.z_known = stack_rows(set.z_known, order, begin, end);
  const int64_t mask_per = set.mask[order[begin]].numel();
  const int64_t z_per = set.z_known[order[begin]].numel();
  for (size_t i = begin; i < end; ++i) {
    if (!dropped[i - begin]) continue;
    std::fill_n(mc.mask.data() + static_cast<int64_t>(i - begin) * mask_per, mask_per, 1.0f);
    std::fill_n(mc.z_known.data() + static_cast<int64_t>(i - begin) * z_per, z_per, 0.0f);
  }
  return mc;
}

}  // namespace

Denoiser finetune_extension(const fs::path& dataset_dir, const Denoiser& pretrained,
                            vq::VqVae& autoencoder, float latent_std,
                            const DiffusionTrainSchedule& schedule, const NoiseSchedule& ns,
                            DiffusionTrainResult* result, float mask_dropout) {
  schedule.validate();
  ns.validate();
  require(latent_std > 0.0f, Errc::invalid_argument, "latent_std must be positive");
  require(mask_dropout >= 0.0f && mask_dropout <= 1.0f, Errc::invalid_argument,
          "mask_dropout must lie in [0,1]");
  fs::create_directories(schedule.out_dir);

  Denoiser model = pretrained.with_mask_channels();
  const auto& dcfg = model.config();
  const auto& acfg = autoencoder.config();
  const bool conditional = dcfg.conditioning_mode != diffusion::ConditioningMode::kNone;
  if (conditional)
    require(acfg.downsample_factor == dcfg.bev_downsample_factor, Errc::config,
            "autoencoder and denoiser disagree on the horizontal downsample factor");
  const float inv_std = 1.0f / latent_std;

  synth::Manifest manifest = synth::Manifest::load(dataset_dir / "manifest.jsonl");
  PairSet train = build_pairs(dataset_dir, manifest.split("train"), schedule.max_train_frames,
                              autoencoder, inv_std, conditional, acfg.downsample_factor,
                              acfg.z_downsample_factor);
  PairSet val = build_pairs(dataset_dir, manifest.split("val"), schedule.max_val_frames,
                            autoencoder, inv_std, conditional, acfg.downsample_factor,
                            acfg.z_downsample_factor);
  require(!train.z0.empty(), Errc::config, "no consecutive-frame pairs in the training split");
  require(train.z0[0].dim(1) == dcfg.latent_channels, Errc::config,
          "latent_channels does not match the autoencoder output");

  nn::Adam opt({schedule.lr, 0.9, 0.999, 1e-8});
  nn::Ema ema(model.params(), schedule.ema_decay);

  Rng root(schedule.seed);
  Rng shuffle_rng = root.fork(0x50FF);
  Rng batch_rng = root.fork(0xBA7C);
  Rng mask_rng = root.fork(0x3A5C);

  const fs::path last_path = schedule.out_dir / "last.ckpt";
  std::ofstream log(schedule.out_dir / "train_log.jsonl", std::ios::trunc);

  auto save_ckpt = [&](int epoch, double loss, double val_loss) {
    model.save(last_path, schedule.seed,
               nlohmann::json{{"epoch", epoch},
                              {"loss", loss},
                              {"val_loss", val_loss},
                              {"latent_std", latent_std},
                              {"extension", true}},
               &ema);
  };
  save_ckpt(-1, 0.0, 0.0);

  std::vector<size_t> val_order(val.z0.size());
  for (size_t i = 0; i < val_order.size(); ++i) val_order[i] = i;
  const std::vector<char> no_drop(static_cast<size_t>(schedule.batch_size), 0);

  auto run_validation = [&]() {
    if (val.z0.empty()) return 0.0;
    nn::NoGradGuard ng;
    Rng vrng(schedule.seed ^ 0xA11DA7Eu);
    double sum = 0.0;
    int batches = 0;
    for (size_t i = 0; i < val.z0.size(); i += static_cast<size_t>(schedule.batch_size)) {
      const size_t end = std::min(val.z0.size(), i + static_cast<size_t>(schedule.batch_size));
      Tensor zb = stack_rows(val.z0, val_order, i, end);
      MaskCondition mc = stack_mask_cond(val, val_order, i, end, no_drop);
      std::vector<const voxel::BEVLayout*> conds;
      if (conditional)
        for (size_t j = i; j < end; ++j) conds.push_back(&val.bevs[j]);
      Var loss = diffusion::training_loss(model, zb, conds, ns, {.cond_dropout = 0.0f}, vrng,
                                          nullptr, &mc);
      sum += loss.val()[0];
      ++batches;
    }
    return sum / std::max(batches, 1);
  };

  DiffusionTrainResult res;
  res.latent_std = latent_std;
  res.last_checkpoint = last_path;

  std::vector<size_t> order(train.z0.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  const diffusion::LossOptions opts{.cond_dropout = schedule.cond_dropout,
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
      Tensor zb = stack_rows(train.z0, order, i, end);
      std::vector<char> dropped(end - i, 0);
      for (auto& d : dropped) d = mask_rng.bernoulli(mask_dropout) ? 1 : 0;
      MaskCondition mc = stack_mask_cond(train, order, i, end, dropped);
      std::vector<const voxel::BEVLayout*> conds;
      if (conditional)
        for (size_t j = i; j < end; ++j) conds.push_back(&train.bevs[order[j]]);
      Var loss;
      try {
        loss = diffusion::training_loss(model, zb, conds, ns, opts, batch_rng, nullptr, &mc);
      } catch (const Error& e) {
        if (e.code() != Errc::numeric) throw;
        raise(Errc::numeric, "finetune diverged (non-finite loss); last good checkpoint: " +
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
                        {"latent_std", latent_std},
                        {"seconds", secs}};
    log << line.dump() << "\n";
    log.flush();
    std::fprintf(stderr, "[extend-ft] epoch %d loss %.4f val_loss %.4f (%.1fs)\n", epoch,
                 mean_loss, val_loss, secs);

    res.epochs_run = epoch + 1;
    res.final_loss = mean_loss;
    res.final_val_loss = val_loss;
    res.epoch_losses.push_back(mean_loss);
  }

  ema.copy_to(model.params());
  if (result != nullptr) *result = res;
  return model;
}

}  // namespace occdiff::extend
