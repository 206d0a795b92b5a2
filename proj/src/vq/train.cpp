// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/vq/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "occdiff/eval/metrics.hpp"
#include "occdiff/synth/dataset.hpp"
#include "occdiff/util/error.hpp"
#include "occdiff/util/rng.hpp"

namespace occdiff::vq {

namespace fs = std::filesystem;

namespace {

constexpr int kReservoirRows = 4096;

std::vector<voxel::SemanticOccupancyMap> load_split(const fs::path& dir,
                                                    const std::vector<synth::FrameRecord>& recs,
                                                    int cap) {
  std::vector<voxel::SemanticOccupancyMap> maps;
  const size_t n = cap > 0 ? std::min<size_t>(recs.size(), static_cast<size_t>(cap)) : recs.size();
  maps.reserve(n);
  for (size_t i = 0; i < n; ++i) maps.push_back(voxel::load_socc(dir / recs[i].socc));
  return maps;
}

// Reservoir sample of latent row vectors seen during the current epoch.
struct RowReservoir {
  int dim = 0;
  int64_t seen = 0;
  std::vector<float> rows;  // up to kReservoirRows * dim

  void offer(const Tensor& z_rows, Rng& rng) {
    const int P = z_rows.dim(0);
    for (int p = 0; p < P; ++p, ++seen) {
      const float* src = z_rows.data() + static_cast<int64_t>(p) * dim;
      if (static_cast<int64_t>(rows.size()) < static_cast<int64_t>(kReservoirRows) * dim) {
        rows.insert(rows.end(), src, src + dim);
      } else {
        const int64_t j = static_cast<int64_t>(rng.uniform() * static_cast<double>(seen + 1));
        if (j < kReservoirRows)
          std::copy_n(src, dim, rows.data() + j * dim);
      }
    }
  }
  Tensor tensor() const {
    const int n = static_cast<int>(rows.size()) / std::max(dim, 1);
    Tensor t({std::max(n, 1), std::max(dim, 1)});
    t.fill(0.0f);
    std::copy(rows.begin(), rows.end(), t.data());
    return t;
  }
  void reset() {
    rows.clear();
    seen = 0;
  }
};

}  // namespace

void TrainSchedule::validate() const {
  require(epochs >= 0, Errc::config, "epochs must be >= 0");
  require(batch_size >= 1, Errc::config, "batch_size must be >= 1");
  require(lr > 0.0, Errc::config, "lr must be positive");
  require(target_iou > 0.0 && target_miou > 0.0, Errc::config, "targets must be positive");
  require(!out_dir.empty(), Errc::config, "out_dir must be set");
}

VqVae train_vqvae(const fs::path& dataset_dir, const AutoencoderConfig& config,
                  const TrainSchedule& schedule, TrainResult* result) {
  schedule.validate();
  config.validate();
  fs::create_directories(schedule.out_dir);

  synth::Manifest manifest = synth::Manifest::load(dataset_dir / "manifest.jsonl");
  auto train_maps = load_split(dataset_dir, manifest.split("train"), schedule.max_train_frames);
  auto val_maps = load_split(dataset_dir, manifest.split("val"), schedule.max_val_frames);
  require(!train_maps.empty(), Errc::config, "training split is empty");
  synth::DatasetInfo info = synth::DatasetInfo::load(dataset_dir);

  AutoencoderConfig cfg = config;
  cfg.num_classes = train_maps[0].num_classes;
  if (cfg.class_weights.empty()) {
    std::vector<int64_t> counts(static_cast<size_t>(cfg.num_classes), 0);
    for (const auto& m : train_maps)
      for (uint8_t l : m.labels) ++counts[l];
    cfg.class_weights = inverse_frequency_weights(counts);
  }
  cfg.validate();

  VqVae model(cfg, schedule.seed);
  nn::Adam opt({schedule.lr, 0.9, 0.999, 1e-8});
  nn::Ema ema(model.params(), cfg.ema_decay);
  EmaCodebookState cb_state;

  Rng root(schedule.seed);
  Rng shuffle_rng = root.fork(0x5F0F);
  Rng reseed_rng = root.fork(0xDEAD);
  Rng reservoir_rng = root.fork(0xE5E0);
  RowReservoir reservoir;
  reservoir.dim = cfg.latent_channels;

  const fs::path last_path = schedule.out_dir / "last.ckpt";
  const fs::path best_path = schedule.out_dir / "best.ckpt";
  std::ofstream log(schedule.out_dir / "train_log.jsonl", std::ios::trunc);

  auto save_ckpt = [&](const fs::path& p, int epoch, double iou, double miou) {
    model.save(p, info.palette, schedule.seed,
               nlohmann::json{{"epoch", epoch}, {"val_iou", iou}, {"val_miou", miou}}, &ema);
  };
  save_ckpt(last_path, -1, 0.0, 0.0);

  auto run_validation = [&]() {
    nn::NoGradGuard ng;
    eval::SegmentationStats stats(cfg.num_classes);
    const auto& maps = val_maps.empty() ? train_maps : val_maps;
    for (size_t i = 0; i < maps.size(); i += static_cast<size_t>(schedule.batch_size)) {
      std::vector<const voxel::SemanticOccupancyMap*> batch;
      for (size_t j = i; j < maps.size() && j < i + static_cast<size_t>(schedule.batch_size); ++j)
        batch.push_back(&maps[j]);
      auto [x, labels] = batch_one_hot(batch);
      nn::Var z = model.encode(nn::Var::constant(std::move(x)));
      const auto idx = quantize_indices(z.val(), model.codebook());
      Tensor z_q = latent_from_indices(idx, model.codebook(), z.shape());
      nn::Var logits = model.decode(nn::Var::constant(std::move(z_q)));
      // Per-sample argmax against the flat gt labels.
      const int N = logits.dim(0), C = logits.dim(1);
      const int64_t S = logits.numel() / (static_cast<int64_t>(N) * C);
      std::vector<uint8_t> pred(static_cast<size_t>(N) * static_cast<size_t>(S));
      const float* d = logits.val().data();
      for (int nidx = 0; nidx < N; ++nidx)
        for (int64_t s = 0; s < S; ++s) {
          const float* base = d + (static_cast<int64_t>(nidx) * C) * S + s;
          int best = 0;
          float bv = base[0];
          for (int c = 1; c < C; ++c)
            if (base[static_cast<int64_t>(c) * S] > bv) {
              bv = base[static_cast<int64_t>(c) * S];
              best = c;
            }
          pred[static_cast<size_t>(nidx * S + s)] = static_cast<uint8_t>(best);
        }
      stats.add_labels(labels.data(), pred.data(), static_cast<int64_t>(labels.size()));
    }
    return std::pair<double, double>(stats.occupancy_iou(), stats.miou());
  };

  TrainResult res;
  res.last_checkpoint = last_path;
  double best_miou = -1.0;

  if (schedule.epochs == 0) {
    auto [iou, miou] = run_validation();
    res.val_iou = iou;
    res.val_miou = miou;
    if (result != nullptr) *result = res;
    return model;
  }

  std::vector<size_t> order(train_maps.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng erng = shuffle_rng.fork(static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(erng.uniform_int(static_cast<int>(i)))]);

    double loss_sum = 0.0, cb_sum = 0.0, commit_sum = 0.0;
    int steps = 0;
    for (size_t i = 0; i < order.size(); i += static_cast<size_t>(schedule.batch_size)) {
      std::vector<const voxel::SemanticOccupancyMap*> batch;
      for (size_t j = i; j < order.size() && j < i + static_cast<size_t>(schedule.batch_size); ++j)
        batch.push_back(&train_maps[order[j]]);
      auto [x, labels] = batch_one_hot(batch);
      nn::Var xin = nn::Var::constant(std::move(x));
      nn::Var z = model.encode(xin);
      QuantizeResult q = model.quantize(z);
      nn::Var logits = model.decode(q.z_q);
      nn::Var loss;
      try {
        loss = vqvae_loss(logits, labels, q, cfg.class_weights, cfg.commitment_beta,
                          !cfg.ema_codebook);
      } catch (const Error& e) {
        if (e.code() != Errc::numeric) throw;
        raise(Errc::numeric, "training diverged (non-finite loss); last good checkpoint: " +
                                 last_path.string());
      }
      model.params().zero_grads();
      nn::backward(loss);
      nn::clip_grad_norm(model.params(), schedule.grad_clip);
      opt.step(model.params());
      if (cfg.ema_codebook)
        ema_codebook_update(model.codebook(), cb_state, q.z_rows, q.indices, 0.99);
      ema.update(model.params());
      reservoir.offer(q.z_rows, reservoir_rng);

      loss_sum += loss.val()[0];
      cb_sum += q.codebook_loss.val()[0];
      commit_sum += q.commitment_loss.val()[0];
      ++steps;
    }

    // Entries never selected this epoch restart from live encoder outputs.
    const int64_t used = model.codebook().used_entries();
    const int reseeded = reseed_dead_codes(model.codebook(), reservoir.tensor(), reseed_rng);
    if (cfg.ema_codebook && reseeded > 0 && cb_state.initialized) {
      const auto& cb = model.codebook();
      const float* e = cb.embeddings.val().data();
      for (int k = 0; k < cb.K; ++k) {
        if (cb.usage_counts[static_cast<size_t>(k)] != 0) continue;
        cb_state.cluster_size[static_cast<size_t>(k)] = 1.0;
        for (int j = 0; j < cb.dim; ++j)
          cb_state.means[static_cast<size_t>(k) * cb.dim + j] =
              e[static_cast<int64_t>(k) * cb.dim + j];
      }
    }
    model.codebook().reset_usage();
    reservoir.reset();

    // Validation runs on the EMA weights.
    auto snap = ema.snapshot(model.params());
    ema.copy_to(model.params());
    auto [iou, miou] = run_validation();
    nn::Ema::restore(model.params(), snap);

    save_ckpt(last_path, epoch, iou, miou);
    if (miou > best_miou) {
      best_miou = miou;
      save_ckpt(best_path, epoch, iou, miou);
      res.best_checkpoint = best_path;
    }

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double mean_loss = loss_sum / std::max(steps, 1);
    nlohmann::json line{{"epoch", epoch},
                        {"loss", mean_loss},
                        {"codebook_loss", cb_sum / std::max(steps, 1)},
                        {"commitment_loss", commit_sum / std::max(steps, 1)},
                        {"val_iou", iou},
                        {"val_miou", miou},
                        {"codebook_used", used},
                        {"reseeded", reseeded},
                        {"seconds", secs}};
    log << line.dump() << "\n";
    log.flush();
    std::fprintf(stderr, "[vqvae] epoch %d loss %.4f val_iou %.4f val_miou %.4f used %lld (%.1fs)\n",
                 epoch, mean_loss, iou, miou, static_cast<long long>(used), secs);

    res.epochs_run = epoch + 1;
    res.final_loss = mean_loss;
    res.epoch_losses.push_back(mean_loss);
    res.val_iou = iou;
    res.val_miou = miou;
    if (iou >= schedule.target_iou && miou >= schedule.target_miou) {
      res.reached_targets = true;
      break;
    }
  }

  ema.copy_to(model.params());  // returned model carries the eval weights
  if (result != nullptr) *result = res;
  return model;
}

}  // namespace occdiff::vq
