// Copyright 2026 The occdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "occdiff/diffusion/engine.hpp"

#include <algorithm>
#include <cmath>

#include "occdiff/nn/autograd.hpp"
#include "occdiff/util/error.hpp"

namespace occdiff::diffusion {

NoiseSchedule NoiseSchedule::linear(int T, float beta_start, float beta_end) {
  require(T >= 1, Errc::invalid_argument, "schedule needs at least one step");
  NoiseSchedule ns;
  ns.T = T;
  ns.beta.resize(T);
  ns.alpha.resize(T);
  ns.alphabar.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double b =
        T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / double(T - 1);
    ns.beta[i] = static_cast<float>(b);
    ns.alpha[i] = static_cast<float>(1.0 - b);
    prod *= 1.0 - b;
    ns.alphabar[i] = static_cast<float>(prod);
  }
  ns.validate();
  return ns;
}

float NoiseSchedule::alphabar_at(int t) const {
  require(t >= 0 && t <= T, Errc::invalid_argument, "timestep outside [0, T]");
  return t == 0 ? 1.0f : alphabar[t - 1];
}

void NoiseSchedule::validate() const {
  require(T >= 1, Errc::invalid_argument, "schedule needs at least one step");
  require(static_cast<int>(beta.size()) == T && static_cast<int>(alpha.size()) == T &&
              static_cast<int>(alphabar.size()) == T,
          Errc::shape_mismatch, "schedule arrays must have length T");
  float prev = 1.0f;
  for (int i = 0; i < T; ++i) {
    require(beta[i] > 0.0f && beta[i] < 1.0f, Errc::invalid_argument,
            "beta values must lie in (0, 1)");
    require(alphabar[i] < prev, Errc::invalid_argument, "alphabar must decrease strictly");
    prev = alphabar[i];
  }
  require(alphabar[T - 1] < 1e-2f, Errc::invalid_argument,
          "alphabar at T must be small (< 1e-2) so the chain ends near pure noise");
}

void GuidanceConfig::validate() const {
  require(w >= 0.0f, Errc::invalid_argument, "guidance weight must be non-negative");
}

void SamplerSpec::validate(int T) const {
  require(steps >= 1, Errc::invalid_argument, "sampler needs at least one step");
  require(steps <= T, Errc::invalid_argument, "sampler steps cannot exceed the schedule's T");
  require(eta >= 0.0f && eta <= 1.0f, Errc::invalid_argument, "eta must lie in [0, 1]");
  if (kind == Kind::kDdpm)
    require(steps == T, Errc::invalid_argument, "the ancestral sampler runs all T steps");
}

Tensor forward_noise(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& ns) {
  require(t >= 1 && t <= ns.T, Errc::invalid_argument, "timestep outside [1, T]");
  require(noise.same_shape(z0), Errc::shape_mismatch, "noise shape differs from the latent's");
  const double ab = ns.alphabar_at(t);
  const float cs = static_cast<float>(std::sqrt(ab));
  const float cn = static_cast<float>(std::sqrt(1.0 - ab));
  Tensor out(z0.shape());
  for (int64_t i = 0; i < z0.numel(); ++i) out[i] = cs * z0[i] + cn * noise[i];
  return out;
}

TrainingBatch make_training_batch(const Tensor& z0, const NoiseSchedule& ns, float cond_dropout,
                                  Rng& rng) {
  require(z0.ndim() == 5, Errc::shape_mismatch, "latent batch must be [N,c,h,w,d]");
  const int N = z0.dim(0);
  const int64_t per = z0.numel() / N;
  TrainingBatch b;
  b.t.resize(N);
  b.dropped.resize(N);
  for (int i = 0; i < N; ++i) {
    b.t[i] = 1 + rng.uniform_int(ns.T);
    b.dropped[i] = rng.bernoulli(cond_dropout) ? 1 : 0;
  }
  b.noise = Tensor(z0.shape());
  rng.fill_normal({b.noise.data(), static_cast<size_t>(b.noise.numel())});
  b.z_t = Tensor(z0.shape());
  for (int i = 0; i < N; ++i) {
    const double ab = ns.alphabar_at(b.t[i]);
    const float cs = static_cast<float>(std::sqrt(ab));
    const float cn = static_cast<float>(std::sqrt(1.0 - ab));
    const float* z = z0.data() + i * per;
    const float* e = b.noise.data() + i * per;
    float* o = b.z_t.data() + i * per;
    for (int64_t j = 0; j < per; ++j) o[j] = cs * z[j] + cn * e[j];
  }
  return b;
}

Var training_loss(Denoiser& model, const Tensor& z0,
                  const std::vector<const voxel::BEVLayout*>& conds, const NoiseSchedule& ns,
                  const LossOptions& opts, Rng& rng, TrainingBatch* batch_out,
                  const MaskCondition* mask_cond) {
  const int N = z0.dim(0);
  const bool conditional = model.config().conditioning_mode != ConditioningMode::kNone;
  if (conditional)
    require(static_cast<int>(conds.size()) == N, Errc::invalid_argument,
            "need one layout per sample");
  else
    require(conds.empty(), Errc::invalid_argument, "unconditional model takes no layouts");

  TrainingBatch batch = make_training_batch(z0, ns, conditional ? opts.cond_dropout : 0.0f, rng);
  Var pred;
  if (conditional) {
    std::vector<Var> embeds;
    embeds.reserve(N);
    for (int i = 0; i < N; ++i) {
      if (batch.dropped[i]) {
        embeds.push_back(model.null_condition().values);
      } else {
        Var e = model.embed_bev(*conds[i]).values;
        embeds.push_back(opts.freeze_bev_encoder ? nn::stopgrad(e) : e);
      }
    }
    BEVEmbedding emb{nn::stack_batch(embeds)};
    pred = model.predict_noise(Var::constant(batch.z_t.clone()), batch.t, &emb, mask_cond);
  } else {
    pred = model.predict_noise(Var::constant(batch.z_t.clone()), batch.t, nullptr, mask_cond);
  }
  Var loss = nn::mse(pred, Var::constant(batch.noise.clone()));
  require(std::isfinite(loss.val()[0]), Errc::numeric, "training loss is not finite");
  if (batch_out != nullptr) *batch_out = std::move(batch);
  return loss;
}

Tensor guided_noise(Denoiser& model, const Tensor& z_t, int t, const BEVEmbedding& cond,
                    const GuidanceConfig& g, const MaskCondition* mask_cond) {
  require(model.config().conditioning_mode != ConditioningMode::kNone, Errc::invalid_argument,
          "guidance requires a conditional model");
  g.validate();
  Tensor eps_c = model.predict_noise_eval(z_t, t, &cond, mask_cond);
  BEVEmbedding null_tok = model.null_condition();
  Tensor eps_u = model.predict_noise_eval(z_t, t, &null_tok, mask_cond);
  Tensor out(z_t.shape());
  if (g.form == GuidanceConfig::Form::kInterpolated) {
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = eps_u[i] + g.w * (eps_c[i] - eps_u[i]);
  } else {
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = (1.0f + g.w) * eps_c[i] - g.w * eps_u[i];
  }
  return out;
}

Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& ns,
                 Rng& rng) {
  require(t >= 1 && t <= ns.T, Errc::invalid_argument, "timestep outside [1, T]");
  require(eps_hat.same_shape(z_t), Errc::shape_mismatch, "noise prediction shape mismatch");
  const double beta = ns.beta[t - 1];
  const double ab = ns.alphabar_at(t);
  const double ab_prev = ns.alphabar_at(t - 1);
  const float ce = static_cast<float>(beta / std::sqrt(1.0 - ab));
  const float inv_sa = static_cast<float>(1.0 / std::sqrt(1.0 - beta));
  Tensor out(z_t.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = inv_sa * (z_t[i] - ce * eps_hat[i]);
  if (t > 1) {
    const float sigma = static_cast<float>(std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)));
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += sigma * rng.normalf();
  }
  return out;
}

Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& ns, float eta, Rng& rng) {
  require(t >= 1 && t <= ns.T, Errc::invalid_argument, "timestep outside [1, T]");
  require(t_prev >= 0 && t_prev < t, Errc::invalid_argument, "t_prev must lie in [0, t)");
  require(eps_hat.same_shape(z_t), Errc::shape_mismatch, "noise prediction shape mismatch");
  const double ab = ns.alphabar_at(t);
  const double ab_prev = ns.alphabar_at(t_prev);
  const double sigma =
      eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  const float c0 = static_cast<float>(std::sqrt(ab_prev));
  const float chat = static_cast<float>(1.0 / std::sqrt(ab));
  const float cnoise = static_cast<float>(std::sqrt(1.0 - ab));
  const float ce = static_cast<float>(std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)));
  Tensor out(z_t.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    const float zhat0 = chat * (z_t[i] - cnoise * eps_hat[i]);
    out[i] = c0 * zhat0 + ce * eps_hat[i];
  }
  if (sigma > 0.0) {
    const float s = static_cast<float>(sigma);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s * rng.normalf();
  }
  return out;
}

namespace {

// Uniformly strided descending timesteps: ts[k] = k*T/steps, k = steps..1,
// followed by 0; strictly decreasing since steps <= T.
std::vector<int> sampler_timesteps(int T, int steps) {
  std::vector<int> ts;
  ts.reserve(steps + 1);
  for (int k = steps; k >= 1; --k)
    ts.push_back(static_cast<int>((static_cast<int64_t>(k) * T) / steps));
  ts.push_back(0);
  return ts;
}

Tensor predict_for_sampling(Denoiser& model, const Tensor& z, int t, const BEVEmbedding* cond,
                            const GuidanceConfig* guidance, const MaskCondition* mask_cond) {
  const bool conditional = model.config().conditioning_mode != ConditioningMode::kNone;
  if (guidance != nullptr) {
    require(cond != nullptr, Errc::invalid_argument, "guidance requires a condition");
    return guided_noise(model, z, t, *cond, *guidance, mask_cond);
  }
  if (cond != nullptr) return model.predict_noise_eval(z, t, cond, mask_cond);
  if (conditional) {
    BEVEmbedding null_tok = model.null_condition();
    return model.predict_noise_eval(z, t, &null_tok, mask_cond);
  }
  return model.predict_noise_eval(z, t, nullptr, mask_cond);
}

}  // namespace

Tensor sample_latent(Denoiser& model, const BEVEmbedding* cond,
                     const std::vector<int>& latent_shape, const SamplerSpec& spec,
                     const NoiseSchedule& ns, const GuidanceConfig* guidance) {
  ns.validate();
  spec.validate(ns.T);
  require(latent_shape.size() == 4, Errc::shape_mismatch, "latent shape must be [c,h,w,d]");
  std::vector<int> shape = {1, latent_shape[0], latent_shape[1], latent_shape[2], latent_shape[3]};

  Rng root(spec.seed);
  Rng init_rng = root.fork(0);
  Rng step_rng = root.fork(1);
  Tensor z(shape);
  init_rng.fill_normal({z.data(), static_cast<size_t>(z.numel())});

  const auto ts = sampler_timesteps(ns.T, spec.steps);
  for (size_t k = 0; k + 1 < ts.size(); ++k) {
    const int t = ts[k], t_prev = ts[k + 1];
    Tensor eps = predict_for_sampling(model, z, t, cond, guidance, nullptr);
    z = spec.kind == SamplerSpec::Kind::kDdpm ? ddpm_step(z, t, eps, ns, step_rng)
                                              : ddim_step(z, t, t_prev, eps, ns, spec.eta,
                                                          step_rng);
  }
  return z;
}

Tensor masked_sample(Denoiser& model, const BEVEmbedding* cond, const Tensor& mask,
                     const Tensor& z0_known, const SamplerSpec& spec, const NoiseSchedule& ns,
                     const GuidanceConfig* guidance) {
  ns.validate();
  spec.validate(ns.T);
  require(mask.ndim() == 3, Errc::shape_mismatch, "mask must be [h,w,d]");
  const int h = mask.dim(0), w = mask.dim(1), d = mask.dim(2);
  const int64_t S = mask.numel();
  for (int64_t i = 0; i < S; ++i)
    require(mask[i] == 0.0f || mask[i] == 1.0f, Errc::invalid_argument,
            "mask values must be 0 or 1");
  require(z0_known.ndim() == 4 || z0_known.ndim() == 5, Errc::shape_mismatch,
          "z0_known must be [c,h,w,d] or [1,c,h,w,d]");
  const int c = z0_known.ndim() == 4 ? z0_known.dim(0) : z0_known.dim(1);
  Tensor z0k = z0_known.reshaped({1, c, h, w, d});
  // Zero the unknown region so the content in generated cells cannot leak.
  for (int ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < S; ++i)
      if (mask[i] == 1.0f) z0k[ch * S + i] = 0.0f;

  MaskCondition mc;
  MaskCondition* mc_ptr = nullptr;
  if (model.config().mask_conditioning) {
    mc.mask = mask.reshaped({1, 1, h, w, d});
    mc.z_known = z0k.clone();
    mc_ptr = &mc;
  }

  Rng root(spec.seed);
  Rng init_rng = root.fork(0);
  Rng step_rng = root.fork(1);
  Rng known_rng = root.fork(2);
  Tensor z({1, c, h, w, d});
  init_rng.fill_normal({z.data(), static_cast<size_t>(z.numel())});

  Tensor xi({1, c, h, w, d});
  const auto ts = sampler_timesteps(ns.T, spec.steps);
  for (size_t k = 0; k + 1 < ts.size(); ++k) {
    const int t = ts[k], t_prev = ts[k + 1];
    Tensor eps = predict_for_sampling(model, z, t, cond, guidance, mc_ptr);
    Tensor unknown = spec.kind == SamplerSpec::Kind::kDdpm
                         ? ddpm_step(z, t, eps, ns, step_rng)
                         : ddim_step(z, t, t_prev, eps, ns, spec.eta, step_rng);
    Tensor known;
    if (t_prev > 0) {
      known_rng.fill_normal({xi.data(), static_cast<size_t>(xi.numel())});
      known = forward_noise(z0k, t_prev, xi, ns);
    } else {
      known = z0k.clone();
    }
    for (int ch = 0; ch < c; ++ch) {
      float* zp = z.data() + ch * S;
      const float* u = unknown.data() + ch * S;
      const float* kn = known.data() + ch * S;
      for (int64_t i = 0; i < S; ++i) zp[i] = mask[i] == 1.0f ? u[i] : kn[i];
    }
  }
  return z;
}

float latent_std(const std::vector<Tensor>& latents) {
  int64_t n = 0;
  double sum = 0.0;
  for (const Tensor& t : latents) {
    for (int64_t i = 0; i < t.numel(); ++i) sum += t[i];
    n += t.numel();
  }
  require(n >= 2, Errc::invalid_argument, "need at least two latent elements");
  const double mean = sum / n;
  double sq = 0.0;
  for (const Tensor& t : latents)
    for (int64_t i = 0; i < t.numel(); ++i) sq += (t[i] - mean) * (t[i] - mean);
  return static_cast<float>(std::sqrt(sq / n));
}

}  // namespace occdiff::diffusion
