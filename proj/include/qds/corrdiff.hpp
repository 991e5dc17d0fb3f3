#pragma once

// Two-stage corrective diffusion downscaling.
//
// A deterministic regression UNet maps the nearest-upsampled coarse input to
// the conditional mean; a DDPM (epsilon prediction) generates the residual
// r = x - regression(y), conditioned on [upsampled y, regression output].
// Predictions are regression + sampled residual.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qds/data.hpp"
#include "qds/errors.hpp"
#include "qds/hybrid.hpp"
#include "qds/parallel.hpp"
#include "qds/tensor.hpp"
#include "qds/unet.hpp"

namespace qds {

enum class ScheduleKind { linear, cosine };

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown diffusion schedule '" + s + "' (expected linear or cosine)");
}

/// betas/alphas/alpha_bars indexed 0..T; index 0 is the clean-data convention
/// (beta_0 = 0, alpha_bar_0 = 1).
struct NoiseSchedule {
  std::size_t steps = 0;
  std::vector<double> betas, alphas, alpha_bars;

  double alpha_bar(std::size_t t) const {
    if (t > steps) throw ContractError("alpha_bar: t=" + std::to_string(t) + " beyond T=" + std::to_string(steps));
    return alpha_bars[t];
  }
};

/// Linear betas default to the usual [1e-4, 0.02] range rescaled by 1000/T so
/// short chains still end near pure noise.
inline NoiseSchedule make_schedule(std::size_t T, ScheduleKind kind, double beta_start = -1.0, double beta_end = -1.0) {
  if (T < 2) throw ConfigError("schedule: T must be >= 2, got " + std::to_string(T));
  NoiseSchedule s;
  s.steps = T;
  s.betas.assign(T + 1, 0.0);
  if (kind == ScheduleKind::linear) {
    const double scale = 1000.0 / static_cast<double>(T);
    const double b0 = beta_start > 0 ? beta_start : 1e-4 * scale;
    const double b1 = beta_end > 0 ? beta_end : std::min(0.02 * scale, 0.999);
    if (!(b0 > 0 && b1 < 1 && b0 < b1)) throw ConfigError("schedule: need 0 < beta_start < beta_end < 1");
    for (std::size_t t = 1; t <= T; ++t)
      s.betas[t] = b0 + (b1 - b0) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
  } else {
    constexpr double off = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / static_cast<double>(T) + off) / (1 + off) * std::numbers::pi / 2);
      return c * c;
    };
    for (std::size_t t = 1; t <= T; ++t)
      s.betas[t] = std::min(1.0 - f(static_cast<double>(t)) / f(static_cast<double>(t - 1)), 0.999);
  }
  s.alphas.resize(T + 1);
  s.alpha_bars.resize(T + 1);
  s.alphas[0] = s.alpha_bars[0] = 1.0;
  for (std::size_t t = 1; t <= T; ++t) {
    s.alphas[t] = 1.0 - s.betas[t];
    s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
  }
  return s;
}

/// Sinusoidal features of integer timesteps, [B, dim].
inline Tensor timestep_embedding(std::span<const std::size_t> t, std::size_t dim) {
  std::vector<double> v(t.size() * dim);
  const std::size_t half = dim / 2;
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[b]) * freq;
      v[b * dim + i] = std::sin(arg);
      v[b * dim + half + i] = std::cos(arg);
    }
  return Tensor::from({t.size(), dim}, std::move(v));
}

/// Nearest-neighbour upsampling by an integer factor, outside the graph.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  detail::require_rank(x, 4, "upsample_nearest");
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), H = h * factor, W = w * factor;
  std::vector<double> out(bc * H * W);
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out[(p * H + y) * W + xx] = x.data()[(p * h + y / factor) * w + xx / factor];
  return Tensor::from({x.dim(0), x.dim(1), H, W}, std::move(out));
}

struct CorrDiffConfig {
  std::size_t scale = 4;
  std::size_t hi_size = 32;
  std::vector<std::size_t> channels{8, 8, 16, 16, 16};
  std::size_t emb_dim = 32;
  std::size_t T = 64;
  ScheduleKind schedule = ScheduleKind::linear;
  HybridBottleneckConfig hybrid{};

  UNetConfig regression_unet() const {
    UNetConfig c;
    c.in_channels = 2;
    c.out_channels = 2;
    c.channels = channels;
    c.emb_dim = 0;
    return c;
  }
  UNetConfig diffusion_unet() const {
    UNetConfig c;
    c.in_channels = 6;  // x_t, upsampled y, regression mean
    c.out_channels = 2;
    c.channels = channels;
    c.emb_dim = emb_dim;
    c.hybrid = hybrid;
    return c;
  }
};

/// y_lr: [B, 2, h, w] normalized -> conditional mean [B, 2, H, W].
inline Tensor regression_forward(const UNet& reg, const Tensor& y_lr, std::size_t scale, std::size_t hi_size) {
  detail::require_rank(y_lr, 4, "regression input");
  if (y_lr.dim(2) * scale != hi_size || y_lr.dim(3) * scale != hi_size)
    throw ConfigError("regression: input " + std::to_string(y_lr.dim(2)) + "x" + std::to_string(y_lr.dim(3)) +
                      " does not upscale by " + std::to_string(scale) + " to " + std::to_string(hi_size));
  QuantumContext none;
  return reg.forward(upsample_nearest(y_lr, scale), Tensor{}, none);
}

/// Diffusion conditioning: channel concat of upsampled y and the regression mean.
inline Tensor make_condition(const Tensor& y_lr, const Tensor& mean, std::size_t scale) {
  NoGradGuard ng;
  return concat_channels({upsample_nearest(y_lr, scale), mean.detach()});
}

/// Forward process x_t = sqrt(alpha_bar_t) r0 + sqrt(1 - alpha_bar_t) eps.
inline double noise_residual(const NoiseSchedule& sched, std::size_t t, double r0, double eps) {
  const double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * r0 + std::sqrt(1 - ab) * eps;
}

/// Epsilon-prediction loss for one batch. x_hr, y_lr normalized; the
/// regression model is used without gradients.
inline Tensor diffusion_loss(const UNet& model, const UNet& regression, const NoiseSchedule& sched, const Tensor& x_hr,
                             const Tensor& y_lr, std::size_t scale, std::uint64_t seed, QuantumContext& qctx) {
  Tensor mean, cond;
  {
    NoGradGuard ng;
    mean = regression_forward(regression, y_lr, scale, x_hr.dim(2));
    cond = make_condition(y_lr, mean, scale);
  }
  const std::size_t batch = x_hr.dim(0), per = x_hr.numel() / batch;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tdist(1, sched.steps);
  std::normal_distribution<double> normal;
  std::vector<std::size_t> ts(batch);
  std::vector<double> xt(x_hr.numel()), eps(x_hr.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    ts[b] = tdist(rng);
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t k = b * per + i;
      eps[k] = normal(rng);
      xt[k] = noise_residual(sched, ts[b], x_hr.data()[k] - mean.data()[k], eps[k]);
    }
  }
  Tensor input = concat_channels({Tensor::from(x_hr.shape(), std::move(xt)), cond});
  Tensor pred = model.forward(input, timestep_embedding(ts, model.config().emb_dim), qctx);
  Tensor loss = mse(pred, Tensor::from(x_hr.shape(), std::move(eps)));
  if (!std::isfinite(loss.item()))
    throw NumericError("diffusion loss is non-finite (batch " + std::to_string(batch) + ", first t=" +
                       std::to_string(ts[0]) + ")");
  return loss;
}

/// Ancestral DDPM sampling of one residual [1, 2, H, W] given a [1, 4, H, W]
/// condition, using the posterior variance beta_tilde. Each step forms the
/// x0 estimate from the predicted noise; with x0_clip > 0 it is clamped to
/// [-x0_clip, x0_clip] before the posterior mean is taken.
inline Tensor sample_residual(const UNet& model, const Tensor& condition, const NoiseSchedule& sched,
                              std::uint64_t seed, QuantumContext& qctx, double x0_clip = 0.0) {
  NoGradGuard ng;
  const std::size_t H = condition.dim(2), W = condition.dim(3), n = 2 * H * W;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> x(n);
  for (double& v : x) v = normal(rng);
  for (std::size_t t = sched.steps; t >= 1; --t) {
    Tensor xt = Tensor::from({1, 2, H, W}, x);
    const std::size_t tt[1] = {t};
    const Tensor eps = model.forward(concat_channels({xt, condition}), timestep_embedding(tt, model.config().emb_dim), qctx);
    const double a = sched.alphas[t], ab = sched.alpha_bars[t], ab_prev = sched.alpha_bars[t - 1], beta = sched.betas[t];
    const double c0 = std::sqrt(ab_prev) * beta / (1 - ab), ct = std::sqrt(a) * (1 - ab_prev) / (1 - ab);
    const double sigma = t > 1 ? std::sqrt(beta * (1 - ab_prev) / (1 - ab)) : 0.0;
    const double s_ab = std::sqrt(ab), s_1mab = std::sqrt(1 - ab);
    for (std::size_t i = 0; i < n; ++i) {
      double x0 = (x[i] - s_1mab * eps.data()[i]) / s_ab;
      if (x0_clip > 0) x0 = std::clamp(x0, -x0_clip, x0_clip);
      x[i] = c0 * x0 + ct * x[i];
      if (t > 1) x[i] += sigma * normal(rng);
    }
  }
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError("sample_residual produced a non-finite value");
  return Tensor::from({1, 2, H, W}, std::move(x));
}

/// Largest |x - regression(y)| over a dataset (normalized units); used as the
/// sampler's x0 clip.
inline double residual_bound(const UNet& regression, const data::Dataset& ds, std::size_t scale) {
  NoGradGuard ng;
  const std::size_t H = ds.hi_height(), h = ds.lo_height(), W = ds.hi_width(), w = ds.lo_width();
  double bound = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto lo = data::normalize(ds.sample_lo(i), ds.stats, h * w);
    const auto hi = data::normalize(ds.sample_hi(i), ds.stats, H * W);
    const Tensor y = Tensor::from({1, 2, h, w}, lo);
    const Tensor mean = regression_forward(regression, y, scale, H);
    for (std::size_t k = 0; k < 2 * H * W; ++k) bound = std::max(bound, std::abs(hi[k] - mean.data()[k]));
  }
  return bound;
}

struct CorrDiffModels {
  CorrDiffConfig cfg;
  UNet regression;
  UNet diffusion;
  NoiseSchedule sched;
  double x0_clip = 0.0;  // 0: no clipping
};

/// M members in physical units plus the regression mean they share.
struct EnsembleForecast {
  std::size_t height = 0, width = 0;
  std::vector<std::vector<double>> members;  // each [2, H, W]
  std::vector<std::uint64_t> seeds;
  std::vector<double> regression;            // [2, H, W]
  std::vector<double> regression_normalized;  // [2, H, W]
  std::vector<std::vector<double>> residuals;  // normalized, one per member

  std::vector<double> mean() const {
    std::vector<double> m(members.at(0).size(), 0.0);
    for (const auto& mem : members)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += mem[i];
    for (double& v : m) v /= static_cast<double>(members.size());
    return m;
  }
};

/// Draws one normalized residual [1, 2, H, W] for (condition, member seed).
using ResidualSampler = std::function<Tensor(const Tensor& condition, std::uint64_t seed)>;

/// Member m = denormalize(regression(y) + residual(seed_m)).
inline EnsembleForecast downscale_ensemble(const CorrDiffModels& models, std::span<const double> y_lr_norm,
                                           std::size_t members, const data::NormStats& stats, std::uint64_t seed,
                                           const ResidualSampler& sampler) {
  if (members < 1) throw ContractError("downscale_ensemble: need at least one member");
  NoGradGuard ng;
  const std::size_t H = models.cfg.hi_size, W = H, h = H / models.cfg.scale;
  const Tensor y = Tensor::from({1, 2, h, h}, std::vector<double>(y_lr_norm.begin(), y_lr_norm.end()));
  const Tensor mean = regression_forward(models.regression, y, models.cfg.scale, H);
  const Tensor cond = make_condition(y, mean, models.cfg.scale);
  EnsembleForecast f;
  f.height = H;
  f.width = W;
  f.regression = data::denormalize(mean.data(), stats, H * W);
  f.regression_normalized.assign(mean.data().begin(), mean.data().end());
  f.members.resize(members);
  f.residuals.resize(members);
  for (std::size_t m = 0; m < members; ++m) f.seeds.push_back(mix_seed(seed, m));
  parallel_for(members, [&](std::size_t m) {
    const Tensor r = sampler(cond, f.seeds[m]);
    std::vector<double> pred(mean.numel());
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = mean.data()[i] + r.data()[i];
    f.members[m] = data::denormalize(pred, stats, H * W);
    f.residuals[m].assign(r.data().begin(), r.data().end());
  });
  return f;
}

/// Ensemble from the trained diffusion model; `backend` applies to the quantum branch.
inline EnsembleForecast downscale_ensemble(const CorrDiffModels& models, std::span<const double> y_lr_norm,
                                           std::size_t members, const data::NormStats& stats, std::uint64_t seed,
                                           const quantum::Backend& backend = quantum::Backend::exact()) {
  return downscale_ensemble(models, y_lr_norm, members, stats, seed, [&](const Tensor& cond, std::uint64_t s) {
    QuantumContext qctx{backend, s, 0};
    return sample_residual(models.diffusion, cond, models.sched, s, qctx, models.x0_clip);
  });
}

}  // namespace qds
