#pragma once

// Seed-deterministic training loops. Step k draws its minibatch and noise from
// mix_seed(seed, k), so a run resumed at step k continues exactly where an
// uninterrupted run would be.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "qds/corrdiff.hpp"
#include "qds/data.hpp"
#include "qds/optim.hpp"
#include "qds/parallel.hpp"
#include "qds/tensor.hpp"

namespace qds {

struct Batch {
  Tensor x_hr;  // [B, 2, H, W] normalized
  Tensor y_lr;  // [B, 2, h, w] normalized
};

inline Batch make_batch(const data::Dataset& ds, const std::vector<std::size_t>& idx) {
  const std::size_t H = ds.hi_height(), h = ds.lo_height();
  std::vector<double> x, y;
  for (std::size_t i : idx) {
    const auto xn = data::normalize(ds.sample_hi(i), ds.stats, H * H);
    const auto yn = data::normalize(ds.sample_lo(i), ds.stats, h * h);
    x.insert(x.end(), xn.begin(), xn.end());
    y.insert(y.end(), yn.begin(), yn.end());
  }
  return {Tensor::from({idx.size(), 2, H, H}, std::move(x)), Tensor::from({idx.size(), 2, h, h}, std::move(y))};
}

inline std::vector<std::size_t> batch_indices(std::size_t n, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> d(0, n - 1);
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = d(rng);
  return idx;
}

struct TrainOptions {
  std::size_t steps = 500;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: never
  std::function<void(std::size_t step, double loss)> on_step;
  std::function<void(std::size_t next_step)> on_checkpoint;
};

/// Generic loop: loss_at(step) builds the graph for that step.
inline void train_loop(Adam& opt, std::size_t start, const TrainOptions& o,
                       const std::function<Tensor(std::size_t)>& loss_at) {
  for (std::size_t step = start; step < o.steps; ++step) {
    opt.zero_grad();
    Tensor loss = loss_at(step);
    if (!std::isfinite(loss.item()))
      throw NumericError("training loss non-finite at step " + std::to_string(step));
    backward(loss);
    opt.step();
    if (o.on_step) o.on_step(step, loss.item());
    if (o.checkpoint_every && (step + 1) % o.checkpoint_every == 0 && o.on_checkpoint) o.on_checkpoint(step + 1);
  }
}

inline void train_regression(UNet& reg, const data::Dataset& ds, const CorrDiffConfig& cfg, Adam& opt,
                             std::size_t start, const TrainOptions& o) {
  train_loop(opt, start, o, [&](std::size_t step) {
    const Batch b = make_batch(ds, batch_indices(ds.size(), o.batch, mix_seed(o.seed, step)));
    return mse(regression_forward(reg, b.y_lr, cfg.scale, cfg.hi_size), b.x_hr);
  });
}

inline void train_diffusion(UNet& model, const UNet& regression, const NoiseSchedule& sched, const data::Dataset& ds,
                            const CorrDiffConfig& cfg, Adam& opt, std::size_t start, const TrainOptions& o) {
  train_loop(opt, start, o, [&](std::size_t step) {
    const std::uint64_t s = mix_seed(o.seed, step);
    const Batch b = make_batch(ds, batch_indices(ds.size(), o.batch, s));
    QuantumContext exact;
    return diffusion_loss(model, regression, sched, b.x_hr, b.y_lr, cfg.scale, mix_seed(s, 1), exact);
  });
}

}  // namespace qds
