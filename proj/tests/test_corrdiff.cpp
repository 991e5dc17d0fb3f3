#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qds/corrdiff.hpp"
#include "qds/gradcheck.hpp"
#include "qds/train.hpp"

using namespace qds;

namespace {

CorrDiffConfig tiny_config(bool hybrid) {
  CorrDiffConfig c;
  c.scale = 2;
  c.hi_size = 8;
  c.channels = {4, 4, 4};
  c.emb_dim = 8;
  c.T = 16;
  if (hybrid) {
    c.hybrid.enabled = true;
    c.hybrid.ansatz = {4, quantum::AnsatzVariant::A, 1};
    c.hybrid.n_circuits = 1;
  }
  return c;
}

Tensor random_tensor(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = n(rng);
  return Tensor::from(std::move(s), std::move(v));
}

void randomize(const UNet& net, std::uint64_t seed, double sd) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  for (const auto& [name, t] : net.parameters()) {
    Tensor p = t;
    for (double& v : p.mutable_data()) v += n(rng);
  }
}

}  // namespace

TEST(Schedule, LinearShortChainDecreasing) {
  const auto s = make_schedule(4, ScheduleKind::linear, 1e-4, 0.02);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  for (std::size_t t = 1; t <= 4; ++t) {
    EXPECT_GT(s.betas[t], 0.0);
    EXPECT_LT(s.betas[t], 1.0);
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    if (t > 1) {
      EXPECT_GT(s.betas[t], s.betas[t - 1]);
    }
  }
  EXPECT_NEAR(s.betas[1], 1e-4, 1e-15);
  EXPECT_NEAR(s.betas[4], 0.02, 1e-15);
}

TEST(Schedule, TerminalAlphaBarSmall) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine})
    for (std::size_t T : {16u, 64u, 1000u}) {
      const auto s = make_schedule(T, kind);
      EXPECT_LT(s.alpha_bar(T), 0.01) << T;
      EXPECT_EQ(s.alpha_bar(0), 1.0);
    }
}

TEST(Schedule, CosineClosedForm) {
  const auto s = make_schedule(64, ScheduleKind::cosine);
  auto f = [](double t) {
    const double c = std::cos((t / 64 + 0.008) / 1.008 * std::numbers::pi / 2);
    return c * c;
  };
  for (std::size_t t = 1; t < 64; ++t) EXPECT_NEAR(s.alpha_bar(t), f(double(t)) / f(0), 1e-12);
}

TEST(Schedule, Errors) {
  EXPECT_THROW(make_schedule(1, ScheduleKind::linear), ConfigError);
  EXPECT_THROW(make_schedule(8, ScheduleKind::linear, 0.5, 0.1), ConfigError);
  EXPECT_THROW(parse_schedule("sigmoid"), ConfigError);
  EXPECT_THROW(make_schedule(8, ScheduleKind::cosine).alpha_bar(9), ContractError);
}

TEST(Schedule, CleanLimitOfForwardProcess) {
  const auto s = make_schedule(8, ScheduleKind::linear);
  EXPECT_EQ(noise_residual(s, 0, 1.25, 7.0), 1.25);
}

TEST(ForwardNoising, MarginalVariance) {
  const auto s = make_schedule(64, ScheduleKind::linear);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> r0d(0.0, 2.0), n;
  for (std::size_t t : {16u, 32u, 64u}) {
    double m = 0, v = 0;
    std::vector<double> xs(10000);
    for (double& x : xs) {
      x = noise_residual(s, t, r0d(rng), n(rng));
      m += x;
    }
    m /= 10000;
    for (double x : xs) v += (x - m) * (x - m);
    v /= 10000;
    const double expect = s.alpha_bar(t) * 4.0 + (1 - s.alpha_bar(t));
    EXPECT_NEAR(v / expect, 1.0, 0.05) << "t=" << t;
  }
}

TEST(Regression, ZeroInputGivesZeroAtInit) {
  CorrDiffConfig cfg;
  const UNet reg(cfg.regression_unet(), 1);
  const Tensor y = regression_forward(reg, Tensor::zeros({2, 2, 8, 8}), cfg.scale, cfg.hi_size);
  EXPECT_EQ(y.shape(), (Shape{2, 2, 32, 32}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(regression_forward(reg, Tensor::zeros({1, 2, 16, 16}), cfg.scale, cfg.hi_size), ConfigError);
}

TEST(Regression, UpsamplesNearest) {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({1, 2, 3, 3}, rng);
  const Tensor u = upsample_nearest(x, 4);
  EXPECT_EQ(u.shape(), (Shape{1, 2, 12, 12}));
  EXPECT_EQ(u.data()[(1 * 12 + 7) * 12 + 5], x.data()[(1 * 3 + 1) * 3 + 1]);
}

TEST(DiffusionLoss, SeedReproducibleAndSeedSensitive) {
  const auto cfg = tiny_config(false);
  const UNet reg(cfg.regression_unet(), 1), model(cfg.diffusion_unet(), 2);
  randomize(model, 3, 0.1);
  const auto sched = make_schedule(cfg.T, cfg.schedule);
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({3, 2, 8, 8}, rng), y = random_tensor({3, 2, 4, 4}, rng);
  QuantumContext q;
  const double a = diffusion_loss(model, reg, sched, x, y, 2, 99, q).item();
  const double b = diffusion_loss(model, reg, sched, x, y, 2, 99, q).item();
  const double c = diffusion_loss(model, reg, sched, x, y, 2, 100, q).item();
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(DiffusionLoss, NonFiniteIsNumericError) {
  const auto cfg = tiny_config(false);
  const UNet reg(cfg.regression_unet(), 1), model(cfg.diffusion_unet(), 2);
  const auto sched = make_schedule(cfg.T, cfg.schedule);
  std::vector<double> bad(3 * 2 * 64, 0.0);
  bad[5] = std::nan("");
  QuantumContext q;
  EXPECT_THROW(diffusion_loss(model, reg, sched, Tensor::from({3, 2, 8, 8}, bad), Tensor::zeros({3, 2, 4, 4}), 2, 1, q),
               NumericError);
}

// A fresh diffusion UNet has a zero-initialized output layer, so it predicts
// eps = 0 and the reverse chain reduces to x_{t-1} = x_t / sqrt(alpha_t) + sigma_t z.
TEST(Sampling, ZeroPredictorMatchesAnalyticChain) {
  const auto cfg = tiny_config(false);
  const UNet model(cfg.diffusion_unet(), 5);
  const auto sched = make_schedule(cfg.T, cfg.schedule);
  double var = 1.0;
  for (std::size_t t = cfg.T; t >= 1; --t) {
    var /= sched.alphas[t];
    if (t > 1) var += sched.betas[t] * (1 - sched.alpha_bars[t - 1]) / (1 - sched.alpha_bars[t]);
  }
  const Tensor cond = Tensor::zeros({1, 4, 8, 8});
  double sum = 0, sq = 0, n = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    QuantumContext q;
    const Tensor r = sample_residual(model, cond, sched, s, q);
    for (double v : r.data()) {
      sum += v;
      sq += v * v;
      n += 1;
    }
  }
  const double mean = sum / n;
  EXPECT_LT(std::abs(mean), 3 * std::sqrt(var / n));
  EXPECT_NEAR(sq / n / var, 1.0, 0.05);
}

// The last step returns the clipped x0 estimate itself.
TEST(Sampling, ClipBoundsFinalSample) {
  const auto cfg = tiny_config(false);
  const UNet model(cfg.diffusion_unet(), 6);
  randomize(model, 9, 0.05);
  const auto sched = make_schedule(cfg.T, cfg.schedule);
  std::mt19937_64 rng(10);
  const Tensor cond = random_tensor({1, 4, 8, 8}, rng);
  double peak_free = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    QuantumContext q1, q2;
    const Tensor clipped = sample_residual(model, cond, sched, s, q1, 0.3);
    for (double v : clipped.data()) EXPECT_LE(std::abs(v), 0.3 + 1e-12);
    for (double v : sample_residual(model, cond, sched, s, q2).data()) peak_free = std::max(peak_free, std::abs(v));
  }
  EXPECT_GT(peak_free, 0.3);
}

TEST(Sampling, SeedDeterminism) {
  const auto cfg = tiny_config(false);
  const UNet model(cfg.diffusion_unet(), 6);
  randomize(model, 7, 0.05);
  const auto sched = make_schedule(cfg.T, cfg.schedule);
  std::mt19937_64 rng(8);
  const Tensor cond = random_tensor({1, 4, 8, 8}, rng);
  QuantumContext q1, q2, q3;
  const Tensor a = sample_residual(model, cond, sched, 11, q1);
  const Tensor b = sample_residual(model, cond, sched, 11, q2);
  const Tensor c = sample_residual(model, cond, sched, 12, q3);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.data()[i] - c.data()[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(Ensemble, ZeroResidualGivesRegression) {
  const auto cfg = tiny_config(false);
  CorrDiffModels models{cfg, UNet(cfg.regression_unet(), 1), UNet(cfg.diffusion_unet(), 2),
                        make_schedule(cfg.T, cfg.schedule)};
  randomize(models.regression, 9, 0.1);
  data::NormStats st;
  st.mean = {3.0, -1.0};
  st.std = {2.0, 0.5};
  std::mt19937_64 rng(10);
  const Tensor y = random_tensor({1, 2, 4, 4}, rng);
  const auto f = downscale_ensemble(models, y.data(), 4, st, 5,
                                    [](const Tensor&, std::uint64_t) { return Tensor::zeros({1, 2, 8, 8}); });
  ASSERT_EQ(f.members.size(), 4u);
  for (const auto& m : f.members) EXPECT_EQ(m, f.regression);
  EXPECT_THROW(downscale_ensemble(models, y.data(), 0, st, 5), ContractError);
}

TEST(Ensemble, ResidualIdentityAndDenormalization) {
  const auto cfg = tiny_config(false);
  CorrDiffModels models{cfg, UNet(cfg.regression_unet(), 1), UNet(cfg.diffusion_unet(), 2),
                        make_schedule(cfg.T, cfg.schedule)};
  randomize(models.regression, 11, 0.1);
  randomize(models.diffusion, 12, 0.05);
  data::NormStats st;
  st.mean = {4.0, 1.0};
  st.std = {1.7, 2.2};
  std::mt19937_64 rng(13);
  const Tensor y = random_tensor({1, 2, 4, 4}, rng);
  const auto f = downscale_ensemble(models, y.data(), 3, st, 21);
  for (std::size_t m = 0; m < 3; ++m) {
    std::vector<double> pred(f.regression_normalized.size());
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = f.regression_normalized[i] + f.residuals[m][i];
    EXPECT_EQ(data::denormalize(pred, st, 64), f.members[m]);
    const auto back = data::normalize(f.members[m], st, 64);
    for (std::size_t i = 0; i < pred.size(); ++i) EXPECT_NEAR(back[i], pred[i], 1e-10);
  }
  EXPECT_NE(f.members[0], f.members[1]);
  const auto again = downscale_ensemble(models, y.data(), 3, st, 21);
  EXPECT_EQ(again.members, f.members);
}

TEST(Interfaces, HybridAndClassicalShareShapes) {
  for (bool hybrid : {false, true}) {
    const auto cfg = tiny_config(hybrid);
    const UNet model(cfg.diffusion_unet(), 3);
    const auto sched = make_schedule(cfg.T, cfg.schedule);
    QuantumContext q;
    EXPECT_EQ(sample_residual(model, Tensor::zeros({1, 4, 8, 8}), sched, 1, q).shape(), (Shape{1, 2, 8, 8}));
  }
}

TEST(GradCheck, TinyHybridDiffusionUNet) {
  const auto cfg = tiny_config(true);
  const UNet model(cfg.diffusion_unet(), 4);
  randomize(model, 5, 0.3);
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({2, 6, 8, 8}, rng);
  const std::size_t ts[2] = {3, 11};
  const Tensor emb = timestep_embedding(ts, cfg.emb_dim);
  const Tensor target = random_tensor({2, 2, 8, 8}, rng);
  std::vector<Tensor> params;
  for (const auto& [name, t] : model.parameters()) params.push_back(t);
  auto f = [&] {
    QuantumContext q;
    return mse(model.forward(x, emb, q), target);
  };
  EXPECT_LT(finite_diff_check(f, params, 1e-4, 3), 1e-3);
}

TEST(Training, RegressionLossDecreasesOnTinyProblem) {
  data::FieldSpec spec;
  spec.height = spec.width = 8;
  auto plan = data::SplitPlan::contiguous(16, 1, 1, spec, spec, 2);
  plan.scale = 2;
  const auto sp = data::build_splits(plan);
  auto cfg = tiny_config(false);
  UNet reg(cfg.regression_unet(), 1);
  Adam opt(reg.parameters(), 3e-3);
  std::vector<double> losses;
  TrainOptions o;
  o.steps = 60;
  o.batch = 4;
  o.on_step = [&](std::size_t, double l) { losses.push_back(l); };
  train_regression(reg, sp.train, cfg, opt, 0, o);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += losses[i];
    tail += losses[losses.size() - 1 - i];
  }
  EXPECT_LT(tail, 0.8 * head);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  data::FieldSpec spec;
  spec.height = spec.width = 8;
  auto plan = data::SplitPlan::contiguous(8, 1, 1, spec, spec, 3);
  plan.scale = 2;
  const auto sp = data::build_splits(plan);
  const auto cfg = tiny_config(false);
  TrainOptions o;
  o.steps = 6;
  o.batch = 2;
  o.seed = 17;

  UNet full(cfg.regression_unet(), 1);
  Adam opt_full(full.parameters(), 1e-3);
  train_regression(full, sp.train, cfg, opt_full, 0, o);

  UNet part(cfg.regression_unet(), 1);
  Adam opt_part(part.parameters(), 1e-3);
  TrainOptions first = o;
  first.steps = 3;
  train_regression(part, sp.train, cfg, opt_part, 0, first);
  Checkpoint ck;
  part.append_to(ck);
  opt_part.append_state(ck);
  UNet resumed(cfg.regression_unet(), 99);
  resumed.load(ck);
  Adam opt_resumed(resumed.parameters(), 1e-3);
  opt_resumed.load_state(ck);
  train_regression(resumed, sp.train, cfg, opt_resumed, 3, o);

  for (std::size_t p = 0; p < full.parameters().size(); ++p) {
    const auto a = full.parameters()[p].second.data(), b = resumed.parameters()[p].second.data();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << full.parameters()[p].first;
  }
}
