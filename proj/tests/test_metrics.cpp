#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "qds/data.hpp"
#include "qds/metrics.hpp"

using namespace qds::metrics;

namespace {

std::vector<double> normal_vec(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

double crps_bruteforce(const std::vector<std::vector<double>>& members, const std::vector<double>& truth) {
  const double M = static_cast<double>(members.size());
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    double a = 0.0, b = 0.0;
    for (const auto& x : members) a += std::abs(x[i] - truth[i]);
    for (const auto& x : members)
      for (const auto& y : members) b += std::abs(x[i] - y[i]);
    total += a / M - b / (2 * M * M);
  }
  return total / static_cast<double>(truth.size());
}

// Direct neighbourhood sums with explicit bounds checks.
double fss_bruteforce(const std::vector<double>& p, const std::vector<double>& o, int h, int w, double thr, int n) {
  auto frac = [&](const std::vector<double>& f, int y, int x) {
    double c = 0;
    for (int dy = -n / 2; dy <= n / 2; ++dy)
      for (int dx = -n / 2; dx <= n / 2; ++dx) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < h && xx >= 0 && xx < w && f[yy * w + xx] >= thr) c += 1;
      }
    return c / (n * n);
  };
  double num = 0, den = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double a = frac(p, y, x), b = frac(o, y, x);
      num += (a - b) * (a - b);
      den += a * a + b * b;
    }
  return den == 0 ? 1.0 : 1 - num / den;
}

}  // namespace

TEST(Mae, Examples) {
  const std::vector<double> t{1, 2, 3, 4};
  EXPECT_EQ(mae(t, t), 0.0);
  EXPECT_EQ(rmse(t, t), 0.0);
  const std::vector<double> p1{2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(mae(p1, t), 1.0);
  EXPECT_DOUBLE_EQ(rmse(p1, t), 1.0);
  const std::vector<double> p2{3, 0, 5, 2};
  EXPECT_DOUBLE_EQ(mae(p2, t), 2.0);
  EXPECT_DOUBLE_EQ(rmse(p2, t), 2.0);
  EXPECT_THROW(mae(std::vector<double>{1}, t), qds::ContractError);
}

TEST(Crps, SingleMemberEqualsMaeExactly) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 50; ++rep) {
    const auto x = normal_vec(257, rng), o = normal_vec(257, rng);
    EXPECT_EQ(crps_ensemble(std::vector<std::vector<double>>{x}, o), mae(x, o));
  }
}

TEST(Crps, TwoMemberExample) {
  const std::vector<std::vector<double>> members{{0.0}, {1.0}};
  EXPECT_DOUBLE_EQ(crps_ensemble(members, std::vector<double>{0.0}), 0.25);
  EXPECT_DOUBLE_EQ(crps_bruteforce(members, {0.0}), 0.25);
}

TEST(Crps, PerfectEnsembleIsZero) {
  const std::vector<double> t{0.5, -1.0, 2.0};
  EXPECT_EQ(crps_ensemble(std::vector<std::vector<double>>{t, t, t}, t), 0.0);
}

TEST(Crps, EmptyEnsembleIsContractError) {
  EXPECT_THROW(crps_ensemble(std::vector<std::vector<double>>{}, std::vector<double>{1.0}), qds::ContractError);
}

TEST(Crps, NonNegativeAndMatchesDoubleSum) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> msize(1, 12), nsize(1, 20);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t M = static_cast<std::size_t>(msize(rng)), n = static_cast<std::size_t>(nsize(rng));
    std::vector<std::vector<double>> mem;
    for (std::size_t m = 0; m < M; ++m) mem.push_back(normal_vec(n, rng, 2.0));
    const auto o = normal_vec(n, rng, 2.0);
    const double c = crps_ensemble(mem, o);
    ASSERT_GE(c, 0.0);
    ASSERT_NEAR(c, crps_bruteforce(mem, o), 1e-12);
  }
}

TEST(Fss, PerfectForecastIsOne) {
  std::mt19937_64 rng(3);
  const auto f = normal_vec(64, rng);
  for (std::size_t n : {1u, 3u, 5u}) EXPECT_EQ(fss(f, f, 8, 8, 0.5, n), 1.0);
}

TEST(Fss, DisjointAtUnitNeighbourhoodIsZero) {
  std::vector<double> p(64, 0.0), o(64, 0.0);
  p[0] = 1;
  o[63] = 1;
  EXPECT_EQ(fss(p, o, 8, 8, 0.5, 1), 0.0);
}

TEST(Fss, NoExceedancesIsOne) {
  std::vector<double> z(16, 0.0);
  EXPECT_EQ(fss(z, z, 4, 4, 1.0, 3), 1.0);
}

TEST(Fss, OffsetCaseMatchesBruteForce) {
  std::vector<double> p(16, 0.0), o(16, 0.0);
  p[1 * 4 + 1] = 1;
  o[1 * 4 + 2] = 1;
  const double ref = fss_bruteforce(p, o, 4, 4, 0.5, 3);
  EXPECT_NEAR(fss(p, o, 4, 4, 0.5, 3), ref, 1e-12);
  EXPECT_GT(ref, 0.0);
  EXPECT_LT(ref, 1.0);
}

TEST(Fss, RandomFieldsMatchBruteForceAndStayInRange) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 40; ++rep) {
    const auto p = normal_vec(16 * 12, rng), o = normal_vec(16 * 12, rng);
    for (int n : {1, 3, 5, 9}) {
      const double v = fss(p, o, 16, 12, 1.0, static_cast<std::size_t>(n));
      ASSERT_NEAR(v, fss_bruteforce(p, o, 16, 12, 1.0, n), 1e-12);
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Fss, PooledTermsAddAcrossFields) {
  // Disjoint single exceedances at n=1 give num 2, den 2; a perfect pair with
  // three exceedances gives num 0, den 6. Pooled score is 1 - 2/8.
  std::vector<double> p(64, 0.0), o(64, 0.0), f(64, 0.0);
  p[0] = 1;
  o[63] = 1;
  f[5] = f[20] = f[41] = 1;
  FssTerms t = fss_terms(p, o, 8, 8, 0.5, 1);
  EXPECT_EQ(t.num, 2.0);
  EXPECT_EQ(t.den, 2.0);
  t += fss_terms(f, f, 8, 8, 0.5, 1);
  EXPECT_DOUBLE_EQ(t.score(), 0.75);
  EXPECT_EQ(FssTerms{}.score(), 1.0);
}

TEST(Fss, RejectsEvenNeighbourhood) {
  std::vector<double> z(16, 0.0);
  EXPECT_THROW(fss(z, z, 4, 4, 1.0, 2), qds::ConfigError);
}

TEST(Spectrum, PureTonePeak) {
  const std::size_t N = 32;
  std::vector<double> f(2 * N * N, 0.0);
  for (std::size_t y = 0; y < N; ++y)
    for (std::size_t x = 0; x < N; ++x) f[y * N + x] = std::sin(2 * std::numbers::pi * 3 * static_cast<double>(x) / N);
  const auto c = directional_spectrum(f, 1, N, N, Direction::zonal);
  ASSERT_EQ(c.k.size(), N / 2 - 1);
  for (std::size_t i = 0; i < c.k.size(); ++i) {
    // |X_3|^2 = (N/2)^2, times 0.5 / N^2
    if (c.k[i] == 3) {
      EXPECT_NEAR(c.power[i], 0.125, 1e-10);
    } else {
      EXPECT_NEAR(c.power[i], 0.0, 1e-10);
    }
  }
  const auto m = directional_spectrum(f, 1, N, N, Direction::meridional);
  for (double p : m.power) EXPECT_NEAR(p, 0.0, 1e-10);
}

TEST(Spectrum, ConstantFieldIsZero) {
  std::vector<double> f(2 * 16 * 16, 3.5);
  for (auto dir : {Direction::zonal, Direction::meridional})
    for (double p : directional_spectrum(f, 1, 16, 16, dir).power) EXPECT_NEAR(p, 0.0, 1e-20);
}

TEST(Spectrum, RejectsNonPowerOfTwo) {
  std::vector<double> f(2 * 12 * 12, 0.0);
  EXPECT_THROW(directional_spectrum(f, 1, 12, 12, Direction::zonal), qds::ConfigError);
}

TEST(Spectrum, ParsevalIdentity) {
  std::mt19937_64 rng(5);
  const std::size_t H = 16, W = 32, S = 3;
  const auto f = normal_vec(S * 2 * H * W, rng);
  for (auto dir : {Direction::zonal, Direction::meridional}) {
    const bool zonal = dir == Direction::zonal;
    const std::size_t n = zonal ? W : H, lines = zonal ? H : W;
    const auto c = directional_spectrum(f, S, H, W, dir);
    // Line variances and Nyquist power computed directly, without the FFT.
    double half_var = 0.0, nyq = 0.0;
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t l = 0; l < lines; ++l) {
          auto at = [&](std::size_t i) {
            const std::size_t y = zonal ? l : i, x = zonal ? i : l;
            return f[((s * 2 + ch) * H + y) * W + x];
          };
          double mean = 0.0, alt = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            mean += at(i);
            alt += (i % 2 ? -1.0 : 1.0) * at(i);
          }
          mean /= static_cast<double>(n);
          double var = 0.0;
          for (std::size_t i = 0; i < n; ++i) var += (at(i) - mean) * (at(i) - mean);
          half_var += 0.5 * var / static_cast<double>(n);
          nyq += 0.5 * alt * alt / static_cast<double>(n * n);
        }
    half_var /= static_cast<double>(S * lines);
    nyq /= static_cast<double>(S * lines);
    double total = nyq;
    for (double p : c.power) total += 2 * p;
    EXPECT_NEAR(total / half_var, 1.0, 1e-6) << direction_name(dir);
  }
}

TEST(Spectrum, GrfSlopeRecovery) {
  qds::data::FieldSpec spec;
  spec.gamma = 3.0;
  spec.rho = 0.0;
  std::vector<double> fields;
  for (std::uint64_t s = 0; s < 100; ++s) {
    spec.seed = 1000 + s;
    const auto w = qds::data::generate_sample(spec);
    fields.insert(fields.end(), w.hi.begin(), w.hi.end());
  }
  for (auto dir : {Direction::zonal, Direction::meridional}) {
    const double slope = loglog_slope(directional_spectrum(fields, 100, 32, 32, dir), 2, 8);
    EXPECT_NEAR(slope, -3.0, 0.3) << direction_name(dir);
  }
}

TEST(LogPdf, ConstantSpeedSingleBin) {
  std::vector<double> f(2 * 16, 0.0);
  for (std::size_t i = 0; i < 16; ++i) {
    f[i] = 3.0;
    f[16 + i] = 4.0;
  }
  const auto pdf = windspeed_log_pdf(f, 16, 10);
  std::size_t occupied = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    if (std::isfinite(pdf.log10_density[i])) {
      ++occupied;
      EXPECT_LE(std::abs(pdf.centers[i] - 5.0), pdf.bin_width / 2 + 1e-12);
    }
  }
  EXPECT_EQ(occupied, 1u);
  EXPECT_EQ(pdf.log10_density.size(), 10u);
}

TEST(LogPdf, RayleighModeAndNormalization) {
  std::mt19937_64 rng(6);
  const double sr = 2.0;
  const std::size_t n = 100000;
  const auto u = normal_vec(n, rng, sr), v = normal_vec(n, rng, sr);
  std::vector<double> f(u);
  f.insert(f.end(), v.begin(), v.end());
  const auto pdf = windspeed_log_pdf(f, n, 60);
  double mass = 0.0;
  for (double d : pdf.density) mass += d * pdf.bin_width;
  EXPECT_NEAR(mass, 1.0, 1e-10);
  const std::size_t mode = static_cast<std::size_t>(
      std::max_element(pdf.density.begin(), pdf.density.end()) - pdf.density.begin());
  EXPECT_LE(std::abs(pdf.centers[mode] - sr), 1.5 * pdf.bin_width);
}

TEST(JointHistogram, MarginalsMatchOneDimensional) {
  std::mt19937_64 rng(7);
  const auto u = normal_vec(5000, rng, 2.0), v = normal_vec(5000, rng, 3.0);
  const auto j = joint_histogram(u, v, 24, 6.0);
  const auto hu = histogram_1d(u, 24, -6.0, 6.0), hv = histogram_1d(v, 24, -6.0, 6.0);
  double mass = 0.0;
  for (std::size_t a = 0; a < 24; ++a) {
    std::size_t row = 0, col = 0;
    for (std::size_t b = 0; b < 24; ++b) {
      row += j.counts[a * 24 + b];
      col += j.counts[b * 24 + a];
      mass += j.density(a, b) * j.cell_area();
    }
    EXPECT_EQ(row, hu.counts[a]);
    EXPECT_EQ(col, hv.counts[a]);
  }
  EXPECT_NEAR(mass, 1.0, 1e-10);
}

TEST(JointHistogram, PerfectCorrelationOnDiagonal) {
  std::mt19937_64 rng(8);
  const auto u = normal_vec(10000, rng);
  const auto j = joint_histogram(u, u, 20, 4.0);
  for (std::size_t a = 0; a < 20; ++a)
    for (std::size_t b = 0; b < 20; ++b)
      if (a != b) {
        EXPECT_EQ(j.counts[a * 20 + b], 0u);
      }
}

TEST(JointHistogram, IndependentComponentsHaveLowMutualInformation) {
  std::mt19937_64 rng(9);
  const auto u = normal_vec(100000, rng), v = normal_vec(100000, rng);
  EXPECT_LT(mutual_information(joint_histogram(u, v, 20, 4.0)), 0.05);
  EXPECT_GT(mutual_information(joint_histogram(u, u, 20, 4.0)), 1.0);
}

namespace {
MetricsReport report(std::size_t steps, double mae_value, double crps_value) {
  MetricsReport r;
  for (std::size_t t = 0; t < steps; ++t)
    for (const char* v : kVariables) r.records.push_back({t, v, mae_value, crps_value});
  return r;
}
}  // namespace

TEST(WinCounts, TiesAreNotWins) {
  const auto a = report(100, 1.0, 0.5);
  const auto w = win_counts(a, a);
  EXPECT_EQ(w.wins, 0u);
  EXPECT_EQ(w.total, 400u);
}

TEST(WinCounts, UniformlyBetter) {
  const auto w = win_counts(report(100, 1.0, 0.5), report(100, 0.9, 0.4));
  EXPECT_EQ(w.wins, 400u);
  EXPECT_EQ(format_wins(w), "400/400 (100.0%)");
}

TEST(WinCounts, DenominatorFollowsCoverage) {
  for (std::size_t steps : {1u, 7u, 20u}) EXPECT_EQ(win_counts(report(steps, 1, 1), report(steps, 1, 1)).total, steps * 4);
  EXPECT_THROW(win_counts(report(3, 1, 1), report(4, 1, 1)), qds::ContractError);
}

TEST(WinCounts, PercentRounding) {
  EXPECT_EQ(format_wins({231, 400}), "231/400 (57.8%)");
  EXPECT_EQ(format_wins({193, 400}), "193/400 (48.2%)");
  EXPECT_EQ(format_wins({163, 400}), "163/400 (40.8%)");
}

TEST(BackendDelta, IdenticalReportsGiveZeros) {
  const auto a = report(20, 1.3, 0.7);
  const auto d = backend_delta(a, a);
  EXPECT_EQ(d.rows.size(), 40u);
  EXPECT_EQ(d.max_abs(), 0.0);
  EXPECT_THROW(backend_delta(a, report(19, 1, 1)), qds::ContractError);
}

TEST(Report, AggregateAndFormatting) {
  MetricsReport r;
  r.records = {{0, "u10m", 1.0, 0.5}, {0, "v10m", 2.0, 1.0}, {1, "u10m", 3.0, 0.5}, {1, "v10m", 2.0, 1.0}};
  const auto m = r.aggregate("mae", "u10m");
  EXPECT_DOUBLE_EQ(m.mean, 2.0);
  EXPECT_DOUBLE_EQ(m.std, 1.0);
  EXPECT_EQ(format_mean_std(m), "2.0000 ± 1.0000");
  EXPECT_EQ(report_csv(r).substr(0, 29), "time_id,variable,metric,value");
}

TEST(Report, AddTimestepUsesEnsembleMeanForMae) {
  const std::vector<double> truth{0, 0, 0, 0};
  const std::vector<std::vector<double>> members{{1, 1, 1, 1}, {-1, -1, -1, -1}};
  MetricsReport r;
  add_timestep(r, 5, members, truth);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.records[0].mae, 0.0);
  EXPECT_DOUBLE_EQ(r.records[0].crps, 0.5);
  EXPECT_EQ(r.records[1].variable, "v10m");
}
