#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "dense_oracle.hpp"
#include "qds/ansatz.hpp"

using namespace qds::quantum;

namespace {

std::size_t count_kind(const CircuitTemplate& t, GateKind k) {
  std::size_t n = 0;
  for (const Gate& g : t.gates) n += g.kind == k;
  return n;
}

std::vector<double> uniform(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-std::numbers::pi, std::numbers::pi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST(Build, FourQubitVariantA) {
  const auto t = build({4, AnsatzVariant::A, 1});
  EXPECT_EQ(t.n_input_slots, 4u);
  EXPECT_EQ(t.n_weight_slots, 8u);
  EXPECT_EQ(count_kind(t, GateKind::CZ), 4u);
}

TEST(Build, TwelveQubitAB) {
  const AnsatzSpec spec{12, AnsatzVariant::AB, 1};
  const auto t = build(spec);
  EXPECT_EQ(spec.channels(), 3u);
  EXPECT_EQ(t.n_input_slots, 12u);
  EXPECT_EQ(t.n_weight_slots, 36u);
}

TEST(Build, TwelveQubitBHasNoRings) {
  const auto t = build({12, AnsatzVariant::B, 2});
  EXPECT_EQ(t.n_weight_slots, 24u);
  EXPECT_EQ(count_kind(t, GateKind::CZ), 0u);
}

TEST(Build, CzRingOrder) {
  const auto t = build({4, AnsatzVariant::A, 1});
  std::vector<std::pair<std::size_t, std::size_t>> ring;
  for (const Gate& g : t.gates)
    if (g.kind == GateKind::CZ) ring.emplace_back(g.q0, g.q1);
  const std::vector<std::pair<std::size_t, std::size_t>> want{{0, 1}, {1, 2}, {2, 3}, {3, 0}};
  EXPECT_EQ(ring, want);
}

TEST(Build, BlockBNeedsTwoChannels) {
  for (auto v : {AnsatzVariant::B, AnsatzVariant::AB}) {
    try {
      build({4, v, 1});
      FAIL() << "variant " << variant_name(v) << " accepted at one channel";
    } catch (const qds::ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find("block B requires at least two channels"), std::string::npos);
    }
  }
}

TEST(Build, RejectsBadQubitCounts) {
  EXPECT_THROW(build({6, AnsatzVariant::A, 1}), qds::ConfigError);
  EXPECT_THROW(build({0, AnsatzVariant::A, 1}), qds::ConfigError);
  EXPECT_THROW(build({20, AnsatzVariant::A, 1}), qds::ConfigError);
  EXPECT_THROW(build({4, AnsatzVariant::A, 0}), qds::ConfigError);
}

TEST(ParseVariant, Names) {
  EXPECT_EQ(parse_variant("A"), AnsatzVariant::A);
  EXPECT_EQ(parse_variant("B"), AnsatzVariant::B);
  EXPECT_EQ(parse_variant("A+B"), AnsatzVariant::AB);
  EXPECT_THROW(parse_variant("C"), qds::ConfigError);
}

TEST(ParamCount, Formula) {
  EXPECT_EQ(param_count({4, AnsatzVariant::A, 2}), 16u);
  EXPECT_EQ(param_count({12, AnsatzVariant::B, 1}), 12u);
  EXPECT_EQ(param_count({12, AnsatzVariant::AB, 2}), 72u);
}

TEST(ParamCount, MatchesStructuralScan) {
  for (std::size_t n : {4u, 8u, 12u, 16u})
    for (auto v : {AnsatzVariant::A, AnsatzVariant::B, AnsatzVariant::AB})
      for (std::size_t layers : {1u, 2u, 3u}) {
        const AnsatzSpec spec{n, v, layers};
        if (uses_block_b(v) && spec.channels() < 2) continue;
        const auto t = build(spec);
        std::size_t weights = 0, inputs = 0;
        std::vector<bool> seen(t.n_weight_slots, false);
        for (const Gate& g : t.gates) {
          if (g.slot.kind == SlotKind::weight) {
            ASSERT_TRUE(g.kind == GateKind::RY || g.kind == GateKind::RZ);
            ASSERT_LT(g.slot.index, t.n_weight_slots);
            seen[g.slot.index] = true;
            ++weights;
          }
          if (g.slot.kind == SlotKind::input) {
            ASSERT_EQ(g.kind, GateKind::RZ);
            ++inputs;
          }
        }
        EXPECT_EQ(weights, param_count(spec));
        EXPECT_EQ(t.n_weight_slots, param_count(spec));
        EXPECT_EQ(inputs, n);
        EXPECT_EQ(t.n_input_slots, n);
        for (bool s : seen) EXPECT_TRUE(s);
        for (std::size_t q = 0; q < n; ++q) {
          const Gate& g = t.gates[t.input_gate[q]];
          EXPECT_EQ(g.q0, q);
          EXPECT_EQ(g.slot.index, q);
        }
      }
}

TEST(Bind, ZeroEverythingGivesZeroExpectations) {
  const auto t = build({4, AnsatzVariant::A, 1});
  const std::vector<double> in(4, 0.0), w(8, 0.0);
  const auto c = qds::quantum::bind(t, in, w);
  const auto z = run(c, Backend::exact());
  const auto zo = oracle::expectations(c);
  for (std::size_t q = 0; q < 4; ++q) {
    EXPECT_NEAR(z[q], 0.0, 1e-12);
    EXPECT_NEAR(zo[q], 0.0, 1e-12);
  }
}

TEST(Bind, LengthMismatchIsContractError) {
  const auto t = build({4, AnsatzVariant::A, 1});
  EXPECT_THROW(qds::quantum::bind(t, std::vector<double>(3), std::vector<double>(8)), qds::ContractError);
  EXPECT_THROW(qds::quantum::bind(t, std::vector<double>(4), std::vector<double>(9)), qds::ContractError);
}

TEST(Bind, RebindIsBitIdentical) {
  std::mt19937_64 rng(3);
  const auto t = build({8, AnsatzVariant::AB, 2});
  const auto in = uniform(8, rng), w = uniform(t.n_weight_slots, rng);
  EXPECT_EQ(run(qds::quantum::bind(t, in, w), Backend::exact()), run(qds::quantum::bind(t, in, w), Backend::exact()));
}

TEST(Bind, ZeroWeightBOnlyMatchesDenseOracle) {
  std::mt19937_64 rng(4);
  const auto t = build({8, AnsatzVariant::B, 1});
  const auto in = uniform(8, rng);
  const auto c = qds::quantum::bind(t, in, std::vector<double>(t.n_weight_slots, 0.0));
  const auto z = run(c, Backend::exact()), zo = oracle::expectations(c);
  for (std::size_t q = 0; q < 8; ++q) EXPECT_NEAR(z[q], zo[q], 1e-10);
}

// Variant A exists at n=4; variants using block B need two channels, so n=8
// is the smallest instance for them.
TEST(Bind, AllVariantsMatchDenseOracle) {
  std::mt19937_64 rng(5);
  const std::vector<AnsatzSpec> specs{{4, AnsatzVariant::A, 1}, {4, AnsatzVariant::A, 2}, {8, AnsatzVariant::A, 1},
                                      {8, AnsatzVariant::B, 2}, {8, AnsatzVariant::AB, 2}};
  for (const auto& spec : specs)
    for (int rep = 0; rep < 3; ++rep) {
      const auto t = build(spec);
      const auto c = qds::quantum::bind(t, uniform(spec.n_qubits, rng), uniform(t.n_weight_slots, rng));
      const auto z = run(c, Backend::exact()), zo = oracle::expectations(c);
      for (std::size_t q = 0; q < spec.n_qubits; ++q) ASSERT_NEAR(z[q], zo[q], 1e-10) << variant_name(spec.variant);
    }
}

TEST(Independence, VariantAKeepsGroupsSeparate) {
  std::mt19937_64 rng(6);
  const auto t = build({12, AnsatzVariant::A, 2});
  const std::vector<double> w(t.n_weight_slots, 0.0);
  for (int rep = 0; rep < 10; ++rep) {
    const auto in = uniform(12, rng);
    const auto base = run(qds::quantum::bind(t, in, w), Backend::exact());
    for (std::size_t g = 0; g < 3; ++g) {
      auto perturbed = in;
      for (std::size_t p = 0; p < 4; ++p) perturbed[4 * g + p] += 0.9;
      const auto z = run(qds::quantum::bind(t, perturbed, w), Backend::exact());
      for (std::size_t q = 0; q < 12; ++q)
        if (q / 4 != g) {
          EXPECT_LT(std::abs(z[q] - base[q]), 1e-12);
        }
    }
  }
}

TEST(Independence, VariantBCouplesGroups) {
  int coupled = 0;
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const auto t = build({12, AnsatzVariant::B, 2});
    const auto in = uniform(12, rng), w = uniform(t.n_weight_slots, rng);
    const auto base = run(qds::quantum::bind(t, in, w), Backend::exact());
    double change = 0.0;
    for (std::size_t g = 0; g < 3; ++g) {
      auto perturbed = in;
      for (std::size_t p = 0; p < 4; ++p) perturbed[4 * g + p] += 0.9;
      const auto z = run(qds::quantum::bind(t, perturbed, w), Backend::exact());
      for (std::size_t q = 0; q < 12; ++q)
        if (q / 4 != g) change = std::max(change, std::abs(z[q] - base[q]));
    }
    coupled += change > 1e-3;
  }
  EXPECT_GE(coupled, 45);
}
