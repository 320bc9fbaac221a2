#include <cmath>

#include <gtest/gtest.h>

#include "hails/sparsity.hpp"
#include "hails/synth.hpp"

namespace hails {
namespace {

double leaf_zero_fraction(const Hierarchy& h, const SeriesPanel& p) {
  int zeros = 0, total = 0;
  for (int i = 0; i < h.size(); ++i) {
    if (!h.is_leaf(i)) continue;
    for (int t = 0; t < p.length(); ++t) {
      zeros += p.values(i, t) == 0.0;
      ++total;
    }
  }
  return static_cast<double>(zeros) / total;
}

TEST(Generate, ShapeAndIds) {
  SynthConfig cfg;
  const auto [h, p] = generate(cfg);
  EXPECT_EQ(h.size(), 13);
  EXPECT_EQ(p.nodes(), 13);
  EXPECT_EQ(p.length(), 120);
  EXPECT_EQ(h.children(0), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(h.children(1), (std::vector<int>{4, 5, 6}));
  EXPECT_FALSE(p.normalized);
}

TEST(Generate, SparseLeaves) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SynthConfig cfg;
    cfg.seed = seed;
    const auto [h, p] = generate(cfg);
    EXPECT_GT(leaf_zero_fraction(h, p), 0.30) << seed;
  }
}

TEST(Generate, InternalNodesAreExactSums) {
  SynthConfig cfg;
  cfg.seed = 5;
  cfg.noise = 0.3;
  const auto [h, p] = generate(cfg);
  EXPECT_TRUE(raw_sum_check(p, h, 0.0).empty());
  const auto hp = h.with_phi(PhiMode::kLeafProportional);
  EXPECT_TRUE(aggregate_check(normalize_panel(p, h), hp, 1e-12).empty());
}

TEST(Generate, Deterministic) {
  SynthConfig cfg;
  cfg.seed = 77;
  const auto a = generate(cfg).second;
  const auto b = generate(cfg).second;
  EXPECT_EQ(a.values, b.values);
  cfg.seed = 78;
  EXPECT_NE(a.values, generate(cfg).second.values);
}

TEST(Generate, ZeroFractionDecreasesWithScale) {
  double prev = 1.0;
  for (double s : {0.1, 0.3, 0.9}) {
    SynthConfig cfg;
    cfg.seed = 3;
    cfg.sparsity_scale = s;
    const auto [h, p] = generate(cfg);
    const double z = leaf_zero_fraction(h, p);
    EXPECT_LT(z, prev) << s;
    prev = z;
  }
}

TEST(Generate, RootDenseAtHigherRates) {
  int dense = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SynthConfig cfg;
    cfg.seed = seed;
    cfg.base_rate = 5;
    const auto [h, p] = generate(cfg);
    dense += !classify_nodes(p, h, 0.1).is_sparse(0);
  }
  EXPECT_GE(dense, 18);
}

TEST(Generate, LeafMeanFollowsRate) {
  SynthConfig cfg;
  cfg.branching = {50};
  cfg.T = 240;
  cfg.seasonal_amp = 0.0;
  cfg.sparsity_scale = 1.0;
  cfg.base_rate = 2.0;
  const auto [h, p] = generate(cfg);
  const double mean = p.values.bottomRows(50).mean();
  EXPECT_NEAR(mean, 2.0, 4 * std::sqrt(2.0 / (50 * 240)));
}

TEST(Generate, RejectsBadConfig) {
  SynthConfig cfg;
  cfg.branching = {};
  EXPECT_THROW(generate(cfg), ValidationError);
  cfg = {};
  cfg.T = 20;  // < 2 * period
  EXPECT_THROW(generate(cfg), ValidationError);
  cfg = {};
  cfg.seasonal_amp = 1.0;
  EXPECT_THROW(generate(cfg), ValidationError);
}

TEST(CounterUniform, OrderFreeAndInRange) {
  const double a = counter_uniform(1, 2, 3, 4);
  EXPECT_EQ(a, counter_uniform(1, 2, 3, 4));
  EXPECT_NE(a, counter_uniform(1, 2, 4, 3));
  double sum = 0;
  for (int i = 0; i < 100000; ++i) {
    const double u = counter_uniform(9, 0, i, 0);
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 100000, 0.5, 0.005);
}

TEST(ReferenceForecast, Examples) {
  const auto h = Hierarchy::single_node();
  Eigen::MatrixXd v(1, 8);
  v << 9, 9, 1, 2, 3, 4, 5, 6;
  auto f = reference_forecast(make_panel(v), h, 3);
  ASSERT_EQ(f.cols(), 3);
  for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(f(0, k), 3.5);
  v.setConstant(5);
  f = reference_forecast(make_panel(v), h, 2);
  EXPECT_DOUBLE_EQ(f(0, 1), 5.0);
  Eigen::MatrixXd shortv(1, 5);
  shortv.setOnes();
  EXPECT_THROW(reference_forecast(make_panel(shortv), h, 1), ValidationError);
}

}  // namespace
}  // namespace hails
