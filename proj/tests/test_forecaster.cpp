#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "hails/forecaster.hpp"
#include "test_support.hpp"

namespace hails {
namespace {

using testing_support::rel_err;
using testing_support::slots;

SparsityLabels labels_of(std::vector<NodeKind> kinds) {
  SparsityLabels l;
  l.p_values.assign(kinds.size(), 0.5);
  l.kinds = std::move(kinds);
  return l;
}

ModelShape small_shape(int nodes, int hidden = 4, int horizon = 2, int window = 8) {
  ModelShape s;
  s.nodes = nodes;
  s.hidden = hidden;
  s.horizon = horizon;
  s.window = window;
  return s;
}

std::vector<Eigen::VectorXd> window_of(std::vector<double> v) {
  std::vector<Eigen::VectorXd> w;
  for (double x : v) w.push_back(Eigen::VectorXd::Constant(1, x));
  return w;
}

TEST(GruEncode, ZeroParametersGiveZeroEncoding) {
  auto m = init_model(small_shape(1), labels_of({NodeKind::kDense}), {});
  for_each_net_tensor([](auto& t) { t.setZero(); }, m.nodes[0]);
  const auto enc = gru_encode(window_of({1, -2, 3, 0.5}), m.nodes[0]);
  EXPECT_EQ(enc.size(), 8);
  EXPECT_EQ(enc.cwiseAbs().maxCoeff(), 0.0);
}

TEST(GruEncode, DeterministicAcrossRuns) {
  const auto a = init_model(small_shape(1, 16), labels_of({NodeKind::kDense}), {42});
  const auto b = init_model(small_shape(1, 16), labels_of({NodeKind::kDense}), {42});
  const auto w = window_of({1, 2, 0, 4, 1, 1, 3, 2});
  const auto ea = gru_encode(w, a.nodes[0]);
  const auto eb = gru_encode(w, b.nodes[0]);
  EXPECT_EQ(ea, eb);
  const auto c = init_model(small_shape(1, 16), labels_of({NodeKind::kDense}), {43});
  EXPECT_NE(ea, gru_encode(w, c.nodes[0]));
}

TEST(GruEncode, SingleStepDirectionsAgree) {
  auto m = init_model(small_shape(1, 5), labels_of({NodeKind::kDense}), {3});
  m.nodes[0].bwd = m.nodes[0].fwd;
  const auto enc = gru_encode(window_of({1.7}), m.nodes[0]);
  for (int k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(enc(k), enc(5 + k));
  // Hand trace of one step from h = 0: h' = z * tanh(Wh x + bh).
  const auto& d = m.nodes[0].fwd;
  for (int k = 0; k < 5; ++k) {
    const double z = 1 / (1 + std::exp(-(d.wz(k, 0) * 1.7 + d.bz(k))));
    EXPECT_NEAR(enc(k), z * std::tanh(d.wh(k, 0) * 1.7 + d.bh(k)), 1e-15);
  }
  EXPECT_THROW(gru_encode({}, m.nodes[0]), ValidationError);
}

TEST(BaseForecast, ZeroHeadWeights) {
  auto m = init_model(small_shape(2, 4, 3), labels_of({NodeKind::kDense, NodeKind::kSparse}), {1});
  for (auto& n : m.nodes) n.head_w.setZero();
  m.nodes[0].head_b << 1, 2, 3, -1, 0, 1;
  const Eigen::VectorXd enc = Eigen::VectorXd::Random(8);
  const auto d = base_forecast(enc, m.nodes[0], 3);
  EXPECT_EQ(d.mu, Eigen::Vector3d(1, 2, 3));
  EXPECT_NEAR(d.sigma(0), std::exp(-1.0), 1e-15);
  EXPECT_DOUBLE_EQ(d.sigma(1), 1.0);
  const auto s = base_forecast(enc, m.nodes[1], 3);
  EXPECT_EQ(s.sigma.size(), 0);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(s.mu(k), 0.6931481805599453, 1e-15);
}

TEST(BaseForecast, SigmaPositiveForLargeOutputs) {
  auto m = init_model(small_shape(1, 4, 2), labels_of({NodeKind::kDense}), {1});
  m.nodes[0].head_w.setZero();
  m.nodes[0].head_b << 0, 0, -40, 40;
  const auto d = base_forecast(Eigen::VectorXd::Zero(8), m.nodes[0], 2);
  EXPECT_GT(d.sigma(0), 0.0);
  EXPECT_TRUE(std::isfinite(d.sigma(1)));
}

RefinementParams refine_for(int n, int d) {
  RefinementParams rp;
  rp.w_hat = Eigen::VectorXd::Zero(n);
  rp.w = Eigen::MatrixXd::Constant(n, n, 0.5);
  rp.v1 = Eigen::MatrixXd::Zero(n, n);
  rp.v2 = Eigen::MatrixXd::Zero(n, d);
  rp.b = Eigen::VectorXd::Zero(n);
  rp.c = 2.0;
  return rp;
}

TEST(RefineMeans, Examples) {
  const auto labels = labels_of({NodeKind::kDense, NodeKind::kDense});
  auto rp = refine_for(2, 2);
  const Eigen::Vector2d mu(2, 4);
  auto out = refine_means(mu, rp, labels);
  EXPECT_DOUBLE_EQ(out(0), 2.5);
  EXPECT_DOUBLE_EQ(out(1), 3.5);

  rp.w_hat.setConstant(50);
  out = refine_means(mu, rp, labels);
  EXPECT_NEAR(out(0), 2.0, 1e-12);

  rp.w_hat << -1.3, 0.7;
  rp.w.setIdentity();
  out = refine_means(mu, rp, labels);
  EXPECT_DOUBLE_EQ(out(0), 2.0);
  EXPECT_DOUBLE_EQ(out(1), 4.0);
}

TEST(RefineMeans, ConvexCombinationAndFloor) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  const auto labels = labels_of({NodeKind::kDense, NodeKind::kSparse, NodeKind::kDense});
  for (int trial = 0; trial < 200; ++trial) {
    RefinementParams rp = refine_for(3, 2);
    for (int i = 0; i < 3; ++i) {
      rp.w_hat(i) = g(rng);
      for (int j = 0; j < 3; ++j) rp.w(i, j) = g(rng);
    }
    Eigen::Vector3d mu(g(rng), std::abs(g(rng)), g(rng));
    const auto out = refine_means(mu, rp, labels);
    const Eigen::Vector3d mix = rp.w * mu;
    for (int i = 0; i < 3; ++i) {
      if (i == 1) {
        EXPECT_GE(out(i), kLambdaFloor);
        continue;
      }
      EXPECT_GE(out(i), std::min(mu(i), mix(i)) - 1e-12);
      EXPECT_LE(out(i), std::max(mu(i), mix(i)) + 1e-12);
    }
  }
}

TEST(RefineSigmas, Examples) {
  const auto labels = labels_of({NodeKind::kDense, NodeKind::kSparse, NodeKind::kDense});
  auto rp = refine_for(3, 2);
  const Eigen::Vector3d mu(1, 2, 3);
  const Eigen::Vector2d sigma(0.4, 1.5);
  auto out = refine_sigmas(mu, sigma, rp, labels);
  ASSERT_EQ(out.size(), 2);
  EXPECT_DOUBLE_EQ(out(0), 0.4);
  EXPECT_DOUBLE_EQ(out(1), 1.5);
  rp.b.setConstant(40);
  out = refine_sigmas(mu, sigma, rp, labels);
  EXPECT_NEAR(out(0), 0.8, 1e-12);
  rp.b.setConstant(-40);
  rp.v1.setConstant(-3);
  out = refine_sigmas(mu, sigma, rp, labels);
  EXPECT_GT(out(0), 0.0);
  EXPECT_LT(out(1), 3.0);
}

TEST(RefineSteps, PermutingHorizonPermutesOutputs) {
  const auto labels = labels_of({NodeKind::kDense, NodeKind::kSparse, NodeKind::kDense});
  auto rp = refine_for(3, 2);
  rp.v1.setConstant(0.3);
  rp.v2.setConstant(-0.2);
  rp.w_hat << 0.1, 1.0, -0.5;
  Eigen::MatrixXd mu(3, 4), sigma(2, 4);
  mu << 1, 2, 3, 4, 0.5, 0.1, 2, 1, -1, 0, 1, 2;
  sigma << 1, 2, 0.5, 0.3, 0.2, 0.9, 1.1, 4;
  const std::vector<int> perm{2, 0, 3, 1};
  Eigen::MatrixXd mu_p(3, 4), sigma_p(2, 4);
  for (int k = 0; k < 4; ++k) {
    mu_p.col(k) = mu.col(perm[k]);
    sigma_p.col(k) = sigma.col(perm[k]);
  }
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(refine_means(mu_p.col(k), rp, labels), refine_means(mu.col(perm[k]), rp, labels));
    EXPECT_EQ(refine_sigmas(mu_p.col(k), sigma_p.col(k), rp, labels),
              refine_sigmas(mu.col(perm[k]), sigma.col(perm[k]), rp, labels));
  }
}

SeriesPanel random_panel(int n, int T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::poisson_distribution<int> pois(2.0);
  Eigen::MatrixXd v(n, T);
  for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = pois(rng) + 0.5;
  auto p = make_panel(v);
  p.normalized = true;
  return p;
}

TEST(ForwardAll, MatchesSingleWindowPath) {
  const auto labels = labels_of({NodeKind::kDense, NodeKind::kSparse, NodeKind::kDense});
  auto m = init_model(small_shape(3, 6, 3, 5), labels, {11});
  m.refine.v1.setConstant(0.1);
  m.refine.v2.setConstant(-0.05);
  m.refine.b << 0.2, 0.0, -0.3;
  const auto panel = random_panel(3, 20, 1);
  const std::vector<int> starts{0, 4, 9};
  const auto batch = make_batch(panel, starts, m.shape);
  const auto fr = forward_all(m, batch);
  for (int b = 0; b < 3; ++b) {
    Eigen::MatrixXd mu(3, 3), sigma(2, 3);
    int d = 0;
    for (int i = 0; i < 3; ++i) {
      std::vector<Eigen::VectorXd> w;
      for (int t = 0; t < 5; ++t) w.push_back(Eigen::VectorXd::Constant(1, panel.values(i, starts[b] + t)));
      const auto base = base_forecast(gru_encode(w, m.nodes[i]), m.nodes[i], 3);
      mu.row(i) = base.mu.transpose();
      if (!labels.is_sparse(i)) sigma.row(d++) = base.sigma.transpose();
    }
    for (int k = 0; k < 3; ++k) {
      const auto mh = refine_means(mu.col(k), m.refine, labels);
      const auto sh = refine_sigmas(mu.col(k), sigma.col(k), m.refine, labels);
      for (int i = 0; i < 3; ++i) EXPECT_NEAR(fr.mu_hat(i, b * 3 + k), mh(i), 1e-12);
      for (int j = 0; j < 2; ++j) EXPECT_NEAR(fr.sigma_hat(j, b * 3 + k), sh(j), 1e-12);
    }
  }
  const auto dists = distributions_at(fr, labels, 4);
  EXPECT_TRUE(is_gaussian(dists[0]));
  EXPECT_FALSE(is_gaussian(dists[1]));
  EXPECT_TRUE(is_gaussian(dists[2]));
}

TEST(ForwardAll, SingleNodeRefinedEqualsBase) {
  const auto labels = labels_of({NodeKind::kDense});
  const auto m = init_model(small_shape(1, 5), labels, {2});
  const auto batch = make_batch(random_panel(1, 12, 2), {0, 2}, m.shape);
  const auto fr = forward_all(m, batch);
  EXPECT_LE((fr.mu_hat - fr.mu).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((fr.sigma_hat - fr.sigma).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ForwardAll, IdentityRegimeApproximatesBase) {
  const auto labels = labels_of({NodeKind::kDense, NodeKind::kSparse, NodeKind::kDense});
  auto m = init_model(small_shape(3, 5), labels, {5});
  m.refine.w_hat.setConstant(20);
  m.refine.w.setIdentity();
  m.refine.b.setConstant(20);
  m.refine.c = 1.0;
  const auto fr = forward_all(m, make_batch(random_panel(3, 12, 3), {1, 3}, m.shape));
  EXPECT_LE((fr.mu_hat - fr.mu).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_LE((fr.sigma_hat - fr.sigma).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(MakeBatch, LayoutAndBounds) {
  ModelShape s = small_shape(2, 3, 2, 3);
  const auto panel = random_panel(2, 10, 4);
  const auto batch = make_batch(panel, {0, 5}, s);
  EXPECT_EQ(batch.targets.rows(), 2);
  EXPECT_EQ(batch.targets.cols(), 4);
  EXPECT_EQ(batch.targets(1, 2), panel.values(1, 8));
  EXPECT_EQ(batch.targets(0, 1), panel.values(0, 4));
  EXPECT_EQ(batch.steps[1][2](0, 1), panel.values(1, 7));
  EXPECT_EQ(make_batch(panel, {6}, s).targets.size(), 0);
  EXPECT_THROW(make_batch(panel, {8}, s), ValidationError);
}

TEST(MakeBatch, CovariateChannels) {
  ModelShape s = small_shape(1, 3, 1, 2);
  s.input_size = 2;
  auto panel = random_panel(1, 6, 5);
  EXPECT_THROW(make_batch(panel, {0}, s), ValidationError);
  panel.covariates.push_back(Eigen::MatrixXd::Constant(1, 6, 9.0));
  panel.covariate_names.push_back("promo");
  const auto batch = make_batch(panel, {1}, s);
  EXPECT_EQ(batch.steps[0][0](1, 0), 9.0);
  const auto m = init_model(s, labels_of({NodeKind::kDense}), {1});
  EXPECT_TRUE(forward_all(m, batch).mu.allFinite());
}

// Scalar probe f = sum(A .* mu_hat) + sum(B .* sigma_hat); every parameter's
// analytic derivative is compared with a central difference.
TEST(Gradients, ForwardOutputsMatchFiniteDifferences) {
  const auto labels = labels_of({NodeKind::kDense, NodeKind::kDense, NodeKind::kSparse});
  auto m = init_model(small_shape(3, 5, 2, 8), labels, {21});
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 0.3);
  for_each_refine_tensor([&](auto& t) { for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] += g(rng); },
                         m.refine);
  for (auto& n : m.nodes) n.head_b.array() += 0.4;
  const auto batch = make_batch(random_panel(3, 14, 6), {0, 3}, m.shape);
  auto fr = forward_all(m, batch);
  const Eigen::MatrixXd A = Eigen::MatrixXd::Random(fr.mu_hat.rows(), fr.mu_hat.cols());
  const Eigen::MatrixXd B = Eigen::MatrixXd::Random(fr.sigma_hat.rows(), fr.sigma_hat.cols());
  auto probe = [&] {
    const auto f = forward_all(m, batch);
    return A.cwiseProduct(f.mu_hat).sum() + B.cwiseProduct(f.sigma_hat).sum();
  };
  ASSERT_GT(fr.mu_hat.row(2).minCoeff(), 1e-3);  // stay clear of the lambda floor

  auto grads = zeros_like(m);
  backward_all(m, batch, fr, A, B, grads);
  const double h = 1e-5;
  int checked = 0, worst_index = -1;
  double worst = 0.0;
  auto all = slots(m, grads);
  for (std::size_t k = 0; k < all.size(); ++k) {
    double& v = *all[k].value;
    const double keep = v;
    v = keep + h;
    const double up = probe();
    v = keep - h;
    const double down = probe();
    v = keep;
    const double fd = (up - down) / (2 * h);
    const double e = rel_err(*all[k].grad, fd);
    if (e > worst) worst = e, worst_index = static_cast<int>(k);
    ++checked;
  }
  EXPECT_EQ(checked, static_cast<int>(parameter_count(m)));
  EXPECT_LE(worst, 1e-3) << (worst_index >= 0 ? all[worst_index].group : "");
}

TEST(Gradients, RefineOnlyLeavesBaseUntouched) {
  const auto labels = labels_of({NodeKind::kDense, NodeKind::kSparse});
  const auto m = init_model(small_shape(2, 3), labels, {1});
  const auto batch = make_batch(random_panel(2, 12, 7), {0}, m.shape);
  const auto fr = forward_all(m, batch);
  auto grads = zeros_like(m);
  backward_all(m, batch, fr, Eigen::MatrixXd::Ones(2, 2), Eigen::MatrixXd::Ones(1, 2), grads, false);
  double base_norm = 0, refine_norm = 0;
  for (const auto& n : grads.nodes) for_each_net_tensor([&](const auto& t) { base_norm += t.squaredNorm(); }, n);
  for_each_refine_tensor([&](const auto& t) { refine_norm += t.squaredNorm(); }, grads.refine);
  EXPECT_EQ(base_norm, 0.0);
  EXPECT_GT(refine_norm, 0.0);
}

TEST(InitModel, ShapesAndDefaults) {
  const auto labels = labels_of({NodeKind::kDense, NodeKind::kSparse, NodeKind::kSparse});
  const auto m = init_model(small_shape(3, 60, 12, 24), labels, {0});
  EXPECT_EQ(m.nodes[0].head_w.rows(), 24);
  EXPECT_EQ(m.nodes[1].head_w.rows(), 12);
  EXPECT_EQ(m.nodes[0].fwd.uz.rows(), 60);
  EXPECT_EQ(m.refine.v2.cols(), 1);
  EXPECT_DOUBLE_EQ(m.refine.w(1, 2), 1.0 / 3);
  EXPECT_DOUBLE_EQ(m.refine.w_hat(0), 2.0);
  EXPECT_DOUBLE_EQ(m.refine.c, 2.0);
  const double bound = 1 / std::sqrt(60.0);
  EXPECT_LE(m.nodes[2].bwd.uh.cwiseAbs().maxCoeff(), bound);
  EXPECT_THROW(init_model(small_shape(2), labels, {}), ValidationError);
}

}  // namespace
}  // namespace hails
