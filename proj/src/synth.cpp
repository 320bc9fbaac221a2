#include "hails/synth.hpp"

#include <cmath>
#include <numbers>

namespace hails {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kLeafStream = 1;
constexpr std::uint64_t kShockStream = 2;

double poisson_inverse(double lambda, double u) {
  if (lambda <= 0.0) return 0.0;
  double p = std::exp(-lambda);
  double cdf = p;
  int k = 0;
  while (u > cdf && k < 100000) {
    ++k;
    p *= lambda / k;
    cdf += p;
    if (p == 0.0 && k > lambda) break;
  }
  return static_cast<double>(k);
}

}  // namespace

void SynthConfig::validate() const {
  if (branching.empty()) throw ValidationError("synth: branching must be nonempty");
  for (int b : branching) {
    if (b <= 0) throw ValidationError("synth: branching factors must be positive");
  }
  if (period <= 0) throw ValidationError("synth: period must be positive");
  if (T < 2 * period) throw ValidationError("synth: T must be at least 2 * period");
  if (!(seasonal_amp >= 0.0 && seasonal_amp < 1.0)) {
    throw ValidationError("synth: seasonal_amp must lie in [0,1)");
  }
  if (!(base_rate > 0.0) || !(sparsity_scale > 0.0)) {
    throw ValidationError("synth: base_rate and sparsity_scale must be positive");
  }
  if (noise < 0.0) throw ValidationError("synth: noise must be >= 0");
}

double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ stream);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  // 53 random bits, shifted off zero.
  return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
}

std::pair<Hierarchy, SeriesPanel> generate(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<NodeId, NodeId>> edges;
  std::vector<NodeId> frontier{1};
  NodeId next = 2;
  for (int fan : cfg.branching) {
    std::vector<NodeId> level;
    for (NodeId p : frontier) {
      for (int c = 0; c < fan; ++c) {
        edges.emplace_back(p, next);
        level.push_back(next++);
      }
    }
    frontier = std::move(level);
  }
  Hierarchy h = Hierarchy::build(edges);

  std::vector<double> shock(cfg.T, 1.0);
  if (cfg.noise > 0.0) {
    for (int t = 0; t < cfg.T; ++t) {
      const double u1 = counter_uniform(cfg.seed, kShockStream, t, 0);
      const double u2 = counter_uniform(cfg.seed, kShockStream, t, 1);
      const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
      shock[t] = std::exp(cfg.noise * z - 0.5 * cfg.noise * cfg.noise);
    }
  }

  Eigen::MatrixXd values = Eigen::MatrixXd::Zero(h.size(), cfg.T);
  for (int i = 0; i < h.size(); ++i) {
    if (!h.is_leaf(i)) continue;
    for (int t = 0; t < cfg.T; ++t) {
      const double season =
          1.0 + cfg.seasonal_amp * std::sin(2.0 * std::numbers::pi * t / cfg.period);
      const double rate = cfg.sparsity_scale * cfg.base_rate * season * shock[t];
      values(i, t) = poisson_inverse(rate, counter_uniform(cfg.seed, kLeafStream, i, t));
    }
  }
  const auto& order = h.bfs_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    for (int c : h.children(*it)) values.row(*it) += values.row(c);
  }
  return {std::move(h), make_panel(std::move(values))};
}

Eigen::MatrixXd reference_forecast(const SeriesPanel& panel, const Hierarchy& h, int horizon) {
  constexpr int kWindow = 6;
  if (panel.length() < kWindow) throw ValidationError("6-average baseline needs T >= 6");
  if (panel.nodes() != h.size()) throw ValidationError("panel and hierarchy sizes differ");
  const Eigen::VectorXd mean = panel.values.rightCols(kWindow).rowwise().mean();
  return mean.replicate(1, horizon);
}

}  // namespace hails
