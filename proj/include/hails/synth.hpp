#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "hails/hierarchy.hpp"

namespace hails {

struct SynthConfig {
  std::vector<int> branching{3, 3};  // children per node at each level
  int T = 120;
  double base_rate = 3.0;
  double seasonal_amp = 0.5;  // in [0, 1)
  int period = 12;
  double sparsity_scale = 0.3;
  /// Log-scale sd of a demand shock shared by every leaf at each step. It is
  /// invisible in a single sparse leaf but shows up as extra variance in the
  /// aggregates. Zero disables it.
  double noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Stateless counter-based generator: every draw is a pure function of
/// (seed, stream, a, b), so generation order does not matter.
double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t a, std::uint64_t b);

/// Balanced tree with breadth-first ids; leaf counts are Poisson with
/// rate sparsity_scale * base_rate * (1 + seasonal_amp * sin(2 pi t / period)).
/// Internal rows are exact sums of their children.
std::pair<Hierarchy, SeriesPanel> generate(const SynthConfig& cfg);

/// Mean of the last six observations, repeated over the horizon (N x horizon).
Eigen::MatrixXd reference_forecast(const SeriesPanel& panel, const Hierarchy& h, int horizon);

}  // namespace hails
