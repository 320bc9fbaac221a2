#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hails/distributions.hpp"
#include "hails/hierarchy.hpp"

namespace hails {

/// sqrt(mean squared forecast error / mean squared one-step naive error on the
/// training history). Throws ValidationError on a degenerate denominator.
double rmsse(std::span<const double> train, std::span<const double> truth,
             std::span<const double> pred);

/// Training-mean weighted average; weights are renormalized to sum to 1.
double wrmsse(std::span<const double> per_node_rmsse, std::span<const double> train_means);

/// Mean CRPS over the horizon divided by the training mean. Poisson forecasts
/// are scored through their moment-matched Gaussian.
double normalized_crps(std::span<const double> truth, std::span<const ForecastDist> dists,
                       double train_mean);

/// For each horizon step: sqrt(mean over rows of squared error).
std::vector<double> rmse_per_step(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& pred);

struct NodeMetrics {
  std::optional<double> rmsse;   // empty when excluded
  std::optional<double> ncrps;   // empty when excluded
  std::vector<double> sq_error;  // per step
  double train_mean = 0.0;
};

struct LevelMetrics {
  int level = 0;
  int nodes = 0;
  double wrmsse = 0.0;
  double ncrps = 0.0;
  std::vector<double> rmse;  // per step
  int rmsse_excluded = 0;
  int ncrps_excluded = 0;
};

struct EvalReport {
  std::map<NodeId, NodeMetrics> per_node;
  std::map<int, LevelMetrics> per_level;
  double total_wrmsse = 0.0;
  double total_ncrps = 0.0;
  double dce = 0.0;
  int rmsse_excluded = 0;
  int ncrps_excluded = 0;

  nlohmann::json to_json() const;
  /// Flat `level,metric,value` rows; level is "total" for the aggregates.
  std::string to_csv() const;
};

/// Evaluates raw-unit forecasts `steps[k][i]` against raw `truth` (N x tau).
/// `train` is the raw training history (N x n). DCE is computed on the
/// normalized scale with `h`'s phi weights.
EvalReport evaluate(const Eigen::MatrixXd& train, const Eigen::MatrixXd& truth,
                    const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h);

}  // namespace hails
