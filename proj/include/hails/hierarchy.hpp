#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hails/distributions.hpp"

namespace hails {

/// Raised for malformed inputs (bad trees, misaligned panels, invalid configs).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a loss or forecast becomes non-finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Node ids are the 1-based ids used in files; `index` is the dense 0-based
/// position used internally (index = id - 1).
using NodeId = int;

enum class PhiMode { kPaperUniform, kLeafProportional };

PhiMode parse_phi_mode(const std::string& name);
std::string to_string(PhiMode mode);

/**
 * Rooted aggregation tree over nodes 1..N.
 *
 * Children of every node are stored in ascending id order. `phi(i)` is aligned
 * with `children(i)`. Immutable once built; `with_phi` returns a copy.
 */
class Hierarchy {
 public:
  /// Builds and validates the tree. Node ids must be exactly 1..N and node 1
  /// must be the unique root.
  static Hierarchy build(const std::vector<std::pair<NodeId, NodeId>>& edges);

  /// Single-node hierarchy (a lone root).
  static Hierarchy single_node();

  Hierarchy with_phi(PhiMode mode) const;

  int size() const { return static_cast<int>(parent_.size()); }
  int parent(int index) const { return parent_[index]; }
  const std::vector<int>& children(int index) const { return children_[index]; }
  const std::vector<double>& phi(int index) const { return phi_[index]; }
  int level(int index) const { return level_[index]; }
  int leaf_count(int index) const { return leaf_count_[index]; }
  bool is_leaf(int index) const { return children_[index].empty(); }
  int depth() const { return max_level_; }
  bool has_phi() const { return has_phi_; }
  std::optional<PhiMode> phi_mode() const { return phi_mode_; }

  /// Internal (non-leaf) node indices in ascending order.
  std::vector<int> internal_nodes() const;
  /// Nodes at the given depth (root is depth 1).
  std::vector<int> nodes_at_level(int level) const;
  /// Breadth-first order from the root.
  const std::vector<int>& bfs_order() const { return bfs_; }
  /// All (parent id, child id) edges sorted by child id.
  std::vector<std::pair<NodeId, NodeId>> edges() const;

 private:
  std::vector<int> parent_;
  std::vector<std::vector<int>> children_;
  std::vector<std::vector<double>> phi_;
  std::vector<int> level_;
  std::vector<int> leaf_count_;
  std::vector<int> bfs_;
  int max_level_ = 0;
  bool has_phi_ = false;
  std::optional<PhiMode> phi_mode_;
};

/// Aligned N x T panel of observations.
struct SeriesPanel {
  Eigen::MatrixXd values;             // N x T
  std::vector<std::int64_t> time_index;
  std::vector<Eigen::MatrixXd> covariates;  // F channels, each N x T
  std::vector<std::string> covariate_names;
  bool normalized = false;

  int nodes() const { return static_cast<int>(values.rows()); }
  int length() const { return static_cast<int>(values.cols()); }
  int covariate_count() const { return static_cast<int>(covariates.size()); }

  /// Columns [begin, end) of every channel; time labels follow.
  SeriesPanel slice(int begin, int end) const;
  void validate() const;
};

SeriesPanel make_panel(Eigen::MatrixXd values);

struct CoherenceResidual {
  NodeId node;
  int t;
  double residual;
};

/// Divides each row by its subtree leaf count. Leaves are unchanged.
SeriesPanel normalize_panel(const SeriesPanel& panel, const Hierarchy& h);

/// Inverse of normalize_panel.
SeriesPanel denormalize_panel(const SeriesPanel& panel, const Hierarchy& h);

/// Every (node, t) where |y_i - sum_j phi_ij y_j| exceeds `tol`.
std::vector<CoherenceResidual> aggregate_check(const SeriesPanel& panel,
                                               const Hierarchy& h, double tol);

/// Same check against raw sums (phi = 1), used for ingestion warnings.
std::vector<CoherenceResidual> raw_sum_check(const SeriesPanel& panel,
                                             const Hierarchy& h, double tol);

/// Maps normalized-scale forecasts to raw units. `steps[k][i]` is node i at
/// horizon step k. Gaussian (mu, sigma) scale by L_i; Poisson rates keep their
/// lambda and take scale L_i (mean lambda L_i, variance lambda L_i^2).
std::vector<std::vector<ForecastDist>> denormalize_forecasts(
    const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h);

/// Inverse of denormalize_forecasts.
std::vector<std::vector<ForecastDist>> normalize_forecasts(
    const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h);

}  // namespace hails
