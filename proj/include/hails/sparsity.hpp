#pragma once

#include <span>
#include <vector>

#include "hails/hierarchy.hpp"

namespace hails {

enum class NodeKind { kDense, kSparse };

struct DispersionResult {
  double statistic;  // (n - 1) s^2 / mean
  int dof;           // n - 1
  bool all_zero;
};

/// Poisson index-of-dispersion statistic.
DispersionResult dispersion_statistic(std::span<const double> series);

/// P(X >= x) for X ~ chi-square with `dof` degrees of freedom.
double chi_square_sf(double x, int dof);

struct SparsityLabels {
  std::vector<NodeKind> kinds;   // by node index
  std::vector<double> p_values;  // by node index
  double alpha = 0.1;

  bool is_sparse(int index) const { return kinds[index] == NodeKind::kSparse; }
  int dense_count() const;
  /// Position of each dense node within the dense-only vectors, -1 for sparse.
  std::vector<int> dense_positions() const;
  /// True when no dense node has a sparse ancestor.
  bool propagation_closed(const Hierarchy& h) const;
};

/// Two-sided dispersion test per node on the training slice. A node is sparse
/// when p >= alpha or its series is all zero; ancestors of dense nodes are
/// then forced dense. Normalized panels are mapped back to raw counts first.
SparsityLabels classify_nodes(const SeriesPanel& panel, const Hierarchy& h,
                              double alpha = 0.1);

/// Forces every ancestor of a dense node to be dense.
void propagate_dense(SparsityLabels& labels, const Hierarchy& h);

}  // namespace hails
