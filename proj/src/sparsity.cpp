#include "hails/sparsity.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/special_functions/gamma.hpp>

namespace hails {

DispersionResult dispersion_statistic(std::span<const double> series) {
  const auto n = series.size();
  if (n < 2) throw ValidationError("dispersion_statistic needs at least 2 samples");
  double mean = 0.0;
  for (double v : series) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ValidationError("dispersion_statistic needs finite nonnegative values");
    }
    mean += v;
  }
  mean /= static_cast<double>(n);
  const int dof = static_cast<int>(n) - 1;
  if (mean == 0.0) return {0.0, dof, true};
  double ss = 0.0;
  for (double v : series) ss += (v - mean) * (v - mean);
  // (n - 1) * s^2 with s^2 = ss / (n - 1)
  return {ss / mean, dof, false};
}

double chi_square_sf(double x, int dof) {
  if (dof <= 0) throw ValidationError("chi_square_sf: dof must be positive");
  if (!std::isfinite(x)) throw ValidationError("chi_square_sf: x must be finite");
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * dof, 0.5 * x);
}

int SparsityLabels::dense_count() const {
  return static_cast<int>(std::count(kinds.begin(), kinds.end(), NodeKind::kDense));
}

std::vector<int> SparsityLabels::dense_positions() const {
  std::vector<int> pos(kinds.size(), -1);
  int d = 0;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (kinds[i] == NodeKind::kDense) pos[i] = d++;
  }
  return pos;
}

bool SparsityLabels::propagation_closed(const Hierarchy& h) const {
  for (int i = 0; i < h.size(); ++i) {
    if (kinds[i] != NodeKind::kDense) continue;
    for (int a = h.parent(i); a >= 0; a = h.parent(a)) {
      if (kinds[a] == NodeKind::kSparse) return false;
    }
  }
  return true;
}

void propagate_dense(SparsityLabels& labels, const Hierarchy& h) {
  for (int i = 0; i < h.size(); ++i) {
    if (labels.kinds[i] != NodeKind::kDense) continue;
    for (int a = h.parent(i); a >= 0 && labels.kinds[a] != NodeKind::kDense; a = h.parent(a)) {
      labels.kinds[a] = NodeKind::kDense;
    }
  }
}

SparsityLabels classify_nodes(const SeriesPanel& panel, const Hierarchy& h, double alpha) {
  if (panel.nodes() != h.size()) throw ValidationError("panel and hierarchy sizes differ");
  SparsityLabels labels;
  labels.alpha = alpha;
  labels.kinds.resize(h.size());
  labels.p_values.resize(h.size());
  std::vector<double> row(panel.length());
  for (int i = 0; i < h.size(); ++i) {
    const double scale = panel.normalized ? h.leaf_count(i) : 1.0;
    for (int t = 0; t < panel.length(); ++t) row[t] = panel.values(i, t) * scale;
    const auto disp = dispersion_statistic(row);
    double p = 1.0;
    if (!disp.all_zero) {
      const double sf = chi_square_sf(disp.statistic, disp.dof);
      p = std::clamp(2.0 * std::min(sf, 1.0 - sf), 0.0, 1.0);
    }
    labels.p_values[i] = p;
    labels.kinds[i] = (disp.all_zero || p >= alpha) ? NodeKind::kSparse : NodeKind::kDense;
  }
  propagate_dense(labels, h);
  return labels;
}

}  // namespace hails
