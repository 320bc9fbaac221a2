#include "hails/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <sstream>

#include "hails/log.hpp"

namespace hails {

PhiMode parse_phi_mode(const std::string& name) {
  if (name == "paper_uniform") return PhiMode::kPaperUniform;
  if (name == "leaf_proportional") return PhiMode::kLeafProportional;
  throw ValidationError("unknown phi mode '" + name + "'");
}

std::string to_string(PhiMode mode) {
  return mode == PhiMode::kPaperUniform ? "paper_uniform" : "leaf_proportional";
}

Hierarchy Hierarchy::build(const std::vector<std::pair<NodeId, NodeId>>& edges) {
  if (edges.empty()) throw ValidationError("edge list is empty");

  NodeId max_id = 0;
  for (const auto& [p, c] : edges) {
    if (p <= 0 || c <= 0) {
      throw ValidationError("node ids must be positive integers");
    }
    if (p == c) throw ValidationError("cycle detected: self-loop at node " + std::to_string(p));
    max_id = std::max({max_id, p, c});
  }

  const int n = max_id;
  std::vector<int> parent(n, -1);
  std::vector<bool> seen(n, false);
  for (const auto& [p, c] : edges) {
    seen[p - 1] = seen[c - 1] = true;
    if (parent[c - 1] != -1) {
      if (parent[c - 1] == p - 1) {
        throw ValidationError("duplicate edge (" + std::to_string(p) + "," +
                              std::to_string(c) + ")");
      }
      throw ValidationError("duplicate parent for child " + std::to_string(c));
    }
    parent[c - 1] = p - 1;
  }
  for (int i = 0; i < n; ++i) {
    if (!seen[i]) {
      throw ValidationError("disconnected node " + std::to_string(i + 1) +
                            " (node ids must be contiguous 1..N)");
    }
  }

  std::vector<int> roots;
  for (int i = 0; i < n; ++i) {
    if (parent[i] == -1) roots.push_back(i);
  }
  if (roots.empty()) throw ValidationError("cycle detected: no root node");
  if (roots.size() > 1) {
    std::ostringstream msg;
    msg << "multiple roots:";
    for (int r : roots) msg << ' ' << r + 1;
    throw ValidationError(msg.str());
  }
  if (roots.front() != 0) {
    throw ValidationError("root must be node 1, found node " +
                          std::to_string(roots.front() + 1));
  }

  Hierarchy h;
  h.parent_ = std::move(parent);
  h.children_.assign(n, {});
  for (int i = 1; i < n; ++i) {
    if (h.parent_[i] >= 0) h.children_[h.parent_[i]].push_back(i);
  }
  for (auto& c : h.children_) std::sort(c.begin(), c.end());

  h.level_.assign(n, 0);
  std::deque<int> queue{0};
  h.level_[0] = 1;
  while (!queue.empty()) {
    const int i = queue.front();
    queue.pop_front();
    h.bfs_.push_back(i);
    for (int c : h.children_[i]) {
      h.level_[c] = h.level_[i] + 1;
      queue.push_back(c);
    }
  }
  if (static_cast<int>(h.bfs_.size()) != n) {
    // Every unreachable node has a parent, so it sits on a cycle.
    for (int i = 0; i < n; ++i) {
      if (h.level_[i] == 0) {
        throw ValidationError("cycle detected involving node " + std::to_string(i + 1));
      }
    }
  }

  h.leaf_count_.assign(n, 0);
  for (auto it = h.bfs_.rbegin(); it != h.bfs_.rend(); ++it) {
    const int i = *it;
    if (h.children_[i].empty()) {
      h.leaf_count_[i] = 1;
    } else {
      for (int c : h.children_[i]) h.leaf_count_[i] += h.leaf_count_[c];
    }
  }
  h.max_level_ = *std::max_element(h.level_.begin(), h.level_.end());
  h.phi_.resize(n);
  for (int i = 0; i < n; ++i) h.phi_[i].assign(h.children_[i].size(), 0.0);
  return h;
}

Hierarchy Hierarchy::single_node() {
  Hierarchy h;
  h.parent_ = {-1};
  h.children_ = {{}};
  h.phi_ = {{}};
  h.level_ = {1};
  h.leaf_count_ = {1};
  h.bfs_ = {0};
  h.max_level_ = 1;
  return h;
}

Hierarchy Hierarchy::with_phi(PhiMode mode) const {
  Hierarchy h = *this;
  for (int i = 0; i < size(); ++i) {
    const auto& kids = children_[i];
    for (std::size_t k = 0; k < kids.size(); ++k) {
      h.phi_[i][k] = mode == PhiMode::kPaperUniform
                         ? 1.0 / static_cast<double>(kids.size())
                         : static_cast<double>(leaf_count_[kids[k]]) / leaf_count_[i];
    }
  }
  h.has_phi_ = true;
  h.phi_mode_ = mode;
  return h;
}

std::vector<int> Hierarchy::internal_nodes() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (!children_[i].empty()) out.push_back(i);
  }
  return out;
}

std::vector<int> Hierarchy::nodes_at_level(int level) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (level_[i] == level) out.push_back(i);
  }
  return out;
}

std::vector<std::pair<NodeId, NodeId>> Hierarchy::edges() const {
  std::vector<std::pair<NodeId, NodeId>> out;
  for (int i = 1; i < size(); ++i) out.emplace_back(parent_[i] + 1, i + 1);
  return out;
}

SeriesPanel SeriesPanel::slice(int begin, int end) const {
  if (begin < 0 || end > length() || begin > end) {
    throw ValidationError("panel slice out of range");
  }
  SeriesPanel out;
  out.values = values.middleCols(begin, end - begin);
  out.time_index.assign(time_index.begin() + begin, time_index.begin() + end);
  for (const auto& cov : covariates) out.covariates.push_back(cov.middleCols(begin, end - begin));
  out.covariate_names = covariate_names;
  out.normalized = normalized;
  return out;
}

void SeriesPanel::validate() const {
  if (values.rows() == 0 || values.cols() == 0) throw ValidationError("panel is empty");
  if (static_cast<Eigen::Index>(time_index.size()) != values.cols()) {
    throw ValidationError("panel time index length does not match values");
  }
  if (!values.allFinite()) throw ValidationError("panel contains non-finite values");
  if (!normalized && (values.array() < 0.0).any()) {
    throw ValidationError("raw panel contains negative values");
  }
  for (const auto& cov : covariates) {
    if (cov.rows() != values.rows() || cov.cols() != values.cols()) {
      throw ValidationError("covariate channel shape does not match values");
    }
    if (!cov.allFinite()) throw ValidationError("covariate channel contains non-finite values");
  }
}

SeriesPanel make_panel(Eigen::MatrixXd values) {
  SeriesPanel p;
  p.time_index.resize(values.cols());
  for (Eigen::Index t = 0; t < values.cols(); ++t) p.time_index[t] = t;
  p.values = std::move(values);
  return p;
}

namespace {

void require_shape(const SeriesPanel& panel, const Hierarchy& h) {
  if (panel.nodes() != h.size()) {
    throw ValidationError("panel has " + std::to_string(panel.nodes()) +
                          " rows but hierarchy has " + std::to_string(h.size()) + " nodes");
  }
}

}  // namespace

SeriesPanel normalize_panel(const SeriesPanel& panel, const Hierarchy& h) {
  if (panel.normalized) throw ValidationError("panel is already normalized");
  require_shape(panel, h);
  const auto residuals = raw_sum_check(panel, h, 1e-6);
  if (!residuals.empty()) {
    const auto& r = residuals.front();
    warn("raw panel is not additively coherent at " + std::to_string(residuals.size()) +
         " cells (first: node " + std::to_string(r.node) + ", t=" + std::to_string(r.t) +
         ", residual " + std::to_string(r.residual) + ")");
  }
  SeriesPanel out = panel;
  for (int i = 0; i < h.size(); ++i) out.values.row(i) /= static_cast<double>(h.leaf_count(i));
  out.normalized = true;
  return out;
}

SeriesPanel denormalize_panel(const SeriesPanel& panel, const Hierarchy& h) {
  if (!panel.normalized) throw ValidationError("panel is not normalized");
  require_shape(panel, h);
  SeriesPanel out = panel;
  for (int i = 0; i < h.size(); ++i) out.values.row(i) *= static_cast<double>(h.leaf_count(i));
  out.normalized = false;
  return out;
}

namespace {

template <class Weight>
std::vector<CoherenceResidual> check_with(const SeriesPanel& panel, const Hierarchy& h,
                                          double tol, Weight weight) {
  require_shape(panel, h);
  std::vector<CoherenceResidual> out;
  for (int i = 0; i < h.size(); ++i) {
    const auto& kids = h.children(i);
    if (kids.empty()) continue;
    for (int t = 0; t < panel.length(); ++t) {
      double agg = 0.0;
      for (std::size_t k = 0; k < kids.size(); ++k) {
        agg += weight(i, k) * panel.values(kids[k], t);
      }
      const double r = panel.values(i, t) - agg;
      if (std::abs(r) > tol) out.push_back({i + 1, t, r});
    }
  }
  return out;
}

}  // namespace

std::vector<CoherenceResidual> aggregate_check(const SeriesPanel& panel,
                                               const Hierarchy& h, double tol) {
  if (!h.has_phi()) throw ValidationError("aggregate_check requires phi weights");
  return check_with(panel, h, tol,
                    [&](int i, std::size_t k) { return h.phi(i)[k]; });
}

std::vector<CoherenceResidual> raw_sum_check(const SeriesPanel& panel,
                                             const Hierarchy& h, double tol) {
  return check_with(panel, h, tol, [](int, std::size_t) { return 1.0; });
}

}  // namespace hails

namespace hails {
namespace {

std::vector<std::vector<ForecastDist>> rescale(const std::vector<std::vector<ForecastDist>>& steps,
                                               const Hierarchy& h, bool forward) {
  auto out = steps;
  for (auto& step : out) {
    if (static_cast<int>(step.size()) != h.size()) {
      throw ValidationError("forecast count does not match hierarchy size");
    }
    for (int i = 0; i < h.size(); ++i) {
      const double leaves = h.leaf_count(i);
      const double f = forward ? leaves : 1.0 / leaves;
      if (auto* g = std::get_if<GaussianParams>(&step[i])) {
        g->mu *= f;
        g->sigma *= f;
      } else {
        std::get<PoissonParams>(step[i]).scale *= f;
      }
    }
  }
  return out;
}

}  // namespace

std::vector<std::vector<ForecastDist>> denormalize_forecasts(
    const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h) {
  return rescale(steps, h, true);
}

std::vector<std::vector<ForecastDist>> normalize_forecasts(
    const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h) {
  return rescale(steps, h, false);
}

}  // namespace hails
