#include "hails/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "hails/log.hpp"
#include "hails/training.hpp"

namespace hails {

double rmsse(std::span<const double> train, std::span<const double> truth,
             std::span<const double> pred) {
  if (train.size() < 2) throw ValidationError("rmsse: training history needs >= 2 values");
  if (truth.empty() || truth.size() != pred.size()) {
    throw ValidationError("rmsse: truth and prediction lengths differ");
  }
  double naive = 0.0;
  for (std::size_t t = 1; t < train.size(); ++t) {
    naive += (train[t] - train[t - 1]) * (train[t] - train[t - 1]);
  }
  naive /= static_cast<double>(train.size() - 1);
  if (!(naive > 0.0)) throw ValidationError("rmsse: flat training history");
  double err = 0.0;
  for (std::size_t t = 0; t < truth.size(); ++t) err += (truth[t] - pred[t]) * (truth[t] - pred[t]);
  err /= static_cast<double>(truth.size());
  return std::sqrt(err / naive);
}

double wrmsse(std::span<const double> per_node_rmsse, std::span<const double> train_means) {
  if (per_node_rmsse.size() != train_means.size()) {
    throw ValidationError("wrmsse: lengths differ");
  }
  const double total = std::accumulate(train_means.begin(), train_means.end(), 0.0);
  if (!(total > 0.0)) throw ValidationError("wrmsse: all weights are zero");
  double out = 0.0;
  for (std::size_t i = 0; i < per_node_rmsse.size(); ++i) {
    out += train_means[i] / total * per_node_rmsse[i];
  }
  return out;
}

double normalized_crps(std::span<const double> truth, std::span<const ForecastDist> dists,
                       double train_mean) {
  if (!(train_mean > 0.0)) throw ValidationError("normalized_crps: training mean must be positive");
  if (truth.empty() || truth.size() != dists.size()) {
    throw ValidationError("normalized_crps: truth and forecast lengths differ");
  }
  double sum = 0.0;
  for (std::size_t t = 0; t < truth.size(); ++t) sum += crps_gaussian(truth[t], as_gaussian(dists[t]));
  return sum / static_cast<double>(truth.size()) / train_mean;
}

std::vector<double> rmse_per_step(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& pred) {
  if (truth.rows() != pred.rows() || truth.cols() != pred.cols()) {
    throw ValidationError("rmse_per_step: shapes differ");
  }
  std::vector<double> out(truth.cols());
  for (Eigen::Index t = 0; t < truth.cols(); ++t) {
    out[t] = std::sqrt((truth.col(t) - pred.col(t)).squaredNorm() / static_cast<double>(truth.rows()));
  }
  return out;
}

EvalReport evaluate(const Eigen::MatrixXd& train, const Eigen::MatrixXd& truth,
                    const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h) {
  const int n = h.size();
  const int tau = static_cast<int>(steps.size());
  if (train.rows() != n || truth.rows() != n || truth.cols() != tau) {
    throw ValidationError("evaluate: truth/forecast/hierarchy shapes are not aligned");
  }
  EvalReport report;
  Eigen::MatrixXd pred(n, tau);
  for (int k = 0; k < tau; ++k) {
    if (static_cast<int>(steps[k].size()) != n) {
      throw ValidationError("evaluate: forecast step has wrong node count");
    }
    for (int i = 0; i < n; ++i) pred(i, k) = dist_mean(steps[k][i]);
  }

  for (int i = 0; i < n; ++i) {
    NodeMetrics m;
    const Eigen::VectorXd tr = train.row(i).transpose();
    const Eigen::VectorXd y = truth.row(i).transpose();
    const Eigen::VectorXd p = pred.row(i).transpose();
    m.train_mean = tr.mean();
    try {
      m.rmsse = rmsse(std::span(tr.data(), tr.size()), std::span(y.data(), y.size()),
                      std::span(p.data(), p.size()));
    } catch (const ValidationError& e) {
      ++report.rmsse_excluded;
      warn("node " + std::to_string(i + 1) + " excluded from RMSSE: " + e.what());
    }
    if (m.train_mean > 0.0) {
      std::vector<ForecastDist> d;
      for (int k = 0; k < tau; ++k) d.push_back(steps[k][i]);
      m.ncrps = normalized_crps(std::span(y.data(), y.size()), d, m.train_mean);
    } else {
      ++report.ncrps_excluded;
      warn("node " + std::to_string(i + 1) + " excluded from normalized CRPS: zero training mean");
    }
    for (int k = 0; k < tau; ++k) m.sq_error.push_back((y(k) - p(k)) * (y(k) - p(k)));
    report.per_node[i + 1] = std::move(m);
  }

  auto summarize = [&](const std::vector<int>& nodes, LevelMetrics& out) {
    std::vector<double> r, w;
    double ncrps_sum = 0.0;
    int ncrps_count = 0;
    for (int i : nodes) {
      const auto& m = report.per_node[i + 1];
      if (m.rmsse) {
        r.push_back(*m.rmsse);
        w.push_back(m.train_mean);
      } else {
        ++out.rmsse_excluded;
      }
      if (m.ncrps) {
        ncrps_sum += *m.ncrps;
        ++ncrps_count;
      } else {
        ++out.ncrps_excluded;
      }
    }
    out.nodes = static_cast<int>(nodes.size());
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    out.wrmsse = r.empty() || !(wsum > 0.0) ? 0.0 : wrmsse(r, w);
    out.ncrps = ncrps_count > 0 ? ncrps_sum / ncrps_count : 0.0;
    Eigen::MatrixXd t_sub(nodes.size(), tau), p_sub(nodes.size(), tau);
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      t_sub.row(k) = truth.row(nodes[k]);
      p_sub.row(k) = pred.row(nodes[k]);
    }
    out.rmse = rmse_per_step(t_sub, p_sub);
  };

  for (int level = 1; level <= h.depth(); ++level) {
    LevelMetrics lm;
    lm.level = level;
    summarize(h.nodes_at_level(level), lm);
    report.per_level[level] = std::move(lm);
  }
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  LevelMetrics total;
  summarize(all, total);
  report.total_wrmsse = total.wrmsse;
  report.total_ncrps = total.ncrps;
  report.dce = dce_metric(normalize_forecasts(steps, h), h);
  return report;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["total"] = {{"wrmsse", total_wrmsse},
                {"ncrps", total_ncrps},
                {"dce", dce},
                {"rmsse_excluded", rmsse_excluded},
                {"ncrps_excluded", ncrps_excluded}};
  auto& levels = j["levels"] = nlohmann::json::array();
  for (const auto& [level, lm] : per_level) {
    levels.push_back({{"level", level},
                      {"nodes", lm.nodes},
                      {"wrmsse", lm.wrmsse},
                      {"ncrps", lm.ncrps},
                      {"rmse", lm.rmse},
                      {"rmsse_excluded", lm.rmsse_excluded},
                      {"ncrps_excluded", lm.ncrps_excluded}});
  }
  auto& nodes = j["nodes"] = nlohmann::json::array();
  for (const auto& [id, m] : per_node) {
    nlohmann::json row{{"node", id}, {"train_mean", m.train_mean}};
    row["rmsse"] = m.rmsse ? nlohmann::json(*m.rmsse) : nlohmann::json(nullptr);
    row["ncrps"] = m.ncrps ? nlohmann::json(*m.ncrps) : nlohmann::json(nullptr);
    std::vector<double> rmse(m.sq_error.size());
    for (std::size_t k = 0; k < rmse.size(); ++k) rmse[k] = std::sqrt(m.sq_error[k]);
    row["rmse"] = rmse;
    nodes.push_back(std::move(row));
  }
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "level,metric,value\n";
  for (const auto& [level, lm] : per_level) {
    out << level << ",wrmsse," << lm.wrmsse << '\n';
    out << level << ",ncrps," << lm.ncrps << '\n';
    double mean_rmse = 0.0;
    for (double v : lm.rmse) mean_rmse += v;
    out << level << ",rmse," << (lm.rmse.empty() ? 0.0 : mean_rmse / lm.rmse.size()) << '\n';
    for (std::size_t k = 0; k < lm.rmse.size(); ++k) {
      out << level << ",rmse_step_" << k + 1 << ',' << lm.rmse[k] << '\n';
    }
  }
  out << "total,wrmsse," << total_wrmsse << '\n';
  out << "total,ncrps," << total_ncrps << '\n';
  out << "total,dce," << dce << '\n';
  out << "total,rmsse_excluded," << rmsse_excluded << '\n';
  out << "total,ncrps_excluded," << ncrps_excluded << '\n';
  return out.str();
}

}  // namespace hails
