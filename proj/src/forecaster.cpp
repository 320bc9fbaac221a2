#include "hails/forecaster.hpp"

#include <cmath>
#include <random>

#include "hails/parallel.hpp"

namespace hails {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

MatrixXd sigmoid(const MatrixXd& a) { return a.unaryExpr([](double v) { return sigmoid(v); }); }

int head_rows(NodeKind kind, int horizon) {
  return kind == NodeKind::kDense ? 2 * horizon : horizon;
}

void init_direction(GruDirection& d, int hidden, int input, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  std::uniform_real_distribution<double> u(-bound, bound);
  auto fill = [&](auto& m) {
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng);
  };
  d.wz.resize(hidden, input);
  d.wr.resize(hidden, input);
  d.wh.resize(hidden, input);
  d.uz.resize(hidden, hidden);
  d.ur.resize(hidden, hidden);
  d.uh.resize(hidden, hidden);
  d.bz.resize(hidden);
  d.br.resize(hidden);
  d.bh.resize(hidden);
  for_each_gru_tensor(fill, d);
}

// Runs one direction over the window. Processing step p reads input
// steps[reverse ? L - 1 - p : p].
MatrixXd gru_run(const GruDirection& p, const std::vector<MatrixXd>& steps, bool reverse,
                 GruTrace* trace) {
  const int hidden = static_cast<int>(p.uz.rows());
  const int batch = static_cast<int>(steps.front().cols());
  const int len = static_cast<int>(steps.size());
  MatrixXd h = MatrixXd::Zero(hidden, batch);
  if (trace) {
    trace->h_prev.resize(len);
    trace->z.resize(len);
    trace->r.resize(len);
    trace->cand.resize(len);
  }
  for (int s = 0; s < len; ++s) {
    const MatrixXd& x = steps[reverse ? len - 1 - s : s];
    MatrixXd z = sigmoid(((p.wz * x + p.uz * h).colwise() + p.bz).eval());
    MatrixXd r = sigmoid(((p.wr * x + p.ur * h).colwise() + p.br).eval());
    MatrixXd cand = ((p.wh * x + p.uh * r.cwiseProduct(h)).colwise() + p.bh)
                        .unaryExpr([](double v) { return std::tanh(v); });
    MatrixXd next = h + z.cwiseProduct(cand - h);
    if (trace) {
      trace->h_prev[s] = std::move(h);
      trace->z[s] = std::move(z);
      trace->r[s] = std::move(r);
      trace->cand[s] = std::move(cand);
    }
    h = std::move(next);
  }
  return h;
}

void gru_backward(const GruDirection& p, const std::vector<MatrixXd>& steps, bool reverse,
                  const GruTrace& tr, MatrixXd dh, GruDirection& g) {
  const int len = static_cast<int>(steps.size());
  for (int s = len - 1; s >= 0; --s) {
    const MatrixXd& x = steps[reverse ? len - 1 - s : s];
    const MatrixXd& hp = tr.h_prev[s];
    const MatrixXd& z = tr.z[s];
    const MatrixXd& r = tr.r[s];
    const MatrixXd& cand = tr.cand[s];

    const MatrixXd d_cand_pre =
        dh.cwiseProduct(z).cwiseProduct((1.0 - cand.array().square()).matrix());
    const MatrixXd d_z_pre =
        dh.cwiseProduct(cand - hp).cwiseProduct(z.cwiseProduct((1.0 - z.array()).matrix()));
    const MatrixXd rh = r.cwiseProduct(hp);
    const MatrixXd d_rh = p.uh.transpose() * d_cand_pre;
    const MatrixXd d_r_pre =
        d_rh.cwiseProduct(hp).cwiseProduct(r.cwiseProduct((1.0 - r.array()).matrix()));

    g.wh.noalias() += d_cand_pre * x.transpose();
    g.uh.noalias() += d_cand_pre * rh.transpose();
    g.bh += d_cand_pre.rowwise().sum();
    g.wz.noalias() += d_z_pre * x.transpose();
    g.uz.noalias() += d_z_pre * hp.transpose();
    g.bz += d_z_pre.rowwise().sum();
    g.wr.noalias() += d_r_pre * x.transpose();
    g.ur.noalias() += d_r_pre * hp.transpose();
    g.br += d_r_pre.rowwise().sum();

    MatrixXd dh_prev = dh.cwiseProduct((1.0 - z.array()).matrix()) + d_rh.cwiseProduct(r);
    dh_prev.noalias() += p.uz.transpose() * d_z_pre;
    dh_prev.noalias() += p.ur.transpose() * d_r_pre;
    dh = std::move(dh_prev);
  }
}

struct DenseRows {
  std::vector<int> nodes;  // node index of each dense position
};

DenseRows dense_rows(const SparsityLabels& labels) {
  DenseRows d;
  for (std::size_t i = 0; i < labels.kinds.size(); ++i) {
    if (labels.kinds[i] == NodeKind::kDense) d.nodes.push_back(static_cast<int>(i));
  }
  return d;
}

MatrixXd select_rows(const MatrixXd& m, const std::vector<int>& rows) {
  MatrixXd out(rows.size(), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(k) = m.row(rows[k]);
  return out;
}

}  // namespace

ModelParams init_model(const ModelShape& shape, const SparsityLabels& labels,
                       const InitOptions& opts) {
  if (shape.nodes <= 0 || shape.hidden <= 0 || shape.horizon <= 0 || shape.window <= 0 ||
      shape.input_size <= 0) {
    throw ValidationError("model shape entries must be positive");
  }
  if (static_cast<int>(labels.kinds.size()) != shape.nodes) {
    throw ValidationError("sparsity labels do not match node count");
  }
  if (!(opts.c > 0.0)) throw ValidationError("refinement constant c must be positive");

  ModelParams m;
  m.shape = shape;
  m.labels = labels;
  std::mt19937_64 rng(opts.seed);
  const int h = shape.hidden;
  m.nodes.resize(shape.nodes);
  for (int i = 0; i < shape.nodes; ++i) {
    NodeNet& net = m.nodes[i];
    net.kind = labels.kinds[i];
    init_direction(net.fwd, h, shape.input_size, rng);
    init_direction(net.bwd, h, shape.input_size, rng);
    const double bound = 1.0 / std::sqrt(2.0 * h);
    std::uniform_real_distribution<double> u(-bound, bound);
    net.head_w.resize(head_rows(net.kind, shape.horizon), 2 * h);
    for (Eigen::Index k = 0; k < net.head_w.size(); ++k) net.head_w.data()[k] = u(rng);
    net.head_b = VectorXd::Zero(net.head_w.rows());
  }

  const int n = shape.nodes;
  const int d = labels.dense_count();
  RefinementParams& rp = m.refine;
  rp.w_hat = VectorXd::Constant(n, opts.w_hat);
  rp.w = MatrixXd::Constant(n, n, 1.0 / n);
  rp.v1 = MatrixXd::Zero(n, n);
  rp.v2 = MatrixXd::Zero(n, d);
  rp.b = VectorXd::Zero(n);
  rp.c = opts.c;
  return m;
}

ModelGrads zeros_like(const ModelParams& params) {
  ModelGrads g;
  g.nodes = params.nodes;
  g.refine = params.refine;
  set_zero(g);
  return g;
}

void set_zero(ModelGrads& grads) {
  auto zero = [](auto& t) { t.setZero(); };
  for (auto& n : grads.nodes) for_each_net_tensor(zero, n);
  for_each_refine_tensor(zero, grads.refine);
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t count = 0;
  auto add = [&](const auto& t) { count += static_cast<std::size_t>(t.size()); };
  for (const auto& n : params.nodes) for_each_net_tensor(add, n);
  for_each_refine_tensor(add, params.refine);
  return count;
}

Eigen::VectorXd gru_encode(const std::vector<Eigen::VectorXd>& window, const NodeNet& net) {
  if (window.empty()) throw ValidationError("gru_encode: empty window");
  std::vector<MatrixXd> steps;
  steps.reserve(window.size());
  for (const auto& x : window) {
    if (x.size() != net.fwd.wz.cols()) throw ValidationError("gru_encode: input size mismatch");
    steps.emplace_back(x);
  }
  const int h = static_cast<int>(net.fwd.uz.rows());
  VectorXd enc(2 * h);
  enc.head(h) = gru_run(net.fwd, steps, false, nullptr).col(0);
  enc.tail(h) = gru_run(net.bwd, steps, true, nullptr).col(0);
  return enc;
}

BaseForecast base_forecast(const Eigen::VectorXd& encoding, const NodeNet& net, int horizon) {
  const VectorXd out = net.head_w * encoding + net.head_b;
  BaseForecast f;
  if (net.kind == NodeKind::kDense) {
    f.mu = out.head(horizon);
    f.sigma = out.segment(horizon, horizon).array().exp();
  } else {
    f.mu = out.head(horizon).unaryExpr([](double v) { return softplus(v) + kLambdaFloor; });
  }
  return f;
}

Eigen::VectorXd refine_means(const Eigen::VectorXd& mu, const RefinementParams& rp,
                             const SparsityLabels& labels) {
  const VectorXd gate = rp.w_hat.unaryExpr([](double v) { return sigmoid(v); });
  VectorXd out = gate.cwiseProduct(mu) + (1.0 - gate.array()).matrix().cwiseProduct(rp.w * mu);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    if (labels.is_sparse(static_cast<int>(i))) out(i) = std::max(out(i), kLambdaFloor);
  }
  return out;
}

Eigen::VectorXd refine_sigmas(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                              const RefinementParams& rp, const SparsityLabels& labels) {
  const auto dense = dense_rows(labels);
  VectorXd out(dense.nodes.size());
  for (std::size_t k = 0; k < dense.nodes.size(); ++k) {
    const int i = dense.nodes[k];
    const double a = rp.v1.row(i).dot(mu) + rp.v2.row(i).dot(sigma) + rp.b(i);
    out(k) = rp.c * sigma(k) * sigmoid(a);
  }
  return out;
}

Batch make_batch(const SeriesPanel& panel, const std::vector<int>& starts,
                 const ModelShape& shape) {
  if (panel.nodes() != shape.nodes) throw ValidationError("panel rows do not match model nodes");
  if (panel.covariate_count() + 1 != shape.input_size) {
    throw ValidationError("panel covariate channels do not match model input size");
  }
  const int b_count = static_cast<int>(starts.size());
  const int len = shape.window, tau = shape.horizon;
  Batch batch;
  batch.windows = b_count;
  batch.steps.assign(shape.nodes, std::vector<MatrixXd>(len, MatrixXd(shape.input_size, b_count)));
  bool with_targets = true;
  for (int s : starts) {
    if (s < 0 || s + len > panel.length()) throw ValidationError("window start out of range");
    if (s + len + tau > panel.length()) with_targets = false;
  }
  for (int i = 0; i < shape.nodes; ++i) {
    for (int k = 0; k < len; ++k) {
      MatrixXd& x = batch.steps[i][k];
      for (int b = 0; b < b_count; ++b) {
        x(0, b) = panel.values(i, starts[b] + k);
        for (int f = 0; f < panel.covariate_count(); ++f) {
          x(1 + f, b) = panel.covariates[f](i, starts[b] + k);
        }
      }
    }
  }
  if (with_targets) {
    batch.targets.resize(shape.nodes, static_cast<Eigen::Index>(b_count) * tau);
    for (int b = 0; b < b_count; ++b) {
      batch.targets.middleCols(static_cast<Eigen::Index>(b) * tau, tau) =
          panel.values.middleCols(starts[b] + len, tau);
    }
  }
  return batch;
}

ForwardResult forward_all(const ModelParams& params, const Batch& batch) {
  const ModelShape& sh = params.shape;
  const int n = sh.nodes, tau = sh.horizon, bsz = batch.windows;
  const int cols = bsz * tau;
  const auto dpos = params.labels.dense_positions();
  const int d = params.labels.dense_count();

  ForwardResult fr;
  fr.windows = bsz;
  fr.horizon = tau;
  fr.nodes.resize(n);
  fr.mu.resize(n, cols);
  fr.sigma.resize(d, cols);

  parallel_for(n, [&](int i) {
    const NodeNet& net = params.nodes[i];
    NodeCache& cache = fr.nodes[i];
    const int h = sh.hidden;
    cache.encoding.resize(2 * h, bsz);
    cache.encoding.topRows(h) = gru_run(net.fwd, batch.steps[i], false, &cache.fwd);
    cache.encoding.bottomRows(h) = gru_run(net.bwd, batch.steps[i], true, &cache.bwd);
    cache.head_out = (net.head_w * cache.encoding).colwise() + net.head_b;
    for (int b = 0; b < bsz; ++b) {
      for (int k = 0; k < tau; ++k) {
        const int col = b * tau + k;
        if (net.kind == NodeKind::kDense) {
          fr.mu(i, col) = cache.head_out(k, b);
          fr.sigma(dpos[i], col) = std::exp(cache.head_out(tau + k, b));
        } else {
          fr.mu(i, col) = softplus(cache.head_out(k, b)) + kLambdaFloor;
        }
      }
    }
  });

  const RefinementParams& rp = params.refine;
  fr.gate = rp.w_hat.unaryExpr([](double v) { return sigmoid(v); });
  fr.mix = rp.w * fr.mu;
  fr.mu_hat = fr.gate.asDiagonal() * fr.mu;
  fr.mu_hat.noalias() += (1.0 - fr.gate.array()).matrix().asDiagonal() * fr.mix;
  for (int i = 0; i < n; ++i) {
    if (params.labels.is_sparse(i)) fr.mu_hat.row(i) = fr.mu_hat.row(i).cwiseMax(kLambdaFloor);
  }

  const auto dense = dense_rows(params.labels);
  const MatrixXd v1 = select_rows(rp.v1, dense.nodes);
  const MatrixXd v2 = select_rows(rp.v2, dense.nodes);
  VectorXd bias(d);
  for (int k = 0; k < d; ++k) bias(k) = rp.b(dense.nodes[k]);
  MatrixXd act = v1 * fr.mu + v2 * fr.sigma;
  act.colwise() += bias;
  fr.sig_act = sigmoid(act);
  fr.sigma_hat = rp.c * fr.sigma.cwiseProduct(fr.sig_act);
  return fr;
}

std::vector<ForecastDist> distributions_at(const ForwardResult& fr, const SparsityLabels& labels,
                                           int col) {
  std::vector<ForecastDist> out;
  const auto dpos = labels.dense_positions();
  for (std::size_t i = 0; i < labels.kinds.size(); ++i) {
    if (labels.kinds[i] == NodeKind::kDense) {
      out.emplace_back(GaussianParams{fr.mu_hat(i, col), fr.sigma_hat(dpos[i], col)});
    } else {
      out.emplace_back(PoissonParams{fr.mu_hat(i, col), 1.0});
    }
  }
  return out;
}

void backward_all(const ModelParams& params, const Batch& batch, const ForwardResult& fr,
                  const Eigen::MatrixXd& d_mu_hat, const Eigen::MatrixXd& d_sigma_hat,
                  ModelGrads& grads, bool base) {
  const RefinementParams& rp = params.refine;
  RefinementParams& g = grads.refine;
  const int n = params.shape.nodes;
  const auto dense = dense_rows(params.labels);
  const int d = static_cast<int>(dense.nodes.size());

  MatrixXd dmh = d_mu_hat;
  for (int i = 0; i < n; ++i) {
    if (!params.labels.is_sparse(i)) continue;
    for (Eigen::Index c = 0; c < dmh.cols(); ++c) {
      const double raw = fr.gate(i) * fr.mu(i, c) + (1.0 - fr.gate(i)) * fr.mix(i, c);
      if (raw < kLambdaFloor) dmh(i, c) = 0.0;
    }
  }

  const VectorXd dgate = dmh.cwiseProduct(fr.mu - fr.mix).rowwise().sum();
  g.w_hat += dgate.cwiseProduct(fr.gate.cwiseProduct((1.0 - fr.gate.array()).matrix()));
  MatrixXd d_mu = fr.gate.asDiagonal() * dmh;
  const MatrixXd dmix = (1.0 - fr.gate.array()).matrix().asDiagonal() * dmh;
  g.w.noalias() += dmix * fr.mu.transpose();
  d_mu.noalias() += rp.w.transpose() * dmix;

  MatrixXd d_sigma = rp.c * d_sigma_hat.cwiseProduct(fr.sig_act);
  if (d > 0) {
    const MatrixXd d_act = rp.c * d_sigma_hat.cwiseProduct(fr.sigma).cwiseProduct(
                                      fr.sig_act.cwiseProduct((1.0 - fr.sig_act.array()).matrix()));
    const MatrixXd gv1 = d_act * fr.mu.transpose();
    const MatrixXd gv2 = d_act * fr.sigma.transpose();
    const VectorXd gb = d_act.rowwise().sum();
    for (int k = 0; k < d; ++k) {
      const int i = dense.nodes[k];
      g.v1.row(i) += gv1.row(k);
      g.v2.row(i) += gv2.row(k);
      g.b(i) += gb(k);
    }
    d_mu.noalias() += select_rows(rp.v1, dense.nodes).transpose() * d_act;
    d_sigma.noalias() += select_rows(rp.v2, dense.nodes).transpose() * d_act;
  }

  if (base) backward_base(params, batch, fr, d_mu, d_sigma, grads);
}

void backward_base(const ModelParams& params, const Batch& batch, const ForwardResult& fr,
                   const Eigen::MatrixXd& d_mu, const Eigen::MatrixXd& d_sigma,
                   ModelGrads& grads) {
  const ModelShape& sh = params.shape;
  const int tau = sh.horizon, bsz = batch.windows, h = sh.hidden;
  const auto dpos = params.labels.dense_positions();

  parallel_for(sh.nodes, [&](int i) {
    const NodeNet& net = params.nodes[i];
    const NodeCache& cache = fr.nodes[i];
    NodeNet& g = grads.nodes[i];
    MatrixXd d_out = MatrixXd::Zero(cache.head_out.rows(), bsz);
    for (int b = 0; b < bsz; ++b) {
      for (int k = 0; k < tau; ++k) {
        const int col = b * tau + k;
        if (net.kind == NodeKind::kDense) {
          d_out(k, b) = d_mu(i, col);
          d_out(tau + k, b) = d_sigma(dpos[i], col) * fr.sigma(dpos[i], col);
        } else {
          d_out(k, b) = d_mu(i, col) * sigmoid(cache.head_out(k, b));
        }
      }
    }
    g.head_w.noalias() += d_out * cache.encoding.transpose();
    g.head_b += d_out.rowwise().sum();
    const MatrixXd d_enc = net.head_w.transpose() * d_out;
    gru_backward(net.fwd, batch.steps[i], false, cache.fwd, d_enc.topRows(h), g.fwd);
    gru_backward(net.bwd, batch.steps[i], true, cache.bwd, d_enc.bottomRows(h), g.bwd);
  });
}

}  // namespace hails
