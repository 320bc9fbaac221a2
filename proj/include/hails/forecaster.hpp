#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "hails/distributions.hpp"
#include "hails/hierarchy.hpp"
#include "hails/sparsity.hpp"

namespace hails {

struct ModelShape {
  int nodes = 1;
  int hidden = 60;     // per direction
  int horizon = 12;    // tau
  int window = 24;     // input length L
  int input_size = 1;  // 1 + covariate channels
};

struct GruDirection {
  Eigen::MatrixXd wz, wr, wh;  // H x I
  Eigen::MatrixXd uz, ur, uh;  // H x H
  Eigen::VectorXd bz, br, bh;  // H
};

/// Per-node encoder plus distribution head. The head emits 2*tau rows for
/// dense nodes (means, then log-sigmas) and tau rows for sparse nodes.
struct NodeNet {
  NodeKind kind = NodeKind::kDense;
  GruDirection fwd, bwd;
  Eigen::MatrixXd head_w;  // out x 2H
  Eigen::VectorXd head_b;  // out
};

/// Global refinement layer. Rows of v1/v2/b are kept for every node but only
/// dense rows take part in the sigma refinement. `c` is a fixed hyperparameter.
struct RefinementParams {
  Eigen::VectorXd w_hat;  // N
  Eigen::MatrixXd w;      // N x N
  Eigen::MatrixXd v1;     // N x N
  Eigen::MatrixXd v2;     // N x D
  Eigen::VectorXd b;      // N
  double c = 2.0;
};

struct ModelParams {
  ModelShape shape;
  SparsityLabels labels;
  std::vector<NodeNet> nodes;
  RefinementParams refine;
};

/// Gradient buffers share the parameter layout.
struct ModelGrads {
  std::vector<NodeNet> nodes;
  RefinementParams refine;
};

// Tensor visitors. `f` is called with the matching tensor of every argument,
// so parameters, gradients and optimizer moments can be walked in lockstep.
template <class F, class Dir, class... Dirs>
void for_each_gru_tensor(F&& f, Dir& first, Dirs&... rest) {
  f(first.wz, rest.wz...);
  f(first.wr, rest.wr...);
  f(first.wh, rest.wh...);
  f(first.uz, rest.uz...);
  f(first.ur, rest.ur...);
  f(first.uh, rest.uh...);
  f(first.bz, rest.bz...);
  f(first.br, rest.br...);
  f(first.bh, rest.bh...);
}

template <class F, class Net, class... Nets>
void for_each_net_tensor(F&& f, Net& first, Nets&... rest) {
  for_each_gru_tensor(f, first.fwd, rest.fwd...);
  for_each_gru_tensor(f, first.bwd, rest.bwd...);
  f(first.head_w, rest.head_w...);
  f(first.head_b, rest.head_b...);
}

template <class F, class Ref, class... Refs>
void for_each_refine_tensor(F&& f, Ref& first, Refs&... rest) {
  f(first.w_hat, rest.w_hat...);
  f(first.w, rest.w...);
  f(first.v1, rest.v1...);
  f(first.v2, rest.v2...);
  f(first.b, rest.b...);
}

struct InitOptions {
  std::uint64_t seed = 0;
  double w_hat = 2.0;
  double c = 2.0;
};

ModelParams init_model(const ModelShape& shape, const SparsityLabels& labels,
                       const InitOptions& opts);
ModelGrads zeros_like(const ModelParams& params);
void set_zero(ModelGrads& grads);

/// Encodes one window; returns [final forward state; final backward state].
Eigen::VectorXd gru_encode(const std::vector<Eigen::VectorXd>& window, const NodeNet& net);

struct BaseForecast {
  Eigen::VectorXd mu;     // tau; lambda for sparse nodes
  Eigen::VectorXd sigma;  // tau; empty for sparse nodes
};

inline constexpr double kLambdaFloor = 1e-6;

BaseForecast base_forecast(const Eigen::VectorXd& encoding, const NodeNet& net, int horizon);

/// mu_hat_i = g_i mu_i + (1 - g_i) w_i . mu, g_i = sigmoid(w_hat_i); sparse
/// rows are floored at kLambdaFloor.
Eigen::VectorXd refine_means(const Eigen::VectorXd& mu, const RefinementParams& rp,
                             const SparsityLabels& labels);

/// sigma_hat_i = c sigma_i sigmoid(v1_i . mu + v2_i . sigma + b_i) for dense i.
Eigen::VectorXd refine_sigmas(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                              const RefinementParams& rp, const SparsityLabels& labels);

/// Model inputs for B windows. `steps[i][k]` is the I x B input of node i at
/// step k. Targets are N x (B * tau), column b * tau + k.
struct Batch {
  std::vector<std::vector<Eigen::MatrixXd>> steps;
  Eigen::MatrixXd targets;
  int windows = 0;
};

/// Windows start at `starts[b]`; inputs cover [s, s + L) and targets
/// [s + L, s + L + tau). Targets are left empty when they run past the panel.
Batch make_batch(const SeriesPanel& normalized, const std::vector<int>& starts,
                 const ModelShape& shape);

struct GruTrace {
  std::vector<Eigen::MatrixXd> h_prev, z, r, cand;
};

struct NodeCache {
  GruTrace fwd, bwd;
  Eigen::MatrixXd encoding;  // 2H x B
  Eigen::MatrixXd head_out;  // out x B
};

/// Result of a batched forward pass. Matrices are indexed by node (or dense
/// position for sigma) and column b * tau + k.
struct ForwardResult {
  Eigen::MatrixXd mu, sigma;          // base
  Eigen::MatrixXd mu_hat, sigma_hat;  // refined
  Eigen::VectorXd gate;               // sigmoid(w_hat)
  Eigen::MatrixXd mix;                // W mu
  Eigen::MatrixXd sig_act;            // sigmoid(v1 mu + v2 sigma + b), D x M
  std::vector<NodeCache> nodes;
  int windows = 0;
  int horizon = 0;
};

ForwardResult forward_all(const ModelParams& params, const Batch& batch);

/// Tagged refined distributions for column `col`.
std::vector<ForecastDist> distributions_at(const ForwardResult& fr, const SparsityLabels& labels,
                                           int col);

/// Back-propagates dL/d mu_hat (N x M) and dL/d sigma_hat (D x M). Refinement
/// gradients are always accumulated; base gradients only when `base` is set.
void backward_all(const ModelParams& params, const Batch& batch, const ForwardResult& fr,
                  const Eigen::MatrixXd& d_mu_hat, const Eigen::MatrixXd& d_sigma_hat,
                  ModelGrads& grads, bool base = true);

/// Gradient of a loss on the base outputs only (used by pretraining).
void backward_base(const ModelParams& params, const Batch& batch, const ForwardResult& fr,
                   const Eigen::MatrixXd& d_mu, const Eigen::MatrixXd& d_sigma,
                   ModelGrads& grads);

std::size_t parameter_count(const ModelParams& params);

}  // namespace hails
