#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hails/distributions.hpp"
#include "hails/forecaster.hpp"
#include "hails/hierarchy.hpp"

namespace hails {

/// How base (encoder + head) gradients are handled between the every-K
/// updates. `kAccumulate` sums gradients over the K batches and applies their
/// mean; `kSkip` back-propagates into the base only on update batches.
enum class AsyncMode { kAccumulate, kSkip };

AsyncMode parse_async_mode(const std::string& name);
std::string to_string(AsyncMode mode);

struct TrainConfig {
  double gamma = 0.5;
  double lr = 0.001;
  int batch_size = 32;
  int max_epochs = 200;
  int pretrain_epochs = 50;
  int K = 5;
  int patience = 10;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  // Model and data settings.
  int hidden = 60;
  int horizon = 12;
  int window = 24;
  double alpha = 0.1;
  double c = 2.0;
  double w_hat_init = 2.0;
  PhiMode phi_mode = PhiMode::kLeafProportional;
  AsyncMode async_mode = AsyncMode::kAccumulate;

  void validate() const;
};

struct LossBreakdown {
  double ll = 0.0;    // negated log-likelihood
  double dcrs = 0.0;  // consistency regularizer
  double total = 0.0; // ll + gamma * dcrs
  std::map<NodeId, double> per_subtree;
};

/// Loss derivative with respect to one distribution's parameters. For a
/// Poisson forecast `d_mean` is the derivative with respect to lambda and
/// `d_sigma` is unused.
struct DistGrad {
  double d_mean = 0.0;
  double d_sigma = 0.0;
};

/// Consistency loss of one subtree; dispatches on the parent/children tags.
double dcrs_subtree(const ForecastDist& parent, std::span<const ForecastDist> children,
                    std::span<const double> phi);

/// Same, accumulating parameter gradients (scaled by `weight`) into `d_parent`
/// and `d_children`. Returns the unscaled loss.
double dcrs_subtree_grad(const ForecastDist& parent, std::span<const ForecastDist> children,
                         std::span<const double> phi, double weight, DistGrad& d_parent,
                         std::span<DistGrad> d_children);

/// `steps[k][i]` is node i's forecast at horizon step k. Sum over internal
/// nodes, mean over steps.
double dcrs_total(const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h,
                  std::map<NodeId, double>* per_subtree = nullptr);

/// Distributional consistency error of held-out forecasts (same computation
/// as dcrs_total, no gradients).
double dce_metric(const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h);

/// Negated log-likelihood summed over nodes and steps. `targets` is N x tau.
double likelihood_loss(const std::vector<std::vector<ForecastDist>>& steps,
                       const Eigen::MatrixXd& targets);

/// Batched loss on a forward pass; fills gradients w.r.t. refined parameters
/// when `d_mu_hat` is non-null. Averaged over windows.
LossBreakdown batch_loss(const ForwardResult& fr, const Eigen::MatrixXd& targets,
                         const Hierarchy& h, const SparsityLabels& labels, double gamma,
                         Eigen::MatrixXd* d_mu_hat = nullptr,
                         Eigen::MatrixXd* d_sigma_hat = nullptr);

/// First and second moments for Adam over a flat parameter vector.
struct AdamMoments {
  std::vector<double> m, v;
  long t = 0;
};

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam step on a flat parameter vector.
void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& state,
               const AdamConfig& cfg);

/// Adam moments in model layout, with independent step counters for the
/// refinement layer and the base networks.
struct ModelAdam {
  ModelGrads m, v;
  long refine_t = 0;
  long base_t = 0;
};

ModelAdam make_model_adam(const ModelParams& params);
void adam_step_refine(ModelParams& params, const ModelGrads& grads, ModelAdam& state,
                      const AdamConfig& cfg);
/// `scale` multiplies the gradients first (1/K for accumulated gradients).
void adam_step_base(ModelParams& params, const ModelGrads& grads, ModelAdam& state,
                    const AdamConfig& cfg, double scale = 1.0);

/// Window starts for the temporal train/validation split of a panel of length T.
struct WindowSplit {
  std::vector<int> train;
  std::vector<int> validation;
  int validation_start = 0;
};
WindowSplit split_windows(int length, const TrainConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double ll = 0.0;
  double dcrs = 0.0;
  double total = 0.0;
  double val_total = 0.0;
  double dce = 0.0;
};

struct TrainCounters {
  long batches = 0;
  long refine_updates = 0;
  long base_updates = 0;
  std::vector<double> epoch_seconds;
};

/// Everything needed to continue training where it stopped.
struct TrainState {
  ModelParams current;
  ModelParams best;
  ModelAdam adam;
  ModelGrads accum;
  int epochs_done = 0;
  int pretrain_epochs_done = 0;
  long batch_counter = 0;
  long pending = 0;  // batches accumulated since the last base update
  double best_val = 0.0;
  bool has_best = false;
  int bad_epochs = 0;
  bool stopped = false;
};

TrainState make_train_state(ModelParams init);

struct TrainResult {
  ModelParams best;
  std::vector<EpochLog> log;
  TrainCounters counters;
  double best_val = 0.0;
  int epochs_run = 0;
  bool early_stopped = false;
};

/// Independent point-forecast pretraining of every node's encoder and head
/// (squared error on the base mean), refinement frozen.
void pretrain(const SeriesPanel& normalized, ModelParams& params, const TrainConfig& cfg,
              int epochs);
void pretrain(const SeriesPanel& normalized, TrainState& state, const TrainConfig& cfg);

using EpochCallback = std::function<void(const EpochLog&, const TrainState&)>;

/// Main training loop with two-frequency updates and early stopping on the
/// validation total loss. `normalized` is the training period only.
TrainResult train(const SeriesPanel& normalized, const Hierarchy& h, TrainState& state,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Convenience: init, pretrain, train.
TrainResult fit(const SeriesPanel& normalized, const Hierarchy& h, const SparsityLabels& labels,
                const TrainConfig& cfg);

ModelParams initial_model(const SeriesPanel& normalized, const SparsityLabels& labels,
                          const TrainConfig& cfg);

/// Refined forecasts (normalized scale) from the window ending at `origin`
/// (exclusive). Returns steps[k][i].
std::vector<std::vector<ForecastDist>> forecast_at(const ModelParams& params,
                                                   const SeriesPanel& normalized, int origin);

}  // namespace hails
