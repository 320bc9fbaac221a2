#include "hails/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace hails {

AsyncMode parse_async_mode(const std::string& name) {
  if (name == "accumulate") return AsyncMode::kAccumulate;
  if (name == "skip") return AsyncMode::kSkip;
  throw ValidationError("unknown async mode '" + name + "'");
}

std::string to_string(AsyncMode mode) {
  return mode == AsyncMode::kAccumulate ? "accumulate" : "skip";
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("invalid config: ") + what);
  };
  require(gamma >= 0.0 && std::isfinite(gamma), "gamma must be >= 0");
  require(lr > 0.0, "lr must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(max_epochs >= 0, "max_epochs must be >= 0");
  require(pretrain_epochs >= 0, "pretrain_epochs must be >= 0");
  require(K >= 1, "K must be >= 1");
  require(patience >= 1, "patience must be >= 1");
  require(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must lie in (0,1)");
  require(hidden > 0 && horizon > 0 && window > 0, "hidden, horizon and window must be positive");
  require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0,1]");
  require(c > 0.0, "c must be positive");
}

// ---------------------------------------------------------------------------
// Consistency regularizer

namespace {

void require_unit_scale(const ForecastDist& d) {
  if (const auto* p = std::get_if<PoissonParams>(&d); p && p->scale != 1.0) {
    throw ValidationError("consistency loss expects forecasts on the normalized scale");
  }
}

}  // namespace

double dcrs_subtree_grad(const ForecastDist& parent, std::span<const ForecastDist> children,
                         std::span<const double> phi, double weight, DistGrad& d_parent,
                         std::span<DistGrad> d_children) {
  if (children.empty()) throw ValidationError("dcrs_subtree: no children");
  if (children.size() != phi.size() || children.size() != d_children.size()) {
    throw ValidationError("dcrs_subtree: children, phi and gradient lengths differ");
  }
  require_unit_scale(parent);
  for (const auto& c : children) require_unit_scale(c);

  if (const auto* pp = std::get_if<PoissonParams>(&parent)) {
    double agg = 0.0;
    for (std::size_t j = 0; j < children.size(); ++j) {
      const auto* cp = std::get_if<PoissonParams>(&children[j]);
      if (!cp) throw ValidationError("dcrs_subtree: Poisson parent with a Gaussian child");
      agg += phi[j] * cp->lambda;
    }
    const auto g = poisson_jsd_grad(std::max(pp->lambda, kMinScale), std::max(agg, kMinScale));
    if (pp->lambda > kMinScale) d_parent.d_mean += weight * g.d_l1;
    if (agg > kMinScale) {
      for (std::size_t j = 0; j < children.size(); ++j) {
        d_children[j].d_mean += weight * g.d_l2 * phi[j];
      }
    }
    return g.value;
  }

  // Gaussian parent: Poisson children enter through N(lambda, sqrt(lambda)).
  const auto& gp = std::get<GaussianParams>(parent);
  std::vector<GaussianParams> kids(children.size());
  for (std::size_t j = 0; j < children.size(); ++j) {
    if (const auto* cp = std::get_if<PoissonParams>(&children[j])) {
      kids[j] = poisson_to_gaussian(std::max(cp->lambda, kMinScale));
    } else {
      kids[j] = std::get<GaussianParams>(children[j]);
    }
  }
  const GaussianParams agg = gaussian_aggregate(kids, phi);
  const auto g = gaussian_consistency_loss_grad(gp, agg);
  d_parent.d_mean += weight * g.d_mu_parent;
  d_parent.d_sigma += weight * g.d_sigma_parent;
  const double sa = std::max(agg.sigma, kMinScale);
  for (std::size_t j = 0; j < children.size(); ++j) {
    const double dmu = weight * g.d_mu_agg * phi[j];
    const double dsig = weight * g.d_sigma_agg * phi[j] * phi[j] * kids[j].sigma / sa;
    if (const auto* cp = std::get_if<PoissonParams>(&children[j])) {
      if (cp->lambda > kMinScale) d_children[j].d_mean += dmu + dsig / (2.0 * kids[j].sigma);
    } else {
      d_children[j].d_mean += dmu;
      d_children[j].d_sigma += dsig;
    }
  }
  return g.value;
}

double dcrs_subtree(const ForecastDist& parent, std::span<const ForecastDist> children,
                    std::span<const double> phi) {
  DistGrad dp;
  std::vector<DistGrad> dc(children.size());
  return dcrs_subtree_grad(parent, children, phi, 0.0, dp, dc);
}

namespace {

std::vector<ForecastDist> gather(const std::vector<ForecastDist>& step, const std::vector<int>& idx) {
  std::vector<ForecastDist> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(step[i]);
  return out;
}

}  // namespace

double dcrs_total(const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h,
                  std::map<NodeId, double>* per_subtree) {
  if (!h.has_phi()) throw ValidationError("dcrs_total requires phi weights");
  if (steps.empty()) return 0.0;
  const auto internal = h.internal_nodes();
  const double inv_steps = 1.0 / static_cast<double>(steps.size());
  double total = 0.0;
  for (const auto& step : steps) {
    if (static_cast<int>(step.size()) != h.size()) {
      throw ValidationError("forecast count does not match hierarchy size");
    }
    for (int i : internal) {
      const auto kids = gather(step, h.children(i));
      const double l = dcrs_subtree(step[i], kids, h.phi(i));
      total += l * inv_steps;
      if (per_subtree) (*per_subtree)[i + 1] += l * inv_steps;
    }
  }
  return total;
}

double dce_metric(const std::vector<std::vector<ForecastDist>>& steps, const Hierarchy& h) {
  return dcrs_total(steps, h);
}

double likelihood_loss(const std::vector<std::vector<ForecastDist>>& steps,
                       const Eigen::MatrixXd& targets) {
  if (targets.cols() != static_cast<Eigen::Index>(steps.size())) {
    throw ValidationError("likelihood_loss: targets do not match horizon");
  }
  double nll = 0.0;
  for (std::size_t k = 0; k < steps.size(); ++k) {
    if (targets.rows() != static_cast<Eigen::Index>(steps[k].size())) {
      throw ValidationError("likelihood_loss: targets do not match node count");
    }
    for (std::size_t i = 0; i < steps[k].size(); ++i) {
      const double y = targets(i, k);
      if (const auto* g = std::get_if<GaussianParams>(&steps[k][i])) {
        nll -= gaussian_loglik(y, *g);
      } else {
        nll -= poisson_loglik(y, std::get<PoissonParams>(steps[k][i]).lambda);
      }
    }
  }
  return nll;
}

LossBreakdown batch_loss(const ForwardResult& fr, const Eigen::MatrixXd& targets,
                         const Hierarchy& h, const SparsityLabels& labels, double gamma,
                         Eigen::MatrixXd* d_mu_hat, Eigen::MatrixXd* d_sigma_hat) {
  const int n = static_cast<int>(fr.mu_hat.rows());
  const int cols = static_cast<int>(fr.mu_hat.cols());
  const int tau = fr.horizon;
  const double inv_b = 1.0 / fr.windows;
  const bool grads = d_mu_hat != nullptr;
  if (targets.rows() != n || targets.cols() != cols) {
    throw ValidationError("batch_loss: targets shape mismatch");
  }
  const auto dpos = labels.dense_positions();
  if (grads) {
    d_mu_hat->setZero(n, cols);
    d_sigma_hat->setZero(fr.sigma_hat.rows(), cols);
  }

  std::vector<double> node_ll(n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < cols; ++c) {
      const double y = targets(i, c);
      if (labels.is_sparse(i)) {
        const auto g = poisson_nll_grad(y, fr.mu_hat(i, c));
        node_ll[i] += g.value;
        if (grads) (*d_mu_hat)(i, c) += g.d_lambda * inv_b;
      } else {
        const auto g = gaussian_nll_grad(y, {fr.mu_hat(i, c), fr.sigma_hat(dpos[i], c)});
        node_ll[i] += g.value;
        if (grads) {
          (*d_mu_hat)(i, c) += g.d_mu * inv_b;
          (*d_sigma_hat)(dpos[i], c) += g.d_sigma * inv_b;
        }
      }
    }
  }

  LossBreakdown out;
  const auto internal = h.internal_nodes();
  const double step_weight = inv_b / tau;
  std::vector<double> node_dcrs(n, 0.0);
  std::vector<DistGrad> dgrad(n);
  for (int c = 0; c < cols; ++c) {
    const auto step = distributions_at(fr, labels, c);
    if (grads) std::fill(dgrad.begin(), dgrad.end(), DistGrad{});
    for (int i : internal) {
      const auto& kids_idx = h.children(i);
      const auto kids = gather(step, kids_idx);
      std::vector<DistGrad> dk(kids_idx.size());
      const double l = dcrs_subtree_grad(step[i], kids, h.phi(i), gamma * step_weight,
                                         dgrad[i], dk);
      node_dcrs[i] += l * step_weight;
      for (std::size_t j = 0; j < kids_idx.size(); ++j) {
        dgrad[kids_idx[j]].d_mean += dk[j].d_mean;
        dgrad[kids_idx[j]].d_sigma += dk[j].d_sigma;
      }
    }
    if (grads) {
      for (int i = 0; i < n; ++i) {
        (*d_mu_hat)(i, c) += dgrad[i].d_mean;
        if (!labels.is_sparse(i)) (*d_sigma_hat)(dpos[i], c) += dgrad[i].d_sigma;
      }
    }
  }

  for (int i = 0; i < n; ++i) {
    out.ll += node_ll[i] * inv_b;
    out.dcrs += node_dcrs[i];
  }
  for (int i : internal) out.per_subtree[i + 1] = node_dcrs[i];
  out.total = out.ll + gamma * out.dcrs;

  if (!std::isfinite(out.total)) {
    // a node's own likelihood points at the culprit; subtree terms only
    // inherit it from a child
    auto fail = [&](int i) {
      std::ostringstream msg;
      msg << "non-finite loss at node " << i + 1 << " (nll " << node_ll[i] << ", dcrs "
          << node_dcrs[i] << ")";
      throw NumericalError(msg.str());
    };
    for (int i = 0; i < n; ++i) {
      if (!std::isfinite(node_ll[i])) fail(i);
    }
    for (int i = 0; i < n; ++i) {
      if (!std::isfinite(node_dcrs[i])) fail(i);
    }
    throw NumericalError("non-finite loss");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

namespace {

template <class T>
void adam_update(T& p, const T& g, T& m, T& v, long t, const AdamConfig& cfg, double scale) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  auto pa = p.array();
  auto ma = m.array();
  auto va = v.array();
  const auto ga = (g.array() * scale).eval();
  ma = cfg.beta1 * ma + (1.0 - cfg.beta1) * ga;
  va = cfg.beta2 * va + (1.0 - cfg.beta2) * ga.square();
  pa -= cfg.lr * (ma / bc1) / ((va / bc2).sqrt() + cfg.eps);
}

}  // namespace

void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& state,
               const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ValidationError("adam_step: size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw ValidationError("adam_step: state size mismatch");
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * grads[k];
    state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * grads[k] * grads[k];
    params[k] -= cfg.lr * (state.m[k] / bc1) / (std::sqrt(state.v[k] / bc2) + cfg.eps);
  }
}

ModelAdam make_model_adam(const ModelParams& params) {
  ModelAdam a;
  a.m = zeros_like(params);
  a.v = zeros_like(params);
  return a;
}

void adam_step_refine(ModelParams& params, const ModelGrads& grads, ModelAdam& state,
                      const AdamConfig& cfg) {
  ++state.refine_t;
  const long t = state.refine_t;
  for_each_refine_tensor(
      [&](auto& p, const auto& g, auto& m, auto& v) { adam_update(p, g, m, v, t, cfg, 1.0); },
      params.refine, grads.refine, state.m.refine, state.v.refine);
}

void adam_step_base(ModelParams& params, const ModelGrads& grads, ModelAdam& state,
                    const AdamConfig& cfg, double scale) {
  ++state.base_t;
  const long t = state.base_t;
  for (std::size_t i = 0; i < params.nodes.size(); ++i) {
    for_each_net_tensor(
        [&](auto& p, const auto& g, auto& m, auto& v) { adam_update(p, g, m, v, t, cfg, scale); },
        params.nodes[i], grads.nodes[i], state.m.nodes[i], state.v.nodes[i]);
  }
}

// ---------------------------------------------------------------------------
// Training loops

WindowSplit split_windows(int length, const TrainConfig& cfg) {
  WindowSplit split;
  const int span = cfg.window + cfg.horizon;
  split.validation_start =
      length - static_cast<int>(std::lround(cfg.val_fraction * static_cast<double>(length)));
  for (int s = 0; s + span <= split.validation_start; ++s) split.train.push_back(s);
  for (int s = std::max(0, split.validation_start - cfg.window); s + span <= length; ++s) {
    split.validation.push_back(s);
  }
  if (split.train.empty()) {
    throw ValidationError("training period too short: need at least window + horizon = " +
                          std::to_string(span) + " steps before the validation split");
  }
  if (split.validation.empty()) {
    throw ValidationError("validation period too short for one window");
  }
  return split;
}

ModelParams initial_model(const SeriesPanel& normalized, const SparsityLabels& labels,
                          const TrainConfig& cfg) {
  ModelShape shape;
  shape.nodes = normalized.nodes();
  shape.hidden = cfg.hidden;
  shape.horizon = cfg.horizon;
  shape.window = cfg.window;
  shape.input_size = 1 + normalized.covariate_count();
  return init_model(shape, labels, {cfg.seed, cfg.w_hat_init, cfg.c});
}

TrainState make_train_state(ModelParams init) {
  TrainState s;
  s.adam = make_model_adam(init);
  s.accum = zeros_like(init);
  s.best = init;
  s.current = std::move(init);
  return s;
}

namespace {

std::vector<int> shuffled(const std::vector<int>& items, std::uint64_t seed, int epoch,
                          std::uint64_t salt) {
  std::vector<int> out = items;
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + salt + static_cast<std::uint64_t>(epoch));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::vector<std::vector<int>> batches_of(const std::vector<int>& order, int batch_size) {
  std::vector<std::vector<int>> out;
  for (std::size_t b = 0; b < order.size(); b += batch_size) {
    const auto end = std::min(order.size(), b + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + b, order.begin() + end);
  }
  return out;
}

}  // namespace

void pretrain(const SeriesPanel& normalized, ModelParams& params, const TrainConfig& cfg,
              int epochs) {
  if (epochs <= 0) return;
  const auto split = split_windows(normalized.length(), cfg);
  ModelAdam adam = make_model_adam(params);
  ModelGrads grads = zeros_like(params);
  const AdamConfig acfg{cfg.lr};
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto order = shuffled(split.train, cfg.seed, epoch, 0x5052455452ULL);
    for (const auto& starts : batches_of(order, cfg.batch_size)) {
      const Batch batch = make_batch(normalized, starts, params.shape);
      const ForwardResult fr = forward_all(params, batch);
      const Eigen::MatrixXd d_mu = 2.0 * (fr.mu - batch.targets) / batch.windows;
      const Eigen::MatrixXd d_sigma = Eigen::MatrixXd::Zero(fr.sigma.rows(), fr.sigma.cols());
      set_zero(grads);
      backward_base(params, batch, fr, d_mu, d_sigma, grads);
      adam_step_base(params, grads, adam, acfg);
    }
  }
}

void pretrain(const SeriesPanel& normalized, TrainState& state, const TrainConfig& cfg) {
  const int remaining = cfg.pretrain_epochs - state.pretrain_epochs_done;
  if (remaining <= 0) return;  // resumed state keeps its best-so-far
  pretrain(normalized, state.current, cfg, remaining);
  state.pretrain_epochs_done = cfg.pretrain_epochs;
  state.best = state.current;
}

TrainResult train(const SeriesPanel& normalized, const Hierarchy& h, TrainState& state,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (!normalized.normalized) throw ValidationError("train expects a normalized panel");
  if (!h.has_phi()) throw ValidationError("train requires phi weights");
  ModelParams& params = state.current;
  const SparsityLabels& labels = params.labels;
  const auto split = split_windows(normalized.length(), cfg);
  const Batch val_batch = make_batch(normalized, split.validation, params.shape);
  const AdamConfig acfg{cfg.lr};

  TrainResult result;
  ModelGrads grads = zeros_like(params);
  Eigen::MatrixXd d_mu_hat, d_sigma_hat;

  while (state.epochs_done < cfg.max_epochs && !state.stopped) {
    const auto t0 = std::chrono::steady_clock::now();
    const int epoch = state.epochs_done;
    const auto order = shuffled(split.train, cfg.seed, epoch, 0x545241494EULL);
    double ll = 0.0, dcrs = 0.0, total = 0.0;
    int batch_count = 0;
    for (const auto& starts : batches_of(order, cfg.batch_size)) {
      const Batch batch = make_batch(normalized, starts, params.shape);
      const ForwardResult fr = forward_all(params, batch);
      const LossBreakdown loss =
          batch_loss(fr, batch.targets, h, labels, cfg.gamma, &d_mu_hat, &d_sigma_hat);
      ll += loss.ll;
      dcrs += loss.dcrs;
      total += loss.total;
      ++batch_count;

      ++state.batch_counter;
      ++state.pending;
      const bool base_step = state.pending >= cfg.K;
      const bool base_grads = cfg.async_mode == AsyncMode::kAccumulate || base_step;

      set_zero(grads);
      backward_all(params, batch, fr, d_mu_hat, d_sigma_hat, grads, base_grads);
      adam_step_refine(params, grads, state.adam, acfg);
      ++result.counters.refine_updates;

      if (base_grads) {
        for (std::size_t i = 0; i < params.nodes.size(); ++i) {
          for_each_net_tensor([](auto& acc, const auto& g) { acc += g; }, state.accum.nodes[i],
                              grads.nodes[i]);
        }
      }
      if (base_step) {
        const double scale =
            cfg.async_mode == AsyncMode::kAccumulate ? 1.0 / static_cast<double>(state.pending) : 1.0;
        adam_step_base(params, state.accum, state.adam, acfg, scale);
        ++result.counters.base_updates;
        for (auto& n : state.accum.nodes) {
          for_each_net_tensor([](auto& t) { t.setZero(); }, n);
        }
        state.pending = 0;
      }
    }
    result.counters.batches += batch_count;

    const ForwardResult vfr = forward_all(params, val_batch);
    const LossBreakdown vloss = batch_loss(vfr, val_batch.targets, h, labels, cfg.gamma);

    EpochLog row;
    row.epoch = epoch + 1;
    row.ll = ll / batch_count;
    row.dcrs = dcrs / batch_count;
    row.total = total / batch_count;
    row.val_total = vloss.total;
    row.dce = vloss.dcrs;
    result.log.push_back(row);

    if (!state.has_best || vloss.total < state.best_val) {
      state.best_val = vloss.total;
      state.has_best = true;
      state.best = params;
      state.bad_epochs = 0;
    } else if (++state.bad_epochs >= cfg.patience) {
      state.stopped = true;
      result.early_stopped = true;
    }
    ++state.epochs_done;
    ++result.epochs_run;
    result.counters.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (on_epoch) on_epoch(row, state);
  }

  result.best = state.best;
  result.best_val = state.best_val;
  return result;
}

TrainResult fit(const SeriesPanel& normalized, const Hierarchy& h, const SparsityLabels& labels,
                const TrainConfig& cfg) {
  cfg.validate();
  TrainState state = make_train_state(initial_model(normalized, labels, cfg));
  pretrain(normalized, state, cfg);
  return train(normalized, h, state, cfg);
}

std::vector<std::vector<ForecastDist>> forecast_at(const ModelParams& params,
                                                   const SeriesPanel& normalized, int origin) {
  const int start = origin - params.shape.window;
  if (start < 0 || origin > normalized.length()) {
    throw ValidationError("forecast origin leaves no full input window");
  }
  Batch batch = make_batch(normalized.slice(0, origin), {start}, params.shape);
  const ForwardResult fr = forward_all(params, batch);
  std::vector<std::vector<ForecastDist>> steps;
  for (int k = 0; k < params.shape.horizon; ++k) {
    steps.push_back(distributions_at(fr, params.labels, k));
    for (std::size_t i = 0; i < steps.back().size(); ++i) {
      const double m = dist_mean(steps.back()[i]);
      if (!std::isfinite(m) || !std::isfinite(dist_variance(steps.back()[i]))) {
        throw NumericalError("non-finite forecast at node " + std::to_string(i + 1));
      }
    }
  }
  return steps;
}

}  // namespace hails
