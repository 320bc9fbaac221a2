// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hails/distributions.hpp"
#include "hails/hierarchy.hpp"
#include "hails/io.hpp"
#include "hails/metrics.hpp"
#include "hails/sparsity.hpp"
#include "hails/synth.hpp"
#include "hails/training.hpp"
#include "test_support.hpp"

namespace {

using namespace hails;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "FAILED ") + what;
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void criterion(int id, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome out;
  try {
    out = body();
  } catch (const std::exception& e) {
    out.require(false, std::string("exception: ") + e.what());
  }
  const double secs = seconds_since(t0);
  if (limit_s > 0) out.require(secs < limit_s, "runtime " + fmt(secs, 3) + " s < " + fmt(limit_s, 4) + " s");
  if (!out.pass) ++failures;
  std::printf("criterion %d %s %s (%.2f s): %s\n", id, out.pass ? "PASS" : "FAIL", name.c_str(), secs,
              out.detail.c_str());
  std::fflush(stdout);
}

// ---------------------------------------------------------------- 1

Outcome kernels() {
  Outcome o;
  auto near = [](double a, double b) { return std::abs(a - b) <= 1e-9; };
  o.require(near(gaussian_consistency_loss({1, 1}, {0, 1}), 0.5) &&
                near(gaussian_consistency_loss({0, 2}, {0, 1}), 0.5625),
            "gaussian examples");
  o.require(near(poisson_jsd(2, 1), std::numbers::ln2) && near(poisson_jsd(1, 2), std::numbers::ln2),
            "poisson examples");
  o.require(gaussian_consistency_loss({1.3, 0.7}, {1.3, 0.7}) == 0.0 && poisson_jsd(2.5, 2.5) == 0.0,
            "exact zeros");
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> mu(-5, 5), sd(0.05, 4), rate(0.01, 20);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const GaussianParams a{mu(rng), sd(rng)}, b{mu(rng), sd(rng)};
    const double g1 = gaussian_consistency_loss(a, b), g2 = gaussian_consistency_loss(b, a);
    const double l1 = rate(rng), l2 = rate(rng);
    const double p1 = poisson_jsd(l1, l2), p2 = poisson_jsd(l2, l1);
    worst = std::max({worst, std::abs(g1 - g2) / (1 + g1), std::abs(p1 - p2) / (1 + p1)});
  }
  o.require(worst <= 1e-12, "symmetry over 1000 pairs, worst rel " + fmt(worst));
  return o;
}

// ---------------------------------------------------------------- 2

double crps_trapezoid(double y, const GaussianParams& p, int n) {
  const double lo = p.mu - 12 * p.sigma, hi = p.mu + 12 * p.sigma;
  auto seg = [&](double a, double b, bool above) {
    if (b <= a) return 0.0;
    const double dx = (b - a) / n;
    double s = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double F = 0.5 * std::erfc(-(a + i * dx - p.mu) / (p.sigma * std::numbers::sqrt2));
      const double v = above ? (1 - F) * (1 - F) : F * F;
      s += (i == 0 || i == n) ? 0.5 * v : v;
    }
    return s * dx;
  };
  const double cut = std::clamp(y, lo, hi);
  double total = seg(lo, cut, false) + seg(cut, hi, true);
  if (y > hi) total += y - hi;
  if (y < lo) total += lo - y;
  return total;
}

Outcome crps() {
  Outcome o;
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> mu(-10, 10), sd(0.1, 5), off(-4, 4);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const GaussianParams p{mu(rng), sd(rng)};
    const double y = p.mu + off(rng) * p.sigma;
    worst = std::max(worst, std::abs(crps_gaussian(y, p) - crps_trapezoid(y, p, 20000)));
  }
  o.require(worst <= 1e-6, "50 cases, worst abs " + fmt(worst));
  return o;
}

// ---------------------------------------------------------------- 3

Outcome gradients() {
  using namespace hails::testing_support;
  Outcome o;
  const Hierarchy h = seven_node_tree();
  const SeriesPanel panel = seven_node_panel(30, 3);
  ModelShape shape;
  shape.nodes = 7;
  shape.hidden = 5;
  shape.horizon = 2;
  shape.window = 8;
  const double gamma = 0.5;

  ModelParams params = init_model(shape, mixed_labels(), {1});
  std::mt19937_64 rng(77);
  std::normal_distribution<double> g(0.0, 0.2);
  for_each_refine_tensor([&](auto& t) { for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] += g(rng); },
                         params.refine);
  for (auto& n : params.nodes) n.head_b.array() += 1.0;
  const Batch batch = make_batch(panel, {0, 7, 15}, shape);

  const auto fr = forward_all(params, batch);
  Eigen::MatrixXd dmu, dsig;
  const auto loss0 = batch_loss(fr, batch.targets, h, params.labels, gamma, &dmu, &dsig);
  // node 1: mixed, node 2: gaussian, node 3: poisson
  o.require(loss0.per_subtree.size() == 3 && loss0.per_subtree.at(1) > 0 && loss0.per_subtree.at(2) > 0 &&
                loss0.per_subtree.at(3) > 0,
            "all three subtree cases active");

  auto grads = zeros_like(params);
  backward_all(params, batch, fr, dmu, dsig, grads);
  auto loss = [&] { return batch_loss(forward_all(params, batch), batch.targets, h, params.labels, gamma).total; };
  const double step = 1e-5;
  double worst = 0.0;
  std::string where;
  const auto all = slots(params, grads);
  for (const auto& slot : all) {
    const double keep = *slot.value;
    *slot.value = keep + step;
    const double up = loss();
    *slot.value = keep - step;
    const double down = loss();
    *slot.value = keep;
    const double e = rel_err(*slot.grad, (up - down) / (2 * step));
    if (e > worst) worst = e, where = slot.group;
  }
  o.require(worst <= 1e-3, std::to_string(all.size()) + " parameters, worst rel " + fmt(worst) + " at " + where);
  return o;
}

// ---------------------------------------------------------------- 4

Outcome sparsity() {
  Outcome o;
  const Hierarchy single = Hierarchy::single_node();
  int sparse = 0, dense = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(5000 + trial);
    std::poisson_distribution<int> pois(3.0);
    std::normal_distribution<double> norm(100.0, 2.0);
    Eigen::MatrixXd a(1, 200), b(1, 200);
    for (int t = 0; t < 200; ++t) {
      a(0, t) = pois(rng);
      b(0, t) = norm(rng);
    }
    sparse += classify_nodes(make_panel(a), single, 0.1).is_sparse(0) ? 1 : 0;
    dense += classify_nodes(make_panel(b), single, 0.1).is_sparse(0) ? 0 : 1;
  }
  o.require(sparse >= 90, "Poisson(3) sparse " + std::to_string(sparse) + "/100");
  o.require(dense >= 99, "N(100,4) dense " + std::to_string(dense) + "/100");

  // the benchmark panels plus a few other shapes
  int checked = 0, closed = 0;
  for (std::uint64_t seed = 1; seed <= 15; ++seed) {
    SynthConfig cfg;
    cfg.seed = seed <= 5 ? seed : 900 + seed;
    if (seed > 5) {
      cfg.branching = seed % 2 ? std::vector<int>{2, 3, 2} : std::vector<int>{4, 2};
      cfg.base_rate = 0.5 + static_cast<double>(seed - 5);
      cfg.noise = 0.1 * static_cast<double>(seed % 3);
    }
    auto [h, raw] = generate(cfg);
    const SeriesPanel train = seed <= 5 ? raw.slice(0, 108) : raw;
    ++checked;
    closed += classify_nodes(train, h, 0.1).propagation_closed(h) ? 1 : 0;
  }
  o.require(closed == checked, "propagation closed on " + std::to_string(closed) + "/" +
                                   std::to_string(checked) + " synthetic hierarchies");
  return o;
}

// ---------------------------------------------------------------- 5, 6

constexpr int kTrainEnd = 108;
constexpr int kSeeds = 5;

struct BenchRun {
  double dce = 0.0;  // held-out, normalized forecasts at the train end
  double wrmsse = 0.0;
  double six_average = 0.0;
  double seconds = 0.0;
  int epochs = 0;
};

struct BenchData {
  Hierarchy h;
  SeriesPanel raw;
};

BenchData benchmark_data(std::uint64_t seed) {
  SynthConfig sc;
  sc.branching = {3, 3};
  sc.T = 120;
  sc.period = 12;
  sc.sparsity_scale = 0.3;
  sc.seed = seed;
  auto [h, raw] = generate(sc);
  return {h.with_phi(PhiMode::kLeafProportional), raw};
}

BenchRun bench_run(std::uint64_t seed, double gamma) {
  const auto t0 = Clock::now();
  const BenchData d = benchmark_data(seed);
  TrainConfig cfg;  // defaults for everything else
  cfg.seed = seed;
  cfg.gamma = gamma;
  const SeriesPanel train_raw = d.raw.slice(0, kTrainEnd);
  const auto labels = classify_nodes(train_raw, d.h, cfg.alpha);
  const auto norm = normalize_panel(train_raw, d.h);
  const auto res = fit(norm, d.h, labels, cfg);
  const auto steps_norm = forecast_at(res.best, norm, kTrainEnd);
  const Eigen::MatrixXd hist = d.raw.values.leftCols(kTrainEnd);
  const Eigen::MatrixXd truth = d.raw.values.middleCols(kTrainEnd, cfg.horizon);

  BenchRun r;
  r.dce = dce_metric(steps_norm, d.h);
  r.wrmsse = evaluate(hist, truth, denormalize_forecasts(steps_norm, d.h), d.h).total_wrmsse;
  const Eigen::MatrixXd ref = reference_forecast(train_raw, d.h, cfg.horizon);
  std::vector<std::vector<ForecastDist>> six(cfg.horizon);
  for (int k = 0; k < cfg.horizon; ++k) {
    for (int i = 0; i < d.h.size(); ++i) six[k].push_back(GaussianParams{ref(i, k), 1.0});
  }
  r.six_average = evaluate(hist, truth, six, d.h).total_wrmsse;
  r.epochs = res.epochs_run;
  r.seconds = seconds_since(t0);
  return r;
}

std::map<std::pair<int, double>, BenchRun> bench;

Outcome coherence() {
  Outcome o;
  double dce_half = 0.0, dce_zero = 0.0;
  std::string per_seed;
  for (int s = 1; s <= kSeeds; ++s) {
    for (double gamma : {0.5, 0.0}) bench[{s, gamma}] = bench_run(s, gamma);
    const auto& a = bench[{s, 0.5}];
    const auto& b = bench[{s, 0.0}];
    dce_half += a.dce;
    dce_zero += b.dce;
    per_seed += " s" + std::to_string(s) + "=" + fmt(a.dce / b.dce, 3);
  }
  const double ratio = dce_half / dce_zero;
  o.require(ratio <= 0.5, "held-out DCE gamma=0.5 / gamma=0 over " + std::to_string(kSeeds) +
                              " seeds = " + fmt(ratio, 3) + " (<= 0.5); per seed" + per_seed);
  return o;
}

Outcome accuracy() {
  Outcome o;
  int beat_six = 0, beat_zero = 0;
  std::string per_seed;
  for (int s = 1; s <= kSeeds; ++s) {
    const auto& a = bench.at({s, 0.5});
    const auto& b = bench.at({s, 0.0});
    beat_six += a.wrmsse < a.six_average;
    beat_zero += a.wrmsse < b.wrmsse;
    per_seed += " s" + std::to_string(s) + "=" + fmt(a.wrmsse) + "/" + fmt(b.wrmsse) + "/" + fmt(a.six_average);
  }
  o.require(beat_six == kSeeds, "below 6-Average in " + std::to_string(beat_six) + "/5 seeds");
  o.require(beat_zero >= 4, "below gamma=0 in " + std::to_string(beat_zero) + "/5 seeds");
  o.detail += "; WRMSSE hails/gamma0/six-average" + per_seed;
  double secs = 0.0;
  for (const auto& [key, r] : bench) secs += r.seconds;
  o.require(secs < 1800, "benchmark training " + fmt(secs, 4) + " s for " + std::to_string(bench.size()) +
                             " runs (< 1800 s)");
  return o;
}

// ---------------------------------------------------------------- 7

Outcome async_updates() {
  Outcome o;
  const BenchData d = benchmark_data(1);
  const SeriesPanel train_raw = d.raw.slice(0, kTrainEnd);
  struct Run {
    long base;
    double val, per_epoch;
  };
  auto run = [&](int K) {
    TrainConfig cfg;
    cfg.seed = 1;
    cfg.K = K;
    cfg.async_mode = AsyncMode::kSkip;
    cfg.max_epochs = 30;
    cfg.patience = 1000;  // same epoch budget for both
    const auto labels = classify_nodes(train_raw, d.h, cfg.alpha);
    const auto res = fit(normalize_panel(train_raw, d.h), d.h, labels, cfg);
    double secs = 0.0;
    for (double e : res.counters.epoch_seconds) secs += e;
    return Run{res.counters.base_updates, res.log.back().val_total, secs / res.epochs_run};
  };
  const Run k1 = run(1), k5 = run(5);
  o.require(k5.base <= 0.25 * static_cast<double>(k1.base),
            "base updates " + std::to_string(k5.base) + " vs " + std::to_string(k1.base));
  o.require(std::abs(k5.val - k1.val) <= 0.1 * std::abs(k1.val),
            "final val loss " + fmt(k5.val, 6) + " vs " + fmt(k1.val, 6));
  o.require(k5.per_epoch < k1.per_epoch,
            "s/epoch " + fmt(k5.per_epoch) + " vs " + fmt(k1.per_epoch));
  return o;
}

// ---------------------------------------------------------------- 8

Outcome metrics_oracle() {
  Outcome o;
  auto near = [](double a, double b) { return std::abs(a - b) <= 1e-9; };
  const std::vector<double> train{1, 2, 3}, truth{5, 5}, pred{4, 5};
  o.require(near(rmsse(train, truth, pred), std::sqrt(0.5)), "rmsse");
  const std::vector<double> r{0.4, 0.8}, w{10, 30};
  o.require(near(wrmsse(r, w), 0.7), "wrmsse");
  const std::vector<double> y{3.0};
  const std::vector<ForecastDist> d{GaussianParams{3.0, 1.0}};
  o.require(near(normalized_crps(y, d, 4.0), 0.2336949772551091 / 4), "normalized_crps");
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(1, 2), p(1, 2);
  p << 3, 4;
  const auto rm = rmse_per_step(t, p);
  o.require(near(rm[0], 3.0) && near(rm[1], 4.0), "rmse");

  const BenchData b = benchmark_data(3);
  auto total = [&](double k) {
    const SeriesPanel raw = make_panel(b.raw.values * k);
    const SeriesPanel hist = raw.slice(0, kTrainEnd);
    const Eigen::MatrixXd ref = reference_forecast(hist, b.h, 12);
    std::vector<std::vector<ForecastDist>> steps(12);
    for (int s = 0; s < 12; ++s) {
      for (int i = 0; i < b.h.size(); ++i) steps[s].push_back(GaussianParams{ref(i, s), 1.0});
    }
    return evaluate(hist.values, raw.values.middleCols(kTrainEnd, 12), steps, b.h).total_wrmsse;
  };
  const double w1 = total(1.0), w7 = total(7.0);
  o.require(std::abs(w1 - w7) <= 1e-9 * std::max(1.0, w1), "x7 invariance " + fmt(w1, 12) + " vs " + fmt(w7, 12));
  return o;
}

// ---------------------------------------------------------------- 9

int cli(const std::string& args) {
  const std::string cmd = std::string(HAILS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome reproducibility() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "hails_acceptance_repro";
  fs::remove_all(dir);
  const std::string data = (dir / "data").string();
  o.require(cli("--out " + data + " --seed 11 synth-gen") == 0, "synth-gen");
  const std::string args = " --seed 5 train --edges " + data + "/edges.csv --panel " + data +
                           "/panel.csv --train-end 108 --max-epochs 4 --pretrain-epochs 3";
  o.require(cli("--out " + (dir / "a").string() + args) == 0, "first train");
  o.require(cli("--out " + (dir / "b").string() + args) == 0, "second train");
  const std::string la = io::read_text(dir / "a" / "training_log.csv");
  const std::string lb = io::read_text(dir / "b" / "training_log.csv");
  o.require(!la.empty() && la == lb, "training logs byte-identical (" + std::to_string(la.size()) + " bytes)");
  fs::remove_all(dir);
  return o;
}

}  // namespace

int main() {
  criterion(1, "divergence kernels", 1, kernels);
  criterion(2, "CRPS closed form", 5, crps);
  criterion(3, "gradient check", 30, gradients);
  criterion(4, "sparsity classifier", 0, sparsity);
  criterion(5, "coherence effect", 600, coherence);
  criterion(6, "accuracy effect", 0, accuracy);
  criterion(7, "asynchronous updates", 0, async_updates);
  criterion(8, "metrics oracle", 0, metrics_oracle);
  criterion(9, "reproducibility", 0, reproducibility);

  std::printf("%s: %d criterion failure(s)\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
