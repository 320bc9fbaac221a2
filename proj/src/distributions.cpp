#include "hails/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <boost/math/distributions/normal.hpp>

#include "hails/hierarchy.hpp"

namespace hails {

double dist_mean(const ForecastDist& d) {
  if (const auto* g = std::get_if<GaussianParams>(&d)) return g->mu;
  const auto& p = std::get<PoissonParams>(d);
  return p.scale * p.lambda;
}

double dist_variance(const ForecastDist& d) {
  if (const auto* g = std::get_if<GaussianParams>(&d)) return g->sigma * g->sigma;
  const auto& p = std::get<PoissonParams>(d);
  return p.scale * p.scale * p.lambda;
}

GaussianParams gaussian_aggregate(std::span<const GaussianParams> children,
                                  std::span<const double> phi) {
  if (children.empty()) throw ValidationError("gaussian_aggregate: no children");
  if (children.size() != phi.size()) {
    throw ValidationError("gaussian_aggregate: children and phi lengths differ");
  }
  double mu = 0.0, var = 0.0;
  for (std::size_t j = 0; j < children.size(); ++j) {
    mu += phi[j] * children[j].mu;
    var += phi[j] * phi[j] * children[j].sigma * children[j].sigma;
  }
  return {mu, std::sqrt(var)};
}

GaussianPairGrad gaussian_consistency_loss_grad(const GaussianParams& parent,
                                                const GaussianParams& agg) {
  const double sp = std::max(parent.sigma, kMinScale);
  const double sa = std::max(agg.sigma, kMinScale);
  const double d = parent.mu - agg.mu;
  const double sp2 = sp * sp, sa2 = sa * sa, d2 = d * d;

  GaussianPairGrad g{};
  g.value = (sp2 + d2) / (4.0 * sa2) + (sa2 + d2) / (4.0 * sp2) - 0.5;
  g.d_mu_parent = d / (2.0 * sa2) + d / (2.0 * sp2);
  g.d_mu_agg = -g.d_mu_parent;
  g.d_sigma_parent = parent.sigma > kMinScale ? sp / (2.0 * sa2) - (sa2 + d2) / (2.0 * sp2 * sp) : 0.0;
  g.d_sigma_agg = agg.sigma > kMinScale ? sa / (2.0 * sp2) - (sp2 + d2) / (2.0 * sa2 * sa) : 0.0;
  return g;
}

double gaussian_consistency_loss(const GaussianParams& parent, const GaussianParams& agg) {
  return gaussian_consistency_loss_grad(parent, agg).value;
}

PoissonPairGrad poisson_jsd_grad(double l1, double l2) {
  if (!(l1 > 0.0) || !(l2 > 0.0)) throw ValidationError("poisson_jsd: rates must be positive");
  const double log_ratio = std::log(l1) - std::log(l2);
  // (l1 - l2) * log(l1 / l2)
  return {(l1 - l2) * log_ratio, log_ratio + (l1 - l2) / l1, -log_ratio - (l1 - l2) / l2};
}

double poisson_jsd(double l1, double l2) { return poisson_jsd_grad(l1, l2).value; }

GaussianParams poisson_to_gaussian(double lambda) {
  if (!(lambda > 0.0)) throw ValidationError("poisson_to_gaussian: lambda must be positive");
  return {lambda, std::sqrt(lambda)};
}

GaussianParams poisson_to_gaussian(const PoissonParams& p) {
  const GaussianParams g = poisson_to_gaussian(p.lambda);
  return {g.mu * p.scale, g.sigma * p.scale};
}

GaussianParams as_gaussian(const ForecastDist& d) {
  if (const auto* g = std::get_if<GaussianParams>(&d)) return *g;
  return poisson_to_gaussian(std::get<PoissonParams>(d));
}

GaussianNllGrad gaussian_nll_grad(double y, const GaussianParams& p) {
  const double s = std::max(p.sigma, kMinScale);
  const double r = y - p.mu;
  GaussianNllGrad g{};
  g.value = std::log(s) + 0.5 * std::log(2.0 * std::numbers::pi) + r * r / (2.0 * s * s);
  g.d_mu = -r / (s * s);
  g.d_sigma = p.sigma > kMinScale ? 1.0 / s - r * r / (s * s * s) : 0.0;
  return g;
}

double gaussian_loglik(double y, const GaussianParams& p) { return -gaussian_nll_grad(y, p).value; }

PoissonNllGrad poisson_nll_grad(double y, double lambda) {
  if (!(lambda > 0.0)) throw ValidationError("poisson_loglik: lambda must be positive");
  const double l = std::max(lambda, kMinScale);
  PoissonNllGrad g{};
  g.value = -(y * std::log(l) - l - std::lgamma(y + 1.0));
  g.d_lambda = lambda > kMinScale ? 1.0 - y / l : 0.0;
  return g;
}

double poisson_loglik(double y, double lambda) { return -poisson_nll_grad(y, lambda).value; }

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double normal_quantile(double q) {
  if (!(q > 0.0 && q < 1.0)) throw ValidationError("quantile level must lie in (0,1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), q);
}

double crps_gaussian(double y, const GaussianParams& p) {
  const double s = std::max(p.sigma, kMinScale);
  const double z = (y - p.mu) / s;
  return s * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) -
              1.0 / std::sqrt(std::numbers::pi));
}

double forecast_quantile(const ForecastDist& d, double q) {
  if (!(q > 0.0 && q < 1.0)) throw ValidationError("quantile level must lie in (0,1)");
  if (const auto* g = std::get_if<GaussianParams>(&d)) return g->mu + g->sigma * normal_quantile(q);
  const auto& p = std::get<PoissonParams>(d);
  const double lambda = std::max(p.lambda, kMinScale);
  double pmf = std::exp(-lambda);
  double cdf = pmf;
  long k = 0;
  // The upper cap guards against q indistinguishable from 1 in floating point.
  const long cap = static_cast<long>(lambda + 40.0 * std::sqrt(lambda) + 100.0);
  while (cdf < q && k < cap) {
    ++k;
    pmf *= lambda / static_cast<double>(k);
    cdf += pmf;
  }
  return p.scale * static_cast<double>(k);
}

}  // namespace hails
