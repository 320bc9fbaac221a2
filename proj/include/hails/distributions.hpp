#pragma once

#include <span>
#include <variant>
#include <vector>

namespace hails {

struct GaussianParams {
  double mu = 0.0;
  double sigma = 1.0;
};

/// Poisson count model. `scale` is 1 on the normalized (model) scale; after
/// denormalization the reported variable is scale * Poisson(lambda), so
/// mean = scale * lambda and variance = scale^2 * lambda.
struct PoissonParams {
  double lambda = 1.0;
  double scale = 1.0;
};

using ForecastDist = std::variant<GaussianParams, PoissonParams>;

inline bool is_gaussian(const ForecastDist& d) {
  return std::holds_alternative<GaussianParams>(d);
}
double dist_mean(const ForecastDist& d);
double dist_variance(const ForecastDist& d);

/// Floors applied to sigma / lambda inside every loss.
inline constexpr double kMinScale = 1e-6;

GaussianParams gaussian_aggregate(std::span<const GaussianParams> children,
                                  std::span<const double> phi);

/// Closed-form Gaussian consistency kernel used by the coherence regularizer:
/// [s_p^2 + d^2]/(4 s_a^2) + [s_a^2 + d^2]/(4 s_p^2) - 1/2, d = mu_p - mu_a.
double gaussian_consistency_loss(const GaussianParams& parent, const GaussianParams& agg);

struct GaussianPairGrad {
  double value;
  double d_mu_parent, d_sigma_parent, d_mu_agg, d_sigma_agg;
};
GaussianPairGrad gaussian_consistency_loss_grad(const GaussianParams& parent,
                                                const GaussianParams& agg);

/// l1 log(l1/l2) + l2 log(l2/l1).
double poisson_jsd(double l1, double l2);

struct PoissonPairGrad {
  double value;
  double d_l1, d_l2;
};
PoissonPairGrad poisson_jsd_grad(double l1, double l2);

/// Normal approximation N(lambda, sqrt(lambda)).
GaussianParams poisson_to_gaussian(double lambda);
/// Moment-matched normal for a (possibly scaled) Poisson.
GaussianParams poisson_to_gaussian(const PoissonParams& p);
/// Any forecast as a Gaussian; Gaussians pass through.
GaussianParams as_gaussian(const ForecastDist& d);

double gaussian_loglik(double y, const GaussianParams& p);
/// Continuous extension y log(lambda) - lambda - lgamma(y + 1).
double poisson_loglik(double y, double lambda);

/// Derivatives of the negated log-likelihoods.
struct GaussianNllGrad {
  double value, d_mu, d_sigma;
};
GaussianNllGrad gaussian_nll_grad(double y, const GaussianParams& p);
struct PoissonNllGrad {
  double value, d_lambda;
};
PoissonNllGrad poisson_nll_grad(double y, double lambda);

double normal_pdf(double z);
double normal_cdf(double z);
double normal_quantile(double q);

/// Closed-form CRPS of a Gaussian forecast.
double crps_gaussian(double y, const GaussianParams& p);

/// Gaussian: mu + sigma * Phi^-1(q). Poisson: scale * (smallest k with CDF(k) >= q).
double forecast_quantile(const ForecastDist& d, double q);

}  // namespace hails
