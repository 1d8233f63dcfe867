#pragma once

// Parametric box uncertainty: Gaussian centroid and von-Mises orientation
// losses with analytic gradients, the modified Bessel functions they need,
// and centered prediction intervals for both families.

#include <array>
#include <cmath>
#include <numbers>
#include <utility>

#include "trustlens/core.hpp"
#include "trustlens/error.hpp"

namespace trustlens::uncertainty {

inline constexpr double kSeriesLimit = 15.0;

namespace detail {

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw Error(ErrorCode::nan_payload, std::string(what) + " is not finite");
}

inline void require_nonnegative(double x, const char* fn) {
  if (std::isnan(x)) throw Error(ErrorCode::nan_payload, std::string(fn) + ": NaN argument");
  if (x < 0.0) throw Error(ErrorCode::invalid_argument, std::string(fn) + ": argument must be >= 0");
}

// sum_k (x^2/4)^k / (k! (k+nu)!) for nu in {0, 1}
inline double power_series(double x, int nu) {
  const double q = 0.25 * x * x;
  double term = 1.0;
  if (nu == 1) term = 1.0;  // 1 / (0! 1!)
  double sum = term;
  for (int k = 1; k < 200; ++k) {
    term *= q / (static_cast<double>(k) * static_cast<double>(k + nu));
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

// Hankel expansion sum for I_nu(x) * sqrt(2 pi x) * exp(-x):
//   sum_k (-1)^k prod_{j=1..k} (mu - (2j-1)^2) / (k! (8x)^k),  mu = 4 nu^2.
// Truncated at the smallest term, which is below 1e-13 for x > 15.
inline double hankel_sum(double x, int nu) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 60; ++k) {
    const double odd = 2.0 * k - 1.0;
    const double next = -term * (mu - odd * odd) / (static_cast<double>(k) * 8.0 * x);
    if (std::abs(next) >= std::abs(term)) break;
    term = next;
    sum += term;
    if (std::abs(term) < 1e-17 * std::abs(sum)) break;
  }
  return sum;
}

}  // namespace detail

// Modified Bessel function of the first kind, order 0.
inline double bessel_i0(double x) {
  detail::require_nonnegative(x, "bessel_i0");
  if (x <= kSeriesLimit) return detail::power_series(x, 0);
  return std::exp(x) / std::sqrt(2.0 * std::numbers::pi * x) * detail::hankel_sum(x, 0);
}

// log I0(x) without overflow for large x.
inline double log_bessel_i0(double x) {
  detail::require_nonnegative(x, "log_bessel_i0");
  if (x <= kSeriesLimit) return std::log(detail::power_series(x, 0));
  if (std::isinf(x)) return x;
  return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log(detail::hankel_sum(x, 0));
}

// I1(x) / I0(x), the derivative of log I0.
inline double bessel_ratio_i1_i0(double x) {
  detail::require_nonnegative(x, "bessel_ratio_i1_i0");
  if (x == 0.0) return 0.0;
  if (x <= kSeriesLimit) return 0.5 * x * detail::power_series(x, 1) / detail::power_series(x, 0);
  if (std::isinf(x)) return 1.0;
  return detail::hankel_sum(x, 1) / detail::hankel_sum(x, 0);
}

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_derivative(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

// ---------------------------------------------------------------------------
// Losses

struct CentroidLoss {
  double loss = 0.0;
  // d/d(pred_x, pred_y, pred_z, u_x, u_y, u_z)
  std::array<double, 6> grad{};
};

// Gaussian negative log-likelihood (up to a constant) with log-variance u:
//   0.5 * sum_i (d_i^2 exp(-u_i) + u_i)
inline CentroidLoss loss_xyz(const Vec3& pred, const Vec3& log_var, const Vec3& target) {
  CentroidLoss out;
  for (int i = 0; i < 3; ++i) {
    detail::require_finite(pred[i], "loss_xyz prediction");
    detail::require_finite(log_var[i], "loss_xyz log-variance");
    detail::require_finite(target[i], "loss_xyz target");
    const double d = pred[i] - target[i];
    const double w = std::exp(-log_var[i]);
    out.loss += 0.5 * (d * d * w + log_var[i]);
    out.grad[i] = d * w;
    out.grad[3 + i] = 0.5 * (1.0 - d * d * w);
  }
  return out;
}

enum class ThetaLossVariant {
  paper,  // log I0(k) + k (1 - cos d), the default
  nll,    // log(2 pi I0(k)) - k cos d, the von-Mises negative log-likelihood
};

struct VonMisesLossParams {
  double lambda_v = 0.01;
  double s0 = 2.0;
  ThetaLossVariant variant = ThetaLossVariant::paper;
};

struct OrientationLoss {
  double loss = 0.0;
  double d_pred = 0.0;     // d/d theta_hat
  double d_u_theta = 0.0;  // d/d u_theta
};

// Orientation loss with concentration kappa = exp(-u_theta) plus the
// stabilizer lambda_v * ELU(u_theta - s0).
inline OrientationLoss loss_theta(double pred, double u_theta, double target, const VonMisesLossParams& params = {}) {
  detail::require_finite(pred, "loss_theta prediction");
  detail::require_finite(u_theta, "loss_theta u_theta");
  detail::require_finite(target, "loss_theta target");
  if (params.lambda_v < 0.0) throw Error(ErrorCode::invalid_argument, "loss_theta: lambda_v must be >= 0");
  const double kappa = std::exp(-u_theta);
  if (!std::isfinite(kappa)) throw Error(ErrorCode::numeric, "loss_theta: concentration overflows");
  const double delta = wrap_angle(pred - target);
  const double c = std::cos(delta);
  const double s = std::sin(delta);
  const double log_i0 = log_bessel_i0(kappa);
  const double ratio = bessel_ratio_i1_i0(kappa);

  OrientationLoss out;
  double dk;  // d loss / d kappa
  if (params.variant == ThetaLossVariant::paper) {
    out.loss = log_i0 + kappa * (1.0 - c);
    dk = ratio + (1.0 - c);
  } else {
    out.loss = std::log(2.0 * std::numbers::pi) + log_i0 - kappa * c;
    dk = ratio - c;
  }
  out.d_pred = kappa * s;
  out.d_u_theta = -kappa * dk;
  out.loss += params.lambda_v * elu(u_theta - params.s0);
  out.d_u_theta += params.lambda_v * elu_derivative(u_theta - params.s0);
  return out;
}

// ---------------------------------------------------------------------------
// Distributions and centered intervals

inline double normal_cdf(double z) { return 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2)); }

// Standard normal quantile by bisection on the CDF.
inline double normal_quantile(double q) {
  if (!(q > 0.0 && q < 1.0)) throw Error(ErrorCode::invalid_argument, "normal_quantile: level outside (0, 1)");
  double lo = -40.0, hi = 40.0;
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    (normal_cdf(mid) < q ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Centered interval containing probability p of N(mean, exp(u)).
inline std::pair<double, double> gaussian_interval(double p, double mean, double log_var) {
  if (!(p > 0.0 && p < 1.0)) throw Error(ErrorCode::invalid_argument, "gaussian_interval: p outside (0, 1)");
  const double half = normal_quantile(0.5 * (1.0 + p)) * std::exp(0.5 * log_var);
  return {mean - half, mean + half};
}

// Probability mass of N(0, sigma^2) inside [-|r|, |r|].
inline double gaussian_central_mass(double r, double sigma) { return std::erf(std::abs(r) / (sigma * std::numbers::sqrt2)); }

inline constexpr int kSimpsonPanels = 64;

// Probability mass of a zero-mean von-Mises(kappa) inside [-delta, delta],
// composite Simpson over [0, delta].
inline double vonmises_central_mass(double delta, double kappa) {
  if (!(kappa > 0.0)) throw Error(ErrorCode::invalid_argument, "vonmises_central_mass: kappa must be > 0");
  delta = std::min(std::abs(delta), std::numbers::pi);
  if (delta == 0.0) return 0.0;
  // density(t) = exp(kappa (cos t - 1)) / (2 pi I0(kappa) exp(-kappa))
  const double log_norm = std::log(2.0 * std::numbers::pi) + log_bessel_i0(kappa) - kappa;
  const auto density = [&](double t) { return std::exp(kappa * (std::cos(t) - 1.0) - log_norm); };
  // Past 12 / sqrt(kappa) the density is under 1e-13 of its peak wherever
  // that bound is below pi; the cap keeps the panels on the peak for large
  // kappa.
  const double upper = std::min(delta, 12.0 / std::sqrt(kappa));
  const double h = upper / kSimpsonPanels;
  double sum = density(0.0) + density(upper);
  for (int i = 1; i < kSimpsonPanels; ++i) sum += (i % 2 ? 4.0 : 2.0) * density(i * h);
  return std::min(1.0, 2.0 * sum * h / 3.0);
}

// Half-width delta in (0, pi] of the centered interval holding mass p.
inline double vonmises_halfwidth(double p, double kappa) {
  if (!(p > 0.0 && p < 1.0)) throw Error(ErrorCode::invalid_argument, "vonmises_halfwidth: p outside (0, 1)");
  if (!(kappa > 0.0)) throw Error(ErrorCode::invalid_argument, "vonmises_halfwidth: kappa must be > 0");
  double lo = 0.0, hi = std::numbers::pi;
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    (vonmises_central_mass(mid, kappa) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace trustlens::uncertainty
