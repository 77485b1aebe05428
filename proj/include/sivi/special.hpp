#pragma once

// Special functions used by the densities and the inverse-gamma
// reparameterization. Thin wrappers over Boost.Math plus the shape
// derivative of the regularized incomplete gamma function.

namespace sivi::special {

double log_gamma(double x);
double digamma(double x);

/// Regularized lower incomplete gamma P(a, x).
double gamma_p(double a, double x);
/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
double gamma_q(double a, double x);
/// x such that P(a, x) = p.
double gamma_p_inv(double a, double p);
/// Density of Gamma(a, 1) at x, i.e. dP/dx.
double gamma_density(double a, double x);
/// dP(a, x)/da by term-wise differentiation of the power series.
double gamma_p_dshape(double a, double x);

}  // namespace sivi::special
