#include "sivi/special.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace sivi::special {

double log_gamma(double x) { return boost::math::lgamma(x); }

double digamma(double x) { return boost::math::digamma(x); }

double gamma_p(double a, double x) { return boost::math::gamma_p(a, x); }

double gamma_q(double a, double x) { return boost::math::gamma_q(a, x); }

double gamma_p_inv(double a, double p) { return boost::math::gamma_p_inv(a, p); }

double gamma_density(double a, double x) {
  return boost::math::gamma_p_derivative(a, x);
}

double gamma_p_dshape(double a, double x) {
  if (x <= 0.0) return 0.0;
  // P(a, x) = sum_n exp((a + n) log x - x - lgamma(a + n + 1)); each term
  // contributes term_n * (log x - digamma(a + n + 1)).
  const double log_x = std::log(x);
  double log_term = a * log_x - x - log_gamma(a + 1.0);
  double psi = digamma(a + 1.0);
  double total = 0.0;
  double peak = 0.0;
  for (int n = 0; n < 100000; ++n) {
    const double term = std::exp(log_term);
    const double contrib = term * (log_x - psi);
    total += contrib;
    peak = std::max(peak, term);
    // Terms increase until a + n + 1 > x, then decay geometrically.
    if (a + n + 1.0 > x && term < peak * 1e-18 &&
        std::abs(contrib) <= std::abs(total) * 1e-18 + 1e-300)
      break;
    log_term += log_x - std::log(a + n + 1.0);
    psi += 1.0 / (a + n + 1.0);
  }
  return total;
}

}  // namespace sivi::special
