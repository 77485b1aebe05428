#include "sivi/random.hpp"
#include "sivi/scoring.hpp"

#include <doctest.h>

#include <cmath>

using namespace sivi;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

double crps_double_sum(const Eigen::VectorXd& x, double y) {
  const double m = static_cast<double>(x.size());
  double a = 0.0, b = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    a += std::abs(x(i) - y);
    for (Index j = 0; j < x.size(); ++j) b += std::abs(x(i) - x(j));
  }
  return a / m - b / (2.0 * m * m);
}

double std_normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }

}  // namespace

TEST_CASE("crps anchors") {
  CHECK(crps_from_draws(vec({0.0, 2.0}), 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(std::abs(crps_from_draws(vec({0.0, 2.0}), 1.0) - 0.5) < 1e-9);
  CHECK(crps_from_draws(Eigen::VectorXd::Constant(7, 3.25), 3.25) == 0.0);
  CHECK(crps_from_draws(vec({1.5}), -2.0) == doctest::Approx(3.5));
  CHECK_THROWS_AS(crps_from_draws(Eigen::VectorXd(), 0.0), std::invalid_argument);
}

TEST_CASE("sorted crps equals the double sum") {
  Rng rng(11);
  for (Index m : {1, 2, 3, 10, 257, 1000}) {
    const Eigen::VectorXd x = 2.0 * Eigen::VectorXd(rng.normal_matrix(m, 1));
    const double y = rng.normal();
    CHECK(std::abs(crps_from_draws(x, y) - crps_double_sum(x, y)) < 1e-10);
  }
}

TEST_CASE("crps translation and scale behaviour") {
  Rng rng(12);
  const Eigen::VectorXd x = rng.normal_matrix(200, 1);
  const double y = 0.3;
  const double base = crps_from_draws(x, y);
  const Eigen::VectorXd shifted = (x.array() + 4.0).matrix();
  CHECK(std::abs(crps_from_draws(shifted, y + 4.0) - base) < 1e-12);
  CHECK(crps_from_draws(2.5 * x, 2.5 * y) == doctest::Approx(2.5 * base).epsilon(1e-12));
}

TEST_CASE("gaussian crps closed form against large samples") {
  Rng rng(13);
  const Eigen::VectorXd x = (1.0 + 2.0 * rng.normal_matrix(200000, 1).array()).matrix();
  CHECK(crps_from_draws(x, 0.4) == doctest::Approx(crps_gaussian(1.0, 2.0, 0.4)).epsilon(5e-3));
  // Known value at the mean: sd (sqrt(2) - 1) / sqrt(pi).
  CHECK(crps_gaussian(0.0, 1.0, 0.0) == doctest::Approx((std::sqrt(2.0) - 1.0) / std::sqrt(M_PI)));
  CHECK(crps_gaussian(1.0, 0.0, 3.0) == 2.0);
}

TEST_CASE("type-7 quantiles") {
  const Eigen::VectorXd x = vec({4.0, 1.0, 3.0, 2.0});
  CHECK(empirical_quantile(x, 0.0) == 1.0);
  CHECK(empirical_quantile(x, 1.0) == 4.0);
  CHECK(empirical_quantile(x, 0.5) == doctest::Approx(2.5));
  CHECK(empirical_quantile(x, 0.25) == doctest::Approx(1.75));
  CHECK_THROWS_AS(empirical_quantile(x, 1.5), std::invalid_argument);
}

TEST_CASE("interval score anchors") {
  CHECK(std::abs(interval_score(0.0, 1.0, 2.0, 0.05) - 41.0) < 1e-9);
  CHECK(interval_score(0.0, 1.0, 0.5, 0.05) == 1.0);
  CHECK(interval_score(0.0, 1.0, -0.5, 0.1) == doctest::Approx(11.0));
  CHECK(interval_score(Eigen::VectorXd::Constant(5, 2.0), 2.0, 0.05) == 0.0);
  CHECK_THROWS_AS(interval_score(0.0, 1.0, 0.5, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(interval_score(vec({1.0}), 0.0, 0.05), std::invalid_argument);
}

TEST_CASE("fixed-width intervals containing y score best") {
  const double y = 0.37, width = 1.0, alpha = 0.05;
  double best = INFINITY, best_lower = 0.0;
  for (int k = -300; k <= 300; ++k) {
    const double lower = 0.01 * k;
    const double s = interval_score(lower, lower + width, y, alpha);
    if (s < best) {
      best = s;
      best_lower = lower;
    }
  }
  CHECK(best == doctest::Approx(width));
  CHECK(best_lower <= y);
  CHECK(best_lower + width >= y);
}

TEST_CASE("nlpd anchors") {
  const NlpdResult g = nlpd_gaussian(vec({0.0}), vec({1.0}), 0.0);
  CHECK(std::abs(g.value - 0.918939) < 1e-6);
  CHECK(std::abs(g.value - 0.5 * std::log(2.0 * M_PI)) < 1e-12);
  CHECK_FALSE(g.floored);
  CHECK(nlpd_poisson(vec({1.0, 1.0}), 0.0).value == doctest::Approx(1.0).epsilon(1e-12));
  const double mix = -std::log(0.5 * (std_normal_pdf(0.0) + std_normal_pdf(2.0)));
  CHECK(nlpd_gaussian(vec({0.0, 2.0}), vec({1.0, 1.0}), 0.0).value ==
        doctest::Approx(mix).epsilon(1e-12));
}

TEST_CASE("nlpd mixture bound and floor") {
  Rng rng(14);
  for (int rep = 0; rep < 50; ++rep) {
    const Index m = 1 + rep % 7;
    const Eigen::VectorXd mu = 3.0 * Eigen::VectorXd(rng.normal_matrix(m, 1));
    const Eigen::VectorXd v = (0.1 + rng.uniform_matrix(m, 1).array()).matrix();
    const double y = rng.normal();
    double best = INFINITY;
    for (Index j = 0; j < m; ++j)
      best = std::min(best, nlpd_gaussian(mu.segment(j, 1), v.segment(j, 1), y).value);
    CHECK(nlpd_gaussian(mu, v, y).value >= best - 1e-12);
    CHECK(nlpd_gaussian(mu, v, y).value <= best + std::log(static_cast<double>(m)) + 1e-12);
  }
  const NlpdResult far = nlpd_gaussian(vec({0.0}), vec({1.0}), 100.0);
  CHECK(far.floored);
  CHECK(far.value == doctest::Approx(700.0));
  CHECK(std::isfinite(far.value));
}

TEST_CASE("rmse") {
  const Eigen::VectorXd t = vec({1.0, -2.0, 0.5, 3.0, 0.0});
  CHECK(rmse(t, t) == 0.0);
  CHECK(rmse((t.array() + 1.0).matrix(), t) == doctest::Approx(1.0));
  const Eigen::VectorXd p = vec({0.3, -1.0, 0.9, 2.2, -0.4});
  double ss = 0.0;
  for (Index i = 0; i < 5; ++i) ss += (p(i) - t(i)) * (p(i) - t(i));
  CHECK(rmse(p, t) == doctest::Approx(std::sqrt(ss / 5.0)));
  CHECK_THROWS_AS(rmse(p.head(3), t), std::invalid_argument);
}

TEST_CASE("score report aggregates per-location values") {
  Rng rng(15);
  PredictiveDraws d;
  d.family = Family::GaussianConditional;
  d.y = rng.normal_matrix(6, 40);
  d.mean = 0.1 * rng.normal_matrix(6, 40);
  d.var = Eigen::MatrixXd::Constant(6, 40, 0.8);
  const Eigen::VectorXd truth = rng.normal_matrix(6, 1);
  const ScoreReport r = score(d, truth, 0.1);
  CHECK(r.count() == 6);
  CHECK(r.alpha == 0.1);
  CHECK(r.mean_crps == doctest::Approx(r.crps.mean()));
  CHECK(r.mean_interval == doctest::Approx(r.interval.mean()));
  CHECK(r.mean_nlpd == doctest::Approx(r.nlpd.mean()));
  for (Index i = 0; i < 6; ++i) {
    CHECK(r.crps(i) == crps_from_draws(d.y.row(i).transpose(), truth(i)));
    CHECK(r.point(i) == doctest::Approx(d.y.row(i).mean()));
  }
  CHECK(r.nlpd_floored == 0);

  PredictiveDraws exact = d;
  exact.y = truth.replicate(1, 40);
  const ScoreReport z = score(exact, truth);
  CHECK(z.crps.cwiseAbs().maxCoeff() == 0.0);
  CHECK(z.rmse < 1e-12);
  CHECK_THROWS_AS(score(d, truth.head(3)), std::invalid_argument);
}
