#include "gradcheck.hpp"
#include "sivi/covariance.hpp"
#include "sivi/random.hpp"

#include <doctest.h>

#include <cmath>

using namespace sivi;

TEST_CASE("distance") {
  Eigen::Vector2d a(0, 0), b(3, 4), c(50, 50);
  CHECK(distance(a, a) == 0.0);
  CHECK(distance(a, b) == 5.0);
  CHECK(distance(a, c) == doctest::Approx(70.7107).epsilon(1e-6));
  CHECK_THROWS(distance(Eigen::VectorXd(a), Eigen::VectorXd::Ones(3)));
}

TEST_CASE("exponential covariance values") {
  CHECK(exp_cov(0.0, CovParams{1.0, 0.3}) == 1.0);
  CHECK(exp_cov(30.0, CovParams{1.0, 0.1}) == doctest::Approx(0.0498).epsilon(1e-3));
  CHECK(std::abs(exp_cov(30.0, CovParams{1.0, 0.1}) - 0.05) < 5e-3);
  CHECK(exp_cov(std::log(2.0), CovParams{2.0, 1.0}) == doctest::Approx(1.0));
  CHECK_THROWS(exp_cov(-1.0, CovParams{1.0, 1.0}));
  CHECK_THROWS(exp_cov(1.0, CovParams{0.0, 1.0}));
}

TEST_CASE("exponential covariance is decreasing in distance and decay") {
  Rng rng(3);
  for (int k = 0; k < 100; ++k) {
    const double d = 10.0 * rng.uniform();
    const double phi = 0.01 + rng.uniform();
    const CovParams p{1.7, phi};
    CHECK(exp_cov(d + 0.01, p) < exp_cov(d, p));
    CHECK(exp_cov(d + 0.01, CovParams{1.7, phi + 0.01}) < exp_cov(d + 0.01, p));
  }
}

TEST_CASE("covariance matrix assembly") {
  const CovParams p{1.3, 0.4};
  Eigen::MatrixXd one(1, 2);
  one << 5, 5;
  CHECK(build_cov_matrix(one, p)(0, 0) == 1.3);

  Eigen::MatrixXd two(2, 2);
  two << 0, 0, 30, 0;
  const Eigen::MatrixXd c2 = build_cov_matrix(two, CovParams{1.0, 0.1});
  CHECK(c2(0, 1) == doctest::Approx(0.0498).epsilon(1e-3));

  Rng rng(9);
  Eigen::MatrixXd coords = 50.0 * rng.uniform_matrix(5, 2);
  const Eigen::MatrixXd c = build_cov_matrix(coords, p);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      const double dx = coords(i, 0) - coords(j, 0), dy = coords(i, 1) - coords(j, 1);
      const double expected = 1.3 * std::exp(-0.4 * std::sqrt(dx * dx + dy * dy));
      CHECK(c(i, j) == doctest::Approx(expected).epsilon(1e-14));
      CHECK(c(i, j) == c(j, i));
    }
  CHECK(c.diagonal().isConstant(1.3));
}

TEST_CASE("covariance of distinct random locations factorizes") {
  Rng rng(11);
  for (int k = 0; k < 20; ++k) {
    Eigen::MatrixXd coords = 50.0 * rng.uniform_matrix(2 + k, 2);
    CHECK_NOTHROW(ad::cholesky_factor(build_cov_matrix(coords, CovParams{1.0, 0.1})));
  }
}

TEST_CASE("covariance matrix gradient in sill and decay") {
  Rng rng(12);
  for (int k = 0; k < 20; ++k) {
    auto dist = std::make_shared<const Eigen::MatrixXd>(
        pairwise_distances(10.0 * rng.uniform_matrix(4, 2)));
    Eigen::MatrixXd weights = rng.normal_matrix(4, 4);
    testing::TapeFn f = [&](ad::Tape& tape, const std::vector<ad::Var>& x) {
      return ad::sum(ad::cwise_mul(cov_matrix(x[0], x[1], dist), tape.constant(weights)));
    };
    const double err = testing::gradient_error(
        f, {ad::Tensor::Constant(1, 1, 0.5 + rng.uniform()),
            ad::Tensor::Constant(1, 1, 0.05 + 0.5 * rng.uniform())});
    CHECK(err < 1e-5);
  }
}
