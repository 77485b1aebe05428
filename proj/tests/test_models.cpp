#include "gradcheck.hpp"
#include "oracles.hpp"
#include "gradient_suite.hpp"
#include "sivi/models.hpp"
#include "sivi/random.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <doctest.h>

#include <cmath>
#include <limits>

using namespace sivi;
using sivi::testing::oracle_log_joint;

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

SpatialDataset random_dataset(Rng& rng, Index n, Index p, bool counts) {
  SpatialDataset d;
  d.coords = 10.0 * rng.uniform_matrix(n, 2);
  d.X.resize(n, p + 1);
  d.X.col(0).setOnes();
  if (p > 0) d.X.rightCols(p) = rng.normal_matrix(n, p);
  d.y.resize(n);
  for (Index i = 0; i < n; ++i)
    d.y(i) = counts ? static_cast<double>(rng.poisson(2.0)) : rng.normal();
  return d;
}

ThetaSample random_theta(Rng& rng, Index n, Index p, Family f) {
  ThetaSample t;
  t.beta = rng.normal_matrix(p + 1, 1);
  t.sigma2 = 0.5 + rng.uniform();
  t.phi = 0.1 + rng.uniform();
  if (has_nugget(f)) t.tau2 = 0.3 + rng.uniform();
  if (has_latent(f)) t.w = (0.5 * rng.normal_matrix(n, 1)).eval();
  return t;
}

ModelSpec fixed_spec(Family f, Index p) {
  ModelSpec s;
  s.family = f;
  s.p = p;
  s.priors.beta_mean = Eigen::VectorXd::Constant(p + 1, 0.2);
  s.priors.beta_var = Eigen::VectorXd::Constant(p + 1, 1.5);
  s.priors.sigma2 = {2.0, 1.1};
  s.priors.tau2 = {2.5, 0.7};
  s.priors.phi = {3.0, 0.8};
  return s;
}

}  // namespace

TEST_CASE("scalar log densities") {
  CHECK(log_normal_pdf(0, 0, 1) == doctest::Approx(-0.918939).epsilon(1e-6));
  CHECK(log_poisson_pmf(0, 1) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(log_invgamma_pdf(1, 2, 1) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(log_lognormal_pdf(1, 0, 1) == doctest::Approx(-0.918939).epsilon(1e-6));
  const double ninf = -std::numeric_limits<double>::infinity();
  CHECK(log_invgamma_pdf(-1, 2, 1) == ninf);
  CHECK(log_invgamma_pdf(0, 2, 1) == ninf);
  CHECK(log_lognormal_pdf(-0.5, 0, 1) == ninf);
  CHECK(log_poisson_pmf(1.5, 1) == ninf);
  CHECK(log_poisson_pmf(-1, 1) == ninf);
}

TEST_CASE("range prior elicitation") {
  const InvGamma g = elicit_phi_prior(60.0);
  CHECK(g.shape > 2.0);  // finite prior variance
  CHECK(g.scale / (g.shape - 1.0) == doctest::Approx(0.1).epsilon(1e-14));
  // Quadrature of the inverse-gamma density up to 2 E[phi].
  auto density = [&](double x) { return std::exp(log_invgamma_pdf(x, g.shape, g.scale)); };
  const double cdf = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      density, 0.0, 0.2, 15, 1e-13);
  CHECK(cdf >= 0.989999);
  CHECK(cdf <= 0.990001);

  for (double c : {0.01, 0.5, 3.0, 250.0}) {
    const InvGamma h = elicit_phi_prior(60.0 * c);
    CHECK(h.shape == doctest::Approx(g.shape).epsilon(1e-12));
    CHECK(h.scale == doctest::Approx(g.scale / c).epsilon(1e-12));
  }
  CHECK_THROWS_AS(elicit_phi_prior(0.0), ElicitationFailed);
  CHECK_THROWS_AS(elicit_phi_prior(-3.0), ElicitationFailed);
}

TEST_CASE("default priors follow the data") {
  Rng rng(31);
  SpatialDataset d = random_dataset(rng, 30, 1, false);
  const ModelSpec g = default_model_spec(Family::GaussianConditional, d);
  const double v = sample_variance(d.y);
  CHECK(g.priors.sigma2.shape == 2.0);
  CHECK(g.priors.sigma2.scale == doctest::Approx(v));
  CHECK(g.priors.tau2.shape == 2.0);
  CHECK(g.priors.tau2.scale == doctest::Approx(v));
  CHECK(g.priors.beta_mean.isZero());
  CHECK(g.priors.beta_var.isOnes());

  SpatialDataset c = random_dataset(rng, 30, 1, true);
  const ModelSpec p = default_model_spec(Family::Poisson, c);
  CHECK(p.priors.sigma2.shape == 2.0);
  CHECK(p.priors.sigma2.scale == 0.1);
  CHECK(p.priors.beta_mean(0) == 1.0);
  CHECK(p.priors.phi.scale / (p.priors.phi.shape - 1.0) ==
        doctest::Approx(6.0 / max_pairwise_distance(c.coords)));
}

TEST_CASE("single-location log joints decompose") {
  SpatialDataset d;
  d.coords = Eigen::MatrixXd::Zero(1, 2);
  d.X = Eigen::MatrixXd::Ones(1, 1);
  d.y = Eigen::VectorXd::Zero(1);
  ModelSpec s = fixed_spec(Family::GaussianConditional, 0);
  ThetaSample t;
  t.beta = Eigen::VectorXd::Zero(1);
  t.sigma2 = 1.0;
  t.tau2 = 1.0;
  t.phi = 0.5;
  t.w = Eigen::VectorXd::Zero(1);
  const double prior = log_normal_pdf(0, 0.2, 1.5) + log_invgamma_pdf(1, 2, 1.1) +
                       log_invgamma_pdf(1, 2.5, 0.7) + log_invgamma_pdf(0.5, 3, 0.8);
  CHECK(log_joint_gaussian_conditional(t, d, s, PriorMode::DenseGp) ==
        doctest::Approx(-0.918939 - 0.918939 + prior).epsilon(1e-6));

  ThetaSample tm = t;
  tm.w.reset();
  d.y(0) = 0.4;
  CHECK(log_joint_gaussian_marginal(tm, d, s) ==
        doctest::Approx(log_normal_pdf(0.4, 0.0, 2.0) + prior).epsilon(1e-12));

  d.y(0) = 0.0;
  ModelSpec sp = fixed_spec(Family::Poisson, 0);
  ThetaSample tp = t;
  tp.tau2.reset();
  const double pprior = log_normal_pdf(0, 0.2, 1.5) + log_invgamma_pdf(1, 2, 1.1) +
                        log_invgamma_pdf(0.5, 3, 0.8);
  CHECK(log_joint_poisson(tp, d, sp, PriorMode::DenseGp) ==
        doctest::Approx(-1.0 - 0.918939 + pprior).epsilon(1e-6));
}

TEST_CASE("log joints match a straight-line oracle") {
  Rng rng(32);
  for (Family f : {Family::GaussianConditional, Family::GaussianMarginal, Family::Poisson}) {
    for (int k = 0; k < 5; ++k) {
      SpatialDataset d = random_dataset(rng, 8, 2, f == Family::Poisson);
      ModelSpec s = fixed_spec(f, 2);
      ThetaSample t = random_theta(rng, 8, 2, f);
      LogJoint lj(d, s);
      CHECK(std::abs(lj(t) - oracle_log_joint(t, d, s)) < 1e-10);
    }
  }
}

TEST_CASE("NNGP prior with full conditioning sets equals the dense prior") {
  Rng rng(33);
  for (Family f : {Family::GaussianConditional, Family::Poisson}) {
    for (int k = 0; k < 5; ++k) {
      const Index n = 9;
      SpatialDataset d = random_dataset(rng, n, 1, f == Family::Poisson);
      ModelSpec s = fixed_spec(f, 1);
      ThetaSample t = random_theta(rng, n, 1, f);
      const double dense = LogJoint(d, s, PriorMode::DenseGp)(t);
      const double nngp = LogJoint(d, s, PriorMode::Nngp, static_cast<int>(n - 1))(t);
      CHECK(std::abs(dense - nngp) < 1e-8);
    }
  }
}

TEST_CASE("marginal model integrates the conditional model over w") {
  Rng rng(34);
  SpatialDataset d = random_dataset(rng, 2, 1, false);
  d.coords << 0, 0, 1.5, 0.5;
  ModelSpec s = fixed_spec(Family::GaussianConditional, 1);
  ThetaSample t = random_theta(rng, 2, 1, Family::GaussianConditional);
  LogJoint cond(d, s);
  const double marginal = log_joint_gaussian_marginal(
      ThetaSample{t.beta, t.sigma2, t.tau2, t.phi, std::nullopt}, d, s);
  using GK = boost::math::quadrature::gauss_kronrod<double, 31>;
  const double inf = std::numeric_limits<double>::infinity();
  auto inner = [&](double w0) {
    return GK::integrate(
        [&](double w1) {
          ThetaSample u = t;
          u.w = Eigen::Vector2d(w0, w1);
          return std::exp(cond(u) - marginal);
        },
        -inf, inf, 10, 1e-12);
  };
  const double ratio = GK::integrate(inner, -inf, inf, 10, 1e-12);
  CHECK(std::abs(std::log(ratio)) < 1e-4);
}

TEST_CASE("log joints are invariant to row permutation") {
  Rng rng(35);
  for (Family f : {Family::GaussianConditional, Family::GaussianMarginal, Family::Poisson}) {
    const Index n = 10;
    SpatialDataset d = random_dataset(rng, n, 1, f == Family::Poisson);
    ModelSpec s = fixed_spec(f, 1);
    ThetaSample t = random_theta(rng, n, 1, f);
    std::vector<Index> perm{3, 7, 0, 9, 1, 5, 2, 8, 6, 4};
    ThetaSample tp = t;
    if (t.w)
      for (Index i = 0; i < n; ++i) (*tp.w)(i) = (*t.w)(perm[i]);
    const double a = LogJoint(d, s)(t);
    const double b = LogJoint(d.subset(perm), s)(tp);
    CHECK(std::abs(a - b) < 1e-10);
  }
}

TEST_CASE("out-of-support parameters give negative infinity") {
  Rng rng(36);
  SpatialDataset d = random_dataset(rng, 5, 1, false);
  ModelSpec s = fixed_spec(Family::GaussianConditional, 1);
  LogJoint lj(d, s);
  const double ninf = -std::numeric_limits<double>::infinity();
  ThetaSample t = random_theta(rng, 5, 1, Family::GaussianConditional);
  ThetaSample bad = t;
  bad.sigma2 = -1.0;
  CHECK(lj(bad) == ninf);
  bad = t;
  bad.phi = 0.0;
  CHECK(lj(bad) == ninf);
  bad = t;
  bad.tau2 = -0.1;
  CHECK(lj(bad) == ninf);
}

TEST_CASE("Poisson likelihood slope at zero is minus one per location") {
  SpatialDataset d;
  d.coords = Eigen::MatrixXd(3, 2);
  d.coords << 0, 0, 1, 0, 0, 1;
  d.X = Eigen::MatrixXd::Ones(3, 1);
  d.y = Eigen::VectorXd::Zero(3);
  LogJoint lj(d, fixed_spec(Family::Poisson, 0));
  ad::Tape tape;
  ThetaSample t;
  t.beta = Eigen::VectorXd::Zero(1);
  t.sigma2 = 1.0;
  t.phi = 1.0;
  t.w = Eigen::VectorXd::Zero(3);
  ThetaVars v = theta_leaves(tape, t);
  auto g = ad::backward(tape, lj.log_likelihood(v));
  CHECK(g[*v.w].isApprox(-Eigen::VectorXd::Ones(3)));
}

TEST_CASE("Poisson log rate is capped") {
  SpatialDataset d;
  d.coords = Eigen::MatrixXd::Zero(1, 2);
  d.X = Eigen::MatrixXd::Ones(1, 1);
  d.y = Eigen::VectorXd::Constant(1, 3.0);
  LogJoint lj(d, fixed_spec(Family::Poisson, 0));
  ThetaSample t;
  t.beta = Eigen::VectorXd::Constant(1, 100.0);
  t.sigma2 = 1.0;
  t.phi = 1.0;
  t.w = Eigen::VectorXd::Zero(1);
  CHECK(std::isfinite(lj(t)));
  CHECK(lj.clamp_events() == 1);
}

TEST_CASE("log joint gradients match finite differences") {
  const auto checks = testing::log_joint_gradient_checks();
  CHECK(checks.size() == 5);
  for (const auto& c : checks) {
    INFO(c.name << " worst " << c.worst);
    CHECK(c.worst < testing::kGradientTolerance);
  }
}

TEST_CASE("invalid inputs are rejected") {
  Rng rng(38);
  SpatialDataset d = random_dataset(rng, 4, 1, false);
  d.y(2) = 0.5;
  CHECK_THROWS_AS(d.validate(true), std::invalid_argument);
  SpatialDataset e = d;
  e.X.conservativeResize(3, Eigen::NoChange);
  CHECK_THROWS_AS(e.validate(false), std::invalid_argument);
  ModelSpec s = fixed_spec(Family::GaussianConditional, 1);
  s.priors.beta_var(0) = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  CHECK_THROWS_AS(LogJoint(d, fixed_spec(Family::GaussianMarginal, 1), PriorMode::Nngp),
                  std::invalid_argument);
  CHECK(parse_family(to_string(Family::Poisson)) == Family::Poisson);
  CHECK(parse_prior_mode(to_string(PriorMode::Nngp)) == PriorMode::Nngp);
  CHECK_THROWS_AS(parse_family("binomial"), std::invalid_argument);
}
