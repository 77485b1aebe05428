#include "sivi/models.hpp"

#include "sivi/covariance.hpp"
#include "sivi/special.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace sivi {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}  // namespace

std::string to_string(Family f) {
  switch (f) {
    case Family::GaussianConditional: return "gaussian-conditional";
    case Family::GaussianMarginal: return "gaussian-marginal";
    case Family::Poisson: return "poisson";
  }
  return "unknown";
}

std::string to_string(PriorMode m) {
  return m == PriorMode::DenseGp ? "dense-gp" : "nngp";
}

Family parse_family(const std::string& s) {
  if (s == "gaussian-conditional") return Family::GaussianConditional;
  if (s == "gaussian-marginal") return Family::GaussianMarginal;
  if (s == "poisson") return Family::Poisson;
  throw std::invalid_argument("unknown family '" + s + "'");
}

PriorMode parse_prior_mode(const std::string& s) {
  if (s == "dense-gp" || s == "dense") return PriorMode::DenseGp;
  if (s == "nngp") return PriorMode::Nngp;
  throw std::invalid_argument("unknown prior mode '" + s + "'");
}

void SpatialDataset::validate(bool count_response) const {
  const Index n = y.size();
  if (n < 1) throw std::invalid_argument("dataset is empty");
  if (coords.rows() != n || X.rows() != n)
    throw std::invalid_argument("dataset row counts disagree");
  if (X.cols() < 1) throw std::invalid_argument("design matrix has no columns");
  if (!coords.allFinite() || !X.allFinite() || !y.allFinite())
    throw std::invalid_argument("dataset contains non-finite values");
  if (count_response) {
    for (Index i = 0; i < n; ++i)
      if (y(i) < 0.0 || y(i) != std::floor(y(i)))
        throw std::invalid_argument("Poisson responses must be non-negative integers (row " +
                                    std::to_string(i + 1) + ")");
  }
}

SpatialDataset SpatialDataset::subset(const std::vector<Index>& rows) const {
  SpatialDataset out;
  const Index m = static_cast<Index>(rows.size());
  out.coords.resize(m, coords.cols());
  out.X.resize(m, X.cols());
  out.y.resize(m);
  for (Index i = 0; i < m; ++i) {
    out.coords.row(i) = coords.row(rows[i]);
    out.X.row(i) = X.row(rows[i]);
    out.y(i) = y(rows[i]);
  }
  return out;
}

void ModelSpec::validate() const {
  const Index k = p + 1;
  if (priors.beta_mean.size() != k || priors.beta_var.size() != k)
    throw std::invalid_argument("coefficient prior has the wrong length");
  if ((priors.beta_var.array() <= 0.0).any())
    throw std::invalid_argument("coefficient prior variances must be positive");
  auto check = [](const InvGamma& g, const char* name) {
    if (!(g.shape > 0.0) || !(g.scale > 0.0))
      throw std::invalid_argument(std::string("inverse-gamma prior for ") + name +
                                  " must have positive shape and scale");
  };
  check(priors.sigma2, "sigma2");
  check(priors.phi, "phi");
  if (has_nugget(family)) check(priors.tau2, "tau2");
}

double sample_variance(const Eigen::VectorXd& v) {
  if (v.size() < 2) return 1.0;
  const double mean = v.mean();
  return (v.array() - mean).square().sum() / static_cast<double>(v.size() - 1);
}

double max_pairwise_distance(const Eigen::MatrixXd& coords) {
  double best = 0.0;
  for (Index i = 0; i < coords.rows(); ++i)
    for (Index j = 0; j < i; ++j)
      best = std::max(best, (coords.row(i) - coords.row(j)).norm());
  return best;
}

InvGamma elicit_phi_prior(double max_distance) {
  if (!(max_distance > 0.0))
    throw ElicitationFailed("elicitation failed: max distance must be positive");
  const double mean = 6.0 / max_distance;
  // With b = (a - 1) * mean, P(phi < 2 mean) = Q(a, b / (2 mean)) = Q(a, (a-1)/2),
  // which does not depend on the distance scale. It tends to 1 at both ends
  // of the shape range, so bisect on the branch right of its minimum; the
  // left root sits just above a = 1 and gives an improper-variance prior.
  auto cdf = [](double a) { return special::gamma_q(a, 0.5 * (a - 1.0)); };
  double lo = 1.0 + 1e-6;
  double hi = 1e4;
  {
    double l = lo, h = 100.0;
    for (int it = 0; it < 200; ++it) {
      const double m1 = l + (h - l) / 3.0, m2 = h - (h - l) / 3.0;
      if (cdf(m1) < cdf(m2))
        h = m2;
      else
        l = m1;
    }
    lo = 0.5 * (l + h);
  }
  const double target = 0.99;
  if (!(cdf(lo) < target && cdf(hi) > target))
    throw ElicitationFailed("elicitation failed: root not bracketed");
  double a = 0.5 * (lo + hi);
  for (int it = 0; it < 400; ++it) {
    a = 0.5 * (lo + hi);
    const double f = cdf(a) - target;
    if (std::abs(f) < 1e-10 || hi - lo < 1e-13 * a) break;
    if (f < 0.0)
      lo = a;
    else
      hi = a;
  }
  if (std::abs(cdf(a) - target) > 1e-6)
    throw ElicitationFailed("elicitation failed: bisection did not converge");
  return {a, (a - 1.0) * mean};
}

ModelSpec default_model_spec(Family family, const SpatialDataset& data) {
  ModelSpec spec;
  spec.family = family;
  spec.p = data.covariate_count();
  const Index k = spec.p + 1;
  spec.priors.beta_mean = Eigen::VectorXd::Zero(k);
  spec.priors.beta_var = Eigen::VectorXd::Ones(k);
  spec.priors.phi = elicit_phi_prior(max_pairwise_distance(data.coords));
  if (family == Family::Poisson) {
    spec.priors.beta_mean(0) = 1.0;
    spec.priors.sigma2 = {2.0, 0.1};
  } else {
    const double v = sample_variance(data.y);
    spec.priors.sigma2 = {2.0, v};
    spec.priors.tau2 = {2.0, v};
  }
  return spec;
}

double log_normal_pdf(double x, double mean, double variance) {
  if (!(variance > 0.0) || !std::isfinite(x)) return kNegInf;
  const double d = x - mean;
  return -0.5 * (kLog2Pi + std::log(variance)) - 0.5 * d * d / variance;
}

double log_invgamma_pdf(double x, double shape, double scale) {
  if (!(x > 0.0) || !(shape > 0.0) || !(scale > 0.0) || !std::isfinite(x))
    return kNegInf;
  return shape * std::log(scale) - special::log_gamma(shape) -
         (shape + 1.0) * std::log(x) - scale / x;
}

double log_lognormal_pdf(double x, double mu, double sigma2) {
  if (!(x > 0.0)) return kNegInf;
  const double lx = std::log(x);
  return log_normal_pdf(lx, mu, sigma2) - lx;
}

double log_poisson_pmf(double k, double lambda) {
  if (k < 0.0 || k != std::floor(k) || !(lambda > 0.0)) return kNegInf;
  return k * std::log(lambda) - lambda - special::log_gamma(k + 1.0);
}

ThetaVars theta_leaves(ad::Tape& tape, const ThetaSample& theta) {
  ThetaVars v;
  v.beta = tape.leaf(theta.beta);
  v.sigma2 = tape.leaf(ad::Tensor::Constant(1, 1, theta.sigma2));
  if (theta.tau2) v.tau2 = tape.leaf(ad::Tensor::Constant(1, 1, *theta.tau2));
  v.phi = tape.leaf(ad::Tensor::Constant(1, 1, theta.phi));
  if (theta.w) v.w = tape.leaf(*theta.w);
  return v;
}

LogJoint::LogJoint(SpatialDataset data, ModelSpec spec, PriorMode mode,
                   int max_neighbors, Index dense_distance_cap)
    : data_(std::move(data)),
      spec_(std::move(spec)),
      mode_(mode),
      max_neighbors_(max_neighbors) {
  spec_.validate();
  data_.validate(spec_.family == Family::Poisson);
  if (data_.covariate_count() != spec_.p)
    throw std::invalid_argument("design matrix does not match the model's covariate count");
  if (mode_ == PriorMode::Nngp && !has_latent(spec_.family))
    throw std::invalid_argument("the NNGP prior requires a conditional formulation");
  if (mode_ == PriorMode::Nngp) {
    graph_ = std::make_shared<const NeighborGraph>(
        build_graph(data_.coords, max_neighbors_));
  } else if (data_.size() <= dense_distance_cap) {
    dist_ = std::make_shared<const Eigen::MatrixXd>(pairwise_distances(data_.coords));
  }
  log_factorial_y_ = data_.y.unaryExpr(
      [](double k) { return special::log_gamma(k + 1.0); });
}

std::shared_ptr<const Eigen::MatrixXd> LogJoint::distances() const {
  if (dist_) return dist_;
  return std::make_shared<const Eigen::MatrixXd>(pairwise_distances(data_.coords));
}

namespace {

ad::Var invgamma_log_prior(ad::Var x, const InvGamma& g) {
  ad::Tape& tape = x.tape();
  const double c = g.shape * std::log(g.scale) - special::log_gamma(g.shape);
  ad::Var inv = ad::cwise_div(tape.scalar_constant(1.0), x);
  return ad::scale(ad::log(x), -(g.shape + 1.0)) - ad::scale(inv, g.scale) + c;
}

// log N(v; 0, L L^T) given the Cholesky factor.
ad::Var mvn_zero_log_density(ad::Var v, ad::Var lower) {
  const double n = static_cast<double>(v.rows());
  ad::Var z = ad::tri_solve(lower, v);
  ad::Var logdet_half = ad::sum(ad::log(ad::diagonal(lower)));
  return ad::scale(ad::sum(ad::square(z)), -0.5) - logdet_half +
         (-0.5 * n * kLog2Pi);
}

}  // namespace

ad::Var LogJoint::log_prior(const ThetaVars& theta) const {
  ad::Tape& tape = theta.beta.tape();
  const auto& pr = spec_.priors;
  ad::Var mean = tape.constant(pr.beta_mean);
  ad::Var var = tape.constant(pr.beta_var);
  const double beta_const =
      -0.5 * (kLog2Pi * static_cast<double>(pr.beta_var.size()) +
              pr.beta_var.array().log().sum());
  ad::Var total = ad::scale(ad::sum(ad::cwise_div(ad::square(theta.beta - mean), var)),
                            -0.5) +
                  beta_const;
  total = total + invgamma_log_prior(theta.sigma2, pr.sigma2);
  if (has_nugget(spec_.family)) {
    if (!theta.tau2) throw std::invalid_argument("theta is missing tau2");
    total = total + invgamma_log_prior(*theta.tau2, pr.tau2);
  }
  total = total + invgamma_log_prior(theta.phi, pr.phi);
  return total;
}

ad::Var LogJoint::latent_log_prior(ad::Var w, ad::Var sigma2, ad::Var phi) const {
  if (mode_ == PriorMode::Nngp) return vecchia_log_density(w, sigma2, phi, graph_);
  ad::Var c = cov_matrix(sigma2, phi, distances());
  try {
    return mvn_zero_log_density(w, ad::cholesky(c));
  } catch (const ad::NotPositiveDefinite& e) {
    throw CovarianceSingular(std::string("covariance singular: ") + e.what());
  }
}

ad::Var LogJoint::log_likelihood(const ThetaVars& theta) const {
  ad::Tape& tape = theta.beta.tape();
  const Index n = data_.size();
  ad::Var x = tape.constant(data_.X);
  ad::Var y = tape.constant(data_.y);
  ad::Var xb = ad::matmul(x, theta.beta);
  switch (spec_.family) {
    case Family::GaussianConditional: {
      if (!theta.w || !theta.tau2)
        throw std::invalid_argument("conditional model needs w and tau2");
      ad::Var resid = y - xb - *theta.w;
      ad::Var ss = ad::sum(ad::square(resid));
      const double nn = static_cast<double>(n);
      return ad::scale(ad::cwise_div(ss, *theta.tau2), -0.5) -
             ad::scale(ad::log(*theta.tau2), 0.5 * nn) + (-0.5 * nn * kLog2Pi);
    }
    case Family::GaussianMarginal: {
      if (!theta.tau2) throw std::invalid_argument("marginal model needs tau2");
      ad::Var c = cov_matrix(theta.sigma2, theta.phi, distances());
      ad::Var nugget = ad::cwise_mul(ad::broadcast_to(*theta.tau2, n, n),
                                     tape.constant(Eigen::MatrixXd::Identity(n, n)));
      try {
        return mvn_zero_log_density(y - xb, ad::cholesky(c + nugget));
      } catch (const ad::NotPositiveDefinite& e) {
        throw CovarianceSingular(std::string("covariance singular: ") + e.what());
      }
    }
    case Family::Poisson: {
      if (!theta.w) throw std::invalid_argument("Poisson model needs w");
      ad::Var eta = xb + *theta.w;
      const long clipped =
          (eta.value().array() > spec_.log_rate_cap).count();
      if (clipped > 0) *clamp_events_ += clipped;
      eta = ad::clamp_max(eta, spec_.log_rate_cap);
      return ad::sum(ad::cwise_mul(y, eta) - ad::exp(eta)) +
             (-log_factorial_y_.sum());
    }
  }
  throw std::logic_error("unreachable");
}

ad::Var LogJoint::operator()(const ThetaVars& theta) const {
  ad::Var total = log_likelihood(theta) + log_prior(theta);
  if (has_latent(spec_.family)) {
    if (!theta.w) throw std::invalid_argument("theta is missing w");
    total = total + latent_log_prior(*theta.w, theta.sigma2, theta.phi);
  }
  return total;
}

double LogJoint::operator()(const ThetaSample& theta) const {
  if (!(theta.sigma2 > 0.0) || !(theta.phi > 0.0)) return kNegInf;
  if (has_nugget(spec_.family) && !(theta.tau2 && *theta.tau2 > 0.0)) return kNegInf;
  if (!theta.beta.allFinite() || (theta.w && !theta.w->allFinite())) return kNegInf;
  ad::Tape tape;
  ThetaVars v;
  v.beta = tape.constant(theta.beta);
  v.sigma2 = tape.scalar_constant(theta.sigma2);
  if (theta.tau2) v.tau2 = tape.scalar_constant(*theta.tau2);
  v.phi = tape.scalar_constant(theta.phi);
  if (theta.w) v.w = tape.constant(*theta.w);
  return (*this)(v).item();
}

double log_joint_gaussian_conditional(const ThetaSample& theta,
                                      const SpatialDataset& data,
                                      const ModelSpec& spec, PriorMode mode,
                                      int max_neighbors) {
  ModelSpec s = spec;
  s.family = Family::GaussianConditional;
  return LogJoint(data, s, mode, max_neighbors)(theta);
}

double log_joint_gaussian_marginal(const ThetaSample& theta,
                                   const SpatialDataset& data,
                                   const ModelSpec& spec) {
  ModelSpec s = spec;
  s.family = Family::GaussianMarginal;
  return LogJoint(data, s, PriorMode::DenseGp)(theta);
}

double log_joint_poisson(const ThetaSample& theta, const SpatialDataset& data,
                         const ModelSpec& spec, PriorMode mode,
                         int max_neighbors) {
  ModelSpec s = spec;
  s.family = Family::Poisson;
  return LogJoint(data, s, mode, max_neighbors)(theta);
}

}  // namespace sivi
