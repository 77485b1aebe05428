#pragma once

// Log joint densities log p(y, theta) for the conditional Gaussian, marginal
// Gaussian and Poisson spatial models, their priors, and the range-prior
// elicitation.

#include "sivi/autodiff.hpp"
#include "sivi/nngp.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

namespace sivi {

enum class Family { GaussianConditional, GaussianMarginal, Poisson };
enum class PriorMode { DenseGp, Nngp };

std::string to_string(Family f);
std::string to_string(PriorMode m);
Family parse_family(const std::string& s);
PriorMode parse_prior_mode(const std::string& s);

inline bool has_nugget(Family f) { return f != Family::Poisson; }
inline bool has_latent(Family f) { return f != Family::GaussianMarginal; }

/// Observed data: locations (n x d), design matrix (n x (p+1), first column
/// ones) and responses.
struct SpatialDataset {
  Eigen::MatrixXd coords;
  Eigen::MatrixXd X;
  Eigen::VectorXd y;

  Index size() const { return y.size(); }
  Index covariate_count() const { return X.cols() - 1; }
  /// Throws std::invalid_argument when the invariants do not hold.
  void validate(bool count_response) const;
  SpatialDataset subset(const std::vector<Index>& rows) const;
};

struct InvGamma {
  double shape = 2.0;
  double scale = 1.0;
};

struct Priors {
  Eigen::VectorXd beta_mean;
  Eigen::VectorXd beta_var;
  InvGamma sigma2;
  InvGamma tau2;  // unused by the Poisson family
  InvGamma phi;
};

struct ModelSpec {
  Family family = Family::GaussianConditional;
  Index p = 1;  // non-intercept covariates
  Priors priors;
  double log_rate_cap = 30.0;

  void validate() const;
};

/// Default priors: N(0, 1) coefficients (Poisson intercept N(1, 1)),
/// IG(2, var(y)) for sigma2 and tau2 in the Gaussian case, IG(2, 0.1) for
/// the Poisson sigma2, and the elicited range prior.
ModelSpec default_model_spec(Family family, const SpatialDataset& data);

double max_pairwise_distance(const Eigen::MatrixXd& coords);
double sample_variance(const Eigen::VectorXd& v);

class ElicitationFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inverse-gamma (a, b) with mean 6 / max_distance and
/// P(phi < 2 E[phi]) = 0.99.
InvGamma elicit_phi_prior(double max_distance);

/// One draw of the unknowns. `tau2` is absent for Poisson, `w` for the
/// marginal Gaussian model.
struct ThetaSample {
  Eigen::VectorXd beta;
  double sigma2 = 1.0;
  std::optional<double> tau2;
  double phi = 1.0;
  std::optional<Eigen::VectorXd> w;
};

double log_normal_pdf(double x, double mean, double variance);
double log_invgamma_pdf(double x, double shape, double scale);
double log_lognormal_pdf(double x, double mu, double sigma2);
double log_poisson_pmf(double k, double lambda);

/// Tape handles for theta; beta and w are column vectors, scalars are 1x1.
struct ThetaVars {
  ad::Var beta;
  ad::Var sigma2;
  std::optional<ad::Var> tau2;
  ad::Var phi;
  std::optional<ad::Var> w;
};

ThetaVars theta_leaves(ad::Tape& tape, const ThetaSample& theta);

class CovarianceSingular : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// log p(y, theta) for one model, data set and spatial prior.
class LogJoint {
 public:
  LogJoint(SpatialDataset data, ModelSpec spec,
           PriorMode mode = PriorMode::DenseGp, int max_neighbors = 10,
           Index dense_distance_cap = 2000);

  ad::Var operator()(const ThetaVars& theta) const;
  /// Plain value; -inf for parameters outside the support.
  double operator()(const ThetaSample& theta) const;

  const SpatialDataset& data() const { return data_; }
  const ModelSpec& spec() const { return spec_; }
  PriorMode mode() const { return mode_; }
  int max_neighbors() const { return max_neighbors_; }
  const std::shared_ptr<const NeighborGraph>& graph() const { return graph_; }
  /// Number of log-rate entries clipped at the cap so far.
  long clamp_events() const { return clamp_events_->load(); }

  ad::Var log_prior(const ThetaVars& theta) const;
  ad::Var latent_log_prior(ad::Var w, ad::Var sigma2, ad::Var phi) const;
  ad::Var log_likelihood(const ThetaVars& theta) const;

 private:
  std::shared_ptr<const Eigen::MatrixXd> distances() const;

  SpatialDataset data_;
  ModelSpec spec_;
  PriorMode mode_;
  int max_neighbors_;
  std::shared_ptr<const Eigen::MatrixXd> dist_;
  std::shared_ptr<const NeighborGraph> graph_;
  Eigen::VectorXd log_factorial_y_;
  std::shared_ptr<std::atomic<long>> clamp_events_ =
      std::make_shared<std::atomic<long>>(0);
};

double log_joint_gaussian_conditional(const ThetaSample& theta,
                                      const SpatialDataset& data,
                                      const ModelSpec& spec, PriorMode mode,
                                      int max_neighbors = 10);
double log_joint_gaussian_marginal(const ThetaSample& theta,
                                   const SpatialDataset& data,
                                   const ModelSpec& spec);
double log_joint_poisson(const ThetaSample& theta, const SpatialDataset& data,
                         const ModelSpec& spec, PriorMode mode,
                         int max_neighbors = 10);

}  // namespace sivi
