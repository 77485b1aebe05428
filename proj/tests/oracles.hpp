#pragma once

// Straight-line reference implementations used as test oracles: plain loops
// and scalar formulas, no tape and no fused kernels.

#include "sivi/models.hpp"
#include "sivi/variational.hpp"

#include <Eigen/Dense>

#include <vector>

namespace sivi::testing {

/// Small data set with an intercept and one standard normal covariate;
/// counts are Poisson(3).
SpatialDataset toy_data(Rng& rng, Index n, bool counts);
GeneratorConfig toy_generator(int noise, std::vector<int> hidden);

/// Dense multivariate normal log density via an Eigen LLT.
double dense_mvn_logpdf(const Eigen::VectorXd& w, const Eigen::MatrixXd& cov);

double oracle_softplus(double x);

/// Dense-prior log joint from explicit covariance assembly and an Eigen LLT.
double oracle_log_joint(const ThetaSample& t, const SpatialDataset& d, const ModelSpec& s);

/// Generator with zero weights: psi = transform(bias) for every noise draw.
VariationalState constant_generator(const GeneratorConfig& cfg, const PsiLayout& layout,
                                    const Eigen::RowVectorXd& bias);

Eigen::RowVectorXd transformed(const Eigen::RowVectorXd& raw, const PsiLayout& l);
double oracle_log_q(const ThetaSample& t, const Eigen::RowVectorXd& psi, const PsiLayout& l);
Eigen::RowVectorXd oracle_psi(const VariationalState& s, const Eigen::RowVectorXd& eps);
ThetaSample oracle_theta(const Eigen::RowVectorXd& psi, const ThetaNoise& z, Index j,
                         const PsiLayout& l);
/// Surrogate bound for fixed noise; dense prior only.
double oracle_elbo(const VariationalState& s, const LogJoint& lj, const ElboNoise& noise);

}  // namespace sivi::testing
