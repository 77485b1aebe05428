#pragma once

#include "sivi/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <stdexcept>

namespace sivi {

/// Only the exponential family is implemented; the enum is the extension
/// point for other correlation functions.
enum class CovarianceKind { Exponential };

struct CovParams {
  double sigma2 = 1.0;  // partial sill
  double phi = 1.0;     // range decay rate

  void validate() const {
    if (!(sigma2 > 0.0) || !(phi > 0.0))
      throw std::invalid_argument("covariance parameters must be positive");
  }
};

/// Euclidean distance between two locations of equal dimension.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar distance(const Eigen::MatrixBase<DerivedA>& a,
                                   const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("distance: dimension mismatch");
  return (a.derived().reshaped() - b.derived().reshaped()).norm();
}

/// sigma2 * exp(-phi * d).
template <typename Scalar>
Scalar exp_cov(Scalar d, Scalar sigma2, Scalar phi) {
  using std::exp;
  return sigma2 * exp(-phi * d);
}

inline double exp_cov(double d, const CovParams& p) {
  if (d < 0.0) throw std::invalid_argument("exp_cov: negative distance");
  p.validate();
  return exp_cov<double>(d, p.sigma2, p.phi);
}

/// Pairwise distances between the rows of `a` and the rows of `b`.
Eigen::MatrixXd cross_distances(const Eigen::MatrixXd& a,
                                const Eigen::MatrixXd& b);
inline Eigen::MatrixXd pairwise_distances(const Eigen::MatrixXd& coords) {
  return cross_distances(coords, coords);
}

/// Dense covariance matrix of the rows of `coords`.
Eigen::MatrixXd build_cov_matrix(const Eigen::MatrixXd& coords,
                                 const CovParams& p);

/// Covariance from a precomputed distance matrix.
Eigen::MatrixXd cov_from_distances(const Eigen::MatrixXd& dist,
                                   const CovParams& p);

/// Differentiable covariance matrix sigma2 * exp(-phi * dist); `sigma2` and
/// `phi` are 1x1 nodes, `dist` is constant.
ad::Var cov_matrix(ad::Var sigma2, ad::Var phi,
                   std::shared_ptr<const Eigen::MatrixXd> dist);

}  // namespace sivi
