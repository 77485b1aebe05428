#include "sivi/covariance.hpp"

namespace sivi {

Eigen::MatrixXd cross_distances(const Eigen::MatrixXd& a,
                                const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("cross_distances: dimension mismatch");
  Eigen::MatrixXd d(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      d(i, j) = (a.row(i) - b.row(j)).norm();
  return d;
}

Eigen::MatrixXd cov_from_distances(const Eigen::MatrixXd& dist,
                                   const CovParams& p) {
  p.validate();
  return p.sigma2 * (-p.phi * dist.array()).exp().matrix();
}

Eigen::MatrixXd build_cov_matrix(const Eigen::MatrixXd& coords,
                                 const CovParams& p) {
  if (coords.rows() < 1)
    throw std::invalid_argument("build_cov_matrix: no locations");
  return cov_from_distances(pairwise_distances(coords), p);
}

ad::Var cov_matrix(ad::Var sigma2, ad::Var phi,
                   std::shared_ptr<const Eigen::MatrixXd> dist) {
  if (sigma2.value().size() != 1 || phi.value().size() != 1)
    throw ad::ShapeError("cov_matrix: parameters must be scalars");
  return sigma2.tape().record(
      ad::OpKind::CovMatrix, {sigma2, phi},
      [dist](const auto& in) -> ad::Tensor {
        return (*in[0])(0, 0) * (-(*in[1])(0, 0) * dist->array()).exp().matrix();
      },
      [dist](const ad::Tensor& g, const ad::Tensor& c, const auto& in,
             const auto& ga) {
        const double s2 = (*in[0])(0, 0);
        if (ga[0]) (*ga[0])(0, 0) += (g.array() * c.array()).sum() / s2;
        if (ga[1])
          (*ga[1])(0, 0) -= (g.array() * c.array() * dist->array()).sum();
      });
}

}  // namespace sivi
