#include "sivi/predict.hpp"

#include "sivi/covariance.hpp"
#include "sivi/nngp.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace sivi {

ConditionalMoments dense_conditional(const Eigen::MatrixXd& train_coords,
                                     const Eigen::VectorXd& values,
                                     const Eigen::MatrixXd& new_coords, const CovParams& p,
                                     double nugget) {
  Eigen::MatrixXd c = build_cov_matrix(train_coords, p);
  c.diagonal().array() += nugget;
  const Eigen::MatrixXd l = ad::cholesky_factor(c);
  const auto tri = l.triangularView<Eigen::Lower>();
  const Eigen::MatrixXd cross = cov_from_distances(cross_distances(train_coords, new_coords), p);
  const Eigen::MatrixXd a = tri.solve(cross);             // L^{-1} C_on
  const Eigen::VectorXd z = tri.solve(values);            // L^{-1} v
  ConditionalMoments m;
  m.mean = a.transpose() * z;
  m.variance = (p.sigma2 - a.colwise().squaredNorm().array()).matrix().transpose();
  for (Index i = 0; i < m.variance.size(); ++i)
    if (m.variance(i) <= kZeroVariance * p.sigma2) m.variance(i) = 0.0;
  return m;
}

namespace {

void check_inputs(const PosteriorSamples& s, const SpatialDataset& train,
                  const Eigen::MatrixXd& new_coords, const Eigen::MatrixXd& new_X) {
  if (new_coords.rows() != new_X.rows())
    throw std::invalid_argument("new locations and design rows differ");
  if (new_X.cols() != s.beta.cols() || train.X.cols() != s.beta.cols())
    throw std::invalid_argument("design matrix width differs from the coefficient count");
  if (s.w && s.w->cols() != train.size())
    throw std::invalid_argument("posterior latent draws do not match the training data");
  if (new_coords.cols() != train.coords.cols())
    throw std::invalid_argument("location dimension mismatch");
}

struct LatentPredictor {
  const SpatialDataset& train;
  const Eigen::MatrixXd& new_coords;
  PriorMode mode;
  std::unique_ptr<KrigingPlan> plan;

  LatentPredictor(const SpatialDataset& t, const Eigen::MatrixXd& nc, const PredictOptions& o)
      : train(t), new_coords(nc), mode(o.mode) {
    if (mode == PriorMode::Nngp)
      plan = std::make_unique<KrigingPlan>(
          make_kriging_plan(nc, NeighborIndex(t.coords), o.max_neighbors));
  }

  ConditionalMoments operator()(const Eigen::VectorXd& w, const CovParams& p) const {
    if (plan) return krige(*plan, w, p);
    return dense_conditional(train.coords, w, new_coords, p);
  }
};

}  // namespace

PredictiveDraws predict_gaussian(const PosteriorSamples& s, const SpatialDataset& train,
                                 const Eigen::MatrixXd& new_coords, const Eigen::MatrixXd& new_X,
                                 const PredictOptions& o) {
  check_inputs(s, train, new_coords, new_X);
  if (s.family == Family::Poisson) throw std::invalid_argument("Gaussian prediction of Poisson samples");
  if (!s.tau2) throw std::invalid_argument("Gaussian samples need tau2");
  const Index L = new_coords.rows(), m = s.size();
  PredictiveDraws out;
  out.family = s.family;
  out.y.resize(L, m);
  out.mean.resize(L, m);
  out.var.resize(L, m);
  const bool marginal = s.family == Family::GaussianMarginal;
  if (!marginal && !s.w) throw std::invalid_argument("conditional samples need w");
  if (marginal && o.mode == PriorMode::Nngp)
    throw std::invalid_argument("the marginal formulation predicts with the dense GP only");
  LatentPredictor latent(train, new_coords, o);
  for (Index j = 0; j < m; ++j) {
    Rng rng = Rng::substream(o.seed, static_cast<std::uint64_t>(j));
    const CovParams p{s.sigma2(j), s.phi(j)};
    const double tau2 = (*s.tau2)(j);
    const Eigen::VectorXd xb = new_X * s.beta.row(j).transpose();
    if (marginal) {
      const Eigen::VectorXd resid = train.y - train.X * s.beta.row(j).transpose();
      const ConditionalMoments c = dense_conditional(train.coords, resid, new_coords, p, tau2);
      out.mean.col(j) = xb + c.mean;
      out.var.col(j) = (c.variance.array() + tau2).matrix();
    } else {
      const ConditionalMoments c = latent(s.w->row(j).transpose(), p);
      const Eigen::VectorXd z = rng.normal_matrix(L, 1);
      out.mean.col(j) = xb + c.mean + (c.variance.array().sqrt() * z.array()).matrix();
      out.var.col(j).setConstant(tau2);
    }
    const Eigen::VectorXd e = rng.normal_matrix(L, 1);
    out.y.col(j) = out.mean.col(j) + (out.var.col(j).array().sqrt() * e.array()).matrix();
  }
  return out;
}

PredictiveDraws predict_poisson(const PosteriorSamples& s, const SpatialDataset& train,
                                const Eigen::MatrixXd& new_coords, const Eigen::MatrixXd& new_X,
                                const PredictOptions& o) {
  check_inputs(s, train, new_coords, new_X);
  if (s.family != Family::Poisson) throw std::invalid_argument("Poisson prediction of Gaussian samples");
  if (!s.w) throw std::invalid_argument("Poisson samples need w");
  const Index L = new_coords.rows(), m = s.size();
  PredictiveDraws out;
  out.family = Family::Poisson;
  out.y.resize(L, m);
  out.mean.resize(L, m);
  LatentPredictor latent(train, new_coords, o);
  for (Index j = 0; j < m; ++j) {
    Rng rng = Rng::substream(o.seed, static_cast<std::uint64_t>(j));
    const ConditionalMoments c = latent(s.w->row(j).transpose(), CovParams{s.sigma2(j), s.phi(j)});
    const Eigen::VectorXd xb = new_X * s.beta.row(j).transpose();
    for (Index i = 0; i < L; ++i) {
      const double w = c.mean(i) + std::sqrt(c.variance(i)) * rng.normal();
      const double lambda = std::exp(std::min(xb(i) + w, o.log_rate_cap));
      out.mean(i, j) = lambda;
      out.y(i, j) = static_cast<double>(rng.poisson(lambda));
    }
  }
  return out;
}

PredictiveDraws predict(const PosteriorSamples& s, const SpatialDataset& train,
                        const Eigen::MatrixXd& new_coords, const Eigen::MatrixXd& new_X,
                        const PredictOptions& o) {
  return s.family == Family::Poisson ? predict_poisson(s, train, new_coords, new_X, o)
                                     : predict_gaussian(s, train, new_coords, new_X, o);
}

}  // namespace sivi
