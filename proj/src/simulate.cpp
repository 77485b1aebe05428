#include "sivi/simulate.hpp"

#include "sivi/covariance.hpp"
#include "sivi/nngp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace sivi {

namespace {

Eigen::VectorXd gp_draw(const Eigen::MatrixXd& coords, const CovParams& p, Rng& rng) {
  const Eigen::MatrixXd l = ad::cholesky_factor(build_cov_matrix(coords, p));
  return l.triangularView<Eigen::Lower>() * Eigen::VectorXd(rng.normal_matrix(coords.rows(), 1));
}

bool standardize(Eigen::VectorXd& x) {
  const double mean = x.mean();
  const double sd = std::sqrt(sample_variance(x));
  if (!(sd > 0.0)) return false;
  x = ((x.array() - mean) / sd).matrix();
  return true;
}

}  // namespace

Eigen::MatrixXd gen_locations(Index n, double side, Rng& rng) {
  if (n < 1) throw std::invalid_argument("gen_locations: n must be positive");
  if (!(side > 0.0)) throw std::invalid_argument("gen_locations: side must be positive");
  return side * rng.uniform_matrix(n, 2);
}

Replicate gen_gaussian_replicate(Index n, Rng& rng, double side) {
  if (n < 2) throw std::invalid_argument("gen_gaussian_replicate: n must be at least 2");
  Replicate r;
  SpatialDataset& d = r.data;
  d.coords = gen_locations(n, side, rng);
  Eigen::VectorXd x(n);
  bool ok = false;
  for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
    for (Index i = 0; i < n; ++i) x(i) = static_cast<double>(rng.poisson(3.0));
    ok = standardize(x);
  }
  if (!ok) throw std::runtime_error("gen_gaussian_replicate: degenerate covariate");
  d.X.resize(n, 2);
  d.X.col(0).setOnes();
  d.X.col(1) = x;
  using P = GaussianPreset;
  const Eigen::VectorXd w = gp_draw(d.coords, CovParams{P::sigma2, P::phi}, rng);
  const Eigen::VectorXd noise = std::sqrt(P::tau2) * Eigen::VectorXd(rng.normal_matrix(n, 1));
  d.y = (P::beta0 + P::beta1 * x.array()).matrix() + w + noise;
  r.truth.beta = Eigen::Vector2d(P::beta0, P::beta1);
  r.truth.sigma2 = P::sigma2;
  r.truth.tau2 = P::tau2;
  r.truth.phi = P::phi;
  r.truth.w = w;
  return r;
}

Replicate gen_poisson_replicate(Index n, Rng& rng, double side) {
  if (n < 2) throw std::invalid_argument("gen_poisson_replicate: n must be at least 2");
  Replicate r;
  SpatialDataset& d = r.data;
  d.coords = gen_locations(n, side, rng);
  d.X.resize(n, 2);
  d.X.col(0).setOnes();
  d.X.col(1) = rng.normal_matrix(n, 1);
  using P = PoissonPreset;
  const Eigen::VectorXd w = gp_draw(d.coords, CovParams{P::sigma2, P::phi}, rng);
  d.y.resize(n);
  for (Index i = 0; i < n; ++i)
    d.y(i) = static_cast<double>(rng.poisson(std::exp(P::beta0 + P::beta1 * d.X(i, 1) + w(i))));
  r.truth.beta = Eigen::Vector2d(P::beta0, P::beta1);
  r.truth.sigma2 = P::sigma2;
  r.truth.phi = P::phi;
  r.truth.w = w;
  return r;
}

Split split(const SpatialDataset& data, Index n_validation, Rng& rng) {
  const Index n = data.size();
  if (n_validation < 0 || n_validation >= n)
    throw std::invalid_argument("split: validation size must be in [0, n)");
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  // Fisher-Yates with our own uniform so the result does not depend on the
  // standard library's shuffle.
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(std::floor(rng.uniform() * static_cast<double>(i + 1)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(std::min(j, i))]);
  }
  Split s;
  s.validation_rows.assign(idx.begin(), idx.begin() + n_validation);
  s.train_rows.assign(idx.begin() + n_validation, idx.end());
  std::sort(s.validation_rows.begin(), s.validation_rows.end());
  std::sort(s.train_rows.begin(), s.train_rows.end());
  s.train = data.subset(s.train_rows);
  s.validation = data.subset(s.validation_rows);
  return s;
}

Eigen::VectorXd simulate_nngp_field(const Eigen::MatrixXd& coords, const CovParams& p,
                                    int max_neighbors, Rng& rng) {
  const NeighborGraph g = build_graph(coords, max_neighbors);
  const VecchiaTerms terms = vecchia_terms(g, p);
  const Index n = g.size();
  Eigen::VectorXd ordered(n);
  for (Index i = 0; i < n; ++i) {
    double mean = 0.0;
    const auto& nb = g.neighbors[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < nb.size(); ++k)
      mean += terms.weights[static_cast<std::size_t>(i)](static_cast<Index>(k)) * ordered(nb[k]);
    ordered(i) = mean + std::sqrt(terms.variances(i)) * rng.normal();
  }
  Eigen::VectorXd w(n);
  for (Index i = 0; i < n; ++i) w(g.order[static_cast<std::size_t>(i)]) = ordered(i);
  return w;
}

SpatialDataset gen_large_field(Index n, double side, const LargeFieldParams& params, Rng& rng,
                               Eigen::VectorXd* latent) {
  CovParams{params.sigma2, params.phi}.validate();
  if (!(params.tau2 >= 0.0)) throw std::invalid_argument("gen_large_field: negative nugget");
  SpatialDataset d;
  d.coords = gen_locations(n, side, rng);
  d.X = Eigen::MatrixXd::Ones(n, 1);
  const Eigen::VectorXd w =
      simulate_nngp_field(d.coords, CovParams{params.sigma2, params.phi}, params.max_neighbors, rng);
  d.y = (params.mean + w.array()).matrix() +
        std::sqrt(params.tau2) * Eigen::VectorXd(rng.normal_matrix(n, 1));
  if (latent) *latent = w;
  return d;
}

}  // namespace sivi
