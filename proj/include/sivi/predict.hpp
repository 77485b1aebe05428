#pragma once

// Posterior-predictive draws at new locations from posterior samples.

#include "sivi/models.hpp"
#include "sivi/variational.hpp"

#include <Eigen/Dense>

#include <cstdint>

namespace sivi {

/// One column per posterior draw, one row per new location. For Gaussian
/// families `mean` and `var` are the per-draw predictive density parameters;
/// for Poisson `mean` holds the rate and `var` is empty.
struct PredictiveDraws {
  Family family = Family::GaussianConditional;
  Eigen::MatrixXd y;
  Eigen::MatrixXd mean;
  Eigen::MatrixXd var;

  Index locations() const { return y.rows(); }
  Index draws() const { return y.cols(); }
};

struct PredictOptions {
  PriorMode mode = PriorMode::DenseGp;
  int max_neighbors = 10;
  double log_rate_cap = 30.0;
  /// Draw j uses Rng::substream(seed, j).
  std::uint64_t seed = 0;
};

PredictiveDraws predict_gaussian(const PosteriorSamples& samples, const SpatialDataset& train,
                                 const Eigen::MatrixXd& new_coords, const Eigen::MatrixXd& new_X,
                                 const PredictOptions& options);
PredictiveDraws predict_poisson(const PosteriorSamples& samples, const SpatialDataset& train,
                                const Eigen::MatrixXd& new_coords, const Eigen::MatrixXd& new_X,
                                const PredictOptions& options);
/// Dispatches on the samples' family.
PredictiveDraws predict(const PosteriorSamples& samples, const SpatialDataset& train,
                        const Eigen::MatrixXd& new_coords, const Eigen::MatrixXd& new_X,
                        const PredictOptions& options);

/// Exact latent conditional moments of a zero-mean GP at new locations given
/// values at the training locations.
ConditionalMoments dense_conditional(const Eigen::MatrixXd& train_coords,
                                     const Eigen::VectorXd& values,
                                     const Eigen::MatrixXd& new_coords, const CovParams& p,
                                     double nugget = 0.0);

}  // namespace sivi
