#pragma once

// Synthetic replicates for the Gaussian and Poisson experiments and the
// large constant-mean Gaussian field.

#include "sivi/models.hpp"
#include "sivi/random.hpp"

#include <Eigen/Dense>

#include <vector>

namespace sivi {

struct GaussianPreset {
  static constexpr double beta0 = 0.0;
  static constexpr double beta1 = 0.5;
  static constexpr double sigma2 = 1.0;
  static constexpr double tau2 = 0.25;
  static constexpr double phi = 0.1;
};

struct PoissonPreset {
  static constexpr double beta0 = 1.5;
  static constexpr double beta1 = 0.25;
  static constexpr double sigma2 = 0.1;
  static constexpr double phi = 0.1;
};

inline constexpr double kDefaultSide = 50.0;
inline constexpr Index kDefaultValidation = 20;

struct Replicate {
  SpatialDataset data;
  ThetaSample truth;
};

/// n uniform locations on [0, side]^2.
Eigen::MatrixXd gen_locations(Index n, double side, Rng& rng);

/// Standardized Poisson(3) covariate, exponential GP, Gaussian nugget.
Replicate gen_gaussian_replicate(Index n, Rng& rng, double side = kDefaultSide);
/// Standard normal covariate, exponential GP, Poisson response with log link.
Replicate gen_poisson_replicate(Index n, Rng& rng, double side = kDefaultSide);

struct Split {
  SpatialDataset train;
  SpatialDataset validation;
  std::vector<Index> train_rows;
  std::vector<Index> validation_rows;
};

/// Uniformly random disjoint split; both row lists are sorted.
Split split(const SpatialDataset& data, Index n_validation, Rng& rng);

struct LargeFieldParams {
  double mean = 0.0;
  double sigma2 = 1.0;
  double phi = 0.1;
  double tau2 = 0.25;
  int max_neighbors = 10;
};

/// Constant-mean field simulated sequentially from its nearest-neighbour
/// conditionals, plus nugget noise. The design matrix is a column of ones.
/// `latent` receives the noise-free field when given.
SpatialDataset gen_large_field(Index n, double side, const LargeFieldParams& params, Rng& rng,
                               Eigen::VectorXd* latent = nullptr);

/// Sequential simulation of a zero-mean field at the given locations.
Eigen::VectorXd simulate_nngp_field(const Eigen::MatrixXd& coords, const CovParams& p,
                                    int max_neighbors, Rng& rng);

}  // namespace sivi
