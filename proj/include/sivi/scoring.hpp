#pragma once

// Proper scoring rules for sample-based predictive distributions.

#include "sivi/models.hpp"
#include "sivi/predict.hpp"

#include <Eigen/Dense>

namespace sivi {

/// Empirical CRPS, (1/m) sum |x_i - y| - (1/(2 m^2)) sum_ij |x_i - x_j|.
double crps_from_draws(const Eigen::VectorXd& draws, double y);
/// Closed-form CRPS of N(mean, sd^2).
double crps_gaussian(double mean, double sd, double y);

/// Type-7 (linear interpolation) empirical quantile.
double empirical_quantile(Eigen::VectorXd draws, double prob);

/// Interval score of the central (1 - alpha) empirical interval.
double interval_score(const Eigen::VectorXd& draws, double y, double alpha);
double interval_score(double lower, double upper, double y, double alpha);

/// Negative log of the equally weighted predictive mixture at y. Component
/// densities below exp(-700) are floored and flagged.
struct NlpdResult {
  double value = 0.0;
  bool floored = false;
};
NlpdResult nlpd_gaussian(const Eigen::VectorXd& means, const Eigen::VectorXd& variances, double y);
NlpdResult nlpd_poisson(const Eigen::VectorXd& rates, double y);

double rmse(const Eigen::VectorXd& predictions, const Eigen::VectorXd& truth);

struct ScoreReport {
  double alpha = 0.05;
  Eigen::VectorXd y, point, crps, interval, nlpd;
  double mean_crps = 0.0, mean_interval = 0.0, mean_nlpd = 0.0, rmse = 0.0;
  long nlpd_floored = 0;

  Index count() const { return y.size(); }
};

ScoreReport score(const PredictiveDraws& draws, const Eigen::VectorXd& truth, double alpha = 0.05);

}  // namespace sivi
