#include "sivi/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace sivi {

namespace {

constexpr double kLogFloor = -700.0;
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

NlpdResult mixture_nlpd(std::vector<double> logs) {
  NlpdResult r;
  for (double& v : logs) {
    if (!(v >= kLogFloor)) {
      v = kLogFloor;
      r.floored = true;
    }
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  double acc = 0.0;
  for (double v : logs) acc += std::exp(v - mx);
  r.value = -(mx + std::log(acc / static_cast<double>(logs.size())));
  return r;
}

}  // namespace

double crps_from_draws(const Eigen::VectorXd& draws, double y) {
  const Index m = draws.size();
  if (m < 1) throw std::invalid_argument("crps needs at least one draw");
  std::vector<double> x(draws.data(), draws.data() + m);
  std::sort(x.begin(), x.end());
  const double md = static_cast<double>(m);
  double abs_err = 0.0, spread = 0.0;
  for (Index i = 0; i < m; ++i) abs_err += std::abs(x[static_cast<std::size_t>(i)] - y);
  // sum_ij |x_i - x_j| / 2 written over order-statistic gaps, so a point
  // mass gives exactly zero.
  for (Index k = 1; k < m; ++k)
    spread += static_cast<double>(k) * (md - static_cast<double>(k)) *
              (x[static_cast<std::size_t>(k)] - x[static_cast<std::size_t>(k - 1)]);
  return abs_err / md - spread / (md * md);
}

double crps_gaussian(double mean, double sd, double y) {
  if (!(sd > 0.0)) return std::abs(y - mean);
  const double z = (y - mean) / sd;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
  return sd * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(M_PI));
}

double empirical_quantile(Eigen::VectorXd draws, double prob) {
  const Index m = draws.size();
  if (m < 1) throw std::invalid_argument("quantile of an empty sample");
  if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("probability outside [0, 1]");
  std::sort(draws.data(), draws.data() + m);
  const double h = (static_cast<double>(m) - 1.0) * prob;
  const auto lo = static_cast<Index>(std::floor(h));
  const Index hi = std::min(lo + 1, m - 1);
  return draws(lo) + (h - static_cast<double>(lo)) * (draws(hi) - draws(lo));
}

double interval_score(double lower, double upper, double y, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  double s = upper - lower;
  if (y < lower) s += 2.0 / alpha * (lower - y);
  if (y > upper) s += 2.0 / alpha * (y - upper);
  return s;
}

double interval_score(const Eigen::VectorXd& draws, double y, double alpha) {
  if (draws.size() < 2) throw std::invalid_argument("interval score needs at least two draws");
  return interval_score(empirical_quantile(draws, alpha / 2.0),
                        empirical_quantile(draws, 1.0 - alpha / 2.0), y, alpha);
}

NlpdResult nlpd_gaussian(const Eigen::VectorXd& means, const Eigen::VectorXd& variances, double y) {
  if (means.size() < 1 || means.size() != variances.size())
    throw std::invalid_argument("nlpd: mismatched or empty parameter vectors");
  std::vector<double> logs(static_cast<std::size_t>(means.size()));
  for (Index j = 0; j < means.size(); ++j) {
    const double d = y - means(j);
    logs[static_cast<std::size_t>(j)] =
        -0.5 * (kLog2Pi + std::log(variances(j))) - 0.5 * d * d / variances(j);
  }
  return mixture_nlpd(std::move(logs));
}

NlpdResult nlpd_poisson(const Eigen::VectorXd& rates, double y) {
  if (rates.size() < 1) throw std::invalid_argument("nlpd: no draws");
  std::vector<double> logs(static_cast<std::size_t>(rates.size()));
  for (Index j = 0; j < rates.size(); ++j) logs[static_cast<std::size_t>(j)] = log_poisson_pmf(y, rates(j));
  return mixture_nlpd(std::move(logs));
}

double rmse(const Eigen::VectorXd& predictions, const Eigen::VectorXd& truth) {
  if (predictions.size() != truth.size()) throw std::invalid_argument("rmse: length mismatch");
  if (truth.size() == 0) throw std::invalid_argument("rmse: empty input");
  return std::sqrt((predictions - truth).squaredNorm() / static_cast<double>(truth.size()));
}

ScoreReport score(const PredictiveDraws& d, const Eigen::VectorXd& truth, double alpha) {
  const Index L = d.locations();
  if (truth.size() != L) throw std::invalid_argument("truth length differs from location count");
  ScoreReport r;
  r.alpha = alpha;
  r.y = truth;
  r.point = d.y.rowwise().mean();
  r.crps.resize(L);
  r.interval.resize(L);
  r.nlpd.resize(L);
  for (Index i = 0; i < L; ++i) {
    const Eigen::VectorXd row = d.y.row(i).transpose();
    r.crps(i) = crps_from_draws(row, truth(i));
    r.interval(i) = interval_score(row, truth(i), alpha);
    const NlpdResult n = d.family == Family::Poisson
                             ? nlpd_poisson(d.mean.row(i).transpose(), truth(i))
                             : nlpd_gaussian(d.mean.row(i).transpose(), d.var.row(i).transpose(), truth(i));
    r.nlpd(i) = n.value;
    if (n.floored) ++r.nlpd_floored;
  }
  r.mean_crps = r.crps.mean();
  r.mean_interval = r.interval.mean();
  r.mean_nlpd = r.nlpd.mean();
  r.rmse = rmse(r.point, truth);
  return r;
}

}  // namespace sivi
