#pragma once

// Nearest-neighbour Gaussian process: ordering, conditioning sets, the
// Vecchia log density and sequential kriging at new locations.

#include "sivi/autodiff.hpp"
#include "sivi/covariance.hpp"

#include <Eigen/Dense>

#include <memory>
#include <vector>

namespace sivi {

using Eigen::Index;

enum class NeighborSearch {
  Exhaustive,  // O(n^2) scan over all predecessors
  Sweep,       // scan predecessors backwards along the x-ordering with pruning
};

struct NeighborGraph {
  int max_neighbors = 10;
  /// order[i] is the input index of the i-th ordered location.
  std::vector<Index> order;
  /// neighbors[i] holds ordered positions (< i), nearest first.
  std::vector<std::vector<Index>> neighbors;
  /// Coordinates in ordered position.
  Eigen::MatrixXd coords;
  /// Distances among the members of N(i) and from location i to N(i).
  std::vector<Eigen::MatrixXd> neighbor_dist;
  std::vector<Eigen::VectorXd> cross_dist;

  Index size() const { return static_cast<Index>(order.size()); }
};

/// Sorts locations by first coordinate (ties: second coordinate, then input
/// index) and assigns each the min(M, i-1) closest predecessors, ties broken
/// by lower ordered index.
NeighborGraph build_graph(const Eigen::MatrixXd& coords, int max_neighbors,
                          NeighborSearch search = NeighborSearch::Sweep);

struct VecchiaTerms {
  std::vector<Eigen::VectorXd> weights;  // b_i
  Eigen::VectorXd variances;             // f_i
};

class SingularConditioningSet : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

VecchiaTerms vecchia_terms(const NeighborGraph& graph, const CovParams& p);

/// sum_i log N(w_i | b_i^T w_N(i), f_i). `w` is indexed by input order.
double vecchia_log_density(const Eigen::VectorXd& w, const VecchiaTerms& terms,
                           const NeighborGraph& graph);

/// Differentiable Vecchia log density in (w, sigma2, phi); w is n x 1 in
/// input order, sigma2 and phi are 1x1.
ad::Var vecchia_log_density(ad::Var w, ad::Var sigma2, ad::Var phi,
                            std::shared_ptr<const NeighborGraph> graph);

/// Nearest-neighbour queries against a fixed reference set.
class NeighborIndex {
 public:
  explicit NeighborIndex(Eigen::MatrixXd coords);

  /// Indices (into the reference set) of the k nearest points, nearest
  /// first, distance ties broken by lower index.
  std::vector<Index> query(const Eigen::RowVectorXd& point, int k) const;
  const Eigen::MatrixXd& coords() const { return coords_; }

 private:
  Eigen::MatrixXd coords_;
  std::vector<Index> by_x_;  // reference indices sorted by first coordinate
};

/// Neighbour sets and distances of new locations among observed ones.
struct KrigingPlan {
  std::vector<std::vector<Index>> neighbors;  // observed indices per new location
  std::vector<Eigen::MatrixXd> neighbor_dist;
  std::vector<Eigen::VectorXd> cross_dist;
};

KrigingPlan make_kriging_plan(const Eigen::MatrixXd& new_coords,
                              const NeighborIndex& observed, int max_neighbors);

/// Relative conditional variance treated as exactly zero.
inline constexpr double kZeroVariance = 1e-12;

struct ConditionalMoments {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

/// Conditional mean and variance of the latent field at each planned new
/// location given `w_observed`; new locations never condition on each other.
ConditionalMoments krige(const KrigingPlan& plan,
                         const Eigen::VectorXd& w_observed, const CovParams& p);

ConditionalMoments predict_sequential(const Eigen::MatrixXd& new_coords,
                                      const Eigen::MatrixXd& observed_coords,
                                      const Eigen::VectorXd& w_observed,
                                      const CovParams& p, int max_neighbors);

}  // namespace sivi
