#include "sivi/nngp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <queue>
#include <string>

namespace sivi {

namespace {

double point_distance(const Eigen::MatrixXd& a, Index i,
                      const Eigen::MatrixXd& b, Index j) {
  double s = 0.0;
  for (Index c = 0; c < a.cols(); ++c) {
    const double d = a(i, c) - b(j, c);
    s += d * d;
  }
  return std::sqrt(s);
}

double point_distance(const Eigen::RowVectorXd& p, const Eigen::MatrixXd& b,
                      Index j) {
  double s = 0.0;
  for (Index c = 0; c < b.cols(); ++c) {
    const double d = p(c) - b(j, c);
    s += d * d;
  }
  return std::sqrt(s);
}

struct Candidate {
  double dist;
  Index index;
  bool operator<(const Candidate& o) const {
    return dist < o.dist || (dist == o.dist && index < o.index);
  }
};

// Keeps the k best candidates; top() is the worst kept.
class BestK {
 public:
  explicit BestK(std::size_t k) : k_(k) {}
  void offer(Candidate c) {
    if (k_ == 0) return;
    if (heap_.size() < k_) {
      heap_.push(c);
    } else if (c < heap_.top()) {
      heap_.pop();
      heap_.push(c);
    }
  }
  bool full() const { return heap_.size() == k_; }
  double worst() const { return heap_.top().dist; }
  std::vector<Index> sorted() {
    std::vector<Candidate> all;
    while (!heap_.empty()) {
      all.push_back(heap_.top());
      heap_.pop();
    }
    std::sort(all.begin(), all.end());
    std::vector<Index> out;
    for (const Candidate& c : all) out.push_back(c.index);
    return out;
  }

 private:
  std::size_t k_;
  std::priority_queue<Candidate> heap_;
};

Eigen::MatrixXd subset_distances(const Eigen::MatrixXd& coords,
                                 const std::vector<Index>& idx) {
  const Index m = static_cast<Index>(idx.size());
  Eigen::MatrixXd d(m, m);
  for (Index a = 0; a < m; ++a) {
    d(a, a) = 0.0;
    for (Index b = 0; b < a; ++b) {
      d(a, b) = point_distance(coords, idx[a], coords, idx[b]);
      d(b, a) = d(a, b);
    }
  }
  return d;
}

constexpr std::size_t kLocalCacheBytes = std::size_t{256} << 20;

// Local conditional terms of one location given its neighbour distances.
struct LocalTerms {
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::MatrixXd corr;  // R_N
  Eigen::VectorXd r;     // correlations with the neighbours
  Eigen::VectorXd b;     // R_N^{-1} r
  double g = 1.0;        // 1 - r^T b, the conditional variance per unit sill
};

void solve_local(const Eigen::MatrixXd& nd, const Eigen::VectorXd& cd,
                 double phi, LocalTerms& t) {
  if (cd.size() == 0) {
    t.b.resize(0);
    t.r.resize(0);
    t.g = 1.0;
    return;
  }
  t.corr = (-phi * nd.array()).exp().matrix();
  t.r = (-phi * cd.array()).exp().matrix();
  t.llt.compute(t.corr);
  if (t.llt.info() != Eigen::Success) {
    Eigen::MatrixXd jittered = t.corr;
    jittered.diagonal().array() += 1e-8;
    t.llt.compute(jittered);
    if (t.llt.info() != Eigen::Success)
      throw SingularConditioningSet("singular conditioning set");
  }
  t.b = t.llt.solve(t.r);
  t.g = 1.0 - t.r.dot(t.b);
  if (!(t.g > 0.0)) t.g = 1e-12;
}

}  // namespace

NeighborGraph build_graph(const Eigen::MatrixXd& coords, int max_neighbors,
                          NeighborSearch search) {
  if (max_neighbors < 1) throw std::invalid_argument("build_graph: M < 1");
  const Index n = coords.rows();
  NeighborGraph g;
  g.max_neighbors = max_neighbors;
  g.order.resize(n);
  std::iota(g.order.begin(), g.order.end(), Index{0});
  std::sort(g.order.begin(), g.order.end(), [&](Index a, Index b) {
    for (Index c = 0; c < coords.cols(); ++c)
      if (coords(a, c) != coords(b, c)) return coords(a, c) < coords(b, c);
    return a < b;
  });
  g.coords.resize(n, coords.cols());
  for (Index i = 0; i < n; ++i) g.coords.row(i) = coords.row(g.order[i]);

  g.neighbors.resize(n);
  g.neighbor_dist.resize(n);
  g.cross_dist.resize(n);
  for (Index i = 0; i < n; ++i) {
    BestK best(static_cast<std::size_t>(std::min<Index>(max_neighbors, i)));
    if (search == NeighborSearch::Exhaustive) {
      for (Index j = 0; j < i; ++j)
        best.offer({point_distance(g.coords, i, g.coords, j), j});
    } else {
      for (Index j = i - 1; j >= 0; --j) {
        const double gap = g.coords(i, 0) - g.coords(j, 0);
        if (best.full() && gap > best.worst()) break;
        best.offer({point_distance(g.coords, i, g.coords, j), j});
      }
    }
    g.neighbors[i] = best.sorted();
    const auto& nb = g.neighbors[i];
    g.neighbor_dist[i] = subset_distances(g.coords, nb);
    g.cross_dist[i].resize(static_cast<Index>(nb.size()));
    for (std::size_t k = 0; k < nb.size(); ++k)
      g.cross_dist[i](static_cast<Index>(k)) =
          point_distance(g.coords, i, g.coords, nb[k]);
  }
  return g;
}

VecchiaTerms vecchia_terms(const NeighborGraph& graph, const CovParams& p) {
  p.validate();
  const Index n = graph.size();
  VecchiaTerms terms;
  terms.weights.resize(n);
  terms.variances.resize(n);
  LocalTerms local;
  for (Index i = 0; i < n; ++i) {
    solve_local(graph.neighbor_dist[i], graph.cross_dist[i], p.phi, local);
    terms.weights[i] = local.b;
    terms.variances(i) = p.sigma2 * local.g;
  }
  return terms;
}

double vecchia_log_density(const Eigen::VectorXd& w, const VecchiaTerms& terms,
                           const NeighborGraph& graph) {
  const Index n = graph.size();
  if (w.size() != n) throw std::invalid_argument("vecchia_log_density: size");
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    double mean = 0.0;
    const auto& nb = graph.neighbors[i];
    for (std::size_t k = 0; k < nb.size(); ++k)
      mean += terms.weights[i](static_cast<Index>(k)) * w(graph.order[nb[k]]);
    const double e = w(graph.order[i]) - mean;
    const double f = terms.variances(i);
    total += -0.5 * std::log(2.0 * std::numbers::pi * f) - 0.5 * e * e / f;
  }
  return total;
}

ad::Var vecchia_log_density(ad::Var w, ad::Var sigma2, ad::Var phi,
                            std::shared_ptr<const NeighborGraph> graph) {
  if (w.cols() != 1 || w.rows() != graph->size())
    throw ad::ShapeError("vecchia_log_density: w must be n x 1");
  // Local terms from the forward pass are kept for the backward pass unless
  // they would take more than kLocalCacheBytes.
  const std::size_t m = static_cast<std::size_t>(graph->max_neighbors);
  const bool keep = static_cast<std::size_t>(graph->size()) * (2 * m * m + 2 * m + 8) *
                        sizeof(double) <= kLocalCacheBytes;
  auto cache = std::make_shared<std::vector<LocalTerms>>();
  auto forward = [graph, cache, keep](const std::vector<const ad::Tensor*>& in) {
    const ad::Tensor& w = *in[0];
    const double s2 = (*in[1])(0, 0);
    const double ph = (*in[2])(0, 0);
    const auto& order = graph->order;
    if (keep) cache->resize(static_cast<std::size_t>(graph->size()));
    LocalTerms scratch;
    double total = 0.0;
    for (Index i = 0; i < graph->size(); ++i) {
      LocalTerms& t = keep ? (*cache)[static_cast<std::size_t>(i)] : scratch;
      solve_local(graph->neighbor_dist[i], graph->cross_dist[i], ph, t);
      const auto& nb = graph->neighbors[i];
      double mean = 0.0;
      for (std::size_t k = 0; k < nb.size(); ++k)
        mean += t.b(static_cast<Index>(k)) * w(order[nb[k]], 0);
      const double e = w(order[i], 0) - mean;
      const double f = s2 * t.g;
      total += -0.5 * std::log(2.0 * std::numbers::pi * f) - 0.5 * e * e / f;
    }
    return ad::Tensor::Constant(1, 1, total);
  };
  auto backward = [graph, cache, keep](const ad::Tensor& gout, const ad::Tensor&,
                                       const std::vector<const ad::Tensor*>& in,
                                       const std::vector<ad::Tensor*>& ga) {
    const double seed = gout(0, 0);
    const ad::Tensor& w = *in[0];
    const double s2 = (*in[1])(0, 0);
    const double ph = (*in[2])(0, 0);
    const auto& order = graph->order;
    LocalTerms scratch;
    double d_s2 = 0.0;
    double d_phi = 0.0;
    for (Index i = 0; i < graph->size(); ++i) {
      const auto& nb = graph->neighbors[i];
      const Index m = static_cast<Index>(nb.size());
      if (!keep) solve_local(graph->neighbor_dist[i], graph->cross_dist[i], ph, scratch);
      const LocalTerms& t = keep ? (*cache)[static_cast<std::size_t>(i)] : scratch;
      Eigen::VectorXd wn(m);
      for (Index k = 0; k < m; ++k) wn(k) = w(order[nb[k]], 0);
      const double e = w(order[i], 0) - (m > 0 ? t.b.dot(wn) : 0.0);
      const double f = s2 * t.g;
      // dL/de = -e/f; e depends on w_i, w_N and b.
      const double de = -e / f;
      if (ga[0]) {
        (*ga[0])(order[i], 0) += seed * de;
        for (Index k = 0; k < m; ++k)
          (*ga[0])(order[nb[k]], 0) -= seed * de * t.b(k);
      }
      d_s2 += -0.5 / s2 + 0.5 * e * e / (f * s2);
      if (m > 0 && ga[2]) {
        const Eigen::MatrixXd& nd = graph->neighbor_dist[i];
        const Eigen::VectorXd& cd = graph->cross_dist[i];
        const Eigen::MatrixXd corr_d = -(nd.array() * t.corr.array()).matrix();
        const Eigen::VectorXd r_d = -(cd.array() * t.r.array()).matrix();
        const Eigen::VectorXd db = t.llt.solve(r_d - corr_d * t.b);
        const double dg = -r_d.dot(t.b) - t.r.dot(db);
        const double dl_dg = -0.5 / t.g + 0.5 * e * e / (f * t.g);
        const double dl_db_dot = -de * wn.dot(db);
        d_phi += dl_db_dot + dl_dg * dg;
      }
    }
    if (ga[1]) (*ga[1])(0, 0) += seed * d_s2;
    if (ga[2]) (*ga[2])(0, 0) += seed * d_phi;
  };
  return w.tape().record(ad::OpKind::VecchiaLogDensity, {w, sigma2, phi},
                         forward, backward);
}

NeighborIndex::NeighborIndex(Eigen::MatrixXd coords) : coords_(std::move(coords)) {
  by_x_.resize(coords_.rows());
  std::iota(by_x_.begin(), by_x_.end(), Index{0});
  std::sort(by_x_.begin(), by_x_.end(), [&](Index a, Index b) {
    if (coords_(a, 0) != coords_(b, 0)) return coords_(a, 0) < coords_(b, 0);
    return a < b;
  });
}

std::vector<Index> NeighborIndex::query(const Eigen::RowVectorXd& point,
                                        int k) const {
  const Index n = coords_.rows();
  BestK best(static_cast<std::size_t>(std::min<Index>(k, n)));
  const double x = point(0);
  auto it = std::lower_bound(by_x_.begin(), by_x_.end(), x,
                             [&](Index a, double v) { return coords_(a, 0) < v; });
  Index right = it - by_x_.begin();
  Index left = right - 1;
  while (left >= 0 || right < n) {
    const double gap_l =
        left >= 0 ? x - coords_(by_x_[left], 0) : std::numeric_limits<double>::infinity();
    const double gap_r =
        right < n ? coords_(by_x_[right], 0) - x : std::numeric_limits<double>::infinity();
    const bool take_left = gap_l <= gap_r;
    const double gap = take_left ? gap_l : gap_r;
    if (best.full() && gap > best.worst()) break;
    const Index j = take_left ? by_x_[left--] : by_x_[right++];
    best.offer({point_distance(point, coords_, j), j});
  }
  return best.sorted();
}

KrigingPlan make_kriging_plan(const Eigen::MatrixXd& new_coords,
                              const NeighborIndex& observed, int max_neighbors) {
  if (observed.coords().rows() < 1)
    throw std::invalid_argument("kriging needs at least one observed location");
  KrigingPlan plan;
  const Index t = new_coords.rows();
  plan.neighbors.resize(t);
  plan.neighbor_dist.resize(t);
  plan.cross_dist.resize(t);
  for (Index i = 0; i < t; ++i) {
    const Eigen::RowVectorXd p = new_coords.row(i);
    auto nb = observed.query(p, max_neighbors);
    plan.neighbor_dist[i] = subset_distances(observed.coords(), nb);
    plan.cross_dist[i].resize(static_cast<Index>(nb.size()));
    for (std::size_t k = 0; k < nb.size(); ++k)
      plan.cross_dist[i](static_cast<Index>(k)) =
          point_distance(p, observed.coords(), nb[k]);
    plan.neighbors[i] = std::move(nb);
  }
  return plan;
}

ConditionalMoments krige(const KrigingPlan& plan,
                         const Eigen::VectorXd& w_observed, const CovParams& p) {
  p.validate();
  const Index t = static_cast<Index>(plan.neighbors.size());
  ConditionalMoments out{Eigen::VectorXd(t), Eigen::VectorXd(t)};
  LocalTerms local;
  for (Index i = 0; i < t; ++i) {
    solve_local(plan.neighbor_dist[i], plan.cross_dist[i], p.phi, local);
    const auto& nb = plan.neighbors[i];
    double mean = 0.0;
    for (std::size_t k = 0; k < nb.size(); ++k)
      mean += local.b(static_cast<Index>(k)) * w_observed(nb[k]);
    out.mean(i) = mean;
    // Residual variance at the rounding level means a coincident location.
    out.variance(i) = local.g > kZeroVariance ? p.sigma2 * local.g : 0.0;
  }
  return out;
}

ConditionalMoments predict_sequential(const Eigen::MatrixXd& new_coords,
                                      const Eigen::MatrixXd& observed_coords,
                                      const Eigen::VectorXd& w_observed,
                                      const CovParams& p, int max_neighbors) {
  if (w_observed.size() != observed_coords.rows())
    throw std::invalid_argument("predict_sequential: w not aligned");
  NeighborIndex index(observed_coords);
  return krige(make_kriging_plan(new_coords, index, max_neighbors), w_observed, p);
}

}  // namespace sivi
