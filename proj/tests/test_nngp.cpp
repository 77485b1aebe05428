#include "gradcheck.hpp"
#include "oracles.hpp"
#include "sivi/nngp.hpp"
#include "sivi/random.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace sivi;
using sivi::testing::dense_mvn_logpdf;

namespace {

std::vector<Index> brute_nearest(const Eigen::MatrixXd& ref, const Eigen::RowVectorXd& p, int k) {
  std::vector<Index> idx(ref.rows());
  std::iota(idx.begin(), idx.end(), 0);
  auto d = [&](Index i) { return (ref.row(i) - p).norm(); };
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return d(a) < d(b); });
  idx.resize(std::min<Index>(k, ref.rows()));
  return idx;
}

}  // namespace

TEST_CASE("ordering and neighbour sets on a line") {
  Eigen::MatrixXd coords(5, 2);
  coords << 3, 0, 0, 0, 2, 0, 1, 0, 0.5, 0;
  NeighborGraph g = build_graph(coords, 2);
  CHECK(g.order == std::vector<Index>{1, 4, 3, 2, 0});
  CHECK(g.neighbors[0].empty());
  CHECK(g.neighbors[1] == std::vector<Index>{0});
  CHECK(g.neighbors[2] == std::vector<Index>{1, 0});
  CHECK(g.neighbors[3] == std::vector<Index>{2, 1});
  CHECK(g.neighbors[4] == std::vector<Index>{3, 2});
  CHECK(g.cross_dist[4](0) == doctest::Approx(1.0));
  CHECK(g.neighbor_dist[4](0, 1) == doctest::Approx(1.0));
}

TEST_CASE("ties in the ordering fall back to second coordinate then input index") {
  Eigen::MatrixXd coords(4, 2);
  coords << 1, 1, 1, 0, 0, 5, 1, 0;
  NeighborGraph g = build_graph(coords, 3);
  CHECK(g.order == std::vector<Index>{2, 1, 3, 0});
}

TEST_CASE("sweep search agrees with exhaustive search") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::MatrixXd coords = 50.0 * rng.uniform_matrix(400, 2);
    if (trial == 4) {
      // Integer grid: heavy distance ties.
      for (Index i = 0; i < coords.rows(); ++i)
        coords.row(i) << static_cast<double>(i % 20), static_cast<double>(i / 20);
    }
    for (int m : {1, 5, 10, 15}) {
      NeighborGraph a = build_graph(coords, m, NeighborSearch::Exhaustive);
      NeighborGraph b = build_graph(coords, m, NeighborSearch::Sweep);
      CHECK(a.order == b.order);
      CHECK(a.neighbors == b.neighbors);
      for (Index i = 0; i < a.size(); ++i)
        CHECK(a.neighbors[i].size() == static_cast<std::size_t>(std::min<Index>(m, i)));
    }
  }
}

TEST_CASE("exhaustive neighbours are the closest predecessors") {
  Rng rng(22);
  Eigen::MatrixXd coords = 10.0 * rng.uniform_matrix(60, 2);
  NeighborGraph g = build_graph(coords, 4, NeighborSearch::Exhaustive);
  for (Index i = 1; i < g.size(); ++i) {
    auto expected = brute_nearest(g.coords.topRows(i), g.coords.row(i), 4);
    CHECK(g.neighbors[i] == expected);
  }
}

TEST_CASE("Vecchia density with full conditioning sets equals the dense density") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const Index n = 5 + trial;
    Eigen::MatrixXd coords = 10.0 * rng.uniform_matrix(n, 2);
    const CovParams p{0.5 + rng.uniform(), 0.1 + rng.uniform()};
    Eigen::VectorXd w = rng.normal_matrix(n, 1);
    NeighborGraph g = build_graph(coords, static_cast<int>(n - 1));
    const double vecchia = vecchia_log_density(w, vecchia_terms(g, p), g);
    const double dense = dense_mvn_logpdf(w, build_cov_matrix(coords, p));
    CHECK(vecchia == doctest::Approx(dense).epsilon(1e-9));
  }
}

TEST_CASE("Vecchia density is a proper density in one dimension") {
  // Single location: N(0, sigma2).
  Eigen::MatrixXd coords(1, 2);
  coords << 0, 0;
  NeighborGraph g = build_graph(coords, 10);
  Eigen::VectorXd w(1);
  w << 0.7;
  const double v = vecchia_log_density(w, vecchia_terms(g, CovParams{2.0, 1.0}), g);
  CHECK(v == doctest::Approx(-0.5 * std::log(2 * M_PI * 2.0) - 0.49 / 4.0));
}

TEST_CASE("differentiable Vecchia density matches values and finite differences") {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 12;
    Eigen::MatrixXd coords = 10.0 * rng.uniform_matrix(n, 2);
    auto g = std::make_shared<const NeighborGraph>(build_graph(coords, 3));
    const CovParams p{0.5 + rng.uniform(), 0.1 + 0.5 * rng.uniform()};
    Eigen::VectorXd w = rng.normal_matrix(n, 1);
    testing::TapeFn f = [&](ad::Tape&, const std::vector<ad::Var>& x) {
      return vecchia_log_density(x[0], x[1], x[2], g);
    };
    std::vector<ad::Tensor> xs{w, ad::Tensor::Constant(1, 1, p.sigma2),
                               ad::Tensor::Constant(1, 1, p.phi)};
    CHECK(testing::evaluate(f, xs) ==
          doctest::Approx(vecchia_log_density(w, vecchia_terms(*g, p), *g)).epsilon(1e-12));
    CHECK(testing::gradient_error(f, xs) < 1e-5);
  }
}

TEST_CASE("neighbour index queries match brute force") {
  Rng rng(25);
  Eigen::MatrixXd ref = 50.0 * rng.uniform_matrix(300, 2);
  NeighborIndex index(ref);
  for (int q = 0; q < 100; ++q) {
    Eigen::RowVectorXd p = 60.0 * rng.uniform_matrix(1, 2).array() - 5.0;
    for (int k : {1, 10, 400}) CHECK(index.query(p, k) == brute_nearest(ref, p, k));
  }
  Eigen::MatrixXd grid(16, 2);
  for (Index i = 0; i < 16; ++i) grid.row(i) << static_cast<double>(i % 4), static_cast<double>(i / 4);
  NeighborIndex gi(grid);
  Eigen::RowVectorXd centre(2);
  centre << 1.5, 1.5;
  CHECK(gi.query(centre, 4) == brute_nearest(grid, centre, 4));
}

TEST_CASE("kriging with all observations as neighbours equals full conditioning") {
  Rng rng(26);
  const Index n = 30, m = 5;
  Eigen::MatrixXd obs = 10.0 * rng.uniform_matrix(n, 2);
  Eigen::MatrixXd fresh = 10.0 * rng.uniform_matrix(m, 2);
  const CovParams p{1.2, 0.3};
  Eigen::VectorXd w = rng.normal_matrix(n, 1);
  ConditionalMoments got = predict_sequential(fresh, obs, w, p, static_cast<int>(n));
  const Eigen::MatrixXd coo = build_cov_matrix(obs, p);
  const Eigen::MatrixXd cross = cov_from_distances(cross_distances(fresh, obs), p);
  Eigen::LLT<Eigen::MatrixXd> llt(coo);
  for (Index j = 0; j < m; ++j) {
    const Eigen::VectorXd c = cross.row(j).transpose();
    const Eigen::VectorXd a = llt.solve(c);
    CHECK(got.mean(j) == doctest::Approx(a.dot(w)).epsilon(1e-8));
    CHECK(got.variance(j) == doctest::Approx(p.sigma2 - c.dot(a)).epsilon(1e-8));
  }
}

TEST_CASE("kriging at an observed location returns the observed value") {
  Eigen::MatrixXd obs(3, 2);
  obs << 0, 0, 1, 0, 0, 1;
  Eigen::VectorXd w(3);
  w << 0.3, -1.0, 2.0;
  Eigen::MatrixXd fresh = obs.row(1);
  ConditionalMoments got = predict_sequential(fresh, obs, w, CovParams{1.0, 1.0}, 2);
  CHECK(got.mean(0) == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(got.variance(0) < 1e-6);
}
