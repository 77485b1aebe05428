#include "gradient_suite.hpp"

#include "gradcheck.hpp"
#include "sivi/covariance.hpp"
#include "sivi/models.hpp"
#include "sivi/nngp.hpp"
#include "sivi/random.hpp"
#include "sivi/variational.hpp"

#include <cmath>
#include <functional>
#include <memory>

namespace sivi::testing {

namespace {

// Contracts an arbitrary-shaped output with fixed random weights so that
// every output entry reaches the scalar loss.
ad::Var contract(ad::Var y, std::uint64_t seed) {
  Rng rng(seed);
  ad::Var weights = y.tape().constant(rng.normal_matrix(y.rows(), y.cols()));
  return ad::sum(ad::cwise_mul(y, weights));
}

Eigen::MatrixXd spd(Rng& rng, Eigen::Index n) {
  Eigen::MatrixXd b = rng.normal_matrix(n, n);
  return b * b.transpose() + static_cast<double>(n) * Eigen::MatrixXd::Identity(n, n);
}

Eigen::MatrixXd away_from_zero(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Eigen::MatrixXd m = rng.normal_matrix(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (std::abs(m.data()[i]) < 0.05) m.data()[i] += 0.1;
  return m;
}

Eigen::MatrixXd positive(Rng& rng, Eigen::Index r, Eigen::Index c) {
  return (rng.uniform_matrix(r, c).array() * 3.0 + 0.2).matrix();
}

using Maker = std::function<std::pair<TapeFn, std::vector<ad::Tensor>>(Rng&, int)>;

GradientCheck run(const char* name, const Maker& make) {
  Rng rng(2024);
  GradientCheck c{name, 0.0, kGradientInstances};
  for (int i = 0; i < kGradientInstances; ++i) {
    auto [f, xs] = make(rng, i);
    c.worst = std::max(c.worst, gradient_error(f, xs));
  }
  return c;
}

SpatialDataset random_dataset(Rng& rng, Index n, Index p, bool counts) {
  SpatialDataset d;
  d.coords = 10.0 * rng.uniform_matrix(n, 2);
  d.X.resize(n, p + 1);
  d.X.col(0).setOnes();
  if (p > 0) d.X.rightCols(p) = rng.normal_matrix(n, p);
  d.y.resize(n);
  for (Index i = 0; i < n; ++i)
    d.y(i) = counts ? static_cast<double>(rng.poisson(2.0)) : rng.normal();
  return d;
}

ModelSpec fixed_spec(Family f, Index p) {
  ModelSpec s;
  s.family = f;
  s.p = p;
  s.priors.beta_mean = Eigen::VectorXd::Constant(p + 1, 0.2);
  s.priors.beta_var = Eigen::VectorXd::Constant(p + 1, 1.5);
  s.priors.sigma2 = {2.0, 1.1};
  s.priors.tau2 = {2.5, 0.7};
  s.priors.phi = {3.0, 0.8};
  return s;
}

}  // namespace

std::vector<GradientCheck> primitive_gradient_checks() {
  std::vector<GradientCheck> out;
  auto add = [&](const char* name, const Maker& make) { out.push_back(run(name, make)); };

  add("add", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(x[0] + x[1], 1); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(3, 2), rng.normal_matrix(3, 2)});
  });
  add("subtract", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(x[0] - x[1], 2); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(2, 3), rng.normal_matrix(2, 3)});
  });
  add("negate", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(-x[0], 3); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(2, 2)});
  });
  add("multiply", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::cwise_mul(x[0], x[1]), 4); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(3, 3), rng.normal_matrix(3, 3)});
  });
  add("divide", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::cwise_div(x[0], x[1]), 5); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(3, 2), positive(rng, 3, 2)});
  });
  add("matmul", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::matmul(x[0], x[1]), 6); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(3, 4), rng.normal_matrix(4, 2)});
  });
  add("exp", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::exp(x[0]), 7); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(3, 2)});
  });
  add("log", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::log(x[0]), 8); }),
                          std::vector<ad::Tensor>{positive(rng, 3, 2)});
  });
  add("relu", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::relu(x[0]), 9); }),
                          std::vector<ad::Tensor>{away_from_zero(rng, 4, 3)});
  });
  add("softplus", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::softplus(x[0]), 10); }),
                          std::vector<ad::Tensor>{(3.0 * rng.normal_matrix(4, 3)).eval()});
  });
  add("sum", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return ad::scale(ad::sum(ad::square(x[0])), 0.3); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(3, 3)});
  });
  add("lgamma", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::lgamma(x[0]), 11); }),
                          std::vector<ad::Tensor>{positive(rng, 2, 3)});
  });
  add("cholesky", [](Rng& rng, int i) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::cholesky(x[0]), 12); }),
                          std::vector<ad::Tensor>{spd(rng, 2 + i % 4)});
  });
  add("tri_solve", [](Rng& rng, int i) {
    const Eigen::Index n = 2 + i % 4;
    Eigen::MatrixXd l = Eigen::LLT<Eigen::MatrixXd>(spd(rng, n)).matrixL();
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::tri_solve(x[0], x[1]), 13); }),
                          std::vector<ad::Tensor>{l, rng.normal_matrix(n, 2)});
  });
  add("sqrt", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::sqrt(x[0]), 14); }),
                          std::vector<ad::Tensor>{positive(rng, 3, 3)});
  });
  add("scale", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::scale(x[0], -2.5) + 1.0, 15); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(2, 2)});
  });
  add("transpose/block/concat", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) {
                            ad::Var t = ad::transpose(x[0]);
                            return contract(ad::concat_cols({ad::block(t, 1, 0, 2, 3), x[1]}), 16);
                          }),
                          std::vector<ad::Tensor>{rng.normal_matrix(3, 4), rng.normal_matrix(2, 2)});
  });
  add("broadcast/row_sum/diagonal", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) {
                            ad::Var a = ad::broadcast_to(x[0], 3, 4);
                            ad::Var b = ad::broadcast_to(x[1], 3, 4);
                            ad::Var c = ad::broadcast_to(x[2], 3, 4);
                            return contract(ad::row_sum(ad::cwise_mul(a + b, c)), 17) +
                                   contract(ad::diagonal(x[3]), 18);
                          }),
                          std::vector<ad::Tensor>{rng.normal_matrix(1, 4), rng.normal_matrix(3, 1),
                                                  rng.normal_matrix(1, 1), rng.normal_matrix(3, 3)});
  });
  add("logsumexp_rows", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::logsumexp_rows(x[0]), 19); }),
                          std::vector<ad::Tensor>{(5.0 * rng.normal_matrix(3, 6)).eval()});
  });
  add("clamp_max", [](Rng& rng, int) {
    return std::make_pair(TapeFn([](ad::Tape&, const auto& x) { return contract(ad::clamp_max(x[0], 0.5), 20); }),
                          std::vector<ad::Tensor>{away_from_zero(rng, 3, 3)});
  });
  add("cov_matrix", [](Rng& rng, int) {
    auto dist = std::make_shared<const Eigen::MatrixXd>(
        pairwise_distances(10.0 * rng.uniform_matrix(4, 2)));
    return std::make_pair(TapeFn([dist](ad::Tape&, const auto& x) { return contract(cov_matrix(x[0], x[1], dist), 21); }),
                          std::vector<ad::Tensor>{ad::Tensor::Constant(1, 1, 0.5 + rng.uniform()),
                                                  ad::Tensor::Constant(1, 1, 0.05 + 0.5 * rng.uniform())});
  });
  add("vecchia_log_density", [](Rng& rng, int i) {
    const Index n = 4 + i % 9;
    auto g = std::make_shared<const NeighborGraph>(build_graph(10.0 * rng.uniform_matrix(n, 2), 3));
    return std::make_pair(TapeFn([g](ad::Tape&, const auto& x) { return vecchia_log_density(x[0], x[1], x[2], g); }),
                          std::vector<ad::Tensor>{rng.normal_matrix(n, 1),
                                                  ad::Tensor::Constant(1, 1, 0.5 + rng.uniform()),
                                                  ad::Tensor::Constant(1, 1, 0.1 + 0.5 * rng.uniform())});
  });
  add("column_transform", [](Rng& rng, int i) {
    const std::vector<SlotTransform> codes = {SlotTransform::Identity, SlotTransform::Positive,
                                              SlotTransform::Shape, SlotTransform::Positive};
    const PositiveTransform pos = i % 2 ? PositiveTransform::Exp : PositiveTransform::Softplus;
    return std::make_pair(TapeFn([codes, pos](ad::Tape&, const auto& x) { return contract(column_transform(x[0], codes, pos), 22); }),
                          std::vector<ad::Tensor>{(2.0 * rng.normal_matrix(3, 4)).eval()});
  });
  add("inv_gamma_quantile", [](Rng& rng, int) {
    const ad::Tensor u = rng.uniform_matrix(4, 1);
    return std::make_pair(TapeFn([u](ad::Tape&, const auto& x) { return contract(ad::log(inv_gamma_quantile(x[0], x[1], u)), 23); }),
                          std::vector<ad::Tensor>{(1.1 + 10.0 * rng.uniform_matrix(4, 1).array()).matrix(),
                                                  (0.1 + 3.0 * rng.uniform_matrix(4, 1).array()).matrix()});
  });
  return out;
}

std::vector<GradientCheck> log_joint_gradient_checks() {
  std::vector<GradientCheck> out;
  Rng rng(37);
  for (PriorMode mode : {PriorMode::DenseGp, PriorMode::Nngp}) {
    for (Family f : {Family::GaussianConditional, Family::GaussianMarginal, Family::Poisson}) {
      if (mode == PriorMode::Nngp && f == Family::GaussianMarginal) continue;
      GradientCheck c{to_string(f) + " / " + to_string(mode), 0.0, kGradientInstances};
      for (int k = 0; k < kGradientInstances; ++k) {
        const Index n = 7;
        const SpatialDataset d = random_dataset(rng, n, 1, f == Family::Poisson);
        const LogJoint lj(d, fixed_spec(f, 1), mode, 3);
        std::vector<ad::Tensor> xs{rng.normal_matrix(2, 1), ad::Tensor::Constant(1, 1, 0.5 + rng.uniform()),
                                   ad::Tensor::Constant(1, 1, 0.1 + rng.uniform())};
        const bool nug = has_nugget(f), lat = has_latent(f);
        if (nug) xs.push_back(ad::Tensor::Constant(1, 1, 0.3 + rng.uniform()));
        if (lat) xs.push_back((0.5 * rng.normal_matrix(n, 1)).eval());
        TapeFn fn = [&](ad::Tape&, const std::vector<ad::Var>& x) {
          ThetaVars v{x[0], x[1], std::nullopt, x[2], std::nullopt};
          std::size_t next = 3;
          if (nug) v.tau2 = x[next++];
          if (lat) v.w = x[next++];
          return lj(v);
        };
        c.worst = std::max(c.worst, gradient_error(fn, xs));
      }
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace sivi::testing
