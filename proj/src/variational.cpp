#include "sivi/variational.hpp"

#include "sivi/special.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

namespace sivi {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double positive_value(double x, PositiveTransform t) {
  return t == PositiveTransform::Softplus ? softplus_value(x) : std::exp(x);
}

double positive_derivative(double x, PositiveTransform t) {
  return t == PositiveTransform::Softplus ? sigmoid(x) : std::exp(x);
}

double positive_inverse(double y, PositiveTransform t) {
  if (t == PositiveTransform::Exp) return std::log(y);
  return y > 30.0 ? y : y + std::log(-std::expm1(-y));
}

Slot take(Index& cursor, Index size, std::vector<SlotTransform>& codes, SlotTransform code) {
  Slot s{cursor, size};
  cursor += size;
  codes.insert(codes.end(), static_cast<std::size_t>(size), code);
  return s;
}

ad::Var cols(ad::Var x, Slot s) { return ad::block(x, 0, s.start, x.rows(), s.size); }
ad::Var cols(ad::Var x, Index start, Index n) { return ad::block(x, 0, start, x.rows(), n); }

// Broadcasts a J x 1 column or a 1 x R row to J x R.
ad::Var wide(ad::Var x, Index rows, Index cols_) { return ad::broadcast_to(x, rows, cols_); }

ad::Var reciprocal(ad::Var x) {
  return ad::cwise_div(x.tape().constant(ad::Tensor::Ones(x.rows(), x.cols())), x);
}

// Log-normal moment match for a positive quantity with the given mean and
// squared coefficient of variation.
std::pair<double, double> lognormal_match(double mean, double cv2) {
  const double s2 = std::log1p(cv2);
  return {std::log(mean) - 0.5 * s2, s2};
}

std::pair<double, double> invgamma_moments(const InvGamma& g) {
  const double mean = g.shape > 1.0 ? g.scale / (g.shape - 1.0) : g.scale;
  const double cv2 = 1.0 / std::max(g.shape - 2.0, 1.0);
  return {mean, cv2};
}

}  // namespace

std::string to_string(VarianceFamily v) {
  return v == VarianceFamily::InverseGamma ? "inverse-gamma" : "log-normal";
}
std::string to_string(PositiveTransform t) {
  return t == PositiveTransform::Softplus ? "softplus" : "exp";
}
std::string to_string(Optimizer o) { return o == Optimizer::Adam ? "adam" : "sgd"; }

VarianceFamily parse_variance_family(const std::string& s) {
  if (s == "inverse-gamma") return VarianceFamily::InverseGamma;
  if (s == "log-normal") return VarianceFamily::LogNormal;
  throw std::invalid_argument("unknown variance family '" + s + "'");
}
PositiveTransform parse_positive_transform(const std::string& s) {
  if (s == "softplus") return PositiveTransform::Softplus;
  if (s == "exp") return PositiveTransform::Exp;
  throw std::invalid_argument("unknown positive transform '" + s + "'");
}
Optimizer parse_optimizer(const std::string& s) {
  if (s == "adam") return Optimizer::Adam;
  if (s == "sgd") return Optimizer::Sgd;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

GeneratorConfig GeneratorConfig::desk() {
  GeneratorConfig c;
  c.hidden = {128, 128};
  return c;
}

void GeneratorConfig::validate() const {
  if (noise_dim < 1) throw std::invalid_argument("noise_dim must be positive");
  for (int h : hidden)
    if (h < 1) throw std::invalid_argument("hidden layer sizes must be positive");
}

PsiLayout PsiLayout::make(Family family, Index p, Index n, VarianceFamily variance_family,
                          FrozenParams frozen) {
  if (p < 0) throw std::invalid_argument("covariate count must be non-negative");
  PsiLayout l;
  l.family = family;
  l.coef_count = p + 1;
  l.latent_count = has_latent(family) ? n : 0;
  l.variance_family = variance_family;
  if (!has_nugget(family)) frozen.tau2.reset();
  l.frozen = frozen;
  if (has_latent(family) && n < 1) throw std::invalid_argument("latent field needs n >= 1");

  const bool ig = variance_family == VarianceFamily::InverseGamma;
  const SlotTransform first = ig ? SlotTransform::Shape : SlotTransform::Identity;
  Index c = 0;
  auto& t = l.transforms;
  l.beta_mean = take(c, l.coef_count, t, SlotTransform::Identity);
  l.beta_var = take(c, l.coef_count, t, SlotTransform::Positive);
  if (l.learns_sigma2()) {
    l.sigma2 = take(c, 1, t, first);
    take(c, 1, t, SlotTransform::Positive);
    l.sigma2.size = 2;
  }
  if (l.learns_tau2()) {
    l.tau2 = take(c, 1, t, first);
    take(c, 1, t, SlotTransform::Positive);
    l.tau2.size = 2;
  }
  if (l.learns_phi()) {
    l.phi = take(c, 1, t, SlotTransform::Identity);
    take(c, 1, t, SlotTransform::Positive);
    l.phi.size = 2;
  }
  if (l.has_w()) {
    l.w_mean = take(c, l.latent_count, t, SlotTransform::Identity);
    l.w_var = take(c, 1, t, SlotTransform::Positive);
  }
  return l;
}

Eigen::RowVectorXd prior_raw_psi(const PsiLayout& layout, const ModelSpec& spec,
                                 PositiveTransform positive) {
  const auto& pr = spec.priors;
  if (pr.beta_mean.size() != layout.coef_count)
    throw std::invalid_argument("prior and layout disagree on the coefficient count");
  Eigen::RowVectorXd raw = Eigen::RowVectorXd::Zero(layout.dim());
  auto pos = [&](double y) { return positive_inverse(y, positive); };
  for (Index k = 0; k < layout.coef_count; ++k) {
    raw(layout.beta_mean.start + k) = pr.beta_mean(k);
    raw(layout.beta_var.start + k) = pos(pr.beta_var(k));
  }
  auto variance_slot = [&](Slot s, const InvGamma& g) {
    if (layout.variance_family == VarianceFamily::InverseGamma) {
      raw(s.start) = pos(std::max(g.shape - kShapeOffset, 0.05));
      raw(s.start + 1) = pos(g.scale);
    } else {
      auto [mean, cv2] = invgamma_moments(g);
      auto [mu, s2] = lognormal_match(mean, cv2);
      raw(s.start) = mu;
      raw(s.start + 1) = pos(s2);
    }
  };
  if (layout.learns_sigma2()) variance_slot(layout.sigma2, pr.sigma2);
  if (layout.learns_tau2()) variance_slot(layout.tau2, pr.tau2);
  if (layout.learns_phi()) {
    auto [mean, cv2] = invgamma_moments(pr.phi);
    auto [mu, s2] = lognormal_match(mean, cv2);
    raw(layout.phi.start) = mu;
    raw(layout.phi.start + 1) = pos(s2);
  }
  if (layout.has_w()) {
    const double sill =
        layout.frozen.sigma2 ? *layout.frozen.sigma2 : invgamma_moments(pr.sigma2).first;
    raw(layout.w_var.start) = pos(sill);
  }
  return raw;
}

VariationalState init_state(const GeneratorConfig& config, const PsiLayout& layout,
                            const ModelSpec& spec, Rng& rng) {
  config.validate();
  VariationalState s;
  s.config = config;
  s.layout = layout;
  Index in = config.noise_dim;
  std::vector<Index> widths(config.hidden.begin(), config.hidden.end());
  widths.push_back(layout.dim());
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const Index out = widths[l];
    const double sd = std::sqrt(2.0 / static_cast<double>(in));
    ad::Tensor w = sd * rng.normal_matrix(in, out);
    ad::Tensor b = ad::Tensor::Zero(1, out);
    if (l + 1 == widths.size()) {
      w *= 1e-3;
      b = prior_raw_psi(layout, spec, config.positive);
    }
    s.params.push_back(std::move(w));
    s.params.push_back(std::move(b));
    in = out;
  }
  return s;
}

ad::Var column_transform(ad::Var raw, const std::vector<SlotTransform>& codes,
                         PositiveTransform positive) {
  if (static_cast<std::size_t>(raw.cols()) != codes.size())
    throw ad::ShapeError("column_transform: code count differs from column count");
  return raw.tape().record(
      ad::OpKind::ColumnTransform, {raw},
      [codes, positive](const auto& in) -> ad::Tensor {
        const ad::Tensor& x = *in[0];
        ad::Tensor y(x.rows(), x.cols());
        for (Index c = 0; c < x.cols(); ++c) {
          switch (codes[c]) {
            case SlotTransform::Identity:
              y.col(c) = x.col(c);
              break;
            case SlotTransform::Positive:
              y.col(c) = x.col(c).unaryExpr([&](double v) { return positive_value(v, positive); });
              break;
            case SlotTransform::Shape:
              y.col(c) = x.col(c).unaryExpr(
                  [&](double v) { return positive_value(v, positive) + kShapeOffset; });
              break;
          }
        }
        return y;
      },
      [codes, positive](const ad::Tensor& g, const ad::Tensor&, const auto& in, const auto& ga) {
        if (!ga[0]) return;
        const ad::Tensor& x = *in[0];
        for (Index c = 0; c < x.cols(); ++c) {
          if (codes[c] == SlotTransform::Identity) {
            ga[0]->col(c) += g.col(c);
          } else {
            for (Index r = 0; r < x.rows(); ++r)
              (*ga[0])(r, c) += g(r, c) * positive_derivative(x(r, c), positive);
          }
        }
      });
}

ad::Var inv_gamma_quantile(ad::Var shape, ad::Var scale, const ad::Tensor& u) {
  if (shape.cols() != 1 || scale.rows() != shape.rows() || scale.cols() != 1 ||
      u.rows() != shape.rows() || u.cols() != 1)
    throw ad::ShapeError("inv_gamma_quantile: expects matching column vectors");
  return shape.tape().record(
      ad::OpKind::InvGammaQuantile, {shape, scale},
      [u](const auto& in) -> ad::Tensor {
        const ad::Tensor& a = *in[0];
        const ad::Tensor& b = *in[1];
        ad::Tensor x(a.rows(), 1);
        for (Index i = 0; i < a.rows(); ++i)
          x(i, 0) = b(i, 0) / special::gamma_p_inv(a(i, 0), u(i, 0));
        return x;
      },
      [u](const ad::Tensor& g, const ad::Tensor& x, const auto& in, const auto& ga) {
        const ad::Tensor& a = *in[0];
        const ad::Tensor& b = *in[1];
        for (Index i = 0; i < a.rows(); ++i) {
          const double gq = special::gamma_p_inv(a(i, 0), u(i, 0));
          if (ga[0]) {
            // P(a, G(a)) = u  =>  dG/da = -dP/da / density(a, G).
            const double dg = -special::gamma_p_dshape(a(i, 0), gq) /
                              special::gamma_density(a(i, 0), gq);
            (*ga[0])(i, 0) += g(i, 0) * (-x(i, 0) / gq) * dg;
          }
          if (ga[1]) (*ga[1])(i, 0) += g(i, 0) / gq;
          (void)b;
        }
      });
}

ad::Var generate_psi(const std::vector<ad::Var>& params, ad::Var eps,
                     const VariationalState& state) {
  if (params.size() != state.params.size())
    throw std::invalid_argument("generator parameter count mismatch");
  if (eps.cols() != state.config.noise_dim)
    throw ad::ShapeError("noise width differs from noise_dim");
  if (!eps.value().allFinite()) throw GeneratorOverflow("generator overflow: non-finite noise");
  const Index rows = eps.rows();
  ad::Var h = eps;
  const std::size_t layers = params.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    ad::Var w = params[2 * l];
    ad::Var b = params[2 * l + 1];
    h = ad::matmul(h, w) + ad::broadcast_to(b, rows, w.cols());
    if (l + 1 < layers) h = ad::relu(h);
  }
  if (!h.value().allFinite()) throw GeneratorOverflow("generator overflow");
  return column_transform(h, state.layout.transforms, state.config.positive);
}

PsiBatch split_psi(ad::Var psi, const PsiLayout& l) {
  if (psi.cols() != l.dim()) throw ad::ShapeError("psi width differs from layout");
  PsiBatch p;
  p.beta_mean = cols(psi, l.beta_mean);
  p.beta_var = cols(psi, l.beta_var);
  if (l.learns_sigma2()) {
    p.sigma2_a = cols(psi, l.sigma2.start, 1);
    p.sigma2_b = cols(psi, l.sigma2.start + 1, 1);
  }
  if (l.learns_tau2()) {
    p.tau2_a = cols(psi, l.tau2.start, 1);
    p.tau2_b = cols(psi, l.tau2.start + 1, 1);
  }
  if (l.learns_phi()) {
    p.phi_mean = cols(psi, l.phi.start, 1);
    p.phi_var = cols(psi, l.phi.start + 1, 1);
  }
  if (l.has_w()) {
    p.w_mean = cols(psi, l.w_mean);
    p.w_var = cols(psi, l.w_var);
  }
  return p;
}

ThetaNoise draw_theta_noise(const PsiLayout& l, Index rows, Rng& rng) {
  const bool ig = l.variance_family == VarianceFamily::InverseGamma;
  auto variance_noise = [&]() {
    return ig ? rng.uniform_matrix(rows, 1) : rng.normal_matrix(rows, 1);
  };
  ThetaNoise n;
  n.beta = rng.normal_matrix(rows, l.coef_count);
  if (l.learns_sigma2()) n.sigma2 = variance_noise();
  if (l.learns_tau2()) n.tau2 = variance_noise();
  if (l.learns_phi()) n.phi = rng.normal_matrix(rows, 1);
  if (l.has_w()) n.w = rng.normal_matrix(rows, l.latent_count);
  return n;
}

ThetaBatch sample_theta(const PsiBatch& psi, const ThetaNoise& noise, const PsiLayout& l) {
  ad::Tape& tape = psi.beta_mean.tape();
  ThetaBatch t;
  t.beta = psi.beta_mean + ad::cwise_mul(ad::sqrt(psi.beta_var), tape.constant(noise.beta));
  auto variance = [&](ad::Var a, ad::Var b, const ad::Tensor& z) {
    if (l.variance_family == VarianceFamily::InverseGamma) return inv_gamma_quantile(a, b, z);
    return ad::exp(a + ad::cwise_mul(ad::sqrt(b), tape.constant(z)));
  };
  if (l.learns_sigma2()) t.sigma2 = variance(*psi.sigma2_a, *psi.sigma2_b, noise.sigma2);
  if (l.learns_tau2()) t.tau2 = variance(*psi.tau2_a, *psi.tau2_b, noise.tau2);
  if (l.learns_phi())
    t.phi = ad::exp(*psi.phi_mean + ad::cwise_mul(ad::sqrt(*psi.phi_var), tape.constant(noise.phi)));
  if (l.has_w()) {
    const Index rows = noise.w.rows();
    ad::Var sd = ad::broadcast_to(ad::sqrt(*psi.w_var), rows, l.latent_count);
    t.w = *psi.w_mean + ad::cwise_mul(sd, tape.constant(noise.w));
  }
  return t;
}

namespace {

// Row-matched log densities, all J x 1.
ad::Var invgamma_rows(ad::Var x, ad::Var a, ad::Var b) {
  return ad::cwise_mul(a, ad::log(b)) - ad::lgamma(a) -
         ad::cwise_mul(a + 1.0, ad::log(x)) - ad::cwise_div(b, x);
}

ad::Var lognormal_rows(ad::Var x, ad::Var mu, ad::Var s2) {
  ad::Var lx = ad::log(x);
  return -lx - ad::scale(ad::log(s2), 0.5) -
         ad::scale(ad::cwise_div(ad::square(lx - mu), s2), 0.5) + (-0.5 * kLog2Pi);
}

ad::Var variance_rows(ad::Var x, ad::Var a, ad::Var b, VarianceFamily f) {
  return f == VarianceFamily::InverseGamma ? invgamma_rows(x, a, b) : lognormal_rows(x, a, b);
}

// Pairwise log densities, J x R. Column vectors x (J x 1), parameters R x 1.
ad::Var invgamma_cross(ad::Var x, ad::Var a, ad::Var b) {
  const Index J = x.rows(), R = a.rows();
  ad::Var lx = ad::log(x);
  ad::Var norm = ad::transpose(ad::cwise_mul(a, ad::log(b)) - ad::lgamma(a));
  return wide(norm, J, R) - ad::matmul(lx, ad::transpose(a)) - wide(lx, J, R) -
         ad::matmul(reciprocal(x), ad::transpose(b));
}

ad::Var gaussian_cross(ad::Var x, ad::Var mu, ad::Var s2) {
  // Sum over columns of log N(x_jc; mu_kc, s2_kc) by expanding the square.
  const Index J = x.rows(), R = mu.rows();
  const double c = static_cast<double>(x.cols());
  ad::Var prec = reciprocal(s2);
  ad::Var quad = ad::matmul(ad::square(x), ad::transpose(prec)) -
                 ad::scale(ad::matmul(x, ad::transpose(ad::cwise_mul(mu, prec))), 2.0) +
                 wide(ad::transpose(ad::row_sum(ad::cwise_mul(ad::square(mu), prec))), J, R);
  ad::Var logdet = wide(ad::transpose(ad::row_sum(ad::log(s2))), J, R);
  return ad::scale(quad + logdet, -0.5) + (-0.5 * c * kLog2Pi);
}

ad::Var lognormal_cross(ad::Var x, ad::Var mu, ad::Var s2) {
  ad::Var lx = ad::log(x);
  return gaussian_cross(lx, mu, s2) - wide(lx, x.rows(), mu.rows());
}

ad::Var variance_cross(ad::Var x, ad::Var a, ad::Var b, VarianceFamily f) {
  return f == VarianceFamily::InverseGamma ? invgamma_cross(x, a, b) : lognormal_cross(x, a, b);
}

// Isotropic Gaussian over n columns with one variance per psi row.
ad::Var latent_cross(ad::Var w, ad::Var mu, ad::Var var) {
  const Index J = w.rows(), R = mu.rows();
  const double n = static_cast<double>(w.cols());
  ad::Var prec_row = ad::transpose(reciprocal(var));  // 1 x R
  ad::Var quad = ad::matmul(ad::row_sum(ad::square(w)), prec_row) -
                 ad::scale(ad::cwise_mul(ad::matmul(w, ad::transpose(mu)), wide(prec_row, J, R)),
                           2.0) +
                 wide(ad::cwise_mul(ad::transpose(ad::row_sum(ad::square(mu))), prec_row), J, R);
  ad::Var logdet = wide(ad::scale(ad::transpose(ad::log(var)), n), J, R);
  return ad::scale(quad + logdet, -0.5) + (-0.5 * n * kLog2Pi);
}

}  // namespace

ad::Var log_q_rows(const ThetaBatch& theta, const PsiBatch& psi, const PsiLayout& l) {
  const double p1 = static_cast<double>(l.coef_count);
  ad::Var total =
      ad::scale(ad::row_sum(ad::log(psi.beta_var) +
                            ad::cwise_div(ad::square(theta.beta - psi.beta_mean), psi.beta_var)),
                -0.5) +
      (-0.5 * p1 * kLog2Pi);
  if (l.learns_sigma2())
    total = total + variance_rows(*theta.sigma2, *psi.sigma2_a, *psi.sigma2_b, l.variance_family);
  if (l.learns_tau2())
    total = total + variance_rows(*theta.tau2, *psi.tau2_a, *psi.tau2_b, l.variance_family);
  if (l.learns_phi()) total = total + lognormal_rows(*theta.phi, *psi.phi_mean, *psi.phi_var);
  if (l.has_w()) {
    const double n = static_cast<double>(l.latent_count);
    ad::Var ss = ad::row_sum(ad::square(*theta.w - *psi.w_mean));
    total = total - ad::scale(ad::log(*psi.w_var), 0.5 * n) -
            ad::scale(ad::cwise_div(ss, *psi.w_var), 0.5) + (-0.5 * n * kLog2Pi);
  }
  return total;
}

ad::Var log_q_cross(const ThetaBatch& theta, const PsiBatch& psi, const PsiLayout& l) {
  ad::Var total = gaussian_cross(theta.beta, psi.beta_mean, psi.beta_var);
  if (l.learns_sigma2())
    total = total + variance_cross(*theta.sigma2, *psi.sigma2_a, *psi.sigma2_b, l.variance_family);
  if (l.learns_tau2())
    total = total + variance_cross(*theta.tau2, *psi.tau2_a, *psi.tau2_b, l.variance_family);
  if (l.learns_phi()) total = total + lognormal_cross(*theta.phi, *psi.phi_mean, *psi.phi_var);
  if (l.has_w()) total = total + latent_cross(*theta.w, *psi.w_mean, *psi.w_var);
  return total;
}

ThetaVars theta_row(const ThetaBatch& theta, Index j, const PsiLayout& l) {
  ad::Tape& tape = theta.beta.tape();
  auto scalar = [&](const std::optional<ad::Var>& v, const std::optional<double>& fixed) {
    return v ? ad::block(*v, j, 0, 1, 1) : tape.scalar_constant(*fixed);
  };
  ThetaVars v;
  v.beta = ad::transpose(ad::row(theta.beta, j));
  v.sigma2 = scalar(theta.sigma2, l.frozen.sigma2);
  if (has_nugget(l.family)) v.tau2 = scalar(theta.tau2, l.frozen.tau2);
  v.phi = scalar(theta.phi, l.frozen.phi);
  if (l.has_w()) v.w = ad::transpose(ad::row(*theta.w, j));
  return v;
}

ElboNoise draw_elbo_noise(const VariationalState& state, Index J, Index K, Rng& rng) {
  if (J < 1) throw std::invalid_argument("J must be at least 1");
  if (K < 0) throw std::invalid_argument("K must be non-negative");
  ElboNoise n;
  n.eps = rng.normal_matrix(J, state.config.noise_dim);
  n.eps_aux = rng.normal_matrix(K, state.config.noise_dim);
  n.theta = draw_theta_noise(state.layout, J, rng);
  return n;
}

ad::Var surrogate_elbo(const std::vector<ad::Var>& params, const VariationalState& state,
                       const LogJoint& log_joint, const ElboNoise& noise) {
  ad::Tape& tape = params.front().tape();
  const PsiLayout& l = state.layout;
  const Index J = noise.eps.rows();
  const Index K = noise.eps_aux.rows();
  const Index D = l.dim();
  ad::Tensor eps(J + K, state.config.noise_dim);
  eps.topRows(J) = noise.eps;
  eps.bottomRows(K) = noise.eps_aux;
  ad::Var psi_all = generate_psi(params, tape.constant(std::move(eps)), state);
  PsiBatch own = split_psi(ad::block(psi_all, 0, 0, J, D), l);
  ThetaBatch theta = sample_theta(own, noise.theta, l);

  std::vector<ad::Var> logp;
  logp.reserve(static_cast<std::size_t>(J));
  for (Index j = 0; j < J; ++j) logp.push_back(log_joint(theta_row(theta, j, l)));
  ad::Var logp_col = ad::transpose(ad::concat_cols(logp));

  ad::Var log_mix = log_q_rows(theta, own, l);
  if (K > 0) {
    PsiBatch aux = split_psi(ad::block(psi_all, J, 0, K, D), l);
    ad::Var all = ad::concat_cols({log_mix, log_q_cross(theta, aux, l)});
    log_mix = ad::logsumexp_rows(all) + (-std::log(static_cast<double>(K + 1)));
  }
  ad::Var terms = logp_col - log_mix;
  for (Index j = 0; j < J; ++j)
    if (!std::isfinite(terms.value()(j, 0)))
      throw ElboOverflow(j, "elbo overflow at draw " + std::to_string(j + 1));
  return ad::scale(ad::sum(terms), 1.0 / static_cast<double>(J));
}

double surrogate_elbo(const VariationalState& state, const LogJoint& log_joint, Index J, Index K,
                      Rng& rng) {
  ElboNoise noise = draw_elbo_noise(state, J, K, rng);
  ad::Tape tape;
  std::vector<ad::Var> params;
  for (const auto& p : state.params) params.push_back(tape.constant(p));
  return surrogate_elbo(params, state, log_joint, noise).item();
}

Eigen::RowVectorXd sample_psi(const Eigen::RowVectorXd& eps, const VariationalState& state) {
  ad::Tape tape;
  std::vector<ad::Var> params;
  for (const auto& p : state.params) params.push_back(tape.constant(p));
  return generate_psi(params, tape.constant(eps), state).value();
}

ThetaSample theta_from_noise(const Eigen::RowVectorXd& psi, const ThetaNoise& noise,
                             const PsiLayout& l) {
  ad::Tape tape;
  PsiBatch pb = split_psi(tape.constant(psi), l);
  ThetaBatch tb = sample_theta(pb, noise, l);
  ThetaSample t;
  t.beta = tb.beta.value().transpose();
  t.sigma2 = tb.sigma2 ? tb.sigma2->item() : *l.frozen.sigma2;
  if (has_nugget(l.family)) t.tau2 = tb.tau2 ? tb.tau2->item() : *l.frozen.tau2;
  t.phi = tb.phi ? tb.phi->item() : *l.frozen.phi;
  if (l.has_w()) t.w = tb.w->value().transpose();
  return t;
}

ThetaSample sample_theta(const Eigen::RowVectorXd& psi, const PsiLayout& layout, Rng& rng) {
  return theta_from_noise(psi, draw_theta_noise(layout, 1, rng), layout);
}

double conditional_log_density(const ThetaSample& theta, const Eigen::RowVectorXd& psi,
                               const PsiLayout& l) {
  if (theta.beta.size() != l.coef_count) throw std::invalid_argument("theta has wrong beta length");
  if (l.learns_sigma2() && !(theta.sigma2 > 0.0)) return kNegInf;
  if (l.learns_tau2() && !(theta.tau2 && *theta.tau2 > 0.0)) return kNegInf;
  if (l.learns_phi() && !(theta.phi > 0.0)) return kNegInf;
  if (l.has_w() && (!theta.w || theta.w->size() != l.latent_count))
    throw std::invalid_argument("theta has wrong latent length");
  ad::Tape tape;
  PsiBatch pb = split_psi(tape.constant(psi), l);
  ThetaBatch tb;
  tb.beta = tape.constant(theta.beta.transpose());
  if (l.learns_sigma2()) tb.sigma2 = tape.scalar_constant(theta.sigma2);
  if (l.learns_tau2()) tb.tau2 = tape.scalar_constant(*theta.tau2);
  if (l.learns_phi()) tb.phi = tape.scalar_constant(theta.phi);
  if (l.has_w()) tb.w = tape.constant(theta.w->transpose());
  return log_q_rows(tb, pb, l).item();
}

std::vector<TraceRow> train(VariationalState& state, const LogJoint& log_joint,
                            const TrainOptions& options, Rng& rng) {
  if (options.iterations < 0) throw std::invalid_argument("iterations must be non-negative");
  std::vector<TraceRow> trace;
  trace.reserve(static_cast<std::size_t>(options.iterations));
  const auto start = std::chrono::steady_clock::now();
  for (long it = 1; it <= options.iterations; ++it) {
    ElboNoise noise = draw_elbo_noise(state, options.J, options.K, rng);
    ad::Tape tape;
    std::vector<ad::Var> params;
    params.reserve(state.params.size());
    for (const auto& p : state.params) params.push_back(tape.leaf(p));
    ad::Var elbo = surrogate_elbo(params, state, log_joint, noise);
    ad::GradientMap g = ad::backward(tape, elbo, options.verify_replay);
    std::vector<ad::Tensor> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.push_back(g[p]);
    const long step = state.step + 1;
    if (options.optimizer == Optimizer::Adam)
      ad::adam_step(state.params, grads, state.moments, step, options.adam);
    else
      ad::sgd_step(state.params, grads, step, options.adam.learning_rate);
    for (const auto& p : state.params)
      if (!p.allFinite())
        throw ad::Diverged(step, "diverged at iteration " + std::to_string(step));
    state.step = step;
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    trace.push_back({it, elbo.item(), ms});
    if (options.progress) options.progress(it, elbo.item());
  }
  return trace;
}

ThetaSample PosteriorSamples::at(Index i) const {
  ThetaSample t;
  t.beta = beta.row(i).transpose();
  t.sigma2 = sigma2(i);
  if (tau2) t.tau2 = (*tau2)(i);
  t.phi = phi(i);
  if (w) t.w = w->row(i).transpose();
  return t;
}

PosteriorSamples draw_posterior(const VariationalState& state, Index m, Rng& rng) {
  if (m < 1) throw std::invalid_argument("posterior draw count must be at least 1");
  const PsiLayout& l = state.layout;
  PosteriorSamples out;
  out.family = l.family;
  out.beta.resize(m, l.coef_count);
  out.sigma2.resize(m);
  out.phi.resize(m);
  if (has_nugget(l.family)) out.tau2 = Eigen::VectorXd(m);
  if (l.has_w()) out.w = Eigen::MatrixXd(m, l.latent_count);
  const Index batch = 64;
  for (Index start = 0; start < m; start += batch) {
    const Index rows = std::min(batch, m - start);
    ad::Tape tape;
    std::vector<ad::Var> params;
    for (const auto& p : state.params) params.push_back(tape.constant(p));
    ad::Var psi = generate_psi(params, tape.constant(rng.normal_matrix(rows, state.config.noise_dim)),
                               state);
    ThetaBatch t = sample_theta(split_psi(psi, l), draw_theta_noise(l, rows, rng), l);
    out.beta.middleRows(start, rows) = t.beta.value();
    auto fill = [&](Eigen::VectorXd& dst, const std::optional<ad::Var>& v,
                    const std::optional<double>& fixed) {
      if (v)
        dst.segment(start, rows) = v->value().col(0);
      else
        dst.segment(start, rows).setConstant(*fixed);
    };
    fill(out.sigma2, t.sigma2, l.frozen.sigma2);
    fill(out.phi, t.phi, l.frozen.phi);
    if (out.tau2) fill(*out.tau2, t.tau2, l.frozen.tau2);
    if (out.w) out.w->middleRows(start, rows) = t.w->value();
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'S', 'I', 'V', 'I', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

void write_tensor(std::ofstream& out, const ad::Tensor& t) {
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * t.size()));
}

void read_tensor(std::ifstream& in, ad::Tensor& t) {
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(sizeof(double) * t.size()));
  if (!in) throw std::runtime_error("checkpoint truncated");
}

}  // namespace

void save_checkpoint(const std::string& path, const VariationalState& state,
                     const std::string& metadata_json) {
  const PsiLayout& l = state.layout;
  nlohmann::json h;
  h["generator"] = {{"noise_dim", state.config.noise_dim},
                    {"hidden", state.config.hidden},
                    {"positive", to_string(state.config.positive)}};
  h["layout"] = {{"family", to_string(l.family)},
                 {"p", l.coef_count - 1},
                 {"n", l.latent_count},
                 {"variance_family", to_string(l.variance_family)},
                 {"frozen",
                  {{"sigma2", optional_json(l.frozen.sigma2)},
                   {"tau2", optional_json(l.frozen.tau2)},
                   {"phi", optional_json(l.frozen.phi)}}}};
  h["step"] = state.step;
  h["has_moments"] = !state.moments.first.empty();
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : state.params) shapes.push_back({p.rows(), p.cols()});
  h["shapes"] = shapes;
  h["metadata"] = nlohmann::json::parse(metadata_json);
  const std::string header = h.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof(kCheckpointVersion));
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(len));
  for (const auto& p : state.params) write_tensor(out, p);
  for (const auto& p : state.moments.first) write_tensor(out, p);
  for (const auto& p : state.moments.second) write_tensor(out, p);
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

VariationalState load_checkpoint(const std::string& path, std::string* metadata_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("'" + path + "' is not a checkpoint");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint truncated");
  const nlohmann::json h = nlohmann::json::parse(header);

  VariationalState s;
  s.config.noise_dim = h["generator"]["noise_dim"].get<int>();
  s.config.hidden = h["generator"]["hidden"].get<std::vector<int>>();
  s.config.positive = parse_positive_transform(h["generator"]["positive"].get<std::string>());
  const auto& lj = h["layout"];
  FrozenParams frozen{optional_from(lj["frozen"]["sigma2"]), optional_from(lj["frozen"]["tau2"]),
                      optional_from(lj["frozen"]["phi"])};
  s.layout = PsiLayout::make(parse_family(lj["family"].get<std::string>()), lj["p"].get<Index>(),
                             lj["n"].get<Index>(),
                             parse_variance_family(lj["variance_family"].get<std::string>()),
                             frozen);
  s.step = h["step"].get<long>();
  for (const auto& shape : h["shapes"]) {
    ad::Tensor t(shape[0].get<Index>(), shape[1].get<Index>());
    read_tensor(in, t);
    s.params.push_back(std::move(t));
  }
  if (h["has_moments"].get<bool>()) {
    for (auto* bank : {&s.moments.first, &s.moments.second})
      for (const auto& p : s.params) {
        ad::Tensor t(p.rows(), p.cols());
        read_tensor(in, t);
        bank->push_back(std::move(t));
      }
  }
  if (metadata_json) *metadata_json = h["metadata"].dump();
  return s;
}

}  // namespace sivi
