#pragma once

// Semi-implicit variational family: an MLP maps Gaussian noise to the
// hyperparameters psi of a factorized conditional q(theta | psi); the
// surrogate lower bound mixes each draw's own conditional with K auxiliary
// ones.

#include "sivi/autodiff.hpp"
#include "sivi/models.hpp"
#include "sivi/random.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sivi {

enum class VarianceFamily { InverseGamma, LogNormal };
enum class PositiveTransform { Softplus, Exp };
enum class Optimizer { Adam, Sgd };

std::string to_string(VarianceFamily v);
std::string to_string(PositiveTransform t);
std::string to_string(Optimizer o);
VarianceFamily parse_variance_family(const std::string& s);
PositiveTransform parse_positive_transform(const std::string& s);
Optimizer parse_optimizer(const std::string& s);

struct GeneratorConfig {
  int noise_dim = 100;
  std::vector<int> hidden = {2048, 1500, 1000, 800, 600};
  PositiveTransform positive = PositiveTransform::Softplus;

  /// Reduced [128, 128] generator for CPU runs.
  static GeneratorConfig desk();
  void validate() const;
};

/// Parameters held at fixed values: no variational slots, no log q term.
struct FrozenParams {
  std::optional<double> sigma2;
  std::optional<double> tau2;
  std::optional<double> phi;
};

struct Slot {
  Index start = 0;
  Index size = 0;
};

enum class SlotTransform : int { Identity = 0, Positive = 1, Shape = 2 };

/// Column layout of psi. Variance slots hold (shape, scale) for the
/// inverse-gamma family or (mean, variance) of the log for the log-normal
/// family; phi holds (mean, variance) of log phi.
struct PsiLayout {
  Family family = Family::GaussianConditional;
  Index coef_count = 1;
  Index latent_count = 0;
  VarianceFamily variance_family = VarianceFamily::InverseGamma;
  FrozenParams frozen;

  Slot beta_mean, beta_var, sigma2, tau2, phi, w_mean, w_var;
  std::vector<SlotTransform> transforms;

  Index dim() const { return static_cast<Index>(transforms.size()); }
  bool learns_sigma2() const { return !frozen.sigma2; }
  bool learns_tau2() const { return has_nugget(family) && !frozen.tau2; }
  bool learns_phi() const { return !frozen.phi; }
  bool has_w() const { return latent_count > 0; }

  static PsiLayout make(Family family, Index p, Index n,
                        VarianceFamily variance_family = VarianceFamily::InverseGamma,
                        FrozenParams frozen = {});
};

/// Offset added to transformed inverse-gamma shapes so the conditional mean
/// stays finite.
inline constexpr double kShapeOffset = 1.01;

struct VariationalState {
  GeneratorConfig config;
  PsiLayout layout;
  /// W_0, b_0, W_1, b_1, ...; W_l is (in x out), b_l is (1 x out).
  std::vector<ad::Tensor> params;
  ad::AdamMoments moments;
  long step = 0;
};

/// He-initialized hidden layers; the output layer is scaled by 1e-3 and its
/// bias makes the initial psi reproduce the prior.
VariationalState init_state(const GeneratorConfig& config, const PsiLayout& layout,
                            const ModelSpec& spec, Rng& rng);

/// Raw output-layer bias matching the prior in every slot.
Eigen::RowVectorXd prior_raw_psi(const PsiLayout& layout, const ModelSpec& spec,
                                 PositiveTransform positive);

class GeneratorOverflow : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ElboOverflow : public std::runtime_error {
 public:
  ElboOverflow(Index j, const std::string& what) : std::runtime_error(what), j_(j) {}
  Index draw() const { return j_; }

 private:
  Index j_;
};

// Tape-level building blocks.

/// Applies the per-column slot transforms to raw generator output.
ad::Var column_transform(ad::Var raw, const std::vector<SlotTransform>& codes,
                         PositiveTransform positive);

/// x = scale / G where P(shape, G) = u; implicit reparameterization in shape.
ad::Var inv_gamma_quantile(ad::Var shape, ad::Var scale, const ad::Tensor& u);

/// Transformed psi (rows x dim) for a batch of noise rows.
ad::Var generate_psi(const std::vector<ad::Var>& params, ad::Var eps,
                     const VariationalState& state);

/// Per-component views of a psi batch.
struct PsiBatch {
  ad::Var beta_mean, beta_var;
  std::optional<ad::Var> sigma2_a, sigma2_b, tau2_a, tau2_b, phi_mean, phi_var;
  std::optional<ad::Var> w_mean, w_var;
};
PsiBatch split_psi(ad::Var psi, const PsiLayout& layout);

/// Standard noise for reparameterized theta draws, one row per draw. Variance
/// columns hold uniforms (inverse-gamma) or normals (log-normal).
struct ThetaNoise {
  ad::Tensor beta, sigma2, tau2, phi, w;
};
ThetaNoise draw_theta_noise(const PsiLayout& layout, Index rows, Rng& rng);

/// Learned components only; frozen ones are absent.
struct ThetaBatch {
  ad::Var beta;
  std::optional<ad::Var> sigma2, tau2, phi, w;
};
ThetaBatch sample_theta(const PsiBatch& psi, const ThetaNoise& noise,
                        const PsiLayout& layout);

/// log q(theta_j | psi_j) for matching rows: J x 1.
ad::Var log_q_rows(const ThetaBatch& theta, const PsiBatch& psi, const PsiLayout& layout);
/// log q(theta_j | psi_k) for all pairs: J x R.
ad::Var log_q_cross(const ThetaBatch& theta, const PsiBatch& psi, const PsiLayout& layout);

/// Row j of a batch as model-ready tape handles, frozen values as constants.
ThetaVars theta_row(const ThetaBatch& theta, Index j, const PsiLayout& layout);

struct ElboNoise {
  ad::Tensor eps;      // J x noise_dim
  ad::Tensor eps_aux;  // K x noise_dim
  ThetaNoise theta;
};
ElboNoise draw_elbo_noise(const VariationalState& state, Index J, Index K, Rng& rng);

ad::Var surrogate_elbo(const std::vector<ad::Var>& params, const VariationalState& state,
                       const LogJoint& log_joint, const ElboNoise& noise);
double surrogate_elbo(const VariationalState& state, const LogJoint& log_joint, Index J,
                      Index K, Rng& rng);

// Plain-value conveniences.

/// psi = g(eps; nu) for one noise vector.
Eigen::RowVectorXd sample_psi(const Eigen::RowVectorXd& eps, const VariationalState& state);
ThetaSample sample_theta(const Eigen::RowVectorXd& psi, const PsiLayout& layout, Rng& rng);
/// Theta from a transformed psi row and one row of standard noise; frozen
/// components take their fixed values.
ThetaSample theta_from_noise(const Eigen::RowVectorXd& psi, const ThetaNoise& noise,
                             const PsiLayout& layout);
/// Sum of the learned components' conditional log densities; -inf outside
/// the support.
double conditional_log_density(const ThetaSample& theta, const Eigen::RowVectorXd& psi,
                               const PsiLayout& layout);

struct TrainOptions {
  long iterations = 1000;
  Index J = 50;
  Index K = 1000;
  Optimizer optimizer = Optimizer::Adam;
  ad::AdamOptions adam;
  bool verify_replay = false;
  std::function<void(long, double)> progress;
};

struct TraceRow {
  long iteration = 0;
  double elbo = 0.0;
  double wall_ms = 0.0;
};

/// Gradient ascent on the surrogate bound; fresh noise every iteration.
std::vector<TraceRow> train(VariationalState& state, const LogJoint& log_joint,
                            const TrainOptions& options, Rng& rng);

struct PosteriorSamples {
  Family family = Family::GaussianConditional;
  Eigen::MatrixXd beta;  // m x (p+1)
  Eigen::VectorXd sigma2;
  std::optional<Eigen::VectorXd> tau2;
  Eigen::VectorXd phi;
  std::optional<Eigen::MatrixXd> w;  // m x n, input order

  Index size() const { return beta.rows(); }
  ThetaSample at(Index i) const;
};

PosteriorSamples draw_posterior(const VariationalState& state, Index m, Rng& rng);

/// Binary checkpoint; round-trips every double bit-exactly.
void save_checkpoint(const std::string& path, const VariationalState& state,
                     const std::string& metadata_json = "{}");
VariationalState load_checkpoint(const std::string& path, std::string* metadata_json = nullptr);

}  // namespace sivi
