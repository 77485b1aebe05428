#pragma once

// Run configuration and the fit / predict / score / replicate steps shared
// by the command-line tool and the acceptance suite.

#include "sivi/models.hpp"
#include "sivi/predict.hpp"
#include "sivi/scoring.hpp"
#include "sivi/simulate.hpp"
#include "sivi/variational.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sivi {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Scenario { Gaussian, Poisson, LargeField };
std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& s);

/// Every setting of a run. Defaults are the full-scale settings; desk()
/// swaps in the reduced generator and large_n() the large-data settings.
struct RunConfig {
  Family family = Family::GaussianConditional;
  PriorMode prior_mode = PriorMode::DenseGp;
  int max_neighbors = 10;

  GeneratorConfig generator;
  VarianceFamily variance_family = VarianceFamily::InverseGamma;
  FrozenParams frozen;
  long iterations = 1000;
  Index J = 50;
  Index K = 1000;
  double learning_rate = 1e-3;
  Optimizer optimizer = Optimizer::Adam;

  Index draws = 1000;
  double alpha = 0.05;

  Scenario scenario = Scenario::Gaussian;
  Index n = 70;
  Index n_validation = kDefaultValidation;
  double side = kDefaultSide;
  LargeFieldParams large_field;
  int replicates = 1;

  std::uint64_t seed = 1;

  void use_desk_generator() { generator = GeneratorConfig::desk(); }
  void use_large_n() {
    J = 10;
    K = 10;
    prior_mode = PriorMode::Nngp;
  }
  /// Throws ConfigError when settings are out of range or inconsistent.
  void validate() const;
  std::string to_json() const;
  /// Inverse of to_json; also accepts a manifest and reads its "config".
  static RunConfig from_json(const std::string& text);
};

/// Independent random streams of one run, all derived from the run seed.
enum class Stream : std::uint64_t { Simulate = 0, Split = 1, Init = 2, Train = 3, Posterior = 4, Predict = 5 };
Rng stream(std::uint64_t seed, Stream s);

struct FitResult {
  VariationalState state;
  std::vector<TraceRow> trace;
};

/// Builds the model for `train` and runs `iterations` training steps, from
/// a fresh generator or continuing `resume`.
FitResult fit(const SpatialDataset& train, const RunConfig& config,
              const VariationalState* resume = nullptr,
              const std::function<void(long, double)>& progress = {});

/// Posterior draws followed by predictive draws at the validation locations.
PredictiveDraws predict_validation(const VariationalState& state, const SpatialDataset& train,
                                   const SpatialDataset& validation, const RunConfig& config);

/// One simulated replicate, split into train and validation.
struct SimulatedReplicate {
  Split split;
  ThetaSample truth;
};
SimulatedReplicate simulate_replicate(const RunConfig& config, std::uint64_t seed);

/// Simulate, fit, predict and score replicate r with seed base + r, writing
/// every artifact under `dir`.
ScoreReport run_replicate(const RunConfig& config, int r, const std::filesystem::path& dir);

struct PooledSummary {
  std::vector<ScoreReport> replicates;
  double crps = 0.0, interval = 0.0, nlpd = 0.0, rmse = 0.0;
};

/// Runs all replicates on `threads` workers and writes per-replicate
/// directories plus pooled summary files.
PooledSummary run_replicates(const RunConfig& config, const std::filesystem::path& out,
                             int threads);

/// Worker count from SIVI_THREADS, or the hardware concurrency when unset.
int thread_count_from_env();

std::string replicate_dir_name(int r);

/// Manifest echoing the command, configuration and input hashes.
void write_manifest(const std::filesystem::path& path, const std::string& command,
                    const RunConfig& config, const std::vector<std::string>& inputs,
                    const std::string& extra_json = "{}");

std::string version();

}  // namespace sivi
