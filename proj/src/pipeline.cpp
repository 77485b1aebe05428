#include "sivi/pipeline.hpp"

#include "sivi/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#ifndef SIVI_VERSION
#define SIVI_VERSION "0.0.0"
#endif

namespace sivi {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::Gaussian: return "gaussian";
    case Scenario::Poisson: return "poisson";
    case Scenario::LargeField: return "large-field";
  }
  return "?";
}

Scenario parse_scenario(const std::string& s) {
  if (s == "gaussian") return Scenario::Gaussian;
  if (s == "poisson") return Scenario::Poisson;
  if (s == "large-field") return Scenario::LargeField;
  throw ConfigError("unknown scenario '" + s + "'");
}

std::string version() { return SIVI_VERSION; }

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

bool positive_finite(double v) { return v > 0.0 && std::isfinite(v); }

}  // namespace

void RunConfig::validate() const {
  require(max_neighbors >= 1, "max-neighbors must be at least 1");
  require(!(family == Family::GaussianMarginal && prior_mode == PriorMode::Nngp),
          "the marginal formulation requires the dense-gp prior");
  try {
    generator.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  require(iterations >= 0, "iterations must be non-negative");
  require(J >= 1, "J must be at least 1");
  require(K >= 0, "K must be non-negative");
  require(positive_finite(learning_rate), "learning-rate must be positive");
  require(draws >= 1, "draws must be at least 1");
  require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
  require(n >= 2, "n must be at least 2");
  require(n_validation >= 1 && n_validation < n, "validation size must lie in [1, n)");
  require(positive_finite(side), "side must be positive");
  require(replicates >= 1, "replicates must be at least 1");
  require(!(frozen.tau2 && family == Family::Poisson), "the Poisson family has no nugget");
  for (const auto& v : {frozen.sigma2, frozen.tau2, frozen.phi})
    require(!v || positive_finite(*v), "fixed parameter values must be positive");
  require(positive_finite(large_field.sigma2) && positive_finite(large_field.phi) &&
              large_field.tau2 >= 0.0 && std::isfinite(large_field.mean) &&
              large_field.max_neighbors >= 1,
          "invalid large-field parameters");
}

std::string RunConfig::to_json() const {
  ojson j;
  j["family"] = sivi::to_string(family);
  j["prior_mode"] = sivi::to_string(prior_mode);
  j["max_neighbors"] = max_neighbors;
  j["noise_dim"] = generator.noise_dim;
  j["hidden"] = generator.hidden;
  j["positive_transform"] = sivi::to_string(generator.positive);
  j["variance_family"] = sivi::to_string(variance_family);
  auto opt = [](const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); };
  j["fixed"] = {{"sigma2", opt(frozen.sigma2)}, {"tau2", opt(frozen.tau2)}, {"phi", opt(frozen.phi)}};
  j["iterations"] = iterations;
  j["J"] = J;
  j["K"] = K;
  j["learning_rate"] = learning_rate;
  j["optimizer"] = sivi::to_string(optimizer);
  j["draws"] = draws;
  j["alpha"] = alpha;
  j["scenario"] = sivi::to_string(scenario);
  j["n"] = n;
  j["n_validation"] = n_validation;
  j["side"] = side;
  j["large_field"] = {{"mean", large_field.mean},
                      {"sigma2", large_field.sigma2},
                      {"phi", large_field.phi},
                      {"tau2", large_field.tau2},
                      {"max_neighbors", large_field.max_neighbors}};
  j["replicates"] = replicates;
  j["seed"] = seed;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  RunConfig c;
  try {
    const ojson j = ojson::parse(text);
    const ojson& cfg = j.contains("config") ? j.at("config") : j;
    c.family = parse_family(cfg.at("family").get<std::string>());
    c.prior_mode = parse_prior_mode(cfg.at("prior_mode").get<std::string>());
    c.max_neighbors = cfg.at("max_neighbors").get<int>();
    c.generator.noise_dim = cfg.at("noise_dim").get<int>();
    c.generator.hidden = cfg.at("hidden").get<std::vector<int>>();
    c.generator.positive = parse_positive_transform(cfg.at("positive_transform").get<std::string>());
    c.variance_family = parse_variance_family(cfg.at("variance_family").get<std::string>());
    const ojson& fixed = cfg.at("fixed");
    auto opt = [&](const char* k) {
      return fixed.at(k).is_null() ? std::optional<double>() : fixed.at(k).get<double>();
    };
    c.frozen = {opt("sigma2"), opt("tau2"), opt("phi")};
    c.iterations = cfg.at("iterations").get<long>();
    c.J = cfg.at("J").get<Index>();
    c.K = cfg.at("K").get<Index>();
    c.learning_rate = cfg.at("learning_rate").get<double>();
    c.optimizer = parse_optimizer(cfg.at("optimizer").get<std::string>());
    c.draws = cfg.at("draws").get<Index>();
    c.alpha = cfg.at("alpha").get<double>();
    c.scenario = parse_scenario(cfg.at("scenario").get<std::string>());
    c.n = cfg.at("n").get<Index>();
    c.n_validation = cfg.at("n_validation").get<Index>();
    c.side = cfg.at("side").get<double>();
    const ojson& lf = cfg.at("large_field");
    c.large_field = {lf.at("mean").get<double>(), lf.at("sigma2").get<double>(),
                     lf.at("phi").get<double>(), lf.at("tau2").get<double>(),
                     lf.at("max_neighbors").get<int>()};
    c.replicates = cfg.at("replicates").get<int>();
    c.seed = cfg.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed configuration: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

Rng stream(std::uint64_t seed, Stream s) {
  return Rng::substream(seed, static_cast<std::uint64_t>(s));
}

FitResult fit(const SpatialDataset& train, const RunConfig& config,
              const VariationalState* resume, const std::function<void(long, double)>& progress) {
  config.validate();
  train.validate(config.family == Family::Poisson);
  const ModelSpec spec = default_model_spec(config.family, train);
  const LogJoint log_joint(train, spec, config.prior_mode, config.max_neighbors);
  FitResult out;
  if (resume) {
    const PsiLayout& l = resume->layout;
    require(l.family == config.family, "checkpoint family differs from the configuration");
    require(l.coef_count == train.X.cols(), "checkpoint covariate count differs from the data");
    require(!l.has_w() || l.latent_count == train.size(),
            "checkpoint location count differs from the data");
    out.state = *resume;
  } else {
    const PsiLayout layout =
        PsiLayout::make(config.family, train.covariate_count(), train.size(),
                        config.variance_family, config.frozen);
    Rng init = stream(config.seed, Stream::Init);
    out.state = init_state(config.generator, layout, spec, init);
  }
  TrainOptions options;
  options.iterations = config.iterations;
  options.J = config.J;
  options.K = config.K;
  options.optimizer = config.optimizer;
  options.adam.learning_rate = config.learning_rate;
  options.progress = progress;
  // Resumed runs continue on a fresh stream keyed by the step count.
  Rng base = stream(config.seed, Stream::Train);
  Rng rng = Rng::substream(base.engine()(), static_cast<std::uint64_t>(out.state.step));
  out.trace = sivi::train(out.state, log_joint, options, rng);
  return out;
}

PredictiveDraws predict_validation(const VariationalState& state, const SpatialDataset& train,
                                   const SpatialDataset& validation, const RunConfig& config) {
  require(validation.X.cols() == state.layout.coef_count,
          "validation covariates differ from the fitted model");
  require(!state.layout.has_w() || state.layout.latent_count == train.size(),
          "training data differ from the fitted model");
  validation.validate(false);
  Rng post = stream(config.seed, Stream::Posterior);
  const PosteriorSamples samples = draw_posterior(state, config.draws, post);
  PredictOptions options;
  options.mode = config.prior_mode;
  options.max_neighbors = config.max_neighbors;
  options.seed = stream(config.seed, Stream::Predict).engine()();
  return predict(samples, train, validation.coords, validation.X, options);
}

SimulatedReplicate simulate_replicate(const RunConfig& config, std::uint64_t seed) {
  Rng sim = stream(seed, Stream::Simulate);
  SpatialDataset data;
  SimulatedReplicate out;
  switch (config.scenario) {
    case Scenario::Gaussian: {
      Replicate r = gen_gaussian_replicate(config.n, sim, config.side);
      data = std::move(r.data);
      out.truth = std::move(r.truth);
      break;
    }
    case Scenario::Poisson: {
      Replicate r = gen_poisson_replicate(config.n, sim, config.side);
      data = std::move(r.data);
      out.truth = std::move(r.truth);
      break;
    }
    case Scenario::LargeField: {
      const LargeFieldParams& p = config.large_field;
      Eigen::VectorXd w;
      data = gen_large_field(config.n, config.side, p, sim, &w);
      out.truth.beta = Eigen::VectorXd::Constant(1, p.mean);
      out.truth.sigma2 = p.sigma2;
      out.truth.tau2 = p.tau2;
      out.truth.phi = p.phi;
      out.truth.w = std::move(w);
      break;
    }
  }
  Rng sp = stream(seed, Stream::Split);
  out.split = split(data, config.n_validation, sp);
  return out;
}

std::string replicate_dir_name(int r) {
  std::ostringstream s;
  s << "rep_" << std::setw(3) << std::setfill('0') << r;
  return s.str();
}

void write_manifest(const fs::path& path, const std::string& command, const RunConfig& config,
                    const std::vector<std::string>& inputs, const std::string& extra_json) {
  ojson j;
  j["command"] = command;
  j["version"] = version();
  j["seed"] = config.seed;
  j["config"] = ojson::parse(config.to_json());
  ojson in = ojson::array();
  for (const auto& p : inputs) in.push_back({{"path", p}, {"fnv1a", io::file_hash(p)}});
  j["inputs"] = in;
  const ojson extra = ojson::parse(extra_json);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  io::write_file(path.string(), j.dump(2) + "\n");
}

ScoreReport run_replicate(const RunConfig& config, int r, const fs::path& dir) {
  RunConfig c = config;
  c.seed = config.seed + static_cast<std::uint64_t>(r);
  fs::create_directories(dir);
  const SimulatedReplicate sim = simulate_replicate(c, c.seed);
  const auto train_path = (dir / "train.csv").string();
  const auto valid_path = (dir / "validation.csv").string();
  io::write_dataset(train_path, sim.split.train);
  io::write_dataset(valid_path, sim.split.validation);
  io::write_truth((dir / "truth.json").string(), sim.truth);
  const FitResult f = fit(sim.split.train, c);
  io::write_trace((dir / "trace.csv").string(), f.trace);
  save_checkpoint((dir / "checkpoint.bin").string(), f.state, c.to_json());
  const PredictiveDraws d = predict_validation(f.state, sim.split.train, sim.split.validation, c);
  io::write_prediction_summary((dir / "predictions.csv").string(), sim.split.validation.coords, d);
  const ScoreReport report = score(d, sim.split.validation.y, c.alpha);
  io::write_scores((dir / "scores.csv").string(), report);
  io::write_file((dir / "summary.json").string(), io::score_summary_json(report));
  write_manifest(dir / "manifest.json", "replicate", c, {train_path, valid_path});
  return report;
}

PooledSummary run_replicates(const RunConfig& config, const fs::path& out, int threads) {
  config.validate();
  const bool poisson_scenario = config.scenario == Scenario::Poisson;
  require(poisson_scenario == (config.family == Family::Poisson),
          "scenario " + to_string(config.scenario) + " does not match family " +
              to_string(config.family));
  fs::create_directories(out);
  const int R = config.replicates;
  PooledSummary pooled;
  pooled.replicates.resize(static_cast<std::size_t>(R));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(R));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int r = next++; r < R; r = next++) {
      try {
        pooled.replicates[static_cast<std::size_t>(r)] =
            run_replicate(config, r, out / replicate_dir_name(r));
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
      }
    }
  };
  const int workers = std::clamp(threads, 1, R);
  std::vector<std::thread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::ostringstream csv;
  csv << "replicate,seed,crps,interval_score,nlpd,rmse,nlpd_floored\n";
  ojson reps = ojson::array();
  for (int r = 0; r < R; ++r) {
    const ScoreReport& s = pooled.replicates[static_cast<std::size_t>(r)];
    pooled.crps += s.mean_crps / R;
    pooled.interval += s.mean_interval / R;
    pooled.nlpd += s.mean_nlpd / R;
    pooled.rmse += s.rmse / R;
    const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(r);
    csv << r << ',' << seed << ',' << io::format_double(s.mean_crps) << ','
        << io::format_double(s.mean_interval) << ',' << io::format_double(s.mean_nlpd) << ','
        << io::format_double(s.rmse) << ',' << s.nlpd_floored << '\n';
    reps.push_back({{"replicate", r},
                    {"seed", seed},
                    {"crps", s.mean_crps},
                    {"interval_score", s.mean_interval},
                    {"nlpd", s.mean_nlpd},
                    {"rmse", s.rmse}});
  }
  csv << "mean,," << io::format_double(pooled.crps) << ',' << io::format_double(pooled.interval)
      << ',' << io::format_double(pooled.nlpd) << ',' << io::format_double(pooled.rmse) << ",\n";
  io::write_file((out / "summary.csv").string(), csv.str());
  ojson summary;
  summary["replicates"] = R;
  summary["alpha"] = config.alpha;
  summary["crps"] = pooled.crps;
  summary["interval_score"] = pooled.interval;
  summary["nlpd"] = pooled.nlpd;
  summary["rmse"] = pooled.rmse;
  summary["per_replicate"] = reps;
  io::write_file((out / "summary.json").string(), summary.dump(2) + "\n");
  ojson seeds = ojson::array();
  for (int r = 0; r < R; ++r) seeds.push_back(config.seed + static_cast<std::uint64_t>(r));
  write_manifest(out / "manifest.json", "replicate", config, {},
                 ojson{{"replicate_seeds", seeds}}.dump());
  return pooled;
}

int thread_count_from_env() {
  const char* v = std::getenv("SIVI_THREADS");
  if (!v || !*v) return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long t = std::strtol(v, &end, 10);
  if (*end != '\0' || t < 1 || t > 4096)
    throw ConfigError(std::string("SIVI_THREADS must be a positive integer, got '") + v + "'");
  return static_cast<int>(t);
}

}  // namespace sivi
