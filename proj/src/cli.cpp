#include "sivi/cli.hpp"

#include "sivi/io.hpp"
#include "sivi/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>

namespace sivi {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

/// String-valued settings, converted to typed RunConfig fields after parsing.
struct RawOptions {
  std::string family = "gaussian";
  std::string formulation = "conditional";
  std::string prior_mode = "dense-gp";
  std::string variance_family = "inverse-gamma";
  std::string positive = "softplus";
  std::string optimizer = "adam";
  std::string scenario;
  std::vector<int> hidden;
  bool desk = false;
  bool large_n = false;
  double fix_sigma2 = 0.0, fix_tau2 = 0.0, fix_phi = 0.0;
  long progress = 0;
};

struct Opts {
  CLI::App* app = nullptr;
  CLI::Option* hidden = nullptr;
  CLI::Option* noise_dim = nullptr;
  CLI::Option* J = nullptr;
  CLI::Option* K = nullptr;
  CLI::Option* prior_mode = nullptr;
  CLI::Option* fix_sigma2 = nullptr;
  CLI::Option* fix_tau2 = nullptr;
  CLI::Option* fix_phi = nullptr;
  CLI::Option* family = nullptr;
};

void add_model(Opts& o, RunConfig& c, RawOptions& r) {
  CLI::App* a = o.app;
  o.family = a->add_option("--family", r.family, "gaussian or poisson")->capture_default_str();
  a->add_option("--formulation", r.formulation, "conditional or marginal (Gaussian only)")
      ->capture_default_str();
  o.prior_mode = a->add_option("--prior-mode", r.prior_mode, "dense-gp or nngp")->capture_default_str();
  a->add_option("-M,--max-neighbors", c.max_neighbors, "NNGP neighbour count")->capture_default_str();
}

void add_training(Opts& o, RunConfig& c, RawOptions& r) {
  CLI::App* a = o.app;
  a->add_option("--iterations", c.iterations, "training iterations")->capture_default_str();
  o.J = a->add_option("-J", c.J, "psi draws per iteration")->capture_default_str();
  o.K = a->add_option("-K", c.K, "auxiliary psi draws per iteration")->capture_default_str();
  a->add_option("--learning-rate", c.learning_rate)->capture_default_str();
  a->add_option("--optimizer", r.optimizer, "adam or sgd")->capture_default_str();
  o.noise_dim = a->add_option("--noise-dim", c.generator.noise_dim)->capture_default_str();
  o.hidden = a->add_option("--hidden", r.hidden, "hidden layer widths")->delimiter(',');
  a->add_option("--positive-transform", r.positive, "softplus or exp")->capture_default_str();
  a->add_option("--variance-family", r.variance_family, "inverse-gamma or log-normal")
      ->capture_default_str();
  a->add_flag("--desk", r.desk, "reduced [128,128] generator");
  a->add_flag("--large-n", r.large_n, "J = K = 10 with the NNGP prior");
  o.fix_sigma2 = a->add_option("--fix-sigma2", r.fix_sigma2, "hold sigma2 at this value");
  o.fix_tau2 = a->add_option("--fix-tau2", r.fix_tau2, "hold tau2 at this value");
  o.fix_phi = a->add_option("--fix-phi", r.fix_phi, "hold phi at this value");
  a->add_option("--progress", r.progress, "report the ELBO every N iterations on stderr");
}

void add_simulation(CLI::App* a, RunConfig& c, RawOptions& r) {
  a->add_option("--scenario", r.scenario, "gaussian, poisson or large-field (default: --family)");
  a->add_option("-n,--n", c.n, "locations per replicate, validation included")->capture_default_str();
  a->add_option("--validation", c.n_validation, "validation locations")->capture_default_str();
  a->add_option("--side", c.side, "side of the square domain")->capture_default_str();
  a->add_option("--replicates", c.replicates)->capture_default_str();
  a->add_option("--field-mean", c.large_field.mean)->capture_default_str();
  a->add_option("--field-sigma2", c.large_field.sigma2)->capture_default_str();
  a->add_option("--field-phi", c.large_field.phi)->capture_default_str();
  a->add_option("--field-tau2", c.large_field.tau2)->capture_default_str();
  a->add_option("--field-neighbors", c.large_field.max_neighbors)->capture_default_str();
}

void add_common(CLI::App* a, RunConfig& c) {
  a->add_option("--seed", c.seed)->capture_default_str();
}

template <class F>
auto as_config(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

/// Resolves string options and presets into `c`.
void finish(const Opts& o, RunConfig& c, const RawOptions& r) {
  as_config([&] {
    if (r.family == "gaussian")
      c.family = r.formulation == "marginal"      ? Family::GaussianMarginal
                 : r.formulation == "conditional" ? Family::GaussianConditional
                                                  : throw ConfigError("unknown formulation '" +
                                                                      r.formulation + "'");
    else if (r.family == "poisson") {
      if (r.formulation != "conditional")
        throw ConfigError("the Poisson family has only the conditional formulation");
      c.family = Family::Poisson;
    } else {
      c.family = parse_family(r.family);
    }
    c.variance_family = parse_variance_family(r.variance_family);
    c.generator.positive = parse_positive_transform(r.positive);
    c.optimizer = parse_optimizer(r.optimizer);
    c.scenario = r.scenario.empty()
                     ? (c.family == Family::Poisson ? Scenario::Poisson : Scenario::Gaussian)
                     : parse_scenario(r.scenario);
    return 0;
  });
  if (r.desk) {
    const int noise = c.generator.noise_dim;
    const PositiveTransform pos = c.generator.positive;
    c.use_desk_generator();
    c.generator.positive = pos;
    if (o.noise_dim && o.noise_dim->count()) c.generator.noise_dim = noise;
  }
  if (r.large_n) {
    const Index J = c.J, K = c.K;
    c.use_large_n();
    if (o.J && o.J->count()) c.J = J;
    if (o.K && o.K->count()) c.K = K;
  }
  if (o.prior_mode && (o.prior_mode->count() || !r.large_n))
    c.prior_mode = as_config([&] { return parse_prior_mode(r.prior_mode); });
  if (o.hidden && o.hidden->count()) c.generator.hidden = r.hidden;
  if (o.fix_sigma2 && o.fix_sigma2->count()) c.frozen.sigma2 = r.fix_sigma2;
  if (o.fix_tau2 && o.fix_tau2->count()) c.frozen.tau2 = r.fix_tau2;
  if (o.fix_phi && o.fix_phi->count()) c.frozen.phi = r.fix_phi;
  c.validate();
}

std::function<void(long, double)> progress_printer(long every) {
  if (every <= 0) return {};
  return [every](long it, double elbo) {
    if (it % every == 0) std::cerr << "iteration " << it << "  elbo " << elbo << "\n";
  };
}

int cmd_simulate(const RunConfig& c, const std::string& out) {
  const fs::path dir(out);
  fs::create_directories(dir);
  ojson seeds = ojson::array();
  for (int r = 0; r < c.replicates; ++r) {
    const std::uint64_t seed = c.seed + static_cast<std::uint64_t>(r);
    const SimulatedReplicate sim = simulate_replicate(c, seed);
    const fs::path rd = dir / replicate_dir_name(r);
    fs::create_directories(rd);
    io::write_dataset((rd / "train.csv").string(), sim.split.train);
    io::write_dataset((rd / "validation.csv").string(), sim.split.validation);
    io::write_truth((rd / "truth.json").string(), sim.truth);
    seeds.push_back(seed);
  }
  write_manifest(dir / "manifest.json", "simulate", c, {},
                 ojson{{"replicate_seeds", seeds}}.dump());
  return kExitOk;
}

int cmd_fit(const RunConfig& c, const std::string& train_path, const std::string& out,
            std::string trace_path, const std::string& resume_path, long progress) {
  const SpatialDataset train = io::read_dataset(train_path);
  if (trace_path.empty()) trace_path = (fs::path(out).parent_path() / "trace.csv").string();
  const std::string train_hash = io::file_hash(train_path);
  std::optional<VariationalState> resume;
  ojson meta;
  if (!resume_path.empty()) {
    std::string prior;
    resume = load_checkpoint(resume_path, &prior);
    meta = ojson::parse(prior);
    if (meta.contains("train_fnv1a") && meta["train_fnv1a"] != train_hash)
      throw ConfigError("checkpoint was fitted to different training data");
    if (c.iterations > 0) meta["resumed"].push_back({{"iterations", c.iterations}, {"seed", c.seed}});
  } else {
    meta["config"] = ojson::parse(c.to_json());
    meta["train_fnv1a"] = train_hash;
  }
  const FitResult f = fit(train, c, resume ? &*resume : nullptr, progress_printer(progress));
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_checkpoint(out, f.state, meta.dump());
  io::write_trace(trace_path, f.trace);
  std::vector<std::string> inputs{train_path};
  if (!resume_path.empty()) inputs.push_back(resume_path);
  write_manifest(out + ".manifest.json", "fit", c, inputs);
  return kExitOk;
}

int cmd_predict(RunConfig c, const Opts& o, const std::string& checkpoint,
                const std::string& train_path, const std::string& valid_path,
                const std::string& out, const std::string& summary) {
  std::string meta_text;
  const VariationalState state = load_checkpoint(checkpoint, &meta_text);
  const ojson meta = ojson::parse(meta_text);
  const SpatialDataset train = io::read_dataset(train_path);
  if (meta.contains("train_fnv1a") && meta["train_fnv1a"] != io::file_hash(train_path))
    throw ConfigError("checkpoint was fitted to different training data");
  if (o.family->count() && c.family != state.layout.family)
    throw ConfigError("checkpoint family " + to_string(state.layout.family) +
                      " differs from --family");
  c.family = state.layout.family;
  if (meta.contains("config")) {
    const ojson& fc = meta["config"];
    if (!o.prior_mode->count()) c.prior_mode = parse_prior_mode(fc.at("prior_mode").get<std::string>());
    if (!o.app->get_option("--max-neighbors")->count()) c.max_neighbors = fc.at("max_neighbors").get<int>();
  }
  c.validate();
  const SpatialDataset valid = io::read_dataset(valid_path);
  if (c.family == Family::Poisson) {
    as_config([&] { train.validate(true); return 0; });
    as_config([&] { valid.validate(true); return 0; });
  }
  const PredictiveDraws d = predict_validation(state, train, valid, c);
  io::write_draws(out, d);
  if (!summary.empty()) io::write_prediction_summary(summary, valid.coords, d);
  write_manifest(out + ".manifest.json", "predict", c, {checkpoint, train_path, valid_path});
  return kExitOk;
}

int cmd_score(const RunConfig& c, const std::string& draws_path, const std::string& valid_path,
              const std::string& out, const std::string& summary) {
  const PredictiveDraws d = io::read_draws(draws_path);
  const SpatialDataset valid = io::read_dataset(valid_path);
  if (valid.size() != d.locations())
    throw ConfigError("validation rows differ from the predicted locations");
  if (d.family == Family::Poisson) as_config([&] { valid.validate(true); return 0; });
  const ScoreReport r = score(d, valid.y, c.alpha);
  io::write_scores(out, r);
  const std::string json = io::score_summary_json(r);
  if (!summary.empty()) io::write_file(summary, json);
  std::cout << json;
  write_manifest(out + ".manifest.json", "score", c, {draws_path, valid_path});
  return kExitOk;
}

int cmd_replicate(const RunConfig& config, const std::string& manifest, const std::string& out) {
  const RunConfig c = manifest.empty() ? config : RunConfig::from_json(io::read_file(manifest));
  const int threads = thread_count_from_env();
  const PooledSummary s = run_replicates(c, out, threads);
  std::cout << "replicates " << s.replicates.size() << "  crps " << s.crps << "  interval "
            << s.interval << "  nlpd " << s.nlpd << "  rmse " << s.rmse << "\n";
  return kExitOk;
}

bool numerical(const std::exception& e) {
  return dynamic_cast<const ad::NotPositiveDefinite*>(&e) || dynamic_cast<const ad::Diverged*>(&e) ||
         dynamic_cast<const ElboOverflow*>(&e) || dynamic_cast<const GeneratorOverflow*>(&e) ||
         dynamic_cast<const CovarianceSingular*>(&e) ||
         dynamic_cast<const SingularConditioningSet*>(&e) ||
         dynamic_cast<const ElicitationFailed*>(&e) || dynamic_cast<const ad::ReplayDivergence*>(&e);
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Semi-implicit variational inference for Bayesian spatial interpolation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version());
  // Config keys sit under a section named after the command, e.g. [fit].
  app.set_config("--config", "", "TOML file with a [command] section; command-line flags win");
  app.fallthrough();

  RunConfig c;
  RawOptions r;
  std::string out, train, valid, checkpoint, trace, resume, draws, summary, manifest;

  Opts sim{app.add_subcommand("simulate", "simulate replicate data sets")};
  add_common(sim.app, c);
  add_model(sim, c, r);
  add_simulation(sim.app, c, r);
  sim.app->add_option("-o,--out", out, "output directory")->required();

  Opts fit_o{app.add_subcommand("fit", "fit the variational posterior")};
  add_common(fit_o.app, c);
  add_model(fit_o, c, r);
  add_training(fit_o, c, r);
  fit_o.app->add_option("--train", train, "training CSV")->required();
  fit_o.app->add_option("-o,--out", out, "checkpoint path")->required();
  fit_o.app->add_option("--trace", trace, "ELBO trace CSV (default: trace.csv beside the checkpoint)");
  fit_o.app->add_option("--resume", resume, "continue from this checkpoint");

  Opts pred{app.add_subcommand("predict", "posterior-predictive draws at validation locations")};
  add_common(pred.app, c);
  add_model(pred, c, r);
  pred.app->add_option("--checkpoint", checkpoint)->required();
  pred.app->add_option("--train", train, "training CSV used for the fit")->required();
  pred.app->add_option("--validation", valid, "CSV of new locations")->required();
  pred.app->add_option("--draws", c.draws, "posterior draws")->capture_default_str();
  pred.app->add_option("-o,--out", out, "long-format draws CSV")->required();
  pred.app->add_option("--summary", summary, "per-location summary CSV");

  Opts sc{app.add_subcommand("score", "score predictive draws against held-out responses")};
  add_common(sc.app, c);
  sc.app->add_option("--draws", draws, "draws CSV from predict")->required();
  sc.app->add_option("--validation", valid, "validation CSV")->required();
  sc.app->add_option("--alpha", c.alpha, "interval level")->capture_default_str();
  sc.app->add_option("-o,--out", out, "score CSV")->required();
  sc.app->add_option("--summary", summary, "summary JSON");

  Opts rep{app.add_subcommand("replicate", "simulate, fit, predict and score many replicates")};
  add_common(rep.app, c);
  add_model(rep, c, r);
  add_training(rep, c, r);
  add_simulation(rep.app, c, r);
  rep.app->add_option("--draws", c.draws, "posterior draws")->capture_default_str();
  rep.app->add_option("--alpha", c.alpha, "interval level")->capture_default_str();
  rep.app->add_option("-o,--out", out, "output directory")->required();
  rep.app->add_option("--manifest", manifest,
                      "rerun the configuration recorded in a replicate manifest");
  rep.app->footer("Worker threads: SIVI_THREADS (default: hardware concurrency).");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*sim.app) {
      finish(sim, c, r);
      return cmd_simulate(c, out);
    }
    if (*fit_o.app) {
      finish(fit_o, c, r);
      return cmd_fit(c, train, out, trace, resume, r.progress);
    }
    if (*pred.app) {
      finish(pred, c, r);
      return cmd_predict(c, pred, checkpoint, train, valid, out, summary);
    }
    if (*sc.app) {
      finish(sc, c, r);
      return cmd_score(c, draws, valid, out, summary);
    }
    finish(rep, c, r);
    return cmd_replicate(c, manifest, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return numerical(e) ? kExitNumerical : kExitConfig;
  }
}

}  // namespace sivi
