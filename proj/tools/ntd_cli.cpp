// Command line front end: single runs, sweeps, oracle export and diagnostics.
// Exit codes: 0 success, 1 configuration error, 2 runtime or solver failure.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>
#include <random>

#include "ntd/harness.hpp"

namespace {

using namespace ntd;

/// Flags shared by every training subcommand; unset flags leave the config alone.
struct RunFlags {
  std::string config;
  std::string env;
  std::string checkpoint;
  std::string out;
  std::string mode;
  std::string architecture;
  std::optional<std::uint64_t> seed;
  std::vector<int> m, T;
  std::vector<double> B, beta;
  std::optional<double> eta;
  std::optional<int> n_seeds, threads, metrics_every, depth;
  bool plotdata = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON document)");
  cmd->add_option("--env", f.env, "environment file or generator spec");
  cmd->add_option("--checkpoint", f.checkpoint, "two-layer network checkpoint");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--mode", f.mode, "population | iid | markov");
  cmd->add_option("--architecture", f.architecture, "two_layer | deep");
  cmd->add_option("--depth", f.depth, "hidden layers of the deep net");
  cmd->add_option("--m", f.m, "width grid");
  cmd->add_option("--T", f.T, "horizon grid");
  cmd->add_option("--B", f.B, "radius grid");
  cmd->add_option("--beta", f.beta, "inverse temperature grid");
  cmd->add_option("--eta", f.eta, "stepsize, 0 for the default schedule");
  cmd->add_option("--n-seeds", f.n_seeds, "replicates per cell");
  cmd->add_option("--threads", f.threads, "worker threads, 0 for all cores");
  cmd->add_option("--metrics-every", f.metrics_every, "metric stride, 0 for the default");
  cmd->add_flag("--emit-plotdata", f.plotdata, "also write whitespace .dat tables");
}

ExperimentSpec build_spec(const RunFlags& f, const std::string& algorithm) {
  ExperimentSpec spec;
  if (!f.config.empty()) {
    if (!std::filesystem::exists(f.config)) {
      throw ConfigError("config file not found: " + f.config);
    }
    spec = load_experiment_spec(f.config);
  }
  if (!algorithm.empty()) spec.algorithms = {algorithm};
  if (!f.env.empty()) spec.env = f.env;
  if (!f.checkpoint.empty()) spec.checkpoint = f.checkpoint;
  if (!f.out.empty()) spec.out = f.out;
  if (!f.mode.empty()) spec.mode = parse_sampling(f.mode);
  if (!f.architecture.empty()) spec.architecture = f.architecture;
  if (f.depth) spec.depth = *f.depth;
  if (f.seed) spec.master_seed = *f.seed;
  if (!f.m.empty()) spec.m = f.m;
  if (!f.T.empty()) spec.T = f.T;
  if (!f.B.empty()) spec.B = f.B;
  if (!f.beta.empty()) spec.beta = f.beta;
  if (f.eta) spec.eta = *f.eta;
  if (f.n_seeds) spec.n_seeds = *f.n_seeds;
  if (f.threads) spec.threads = *f.threads;
  if (f.metrics_every) spec.metrics_every = *f.metrics_every;
  if (f.plotdata) spec.emit_plotdata = true;
  spec.validate();
  return spec;
}

int report_sweep(const SweepResult& res, const ExperimentSpec& spec) {
  for (const auto& cell : res.cells) {
    std::cout << cell.id << "  mean_final_error=" << format_double(cell.mean_error)
              << "  se=" << format_double(cell.se_error) << "  ok=" << cell.n_ok << "/"
              << cell.seeds.size() << "\n";
    for (const auto& s : cell.seeds) {
      if (s.status != "ok") std::cout << "  seed " << s.seed_index << " " << s.status << ": " << s.reason << "\n";
    }
  }
  std::cout << "summary: " << (std::filesystem::path(spec.out) / "summary.json").string() << "\n";
  return res.summary.at("failures").get<int>() > 0 ? 2 : 0;
}

/// Random unit vector from a dedicated stream.
Vector unit_vector(int d, CounterRng rng) {
  std::normal_distribution<double> normal;
  Vector v(d);
  for (int k = 0; k < d; ++k) v(k) = normal(rng);
  return v / v.norm();
}

int kernel_check(int pairs, long n, std::uint64_t seed, int d) {
  require(pairs >= 1 && n >= 2 && d >= 2, "kernel-check needs pairs >= 1, n >= 2, d >= 2");
  const CounterRng root(seed, Stream::kEnvironment);
  int failures = 0;
  double worst = 0.0;
  for (int i = 0; i < pairs; ++i) {
    const Vector x = unit_vector(d, root.split(2 * std::uint64_t(i)));
    const Vector y = unit_vector(d, root.split(2 * std::uint64_t(i) + 1));
    const double exact = kernel_closed_form(x, y);
    const auto mc = kernel_mc(x, y, n, seed + std::uint64_t(i));
    const double z = std::abs(mc.estimate - exact) / mc.standard_error;
    worst = std::max(worst, z);
    if (!(z <= 4.0)) ++failures;
  }
  std::cout << "kernel-check pairs=" << pairs << " n=" << n << " max_z=" << format_double(worst)
            << " outside_4se=" << failures << "\n";
  return failures == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural TD / Q-learning experiments on finite MDPs"};
  app.require_subcommand(1);

  RunFlags run;
  std::string chosen;
  const std::pair<const char*, const char*> algorithms[] = {
      {"td", "neural TD policy evaluation"},
      {"qlearn", "neural Q-learning"},
      {"softq", "neural soft Q-learning"},
      {"sac", "soft actor-critic"}};
  for (const auto& [name, about] : algorithms) {
    auto* cmd = app.add_subcommand(name, about);
    add_run_flags(cmd, run);
    cmd->callback([&chosen, n = name] { chosen = n; });
  }
  auto* sweep = app.add_subcommand("sweep", "run the grid described by --config");
  add_run_flags(sweep, run);

  std::string o_env = "garnet:states=5,actions=2,d=8,branching=3,gamma=0.9,seed=1";
  std::string o_checkpoint, o_out = "out", o_kind = "evaluation";
  int o_m = 64;
  double o_B = 1.0, o_beta = 1.0;
  std::uint64_t o_seed = 0;
  auto* oracle = app.add_subcommand("oracle", "solve and export the projected fixed point");
  oracle->add_option("--env", o_env, "environment file or generator spec");
  oracle->add_option("--checkpoint", o_checkpoint, "two-layer network checkpoint");
  oracle->add_option("--m", o_m, "width when no checkpoint is given");
  oracle->add_option("--seed", o_seed, "initialization seed when no checkpoint is given");
  oracle->add_option("--B", o_B, "radius");
  oracle->add_option("--kind", o_kind, "evaluation | optimality | soft");
  oracle->add_option("--beta", o_beta, "inverse temperature for --kind soft");
  oracle->add_option("--out", o_out, "output directory");

  int k_pairs = 100, k_d = 8;
  long k_n = 200000;
  std::uint64_t k_seed = 0;
  auto* kcheck = app.add_subcommand("kernel-check", "closed-form kernel vs Monte Carlo");
  kcheck->add_option("--pairs", k_pairs, "random unit-vector pairs");
  kcheck->add_option("--n", k_n, "Monte Carlo draws per pair");
  kcheck->add_option("--seed", k_seed, "seed");
  kcheck->add_option("--d", k_d, "input dimension");

  std::string a_env = o_env, a_out;
  int a_m = 64, a_pairs = 200;
  double a_B = 1.0;
  std::optional<double> a_beta;
  std::uint64_t a_seed = 0;
  auto* assume = app.add_subcommand("assumptions", "estimate nu for the optimality operator");
  assume->add_option("--env", a_env, "environment file or generator spec");
  assume->add_option("--m", a_m, "width");
  assume->add_option("--seed", a_seed, "initialization and sampling seed");
  assume->add_option("--B", a_B, "radius");
  assume->add_option("--beta", a_beta, "use the soft operator at this temperature");
  assume->add_option("--pairs", a_pairs, "sampled parameter pairs");
  assume->add_option("--out", a_out, "optional JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (!chosen.empty() || sweep->parsed()) {
      const ExperimentSpec spec = build_spec(run, chosen);
      return report_sweep(run_experiment(spec), spec);
    }
    if (oracle->parsed()) {
      const Environment env = resolve_environment(o_env);
      ExperimentSpec spec;
      spec.checkpoint = o_checkpoint;
      const auto net = build_network(spec, o_m, env.features.dim(), o_seed);
      const LinearizedFeatures lin = ntk_features(*net, env.features);
      const Policy uniform = Policy::uniform(env.mdp.n_states, env.mdp.n_actions);
      const ProjectionSpec ball(o_B);
      FixedPoint fp;
      if (o_kind == "evaluation") {
        fp = solve_projected_evaluation(env.mdp, uniform, lin, ball);
      } else if (o_kind == "optimality") {
        fp = solve_projected_optimality(env.mdp, uniform, lin, ball);
      } else if (o_kind == "soft") {
        fp = solve_projected_optimality(env.mdp, uniform, lin, ball, {}, o_beta);
      } else {
        throw ConfigError("--kind must be evaluation, optimality or soft");
      }
      const auto path = (std::filesystem::path(o_out) / "fixed_point.json").string();
      write_text_file(path, fixed_point_to_json(fp, env.mdp).dump(2) + "\n");
      std::cout << "residual=" << format_double(fp.residual) << " iterations=" << fp.iterations
                << " -> " << path << "\n";
      return 0;
    }
    if (kcheck->parsed()) return kernel_check(k_pairs, k_n, k_seed, k_d);
    if (assume->parsed()) {
      const Environment env = resolve_environment(a_env);
      ExperimentSpec spec;
      const auto net = build_network(spec, a_m, env.features.dim(), a_seed);
      const LinearizedFeatures lin = ntk_features(*net, env.features);
      const Policy uniform = Policy::uniform(env.mdp.n_states, env.mdp.n_actions);
      const auto rep =
          estimate_nu(env.mdp, uniform, lin, ProjectionSpec(a_B), a_pairs, a_seed, a_beta);
      const Json doc{{"nu_hat", rep.nu_hat},   {"min_ratio", rep.min_ratio},
                     {"n_pairs", rep.n_pairs}, {"n_degenerate", rep.n_degenerate},
                     {"witness", rep.witness}, {"gamma", env.mdp.gamma}};
      std::cout << doc.dump(2) << "\n";
      if (!a_out.empty()) write_text_file(a_out, doc.dump(2) + "\n");
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
