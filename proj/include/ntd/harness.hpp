#pragma once

#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ntd/algo.hpp"
#include "ntd/io.hpp"

namespace ntd {

/// Declarative sweep description; see README for the JSON key set.
struct ExperimentSpec {
  std::string env = "garnet:states=5,actions=2,d=8,branching=3,gamma=0.9,seed=1";
  std::vector<std::string> algorithms{"td"};
  Sampling mode = Sampling::kIid;
  std::string architecture = "two_layer";
  int depth = 2;
  std::vector<int> m{64};
  std::vector<int> T{1000};
  std::vector<double> B{1.0};
  std::vector<double> beta{1.0};
  /// 0 selects default_eta.
  double eta = 0.0;
  int n_seeds = 1;
  std::uint64_t master_seed = 0;
  int metrics_every = 0;
  int burn_in = 1000;
  int nu_pairs = 200;
  /// Optional network checkpoint replacing the random initialization.
  std::string checkpoint;
  std::string out = "out";
  int threads = 1;
  bool emit_plotdata = false;

  static ExperimentSpec from_json(const Json& doc);
  Json to_json() const;
  void validate() const;
};

ExperimentSpec load_experiment_spec(const std::string& path);

/// Seed used for initialization and sampling of the k-th replicate.
std::uint64_t replicate_seed(std::uint64_t master_seed, int k);

struct SlopeFit {
  int n = 0;
  double slope = 0;
  double intercept = 0;
  double std_error = 0;
  double ci_low = 0;   // slope +- 1.96 standard errors
  double ci_high = 0;
  double r2 = 0;
};

/// Least squares of log(y) on log(x).
SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);

struct SeedResult {
  int seed_index = 0;
  std::uint64_t seed = 0;
  std::string status = "ok";  // ok | failed
  std::string reason;
  double eta = 0;
  double final_error = 0;
  double final_lin_error = 0;
  double nu_hat = 0;
  bool has_nu = false;
  double expected_return = std::numeric_limits<double>::quiet_NaN();  // sac only
  double max_variance = 0;
  double variance_bound = 0;
  int ball_violations = 0;
  int monotone_violations = 0;
  int descent_violations = 0;
  int sandwich_violations = 0;
  double oracle_residual = std::numeric_limits<double>::quiet_NaN();
  std::string csv_path;
  std::string fixed_point_path;
};

struct CellResult {
  std::string id;
  std::string algorithm;
  int m = 0;
  int T = 0;
  double B = 0;
  double beta = 0;
  std::vector<SeedResult> seeds;
  double mean_error = 0;
  double se_error = 0;
  int n_ok = 0;
};

struct SweepResult {
  std::vector<CellResult> cells;
  Json summary;
};

SweepResult run_experiment(const ExperimentSpec& spec);

/// Fixed column schema: trace_columns(), one row per iteration.
std::string trace_to_csv(const RunTrace& trace);

Json fixed_point_to_json(const FixedPoint& fp, const FiniteMdp& mdp);

Json checkpoint_to_json(const TwoLayerNet<double>& net);
TwoLayerNet<double> checkpoint_from_json(const Json& doc);

/// Builds the network of an experiment: checkpoint if given, otherwise a fresh
/// initialization of the requested architecture.
std::unique_ptr<QNetwork> build_network(const ExperimentSpec& spec, int m, int d,
                                        std::uint64_t seed);

}  // namespace ntd
