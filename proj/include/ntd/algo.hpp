#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ntd/env.hpp"
#include "ntd/model.hpp"
#include "ntd/oracle.hpp"

namespace ntd {

enum class Sampling { kPopulation, kIid, kMarkov };

std::string to_string(Sampling sampling);
Sampling parse_sampling(const std::string& text);

struct TdConfig {
  /// Unset selects default_eta; an explicit 0 freezes the weights.
  std::optional<double> eta;
  int T = 1000;
  ProjectionSpec spec{1.0};
  Sampling sampling = Sampling::kIid;
  std::uint64_t seed = 0;
  /// Stride of the exact (population) metrics. 0 selects 1 in population mode
  /// and 10 otherwise.
  int metrics_every = 0;
  /// Markov mode only: steps discarded from start_pair before the first update.
  int burn_in = 1000;
  int start_pair = 0;

  void validate() const;
};

struct SoftConfig : TdConfig {
  double beta = 1.0;
};

/// (1 - gamma) / 8 in population mode, min{(1 - gamma) / 8, 1 / sqrt(T)} otherwise.
double default_eta(double gamma, Sampling sampling, int T);

/// One row per update t = 0..T-2, measured at W(t). Columns that are not
/// computed at a given t hold NaN.
struct TraceRow {
  int t = 0;
  double delta = 0;              // sampled residual (stochastic) or NaN
  double displacement = 0;       // ||W(t) - W(0)||
  double dist_to_oracle = 0;     // ||W(t) - W*||
  double lin_err = 0;            // E_mu[(Q0(W(t)) - Q0(W*))^2]
  double net_err = 0;            // E_mu[(Q(W(t)) - Q0(W*))^2]
  double linearization_gap = 0;  // E_mu[(Q(W(t)) - Q0(W(t)))^2]
  double delta_sq = 0;           // E[delta^2] under the sampling law
  double flip_fraction = 0;      // E_mu of the per-pair flip fraction
  double g_norm = 0;             // norm of the direction actually applied
  double gbar_norm = 0;          // ||gbar(t)||
  double gap_norm = 0;           // ||gbar(t) - gbar0(t)||
  double variance = 0;           // E||g(t) - gbar(t)||^2, exact
  double monotone_slack = 0;
  double descent_slack = 0;
};

/// Column names in CSV order.
const std::vector<std::string>& trace_columns();

struct RunTrace {
  std::string algorithm;
  double eta = 0;
  std::vector<TraceRow> rows;
  Vector w_bar;
  Vector w_last;
  /// Q(x; W_bar) on every pair.
  Vector q_out;
  /// pi_out for soft actor-critic, empty otherwise.
  Matrix pi_out;
  /// E_mu[(Q_out - Q0(W*))^2]; NaN without an oracle.
  double final_error = 0;
  /// E_mu[(Q0(W_bar) - Q0(W*))^2]; NaN without an oracle.
  double final_lin_error = 0;
  int metric_rows = 0;
  int ball_violations = 0;
  int monotone_violations = 0;
  int descent_violations = 0;
  int sandwich_violations = 0;
  int softmax_evaluations = 0;
  double max_variance = 0;
};

/// All inputs of one training run. The oracle is optional; without it the
/// oracle-relative columns are NaN.
struct Problem {
  const FiniteMdp* mdp = nullptr;
  const FeatureMap* features = nullptr;
  const QNetwork* net = nullptr;
  const FixedPoint* oracle = nullptr;
};

Problem make_problem(const Environment& env, const QNetwork& net,
                     const FixedPoint* oracle = nullptr);

/// Q(x; w) on every pair.
Vector network_values(const QNetwork& net, const Vector& w, const FeatureMap& features);
/// Q0(x; w) on every pair.
Vector linearized_values(const QNetwork& net, const Vector& w, const FeatureMap& features);

/// Q(x; W) - r - gamma Q(x'; W). Throws ConfigError when a' is missing.
double residual_delta(const QNetwork& net, const Vector& w, const FeatureMap& features,
                      const FiniteMdp& mdp, const Tuple& tuple);
/// Same with Q0.
double residual_delta0(const QNetwork& net, const Vector& w, const FeatureMap& features,
                       const FiniteMdp& mdp, const Tuple& tuple);
/// Q(x; W) - r - gamma max_a' Q(s', a'; W).
double residual_delta_greedy(const QNetwork& net, const Vector& w,
                             const FeatureMap& features, const FiniteMdp& mdp,
                             const Tuple& tuple);
/// Q(x; W) - r - gamma softmax_a' Q(s', a'; W).
double residual_delta_soft(const QNetwork& net, const Vector& w,
                           const FeatureMap& features, const FiniteMdp& mdp,
                           const Tuple& tuple, double beta);

/// Lowest index among the maximizers of Q(s, .; w).
int greedy_action(const QNetwork& net, const Vector& w, const FeatureMap& features,
                  const FiniteMdp& mdp, int s);

/// delta(tuple) * grad Q(x; W).
Vector semigradient_stochastic(const QNetwork& net, const Vector& w,
                               const FeatureMap& features, const FiniteMdp& mdp,
                               const Tuple& tuple);
/// sum over (s, a, s', a') of mu(s,a) P(s'|s,a) pi(a'|s') delta grad Q(x; W).
Vector semigradient_population(const QNetwork& net, const Vector& w,
                               const FeatureMap& features, const FiniteMdp& mdp,
                               const Vector& mu, const Policy& policy);
/// The same with Q and grad Q replaced by Q0 and Phi.
Vector semigradient_linearized_population(const LinearizedFeatures& lin,
                                          const Vector& w, const FiniteMdp& mdp,
                                          const Vector& mu, const Policy& policy);

/// Projected TD(0) with iterate averaging. In population mode the update is the exact expected
/// semigradient under the stationary distribution of policy.
RunTrace neural_td(const Problem& problem, const Policy& policy, const TdConfig& config);

/// Projected Q-learning: tuples from the stationary law of pi_exp, greedy a'.
RunTrace neural_q_learning(const Problem& problem, const Policy& pi_exp,
                           const TdConfig& config);

/// Soft Q-learning: the same loop with a softmax_a' backup.
RunTrace neural_soft_q(const Problem& problem, const Policy& pi_exp,
                       const SoftConfig& config);

/// Soft actor-critic with a uniform reference policy. Sampling is i.i.d. from the
/// exact stationary law of the current Boltzmann policy.
RunTrace soft_actor_critic(const Problem& problem, const SoftConfig& config);

/// pi(a|s) proportional to exp(beta Q(s, a)) with a uniform reference policy.
Policy boltzmann_policy(const FiniteMdp& mdp, const Vector& q, double beta);

/// beta^{-1} log E_{a ~ uniform}[exp(beta Q(s, a))].
double soft_state_value(const Eigen::Ref<const Vector>& q_s, double beta);

/// KL(pi(.|s) || uniform).
double kl_to_uniform(const Eigen::Ref<const Vector>& probs);

/// xi = r - beta^{-1} KL(pi_W(.|s) || uniform) + gamma V(s'; W) - V(s; W), with
/// pi_W the Boltzmann policy of Q(.; W).
double sac_residual(const QNetwork& net, const Vector& w, const FeatureMap& features,
                    const FiniteMdp& mdp, const Tuple& tuple, double beta);

/// J(pi) with the initial state drawn from the stationary state law of pi.
double expected_return(const FiniteMdp& mdp, const Policy& policy);

}  // namespace ntd
