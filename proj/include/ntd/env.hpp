#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ntd/rng.hpp"
#include "ntd/types.hpp"

namespace ntd {

/// Finite MDP over state-action pairs. Pair index x = s * n_actions + a.
struct FiniteMdp {
  int n_states = 0;
  int n_actions = 0;
  /// (n_states * n_actions) x n_states, row x holds P(. | s, a).
  Matrix transition;
  /// Reward per pair.
  Vector reward;
  double gamma = 0.9;
  double r_bar = 1.0;

  int n_pairs() const { return n_states * n_actions; }
  int pair(int s, int a) const { return s * n_actions + a; }
  int state_of(int x) const { return x / n_actions; }
  int action_of(int x) const { return x % n_actions; }

  /// Throws ConfigError on any broken invariant.
  void validate() const;
};

/// Unit-norm embedding psi(s, a); row x is the feature of pair x.
struct FeatureMap {
  Matrix table;

  int dim() const { return static_cast<int>(table.cols()); }
  auto row(int x) const { return table.row(x).transpose(); }
  void validate(int n_pairs) const;
};

/// pi(a | s), n_states x n_actions.
struct Policy {
  Matrix probs;

  static Policy uniform(int n_states, int n_actions);
  void validate(const FiniteMdp& mdp, bool strictly_positive = false) const;
};

/// Distribution over state-action pairs.
struct StationaryDist {
  Vector probs;

  Vector state_marginal(const FiniteMdp& mdp) const;
};

struct Tuple {
  int s = 0;
  int a = 0;
  double r = 0.0;
  int s_next = 0;
  std::optional<int> a_next;
};

/// Pair-to-pair transition matrix P_pi(x, x') = P(s'|x) pi(a'|s').
Matrix pair_chain(const FiniteMdp& mdp, const Policy& policy);

/// State-to-state matrix P_S(s, s') = sum_a pi(a|s) P(s'|s,a).
Matrix state_chain(const FiniteMdp& mdp, const Policy& policy);

/// Power iteration on the pair chain from the uniform distribution. Throws
/// SolverError("chain not mixing ...") when the TV change does not fall below
/// tol within max_iters.
StationaryDist stationary_distribution(const FiniteMdp& mdp,
                                       const Policy& policy,
                                       double tol = 1e-12,
                                       int max_iters = 100000);

/// Inverse-CDF sampler over a fixed discrete law.
class Categorical {
 public:
  Categorical() = default;
  explicit Categorical(const Eigen::Ref<const Vector>& probs);
  int operator()(CounterRng& rng) const;
  int size() const { return static_cast<int>(cdf_.size()); }

 private:
  std::vector<double> cdf_;
};

/// Draws (s, a) ~ mu, s' ~ P(.|s,a), a' ~ pi(.|s'). a' is always drawn so that
/// the random stream is the same with and without it; with_next_action=false
/// drops it from the returned tuple.
class IidSampler {
 public:
  IidSampler(const FiniteMdp& mdp, const Policy& policy,
             const StationaryDist& mu);
  Tuple operator()(CounterRng& rng, bool with_next_action = true) const;

 private:
  const FiniteMdp* mdp_;
  Categorical pairs_;
  std::vector<Categorical> next_state_;
  std::vector<Categorical> next_action_;
};

/// Sequential sampler along the pair chain. Each call emits the tuple rooted at
/// the current pair and moves to (s', a').
class MarkovSampler {
 public:
  MarkovSampler(const FiniteMdp& mdp, const Policy& policy, int start_pair);
  Tuple operator()(CounterRng& rng, bool with_next_action = true);
  int current_pair() const { return current_; }

 private:
  const FiniteMdp* mdp_;
  std::vector<Categorical> next_state_;
  std::vector<Categorical> next_action_;
  int current_;
};

Tuple sample_iid(const FiniteMdp& mdp, const Policy& policy,
                 const StationaryDist& mu, CounterRng& rng);

/// Returns the emitted tuple and the next chain state (pair index).
std::pair<Tuple, int> sample_markov(int chain_pair, const FiniteMdp& mdp,
                                    const Policy& policy, CounterRng& rng);

struct MixingCurve {
  /// curve[t] = sup_s d_TV(P_t(.|s), mu_S), t = 0..horizon-1.
  std::vector<double> curve;
  /// Log-linear fit curve[t] ~ iota * beta^t over the non-negligible part.
  double iota = 0.0;
  double beta = 0.0;
  bool mixing = true;
};

MixingCurve estimate_mixing(const FiniteMdp& mdp, const Policy& policy,
                            int horizon);

struct RandomMdpSpec {
  int n_states = 5;
  int n_actions = 2;
  int d = 8;
  int branching = 3;
  double gamma = 0.9;
  std::uint64_t seed = 0;
};

struct Environment {
  FiniteMdp mdp;
  FeatureMap features;
};

/// Garnet-style generator: `branching` distinct successors per pair with
/// Dirichlet(1) weights, rewards uniform in [-1, 1], features uniform on the
/// unit sphere in R^d.
Environment build_random_mdp(const RandomMdpSpec& spec);

Environment load_environment(const std::string& path);
void save_environment(const Environment& env, const std::string& path);

/// Parses "garnet:states=5,actions=2,d=8,branching=3,gamma=0.9,seed=1".
RandomMdpSpec parse_generator_spec(const std::string& text);

/// File path if it exists, otherwise a generator spec.
Environment resolve_environment(const std::string& text);

/// Deterministic content hash of the serialized environment (hex, 16 chars).
std::string content_hash(const Environment& env);

}  // namespace ntd
