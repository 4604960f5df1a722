#include "ntd/algo.hpp"

#include <cmath>
#include <limits>

namespace ntd {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

TraceRow blank_row(int t) {
  TraceRow row;
  row.t = t;
  row.delta = row.displacement = row.dist_to_oracle = row.lin_err = row.net_err =
      row.linearization_gap = row.delta_sq = row.flip_fraction = row.g_norm =
          row.gbar_norm = row.gap_norm = row.variance = row.monotone_slack =
              row.descent_slack = kNaN;
  return row;
}
}  // namespace

std::string to_string(Sampling sampling) {
  switch (sampling) {
    case Sampling::kPopulation: return "population";
    case Sampling::kIid: return "iid";
    case Sampling::kMarkov: return "markov";
  }
  return "unknown";
}

Sampling parse_sampling(const std::string& text) {
  if (text == "population") return Sampling::kPopulation;
  if (text == "iid") return Sampling::kIid;
  if (text == "markov") return Sampling::kMarkov;
  throw ConfigError("unknown sampling mode '" + text + "'");
}

void TdConfig::validate() const {
  require(!eta || *eta >= 0.0, "stepsize eta must be non-negative");
  require(T >= 2, "T must be at least 2");
  require(metrics_every >= 0, "metrics_every must be non-negative");
  require(burn_in >= 0, "burn_in must be non-negative");
}

double default_eta(double gamma, Sampling sampling, int T) {
  const double base = (1.0 - gamma) / 8.0;
  if (sampling == Sampling::kPopulation) return base;
  return std::min(base, 1.0 / std::sqrt(double(T)));
}

const std::vector<std::string>& trace_columns() {
  static const std::vector<std::string> cols = {
      "t",        "delta",         "displacement", "dist_to_oracle",
      "lin_err",  "net_err",       "linearization_gap", "delta_sq",
      "flip_fraction", "g_norm",   "gbar_norm",    "gap_norm",
      "variance", "monotone_slack", "descent_slack"};
  return cols;
}

Problem make_problem(const Environment& env, const QNetwork& net,
                     const FixedPoint* oracle) {
  require(env.features.dim() == net.input_dim(),
          "feature dimension does not match the network input");
  Problem p;
  p.mdp = &env.mdp;
  p.features = &env.features;
  p.net = &net;
  p.oracle = oracle;
  return p;
}

Vector network_values(const QNetwork& net, const Vector& w, const FeatureMap& features) {
  const int n = static_cast<int>(features.table.rows());
  Vector q(n);
  for (int x = 0; x < n; ++x) q(x) = net.value(w, features.row(x));
  return q;
}

Vector linearized_values(const QNetwork& net, const Vector& w,
                         const FeatureMap& features) {
  const int n = static_cast<int>(features.table.rows());
  Vector q(n);
  for (int x = 0; x < n; ++x) q(x) = net.linearized_value(w, features.row(x));
  return q;
}

namespace {

double next_state_max(const QNetwork& net, const Vector& w, const FeatureMap& features,
                      const FiniteMdp& mdp, int s) {
  const int a = greedy_action(net, w, features, mdp, s);
  return net.value(w, features.row(mdp.pair(s, a)));
}

Vector state_q(const QNetwork& net, const Vector& w, const FeatureMap& features,
               const FiniteMdp& mdp, int s) {
  Vector q(mdp.n_actions);
  for (int a = 0; a < mdp.n_actions; ++a) q(a) = net.value(w, features.row(mdp.pair(s, a)));
  return q;
}

}  // namespace

double residual_delta(const QNetwork& net, const Vector& w, const FeatureMap& features,
                      const FiniteMdp& mdp, const Tuple& tuple) {
  require(tuple.a_next.has_value(), "TD residual needs the next action a'");
  const double q = net.value(w, features.row(mdp.pair(tuple.s, tuple.a)));
  const double q_next = net.value(w, features.row(mdp.pair(tuple.s_next, *tuple.a_next)));
  return q - tuple.r - mdp.gamma * q_next;
}

double residual_delta0(const QNetwork& net, const Vector& w, const FeatureMap& features,
                       const FiniteMdp& mdp, const Tuple& tuple) {
  require(tuple.a_next.has_value(), "TD residual needs the next action a'");
  const double q = net.linearized_value(w, features.row(mdp.pair(tuple.s, tuple.a)));
  const double q_next =
      net.linearized_value(w, features.row(mdp.pair(tuple.s_next, *tuple.a_next)));
  return q - tuple.r - mdp.gamma * q_next;
}

int greedy_action(const QNetwork& net, const Vector& w, const FeatureMap& features,
                  const FiniteMdp& mdp, int s) {
  int best = 0;
  double best_q = net.value(w, features.row(mdp.pair(s, 0)));
  for (int a = 1; a < mdp.n_actions; ++a) {
    const double q = net.value(w, features.row(mdp.pair(s, a)));
    if (q > best_q) {
      best_q = q;
      best = a;
    }
  }
  return best;
}

double residual_delta_greedy(const QNetwork& net, const Vector& w,
                             const FeatureMap& features, const FiniteMdp& mdp,
                             const Tuple& tuple) {
  const double q = net.value(w, features.row(mdp.pair(tuple.s, tuple.a)));
  return q - tuple.r - mdp.gamma * next_state_max(net, w, features, mdp, tuple.s_next);
}

double residual_delta_soft(const QNetwork& net, const Vector& w,
                           const FeatureMap& features, const FiniteMdp& mdp,
                           const Tuple& tuple, double beta) {
  require(beta > 0.0, "softmax temperature beta must be positive");
  const double q = net.value(w, features.row(mdp.pair(tuple.s, tuple.a)));
  const Vector q_next = state_q(net, w, features, mdp, tuple.s_next);
  return q - tuple.r - mdp.gamma * softmax_value(q_next, beta);
}

Vector semigradient_stochastic(const QNetwork& net, const Vector& w,
                               const FeatureMap& features, const FiniteMdp& mdp,
                               const Tuple& tuple) {
  const double delta = residual_delta(net, w, features, mdp, tuple);
  Vector g = Vector::Zero(net.size());
  net.add_grad(w, features.row(mdp.pair(tuple.s, tuple.a)), delta, g);
  return g;
}

namespace {

/// Exact expectations at a fixed W under the sampling law mu and a backup.
struct PopulationStats {
  Vector q;
  Vector gbar;
  double delta_sq = 0;
  double variance = 0;
  double flip = kNaN;
};

PopulationStats population_stats(const QNetwork& net, const Vector& w,
                                 const FeatureMap& features, const FiniteMdp& mdp,
                                 const Vector& mu, const Backup& backup,
                                 bool with_moments) {
  PopulationStats out;
  out.q = network_values(net, w, features);
  const Vector target = apply_bellman(mdp, backup, out.q);
  const Vector v_next = state_values(mdp, backup, out.q);
  out.gbar = Vector::Zero(net.size());
  Vector g(net.size());
  double second = 0.0;
  double flip = 0.0;
  for (int x = 0; x < mdp.n_pairs(); ++x) {
    if (mu(x) <= 0.0) continue;
    const auto feat = features.row(x);
    net.add_grad(w, feat, mu(x) * (out.q(x) - target(x)), out.gbar);
    if (!with_moments) continue;
    g.setZero();
    net.add_grad(w, feat, 1.0, g);
    // E[delta^2 | x]: the next action is random only under evaluation.
    double cond = 0.0;
    for (int s2 = 0; s2 < mdp.n_states; ++s2) {
      const double p = mdp.transition(x, s2);
      if (p == 0.0) continue;
      const double base = out.q(x) - mdp.reward(x);
      if (backup.kind == BackupKind::kEvaluation) {
        for (int a2 = 0; a2 < mdp.n_actions; ++a2) {
          const double pa = backup.policy.probs(s2, a2);
          if (pa == 0.0) continue;
          const double d = base - mdp.gamma * out.q(mdp.pair(s2, a2));
          cond += p * pa * d * d;
        }
      } else {
        const double d = base - mdp.gamma * v_next(s2);
        cond += p * d * d;
      }
    }
    out.delta_sq += mu(x) * cond;
    second += mu(x) * g.squaredNorm() * cond;
    flip += mu(x) * net.flip_fraction(w, feat);
  }
  if (with_moments) {
    out.variance = second - out.gbar.squaredNorm();
    out.flip = flip;
  }
  return out;
}

Vector linearized_gbar(const LinearizedFeatures& lin, const Vector& w,
                       const FiniteMdp& mdp, const Vector& mu, const Backup& backup) {
  const Vector q0 = lin.values(w);
  const Vector resid = q0 - apply_bellman(mdp, backup, q0);
  return lin.phi.transpose() * mu.cwiseProduct(resid);
}

}  // namespace

Vector semigradient_population(const QNetwork& net, const Vector& w,
                               const FeatureMap& features, const FiniteMdp& mdp,
                               const Vector& mu, const Policy& policy) {
  require(mu.size() == mdp.n_pairs(), "measure has wrong length");
  return population_stats(net, w, features, mdp, mu, Backup::evaluation(policy), false)
      .gbar;
}

Vector semigradient_linearized_population(const LinearizedFeatures& lin,
                                          const Vector& w, const FiniteMdp& mdp,
                                          const Vector& mu, const Policy& policy) {
  require(mu.size() == mdp.n_pairs(), "measure has wrong length");
  return linearized_gbar(lin, w, mdp, mu, Backup::evaluation(policy));
}

namespace {

struct LoopSpec {
  std::string name;
  Backup backup;
  Policy behaviour;
  bool draw_next_action = true;
};

RunTrace run_loop(const Problem& problem, const LoopSpec& spec, const TdConfig& config) {
  require(problem.mdp && problem.features && problem.net, "incomplete problem");
  config.validate();
  const FiniteMdp& mdp = *problem.mdp;
  const FeatureMap& features = *problem.features;
  const QNetwork& net = *problem.net;
  require(features.dim() == net.input_dim(),
          "feature dimension does not match the network input");
  require(config.start_pair >= 0 && config.start_pair < mdp.n_pairs(),
          "start_pair out of range");
  const bool population = config.sampling == Sampling::kPopulation;
  const double eta = config.eta ? *config.eta
                                : default_eta(mdp.gamma, config.sampling, config.T);
  const int stride = config.metrics_every > 0 ? config.metrics_every : (population ? 1 : 10);
  const double B = config.spec.B;

  const Vector mu = stationary_distribution(mdp, spec.behaviour).probs;
  const LinearizedFeatures lin = ntk_features(net, features);

  const FixedPoint* oracle = problem.oracle;
  if (oracle) {
    require(oracle->w_star.size() == net.size(), "oracle does not match the network");
  }
  Vector gbar0_star;
  if (oracle) gbar0_star = linearized_gbar(lin, oracle->w_star, mdp, mu, spec.backup);
  const bool evaluation = spec.backup.kind == BackupKind::kEvaluation;

  IidSampler iid(mdp, spec.behaviour, StationaryDist{mu});
  MarkovSampler chain(mdp, spec.behaviour, config.start_pair);
  CounterRng rng(config.seed, Stream::kSampling);
  if (config.sampling == Sampling::kMarkov) {
    for (int i = 0; i < config.burn_in; ++i) chain(rng);
  }

  RunTrace trace;
  trace.algorithm = spec.name;
  trace.eta = eta;
  trace.rows.reserve(static_cast<size_t>(config.T - 1));

  Vector w = net.initial();
  Vector w_bar = w;
  Vector scratch(net.size());

  for (int t = 0; t + 1 < config.T; ++t) {
    TraceRow row = blank_row(t);
    row.displacement = net.displacement(w);
    const bool measure = (t % stride) == 0;

    PopulationStats stats;
    Vector gbar0;
    if (measure) {
      stats = population_stats(net, w, features, mdp, mu, spec.backup, true);
      gbar0 = linearized_gbar(lin, w, mdp, mu, spec.backup);
      const Vector q0 = lin.values(w);
      row.linearization_gap = mu_norm_sq(stats.q, q0, mu);
      row.delta_sq = stats.delta_sq;
      row.flip_fraction = stats.flip;
      row.gbar_norm = stats.gbar.norm();
      row.gap_norm = (stats.gbar - gbar0).norm();
      row.variance = stats.variance;
      trace.max_variance = std::max(trace.max_variance, stats.variance);
      if (oracle) {
        row.dist_to_oracle = (w - oracle->w_star).norm();
        row.lin_err = mu_norm_sq(q0, oracle->q_values, mu);
        row.net_err = mu_norm_sq(stats.q, oracle->q_values, mu);
        if (evaluation) {
          row.monotone_slack = (gbar0 - gbar0_star).dot(w - oracle->w_star) -
                               (1.0 - mdp.gamma) * row.lin_err;
          if (row.monotone_slack < -1e-9) ++trace.monotone_violations;
        }
      }
      ++trace.metric_rows;
    }

    if (population) {
      if (!measure) {
        stats = population_stats(net, w, features, mdp, mu, spec.backup, false);
      }
      row.g_norm = stats.gbar.norm();
      w.noalias() -= eta * stats.gbar;
    } else {
      const Tuple tuple = config.sampling == Sampling::kIid
                              ? iid(rng, spec.draw_next_action)
                              : chain(rng, spec.draw_next_action);
      const auto x = features.row(mdp.pair(tuple.s, tuple.a));
      const double q = net.value(w, x);
      double v_next = 0.0;
      switch (spec.backup.kind) {
        case BackupKind::kEvaluation:
          v_next = net.value(w, features.row(mdp.pair(tuple.s_next, *tuple.a_next)));
          break;
        case BackupKind::kMax:
          v_next = next_state_max(net, w, features, mdp, tuple.s_next);
          break;
        case BackupKind::kSoft: {
          const Vector qs = state_q(net, w, features, mdp, tuple.s_next);
          v_next = softmax_value(qs, spec.backup.beta);
          const double gap = v_next - qs.maxCoeff();
          ++trace.softmax_evaluations;
          if (gap < 0.0 || gap > std::log(double(mdp.n_actions)) / spec.backup.beta) {
            ++trace.sandwich_violations;
          }
          break;
        }
      }
      const double delta = q - tuple.r - mdp.gamma * v_next;
      row.delta = delta;
      if (measure) {
        scratch.setZero();
        net.add_grad(w, x, delta, scratch);
        row.g_norm = scratch.norm();
      }
      // Same arithmetic on every row, so the path does not depend on the stride.
      net.add_grad(w, x, -eta * delta, w);
    }

    net.project(w, config.spec);
    if (net.displacement(w) > B + 1e-9) ++trace.ball_violations;

    if (measure && population && oracle && evaluation) {
      const double e = row.gap_norm;
      const double rhs = row.dist_to_oracle * row.dist_to_oracle -
                         (2.0 * eta * (1.0 - mdp.gamma) - 8.0 * eta * eta) * row.lin_err +
                         2.0 * eta * eta * e * e + 2.0 * eta * B * e;
      const double lhs = (w - oracle->w_star).squaredNorm();
      row.descent_slack = rhs - lhs;
      if (row.descent_slack < -1e-9) ++trace.descent_violations;
    }

    const double k = double(t + 1);
    w_bar = (k / (k + 1.0)) * w_bar + (1.0 / (k + 1.0)) * w;
    trace.rows.push_back(row);
  }

  trace.w_last = w;
  trace.w_bar = w_bar;
  trace.q_out = network_values(net, w_bar, features);
  if (oracle) {
    trace.final_error = mu_norm_sq(trace.q_out, oracle->q_values, mu);
    trace.final_lin_error = mu_norm_sq(lin.values(w_bar), oracle->q_values, mu);
  } else {
    trace.final_error = kNaN;
    trace.final_lin_error = kNaN;
  }
  return trace;
}

}  // namespace

RunTrace neural_td(const Problem& problem, const Policy& policy, const TdConfig& config) {
  require(problem.mdp != nullptr, "incomplete problem");
  policy.validate(*problem.mdp);
  return run_loop(problem, {"td", Backup::evaluation(policy), policy, true}, config);
}

RunTrace neural_q_learning(const Problem& problem, const Policy& pi_exp,
                           const TdConfig& config) {
  require(problem.mdp != nullptr, "incomplete problem");
  pi_exp.validate(*problem.mdp, /*strictly_positive=*/true);
  require(config.sampling != Sampling::kPopulation,
          "population mode is only available for td");
  return run_loop(problem, {"qlearn", Backup::max(), pi_exp, false}, config);
}

RunTrace neural_soft_q(const Problem& problem, const Policy& pi_exp,
                       const SoftConfig& config) {
  require(problem.mdp != nullptr, "incomplete problem");
  require(config.beta > 0.0, "softmax temperature beta must be positive");
  pi_exp.validate(*problem.mdp, /*strictly_positive=*/true);
  require(config.sampling != Sampling::kPopulation,
          "population mode is only available for td");
  return run_loop(problem, {"softq", Backup::soft(config.beta), pi_exp, false}, config);
}

Policy boltzmann_policy(const FiniteMdp& mdp, const Vector& q, double beta) {
  require(beta > 0.0, "softmax temperature beta must be positive");
  require(q.size() == mdp.n_pairs(), "Q table has wrong length");
  Policy pi;
  pi.probs.resize(mdp.n_states, mdp.n_actions);
  for (int s = 0; s < mdp.n_states; ++s) {
    const auto qs = q.segment(s * mdp.n_actions, mdp.n_actions);
    const Eigen::ArrayXd e = (beta * (qs.array() - qs.maxCoeff())).exp();
    pi.probs.row(s) = (e / e.sum()).matrix().transpose();
  }
  return pi;
}

double soft_state_value(const Eigen::Ref<const Vector>& q_s, double beta) {
  return softmax_value(q_s, beta) - std::log(double(q_s.size())) / beta;
}

double kl_to_uniform(const Eigen::Ref<const Vector>& probs) {
  const double n = double(probs.size());
  double kl = 0.0;
  for (Index a = 0; a < probs.size(); ++a) {
    if (probs(a) > 0.0) kl += probs(a) * std::log(probs(a) * n);
  }
  return kl;
}

namespace {

double boltzmann_kl(const Vector& qs, double beta) {
  const Eigen::ArrayXd e = (beta * (qs.array() - qs.maxCoeff())).exp();
  const Vector p = (e / e.sum()).matrix();
  return kl_to_uniform(p);
}

}  // namespace

double sac_residual(const QNetwork& net, const Vector& w, const FeatureMap& features,
                    const FiniteMdp& mdp, const Tuple& tuple, double beta) {
  require(beta > 0.0, "softmax temperature beta must be positive");
  const Vector qs = state_q(net, w, features, mdp, tuple.s);
  const Vector qn = state_q(net, w, features, mdp, tuple.s_next);
  const double r_kl = tuple.r - boltzmann_kl(qs, beta) / beta;
  return r_kl + mdp.gamma * soft_state_value(qn, beta) - soft_state_value(qs, beta);
}

RunTrace soft_actor_critic(const Problem& problem, const SoftConfig& config) {
  require(problem.mdp && problem.features && problem.net, "incomplete problem");
  config.validate();
  require(config.beta > 0.0, "softmax temperature beta must be positive");
  require(config.sampling == Sampling::kIid,
          "soft actor-critic samples i.i.d. from the current stationary law");
  const FiniteMdp& mdp = *problem.mdp;
  const FeatureMap& features = *problem.features;
  const QNetwork& net = *problem.net;
  const double beta = config.beta;
  const double eta = config.eta ? *config.eta
                                : default_eta(mdp.gamma, config.sampling, config.T);
  const int nA = mdp.n_actions;

  std::vector<Categorical> next_state;
  next_state.reserve(static_cast<size_t>(mdp.n_pairs()));
  for (int x = 0; x < mdp.n_pairs(); ++x) next_state.emplace_back(mdp.transition.row(x).transpose());

  CounterRng rng(config.seed, Stream::kSampling);
  RunTrace trace;
  trace.algorithm = "sac";
  trace.eta = eta;
  trace.rows.reserve(static_cast<size_t>(config.T - 1));

  Vector w = net.initial();
  Vector w_bar = w;
  std::vector<Vector> grads(static_cast<size_t>(nA), Vector(net.size()));

  for (int t = 0; t + 1 < config.T; ++t) {
    TraceRow row = blank_row(t);
    row.displacement = net.displacement(w);

    const Vector q = network_values(net, w, features);
    const Policy pi = boltzmann_policy(mdp, q, beta);
    StationaryDist mu_t;
    try {
      mu_t = stationary_distribution(mdp, pi);
    } catch (const SolverError& e) {
      throw SolverError("soft actor-critic aborted at iteration " + std::to_string(t) +
                        ": " + e.what());
    }
    const Categorical pairs(mu_t.probs);
    const int x = pairs(rng);
    const int s = mdp.state_of(x);
    const int a = mdp.action_of(x);
    const int s2 = next_state[static_cast<size_t>(x)](rng);

    const Vector qs = q.segment(s * nA, nA);
    const Vector qn = q.segment(s2 * nA, nA);
    const Vector pis = pi.probs.row(s).transpose();
    const double r_kl = mdp.reward(x) - kl_to_uniform(pis) / beta;
    const double xi = r_kl + mdp.gamma * soft_state_value(qn, beta) - soft_state_value(qs, beta);
    row.delta = xi;

    for (int b = 0; b < nA; ++b) {
      auto& g = grads[static_cast<size_t>(b)];
      g.setZero();
      net.add_grad(w, features.row(mdp.pair(s, b)), 1.0, g);
    }
    Vector grad_v = Vector::Zero(net.size());
    for (int b = 0; b < nA; ++b) grad_v.noalias() += pis(b) * grads[static_cast<size_t>(b)];
    // grad log pi(a|s) = beta (grad Q_a - grad V); beta^{-2} grad KL = sum_b pi_b (Q_b - Qbar) grad Q_b.
    const Vector grad_log_pi = beta * (grads[static_cast<size_t>(a)] - grad_v);
    const double q_mean = pis.dot(qs);
    Vector grad_kl_scaled = Vector::Zero(net.size());
    for (int b = 0; b < nA; ++b) {
      grad_kl_scaled.noalias() += pis(b) * (qs(b) - q_mean) * grads[static_cast<size_t>(b)];
    }
    // Actor step, then critic step, both at W(t).
    w.noalias() += eta * ((xi / beta) * grad_log_pi - grad_kl_scaled);
    w.noalias() += (eta * xi) * grad_v;
    net.project(w, config.spec);
    if (net.displacement(w) > config.spec.B + 1e-9) ++trace.ball_violations;

    const double k = double(t + 1);
    w_bar = (k / (k + 1.0)) * w_bar + (1.0 / (k + 1.0)) * w;
    trace.rows.push_back(row);
  }

  trace.w_last = w;
  trace.w_bar = w_bar;
  trace.q_out = network_values(net, w_bar, features);
  trace.pi_out = boltzmann_policy(mdp, trace.q_out, beta).probs;
  trace.final_error = kNaN;
  trace.final_lin_error = kNaN;
  return trace;
}

double expected_return(const FiniteMdp& mdp, const Policy& policy) {
  const Vector q = q_pi_exact(mdp, policy);
  const Vector mu_s = stationary_distribution(mdp, policy).state_marginal(mdp);
  double j = 0.0;
  for (int s = 0; s < mdp.n_states; ++s) {
    j += mu_s(s) * policy.probs.row(s).dot(q.segment(s * mdp.n_actions, mdp.n_actions));
  }
  return j;
}

}  // namespace ntd
