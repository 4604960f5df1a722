#include "ntd/env.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <sstream>

#include "ntd/io.hpp"

namespace ntd {

void FiniteMdp::validate() const {
  require(n_states > 0 && n_actions > 0, "MDP needs at least one pair");
  require(transition.rows() == n_pairs() && transition.cols() == n_states,
          "transition has wrong shape");
  require(reward.size() == n_pairs(), "reward has wrong length");
  require(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
  require(transition.minCoeff() >= 0.0, "negative transition probability");
  for (int x = 0; x < n_pairs(); ++x) {
    require(std::abs(transition.row(x).sum() - 1.0) <= 1e-12,
            "transition row does not sum to one");
  }
  require(reward.cwiseAbs().maxCoeff() <= r_bar, "reward exceeds r_bar");
}

void FeatureMap::validate(int n_pairs) const {
  require(table.rows() == n_pairs, "feature table has wrong row count");
  require(dim() > 2, "feature dimension must exceed 2");
  for (int x = 0; x < n_pairs; ++x) {
    require(std::abs(table.row(x).norm() - 1.0) <= 1e-12,
            "feature vector is not unit norm");
    for (int y = 0; y < x; ++y) {
      require((table.row(x) - table.row(y)).norm() > 1e-9,
              "feature map is not injective");
    }
  }
}

Policy Policy::uniform(int n_states, int n_actions) {
  return Policy{Matrix::Constant(n_states, n_actions, 1.0 / n_actions)};
}

void Policy::validate(const FiniteMdp& mdp, bool strictly_positive) const {
  require(probs.rows() == mdp.n_states && probs.cols() == mdp.n_actions,
          "policy has wrong shape");
  require(probs.minCoeff() >= 0.0, "negative policy probability");
  if (strictly_positive) {
    require(probs.minCoeff() > 0.0,
            "exploration policy must be strictly positive");
  }
  for (int s = 0; s < mdp.n_states; ++s) {
    require(std::abs(probs.row(s).sum() - 1.0) <= 1e-12,
            "policy row does not sum to one");
  }
}

Vector StationaryDist::state_marginal(const FiniteMdp& mdp) const {
  Vector out = Vector::Zero(mdp.n_states);
  for (int x = 0; x < mdp.n_pairs(); ++x) out(mdp.state_of(x)) += probs(x);
  return out;
}

Matrix pair_chain(const FiniteMdp& mdp, const Policy& policy) {
  const int n = mdp.n_pairs();
  Matrix chain(n, n);
  for (int x = 0; x < n; ++x) {
    for (int s2 = 0; s2 < mdp.n_states; ++s2) {
      for (int a2 = 0; a2 < mdp.n_actions; ++a2) {
        chain(x, mdp.pair(s2, a2)) =
            mdp.transition(x, s2) * policy.probs(s2, a2);
      }
    }
  }
  return chain;
}

Matrix state_chain(const FiniteMdp& mdp, const Policy& policy) {
  Matrix chain = Matrix::Zero(mdp.n_states, mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s) {
    for (int a = 0; a < mdp.n_actions; ++a) {
      chain.row(s) += policy.probs(s, a) * mdp.transition.row(mdp.pair(s, a));
    }
  }
  return chain;
}

StationaryDist stationary_distribution(const FiniteMdp& mdp,
                                       const Policy& policy, double tol,
                                       int max_iters) {
  const Matrix chain_t = pair_chain(mdp, policy).transpose();
  const int n = mdp.n_pairs();
  Vector mu = Vector::Constant(n, 1.0 / n);
  double tv = 0.0;
  for (int it = 0; it < max_iters; ++it) {
    Vector next = chain_t * mu;
    next /= next.sum();
    tv = 0.5 * (next - mu).cwiseAbs().sum();
    mu = std::move(next);
    if (tv < tol) return StationaryDist{mu};
  }
  std::ostringstream msg;
  msg << "chain not mixing: TV change " << tv << " after " << max_iters
      << " power iterations";
  throw SolverError(msg.str());
}

Categorical::Categorical(const Eigen::Ref<const Vector>& probs) {
  cdf_.resize(static_cast<size_t>(probs.size()));
  double acc = 0.0;
  for (Index i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    cdf_[static_cast<size_t>(i)] = acc;
  }
  for (double& c : cdf_) c /= acc;
}

int Categorical::operator()(CounterRng& rng) const {
  const double u = rng.uniform();
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  const auto idx = std::distance(cdf_.begin(), it);
  // Trailing zero-probability entries share the final cdf value of 1.
  return static_cast<int>(std::min<std::ptrdiff_t>(
      idx, static_cast<std::ptrdiff_t>(cdf_.size()) - 1));
}

namespace {

void build_kernels(const FiniteMdp& mdp, const Policy& policy,
                   std::vector<Categorical>& next_state,
                   std::vector<Categorical>& next_action) {
  next_state.clear();
  next_action.clear();
  for (int x = 0; x < mdp.n_pairs(); ++x) {
    next_state.emplace_back(mdp.transition.row(x).transpose());
  }
  for (int s = 0; s < mdp.n_states; ++s) {
    next_action.emplace_back(policy.probs.row(s).transpose());
  }
}

}  // namespace

IidSampler::IidSampler(const FiniteMdp& mdp, const Policy& policy,
                       const StationaryDist& mu)
    : mdp_(&mdp), pairs_(mu.probs) {
  build_kernels(mdp, policy, next_state_, next_action_);
}

Tuple IidSampler::operator()(CounterRng& rng, bool with_next_action) const {
  const int x = pairs_(rng);
  Tuple t;
  t.s = mdp_->state_of(x);
  t.a = mdp_->action_of(x);
  t.r = mdp_->reward(x);
  t.s_next = next_state_[static_cast<size_t>(x)](rng);
  const int a_next = next_action_[static_cast<size_t>(t.s_next)](rng);
  if (with_next_action) t.a_next = a_next;
  return t;
}

MarkovSampler::MarkovSampler(const FiniteMdp& mdp, const Policy& policy,
                             int start_pair)
    : mdp_(&mdp), current_(start_pair) {
  require(start_pair >= 0 && start_pair < mdp.n_pairs(),
          "start pair out of range");
  build_kernels(mdp, policy, next_state_, next_action_);
}

Tuple MarkovSampler::operator()(CounterRng& rng, bool with_next_action) {
  Tuple t;
  t.s = mdp_->state_of(current_);
  t.a = mdp_->action_of(current_);
  t.r = mdp_->reward(current_);
  t.s_next = next_state_[static_cast<size_t>(current_)](rng);
  const int a_next = next_action_[static_cast<size_t>(t.s_next)](rng);
  if (with_next_action) t.a_next = a_next;
  current_ = mdp_->pair(t.s_next, a_next);
  return t;
}

Tuple sample_iid(const FiniteMdp& mdp, const Policy& policy,
                 const StationaryDist& mu, CounterRng& rng) {
  return IidSampler(mdp, policy, mu)(rng);
}

std::pair<Tuple, int> sample_markov(int chain_pair, const FiniteMdp& mdp,
                                    const Policy& policy, CounterRng& rng) {
  MarkovSampler sampler(mdp, policy, chain_pair);
  Tuple t = sampler(rng);
  return {t, sampler.current_pair()};
}

MixingCurve estimate_mixing(const FiniteMdp& mdp, const Policy& policy,
                            int horizon) {
  require(horizon >= 2, "mixing horizon must be at least 2");
  const Vector mu_s = stationary_distribution(mdp, policy).state_marginal(mdp);
  const Matrix chain = state_chain(mdp, policy);
  Matrix power = Matrix::Identity(mdp.n_states, mdp.n_states);

  MixingCurve out;
  out.curve.reserve(static_cast<size_t>(horizon));
  for (int t = 0; t < horizon; ++t) {
    double sup_tv = 0.0;
    for (int s = 0; s < mdp.n_states; ++s) {
      sup_tv = std::max(
          sup_tv, 0.5 * (power.row(s).transpose() - mu_s).cwiseAbs().sum());
    }
    out.curve.push_back(sup_tv);
    power = power * chain;
  }

  // Points below 1e-10 are dominated by rounding and would bias the slope.
  std::vector<double> ts, logs;
  for (int t = 0; t < horizon; ++t) {
    if (out.curve[static_cast<size_t>(t)] > 1e-10) {
      ts.push_back(t);
      logs.push_back(std::log(out.curve[static_cast<size_t>(t)]));
    }
  }
  if (ts.size() < 2) {
    out.iota = out.curve.front();
    out.beta = 0.0;
    out.mixing = true;
    return out;
  }
  const double n = static_cast<double>(ts.size());
  const double mt = std::accumulate(ts.begin(), ts.end(), 0.0) / n;
  const double ml = std::accumulate(logs.begin(), logs.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (size_t i = 0; i < ts.size(); ++i) {
    sxy += (ts[i] - mt) * (logs[i] - ml);
    sxx += (ts[i] - mt) * (ts[i] - mt);
  }
  const double slope = sxy / sxx;
  out.beta = std::exp(slope);
  out.iota = std::exp(ml - slope * mt);
  out.mixing = out.beta < 1.0 - 1e-9;
  return out;
}

Environment build_random_mdp(const RandomMdpSpec& spec) {
  require(spec.n_states > 0 && spec.n_actions > 0,
          "n_states * n_actions must be positive");
  require(spec.branching >= 1 && spec.branching <= spec.n_states,
          "branching must lie in [1, n_states]");
  require(spec.d > 2, "feature dimension must exceed 2");
  require(spec.gamma > 0.0 && spec.gamma < 1.0, "gamma must lie in (0, 1)");

  CounterRng rng(spec.seed, Stream::kEnvironment);
  Environment env;
  FiniteMdp& mdp = env.mdp;
  mdp.n_states = spec.n_states;
  mdp.n_actions = spec.n_actions;
  mdp.gamma = spec.gamma;
  mdp.r_bar = 1.0;
  const int n = mdp.n_pairs();
  mdp.transition = Matrix::Zero(n, spec.n_states);
  mdp.reward.resize(n);

  std::vector<int> states(static_cast<size_t>(spec.n_states));
  for (int x = 0; x < n; ++x) {
    std::iota(states.begin(), states.end(), 0);
    double total = 0.0;
    std::vector<double> w(static_cast<size_t>(spec.branching));
    for (int k = 0; k < spec.branching; ++k) {
      const int j =
          k + static_cast<int>(rng.uniform() * (spec.n_states - k));
      std::swap(states[static_cast<size_t>(k)], states[static_cast<size_t>(j)]);
      w[static_cast<size_t>(k)] = -std::log1p(-rng.uniform());
      total += w[static_cast<size_t>(k)];
    }
    for (int k = 0; k < spec.branching; ++k) {
      mdp.transition(x, states[static_cast<size_t>(k)]) =
          w[static_cast<size_t>(k)] / total;
    }
    mdp.reward(x) = 2.0 * rng.uniform() - 1.0;
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  env.features.table.resize(n, spec.d);
  for (int x = 0; x < n; ++x) {
    for (int k = 0; k < spec.d; ++k) env.features.table(x, k) = normal(rng);
    env.features.table.row(x).normalize();
  }
  mdp.validate();
  env.features.validate(n);
  return env;
}

Environment load_environment(const std::string& path) {
  return environment_from_json(read_json_file(path));
}

void save_environment(const Environment& env, const std::string& path) {
  write_text_file(path, to_json(env).dump(1) + "\n");
}

RandomMdpSpec parse_generator_spec(const std::string& text) {
  std::string body = text;
  const std::string prefix = "garnet:";
  if (body.rfind(prefix, 0) == 0) body = body.substr(prefix.size());
  RandomMdpSpec spec;
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    require(eq != std::string::npos, "generator spec item needs key=value: " + item);
    const std::string key = item.substr(0, eq);
    const std::string value = item.substr(eq + 1);
    try {
      if (key == "states") spec.n_states = std::stoi(value);
      else if (key == "actions") spec.n_actions = std::stoi(value);
      else if (key == "d") spec.d = std::stoi(value);
      else if (key == "branching") spec.branching = std::stoi(value);
      else if (key == "gamma") spec.gamma = std::stod(value);
      else if (key == "seed") spec.seed = std::stoull(value);
      else throw ConfigError("unknown generator key: " + key);
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const ConfigError*>(&e)) throw;
      throw ConfigError("bad value for generator key " + key);
    }
  }
  return spec;
}

Environment resolve_environment(const std::string& text) {
  if (std::filesystem::exists(text)) return load_environment(text);
  return build_random_mdp(parse_generator_spec(text));
}

std::string content_hash(const Environment& env) {
  return fnv1a_hex(to_json(env).dump());
}

}  // namespace ntd
