#include <doctest.h>

#include <random>

#include "ntd/algo.hpp"
#include "ntd/harness.hpp"
#include "support/mdps.hpp"

using namespace ntd;

namespace {

struct Bench {
  Environment env;
  TwoLayerModel model;
  Policy pi;
  Vector mu;

  Bench(Environment e, int m, std::uint64_t seed = 0)
      : env(std::move(e)),
        model(init_two_layer<double>(m, env.features.dim(), seed)),
        pi(Policy::uniform(env.mdp.n_states, env.mdp.n_actions)),
        mu(stationary_distribution(env.mdp, pi).probs) {}

  Problem problem(const FixedPoint* fp = nullptr) const { return make_problem(env, model, fp); }
};

/// m = 2, b = (1, -1), W1 = (1, 0, 0), W2 = (-1, 1, 0).
TwoLayerModel tiny_model() {
  TwoLayerNet<double> net;
  net.m = 2;
  net.d = 3;
  net.b = Vector(2);
  net.b << 1.0, -1.0;
  net.W0 = Matrix(2, 3);
  net.W0 << 1.0, 0.0, 0.0, -1.0, 1.0, 0.0;
  net.W = net.W0;
  return TwoLayerModel(net);
}

Vector jitter(const Vector& w, double scale, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n(0.0, scale);
  Vector out = w;
  for (Index i = 0; i < out.size(); ++i) out(i) += n(gen);
  return out;
}

}  // namespace

TEST_CASE("bellman residual examples") {
  const auto model = tiny_model();
  auto mdp = fixtures::blank(2, 1, 0.9);
  mdp.transition(0, 1) = 1.0;
  mdp.transition(1, 1) = 1.0;
  FeatureMap fm;
  fm.table = Matrix::Zero(2, 3);
  fm.table(0, 0) = 1.0;  // x  = (1, 0, 0)
  fm.table(1, 1) = 1.0;  // x' = (0, 1, 0)
  const Vector w = model.initial();

  SUBCASE("zero network") {
    Tuple t{0, 0, 1.0, 1, 0};
    CHECK(residual_delta(model, Vector::Zero(6), fm, mdp, t) == -1.0);
  }
  SUBCASE("self loop") {
    Tuple t{1, 0, 0.0, 1, 0};
    const double q = model.value(w, fm.row(1));
    CHECK(residual_delta(model, w, fm, mdp, t) == doctest::Approx((1 - 0.9) * q).epsilon(1e-15));
  }
  SUBCASE("hand evaluation") {
    Tuple t{0, 0, 0.5, 1, 0};
    // Q(x) = (relu(1) - relu(-1)) / sqrt 2, Q(x') = (relu(0) - relu(1)) / sqrt 2.
    const double qx = 1.0 / std::sqrt(2.0), qn = -1.0 / std::sqrt(2.0);
    CHECK(model.value(w, fm.row(0)) == doctest::Approx(qx).epsilon(1e-15));
    CHECK(residual_delta(model, w, fm, mdp, t) ==
          doctest::Approx(qx - 0.5 - 0.9 * qn).epsilon(1e-15));
    CHECK(residual_delta0(model, w, fm, mdp, t) ==
          doctest::Approx(qx - 0.5 - 0.9 * qn).epsilon(1e-15));
  }
  SUBCASE("missing next action") {
    Tuple t{0, 0, 0.5, 1, std::nullopt};
    CHECK_THROWS_AS(residual_delta(model, w, fm, mdp, t), ConfigError);
    CHECK_THROWS_AS(residual_delta0(model, w, fm, mdp, t), ConfigError);
  }
}

TEST_CASE("population semigradients") {
  Bench b(fixtures::garnet(4, 2, 0.9, 3, 4), 8, 1);
  SUBCASE("zero rewards at the zero network give zero") {
    auto env = b.env;
    env.mdp.reward.setZero();
    const Vector g = semigradient_population(b.model, Vector::Zero(b.model.size()), env.features,
                                             env.mdp, b.mu, b.pi);
    CHECK(g.norm() == 0.0);
  }
  SUBCASE("network and linearization agree at the initialization") {
    const auto lin = ntk_features(b.model, b.env.features);
    const Vector g = semigradient_population(b.model, b.model.initial(), b.env.features,
                                             b.env.mdp, b.mu, b.pi);
    const Vector g0 = semigradient_linearized_population(lin, b.model.initial(), b.env.mdp, b.mu, b.pi);
    // Same values and activation patterns; only the summation order differs.
    CHECK((g - g0).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SUBCASE("monte carlo mean of stochastic semigradients") {
    const Vector w = jitter(b.model.initial(), 0.05, 4);
    const Vector gbar =
        semigradient_population(b.model, w, b.env.features, b.env.mdp, b.mu, b.pi);
    const IidSampler sampler(b.env.mdp, b.pi, StationaryDist{b.mu});
    CounterRng rng(7, Stream::kSampling);
    const int n = 1000000;
    Vector sum = Vector::Zero(w.size()), sum_sq = Vector::Zero(w.size());
    for (int i = 0; i < n; ++i) {
      const Vector g = semigradient_stochastic(b.model, w, b.env.features, b.env.mdp, sampler(rng));
      sum += g;
      sum_sq += g.cwiseProduct(g);
    }
    const Vector mean = sum / n;
    const Vector var = (sum_sq / n - mean.cwiseProduct(mean)) * (double(n) / (n - 1));
    int outside = 0;
    for (Index i = 0; i < w.size(); ++i) {
      const double se = std::sqrt(var(i) / n);
      if (std::abs(mean(i) - gbar(i)) > 4 * se + 1e-15) ++outside;
    }
    CHECK(outside == 0);
  }
}

TEST_CASE("zero stepsize keeps the initialization") {
  Bench b(fixtures::garnet(5, 2, 0.9, 1), 32);
  TdConfig cfg;
  cfg.eta = 0.0;
  cfg.T = 2;
  const auto tr = neural_td(b.problem(), b.pi, cfg);
  CHECK(tr.w_bar == b.model.initial());
  CHECK(tr.q_out == network_values(b.model, b.model.initial(), b.env.features));
  CHECK(tr.rows.size() == 1);
}

TEST_CASE("one population step replays by hand") {
  Bench b(fixtures::garnet(5, 2, 0.9, 2), 64);
  TdConfig cfg;
  cfg.T = 2;
  cfg.sampling = Sampling::kPopulation;
  cfg.spec = ProjectionSpec(0.01);
  const auto tr = neural_td(b.problem(), b.pi, cfg);
  const double eta = (1.0 - b.env.mdp.gamma) / 8.0;
  CHECK(tr.eta == eta);
  const Vector w0 = b.model.initial();
  const Vector g = semigradient_population(b.model, w0, b.env.features, b.env.mdp, b.mu, b.pi);
  Vector expect = w0 - eta * g;
  b.model.project(expect, cfg.spec);
  CHECK(tr.w_last == expect);
}

TEST_CASE("iterate average and ball invariant") {
  Bench b(fixtures::garnet(5, 2, 0.9, 3), 32);
  TdConfig cfg;
  cfg.spec = ProjectionSpec(0.2);
  cfg.seed = 5;
  cfg.eta = 0.3;
  const int T = 30;
  std::vector<Vector> iterates{b.model.initial()};
  for (int k = 2; k <= T; ++k) {
    cfg.T = k;
    const auto tr = neural_td(b.problem(), b.pi, cfg);
    iterates.push_back(tr.w_last);
    CHECK(b.model.displacement(tr.w_last) <= cfg.spec.B + 1e-12);
    CHECK(tr.ball_violations == 0);
  }
  cfg.T = T;
  const auto tr = neural_td(b.problem(), b.pi, cfg);
  Vector mean = Vector::Zero(b.model.size());
  for (const auto& w : iterates) mean += w;
  mean /= double(T);
  CHECK((tr.w_bar - mean).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("runs are deterministic and independent of the metric stride") {
  Bench b(fixtures::garnet(5, 2, 0.9, 3), 64);
  const auto lin = ntk_features(b.model, b.env.features);
  const auto fp = solve_projected_evaluation(b.env.mdp, b.pi, lin, ProjectionSpec(1.0));
  for (Sampling mode : {Sampling::kIid, Sampling::kMarkov}) {
    TdConfig cfg;
    cfg.T = 300;
    cfg.seed = 9;
    cfg.sampling = mode;
    const auto a = neural_td(b.problem(&fp), b.pi, cfg);
    const auto c = neural_td(b.problem(&fp), b.pi, cfg);
    CHECK(trace_to_csv(a) == trace_to_csv(c));
    cfg.metrics_every = 7;
    const auto d = neural_td(b.problem(&fp), b.pi, cfg);
    CHECK(d.w_bar == a.w_bar);
  }
}

TEST_CASE("population td approaches the oracle") {
  Bench b(fixtures::garnet(5, 2, 0.9, 1), 256);
  const auto lin = ntk_features(b.model, b.env.features);
  const auto fp = solve_projected_evaluation(b.env.mdp, b.pi, lin, ProjectionSpec(1.0));
  auto mean_lin_err = [&](int T) {
    TdConfig cfg;
    cfg.T = T;
    cfg.sampling = Sampling::kPopulation;
    const auto tr = neural_td(b.problem(&fp), b.pi, cfg);
    CHECK(tr.monotone_violations == 0);
    CHECK(tr.descent_violations == 0);
    CHECK(tr.ball_violations == 0);
    double acc = 0.0;
    for (const auto& r : tr.rows) acc += r.lin_err;
    return acc / double(tr.rows.size());
  };
  CHECK(mean_lin_err(1000) <= mean_lin_err(250));
}

TEST_CASE("variance column is finite and bounded") {
  Bench b(fixtures::garnet(5, 2, 0.9, 1), 128);
  TdConfig cfg;
  cfg.T = 500;
  const auto tr = neural_td(b.problem(), b.pi, cfg);
  const auto lin = ntk_features(b.model, b.env.features);
  const double q0_sq = (b.mu.array() * lin.base.array().square()).sum();
  const double bound = 1.1 * (12 * q0_sq + 12 * cfg.spec.B * cfg.spec.B + 3 * b.env.mdp.r_bar * b.env.mdp.r_bar);
  int measured = 0;
  for (const auto& r : tr.rows) {
    if (std::isnan(r.variance)) continue;
    ++measured;
    CHECK(std::isfinite(r.variance));
    CHECK(r.variance >= 0.0);
    CHECK(r.variance <= bound);
  }
  CHECK(measured == tr.metric_rows);
  CHECK(measured == 50);
}

TEST_CASE("q-learning") {
  SUBCASE("a single action reproduces td") {
    Bench b(fixtures::garnet(6, 1, 0.9, 2), 64);
    TdConfig cfg;
    cfg.T = 400;
    cfg.seed = 3;
    const auto td = neural_td(b.problem(), b.pi, cfg);
    const auto ql = neural_q_learning(b.problem(), b.pi, cfg);
    CHECK(td.w_bar == ql.w_bar);
    CHECK(td.q_out == ql.q_out);
  }
  SUBCASE("greedy action is an exhaustive argmax with lowest-index ties") {
    Bench b(fixtures::garnet(6, 3, 0.9, 2), 64);
    const Vector w = b.model.initial();
    for (int s = 0; s < 6; ++s) {
      int best = 0;
      for (int a = 1; a < 3; ++a) {
        if (b.model.value(w, b.env.features.row(b.env.mdp.pair(s, a))) >
            b.model.value(w, b.env.features.row(b.env.mdp.pair(s, best))))
          best = a;
      }
      CHECK(greedy_action(b.model, w, b.env.features, b.env.mdp, s) == best);
    }
    // All-equal values: the first action wins.
    CHECK(greedy_action(b.model, Vector::Zero(b.model.size()), b.env.features, b.env.mdp, 0) == 0);
    // With eta = 0 the weights never move, so every backup uses that argmax.
    TdConfig cfg;
    cfg.eta = 0.0;
    cfg.T = 50;
    const auto tr = neural_q_learning(b.problem(), b.pi, cfg);
    CHECK(tr.w_last == w);
    const Vector q = network_values(b.model, w, b.env.features);
    for (const auto& r : tr.rows) {
      // delta = Q(x) - r - gamma max_a' Q(s', a'): check against a table lookup where measured.
      if (std::isnan(r.delta)) continue;
      bool found = false;
      for (int x = 0; x < b.env.mdp.n_pairs() && !found; ++x) {
        for (int s2 = 0; s2 < 6 && !found; ++s2) {
          const double v = q.segment(s2 * 3, 3).maxCoeff();
          if (std::abs(q(x) - b.env.mdp.reward(x) - 0.9 * v - r.delta) <= 1e-14) found = true;
        }
      }
      CHECK(found);
    }
  }
  SUBCASE("exploration policy must be strictly positive") {
    Bench b(fixtures::garnet(3, 2, 0.9, 2), 16);
    Policy greedy;
    greedy.probs = Matrix(3, 2);
    greedy.probs << 1, 0, 0.5, 0.5, 0.5, 0.5;
    TdConfig cfg;
    CHECK_THROWS_AS(neural_q_learning(b.problem(), greedy, cfg), ConfigError);
    cfg.sampling = Sampling::kPopulation;
    CHECK_THROWS_AS(neural_q_learning(b.problem(), b.pi, cfg), ConfigError);
  }
}

TEST_CASE("soft q-learning") {
  Bench b(fixtures::garnet(5, 2, 0.9, 4), 64);
  SUBCASE("residuals stay within log|A| / beta of the hard ones") {
    const double beta = 100.0;
    const IidSampler sampler(b.env.mdp, b.pi, StationaryDist{b.mu});
    CounterRng rng(2, Stream::kSampling);
    for (int i = 0; i < 200; ++i) {
      const Vector w = jitter(b.model.initial(), 0.1, 100 + i);
      const Tuple t = sampler(rng, false);
      const double hard = residual_delta_greedy(b.model, w, b.env.features, b.env.mdp, t);
      const double soft = residual_delta_soft(b.model, w, b.env.features, b.env.mdp, t, beta);
      CHECK(std::abs(soft - hard) <= std::log(2.0) / beta);
      CHECK(soft <= hard);
    }
  }
  SUBCASE("sandwich holds at every evaluation") {
    SoftConfig cfg;
    cfg.T = 500;
    cfg.beta = 3.0;
    const auto tr = neural_soft_q(b.problem(), b.pi, cfg);
    CHECK(tr.softmax_evaluations == cfg.T - 1);
    CHECK(tr.sandwich_violations == 0);
    cfg.beta = 0.0;
    CHECK_THROWS_AS(neural_soft_q(b.problem(), b.pi, cfg), ConfigError);
  }
}

TEST_CASE("soft actor-critic pieces") {
  SUBCASE("tiny beta flattens the policy") {
    const auto env = fixtures::garnet(4, 3, 0.9, 1);
    Vector q = Vector::LinSpaced(12, -3.0, 3.0);
    const Policy pi = boltzmann_policy(env.mdp, q, 1e-6);
    for (int s = 0; s < 4; ++s) {
      CHECK(0.5 * (pi.probs.row(s).array() - 1.0 / 3.0).abs().sum() <= 1e-4);
    }
  }
  SUBCASE("soft value dominates the reference mean") {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int i = 0; i < 100; ++i) {
      Vector q(4);
      for (int a = 0; a < 4; ++a) q(a) = n(gen);
      for (double beta : {0.1, 1.0, 10.0}) CHECK(soft_state_value(q, beta) >= q.mean() - 1e-12);
    }
  }
  SUBCASE("single state single action residual") {
    const auto mdp = fixtures::single_state(0.7, 0.9);
    FeatureMap fm;
    fm.table = Matrix::Zero(1, 3);
    fm.table(0, 0) = 1.0;
    const TwoLayerModel model(init_two_layer<double>(8, 3, 1));
    const Vector w = model.initial();
    const double v = model.value(w, fm.row(0));
    const Tuple t{0, 0, 0.7, 0, std::nullopt};
    CHECK(sac_residual(model, w, fm, mdp, t, 2.0) ==
          doctest::Approx(0.7 + (0.9 - 1.0) * v).epsilon(1e-14));
  }
  SUBCASE("a full run stays in the ball") {
    Bench b(fixtures::garnet(4, 2, 0.9, 2), 32);
    SoftConfig cfg;
    cfg.T = 200;
    const auto tr = soft_actor_critic(b.problem(), cfg);
    CHECK(tr.ball_violations == 0);
    CHECK(tr.rows.size() == 199);
    for (int s = 0; s < 4; ++s) CHECK(std::abs(tr.pi_out.row(s).sum() - 1.0) <= 1e-12);
    cfg.sampling = Sampling::kMarkov;
    CHECK_THROWS_AS(soft_actor_critic(b.problem(), cfg), ConfigError);
  }
}

TEST_CASE("expected return") {
  CHECK(expected_return(fixtures::single_state(1.0, 0.5), Policy::uniform(1, 1)) ==
        doctest::Approx(2.0).epsilon(1e-14));
  auto zero = fixtures::garnet(4, 2, 0.9, 1).mdp;
  zero.reward.setZero();
  CHECK(expected_return(zero, Policy::uniform(4, 2)) == 0.0);

  const auto env = fixtures::garnet(4, 2, 0.9, 5);
  Policy pi;
  pi.probs = Matrix(4, 2);
  pi.probs << 0.2, 0.8, 0.5, 0.5, 0.9, 0.1, 0.3, 0.7;
  const double j = expected_return(env.mdp, pi);
  const Vector start = stationary_distribution(env.mdp, pi).state_marginal(env.mdp);
  const int horizon = int(std::ceil(std::log(1e-6) / std::log(env.mdp.gamma)));
  std::mt19937_64 gen(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&](const auto& probs) {
    double c = u(gen);
    for (Index i = 0; i < probs.size(); ++i) {
      c -= probs(i);
      if (c < 0.0) return int(i);
    }
    return int(probs.size() - 1);
  };
  const int n = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    int s = draw(start);
    double ret = 0.0, disc = 1.0;
    for (int t = 0; t < horizon; ++t) {
      const int a = draw(Vector(pi.probs.row(s).transpose()));
      const int x = env.mdp.pair(s, a);
      ret += disc * env.mdp.reward(x);
      disc *= env.mdp.gamma;
      s = draw(Vector(env.mdp.transition.row(x).transpose()));
    }
    sum += ret;
    sum_sq += ret * ret;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum_sq / n - mean * mean) / n);
  CHECK(std::abs(mean - j) <= 4 * se);
}

TEST_CASE("config validation") {
  TdConfig cfg;
  cfg.T = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.T = 10;
  cfg.eta = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(default_eta(0.9, Sampling::kPopulation, 100) == doctest::Approx(0.0125));
  CHECK(default_eta(0.9, Sampling::kIid, 40000) == doctest::Approx(0.005));
  CHECK(default_eta(0.9, Sampling::kIid, 100) == doctest::Approx(0.0125));
  CHECK(parse_sampling("markov") == Sampling::kMarkov);
  CHECK_THROWS_AS(parse_sampling("batch"), ConfigError);
}
