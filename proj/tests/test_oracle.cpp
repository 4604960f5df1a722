#include <doctest.h>

#include <random>

#include "ntd/oracle.hpp"
#include "support/mdps.hpp"
#include "support/reference.hpp"

using namespace ntd;

namespace {

struct Setup {
  Environment env;
  TwoLayerModel model;
  LinearizedFeatures lin;
  Policy pi;
  Vector mu;

  Setup(Environment e, int m, std::uint64_t net_seed = 0)
      : env(std::move(e)),
        model(init_two_layer<double>(m, env.features.dim(), net_seed)),
        lin(ntk_features(model, env.features)),
        pi(Policy::uniform(env.mdp.n_states, env.mdp.n_actions)),
        mu(stationary_distribution(env.mdp, pi).probs) {}
};

Vector unit(int d, std::mt19937_64& gen) {
  std::normal_distribution<double> n;
  Vector v(d);
  for (int k = 0; k < d; ++k) v(k) = n(gen);
  return v / v.norm();
}

/// Radius that puts the zero function inside the class: the smallest
/// displacement with Phi delta = -base, times two.
double radius_containing_zero(const LinearizedFeatures& lin) {
  const Matrix gram = lin.phi * lin.phi.transpose();
  const Vector coef = gram.ldlt().solve(-lin.base);
  return 2.0 * (lin.phi.transpose() * coef).norm();
}

}  // namespace

TEST_CASE("linearized features") {
  Setup s(fixtures::garnet(5, 2, 0.9, 1), 64, 3);
  const auto& net = s.model.net();
  const Matrix phi_ref = ref::features(net, s.env.features);
  // Block sparsity and values against a per-neuron loop.
  CHECK(s.lin.phi == phi_ref);
  for (int x = 0; x < s.lin.n_pairs(); ++x) {
    CHECK(s.lin.phi.row(x).norm() <= 1.0 + 1e-15);
    // Base point identity: Q0(x; W(0)) = Q(x; W(0)).
    CHECK(s.lin.values(s.lin.w0)(x) == q_forward(net, s.env.features.row(x)));
    CHECK(std::abs(s.lin.phi.row(x).dot(s.lin.w0) - s.lin.base(x)) <= 1e-12);
  }
  std::mt19937_64 gen(5);
  std::normal_distribution<double> n(0.0, 0.3);
  for (int trial = 0; trial < 5; ++trial) {
    Vector dw(s.lin.w0.size());
    for (Index i = 0; i < dw.size(); ++i) dw(i) = n(gen);
    const Vector w = s.lin.w0 + dw;
    const Vector q = s.lin.values(w);
    for (int x = 0; x < s.lin.n_pairs(); ++x) {
      CHECK(std::abs(q(x) - s.lin.base(x) - s.lin.phi.row(x).dot(dw)) <= 1e-12);
      CHECK(std::abs(q(x) - q0_forward(net, s.model.as_matrix(w), s.env.features.row(x))) <= 1e-12);
    }
  }
}

TEST_CASE("bellman operators and softmax") {
  Vector two = Vector::Zero(2);
  CHECK(softmax_value(two, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  Vector big(3);
  big << 1000.0, 999.0, -5.0;
  CHECK(std::isfinite(softmax_value(big, 50.0)));
  CHECK(softmax_value(big, 50.0) >= 1000.0);

  const auto env = fixtures::garnet(4, 3, 0.9, 2);
  const Policy pi = Policy::uniform(4, 3);
  std::mt19937_64 gen(1);
  std::normal_distribution<double> n;
  Vector q(12);
  for (int i = 0; i < 12; ++i) q(i) = n(gen);
  const Vector te = apply_bellman(env.mdp, Backup::evaluation(pi), q);
  const Vector tm = apply_bellman(env.mdp, Backup::max(), q);
  const Vector ts = apply_bellman(env.mdp, Backup::soft(2.0), q);
  CHECK((te - ref::bellman(env.mdp, ref::Op::kPolicy, pi.probs, 1.0, q)).cwiseAbs().maxCoeff() <= 1e-14);
  CHECK((tm - ref::bellman(env.mdp, ref::Op::kMax, pi.probs, 1.0, q)).cwiseAbs().maxCoeff() <= 1e-14);
  CHECK((ts - ref::bellman(env.mdp, ref::Op::kSoft, pi.probs, 2.0, q)).cwiseAbs().maxCoeff() <= 1e-14);
  // Duality: max <= softmax <= max + log|A| / beta, per state.
  const Vector vmax = state_values(env.mdp, Backup::max(), q);
  const Vector vsoft = state_values(env.mdp, Backup::soft(2.0), q);
  for (int s = 0; s < 4; ++s) {
    CHECK(vsoft(s) >= vmax(s));
    CHECK(vsoft(s) <= vmax(s) + std::log(3.0) / 2.0);
  }
}

TEST_CASE("projection agrees with independent solvers") {
  Setup s(fixtures::garnet(5, 2, 0.9, 4), 64, 1);
  const Matrix phi = ref::features(s.model.net(), s.env.features);
  std::mt19937_64 gen(2);
  std::normal_distribution<double> n(0.0, 2.0);
  for (double B : {0.3, 2.0}) {
    const ClassProjector proj(s.lin, s.mu, ProjectionSpec(B));
    ref::ProjectedGradient pg(phi, s.lin.base, s.mu, B);
    Vector y(10);
    for (int i = 0; i < 10; ++i) y(i) = n(gen);
    const auto r = proj.project(y);
    const Vector q_ref = pg.project(y);
    CHECK(ref::mu_norm(r.q, q_ref, s.mu) <= 1e-9);
    ref::NormalEquations ne(phi, s.lin.base, s.mu, B);
    CHECK(ref::mu_norm(r.q, ne.project(y), s.mu) <= 1e-9);
    CHECK(ne.delta().norm() <= B * (1 + 1e-12));
    CHECK(r.displacement <= B + 1e-12);
    const Vector w = proj.parameters(r);
    CHECK((w - s.lin.w0).norm() <= B + 1e-9);
    CHECK((s.lin.values(w) - r.q).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("evaluation fixed point") {
  Setup s(fixtures::garnet(5, 2, 0.9, 1), 64);
  const ProjectionSpec spec(5.0);
  const SolverOptions opts;
  const auto fp = solve_projected_evaluation(s.env.mdp, s.pi, s.lin, spec, opts);
  CHECK(fp.kind == FixedPointKind::kEvaluation);
  CHECK(fp.residual <= opts.tol);
  CHECK((fp.w_star - s.lin.w0).norm() <= spec.B + 1e-9);
  CHECK((s.lin.values(fp.w_star) - fp.q_values).cwiseAbs().maxCoeff() <= 1e-10);

  SUBCASE("re-applying the operator with a second solver barely moves it") {
    const Matrix phi = ref::features(s.model.net(), s.env.features);
    ref::ProjectedGradient pg(phi, s.lin.base, s.mu, spec.B);
    const Vector again = pg.project(ref::bellman(s.env.mdp, ref::Op::kPolicy, s.pi.probs, 1.0, fp.q_values));
    CHECK(ref::mu_norm(again, fp.q_values, s.mu) <= 10 * opts.tol);
  }
  SUBCASE("steps contract by gamma once the constraint settles") {
    REQUIRE(fp.steps.size() > 6);
    for (size_t k = fp.steps.size() / 2; k + 1 < fp.steps.size(); ++k) {
      if (fp.steps[k] < 1e-12) break;
      CHECK(fp.steps[k + 1] / fp.steps[k] <= s.env.mdp.gamma + 1e-6);
    }
  }
  SUBCASE("mspbe at the fixed point is below tol squared") {
    CHECK(mspbe(s.env.mdp, s.pi, fp.q_values, s.lin, spec) <= opts.tol * opts.tol);
  }
  SUBCASE("iteration cap raises a solver error") {
    SolverOptions tight;
    tight.max_iters = 3;
    CHECK_THROWS_AS(solve_projected_evaluation(s.env.mdp, s.pi, s.lin, spec, tight), SolverError);
  }
}

TEST_CASE("zero rewards give the projection of zero") {
  auto env = fixtures::garnet(5, 2, 0.9, 6);
  env.mdp.reward.setZero();
  Setup s(env, 64, 2);
  const double B = radius_containing_zero(s.lin);
  const ProjectionSpec spec(B);
  const auto fp = solve_projected_evaluation(s.env.mdp, s.pi, s.lin, spec);
  const Vector zero_fit = ClassProjector(s.lin, s.mu, spec).project(Vector::Zero(10)).q;
  CHECK(zero_fit.cwiseAbs().maxCoeff() <= 1e-9);
  CHECK(ref::mu_norm(fp.q_values, zero_fit, s.mu) <= 1e-9);
  CHECK(fp.residual <= 1e-10);

  const auto hard = solve_projected_optimality(s.env.mdp, s.pi, s.lin, spec);
  CHECK(ref::mu_norm(hard.q_values, zero_fit, s.mu) <= 1e-9);
  const double beta = 100.0;
  const auto soft = solve_projected_optimality(s.env.mdp, s.pi, s.lin, spec, {}, beta);
  const double shift = s.env.mdp.gamma * std::log(2.0) / beta / (1.0 - s.env.mdp.gamma);
  CHECK((soft.q_values - hard.q_values).cwiseAbs().maxCoeff() <= shift + 1e-8);
}

TEST_CASE("optimality solver") {
  SUBCASE("single action reduces to evaluation") {
    Setup s(fixtures::garnet(6, 1, 0.9, 3), 64);
    const ProjectionSpec spec(1.0);
    const auto ev = solve_projected_evaluation(s.env.mdp, s.pi, s.lin, spec);
    const auto opt = solve_projected_optimality(s.env.mdp, s.pi, s.lin, spec);
    CHECK((ev.q_values - opt.q_values).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(opt.kind == FixedPointKind::kOptimality);
  }
  SUBCASE("soft and hard fixed points are close at large beta") {
    Setup s(fixtures::garnet(5, 2, 0.5, 1), 256);
    const ProjectionSpec spec(1.0);
    const double beta = 100.0;
    const auto hard = solve_projected_optimality(s.env.mdp, s.pi, s.lin, spec);
    const auto soft = solve_projected_optimality(s.env.mdp, s.pi, s.lin, spec, {}, beta);
    CHECK(soft.kind == FixedPointKind::kSoftOptimality);
    const double bound = s.env.mdp.gamma * std::log(2.0) / beta / (1.0 - s.env.mdp.gamma);
    CHECK((soft.q_values - hard.q_values).cwiseAbs().maxCoeff() <= bound + 1e-8);
    CHECK(hard.residual <= 1e-10);
    CHECK(soft.residual <= 1e-10);
  }
}

TEST_CASE("exact policy values") {
  const auto one = fixtures::single_state(1.0, 0.5);
  CHECK(q_pi_exact(one, Policy::uniform(1, 1))(0) == doctest::Approx(2.0).epsilon(1e-15));
  auto zero = fixtures::garnet(4, 2, 0.9, 1).mdp;
  zero.reward.setZero();
  CHECK(q_pi_exact(zero, Policy::uniform(4, 2)).cwiseAbs().maxCoeff() == 0.0);

  const auto env = fixtures::garnet(4, 2, 0.9, 7);
  const Policy pi = Policy::uniform(4, 2);
  const Vector q = q_pi_exact(env.mdp, pi);
  CHECK((q - ref::value_iteration(env.mdp, pi.probs)).cwiseAbs().maxCoeff() <= 1e-11);
  CHECK(msbe(env.mdp, pi, q) <= 1e-18);
}

TEST_CASE("mspbe never exceeds msbe on tables from the class") {
  Setup s(fixtures::garnet(5, 2, 0.9, 2), 64);
  const ProjectionSpec spec(1.0);
  std::mt19937_64 gen(3);
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Vector dir(s.lin.w0.size());
    for (Index i = 0; i < dir.size(); ++i) dir(i) = n(gen);
    const Vector w = s.lin.w0 + (spec.B * u(gen) / dir.norm()) * dir;
    const Vector q = s.lin.values(w);
    CHECK(mspbe(s.env.mdp, s.pi, q, s.lin, spec) <= msbe(s.env.mdp, s.pi, q) + 1e-12);
  }
}

TEST_CASE("projection error of Q^pi bounds the fixed point error") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Setup s(fixtures::garnet(5, 2, 0.9, seed), 128);
    const ProjectionSpec spec(1.0);
    const auto fp = solve_projected_evaluation(s.env.mdp, s.pi, s.lin, spec);
    const Vector qpi = q_pi_exact(s.env.mdp, s.pi);
    const Vector proj = ClassProjector(s.lin, s.mu, spec).project(qpi).q;
    const double lhs = std::sqrt(mu_norm_sq(fp.q_values, qpi, s.mu));
    const double rhs = std::sqrt(mu_norm_sq(proj, qpi, s.mu)) / (1.0 - s.env.mdp.gamma);
    CHECK(lhs <= rhs + 1e-8);
  }
}

// Known failure: the distance is not monotone in m at this radius because the
// base function Q(x; W(0)) is redrawn in scale with every width, so the classes
// are not nested. Kept as the literal check; see README, known deviations.
TEST_CASE("projection distance of Q^pi along nested widths" * doctest::should_fail()) {
  const auto env = fixtures::garnet(5, 2, 0.9, 1);
  const Policy pi = Policy::uniform(5, 2);
  const Vector mu = stationary_distribution(env.mdp, pi).probs;
  const Vector qpi = q_pi_exact(env.mdp, pi);
  double prev = std::numeric_limits<double>::infinity();
  for (int m : {64, 256, 1024}) {
    const TwoLayerModel model(init_two_layer<double>(m, 8, 0));
    const auto lin = ntk_features(model, env.features);
    const Vector proj = ClassProjector(lin, mu, ProjectionSpec(1.0)).project(qpi).q;
    const double dist = std::sqrt(mu_norm_sq(proj, qpi, mu));
    CHECK(dist <= prev + 1e-12);
    prev = dist;
  }
}

TEST_CASE("kernel closed form") {
  Vector x(3);
  x << 1.0, 0.0, 0.0;
  Vector y60(3);
  y60 << 0.5, std::sqrt(3.0) / 2.0, 0.0;
  CHECK(std::abs(kernel_closed_form(x, x) - 0.5) <= 1e-12);
  CHECK(std::abs(kernel_closed_form(x, Vector(-x)) - 0.0) <= 1e-12);
  CHECK(std::abs(kernel_closed_form(x, y60) - 1.0 / 6.0) <= 1e-12);
  const auto mc = kernel_mc(x, y60, 200000, 3);
  CHECK(std::abs(mc.estimate - 1.0 / 6.0) <= 4 * mc.standard_error);
  CHECK_THROWS_AS(kernel_closed_form(Vector(2.0 * x), y60), ConfigError);

  std::mt19937_64 gen(9);
  std::vector<Vector> pts;
  for (int i = 0; i < 10; ++i) pts.push_back(unit(6, gen));
  Matrix G(10, 10);
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 10; ++j) {
      G(i, j) = kernel_closed_form(pts[i], pts[j]);
      CHECK(G(i, j) == kernel_closed_form(pts[j], pts[i]));
    }
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(G);
  CHECK(es.eigenvalues().minCoeff() >= -1e-10);
}

TEST_CASE("function ball check") {
  const TwoLayerModel model(init_two_layer<double>(16, 4, 1));
  const ProjectionSpec spec(0.7);
  Vector u = Vector::LinSpaced(model.size(), -1.0, 2.0);
  u.normalize();
  const auto at0 = function_ball_check(model, model.initial(), spec);
  CHECK(at0.inside);
  CHECK(at0.margin == spec.B);
  const auto edge = function_ball_check(model, model.initial() + spec.B * u, spec);
  CHECK(std::abs(edge.margin) <= 1e-12);
  const auto out = function_ball_check(model, model.initial() + 2 * spec.B * u, spec);
  CHECK_FALSE(out.inside);
  CHECK(out.margin == doctest::Approx(-spec.B).epsilon(1e-12));
}

TEST_CASE("assumption estimates") {
  SUBCASE("one action gives ratio one") {
    Setup s(fixtures::garnet(5, 1, 0.9, 2), 64);
    const auto rep = estimate_nu(s.env.mdp, s.pi, s.lin, ProjectionSpec(1.0), 50, 3);
    CHECK(std::abs(rep.min_ratio - 1.0) <= 1e-12);
    CHECK(std::abs(rep.nu_hat - (1.0 - s.env.mdp.gamma)) <= 1e-12);
  }
  SUBCASE("equal parameters are degenerate") {
    Setup s(fixtures::garnet(5, 2, 0.9, 2), 64);
    const Vector q = s.lin.base;
    CHECK_FALSE(assumption_ratio(s.env.mdp, s.mu, q, q, std::nullopt).has_value());
    CHECK_THROWS_AS(estimate_nu(s.env.mdp, s.pi, s.lin, ProjectionSpec(1e-9), 10, 1), SolverError);
  }
  SUBCASE("order independent against a second implementation") {
    Setup s(fixtures::garnet(5, 3, 0.9, 4), 64);
    const ProjectionSpec spec(1.0);
    const int n = 500;
    for (std::optional<double> beta : {std::optional<double>(), std::optional<double>(5.0)}) {
      const auto rep = estimate_nu(s.env.mdp, s.pi, s.lin, spec, n, 8, beta);
      const auto pairs = draw_ball_pairs(s.lin, spec, n, 8);
      const Matrix phi = ref::features(s.model.net(), s.env.features);
      auto values_of = [&](int i) {
        const auto& [c1, c2] = pairs[static_cast<size_t>(i)];
        const Vector w1 = s.lin.w0 + phi.transpose() * c1;
        const Vector w2 = s.lin.w0 + phi.transpose() * c2;
        return std::pair<Vector, Vector>(s.lin.base + phi * (w1 - s.lin.w0),
                                         s.lin.base + phi * (w2 - s.lin.w0));
      };
      const double nu_ref = ref::nu_reverse(s.env.mdp, s.mu, n, values_of,
                                            beta ? ref::Op::kSoft : ref::Op::kMax, beta.value_or(1.0));
      CHECK(std::abs(rep.nu_hat - nu_ref) <= 1e-12);
      CHECK(rep.n_pairs == n);
      // Every pair lies in the ball.
      for (const auto& [c1, c2] : pairs) {
        CHECK((phi.transpose() * c1).norm() <= spec.B + 1e-12);
        CHECK((phi.transpose() * c2).norm() <= spec.B + 1e-12);
      }
    }
  }
}

TEST_CASE("flip report at the initialization") {
  Setup s(fixtures::garnet(5, 2, 0.9, 2), 64);
  const auto rep = flip_report(s.env.mdp, s.model, s.env.features, s.mu, s.lin.w0);
  CHECK(rep.flip == 0.0);
  CHECK(rep.q0_sq_flip == 0.0);
}
