#include "ntd/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace ntd {

LinearizedFeatures ntk_features(const QNetwork& net, const FeatureMap& features) {
  require(features.dim() == net.input_dim(),
          "feature dimension does not match the network input");
  const int n = static_cast<int>(features.table.rows());
  LinearizedFeatures out;
  out.w0 = net.initial();
  out.phi.resize(n, net.size());
  out.base.resize(n);
  Vector g(net.size());
  for (int x = 0; x < n; ++x) {
    g.setZero();
    net.add_grad(out.w0, features.row(x), 1.0, g);
    out.phi.row(x) = g.transpose();
    out.base(x) = net.value(out.w0, features.row(x));
  }
  return out;
}

Backup Backup::evaluation(Policy policy) {
  Backup b;
  b.kind = BackupKind::kEvaluation;
  b.policy = std::move(policy);
  return b;
}

Backup Backup::max() {
  Backup b;
  b.kind = BackupKind::kMax;
  return b;
}

Backup Backup::soft(double beta) {
  require(beta > 0.0, "softmax temperature beta must be positive");
  Backup b;
  b.kind = BackupKind::kSoft;
  b.beta = beta;
  return b;
}

std::string Backup::name() const {
  switch (kind) {
    case BackupKind::kEvaluation: return "evaluation";
    case BackupKind::kMax: return "max";
    case BackupKind::kSoft: return "soft";
  }
  return "unknown";
}

double softmax_value(const Eigen::Ref<const Vector>& values, double beta) {
  require(beta > 0.0, "softmax temperature beta must be positive");
  require(values.size() > 0, "softmax over an empty action set");
  const double top = values.maxCoeff();
  const double sum = (beta * (values.array() - top)).exp().sum();
  return top + std::log(sum) / beta;
}

Vector state_values(const FiniteMdp& mdp, const Backup& backup, const Vector& q) {
  require(q.size() == mdp.n_pairs(), "Q table has wrong length");
  const int nA = mdp.n_actions;
  Vector v(mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s) {
    const auto qs = q.segment(s * nA, nA);
    switch (backup.kind) {
      case BackupKind::kEvaluation:
        v(s) = backup.policy.probs.row(s).dot(qs.transpose());
        break;
      case BackupKind::kMax:
        v(s) = qs.maxCoeff();
        break;
      case BackupKind::kSoft:
        v(s) = softmax_value(qs, backup.beta);
        break;
    }
  }
  return v;
}

Vector apply_bellman(const FiniteMdp& mdp, const Backup& backup, const Vector& q) {
  if (backup.kind == BackupKind::kEvaluation) backup.policy.validate(mdp);
  return mdp.reward + mdp.gamma * (mdp.transition * state_values(mdp, backup, q));
}

double mu_norm_sq(const Vector& a, const Vector& b, const Vector& mu) {
  require(a.size() == b.size() && a.size() == mu.size(),
          "mu-norm operands differ in length");
  return (mu.array() * (a - b).array().square()).sum();
}

ClassProjector::ClassProjector(const LinearizedFeatures& features,
                               const Vector& mu, const ProjectionSpec& spec)
    : features_(&features), mu_(mu), radius_(spec.B) {
  require(mu.size() == features.n_pairs(), "measure and features differ in size");
  require((mu.array() >= 0.0).all(), "measure has negative entries");
  sqrt_mu_ = mu.cwiseSqrt();
  gram_.noalias() = features.phi * features.phi.transpose();
  const Matrix weighted = sqrt_mu_.asDiagonal() * gram_ * sqrt_mu_.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(weighted);
  if (eig.info() != Eigen::Success) throw SolverError("Gram eigendecomposition failed");
  basis_ = eig.eigenvectors();
  spectrum_ = eig.eigenvalues().cwiseMax(0.0);
  cutoff_ = 1e-12 * std::max(spectrum_.maxCoeff(), 0.0);
}

ClassProjector::Result ClassProjector::project(const Vector& target) const {
  require(target.size() == features_->n_pairs(), "target has wrong length");
  const Vector z = basis_.transpose() * (sqrt_mu_.array() * (target - features_->base).array()).matrix();
  const Index n = z.size();

  auto norm_sq = [&](double lambda) {
    double acc = 0.0;
    for (Index i = 0; i < n; ++i) {
      if (spectrum_(i) <= cutoff_) continue;
      const double denom = spectrum_(i) + lambda;
      acc += spectrum_(i) * z(i) * z(i) / (denom * denom);
    }
    return acc;
  };

  Result res;
  const double B2 = radius_ * radius_;
  if (norm_sq(0.0) > B2) {
    double energy = 0.0;
    for (Index i = 0; i < n; ++i)
      if (spectrum_(i) > cutoff_) energy += spectrum_(i) * z(i) * z(i);
    double lo = 0.0;
    double hi = std::sqrt(energy) / radius_;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (norm_sq(mid) > B2) lo = mid; else hi = mid;
    }
    // hi keeps the iterate feasible.
    res.lambda = hi;
    res.constrained = true;
  }

  Vector scaled = Vector::Zero(n);
  for (Index i = 0; i < n; ++i) {
    if (spectrum_(i) <= cutoff_) continue;
    scaled(i) = z(i) / (spectrum_(i) + res.lambda);
  }
  res.alpha = sqrt_mu_.cwiseProduct(basis_ * scaled);
  const Vector k_alpha = gram_ * res.alpha;
  res.q = features_->base + k_alpha;
  res.displacement = std::sqrt(std::max(0.0, res.alpha.dot(k_alpha)));
  return res;
}

Vector ClassProjector::parameters(const Result& result) const {
  return features_->w0 + features_->phi.transpose() * result.alpha;
}

namespace {

FixedPointKind kind_of(const Backup& backup) {
  switch (backup.kind) {
    case BackupKind::kEvaluation: return FixedPointKind::kEvaluation;
    case BackupKind::kMax: return FixedPointKind::kOptimality;
    case BackupKind::kSoft: return FixedPointKind::kSoftOptimality;
  }
  return FixedPointKind::kEvaluation;
}

}  // namespace

FixedPoint solve_projected_fixed_point(const FiniteMdp& mdp, const Vector& mu,
                                       const Backup& backup,
                                       const LinearizedFeatures& features,
                                       const ProjectionSpec& spec,
                                       const SolverOptions& options) {
  require(features.n_pairs() == mdp.n_pairs(), "features do not cover every pair");
  require(options.tol > 0.0 && options.max_iters >= 1, "bad solver options");
  const ClassProjector projector(features, mu, spec);

  FixedPoint fp;
  fp.kind = kind_of(backup);
  Vector q = features.base;
  ClassProjector::Result last;
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  bool converged = false;
  for (int k = 0; k < options.max_iters; ++k) {
    last = projector.project(apply_bellman(mdp, backup, q));
    const double step = std::sqrt(mu_norm_sq(last.q, q, mu));
    fp.steps.push_back(step);
    q = last.q;
    fp.iterations = k + 1;
    if (!std::isfinite(step)) {
      throw SolverError("projected Bellman iteration diverged (non-finite step)");
    }
    if (step < options.tol) {
      converged = true;
      break;
    }
    if (step < best) {
      best = step;
      since_best = 0;
    } else if (++since_best >= options.stall_window) {
      throw SolverError("projected Bellman iteration stalled: step " +
                        std::to_string(step) + " has not decreased for " +
                        std::to_string(options.stall_window) + " iterations");
    }
  }
  if (!converged) {
    throw SolverError("projected Bellman iteration hit max_iters with step " +
                      std::to_string(fp.steps.back()));
  }
  fp.q_values = q;
  fp.lambda = last.lambda;
  fp.constrained = last.constrained;
  fp.w_star = projector.parameters(last);
  const auto again = projector.project(apply_bellman(mdp, backup, q));
  fp.residual = std::sqrt(mu_norm_sq(again.q, q, mu));
  return fp;
}

FixedPoint solve_projected_evaluation(const FiniteMdp& mdp, const Policy& policy,
                                      const LinearizedFeatures& features,
                                      const ProjectionSpec& spec,
                                      const SolverOptions& options) {
  policy.validate(mdp);
  const Vector mu = stationary_distribution(mdp, policy).probs;
  return solve_projected_fixed_point(mdp, mu, Backup::evaluation(policy), features,
                                     spec, options);
}

FixedPoint solve_projected_optimality(const FiniteMdp& mdp, const Policy& pi_exp,
                                      const LinearizedFeatures& features,
                                      const ProjectionSpec& spec,
                                      const SolverOptions& options,
                                      std::optional<double> beta) {
  pi_exp.validate(mdp, /*strictly_positive=*/true);
  const Vector mu = stationary_distribution(mdp, pi_exp).probs;
  const Backup backup = beta ? Backup::soft(*beta) : Backup::max();
  return solve_projected_fixed_point(mdp, mu, backup, features, spec, options);
}

Vector q_pi_exact(const FiniteMdp& mdp, const Policy& policy) {
  policy.validate(mdp);
  const Matrix P = pair_chain(mdp, policy);
  const Matrix A = Matrix::Identity(mdp.n_pairs(), mdp.n_pairs()) - mdp.gamma * P;
  const Vector q = A.partialPivLu().solve(mdp.reward);
  const double residual = (A * q - mdp.reward).cwiseAbs().maxCoeff();
  if (!(residual <= 1e-10)) {
    throw SolverError("policy evaluation system is singular (residual " +
                      std::to_string(residual) + ")");
  }
  return q;
}

double msbe(const FiniteMdp& mdp, const Policy& policy, const Vector& q) {
  const Vector mu = stationary_distribution(mdp, policy).probs;
  return mu_norm_sq(q, apply_bellman(mdp, Backup::evaluation(policy), q), mu);
}

double mspbe(const FiniteMdp& mdp, const Policy& policy, const Vector& q,
             const LinearizedFeatures& features, const ProjectionSpec& spec) {
  const Vector mu = stationary_distribution(mdp, policy).probs;
  const ClassProjector projector(features, mu, spec);
  const auto proj = projector.project(apply_bellman(mdp, Backup::evaluation(policy), q));
  return mu_norm_sq(q, proj.q, mu);
}

namespace {
void require_unit(const Eigen::Ref<const Vector>& v) {
  require(std::abs(v.norm() - 1.0) <= 1e-9, "kernel inputs must be unit vectors");
}
}  // namespace

double kernel_closed_form(const Eigen::Ref<const Vector>& x,
                          const Eigen::Ref<const Vector>& y) {
  require(x.size() == y.size(), "kernel inputs differ in dimension");
  require_unit(x);
  require_unit(y);
  const double c = std::clamp(x.dot(y), -1.0, 1.0);
  return c * (std::numbers::pi - std::acos(c)) / (2.0 * std::numbers::pi);
}

MonteCarloEstimate kernel_mc(const Eigen::Ref<const Vector>& x,
                             const Eigen::Ref<const Vector>& y, long n,
                             std::uint64_t seed) {
  require(x.size() == y.size(), "kernel inputs differ in dimension");
  require(n >= 2, "kernel_mc needs n >= 2");
  require_unit(x);
  require_unit(y);
  const Index d = x.size();
  CounterRng rng(seed, Stream::kMonteCarlo);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(d)));
  Vector w(d);
  long hits = 0;
  for (long i = 0; i < n; ++i) {
    for (Index k = 0; k < d; ++k) w(k) = normal(rng);
    if (w.dot(x) > 0.0 && w.dot(y) > 0.0) ++hits;
  }
  const double p = double(hits) / double(n);
  const double c = x.dot(y);
  MonteCarloEstimate out;
  out.estimate = p * c;
  // Sample standard deviation of the Bernoulli indicator times |x^T y|.
  out.standard_error =
      std::abs(c) * std::sqrt(p * (1.0 - p) * double(n) / double(n - 1) / double(n));
  return out;
}

BallCheck function_ball_check(const QNetwork& net, const Vector& w,
                              const ProjectionSpec& spec) {
  BallCheck out;
  out.margin = spec.B - net.displacement(w);
  out.inside = out.margin >= 0.0;
  return out;
}

std::vector<std::pair<Vector, Vector>> draw_ball_pairs(
    const LinearizedFeatures& features, const ProjectionSpec& spec, int n,
    std::uint64_t seed) {
  require(n >= 1, "need at least one pair");
  const Matrix gram = features.phi * features.phi.transpose();
  const Index np = features.n_pairs();
  CounterRng rng(seed, Stream::kAssumptions);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&]() {
    Vector c(np);
    for (Index i = 0; i < np; ++i) c(i) = normal(rng);
    const double radius = spec.B * rng.uniform();
    const double len = std::sqrt(std::max(0.0, c.dot(gram * c)));
    if (len > 0.0) c *= radius / len; else c.setZero();
    return c;
  };
  std::vector<std::pair<Vector, Vector>> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Vector c1 = draw();
    Vector c2 = draw();
    out.emplace_back(std::move(c1), std::move(c2));
  }
  return out;
}

std::optional<double> assumption_ratio(const FiniteMdp& mdp, const Vector& mu,
                                       const Vector& q1, const Vector& q2,
                                       std::optional<double> beta) {
  const Backup backup = beta ? Backup::soft(*beta) : Backup::max();
  const Vector v1 = state_values(mdp, backup, q1);
  const Vector v2 = state_values(mdp, backup, q2);
  Vector mu_s = Vector::Zero(mdp.n_states);
  for (int x = 0; x < mdp.n_pairs(); ++x) mu_s(mdp.state_of(x)) += mu(x);
  const double den = mu_norm_sq(v1, v2, mu_s);
  if (den < 1e-12) return std::nullopt;
  return std::sqrt(mu_norm_sq(q1, q2, mu)) / std::sqrt(den);
}

AssumptionReport estimate_nu(const FiniteMdp& mdp, const Policy& pi_exp,
                             const LinearizedFeatures& features,
                             const ProjectionSpec& spec, int n_pairs,
                             std::uint64_t seed, std::optional<double> beta) {
  pi_exp.validate(mdp, /*strictly_positive=*/true);
  const Vector mu = stationary_distribution(mdp, pi_exp).probs;
  const auto pairs = draw_ball_pairs(features, spec, n_pairs, seed);
  AssumptionReport rep;
  rep.n_pairs = n_pairs;
  rep.min_ratio = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n_pairs; ++i) {
    const auto& [c1, c2] = pairs[static_cast<size_t>(i)];
    const auto ratio = assumption_ratio(mdp, mu, features.values_from_coef(c1),
                                        features.values_from_coef(c2), beta);
    if (!ratio) {
      ++rep.n_degenerate;
      continue;
    }
    if (*ratio < rep.min_ratio) {
      rep.min_ratio = *ratio;
      rep.witness = i;
    }
  }
  if (rep.witness < 0) throw SolverError("every sampled pair was degenerate");
  rep.nu_hat = rep.min_ratio - mdp.gamma;
  return rep;
}

FlipReport flip_report(const FiniteMdp& mdp, const QNetwork& net,
                       const FeatureMap& features, const Vector& mu,
                       const Vector& w) {
  require(mu.size() == mdp.n_pairs(), "measure has wrong length");
  Vector q0(mdp.n_pairs());
  double flip = 0.0;
  double q0_sq = 0.0;
  for (int x = 0; x < mdp.n_pairs(); ++x) {
    q0(x) = net.value(net.initial(), features.row(x));
    flip += mu(x) * net.flip_fraction(w, features.row(x));
    q0_sq += mu(x) * q0(x) * q0(x);
  }
  double max_sq = 0.0;
  for (int s = 0; s < mdp.n_states; ++s) {
    double mass = 0.0;
    for (int a = 0; a < mdp.n_actions; ++a) mass += mu(mdp.pair(s, a));
    max_sq += mass * q0.segment(s * mdp.n_actions, mdp.n_actions).array().square().maxCoeff();
  }
  FlipReport out;
  out.flip = flip;
  out.q0_sq_flip = q0_sq * flip;
  out.max_q0_sq_flip = max_sq * flip;
  return out;
}

std::string to_string(FixedPointKind kind) {
  switch (kind) {
    case FixedPointKind::kEvaluation: return "evaluation";
    case FixedPointKind::kOptimality: return "optimality";
    case FixedPointKind::kSoftOptimality: return "soft-optimality";
  }
  return "unknown";
}

}  // namespace ntd
