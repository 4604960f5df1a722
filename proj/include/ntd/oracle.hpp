#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ntd/env.hpp"
#include "ntd/model.hpp"

namespace ntd {

/// Phi(x) stacked over all pairs, so that Q0(x; w) = Q(x; W(0)) + Phi(x)^T (w - W(0)).
/// For the two-layer net block r of Phi(x) is b_r 1{W_r(0)^T x > 0} x / sqrt(m),
/// and Q(x; W(0)) = Phi(x)^T W(0) up to rounding.
struct LinearizedFeatures {
  Matrix phi;      // n_pairs x P
  Vector base;     // Q(x; W(0)) per pair
  Vector w0;       // flattened W(0)

  Index n_pairs() const { return phi.rows(); }
  Vector values(const Vector& w) const { return base + phi * (w - w0); }
  /// Q0 values of w = W(0) + Phi^T coef.
  Vector values_from_coef(const Vector& coef) const {
    return base + phi * (phi.transpose() * coef);
  }
};

LinearizedFeatures ntk_features(const QNetwork& net, const FeatureMap& features);

/// Which Bellman operator a fixed point or a training loop targets.
enum class BackupKind { kEvaluation, kMax, kSoft };

struct Backup {
  BackupKind kind = BackupKind::kEvaluation;
  Policy policy;        // used by kEvaluation
  double beta = 1.0;    // used by kSoft

  static Backup evaluation(Policy policy);
  static Backup max();
  static Backup soft(double beta);
  std::string name() const;
};

/// beta^{-1} log sum_a exp(beta q_a), computed with a max shift.
double softmax_value(const Eigen::Ref<const Vector>& values, double beta);

/// Per-state backed-up value of a Q table: max_a, softmax_a, or E_{a~pi}.
Vector state_values(const FiniteMdp& mdp, const Backup& backup, const Vector& q);

/// (T q)(x) = r(x) + gamma E[V(s') | x] for the operator selected by backup.
Vector apply_bellman(const FiniteMdp& mdp, const Backup& backup, const Vector& q);

double mu_norm_sq(const Vector& a, const Vector& b, const Vector& mu);

/// Euclidean-ball constrained, mu-weighted least squares onto F_{B,m}:
///   argmin_{w : ||w - w0|| <= B} sum_x mu(x) (Q0(x; w) - y(x))^2.
/// Solved in pair space through the eigendecomposition of
/// diag(sqrt mu) Phi Phi^T diag(sqrt mu); the ridge multiplier of an active
/// constraint is found by bisection. The solution has w - w0 = Phi^T alpha.
class ClassProjector {
 public:
  struct Result {
    Vector q;          // fitted Q0 values on every pair
    Vector alpha;      // w - w0 = Phi^T alpha
    double lambda = 0; // ridge multiplier, 0 when the ball is inactive
    double displacement = 0;
    bool constrained = false;
  };

  ClassProjector(const LinearizedFeatures& features, const Vector& mu,
                 const ProjectionSpec& spec);

  Result project(const Vector& target) const;
  Vector parameters(const Result& result) const;
  const Matrix& gram() const { return gram_; }

 private:
  const LinearizedFeatures* features_;
  Vector mu_;
  Vector sqrt_mu_;
  double radius_;
  Matrix gram_;     // Phi Phi^T
  Matrix basis_;    // eigenvectors of the weighted Gram
  Vector spectrum_; // eigenvalues, clipped at zero
  double cutoff_;
};

enum class FixedPointKind { kEvaluation, kOptimality, kSoftOptimality };

struct FixedPoint {
  FixedPointKind kind = FixedPointKind::kEvaluation;
  Vector w_star;
  Vector q_values;
  double residual = 0;
  int iterations = 0;
  double lambda = 0;
  bool constrained = false;
  /// ||Q_{k+1} - Q_k||_mu for every iteration.
  std::vector<double> steps;
};

struct SolverOptions {
  double tol = 1e-10;
  int max_iters = 100000;
  /// Optimality solves abort when the step size fails to decrease over this
  /// many consecutive iterations.
  int stall_window = 500;
};

/// Iterates Q <- Pi_F T Q from Q0(.; W(0)) with mu as the weighting measure.
FixedPoint solve_projected_fixed_point(const FiniteMdp& mdp, const Vector& mu,
                                       const Backup& backup,
                                       const LinearizedFeatures& features,
                                       const ProjectionSpec& spec,
                                       const SolverOptions& options = {});

FixedPoint solve_projected_evaluation(const FiniteMdp& mdp, const Policy& policy,
                                      const LinearizedFeatures& features,
                                      const ProjectionSpec& spec,
                                      const SolverOptions& options = {});

/// Hard max when beta is empty, softmax with inverse temperature beta otherwise.
FixedPoint solve_projected_optimality(const FiniteMdp& mdp, const Policy& pi_exp,
                                      const LinearizedFeatures& features,
                                      const ProjectionSpec& spec,
                                      const SolverOptions& options = {},
                                      std::optional<double> beta = std::nullopt);

/// Solves (I - gamma P_pi) Q = r.
Vector q_pi_exact(const FiniteMdp& mdp, const Policy& policy);

double msbe(const FiniteMdp& mdp, const Policy& policy, const Vector& q);
double mspbe(const FiniteMdp& mdp, const Policy& policy, const Vector& q,
             const LinearizedFeatures& features, const ProjectionSpec& spec);

/// E_w[1{w^T x > 0, w^T y > 0}] x^T y for w ~ N(0, I_d / d).
double kernel_closed_form(const Eigen::Ref<const Vector>& x,
                          const Eigen::Ref<const Vector>& y);

struct MonteCarloEstimate {
  double estimate = 0;
  double standard_error = 0;
};
MonteCarloEstimate kernel_mc(const Eigen::Ref<const Vector>& x,
                             const Eigen::Ref<const Vector>& y, long n,
                             std::uint64_t seed);

struct BallCheck {
  bool inside = false;
  double margin = 0;  // B - displacement
};
BallCheck function_ball_check(const QNetwork& net, const Vector& w,
                              const ProjectionSpec& spec);

struct AssumptionReport {
  double nu_hat = 0;
  double min_ratio = 0;
  int n_pairs = 0;
  int n_degenerate = 0;
  int witness = -1;
};

/// Pairs (W1, W2) in S_B, returned as pair-space coefficients c with
/// W = W(0) + Phi^T c. Directions are Gaussian in the row space of Phi (the
/// orthogonal complement does not move Q0), radii uniform in [0, B].
std::vector<std::pair<Vector, Vector>> draw_ball_pairs(
    const LinearizedFeatures& features, const ProjectionSpec& spec, int n,
    std::uint64_t seed);

/// sqrt(E_mu[(Q1 - Q2)^2]) / sqrt(E_s[(V1 - V2)^2]) with V the max (or
/// softmax) over actions; empty when the denominator is below 1e-12.
std::optional<double> assumption_ratio(const FiniteMdp& mdp, const Vector& mu,
                                       const Vector& q1, const Vector& q2,
                                       std::optional<double> beta);

AssumptionReport estimate_nu(const FiniteMdp& mdp, const Policy& pi_exp,
                             const LinearizedFeatures& features,
                             const ProjectionSpec& spec, int n_pairs,
                             std::uint64_t seed,
                             std::optional<double> beta = std::nullopt);

/// Flip-fraction quantities that control the linearization error.
struct FlipReport {
  double flip = 0;             // E_mu[(1/m) sum_r 1{|W_r(0)^T x| <= ||W_r - W_r(0)||}]
  double q0_sq_flip = 0;       // E_mu[Q0(x)^2] * flip
  double max_q0_sq_flip = 0;   // E_s[max_a Q0(s,a)^2] * flip
};
FlipReport flip_report(const FiniteMdp& mdp, const QNetwork& net,
                       const FeatureMap& features, const Vector& mu,
                       const Vector& w);

std::string to_string(FixedPointKind kind);

}  // namespace ntd
