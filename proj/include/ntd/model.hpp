#pragma once

#include <limits>
#include <memory>
#include <string>

#include "ntd/net.hpp"

namespace ntd {

/// A Q-network seen through a flat trainable parameter vector. The training
/// loops and the oracle only talk to this interface, so the same code drives
/// two-layer and multi-layer networks.
class QNetwork {
 public:
  virtual ~QNetwork() = default;

  virtual std::string kind() const = 0;
  virtual Index size() const = 0;
  virtual int input_dim() const = 0;
  virtual int width() const = 0;
  /// Flattened W(0).
  virtual const Vector& initial() const = 0;

  virtual double value(const Vector& w, const Eigen::Ref<const Vector>& x) const = 0;
  /// out += coef * grad_w Q(x; w). out may alias w.
  virtual void add_grad(const Vector& w, const Eigen::Ref<const Vector>& x,
                        double coef, Vector& out) const = 0;
  /// Q0(x; w), the expansion around initial().
  virtual double linearized_value(const Vector& w,
                                  const Eigen::Ref<const Vector>& x) const = 0;

  /// In-place projection onto S_B.
  virtual void project(Vector& w, const ProjectionSpec& spec) const = 0;
  /// Largest ball-norm of w - W(0): the flat norm for two-layer nets, the
  /// largest per-layer Frobenius norm for deep nets.
  virtual double displacement(const Vector& w) const = 0;
  /// NaN when the quantity is not defined for the architecture.
  virtual double flip_fraction(const Vector& /*w*/,
                               const Eigen::Ref<const Vector>& /*x*/) const {
    return std::numeric_limits<double>::quiet_NaN();
  }

  Vector grad(const Vector& w, const Eigen::Ref<const Vector>& x) const {
    Vector g = Vector::Zero(size());
    add_grad(w, x, 1.0, g);
    return g;
  }
};

class TwoLayerModel final : public QNetwork {
 public:
  explicit TwoLayerModel(TwoLayerNet<double> net);

  const TwoLayerNet<double>& net() const { return net_; }

  std::string kind() const override { return "two_layer"; }
  Index size() const override { return Index(net_.m) * net_.d; }
  int input_dim() const override { return net_.d; }
  int width() const override { return net_.m; }
  const Vector& initial() const override { return w0_; }

  double value(const Vector& w, const Eigen::Ref<const Vector>& x) const override;
  void add_grad(const Vector& w, const Eigen::Ref<const Vector>& x, double coef,
                Vector& out) const override;
  double linearized_value(const Vector& w,
                          const Eigen::Ref<const Vector>& x) const override;
  void project(Vector& w, const ProjectionSpec& spec) const override;
  double displacement(const Vector& w) const override;
  double flip_fraction(const Vector& w,
                       const Eigen::Ref<const Vector>& x) const override;

  /// View of a flat parameter as the m x d weight matrix.
  Eigen::Map<const Matrix> as_matrix(const Vector& w) const {
    return Eigen::Map<const Matrix>(w.data(), net_.m, net_.d);
  }
  static Vector flatten(const Matrix& W) {
    return Eigen::Map<const Vector>(W.data(), W.size());
  }

 private:
  TwoLayerNet<double> net_;
  Vector w0_;
};

class DeepModel final : public QNetwork {
 public:
  explicit DeepModel(DeepNet<double> net);

  const DeepNet<double>& net() const { return net_; }

  std::string kind() const override { return "deep"; }
  Index size() const override { return Index(net_.H) * net_.m * net_.m; }
  int input_dim() const override { return net_.d; }
  int width() const override { return net_.m; }
  const Vector& initial() const override { return w0_; }

  double value(const Vector& w, const Eigen::Ref<const Vector>& x) const override;
  void add_grad(const Vector& w, const Eigen::Ref<const Vector>& x, double coef,
                Vector& out) const override;
  double linearized_value(const Vector& w,
                          const Eigen::Ref<const Vector>& x) const override;
  void project(Vector& w, const ProjectionSpec& spec) const override;
  double displacement(const Vector& w) const override;

  std::vector<Matrix> unflatten(const Vector& w) const;
  static Vector flatten(const std::vector<Matrix>& Ws);

 private:
  DeepNet<double> net_;
  Vector w0_;
};

}  // namespace ntd
