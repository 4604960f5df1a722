#include "ntd/model.hpp"

namespace ntd {

TwoLayerModel::TwoLayerModel(TwoLayerNet<double> net)
    : net_(std::move(net)), w0_(flatten(net_.W0)) {}

double TwoLayerModel::value(const Vector& w,
                            const Eigen::Ref<const Vector>& x) const {
  return q_forward(net_, as_matrix(w), x);
}

void TwoLayerModel::add_grad(const Vector& w, const Eigen::Ref<const Vector>& x,
                             double coef, Vector& out) const {
  require(out.size() == size() && w.size() == size(),
          "parameter vector has wrong length");
  require(x.size() == net_.d, "input dimension does not match the network");
  const Vector pre = as_matrix(w) * x;
  const double scale = coef / std::sqrt(double(net_.m));
  const Vector row_coef =
      (pre.array() > 0.0).select(scale * net_.b, Vector::Zero(net_.m));
  Eigen::Map<Matrix> G(out.data(), net_.m, net_.d);
  G.noalias() += row_coef * x.transpose();
}

double TwoLayerModel::linearized_value(const Vector& w,
                                       const Eigen::Ref<const Vector>& x) const {
  return q0_forward(net_, as_matrix(w), x);
}

void TwoLayerModel::project(Vector& w, const ProjectionSpec& spec) const {
  const double dist = (w - w0_).norm();
  if (dist > spec.B) w = w0_ + (spec.B / dist) * (w - w0_);
}

double TwoLayerModel::displacement(const Vector& w) const {
  return (w - w0_).norm();
}

double TwoLayerModel::flip_fraction(const Vector& w,
                                    const Eigen::Ref<const Vector>& x) const {
  return ntd::flip_fraction(net_, as_matrix(w), x);
}

DeepModel::DeepModel(DeepNet<double> net)
    : net_(std::move(net)), w0_(flatten(net_.Ws0)) {}

std::vector<Matrix> DeepModel::unflatten(const Vector& w) const {
  require(w.size() == size(), "parameter vector has wrong length");
  const Index block = Index(net_.m) * net_.m;
  std::vector<Matrix> out;
  out.reserve(static_cast<size_t>(net_.H));
  for (int h = 0; h < net_.H; ++h) {
    out.emplace_back(
        Eigen::Map<const Matrix>(w.data() + h * block, net_.m, net_.m));
  }
  return out;
}

Vector DeepModel::flatten(const std::vector<Matrix>& Ws) {
  Index total = 0;
  for (const auto& layer : Ws) total += layer.size();
  Vector out(total);
  Index offset = 0;
  for (const auto& layer : Ws) {
    out.segment(offset, layer.size()) =
        Eigen::Map<const Vector>(layer.data(), layer.size());
    offset += layer.size();
  }
  return out;
}

double DeepModel::value(const Vector& w, const Eigen::Ref<const Vector>& x) const {
  return deep_forward(net_, unflatten(w), x);
}

void DeepModel::add_grad(const Vector& w, const Eigen::Ref<const Vector>& x,
                         double coef, Vector& out) const {
  require(out.size() == size(), "parameter vector has wrong length");
  const auto grads = deep_grad(net_, unflatten(w), x);
  const Index block = Index(net_.m) * net_.m;
  for (int h = 0; h < net_.H; ++h) {
    out.segment(h * block, block) +=
        coef * Eigen::Map<const Vector>(grads[static_cast<size_t>(h)].data(), block);
  }
}

double DeepModel::linearized_value(const Vector& w,
                                   const Eigen::Ref<const Vector>& x) const {
  return deep_q0(net_, unflatten(w), x);
}

void DeepModel::project(Vector& w, const ProjectionSpec& spec) const {
  const Index block = Index(net_.m) * net_.m;
  for (int h = 0; h < net_.H; ++h) {
    auto layer = w.segment(h * block, block);
    const auto base = w0_.segment(h * block, block);
    const double dist = (layer - base).norm();
    if (dist > spec.B) layer = base + (spec.B / dist) * (layer - base);
  }
}

double DeepModel::displacement(const Vector& w) const {
  const Index block = Index(net_.m) * net_.m;
  double worst = 0.0;
  for (int h = 0; h < net_.H; ++h) {
    worst = std::max(
        worst, (w.segment(h * block, block) - w0_.segment(h * block, block)).norm());
  }
  return worst;
}

}  // namespace ntd
