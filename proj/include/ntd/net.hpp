#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ntd/rng.hpp"
#include "ntd/types.hpp"

namespace ntd {

/// Radius of the feasible set S_B around the initialization.
struct ProjectionSpec {
  double B = 1.0;

  explicit ProjectionSpec(double radius = 1.0) : B(radius) {
    require(B > 0.0, "projection radius B must be positive");
  }
};

/// Q(x; W) = m^{-1/2} sum_r b_r relu(W_r^T x). Only W trains; b and W0 are
/// frozen at construction.
template <typename Scalar = double>
struct TwoLayerNet {
  int m = 0;
  int d = 0;
  VectorX<Scalar> b;
  MatrixX<Scalar> W;
  MatrixX<Scalar> W0;
};

/// b_r ~ Unif{-1, +1}, W_r(0) ~ N(0, I_d / d), W = W0.
template <typename Scalar = double>
TwoLayerNet<Scalar> init_two_layer(int m, int d, std::uint64_t seed) {
  require(m >= 1 && d >= 1, "two-layer net needs m >= 1 and d >= 1");
  CounterRng rng(seed, Stream::kInit);
  TwoLayerNet<Scalar> net;
  net.m = m;
  net.d = d;
  net.b.resize(m);
  net.W0.resize(m, d);
  // One child stream per neuron: nets of different width built from the same
  // seed share their leading neurons.
  for (int r = 0; r < m; ++r) {
    CounterRng neuron = rng.split(static_cast<std::uint64_t>(r));
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(d)));
    net.b(r) = (neuron() >> 63) ? Scalar(1) : Scalar(-1);
    for (int k = 0; k < d; ++k) net.W0(r, k) = Scalar(normal(neuron));
  }
  net.W = net.W0;
  return net;
}

namespace detail {
template <typename Net, typename Derived>
void check_input(const Net& net, const Eigen::MatrixBase<Derived>& x) {
  require(x.size() == net.d, "input dimension does not match the network");
}
template <typename Scalar, typename DerivedW>
void check_weights(const TwoLayerNet<Scalar>& net,
                   const Eigen::MatrixBase<DerivedW>& W) {
  require(W.rows() == net.m && W.cols() == net.d,
          "weight matrix shape does not match the network");
}
}  // namespace detail

template <typename Scalar, typename DerivedW, typename DerivedX>
Scalar q_forward(const TwoLayerNet<Scalar>& net,
                 const Eigen::MatrixBase<DerivedW>& W,
                 const Eigen::MatrixBase<DerivedX>& x) {
  detail::check_weights(net, W);
  detail::check_input(net, x);
  const VectorX<Scalar> pre = W * x;
  return net.b.dot(pre.cwiseMax(Scalar(0))) / std::sqrt(Scalar(net.m));
}

template <typename Scalar, typename DerivedX>
Scalar q_forward(const TwoLayerNet<Scalar>& net,
                 const Eigen::MatrixBase<DerivedX>& x) {
  return q_forward(net, net.W, x);
}

/// Row r is b_r 1{W_r^T x > 0} x / sqrt(m); the subgradient at a kink is 0.
template <typename Scalar, typename DerivedW, typename DerivedX>
MatrixX<Scalar> q_grad(const TwoLayerNet<Scalar>& net,
                       const Eigen::MatrixBase<DerivedW>& W,
                       const Eigen::MatrixBase<DerivedX>& x) {
  detail::check_weights(net, W);
  detail::check_input(net, x);
  const VectorX<Scalar> pre = W * x;
  const VectorX<Scalar> coef =
      (pre.array() > Scalar(0)).select(net.b, VectorX<Scalar>::Zero(net.m)) /
      std::sqrt(Scalar(net.m));
  return coef * x.transpose();
}

template <typename Scalar, typename DerivedX>
MatrixX<Scalar> q_grad(const TwoLayerNet<Scalar>& net,
                       const Eigen::MatrixBase<DerivedX>& x) {
  return q_grad(net, net.W, x);
}

/// Local linearization at W0: activation pattern from W0, weights from W_eval.
template <typename Scalar, typename DerivedW, typename DerivedX>
Scalar q0_forward(const TwoLayerNet<Scalar>& net,
                  const Eigen::MatrixBase<DerivedW>& W_eval,
                  const Eigen::MatrixBase<DerivedX>& x) {
  detail::check_weights(net, W_eval);
  detail::check_input(net, x);
  const VectorX<Scalar> pre0 = net.W0 * x;
  const VectorX<Scalar> pre = W_eval * x;
  // Same reduction as q_forward, so Q0(x; W0) == Q(x; W0) bit for bit.
  const VectorX<Scalar> masked =
      (pre0.array() > Scalar(0)).select(pre, VectorX<Scalar>::Zero(net.m));
  return net.b.dot(masked) / std::sqrt(Scalar(net.m));
}

/// Euclidean projection onto {W : ||W - W0||_2 <= B} (flattened norm).
template <typename DerivedW, typename Derived0>
auto project_ball(const Eigen::MatrixBase<DerivedW>& W,
                  const Eigen::MatrixBase<Derived0>& W0,
                  const ProjectionSpec& spec) {
  using Scalar = typename DerivedW::Scalar;
  require(W.rows() == W0.rows() && W.cols() == W0.cols(),
          "projection operands differ in shape");
  MatrixX<Scalar> out = W;
  const Scalar dist = (W - W0).norm();
  if (dist > Scalar(spec.B)) out = W0 + (Scalar(spec.B) / dist) * (W - W0);
  return out;
}

/// Share of neurons with |W_r(0)^T x| <= ||W_r - W_r(0)||_2, i.e. those whose
/// activation on x may differ from initialization.
template <typename Scalar, typename DerivedW, typename DerivedX>
double flip_fraction(const TwoLayerNet<Scalar>& net,
                     const Eigen::MatrixBase<DerivedW>& W_now,
                     const Eigen::MatrixBase<DerivedX>& x) {
  detail::check_weights(net, W_now);
  detail::check_input(net, x);
  const VectorX<Scalar> pre0 = net.W0 * x;
  const VectorX<Scalar> shift = (W_now - net.W0).rowwise().norm();
  return double((pre0.cwiseAbs().array() <= shift.array()).count()) / net.m;
}

/// x0 = c A x, x_h = m^{-1/2} relu(W_h x_{h-1}) for h = 1..H, Q = b^T x_H.
/// A and b are frozen; entries of A and W_h start as N(0, 2), b as N(0, 1).
/// The input scale c is m^{-1/2} by default, which keeps ||x0|| and |Q| of
/// order one; c = 1 gives ||x0|| ~ sqrt(2m).
template <typename Scalar = double>
struct DeepNet {
  int H = 0;
  int m = 0;
  int d = 0;
  Scalar input_scale = Scalar(1);
  MatrixX<Scalar> A;
  VectorX<Scalar> b;
  std::vector<MatrixX<Scalar>> Ws;
  std::vector<MatrixX<Scalar>> Ws0;
};

template <typename Scalar = double>
DeepNet<Scalar> init_deep(int H, int m, int d, std::uint64_t seed,
                          bool normalized_input = true) {
  require(H >= 1, "deep net needs H >= 1");
  require(m >= 1 && d >= 1, "deep net needs m >= 1 and d >= 1");
  CounterRng rng(seed, Stream::kInit);
  std::normal_distribution<double> n2(0.0, std::sqrt(2.0));
  std::normal_distribution<double> n1(0.0, 1.0);
  DeepNet<Scalar> net;
  net.H = H;
  net.m = m;
  net.d = d;
  net.input_scale = normalized_input ? Scalar(1) / std::sqrt(Scalar(m)) : Scalar(1);
  net.A.resize(m, d);
  for (Index i = 0; i < net.A.size(); ++i) net.A.data()[i] = Scalar(n2(rng));
  net.Ws0.resize(static_cast<size_t>(H));
  for (auto& layer : net.Ws0) {
    layer.resize(m, m);
    for (Index i = 0; i < layer.size(); ++i) layer.data()[i] = Scalar(n2(rng));
  }
  net.b.resize(m);
  for (int r = 0; r < m; ++r) net.b(r) = Scalar(n1(rng));
  net.Ws = net.Ws0;
  return net;
}

namespace detail {
template <typename Scalar>
void check_layers(const DeepNet<Scalar>& net,
                  const std::vector<MatrixX<Scalar>>& Ws) {
  require(static_cast<int>(Ws.size()) == net.H, "wrong number of layers");
  for (const auto& layer : Ws) {
    require(layer.rows() == net.m && layer.cols() == net.m,
            "hidden layer shape does not match the network");
  }
}
}  // namespace detail

template <typename Scalar, typename DerivedX>
Scalar deep_forward(const DeepNet<Scalar>& net,
                    const std::vector<MatrixX<Scalar>>& Ws,
                    const Eigen::MatrixBase<DerivedX>& x) {
  detail::check_layers(net, Ws);
  detail::check_input(net, x);
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(net.m));
  VectorX<Scalar> h = net.input_scale * (net.A * x);
  for (const auto& layer : Ws) h = scale * (layer * h).cwiseMax(Scalar(0));
  return net.b.dot(h);
}

/// Reverse-mode gradient with respect to every hidden layer.
template <typename Scalar, typename DerivedX>
std::vector<MatrixX<Scalar>> deep_grad(const DeepNet<Scalar>& net,
                                       const std::vector<MatrixX<Scalar>>& Ws,
                                       const Eigen::MatrixBase<DerivedX>& x) {
  detail::check_layers(net, Ws);
  detail::check_input(net, x);
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(net.m));
  std::vector<VectorX<Scalar>> acts;  // x_0 .. x_H
  std::vector<VectorX<Scalar>> pres;  // W_h x_{h-1}
  acts.push_back(net.input_scale * (net.A * x));
  for (const auto& layer : Ws) {
    pres.push_back(layer * acts.back());
    acts.push_back(scale * pres.back().cwiseMax(Scalar(0)));
  }
  std::vector<MatrixX<Scalar>> grads(static_cast<size_t>(net.H));
  VectorX<Scalar> upstream = net.b;
  for (int h = net.H - 1; h >= 0; --h) {
    const auto hs = static_cast<size_t>(h);
    const VectorX<Scalar> g_pre =
        scale * (pres[hs].array() > Scalar(0))
                    .select(upstream, VectorX<Scalar>::Zero(net.m));
    grads[hs] = g_pre * acts[hs].transpose();
    upstream = Ws[hs].transpose() * g_pre;
  }
  return grads;
}

/// First-order expansion of the network around Ws0, evaluated at Ws_eval.
template <typename Scalar, typename DerivedX>
Scalar deep_q0(const DeepNet<Scalar>& net,
               const std::vector<MatrixX<Scalar>>& Ws_eval,
               const Eigen::MatrixBase<DerivedX>& x) {
  detail::check_layers(net, Ws_eval);
  const auto grads = deep_grad(net, net.Ws0, x);
  Scalar value = deep_forward(net, net.Ws0, x);
  for (int h = 0; h < net.H; ++h) {
    const auto hs = static_cast<size_t>(h);
    value += (grads[hs].array() * (Ws_eval[hs] - net.Ws0[hs]).array()).sum();
  }
  return value;
}

/// Clips each layer to its own Frobenius ball around the initialization.
template <typename Scalar>
std::vector<MatrixX<Scalar>> project_layerwise(
    const std::vector<MatrixX<Scalar>>& Ws,
    const std::vector<MatrixX<Scalar>>& Ws0, const ProjectionSpec& spec) {
  require(Ws.size() == Ws0.size(), "layer counts differ");
  std::vector<MatrixX<Scalar>> out;
  out.reserve(Ws.size());
  for (size_t h = 0; h < Ws.size(); ++h) out.push_back(project_ball(Ws[h], Ws0[h], spec));
  return out;
}

}  // namespace ntd
