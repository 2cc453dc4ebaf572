#pragma once

// Test-side gradient oracle: central finite differences over a scalar loss
// assembled from leaf tensors. Kept independent of the tape's backward pass;
// it only drives forward evaluations.

#include <cmath>
#include <functional>
#include <vector>

#include "kgmod/autodiff.hpp"

namespace testsupport {

using kgmod::autodiff::Graph;
using kgmod::autodiff::NodeId;
using kgmod::autodiff::Tensor;

// Builds the loss from leaves that were appended in input order (ids 0..n-1).
using LossBuilder = std::function<NodeId(Graph&, const std::vector<Tensor>&)>;

inline double relative_error(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

inline double forward_loss(const std::vector<Tensor>& inputs, const LossBuilder& build) {
  Graph g;
  for (const Tensor& t : inputs) g.leaf(t);
  return g.value(build(g, inputs)).data[0];
}

// max over all coordinates of all grad-enabled inputs of the relative error
// between tape gradient and the central difference
inline double max_grad_rel_error(const std::vector<Tensor>& inputs, const LossBuilder& build,
                                 double h = 1e-5) {
  Graph g;
  std::vector<NodeId> ids;
  for (const Tensor& t : inputs) ids.push_back(g.leaf(t));
  const NodeId loss = build(g, inputs);
  g.backward(loss);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad) continue;
    const auto& analytic = g.grad(ids[i]);
    for (std::size_t c = 0; c < inputs[i].size(); ++c) {
      std::vector<Tensor> plus = inputs;
      plus[i].data[c] += h;
      std::vector<Tensor> minus = inputs;
      minus[i].data[c] -= h;
      const double numeric = (forward_loss(plus, build) - forward_loss(minus, build)) / (2 * h);
      worst = std::max(worst, relative_error(analytic[c], numeric));
    }
  }
  return worst;
}

// Finite-difference gradient of an arbitrary parameterized scalar function;
// used for composite models where the loss is computed through module APIs
// rather than a hand-assembled graph.
inline std::vector<double> numeric_gradient(std::vector<double> point,
                                            const std::function<double(const std::vector<double>&)>& f,
                                            double h = 1e-5) {
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + h;
    const double up = f(point);
    point[i] = saved - h;
    const double down = f(point);
    point[i] = saved;
    grad[i] = (up - down) / (2 * h);
  }
  return grad;
}

}  // namespace testsupport
