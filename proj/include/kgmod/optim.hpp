#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kgmod/autodiff.hpp"

namespace kgmod::autodiff {

// Trainable (or frozen) tensor with a persistent gradient buffer. Gradients
// accumulate across forward/backward passes until the caller clears them.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // empty until accumulated into
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  bool has_grad() const { return !grad.data.empty(); }
  void ensure_grad() {
    if (!has_grad()) grad = Tensor::zeros(value.shape);
  }
  void accumulate(const std::vector<double>& g) {
    ensure_grad();
    if (g.size() != grad.data.size()) {
      throw ShapeError("gradient size mismatch for parameter " + name);
    }
    for (std::size_t i = 0; i < g.size(); ++i) grad.data[i] += g[i];
  }
  void scale_grad(double f) {
    for (double& v : grad.data) v *= f;
  }
  void clear_grad() { grad = Tensor(); }
};

struct AdamWConfig {
  double base_lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t total_steps = 1;  // cosine horizon
};

// Decoupled-decay AdamW with a cosine learning-rate schedule:
// lr(t) = base_lr * 0.5 * (1 + cos(pi * t / total_steps)), so lr(0) = base_lr
// and lr(total_steps) = 0. The decay term is applied directly to the weights,
// never routed through the moment estimates.
class AdamW {
 public:
  AdamW(AdamWConfig cfg, std::vector<Parameter*> params);

  double lr_at(std::size_t t) const;
  double current_lr() const { return lr_at(step_); }
  std::size_t step_count() const { return step_; }

  // One update over all registered parameters. Gradients must be populated;
  // they are left untouched for the caller to clear.
  void step();

 private:
  AdamWConfig cfg_;
  std::vector<Parameter*> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

// Plain SGD helper for trainers that predate adaptive optimizers.
void sgd_step(std::vector<Parameter*> params, double lr);

// Scales every gradient so the global L2 norm stays within max_norm.
// max_norm <= 0 disables clipping.
void clip_gradients(std::vector<Parameter*> params, double max_norm);

}  // namespace kgmod::autodiff
