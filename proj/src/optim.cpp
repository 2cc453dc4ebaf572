#include "kgmod/optim.hpp"

#include <cmath>

namespace kgmod::autodiff {

AdamW::AdamW(AdamWConfig cfg, std::vector<Parameter*> params)
    : cfg_(cfg), params_(std::move(params)) {
  if (cfg_.total_steps == 0) throw ConfigError("AdamW total_steps must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

double AdamW::lr_at(std::size_t t) const {
  const double frac =
      static_cast<double>(std::min(t, cfg_.total_steps)) / static_cast<double>(cfg_.total_steps);
  return cfg_.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

void AdamW::step() {
  const double lr = lr_at(step_);
  const double t1 = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t1);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t1);
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Parameter* p = params_[pi];
    if (!p->has_grad()) {
      throw Error("AdamW step with uninitialized gradient for parameter " + p->name);
    }
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad.data[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      double w = p->value.data[i];
      w -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w);
      if (!std::isfinite(w)) throw NumericError("non-finite weight in AdamW step");
      p->value.data[i] = w;
    }
  }
  ++step_;
}

void clip_gradients(std::vector<Parameter*> params, double max_norm) {
  if (max_norm <= 0) return;
  double total = 0.0;
  for (const Parameter* p : params) {
    if (!p->has_grad()) {
      throw Error("clip_gradients with uninitialized gradient for parameter " + p->name);
    }
    for (double g : p->grad.data) total += g * g;
  }
  const double norm = std::sqrt(total);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (Parameter* p : params) {
    for (double& g : p->grad.data) g *= scale;
  }
}

void sgd_step(std::vector<Parameter*> params, double lr) {
  for (Parameter* p : params) {
    if (!p->has_grad()) {
      throw Error("SGD step with uninitialized gradient for parameter " + p->name);
    }
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double w = p->value.data[i] - lr * p->grad.data[i];
      if (!std::isfinite(w)) throw NumericError("non-finite weight in SGD step");
      p->value.data[i] = w;
    }
  }
}

}  // namespace kgmod::autodiff
