#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dst/model/model.hpp"

namespace dst::train {

using model::DstModel;
using model::ParamKind;
using num::Tensor;
using num::Var;

struct OptState {
  std::vector<Tensor> velocity;  // visit_params order
  std::size_t step = 0;
  std::size_t epoch = 0;
};

inline OptState make_state(const DstModel& m) {
  OptState s;
  model::visit_params(m, [&](const std::string&, const Tensor& t, ParamKind) { s.velocity.push_back(num::zeros_like(t)); });
  return s;
}

struct SgdConfig {
  double momentum = 0.9;
  double decision_lr_factor = 0.1;
};

/// v = momentum * v + g; p -= lr * v, with lr scaled for decision parameters.
inline void step(DstModel& m, const std::vector<Tensor>& grads, OptState& opt, const SgdConfig& cfg, double lr) {
  if (opt.velocity.empty()) opt = make_state(m);
  if (grads.size() != opt.velocity.size()) {
    throw ContractError("step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(opt.velocity.size()) + " parameters");
  }
  std::size_t i = 0;
  model::visit_params(m, [&](const std::string& name, Tensor& p, ParamKind kind) {
    const Tensor& g = grads[i];
    Tensor& v = opt.velocity[i];
    ++i;
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw ContractError("step: gradient for " + name + " has shape " + num::shape_str(g.shape()) +
                          ", parameter is " + num::shape_str(p.shape()));
    }
    const double rate = kind == ParamKind::Decision ? lr * cfg.decision_lr_factor : lr;
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = cfg.momentum * v[k] + g[k];
      p[k] -= rate * v[k];
    }
  });
  ++opt.step;
}

inline double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double x : g.values()) s += x * x;
  return std::sqrt(s);
}

// Rescales so the global norm is at most max_norm; no-op when max_norm <= 0.
inline void clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  const double n = global_norm(grads);
  if (n <= max_norm) return;
  const double k = max_norm / n;
  for (auto& g : grads)
    for (double& x : g.storage()) x *= k;
}

}  // namespace dst::train
