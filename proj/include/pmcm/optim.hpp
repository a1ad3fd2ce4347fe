#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "pmcm/tensor.hpp"

namespace pmcm {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 1e-4;
  double eps = 1e-8;
};

struct AdamWState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;
};

// Decoupled-weight-decay Adam with bias correction, in the same order as
// torch.optim.AdamW: shrink by (1 - lr*wd), then apply the adaptive step.
inline void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamWState& state,
                       const AdamWConfig& cfg) {
  if (params.size() != grads.size()) throw ShapeError("adamw: params/grads count mismatch");
  if (state.first_moment.empty()) {
    for (const Tensor* p : params) {
      state.first_moment.emplace_back(p->shape());
      state.second_moment.emplace_back(p->shape());
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adamw: state count mismatch");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    p.require_same_shape(g, "adamw grad");
    p.require_same_shape(m, "adamw state");
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= 1.0 - cfg.lr * cfg.weight_decay;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace pmcm
