#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dtaf/errors.hpp"
#include "dtaf/tensor.hpp"

namespace dtaf {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamWState {
  AdamWOptions options;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One decoupled-weight-decay update:
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
// `grads[i]` must match `params[i]` element for element.
inline void adamw_step(std::span<Tensor> params, std::span<const std::vector<double>> grads,
                       AdamWState& state) {
  if (params.size() != grads.size()) throw ShapeError("adamw_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adamw_step: optimizer state tracks a different parameter set");
  const auto& o = state.options;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_data();
    const auto& g = grads[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (g.size() != theta.size() || m.size() != theta.size()) {
      throw ShapeError("adamw_step: gradient " + std::to_string(i) + " has " + std::to_string(g.size()) +
                       " entries, parameter has " + std::to_string(theta.size()));
    }
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g[k];
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      theta[k] -= o.lr * (mhat / (std::sqrt(vhat) + o.eps)) + o.lr * o.weight_decay * theta[k];
    }
  }
}

// Uses each parameter's accumulated grad.
inline void adamw_step(std::span<Tensor> params, AdamWState& state) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  adamw_step(params, grads, state);
}

}  // namespace dtaf
