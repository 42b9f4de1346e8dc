#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "rlaif/tensor.hpp"

namespace rlaif {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<NDArray> first_moment;
  std::vector<NDArray> second_moment;
  std::uint64_t step = 0;
};

// Bias-corrected Adam, applied in place. Moments are created on the first call.
inline void adam_step(std::span<NDArray> params, std::span<const NDArray> grads, AdamState& state,
                      const AdamConfig& config) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.shape());
      state.second_moment.emplace_back(p.shape());
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: optimizer state size mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != grads[k].shape() || state.first_moment[k].shape() != params[k].shape()) {
      throw ShapeError("adam_step: parameter " + shape_string(params[k].shape()) + " vs gradient " +
                       shape_string(grads[k].shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    NDArray& p = params[k];
    const NDArray& g = grads[k];
    NDArray& m = state.first_moment[k];
    NDArray& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

// Scales gradients down so their joint L2 norm is at most max_norm. Returns the norm before scaling.
inline double clip_global_norm(std::span<NDArray> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g.values()) v *= f;
  }
  return norm;
}

}  // namespace rlaif
