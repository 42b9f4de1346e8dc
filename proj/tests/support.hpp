#pragma once

// Small fixtures shared by the test binaries.

#include <cmath>
#include <vector>

#include "rlaif/corpus.hpp"
#include "rlaif/model.hpp"

namespace rlaif::testing {

inline ModelConfig tiny_config(HeadKind head, std::size_t vocab = 5, std::size_t width = 8, std::size_t layers = 1,
                               std::size_t limit = 8) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.context_limit = limit;
  c.layer_count = layers;
  c.model_width = width;
  c.head_count = 2;
  c.ffn_width = 2 * width;
  c.head_kind = head;
  return c;
}

// Init values are tiny; spreading them makes every path carry signal.
inline Checkpoint spread_checkpoint(const ModelConfig& c, std::uint64_t seed, double sd = 0.5) {
  Checkpoint ck = init_checkpoint(c, seed);
  Rng rng(seed + 99);
  for (auto& p : ck.params)
    for (double& v : p.value.values()) v += rng.normal(0.0, sd);
  return ck;
}

// Binds externally created leaves (e.g. from grad_check) in checkpoint order.
inline BoundModel bind_leaves(const Checkpoint& ck, std::span<const Var> vars) {
  BoundModel m;
  m.config = &ck.config;
  m.vars.assign(vars.begin(), vars.end());
  for (std::size_t i = 0; i < ck.params.size(); ++i) m.index.emplace(ck.params[i].name, i);
  return m;
}

inline std::vector<NDArray> values_of(const Checkpoint& ck) {
  std::vector<NDArray> out;
  for (const auto& p : ck.params) out.push_back(p.value);
  return out;
}

inline std::vector<DialogueSession> short_sessions(std::size_t n, std::uint64_t seed, double noise = 1.0) {
  SyntheticConfig sc;
  sc.sessions = n;
  sc.turn_count = 4;
  sc.seed = seed;
  sc.noise_sd = noise;
  return generate_synthetic(sc);
}

// Rank of each value by counting: #smaller + (#equal + 1) / 2.
inline std::vector<double> counting_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double w : v) {
      less += w < v[i];
      equal += w == v[i];
    }
    r[i] = less + (equal + 1) / 2;
  }
  return r;
}

inline double reference_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = counting_ranks(x), ry = counting_ranks(y);
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += rx[i];
    sy += ry[i];
  }
  double cov = 0, vx = 0, vy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    cov += (rx[i] - sx / n) * (ry[i] - sy / n);
    vx += (rx[i] - sx / n) * (rx[i] - sx / n);
    vy += (ry[i] - sy / n) * (ry[i] - sy / n);
  }
  return cov / std::sqrt(vx * vy);
}

}  // namespace rlaif::testing
