#pragma once

// Finite-difference cases shared by the unit tests and the acceptance run.

#include <functional>
#include <string>
#include <vector>

#include "rlaif/pref_opt.hpp"
#include "rlaif/reward_model.hpp"
#include "support.hpp"

namespace rlaif::testing {

inline NDArray random_array(Rng& rng, Shape shape, double sd = 1.0) {
  NDArray a(std::move(shape));
  for (double& v : a.values()) v = rng.normal(0.0, sd);
  return a;
}

// Reduces any array to a scalar with non-uniform weights so every output coordinate
// contributes a distinct gradient.
inline Var weighted_sum(Tape& t, const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  NDArray w(y.shape());
  for (double& v : w.values()) v = rng.uniform() * 2.0 - 1.0;
  return sum(mul(y, t.constant(std::move(w))));
}

struct GradCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Var(Tape&, std::span<const Var>)> fn;
};

inline std::vector<GradCase> primitive_cases() {
  static const std::vector<std::size_t> idx{2, 0, 3};
  static const std::vector<int> ids{1, 4, 1, 0};
  using V = std::span<const Var>;
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](Tape&, V v) { return matmul(v[0], v[1]); }},
      {"transpose", {{3, 4}}, [](Tape&, V v) { return transpose(v[0]); }},
      {"add", {{3, 4}, {3, 4}}, [](Tape&, V v) { return add(v[0], v[1]); }},
      {"add_row", {{3, 4}, {4}}, [](Tape&, V v) { return add(v[0], v[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](Tape&, V v) { return sub(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](Tape&, V v) { return mul(v[0], v[1]); }},
      {"mul_row", {{3, 4}, {4}}, [](Tape&, V v) { return mul(v[0], v[1]); }},
      {"mul_scalar", {{3, 4}, {1}}, [](Tape&, V v) { return mul(v[0], v[1]); }},
      {"minimum", {{3, 4}, {3, 4}}, [](Tape&, V v) { return minimum(v[0], v[1]); }},
      {"scale", {{3, 4}}, [](Tape&, V v) { return scale(v[0], -1.7); }},
      {"shift", {{3, 4}}, [](Tape&, V v) { return shift(v[0], 0.3); }},
      {"exp", {{3, 4}}, [](Tape&, V v) { return exp(v[0]); }},
      {"log", {{3, 4}}, [](Tape&, V v) { return log(shift(mul(v[0], v[0]), 0.5)); }},
      {"sigmoid", {{3, 4}}, [](Tape&, V v) { return sigmoid(v[0]); }},
      {"log_sigmoid", {{3, 4}}, [](Tape&, V v) { return log_sigmoid(scale(v[0], 3.0)); }},
      {"gelu", {{3, 4}}, [](Tape&, V v) { return gelu(v[0]); }},
      {"clamp", {{3, 4}}, [](Tape&, V v) { return clamp(v[0], -0.5, 0.5); }},
      {"sum", {{3, 4}}, [](Tape&, V v) { return sum(v[0]); }},
      {"mean", {{3, 4}}, [](Tape&, V v) { return mean(v[0]); }},
      {"reshape", {{3, 4}}, [](Tape&, V v) { return reshape(v[0], {2, 6}); }},
      {"row_softmax", {{3, 4}}, [](Tape&, V v) { return row_softmax(v[0]); }},
      {"row_log_softmax", {{3, 4}}, [](Tape&, V v) { return row_log_softmax(v[0]); }},
      {"layer_norm", {{3, 4}}, [](Tape&, V v) { return layer_norm(v[0]); }},
      {"embedding", {{5, 3}}, [](Tape&, V v) { return embedding(v[0], ids); }},
      {"gather", {{3, 4}}, [](Tape&, V v) { return gather(v[0], idx); }},
      {"causal_mask_fill", {{4, 4}}, [](Tape&, V v) { return row_softmax(causal_mask_fill(v[0])); }},
      {"slice_cols", {{3, 4}}, [](Tape&, V v) { return slice_cols(v[0], 1, 2); }},
      {"slice_rows", {{3, 4}}, [](Tape&, V v) { return slice_rows(v[0], 1, 2); }},
      {"concat_cols", {{3, 2}, {3, 3}}, [](Tape&, V v) { return concat_cols(std::vector<Var>{v[0], v[1]}); }},
      {"mean_rows", {{3, 4}}, [](Tape&, V v) { return mean_rows(v[0]); }},
  };
}

inline double primitive_error(const GradCase& c, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {17}));
  std::vector<NDArray> points;
  for (const auto& s : c.shapes) points.push_back(random_array(rng, s));
  return grad_check([&](Tape& t, std::span<const Var> v) { return weighted_sum(t, c.fn(t, v), seed); }, points, 1e-6);
}

// ---- composed losses on tiny random models ----

inline constexpr std::size_t kGradVocab = 11;

inline Tokens random_tokens(Rng& rng, std::size_t n) {
  Tokens t(n);
  for (int& v : t) v = static_cast<int>(rng.below(kGradVocab));
  return t;
}

inline double mse_error(std::uint64_t seed) {
  Rng rng(derive_seed(seed, {1}));
  const auto ck = spread_checkpoint(tiny_config(HeadKind::regression, kGradVocab, 8, 1), seed, 0.3);
  const Tokens dialogue = random_tokens(rng, 5);
  std::array<int, kMetricCount> labels{};
  for (int& v : labels) v = static_cast<int>(rng.below(11));
  const ImpressionScores label(labels);
  return grad_check(
      [&](Tape& t, std::span<const Var> vars) { return mse_loss(t, reward_outputs(bind_leaves(ck, vars), dialogue), label); },
      values_of(ck));
}

inline double dpo_error(std::uint64_t seed) {
  Rng rng(derive_seed(seed, {2}));
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token, kGradVocab, 8, 1), seed, 0.3);
  const Tokens context = random_tokens(rng, 3), accepted = random_tokens(rng, 2), rejected = random_tokens(rng, 3);
  const double ref_w = rng.normal(0, 1), ref_l = rng.normal(0, 1);
  return grad_check(
      [&](Tape&, std::span<const Var> vars) {
        BoundModel m = bind_leaves(ck, vars);
        Var lp = response_token_log_probs(m, context, accepted);
        Var w = shift(sum(lp), -ref_w);
        Var l = shift(sum(response_token_log_probs(m, context, rejected)), -ref_l);
        // Same composition as train_dpo with the NLL term on.
        return add(dpo_loss(w, l, 0.5), scale(mean(lp), -0.7));
      },
      values_of(ck));
}

inline double ppo_policy_error(std::uint64_t seed) {
  Rng rng(derive_seed(seed, {3}));
  const auto ck = spread_checkpoint(tiny_config(HeadKind::token, kGradVocab, 8, 1), seed, 0.3);
  const Tokens context = random_tokens(rng, 3), response = random_tokens(rng, 3);
  auto behavior = response_log_prob(ck, context, response).per_token;
  // Offsets keep every ratio at least 0.05 away from the clip kinks at 1 +- 0.2.
  const std::array<double, 3> offsets{0.05, -0.4, 0.5};
  for (std::size_t i = 0; i < behavior.size(); ++i) behavior[i] += offsets[i];
  std::vector<double> adv(response.size());
  for (double& a : adv) a = rng.normal(0, 1);
  return grad_check(
      [&](Tape&, std::span<const Var> vars) {
        return clipped_surrogate(response_token_log_probs(bind_leaves(ck, vars), context, response), behavior, adv, 0.2);
      },
      values_of(ck));
}

inline double ppo_value_error(std::uint64_t seed) {
  Rng rng(derive_seed(seed, {4}));
  const auto critic = spread_checkpoint(tiny_config(HeadKind::value, kGradVocab, 8, 1), seed, 0.3);
  const Tokens context = random_tokens(rng, 3), response = random_tokens(rng, 3);
  NDArray targets({3, 1});
  for (double& v : targets.values()) v = rng.normal(0, 1);
  return grad_check(
      [&](Tape& t, std::span<const Var> vars) {
        Var diff = sub(response_values(bind_leaves(critic, vars), context, response), t.constant(targets));
        return scale(sum(mul(diff, diff)), 0.5);
      },
      values_of(critic));
}

struct CompositeCase {
  const char* name;
  double (*error)(std::uint64_t);
};

inline const std::array<CompositeCase, 4> kCompositeCases{{
    {"mse", mse_error},
    {"dpo", dpo_error},
    {"ppo_surrogate", ppo_policy_error},
    {"ppo_value", ppo_value_error},
}};

}  // namespace rlaif::testing
