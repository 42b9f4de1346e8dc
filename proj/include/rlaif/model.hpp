#pragma once

// Decoder-only transformer with three interchangeable heads: next-token
// (policy), 12-way regression (reward model) and per-position value (critic).
// Pre-LayerNorm blocks, learned positional embeddings, GELU feed-forward.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rlaif/adam.hpp"
#include "rlaif/corpus.hpp"
#include "rlaif/errors.hpp"
#include "rlaif/random.hpp"
#include "rlaif/tensor.hpp"

namespace rlaif {

enum class HeadKind : std::uint32_t { token = 0, regression = 1, value = 2 };
enum class Pooling : std::uint32_t { final_position = 0, mean = 1 };

inline std::string_view head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::token: return "token";
    case HeadKind::regression: return "regression-12";
    case HeadKind::value: return "value";
  }
  return "?";
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t context_limit = 256;
  std::size_t layer_count = 2;
  std::size_t model_width = 64;
  std::size_t head_count = 2;
  std::size_t ffn_width = 256;
  HeadKind head_kind = HeadKind::token;
  Pooling pooling = Pooling::final_position;

  void validate() const {
    if (vocab_size == 0 || context_limit == 0 || layer_count == 0 || model_width == 0 || head_count == 0 ||
        ffn_width == 0) {
      throw ValidationError("model config: every size must be positive");
    }
    if (model_width % head_count != 0) {
      throw ValidationError("model config: width " + std::to_string(model_width) + " not divisible by " +
                            std::to_string(head_count) + " heads");
    }
    if (static_cast<std::uint32_t>(head_kind) > 2 || static_cast<std::uint32_t>(pooling) > 1) {
      throw ValidationError("model config: unknown head kind or pooling");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Desk-scale defaults for a given head.
inline ModelConfig default_model_config(HeadKind head) {
  ModelConfig c;
  c.vocab_size = vocabulary().size();
  c.head_kind = head;
  return c;
}

struct TrainingMetadata {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  double criterion = 0.0;  // selection value (dev MSE, training loss, ...) of the saved epoch
  std::string note;
  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

struct Parameter {
  std::string name;
  NDArray value;
  friend bool operator==(const Parameter&, const Parameter&) = default;
};

class Checkpoint {
 public:
  ModelConfig config;
  std::vector<Parameter> params;
  TrainingMetadata meta;

  const NDArray& param(std::string_view name) const { return params.at(index(name)).value; }
  NDArray& param(std::string_view name) { return params.at(index(name)).value; }

  std::size_t index(std::string_view name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return i;
    throw std::out_of_range("checkpoint has no parameter '" + std::string(name) + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// Parameter names and shapes implied by a config, in storage order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  const std::size_t d = c.model_width;
  std::vector<std::pair<std::string, Shape>> out{
      {"tok_emb", {c.vocab_size, d}},
      {"pos_emb", {c.context_limit, d}},
  };
  for (std::size_t l = 0; l < c.layer_count; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", {d}});
    out.push_back({p + "ln1.bias", {d}});
    out.push_back({p + "attn.qkv.weight", {d, 3 * d}});
    out.push_back({p + "attn.qkv.bias", {3 * d}});
    out.push_back({p + "attn.out.weight", {d, d}});
    out.push_back({p + "attn.out.bias", {d}});
    out.push_back({p + "ln2.gain", {d}});
    out.push_back({p + "ln2.bias", {d}});
    out.push_back({p + "mlp.in.weight", {d, c.ffn_width}});
    out.push_back({p + "mlp.in.bias", {c.ffn_width}});
    out.push_back({p + "mlp.out.weight", {c.ffn_width, d}});
    out.push_back({p + "mlp.out.bias", {d}});
  }
  out.push_back({"ln_f.gain", {d}});
  out.push_back({"ln_f.bias", {d}});
  const std::size_t outputs =
      c.head_kind == HeadKind::token ? c.vocab_size : (c.head_kind == HeadKind::regression ? kMetricCount : 1);
  out.push_back({"head.weight", {d, outputs}});
  out.push_back({"head.bias", {outputs}});
  return out;
}

// The regression head works on a [-1, 1] scale mapped onto 0..10 as mid + half_range * y.
inline constexpr double kScoreMid = 5.0;
inline constexpr double kScoreHalfRange = 5.0;
// Keeps initial regression outputs near the middle of the scale.
inline constexpr double kRegressionHeadShrink = 0.1;

inline Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  ck.meta.seed = seed;
  Rng rng(derive_seed(seed, {0x1A17}));
  const double embedding_sd = 0.02;
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.layer_count));
  for (auto& [name, shape] : parameter_layout(config)) {
    NDArray a(shape);
    if (name.ends_with(".gain")) {
      std::fill(a.values().begin(), a.values().end(), 1.0);
    } else if (name.ends_with(".bias") || (name == "head.weight" && config.head_kind == HeadKind::value)) {
      // zero
    } else if (name.ends_with("_emb")) {
      for (double& v : a.values()) v = rng.normal(0.0, embedding_sd);
    } else {
      // Weight matrices: 1/sqrt(fan_in), shrunk on the residual output projections.
      double sd = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      if (name.ends_with("attn.out.weight") || name.ends_with("mlp.out.weight")) sd *= residual_scale;
      if (name == "head.weight" && config.head_kind == HeadKind::regression) sd *= kRegressionHeadShrink;
      for (double& v : a.values()) v = rng.normal(0.0, sd);
    }
    ck.params.push_back({name, std::move(a)});
  }
  return ck;
}

// Copies every trunk parameter of `base` into a fresh checkpoint with a different head.
// The new head keeps its own initialization.
inline Checkpoint with_new_head(const Checkpoint& base, HeadKind head, std::uint64_t seed) {
  ModelConfig c = base.config;
  c.head_kind = head;
  Checkpoint ck = init_checkpoint(c, seed);
  for (auto& p : ck.params) {
    if (p.name.starts_with("head.")) continue;
    p.value = base.param(p.name);
  }
  return ck;
}

// Parameters of a checkpoint placed on a tape, in storage order.
struct BoundModel {
  const ModelConfig* config = nullptr;
  std::vector<Var> vars;
  std::unordered_map<std::string, std::size_t> index;

  const Var& operator[](const std::string& name) const { return vars[index.at(name)]; }
};

inline BoundModel bind(Tape& tape, const Checkpoint& ck, bool trainable) {
  BoundModel b;
  b.config = &ck.config;
  b.vars.reserve(ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    b.vars.push_back(trainable ? tape.leaf(ck.params[i].value) : tape.constant(ck.params[i].value));
    b.index.emplace(ck.params[i].name, i);
  }
  return b;
}

// Gradients of every bound parameter, in storage order.
inline std::vector<NDArray> parameter_gradients(Gradients& grads, const BoundModel& b) {
  std::vector<NDArray> out;
  out.reserve(b.vars.size());
  for (const auto& v : b.vars) out.push_back(grads.take(v));
  return out;
}

namespace detail {

inline void check_tokens(const ModelConfig& c, std::span<const int> tokens) {
  if (tokens.empty()) throw ValidationError("model input is empty");
  if (tokens.size() > c.context_limit) {
    throw ValidationError("input of " + std::to_string(tokens.size()) + " tokens exceeds context limit " +
                          std::to_string(c.context_limit));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
      throw ValidationError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(c.vocab_size));
    }
  }
}

inline void require_head(const ModelConfig& c, HeadKind k) {
  if (c.head_kind != k) {
    throw ValidationError("model has a " + std::string(head_kind_name(c.head_kind)) + " head, operation needs " +
                          std::string(head_kind_name(k)));
  }
}

inline Var affine_norm(const Var& x, const Var& gain, const Var& bias) { return add(mul(layer_norm(x), gain), bias); }

}  // namespace detail

// Final-LayerNorm hidden states, one row per input position.
inline Var hidden_states(const BoundModel& m, std::span<const int> tokens) {
  const ModelConfig& c = *m.config;
  detail::check_tokens(c, tokens);
  const std::size_t n = tokens.size();
  const std::size_t d = c.model_width;
  const std::size_t hd = d / c.head_count;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Var x = add(embedding(m["tok_emb"], tokens), slice_rows(m["pos_emb"], 0, n));
  for (std::size_t l = 0; l < c.layer_count; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Var h = detail::affine_norm(x, m[p + "ln1.gain"], m[p + "ln1.bias"]);
    Var qkv = add(matmul(h, m[p + "attn.qkv.weight"]), m[p + "attn.qkv.bias"]);
    std::vector<Var> heads;
    for (std::size_t i = 0; i < c.head_count; ++i) {
      Var q = slice_cols(qkv, i * hd, hd);
      Var k = slice_cols(qkv, d + i * hd, hd);
      Var v = slice_cols(qkv, 2 * d + i * hd, hd);
      Var att = row_softmax(causal_mask_fill(scale(matmul(q, transpose(k)), inv_sqrt)));
      heads.push_back(matmul(att, v));
    }
    Var attn = heads.size() == 1 ? heads[0] : concat_cols(heads);
    x = add(x, add(matmul(attn, m[p + "attn.out.weight"]), m[p + "attn.out.bias"]));
    Var h2 = detail::affine_norm(x, m[p + "ln2.gain"], m[p + "ln2.bias"]);
    Var f = gelu(add(matmul(h2, m[p + "mlp.in.weight"]), m[p + "mlp.in.bias"]));
    x = add(x, add(matmul(f, m[p + "mlp.out.weight"]), m[p + "mlp.out.bias"]));
  }
  return detail::affine_norm(x, m["ln_f.gain"], m["ln_f.bias"]);
}

// [n, vocab] next-token log-probabilities; row t conditions on tokens[0..t].
inline Var token_log_probs(const BoundModel& m, std::span<const int> tokens) {
  detail::require_head(*m.config, HeadKind::token);
  Var h = hidden_states(m, tokens);
  return row_log_softmax(add(matmul(h, m["head.weight"]), m["head.bias"]));
}

// [12] raw (unclamped) scores in canonical metric order.
inline Var reward_outputs(const BoundModel& m, std::span<const int> tokens) {
  detail::require_head(*m.config, HeadKind::regression);
  Var h = hidden_states(m, tokens);
  Var pooled = m.config->pooling == Pooling::final_position
                   ? slice_rows(h, tokens.size() - 1, 1)
                   : reshape(mean_rows(h), {1, m.config->model_width});
  Var y = reshape(add(matmul(pooled, m["head.weight"]), m["head.bias"]), {kMetricCount});
  return shift(scale(y, kScoreHalfRange), kScoreMid);
}

// [n] per-position values.
inline Var value_outputs(const BoundModel& m, std::span<const int> tokens) {
  detail::require_head(*m.config, HeadKind::value);
  Var h = hidden_states(m, tokens);
  return reshape(add(matmul(h, m["head.weight"]), m["head.bias"]), {tokens.size()});
}

namespace detail {

inline void check_response(const ModelConfig& c, std::span<const int> context, std::span<const int> response) {
  if (response.empty()) throw ValidationError("response is empty");
  if (context.empty()) throw ValidationError("context is empty");
  if (context.size() + response.size() > c.context_limit) {
    throw ValidationError("context + response (" + std::to_string(context.size() + response.size()) +
                          " tokens) exceeds context limit " + std::to_string(c.context_limit));
  }
}

}  // namespace detail

// [n] log-probabilities of each response token given the context and earlier response tokens.
inline Var response_token_log_probs(const BoundModel& m, std::span<const int> context, std::span<const int> response) {
  detail::check_response(*m.config, context, response);
  Tokens input(context.begin(), context.end());
  input.insert(input.end(), response.begin(), response.end() - 1);
  Var lp = token_log_probs(m, input);
  Var rows = slice_rows(lp, context.size() - 1, response.size());
  std::vector<std::size_t> targets(response.begin(), response.end());
  return gather(rows, targets);
}

inline NDArray lm_forward(const Checkpoint& ck, std::span<const int> tokens) {
  Tape tape(false);
  return token_log_probs(bind(tape, ck, false), tokens).value();
}

struct ResponseLogProb {
  double total = 0.0;
  std::vector<double> per_token;
};

inline ResponseLogProb response_log_prob(const Checkpoint& ck, std::span<const int> context,
                                         std::span<const int> response) {
  Tape tape(false);
  const NDArray lp = response_token_log_probs(bind(tape, ck, false), context, response).value();
  ResponseLogProb out;
  out.per_token.assign(lp.values().begin(), lp.values().end());
  for (double v : out.per_token) out.total += v;
  return out;
}

// exp of the negative mean per-token log-probability of the response, context excluded.
inline double perplexity_from_log_prob(const ResponseLogProb& lp) {
  if (lp.per_token.empty()) throw ValidationError("perplexity of an empty response");
  return std::exp(-lp.total / static_cast<double>(lp.per_token.size()));
}

inline double perplexity(const Checkpoint& base, std::span<const int> context, std::span<const int> response) {
  return perplexity_from_log_prob(response_log_prob(base, context, response));
}

inline std::array<double, kMetricCount> reward_forward(const Checkpoint& ck, std::span<const int> tokens) {
  Tape tape(false);
  const NDArray out = reward_outputs(bind(tape, ck, false), tokens).value();
  std::array<double, kMetricCount> r{};
  std::copy(out.values().begin(), out.values().end(), r.begin());
  return r;
}

inline std::vector<double> value_forward(const Checkpoint& ck, std::span<const int> tokens) {
  Tape tape(false);
  const NDArray out = value_outputs(bind(tape, ck, false), tokens).value();
  return {out.values().begin(), out.values().end()};
}

struct SamplingConfig {
  double temperature = 1.0;
  std::size_t top_k = 0;  // 0 keeps the whole vocabulary
  std::size_t max_tokens = 8;
  std::uint64_t seed = 0;
  bool greedy = false;
};

// Next-token distribution after applying temperature and top-k; greedy puts all mass on the argmax.
inline std::vector<double> sampling_distribution(std::span<const double> logits, const SamplingConfig& s) {
  const std::size_t v = logits.size();
  std::vector<double> p(v, 0.0);
  if (s.greedy) {
    p[static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin())] = 1.0;
    return p;
  }
  std::vector<std::size_t> order(v);
  for (std::size_t i = 0; i < v; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  const std::size_t keep = (s.top_k == 0 || s.top_k > v) ? v : s.top_k;
  const double top = logits[order[0]];
  double z = 0.0;
  for (std::size_t r = 0; r < keep; ++r) z += (p[order[r]] = std::exp((logits[order[r]] - top) / s.temperature));
  for (double& x : p) x /= z;
  return p;
}

inline std::size_t sample_index(std::span<const double> p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    acc += p[i];
    last = i;
    if (u < acc) return i;
  }
  return last;
}

// Samples a response turn. Stops after <eot>, max_tokens, or the context limit.
inline Tokens generate(const Checkpoint& ck, std::span<const int> context, const SamplingConfig& s) {
  detail::require_head(ck.config, HeadKind::token);
  if (!s.greedy && !(s.temperature > 0)) throw ValidationError("generate: temperature must be positive unless greedy");
  if (context.empty()) throw ValidationError("generate: empty context");
  if (context.size() >= ck.config.context_limit) {
    throw ValidationError("generate: context of " + std::to_string(context.size()) + " tokens leaves no room under limit " +
                          std::to_string(ck.config.context_limit));
  }
  Rng rng(s.seed);
  Tokens seq(context.begin(), context.end());
  Tokens out;
  const int eot = vocabulary().end_of_turn();
  while (out.size() < s.max_tokens && seq.size() < ck.config.context_limit) {
    Tape tape(false);
    BoundModel m = bind(tape, ck, false);
    Var h = slice_rows(hidden_states(m, seq), seq.size() - 1, 1);
    Var logits = add(matmul(h, m["head.weight"]), m["head.bias"]);
    const auto p = sampling_distribution(logits.value().values(), s);
    const int next = static_cast<int>(sample_index(p, rng));
    out.push_back(next);
    seq.push_back(next);
    if (next == eot) break;
  }
  return out;
}

// ---- training helpers shared by the trainers ----

// Running sum of per-item parameter gradients.
class GradientAccumulator {
 public:
  void add(const std::vector<NDArray>& grads, double weight) {
    if (sum_.empty()) {
      for (const auto& g : grads) sum_.emplace_back(g.shape());
    }
    for (std::size_t k = 0; k < grads.size(); ++k) {
      double* dst = sum_[k].data();
      const double* src = grads[k].data();
      for (std::size_t i = 0; i < grads[k].size(); ++i) dst[i] += weight * src[i];
    }
  }
  bool empty() const noexcept { return sum_.empty(); }
  const std::vector<NDArray>& sum() const noexcept { return sum_; }
  void clear() { sum_.clear(); }

 private:
  std::vector<NDArray> sum_;
};

struct OptimizerConfig {
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 0;  // linear ramp from 0 to learning_rate
  double max_grad_norm = 0.0;    // 0 disables clipping

  void validate(const char* who) const {
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) {
      throw ValidationError(std::string(who) + ": learning rate must be finite and >= 0");
    }
    if (!(max_grad_norm >= 0)) throw ValidationError(std::string(who) + ": max grad norm must be >= 0");
  }
};

// Adam over every checkpoint parameter with optional warmup and global-norm clipping.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  // Returns the gradient norm before clipping.
  double step(Checkpoint& ck, std::vector<NDArray> grads) {
    const double norm = clip_global_norm(grads, config_.max_grad_norm);
    if (!std::isfinite(norm)) throw NumericError("optimizer: non-finite gradient norm");
    AdamConfig adam;
    adam.learning_rate = config_.learning_rate;
    if (config_.warmup_steps > 0) {
      adam.learning_rate *= std::min(1.0, static_cast<double>(state_.step + 1) / static_cast<double>(config_.warmup_steps));
    }
    std::vector<NDArray> values;
    values.reserve(ck.params.size());
    for (auto& p : ck.params) values.push_back(std::move(p.value));
    adam_step(values, grads, state_, adam);
    for (std::size_t i = 0; i < values.size(); ++i) ck.params[i].value = std::move(values[i]);
    return norm;
  }

  std::uint64_t steps() const noexcept { return state_.step; }

 private:
  OptimizerConfig config_;
  AdamState state_;
};

}  // namespace rlaif
