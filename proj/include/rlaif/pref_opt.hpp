#pragma once

// Preference tuning of the policy against a trained reward model: pair building + DPO, and PPO.

#include <json.hpp>

#include <cmath>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "rlaif/corpus.hpp"
#include "rlaif/model.hpp"
#include "rlaif/parallel.hpp"
#include "rlaif/reward_model.hpp"

namespace rlaif {

// ---- preference pairs ----

struct PreferencePair {
  std::string context_id;
  Tokens context;
  Tokens accepted;
  Tokens rejected;
  Metric metric = Metric{};
  double score_accepted = 0.0;
  double score_rejected = 0.0;

  bool operator==(const PreferencePair&) const = default;
};

struct PairBuildResult {
  std::vector<PreferencePair> pairs;
  std::size_t skipped_identical = 0;
  std::size_t skipped_tie = 0;  // equal scores, or a gap below the requested minimum
};

// The two candidates of a context: sampled responses with their reward for `metric`.
struct Candidate {
  Tokens response;
  double score = 0.0;
};

// Orders two candidates into a pair; nullopt for identical responses, tied scores, or a score gap
// below `min_gap`.
inline std::optional<PreferencePair> order_candidates(const Prompt& prompt, Metric metric, const Candidate& a,
                                                      const Candidate& b, double min_gap = 0.0) {
  if (a.response == b.response || a.score == b.score || std::abs(a.score - b.score) < min_gap) return std::nullopt;
  const bool a_wins = a.score > b.score;
  const Candidate& hi = a_wins ? a : b;
  const Candidate& lo = a_wins ? b : a;
  return PreferencePair{prompt.id, prompt.tokens, hi.response, lo.response, metric, hi.score, lo.score};
}

inline double metric_score(const Checkpoint& rm, std::span<const int> context, std::span<const int> response, Metric m) {
  return predict_scores(rm, context, response)[index_of(m)];
}

// Seed of sample `which` (0 or 1) for a context, keyed by context id so list order does not matter.
inline std::uint64_t sample_seed(std::uint64_t seed, std::string_view context_id, std::uint64_t which) {
  return derive_seed(seed, {stable_hash(context_id), which});
}

inline PairBuildResult build_preference_pairs(const Checkpoint& policy, const Checkpoint& rm, std::span<const Prompt> prompts,
                                              Metric metric, SamplingConfig sampling, std::uint64_t seed,
                                              double min_gap = 0.0) {
  if (prompts.empty()) throw ValidationError("build_preference_pairs: no contexts");
  if (!(min_gap >= 0) || !std::isfinite(min_gap)) throw ValidationError("build_preference_pairs: min gap must be finite and >= 0");
  detail::require_head(rm.config, HeadKind::regression);
  std::vector<std::array<Candidate, 2>> drawn(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    for (std::uint64_t k = 0; k < 2; ++k) {
      SamplingConfig s = sampling;
      s.seed = sample_seed(seed, prompts[i].id, k);
      Candidate& c = drawn[i][k];
      c.response = generate(policy, prompts[i].tokens, s);
      c.score = metric_score(rm, prompts[i].tokens, c.response, metric);
    }
  });
  PairBuildResult out;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& [a, b] = drawn[i];
    if (auto pair = order_candidates(prompts[i], metric, a, b, min_gap)) {
      out.pairs.push_back(std::move(*pair));
    } else if (a.response == b.response) {
      ++out.skipped_identical;
    } else {
      ++out.skipped_tie;
    }
  }
  return out;
}

inline nlohmann::ordered_json pair_to_json(const PreferencePair& p) {
  nlohmann::ordered_json j;
  j["context_id"] = p.context_id;
  j["context_tokens"] = p.context;
  j["accepted"] = p.accepted;
  j["rejected"] = p.rejected;
  j["metric"] = metric_name(p.metric);
  j["score_accepted"] = p.score_accepted;
  j["score_rejected"] = p.score_rejected;
  return j;
}

inline PreferencePair pair_from_json(const nlohmann::json& j) {
  PreferencePair p;
  p.context_id = j.at("context_id").get<std::string>();
  p.context = j.at("context_tokens").get<Tokens>();
  p.accepted = j.at("accepted").get<Tokens>();
  p.rejected = j.at("rejected").get<Tokens>();
  p.metric = metric_from_name(j.at("metric").get<std::string>());
  p.score_accepted = j.at("score_accepted").get<double>();
  p.score_rejected = j.at("score_rejected").get<double>();
  const int v = static_cast<int>(vocabulary().size());
  for (const Tokens* t : {&p.context, &p.accepted, &p.rejected}) {
    if (t->empty()) throw ValidationError("empty token list");
    for (int id : *t)
      if (id < 0 || id >= v) throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
  }
  if (!(p.score_accepted > p.score_rejected)) throw ValidationError("score_accepted must exceed score_rejected");
  return p;
}

inline void write_pairs(std::ostream& os, std::span<const PreferencePair> pairs) {
  for (const auto& p : pairs) os << pair_to_json(p).dump() << '\n';
}

inline std::vector<PreferencePair> read_pairs(std::istream& is) {
  std::vector<PreferencePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(pair_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- DPO ----

struct DPOConfig {
  double beta = 0.1;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer{5e-5, 0, 1.0};
  std::uint64_t seed = 1;
  // Weight of an added mean per-token NLL on the accepted response (0 = plain DPO).
  double nll_weight = 0.0;

  void validate() const {
    if (!(beta >= 0) || !std::isfinite(beta)) throw ValidationError("dpo: beta must be finite and >= 0");
    if (epochs < 1) throw ValidationError("dpo: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("dpo: batch size must be >= 1");
    if (!(nll_weight >= 0) || !std::isfinite(nll_weight)) throw ValidationError("dpo: nll weight must be finite and >= 0");
    optimizer.validate("dpo");
  }
};

// -log sigmoid(beta * (accepted log-ratio - rejected log-ratio)); log-ratios are policy minus reference.
inline double dpo_loss(double accepted_log_ratio, double rejected_log_ratio, double beta) {
  const double z = beta * (accepted_log_ratio - rejected_log_ratio);
  return z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

inline Var dpo_loss(const Var& accepted_log_ratio, const Var& rejected_log_ratio, double beta) {
  return scale(log_sigmoid(scale(sub(accepted_log_ratio, rejected_log_ratio), beta)), -1.0);
}

inline double dpo_loss(const Checkpoint& policy, const Checkpoint& reference, const PreferencePair& pair, double beta) {
  const double w = response_log_prob(policy, pair.context, pair.accepted).total -
                   response_log_prob(reference, pair.context, pair.accepted).total;
  const double l = response_log_prob(policy, pair.context, pair.rejected).total -
                   response_log_prob(reference, pair.context, pair.rejected).total;
  return dpo_loss(w, l, beta);
}

struct DPOEpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;      // mean over pairs as they were visited during the epoch, NLL term included
  double margin = 0.0;    // mean beta * (accepted log-ratio - rejected log-ratio), same timing
  double accuracy = 0.0;  // fraction of pairs with positive margin
  bool selected = false;
};

struct DPOResult {
  Checkpoint checkpoint;
  std::vector<DPOEpochRecord> log;
};

using DPOEpochCallback = std::function<void(const DPOEpochRecord&)>;

inline void check_pairs_fit(const ModelConfig& c, std::span<const PreferencePair> pairs) {
  for (const auto& p : pairs) {
    detail::check_response(c, p.context, p.accepted);
    detail::check_response(c, p.context, p.rejected);
  }
}

inline DPOResult train_dpo(const Checkpoint& policy, const Checkpoint& reference, std::span<const PreferencePair> pairs,
                           const DPOConfig& cfg, const DPOEpochCallback& on_epoch = {}) {
  cfg.validate();
  if (pairs.empty()) throw ValidationError("dpo: no preference pairs");
  detail::require_head(policy.config, HeadKind::token);
  if (!(reference.config == policy.config)) throw ValidationError("dpo: reference and policy configs differ");
  check_pairs_fit(policy.config, pairs);

  // The reference is frozen, so its log-probs are computed once.
  std::vector<std::array<double, 2>> ref(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    ref[i] = {response_log_prob(reference, pairs[i].context, pairs[i].accepted).total,
              response_log_prob(reference, pairs[i].context, pairs[i].rejected).total};
  });

  Checkpoint ck = policy;
  DPOResult result;
  result.checkpoint = ck;
  Optimizer optimizer(cfg.optimizer);
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, {epoch}));
    rng.shuffle(std::span<std::size_t>(order));
    DPOEpochRecord rec{epoch, 0.0, 0.0, 0.0, false};
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      GradientAccumulator acc;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& p = pairs[order[k]];
        Tape tape;
        BoundModel m = bind(tape, ck, true);
        Var accepted = response_token_log_probs(m, p.context, p.accepted);
        Var w = shift(sum(accepted), -ref[order[k]][0]);
        Var l = shift(sum(response_token_log_probs(m, p.context, p.rejected)), -ref[order[k]][1]);
        Var loss = dpo_loss(w, l, cfg.beta);
        if (cfg.nll_weight > 0) loss = add(loss, scale(mean(accepted), -cfg.nll_weight));
        const double margin = cfg.beta * (w.value().item() - l.value().item());
        rec.loss += loss.value().item();
        rec.margin += margin;
        rec.accuracy += margin > 0 ? 1.0 : 0.0;
        auto grads = tape.backward(loss);
        acc.add(parameter_gradients(grads, m), 1.0 / static_cast<double>(stop - start));
      }
      optimizer.step(ck, acc.sum());
    }
    const double n = static_cast<double>(pairs.size());
    rec.loss /= n;
    rec.margin /= n;
    rec.accuracy /= n;
    if (!std::isfinite(rec.loss)) throw NumericError("dpo: non-finite training loss at epoch " + std::to_string(epoch));
    if (rec.loss < best) {
      best = rec.loss;
      best_index = result.log.size();
      result.checkpoint = ck;
      result.checkpoint.meta = {cfg.seed, epoch, rec.loss, "dpo training loss"};
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.log[best_index].selected = true;
  return result;
}

inline nlohmann::ordered_json to_json(const DPOEpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["loss"] = r.loss;
  j["margin"] = r.margin;
  j["accuracy"] = r.accuracy;
  j["selected"] = r.selected;
  return j;
}

// ---- PPO ----

struct PPOConfig {
  std::size_t epochs = 2;
  double clip_epsilon = 0.2;
  double gamma = 1.0;
  double lambda = 0.95;
  double kl_coef = 0.05;
  std::size_t rollouts_per_update = 32;
  std::size_t minibatch_size = 8;
  OptimizerConfig policy_optimizer{1e-4, 0, 1.0};
  OptimizerConfig value_optimizer{1e-3, 0, 1.0};
  SamplingConfig sampling{};
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1) throw ValidationError("ppo: epochs must be >= 1");
    if (!(clip_epsilon > 0 && clip_epsilon < 1)) throw ValidationError("ppo: clip epsilon must be in (0, 1)");
    if (!(gamma >= 0 && gamma <= 1)) throw ValidationError("ppo: gamma must be in [0, 1]");
    if (!(lambda >= 0 && lambda <= 1)) throw ValidationError("ppo: lambda must be in [0, 1]");
    if (!(kl_coef >= 0) || !std::isfinite(kl_coef)) throw ValidationError("ppo: kl coefficient must be finite and >= 0");
    if (rollouts_per_update < 1) throw ValidationError("ppo: rollouts per update must be >= 1");
    if (minibatch_size < 1) throw ValidationError("ppo: minibatch size must be >= 1");
    policy_optimizer.validate("ppo policy");
    value_optimizer.validate("ppo value");
  }
};

// One sampled response with everything the update needs. Per-token vectors share the response length.
struct Trajectory {
  std::string context_id;
  Tokens context;
  Tokens response;
  std::vector<double> behavior_log_probs;
  std::vector<double> reference_log_probs;
  std::vector<double> values;
  std::vector<double> kl_penalties;  // kl_coef * (behavior - reference log-prob) per token
  double terminal_reward = 0.0;      // reward-model score in [0, 10], unshaped

  void validate() const {
    const std::size_t n = response.size();
    if (n == 0) throw ValidationError("trajectory '" + context_id + "': empty response");
    if (behavior_log_probs.size() != n || reference_log_probs.size() != n || values.size() != n ||
        kl_penalties.size() != n) {
      throw ValidationError("trajectory '" + context_id + "': per-token fields do not match the response length");
    }
    if (!(terminal_reward >= 0 && terminal_reward <= kMaxScore)) {
      throw ValidationError("trajectory '" + context_id + "': terminal reward outside [0, 10]");
    }
  }
};

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Generalized advantage estimation with a zero bootstrap value after the last step.
inline Advantages gae_advantages(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda) {
  if (rewards.size() != values.size()) throw ValidationError("gae: rewards and values differ in length");
  const std::size_t n = rewards.size();
  Advantages out{std::vector<double>(n), std::vector<double>(n)};
  double running = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double next_value = t + 1 < n ? values[t + 1] : 0.0;
    const double delta = rewards[t] + gamma * next_value - values[t];
    running = delta + gamma * lambda * running;
    out.advantages[t] = running;
    out.returns[t] = running + values[t];
  }
  return out;
}

// Per-token rewards: minus the KL penalty everywhere, plus the centered terminal reward on the last token.
inline std::vector<double> shaped_rewards(const Trajectory& t, double reward_baseline) {
  std::vector<double> r(t.kl_penalties.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = -t.kl_penalties[i];
  r.back() += t.terminal_reward - reward_baseline;
  return r;
}

struct SurrogateStats {
  double ratio_sum = 0.0;
  std::size_t clipped = 0;
  std::size_t tokens = 0;
};

// Sum over tokens of min(r A, clip(r, 1-eps, 1+eps) A), r = exp(new - behavior). Maximized by the update.
inline Var clipped_surrogate(const Var& new_log_probs, std::span<const double> behavior_log_probs,
                             std::span<const double> advantages, double epsilon, SurrogateStats* stats = nullptr) {
  Tape& tape = new_log_probs.tape();
  const std::size_t n = advantages.size();
  if (new_log_probs.value().size() != n || behavior_log_probs.size() != n) {
    throw ValidationError("clipped_surrogate: length mismatch");
  }
  Var old_lp = tape.constant(NDArray::vector({behavior_log_probs.begin(), behavior_log_probs.end()}));
  Var adv = tape.constant(NDArray::vector({advantages.begin(), advantages.end()}));
  Var ratio = exp(sub(new_log_probs, old_lp));
  Var objective = sum(minimum(mul(ratio, adv), mul(clamp(ratio, 1.0 - epsilon, 1.0 + epsilon), adv)));
  if (stats) {
    for (std::size_t i = 0; i < n; ++i) {
      const double r = ratio.value().data()[i];
      stats->ratio_sum += r;
      stats->clipped += (r < 1.0 - epsilon || r > 1.0 + epsilon) ? 1 : 0;
    }
    stats->tokens += n;
  }
  return objective;
}

// Input whose value outputs line up with the response tokens: position i predicts token i.
inline Tokens value_input(std::span<const int> context, std::span<const int> response) {
  Tokens t(context.begin(), context.end());
  t.insert(t.end(), response.begin(), response.end() - 1);
  return t;
}

inline Var response_values(const BoundModel& critic, std::span<const int> context, std::span<const int> response) {
  detail::check_response(*critic.config, context, response);
  return slice_rows(reshape(value_outputs(critic, value_input(context, response)), {context.size() + response.size() - 1, 1}),
                    context.size() - 1, response.size());
}

struct PPOStats {
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double kl = 0.0;  // mean per-token behavior-minus-reference log-prob over the batch
  double value_loss = 0.0;
  double surrogate = 0.0;  // mean per-token clipped objective
  double mean_reward = 0.0;
  double mean_advantage = 0.0;
};

// Mutable state of a PPO run: the two models and their optimizers.
struct PPOState {
  Checkpoint policy;
  Checkpoint critic;
  Optimizer policy_optimizer;
  Optimizer value_optimizer;
};

// One epoch of minibatch updates over a rollout batch.
inline PPOStats ppo_update(PPOState& state, std::span<const Trajectory> batch, const PPOConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (batch.empty()) throw ValidationError("ppo_update: empty batch");
  for (const auto& t : batch) t.validate();
  PPOStats stats;
  double kl_sum = 0.0;
  std::size_t token_total = 0;
  for (const auto& t : batch) {
    stats.mean_reward += t.terminal_reward;
    for (std::size_t i = 0; i < t.response.size(); ++i) kl_sum += t.behavior_log_probs[i] - t.reference_log_probs[i];
    token_total += t.response.size();
  }
  stats.mean_reward /= static_cast<double>(batch.size());
  stats.kl = kl_sum / static_cast<double>(token_total);

  std::vector<Advantages> adv(batch.size());
  double adv_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    adv[i] = gae_advantages(shaped_rewards(batch[i], stats.mean_reward), batch[i].values, cfg.gamma, cfg.lambda);
    for (double a : adv[i].advantages) adv_sum += a;
  }
  stats.mean_advantage = adv_sum / static_cast<double>(token_total);

  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  SurrogateStats sur;
  double objective_sum = 0.0;
  double value_loss_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += cfg.minibatch_size) {
    const std::size_t stop = std::min(order.size(), start + cfg.minibatch_size);
    std::size_t mb_tokens = 0;
    for (std::size_t k = start; k < stop; ++k) mb_tokens += batch[order[k]].response.size();
    const double w = 1.0 / static_cast<double>(mb_tokens);
    GradientAccumulator pol, val;
    for (std::size_t k = start; k < stop; ++k) {
      const Trajectory& t = batch[order[k]];
      const Advantages& a = adv[order[k]];
      {
        Tape tape;
        BoundModel m = bind(tape, state.policy, true);
        Var obj = clipped_surrogate(response_token_log_probs(m, t.context, t.response), t.behavior_log_probs, a.advantages,
                                    cfg.clip_epsilon, &sur);
        objective_sum += obj.value().item();
        auto grads = tape.backward(scale(obj, -1.0));
        pol.add(parameter_gradients(grads, m), w);
      }
      {
        Tape tape;
        BoundModel m = bind(tape, state.critic, true);
        Var v = response_values(m, t.context, t.response);
        Var target = tape.constant(NDArray({t.response.size(), 1}, a.returns));
        Var diff = sub(v, target);
        Var loss = scale(sum(mul(diff, diff)), 0.5);
        value_loss_sum += loss.value().item();
        auto grads = tape.backward(loss);
        val.add(parameter_gradients(grads, m), w);
      }
    }
    if (!std::isfinite(objective_sum) || !std::isfinite(value_loss_sum)) throw NumericError("ppo: non-finite loss");
    state.policy_optimizer.step(state.policy, pol.sum());
    state.value_optimizer.step(state.critic, val.sum());
  }
  stats.mean_ratio = sur.ratio_sum / static_cast<double>(sur.tokens);
  stats.clip_fraction = static_cast<double>(sur.clipped) / static_cast<double>(sur.tokens);
  stats.surrogate = objective_sum / static_cast<double>(token_total);
  stats.value_loss = value_loss_sum / static_cast<double>(token_total);
  return stats;
}

// Samples one trajectory per prompt from the current policy snapshot.
inline std::vector<Trajectory> collect_rollouts(const Checkpoint& policy, const Checkpoint& critic, const Checkpoint& reference,
                                                const Checkpoint& rm, Metric metric, std::span<const Prompt> prompts,
                                                const PPOConfig& cfg, std::uint64_t seed) {
  std::vector<Trajectory> out(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    SamplingConfig s = cfg.sampling;
    s.seed = sample_seed(seed, prompts[i].id, 0);
    Trajectory& t = out[i];
    t.context_id = prompts[i].id;
    t.context = prompts[i].tokens;
    t.response = generate(policy, t.context, s);
    t.behavior_log_probs = response_log_prob(policy, t.context, t.response).per_token;
    t.reference_log_probs = response_log_prob(reference, t.context, t.response).per_token;
    t.kl_penalties.resize(t.response.size());
    for (std::size_t k = 0; k < t.response.size(); ++k) {
      t.kl_penalties[k] = cfg.kl_coef * (t.behavior_log_probs[k] - t.reference_log_probs[k]);
    }
    {
      Tape tape(false);
      const NDArray v = response_values(bind(tape, critic, false), t.context, t.response).value();
      t.values.assign(v.values().begin(), v.values().end());
    }
    t.terminal_reward = metric_score(rm, t.context, t.response, metric);
  });
  return out;
}

struct PPOUpdateRecord {
  std::size_t epoch = 0;
  std::size_t update = 0;  // 1-based within the epoch
  PPOStats stats;
};

struct PPOResult {
  Checkpoint policy;
  Checkpoint critic;
  std::vector<PPOUpdateRecord> log;
};

using PPOUpdateCallback = std::function<void(const PPOUpdateRecord&)>;

// Critic starts from the policy trunk with a zero value head.
inline PPOResult train_ppo(const Checkpoint& policy, const Checkpoint& rm, Metric metric, std::span<const Prompt> prompts,
                           const PPOConfig& cfg, const PPOUpdateCallback& on_update = {}) {
  cfg.validate();
  if (prompts.empty()) throw ValidationError("ppo: no contexts");
  detail::require_head(policy.config, HeadKind::token);
  detail::require_head(rm.config, HeadKind::regression);
  const Checkpoint reference = policy;
  PPOState state{policy, with_new_head(policy, HeadKind::value, cfg.seed), Optimizer(cfg.policy_optimizer),
                 Optimizer(cfg.value_optimizer)};
  PPOResult result;
  std::vector<std::size_t> order(prompts.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, {epoch}));
    rng.shuffle(std::span<std::size_t>(order));
    std::size_t update = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.rollouts_per_update) {
      ++update;
      const std::size_t stop = std::min(order.size(), start + cfg.rollouts_per_update);
      std::vector<Prompt> chunk;
      for (std::size_t k = start; k < stop; ++k) chunk.push_back(prompts[order[k]]);
      const auto batch = collect_rollouts(state.policy, state.critic, reference, rm, metric, chunk, cfg,
                                          derive_seed(cfg.seed, {epoch, update, 1}));
      PPOUpdateRecord rec{epoch, update, ppo_update(state, batch, cfg, derive_seed(cfg.seed, {epoch, update, 2}))};
      result.log.push_back(rec);
      if (on_update) on_update(rec);
    }
  }
  state.policy.meta = {cfg.seed, cfg.epochs, result.log.back().stats.mean_reward, "ppo final"};
  result.policy = std::move(state.policy);
  result.critic = std::move(state.critic);
  return result;
}

inline nlohmann::ordered_json to_json(const PPOUpdateRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["update"] = r.update;
  j["mean_reward"] = r.stats.mean_reward;
  j["mean_ratio"] = r.stats.mean_ratio;
  j["clip_fraction"] = r.stats.clip_fraction;
  j["kl"] = r.stats.kl;
  j["value_loss"] = r.stats.value_loss;
  j["surrogate"] = r.stats.surrogate;
  j["mean_advantage"] = r.stats.mean_advantage;
  return j;
}

}  // namespace rlaif
