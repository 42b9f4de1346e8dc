#pragma once

// Next-token pretraining of the base policy on serialized dialogues.

#include <numeric>

#include "rlaif/corpus.hpp"
#include "rlaif/model.hpp"
#include "rlaif/reward_model.hpp"

namespace rlaif {

struct LMTrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer{3e-3, 100, 1.0};
  std::uint64_t seed = 1;
  ModelConfig model = default_model_config(HeadKind::token);

  void validate() const {
    if (epochs < 1) throw ValidationError("lm training: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("lm training: batch size must be >= 1");
    optimizer.validate("lm training");
    if (model.head_kind != HeadKind::token) throw ValidationError("lm training: needs a token head");
    model.validate();
  }
};

struct LMTrainResult {
  Checkpoint checkpoint;
  double initial_dev_loss = 0.0;
  std::vector<EpochRecord> log;  // losses are mean per-token negative log-likelihoods
};

// Mean next-token NLL over positions 1..n-1.
inline Var sequence_nll(const BoundModel& m, std::span<const int> tokens) {
  if (tokens.size() < 2) throw ValidationError("sequence_nll: need at least 2 tokens");
  Var lp = token_log_probs(m, tokens.first(tokens.size() - 1));
  std::vector<std::size_t> targets(tokens.begin() + 1, tokens.end());
  return scale(mean(gather(lp, targets)), -1.0);
}

inline double sequence_nll(const Checkpoint& ck, std::span<const int> tokens) {
  Tape tape(false);
  return sequence_nll(bind(tape, ck, false), tokens).value().item();
}

namespace detail {

inline std::vector<Tokens> lm_inputs(std::span<const DialogueSession> sessions, std::size_t limit) {
  std::vector<Tokens> out;
  for (const auto& s : sessions) {
    Tokens t = serialize_turns(s.turns);
    if (t.size() > limit) t.resize(limit);
    out.push_back(std::move(t));
  }
  return out;
}

inline double mean_nll(const Checkpoint& ck, const std::vector<Tokens>& inputs) {
  double total = 0.0;
  for (const auto& t : inputs) total += sequence_nll(ck, t);
  return total / static_cast<double>(inputs.size());
}

}  // namespace detail

inline LMTrainResult train_language_model(std::span<const DialogueSession> train, std::span<const DialogueSession> dev,
                                          const LMTrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.empty() || dev.empty()) throw ValidationError("lm training: train and dev sets must be non-empty");
  const auto train_in = detail::lm_inputs(train, cfg.model.context_limit);
  const auto dev_in = detail::lm_inputs(dev, cfg.model.context_limit);

  Checkpoint ck = init_checkpoint(cfg.model, cfg.seed);
  LMTrainResult result;
  result.initial_dev_loss = detail::mean_nll(ck, dev_in);
  result.checkpoint = ck;
  Optimizer optimizer(cfg.optimizer);
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  std::vector<std::size_t> order(train_in.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, {epoch}));
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      GradientAccumulator acc;
      for (std::size_t k = start; k < stop; ++k) {
        Tape tape;
        BoundModel m = bind(tape, ck, true);
        Var loss = sequence_nll(m, train_in[order[k]]);
        epoch_loss += loss.value().item();
        auto grads = tape.backward(loss);
        acc.add(parameter_gradients(grads, m), 1.0 / static_cast<double>(stop - start));
      }
      optimizer.step(ck, acc.sum());
    }
    EpochRecord rec{epoch, epoch_loss / static_cast<double>(train_in.size()), detail::mean_nll(ck, dev_in), false};
    if (rec.dev_loss < best) {
      best = rec.dev_loss;
      best_index = result.log.size();
      result.checkpoint = ck;
      result.checkpoint.meta = {cfg.seed, epoch, rec.dev_loss, "dev nll"};
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.log[best_index].selected = true;
  return result;
}

}  // namespace rlaif
