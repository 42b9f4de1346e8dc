#pragma once

// Regression reward model over the 12 impression metrics, and the
// label-expectation prompting scorer it is compared against.

#include <array>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rlaif/corpus.hpp"
#include "rlaif/model.hpp"
#include "rlaif/stats.hpp"

namespace rlaif {

using ScoreVector = std::array<double, kMetricCount>;

inline double mse_loss(std::span<const ScoreVector> predictions, std::span<const ImpressionScores> labels) {
  if (predictions.size() != labels.size()) {
    throw ValidationError("mse_loss: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(labels.size()) + " labels");
  }
  if (predictions.empty()) throw ValidationError("mse_loss: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    for (std::size_t m = 0; m < kMetricCount; ++m) {
      const double e = predictions[i][m] - labels[i].values()[m];
      total += e * e;
    }
  return total / static_cast<double>(predictions.size() * kMetricCount);
}

// Mean over metrics of the squared error for one [12] prediction.
inline Var mse_loss(Tape& tape, const Var& prediction, const ImpressionScores& label) {
  std::vector<double> target(label.values().begin(), label.values().end());
  Var diff = sub(prediction, tape.constant(NDArray({kMetricCount}, std::move(target))));
  return mean(mul(diff, diff));
}

struct RMTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer{3e-3, 80, 1.0};
  std::uint64_t seed = 1;
  ModelConfig model = default_model_config(HeadKind::regression);

  void validate() const {
    if (epochs < 1) throw ValidationError("reward training: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("reward training: batch size must be >= 1");
    optimizer.validate("reward training");
    if (model.head_kind != HeadKind::regression) throw ValidationError("reward training: needs a regression head");
    model.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  bool selected = false;
};

struct RMTrainResult {
  Checkpoint checkpoint;
  double initial_dev_loss = 0.0;
  std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline nlohmann::ordered_json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"dev_loss", r.dev_loss}, {"selected", r.selected}};
}

namespace detail {

inline void require_labels(std::span<const DialogueSession> sessions, const char* what) {
  if (sessions.empty()) throw ValidationError(std::string("reward training: ") + what + " set is empty");
  for (const auto& s : sessions)
    if (!s.scores) throw ValidationError(std::string("reward training: ") + what + " session '" + s.id + "' is unlabeled");
}

inline double dev_mse(const Checkpoint& rm, const std::vector<Tokens>& inputs,
                      std::span<const DialogueSession> sessions) {
  std::vector<ScoreVector> preds;
  std::vector<ImpressionScores> labels;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    preds.push_back(reward_forward(rm, inputs[i]));
    labels.push_back(*sessions[i].scores);
  }
  return mse_loss(preds, labels);
}

}  // namespace detail

// Minibatch Adam on per-session MSE; returns the epoch-end checkpoint with the lowest dev MSE.
inline RMTrainResult train_reward_model(std::span<const DialogueSession> train, std::span<const DialogueSession> dev,
                                        const RMTrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  detail::require_labels(train, "training");
  detail::require_labels(dev, "dev");
  std::vector<Tokens> train_in, dev_in;
  for (const auto& s : train) train_in.push_back(reward_input(s));
  for (const auto& s : dev) dev_in.push_back(reward_input(s));

  Checkpoint ck = init_checkpoint(cfg.model, cfg.seed);
  RMTrainResult result;
  result.initial_dev_loss = detail::dev_mse(ck, dev_in, dev);
  result.checkpoint = ck;
  Optimizer optimizer(cfg.optimizer);
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, {epoch}));
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      GradientAccumulator acc;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t i = order[k];
        Tape tape;
        BoundModel m = bind(tape, ck, true);
        Var loss = mse_loss(tape, reward_outputs(m, train_in[i]), *train[i].scores);
        const double value = loss.value().item();
        if (!std::isfinite(value)) {
          throw NumericError("reward training: non-finite loss at epoch " + std::to_string(epoch) + " on session '" +
                             train[i].id + "'");
        }
        epoch_loss += value;
        auto grads = tape.backward(loss);
        acc.add(parameter_gradients(grads, m), 1.0 / static_cast<double>(stop - start));
      }
      optimizer.step(ck, acc.sum());
    }
    EpochRecord rec{epoch, epoch_loss / static_cast<double>(train.size()), detail::dev_mse(ck, dev_in, dev), false};
    if (!std::isfinite(rec.dev_loss)) throw NumericError("reward training: non-finite dev loss at epoch " + std::to_string(epoch));
    if (rec.dev_loss < best) {
      best = rec.dev_loss;
      best_index = result.log.size();
      result.checkpoint = ck;
      result.checkpoint.meta = {cfg.seed, epoch, rec.dev_loss, "dev mse"};
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.log[best_index].selected = true;
  return result;
}

inline ScoreVector clamp_scores(ScoreVector raw) {
  for (double& v : raw) v = std::clamp(v, 0.0, static_cast<double>(kMaxScore));
  return raw;
}

// Clamped 0..10 scores for a full reward-model input.
inline ScoreVector predict_scores(const Checkpoint& rm, std::span<const int> dialogue) {
  return clamp_scores(reward_forward(rm, dialogue));
}

// Scores a candidate system response appended to its context.
inline ScoreVector predict_scores(const Checkpoint& rm, std::span<const int> context, std::span<const int> response) {
  return predict_scores(rm, scored_sequence(context, response));
}

// ---- prompting baseline ----

// Dialogue, then <q> + questionnaire + <a>. The dialogue is cut from the front if the prompt would not fit.
inline Tokens evaluation_prompt(const DialogueSession& s, Metric m, std::size_t context_limit) {
  const auto& vocab = vocabulary();
  Tokens suffix{vocab.question_tag()};
  const Tokens q = tokenize(kQuestionnaires[index_of(m)]);
  suffix.insert(suffix.end(), q.begin(), q.end());
  suffix.push_back(vocab.answer_tag());
  if (suffix.size() >= context_limit) throw ValidationError("evaluation prompt does not fit the context limit");
  Tokens dialogue = reward_input(s);
  const std::size_t room = context_limit - suffix.size();
  Tokens out(dialogue.size() > room ? dialogue.end() - static_cast<std::ptrdiff_t>(room) : dialogue.begin(),
             dialogue.end());
  out.insert(out.end(), suffix.begin(), suffix.end());
  return out;
}

// sum_s s * p(s) after renormalizing the 11 label probabilities.
inline double expected_label_score(std::span<const double> label_probs) {
  if (label_probs.size() != static_cast<std::size_t>(kMaxScore + 1)) {
    throw ValidationError("expected_label_score: need " + std::to_string(kMaxScore + 1) + " label probabilities");
  }
  double z = 0.0, e = 0.0;
  for (std::size_t s = 0; s < label_probs.size(); ++s) {
    z += label_probs[s];
    e += static_cast<double>(s) * label_probs[s];
  }
  if (!(z > 0.0)) throw ValidationError("no probability mass on the score labels");
  return e / z;
}

inline double expected_score_prompting(const Checkpoint& lm, const DialogueSession& s, Metric m) {
  const Tokens prompt = evaluation_prompt(s, m, lm.config.context_limit);
  const NDArray lp = lm_forward(lm, prompt);
  const std::size_t last = prompt.size() - 1;
  // Shift by the best label so the renormalized weights cannot all underflow.
  const int first = vocabulary().first_label();
  double top = -std::numeric_limits<double>::infinity();
  for (int k = 0; k <= kMaxScore; ++k) top = std::max(top, lp(last, static_cast<std::size_t>(first + k)));
  std::array<double, kMaxScore + 1> probs{};
  for (int k = 0; k <= kMaxScore; ++k) probs[k] = std::exp(lp(last, static_cast<std::size_t>(first + k)) - top);
  return expected_label_score(probs);
}

// ---- evaluation against labels ----

struct Scorer {
  std::string name;
  std::function<ScoreVector(const DialogueSession&)> score;
};

inline Scorer reward_model_scorer(std::string name, const Checkpoint& rm) {
  return {std::move(name), [&rm](const DialogueSession& s) { return predict_scores(rm, reward_input(s)); }};
}

inline Scorer prompting_scorer(std::string name, const Checkpoint& lm) {
  return {std::move(name), [&lm](const DialogueSession& s) {
            ScoreVector out{};
            for (Metric m : kMetrics) out[index_of(m)] = expected_score_prompting(lm, s, m);
            return out;
          }};
}

struct RMEvalColumn {
  std::string scorer;
  std::array<std::optional<double>, kMetricCount> rho{};
  friend bool operator==(const RMEvalColumn&, const RMEvalColumn&) = default;
};

struct RMEvalReport {
  std::size_t item_count = 0;
  std::vector<RMEvalColumn> columns;
  friend bool operator==(const RMEvalReport&, const RMEvalReport&) = default;
};

inline RMEvalReport evaluate_rm(std::span<const Scorer> scorers, std::span<const DialogueSession> test) {
  detail::require_labels(test, "test");
  RMEvalReport report;
  report.item_count = test.size();
  for (const auto& scorer : scorers) {
    std::array<std::vector<double>, kMetricCount> pred, gold;
    for (const auto& s : test) {
      const ScoreVector v = scorer.score(s);
      for (std::size_t m = 0; m < kMetricCount; ++m) {
        pred[m].push_back(v[m]);
        gold[m].push_back(s.scores->values()[m]);
      }
    }
    RMEvalColumn col{scorer.name, {}};
    for (std::size_t m = 0; m < kMetricCount; ++m) col.rho[m] = spearman(pred[m], gold[m]);
    report.columns.push_back(std::move(col));
  }
  return report;
}

inline std::string format_rho(const std::optional<double>& rho) {
  if (!rho) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << *rho;
  return os.str();
}

// Metric rows, one column per scorer, "-" where the correlation is undefined.
inline std::string render_rm_table(const RMEvalReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(15) << "metric";
  for (const auto& c : r.columns) os << std::right << std::setw(std::max<int>(10, static_cast<int>(c.scorer.size()) + 2)) << c.scorer;
  os << '\n';
  for (std::size_t m = 0; m < kMetricCount; ++m) {
    os << std::left << std::setw(15) << kMetricNames[m];
    for (const auto& c : r.columns)
      os << std::right << std::setw(std::max<int>(10, static_cast<int>(c.scorer.size()) + 2)) << format_rho(c.rho[m]);
    os << '\n';
  }
  os << "items: " << r.item_count << '\n';
  return os.str();
}

// One JSON record per (metric, scorer); rho is a number or "-".
inline std::string render_rm_records(const RMEvalReport& r) {
  std::ostringstream os;
  for (const auto& c : r.columns)
    for (std::size_t m = 0; m < kMetricCount; ++m) {
      nlohmann::ordered_json j;
      j["metric"] = kMetricNames[m];
      j["scorer"] = c.scorer;
      if (c.rho[m]) j["rho"] = *c.rho[m];
      else j["rho"] = "-";
      j["items"] = r.item_count;
      os << j.dump() << '\n';
    }
  return os.str();
}

inline RMEvalReport parse_rm_records(std::istream& in) {
  RMEvalReport r;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::string scorer = j.at("scorer").get<std::string>();
      const Metric m = metric_from_name(j.at("metric").get<std::string>());
      r.item_count = j.at("items").get<std::size_t>();
      auto it = std::find_if(r.columns.begin(), r.columns.end(), [&](const auto& c) { return c.scorer == scorer; });
      if (it == r.columns.end()) {
        r.columns.push_back({scorer, {}});
        it = r.columns.end() - 1;
      }
      const auto& rho = j.at("rho");
      if (rho.is_string()) {
        if (rho.get<std::string>() != "-") throw ValidationError("rho must be a number or \"-\"");
        it->rho[index_of(m)] = std::nullopt;
      } else {
        it->rho[index_of(m)] = rho.get<double>();
      }
    } catch (const std::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return r;
}

}  // namespace rlaif
