#pragma once

// Dialogue data model, the closed vocabulary, and a synthetic corpus whose
// impression labels come from a marker-counting oracle.
//
// Each of the 12 impression metrics owns a disjoint set of marker words. The
// oracle score of a session for a metric is round(10 * min(1, c / 5)) where c
// counts that metric's markers in system turns. User turns draw from a
// separate word list, so only system text can move a score.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "rlaif/errors.hpp"
#include "rlaif/random.hpp"

namespace rlaif {

using Tokens = std::vector<int>;

inline constexpr std::size_t kMetricCount = 12;

enum class Metric : std::uint8_t {
  Agency,
  Attentiveness,
  Consistency,
  Ease,
  Empathetic,
  Emotion,
  Enjoyability,
  Humanness,
  Personality,
  Respeak,
  Topic,
  Trust,
};

inline constexpr std::array<Metric, kMetricCount> kMetrics = {
    Metric::Agency,     Metric::Attentiveness, Metric::Consistency, Metric::Ease,
    Metric::Empathetic, Metric::Emotion,       Metric::Enjoyability, Metric::Humanness,
    Metric::Personality, Metric::Respeak,      Metric::Topic,       Metric::Trust,
};

inline constexpr std::size_t index_of(Metric m) { return static_cast<std::size_t>(m); }

inline constexpr std::array<std::string_view, kMetricCount> kMetricNames = {
    "Agency",     "Attentiveness", "Consistency", "Ease",    "Empathetic", "Emotion",
    "Enjoyability", "Humanness",   "Personality", "Respeak", "Topic",      "Trust",
};

// Rater questionnaire for each metric, in metric order.
inline constexpr std::array<std::string_view, kMetricCount> kQuestionnaires = {
    "I felt that the system was speaking from its perspective",
    "The system was interested in me and was actively trying to talk with me",
    "The system's utterances were consistent and coherent",
    "Continuing the dialogue was easy",
    "I was able to empathize with the system's utterances",
    "I felt that the system had feelings",
    "I enjoyed interacting with the system",
    "The system's utterances were humanlike and natural",
    "I could sense the system's personality and character",
    "I want to talk with this system again",
    "I felt that the system had a topic it wanted to discuss",
    "I felt that what the system said was trustworthy",
};

inline constexpr std::size_t kMarkersPerMetric = 4;
inline constexpr int kSaturationCount = 5;
inline constexpr int kMaxScore = 10;

inline constexpr std::array<std::array<std::string_view, kMarkersPerMetric>, kMetricCount> kMarkerWords = {{
    {"myself", "mine", "opinion", "believe"},
    {"you", "your", "tell", "curious"},
    {"therefore", "because", "indeed", "thus"},
    {"simple", "sure", "okay", "fine"},
    {"understand", "sorry", "hard", "together"},
    {"happy", "sad", "glad", "excited"},
    {"fun", "laugh", "joke", "great"},
    {"well", "hmm", "actually", "honestly"},
    {"favorite", "love", "hobby", "style"},
    {"tomorrow", "later", "soon", "someday"},
    {"travel", "music", "movies", "food"},
    {"fact", "true", "data", "source"},
}};

inline constexpr std::array<std::string_view, 32> kSystemFillerWords = {
    "yes",  "no",   "so",    "then",  "maybe", "also",  "very", "really", "just",  "that", "this",
    "it",   "is",   "a",     "the",   "to",    "of",    "and",  "in",     "on",    "for",  "we",
    "they", "there", "here", "now",   "today", "thing", "some", "more",   "not",   "know",
};

inline constexpr std::array<std::string_view, 24> kUserWords = {
    "hello", "hi",   "oh",   "yeah",  "right", "nice", "cool", "wow",  "ok",    "uh",  "um",     "what",
    "why",   "how",  "when", "where", "me",    "my",   "i",    "am",   "did",   "can", "thanks", "bye",
};

inline std::string_view metric_name(Metric m) { return kMetricNames[index_of(m)]; }

inline std::optional<Metric> parse_metric(std::string_view name) {
  for (std::size_t i = 0; i < kMetricCount; ++i)
    if (kMetricNames[i] == name) return kMetrics[i];
  return std::nullopt;
}

inline Metric metric_from_name(std::string_view name) {
  auto m = parse_metric(name);
  if (!m) throw ValidationError("unknown metric '" + std::string(name) + "'");
  return *m;
}

// Fixed token inventory. Ids are assigned in this order: speaker/control tokens,
// score labels "0".."10" (contiguous), marker words by metric, system filler,
// user words, then any questionnaire words not already present.
class Vocabulary {
 public:
  static const Vocabulary& instance() {
    static const Vocabulary vocab;
    return vocab;
  }

  std::size_t size() const noexcept { return words_.size(); }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find(std::string_view w) const {
    auto it = ids_.find(std::string(w));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  int id(std::string_view w) const {
    auto v = find(w);
    if (!v) throw ValidationError("word '" + std::string(w) + "' is not in the vocabulary");
    return *v;
  }

  int system_tag() const noexcept { return 0; }
  int user_tag() const noexcept { return 1; }
  int end_of_turn() const noexcept { return 2; }
  int question_tag() const noexcept { return 3; }
  int answer_tag() const noexcept { return 4; }
  int label(int score) const { return label_base_ + score; }
  int first_label() const noexcept { return label_base_; }
  bool is_control(int id) const noexcept { return id >= 0 && id < label_base_; }

  // Metric whose marker set contains this token, if any.
  std::optional<Metric> marker_metric(int id) const {
    if (id < marker_base_ || id >= marker_base_ + static_cast<int>(kMetricCount * kMarkersPerMetric)) {
      return std::nullopt;
    }
    return kMetrics[static_cast<std::size_t>(id - marker_base_) / kMarkersPerMetric];
  }

  int marker(Metric m, std::size_t k) const {
    return marker_base_ + static_cast<int>(index_of(m) * kMarkersPerMetric + k);
  }

  const std::vector<int>& system_filler() const noexcept { return filler_; }
  const std::vector<int>& user_words() const noexcept { return user_; }

 private:
  Vocabulary() {
    for (const char* w : {"<sys>", "<usr>", "<eot>", "<q>", "<a>"}) add(w);
    label_base_ = static_cast<int>(words_.size());
    for (int s = 0; s <= kMaxScore; ++s) add(std::to_string(s));
    marker_base_ = static_cast<int>(words_.size());
    for (const auto& set : kMarkerWords)
      for (auto w : set) add(w);
    for (auto w : kSystemFillerWords) filler_.push_back(add(w));
    for (auto w : kUserWords) user_.push_back(add(w));
    for (auto q : kQuestionnaires) {
      std::size_t pos = 0;
      while (pos < q.size()) {
        auto end = q.find(' ', pos);
        if (end == std::string_view::npos) end = q.size();
        auto w = q.substr(pos, end - pos);
        if (!find(w)) add(w);
        pos = end + 1;
      }
    }
  }

  int add(std::string_view w) {
    const int id = static_cast<int>(words_.size());
    auto [it, inserted] = ids_.emplace(std::string(w), id);
    if (!inserted) throw std::logic_error("duplicate vocabulary word '" + std::string(w) + "'");
    words_.emplace_back(w);
    return id;
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  std::vector<int> filler_, user_;
  int label_base_ = 0;
  int marker_base_ = 0;
};

inline const Vocabulary& vocabulary() { return Vocabulary::instance(); }

// Words separated by single spaces. Control tokens never appear in text.
inline Tokens tokenize(std::string_view text) {
  const auto& vocab = vocabulary();
  Tokens out;
  if (text.empty()) return out;
  std::size_t pos = 0;
  while (true) {
    auto end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    auto w = text.substr(pos, end - pos);
    auto id = vocab.find(w);
    if (w.empty()) throw ValidationError("tokenize: empty symbol at position " + std::to_string(pos));
    if (!id || vocab.is_control(*id)) {
      throw ValidationError("tokenize: unknown symbol '" + std::string(w) + "' at position " + std::to_string(pos));
    }
    out.push_back(*id);
    if (end == text.size()) break;
    pos = end + 1;
  }
  return out;
}

inline std::string detokenize(std::span<const int> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocabulary().word(ids[i]);
  }
  return out;
}

enum class Speaker { system, user };

inline std::string_view speaker_name(Speaker s) { return s == Speaker::system ? "system" : "user"; }

struct Turn {
  Speaker speaker = Speaker::system;
  std::string text;
  friend bool operator==(const Turn&, const Turn&) = default;
};

// Complete 0..10 score for every metric, indexed in canonical metric order.
class ImpressionScores {
 public:
  ImpressionScores() = default;
  explicit ImpressionScores(const std::array<int, kMetricCount>& values) : values_(values) {
    for (std::size_t i = 0; i < kMetricCount; ++i) {
      if (values_[i] < 0 || values_[i] > kMaxScore) {
        throw ValidationError("score for " + std::string(kMetricNames[i]) + " out of range: " +
                              std::to_string(values_[i]));
      }
    }
  }

  int operator[](Metric m) const { return values_[index_of(m)]; }
  const std::array<int, kMetricCount>& values() const noexcept { return values_; }
  friend bool operator==(const ImpressionScores&, const ImpressionScores&) = default;

 private:
  std::array<int, kMetricCount> values_{};
};

struct DialogueSession {
  std::string id;
  std::vector<Turn> turns;
  std::optional<ImpressionScores> scores;
  friend bool operator==(const DialogueSession&, const DialogueSession&) = default;
};

inline void validate_session(const DialogueSession& s) {
  if (s.turns.empty()) throw ValidationError("session '" + s.id + "' has no turns");
  for (std::size_t i = 0; i < s.turns.size(); ++i) {
    const Speaker expected = i % 2 == 0 ? Speaker::system : Speaker::user;
    if (s.turns[i].speaker != expected) {
      throw ValidationError("session '" + s.id + "' turn " + std::to_string(i) + ": expected " +
                            std::string(speaker_name(expected)) + " to speak");
    }
    try {
      tokenize(s.turns[i].text);
    } catch (const ValidationError& e) {
      throw ValidationError("session '" + s.id + "' turn " + std::to_string(i) + ": " + e.what());
    }
  }
}

// <sys>/<usr> tag, the words, then <eot>, for every turn.
inline Tokens serialize_turns(std::span<const Turn> turns) {
  const auto& vocab = vocabulary();
  Tokens out;
  for (const auto& t : turns) {
    out.push_back(t.speaker == Speaker::system ? vocab.system_tag() : vocab.user_tag());
    auto words = tokenize(t.text);
    out.insert(out.end(), words.begin(), words.end());
    out.push_back(vocab.end_of_turn());
  }
  return out;
}

inline std::size_t last_system_turn(const DialogueSession& s) {
  for (std::size_t i = s.turns.size(); i-- > 0;)
    if (s.turns[i].speaker == Speaker::system) return i;
  throw ValidationError("session '" + s.id + "' has no system turn");
}

// What the reward model reads: the dialogue up to and including its final system turn.
inline Tokens reward_input(const DialogueSession& s) {
  const auto last = last_system_turn(s);
  return serialize_turns(std::span<const Turn>(s.turns).first(last + 1));
}

// A dialogue prefix that ends right before a system turn, as seen by the policy.
struct ResponseContext {
  std::string id;
  std::vector<Turn> turns;
};

// Drops the final system turn (and anything after it) so it can be regenerated.
inline ResponseContext response_context(const DialogueSession& s) {
  const auto last = last_system_turn(s);
  return ResponseContext{s.id, std::vector<Turn>(s.turns.begin(), s.turns.begin() + static_cast<std::ptrdiff_t>(last))};
}

// Serialized context followed by the <sys> tag that opens the response turn.
inline Tokens context_tokens(const ResponseContext& c) {
  Tokens t = serialize_turns(c.turns);
  t.push_back(vocabulary().system_tag());
  return t;
}

// Policy input for one session, keyed by session id.
struct Prompt {
  std::string id;
  Tokens tokens;
};

inline std::vector<Prompt> prompts_from(std::span<const DialogueSession> sessions) {
  std::vector<Prompt> out;
  out.reserve(sessions.size());
  for (const auto& s : sessions) out.push_back({s.id, context_tokens(response_context(s))});
  return out;
}

// Context + response, closed with <eot> when generation stopped at the length cap.
inline Tokens scored_sequence(std::span<const int> context, std::span<const int> response) {
  Tokens t(context.begin(), context.end());
  t.insert(t.end(), response.begin(), response.end());
  if (response.empty() || response.back() != vocabulary().end_of_turn()) t.push_back(vocabulary().end_of_turn());
  return t;
}

// Words of a generated response, without control tokens.
inline std::string response_text(std::span<const int> response) {
  Tokens words;
  for (int id : response)
    if (!vocabulary().is_control(id)) words.push_back(id);
  return detokenize(words);
}

inline int score_from_count(int count) {
  const double frac = std::min(1.0, static_cast<double>(count) / kSaturationCount);
  return static_cast<int>(std::lround(kMaxScore * frac));
}

inline int count_markers(std::span<const Turn> turns, Metric m) {
  int c = 0;
  for (const auto& t : turns) {
    if (t.speaker != Speaker::system) continue;
    for (int id : tokenize(t.text)) {
      auto mm = vocabulary().marker_metric(id);
      if (mm && *mm == m) ++c;
    }
  }
  return c;
}

inline int oracle_score(const DialogueSession& s, Metric m) { return score_from_count(count_markers(s.turns, m)); }

inline ImpressionScores oracle_scores(const DialogueSession& s) {
  std::array<int, kMetricCount> v{};
  for (auto m : kMetrics) v[index_of(m)] = oracle_score(s, m);
  return ImpressionScores(v);
}

struct SyntheticConfig {
  std::size_t sessions = 1600;
  std::size_t turn_count = 32;
  double noise_sd = 1.0;
  std::uint64_t seed = 7;
  int max_markers_per_metric = 5;
  std::size_t system_words = 4;
  std::size_t user_words = 2;
};

// One session; deterministic in (config, index) so sessions can be produced independently.
inline DialogueSession synthetic_session(const SyntheticConfig& cfg, std::size_t index) {
  const auto& vocab = vocabulary();
  Rng rng(derive_seed(cfg.seed, {index}));
  const std::size_t system_turns = (cfg.turn_count + 1) / 2;
  const std::size_t slots = system_turns * cfg.system_words;

  std::array<int, kMetricCount> counts{};
  int total = 0;
  for (auto& c : counts) total += (c = static_cast<int>(rng.between(0, cfg.max_markers_per_metric)));
  while (total > static_cast<int>(slots)) {
    // Drop a uniformly chosen placed marker.
    auto r = static_cast<int>(rng.below(static_cast<std::uint64_t>(total)));
    for (auto& c : counts) {
      if (r < c) {
        --c;
        break;
      }
      r -= c;
    }
    --total;
  }

  std::vector<int> system_words(slots, -1);
  std::vector<std::size_t> order(slots);
  for (std::size_t i = 0; i < slots; ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  std::size_t next = 0;
  for (auto m : kMetrics) {
    for (int k = 0; k < counts[index_of(m)]; ++k) system_words[order[next++]] = vocab.marker(m, rng.below(kMarkersPerMetric));
  }
  const auto& filler = vocab.system_filler();
  for (auto& w : system_words)
    if (w < 0) w = filler[rng.below(filler.size())];

  DialogueSession s;
  std::ostringstream id;
  id << "s" << std::setw(6) << std::setfill('0') << index;
  s.id = id.str();
  const auto& user = vocab.user_words();
  for (std::size_t t = 0; t < cfg.turn_count; ++t) {
    Tokens words;
    if (t % 2 == 0) {
      const std::size_t base = (t / 2) * cfg.system_words;
      words.assign(system_words.begin() + static_cast<std::ptrdiff_t>(base),
                   system_words.begin() + static_cast<std::ptrdiff_t>(base + cfg.system_words));
      s.turns.push_back({Speaker::system, detokenize(words)});
    } else {
      for (std::size_t k = 0; k < cfg.user_words; ++k) words.push_back(user[rng.below(user.size())]);
      s.turns.push_back({Speaker::user, detokenize(words)});
    }
  }

  std::array<int, kMetricCount> labels{};
  for (auto m : kMetrics) {
    int v = oracle_score(s, m);
    if (cfg.noise_sd > 0) v += static_cast<int>(std::lround(rng.normal(0.0, cfg.noise_sd)));
    labels[index_of(m)] = std::clamp(v, 0, kMaxScore);
  }
  s.scores = ImpressionScores(labels);
  return s;
}

inline std::vector<DialogueSession> generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.sessions < 1) throw ValidationError("generate_synthetic: need at least one session");
  if (cfg.turn_count < 2 || cfg.turn_count % 2 != 0) {
    throw ValidationError("generate_synthetic: turn count must be even and positive, got " +
                          std::to_string(cfg.turn_count));
  }
  if (cfg.noise_sd < 0) throw ValidationError("generate_synthetic: noise sd must be non-negative");
  std::vector<DialogueSession> out;
  out.reserve(cfg.sessions);
  for (std::size_t i = 0; i < cfg.sessions; ++i) out.push_back(synthetic_session(cfg, i));
  return out;
}

struct Partition {
  std::vector<DialogueSession> train, dev, test;
};

using SplitRatios = std::array<double, 3>;

// Largest-remainder allocation of n items over the ratios.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitRatios& ratios) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double exact = static_cast<double>(n) * ratios[k];
    counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[k] = exact - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k)
      if (frac[k] > frac[best]) best = k;
    ++counts[best];
    frac[best] = -1.0;
    ++assigned;
  }
  return counts;
}

// Session-level shuffle split; each part keeps the input order.
inline Partition split(std::span<const DialogueSession> sessions, const SplitRatios& ratios, std::uint64_t seed) {
  double total = 0.0;
  std::size_t parts = 0;
  for (double r : ratios) {
    if (r < 0) throw ValidationError("split: negative ratio");
    total += r;
    parts += r > 0 ? 1 : 0;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split: ratios must sum to 1");
  if (sessions.size() < parts) {
    throw ValidationError("split: " + std::to_string(sessions.size()) + " sessions cannot fill " +
                          std::to_string(parts) + " partitions");
  }
  const auto counts = split_counts(sessions.size(), ratios);
  std::vector<std::size_t> order(sessions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  Partition p;
  std::array<std::vector<DialogueSession>*, 3> dest{&p.train, &p.dev, &p.test};
  std::size_t offset = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(offset),
                                 order.begin() + static_cast<std::ptrdiff_t>(offset + counts[k]));
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) dest[k]->push_back(sessions[i]);
    offset += counts[k];
  }
  return p;
}

// Parses "8:1:1" style ratios and normalizes them.
inline SplitRatios parse_ratios(std::string_view text) {
  SplitRatios r{};
  std::size_t k = 0, pos = 0;
  while (pos <= text.size()) {
    auto end = text.find(':', pos);
    if (end == std::string_view::npos) end = text.size();
    if (k == 3) throw ValidationError("ratios: expected three parts in '" + std::string(text) + "'");
    try {
      std::size_t used = 0;
      std::string part(text.substr(pos, end - pos));
      r[k] = std::stod(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ValidationError("ratios: bad number in '" + std::string(text) + "'");
    }
    ++k;
    pos = end + 1;
  }
  if (k != 3) throw ValidationError("ratios: expected three parts in '" + std::string(text) + "'");
  const double total = r[0] + r[1] + r[2];
  if (!(total > 0) || r[0] < 0 || r[1] < 0 || r[2] < 0) throw ValidationError("ratios: must be non-negative and not all zero");
  for (auto& v : r) v /= total;
  return r;
}

// ---- line-delimited session records ----

inline nlohmann::ordered_json session_to_json(const DialogueSession& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["turns"] = nlohmann::ordered_json::array();
  for (const auto& t : s.turns) {
    nlohmann::ordered_json tj;
    tj["speaker"] = speaker_name(t.speaker);
    tj["text"] = t.text;
    j["turns"].push_back(std::move(tj));
  }
  if (s.scores) {
    nlohmann::ordered_json sc = nlohmann::ordered_json::object();
    for (auto m : kMetrics) sc[std::string(metric_name(m))] = (*s.scores)[m];
    j["scores"] = std::move(sc);
  }
  return j;
}

inline DialogueSession session_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("record is not an object");
  for (const auto& [k, v] : j.items()) {
    if (k != "id" && k != "turns" && k != "scores") throw ValidationError("unknown field '" + k + "'");
  }
  if (!j.contains("id") || !j["id"].is_string()) throw ValidationError("missing string field 'id'");
  if (!j.contains("turns") || !j["turns"].is_array()) throw ValidationError("missing array field 'turns'");
  DialogueSession s;
  s.id = j["id"].get<std::string>();
  for (const auto& tj : j["turns"]) {
    if (!tj.is_object() || !tj.contains("speaker") || !tj.contains("text") || tj.size() != 2 ||
        !tj["speaker"].is_string() || !tj["text"].is_string()) {
      throw ValidationError("turn must be {\"speaker\", \"text\"}");
    }
    const auto sp = tj["speaker"].get<std::string>();
    if (sp != "system" && sp != "user") throw ValidationError("unknown speaker '" + sp + "'");
    s.turns.push_back({sp == "system" ? Speaker::system : Speaker::user, tj["text"].get<std::string>()});
  }
  if (j.contains("scores")) {
    const auto& sc = j["scores"];
    if (!sc.is_object()) throw ValidationError("'scores' must be an object");
    std::array<int, kMetricCount> v{};
    std::array<bool, kMetricCount> seen{};
    for (const auto& [name, val] : sc.items()) {
      const auto m = metric_from_name(name);
      if (!val.is_number_integer()) throw ValidationError("score for " + name + " is not an integer");
      v[index_of(m)] = val.get<int>();
      seen[index_of(m)] = true;
    }
    for (std::size_t i = 0; i < kMetricCount; ++i) {
      if (!seen[i]) throw ValidationError("scores missing metric " + std::string(kMetricNames[i]));
    }
    s.scores = ImpressionScores(v);
  }
  validate_session(s);
  return s;
}

inline void write_sessions(std::ostream& os, std::span<const DialogueSession> sessions) {
  for (const auto& s : sessions) os << session_to_json(s).dump() << '\n';
}

inline std::vector<DialogueSession> read_sessions(std::istream& is, const std::string& source = "<stream>") {
  std::vector<DialogueSession> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(session_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_sessions(const std::string& path, std::span<const DialogueSession> sessions) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_sessions(os, sessions);
  if (!os) throw FormatError("write to '" + path + "' failed");
}

inline std::vector<DialogueSession> read_sessions(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  return read_sessions(is, path);
}

}  // namespace rlaif
