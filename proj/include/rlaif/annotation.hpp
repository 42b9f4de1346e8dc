#pragma once

// Blinded human-annotation sessions: item materialization with shuffled presentation slots,
// an append-only checksummed judgment log, and slot-to-system translation.

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include "rlaif/corpus.hpp"
#include "rlaif/eval.hpp"
#include "rlaif/random.hpp"

namespace rlaif {

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A resubmission that disagrees with an already stored judgment.
class ConflictError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<std::string_view, kJudgedSystems> kSlotNames = {"A", "B", "C"};
inline constexpr std::size_t kDefaultItemsPerMetric = 100;

struct Instructions {
  std::string naturalness = "Rate how natural each response sounds, from 1 (very unnatural) to 5 (very natural).";
  std::string ranking =
      "Rank the three responses by how strongly they give the impression described below, 1 for the strongest. "
      "Responses may share a rank.";

  bool operator==(const Instructions&) const = default;
};

// One context with the response of every system, before blinding.
struct SourceItem {
  Metric metric = Metric{};
  std::string context_id;
  std::vector<Turn> context;
  std::map<std::string, std::string> responses;  // system id -> response text
};

struct Candidate3 {
  std::string system;  // hidden from clients
  std::string text;

  bool operator==(const Candidate3&) const = default;
};

struct AnnotationItem {
  std::string item_id;
  Metric metric = Metric{};
  std::string context_id;
  std::vector<Turn> context;
  std::array<Candidate3, kJudgedSystems> slots;  // presentation order; slots[i].system is the hidden mapping

  bool operator==(const AnnotationItem&) const = default;
};

struct SessionSpec {
  std::string id;
  std::uint64_t seed = 0;
  std::array<std::string, kJudgedSystems> systems;
  Instructions instructions;
  std::size_t display_window = 0;
  std::vector<AnnotationItem> items;

  const AnnotationItem* find(std::string_view item_id) const {
    for (const auto& it : items)
      if (it.item_id == item_id) return &it;
    return nullptr;
  }
};

inline bool valid_session_id(std::string_view id) {
  if (id.empty() || id.size() > 64) return false;
  return std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; });
}

// Presentation order of one item: a permutation of the three systems, fixed by (seed, item index).
inline std::array<std::size_t, kJudgedSystems> slot_permutation(std::uint64_t seed, std::size_t index) {
  std::array<std::size_t, kJudgedSystems> p{0, 1, 2};
  Rng rng(derive_seed(seed, {index, 0x510}));
  rng.shuffle(std::span<std::size_t>(p));
  return p;
}

struct SessionOptions {
  std::size_t items_per_metric = kDefaultItemsPerMetric;
  std::uint64_t seed = 0;
  std::vector<Metric> metrics{kMetrics.begin(), kMetrics.end()};
  Instructions instructions;
  std::size_t display_window = 0;  // trailing turns the UI shows; 0 shows all
};

// Takes the first `items_per_metric` items of each requested metric, in metric order, and blinds them.
inline SessionSpec create_session(std::string id, std::array<std::string, kJudgedSystems> systems,
                                  std::span<const SourceItem> sources, const SessionOptions& opt = {}) {
  if (!valid_session_id(id)) throw ValidationError("session id must be 1-64 letters, digits, '-' or '_'");
  if (opt.items_per_metric < 1) throw ValidationError("items per metric must be >= 1");
  if (std::set<std::string>(systems.begin(), systems.end()).size() != kJudgedSystems ||
      std::any_of(systems.begin(), systems.end(), [](const auto& s) { return s.empty(); })) {
    throw ValidationError("need three distinct, non-empty system ids");
  }
  SessionSpec spec{std::move(id), opt.seed, systems, opt.instructions, opt.display_window, {}};
  for (Metric m : kMetrics) {
    if (std::find(opt.metrics.begin(), opt.metrics.end(), m) == opt.metrics.end()) continue;
    std::size_t taken = 0;
    for (const auto& src : sources) {
      if (src.metric != m || taken == opt.items_per_metric) continue;
      if (src.responses.size() != kJudgedSystems) {
        throw ValidationError("item " + src.context_id + ": expected responses from exactly 3 systems, got " +
                              std::to_string(src.responses.size()));
      }
      for (const auto& s : systems) {
        if (!src.responses.count(s)) throw ValidationError("item " + src.context_id + ": no response from system '" + s + "'");
      }
      AnnotationItem item;
      item.item_id = std::string(metric_name(m)) + "-" + src.context_id;
      if (spec.find(item.item_id)) throw ValidationError("duplicate item " + item.item_id);
      item.metric = m;
      item.context_id = src.context_id;
      item.context = src.context;
      const auto perm = slot_permutation(opt.seed, spec.items.size());
      for (std::size_t k = 0; k < kJudgedSystems; ++k) item.slots[k] = {systems[perm[k]], src.responses.at(systems[perm[k]])};
      spec.items.push_back(std::move(item));
      ++taken;
    }
  }
  if (spec.items.empty()) throw ValidationError("no items to annotate");
  return spec;
}

// ---- serialization ----

inline nlohmann::ordered_json turns_to_json(std::span<const Turn> turns) {
  auto out = nlohmann::ordered_json::array();
  for (const auto& t : turns) out.push_back({{"speaker", speaker_name(t.speaker)}, {"text", t.text}});
  return out;
}

inline std::vector<Turn> turns_from_json(const nlohmann::json& j) {
  std::vector<Turn> out;
  for (const auto& t : j) {
    const auto sp = t.at("speaker").get<std::string>();
    if (sp != "system" && sp != "user") throw ValidationError("speaker must be system or user");
    out.push_back({sp == "system" ? Speaker::system : Speaker::user, t.at("text").get<std::string>()});
  }
  return out;
}

inline nlohmann::ordered_json spec_to_json(const SessionSpec& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["seed"] = s.seed;
  j["systems"] = s.systems;
  j["instructions"] = {{"naturalness", s.instructions.naturalness}, {"ranking", s.instructions.ranking}};
  j["display_window"] = s.display_window;
  j["items"] = nlohmann::ordered_json::array();
  for (const auto& it : s.items) {
    nlohmann::ordered_json ij;
    ij["item_id"] = it.item_id;
    ij["metric"] = metric_name(it.metric);
    ij["context_id"] = it.context_id;
    ij["context"] = turns_to_json(it.context);
    ij["slots"] = nlohmann::ordered_json::array();
    for (const auto& c : it.slots) ij["slots"].push_back({{"system", c.system}, {"text", c.text}});
    j["items"].push_back(std::move(ij));
  }
  return j;
}

inline SessionSpec spec_from_json(const nlohmann::json& j) {
  SessionSpec s;
  s.id = j.at("id").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.systems = j.at("systems").get<std::array<std::string, kJudgedSystems>>();
  s.instructions = {j.at("instructions").at("naturalness").get<std::string>(), j.at("instructions").at("ranking").get<std::string>()};
  s.display_window = j.value("display_window", std::size_t{0});
  for (const auto& ij : j.at("items")) {
    AnnotationItem it;
    it.item_id = ij.at("item_id").get<std::string>();
    it.metric = metric_from_name(ij.at("metric").get<std::string>());
    it.context_id = ij.at("context_id").get<std::string>();
    it.context = turns_from_json(ij.at("context"));
    const auto& slots = ij.at("slots");
    if (slots.size() != kJudgedSystems) throw ValidationError("item " + it.item_id + " must have 3 slots");
    for (std::size_t k = 0; k < kJudgedSystems; ++k) it.slots[k] = {slots[k].at("system").get<std::string>(), slots[k].at("text").get<std::string>()};
    s.items.push_back(std::move(it));
  }
  return s;
}

// Source items file: one JSON object per line,
// {"metric", "context_id", "context": [{"speaker","text"}...], "responses": {system: text}}.
inline std::vector<SourceItem> read_source_items(std::istream& is) {
  std::vector<SourceItem> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SourceItem s;
      s.metric = metric_from_name(j.at("metric").get<std::string>());
      s.context_id = j.at("context_id").get<std::string>();
      s.context = turns_from_json(j.at("context"));
      s.responses = j.at("responses").get<std::map<std::string, std::string>>();
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::ordered_json source_item_to_json(const SourceItem& s) {
  nlohmann::ordered_json j;
  j["metric"] = metric_name(s.metric);
  j["context_id"] = s.context_id;
  j["context"] = turns_to_json(s.context);
  j["responses"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : s.responses) j["responses"][k] = v;
  return j;
}

// ---- append-only judgment log ----

// Each line is "<crc32 of the JSON, 8 hex digits> <JSON>". A torn final line (crash mid-append)
// is dropped on open; a bad line anywhere else is corruption.
class JudgmentLog {
 public:
  explicit JudgmentLog(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    std::string data;
    if (in) data.assign(std::istreambuf_iterator<char>(in), {});
    std::size_t pos = 0, good_end = 0, lineno = 0;
    while (pos < data.size()) {
      ++lineno;
      const auto nl = data.find('\n', pos);
      const bool complete = nl != std::string::npos;
      const std::string line = data.substr(pos, complete ? nl - pos : std::string::npos);
      auto parsed = complete ? parse_line(line) : std::nullopt;
      if (!parsed) {
        const bool last = !complete || nl + 1 == data.size();
        if (!last) throw FormatError(path_.string() + ": line " + std::to_string(lineno) + ": corrupt judgment record");
        break;
      }
      records_.push_back(std::move(*parsed));
      pos = good_end = nl + 1;
    }
    if (good_end != data.size()) std::filesystem::resize_file(path_, good_end);
  }

  const std::vector<Judgment>& records() const noexcept { return records_; }

  // Returns once the record is on stable storage.
  void append(const Judgment& j) {
    const std::string body = judgment_to_json(j).dump();
    char crc[9];
    std::snprintf(crc, sizeof crc, "%08x", checksum(body));
    const std::string line = std::string(crc) + " " + body + "\n";
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) throw std::runtime_error("cannot open " + path_.string());
    std::size_t done = 0;
    while (done < line.size()) {
      const auto n = ::write(fd, line.data() + done, line.size() - done);
      if (n < 0) {
        ::close(fd);
        throw std::runtime_error("write failed on " + path_.string());
      }
      done += static_cast<std::size_t>(n);
    }
    const bool synced = ::fsync(fd) == 0;
    ::close(fd);
    if (!synced) throw std::runtime_error("fsync failed on " + path_.string());
    records_.push_back(j);
  }

  static std::uint32_t checksum(std::string_view s) {
    return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
  }

 private:
  static std::optional<Judgment> parse_line(const std::string& line) {
    if (line.size() < 10 || line[8] != ' ') return std::nullopt;
    const std::string body = line.substr(9);
    std::uint32_t expected = 0;
    if (std::sscanf(line.c_str(), "%8x", &expected) != 1 || expected != checksum(body)) return std::nullopt;
    try {
      return judgment_from_json(nlohmann::json::parse(body));
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  std::filesystem::path path_;
  std::vector<Judgment> records_;
};

// ---- session ----

// Answers for one item in presentation-slot order (A, B, C).
struct SlotJudgment {
  std::string item_id;
  std::string annotator;
  std::array<int, kJudgedSystems> naturalness{};
  std::array<int, kJudgedSystems> ranks{};
};

inline SlotJudgment slot_judgment_from_json(const nlohmann::json& j) {
  SlotJudgment s;
  s.item_id = j.at("item_id").get<std::string>();
  s.annotator = j.at("annotator").get<std::string>();
  s.naturalness = j.at("naturalness").get<std::array<int, kJudgedSystems>>();
  s.ranks = j.at("ranks").get<std::array<int, kJudgedSystems>>();
  return s;
}

// Slot-level validity check with messages that never mention systems.
inline void validate_slot_answers(const SlotJudgment& s) {
  int min_rank = 4;
  for (std::size_t k = 0; k < kJudgedSystems; ++k) {
    const std::string slot(kSlotNames[k]);
    if (s.naturalness[k] < kMinNaturalness || s.naturalness[k] > kMaxNaturalness) {
      throw ValidationError("naturalness for " + slot + " must be 1-5, got " + std::to_string(s.naturalness[k]));
    }
    if (s.ranks[k] < 1 || s.ranks[k] > 3) throw ValidationError("rank for " + slot + " must be 1-3, got " + std::to_string(s.ranks[k]));
    min_rank = std::min(min_rank, s.ranks[k]);
  }
  if (min_rank != 1) throw ValidationError("at least one response must be ranked 1");
}

enum class SubmitOutcome { stored, duplicate };

struct Progress {
  std::size_t total = 0;
  std::size_t judged = 0;  // by the requesting annotator
};

inline const char* kSessionFile = "session.json";
inline const char* kLogFile = "judgments.log";

// A session on disk: session.json (items and hidden slot mapping) plus the judgment log.
// Reads take a shared lock; submissions are serialized.
class AnnotationSession {
 public:
  // Writes a new session directory; fails if it already holds a session.
  static void write(const std::filesystem::path& dir, const SessionSpec& spec) {
    std::filesystem::create_directories(dir);
    if (std::filesystem::exists(dir / kSessionFile)) throw ValidationError("session already exists at " + dir.string());
    const auto tmp = dir / (std::string(kSessionFile) + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary);
      out << spec_to_json(spec).dump(1) << '\n';
      if (!out) throw std::runtime_error("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, dir / kSessionFile);
  }

  explicit AnnotationSession(const std::filesystem::path& dir) : log_(dir / kLogFile) {
    std::ifstream in(dir / kSessionFile);
    if (!in) throw NotFoundError("no session at " + dir.string());
    try {
      spec_ = spec_from_json(nlohmann::json::parse(in));
    } catch (const std::exception& e) {
      throw FormatError((dir / kSessionFile).string() + ": " + e.what());
    }
    for (std::size_t i = 0; i < spec_.items.size(); ++i) index_.emplace(spec_.items[i].item_id, i);
    for (const auto& j : log_.records()) done_.emplace(j.item_id, j.annotator);
  }

  const SessionSpec& spec() const noexcept { return spec_; }

  // Lowest-index item the annotator has not judged, optionally within one metric; nullopt when done.
  std::optional<std::size_t> next_item(const std::string& annotator, std::optional<Metric> metric = std::nullopt) const {
    std::shared_lock lock(mutex_);
    for (std::size_t i = 0; i < spec_.items.size(); ++i) {
      const auto& it = spec_.items[i];
      if (metric && it.metric != *metric) continue;
      if (!done_.count({it.item_id, annotator})) return i;
    }
    return std::nullopt;
  }

  Progress progress(const std::string& annotator, std::optional<Metric> metric = std::nullopt) const {
    std::shared_lock lock(mutex_);
    Progress p;
    for (const auto& it : spec_.items) {
      if (metric && it.metric != *metric) continue;
      ++p.total;
      p.judged += done_.count({it.item_id, annotator});
    }
    return p;
  }

  // Translates slots to systems and appends. Identical resubmission is acknowledged as a duplicate.
  SubmitOutcome submit(const SlotJudgment& s) {
    if (s.annotator.empty()) throw ValidationError("annotator is required");
    auto found = index_.find(s.item_id);
    if (found == index_.end()) throw NotFoundError("unknown item '" + s.item_id + "'");
    const AnnotationItem& item = spec_.items[found->second];
    Judgment j{item.item_id, s.annotator, item.metric, {}, {}};
    for (std::size_t k = 0; k < kJudgedSystems; ++k) {
      j.systems.push_back({item.slots[k].system, s.naturalness[k], s.ranks[k]});
      j.presented.push_back(item.slots[k].system);
    }
    validate_slot_answers(s);
    validate_judgment(j);
    std::unique_lock lock(mutex_);
    if (done_.count({j.item_id, j.annotator})) {
      for (const auto& prev : log_.records())
        if (prev.item_id == j.item_id && prev.annotator == j.annotator) {
          if (prev == j) return SubmitOutcome::duplicate;
          throw ConflictError("item '" + j.item_id + "' already judged by '" + j.annotator + "' with different answers");
        }
    }
    log_.append(j);
    done_.emplace(j.item_id, j.annotator);
    return SubmitOutcome::stored;
  }

  // Judgment file in log order.
  std::string export_judgments() const {
    std::shared_lock lock(mutex_);
    std::ostringstream os;
    write_judgments(os, log_.records());
    return os.str();
  }

 private:
  SessionSpec spec_;
  JudgmentLog log_;
  std::map<std::string, std::size_t> index_;
  std::set<std::pair<std::string, std::string>> done_;  // (item, annotator)
  mutable std::shared_mutex mutex_;
};

// What a rater's client sees for one item: no system ids.
inline nlohmann::ordered_json blinded_item_json(const SessionSpec& spec, std::size_t index, const Progress& p) {
  const auto& it = spec.items[index];
  nlohmann::ordered_json j;
  j["done"] = false;
  j["item_id"] = it.item_id;
  j["index"] = index;
  j["metric"] = metric_name(it.metric);
  j["questionnaire"] = kQuestionnaires[index_of(it.metric)];
  j["instructions"] = {{"naturalness", spec.instructions.naturalness}, {"ranking", spec.instructions.ranking}};
  j["context"] = turns_to_json(it.context);
  j["display_window"] = spec.display_window;
  j["candidates"] = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < kJudgedSystems; ++k) j["candidates"].push_back({{"slot", kSlotNames[k]}, {"text", it.slots[k].text}});
  j["progress"] = {{"judged", p.judged}, {"total", p.total}};
  return j;
}

}  // namespace rlaif
