#pragma once

// Automatic evaluation of tuned policies (reward-model score and base-model perplexity of their
// responses) and aggregation of human judgments.

#include <json.hpp>

#include <algorithm>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "rlaif/corpus.hpp"
#include "rlaif/model.hpp"
#include "rlaif/parallel.hpp"
#include "rlaif/pref_opt.hpp"

namespace rlaif {

// ---- automatic evaluation ----

struct NamedPolicy {
  std::string name;
  const Checkpoint* policy = nullptr;
};

// A response with no word tokens (e.g. an immediate <eot>).
inline bool is_empty_response(std::span<const int> response) {
  return std::none_of(response.begin(), response.end(), [](int id) { return !vocabulary().is_control(id); });
}

// One response per prompt; the seed for a prompt depends only on (seed, prompt id), so every
// system sees the same random stream for the same context.
inline std::vector<Tokens> generate_responses(const Checkpoint& policy, std::span<const Prompt> prompts,
                                              const SamplingConfig& sampling, std::uint64_t seed) {
  std::vector<Tokens> out(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    SamplingConfig s = sampling;
    s.seed = sample_seed(seed, prompts[i].id, 0);
    out[i] = generate(policy, prompts[i].tokens, s);
  });
  return out;
}

// Mean over the non-empty items; `empty` items are excluded and counted.
struct ItemMean {
  double mean = 0.0;
  std::size_t count = 0;
  std::size_t empty = 0;
};

inline ItemMean mean_over_items(std::span<const std::optional<double>> values) {
  ItemMean out;
  double total = 0.0;
  for (const auto& v : values) {
    if (v) {
      total += *v;
      ++out.count;
    } else {
      ++out.empty;
    }
  }
  out.mean = out.count ? total / static_cast<double>(out.count) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

inline std::vector<std::optional<double>> aif_items(const Checkpoint& rm, std::span<const Prompt> prompts,
                                                    std::span<const Tokens> responses, Metric metric) {
  std::vector<std::optional<double>> out(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    if (!is_empty_response(responses[i])) out[i] = metric_score(rm, prompts[i].tokens, responses[i], metric);
  });
  return out;
}

inline std::vector<std::optional<double>> ppl_items(const Checkpoint& base, std::span<const Prompt> prompts,
                                                    std::span<const Tokens> responses) {
  std::vector<std::optional<double>> out(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    if (!is_empty_response(responses[i])) out[i] = perplexity(base, prompts[i].tokens, responses[i]);
  });
  return out;
}

inline std::vector<ItemMean> aif_eval(const Checkpoint& rm, std::span<const NamedPolicy> systems,
                                      std::span<const Prompt> prompts, Metric metric, const SamplingConfig& sampling,
                                      std::uint64_t seed) {
  if (prompts.empty()) throw ValidationError("aif_eval: no contexts");
  std::vector<ItemMean> out;
  for (const auto& s : systems) {
    const auto responses = generate_responses(*s.policy, prompts, sampling, seed);
    out.push_back(mean_over_items(aif_items(rm, prompts, responses, metric)));
  }
  return out;
}

inline ItemMean ppl_eval(const Checkpoint& base, const Checkpoint& system, std::span<const Prompt> prompts,
                         const SamplingConfig& sampling, std::uint64_t seed) {
  if (prompts.empty()) throw ValidationError("ppl_eval: no contexts");
  const auto responses = generate_responses(system, prompts, sampling, seed);
  return mean_over_items(ppl_items(base, prompts, responses));
}

struct SystemScores {
  std::string system;
  double aif = 0.0;
  double ppl = 0.0;
  std::size_t empty = 0;  // items excluded from both means

  bool operator==(const SystemScores&) const = default;
};

struct EvalRow {
  Metric metric = Metric{};
  std::size_t items = 0;  // contexts evaluated, identical for every system
  std::vector<SystemScores> systems;

  bool operator==(const EvalRow&) const = default;
};

struct EvalReport {
  std::vector<std::pair<std::string, std::string>> meta;  // seeds, checkpoint paths, corpus hash
  std::vector<EvalRow> rows;

  bool operator==(const EvalReport&) const = default;
};

// AIF and PPL of already generated responses, one per prompt.
inline SystemScores score_responses(const Checkpoint& rm, const Checkpoint& base, std::string name,
                                    std::span<const Prompt> prompts, std::span<const Tokens> responses, Metric metric) {
  if (responses.size() != prompts.size()) throw ValidationError("evaluate: one response per context required");
  const auto aif = mean_over_items(aif_items(rm, prompts, responses, metric));
  const auto ppl = mean_over_items(ppl_items(base, prompts, responses));
  return {std::move(name), aif.mean, ppl.mean, aif.empty};
}

// AIF and PPL for each system on one metric, from a single shared generation per system.
inline EvalRow evaluate_metric(const Checkpoint& rm, const Checkpoint& base, std::span<const NamedPolicy> systems,
                               std::span<const Prompt> prompts, Metric metric, const SamplingConfig& sampling,
                               std::uint64_t seed) {
  if (prompts.empty()) throw ValidationError("evaluate: no contexts");
  EvalRow row{metric, prompts.size(), {}};
  for (const auto& s : systems) {
    const auto responses = generate_responses(*s.policy, prompts, sampling, seed);
    row.systems.push_back(score_responses(rm, base, s.name, prompts, responses, metric));
  }
  return row;
}

inline std::string format_fixed(double v, int digits) {
  if (std::isnan(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

namespace detail {

inline std::vector<std::string> system_names(const std::vector<EvalRow>& rows) {
  std::vector<std::string> names;
  for (const auto& r : rows)
    for (const auto& s : r.systems)
      if (std::find(names.begin(), names.end(), s.system) == names.end()) names.push_back(s.system);
  return names;
}

inline std::string meta_line(const std::vector<std::pair<std::string, std::string>>& meta) {
  nlohmann::ordered_json j;
  j["meta"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : meta) j["meta"][k] = v;
  return j.dump();
}

template <class Row>
Row& row_for(std::vector<Row>& rows, Metric m, std::size_t items) {
  auto it = std::find_if(rows.begin(), rows.end(), [&](const Row& r) { return r.metric == m; });
  if (it == rows.end()) {
    rows.push_back(Row{m, items, {}});
    return rows.back();
  }
  if (it->items != items) throw ValidationError("item count differs within metric " + std::string(metric_name(m)));
  return *it;
}

inline std::vector<std::pair<std::string, std::string>> parse_meta(const nlohmann::ordered_json& j) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, v] : j.items()) out.emplace_back(k, v.get<std::string>());
  return out;
}

}  // namespace detail

enum class ReportStyle { text, machine };

// text: one line per metric with AIF and PPL per system, then "items" per metric.
// machine: a meta line, then one JSON record per (metric, system).
inline std::string render_report(const EvalReport& r, ReportStyle style) {
  std::ostringstream os;
  if (style == ReportStyle::machine) {
    os << detail::meta_line(r.meta) << '\n';
    for (const auto& row : r.rows)
      for (const auto& s : row.systems) {
        nlohmann::ordered_json j;
        j["metric"] = metric_name(row.metric);
        j["system"] = s.system;
        j["aif"] = s.aif;
        j["ppl"] = s.ppl;
        j["items"] = row.items;
        j["empty"] = s.empty;
        os << j.dump() << '\n';
      }
    return os.str();
  }
  const auto names = detail::system_names(r.rows);
  os << std::left << std::setw(15) << "metric";
  for (const auto& n : names) os << std::right << std::setw(18) << n;
  os << std::right << std::setw(8) << "items" << '\n';
  os << std::left << std::setw(15) << "";
  for (std::size_t i = 0; i < names.size(); ++i) os << std::right << std::setw(8) << "AIF" << std::setw(10) << "PPL";
  os << '\n';
  for (const auto& row : r.rows) {
    os << std::left << std::setw(15) << metric_name(row.metric);
    for (const auto& n : names) {
      auto it = std::find_if(row.systems.begin(), row.systems.end(), [&](const auto& s) { return s.system == n; });
      if (it == row.systems.end()) {
        os << std::right << std::setw(8) << "" << std::setw(10) << "";
      } else {
        os << std::right << std::setw(8) << format_fixed(it->aif, 2) << std::setw(10) << format_fixed(it->ppl, 2);
      }
    }
    os << std::right << std::setw(8) << row.items << '\n';
  }
  return os.str();
}

inline double json_number_or_nan(const nlohmann::ordered_json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

inline EvalReport parse_report(std::istream& in) {
  EvalReport r;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::ordered_json::parse(line);
      if (j.contains("meta")) {
        r.meta = detail::parse_meta(j.at("meta"));
        continue;
      }
      EvalRow& row = detail::row_for(r.rows, metric_from_name(j.at("metric").get<std::string>()), j.at("items").get<std::size_t>());
      row.systems.push_back({j.at("system").get<std::string>(), json_number_or_nan(j.at("aif")),
                             json_number_or_nan(j.at("ppl")), j.at("empty").get<std::size_t>()});
    } catch (const std::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return r;
}

// ---- human judgments ----

inline constexpr int kMinNaturalness = 1;
inline constexpr int kMaxNaturalness = 5;
inline constexpr std::size_t kJudgedSystems = 3;

struct SystemJudgment {
  std::string system;
  int naturalness = 0;
  int rank = 0;

  bool operator==(const SystemJudgment&) const = default;
};

struct Judgment {
  std::string item_id;
  std::string annotator;
  Metric metric = Metric{};
  std::vector<SystemJudgment> systems;  // in display-slot order
  std::vector<std::string> presented;   // system shown in each slot, left to right

  bool operator==(const Judgment&) const = default;

  const SystemJudgment* find(std::string_view system) const {
    for (const auto& s : systems)
      if (s.system == system) return &s;
    return nullptr;
  }
};

inline void validate_judgment(const Judgment& j) {
  const std::string where = "judgment " + j.item_id + "/" + j.annotator + ": ";
  if (j.item_id.empty() || j.annotator.empty()) throw ValidationError(where + "item id and annotator are required");
  if (j.systems.size() != kJudgedSystems) throw ValidationError(where + "expected ratings for exactly 3 systems");
  std::set<std::string> names;
  int min_rank = 4;
  for (const auto& s : j.systems) {
    if (!names.insert(s.system).second) throw ValidationError(where + "system '" + s.system + "' rated twice");
    if (s.naturalness < kMinNaturalness || s.naturalness > kMaxNaturalness) {
      throw ValidationError(where + "naturalness must be in 1..5, got " + std::to_string(s.naturalness));
    }
    if (s.rank < 1 || s.rank > 3) throw ValidationError(where + "rank must be in 1..3, got " + std::to_string(s.rank));
    min_rank = std::min(min_rank, s.rank);
  }
  if (min_rank != 1) throw ValidationError(where + "some system must be ranked 1");
  if (!j.presented.empty() && std::set<std::string>(j.presented.begin(), j.presented.end()) != names) {
    throw ValidationError(where + "presented order does not match the rated systems");
  }
}

inline nlohmann::ordered_json judgment_to_json(const Judgment& j) {
  nlohmann::ordered_json out;
  out["item_id"] = j.item_id;
  out["annotator"] = j.annotator;
  out["metric"] = metric_name(j.metric);
  out["systems"] = nlohmann::ordered_json::array();
  for (const auto& s : j.systems) out["systems"].push_back({{"system", s.system}, {"naturalness", s.naturalness}, {"rank", s.rank}});
  out["presented"] = j.presented;
  return out;
}

inline Judgment judgment_from_json(const nlohmann::json& in) {
  Judgment j;
  j.item_id = in.at("item_id").get<std::string>();
  j.annotator = in.at("annotator").get<std::string>();
  j.metric = metric_from_name(in.at("metric").get<std::string>());
  for (const auto& s : in.at("systems")) {
    j.systems.push_back({s.at("system").get<std::string>(), s.at("naturalness").get<int>(), s.at("rank").get<int>()});
  }
  if (in.contains("presented")) j.presented = in.at("presented").get<std::vector<std::string>>();
  validate_judgment(j);
  return j;
}

inline void write_judgments(std::ostream& os, std::span<const Judgment> judgments) {
  for (const auto& j : judgments) os << judgment_to_json(j).dump() << '\n';
}

inline std::vector<Judgment> read_judgments(std::istream& is) {
  std::vector<Judgment> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(judgment_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

struct HumanCell {
  std::string system;
  double rank = 0.0;         // mean rank, 1 is best
  double win = 0.0;          // fraction of items ranked at or above the baseline
  double naturalness = 0.0;  // mean 1..5

  bool operator==(const HumanCell&) const = default;
};

struct HumanRow {
  Metric metric = Metric{};
  std::size_t items = 0;
  std::vector<HumanCell> systems;

  bool operator==(const HumanRow&) const = default;
};

struct HumanReport {
  std::string baseline;
  std::vector<HumanRow> rows;

  bool operator==(const HumanReport&) const = default;
};

// Per metric and system: mean rank, win rate against `baseline` (ties count as wins), mean naturalness.
inline HumanReport aggregate_human(std::span<const Judgment> judgments, const std::string& baseline) {
  std::set<std::tuple<std::string, std::string, Metric>> seen;
  for (const auto& j : judgments) {
    validate_judgment(j);
    if (!j.find(baseline)) throw ValidationError("judgment " + j.item_id + " has no baseline system '" + baseline + "'");
    if (!seen.emplace(j.item_id, j.annotator, j.metric).second) {
      throw ValidationError("duplicate judgment for item " + j.item_id + ", annotator " + j.annotator + ", metric " +
                            std::string(metric_name(j.metric)));
    }
  }
  HumanReport report{baseline, {}};
  for (Metric m : kMetrics) {
    struct Sums {
      double rank = 0, win = 0, nat = 0;
      std::size_t n = 0;
    };
    std::vector<std::pair<std::string, Sums>> sums;
    std::size_t items = 0;
    for (const auto& j : judgments) {
      if (j.metric != m) continue;
      ++items;
      const int base_rank = j.find(baseline)->rank;
      for (const auto& s : j.systems) {
        auto it = std::find_if(sums.begin(), sums.end(), [&](const auto& p) { return p.first == s.system; });
        if (it == sums.end()) it = sums.insert(sums.end(), {s.system, Sums{}});
        it->second.rank += s.rank;
        it->second.win += s.rank <= base_rank ? 1.0 : 0.0;
        it->second.nat += s.naturalness;
        ++it->second.n;
      }
    }
    if (items == 0) continue;
    // Baseline first, others in first-seen order.
    std::stable_partition(sums.begin(), sums.end(), [&](const auto& p) { return p.first == baseline; });
    HumanRow row{m, items, {}};
    for (const auto& [name, s] : sums) {
      if (s.n != items) throw ValidationError("system '" + name + "' is missing from some " + std::string(metric_name(m)) + " items");
      const double n = static_cast<double>(s.n);
      row.systems.push_back({name, s.rank / n, s.win / n, s.nat / n});
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

inline std::string render_human_report(const HumanReport& r, ReportStyle style) {
  std::ostringstream os;
  if (style == ReportStyle::machine) {
    for (const auto& row : r.rows)
      for (const auto& c : row.systems) {
        nlohmann::ordered_json j;
        j["metric"] = metric_name(row.metric);
        j["system"] = c.system;
        j["baseline"] = r.baseline;
        j["rank"] = c.rank;
        j["win"] = c.win;
        j["naturalness"] = c.naturalness;
        j["items"] = row.items;
        os << j.dump() << '\n';
      }
    return os.str();
  }
  std::vector<std::string> names;
  for (const auto& row : r.rows)
    for (const auto& c : row.systems)
      if (std::find(names.begin(), names.end(), c.system) == names.end()) names.push_back(c.system);
  os << std::left << std::setw(15) << "metric";
  for (const auto& n : names) os << std::right << std::setw(21) << n;
  os << std::right << std::setw(8) << "items" << '\n';
  os << std::left << std::setw(15) << "";
  for (std::size_t i = 0; i < names.size(); ++i) os << std::right << std::setw(7) << "Rank" << std::setw(7) << "Win" << std::setw(7) << "Nat";
  os << '\n';
  for (const auto& row : r.rows) {
    os << std::left << std::setw(15) << metric_name(row.metric);
    for (const auto& n : names) {
      auto it = std::find_if(row.systems.begin(), row.systems.end(), [&](const auto& c) { return c.system == n; });
      if (it == row.systems.end()) {
        os << std::setw(21) << "";
      } else if (it->system == r.baseline) {
        os << std::right << std::setw(7) << format_fixed(it->rank, 2) << std::setw(7) << "-" << std::setw(7)
           << format_fixed(it->naturalness, 2);
      } else {
        os << std::right << std::setw(7) << format_fixed(it->rank, 2) << std::setw(7) << format_fixed(100.0 * it->win, 0) + "%"
           << std::setw(7) << format_fixed(it->naturalness, 2);
      }
    }
    os << std::right << std::setw(8) << row.items << '\n';
  }
  return os.str();
}

inline HumanReport parse_human_report(std::istream& in) {
  HumanReport r;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::string baseline = j.at("baseline").get<std::string>();
      if (!r.rows.empty() && baseline != r.baseline) throw ValidationError("baseline changes mid-file");
      r.baseline = baseline;
      HumanRow& row = detail::row_for(r.rows, metric_from_name(j.at("metric").get<std::string>()), j.at("items").get<std::size_t>());
      row.systems.push_back({j.at("system").get<std::string>(), j.at("rank").get<double>(), j.at("win").get<double>(),
                             j.at("naturalness").get<double>()});
    } catch (const std::exception& e) {
      throw FormatError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return r;
}

}  // namespace rlaif
