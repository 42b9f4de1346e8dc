#pragma once

// Flat "section.key = value" run configuration shared by every CLI stage.
// Lines starting with '#' are comments; unknown keys are errors.

#include <charconv>
#include <cstdlib>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rlaif/annotation.hpp"
#include "rlaif/checkpoint.hpp"
#include "rlaif/language_model.hpp"
#include "rlaif/pref_opt.hpp"
#include "rlaif/reward_model.hpp"

namespace rlaif {

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string help;
};

inline constexpr const char* kInheritSeed = "inherit";
inline constexpr const char* kOutEnv = "RLAIF_OUT";

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    const Instructions ins;
    return std::vector<ConfigKey>{
        {"run.seed", "7", "seed used by every stage whose own seed is 'inherit'"},
        {"run.out", "runs", "output directory (default from $RLAIF_OUT, else 'runs')"},
        {"corpus.sessions", "1600", "number of synthetic dialogue sessions"},
        {"corpus.turns", "32", "turns per session (even, system speaks first)"},
        {"corpus.noise", "1.0", "standard deviation of label noise"},
        {"corpus.max_markers", "5", "marker count that saturates a score at 10"},
        {"corpus.seed", kInheritSeed, "corpus generation seed"},
        {"split.ratios", "8:1:1", "train:dev:test proportions"},
        {"split.seed", kInheritSeed, "shuffle seed for the split"},
        {"model.width", "64", "transformer width"},
        {"model.layers", "2", "transformer blocks"},
        {"model.heads", "2", "attention heads"},
        {"model.ffn", "256", "feed-forward width"},
        {"model.context", "256", "maximum sequence length"},
        {"lm.epochs", "3", "base language model epochs"},
        {"lm.batch", "16", "base language model minibatch"},
        {"lm.lr", "3e-3", "base language model learning rate"},
        {"lm.warmup", "100", "linear warmup steps"},
        {"lm.clip", "1.0", "global gradient-norm clip (0 disables)"},
        {"lm.seed", kInheritSeed, "init and shuffle seed"},
        {"rm.epochs", "10", "reward model epochs"},
        {"rm.batch", "16", "reward model minibatch"},
        {"rm.lr", "3e-3", "reward model learning rate"},
        {"rm.warmup", "80", "linear warmup steps"},
        {"rm.clip", "1.0", "global gradient-norm clip (0 disables)"},
        {"rm.seed", kInheritSeed, "init and shuffle seed"},
        {"sampling.temperature", "1.0", "softmax temperature for generation"},
        {"sampling.top_k", "0", "keep the k most likely tokens (0 keeps all)"},
        {"sampling.max_tokens", "8", "maximum generated tokens per response"},
        {"pairs.contexts", "0", "contexts used for pair building (0 uses all)"},
        {"pairs.min_gap", "1.0", "drop pairs whose reward gap is below this (0 drops exact ties only)"},
        {"pairs.seed", kInheritSeed, "sampling seed for candidate responses"},
        {"dpo.beta", "0.1", "preference temperature"},
        {"dpo.epochs", "10", "passes over the pair set"},
        {"dpo.batch", "16", "pairs per step"},
        {"dpo.lr", "5e-5", "learning rate"},
        {"dpo.nll_weight", "1.0", "weight of the mean per-token NLL on the accepted response (0 = plain DPO)"},
        {"dpo.warmup", "0", "linear warmup steps"},
        {"dpo.clip", "1.0", "global gradient-norm clip (0 disables)"},
        {"dpo.seed", kInheritSeed, "shuffle seed"},
        {"ppo.epochs", "2", "passes over the context set"},
        {"ppo.clip_epsilon", "0.2", "probability-ratio clip range"},
        {"ppo.gamma", "1.0", "discount"},
        {"ppo.lambda", "0.95", "advantage smoothing"},
        {"ppo.kl_coef", "0.05", "per-token KL penalty against the frozen start policy"},
        {"ppo.rollouts", "32", "rollouts per update"},
        {"ppo.minibatch", "8", "rollouts per gradient step"},
        {"ppo.lr", "1e-4", "policy learning rate"},
        {"ppo.value_lr", "1e-3", "critic learning rate"},
        {"ppo.clip", "1.0", "global gradient-norm clip for both models (0 disables)"},
        {"ppo.contexts", "0", "contexts used for rollouts (0 uses all)"},
        {"ppo.seed", kInheritSeed, "rollout and shuffle seed"},
        {"eval.contexts", "0", "contexts evaluated (0 uses all)"},
        {"eval.seed", kInheritSeed, "generation seed shared by all systems"},
        {"anno.items_per_metric", "100", "annotation items per metric"},
        {"anno.seed", kInheritSeed, "presentation-order seed"},
        {"anno.display_window", "0", "trailing turns shown to raters (0 shows all)"},
        {"anno.naturalness_instructions", ins.naturalness, "instruction text for the naturalness rating"},
        {"anno.ranking_instructions", ins.ranking, "instruction text for the ranking"},
        {"anno.host", "127.0.0.1", "listen address"},
        {"anno.port", "8080", "listen port (0 picks a free port)"},
    };
  }();
  return keys;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[k.key] = k.default_value;
    if (const char* env = std::getenv(kOutEnv); env && *env) values_["run.out"] = env;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ValidationError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  // "key=value" as given on the command line.
  void set_assignment(std::string_view text) {
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) throw ValidationError("expected key=value, got '" + std::string(text) + "'");
    set(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
  }

  void load(std::istream& in, const std::string& source) {
    std::string line;
    std::size_t lineno = 0;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
      ++lineno;
      const auto t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      const std::string where = source + ":" + std::to_string(lineno) + ": ";
      if (eq == std::string::npos) throw FormatError(where + "expected 'key = value'");
      const auto key = trim(std::string_view(t).substr(0, eq));
      if (!seen.insert(key).second) throw FormatError(where + "key '" + key + "' set twice");
      try {
        set(key, trim(std::string_view(t).substr(eq + 1)));
      } catch (const ValidationError& e) {
        throw FormatError(where + e.what());
      }
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::logic_error("config key '" + key + "' is not in the schema");
    return it->second;
  }

  template <class T>
  T number(const std::string& key) const {
    const auto& v = str(key);
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ValidationError("config " + key + ": '" + v + "' is not a valid number");
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(out)) throw ValidationError("config " + key + ": must be finite");
    }
    return out;
  }

  std::size_t size(const std::string& key) const { return number<std::size_t>(key); }
  double real(const std::string& key) const { return number<double>(key); }

  // A stage seed, falling back to run.seed.
  std::uint64_t seed(const std::string& section) const {
    const std::string key = section + ".seed";
    return str(key) == kInheritSeed ? number<std::uint64_t>("run.seed") : number<std::uint64_t>(key);
  }

  // Every key in schema order with seeds resolved, so the snapshot alone reproduces the run.
  std::string snapshot(const std::string& header) const {
    std::ostringstream os;
    if (!header.empty()) os << "# " << header << "\n";
    for (const auto& k : config_schema()) {
      std::string v = values_.at(k.key);
      if (v == kInheritSeed) v = std::to_string(seed(k.key.substr(0, k.key.find('.'))));
      os << k.key << " = " << v << "\n";
    }
    return os.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

// Documented keys, defaults and help, in config-file syntax.
inline std::string describe_config() {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_schema()) {
    const auto s = k.key.substr(0, k.key.find('.'));
    if (s != section) {
      if (!section.empty()) os << "\n";
      section = s;
    }
    os << "# " << k.help << "\n" << k.key << " = " << k.default_value << "\n";
  }
  return os.str();
}

// ---- typed views for each stage ----

inline ModelConfig model_config(const RunConfig& rc, HeadKind head) {
  ModelConfig c = default_model_config(head);
  c.model_width = rc.size("model.width");
  c.layer_count = rc.size("model.layers");
  c.head_count = rc.size("model.heads");
  c.ffn_width = rc.size("model.ffn");
  c.context_limit = rc.size("model.context");
  c.validate();
  return c;
}

inline OptimizerConfig optimizer_config(const RunConfig& rc, const std::string& section) {
  const std::string warm = section + ".warmup";
  return {rc.real(section + ".lr"), rc.size(warm), rc.real(section + ".clip")};
}

inline SyntheticConfig synthetic_config(const RunConfig& rc) {
  SyntheticConfig c;
  c.sessions = rc.size("corpus.sessions");
  c.turn_count = rc.size("corpus.turns");
  c.noise_sd = rc.real("corpus.noise");
  c.max_markers_per_metric = rc.number<int>("corpus.max_markers");
  c.seed = rc.seed("corpus");
  return c;
}

inline LMTrainConfig lm_config(const RunConfig& rc) {
  LMTrainConfig c;
  c.epochs = rc.size("lm.epochs");
  c.batch_size = rc.size("lm.batch");
  c.optimizer = optimizer_config(rc, "lm");
  c.seed = rc.seed("lm");
  c.model = model_config(rc, HeadKind::token);
  c.validate();
  return c;
}

inline RMTrainConfig rm_config(const RunConfig& rc) {
  RMTrainConfig c;
  c.epochs = rc.size("rm.epochs");
  c.batch_size = rc.size("rm.batch");
  c.optimizer = optimizer_config(rc, "rm");
  c.seed = rc.seed("rm");
  c.model = model_config(rc, HeadKind::regression);
  c.validate();
  return c;
}

inline SamplingConfig sampling_config(const RunConfig& rc) {
  SamplingConfig s;
  s.temperature = rc.real("sampling.temperature");
  s.top_k = rc.size("sampling.top_k");
  s.max_tokens = rc.size("sampling.max_tokens");
  if (!(s.temperature > 0)) throw ValidationError("config sampling.temperature: must be > 0");
  if (s.max_tokens < 1) throw ValidationError("config sampling.max_tokens: must be >= 1");
  return s;
}

inline DPOConfig dpo_config(const RunConfig& rc) {
  DPOConfig c;
  c.beta = rc.real("dpo.beta");
  c.epochs = rc.size("dpo.epochs");
  c.batch_size = rc.size("dpo.batch");
  c.nll_weight = rc.real("dpo.nll_weight");
  c.optimizer = optimizer_config(rc, "dpo");
  c.seed = rc.seed("dpo");
  c.validate();
  return c;
}

inline PPOConfig ppo_config(const RunConfig& rc) {
  PPOConfig c;
  c.epochs = rc.size("ppo.epochs");
  c.clip_epsilon = rc.real("ppo.clip_epsilon");
  c.gamma = rc.real("ppo.gamma");
  c.lambda = rc.real("ppo.lambda");
  c.kl_coef = rc.real("ppo.kl_coef");
  c.rollouts_per_update = rc.size("ppo.rollouts");
  c.minibatch_size = rc.size("ppo.minibatch");
  c.policy_optimizer = {rc.real("ppo.lr"), 0, rc.real("ppo.clip")};
  c.value_optimizer = {rc.real("ppo.value_lr"), 0, rc.real("ppo.clip")};
  c.sampling = sampling_config(rc);
  c.seed = rc.seed("ppo");
  c.validate();
  return c;
}

inline SessionOptions session_options(const RunConfig& rc) {
  SessionOptions o;
  o.items_per_metric = rc.size("anno.items_per_metric");
  o.seed = rc.seed("anno");
  o.display_window = rc.size("anno.display_window");
  o.instructions = {rc.str("anno.naturalness_instructions"), rc.str("anno.ranking_instructions")};
  return o;
}

// Parses every section so a bad value fails before any stage starts.
inline void validate_config(const RunConfig& rc) {
  (void)rc.seed("run");
  (void)synthetic_config(rc);
  (void)parse_ratios(rc.str("split.ratios"));
  (void)rc.seed("split");
  (void)lm_config(rc);
  (void)rm_config(rc);
  (void)rc.size("pairs.contexts");
  if (!(rc.real("pairs.min_gap") >= 0)) throw ValidationError("config pairs.min_gap: must be >= 0");
  (void)rc.seed("pairs");
  (void)dpo_config(rc);
  (void)ppo_config(rc);
  (void)rc.size("eval.contexts");
  (void)rc.seed("eval");
  (void)session_options(rc);
  const int port = rc.number<int>("anno.port");
  if (port < 0 || port > 65535) throw ValidationError("config anno.port: must be 0-65535");
}

}  // namespace rlaif
