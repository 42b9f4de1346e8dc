// Command-line entry point: one subcommand per pipeline stage.

#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include "rlaif/run_config.hpp"
#include "rlaif/server.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace rlaif;

namespace {

struct Stage {
  RunConfig rc;
  fs::path out;
  std::string command_line;

  // Writes `<out>/<name>.config` with every resolved key.
  void snapshot(const std::string& name) const { write_text(out / (name + ".config"), rc.snapshot(command_line)); }

  static void write_text(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary);
      os << text;
      if (!os) throw std::runtime_error("cannot write " + path.string());
    }
    fs::rename(tmp, path);
  }
};

Checkpoint load(const std::string& path, HeadKind head) {
  try {
    Checkpoint ck = load_checkpoint(path);
    if (ck.config.head_kind != head) {
      throw ValidationError("expected a " + std::string(head_kind_name(head)) + " head, found " +
                            std::string(head_kind_name(ck.config.head_kind)));
    }
    return ck;
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

std::vector<DialogueSession> sessions_from(const std::string& path) { return read_sessions(path); }

std::vector<Prompt> prompts_from_file(const std::string& path, std::size_t limit) {
  const auto sessions = sessions_from(path);
  auto prompts = prompts_from(sessions);
  if (limit && prompts.size() > limit) prompts.resize(limit);
  return prompts;
}

std::uint32_t file_crc(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  const std::string data{std::istreambuf_iterator<char>(in), {}};
  return JudgmentLog::checksum(data);
}

std::string hex8(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

class JsonLines {
 public:
  explicit JsonLines(const fs::path& path) : path_(path), tmp_(path.string() + ".tmp"), os_(tmp_, std::ios::binary) {
    if (!os_) throw std::runtime_error("cannot write " + path.string());
  }
  template <class Record>
  void add(const Record& r) {
    os_ << to_json(r).dump() << '\n';
  }
  void commit() {
    os_.close();
    fs::rename(tmp_, path_);
  }

 private:
  fs::path path_, tmp_;
  std::ofstream os_;
};

// ---- stages ----

void gen_corpus(Stage& st) {
  const auto cfg = synthetic_config(st.rc);
  const auto sessions = generate_synthetic(cfg);
  const auto path = st.out / "corpus.jsonl";
  write_sessions(path.string(), sessions);
  st.snapshot("corpus");
  std::cout << "wrote " << sessions.size() << " sessions to " << path.string() << "\n";
}

void split_corpus(Stage& st, const std::string& corpus) {
  const auto sessions = sessions_from(corpus);
  const auto part = split(sessions, parse_ratios(st.rc.str("split.ratios")), st.rc.seed("split"));
  const std::array<std::pair<const char*, const std::vector<DialogueSession>*>, 3> parts{
      {{"train", &part.train}, {"dev", &part.dev}, {"test", &part.test}}};
  for (const auto& [name, set] : parts) {
    const auto path = st.out / (std::string(name) + ".jsonl");
    write_sessions(path.string(), *set);
    std::cout << name << ": " << set->size() << " sessions -> " << path.string() << "\n";
  }
  st.snapshot("split");
}

EpochCallback epoch_logger(JsonLines& log, const char* what) {
  return [&log, what](const EpochRecord& r) {
    log.add(r);
    std::cerr << what << " epoch " << r.epoch << " train " << r.train_loss << " dev " << r.dev_loss << (r.selected ? " *" : "")
              << std::endl;
  };
}

void train_lm(Stage& st, const std::string& train, const std::string& dev) {
  const auto cfg = lm_config(st.rc);
  JsonLines log(st.out / "lm.log.jsonl");
  const auto res = train_language_model(sessions_from(train), sessions_from(dev), cfg, epoch_logger(log, "lm"));
  save_checkpoint(res.checkpoint, st.out / "lm.ckpt");
  log.commit();
  st.snapshot("lm");
  std::cout << "saved " << (st.out / "lm.ckpt").string() << " (epoch " << res.checkpoint.meta.epoch << ", dev nll "
            << res.checkpoint.meta.criterion << ")\n";
}

void train_rm(Stage& st, const std::string& train, const std::string& dev) {
  const auto cfg = rm_config(st.rc);
  JsonLines log(st.out / "rm.log.jsonl");
  const auto res = train_reward_model(sessions_from(train), sessions_from(dev), cfg, epoch_logger(log, "rm"));
  save_checkpoint(res.checkpoint, st.out / "rm.ckpt");
  log.commit();
  st.snapshot("rm");
  std::cout << "saved " << (st.out / "rm.ckpt").string() << " (epoch " << res.checkpoint.meta.epoch << ", dev mse "
            << res.checkpoint.meta.criterion << ")\n";
}

void eval_rm(Stage& st, const std::string& test, const std::string& rm_path, const std::string& lm_path, bool constant) {
  if (rm_path.empty() && lm_path.empty() && !constant) throw ValidationError("give at least one of --rm, --lm, --constant");
  std::optional<Checkpoint> rm, lm;
  std::vector<Scorer> scorers;
  if (!lm_path.empty()) {
    lm = load(lm_path, HeadKind::token);
    scorers.push_back(prompting_scorer("w/o SFT", *lm));
  }
  if (!rm_path.empty()) {
    rm = load(rm_path, HeadKind::regression);
    scorers.push_back(reward_model_scorer("w/ SFT", *rm));
  }
  if (constant) {
    scorers.push_back({"constant", [](const DialogueSession&) {
                         ScoreVector v{};
                         v.fill(5.0);
                         return v;
                       }});
  }
  const auto report = evaluate_rm(scorers, sessions_from(test));
  const auto table = render_rm_table(report);
  Stage::write_text(st.out / "rm_eval.txt", table);
  Stage::write_text(st.out / "rm_eval.jsonl", render_rm_records(report));
  st.snapshot("rm_eval");
  std::cout << table;
}

void build_pairs(Stage& st, const std::string& policy_path, const std::string& rm_path, const std::string& contexts,
                 const std::string& metric_name_arg) {
  const Metric metric = metric_from_name(metric_name_arg);
  const auto policy = load(policy_path, HeadKind::token);
  const auto rm = load(rm_path, HeadKind::regression);
  const auto prompts = prompts_from_file(contexts, st.rc.size("pairs.contexts"));
  const auto res = build_preference_pairs(policy, rm, prompts, metric, sampling_config(st.rc), st.rc.seed("pairs"),
                                          st.rc.real("pairs.min_gap"));
  const std::string name = "pairs-" + std::string(metric_name(metric));
  std::ostringstream os;
  write_pairs(os, res.pairs);
  Stage::write_text(st.out / (name + ".jsonl"), os.str());
  st.snapshot(name);
  std::cout << res.pairs.size() << " pairs from " << prompts.size() << " contexts (" << res.skipped_identical
            << " identical, " << res.skipped_tie << " tied or under the minimum gap) -> " << (st.out / (name + ".jsonl")).string() << "\n";
}

void train_dpo_stage(Stage& st, const std::string& policy_path, const std::string& reference_path, const std::string& pairs_path) {
  std::ifstream in(pairs_path);
  if (!in) throw std::runtime_error("cannot read " + pairs_path);
  std::vector<PreferencePair> pairs;
  try {
    pairs = read_pairs(in);
  } catch (const std::exception& e) {
    throw FormatError(pairs_path + ": " + e.what());
  }
  if (pairs.empty()) throw ValidationError(pairs_path + ": no pairs");
  const Metric metric = pairs.front().metric;
  for (const auto& p : pairs)
    if (p.metric != metric) throw ValidationError(pairs_path + ": pairs mix metrics");
  const auto policy = load(policy_path, HeadKind::token);
  const auto reference = reference_path.empty() ? policy : load(reference_path, HeadKind::token);
  const std::string name = "dpo-" + std::string(metric_name(metric));
  JsonLines log(st.out / (name + ".log.jsonl"));
  const auto res = train_dpo(policy, reference, pairs, dpo_config(st.rc), [&](const DPOEpochRecord& r) {
    log.add(r);
    std::cerr << "dpo epoch " << r.epoch << " loss " << r.loss << " margin " << r.margin << " acc " << r.accuracy << std::endl;
  });
  save_checkpoint(res.checkpoint, st.out / (name + ".ckpt"));
  log.commit();
  st.snapshot(name);
  std::cout << "saved " << (st.out / (name + ".ckpt")).string() << " (epoch " << res.checkpoint.meta.epoch << ", loss "
            << res.checkpoint.meta.criterion << ")\n";
}

void train_ppo_stage(Stage& st, const std::string& policy_path, const std::string& rm_path, const std::string& contexts,
                     const std::string& metric_name_arg) {
  const Metric metric = metric_from_name(metric_name_arg);
  const auto policy = load(policy_path, HeadKind::token);
  const auto rm = load(rm_path, HeadKind::regression);
  const auto prompts = prompts_from_file(contexts, st.rc.size("ppo.contexts"));
  const std::string name = "ppo-" + std::string(metric_name(metric));
  JsonLines log(st.out / (name + ".log.jsonl"));
  const auto res = train_ppo(policy, rm, metric, prompts, ppo_config(st.rc), [&](const PPOUpdateRecord& r) {
    log.add(r);
    std::cerr << "ppo epoch " << r.epoch << " update " << r.update << " reward " << r.stats.mean_reward << " kl " << r.stats.kl
              << " clip " << r.stats.clip_fraction << std::endl;
  });
  save_checkpoint(res.policy, st.out / (name + ".ckpt"));
  log.commit();
  st.snapshot(name);
  std::cout << "saved " << (st.out / (name + ".ckpt")).string() << " after " << res.log.size() << " updates\n";
}

struct SystemArg {
  std::string name, path;  // path may contain {metric}
};

SystemArg parse_system(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == text.size()) {
    throw ValidationError("--system expects NAME=CHECKPOINT, got '" + text + "'");
  }
  return {text.substr(0, eq), text.substr(eq + 1)};
}

std::string for_metric(std::string path, Metric m) {
  static const std::string placeholder = "{metric}";
  for (auto pos = path.find(placeholder); pos != std::string::npos; pos = path.find(placeholder))
    path.replace(pos, placeholder.size(), metric_name(m));
  return path;
}

void evaluate_stage(Stage& st, const std::string& rm_path, const std::string& base_path, const std::string& contexts,
                    const std::vector<std::string>& system_args, const std::vector<std::string>& metric_args, bool items_out) {
  std::vector<SystemArg> systems;
  std::set<std::string> names;
  for (const auto& s : system_args) {
    systems.push_back(parse_system(s));
    if (!names.insert(systems.back().name).second) throw ValidationError("system '" + systems.back().name + "' given twice");
  }
  if (items_out && systems.size() != kJudgedSystems) throw ValidationError("--items-out needs exactly 3 systems");
  std::vector<Metric> metrics;
  for (const auto& m : metric_args) metrics.push_back(metric_from_name(m));
  if (metrics.empty()) metrics.assign(kMetrics.begin(), kMetrics.end());

  const auto rm = load(rm_path, HeadKind::regression);
  const auto base = load(base_path, HeadKind::token);
  auto sessions = sessions_from(contexts);
  if (const auto limit = st.rc.size("eval.contexts"); limit && sessions.size() > limit) sessions.resize(limit);
  const auto prompts = prompts_from(sessions);
  const auto sampling = sampling_config(st.rc);
  const auto seed = st.rc.seed("eval");

  EvalReport report;
  report.meta = {{"seed", std::to_string(seed)},     {"rm", rm_path},
                 {"base", base_path},                {"contexts", contexts},
                 {"contexts_crc32", hex8(file_crc(contexts))}};
  for (const auto& s : systems) report.meta.emplace_back("system:" + s.name, s.path);

  std::map<std::string, Checkpoint> cache;
  std::vector<SourceItem> items;
  for (Metric m : metrics) {
    EvalRow row{m, prompts.size(), {}};
    std::vector<std::vector<Tokens>> responses;
    for (const auto& s : systems) {
      const auto path = for_metric(s.path, m);
      auto it = cache.find(path);
      if (it == cache.end()) it = cache.emplace(path, load(path, HeadKind::token)).first;
      responses.push_back(generate_responses(it->second, prompts, sampling, seed));
      row.systems.push_back(score_responses(rm, base, s.name, prompts, responses.back(), m));
      std::cerr << metric_name(m) << " " << s.name << " aif " << format_fixed(row.systems.back().aif, 3) << " ppl "
                << format_fixed(row.systems.back().ppl, 3) << std::endl;
    }
    report.rows.push_back(std::move(row));
    if (items_out) {
      for (std::size_t i = 0; i < sessions.size(); ++i) {
        SourceItem item{m, sessions[i].id, response_context(sessions[i]).turns, {}};
        for (std::size_t k = 0; k < systems.size(); ++k) item.responses[systems[k].name] = response_text(responses[k][i]);
        items.push_back(std::move(item));
      }
    }
  }
  const auto text = render_report(report, ReportStyle::text);
  Stage::write_text(st.out / "eval.txt", text);
  Stage::write_text(st.out / "eval.jsonl", render_report(report, ReportStyle::machine));
  if (items_out) {
    std::ostringstream os;
    for (const auto& item : items) os << source_item_to_json(item).dump() << '\n';
    Stage::write_text(st.out / "anno_items.jsonl", os.str());
  }
  st.snapshot("eval");
  std::cout << text;
}

void human_agg(Stage& st, const std::string& judgments_path, const std::string& baseline) {
  std::ifstream in(judgments_path);
  if (!in) throw std::runtime_error("cannot read " + judgments_path);
  std::vector<Judgment> judgments;
  try {
    judgments = read_judgments(in);
  } catch (const std::exception& e) {
    throw FormatError(judgments_path + ": " + e.what());
  }
  const auto report = aggregate_human(judgments, baseline);
  const auto text = render_human_report(report, ReportStyle::text);
  Stage::write_text(st.out / "human.txt", text);
  Stage::write_text(st.out / "human.jsonl", render_human_report(report, ReportStyle::machine));
  st.snapshot("human");
  std::cout << text;
}

void anno_serve(Stage& st, std::string root, const std::string& session_id, const std::string& items_path,
                const std::vector<std::string>& metric_args, const std::string& static_dir) {
  if (root.empty()) root = (st.out / "anno").string();
  fs::create_directories(root);
  if (!valid_session_id(session_id)) throw ValidationError("session id must be 1-64 letters, digits, '-' or '_'");
  const fs::path dir = fs::path(root) / session_id;
  if (fs::exists(dir / kSessionFile)) {
    if (!items_path.empty()) std::cerr << "session " << session_id << " exists; --items ignored" << std::endl;
  } else {
    if (items_path.empty()) throw ValidationError("session '" + session_id + "' does not exist; pass --items to create it");
    std::ifstream in(items_path);
    if (!in) throw std::runtime_error("cannot read " + items_path);
    std::vector<SourceItem> sources;
    try {
      sources = read_source_items(in);
    } catch (const std::exception& e) {
      throw FormatError(items_path + ": " + e.what());
    }
    if (sources.empty()) throw ValidationError(items_path + ": no items");
    if (sources.front().responses.size() != kJudgedSystems) throw ValidationError(items_path + ": items need exactly 3 systems");
    std::array<std::string, kJudgedSystems> systems;
    std::size_t k = 0;
    for (const auto& [name, text] : sources.front().responses) systems[k++] = name;
    auto opt = session_options(st.rc);
    if (!metric_args.empty()) {
      opt.metrics.clear();
      for (const auto& m : metric_args) opt.metrics.push_back(metric_from_name(m));
    }
    const auto spec = create_session(session_id, systems, sources, opt);
    AnnotationSession::write(dir, spec);
    std::cerr << "created session " << session_id << " with " << spec.items.size() << " items" << std::endl;
  }
  st.snapshot("anno-" + session_id);

  // Block the stop signals before any server thread exists so only sigwait sees them.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGINT);
  sigaddset(&stop_signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  AnnotationServer server(root, static_dir.empty() ? std::nullopt : std::optional<fs::path>(static_dir));
  server.session(session_id);  // fail fast on a damaged session
  const auto host = st.rc.str("anno.host");
  const int port = server.bind(host, st.rc.number<int>("anno.port"));
  std::exception_ptr failure;
  std::thread worker([&] {
    try {
      server.serve();
    } catch (...) {
      failure = std::current_exception();
    }
  });
  server.wait_until_ready();
  std::cout << "serving session " << session_id << " on http://" << host << ":" << port << "/" << std::endl;
  int sig = 0;
  sigwait(&stop_signals, &sig);
  server.stop();
  worker.join();
  if (failure) std::rethrow_exception(failure);
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic dialogue pipeline: corpus, reward model, preference tuning, evaluation and annotation."};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand");

  // Options shared by every stage; applied in order: config file, --set, stage flags, --out.
  std::string config_file, out_dir;
  std::vector<std::string> assignments;
  std::vector<std::pair<std::string, std::string>> flag_values;

  auto stage = [&](const char* name, const char* help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_file, "Run config file (section.key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("--set", assignments, "Override one config key, e.g. --set dpo.beta=0.2 (repeatable)");
    sub->add_option("--out", out_dir, "Output directory (overrides run.out and $RLAIF_OUT)");
    return sub;
  };
  // A stage flag that sets one config key.
  auto keyed = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(flag, [&flag_values, key](const std::string& v) { flag_values.emplace_back(key, v); },
                                          help + " [" + key + "]");
  };

  std::string corpus, train, dev, test, rm, lm, policy, reference, contexts, metric, pairs, base, judgments, baseline,
      anno_root, session_id, items, static_dir;
  std::vector<std::string> systems, metrics;
  bool constant = false, items_out = false;

  auto* gen = stage("gen-corpus", "Generate the synthetic dialogue corpus -> corpus.jsonl");
  keyed(gen, "--n", "corpus.sessions", "Number of sessions");
  keyed(gen, "--turns", "corpus.turns", "Turns per session");
  keyed(gen, "--noise", "corpus.noise", "Label noise standard deviation");
  keyed(gen, "--seed", "corpus.seed", "Generation seed");

  auto* spl = stage("split", "Split a corpus into train/dev/test.jsonl");
  spl->add_option("--corpus", corpus, "Sessions file")->required()->check(CLI::ExistingFile);
  keyed(spl, "--ratios", "split.ratios", "Proportions as train:dev:test");
  keyed(spl, "--seed", "split.seed", "Shuffle seed");

  auto* tlm = stage("train-lm", "Pretrain the base language model -> lm.ckpt");
  tlm->add_option("--train", train, "Training sessions")->required()->check(CLI::ExistingFile);
  tlm->add_option("--dev", dev, "Dev sessions")->required()->check(CLI::ExistingFile);
  keyed(tlm, "--epochs", "lm.epochs", "Epochs");
  keyed(tlm, "--seed", "lm.seed", "Seed");

  auto* trm = stage("train-rm", "Train the impression reward model -> rm.ckpt");
  trm->add_option("--train", train, "Training sessions")->required()->check(CLI::ExistingFile);
  trm->add_option("--dev", dev, "Dev sessions")->required()->check(CLI::ExistingFile);
  keyed(trm, "--epochs", "rm.epochs", "Epochs");
  keyed(trm, "--seed", "rm.seed", "Seed");

  auto* erm = stage("eval-rm", "Spearman correlation of scorers against test labels -> rm_eval.txt/.jsonl");
  erm->add_option("--test", test, "Test sessions")->required()->check(CLI::ExistingFile);
  erm->add_option("--rm", rm, "Reward model checkpoint (fine-tuned scorer)")->check(CLI::ExistingFile);
  erm->add_option("--lm", lm, "Language model checkpoint (prompting scorer)")->check(CLI::ExistingFile);
  erm->add_flag("--constant", constant, "Add a constant scorer column");

  auto* bp = stage("build-pairs", "Sample two responses per context and order them by reward -> pairs-<Metric>.jsonl");
  bp->add_option("--policy", policy, "Policy checkpoint")->required()->check(CLI::ExistingFile);
  bp->add_option("--rm", rm, "Reward model checkpoint")->required()->check(CLI::ExistingFile);
  bp->add_option("--contexts", contexts, "Sessions providing the contexts")->required()->check(CLI::ExistingFile);
  bp->add_option("--metric", metric, "Metric name")->required();
  keyed(bp, "--limit", "pairs.contexts", "Use at most this many contexts (0 = all)");
  keyed(bp, "--seed", "pairs.seed", "Sampling seed");
  keyed(bp, "--min-gap", "pairs.min_gap", "Drop pairs whose reward gap is below this");

  auto* dpo = stage("train-dpo", "Direct preference optimization -> dpo-<Metric>.ckpt");
  dpo->add_option("--policy", policy, "Starting policy checkpoint")->required()->check(CLI::ExistingFile);
  dpo->add_option("--reference", reference, "Frozen reference (default: the starting policy)")->check(CLI::ExistingFile);
  dpo->add_option("--pairs", pairs, "Preference pairs file")->required()->check(CLI::ExistingFile);
  keyed(dpo, "--beta", "dpo.beta", "Preference temperature");
  keyed(dpo, "--epochs", "dpo.epochs", "Epochs");
  keyed(dpo, "--lr", "dpo.lr", "Learning rate");
  keyed(dpo, "--nll-weight", "dpo.nll_weight", "Weight of the accepted-response NLL term (0 = plain DPO)");
  keyed(dpo, "--seed", "dpo.seed", "Shuffle seed");

  auto* ppo = stage("train-ppo", "Reinforcement learning against the reward model -> ppo-<Metric>.ckpt");
  ppo->add_option("--policy", policy, "Starting policy checkpoint")->required()->check(CLI::ExistingFile);
  ppo->add_option("--rm", rm, "Reward model checkpoint")->required()->check(CLI::ExistingFile);
  ppo->add_option("--contexts", contexts, "Sessions providing the contexts")->required()->check(CLI::ExistingFile);
  ppo->add_option("--metric", metric, "Metric name")->required();
  keyed(ppo, "--epochs", "ppo.epochs", "Epochs");
  keyed(ppo, "--kl-coef", "ppo.kl_coef", "KL penalty coefficient");
  keyed(ppo, "--limit", "ppo.contexts", "Use at most this many contexts (0 = all)");
  keyed(ppo, "--seed", "ppo.seed", "Seed");

  auto* ev = stage("evaluate", "AIF and PPL per metric and system -> eval.txt/.jsonl");
  ev->add_option("--rm", rm, "Reward model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--base", base, "Base language model for perplexity")->required()->check(CLI::ExistingFile);
  ev->add_option("--contexts", contexts, "Test sessions")->required()->check(CLI::ExistingFile);
  ev->add_option("--system", systems, "NAME=CHECKPOINT; '{metric}' in the path is replaced per metric (repeatable)")->required();
  ev->add_option("--metric", metrics, "Metric to evaluate (repeatable; default all)");
  ev->add_flag("--items-out", items_out, "Also write anno_items.jsonl for an annotation session (needs 3 systems)");
  keyed(ev, "--limit", "eval.contexts", "Use at most this many contexts (0 = all)");
  keyed(ev, "--seed", "eval.seed", "Generation seed");

  auto* hum = stage("human-agg", "Aggregate human judgments -> human.txt/.jsonl");
  hum->add_option("--judgments", judgments, "Judgment file (e.g. an annotation export)")->required()->check(CLI::ExistingFile);
  hum->add_option("--baseline", baseline, "System that win rates compare against")->required();

  auto* srv = stage("anno-serve", "Serve a blinded annotation session over HTTP until interrupted");
  srv->add_option("--root", anno_root, "Sessions directory (default <out>/anno)");
  srv->add_option("--session", session_id, "Session id")->required();
  srv->add_option("--items", items, "Create the session from this items file if it does not exist")->check(CLI::ExistingFile);
  srv->add_option("--metric", metrics, "Metrics to include when creating (repeatable; default all)");
  srv->add_option("--static", static_dir, "Directory with the annotation UI bundle, served at /")->check(CLI::ExistingDirectory);
  keyed(srv, "--host", "anno.host", "Listen address");
  keyed(srv, "--port", "anno.port", "Listen port");
  keyed(srv, "--per-metric", "anno.items_per_metric", "Items per metric when creating");

  app.add_subcommand("config", "Print every config key with its default and description")->callback([] {
    std::cout << describe_config();
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "rlaif: error: " << one_line(e.what()) << " (see --help)\n";
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  if (command == "config") return 0;
  try {
    Stage st;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      st.rc.load(in, config_file);
    }
    for (const auto& a : assignments) st.rc.set_assignment(a);
    for (const auto& [key, value] : flag_values) st.rc.set(key, value);
    if (!out_dir.empty()) st.rc.set("run.out", out_dir);
    validate_config(st.rc);
    st.out = st.rc.str("run.out");
    fs::create_directories(st.out);
    for (int i = 0; i < argc; ++i) st.command_line += (i ? " " : "") + std::string(argv[i]);

    if (command == "gen-corpus") gen_corpus(st);
    else if (command == "split") split_corpus(st, corpus);
    else if (command == "train-lm") train_lm(st, train, dev);
    else if (command == "train-rm") train_rm(st, train, dev);
    else if (command == "eval-rm") eval_rm(st, test, rm, lm, constant);
    else if (command == "build-pairs") build_pairs(st, policy, rm, contexts, metric);
    else if (command == "train-dpo") train_dpo_stage(st, policy, reference, pairs);
    else if (command == "train-ppo") train_ppo_stage(st, policy, rm, contexts, metric);
    else if (command == "evaluate") evaluate_stage(st, rm, base, contexts, systems, metrics, items_out);
    else if (command == "human-agg") human_agg(st, judgments, baseline);
    else if (command == "anno-serve") anno_serve(st, anno_root, session_id, items, metrics, static_dir);
  } catch (const std::exception& e) {
    std::cerr << "rlaif " << command << ": error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
