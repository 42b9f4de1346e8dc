#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "rlaif/server.hpp"

using namespace rlaif;
namespace fs = std::filesystem;

namespace {

const std::array<std::string, 3> kSystems{"SYSTEM_ALPHA", "SYSTEM_BETA", "SYSTEM_GAMMA"};

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("rlaif-anno-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<SourceItem> sources(std::size_t per_metric, const std::array<std::string, 3>& systems = kSystems) {
  std::vector<SourceItem> out;
  for (Metric m : kMetrics) {
    for (std::size_t i = 0; i < per_metric; ++i) {
      SourceItem s;
      s.metric = m;
      s.context_id = "c" + std::to_string(i);
      s.context = {{Speaker::system, "hello the yes"}, {Speaker::user, "yes ok"}};
      for (std::size_t k = 0; k < 3; ++k) s.responses[systems[k]] = "reply " + std::to_string(k) + " to " + s.context_id;
      out.push_back(std::move(s));
    }
  }
  return out;
}

SessionOptions options(std::size_t per_metric, std::uint64_t seed = 11) {
  SessionOptions o;
  o.items_per_metric = per_metric;
  o.seed = seed;
  return o;
}

std::size_t slot_of(const AnnotationItem& item, const std::string& system) {
  for (std::size_t k = 0; k < 3; ++k)
    if (item.slots[k].system == system) return k;
  throw std::out_of_range(system);
}

// Slot-order answers that give `system_ranks[i]` to systems[i].
SlotJudgment answers_for(const AnnotationItem& item, const std::string& annotator, const std::array<std::string, 3>& systems,
                         std::array<int, 3> system_ranks, std::array<int, 3> system_nat = {3, 3, 3}) {
  SlotJudgment s{item.item_id, annotator, {}, {}};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto k = slot_of(item, systems[i]);
    s.ranks[k] = system_ranks[i];
    s.naturalness[k] = system_nat[i];
  }
  return s;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void expect_blinded(const std::string& body) {
  for (const auto& s : kSystems) EXPECT_EQ(body.find(s), std::string::npos) << "system id leaked: " << body;
}

}  // namespace

TEST(CreateSession, ItemsPerMetricAndOrder) {
  const auto src = sources(120);
  const auto spec = create_session("s1", kSystems, src, options(100));
  ASSERT_EQ(spec.items.size(), 1200u);
  for (std::size_t i = 0; i < spec.items.size(); ++i) EXPECT_EQ(spec.items[i].metric, kMetrics[i / 100]);
  EXPECT_EQ(spec.items.front().item_id, "Agency-c0");
  for (const auto& it : spec.items) {
    std::set<std::string> seen;
    for (const auto& c : it.slots) seen.insert(c.system);
    EXPECT_EQ(seen.size(), 3u);
    for (const auto& c : it.slots) EXPECT_NE(c.text.find(it.context_id), std::string::npos);
  }

  SessionOptions two = options(5);
  two.metrics = {Metric::Trust, Metric::Empathetic};
  const auto sub = create_session("s2", kSystems, src, two);
  ASSERT_EQ(sub.items.size(), 10u);
  EXPECT_EQ(sub.items.front().metric, Metric::Empathetic);
  EXPECT_EQ(sub.items.back().metric, Metric::Trust);
}

TEST(CreateSession, PermutationFrequenciesWithinThreeSigma) {
  const auto spec = create_session("s", kSystems, sources(100), options(100, 2024));
  std::map<std::array<std::size_t, 3>, int> counts;
  for (const auto& it : spec.items) {
    std::array<std::size_t, 3> perm{};
    for (std::size_t k = 0; k < 3; ++k) perm[k] = static_cast<std::size_t>(std::find(kSystems.begin(), kSystems.end(), it.slots[k].system) - kSystems.begin());
    ++counts[perm];
  }
  ASSERT_EQ(counts.size(), 6u);
  const double n = 1200.0, p = 1.0 / 6.0, sigma = std::sqrt(n * p * (1 - p));
  for (const auto& [perm, c] : counts) EXPECT_LE(std::abs(c - n * p), 3 * sigma) << c;
}

TEST(CreateSession, DeterministicUnderSeed) {
  const auto src = sources(20);
  const auto a = create_session("s", kSystems, src, options(20, 5));
  const auto b = create_session("s", kSystems, src, options(20, 5));
  const auto c = create_session("s", kSystems, src, options(20, 6));
  EXPECT_EQ(a.items, b.items);
  EXPECT_NE(a.items, c.items);
  EXPECT_EQ(spec_to_json(spec_from_json(spec_to_json(a))).dump(), spec_to_json(a).dump());
}

TEST(CreateSession, RejectsMisalignedResponses) {
  auto src = sources(2);
  auto missing = src;
  missing[3].responses.erase(kSystems[1]);
  EXPECT_THROW(create_session("s", kSystems, missing, options(2)), ValidationError);
  auto extra = src;
  extra[0].responses["SYSTEM_DELTA"] = "x";
  EXPECT_THROW(create_session("s", kSystems, extra, options(2)), ValidationError);
  auto renamed = src;
  renamed[0].responses.erase(kSystems[2]);
  renamed[0].responses["SYSTEM_DELTA"] = "x";
  EXPECT_THROW(create_session("s", kSystems, renamed, options(2)), ValidationError);
  EXPECT_THROW(create_session("s", {"a", "a", "b"}, src, options(2)), ValidationError);
  EXPECT_THROW(create_session("bad/id", kSystems, src, options(2)), ValidationError);
  EXPECT_THROW(create_session("s", kSystems, std::vector<SourceItem>{}, options(2)), ValidationError);
}

TEST(SourceItems, JsonLinesRoundTrip) {
  const auto src = sources(1);
  std::stringstream ss;
  for (const auto& s : src) ss << source_item_to_json(s).dump() << '\n';
  const auto back = read_source_items(ss);
  ASSERT_EQ(back.size(), src.size());
  EXPECT_EQ(back[4].responses, src[4].responses);
  EXPECT_EQ(back[4].context, src[4].context);
  std::istringstream bad("{\"metric\":\"Trust\"}\n");
  EXPECT_THROW(read_source_items(bad), FormatError);
}

TEST(Session, SequentialWalkAndDone) {
  TempDir dir;
  SessionOptions o = options(2);
  o.metrics = {Metric::Agency, Metric::Trust};
  AnnotationSession::write(dir.path, create_session("s", kSystems, sources(3), o));
  AnnotationSession s(dir.path);
  EXPECT_EQ(s.next_item("r1"), 0u);
  EXPECT_EQ(s.next_item("r1"), 0u);  // stable under retry
  for (std::size_t k = 0; k < 4; ++k) {
    ASSERT_EQ(s.next_item("r1"), k);
    s.submit(answers_for(s.spec().items[k], "r1", kSystems, {1, 2, 3}));
    EXPECT_EQ(s.progress("r1").judged, k + 1);
  }
  EXPECT_FALSE(s.next_item("r1"));
  EXPECT_EQ(s.next_item("r2"), 0u);  // annotators are independent
  EXPECT_EQ(s.next_item("r2", Metric::Trust), 2u);
  EXPECT_EQ(s.progress("r1", Metric::Trust).total, 2u);
  EXPECT_THROW(AnnotationSession::write(dir.path, s.spec()), ValidationError);
}

TEST(Session, AnswerValidation) {
  TempDir dir;
  AnnotationSession::write(dir.path, create_session("s", kSystems, sources(2), options(2)));
  AnnotationSession s(dir.path);
  const auto& items = s.spec().items;
  SlotJudgment j{items[0].item_id, "r1", {3, 3, 3}, {1, 2, 3}};
  auto bad = j;
  bad.naturalness[1] = 0;
  EXPECT_THROW(s.submit(bad), ValidationError);
  bad = j;
  bad.naturalness[2] = 6;
  EXPECT_THROW(s.submit(bad), ValidationError);
  bad = j;
  bad.ranks = {2, 3, 3};
  EXPECT_THROW(s.submit(bad), ValidationError);
  bad = j;
  bad.ranks = {1, 4, 2};
  EXPECT_THROW(s.submit(bad), ValidationError);
  bad = j;
  bad.annotator = "";
  EXPECT_THROW(s.submit(bad), ValidationError);
  bad = j;
  bad.item_id = "Agency-nope";
  EXPECT_THROW(s.submit(bad), NotFoundError);
  EXPECT_EQ(s.export_judgments(), "");

  j.ranks = {1, 1, 1};
  EXPECT_EQ(s.submit(j), SubmitOutcome::stored);
  SlotJudgment two_way{items[1].item_id, "r1", {1, 5, 2}, {2, 1, 2}};
  EXPECT_EQ(s.submit(two_way), SubmitOutcome::stored);
}

TEST(Session, SlotAnswersTranslateThroughMapping) {
  TempDir dir;
  AnnotationSession::write(dir.path, create_session("s", kSystems, sources(10), options(10, 3)));
  AnnotationSession s(dir.path);
  // An item where slot A shows the third system.
  const AnnotationItem* item = nullptr;
  for (const auto& it : s.spec().items)
    if (it.slots[0].system == kSystems[2]) {
      item = &it;
      break;
    }
  ASSERT_NE(item, nullptr);
  s.submit({item->item_id, "r1", {5, 2, 1}, {1, 3, 2}});
  std::istringstream in(s.export_judgments());
  const auto js = read_judgments(in);
  ASSERT_EQ(js.size(), 1u);
  const auto& j = js[0];
  EXPECT_EQ(j.metric, item->metric);
  EXPECT_EQ(j.find(kSystems[2])->rank, 1);
  EXPECT_EQ(j.find(kSystems[2])->naturalness, 5);
  EXPECT_EQ(j.find(item->slots[1].system)->rank, 3);
  EXPECT_EQ(j.find(item->slots[2].system)->naturalness, 1);
  EXPECT_EQ(j.presented, (std::vector<std::string>{item->slots[0].system, item->slots[1].system, item->slots[2].system}));
}

TEST(Session, IdempotentResubmissionAndConflict) {
  TempDir dir;
  AnnotationSession::write(dir.path, create_session("s", kSystems, sources(2), options(2)));
  AnnotationSession s(dir.path);
  const SlotJudgment j{s.spec().items[0].item_id, "r1", {4, 3, 2}, {1, 2, 2}};
  EXPECT_EQ(s.submit(j), SubmitOutcome::stored);
  const auto before = read_file(dir.path / kLogFile);
  EXPECT_EQ(s.submit(j), SubmitOutcome::duplicate);
  auto changed = j;
  changed.ranks = {2, 1, 2};
  EXPECT_THROW(s.submit(changed), ConflictError);
  EXPECT_EQ(read_file(dir.path / kLogFile), before);
  auto other = j;
  other.annotator = "r2";
  EXPECT_EQ(s.submit(other), SubmitOutcome::stored);
}

TEST(Session, RecoversAcknowledgedJudgmentsAfterTornWrite) {
  TempDir dir;
  AnnotationSession::write(dir.path, create_session("s", kSystems, sources(3), options(3)));
  std::string acknowledged;
  {
    AnnotationSession s(dir.path);
    for (std::size_t k = 0; k < 3; ++k) s.submit(answers_for(s.spec().items[k], "r1", kSystems, {1, 2, 2}));
    acknowledged = s.export_judgments();
  }
  const auto log = dir.path / kLogFile;
  const auto clean_size = fs::file_size(log);
  {
    std::ofstream out(log, std::ios::app | std::ios::binary);
    out << "1234abcd {\"item_id\":\"Agen";  // crash mid-append
  }
  {
    AnnotationSession s(dir.path);
    EXPECT_EQ(s.export_judgments(), acknowledged);
    EXPECT_EQ(fs::file_size(log), clean_size);
    EXPECT_EQ(s.next_item("r1"), 3u);
    s.submit(answers_for(s.spec().items[3], "r1", kSystems, {1, 1, 1}));
  }
  {
    AnnotationSession s(dir.path);
    EXPECT_EQ(s.progress("r1").judged, 4u);
  }
  // A complete final line with a wrong checksum was never acknowledged either.
  const auto four = read_file(log);
  {
    std::ofstream out(log, std::ios::app | std::ios::binary);
    out << "00000000 {}\n";
  }
  EXPECT_EQ(AnnotationSession(dir.path).progress("r1").judged, 4u);
  EXPECT_EQ(read_file(log), four);

  // Damage before the tail is corruption, not a torn write.
  std::string damaged = four;
  damaged[20] = damaged[20] == 'x' ? 'y' : 'x';
  std::ofstream(log, std::ios::binary | std::ios::trunc) << damaged;
  EXPECT_THROW(AnnotationSession{dir.path}, FormatError);
}

TEST(Session, ExportIsAPureRead) {
  TempDir dir;
  AnnotationSession::write(dir.path, create_session("s", kSystems, sources(2), options(2)));
  AnnotationSession s(dir.path);
  EXPECT_EQ(s.export_judgments(), "");
  s.submit(answers_for(s.spec().items[1], "r1", kSystems, {2, 1, 3}));
  s.submit(answers_for(s.spec().items[0], "r2", kSystems, {1, 1, 1}));
  const auto first = s.export_judgments();
  EXPECT_EQ(s.export_judgments(), first);
  EXPECT_EQ(AnnotationSession(dir.path).export_judgments(), first);
}

TEST(Session, ExportAggregatesToHandComputedReport) {
  const std::array<std::string, 3> sys{"dpo", "base", "ppo"};
  TempDir dir;
  SessionOptions o = options(4, 9);
  o.metrics = {Metric::Empathetic, Metric::Trust};
  AnnotationSession::write(dir.path, create_session("s", sys, sources(4, sys), o));
  AnnotationSession s(dir.path);
  const auto& items = s.spec().items;
  s.submit(answers_for(items[0], "r1", sys, {1, 2, 3}, {4, 4, 4}));
  s.submit(answers_for(items[1], "r1", sys, {2, 2, 1}, {3, 3, 3}));
  s.submit(answers_for(items[2], "r1", sys, {1, 1, 2}, {5, 5, 5}));
  s.submit(answers_for(items[3], "r1", sys, {3, 1, 2}, {2, 2, 2}));
  s.submit(answers_for(items[4], "r1", sys, {1, 1, 1}, {1, 1, 1}));
  std::istringstream in(s.export_judgments());
  const auto report = aggregate_human(read_judgments(in), "base");
  ASSERT_EQ(report.rows.size(), 2u);
  const auto& row = report.rows[0];
  EXPECT_EQ(row.items, 4u);
  for (const auto& c : row.systems) {
    if (c.system == "dpo") {
      EXPECT_EQ(c.win, 0.75);
      EXPECT_EQ(c.rank, 1.75);
      EXPECT_EQ(c.naturalness, 3.5);
    } else if (c.system == "base") {
      EXPECT_EQ(c.rank, 1.5);
    } else {
      EXPECT_EQ(c.win, 0.25);
    }
  }
  for (const auto& c : report.rows[1].systems) EXPECT_EQ(c.win, 1.0);
}

TEST(Session, ExportMatchesSubmissionsForRandomAnswers) {
  TempDir dir;
  AnnotationSession::write(dir.path, create_session("s", kSystems, sources(5), options(5, 77)));
  AnnotationSession s(dir.path);
  Rng rng(5);
  std::vector<Judgment> expected;
  for (std::size_t k = 0; k < 40; ++k) {
    const auto& item = s.spec().items[rng.below(s.spec().items.size())];
    const std::string annotator = "r" + std::to_string(rng.below(3));
    std::array<int, 3> ranks{}, nat{};
    for (std::size_t i = 0; i < 3; ++i) {
      ranks[i] = 1 + static_cast<int>(rng.below(3));
      nat[i] = 1 + static_cast<int>(rng.below(5));
    }
    const int lo = *std::min_element(ranks.begin(), ranks.end());
    for (auto& r : ranks) r -= lo - 1;
    const auto ans = answers_for(item, annotator, kSystems, ranks, nat);
    try {
      if (s.submit(ans) == SubmitOutcome::duplicate) continue;
    } catch (const ConflictError&) {
      continue;
    }
    Judgment j{item.item_id, annotator, item.metric, {}, {}};
    for (std::size_t slot = 0; slot < 3; ++slot) {
      j.systems.push_back({item.slots[slot].system, ans.naturalness[slot], ans.ranks[slot]});
      j.presented.push_back(item.slots[slot].system);
    }
    expected.push_back(j);
    const auto* stored = j.find(kSystems[0]);
    const auto i0 = std::find(kSystems.begin(), kSystems.end(), kSystems[0]) - kSystems.begin();
    EXPECT_EQ(stored->rank, ranks[static_cast<std::size_t>(i0)]);
  }
  std::istringstream in(s.export_judgments());
  EXPECT_EQ(read_judgments(in), expected);
}

TEST(Session, ConcurrentSubmissionsAllLand) {
  TempDir dir;
  AnnotationSession::write(dir.path, create_session("s", kSystems, sources(2), options(2)));
  AnnotationSession s(dir.path);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&s, t] {
      const std::string who = "r" + std::to_string(t);
      while (auto k = s.next_item(who)) s.submit(answers_for(s.spec().items[*k], who, kSystems, {1, 2, 3}));
    });
  }
  for (auto& th : threads) th.join();
  for (int t = 0; t < 4; ++t) EXPECT_EQ(s.progress("r" + std::to_string(t)).judged, 24u);
  EXPECT_EQ(AnnotationSession(dir.path).progress("r3").judged, 24u);
}

class ServerTest : public ::testing::Test {
 protected:
  void start(std::optional<fs::path> static_dir = std::nullopt) {
    SessionOptions o = options(2);
    o.metrics = {Metric::Empathetic, Metric::Trust};
    AnnotationSession::write(root.path / "pilot", create_session("pilot", kSystems, sources(2), o));
    server = std::make_unique<AnnotationServer>(root.path, static_dir);
    port = server->bind("127.0.0.1", 0);
    thread = std::thread([this] { server->serve(); });
    server->wait_until_ready();
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
  }
  void TearDown() override {
    if (server) server->stop();
    if (thread.joinable()) thread.join();
  }

  httplib::Result post_judgment(const nlohmann::json& body) {
    return client->Post("/session/pilot/judgment", body.dump(), "application/json");
  }

  TempDir root;
  std::unique_ptr<AnnotationServer> server;
  std::unique_ptr<httplib::Client> client;
  std::thread thread;
  int port = 0;
};

TEST_F(ServerTest, AnnotationWalkOverHttpStaysBlinded) {
  start();
  auto res = client->Get("/session/pilot/next?annotator=r1");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  expect_blinded(res->body);
  auto item = nlohmann::json::parse(res->body);
  EXPECT_EQ(item["index"], 0);
  EXPECT_EQ(item["metric"], "Empathetic");
  EXPECT_EQ(item["candidates"].size(), 3u);
  EXPECT_EQ(item["candidates"][1]["slot"], "B");
  EXPECT_FALSE(item["questionnaire"].get<std::string>().empty());
  EXPECT_EQ(item["context"][0]["speaker"], "system");

  for (int k = 0; k < 4; ++k) {
    res = client->Get("/session/pilot/next?annotator=r1");
    ASSERT_TRUE(res);
    expect_blinded(res->body);
    item = nlohmann::json::parse(res->body);
    ASSERT_FALSE(item["done"].get<bool>());
    EXPECT_EQ(item["index"], k);
    const nlohmann::json body{{"item_id", item["item_id"]}, {"annotator", "r1"}, {"naturalness", {5, 3, 1}}, {"ranks", {1, 2, k == 3 ? 1 : 3}}};
    res = post_judgment(body);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200) << res->body;
    expect_blinded(res->body);
    EXPECT_EQ(nlohmann::json::parse(res->body)["status"], "stored");
    res = post_judgment(body);
    EXPECT_EQ(nlohmann::json::parse(res->body)["status"], "duplicate");
    expect_blinded(res->body);
  }
  res = client->Get("/session/pilot/next?annotator=r1");
  EXPECT_TRUE(nlohmann::json::parse(res->body)["done"].get<bool>());
  expect_blinded(res->body);

  res = client->Get("/session/pilot/progress?annotator=r1");
  ASSERT_EQ(res->status, 200);
  expect_blinded(res->body);
  const auto prog = nlohmann::json::parse(res->body);
  EXPECT_EQ(prog["judged"], 4);
  EXPECT_EQ(prog["total"], 4);
  EXPECT_EQ(prog["metrics"].size(), 2u);

  res = client->Get("/session/pilot/next?annotator=r2&metric=Trust");
  EXPECT_EQ(nlohmann::json::parse(res->body)["index"], 2);

  res = client->Get("/sessions");
  EXPECT_EQ(nlohmann::json::parse(res->body)["sessions"], nlohmann::json::array({"pilot"}));

  res = client->Get("/");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  expect_blinded(res->body);

  // The export is for researchers and carries system ids after translation.
  res = client->Get("/session/pilot/export");
  ASSERT_EQ(res->status, 200);
  std::istringstream in(res->body);
  const auto js = read_judgments(in);
  ASSERT_EQ(js.size(), 4u);
  EXPECT_EQ(res->body, server->session("pilot").export_judgments());
}

TEST_F(ServerTest, ErrorStatuses) {
  start();
  auto res = client->Get("/session/nope/next?annotator=r1");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  res = client->Get("/session/pilot/next");
  EXPECT_EQ(res->status, 400);
  res = client->Get("/session/pilot/next?annotator=r1&metric=Bogus");
  EXPECT_EQ(res->status, 400);
  res = client->Post("/session/pilot/judgment", "{not json", "application/json");
  EXPECT_EQ(res->status, 400);

  const auto first = nlohmann::json::parse(client->Get("/session/pilot/next?annotator=r1")->body);
  nlohmann::json body{{"item_id", first["item_id"]}, {"annotator", "r1"}, {"naturalness", {0, 3, 3}}, {"ranks", {1, 2, 3}}};
  res = post_judgment(body);
  EXPECT_EQ(res->status, 400);
  expect_blinded(res->body);
  body["naturalness"] = {3, 3, 3};
  body["ranks"] = {2, 3, 3};
  res = post_judgment(body);
  EXPECT_EQ(res->status, 400);
  expect_blinded(res->body);
  body["ranks"] = {1, 2, 3};
  EXPECT_EQ(post_judgment(body)->status, 200);
  body["ranks"] = {3, 2, 1};
  res = post_judgment(body);
  EXPECT_EQ(res->status, 409);
  expect_blinded(res->body);
  body["item_id"] = "Empathetic-zzz";
  res = post_judgment(body);
  EXPECT_EQ(res->status, 404);
}

TEST_F(ServerTest, ServesStaticBundle) {
  TempDir bundle;
  std::ofstream(bundle.path / "index.html") << "<html>bundle</html>";
  std::ofstream(bundle.path / "app.js") << "console.log(1);";
  start(bundle.path);
  auto res = client->Get("/");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->body, "<html>bundle</html>");
  res = client->Get("/app.js");
  EXPECT_EQ(res->body, "console.log(1);");
  EXPECT_EQ(client->Get("/session/pilot/next?annotator=r1")->status, 200);
}
