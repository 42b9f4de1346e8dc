#pragma once

// HTTP+JSON front end for annotation sessions stored under one root directory.
//   GET  /session/{id}/next?annotator=NAME[&metric=M]
//   POST /session/{id}/judgment     {"item_id","annotator","naturalness":[a,b,c],"ranks":[a,b,c]}
//   GET  /session/{id}/progress?annotator=NAME
//   GET  /session/{id}/export       judgment lines (researcher-facing, carries system ids)
//   GET  /sessions
// Everything else under / is static content.

// Must precede httplib: <resolv.h> defines a `_res` macro that breaks Eigen.
#include "rlaif/annotation.hpp"

#include <httplib.h>

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

namespace rlaif {

inline constexpr const char* kPlaceholderPage = R"(<!doctype html>
<html><head><meta charset="utf-8"><title>Annotation</title></head>
<body><p>No annotation UI bundle is installed. Start the server with --static DIR to serve one.</p>
<p>API: GET /session/{id}/next?annotator=NAME, POST /session/{id}/judgment, GET /session/{id}/progress?annotator=NAME.</p>
</body></html>
)";

inline constexpr std::size_t kMaxAnnotatorLength = 64;
inline constexpr std::size_t kMaxRequestBody = 64 * 1024;

class AnnotationServer {
 public:
  AnnotationServer(std::filesystem::path sessions_root, std::optional<std::filesystem::path> static_dir = std::nullopt)
      : root_(std::move(sessions_root)) {
    if (!std::filesystem::is_directory(root_)) throw ValidationError("sessions root is not a directory: " + root_.string());
    server_.set_payload_max_length(kMaxRequestBody);
    if (static_dir) {
      if (!server_.set_mount_point("/", static_dir->string())) {
        throw ValidationError("static directory does not exist: " + static_dir->string());
      }
    } else {
      server_.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content(kPlaceholderPage, "text/html"); });
    }
    routes();
  }

  // Binds to host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  // Blocks until stop().
  void serve() {
    if (!server_.listen_after_bind()) throw std::runtime_error("server stopped with an error");
  }

  void wait_until_ready() const { server_.wait_until_ready(); }
  void stop() { server_.stop(); }

  AnnotationSession& session(const std::string& id) {
    if (!valid_session_id(id)) throw NotFoundError("unknown session '" + id + "'");
    std::lock_guard lock(sessions_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) {
      const auto dir = root_ / id;
      if (!std::filesystem::exists(dir / kSessionFile)) throw NotFoundError("unknown session '" + id + "'");
      it = sessions_.emplace(id, std::make_unique<AnnotationSession>(dir)).first;
    }
    return *it->second;
  }

 private:
  static void send_json(httplib::Response& res, const nlohmann::ordered_json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, {{"error", message}}, status);
  }

  static std::string annotator_of(const httplib::Request& req) {
    const auto a = req.get_param_value("annotator");
    if (a.empty()) throw ValidationError("annotator query parameter is required");
    if (a.size() > kMaxAnnotatorLength) throw ValidationError("annotator id is too long");
    return a;
  }

  static std::optional<Metric> metric_of(const httplib::Request& req) {
    if (!req.has_param("metric")) return std::nullopt;
    return metric_from_name(req.get_param_value("metric"));
  }

  static nlohmann::ordered_json progress_json(const AnnotationSession& s, const std::string& annotator) {
    const auto all = s.progress(annotator);
    nlohmann::ordered_json j{{"annotator", annotator}, {"judged", all.judged}, {"total", all.total}};
    j["metrics"] = nlohmann::ordered_json::array();
    for (Metric m : kMetrics) {
      const auto p = s.progress(annotator, m);
      if (p.total) j["metrics"].push_back({{"metric", metric_name(m)}, {"judged", p.judged}, {"total", p.total}});
    }
    return j;
  }

  nlohmann::ordered_json next_json(const AnnotationSession& s, const std::string& annotator, std::optional<Metric> metric) const {
    const auto p = s.progress(annotator, metric);
    const auto next = s.next_item(annotator, metric);
    if (!next) return {{"done", true}, {"progress", {{"judged", p.judged}, {"total", p.total}}}};
    return blinded_item_json(s.spec(), *next, p);
  }

  template <class Handler>
  auto guarded(Handler h) {
    return [this, h](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const NotFoundError& e) {
        send_error(res, 404, e.what());
      } catch (const ConflictError& e) {
        send_error(res, 409, e.what());
      } catch (const ValidationError& e) {
        send_error(res, 400, e.what());
      } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, std::string("malformed request body: ") + e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    };
  }

  void routes() {
    static constexpr const char* kId = "([A-Za-z0-9_-]+)";
    const std::string base = std::string("/session/") + kId;

    server_.Get("/sessions", guarded([this](const httplib::Request&, httplib::Response& res) {
                  std::vector<std::string> ids;
                  for (const auto& e : std::filesystem::directory_iterator(root_))
                    if (e.is_directory() && std::filesystem::exists(e.path() / kSessionFile)) ids.push_back(e.path().filename().string());
                  std::sort(ids.begin(), ids.end());
                  send_json(res, {{"sessions", ids}});
                }));

    server_.Get(base + "/next", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  auto& s = session(req.matches[1]);
                  send_json(res, next_json(s, annotator_of(req), metric_of(req)));
                }));

    server_.Post(base + "/judgment", guarded([this](const httplib::Request& req, httplib::Response& res) {
                   auto& s = session(req.matches[1]);
                   const auto body = nlohmann::json::parse(req.body);
                   const SlotJudgment j = slot_judgment_from_json(body);
                   if (j.annotator.size() > kMaxAnnotatorLength) throw ValidationError("annotator id is too long");
                   const auto outcome = s.submit(j);
                   const auto p = s.progress(j.annotator);
                   send_json(res, {{"status", outcome == SubmitOutcome::stored ? "stored" : "duplicate"},
                                   {"item_id", j.item_id},
                                   {"progress", {{"judged", p.judged}, {"total", p.total}}}});
                 }));

    server_.Get(base + "/progress", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  auto& s = session(req.matches[1]);
                  send_json(res, progress_json(s, annotator_of(req)));
                }));

    server_.Get(base + "/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  auto& s = session(req.matches[1]);
                  res.set_content(s.export_judgments(), "application/x-ndjson");
                }));
  }

  std::filesystem::path root_;
  httplib::Server server_;
  std::mutex sessions_mutex_;
  std::map<std::string, std::unique_ptr<AnnotationSession>> sessions_;
};

}  // namespace rlaif
