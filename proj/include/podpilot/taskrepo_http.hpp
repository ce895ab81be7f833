// Copyright 2025 The podpilot Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// HTTP flavor of the task-repository protocol. Endpoints:
//   POST /tasks                     submit a task (JSON TaskSpec)
//   PUT  /files/<task>/<name>       upload an input file
//   GET  /files/<task>/<name>       fetch an input file
//   POST /claims                    acquire a task (JSON PilotDescriptor)
//   PUT  /outputs/<task>/<name>     upload an output (X-Claim-Id header)
//   POST /claims/<id>/complete      report completion or failure
//   GET  /tasks/<id>                task status
// Authentication is a single static token in the X-Repo-Token header,
// enabled when the server is constructed with a nonempty token.

#pragma once

#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "podpilot/error.hpp"
#include "podpilot/taskrepo.hpp"

namespace podpilot {

namespace detail {

/// Percent-encodes a repository-relative file path, leaving '/' intact so
/// nested input names keep their structure on the wire.
inline std::string encode_path_segmentwise(const std::string& path) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (const unsigned char c : path) {
    const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                      (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.' ||
                      c == '~' || c == '/';
    if (keep) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 0xf]);
    }
  }
  return out;
}

inline int http_status_for(const std::exception& e) {
  if (dynamic_cast<const ClaimExpiredError*>(&e)) return 410;
  if (dynamic_cast<const NotFoundError*>(&e)) return 404;
  if (dynamic_cast<const AuthError*>(&e)) return 401;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParseError*>(&e)) {
    return 400;
  }
  return 500;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reference server
// ---------------------------------------------------------------------------

class RepoServer {
 public:
  explicit RepoServer(RepoCore& core, std::string token = "")
      : core_(core), token_(std::move(token)) {
    route();
  }

  /// Binds to an OS-assigned port; returns the port. Follow with serve().
  int bind(const std::string& host) {
    const int port = server_.bind_to_any_port(host.c_str());
    if (port <= 0) throw TransportError("cannot bind repository server on " + host);
    return port;
  }

  /// Blocking accept loop after bind(); run on a dedicated thread in tests.
  void serve() { server_.listen_after_bind(); }

  /// Blocking bind-and-listen for the CLI.
  bool listen(const std::string& host, int port) {
    return server_.listen(host.c_str(), port);
  }

  void stop() { server_.stop(); }
  bool is_running() const { return server_.is_running(); }

 private:
  bool authorized(const httplib::Request& req, httplib::Response& res) {
    if (token_.empty()) return true;
    if (req.get_header_value("X-Repo-Token") == token_) return true;
    fail(res, 401, "missing or invalid repository token");
    return false;
  }

  static void fail(httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
  }

  template <typename Fn>
  void guarded(const httplib::Request& req, httplib::Response& res, Fn&& fn) {
    if (!authorized(req, res)) return;
    try {
      fn();
    } catch (const nlohmann::json::exception& e) {
      fail(res, 400, std::string("malformed request: ") + e.what());
    } catch (const std::exception& e) {
      fail(res, detail::http_status_for(e), e.what());
    }
  }

  void route() {
    server_.Post("/tasks", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        TaskSpec task;
        try {
          task = nlohmann::json::parse(req.body).get<TaskSpec>();
        } catch (const nlohmann::json::exception& e) {
          throw ParseError(std::string("malformed task: ") + e.what());
        }
        std::string task_id;
        try {
          task_id = core_.submit_task(task);
        } catch (const ConfigError& e) {
          const std::string what = e.what();
          if (what.find("already exists") != std::string::npos) {
            fail(res, 409, what);
            return;
          }
          throw;
        }
        res.status = 201;
        res.set_content(nlohmann::json{{"task_id", task_id}}.dump(),
                        "application/json");
      });
    });

    server_.Put(R"(/files/([^/]+)/(.+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  guarded(req, res, [&] {
                    core_.put_input_file(req.matches[1], req.matches[2], req.body);
                    res.status = 201;
                  });
                });

    server_.Get(R"(/files/([^/]+)/(.+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  guarded(req, res, [&] {
                    res.set_content(core_.get_input(req.matches[1], req.matches[2]),
                                    "application/octet-stream");
                  });
                });

    server_.Post("/claims", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        PilotDescriptor pilot;
        try {
          pilot = nlohmann::json::parse(req.body).get<PilotDescriptor>();
        } catch (const nlohmann::json::exception& e) {
          throw ParseError(std::string("malformed pilot descriptor: ") + e.what());
        }
        const std::optional<ClaimTicket> ticket = core_.acquire(pilot);
        if (!ticket) {
          res.status = 204;
          return;
        }
        res.set_content(nlohmann::json(*ticket).dump(), "application/json");
      });
    });

    server_.Put(R"(/outputs/([^/]+)/(.+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  guarded(req, res, [&] {
                    const std::string claim_id = req.get_header_value("X-Claim-Id");
                    if (claim_id.empty()) {
                      throw ConfigError("output upload requires the X-Claim-Id header");
                    }
                    core_.put_output(claim_id, req.matches[2], req.body);
                    res.status = 201;
                  });
                });

    server_.Post(R"(/claims/([^/]+)/complete)",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   guarded(req, res, [&] {
                     const std::string claim_id = req.matches[1];
                     const nlohmann::json body = nlohmann::json::parse(req.body);
                     if (body.contains("failure_reason")) {
                       core_.fail_claim(claim_id,
                                        body.at("failure_reason").get<std::string>());
                     } else {
                       const ExitReport report = body.at("report").get<ExitReport>();
                       std::vector<std::string> missing;
                       if (body.contains("missing_outputs")) {
                         missing =
                             body.at("missing_outputs").get<std::vector<std::string>>();
                       }
                       core_.complete_claim(claim_id, report, missing);
                     }
                     res.set_content(nlohmann::json{{"ok", true}}.dump(),
                                     "application/json");
                   });
                 });

    server_.Get(R"(/tasks/([^/]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  guarded(req, res, [&] {
                    res.set_content(core_.task_status(req.matches[1]).dump(),
                                    "application/json");
                  });
                });
  }

  RepoCore& core_;
  std::string token_;
  httplib::Server server_;
};

// ---------------------------------------------------------------------------
// HTTP client
// ---------------------------------------------------------------------------

class HttpRepoClient : public TaskRepoClient {
 public:
  explicit HttpRepoClient(const std::string& base_url, std::string token = "")
      : client_(base_url), token_(std::move(token)) {
    client_.set_connection_timeout(5, 0);
    client_.set_read_timeout(60, 0);
  }

  std::optional<ClaimTicket> acquire_task(const PilotDescriptor& pilot) override {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto res = client_.Post("/claims", headers(), nlohmann::json(pilot).dump(),
                                  "application/json");
    check_reachable(res, "acquire task");
    if (res->status == 204) return std::nullopt;
    check_ok(*res, "acquire task");
    try {
      return nlohmann::json::parse(res->body).get<ClaimTicket>();
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("malformed claim ticket: ") + e.what());
    }
  }

  std::string fetch_input(const std::string& task_id, const std::string& source) override {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto res = client_.Get(
        "/files/" + task_id + "/" + detail::encode_path_segmentwise(source), headers());
    check_reachable(res, "fetch input");
    check_ok(*res, "fetch input '" + source + "'");
    return res->body;
  }

  void upload_output(const std::string& claim_id, const std::string& task_id,
                     const std::string& name, const std::string& bytes) override {
    std::lock_guard<std::mutex> lock(mutex_);
    httplib::Headers h = headers();
    h.emplace("X-Claim-Id", claim_id);
    const auto res =
        client_.Put("/outputs/" + task_id + "/" + detail::encode_path_segmentwise(name),
                    h, bytes, "application/octet-stream");
    check_reachable(res, "upload output");
    check_ok(*res, "upload output '" + name + "'");
  }

  void report_completion(const std::string& claim_id, const ExitReport& report,
                         const std::vector<std::string>& missing_outputs) override {
    const nlohmann::json body{{"report", report}, {"missing_outputs", missing_outputs}};
    post_completion(claim_id, body.dump(), "report completion");
  }

  void report_failure(const std::string& claim_id, const std::string& reason) override {
    const nlohmann::json body{{"failure_reason", reason}};
    post_completion(claim_id, body.dump(), "report failure");
  }

  /// Submission-side helpers used by the operator CLI.
  std::string submit_task(const TaskSpec& task) {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto res =
        client_.Post("/tasks", headers(), nlohmann::json(task).dump(), "application/json");
    check_reachable(res, "submit task");
    check_ok(*res, "submit task");
    return nlohmann::json::parse(res->body).at("task_id").get<std::string>();
  }

  void upload_input(const std::string& task_id, const std::string& name,
                    const std::string& bytes) {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto res =
        client_.Put("/files/" + task_id + "/" + detail::encode_path_segmentwise(name),
                    headers(), bytes, "application/octet-stream");
    check_reachable(res, "upload input");
    check_ok(*res, "upload input '" + name + "'");
  }

  nlohmann::json task_status(const std::string& task_id) {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto res = client_.Get("/tasks/" + task_id, headers());
    check_reachable(res, "query task");
    check_ok(*res, "query task '" + task_id + "'");
    return nlohmann::json::parse(res->body);
  }

 private:
  void post_completion(const std::string& claim_id, const std::string& body,
                       const std::string& action) {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto res = client_.Post("/claims/" + claim_id + "/complete", headers(), body,
                                  "application/json");
    check_reachable(res, action);
    check_ok(*res, action);
  }

  httplib::Headers headers() const {
    httplib::Headers h;
    if (!token_.empty()) h.emplace("X-Repo-Token", token_);
    return h;
  }

  static void check_reachable(const httplib::Result& res, const std::string& action) {
    if (!res) {
      throw TransportError("repository unreachable while trying to " + action + ": " +
                           httplib::to_string(res.error()));
    }
  }

  static void check_ok(const httplib::Response& res, const std::string& action) {
    if (res.status >= 200 && res.status < 300) return;
    std::string message = action + " failed with status " + std::to_string(res.status);
    try {
      const nlohmann::json j = nlohmann::json::parse(res.body);
      if (j.contains("error")) message += ": " + j.at("error").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      // Non-JSON error body; the status alone will have to do.
    }
    switch (res.status) {
      case 400: throw ProtocolError(message);
      case 401:
      case 403: throw AuthError(message);
      case 404: throw NotFoundError(message);
      case 410: throw ClaimExpiredError("claim expired");
      default: throw TransportError(message);
    }
  }

  httplib::Client client_;
  std::string token_;
  std::mutex mutex_;
};

}  // namespace podpilot
