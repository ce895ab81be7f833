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
// Task repository: the queue pilots claim work from. RepoCore is the
// storage and claim-state engine shared by the reference HTTP server and
// the in-process client; leases are enforced lazily, so an expired claim is
// requeued the moment any caller touches the task again, never by a
// background thread. A short grace window after lease expiry still accepts
// the original pilot's completion as long as nobody else has reclaimed the
// task.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include <json.hpp>

#include "podpilot/archive.hpp"
#include "podpilot/clock.hpp"
#include "podpilot/error.hpp"
#include "podpilot/model.hpp"

namespace podpilot {

struct PilotDescriptor {
  std::string pilot_id;
  std::map<std::string, std::string> capabilities;

  bool operator==(const PilotDescriptor&) const = default;
};

struct ClaimTicket {
  TaskSpec task;
  std::string claim_id;
  std::int64_t lease_expiry = 0;  // unix epoch seconds

  bool operator==(const ClaimTicket&) const = default;
};

inline void to_json(nlohmann::json& j, const PilotDescriptor& v) {
  j = {{"pilot_id", v.pilot_id}, {"capabilities", v.capabilities}};
}

inline void from_json(const nlohmann::json& j, PilotDescriptor& v) {
  v.pilot_id = j.at("pilot_id").get<std::string>();
  if (j.contains("capabilities")) {
    v.capabilities = j.at("capabilities").get<std::map<std::string, std::string>>();
  } else {
    v.capabilities.clear();
  }
}

inline void to_json(nlohmann::json& j, const ClaimTicket& v) {
  j = {{"task", v.task}, {"claim_id", v.claim_id}, {"lease_expiry", v.lease_expiry}};
}

inline void from_json(const nlohmann::json& j, ClaimTicket& v) {
  v.task = j.at("task").get<TaskSpec>();
  v.claim_id = j.at("claim_id").get<std::string>();
  v.lease_expiry = j.at("lease_expiry").get<std::int64_t>();
}

inline bool requirements_satisfied(const TaskSpec& task, const PilotDescriptor& pilot) {
  for (const auto& [key, value] : task.requirements) {
    const auto it = pilot.capabilities.find(key);
    if (it == pilot.capabilities.end() || it->second != value) return false;
  }
  return true;
}

struct RepoOptions {
  std::uint32_t grace_seconds = 60;
};

/// Directory-backed task store with claim/lease semantics. One subdirectory
/// per task: `task.json` (immutable spec), `state.json` (mutable claim
/// state), `files/` (inputs), `outputs/` (uploaded results). All mutations
/// happen under one lock and are flushed to disk before returning.
class RepoCore {
 public:
  RepoCore(std::filesystem::path state_dir, Clock& clock, RepoOptions options = {})
      : state_dir_(std::move(state_dir)), clock_(clock), options_(options) {
    std::filesystem::create_directories(tasks_dir());
    load();
  }

  std::string submit_task(const TaskSpec& task) {
    ensure_valid(task);
    std::lock_guard<std::mutex> lock(mutex_);
    if (tasks_.count(task.task_id)) {
      throw ConfigError("task '" + task.task_id + "' already exists");
    }
    Entry entry;
    entry.task = task;
    entry.state = "queued";
    entry.seq = next_seq_++;
    const std::filesystem::path dir = task_dir(task.task_id);
    std::filesystem::create_directories(dir / "files");
    std::filesystem::create_directories(dir / "outputs");
    write_file(dir / "task.json", nlohmann::json(task).dump(2) + "\n");
    persist(entry);
    tasks_.emplace(task.task_id, std::move(entry));
    return task.task_id;
  }

  void put_input_file(const std::string& task_id, const std::string& name,
                      const std::string& bytes) {
    std::lock_guard<std::mutex> lock(mutex_);
    require_task(task_id);
    if (!is_safe_relative_path(name)) {
      throw ConfigError("input name '" + name + "' is not a safe relative path");
    }
    const std::filesystem::path path = task_dir(task_id) / "files" / name;
    std::filesystem::create_directories(path.parent_path());
    write_file(path, bytes);
  }

  std::string get_input(const std::string& task_id, const std::string& name) {
    std::lock_guard<std::mutex> lock(mutex_);
    require_task(task_id);
    if (!is_safe_relative_path(name)) {
      throw NotFoundError("no input '" + name + "' for task '" + task_id + "'");
    }
    const std::filesystem::path path = task_dir(task_id) / "files" / name;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("no input '" + name + "' for task '" + task_id + "'");
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  }

  /// Claims the oldest queued task the pilot's capabilities satisfy.
  /// Expired leases encountered during the scan are requeued first, so a
  /// crashed pilot's task is claimable again by whoever asks next.
  std::optional<ClaimTicket> acquire(const PilotDescriptor& pilot) {
    if (pilot.pilot_id.empty()) throw ConfigError("pilot id must be nonempty");
    std::lock_guard<std::mutex> lock(mutex_);
    const std::int64_t now = clock_.unix_seconds();
    Entry* best = nullptr;
    for (auto& [id, entry] : tasks_) {
      requeue_if_expired(entry, now);
      if (entry.state != "queued") continue;
      if (!requirements_satisfied(entry.task, pilot)) continue;
      if (best == nullptr || entry.seq < best->seq) best = &entry;
    }
    if (best == nullptr) return std::nullopt;
    best->state = "claimed";
    best->claim_id = "c" + std::to_string(next_claim_++);
    best->claim_holder = pilot.pilot_id;
    best->claim_expiry = now + best->task.lease_seconds;
    claims_[best->claim_id] = best->task.task_id;
    persist(*best);
    return ClaimTicket{best->task, best->claim_id, best->claim_expiry};
  }

  void put_output(const std::string& claim_id, const std::string& name,
                  const std::string& bytes) {
    std::lock_guard<std::mutex> lock(mutex_);
    Entry& entry = checked_claim(claim_id);
    if (!is_safe_relative_path(name)) {
      throw ConfigError("output name '" + name + "' is not a safe relative path");
    }
    const std::filesystem::path path = task_dir(entry.task.task_id) / "outputs" / name;
    std::filesystem::create_directories(path.parent_path());
    write_file(path, bytes);
  }

  void complete_claim(const std::string& claim_id, const ExitReport& report,
                      const std::vector<std::string>& missing_outputs) {
    ensure_valid(report);
    std::lock_guard<std::mutex> lock(mutex_);
    Entry& entry = checked_claim(claim_id, /*allow_terminal_repeat=*/true);
    if (is_terminal(entry)) return;  // idempotent retry of an accepted report
    entry.state = report.exit_code == 0
                      ? "completed"
                      : "failed(" + std::to_string(report.exit_code) + ")";
    entry.exit_code = report.exit_code;
    entry.missing_outputs = missing_outputs;
    entry.last_claim_id = claim_id;
    clear_claim(entry);
    persist(entry);
  }

  void fail_claim(const std::string& claim_id, const std::string& reason) {
    if (reason.empty()) throw ConfigError("failure reason must be nonempty");
    std::lock_guard<std::mutex> lock(mutex_);
    Entry& entry = checked_claim(claim_id, /*allow_terminal_repeat=*/true);
    if (is_terminal(entry)) return;
    entry.state = "failed(" + reason + ")";
    entry.failure_reason = reason;
    entry.last_claim_id = claim_id;
    clear_claim(entry);
    persist(entry);
  }

  nlohmann::json task_status(const std::string& task_id) {
    std::lock_guard<std::mutex> lock(mutex_);
    Entry& entry = require_task(task_id);
    requeue_if_expired(entry, clock_.unix_seconds());
    nlohmann::json j{{"task_id", task_id},
                     {"state", entry.state},
                     {"requeues", entry.requeues}};
    if (entry.exit_code) j["exit_code"] = *entry.exit_code;
    if (!entry.missing_outputs.empty()) j["missing_outputs"] = entry.missing_outputs;
    if (!entry.failure_reason.empty()) j["failure_reason"] = entry.failure_reason;
    return j;
  }

  std::string task_state(const std::string& task_id) {
    return task_status(task_id).at("state").get<std::string>();
  }

  std::vector<std::string> task_ids() {
    std::lock_guard<std::mutex> lock(mutex_);
    std::vector<std::string> ids;
    for (const auto& [id, entry] : tasks_) ids.push_back(id);
    return ids;
  }

  std::filesystem::path output_path(const std::string& task_id,
                                    const std::string& name) {
    return task_dir(task_id) / "outputs" / name;
  }

 private:
  struct Entry {
    TaskSpec task;
    std::string state;  // queued | claimed | completed | failed(<detail>)
    std::uint64_t seq = 0;
    std::uint32_t requeues = 0;
    std::string claim_id;
    std::string claim_holder;
    std::int64_t claim_expiry = 0;
    // A requeued claim stays acceptable for completion until its grace
    // deadline, unless someone reclaims the task first.
    std::string grace_claim_id;
    std::int64_t grace_deadline = 0;
    std::string last_claim_id;
    std::optional<int> exit_code;
    std::vector<std::string> missing_outputs;
    std::string failure_reason;
  };

  static bool is_terminal(const Entry& entry) {
    return entry.state == "completed" || entry.state.rfind("failed(", 0) == 0;
  }

  std::filesystem::path tasks_dir() const { return state_dir_ / "tasks"; }
  std::filesystem::path task_dir(const std::string& task_id) const {
    return tasks_dir() / task_id;
  }

  Entry& require_task(const std::string& task_id) {
    const auto it = tasks_.find(task_id);
    if (it == tasks_.end()) throw NotFoundError("unknown task '" + task_id + "'");
    return it->second;
  }

  void requeue_if_expired(Entry& entry, std::int64_t now) {
    if (entry.state != "claimed" || now <= entry.claim_expiry) return;
    entry.grace_claim_id = entry.claim_id;
    entry.grace_deadline = entry.claim_expiry + options_.grace_seconds;
    entry.state = "queued";
    entry.claim_id.clear();
    entry.claim_holder.clear();
    entry.claim_expiry = 0;
    entry.requeues += 1;
    persist(entry);
  }

  /// Resolves a claim id to its task, enforcing lease/grace rules. Throws
  /// NotFoundError for claims never issued and ClaimExpiredError for claims
  /// that lost their task.
  Entry& checked_claim(const std::string& claim_id, bool allow_terminal_repeat = false) {
    const auto it = claims_.find(claim_id);
    if (it == claims_.end()) throw NotFoundError("unknown claim '" + claim_id + "'");
    Entry& entry = require_task(it->second);
    const std::int64_t now = clock_.unix_seconds();
    requeue_if_expired(entry, now);
    if (entry.state == "claimed" && entry.claim_id == claim_id) return entry;
    if (entry.state == "queued" && entry.grace_claim_id == claim_id &&
        now <= entry.grace_deadline) {
      return entry;
    }
    if (allow_terminal_repeat && is_terminal(entry) && entry.last_claim_id == claim_id) {
      return entry;
    }
    throw ClaimExpiredError("claim expired");
  }

  void clear_claim(Entry& entry) {
    entry.claim_id.clear();
    entry.claim_holder.clear();
    entry.claim_expiry = 0;
    entry.grace_claim_id.clear();
    entry.grace_deadline = 0;
  }

  void persist(const Entry& entry) {
    nlohmann::json j{{"state", entry.state},
                     {"seq", entry.seq},
                     {"requeues", entry.requeues},
                     {"claim_id", entry.claim_id},
                     {"claim_holder", entry.claim_holder},
                     {"claim_expiry", entry.claim_expiry},
                     {"grace_claim_id", entry.grace_claim_id},
                     {"grace_deadline", entry.grace_deadline},
                     {"last_claim_id", entry.last_claim_id},
                     {"missing_outputs", entry.missing_outputs},
                     {"failure_reason", entry.failure_reason}};
    if (entry.exit_code) j["exit_code"] = *entry.exit_code;
    write_file(task_dir(entry.task.task_id) / "state.json", j.dump(2) + "\n");
  }

  void load() {
    std::error_code ec;
    for (const auto& dir : std::filesystem::directory_iterator(tasks_dir(), ec)) {
      if (!dir.is_directory()) continue;
      std::ifstream task_in(dir.path() / "task.json");
      std::ifstream state_in(dir.path() / "state.json");
      if (!task_in || !state_in) continue;
      try {
        Entry entry;
        entry.task = nlohmann::json::parse(task_in).get<TaskSpec>();
        const nlohmann::json s = nlohmann::json::parse(state_in);
        entry.state = s.at("state").get<std::string>();
        entry.seq = s.value("seq", std::uint64_t{0});
        entry.requeues = s.value("requeues", 0u);
        entry.claim_id = s.value("claim_id", std::string());
        entry.claim_holder = s.value("claim_holder", std::string());
        entry.claim_expiry = s.value("claim_expiry", std::int64_t{0});
        entry.grace_claim_id = s.value("grace_claim_id", std::string());
        entry.grace_deadline = s.value("grace_deadline", std::int64_t{0});
        entry.last_claim_id = s.value("last_claim_id", std::string());
        if (s.contains("exit_code")) entry.exit_code = s.at("exit_code").get<int>();
        if (s.contains("missing_outputs")) {
          entry.missing_outputs = s.at("missing_outputs").get<std::vector<std::string>>();
        }
        entry.failure_reason = s.value("failure_reason", std::string());
        next_seq_ = std::max(next_seq_, entry.seq + 1);
        for (const std::string* cid :
             {&entry.claim_id, &entry.grace_claim_id, &entry.last_claim_id}) {
          if (cid->empty() || cid->front() != 'c') continue;
          claims_[*cid] = entry.task.task_id;
          const std::uint64_t n = std::strtoull(cid->c_str() + 1, nullptr, 10);
          next_claim_ = std::max(next_claim_, n + 1);
        }
        tasks_.emplace(entry.task.task_id, std::move(entry));
      } catch (const std::exception&) {
        // A torn state file makes the task unloadable, not the whole store.
        continue;
      }
    }
  }

  static void write_file(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot write " + tmp.string());
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      out.flush();
      if (!out) throw Error("short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("cannot publish " + path.string() + ": " + ec.message());
  }

  std::filesystem::path state_dir_;
  Clock& clock_;
  RepoOptions options_;
  mutable std::mutex mutex_;
  std::map<std::string, Entry> tasks_;
  std::map<std::string, std::string> claims_;  // claim id → task id, all ever issued
  std::uint64_t next_seq_ = 1;
  std::uint64_t next_claim_ = 1;
};

// ---------------------------------------------------------------------------
// Client interface
// ---------------------------------------------------------------------------

/// What the pilot needs from a repository, whether in-process or remote.
class TaskRepoClient {
 public:
  virtual ~TaskRepoClient() = default;
  virtual std::optional<ClaimTicket> acquire_task(const PilotDescriptor& pilot) = 0;
  virtual std::string fetch_input(const std::string& task_id,
                                  const std::string& source) = 0;
  virtual void upload_output(const std::string& claim_id, const std::string& task_id,
                             const std::string& name, const std::string& bytes) = 0;
  virtual void report_completion(const std::string& claim_id, const ExitReport& report,
                                 const std::vector<std::string>& missing_outputs) = 0;
  virtual void report_failure(const std::string& claim_id, const std::string& reason) = 0;
};

class InProcRepoClient : public TaskRepoClient {
 public:
  explicit InProcRepoClient(RepoCore& core) : core_(core) {}

  std::optional<ClaimTicket> acquire_task(const PilotDescriptor& pilot) override {
    return core_.acquire(pilot);
  }
  std::string fetch_input(const std::string& task_id, const std::string& source) override {
    return core_.get_input(task_id, source);
  }
  void upload_output(const std::string& claim_id, const std::string&,
                     const std::string& name, const std::string& bytes) override {
    core_.put_output(claim_id, name, bytes);
  }
  void report_completion(const std::string& claim_id, const ExitReport& report,
                         const std::vector<std::string>& missing_outputs) override {
    core_.complete_claim(claim_id, report, missing_outputs);
  }
  void report_failure(const std::string& claim_id, const std::string& reason) override {
    core_.fail_claim(claim_id, reason);
  }

 private:
  RepoCore& core_;
};

// ---------------------------------------------------------------------------
// Staging and collection
// ---------------------------------------------------------------------------

namespace detail {

inline std::filesystem::path staging_spool_path() {
  static std::atomic<std::uint64_t> counter{0};
  return std::filesystem::temp_directory_path() /
         ("podpilot-spool-" + std::to_string(::getpid()) + "-" +
          std::to_string(counter.fetch_add(1)));
}

inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& bytes) {
  std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".staging";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StagingError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw StagingError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw StagingError("cannot stage " + path.string() + ": " + ec.message());
}

}  // namespace detail

/// Fetches every declared input under `dest_dir`. Archives flagged for
/// unpacking are spooled outside dest_dir, validated entirely, and only
/// then extracted, so a hostile archive leaves the staging area untouched.
/// Returns the relative paths now present (archive members for unpacked
/// inputs, the file name otherwise).
inline std::vector<std::string> stage_inputs(TaskRepoClient& client,
                                             const ClaimTicket& ticket,
                                             const std::filesystem::path& dest_dir) {
  std::vector<std::string> staged;
  for (const auto& input : ticket.task.input_files) {
    if (!is_safe_relative_path(input.name)) {
      throw StagingError("input name '" + input.name + "' is not a safe relative path");
    }
    const std::string bytes = client.fetch_input(ticket.task.task_id, input.source);
    if (input.unpack) {
      const std::filesystem::path spool = detail::staging_spool_path();
      std::filesystem::create_directories(spool);
      const std::filesystem::path archive = spool / std::filesystem::path(input.name).filename();
      try {
        detail::write_file_atomic(archive, bytes);
        std::vector<std::string> members = extract_archive(archive, dest_dir);
        staged.insert(staged.end(), members.begin(), members.end());
      } catch (...) {
        std::error_code ec;
        std::filesystem::remove_all(spool, ec);
        throw;
      }
      std::error_code ec;
      std::filesystem::remove_all(spool, ec);
    } else {
      detail::write_file_atomic(dest_dir / input.name, bytes);
      staged.push_back(input.name);
    }
  }
  return staged;
}

struct UploadResult {
  std::size_t uploaded = 0;
  std::vector<std::string> missing;

  bool operator==(const UploadResult&) const = default;
};

/// Transfers every declared output found under `base_dir`; declared names
/// with no file behind them are collected, not failed, so the completion
/// report can carry them.
inline UploadResult upload_outputs(TaskRepoClient& client, const ClaimTicket& ticket,
                                   const std::filesystem::path& base_dir) {
  UploadResult result;
  for (const auto& name : ticket.task.output_files) {
    const std::filesystem::path path = base_dir / name;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      result.missing.push_back(name);
      continue;
    }
    const std::string bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    client.upload_output(ticket.claim_id, ticket.task.task_id, name, bytes);
    result.uploaded += 1;
  }
  return result;
}

}  // namespace podpilot
