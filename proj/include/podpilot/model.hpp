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

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "podpilot/error.hpp"

namespace podpilot {

// ---------------------------------------------------------------------------
// Path and identifier hygiene
// ---------------------------------------------------------------------------

/// True when `path` is relative, non-empty, and contains no upward traversal
/// segment. Used for task input/output names and archive entries.
inline bool is_safe_relative_path(std::string_view path) {
  if (path.empty() || path.front() == '/' || path.find('\0') != std::string_view::npos) {
    return false;
  }
  std::size_t start = 0;
  while (start <= path.size()) {
    const std::size_t slash = path.find('/', start);
    const std::string_view seg =
        path.substr(start, slash == std::string_view::npos ? path.size() - start
                                                           : slash - start);
    if (seg == "..") return false;
    if (slash == std::string_view::npos) break;
    start = slash + 1;
  }
  return true;
}

/// Archive suffixes the staging pipeline knows how to unpack.
inline bool is_recognized_archive_name(std::string_view name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() > suffix.size() &&
           name.substr(name.size() - suffix.size()) == suffix;
  };
  return ends_with(".tar") || ends_with(".tar.gz") || ends_with(".tgz") ||
         ends_with(".zip");
}

// ---------------------------------------------------------------------------
// Task payload description
// ---------------------------------------------------------------------------

struct ResourceLimits {
  std::optional<std::uint64_t> max_memory_bytes;
  std::optional<std::uint64_t> max_processes;
  std::optional<std::uint64_t> max_wall_seconds;

  bool operator==(const ResourceLimits&) const = default;
};

struct InputFile {
  std::string name;    // destination path, relative to the staging dir
  std::string source;  // repository-relative fetch locator
  bool unpack = false;

  bool operator==(const InputFile&) const = default;
};

struct TaskSpec {
  std::string task_id;
  std::string image;
  std::string command;
  std::vector<std::string> args;
  std::map<std::string, std::string> env;
  // Key/value requirements the claiming pilot's capabilities must satisfy
  // with exact string matches.
  std::map<std::string, std::string> requirements;
  std::vector<InputFile> input_files;
  std::vector<std::string> output_files;
  ResourceLimits limits;
  std::uint32_t lease_seconds = 600;

  bool operator==(const TaskSpec&) const = default;
};

/// Returns every invariant violation, empty when the spec is well formed.
inline std::vector<std::string> validate(const TaskSpec& task) {
  std::vector<std::string> problems;
  if (task.task_id.empty()) problems.push_back("task id must be nonempty");
  if (task.image.empty()) problems.push_back("image reference must be nonempty");
  if (task.command.empty()) problems.push_back("command must be nonempty");
  if (task.lease_seconds == 0) problems.push_back("lease seconds must be positive");
  for (const auto& in : task.input_files) {
    if (!is_safe_relative_path(in.name)) {
      problems.push_back("input name '" + in.name + "' is not a safe relative path");
    }
    if (in.unpack && !is_recognized_archive_name(in.name)) {
      problems.push_back("input '" + in.name + "' requests unpack but is not a recognized archive");
    }
  }
  for (const auto& out : task.output_files) {
    if (!is_safe_relative_path(out)) {
      problems.push_back("output name '" + out + "' is not a safe relative path");
    }
  }
  auto positive = [&](const std::optional<std::uint64_t>& v, const char* what) {
    if (v && *v == 0) problems.push_back(std::string(what) + " must be positive");
  };
  positive(task.limits.max_memory_bytes, "memory limit");
  positive(task.limits.max_processes, "process limit");
  positive(task.limits.max_wall_seconds, "wall limit");
  return problems;
}

inline void ensure_valid(const TaskSpec& task) {
  const auto problems = validate(task);
  if (!problems.empty()) throw ConfigError(problems.front());
}

// ---------------------------------------------------------------------------
// Pilot configuration
// ---------------------------------------------------------------------------

struct PilotConfig {
  std::string pod_name = "pilot-pod";
  std::string namespace_ = "default";
  std::string payload_container_name = "payload";
  std::string pilot_container_name = "pilot";
  std::string parking_image = "busybox:stable";
  std::string shared_dir = "/shared";
  std::string private_dir = "/private";
  std::string control_subdir = ".pilot";
  std::uint32_t payload_uid = 64000;
  // Symbolic alias for payload_uid; process tables may resolve numeric ids
  // to names, so uid comparisons accept either form.
  std::string payload_user = "payload";
  std::uint32_t pause_uid = 65535;
  std::uint32_t poll_interval_ms = 500;
  std::uint32_t bind_timeout_seconds = 300;
  std::optional<std::uint32_t> max_tasks;
  std::uint32_t idle_timeout_seconds = 300;
  std::string repo_endpoint;
  std::string service_account = "default";
  // Optional setuid helper the pilot ships onto the shared volume for
  // images whose shell lacks a user-switch utility.
  std::string privdrop_helper;
  // Advertised when claiming tasks; a task is eligible only if every one of
  // its requirement pairs appears here verbatim.
  std::map<std::string, std::string> capabilities;

  bool operator==(const PilotConfig&) const = default;
};

namespace detail {

/// Splits an absolute path into its components, ignoring duplicate slashes.
inline std::vector<std::string> path_components(std::string_view path) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < path.size()) {
    const std::size_t slash = path.find('/', start);
    const std::size_t end = slash == std::string_view::npos ? path.size() : slash;
    if (end > start) out.emplace_back(path.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

inline bool is_path_prefix(std::string_view a, std::string_view b) {
  const auto ca = path_components(a);
  const auto cb = path_components(b);
  if (ca.size() > cb.size()) return false;
  for (std::size_t i = 0; i < ca.size(); ++i) {
    if (ca[i] != cb[i]) return false;
  }
  return true;
}

}  // namespace detail

inline std::vector<std::string> validate(const PilotConfig& config) {
  std::vector<std::string> problems;
  if (config.payload_uid == 0) problems.push_back("payload uid must be nonzero");
  if (config.parking_image.empty()) problems.push_back("parking image must be nonempty");
  if (config.pod_name.empty()) problems.push_back("pod name must be nonempty");
  if (config.namespace_.empty()) problems.push_back("namespace must be nonempty");
  if (config.payload_container_name.empty() || config.pilot_container_name.empty()) {
    problems.push_back("container names must be nonempty");
  }
  if (config.payload_container_name == config.pilot_container_name) {
    problems.push_back("pilot and payload containers must have distinct names");
  }
  if (config.shared_dir.empty() || config.shared_dir.front() != '/') {
    problems.push_back("shared dir must be an absolute path");
  }
  if (config.private_dir.empty() || config.private_dir.front() != '/') {
    problems.push_back("private dir must be an absolute path");
  }
  if (!problems.empty()) return problems;
  if (detail::is_path_prefix(config.shared_dir, config.private_dir) ||
      detail::is_path_prefix(config.private_dir, config.shared_dir)) {
    problems.push_back("shared dir and private dir must be disjoint");
  }
  if (!is_safe_relative_path(config.control_subdir)) {
    problems.push_back("control subdir must be a safe relative path");
  }
  if (config.poll_interval_ms == 0) problems.push_back("poll interval must be positive");
  if (config.bind_timeout_seconds == 0) problems.push_back("bind timeout must be positive");
  if (config.idle_timeout_seconds == 0) problems.push_back("idle timeout must be positive");
  if (config.max_tasks && *config.max_tasks == 0) problems.push_back("max tasks must be positive");
  return problems;
}

inline void ensure_valid(const PilotConfig& config) {
  const auto problems = validate(config);
  if (!problems.empty()) throw ConfigError(problems.front());
}

// ---------------------------------------------------------------------------
// Completion record and process table rows
// ---------------------------------------------------------------------------

struct ExitReport {
  std::string task_id;
  int exit_code = 0;  // one octet, the portable shell exit status range
  std::int64_t started_at = 0;
  std::int64_t finished_at = 0;

  bool operator==(const ExitReport&) const = default;
};

inline std::vector<std::string> validate(const ExitReport& report) {
  std::vector<std::string> problems;
  if (report.task_id.empty()) problems.push_back("task_id must be nonempty");
  if (report.exit_code < 0 || report.exit_code > 255) {
    problems.push_back("exit_code out of range [0,255]");
  }
  if (report.finished_at < report.started_at) {
    problems.push_back("finished_at must not precede started_at");
  }
  return problems;
}

inline void ensure_valid(const ExitReport& report) {
  const auto problems = validate(report);
  if (!problems.empty()) throw ConfigError(problems.front());
}

/// One row of the pod-wide process table. `uid` stays textual because
/// providers may resolve numeric ids to symbolic names.
struct ProcessRecord {
  std::string uid;
  int pid = 0;
  int ppid = 0;
  std::string cmd;
  std::uint64_t rss_bytes = 0;

  bool operator==(const ProcessRecord&) const = default;
};

/// Matches a process-table uid against a numeric id and/or symbolic alias.
struct UidMatcher {
  std::optional<std::uint32_t> numeric;
  std::string symbolic;

  static UidMatcher of(std::uint32_t uid, std::string alias = "") {
    return UidMatcher{uid, std::move(alias)};
  }
  static UidMatcher name(std::string alias) {
    return UidMatcher{std::nullopt, std::move(alias)};
  }

  bool matches(std::string_view uid) const {
    if (!symbolic.empty() && uid == symbolic) return true;
    if (numeric) {
      // Compare digits without allocating.
      std::uint32_t value = 0;
      if (uid.empty() || uid.size() > 10) return false;
      for (const char c : uid) {
        if (c < '0' || c > '9') return false;
        value = value * 10 + static_cast<std::uint32_t>(c - '0');
      }
      return value == *numeric;
    }
    return false;
  }

  bool operator==(const UidMatcher&) const = default;
};

// ---------------------------------------------------------------------------
// Lifecycle phases
// ---------------------------------------------------------------------------

enum class PilotPhase {
  Validate,
  Fetch,
  Bind,
  Stage,
  Run,
  Collect,
  Cleanup,
  Drain,
  Terminated,
};

inline const char* to_string(PilotPhase phase) {
  switch (phase) {
    case PilotPhase::Validate: return "Validate";
    case PilotPhase::Fetch: return "Fetch";
    case PilotPhase::Bind: return "Bind";
    case PilotPhase::Stage: return "Stage";
    case PilotPhase::Run: return "Run";
    case PilotPhase::Collect: return "Collect";
    case PilotPhase::Cleanup: return "Cleanup";
    case PilotPhase::Drain: return "Drain";
    case PilotPhase::Terminated: return "Terminated";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Canonical JSON encodings
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ResourceLimits& v) {
  j = nlohmann::json::object();
  if (v.max_memory_bytes) j["max_memory_bytes"] = *v.max_memory_bytes;
  if (v.max_processes) j["max_processes"] = *v.max_processes;
  if (v.max_wall_seconds) j["max_wall_seconds"] = *v.max_wall_seconds;
}

inline void from_json(const nlohmann::json& j, ResourceLimits& v) {
  v = ResourceLimits{};
  if (j.contains("max_memory_bytes")) v.max_memory_bytes = j.at("max_memory_bytes").get<std::uint64_t>();
  if (j.contains("max_processes")) v.max_processes = j.at("max_processes").get<std::uint64_t>();
  if (j.contains("max_wall_seconds")) v.max_wall_seconds = j.at("max_wall_seconds").get<std::uint64_t>();
}

inline void to_json(nlohmann::json& j, const InputFile& v) {
  j = {{"name", v.name}, {"source", v.source}, {"unpack", v.unpack}};
}

inline void from_json(const nlohmann::json& j, InputFile& v) {
  v.name = j.at("name").get<std::string>();
  v.source = j.at("source").get<std::string>();
  v.unpack = j.value("unpack", false);
}

inline void to_json(nlohmann::json& j, const TaskSpec& v) {
  j = nlohmann::json{{"task_id", v.task_id},
                     {"image", v.image},
                     {"command", v.command},
                     {"args", v.args},
                     {"env", v.env},
                     {"input_files", v.input_files},
                     {"output_files", v.output_files},
                     {"limits", v.limits},
                     {"lease_seconds", v.lease_seconds}};
  if (!v.requirements.empty()) j["requirements"] = v.requirements;
}

inline void from_json(const nlohmann::json& j, TaskSpec& v) {
  v = TaskSpec{};
  v.task_id = j.at("task_id").get<std::string>();
  v.image = j.at("image").get<std::string>();
  v.command = j.at("command").get<std::string>();
  if (j.contains("args")) v.args = j.at("args").get<std::vector<std::string>>();
  if (j.contains("env")) v.env = j.at("env").get<std::map<std::string, std::string>>();
  if (j.contains("requirements")) {
    v.requirements = j.at("requirements").get<std::map<std::string, std::string>>();
  }
  if (j.contains("input_files")) v.input_files = j.at("input_files").get<std::vector<InputFile>>();
  if (j.contains("output_files")) v.output_files = j.at("output_files").get<std::vector<std::string>>();
  if (j.contains("limits")) v.limits = j.at("limits").get<ResourceLimits>();
  v.lease_seconds = j.value("lease_seconds", 600u);
}

inline void to_json(nlohmann::json& j, const PilotConfig& v) {
  j = nlohmann::json{{"pod_name", v.pod_name},
                     {"namespace", v.namespace_},
                     {"payload_container_name", v.payload_container_name},
                     {"pilot_container_name", v.pilot_container_name},
                     {"parking_image", v.parking_image},
                     {"shared_dir", v.shared_dir},
                     {"private_dir", v.private_dir},
                     {"control_subdir", v.control_subdir},
                     {"payload_uid", v.payload_uid},
                     {"payload_user", v.payload_user},
                     {"pause_uid", v.pause_uid},
                     {"poll_interval_ms", v.poll_interval_ms},
                     {"bind_timeout_seconds", v.bind_timeout_seconds},
                     {"idle_timeout_seconds", v.idle_timeout_seconds},
                     {"repo_endpoint", v.repo_endpoint},
                     {"service_account", v.service_account}};
  if (v.max_tasks) j["max_tasks"] = *v.max_tasks;
  if (!v.privdrop_helper.empty()) j["privdrop_helper"] = v.privdrop_helper;
  if (!v.capabilities.empty()) j["capabilities"] = v.capabilities;
}

inline void from_json(const nlohmann::json& j, PilotConfig& v) {
  const PilotConfig defaults;
  v = defaults;
  v.pod_name = j.value("pod_name", defaults.pod_name);
  v.namespace_ = j.value("namespace", defaults.namespace_);
  v.payload_container_name = j.value("payload_container_name", defaults.payload_container_name);
  v.pilot_container_name = j.value("pilot_container_name", defaults.pilot_container_name);
  v.parking_image = j.value("parking_image", defaults.parking_image);
  v.shared_dir = j.value("shared_dir", defaults.shared_dir);
  v.private_dir = j.value("private_dir", defaults.private_dir);
  v.control_subdir = j.value("control_subdir", defaults.control_subdir);
  v.payload_uid = j.value("payload_uid", defaults.payload_uid);
  v.payload_user = j.value("payload_user", defaults.payload_user);
  v.pause_uid = j.value("pause_uid", defaults.pause_uid);
  v.poll_interval_ms = j.value("poll_interval_ms", defaults.poll_interval_ms);
  v.bind_timeout_seconds = j.value("bind_timeout_seconds", defaults.bind_timeout_seconds);
  v.idle_timeout_seconds = j.value("idle_timeout_seconds", defaults.idle_timeout_seconds);
  v.repo_endpoint = j.value("repo_endpoint", defaults.repo_endpoint);
  v.service_account = j.value("service_account", defaults.service_account);
  if (j.contains("max_tasks")) v.max_tasks = j.at("max_tasks").get<std::uint32_t>();
  v.privdrop_helper = j.value("privdrop_helper", defaults.privdrop_helper);
  if (j.contains("capabilities")) {
    v.capabilities = j.at("capabilities").get<std::map<std::string, std::string>>();
  }
}

inline void to_json(nlohmann::json& j, const ExitReport& v) {
  j = {{"task_id", v.task_id},
       {"exit_code", v.exit_code},
       {"started_at", v.started_at},
       {"finished_at", v.finished_at}};
}

inline void from_json(const nlohmann::json& j, ExitReport& v) {
  v.task_id = j.at("task_id").get<std::string>();
  v.exit_code = j.at("exit_code").get<int>();
  v.started_at = j.at("started_at").get<std::int64_t>();
  v.finished_at = j.at("finished_at").get<std::int64_t>();
}

/// Parses a PilotConfig from its canonical JSON text, applying defaults to
/// absent fields and rejecting invariant violations.
inline PilotConfig parse_pilot_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  PilotConfig config;
  try {
    config = j.get<PilotConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  ensure_valid(config);
  return config;
}

}  // namespace podpilot
