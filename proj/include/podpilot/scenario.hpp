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
// Text scenarios for the simulator. A scenario is a line-oriented file:
//
//   # full lifecycle across three images
//   poll-ms 100
//   max-tasks 3
//   task id=t1 image=registry.example/sweep:1 exit=0 duration=400
//   task id=t2 image=registry.example/sweep:2 exit=3 subprocs=2
//   task id=t3 image=registry.example/sweep:3 hang wall-limit-s=2
//
// Option lines: poll-ms, pull-ms, pull-retry-ms, idle-timeout-s,
// bind-timeout-s, max-tasks, mode (table|real), epoch. Task lines take
// key=value pairs (id, image, exit, duration, subprocs, rss, wall-limit-s,
// proc-limit, mem-limit, pull=fail|fail:N, command="...", output=name) and
// bare flags (hang, kill-resistant, no-report). Lines starting with '#'
// and blank lines are skipped.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "podpilot/engine.hpp"
#include "podpilot/error.hpp"
#include "podpilot/model.hpp"
#include "podpilot/podspec.hpp"
#include "podpilot/simcluster.hpp"
#include "podpilot/taskrepo.hpp"

namespace podpilot {

struct ScenarioTask {
  TaskSpec task;
  PayloadBehavior behavior;
  std::string pull;  // "", "fail", or "fail:N"
};

struct Scenario {
  std::uint32_t poll_ms = 100;
  std::uint32_t pull_ms = 400;
  std::uint32_t pull_retry_ms = 800;
  std::uint32_t idle_timeout_s = 5;
  std::uint32_t bind_timeout_s = 30;
  std::optional<std::uint32_t> max_tasks;  // defaults to the task count
  bool real_mode = false;
  std::int64_t epoch_seconds = 1700000000;
  std::vector<ScenarioTask> tasks;
};

namespace detail {

/// Splits a line into tokens; double quotes keep spaces inside a token and
/// are stripped (`command="echo hi"` tokenizes to `command=echo hi`).
inline std::vector<std::string> tokenize_scenario_line(const std::string& line,
                                                       std::size_t line_no) {
  std::vector<std::string> tokens;
  std::string current;
  bool in_token = false;
  bool in_quotes = false;
  for (const char c : line) {
    if (c == '"') {
      in_quotes = !in_quotes;
      in_token = true;
      continue;
    }
    if (!in_quotes && (c == ' ' || c == '\t')) {
      if (in_token) tokens.push_back(std::move(current));
      current.clear();
      in_token = false;
      continue;
    }
    current += c;
    in_token = true;
  }
  if (in_quotes) {
    throw ParseError("scenario line " + std::to_string(line_no) + ": unclosed quote");
  }
  if (in_token) tokens.push_back(std::move(current));
  return tokens;
}

inline std::uint64_t parse_scenario_number(const std::string& value,
                                           const std::string& what,
                                           std::size_t line_no) {
  if (value.empty() ||
      value.find_first_not_of("0123456789") != std::string::npos) {
    throw ParseError("scenario line " + std::to_string(line_no) + ": " + what +
                     " needs a nonnegative integer, got '" + value + "'");
  }
  return std::stoull(value);
}

inline ScenarioTask parse_scenario_task(const std::vector<std::string>& tokens,
                                        std::size_t line_no) {
  ScenarioTask entry;
  std::optional<int> exit_code;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const std::string& token = tokens[i];
    const std::size_t eq = token.find('=');
    if (eq == std::string::npos) {
      if (token == "hang") {
        entry.behavior.hang = true;
      } else if (token == "kill-resistant") {
        entry.behavior.kill_resistant = true;
        entry.behavior.hang = true;
      } else if (token == "no-report") {
        entry.behavior.write_report = false;
      } else {
        throw ParseError("scenario line " + std::to_string(line_no) +
                         ": unknown task flag '" + token + "'");
      }
      continue;
    }
    const std::string key = token.substr(0, eq);
    const std::string value = token.substr(eq + 1);
    if (key == "id") {
      entry.task.task_id = value;
    } else if (key == "image") {
      entry.task.image = value;
    } else if (key == "exit") {
      exit_code = static_cast<int>(parse_scenario_number(value, "exit", line_no));
    } else if (key == "duration") {
      entry.behavior.duration_ms =
          static_cast<std::uint32_t>(parse_scenario_number(value, "duration", line_no));
    } else if (key == "subprocs") {
      entry.behavior.subprocesses =
          static_cast<std::uint32_t>(parse_scenario_number(value, "subprocs", line_no));
    } else if (key == "rss") {
      entry.behavior.rss_bytes = parse_scenario_number(value, "rss", line_no);
    } else if (key == "wall-limit-s") {
      entry.task.limits.max_wall_seconds =
          parse_scenario_number(value, "wall-limit-s", line_no);
    } else if (key == "proc-limit") {
      entry.task.limits.max_processes =
          parse_scenario_number(value, "proc-limit", line_no);
    } else if (key == "mem-limit") {
      entry.task.limits.max_memory_bytes =
          parse_scenario_number(value, "mem-limit", line_no);
    } else if (key == "pull") {
      if (value != "fail" && value.rfind("fail:", 0) != 0) {
        throw ParseError("scenario line " + std::to_string(line_no) +
                         ": pull must be fail or fail:N");
      }
      entry.pull = value;
    } else if (key == "command") {
      entry.task.command = "/bin/sh";
      entry.task.args = {"-c", value};
    } else if (key == "output") {
      entry.task.output_files.push_back(value);
    } else {
      throw ParseError("scenario line " + std::to_string(line_no) +
                       ": unknown task key '" + key + "'");
    }
  }
  if (entry.task.task_id.empty()) {
    throw ParseError("scenario line " + std::to_string(line_no) + ": task needs id=");
  }
  if (entry.task.image.empty()) {
    entry.task.image = "registry.example/tasks/" + entry.task.task_id + ":1";
  }
  if (entry.task.command.empty()) {
    entry.task.command = "/bin/sh";
    entry.task.args = {"-c", "exit " + std::to_string(exit_code.value_or(0))};
  }
  entry.behavior.task_id = entry.task.task_id;
  entry.behavior.image = entry.task.image;
  if (exit_code) entry.behavior.exit_code = *exit_code;
  return entry;
}

}  // namespace detail

inline Scenario parse_scenario(const std::string& text) {
  Scenario scenario;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto tokens = detail::tokenize_scenario_line(line, line_no);
    if (tokens.empty()) continue;
    const std::string& head = tokens[0];
    if (head == "task") {
      scenario.tasks.push_back(detail::parse_scenario_task(tokens, line_no));
      continue;
    }
    if (tokens.size() != 2) {
      throw ParseError("scenario line " + std::to_string(line_no) + ": '" + head +
                       "' takes exactly one value");
    }
    const std::string& value = tokens[1];
    if (head == "poll-ms") {
      scenario.poll_ms =
          static_cast<std::uint32_t>(detail::parse_scenario_number(value, head, line_no));
    } else if (head == "pull-ms") {
      scenario.pull_ms =
          static_cast<std::uint32_t>(detail::parse_scenario_number(value, head, line_no));
    } else if (head == "pull-retry-ms") {
      scenario.pull_retry_ms =
          static_cast<std::uint32_t>(detail::parse_scenario_number(value, head, line_no));
    } else if (head == "idle-timeout-s") {
      scenario.idle_timeout_s =
          static_cast<std::uint32_t>(detail::parse_scenario_number(value, head, line_no));
    } else if (head == "bind-timeout-s") {
      scenario.bind_timeout_s =
          static_cast<std::uint32_t>(detail::parse_scenario_number(value, head, line_no));
    } else if (head == "max-tasks") {
      scenario.max_tasks =
          static_cast<std::uint32_t>(detail::parse_scenario_number(value, head, line_no));
    } else if (head == "epoch") {
      scenario.epoch_seconds =
          static_cast<std::int64_t>(detail::parse_scenario_number(value, head, line_no));
    } else if (head == "mode") {
      if (value == "table") {
        scenario.real_mode = false;
      } else if (value == "real") {
        scenario.real_mode = true;
      } else {
        throw ParseError("scenario line " + std::to_string(line_no) +
                         ": mode must be table or real");
      }
    } else {
      throw ParseError("scenario line " + std::to_string(line_no) +
                       ": unknown option '" + head + "'");
    }
  }
  return scenario;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read scenario file '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  return parse_scenario(text);
}

// ---------------------------------------------------------------------------
// Simulated world assembly
// ---------------------------------------------------------------------------

/// Owns one simulated pod plus the adapters the pilot needs, with the
/// shared and private volumes rehomed into a throwaway scratch directory.
class SimWorld {
 public:
  static constexpr const char* kPilotImage = "registry.example/podpilot:dev";

  explicit SimWorld(PilotConfig config = {}, SimOptions options = {})
      : scratch_("podpilot-sim") {
    config.shared_dir = (scratch_.path() / "shared").string();
    config.private_dir = (scratch_.path() / "private").string();
    config_ = std::move(config);
    blueprint_ = build_pod_blueprint(config_, kPilotImage);
    pod_ = std::make_unique<SimPod>(blueprint_, config_, options);
    clock_ = std::make_unique<SimDrivingClock>(*pod_);
    gateway_ = std::make_unique<SimGateway>(*pod_, *clock_);
    table_ = std::make_unique<SimProcessTable>(*pod_);
  }

  const ScratchDir& scratch() const { return scratch_; }
  const PilotConfig& config() const { return config_; }
  const PodBlueprint& blueprint() const { return blueprint_; }
  SimPod& pod() { return *pod_; }
  SimDrivingClock& clock() { return *clock_; }
  SimGateway& gateway() { return *gateway_; }
  SimProcessTable& table() { return *table_; }

 private:
  ScratchDir scratch_;
  PilotConfig config_;
  PodBlueprint blueprint_;
  std::unique_ptr<SimPod> pod_;
  std::unique_ptr<SimDrivingClock> clock_;
  std::unique_ptr<SimGateway> gateway_;
  std::unique_ptr<SimProcessTable> table_;
};

struct ScenarioResult {
  PilotOutcome outcome;
  std::vector<SimEvent> trace;
  std::map<std::string, std::string> task_states;
  std::vector<std::string> log_lines;
};

inline PilotConfig scenario_pilot_config(const Scenario& scenario) {
  PilotConfig config;
  config.poll_interval_ms = scenario.poll_ms;
  config.bind_timeout_seconds = scenario.bind_timeout_s;
  config.idle_timeout_seconds = scenario.idle_timeout_s;
  if (scenario.max_tasks) {
    config.max_tasks = scenario.max_tasks;
  } else if (!scenario.tasks.empty()) {
    config.max_tasks = static_cast<std::uint32_t>(scenario.tasks.size());
  }
  if (scenario.real_mode && ::geteuid() != 0) {
    // Without root there is no way to drop privileges, so the payload runs
    // as the pilot's own uid and the wrapper takes its direct-exec path.
    config.payload_uid = static_cast<std::uint32_t>(::geteuid());
  }
  return config;
}

inline SimOptions scenario_sim_options(const Scenario& scenario) {
  SimOptions options;
  options.pull_latency_ms = scenario.pull_ms;
  options.pull_retry_ms = scenario.pull_retry_ms;
  options.real_process_mode = scenario.real_mode;
  options.epoch_seconds = scenario.epoch_seconds;
  return options;
}

inline void apply_scenario_behaviors(const Scenario& scenario, SimWorld& world) {
  for (const auto& entry : scenario.tasks) {
    world.pod().set_behavior(entry.behavior);
    if (entry.pull == "fail") {
      world.pod().set_pull_policy(world.config().payload_container_name,
                                  entry.task.image, PullPolicy::fail_always());
    } else if (entry.pull.rfind("fail:", 0) == 0) {
      const std::uint32_t n = static_cast<std::uint32_t>(
          detail::parse_scenario_number(entry.pull.substr(5), "pull", 0));
      world.pod().set_pull_policy(world.config().payload_container_name,
                                  entry.task.image, PullPolicy::fail_n_times(n));
    }
  }
}

/// Runs a full pilot lifecycle against a fresh simulated pod and the given
/// repository client. The caller owns task submission.
inline ScenarioResult run_scenario_against(const Scenario& scenario,
                                           TaskRepoClient& client,
                                           std::function<void(const std::string&)> log = {}) {
  SimWorld world(scenario_pilot_config(scenario), scenario_sim_options(scenario));
  apply_scenario_behaviors(scenario, world);
  ScenarioResult result;
  RunHooks hooks;
  hooks.on_log = [&result, &log](const std::string& line) {
    result.log_lines.push_back(line);
    if (log) log(line);
  };
  result.outcome = run_pilot(world.config(), world.gateway(), client, world.table(),
                             world.clock(), hooks);
  result.trace = world.pod().trace();
  return result;
}

/// Runs a full pilot lifecycle against a fresh simulated pod and an
/// in-process repository seeded with the scenario's tasks.
inline ScenarioResult run_scenario(const Scenario& scenario,
                                   std::function<void(const std::string&)> log = {}) {
  SimWorld world(scenario_pilot_config(scenario), scenario_sim_options(scenario));
  apply_scenario_behaviors(scenario, world);
  RepoCore repo(world.scratch().path() / "repo", world.clock());
  InProcRepoClient client(repo);
  for (const auto& entry : scenario.tasks) repo.submit_task(entry.task);

  ScenarioResult result;
  RunHooks hooks;
  hooks.on_log = [&result, &log](const std::string& line) {
    result.log_lines.push_back(line);
    if (log) log(line);
  };
  result.outcome = run_pilot(world.config(), world.gateway(), client, world.table(),
                             world.clock(), hooks);
  result.trace = world.pod().trace();
  for (const auto& id : repo.task_ids()) {
    result.task_states[id] = repo.task_state(id);
  }
  return result;
}

}  // namespace podpilot
