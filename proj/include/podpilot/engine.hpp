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
// Pilot lifecycle. The decision core is a pure transition function
// step(phase, event, ctx) -> (phase', actions); the orchestrator around it
// observes the world (claims, container status, process table, report
// files), feeds events in, and executes the returned actions. Everything a
// test wants to assert lives in the pure part or in the recorded
// transitions.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <sys/stat.h>

#include "podpilot/clock.hpp"
#include "podpilot/cluster.hpp"
#include "podpilot/error.hpp"
#include "podpilot/model.hpp"
#include "podpilot/monitor.hpp"
#include "podpilot/taskrepo.hpp"
#include "podpilot/wrapper.hpp"

namespace podpilot {

// ---------------------------------------------------------------------------
// Events and actions
// ---------------------------------------------------------------------------

enum class EngineEventKind {
  ValidationOk,
  ValidationFailed,
  TaskClaimed,
  NoTask,
  ContainerRunning,
  BindTimeout,
  StagingDone,
  StagingFailed,
  PayloadStarted,
  PayloadExited,
  ReportParsed,
  ReportMissing,
  OutputsUploaded,
  LimitBreached,
  Cleaned,
  IdleExpired,
  MaxTasksReached,
};

inline const char* to_string(EngineEventKind kind) {
  switch (kind) {
    case EngineEventKind::ValidationOk: return "ValidationOk";
    case EngineEventKind::ValidationFailed: return "ValidationFailed";
    case EngineEventKind::TaskClaimed: return "TaskClaimed";
    case EngineEventKind::NoTask: return "NoTask";
    case EngineEventKind::ContainerRunning: return "ContainerRunning";
    case EngineEventKind::BindTimeout: return "BindTimeout";
    case EngineEventKind::StagingDone: return "StagingDone";
    case EngineEventKind::StagingFailed: return "StagingFailed";
    case EngineEventKind::PayloadStarted: return "PayloadStarted";
    case EngineEventKind::PayloadExited: return "PayloadExited";
    case EngineEventKind::ReportParsed: return "ReportParsed";
    case EngineEventKind::ReportMissing: return "ReportMissing";
    case EngineEventKind::OutputsUploaded: return "OutputsUploaded";
    case EngineEventKind::LimitBreached: return "LimitBreached";
    case EngineEventKind::Cleaned: return "Cleaned";
    case EngineEventKind::IdleExpired: return "IdleExpired";
    case EngineEventKind::MaxTasksReached: return "MaxTasksReached";
  }
  return "?";
}

struct EngineEvent {
  EngineEventKind kind = EngineEventKind::ValidationOk;
  std::string reason;                        // failure detail where applicable
  std::optional<ClaimTicket> ticket;         // TaskClaimed
  std::optional<ContainerStatus> status;     // ContainerRunning, BindTimeout
  std::optional<ExitReport> report;          // ReportParsed
  std::size_t uploaded_count = 0;            // OutputsUploaded
  std::vector<std::string> missing_outputs;  // OutputsUploaded

  static EngineEvent validation_ok() { return {EngineEventKind::ValidationOk}; }
  static EngineEvent validation_failed(std::string reason) {
    EngineEvent e{EngineEventKind::ValidationFailed};
    e.reason = std::move(reason);
    return e;
  }
  static EngineEvent task_claimed(ClaimTicket ticket) {
    EngineEvent e{EngineEventKind::TaskClaimed};
    e.ticket = std::move(ticket);
    return e;
  }
  static EngineEvent no_task() { return {EngineEventKind::NoTask}; }
  static EngineEvent container_running(ContainerStatus status) {
    EngineEvent e{EngineEventKind::ContainerRunning};
    e.status = std::move(status);
    return e;
  }
  static EngineEvent bind_timeout(ContainerStatus status) {
    EngineEvent e{EngineEventKind::BindTimeout};
    e.status = std::move(status);
    return e;
  }
  static EngineEvent staging_done() { return {EngineEventKind::StagingDone}; }
  static EngineEvent staging_failed(std::string reason) {
    EngineEvent e{EngineEventKind::StagingFailed};
    e.reason = std::move(reason);
    return e;
  }
  static EngineEvent payload_started() { return {EngineEventKind::PayloadStarted}; }
  static EngineEvent payload_exited() { return {EngineEventKind::PayloadExited}; }
  static EngineEvent report_parsed(ExitReport report) {
    EngineEvent e{EngineEventKind::ReportParsed};
    e.report = std::move(report);
    return e;
  }
  static EngineEvent report_missing(std::string reason = "report-missing") {
    EngineEvent e{EngineEventKind::ReportMissing};
    e.reason = std::move(reason);
    return e;
  }
  static EngineEvent outputs_uploaded(std::size_t count, std::vector<std::string> missing) {
    EngineEvent e{EngineEventKind::OutputsUploaded};
    e.uploaded_count = count;
    e.missing_outputs = std::move(missing);
    return e;
  }
  static EngineEvent limit_breached(std::string reason) {
    EngineEvent e{EngineEventKind::LimitBreached};
    e.reason = std::move(reason);
    return e;
  }
  static EngineEvent cleaned() { return {EngineEventKind::Cleaned}; }
  static EngineEvent idle_expired() { return {EngineEventKind::IdleExpired}; }
  static EngineEvent max_tasks_reached() { return {EngineEventKind::MaxTasksReached}; }
};

enum class EngineActionKind {
  PatchImage,
  AwaitRunning,
  StageInputs,
  WriteEnvFile,
  PublishScript,
  StartMonitoring,
  KillPayload,
  ParseReport,
  UploadOutputs,
  ReportCompletion,
  ReportFailure,
  RestartPayload,
  WipeSharedDir,
  AcquireTask,
  SelfTerminate,
};

inline const char* to_string(EngineActionKind kind) {
  switch (kind) {
    case EngineActionKind::PatchImage: return "PatchImage";
    case EngineActionKind::AwaitRunning: return "AwaitRunning";
    case EngineActionKind::StageInputs: return "StageInputs";
    case EngineActionKind::WriteEnvFile: return "WriteEnvFile";
    case EngineActionKind::PublishScript: return "PublishScript";
    case EngineActionKind::StartMonitoring: return "StartMonitoring";
    case EngineActionKind::KillPayload: return "KillPayload";
    case EngineActionKind::ParseReport: return "ParseReport";
    case EngineActionKind::UploadOutputs: return "UploadOutputs";
    case EngineActionKind::ReportCompletion: return "ReportCompletion";
    case EngineActionKind::ReportFailure: return "ReportFailure";
    case EngineActionKind::RestartPayload: return "RestartPayload";
    case EngineActionKind::WipeSharedDir: return "WipeSharedDir";
    case EngineActionKind::AcquireTask: return "AcquireTask";
    case EngineActionKind::SelfTerminate: return "SelfTerminate";
  }
  return "?";
}

struct EngineAction {
  EngineActionKind kind = EngineActionKind::AcquireTask;
  std::string image;                  // PatchImage, AwaitRunning
  std::uint32_t timeout_seconds = 0;  // AwaitRunning
  std::string reason;                 // ReportFailure
  std::optional<ExitReport> report;   // ReportCompletion

  bool operator==(const EngineAction&) const = default;

  static EngineAction patch_image(std::string image) {
    EngineAction a{EngineActionKind::PatchImage};
    a.image = std::move(image);
    return a;
  }
  static EngineAction await_running(std::string image, std::uint32_t timeout_seconds) {
    EngineAction a{EngineActionKind::AwaitRunning};
    a.image = std::move(image);
    a.timeout_seconds = timeout_seconds;
    return a;
  }
  static EngineAction of(EngineActionKind kind) { return EngineAction{kind}; }
  static EngineAction report_completion(ExitReport report) {
    EngineAction a{EngineActionKind::ReportCompletion};
    a.report = std::move(report);
    return a;
  }
  static EngineAction report_failure(std::string reason) {
    EngineAction a{EngineActionKind::ReportFailure};
    a.reason = std::move(reason);
    return a;
  }
};

// ---------------------------------------------------------------------------
// Pure transition function
// ---------------------------------------------------------------------------

/// Mutable slice of pilot state the transition function reads and updates.
struct StepContext {
  std::uint32_t tasks_completed = 0;
  std::uint32_t tasks_failed = 0;
  std::optional<std::uint32_t> max_tasks;
  std::uint32_t bind_timeout_seconds = 300;
  std::optional<ClaimTicket> ticket;        // claim being worked on
  std::optional<ExitReport> report;         // parsed report for that claim
  std::optional<std::string> breach_reason; // set while a limit kill is in flight

  bool max_tasks_reached() const {
    return max_tasks && tasks_completed + tasks_failed >= *max_tasks;
  }
};

struct StepResult {
  PilotPhase phase = PilotPhase::Validate;
  std::vector<EngineAction> actions;

  bool operator==(const StepResult&) const = default;
};

/// The lifecycle table. Throws ProtocolError on an inadmissible
/// (phase, event) pair so a desynchronized orchestrator fails loudly
/// instead of wedging.
inline StepResult step(PilotPhase phase, const EngineEvent& event, StepContext& ctx) {
  using K = EngineEventKind;
  using A = EngineActionKind;
  auto fail_task = [&ctx](std::string reason) {
    ctx.tasks_failed += 1;
    return std::vector<EngineAction>{EngineAction::report_failure(std::move(reason)),
                                     EngineAction::of(A::RestartPayload),
                                     EngineAction::of(A::WipeSharedDir)};
  };

  switch (phase) {
    case PilotPhase::Validate:
      if (event.kind == K::ValidationOk) {
        return {PilotPhase::Fetch, {EngineAction::of(A::AcquireTask)}};
      }
      if (event.kind == K::ValidationFailed) {
        return {PilotPhase::Terminated, {EngineAction::of(A::SelfTerminate)}};
      }
      break;

    case PilotPhase::Fetch:
      if (event.kind == K::TaskClaimed) {
        ctx.ticket = event.ticket;
        ctx.report.reset();
        ctx.breach_reason.reset();
        const std::string& image = ctx.ticket->task.image;
        return {PilotPhase::Bind,
                {EngineAction::patch_image(image),
                 EngineAction::await_running(image, ctx.bind_timeout_seconds)}};
      }
      if (event.kind == K::NoTask) {
        return {PilotPhase::Fetch, {EngineAction::of(A::AcquireTask)}};
      }
      if (event.kind == K::IdleExpired) return {PilotPhase::Drain, {}};
      break;

    case PilotPhase::Bind:
      if (event.kind == K::ContainerRunning) {
        return {PilotPhase::Stage,
                {EngineAction::of(A::StageInputs), EngineAction::of(A::WriteEnvFile),
                 EngineAction::of(A::PublishScript),
                 EngineAction::of(A::StartMonitoring)}};
      }
      if (event.kind == K::BindTimeout) {
        return {PilotPhase::Cleanup, fail_task("bind-timeout")};
      }
      break;

    case PilotPhase::Stage:
      if (event.kind == K::StagingDone) return {PilotPhase::Run, {}};
      if (event.kind == K::StagingFailed) {
        return {PilotPhase::Cleanup, fail_task(event.reason)};
      }
      break;

    case PilotPhase::Run:
      if (event.kind == K::PayloadStarted) return {PilotPhase::Run, {}};
      if (event.kind == K::PayloadExited) {
        return {PilotPhase::Collect, {EngineAction::of(A::ParseReport)}};
      }
      if (event.kind == K::LimitBreached) {
        ctx.breach_reason = event.reason;
        return {PilotPhase::Collect,
                {EngineAction::of(A::KillPayload), EngineAction::of(A::ParseReport)}};
      }
      break;

    case PilotPhase::Collect:
      if (event.kind == K::ReportParsed) {
        ctx.report = event.report;
        if (ctx.breach_reason) {
          // A killed task is a failure with the breach reason; its exit
          // report and any partial outputs are not forwarded.
          return {PilotPhase::Cleanup, fail_task(*ctx.breach_reason)};
        }
        return {PilotPhase::Collect, {EngineAction::of(A::UploadOutputs)}};
      }
      if (event.kind == K::ReportMissing) {
        return {PilotPhase::Cleanup,
                fail_task(ctx.breach_reason
                              ? *ctx.breach_reason
                              : (event.reason.empty() ? "report-missing" : event.reason))};
      }
      if (event.kind == K::OutputsUploaded) {
        if (!ctx.report) {
          throw ProtocolError("outputs uploaded with no parsed report in hand");
        }
        if (ctx.report->exit_code == 0) {
          ctx.tasks_completed += 1;
        } else {
          ctx.tasks_failed += 1;
        }
        return {PilotPhase::Cleanup,
                {EngineAction::report_completion(*ctx.report),
                 EngineAction::of(A::RestartPayload), EngineAction::of(A::WipeSharedDir)}};
      }
      break;

    case PilotPhase::Cleanup:
      if (event.kind == K::Cleaned) {
        if (ctx.max_tasks_reached()) return {PilotPhase::Drain, {}};
        return {PilotPhase::Fetch, {EngineAction::of(A::AcquireTask)}};
      }
      if (event.kind == K::MaxTasksReached) return {PilotPhase::Drain, {}};
      break;

    case PilotPhase::Drain:
      if (event.kind == K::Cleaned) {
        return {PilotPhase::Terminated, {EngineAction::of(A::SelfTerminate)}};
      }
      break;

    case PilotPhase::Terminated:
      break;
  }
  throw ProtocolError(std::string("no transition from phase ") + to_string(phase) +
                      " on event " + to_string(event.kind));
}

// ---------------------------------------------------------------------------
// Environment validation
// ---------------------------------------------------------------------------

namespace detail {

inline bool probe_writable(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) return false;
  const std::filesystem::path probe = dir / ".podpilot-probe";
  {
    std::ofstream out(probe, std::ios::trunc);
    if (!out || !(out << "probe").good()) return false;
  }
  std::filesystem::remove(probe, ec);
  return true;
}

}  // namespace detail

/// Startup self-check. Returns the first problem found, or nullopt when the
/// pod looks like the two-container layout the pilot needs.
inline std::optional<std::string> validate_environment(const PilotConfig& config,
                                                       ClusterGateway& gateway,
                                                       ProcessTable& table) {
  if (!detail::probe_writable(config.shared_dir)) return "shared dir not writable";
  if (!detail::probe_writable(config.private_dir)) return "private dir not writable";
  const ControlPaths paths = ControlPaths::for_config(config);
  {
    // Probe only: staging recreates the control dir per task, and the shared
    // volume must stay exactly as found so the first claim starts clean.
    std::error_code ec;
    std::filesystem::create_directories(paths.control_dir(), ec);
    if (ec || !detail::probe_writable(paths.control_dir())) {
      return "control dir not creatable";
    }
    std::filesystem::remove_all(paths.control_dir(), ec);
  }
  try {
    gateway.get_container_status(config.pod_name, config.payload_container_name);
  } catch (const Error& e) {
    return std::string("pod status unavailable: ") + e.what();
  }
  const UidMatcher pause = UidMatcher::of(config.pause_uid);
  const auto records = table.list_processes();
  const bool pause_visible = std::any_of(
      records.begin(), records.end(),
      [&pause](const ProcessRecord& r) { return pause.matches(r.uid); });
  if (!pause_visible) return "process namespace not shared";
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Orchestrator
// ---------------------------------------------------------------------------

/// Final tally the pilot leaves behind.
struct PilotOutcome {
  std::uint32_t tasks_completed = 0;
  std::uint32_t tasks_failed = 0;
  std::string termination_reason;  // idle | max-tasks | validation-failure | external-stop

  bool operator==(const PilotOutcome&) const = default;

  std::string summary() const {
    return "completed:" + std::to_string(tasks_completed) +
           " failed:" + std::to_string(tasks_failed) + " reason:" + termination_reason;
  }
};

inline void to_json(nlohmann::json& j, const PilotOutcome& v) {
  j = {{"tasks_completed", v.tasks_completed},
       {"tasks_failed", v.tasks_failed},
       {"termination_reason", v.termination_reason}};
}

inline void from_json(const nlohmann::json& j, PilotOutcome& v) {
  j.at("tasks_completed").get_to(v.tasks_completed);
  j.at("tasks_failed").get_to(v.tasks_failed);
  j.at("termination_reason").get_to(v.termination_reason);
}

/// Observation points for tests and the CLI's verbose mode.
struct RunHooks {
  std::function<void(PilotPhase from, const EngineEvent& event, PilotPhase to,
                     const std::vector<EngineAction>& actions)>
      on_transition;
  std::function<void(const std::string&)> on_log;
  std::atomic<bool>* stop_flag = nullptr;  // external-stop request
};

class PilotOrchestrator {
 public:
  PilotOrchestrator(PilotConfig config, ClusterGateway& gateway, TaskRepoClient& repo,
                    ProcessTable& table, Clock& clock, RunHooks hooks = {})
      : config_(std::move(config)),
        gateway_(gateway),
        repo_(repo),
        table_(table),
        clock_(clock),
        hooks_(std::move(hooks)),
        paths_(ControlPaths::for_config(config_)),
        payload_matcher_(UidMatcher::of(config_.payload_uid, config_.payload_user)) {
    ctx_.max_tasks = config_.max_tasks;
    ctx_.bind_timeout_seconds = config_.bind_timeout_seconds;
    descriptor_.pilot_id = config_.pod_name;
    descriptor_.capabilities = config_.capabilities;
  }

  PilotOutcome run() {
    try {
      const auto problem = validate_environment(config_, gateway_, table_);
      if (problem) {
        log("validation failed: " + *problem);
        reason_ = "validation-failure";
        apply(EngineEvent::validation_failed(*problem));
      } else {
        apply(EngineEvent::validation_ok());
      }
      while (phase_ != PilotPhase::Terminated) {
        check_stop();
        EngineEvent event = pending_.empty() ? synthesize_event() : pop_pending();
        apply(event);
      }
    } catch (const Abort& abort) {
      log("terminating: " + abort.message);
      reason_ = abort.reason;
    }
    PilotOutcome outcome;
    outcome.tasks_completed = ctx_.tasks_completed;
    outcome.tasks_failed = ctx_.tasks_failed;
    outcome.termination_reason = reason_.empty() ? "external-stop" : reason_;
    log("pilot done: " + outcome.summary());
    return outcome;
  }

 private:
  struct Abort {
    std::string reason;
    std::string message;
  };

  void log(const std::string& message) {
    if (hooks_.on_log) hooks_.on_log(message);
  }

  void check_stop() {
    if (hooks_.stop_flag && hooks_.stop_flag->load()) {
      throw Abort{"external-stop", "stop requested"};
    }
  }

  EngineEvent pop_pending() {
    EngineEvent event = std::move(pending_.front());
    pending_.pop_front();
    return event;
  }

  void apply(const EngineEvent& event) {
    const PilotPhase from = phase_;
    StepResult result = step(from, event, ctx_);
    phase_ = result.phase;
    note_reason(event);
    if (hooks_.on_transition) hooks_.on_transition(from, event, phase_, result.actions);
    std::string line = std::string(to_string(from)) + " --" + to_string(event.kind) +
                       "--> " + to_string(phase_) + " [";
    for (std::size_t i = 0; i < result.actions.size(); ++i) {
      if (i > 0) line += ' ';
      line += to_string(result.actions[i].kind);
    }
    line += ']';
    log(line);
    for (const auto& action : result.actions) {
      check_stop();
      if (!execute(action)) break;  // a failure event is queued; drop the rest
    }
  }

  void note_reason(const EngineEvent& event) {
    if (event.kind == EngineEventKind::IdleExpired) reason_ = "idle";
    if (event.kind == EngineEventKind::MaxTasksReached) reason_ = "max-tasks";
    if (event.kind == EngineEventKind::ValidationFailed) reason_ = "validation-failure";
    if (event.kind == EngineEventKind::Cleaned && phase_ == PilotPhase::Drain) {
      reason_ = "max-tasks";
    }
  }

  // Retries transient transport failures with exponential backoff before
  // giving up on the pilot as a whole.
  template <typename F>
  auto with_retries(F&& fn, const char* what) -> decltype(fn()) {
    std::uint32_t delay_ms = 1000;
    for (std::uint32_t attempt = 1;; ++attempt) {
      try {
        return fn();
      } catch (const TransportError& e) {
        if (attempt >= kMaxAttempts) {
          throw Abort{"external-stop",
                      std::string(what) + " failed after " + std::to_string(attempt) +
                          " attempts: " + e.what()};
        }
        log(std::string(what) + " failed (" + e.what() + "), retry in " +
            std::to_string(delay_ms) + "ms");
        clock_.sleep_ms(delay_ms);
        delay_ms = std::min(delay_ms * 2, 30000u);
      } catch (const AuthError& e) {
        throw Abort{"validation-failure", std::string(what) + ": " + e.what()};
      }
    }
  }

  /// Returns false when the action queued a failure event that supersedes
  /// the remaining actions of this step.
  bool execute(const EngineAction& action) {
    switch (action.kind) {
      case EngineActionKind::AcquireTask: return do_acquire();
      case EngineActionKind::PatchImage:
        with_retries(
            [&] {
              gateway_.patch_container_image(config_.pod_name,
                                             config_.payload_container_name, action.image);
            },
            "patch image");
        return true;
      case EngineActionKind::AwaitRunning: return do_await(action);
      case EngineActionKind::StageInputs: return do_stage();
      case EngineActionKind::WriteEnvFile: return do_write_env();
      case EngineActionKind::PublishScript: return do_publish_script();
      case EngineActionKind::StartMonitoring:
        saw_payload_ = false;
        breach_sent_ = false;
        payload_started_at_ms_ = 0;
        return true;
      case EngineActionKind::KillPayload:
        kill_payload(table_, clock_, payload_matcher_, kKillGraceSeconds,
                     config_.poll_interval_ms);
        return true;
      case EngineActionKind::ParseReport: return do_parse_report();
      case EngineActionKind::UploadOutputs: return do_upload_outputs();
      case EngineActionKind::ReportCompletion: return do_report_completion(action);
      case EngineActionKind::ReportFailure: return do_report_failure(action);
      case EngineActionKind::RestartPayload: return do_restart_payload();
      case EngineActionKind::WipeSharedDir: return do_wipe();
      case EngineActionKind::SelfTerminate: return true;
    }
    return true;
  }

  bool do_acquire() {
    auto ticket =
        with_retries([&] { return repo_.acquire_task(descriptor_); }, "acquire task");
    if (ticket) {
      idle_elapsed_ms_ = 0;
      pending_.push_back(EngineEvent::task_claimed(std::move(*ticket)));
      return true;
    }
    if (idle_elapsed_ms_ >= static_cast<std::int64_t>(config_.idle_timeout_seconds) * 1000) {
      pending_.push_back(EngineEvent::idle_expired());
      return true;
    }
    clock_.sleep_ms(config_.poll_interval_ms);
    idle_elapsed_ms_ += config_.poll_interval_ms;
    pending_.push_back(EngineEvent::no_task());
    return true;
  }

  bool do_await(const EngineAction& action) {
    try {
      ContainerStatus status = gateway_.await_container_running(
          config_.pod_name, config_.payload_container_name, action.image,
          action.timeout_seconds);
      pending_.push_back(EngineEvent::container_running(std::move(status)));
    } catch (const AwaitTimeoutError& e) {
      log(std::string("bind timed out: ") + e.what());
      pending_.push_back(EngineEvent::bind_timeout(e.last_status));
    }
    return true;
  }

  void prepare_control_dir() {
    std::filesystem::create_directories(paths_.control_dir());
    ::chmod(paths_.control_dir().c_str(), 0755);
    std::error_code ec;
    std::filesystem::remove(paths_.report_file, ec);
    std::filesystem::remove(paths_.done_marker, ec);
  }

  bool do_stage() {
    try {
      prepare_control_dir();
      stage_inputs(repo_, *ctx_.ticket, config_.shared_dir);
      return true;
    } catch (const AuthError& e) {
      throw Abort{"validation-failure", std::string("staging: ") + e.what()};
    } catch (const Error& e) {
      pending_.push_back(EngineEvent::staging_failed(e.what()));
      return false;
    }
  }

  bool do_write_env() {
    try {
      std::map<std::string, std::string> env = ctx_.ticket->task.env;
      env["PODPILOT_TASK_ID"] = ctx_.ticket->task.task_id;
      write_env_file(paths_, env);
      return true;
    } catch (const Error& e) {
      pending_.push_back(EngineEvent::staging_failed(e.what()));
      return false;
    }
  }

  bool do_publish_script() {
    try {
      publish_startup_script(paths_,
                             generate_startup_script(ctx_.ticket->task, config_, paths_));
      return true;
    } catch (const Error& e) {
      pending_.push_back(EngineEvent::staging_failed(e.what()));
      return false;
    }
  }

  bool do_parse_report() {
    std::ifstream in(paths_.report_file, std::ios::binary);
    if (!in) {
      pending_.push_back(EngineEvent::report_missing("report-missing"));
      return true;
    }
    const std::string text((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    try {
      ExitReport report = parse_exit_report(text);
      if (report.task_id != ctx_.ticket->task.task_id) {
        log("exit report names task '" + report.task_id + "', expected '" +
            ctx_.ticket->task.task_id + "'");
        pending_.push_back(EngineEvent::report_missing("report-mismatch"));
        return true;
      }
      pending_.push_back(EngineEvent::report_parsed(std::move(report)));
    } catch (const ParseError& e) {
      log(std::string("exit report malformed: ") + e.what());
      pending_.push_back(EngineEvent::report_missing("report-malformed"));
    }
    return true;
  }

  bool do_upload_outputs() {
    UploadResult result = with_retries(
        [&] { return upload_outputs(repo_, *ctx_.ticket, config_.shared_dir); },
        "upload outputs");
    last_missing_ = result.missing;
    pending_.push_back(
        EngineEvent::outputs_uploaded(result.uploaded, std::move(result.missing)));
    return true;
  }

  bool do_report_completion(const EngineAction& action) {
    try {
      with_retries(
          [&] {
            repo_.report_completion(ctx_.ticket->claim_id, *action.report, last_missing_);
          },
          "report completion");
    } catch (const ClaimExpiredError& e) {
      log(std::string("completion not recorded: ") + e.what());
    }
    return true;
  }

  bool do_report_failure(const EngineAction& action) {
    if (!ctx_.ticket) return true;
    try {
      with_retries([&] { repo_.report_failure(ctx_.ticket->claim_id, action.reason); },
                   "report failure");
    } catch (const ClaimExpiredError& e) {
      log(std::string("failure not recorded: ") + e.what());
    }
    return true;
  }

  bool do_restart_payload() {
    with_retries(
        [&] {
          gateway_.restart_payload_container(config_.pod_name,
                                             config_.payload_container_name,
                                             config_.parking_image);
        },
        "restart payload");
    try {
      gateway_.await_container_running(config_.pod_name, config_.payload_container_name,
                                       config_.parking_image,
                                       config_.bind_timeout_seconds);
    } catch (const AwaitTimeoutError& e) {
      // A parked container that will not come back shows up as the next
      // bind timing out; the pilot itself keeps going.
      log(std::string("parking image not running yet: ") + e.what());
    }
    return true;
  }

  bool do_wipe() {
    auto snap = snapshot(table_, clock_);
    if (payload_active(snap, payload_matcher_)) {
      kill_payload(table_, clock_, payload_matcher_, kKillGraceSeconds,
                   config_.poll_interval_ms);
    }
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(config_.shared_dir, ec)) {
      std::error_code remove_ec;
      std::filesystem::remove_all(entry.path(), remove_ec);
      if (remove_ec) {
        log("could not remove '" + entry.path().string() + "': " + remove_ec.message());
      }
    }
    return true;
  }

  /// Produces the next event for phases whose actions do not queue one
  /// themselves: staging completion, the run-phase watch loop, and the
  /// housekeeping acknowledgments.
  EngineEvent synthesize_event() {
    switch (phase_) {
      case PilotPhase::Stage:
        return EngineEvent::staging_done();
      case PilotPhase::Run:
        return watch_payload();
      case PilotPhase::Cleanup:
        return ctx_.max_tasks_reached() ? EngineEvent::max_tasks_reached()
                                        : EngineEvent::cleaned();
      case PilotPhase::Drain:
        execute(EngineAction::of(EngineActionKind::WipeSharedDir));
        return EngineEvent::cleaned();
      default:
        throw ProtocolError(std::string("no event source for phase ") +
                            to_string(phase_));
    }
  }

  EngineEvent watch_payload() {
    const ResourceLimits& limits = ctx_.ticket->task.limits;
    for (;;) {
      check_stop();
      const ProcessSnapshot snap = snapshot(table_, clock_);
      const bool active = payload_active(snap, payload_matcher_);
      if (active && !saw_payload_) {
        saw_payload_ = true;
        payload_started_at_ms_ = clock_.now_ms();
        return EngineEvent::payload_started();
      }
      if (active && saw_payload_ && !breach_sent_) {
        UsageSample usage;
        usage.wall_seconds = (clock_.now_ms() - payload_started_at_ms_) / 1000;
        const auto actions = enforce(snap, payload_matcher_, limits, usage);
        if (!actions.empty()) {
          breach_sent_ = true;
          return EngineEvent::limit_breached(actions.front().reason);
        }
      }
      std::error_code ec;
      const bool report_present = std::filesystem::exists(paths_.report_file, ec);
      const bool done_present = std::filesystem::exists(paths_.done_marker, ec);
      if (report_present || done_present) {
        if (active) {
          // The wrapper has finished but payload processes linger; sweep
          // the orphans before collection.
          kill_payload(table_, clock_, payload_matcher_, kKillGraceSeconds,
                       config_.poll_interval_ms);
        }
        return EngineEvent::payload_exited();
      }
      clock_.sleep_ms(config_.poll_interval_ms);
    }
  }

  static constexpr std::uint32_t kMaxAttempts = 5;
  static constexpr std::uint32_t kKillGraceSeconds = 10;

  PilotConfig config_;
  ClusterGateway& gateway_;
  TaskRepoClient& repo_;
  ProcessTable& table_;
  Clock& clock_;
  RunHooks hooks_;
  ControlPaths paths_;
  UidMatcher payload_matcher_;
  PilotDescriptor descriptor_;
  StepContext ctx_;
  PilotPhase phase_ = PilotPhase::Validate;
  std::deque<EngineEvent> pending_;
  std::string reason_;
  std::int64_t idle_elapsed_ms_ = 0;
  std::int64_t payload_started_at_ms_ = 0;
  bool saw_payload_ = false;
  bool breach_sent_ = false;
  std::vector<std::string> last_missing_;
};

inline PilotOutcome run_pilot(PilotConfig config, ClusterGateway& gateway,
                              TaskRepoClient& repo, ProcessTable& table, Clock& clock,
                              RunHooks hooks = {}) {
  return PilotOrchestrator(std::move(config), gateway, repo, table, clock,
                           std::move(hooks))
      .run();
}

}  // namespace podpilot
