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
// Deterministic in-process pod world: two simulated containers, a real
// scratch directory standing in for the shared volume, a synthetic shared
// process table, and a virtual clock. Image pulls, container restarts and
// the payload bootstrap are discrete events processed by advance(), so a
// full multi-task lifecycle runs in milliseconds and produces the same
// trace every time. The shared volume is genuine: the pilot's wrapper file
// protocol (atomic publication, report parsing) runs unmodified against it.

#pragma once

#include <atomic>
#include <csignal>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include "podpilot/clock.hpp"
#include "podpilot/cluster.hpp"
#include "podpilot/error.hpp"
#include "podpilot/model.hpp"
#include "podpilot/monitor.hpp"
#include "podpilot/podspec.hpp"
#include "podpilot/wrapper.hpp"

namespace podpilot {

enum class SimEventKind {
  Patched,
  Terminating,
  Pulling,
  PullFailed,
  Started,
  ScriptPublished,
  ScriptExecuted,
  ReportWritten,
  Restarted,
};

inline const char* to_string(SimEventKind kind) {
  switch (kind) {
    case SimEventKind::Patched: return "Patched";
    case SimEventKind::Terminating: return "Terminating";
    case SimEventKind::Pulling: return "Pulling";
    case SimEventKind::PullFailed: return "PullFailed";
    case SimEventKind::Started: return "Started";
    case SimEventKind::ScriptPublished: return "ScriptPublished";
    case SimEventKind::ScriptExecuted: return "ScriptExecuted";
    case SimEventKind::ReportWritten: return "ReportWritten";
    case SimEventKind::Restarted: return "Restarted";
  }
  return "?";
}

struct SimEvent {
  std::int64_t at = 0;  // virtual milliseconds
  SimEventKind kind = SimEventKind::Pulling;
  std::string detail;

  bool operator==(const SimEvent&) const = default;
};

inline std::string dump_trace(const std::vector<SimEvent>& trace) {
  std::ostringstream out;
  for (const auto& event : trace) {
    out << event.at << ' ' << to_string(event.kind) << ' ' << event.detail << '\n';
  }
  return out.str();
}

struct SimOptions {
  std::uint32_t pull_latency_ms = 400;
  std::uint32_t pull_retry_ms = 800;
  // When false the table shows only the pilot's own container, as if the
  // pod had been created without a shared process namespace.
  bool share_process_table = true;
  // Run published startup scripts as real subprocesses instead of the
  // behavior table.
  bool real_process_mode = false;
  std::int64_t epoch_seconds = 1700000000;
};

/// How a simulated payload behaves once its startup script executes.
struct PayloadBehavior {
  std::string task_id;
  std::string image;
  int exit_code = 0;
  std::uint32_t duration_ms = 400;
  std::uint32_t subprocesses = 0;
  bool hang = false;            // never finishes until killed
  bool kill_resistant = false;  // ignores the polite signal
  bool write_report = true;     // false models a wrapper that died silently
  std::uint64_t rss_bytes = 1 << 20;
};

struct PullPolicy {
  enum class Kind { Succeed, FailAlways, FailNTimes };
  Kind kind = Kind::Succeed;
  std::uint32_t remaining = 0;

  static PullPolicy succeed() { return {}; }
  static PullPolicy fail_always() { return {Kind::FailAlways, 0}; }
  static PullPolicy fail_n_times(std::uint32_t n) { return {Kind::FailNTimes, n}; }
};

/// Removes its directory tree on destruction; used for simulated volumes
/// and test scratch space.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& prefix = "podpilot") {
    static std::atomic<std::uint64_t> counter{0};
    root_ = std::filesystem::temp_directory_path() /
            (prefix + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(root_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(root_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return root_; }

 private:
  std::filesystem::path root_;
};

class SimPod {
 public:
  SimPod(PodBlueprint blueprint, PilotConfig config, SimOptions options = {})
      : blueprint_(std::move(blueprint)),
        config_(std::move(config)),
        options_(options),
        clock_(options.epoch_seconds),
        control_paths_(ControlPaths::for_config(config_)) {
    const auto diagnostics = lint_blueprint(blueprint_);
    if (!diagnostics.empty()) {
      throw ConfigError("blueprint rejected: " + diagnostics.front());
    }
    ensure_valid(config_);
    std::filesystem::create_directories(config_.shared_dir);
    ::chmod(config_.shared_dir.c_str(), 01777);
    std::filesystem::create_directories(config_.private_dir);
    for (const auto& spec : blueprint_.containers) {
      Container c;
      c.name = spec.name;
      c.assigned_image = spec.image;
      containers_.push_back(std::move(c));
    }
    for (auto& c : containers_) start_pull(c, c.assigned_image);
  }

  // -- gateway-facing surface ---------------------------------------------

  void patch(const std::string& container_name, const std::string& image) {
    Container& c = find_container(container_name);
    if (image == c.assigned_image) return;  // same-string patch: no runtime action
    const std::string old_image = c.assigned_image;
    c.assigned_image = image;
    record(SimEventKind::Patched, c.name + " " + old_image + " -> " + image);
    if (c.phase == ContainerState::Running) {
      record(SimEventKind::Terminating, c.name + " " + c.live_image);
      c.phase = ContainerState::Waiting;
      c.live_image.clear();
      c.bootstrap_active = false;
      c.next_poll_at.reset();
      if (is_payload(c) && active_run_) {
        // Container teardown kills the wrapper mid-flight: no report, no
        // script removal; whatever is on the shared volume stays there.
        active_run_.reset();
      }
    }
    start_pull(c, image);
  }

  ContainerStatus container_status(const std::string& container_name) {
    const Container& c = find_container(container_name);
    ContainerStatus status;
    status.container_name = c.name;
    status.image = c.assigned_image;
    status.state = c.phase;
    if (c.phase == ContainerState::Running) status.running_image = c.live_image;
    status.waiting_reason = c.waiting_reason;
    status.restart_count = c.restart_count;
    return status;
  }

  // -- world control --------------------------------------------------------

  /// Processes every pending transition inside the next `dt_ms` of virtual
  /// time, then leaves the clock at the window's end.
  void advance(std::int64_t dt_ms) {
    if (dt_ms <= 0) return;
    const std::int64_t deadline = clock_.now_ms() + dt_ms;
    for (;;) {
      const auto next = next_pending();
      if (!next || next->when > deadline) break;
      if (next->when > clock_.now_ms()) {
        clock_.advance_ms(static_cast<std::uint64_t>(next->when - clock_.now_ms()));
      }
      switch (next->what) {
        case Pending::Pull: resolve_pull(containers_[next->index]); break;
        case Pending::RunFinish: finish_active_run(); break;
        case Pending::BootstrapPoll: bootstrap_poll(containers_[next->index]); break;
      }
    }
    if (deadline > clock_.now_ms()) {
      clock_.advance_ms(static_cast<std::uint64_t>(deadline - clock_.now_ms()));
    }
  }

  std::vector<ProcessRecord> process_table() const {
    std::vector<ProcessRecord> records;
    const std::string root_uid = "0";
    if (!options_.share_process_table) {
      records.push_back({root_uid, 7, 0, "podpilot run", 0});
      return records;
    }
    records.push_back({std::to_string(config_.pause_uid), 1, 0, "/pause", 0});
    records.push_back({root_uid, 7, 0, "podpilot run", 0});
    const Container* payload = find_payload();
    if (payload != nullptr && payload->phase == ContainerState::Running &&
        payload->bootstrap_active) {
      records.push_back({root_uid, 24, 0, "/bin/sh", 0});
    }
    if (active_run_) {
      const ActiveRun& run = *active_run_;
      const std::string payload_uid = std::to_string(config_.payload_uid);
      records.push_back({root_uid, run.wrapper_pid, 24,
                         "su -c task-" + run.behavior.task_id + " " + config_.payload_user,
                         0});
      records.push_back({payload_uid, run.top_pid, run.wrapper_pid,
                         "task-" + run.behavior.task_id, run.behavior.rss_bytes});
      for (std::size_t i = 0; i < run.sub_pids.size(); ++i) {
        records.push_back({payload_uid, run.sub_pids[i], run.top_pid,
                           "task-" + run.behavior.task_id + " worker",
                           run.behavior.rss_bytes});
      }
    }
    return records;
  }

  void signal_uid(const UidMatcher& uid, int signum) {
    if (!active_run_) return;
    if (!uid.matches(std::to_string(config_.payload_uid)) &&
        !uid.matches(config_.payload_user)) {
      return;
    }
    if (signum == SIGKILL) {
      finish_killed_run(137);
    } else if (!active_run_->behavior.kill_resistant) {
      finish_killed_run(143);
    }
  }

  void set_behavior(PayloadBehavior behavior) {
    if (behavior.task_id.empty()) throw ConfigError("behavior needs a task id");
    behaviors_[behavior.task_id] = std::move(behavior);
  }

  /// Empty `image` sets the container's default policy.
  void set_pull_policy(const std::string& container_name, const std::string& image,
                       PullPolicy policy) {
    Container& c = find_container(container_name);
    if (image.empty()) {
      c.default_pull = policy;
    } else {
      c.image_pull[image] = policy;
    }
  }

  void inject_failure(const std::string& kind, const std::string& scope) {
    if (kind == "pull-failure") {
      for (auto& c : containers_) {
        if (c.name == scope) {
          c.default_pull = PullPolicy::fail_always();
          return;
        }
      }
      const auto it = behaviors_.find(scope);
      if (it == behaviors_.end() || it->second.image.empty()) {
        throw NotFoundError("unknown failure scope '" + scope + "'");
      }
      Container* payload = find_payload();
      if (payload == nullptr) throw NotFoundError("pod has no payload container");
      payload->image_pull[it->second.image] = PullPolicy::fail_always();
    } else if (kind == "payload-hang" || kind == "payload-kill-resistant") {
      const auto it = behaviors_.find(scope);
      if (it == behaviors_.end()) {
        throw NotFoundError("unknown failure scope '" + scope + "'");
      }
      if (kind == "payload-hang") {
        it->second.hang = true;
      } else {
        it->second.kill_resistant = true;
        it->second.hang = true;
      }
    } else {
      throw ConfigError("unknown failure kind '" + kind + "'");
    }
  }

  // -- observers ------------------------------------------------------------

  const std::vector<SimEvent>& trace() const { return trace_; }
  VirtualClock& clock() { return clock_; }
  const PilotConfig& config() const { return config_; }
  const PodBlueprint& blueprint() const { return blueprint_; }
  const ControlPaths& control_paths() const { return control_paths_; }
  bool payload_run_active() const { return active_run_.has_value(); }

 private:
  struct Container {
    std::string name;
    std::string assigned_image;
    std::string live_image;
    ContainerState phase = ContainerState::Waiting;
    std::optional<std::string> waiting_reason;
    std::uint32_t restart_count = 0;
    bool started_once = false;
    bool bootstrap_active = false;
    bool pulling = false;
    std::string pulling_image;
    std::int64_t pull_done_at = 0;
    std::optional<std::int64_t> next_poll_at;
    PullPolicy default_pull;
    std::map<std::string, PullPolicy> image_pull;
  };

  struct ActiveRun {
    PayloadBehavior behavior;
    std::int64_t started_ms = 0;
    std::int64_t started_unix = 0;
    std::int64_t finish_at = 0;
    int wrapper_pid = 0;
    int top_pid = 0;
    std::vector<int> sub_pids;
  };

  struct Pending {
    enum What { Pull, RunFinish, BootstrapPoll };
    std::int64_t when = 0;
    What what = Pull;
    std::size_t index = 0;
  };

  bool is_payload(const Container& c) const {
    return c.name == config_.payload_container_name;
  }

  Container* find_payload() {
    for (auto& c : containers_) {
      if (is_payload(c)) return &c;
    }
    return nullptr;
  }
  const Container* find_payload() const {
    return const_cast<SimPod*>(this)->find_payload();
  }

  Container& find_container(const std::string& name) {
    for (auto& c : containers_) {
      if (c.name == name) return c;
    }
    throw NotFoundError("container '" + name + "' not found in pod '" +
                        blueprint_.pod_name + "'");
  }

  void record(SimEventKind kind, std::string detail) {
    trace_.push_back(SimEvent{clock_.now_ms(), kind, std::move(detail)});
  }

  void start_pull(Container& c, const std::string& image) {
    c.pulling = true;
    c.pulling_image = image;
    c.waiting_reason.reset();
    c.pull_done_at = clock_.now_ms() + options_.pull_latency_ms;
    record(SimEventKind::Pulling, c.name + " " + image);
  }

  PullPolicy& policy_for(Container& c, const std::string& image) {
    const auto it = c.image_pull.find(image);
    return it == c.image_pull.end() ? c.default_pull : it->second;
  }

  void resolve_pull(Container& c) {
    if (!c.pulling) return;
    PullPolicy& policy = policy_for(c, c.pulling_image);
    const bool fails = policy.kind == PullPolicy::Kind::FailAlways ||
                       (policy.kind == PullPolicy::Kind::FailNTimes && policy.remaining > 0);
    if (fails) {
      if (policy.kind == PullPolicy::Kind::FailNTimes) policy.remaining -= 1;
      record(SimEventKind::PullFailed, c.name + " " + c.pulling_image);
      c.waiting_reason = "ErrImagePull";
      c.pull_done_at = clock_.now_ms() + options_.pull_retry_ms;
      return;
    }
    c.pulling = false;
    c.phase = ContainerState::Running;
    c.live_image = c.pulling_image;
    c.waiting_reason.reset();
    record(SimEventKind::Started, c.name + " " + c.live_image);
    if (c.started_once) {
      c.restart_count += 1;
      record(SimEventKind::Restarted,
             c.name + " " + c.live_image + " count=" + std::to_string(c.restart_count));
    }
    c.started_once = true;
    if (is_payload(c)) {
      c.bootstrap_active = true;
      c.next_poll_at = clock_.now_ms() + config_.poll_interval_ms;
    }
  }

  void bootstrap_poll(Container& c) {
    c.next_poll_at = clock_.now_ms() + config_.poll_interval_ms;
    if (active_run_) return;  // the loop is blocked inside the running script
    std::ifstream script(control_paths_.startup_script);
    if (!script) return;
    const std::string text((std::istreambuf_iterator<char>(script)),
                           std::istreambuf_iterator<char>());
    const std::string task_id = extract_task_id(text);
    record(SimEventKind::ScriptPublished, "task " + task_id);
    record(SimEventKind::ScriptExecuted, "task " + task_id);
    if (options_.real_process_mode) {
      execute_script_for_real(task_id);
      return;
    }
    ActiveRun run;
    const auto it = behaviors_.find(task_id);
    run.behavior = it == behaviors_.end() ? default_behavior(task_id) : it->second;
    run.started_ms = clock_.now_ms();
    run.started_unix = clock_.unix_seconds();
    run.finish_at = run.behavior.hang
                        ? std::numeric_limits<std::int64_t>::max()
                        : clock_.now_ms() + run.behavior.duration_ms;
    run.wrapper_pid = next_pid_++;
    run.top_pid = next_pid_++;
    for (std::uint32_t i = 0; i < run.behavior.subprocesses; ++i) {
      run.sub_pids.push_back(next_pid_++);
    }
    active_run_ = std::move(run);
  }

  static PayloadBehavior default_behavior(const std::string& task_id) {
    PayloadBehavior behavior;
    behavior.task_id = task_id;
    return behavior;
  }

  static std::string extract_task_id(const std::string& script_text) {
    const std::string marker = "task_id='";
    const std::size_t begin = script_text.find(marker);
    if (begin == std::string::npos) return "?";
    const std::size_t end = script_text.find('\'', begin + marker.size());
    if (end == std::string::npos) return "?";
    return script_text.substr(begin + marker.size(), end - begin - marker.size());
  }

  void finish_active_run() {
    if (!active_run_) return;
    conclude_run(active_run_->behavior.exit_code, active_run_->behavior.write_report);
  }

  void finish_killed_run(int exit_code) {
    if (!active_run_) return;
    conclude_run(exit_code, active_run_->behavior.write_report);
  }

  /// Models the tail of the bootstrap iteration: the wrapper's report (the
  /// genuine atomic-publication path), script removal, and the done marker.
  void conclude_run(int exit_code, bool write_report) {
    const ActiveRun run = *active_run_;
    active_run_.reset();
    if (write_report) {
      ExitReport report;
      report.task_id = run.behavior.task_id;
      report.exit_code = exit_code;
      report.started_at = run.started_unix;
      report.finished_at = clock_.unix_seconds();
      write_exit_report(control_paths_, report);
      record(SimEventKind::ReportWritten,
             "task " + run.behavior.task_id + " exit=" + std::to_string(exit_code));
    }
    std::error_code ec;
    std::filesystem::remove(control_paths_.startup_script, ec);
    std::ofstream(control_paths_.done_marker).flush();
    Container* payload = find_payload();
    if (payload != nullptr && payload->phase == ContainerState::Running) {
      payload->next_poll_at = clock_.now_ms() + config_.poll_interval_ms;
    }
  }

  void execute_script_for_real(const std::string& task_id) {
    const std::string command =
        "/bin/sh " + shell_single_quote(control_paths_.startup_script.string());
    const int raw = std::system(command.c_str());
    const int exit_code = (raw != -1 && WIFEXITED(raw)) ? WEXITSTATUS(raw) : 126;
    std::error_code ec;
    std::filesystem::remove(control_paths_.startup_script, ec);
    std::ofstream(control_paths_.done_marker).flush();
    if (std::filesystem::exists(control_paths_.report_file, ec)) {
      record(SimEventKind::ReportWritten,
             "task " + task_id + " exit=" + std::to_string(exit_code));
    }
  }

  std::optional<Pending> next_pending() const {
    std::optional<Pending> best;
    auto consider = [&](std::int64_t when, Pending::What what, std::size_t index) {
      if (!best || when < best->when ||
          (when == best->when && what < best->what)) {
        best = Pending{when, what, index};
      }
    };
    for (std::size_t i = 0; i < containers_.size(); ++i) {
      if (containers_[i].pulling) consider(containers_[i].pull_done_at, Pending::Pull, i);
    }
    if (active_run_ && active_run_->finish_at != std::numeric_limits<std::int64_t>::max()) {
      consider(active_run_->finish_at, Pending::RunFinish, 0);
    }
    for (std::size_t i = 0; i < containers_.size(); ++i) {
      const Container& c = containers_[i];
      if (c.phase == ContainerState::Running && c.bootstrap_active && c.next_poll_at) {
        consider(*c.next_poll_at, Pending::BootstrapPoll, i);
      }
    }
    return best;
  }

  PodBlueprint blueprint_;
  PilotConfig config_;
  SimOptions options_;
  VirtualClock clock_;
  ControlPaths control_paths_;
  std::vector<Container> containers_;
  std::map<std::string, PayloadBehavior> behaviors_;
  std::optional<ActiveRun> active_run_;
  std::vector<SimEvent> trace_;
  int next_pid_ = 40;
};

/// Clock whose sleeps advance the simulated world, so generic polling code
/// drives the simulation without knowing it exists.
class SimDrivingClock final : public Clock {
 public:
  explicit SimDrivingClock(SimPod& pod) : pod_(pod) {}

  std::int64_t now_ms() override { return pod_.clock().now_ms(); }
  void sleep_ms(std::uint64_t ms) override { pod_.advance(static_cast<std::int64_t>(ms)); }
  std::int64_t unix_seconds() override { return pod_.clock().unix_seconds(); }

 private:
  SimPod& pod_;
};

class SimGateway : public ClusterGateway {
 public:
  SimGateway(SimPod& pod, Clock& clock) : pod_(pod), clock_(clock) {}

  void patch_container_image(const std::string& pod_name,
                             const std::string& container_name,
                             const std::string& new_image) override {
    check_pod(pod_name);
    pod_.patch(container_name, new_image);
  }

  ContainerStatus get_container_status(const std::string& pod_name,
                                       const std::string& container_name) override {
    check_pod(pod_name);
    return pod_.container_status(container_name);
  }

  ContainerStatus await_container_running(const std::string& pod_name,
                                          const std::string& container_name,
                                          const std::string& expected_image,
                                          std::uint32_t timeout_seconds) override {
    check_pod(pod_name);
    return poll_until_running(*this, clock_, pod_name, container_name, expected_image,
                              timeout_seconds, pod_.config().poll_interval_ms);
  }

 private:
  void check_pod(const std::string& pod_name) const {
    if (pod_name != pod_.blueprint().pod_name) {
      throw NotFoundError("pod '" + pod_name + "' not found");
    }
  }

  SimPod& pod_;
  Clock& clock_;
};

class SimProcessTable : public ProcessTable {
 public:
  explicit SimProcessTable(SimPod& pod) : pod_(pod) {}

  std::vector<ProcessRecord> list_processes() override { return pod_.process_table(); }
  void signal_uid(const UidMatcher& uid, int signum) override {
    pod_.signal_uid(uid, signum);
  }

 private:
  SimPod& pod_;
};

}  // namespace podpilot
