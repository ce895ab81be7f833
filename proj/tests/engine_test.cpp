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
// Lifecycle engine: the pure transition table, startup validation, and the
// orchestrator driving a simulated pod end to end.

#include "podpilot/engine.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include "podpilot/error.hpp"
#include "podpilot/model.hpp"
#include "podpilot/scenario.hpp"
#include "podpilot/simcluster.hpp"
#include "podpilot/taskrepo.hpp"
#include "podpilot/wrapper.hpp"

namespace podpilot {
namespace {

namespace fs = std::filesystem;

ClaimTicket make_ticket(const std::string& id, const std::string& image) {
  TaskSpec task;
  task.task_id = id;
  task.image = image;
  task.command = "/bin/true";
  return ClaimTicket{task, "c1", 1700000600};
}

ExitReport make_report(const std::string& id, int exit_code) {
  ExitReport report;
  report.task_id = id;
  report.exit_code = exit_code;
  report.started_at = 1700000000;
  report.finished_at = 1700000010;
  return report;
}

std::vector<EngineActionKind> kinds_of(const std::vector<EngineAction>& actions) {
  std::vector<EngineActionKind> kinds;
  for (const auto& a : actions) kinds.push_back(a.kind);
  return kinds;
}

// ---------------------------------------------------------------------------
// Pure transition table
// ---------------------------------------------------------------------------

TEST(StepTable, ValidationBranchesToFetchOrTerminated) {
  StepContext ctx;
  const StepResult ok = step(PilotPhase::Validate, EngineEvent::validation_ok(), ctx);
  EXPECT_EQ(ok.phase, PilotPhase::Fetch);
  EXPECT_EQ(kinds_of(ok.actions),
            std::vector<EngineActionKind>{EngineActionKind::AcquireTask});

  const StepResult bad =
      step(PilotPhase::Validate, EngineEvent::validation_failed("shared dir not writable"),
           ctx);
  EXPECT_EQ(bad.phase, PilotPhase::Terminated);
  EXPECT_EQ(kinds_of(bad.actions),
            std::vector<EngineActionKind>{EngineActionKind::SelfTerminate});
}

TEST(StepTable, ClaimingATaskPatchesThenAwaitsTheTaskImage) {
  StepContext ctx;
  ctx.bind_timeout_seconds = 120;
  const auto ticket = make_ticket("t1", "registry.example/sim:9");
  const StepResult result =
      step(PilotPhase::Fetch, EngineEvent::task_claimed(ticket), ctx);

  EXPECT_EQ(result.phase, PilotPhase::Bind);
  ASSERT_EQ(result.actions.size(), 2u);
  EXPECT_EQ(result.actions[0], EngineAction::patch_image("registry.example/sim:9"));
  EXPECT_EQ(result.actions[1],
            EngineAction::await_running("registry.example/sim:9", 120));
  ASSERT_TRUE(ctx.ticket.has_value());
  EXPECT_EQ(ctx.ticket->task.task_id, "t1");
}

TEST(StepTable, FetchIdlesOrDrains) {
  StepContext ctx;
  const StepResult again = step(PilotPhase::Fetch, EngineEvent::no_task(), ctx);
  EXPECT_EQ(again.phase, PilotPhase::Fetch);
  EXPECT_EQ(kinds_of(again.actions),
            std::vector<EngineActionKind>{EngineActionKind::AcquireTask});

  const StepResult drain = step(PilotPhase::Fetch, EngineEvent::idle_expired(), ctx);
  EXPECT_EQ(drain.phase, PilotPhase::Drain);
  EXPECT_TRUE(drain.actions.empty());
}

TEST(StepTable, RunningContainerStartsStagingPipeline) {
  StepContext ctx;
  ContainerStatus status;
  status.container_name = "payload";
  const StepResult result =
      step(PilotPhase::Bind, EngineEvent::container_running(status), ctx);
  EXPECT_EQ(result.phase, PilotPhase::Stage);
  EXPECT_EQ(kinds_of(result.actions),
            (std::vector<EngineActionKind>{
                EngineActionKind::StageInputs, EngineActionKind::WriteEnvFile,
                EngineActionKind::PublishScript, EngineActionKind::StartMonitoring}));
}

TEST(StepTable, BindTimeoutFailsTheTaskAndCleansUp) {
  StepContext ctx;
  const StepResult result =
      step(PilotPhase::Bind, EngineEvent::bind_timeout(ContainerStatus{}), ctx);
  EXPECT_EQ(result.phase, PilotPhase::Cleanup);
  ASSERT_EQ(result.actions.size(), 3u);
  EXPECT_EQ(result.actions[0], EngineAction::report_failure("bind-timeout"));
  EXPECT_EQ(result.actions[1].kind, EngineActionKind::RestartPayload);
  EXPECT_EQ(result.actions[2].kind, EngineActionKind::WipeSharedDir);
  EXPECT_EQ(ctx.tasks_failed, 1u);
}

TEST(StepTable, StagingFailureCarriesItsReason) {
  StepContext ctx;
  const StepResult done = step(PilotPhase::Stage, EngineEvent::staging_done(), ctx);
  EXPECT_EQ(done.phase, PilotPhase::Run);
  EXPECT_TRUE(done.actions.empty());

  const StepResult failed = step(
      PilotPhase::Stage, EngineEvent::staging_failed("archive contains link entry: 'x'"),
      ctx);
  EXPECT_EQ(failed.phase, PilotPhase::Cleanup);
  EXPECT_EQ(failed.actions[0],
            EngineAction::report_failure("archive contains link entry: 'x'"));
  EXPECT_EQ(ctx.tasks_failed, 1u);
}

TEST(StepTable, PayloadLifetimeEventsDriveCollection) {
  StepContext ctx;
  const StepResult started = step(PilotPhase::Run, EngineEvent::payload_started(), ctx);
  EXPECT_EQ(started.phase, PilotPhase::Run);
  EXPECT_TRUE(started.actions.empty());

  const StepResult exited = step(PilotPhase::Run, EngineEvent::payload_exited(), ctx);
  EXPECT_EQ(exited.phase, PilotPhase::Collect);
  EXPECT_EQ(kinds_of(exited.actions),
            std::vector<EngineActionKind>{EngineActionKind::ParseReport});
}

TEST(StepTable, LimitBreachKillsBeforeCollecting) {
  StepContext ctx;
  const StepResult result =
      step(PilotPhase::Run, EngineEvent::limit_breached("wall-limit"), ctx);
  EXPECT_EQ(result.phase, PilotPhase::Collect);
  EXPECT_EQ(kinds_of(result.actions),
            (std::vector<EngineActionKind>{EngineActionKind::KillPayload,
                                           EngineActionKind::ParseReport}));
  EXPECT_EQ(ctx.breach_reason, "wall-limit");
}

TEST(StepTable, ParsedReportUploadsOutputs) {
  StepContext ctx;
  const StepResult result = step(
      PilotPhase::Collect, EngineEvent::report_parsed(make_report("t1", 0)), ctx);
  EXPECT_EQ(result.phase, PilotPhase::Collect);
  EXPECT_EQ(kinds_of(result.actions),
            std::vector<EngineActionKind>{EngineActionKind::UploadOutputs});
  ASSERT_TRUE(ctx.report.has_value());
  EXPECT_EQ(ctx.report->task_id, "t1");
  EXPECT_EQ(ctx.tasks_completed, 0u) << "nothing is counted until outputs land";
}

TEST(StepTable, BreachOverridesACleanReport) {
  // A wall-limit kill can still leave a plausible exit report behind when
  // the wrapper won the race; the breach reason must win and the report and
  // outputs must not be forwarded.
  StepContext ctx;
  step(PilotPhase::Run, EngineEvent::limit_breached("process-limit"), ctx);
  const StepResult result = step(
      PilotPhase::Collect, EngineEvent::report_parsed(make_report("t1", 0)), ctx);
  EXPECT_EQ(result.phase, PilotPhase::Cleanup);
  ASSERT_EQ(result.actions.size(), 3u);
  EXPECT_EQ(result.actions[0], EngineAction::report_failure("process-limit"));
  EXPECT_EQ(result.actions[1].kind, EngineActionKind::RestartPayload);
  EXPECT_EQ(result.actions[2].kind, EngineActionKind::WipeSharedDir);
  EXPECT_EQ(ctx.tasks_failed, 1u);
  EXPECT_EQ(ctx.tasks_completed, 0u);
}

TEST(StepTable, MissingReportFailsWithTheMostSpecificReason) {
  StepContext ctx;
  const StepResult plain =
      step(PilotPhase::Collect, EngineEvent::report_missing(), ctx);
  EXPECT_EQ(plain.actions[0], EngineAction::report_failure("report-missing"));

  const StepResult malformed = step(
      PilotPhase::Collect, EngineEvent::report_missing("report-malformed"), ctx);
  EXPECT_EQ(malformed.actions[0], EngineAction::report_failure("report-malformed"));

  StepContext breached;
  step(PilotPhase::Run, EngineEvent::limit_breached("memory-limit"), breached);
  const StepResult after_kill =
      step(PilotPhase::Collect, EngineEvent::report_missing(), breached);
  EXPECT_EQ(after_kill.actions[0], EngineAction::report_failure("memory-limit"));
  EXPECT_EQ(ctx.tasks_failed, 2u);
}

TEST(StepTable, UploadedOutputsSettleTheTaskByExitCode) {
  StepContext ctx;
  step(PilotPhase::Collect, EngineEvent::report_parsed(make_report("t1", 0)), ctx);
  const StepResult ok =
      step(PilotPhase::Collect, EngineEvent::outputs_uploaded(2, {}), ctx);
  EXPECT_EQ(ok.phase, PilotPhase::Cleanup);
  ASSERT_EQ(ok.actions.size(), 3u);
  EXPECT_EQ(ok.actions[0], EngineAction::report_completion(make_report("t1", 0)));
  EXPECT_EQ(ok.actions[1].kind, EngineActionKind::RestartPayload);
  EXPECT_EQ(ok.actions[2].kind, EngineActionKind::WipeSharedDir);
  EXPECT_EQ(ctx.tasks_completed, 1u);
  EXPECT_EQ(ctx.tasks_failed, 0u);

  // A nonzero exit still reports completion but counts as a failure.
  step(PilotPhase::Collect, EngineEvent::report_parsed(make_report("t2", 7)), ctx);
  const StepResult failed =
      step(PilotPhase::Collect, EngineEvent::outputs_uploaded(0, {"gone"}), ctx);
  EXPECT_EQ(failed.actions[0].kind, EngineActionKind::ReportCompletion);
  EXPECT_EQ(ctx.tasks_completed, 1u);
  EXPECT_EQ(ctx.tasks_failed, 1u);
}

TEST(StepTable, UploadWithoutAReportIsAProtocolBug) {
  StepContext ctx;
  try {
    step(PilotPhase::Collect, EngineEvent::outputs_uploaded(1, {}), ctx);
    FAIL() << "accepted uploads with no report";
  } catch (const ProtocolError& e) {
    EXPECT_STREQ(e.what(), "outputs uploaded with no parsed report in hand");
  }
}

TEST(StepTable, CleanupLoopsUntilTheTaskBudgetIsSpent) {
  StepContext ctx;
  ctx.max_tasks = 2;
  ctx.tasks_completed = 1;
  const StepResult more = step(PilotPhase::Cleanup, EngineEvent::cleaned(), ctx);
  EXPECT_EQ(more.phase, PilotPhase::Fetch);
  EXPECT_EQ(kinds_of(more.actions),
            std::vector<EngineActionKind>{EngineActionKind::AcquireTask});

  // Failures count against the budget too.
  ctx.tasks_failed = 1;
  const StepResult full = step(PilotPhase::Cleanup, EngineEvent::cleaned(), ctx);
  EXPECT_EQ(full.phase, PilotPhase::Drain);
  EXPECT_TRUE(full.actions.empty());

  const StepResult direct =
      step(PilotPhase::Cleanup, EngineEvent::max_tasks_reached(), ctx);
  EXPECT_EQ(direct.phase, PilotPhase::Drain);
}

TEST(StepTable, DrainEndsInSelfTermination) {
  StepContext ctx;
  const StepResult result = step(PilotPhase::Drain, EngineEvent::cleaned(), ctx);
  EXPECT_EQ(result.phase, PilotPhase::Terminated);
  EXPECT_EQ(kinds_of(result.actions),
            std::vector<EngineActionKind>{EngineActionKind::SelfTerminate});
}

TEST(StepTable, InadmissiblePairsFailLoudly) {
  StepContext ctx;
  try {
    step(PilotPhase::Validate, EngineEvent::payload_exited(), ctx);
    FAIL() << "accepted an inadmissible event";
  } catch (const ProtocolError& e) {
    EXPECT_STREQ(e.what(), "no transition from phase Validate on event PayloadExited");
  }
  try {
    step(PilotPhase::Terminated, EngineEvent::cleaned(), ctx);
    FAIL() << "terminated phase accepted an event";
  } catch (const ProtocolError& e) {
    EXPECT_STREQ(e.what(), "no transition from phase Terminated on event Cleaned");
  }
  EXPECT_THROW(step(PilotPhase::Run, EngineEvent::task_claimed(make_ticket("t", "i")), ctx),
               ProtocolError);
  EXPECT_THROW(step(PilotPhase::Fetch, EngineEvent::cleaned(), ctx), ProtocolError);
}

TEST(PilotOutcomeFormat, SummaryAndJsonRoundTrip) {
  PilotOutcome outcome{3, 1, "max-tasks"};
  EXPECT_EQ(outcome.summary(), "completed:3 failed:1 reason:max-tasks");
  const nlohmann::json j = outcome;
  EXPECT_EQ(j.at("tasks_completed"), 3);
  EXPECT_EQ(j.get<PilotOutcome>(), outcome);
}

// ---------------------------------------------------------------------------
// Environment validation
// ---------------------------------------------------------------------------

TEST(ValidateEnvironment, PassesInsideTheSimulatedPod) {
  SimWorld world;
  EXPECT_EQ(validate_environment(world.config(), world.gateway(), world.table()),
            std::nullopt);
  // The creatability probe cleans up after itself: the first claim must find
  // the shared volume exactly as the pod shipped it.
  EXPECT_FALSE(fs::exists(ControlPaths::for_config(world.config()).control_dir()));
  EXPECT_TRUE(fs::is_empty(world.config().shared_dir));
}

TEST(ValidateEnvironment, ReportsTheFirstBrokenPrecondition) {
  SimWorld world;
  const fs::path blocker = world.scratch().path() / "a-plain-file";
  std::ofstream(blocker) << "not a directory";

  PilotConfig bad_shared = world.config();
  bad_shared.shared_dir = blocker.string();
  EXPECT_EQ(validate_environment(bad_shared, world.gateway(), world.table()),
            "shared dir not writable");

  PilotConfig bad_private = world.config();
  bad_private.private_dir = blocker.string();
  EXPECT_EQ(validate_environment(bad_private, world.gateway(), world.table()),
            "private dir not writable");

  // A file squatting on the control dir's name blocks its creation.
  PilotConfig bad_control = world.config();
  const fs::path control = fs::path(bad_control.shared_dir) / bad_control.control_subdir;
  std::ofstream(control) << "squatter";
  EXPECT_EQ(validate_environment(bad_control, world.gateway(), world.table()),
            "control dir not creatable");
  fs::remove(control);

  PilotConfig bad_pod = world.config();
  bad_pod.pod_name = "ghost";
  EXPECT_EQ(validate_environment(bad_pod, world.gateway(), world.table()),
            "pod status unavailable: pod 'ghost' not found");
}

TEST(ValidateEnvironment, DemandsASharedProcessNamespace) {
  SimOptions options;
  options.share_process_table = false;
  SimWorld world(PilotConfig{}, options);
  EXPECT_EQ(validate_environment(world.config(), world.gateway(), world.table()),
            "process namespace not shared");
}

// ---------------------------------------------------------------------------
// Orchestrator against the simulated pod
// ---------------------------------------------------------------------------

TEST(Orchestrator, RunsAMixedBatchToItsBudget) {
  const Scenario scenario = parse_scenario(
      "poll-ms 100\n"
      "pull-ms 200\n"
      "task id=good exit=0 duration=400\n"
      "task id=bad exit=3 duration=400\n");
  const ScenarioResult result = run_scenario(scenario);

  EXPECT_EQ(result.outcome.summary(), "completed:1 failed:1 reason:max-tasks");
  EXPECT_EQ(result.task_states.at("good"), "completed");
  EXPECT_EQ(result.task_states.at("bad"), "failed(3)");

  // The transition log reads like the lifecycle: validate, fetch, bind.
  ASSERT_FALSE(result.log_lines.empty());
  EXPECT_EQ(result.log_lines.front(), "Validate --ValidationOk--> Fetch [AcquireTask]");
  bool bound = false;
  for (const auto& line : result.log_lines) {
    if (line == "Fetch --TaskClaimed--> Bind [PatchImage AwaitRunning]") bound = true;
  }
  EXPECT_TRUE(bound);
  EXPECT_EQ(result.log_lines.back(),
            "pilot done: completed:1 failed:1 reason:max-tasks");

  // The pod saw both task images come and go, with the parking image
  // restored in between.
  std::size_t patches = 0;
  for (const auto& event : result.trace) {
    if (event.kind == SimEventKind::Patched) ++patches;
  }
  EXPECT_EQ(patches, 4u) << "two images in, two parkings out";
}

TEST(Orchestrator, IdlePilotDrainsAfterItsTimeout) {
  const Scenario scenario = parse_scenario("poll-ms 100\nidle-timeout-s 1\n");
  const ScenarioResult result = run_scenario(scenario);
  EXPECT_EQ(result.outcome, (PilotOutcome{0, 0, "idle"}));
  EXPECT_EQ(result.outcome.summary(), "completed:0 failed:0 reason:idle");
}

TEST(Orchestrator, PullFailureSurfacesAsBindTimeoutNotACrash) {
  const Scenario scenario = parse_scenario(
      "poll-ms 100\n"
      "pull-retry-ms 300\n"
      "bind-timeout-s 2\n"
      "task id=unpullable pull=fail\n");
  const ScenarioResult result = run_scenario(scenario);
  EXPECT_EQ(result.outcome, (PilotOutcome{0, 1, "max-tasks"}));
  EXPECT_EQ(result.task_states.at("unpullable"), "failed(bind-timeout)");

  bool pull_failed = false;
  for (const auto& event : result.trace) {
    if (event.kind == SimEventKind::PullFailed) pull_failed = true;
  }
  EXPECT_TRUE(pull_failed);
}

TEST(Orchestrator, SilentPayloadIsReportedMissing) {
  const Scenario scenario = parse_scenario(
      "poll-ms 100\n"
      "task id=mute no-report duration=300\n");
  const ScenarioResult result = run_scenario(scenario);
  EXPECT_EQ(result.task_states.at("mute"), "failed(report-missing)");
  EXPECT_EQ(result.outcome.tasks_failed, 1u);
}

TEST(Orchestrator, WallLimitKillsAHangingPayload) {
  const Scenario scenario = parse_scenario(
      "poll-ms 100\n"
      "task id=stuck hang wall-limit-s=1\n");
  const ScenarioResult result = run_scenario(scenario);
  EXPECT_EQ(result.task_states.at("stuck"), "failed(wall-limit)");

  bool kill_logged = false;
  for (const auto& line : result.log_lines) {
    if (line == "Run --LimitBreached--> Collect [KillPayload ParseReport]") {
      kill_logged = true;
    }
  }
  EXPECT_TRUE(kill_logged);
}

TEST(Orchestrator, ProcessLimitCatchesAForkStorm) {
  const Scenario scenario = parse_scenario(
      "poll-ms 100\n"
      "task id=forky subprocs=6 proc-limit=3 duration=2000\n");
  const ScenarioResult result = run_scenario(scenario);
  EXPECT_EQ(result.task_states.at("forky"), "failed(process-limit)");
}

TEST(Orchestrator, MemoryLimitCatchesAnOversizedPayload) {
  const Scenario scenario = parse_scenario(
      "poll-ms 100\n"
      "task id=hog rss=50000000 mem-limit=1000000 duration=2000\n");
  const ScenarioResult result = run_scenario(scenario);
  EXPECT_EQ(result.task_states.at("hog"), "failed(memory-limit)");
}

class HookedWorld {
 public:
  explicit HookedWorld(const std::string& scenario_text)
      : scenario_(parse_scenario(scenario_text)),
        world_(scenario_pilot_config(scenario_), scenario_sim_options(scenario_)),
        repo_(world_.scratch().path() / "repo", world_.clock()),
        client_(repo_) {
    apply_scenario_behaviors(scenario_, world_);
    for (const auto& entry : scenario_.tasks) repo_.submit_task(entry.task);
  }

  PilotOutcome run(RunHooks hooks = {}) {
    return run_pilot(world_.config(), world_.gateway(), client_, world_.table(),
                     world_.clock(), hooks);
  }

  const Scenario& scenario() const { return scenario_; }
  SimWorld& world() { return world_; }
  RepoCore& repo() { return repo_; }
  InProcRepoClient& client() { return client_; }

 private:
  Scenario scenario_;
  SimWorld world_;
  RepoCore repo_;
  InProcRepoClient client_;
};

TEST(Orchestrator, StagesEnvironmentAndScriptBeforeTheRun) {
  HookedWorld harness("poll-ms 100\ntask id=envy exit=0\n");
  const ControlPaths paths = ControlPaths::for_config(harness.world().config());
  bool checked = false;
  RunHooks hooks;
  hooks.on_transition = [&](PilotPhase from, const EngineEvent& event, PilotPhase to,
                            const std::vector<EngineAction>&) {
    if (from != PilotPhase::Stage || to != PilotPhase::Run) return;
    checked = true;
    // By the time staging completes, the wrapper script and environment
    // file are published and executable where the bootstrap loop looks.
    EXPECT_TRUE(fs::exists(paths.startup_script));
    // Staging made the control dir world-readable so the bootstrap loop can
    // see scripts even before the payload uid exists.
    struct ::stat st {};
    ASSERT_EQ(::stat(paths.control_dir().c_str(), &st), 0);
    EXPECT_EQ(st.st_mode & 0777, 0755u);
    std::ifstream env_in(paths.env_file);
    const std::string env((std::istreambuf_iterator<char>(env_in)),
                          std::istreambuf_iterator<char>());
    EXPECT_NE(env.find("export PODPILOT_TASK_ID='envy'\n"), std::string::npos);
    (void)event;
  };
  const PilotOutcome outcome = harness.run(hooks);
  EXPECT_TRUE(checked);
  EXPECT_EQ(outcome, (PilotOutcome{1, 0, "max-tasks"}));
}

TEST(Orchestrator, TaskEnvironmentReachesTheEnvFile) {
  // Scenario task lines cannot express custom env vars, so submit the task
  // into an otherwise empty world directly.
  TaskSpec task;
  task.task_id = "enviro";
  task.image = "registry.example/tasks/enviro:1";
  task.command = "/bin/true";
  task.env = {{"GREETING", "hi there"}};
  HookedWorld fresh("poll-ms 100\nmax-tasks 1\n");
  fresh.repo().submit_task(task);

  const ControlPaths paths = ControlPaths::for_config(fresh.world().config());
  std::string env_seen;
  RunHooks hooks;
  hooks.on_transition = [&](PilotPhase from, const EngineEvent&, PilotPhase to,
                            const std::vector<EngineAction>&) {
    if (from == PilotPhase::Stage && to == PilotPhase::Run) {
      std::ifstream in(paths.env_file);
      env_seen.assign((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    }
  };
  const PilotOutcome outcome = fresh.run(hooks);
  EXPECT_EQ(outcome.tasks_completed, 1u);
  EXPECT_EQ(env_seen,
            "export GREETING='hi there'\n"
            "export PODPILOT_TASK_ID='enviro'\n");
}

TEST(Orchestrator, UploadsOutputsThePayloadLeftBehind) {
  HookedWorld harness("poll-ms 100\ntask id=writer exit=0 duration=300 output=result.txt\n");
  const std::string shared = harness.world().config().shared_dir;
  RunHooks hooks;
  hooks.on_transition = [&](PilotPhase, const EngineEvent& event, PilotPhase,
                            const std::vector<EngineAction>&) {
    // The table-driven payload does not touch the filesystem, so drop the
    // output in its stead the moment it exits.
    if (event.kind == EngineEventKind::PayloadExited) {
      std::ofstream(fs::path(shared) / "result.txt") << "from-payload";
    }
  };
  const PilotOutcome outcome = harness.run(hooks);
  EXPECT_EQ(outcome, (PilotOutcome{1, 0, "max-tasks"}));
  EXPECT_EQ(harness.repo().task_state("writer"), "completed");

  std::ifstream out(harness.repo().output_path("writer", "result.txt"));
  const std::string stored((std::istreambuf_iterator<char>(out)),
                           std::istreambuf_iterator<char>());
  EXPECT_EQ(stored, "from-payload");
  const nlohmann::json status = harness.repo().task_status("writer");
  EXPECT_FALSE(status.contains("missing_outputs"));
}

TEST(Orchestrator, DeclaredButAbsentOutputsAreRecordedAsMissing) {
  HookedWorld harness("poll-ms 100\ntask id=empty exit=0 output=never.txt\n");
  const PilotOutcome outcome = harness.run();
  EXPECT_EQ(outcome.tasks_completed, 1u);
  EXPECT_EQ(harness.repo().task_status("empty").at("missing_outputs"),
            nlohmann::json({"never.txt"}));
}

TEST(Orchestrator, SharedDirIsCleanBeforeEveryClaim) {
  HookedWorld harness(
      "poll-ms 100\n"
      "task id=one exit=0\n"
      "task id=two exit=1\n"
      "task id=three hang wall-limit-s=1\n");
  const std::string shared = harness.world().config().shared_dir;
  int claims_checked = 0;
  RunHooks hooks;
  hooks.on_transition = [&](PilotPhase, const EngineEvent& event, PilotPhase,
                            const std::vector<EngineAction>&) {
    if (event.kind != EngineEventKind::TaskClaimed) return;
    ++claims_checked;
    EXPECT_TRUE(fs::is_empty(shared))
        << "residue before claiming " << event.ticket->task.task_id;
    const auto rows = harness.world().table().list_processes();
    const UidMatcher payload = UidMatcher::of(harness.world().config().payload_uid,
                                              harness.world().config().payload_user);
    for (const auto& row : rows) {
      EXPECT_FALSE(payload.matches(row.uid))
          << "payload pid " << row.pid << " survived into the next claim";
    }
  };
  const PilotOutcome outcome = harness.run(hooks);
  EXPECT_EQ(claims_checked, 3);
  EXPECT_EQ(outcome, (PilotOutcome{1, 2, "max-tasks"}));
  // Drain leaves the shared volume empty for the next pilot too.
  EXPECT_TRUE(fs::is_empty(shared));
}

TEST(Orchestrator, ForgedReportIdentityFailsTheTask) {
  HookedWorld harness("poll-ms 100\ntask id=honest exit=0 duration=300\n");
  const ControlPaths paths = ControlPaths::for_config(harness.world().config());
  RunHooks hooks;
  hooks.on_transition = [&](PilotPhase, const EngineEvent& event, PilotPhase,
                            const std::vector<EngineAction>&) {
    if (event.kind != EngineEventKind::PayloadExited) return;
    // Swap in a report naming a different task before collection reads it.
    write_exit_report(paths, make_report("somebody-else", 0));
  };
  const PilotOutcome outcome = harness.run(hooks);
  EXPECT_EQ(outcome, (PilotOutcome{0, 1, "max-tasks"}));
  EXPECT_EQ(harness.repo().task_state("honest"), "failed(report-mismatch)");
}

TEST(Orchestrator, GarbledReportFailsTheTask) {
  HookedWorld harness("poll-ms 100\ntask id=garbled exit=0 duration=300\n");
  const ControlPaths paths = ControlPaths::for_config(harness.world().config());
  RunHooks hooks;
  hooks.on_transition = [&](PilotPhase, const EngineEvent& event, PilotPhase,
                            const std::vector<EngineAction>&) {
    if (event.kind != EngineEventKind::PayloadExited) return;
    std::ofstream(paths.report_file, std::ios::trunc) << "exit_code=banana\n";
  };
  const PilotOutcome outcome = harness.run(hooks);
  EXPECT_EQ(harness.repo().task_state("garbled"), "failed(report-malformed)");
  EXPECT_EQ(outcome.tasks_failed, 1u);
}

TEST(Orchestrator, AdvertisedCapabilitiesUnlockMatchingTasks) {
  const Scenario scenario = parse_scenario("poll-ms 100\nmax-tasks 1\n");
  PilotConfig config = scenario_pilot_config(scenario);
  config.capabilities = {{"arch", "amd64"}};
  SimWorld world(config, scenario_sim_options(scenario));
  RepoCore repo(world.scratch().path() / "repo", world.clock());
  InProcRepoClient client(repo);

  TaskSpec task;
  task.task_id = "picky";
  task.image = "registry.example/tasks/picky:1";
  task.command = "/bin/true";
  task.requirements = {{"arch", "amd64"}};
  repo.submit_task(task);

  const PilotOutcome outcome =
      run_pilot(world.config(), world.gateway(), client, world.table(), world.clock());
  EXPECT_EQ(outcome, (PilotOutcome{1, 0, "max-tasks"}));
  EXPECT_EQ(repo.task_state("picky"), "completed");
}

// ---------------------------------------------------------------------------
// Degraded repository behavior
// ---------------------------------------------------------------------------

class FlakyRepoClient : public TaskRepoClient {
 public:
  enum class Mode { AlwaysTransport, AlwaysAuth };
  explicit FlakyRepoClient(Mode mode) : mode_(mode) {}

  std::optional<ClaimTicket> acquire_task(const PilotDescriptor&) override {
    ++attempts;
    if (mode_ == Mode::AlwaysTransport) throw TransportError("connection refused");
    throw AuthError("acquire task failed with status 401");
  }
  std::string fetch_input(const std::string&, const std::string&) override { return ""; }
  void upload_output(const std::string&, const std::string&, const std::string&,
                     const std::string&) override {}
  void report_completion(const std::string&, const ExitReport&,
                         const std::vector<std::string>&) override {}
  void report_failure(const std::string&, const std::string&) override {}

  int attempts = 0;

 private:
  Mode mode_;
};

TEST(Orchestrator, RepositoryOutageExhaustsRetriesThenStops) {
  SimWorld world;
  FlakyRepoClient flaky(FlakyRepoClient::Mode::AlwaysTransport);
  std::vector<std::string> log;
  RunHooks hooks;
  hooks.on_log = [&log](const std::string& line) { log.push_back(line); };

  const std::int64_t started = world.clock().now_ms();
  const PilotOutcome outcome =
      run_pilot(world.config(), world.gateway(), flaky, world.table(), world.clock(), hooks);

  EXPECT_EQ(outcome, (PilotOutcome{0, 0, "external-stop"}));
  EXPECT_EQ(flaky.attempts, 5);
  // Backoff runs 1s, 2s, 4s, 8s between the five attempts.
  EXPECT_GE(world.clock().now_ms() - started, 15000);
  bool gave_up = false;
  for (const auto& line : log) {
    if (line ==
        "terminating: acquire task failed after 5 attempts: connection refused") {
      gave_up = true;
    }
  }
  EXPECT_TRUE(gave_up);
}

TEST(Orchestrator, AuthRejectionIsAValidationFailureNotARetry) {
  SimWorld world;
  FlakyRepoClient flaky(FlakyRepoClient::Mode::AlwaysAuth);
  const PilotOutcome outcome =
      run_pilot(world.config(), world.gateway(), flaky, world.table(), world.clock());
  EXPECT_EQ(outcome, (PilotOutcome{0, 0, "validation-failure"}));
  EXPECT_EQ(flaky.attempts, 1) << "credential problems must not be retried";
}

class ExpiringRepoClient : public InProcRepoClient {
 public:
  using InProcRepoClient::InProcRepoClient;

  void report_completion(const std::string&, const ExitReport&,
                         const std::vector<std::string>&) override {
    throw ClaimExpiredError("claim expired");
  }
};

TEST(Orchestrator, LostClaimOnCompletionDoesNotKillThePilot) {
  const Scenario scenario =
      parse_scenario("poll-ms 100\ntask id=late exit=0 duration=300\n");
  SimWorld world(scenario_pilot_config(scenario), scenario_sim_options(scenario));
  apply_scenario_behaviors(scenario, world);
  RepoCore repo(world.scratch().path() / "repo", world.clock());
  ExpiringRepoClient client(repo);
  repo.submit_task(scenario.tasks[0].task);

  std::vector<std::string> log;
  RunHooks hooks;
  hooks.on_log = [&log](const std::string& line) { log.push_back(line); };
  const PilotOutcome outcome =
      run_pilot(world.config(), world.gateway(), client, world.table(), world.clock(), hooks);

  EXPECT_EQ(outcome, (PilotOutcome{1, 0, "max-tasks"}));
  bool tolerated = false;
  for (const auto& line : log) {
    if (line == "completion not recorded: claim expired") tolerated = true;
  }
  EXPECT_TRUE(tolerated);
}

TEST(Orchestrator, ExternalStopFlagAbortsTheRun) {
  const Scenario scenario = parse_scenario("poll-ms 100\nidle-timeout-s 600\n");
  SimWorld world(scenario_pilot_config(scenario), scenario_sim_options(scenario));
  RepoCore repo(world.scratch().path() / "repo", world.clock());
  InProcRepoClient client(repo);

  std::atomic<bool> stop{false};
  int polls = 0;
  RunHooks hooks;
  hooks.stop_flag = &stop;
  hooks.on_transition = [&](PilotPhase, const EngineEvent& event, PilotPhase,
                            const std::vector<EngineAction>&) {
    if (event.kind == EngineEventKind::NoTask && ++polls == 3) stop = true;
  };
  const PilotOutcome outcome =
      run_pilot(world.config(), world.gateway(), client, world.table(), world.clock(), hooks);
  EXPECT_EQ(outcome, (PilotOutcome{0, 0, "external-stop"}));
}

}  // namespace
}  // namespace podpilot
