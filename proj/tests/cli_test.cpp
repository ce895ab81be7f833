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
// End-to-end checks of the operator CLI: manifest generation, simulated
// runs, task submission, and the repository server.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include "podpilot/model.hpp"
#include "podpilot/podspec.hpp"
#include "podpilot/taskrepo_http.hpp"
#include "support/subprocess.hpp"

namespace podpilot {
namespace {

namespace fs = std::filesystem;
using podpilot::testing::CommandResult;
using podpilot::testing::SpawnedProcess;
using podpilot::testing::run_command;

const char* kCli = PODPILOT_CLI_PATH;
const char* kScenarioDir = PODPILOT_SCENARIO_DIR;

std::string scenario(const std::string& name) {
  return (fs::path(kScenarioDir) / name).string();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() /
           (std::string("podpilot-cli-") + info->test_suite_name() + "-" + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  void TearDown() override { fs::remove_all(dir_); }

  fs::path write_file(const std::string& name, const std::string& content) {
    const fs::path path = dir_ / name;
    std::ofstream(path, std::ios::binary) << content;
    return path;
  }

  fs::path dir_;
};

// ---------------------------------------------------------------------------
// genpod
// ---------------------------------------------------------------------------

TEST_F(CliTest, GenpodRendersACleanYamlManifestByDefault) {
  const CommandResult result = run_command({kCli, "genpod"});
  ASSERT_EQ(result.exit_code, 0) << result.err;
  EXPECT_EQ(result.out.rfind("apiVersion: \"v1\"\nkind: \"Pod\"\n", 0), 0u);
  EXPECT_NE(result.out.find("shareProcessNamespace: true"), std::string::npos);

  const PodBlueprint parsed = parse_manifest(result.out, ManifestFormat::Yaml);
  EXPECT_TRUE(lint_blueprint(parsed).empty());
  EXPECT_EQ(parsed,
            build_pod_blueprint(PilotConfig{}, "registry.example/podpilot:latest"));
}

TEST_F(CliTest, GenpodJsonReparsesToTheSameBlueprint) {
  const fs::path config_path = write_file("pilot.json", nlohmann::json{
      {"pod_name", "edge-pilot"},
      {"namespace", "batch"},
      {"payload_uid", 61000},
  }.dump());

  const CommandResult result = run_command(
      {kCli, "genpod", config_path.string(), "--pilot-image",
       "registry.example/podpilot:2.1", "--format", "json"});
  ASSERT_EQ(result.exit_code, 0) << result.err;

  PilotConfig config;
  config.pod_name = "edge-pilot";
  config.namespace_ = "batch";
  config.payload_uid = 61000;
  const PodBlueprint expected =
      build_pod_blueprint(config, "registry.example/podpilot:2.1");
  EXPECT_EQ(parse_manifest(result.out, ManifestFormat::Json), expected);
  EXPECT_TRUE(nlohmann::json::accept(result.out));
}

TEST_F(CliTest, GenpodRejectsABrokenConfigWithADiagnostic) {
  const fs::path config_path = write_file("bad.json", "{\"payload_uid\": 0}");
  const CommandResult result = run_command({kCli, "genpod", config_path.string()});
  EXPECT_EQ(result.exit_code, 2);
  EXPECT_EQ(result.err, "error: payload uid must be nonzero\n");
  EXPECT_TRUE(result.out.empty());
}

TEST_F(CliTest, GenpodRejectsUnparseableConfigFiles) {
  const fs::path config_path = write_file("garbage.json", "{{{");
  const CommandResult result = run_command({kCli, "genpod", config_path.string()});
  EXPECT_EQ(result.exit_code, 2);
  EXPECT_EQ(result.err.rfind("error: config: ", 0), 0u);
}

// ---------------------------------------------------------------------------
// run --sim
// ---------------------------------------------------------------------------

TEST_F(CliTest, RunSimCompletesTheThreeTaskScenario) {
  const CommandResult result =
      run_command({kCli, "run", "--sim", scenario("threetasks.txt")});
  ASSERT_EQ(result.exit_code, 0) << result.err;
  EXPECT_NE(result.out.find("[engine] Validate --ValidationOk--> Fetch [AcquireTask]\n"),
            std::string::npos);
  EXPECT_NE(result.out.find("[engine] Fetch --TaskClaimed--> Bind "
                            "[PatchImage AwaitRunning]\n"),
            std::string::npos);
  EXPECT_NE(result.out.find("outcome: completed:3 failed:0 reason:max-tasks\n"),
            std::string::npos);
}

TEST_F(CliTest, RunSimSurvivesAnUnpullableImage) {
  const CommandResult result =
      run_command({kCli, "run", "--sim", scenario("pullfail.txt")});
  EXPECT_EQ(result.exit_code, 0) << "the pilot must outlive a failed pull";
  EXPECT_NE(result.out.find("outcome: completed:0 failed:1 reason:max-tasks\n"),
            std::string::npos);
}

TEST_F(CliTest, RunRealModeWithoutACredentialFailsValidation) {
  const fs::path config_path = write_file(
      "pilot.json", "{\"repo_endpoint\": \"http://127.0.0.1:9\"}");
  const CommandResult result = run_command(
      {kCli, "run", config_path.string(), "--api", "http://127.0.0.1:9",
       "--token-file", (dir_ / "no-such-token").string()});
  EXPECT_EQ(result.exit_code, 3);
  EXPECT_EQ(result.err.rfind("validation-failure: cannot read service-account token at ",
                             0),
            0u);
}

TEST_F(CliTest, RunRealModeRequiresARepositoryEndpoint) {
  const CommandResult result = run_command({kCli, "run"});
  EXPECT_EQ(result.exit_code, 2);
  EXPECT_EQ(result.err, "error: config needs repo_endpoint in real mode\n");
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

TEST_F(CliTest, SimulatePrintsTraceTaskStatesAndOutcome) {
  const CommandResult result =
      run_command({kCli, "simulate", scenario("threetasks.txt")});
  ASSERT_EQ(result.exit_code, 0) << result.err;
  EXPECT_NE(result.out.find("Patched payload busybox:stable -> "
                            "registry.example/sweep/alpha:1\n"),
            std::string::npos);
  EXPECT_NE(result.out.find("task t1: completed\n"), std::string::npos);
  EXPECT_NE(result.out.find("task t2: completed\n"), std::string::npos);
  EXPECT_NE(result.out.find("task t3: completed\n"), std::string::npos);
  EXPECT_NE(result.out.find("outcome: completed:3 failed:0 reason:max-tasks\n"),
            std::string::npos);
}

TEST_F(CliTest, SimulateIsDeterministicAcrossRuns) {
  const CommandResult first =
      run_command({kCli, "simulate", scenario("threetasks.txt")});
  const CommandResult second =
      run_command({kCli, "simulate", scenario("threetasks.txt")});
  ASSERT_EQ(first.exit_code, 0);
  ASSERT_EQ(second.exit_code, 0);
  EXPECT_EQ(first.out, second.out);
  EXPECT_FALSE(first.out.empty());
}

TEST_F(CliTest, SimulateShowsTheKillBeforeTheFailureReport) {
  const CommandResult result = run_command({kCli, "simulate", scenario("hang.txt")});
  ASSERT_EQ(result.exit_code, 0) << result.err;
  const std::size_t kill = result.out.find("KillPayload");
  const std::size_t report = result.out.find("ReportFailure");
  ASSERT_NE(kill, std::string::npos);
  ASSERT_NE(report, std::string::npos);
  EXPECT_LT(kill, report) << "the payload dies before its task is failed";
  EXPECT_NE(result.out.find("task h1: failed(wall-limit)\n"), std::string::npos);
}

TEST_F(CliTest, SimulateHandlesKillResistantAndSilentPayloads) {
  const CommandResult resist =
      run_command({kCli, "simulate", scenario("killresist.txt")});
  ASSERT_EQ(resist.exit_code, 0) << resist.err;
  EXPECT_NE(resist.out.find("task k1: failed(wall-limit)\n"), std::string::npos);

  const CommandResult silent =
      run_command({kCli, "simulate", scenario("noreport.txt")});
  ASSERT_EQ(silent.exit_code, 0) << silent.err;
  EXPECT_NE(silent.out.find("task n1: failed(report-missing)\n"), std::string::npos);
}

TEST_F(CliTest, SimulateRejectsAMissingScenarioFile) {
  const CommandResult result =
      run_command({kCli, "simulate", (dir_ / "nope.txt").string()});
  EXPECT_EQ(result.exit_code, 2);
  EXPECT_EQ(result.err.rfind("error: cannot read scenario file '", 0), 0u);
}

// ---------------------------------------------------------------------------
// submit
// ---------------------------------------------------------------------------

TEST_F(CliTest, SubmitRejectsMalformedTaskFiles) {
  const fs::path bad = write_file("task.json", "not json at all");
  const CommandResult result =
      run_command({kCli, "submit", "http://127.0.0.1:9", bad.string()});
  EXPECT_EQ(result.exit_code, 2);
  EXPECT_EQ(result.err.rfind("error: task file '", 0), 0u);

  const CommandResult missing =
      run_command({kCli, "submit", "http://127.0.0.1:9", (dir_ / "gone.json").string()});
  EXPECT_EQ(missing.exit_code, 2);
  EXPECT_EQ(missing.err.rfind("error: cannot read file '", 0), 0u);
}

TEST_F(CliTest, SubmitValidatesTheTaskBeforeAnyNetworkTraffic) {
  const fs::path bad = write_file(
      "task.json", "{\"task_id\": \"\", \"image\": \"i\", \"command\": \"c\"}");
  const CommandResult result =
      run_command({kCli, "submit", "http://127.0.0.1:9", bad.string()});
  EXPECT_EQ(result.exit_code, 2);
  EXPECT_EQ(result.err, "error: task id must be nonempty\n");
}

// ---------------------------------------------------------------------------
// repo-serve + submit + simulate, end to end over HTTP
// ---------------------------------------------------------------------------

TEST_F(CliTest, ServeSubmitAndSimulateSettleFiveTasks) {
  const std::string token = "cli-secret";
  SpawnedProcess server({kCli, "repo-serve", (dir_ / "repo-state").string(),
                         "--listen", "127.0.0.1:0", "--token", token});
  const std::string banner = server.read_line();
  ASSERT_EQ(banner.rfind("listening on 127.0.0.1:", 0), 0u) << banner;
  const std::string url = "http://" + banner.substr(std::string("listening on ").size());

  // Five tasks whose exit codes the scenario's behaviors will reproduce.
  const int exits[5] = {0, 0, 2, 5, 0};
  for (int i = 0; i < 5; ++i) {
    const std::string id = "s" + std::to_string(i + 1);
    const nlohmann::json task{
        {"task_id", id},
        {"image", "registry.example/tasks/" + id + ":1"},
        {"command", "/bin/sh"},
        {"args", {"-c", "exit " + std::to_string(exits[i])}},
    };
    const fs::path task_file = write_file(id + ".json", task.dump());
    const CommandResult submit =
        run_command({kCli, "submit", url, task_file.string(), "--token", token});
    ASSERT_EQ(submit.exit_code, 0) << submit.err;
    EXPECT_EQ(submit.out, id + "\n");
  }

  // Resubmitting an existing id is refused over the wire.
  const CommandResult dup = run_command(
      {kCli, "submit", url, (dir_ / "s1.json").string(), "--token", token});
  EXPECT_EQ(dup.exit_code, 4);
  EXPECT_EQ(dup.err,
            "error: submit task failed with status 409: task 's1' already exists\n");

  std::string scenario_text = "poll-ms 50\npull-ms 100\nmax-tasks 5\n";
  for (int i = 0; i < 5; ++i) {
    scenario_text += "task id=s" + std::to_string(i + 1) +
                     " exit=" + std::to_string(exits[i]) + " duration=200\n";
  }
  const fs::path scenario_file = write_file("five.txt", scenario_text);

  // The wrong token is turned away before any task is touched.
  const CommandResult denied =
      run_command({kCli, "simulate", scenario_file.string(), "--repo", url});
  EXPECT_EQ(denied.exit_code, 3);

  const CommandResult sim = run_command(
      {kCli, "simulate", scenario_file.string(), "--repo", url, "--token", token});
  ASSERT_EQ(sim.exit_code, 0) << sim.err;
  EXPECT_NE(sim.out.find("outcome: completed:3 failed:2 reason:max-tasks\n"),
            std::string::npos);

  // Every submitted task reached a terminal state in the server's store.
  HttpRepoClient client(url, token);
  EXPECT_EQ(client.task_status("s1").at("state"), "completed");
  EXPECT_EQ(client.task_status("s2").at("state"), "completed");
  EXPECT_EQ(client.task_status("s3").at("state"), "failed(2)");
  EXPECT_EQ(client.task_status("s4").at("state"), "failed(5)");
  EXPECT_EQ(client.task_status("s5").at("state"), "completed");

  server.terminate();
}

}  // namespace
}  // namespace podpilot
