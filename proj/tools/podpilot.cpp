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
// Operator entry points: genpod, run, repo-serve, submit, simulate.
// Exit statuses: 0 success, 2 config error, 3 validation failure,
// 4 transport failure.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "podpilot/podpilot.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitValidation = 3;
constexpr int kExitTransport = 4;

std::atomic<bool> g_stop{false};

void handle_stop_signal(int) { g_stop.store(true); }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw podpilot::ConfigError("cannot read file '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* value = std::getenv(name);
  return value != nullptr && *value != '\0' ? value : fallback;
}

podpilot::PilotConfig load_config_file(const std::string& path) {
  return podpilot::parse_pilot_config(read_file(path));
}

int outcome_exit_code(const podpilot::PilotOutcome& outcome) {
  if (outcome.termination_reason == "validation-failure") return kExitValidation;
  if (outcome.termination_reason == "external-stop") return kExitTransport;
  return kExitOk;
}

struct GenpodArgs {
  std::string config_path;
  std::string pilot_image = "registry.example/podpilot:latest";
  std::string format = "yaml";
};

int run_genpod(const GenpodArgs& args) {
  podpilot::PilotConfig config;
  if (!args.config_path.empty()) config = load_config_file(args.config_path);
  podpilot::ensure_valid(config);
  const auto blueprint = podpilot::build_pod_blueprint(config, args.pilot_image);
  const auto diagnostics = podpilot::lint_blueprint(blueprint);
  if (!diagnostics.empty()) {
    for (const auto& d : diagnostics) std::cerr << "lint: " << d << "\n";
    return kExitConfig;
  }
  const auto format = args.format == "json" ? podpilot::ManifestFormat::Json
                                            : podpilot::ManifestFormat::Yaml;
  std::cout << podpilot::render_manifest(blueprint, format);
  return kExitOk;
}

struct RunArgs {
  std::string config_path;
  std::string sim_scenario;
  std::string pod_name;
  std::string namespace_;
  std::string api_endpoint;
  std::string token_file = "/var/run/secrets/kubernetes.io/serviceaccount/token";
  std::string repo_token;
  bool verbose = false;
};

int run_sim(const RunArgs& args) {
  const auto scenario = podpilot::load_scenario(args.sim_scenario);
  auto log = [&args](const std::string& line) {
    if (args.verbose) std::cerr << "[engine] " << line << "\n";
  };
  const auto result = podpilot::run_scenario(scenario, log);
  for (const auto& line : result.log_lines) {
    std::cout << "[engine] " << line << "\n";
  }
  std::cout << "outcome: " << result.outcome.summary() << "\n";
  return outcome_exit_code(result.outcome);
}

int run_real(const RunArgs& args) {
  podpilot::PilotConfig config;
  if (!args.config_path.empty()) config = load_config_file(args.config_path);
  config.pod_name = !args.pod_name.empty() ? args.pod_name
                                           : env_or("POD_NAME", config.pod_name);
  config.namespace_ = !args.namespace_.empty()
                          ? args.namespace_
                          : env_or("POD_NAMESPACE", config.namespace_);
  podpilot::ensure_valid(config);
  if (config.repo_endpoint.empty()) {
    throw podpilot::ConfigError("config needs repo_endpoint in real mode");
  }

  std::string api = args.api_endpoint;
  if (api.empty()) {
    const std::string host = env_or("KUBERNETES_SERVICE_HOST", "");
    const std::string port = env_or("KUBERNETES_SERVICE_PORT", "443");
    if (!host.empty()) api = "http://" + host + ":" + port;
  }
  std::string token;
  try {
    if (api.empty()) throw podpilot::ConfigError("no cluster api endpoint configured");
    token = podpilot::load_service_account_token(args.token_file);
  } catch (const podpilot::Error& e) {
    std::cerr << "validation-failure: " << e.what() << "\n";
    return kExitValidation;
  }

  podpilot::WallClock clock;
  podpilot::HttplibTransport transport(api);
  podpilot::ClusterCredential credential{api, token, config.namespace_};
  podpilot::KubeApiGateway gateway(transport, credential, clock,
                                   config.poll_interval_ms);
  podpilot::HttpRepoClient repo(config.repo_endpoint, args.repo_token);
  podpilot::ProcProcessTable table;

  std::signal(SIGTERM, handle_stop_signal);
  std::signal(SIGINT, handle_stop_signal);
  podpilot::RunHooks hooks;
  hooks.stop_flag = &g_stop;
  hooks.on_log = [](const std::string& line) { std::cerr << "[pilot] " << line << "\n"; };
  const auto outcome =
      podpilot::run_pilot(config, gateway, repo, table, clock, hooks);
  std::cout << "outcome: " << outcome.summary() << "\n";
  return outcome_exit_code(outcome);
}

struct ServeArgs {
  std::string state_dir;
  std::string listen = "127.0.0.1:7077";
  std::string token;
};

int run_repo_serve(const ServeArgs& args) {
  const auto colon = args.listen.rfind(':');
  if (colon == std::string::npos) {
    throw podpilot::ConfigError("listen address must be host:port");
  }
  const std::string host = args.listen.substr(0, colon);
  const int port = std::atoi(args.listen.c_str() + colon + 1);

  podpilot::WallClock clock;
  podpilot::RepoCore core(args.state_dir, clock);
  podpilot::RepoServer server(core, args.token);
  std::signal(SIGTERM, handle_stop_signal);
  std::signal(SIGINT, handle_stop_signal);
  // The accept loop blocks, so a helper thread turns the stop signal into a
  // graceful server shutdown.
  std::thread stopper([&server] {
    while (!g_stop.load() && !server.is_running()) {
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    while (!g_stop.load() && server.is_running()) {
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    server.stop();
  });
  if (port == 0) {
    const int bound = server.bind(host);
    std::cout << "listening on " << host << ":" << bound << std::endl;
    server.serve();
  } else {
    std::cout << "listening on " << host << ":" << port << std::endl;
    if (!server.listen(host, port)) {
      g_stop.store(true);
      stopper.join();
      throw podpilot::TransportError("cannot listen on " + args.listen);
    }
  }
  g_stop.store(true);
  stopper.join();
  return kExitOk;
}

struct SubmitArgs {
  std::string repo_url;
  std::string task_file;
  std::string token;
  std::vector<std::string> inputs;  // source=localpath
};

int run_submit(const SubmitArgs& args) {
  podpilot::TaskSpec task;
  try {
    task = nlohmann::json::parse(read_file(args.task_file)).get<podpilot::TaskSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw podpilot::ParseError("task file '" + args.task_file + "': " + e.what());
  }
  podpilot::ensure_valid(task);
  podpilot::HttpRepoClient client(args.repo_url, args.token);
  const std::string task_id = client.submit_task(task);
  for (const auto& mapping : args.inputs) {
    const auto eq = mapping.find('=');
    if (eq == std::string::npos) {
      throw podpilot::ConfigError("--input needs source=localpath, got '" + mapping +
                                  "'");
    }
    client.upload_input(task_id, mapping.substr(0, eq), read_file(mapping.substr(eq + 1)));
  }
  std::cout << task_id << "\n";
  return kExitOk;
}

struct SimulateArgs {
  std::string scenario_file;
  std::string repo_url;
  std::string token;
};

int run_simulate(const SimulateArgs& args) {
  const auto scenario = podpilot::load_scenario(args.scenario_file);
  podpilot::ScenarioResult result;
  if (args.repo_url.empty()) {
    result = podpilot::run_scenario(scenario);
  } else {
    podpilot::HttpRepoClient client(args.repo_url, args.token);
    result = podpilot::run_scenario_against(scenario, client);
  }
  for (const auto& line : result.log_lines) {
    std::cout << "[engine] " << line << "\n";
  }
  std::cout << podpilot::dump_trace(result.trace);
  for (const auto& [task_id, state] : result.task_states) {
    std::cout << "task " << task_id << ": " << state << "\n";
  }
  std::cout << "outcome: " << result.outcome.summary() << "\n";
  return outcome_exit_code(result.outcome);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unprivileged pilot agent for container-image late binding"};
  app.require_subcommand(1);

  GenpodArgs genpod_args;
  auto* genpod = app.add_subcommand(
      "genpod", "Render the two-container pod manifest for a pilot config");
  genpod->add_option("config", genpod_args.config_path,
                     "Pilot config file (defaults apply when omitted)");
  genpod->add_option("--pilot-image", genpod_args.pilot_image,
                     "Image for the pilot container");
  genpod->add_option("--format", genpod_args.format, "Output format")
      ->check(CLI::IsMember({"yaml", "json"}));

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Run the pilot lifecycle");
  run->add_option("config", run_args.config_path, "Pilot config file");
  run->add_option("--sim", run_args.sim_scenario,
                  "Scenario file; runs against the simulator instead of a cluster");
  run->add_option("--pod-name", run_args.pod_name, "Override the pod name");
  run->add_option("--namespace", run_args.namespace_, "Override the namespace");
  run->add_option("--api", run_args.api_endpoint, "Cluster API base URL");
  run->add_option("--token-file", run_args.token_file, "Service account token file");
  run->add_option("--repo-token", run_args.repo_token, "Task repository token");
  run->add_flag("--verbose", run_args.verbose, "Stream engine transitions to stderr");

  ServeArgs serve_args;
  auto* serve = app.add_subcommand("repo-serve", "Serve the task repository protocol");
  serve->add_option("state-dir", serve_args.state_dir, "Repository state directory")
      ->required();
  serve->add_option("--listen", serve_args.listen, "host:port (port 0 picks one)");
  serve->add_option("--token", serve_args.token, "Require this X-Repo-Token value");

  SubmitArgs submit_args;
  auto* submit = app.add_subcommand("submit", "Submit one task to a repository");
  submit->add_option("repo", submit_args.repo_url, "Repository base URL")->required();
  submit->add_option("task-file", submit_args.task_file, "Task spec JSON file")
      ->required();
  submit->add_option("--token", submit_args.token, "X-Repo-Token value");
  submit->add_option("--input", submit_args.inputs,
                     "Upload an input file, source=localpath (repeatable)");

  SimulateArgs simulate_args;
  auto* simulate = app.add_subcommand(
      "simulate", "Run a scenario end to end and print the event trace");
  simulate->add_option("scenario", simulate_args.scenario_file, "Scenario file")
      ->required();
  simulate->add_option("--repo", simulate_args.repo_url,
                       "Use this repository instead of an in-process one");
  simulate->add_option("--token", simulate_args.token, "X-Repo-Token value");

  CLI11_PARSE(app, argc, argv);

  try {
    if (genpod->parsed()) return run_genpod(genpod_args);
    if (run->parsed()) {
      return run_args.sim_scenario.empty() ? run_real(run_args) : run_sim(run_args);
    }
    if (serve->parsed()) return run_repo_serve(serve_args);
    if (submit->parsed()) return run_submit(submit_args);
    if (simulate->parsed()) return run_simulate(simulate_args);
  } catch (const podpilot::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const podpilot::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const podpilot::AuthError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const podpilot::TransportError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitTransport;
  } catch (const podpilot::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
