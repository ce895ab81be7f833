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
// The payload container never talks to the pilot directly. Everything flows
// through files on the shared volume: the pilot publishes an environment
// file and a startup script, the payload-side bootstrap loop executes the
// script, and the script reports the payload's exit code back through a
// report file. All publications are atomic (write temp, rename) so a reader
// can never observe a half-written file.

#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <sys/stat.h>

#include "podpilot/error.hpp"
#include "podpilot/model.hpp"

namespace podpilot {

/// Locations of the control files on the shared volume. All of them live
/// under `<shared_dir>/<control_subdir>` and each temp path sits next to its
/// final path so rename() stays within one filesystem.
struct ControlPaths {
  std::filesystem::path startup_script;
  std::filesystem::path startup_script_tmp;
  std::filesystem::path env_file;
  std::filesystem::path report_file;
  std::filesystem::path report_file_tmp;
  std::filesystem::path done_marker;

  std::filesystem::path control_dir() const { return startup_script.parent_path(); }

  static ControlPaths for_config(const PilotConfig& config) {
    const std::filesystem::path dir =
        std::filesystem::path(config.shared_dir) / config.control_subdir;
    ControlPaths paths;
    paths.startup_script = dir / "startup.sh";
    paths.startup_script_tmp = dir / "startup.sh.tmp";
    paths.env_file = dir / "env.sh";
    paths.report_file = dir / "report.txt";
    paths.report_file_tmp = dir / "report.txt.tmp";
    paths.done_marker = dir / "task.done";
    return paths;
  }

  bool operator==(const ControlPaths&) const = default;
};

// ---------------------------------------------------------------------------
// Shell quoting helpers
// ---------------------------------------------------------------------------

/// Wraps a string in single quotes so any byte sequence (except NUL)
/// round-trips through shell evaluation.
inline std::string shell_single_quote(std::string_view value) {
  std::string out;
  out.reserve(value.size() + 2);
  out.push_back('\'');
  for (const char c : value) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out.push_back(c);
    }
  }
  out.push_back('\'');
  return out;
}

inline std::string shell_quote_words(const std::string& command,
                                     const std::vector<std::string>& args) {
  std::string out = shell_single_quote(command);
  for (const auto& a : args) {
    out.push_back(' ');
    out += shell_single_quote(a);
  }
  return out;
}

inline bool is_valid_env_name(std::string_view name) {
  if (name.empty()) return false;
  if (!(std::isalpha(static_cast<unsigned char>(name.front())) || name.front() == '_')) {
    return false;
  }
  for (const char c : name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
  }
  return true;
}

namespace detail {

/// Formats milliseconds as a sleep(1) argument; fractional sleeps are widely
/// supported in the shells container base images ship.
inline std::string sleep_seconds_arg(std::uint32_t ms) {
  if (ms == 0) ms = 1;
  if (ms % 1000 == 0) return std::to_string(ms / 1000);
  std::ostringstream out;
  out << ms / 1000 << '.';
  const std::uint32_t frac = ms % 1000;
  out << frac / 100 << (frac / 10) % 10 << frac % 10;
  std::string s = out.str();
  while (s.back() == '0') s.pop_back();
  return s;
}

/// Writes `content` to `tmp`, applies `mode`, then renames it onto `final`.
inline void atomic_publish(const std::filesystem::path& tmp,
                           const std::filesystem::path& final_path,
                           const std::string& content, mode_t mode) {
  std::error_code ec;
  if (!std::filesystem::is_directory(final_path.parent_path(), ec)) {
    throw Error("control directory missing: " + final_path.parent_path().string());
  }
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw Error("short write to " + tmp.string());
  }
  if (::chmod(tmp.c_str(), mode) != 0) {
    throw Error("cannot set permissions on " + tmp.string());
  }
  std::filesystem::rename(tmp, final_path, ec);
  if (ec) throw Error("cannot publish " + final_path.string() + ": " + ec.message());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Bootstrap wait loop
// ---------------------------------------------------------------------------

/// The fixed command the payload container runs no matter which image is
/// bound. It polls for the startup script, executes it when present, then
/// removes the script (one execution per publication) and resumes waiting.
/// The loop never exits on its own so the container stays alive between
/// tasks.
inline std::vector<std::string> generate_bootstrap_command(const PilotConfig& config) {
  const ControlPaths paths = ControlPaths::for_config(config);
  std::ostringstream loop;
  loop << "s=" << shell_single_quote(paths.startup_script.string())
       << "; d=" << shell_single_quote(paths.done_marker.string())
       << "; while :; do"
       << " if [ -f \"$s\" ]; then"
       << " /bin/sh \"$s\";"
       << " rm -f \"$s\";"
       << " : > \"$d\";"
       << " fi;"
       << " sleep " << detail::sleep_seconds_arg(config.poll_interval_ms)
       << "; done";
  return {"/bin/sh", "-c", loop.str()};
}

// ---------------------------------------------------------------------------
// Per-task startup script
// ---------------------------------------------------------------------------

/// Generates the wrapper script the bootstrap executes as container
/// pseudo-root. It sources the environment file, drops to the payload uid,
/// runs the task command from the shared directory, and publishes the exit
/// report atomically. The payload user is resolved at run time: a numeric
/// uid switch via setpriv when available, the classic su form when the
/// payload user exists in the image, or the helper binary shipped on the
/// shared volume as a last resort.
inline std::string generate_startup_script(const TaskSpec& task,
                                           const PilotConfig& config,
                                           const ControlPaths& paths) {
  ensure_valid(task);
  ensure_valid(config);
  const std::string command_line = shell_quote_words(task.command, task.args);
  std::ostringstream s;
  s << "#!/bin/sh\n"
    << "# payload startup wrapper (generated by the pilot; do not edit)\n"
    << "task_id=" << shell_single_quote(task.task_id) << "\n"
    << "payload_uid=" << shell_single_quote(std::to_string(config.payload_uid)) << "\n"
    << "payload_user=" << shell_single_quote(config.payload_user) << "\n"
    << "shared_dir=" << shell_single_quote(config.shared_dir) << "\n"
    << "env_file=" << shell_single_quote(paths.env_file.string()) << "\n"
    << "report_tmp=" << shell_single_quote(paths.report_file_tmp.string()) << "\n"
    << "report_file=" << shell_single_quote(paths.report_file.string()) << "\n"
    << "helper=" << shell_single_quote(
           config.privdrop_helper.empty()
               ? (paths.control_dir() / "privdrop").string()
               : config.privdrop_helper) << "\n"
    << "payload_cmd=" << shell_single_quote(command_line) << "\n"
    << "\n"
    << "[ -f \"$env_file\" ] && . \"$env_file\"\n"
    << "cd \"$shared_dir\" || exit 125\n"
    << "started_at=$(date +%s)\n"
    << "\n"
    << "# Launch the payload under its own uid; the wrapper itself keeps\n"
    << "# pseudo-root so the payload cannot touch the control files.\n"
    << "if [ \"$(id -u)\" = \"$payload_uid\" ]; then\n"
    << "  /bin/sh -c \"$payload_cmd\"\n"
    << "elif [ \"$(id -u)\" != \"0\" ]; then\n"
    << "  # Already unprivileged but not the payload uid; run in place.\n"
    << "  /bin/sh -c \"$payload_cmd\"\n"
    << "elif command -v setpriv >/dev/null 2>&1; then\n"
    << "  setpriv --reuid \"$payload_uid\" --regid \"$payload_uid\" --clear-groups \\\n"
    << "    --no-new-privs /bin/sh -c \"$payload_cmd\"\n"
    << "elif pw_user=$(getent passwd \"$payload_uid\" 2>/dev/null | cut -d: -f1) \\\n"
    << "    && [ -n \"$pw_user\" ]; then\n"
    << "  su -s /bin/sh -c \"$payload_cmd\" \"$pw_user\"\n"
    << "elif getent passwd \"$payload_user\" >/dev/null 2>&1; then\n"
    << "  su -s /bin/sh -c \"$payload_cmd\" \"$payload_user\"\n"
    << "elif [ -x \"$helper\" ]; then\n"
    << "  \"$helper\" \"$payload_uid\" /bin/sh -c \"$payload_cmd\"\n"
    << "else\n"
    << "  echo 'wrapper: no mechanism available to drop privileges' >&2\n"
    << "  false\n"
    << "fi\n"
    << "rc=$?\n"
    << "finished_at=$(date +%s)\n"
    << "{\n"
    << "  printf 'task_id=%s\\n' \"$task_id\"\n"
    << "  printf 'exit_code=%d\\n' \"$rc\"\n"
    << "  printf 'started_at=%s\\n' \"$started_at\"\n"
    << "  printf 'finished_at=%s\\n' \"$finished_at\"\n"
    << "} > \"$report_tmp\"\n"
    << "mv -f \"$report_tmp\" \"$report_file\"\n"
    << "exit \"$rc\"\n";
  return s.str();
}

/// Publishes the startup script: full content lands in the temp path with
/// owner-only write permission, then a rename makes it visible. Readers see
/// either no script or the complete script, never a prefix.
inline void publish_startup_script(const ControlPaths& paths, const std::string& script) {
  detail::atomic_publish(paths.startup_script_tmp, paths.startup_script, script, 0755);
}

/// Writes the environment file the wrapper sources before launching the
/// payload. Values are single-quoted so arbitrary bytes survive sourcing.
inline void write_env_file(const ControlPaths& paths,
                           const std::map<std::string, std::string>& env) {
  std::string content;
  for (const auto& [name, value] : env) {
    if (!is_valid_env_name(name)) {
      throw ConfigError("invalid environment variable name: '" + name + "'");
    }
    content += "export " + name + "=" + shell_single_quote(value) + "\n";
  }
  detail::atomic_publish(paths.env_file.string() + ".tmp", paths.env_file, content, 0644);
}

// ---------------------------------------------------------------------------
// Exit report encoding
// ---------------------------------------------------------------------------

inline std::string format_exit_report(const ExitReport& report) {
  ensure_valid(report);
  std::ostringstream out;
  out << "task_id=" << report.task_id << "\n"
      << "exit_code=" << report.exit_code << "\n"
      << "started_at=" << report.started_at << "\n"
      << "finished_at=" << report.finished_at << "\n";
  return out.str();
}

/// Parses the line-oriented `key=value` report. Every field is required,
/// duplicates and unknown keys are rejected, and range violations name the
/// offending field so a hijacked or crashed wrapper is distinguishable from
/// a clean run.
inline ExitReport parse_exit_report(const std::string& text) {
  std::map<std::string, std::string> fields;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("report line missing '=': '" + line + "'");
    const std::string key = line.substr(0, eq);
    if (key != "task_id" && key != "exit_code" && key != "started_at" &&
        key != "finished_at") {
      throw ParseError("report has unexpected field '" + key + "'");
    }
    if (!fields.emplace(key, line.substr(eq + 1)).second) {
      throw ParseError("report has duplicate field '" + key + "'");
    }
  }
  for (const char* required : {"task_id", "exit_code", "started_at", "finished_at"}) {
    if (!fields.count(required)) {
      throw ParseError(std::string("report missing field '") + required + "'");
    }
  }
  auto to_int = [](const std::string& key, const std::string& value) -> std::int64_t {
    if (value.empty()) throw ParseError("report field '" + key + "' is empty");
    std::size_t pos = 0;
    std::int64_t parsed = 0;
    try {
      parsed = std::stoll(value, &pos);
    } catch (const std::exception&) {
      throw ParseError("report field '" + key + "' is not a number: '" + value + "'");
    }
    if (pos != value.size()) {
      throw ParseError("report field '" + key + "' is not a number: '" + value + "'");
    }
    return parsed;
  };
  ExitReport report;
  report.task_id = fields["task_id"];
  if (report.task_id.empty()) throw ParseError("report field 'task_id' is empty");
  const std::int64_t code = to_int("exit_code", fields["exit_code"]);
  if (code < 0 || code > 255) {
    throw ParseError("report field 'exit_code' out of range [0,255]: " +
                     fields["exit_code"]);
  }
  report.exit_code = static_cast<int>(code);
  report.started_at = to_int("started_at", fields["started_at"]);
  report.finished_at = to_int("finished_at", fields["finished_at"]);
  if (report.finished_at < report.started_at) {
    throw ParseError("report field 'finished_at' precedes started_at");
  }
  return report;
}

/// Atomic report publication, used by the simulated wrapper so the engine
/// exercises the same reader path as against the real script.
inline void write_exit_report(const ControlPaths& paths, const ExitReport& report) {
  detail::atomic_publish(paths.report_file_tmp, paths.report_file,
                         format_exit_report(report), 0644);
}

/// Permission probe used by the hijack-resistance checks: can `uid` write
/// `path` through the plain permission bits? (Ownership by the pilot's
/// pseudo-root uid plus no group/other write bits means no.)
inline bool writable_by_uid(const std::filesystem::path& path, std::uint32_t uid) {
  struct ::stat st{};
  if (::stat(path.c_str(), &st) != 0) return false;
  if (st.st_uid == uid) return (st.st_mode & S_IWUSR) != 0;
  // Group membership is not modelled; group write with a matching gid is
  // treated as writable to stay conservative.
  if (st.st_gid == uid && (st.st_mode & S_IWGRP) != 0) return true;
  return (st.st_mode & S_IWOTH) != 0;
}

}  // namespace podpilot
