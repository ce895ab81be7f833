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
// Process-tree observation over the pod's shared pid namespace. With a
// shared process namespace every container's processes are visible to the
// pilot, and because each actor runs under a distinct uid (pilot as
// pseudo-root, the payload under its dedicated uid, the sandbox pause
// process under its own), classification needs nothing more than the real
// uid of each process. Parent pids are unreliable for this: wrappers and
// shells sit between the pilot and the payload, and double-forking daemons
// reparent to pid 1.

#pragma once

#include <algorithm>
#include <cctype>
#include <csignal>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "podpilot/clock.hpp"
#include "podpilot/model.hpp"

namespace podpilot {

struct ProcessSnapshot {
  std::int64_t taken_at_ms = 0;
  std::vector<ProcessRecord> records;
};

/// Pid sets per actor; the three sets partition the snapshot.
struct Classification {
  std::set<int> payload;
  std::set<int> pilot;
  std::set<int> infrastructure;

  bool operator==(const Classification&) const = default;
};

/// Source of process-table snapshots and the signalling channel. The real
/// implementation reads the process filesystem; the simulator supplies
/// synthetic tables.
class ProcessTable {
 public:
  virtual ~ProcessTable() = default;
  virtual std::vector<ProcessRecord> list_processes() = 0;
  virtual void signal_uid(const UidMatcher& uid, int signum) = 0;
};

inline ProcessSnapshot snapshot(ProcessTable& source, Clock& clock) {
  return ProcessSnapshot{clock.now_ms(), source.list_processes()};
}

/// Splits a snapshot into payload, infrastructure, and pilot pids. Uids
/// matching neither the payload nor the sandbox pause uid belong to the
/// pilot's own tree: the pilot, its helpers, and the still-privileged
/// wrapper shells it spawned.
inline Classification classify(const ProcessSnapshot& snap, const UidMatcher& payload_uid,
                               const UidMatcher& pause_uid) {
  Classification result;
  for (const auto& record : snap.records) {
    if (payload_uid.matches(record.uid)) {
      result.payload.insert(record.pid);
    } else if (pause_uid.matches(record.uid)) {
      result.infrastructure.insert(record.pid);
    } else {
      result.pilot.insert(record.pid);
    }
  }
  return result;
}

inline bool payload_active(const ProcessSnapshot& snap, const UidMatcher& payload_uid) {
  return std::any_of(snap.records.begin(), snap.records.end(),
                     [&](const ProcessRecord& r) { return payload_uid.matches(r.uid); });
}

inline std::size_t count_payload_processes(const std::vector<ProcessRecord>& records,
                                           const UidMatcher& payload_uid) {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const ProcessRecord& r) {
        return payload_uid.matches(r.uid);
      }));
}

inline std::uint64_t payload_rss_bytes(const std::vector<ProcessRecord>& records,
                                       const UidMatcher& payload_uid) {
  std::uint64_t total = 0;
  for (const auto& record : records) {
    if (payload_uid.matches(record.uid)) total += record.rss_bytes;
  }
  return total;
}

/// Point-in-time usage figures taken together with a snapshot. Memory can
/// be overridden by providers with better accounting than per-record rss.
struct UsageSample {
  std::int64_t wall_seconds = 0;
  std::optional<std::uint64_t> payload_rss_bytes;
};

struct EnforcementAction {
  std::vector<int> pids;
  std::string reason;

  bool operator==(const EnforcementAction&) const = default;
};

/// Returns the first breached limit as a terminate action covering every
/// payload pid; limits are checked in a fixed order (processes, memory,
/// wall) so repeated samples give a stable verdict. Counting is strictly
/// greater-than: a payload at exactly the limit is within its allowance.
inline std::vector<EnforcementAction> enforce(const ProcessSnapshot& snap,
                                              const UidMatcher& payload_uid,
                                              const ResourceLimits& limits,
                                              const UsageSample& usage) {
  std::vector<int> payload_pids;
  for (const auto& record : snap.records) {
    if (payload_uid.matches(record.uid)) payload_pids.push_back(record.pid);
  }
  std::optional<std::string> reason;
  if (limits.max_processes && payload_pids.size() > *limits.max_processes) {
    reason = "process-limit";
  } else if (limits.max_memory_bytes) {
    const std::uint64_t rss = usage.payload_rss_bytes
                                  ? *usage.payload_rss_bytes
                                  : payload_rss_bytes(snap.records, payload_uid);
    if (rss > *limits.max_memory_bytes) reason = "memory-limit";
  }
  if (!reason && limits.max_wall_seconds &&
      usage.wall_seconds > static_cast<std::int64_t>(*limits.max_wall_seconds)) {
    reason = "wall-limit";
  }
  if (!reason) return {};
  return {EnforcementAction{std::move(payload_pids), *reason}};
}

/// /proc-backed table. Records carry the real uid, so processes that
/// setuid()ed away from root are attributed to their current identity,
/// which is exactly the property the classification relies on.
class ProcProcessTable : public ProcessTable {
 public:
  explicit ProcProcessTable(std::filesystem::path proc_root = "/proc")
      : proc_root_(std::move(proc_root)) {}

  std::vector<ProcessRecord> list_processes() override {
    std::vector<ProcessRecord> records;
    std::error_code ec;
    std::filesystem::directory_iterator it(proc_root_, ec);
    if (ec) return records;
    for (const auto& dir : it) {
      const std::string name = dir.path().filename().string();
      if (name.empty() || !std::all_of(name.begin(), name.end(), [](char c) {
            return std::isdigit(static_cast<unsigned char>(c));
          })) {
        continue;
      }
      if (auto record = read_record(dir.path(), name)) {
        records.push_back(std::move(*record));
      }
    }
    std::sort(records.begin(), records.end(),
              [](const ProcessRecord& a, const ProcessRecord& b) { return a.pid < b.pid; });
    return records;
  }

  void signal_uid(const UidMatcher& uid, int signum) override {
    for (const auto& record : list_processes()) {
      if (uid.matches(record.uid)) {
        // The process may already be gone; that is success, not failure.
        ::kill(static_cast<pid_t>(record.pid), signum);
      }
    }
  }

 private:
  static std::optional<ProcessRecord> read_record(const std::filesystem::path& dir,
                                                  const std::string& pid_name) {
    std::ifstream status(dir / "status");
    if (!status) return std::nullopt;
    ProcessRecord record;
    record.pid = std::stoi(pid_name);
    std::string line;
    while (std::getline(status, line)) {
      std::istringstream fields(line);
      std::string key;
      fields >> key;
      if (key == "Uid:") {
        fields >> record.uid;
      } else if (key == "PPid:") {
        fields >> record.ppid;
      } else if (key == "VmRSS:") {
        std::uint64_t kb = 0;
        fields >> kb;
        record.rss_bytes = kb * 1024;
      }
    }
    if (record.uid.empty()) return std::nullopt;
    record.cmd = read_cmdline(dir);
    return record;
  }

  static std::string read_cmdline(const std::filesystem::path& dir) {
    std::ifstream cmdline(dir / "cmdline", std::ios::binary);
    std::string raw((std::istreambuf_iterator<char>(cmdline)),
                    std::istreambuf_iterator<char>());
    if (raw.empty()) {
      std::ifstream comm(dir / "comm");
      std::string name;
      std::getline(comm, name);
      return name.empty() ? std::string() : "[" + name + "]";
    }
    while (!raw.empty() && raw.back() == '\0') raw.pop_back();
    for (char& c : raw) {
      if (c == '\0') c = ' ';
    }
    return raw;
  }

  std::filesystem::path proc_root_;
};

/// Terminates every process matching `uid`: a polite signal first, then a
/// forced kill for whatever survives the grace period. Returns the number
/// of distinct pids signaled. A payload that ignores the polite signal
/// cannot outlive this because the forced kill is not blockable, and new
/// processes it forks during the grace period still match by uid on the
/// next sweep.
inline std::size_t kill_payload(ProcessTable& table, Clock& clock, const UidMatcher& uid,
                                std::uint32_t grace_seconds = 10,
                                std::uint32_t poll_interval_ms = 100) {
  std::set<int> signaled;
  auto matching_pids = [&]() {
    std::set<int> pids;
    for (const auto& record : table.list_processes()) {
      if (uid.matches(record.uid)) pids.insert(record.pid);
    }
    return pids;
  };
  std::set<int> current = matching_pids();
  if (current.empty()) return 0;
  signaled.insert(current.begin(), current.end());
  table.signal_uid(uid, SIGTERM);
  const std::int64_t deadline =
      clock.now_ms() + static_cast<std::int64_t>(grace_seconds) * 1000;
  while (clock.now_ms() < deadline) {
    if (matching_pids().empty()) return signaled.size();
    clock.sleep_ms(poll_interval_ms);
  }
  current = matching_pids();
  if (current.empty()) return signaled.size();
  signaled.insert(current.begin(), current.end());
  table.signal_uid(uid, SIGKILL);
  // Forced-kill delivery is asynchronous; give it a short window before
  // reporting the final state.
  for (int i = 0; i < 20 && !matching_pids().empty(); ++i) {
    clock.sleep_ms(poll_interval_ms);
  }
  return signaled.size();
}

}  // namespace podpilot
