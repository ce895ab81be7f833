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
// The narrow slice of cluster authority a pilot needs: patch a container's
// image inside its own pod, observe container status, and request payload
// restarts. Restarts are themselves image patches back to the parking
// image, so the pod-patch role is the only permission the whole lifecycle
// requires.

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>

#include "podpilot/clock.hpp"
#include "podpilot/error.hpp"

namespace podpilot {

enum class ContainerState { Waiting, Running, Terminated };

inline const char* to_string(ContainerState state) {
  switch (state) {
    case ContainerState::Waiting: return "Waiting";
    case ContainerState::Running: return "Running";
    case ContainerState::Terminated: return "Terminated";
  }
  return "?";
}

struct ContainerStatus {
  std::string container_name;
  std::string image;          // image currently assigned in the pod spec
  std::string running_image;  // image of the live container; empty unless Running
  ContainerState state = ContainerState::Waiting;
  std::optional<std::string> waiting_reason;
  std::uint32_t restart_count = 0;

  bool operator==(const ContainerStatus&) const = default;
};

struct ClusterCredential {
  std::string api_endpoint;
  std::string bearer_token;
  std::string namespace_;
};

/// Waiting for a container to come up ended without the expected image
/// running; carries the last observed status so callers can distinguish a
/// pull failure from plain slowness.
class AwaitTimeoutError : public Error {
 public:
  AwaitTimeoutError(const std::string& message, ContainerStatus last)
      : Error(message), last_status(std::move(last)) {}

  ContainerStatus last_status;
};

class ClusterGateway {
 public:
  virtual ~ClusterGateway() = default;

  /// Records `new_image` in the pod spec for one container. A different
  /// image triggers the runtime to terminate and recreate just that
  /// container; patching the already-assigned string is a no-op.
  virtual void patch_container_image(const std::string& pod_name,
                                     const std::string& container_name,
                                     const std::string& new_image) = 0;

  virtual ContainerStatus get_container_status(const std::string& pod_name,
                                               const std::string& container_name) = 0;

  /// Blocks until the container reports Running with `expected_image` live,
  /// or throws AwaitTimeoutError after `timeout_seconds`.
  virtual ContainerStatus await_container_running(const std::string& pod_name,
                                                  const std::string& container_name,
                                                  const std::string& expected_image,
                                                  std::uint32_t timeout_seconds) = 0;

  /// Sends the payload container back to the parking image. The runtime
  /// tears the container down, killing everything inside it, and boots a
  /// fresh parked bootstrap; no kill authority is involved.
  virtual void restart_payload_container(const std::string& pod_name,
                                         const std::string& container_name,
                                         const std::string& parking_image) {
    patch_container_image(pod_name, container_name, parking_image);
  }
};

/// Shared polling loop behind await_container_running implementations.
/// Returns only a status whose running image equals `expected_image`.
inline ContainerStatus poll_until_running(ClusterGateway& gateway, Clock& clock,
                                          const std::string& pod_name,
                                          const std::string& container_name,
                                          const std::string& expected_image,
                                          std::uint32_t timeout_seconds,
                                          std::uint32_t poll_interval_ms) {
  const std::int64_t deadline =
      clock.now_ms() + static_cast<std::int64_t>(timeout_seconds) * 1000;
  ContainerStatus last;
  for (;;) {
    last = gateway.get_container_status(pod_name, container_name);
    if (last.state == ContainerState::Running && last.running_image == expected_image) {
      return last;
    }
    const std::int64_t remaining = deadline - clock.now_ms();
    if (remaining <= 0) break;
    clock.sleep_ms(static_cast<std::uint32_t>(std::min<std::int64_t>(
        remaining, static_cast<std::int64_t>(poll_interval_ms))));
  }
  std::string message = "container '" + container_name + "' did not reach image '" +
                        expected_image + "' within " + std::to_string(timeout_seconds) +
                        "s";
  if (last.waiting_reason) message += " (waiting: " + *last.waiting_reason + ")";
  throw AwaitTimeoutError(message, std::move(last));
}

}  // namespace podpilot
