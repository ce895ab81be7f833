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
// Cluster API client speaking the pod endpoints directly. Mutations use the
// narrow JSON-patch form that replaces exactly one image path, which is the
// smallest request the pod-patch role can make; everything else is plain
// status GETs. The HTTP layer is injected so tests drive the client against
// recorded fixtures, byte-for-byte identical to production requests.

#pragma once

#include <cstdint>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "podpilot/clock.hpp"
#include "podpilot/cluster.hpp"
#include "podpilot/error.hpp"

namespace podpilot {

struct HttpResponse {
  int status = 0;
  std::string body;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

/// Minimal HTTP surface the cluster client needs. Implementations must be
/// callable from multiple threads.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse get(const std::string& path, const HttpHeaders& headers) = 0;
  virtual HttpResponse patch(const std::string& path, const std::string& content_type,
                             const std::string& body, const HttpHeaders& headers) = 0;
};

/// Builds the single-field JSON-patch body replacing one container image.
inline std::string image_patch_body(std::size_t container_index,
                                    const std::string& image) {
  nlohmann::ordered_json patch = nlohmann::ordered_json::array();
  patch.push_back({{"op", "replace"},
                   {"path", "/spec/containers/" + std::to_string(container_index) +
                                "/image"},
                   {"value", image}});
  return patch.dump();
}

/// Reads the in-pod service-account token, stripping trailing whitespace.
inline std::string load_service_account_token(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read service-account token at " + path);
  std::string token((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  while (!token.empty() && (token.back() == '\n' || token.back() == '\r' ||
                            token.back() == ' ' || token.back() == '\t')) {
    token.pop_back();
  }
  return token;
}

class KubeApiGateway : public ClusterGateway {
 public:
  KubeApiGateway(HttpTransport& transport, ClusterCredential credential, Clock& clock,
                 std::uint32_t poll_interval_ms = 500)
      : transport_(transport),
        credential_(std::move(credential)),
        clock_(clock),
        poll_interval_ms_(poll_interval_ms) {}

  void patch_container_image(const std::string& pod_name,
                             const std::string& container_name,
                             const std::string& new_image) override {
    const nlohmann::json pod = fetch_pod(pod_name);
    const std::size_t index = container_index(pod, pod_name, container_name);
    const HttpResponse response =
        transport_.patch(pod_path(pod_name), "application/json-patch+json",
                         image_patch_body(index, new_image), auth_headers());
    check_status(response, "patch pod '" + pod_name + "'");
  }

  ContainerStatus get_container_status(const std::string& pod_name,
                                       const std::string& container_name) override {
    return status_from_pod(fetch_pod(pod_name), pod_name, container_name);
  }

  ContainerStatus await_container_running(const std::string& pod_name,
                                          const std::string& container_name,
                                          const std::string& expected_image,
                                          std::uint32_t timeout_seconds) override {
    return poll_until_running(*this, clock_, pod_name, container_name, expected_image,
                              timeout_seconds, poll_interval_ms_);
  }

  /// Derives ContainerStatus from a pod API object: the assigned image
  /// comes from the spec, the live state from the status block. A status
  /// block that has not caught up with a fresh patch still reports the old
  /// live image, which is exactly what polling relies on.
  static ContainerStatus status_from_pod(const nlohmann::json& pod,
                                         const std::string& pod_name,
                                         const std::string& container_name) {
    ContainerStatus status;
    status.container_name = container_name;
    bool in_spec = false;
    for (const auto& container : pod.at("spec").at("containers")) {
      if (container.at("name").get<std::string>() == container_name) {
        status.image = container.at("image").get<std::string>();
        in_spec = true;
        break;
      }
    }
    if (!in_spec) {
      throw NotFoundError("container '" + container_name + "' not found in pod '" +
                          pod_name + "'");
    }
    if (!pod.contains("status") || !pod.at("status").contains("containerStatuses")) {
      return status;
    }
    for (const auto& cs : pod.at("status").at("containerStatuses")) {
      if (cs.at("name").get<std::string>() != container_name) continue;
      status.restart_count = cs.value("restartCount", 0u);
      const nlohmann::json state = cs.value("state", nlohmann::json::object());
      if (state.contains("running")) {
        status.state = ContainerState::Running;
        status.running_image = cs.value("image", std::string());
      } else if (state.contains("terminated")) {
        status.state = ContainerState::Terminated;
      } else {
        status.state = ContainerState::Waiting;
        if (state.contains("waiting") && state.at("waiting").contains("reason")) {
          status.waiting_reason = state.at("waiting").at("reason").get<std::string>();
        }
      }
      break;
    }
    return status;
  }

 private:
  std::string pod_path(const std::string& pod_name) const {
    return "/api/v1/namespaces/" + credential_.namespace_ + "/pods/" + pod_name;
  }

  HttpHeaders auth_headers() const {
    HttpHeaders headers;
    if (!credential_.bearer_token.empty()) {
      headers.emplace_back("Authorization", "Bearer " + credential_.bearer_token);
    }
    return headers;
  }

  static void check_status(const HttpResponse& response, const std::string& action) {
    if (response.status == 200 || response.status == 201) return;
    if (response.status == 401 || response.status == 403) {
      throw AuthError("not authorized to " + action + " (status " +
                      std::to_string(response.status) + ")");
    }
    if (response.status == 404) throw NotFoundError(action + ": not found");
    throw TransportError(action + " failed with status " +
                         std::to_string(response.status));
  }

  nlohmann::json fetch_pod(const std::string& pod_name) {
    const HttpResponse response = transport_.get(pod_path(pod_name), auth_headers());
    check_status(response, "get pod '" + pod_name + "'");
    try {
      return nlohmann::json::parse(response.body);
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("malformed pod object: ") + e.what());
    }
  }

  static std::size_t container_index(const nlohmann::json& pod,
                                     const std::string& pod_name,
                                     const std::string& container_name) {
    const auto& containers = pod.at("spec").at("containers");
    for (std::size_t i = 0; i < containers.size(); ++i) {
      if (containers[i].at("name").get<std::string>() == container_name) return i;
    }
    throw NotFoundError("container '" + container_name + "' not found in pod '" +
                        pod_name + "'");
  }

  HttpTransport& transport_;
  ClusterCredential credential_;
  Clock& clock_;
  std::uint32_t poll_interval_ms_;
};

}  // namespace podpilot
