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
// The two-container pod blueprint. The payload container is created on a
// small parking image running the bootstrap wait loop; the task image is
// bound later by patching, so no task-specific detail appears here. Both
// containers share a process namespace and an ephemeral volume; a second
// volume stays private to the pilot so payload code can never reach the
// pilot's working state.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "podpilot/error.hpp"
#include "podpilot/model.hpp"
#include "podpilot/wrapper.hpp"

namespace podpilot {

inline constexpr const char* kSharedVolumeName = "shared";
inline constexpr const char* kPrivateVolumeName = "pilot-private";

enum class VolumeKind { EphemeralEmpty, HostAgnosticScratch };
enum class RestartPolicy { Always, OnFailure };
enum class ManifestFormat { Yaml, Json };

inline const char* to_string(RestartPolicy policy) {
  return policy == RestartPolicy::Always ? "Always" : "OnFailure";
}

struct VolumeMount {
  std::string volume_name;
  std::string mount_path;

  bool operator==(const VolumeMount&) const = default;
};

struct ContainerSpec {
  std::string name;
  std::string image;
  std::vector<std::string> command;
  std::uint32_t run_as_user = 0;
  bool allow_privilege_escalation = false;
  std::vector<VolumeMount> volume_mounts;

  bool operator==(const ContainerSpec&) const = default;
};

struct VolumeSpec {
  std::string name;
  VolumeKind kind = VolumeKind::EphemeralEmpty;
  std::optional<std::uint64_t> size_limit_bytes;

  bool operator==(const VolumeSpec&) const = default;
};

struct PodBlueprint {
  std::string pod_name;
  std::string namespace_;
  bool share_process_namespace = true;
  std::vector<ContainerSpec> containers;
  std::vector<VolumeSpec> volumes;
  RestartPolicy restart_policy = RestartPolicy::Always;
  std::string service_account = "default";

  bool operator==(const PodBlueprint&) const = default;

  const ContainerSpec* find_container(const std::string& name) const {
    for (const auto& c : containers) {
      if (c.name == name) return &c;
    }
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Builds the pod blueprint for a pilot. The payload container deliberately
/// knows nothing about any task: parking image, bootstrap command, and the
/// shared mount are all that ever appear in the manifest.
inline PodBlueprint build_pod_blueprint(const PilotConfig& config,
                                        const std::string& pilot_image) {
  ensure_valid(config);
  if (pilot_image.empty()) throw ConfigError("pilot image must be nonempty");

  PodBlueprint blueprint;
  blueprint.pod_name = config.pod_name;
  blueprint.namespace_ = config.namespace_;
  blueprint.share_process_namespace = true;
  // Restart policy Always lets the cluster runtime recreate the payload
  // container after each parking-image patch; the pilot itself never needs
  // kill authority.
  blueprint.restart_policy = RestartPolicy::Always;
  blueprint.service_account = config.service_account;

  ContainerSpec pilot;
  pilot.name = config.pilot_container_name;
  pilot.image = pilot_image;
  pilot.command = {"podpilot", "run"};
  pilot.run_as_user = 0;
  pilot.allow_privilege_escalation = false;
  pilot.volume_mounts = {{kSharedVolumeName, config.shared_dir},
                         {kPrivateVolumeName, config.private_dir}};

  ContainerSpec payload;
  payload.name = config.payload_container_name;
  payload.image = config.parking_image;
  payload.command = generate_bootstrap_command(config);
  payload.run_as_user = 0;
  payload.allow_privilege_escalation = false;
  payload.volume_mounts = {{kSharedVolumeName, config.shared_dir}};

  blueprint.containers = {std::move(pilot), std::move(payload)};
  blueprint.volumes = {{kSharedVolumeName, VolumeKind::EphemeralEmpty, std::nullopt},
                       {kPrivateVolumeName, VolumeKind::EphemeralEmpty, std::nullopt}};
  return blueprint;
}

// ---------------------------------------------------------------------------
// Lint
// ---------------------------------------------------------------------------

/// Structural and security diagnostics. An empty result means the blueprint
/// satisfies every invariant the late-binding scheme depends on.
inline std::vector<std::string> lint_blueprint(const PodBlueprint& blueprint) {
  std::vector<std::string> diags;
  if (!blueprint.share_process_namespace) {
    diags.push_back("shareProcessNamespace must be true");
  }
  if (blueprint.containers.size() != 2) {
    diags.push_back("blueprint must have exactly two containers");
    return diags;
  }
  const ContainerSpec& first = blueprint.containers[0];
  const ContainerSpec& second = blueprint.containers[1];
  if (first.name == second.name) {
    diags.push_back("containers must have distinct names");
    return diags;
  }
  // The pilot is the container that mounts the private volume; the payload
  // is the other one. Falls back to declaration order when neither does.
  auto mounts = [](const ContainerSpec& c, const std::string& volume) {
    for (const auto& m : c.volume_mounts) {
      if (m.volume_name == volume) return true;
    }
    return false;
  };
  const bool second_is_pilot =
      mounts(second, kPrivateVolumeName) && !mounts(first, kPrivateVolumeName);
  const ContainerSpec& pilot = second_is_pilot ? second : first;
  const ContainerSpec& payload = second_is_pilot ? first : second;

  for (const char* required : {kSharedVolumeName, kPrivateVolumeName}) {
    bool found = false;
    for (const auto& v : blueprint.volumes) {
      if (v.name == required) found = true;
    }
    if (!found) diags.push_back(std::string("missing volume '") + required + "'");
  }
  for (const auto& v : blueprint.volumes) {
    if (v.size_limit_bytes && *v.size_limit_bytes == 0) {
      diags.push_back("volume '" + v.name + "' has a zero size limit");
    }
  }
  for (const auto& c : blueprint.containers) {
    if (c.run_as_user != 0) {
      diags.push_back("container '" + c.name + "' must run as the container pseudo-root uid");
    }
    for (const auto& m : c.volume_mounts) {
      bool known = false;
      for (const auto& v : blueprint.volumes) {
        if (v.name == m.volume_name) known = true;
      }
      if (!known) {
        diags.push_back("container '" + c.name + "' mounts unknown volume '" +
                        m.volume_name + "'");
      }
    }
  }
  if (payload.allow_privilege_escalation) {
    diags.push_back("payload container must set allowPrivilegeEscalation=false");
  }
  auto mount_path = [](const ContainerSpec& c,
                       const std::string& volume) -> std::optional<std::string> {
    for (const auto& m : c.volume_mounts) {
      if (m.volume_name == volume) return m.mount_path;
    }
    return std::nullopt;
  };
  const auto pilot_shared = mount_path(pilot, kSharedVolumeName);
  const auto payload_shared = mount_path(payload, kSharedVolumeName);
  if (!pilot_shared || !payload_shared) {
    diags.push_back("shared volume must be mounted in both containers");
  } else if (*pilot_shared != *payload_shared) {
    diags.push_back("shared volume must be mounted at the same path in both containers");
  }
  if (!mounts(pilot, kPrivateVolumeName)) {
    diags.push_back("private volume must be mounted in the pilot container");
  }
  if (mounts(payload, kPrivateVolumeName)) {
    diags.push_back("private volume exposed to payload");
  }
  return diags;
}

// ---------------------------------------------------------------------------
// Manifest encoding
// ---------------------------------------------------------------------------

namespace detail {

inline std::string yaml_quote(const std::string& s) {
  std::string out = "\"";
  for (const char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '"': out += "\\\""; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(c);
    }
  }
  out.push_back('"');
  return out;
}

inline nlohmann::ordered_json container_to_json(const ContainerSpec& c) {
  nlohmann::ordered_json mounts = nlohmann::ordered_json::array();
  for (const auto& m : c.volume_mounts) {
    mounts.push_back({{"name", m.volume_name}, {"mountPath", m.mount_path}});
  }
  return nlohmann::ordered_json{
      {"name", c.name},
      {"image", c.image},
      {"command", c.command},
      {"securityContext",
       {{"runAsUser", c.run_as_user},
        {"allowPrivilegeEscalation", c.allow_privilege_escalation}}},
      {"volumeMounts", std::move(mounts)}};
}

inline nlohmann::ordered_json volume_to_json(const VolumeSpec& v) {
  nlohmann::ordered_json j{{"name", v.name}};
  if (v.kind == VolumeKind::EphemeralEmpty) {
    nlohmann::ordered_json empty_dir = nlohmann::ordered_json::object();
    if (v.size_limit_bytes) empty_dir["sizeLimit"] = std::to_string(*v.size_limit_bytes);
    j["emptyDir"] = std::move(empty_dir);
  } else {
    nlohmann::ordered_json claim_spec{{"accessModes", {"ReadWriteOnce"}}};
    if (v.size_limit_bytes) {
      claim_spec["resources"] = {
          {"requests", {{"storage", std::to_string(*v.size_limit_bytes)}}}};
    }
    j["ephemeral"] = {{"volumeClaimTemplate", {{"spec", std::move(claim_spec)}}}};
  }
  return j;
}

inline nlohmann::ordered_json blueprint_to_json(const PodBlueprint& blueprint) {
  nlohmann::ordered_json containers = nlohmann::ordered_json::array();
  for (const auto& c : blueprint.containers) containers.push_back(container_to_json(c));
  nlohmann::ordered_json volumes = nlohmann::ordered_json::array();
  for (const auto& v : blueprint.volumes) volumes.push_back(volume_to_json(v));
  return nlohmann::ordered_json{
      {"apiVersion", "v1"},
      {"kind", "Pod"},
      {"metadata",
       {{"name", blueprint.pod_name}, {"namespace", blueprint.namespace_}}},
      {"spec",
       {{"shareProcessNamespace", blueprint.share_process_namespace},
        {"restartPolicy", to_string(blueprint.restart_policy)},
        {"serviceAccountName", blueprint.service_account},
        {"containers", std::move(containers)},
        {"volumes", std::move(volumes)}}}};
}

/// Emits the manifest tree as YAML with a fixed layout: two-space indent,
/// every string double-quoted, booleans and integers bare. Keeping the
/// writer in-house makes the rendered text reproducible byte for byte.
inline void write_yaml(const nlohmann::ordered_json& node, std::ostringstream& out,
                       int indent, bool list_item) {
  const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
  auto scalar = [](const nlohmann::ordered_json& v) -> std::string {
    if (v.is_string()) return yaml_quote(v.get<std::string>());
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  };
  if (node.is_object()) {
    bool first = true;
    if (node.empty()) {
      out << (list_item ? pad + "- {}" : pad + "{}") << "\n";
      return;
    }
    for (const auto& [key, value] : node.items()) {
      std::string prefix = pad;
      if (list_item && first) {
        prefix = pad.substr(0, pad.size() - 2) + "- ";
      }
      first = false;
      if (value.is_object() && !value.empty()) {
        out << prefix << key << ":\n";
        write_yaml(value, out, indent + 1, false);
      } else if (value.is_array() && !value.empty()) {
        out << prefix << key << ":\n";
        write_yaml(value, out, indent + 1, false);
      } else if (value.is_object()) {
        out << prefix << key << ": {}\n";
      } else if (value.is_array()) {
        out << prefix << key << ": []\n";
      } else {
        out << prefix << key << ": " << scalar(value) << "\n";
      }
    }
  } else if (node.is_array()) {
    for (const auto& item : node) {
      if (item.is_object()) {
        write_yaml(item, out, indent + 1, true);
      } else {
        out << pad << "- " << scalar(item) << "\n";
      }
    }
  } else {
    out << pad << scalar(node) << "\n";
  }
}

/// Converts a parsed YAML tree to the JSON tree shape so both manifest
/// encodings share one decoder. Quoted scalars stay strings; plain scalars
/// may be booleans or integers.
inline nlohmann::json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Map: {
      nlohmann::json j = nlohmann::json::object();
      for (const auto& kv : node) {
        j[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      }
      return j;
    }
    case YAML::NodeType::Sequence: {
      nlohmann::json j = nlohmann::json::array();
      for (const auto& item : node) j.push_back(yaml_to_json(item));
      return j;
    }
    case YAML::NodeType::Scalar: {
      const std::string& s = node.Scalar();
      if (node.Tag() != "!") {
        if (s == "true") return true;
        if (s == "false") return false;
        if (!s.empty() && s.find_first_not_of("0123456789") == std::string::npos &&
            s.size() <= 18) {
          return std::stoll(s);
        }
      }
      return s;
    }
    case YAML::NodeType::Null:
      return nullptr;
    default:
      return nullptr;
  }
}

/// Accepts the quantity spellings the API server emits for byte sizes: a
/// plain integer, a binary suffix (Ki/Mi/Gi/Ti), or a decimal one (k/M/G/T).
inline std::uint64_t parse_quantity(const nlohmann::json& v, const std::string& what) {
  std::string s;
  if (v.is_string()) {
    s = v.get<std::string>();
  } else if (v.is_number_unsigned() || v.is_number_integer()) {
    return v.get<std::uint64_t>();
  } else {
    throw ParseError(what + " must be a quantity");
  }
  const std::size_t digits = s.find_first_not_of("0123456789");
  if (s.empty() || digits == 0) {
    throw ParseError(what + " is not a byte count: '" + s + "'");
  }
  const std::uint64_t value = std::stoull(s.substr(0, digits));
  if (digits == std::string::npos) return value;
  const std::string suffix = s.substr(digits);
  static const std::map<std::string, std::uint64_t> kScales = {
      {"Ki", 1ull << 10}, {"Mi", 1ull << 20}, {"Gi", 1ull << 30}, {"Ti", 1ull << 40},
      {"k", 1000ull},     {"M", 1000000ull},  {"G", 1000000000ull},
      {"T", 1000000000000ull}};
  const auto scale = kScales.find(suffix);
  if (scale == kScales.end()) {
    throw ParseError(what + " is not a byte count: '" + s + "'");
  }
  return value * scale->second;
}

inline PodBlueprint blueprint_from_json(const nlohmann::json& j) {
  try {
    PodBlueprint blueprint;
    const auto& metadata = j.at("metadata");
    blueprint.pod_name = metadata.at("name").get<std::string>();
    blueprint.namespace_ = metadata.value("namespace", "default");
    const auto& spec = j.at("spec");
    blueprint.share_process_namespace = spec.value("shareProcessNamespace", false);
    const std::string policy = spec.value("restartPolicy", "Always");
    if (policy == "Always") {
      blueprint.restart_policy = RestartPolicy::Always;
    } else if (policy == "OnFailure") {
      blueprint.restart_policy = RestartPolicy::OnFailure;
    } else {
      throw ParseError("unsupported restartPolicy '" + policy + "'");
    }
    blueprint.service_account = spec.value("serviceAccountName", "default");
    for (const auto& cj : spec.at("containers")) {
      ContainerSpec c;
      c.name = cj.at("name").get<std::string>();
      c.image = cj.at("image").get<std::string>();
      if (cj.contains("command")) {
        c.command = cj.at("command").get<std::vector<std::string>>();
      }
      if (cj.contains("securityContext")) {
        const auto& sc = cj.at("securityContext");
        c.run_as_user = sc.value("runAsUser", 0u);
        c.allow_privilege_escalation = sc.value("allowPrivilegeEscalation", false);
      }
      if (cj.contains("volumeMounts")) {
        for (const auto& mj : cj.at("volumeMounts")) {
          c.volume_mounts.push_back({mj.at("name").get<std::string>(),
                                     mj.at("mountPath").get<std::string>()});
        }
      }
      blueprint.containers.push_back(std::move(c));
    }
    if (spec.contains("volumes")) {
      for (const auto& vj : spec.at("volumes")) {
        VolumeSpec v;
        v.name = vj.at("name").get<std::string>();
        if (vj.contains("emptyDir")) {
          v.kind = VolumeKind::EphemeralEmpty;
          const auto& ed = vj.at("emptyDir");
          if (ed.is_object() && ed.contains("sizeLimit")) {
            v.size_limit_bytes = parse_quantity(ed.at("sizeLimit"),
                                                "volume '" + v.name + "' sizeLimit");
          }
        } else if (vj.contains("ephemeral")) {
          v.kind = VolumeKind::HostAgnosticScratch;
          const auto& claim_spec =
              vj.at("ephemeral").at("volumeClaimTemplate").at("spec");
          if (claim_spec.contains("resources")) {
            v.size_limit_bytes =
                parse_quantity(claim_spec.at("resources").at("requests").at("storage"),
                               "volume '" + v.name + "' storage request");
          }
        } else {
          throw ParseError("volume '" + v.name + "' has an unsupported kind");
        }
        blueprint.volumes.push_back(std::move(v));
      }
    }
    return blueprint;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
}

}  // namespace detail

inline std::string render_manifest(const PodBlueprint& blueprint, ManifestFormat format) {
  const nlohmann::ordered_json tree = detail::blueprint_to_json(blueprint);
  if (format == ManifestFormat::Json) {
    return tree.dump(2) + "\n";
  }
  std::ostringstream out;
  detail::write_yaml(tree, out, 0, false);
  return out.str();
}

inline PodBlueprint parse_manifest(const std::string& text, ManifestFormat format) {
  if (format == ManifestFormat::Json) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("manifest: ") + e.what());
    }
    return detail::blueprint_from_json(j);
  }
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  return detail::blueprint_from_json(detail::yaml_to_json(root));
}

}  // namespace podpilot
