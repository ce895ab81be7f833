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

#pragma once

#include <stdexcept>
#include <string>

namespace podpilot {

/// Base class for all podpilot errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// A configuration value violates one of its invariants.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Text input (report, manifest, scenario, task file) could not be parsed.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A state machine received an event that is not admissible in its phase.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Network-level failure talking to a remote service. Retryable.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// The remote service rejected our credential.
class AuthError : public Error {
 public:
  using Error::Error;
};

/// A named object (pod, container, task, claim) does not exist.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Input staging failed; the destination directory is left unchanged
/// when the failure is detected before extraction begins.
class StagingError : public Error {
 public:
  using Error::Error;
};

/// An operation was attempted against a claim whose lease has run out.
class ClaimExpiredError : public Error {
 public:
  using Error::Error;
};

}  // namespace podpilot
