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

#include <chrono>
#include <cstdint>
#include <thread>

namespace podpilot {

/// Time source abstraction. Production code sleeps for real; the simulator
/// and the repository tests substitute a virtual clock so whole lifecycles
/// run in milliseconds of wall time.
class Clock {
 public:
  virtual ~Clock() = default;

  /// Monotonic milliseconds since an arbitrary origin.
  virtual std::int64_t now_ms() = 0;

  /// Blocks (or advances virtual time) for the given duration.
  virtual void sleep_ms(std::uint64_t ms) = 0;

  /// Seconds since the unix epoch, for lease expiry and report timestamps.
  virtual std::int64_t unix_seconds() = 0;
};

class WallClock final : public Clock {
 public:
  std::int64_t now_ms() override {
    const auto t = std::chrono::steady_clock::now().time_since_epoch();
    return std::chrono::duration_cast<std::chrono::milliseconds>(t).count();
  }

  void sleep_ms(std::uint64_t ms) override {
    std::this_thread::sleep_for(std::chrono::milliseconds(ms));
  }

  std::int64_t unix_seconds() override {
    const auto t = std::chrono::system_clock::now().time_since_epoch();
    return std::chrono::duration_cast<std::chrono::seconds>(t).count();
  }
};

/// Deterministic clock that only moves when told to. sleep_ms() advances it.
class VirtualClock final : public Clock {
 public:
  explicit VirtualClock(std::int64_t epoch_seconds = 1700000000)
      : epoch_seconds_(epoch_seconds) {}

  std::int64_t now_ms() override { return now_ms_; }
  void sleep_ms(std::uint64_t ms) override { now_ms_ += static_cast<std::int64_t>(ms); }
  std::int64_t unix_seconds() override {
    return epoch_seconds_ + now_ms_ / 1000;
  }

  void advance_ms(std::uint64_t ms) { now_ms_ += static_cast<std::int64_t>(ms); }

 private:
  std::int64_t now_ms_ = 0;
  std::int64_t epoch_seconds_;
};

}  // namespace podpilot
