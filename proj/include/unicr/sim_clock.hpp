/* Copyright 2026 The unicr Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <chrono>

namespace unicr {

// All simulated durations are microseconds. Nothing in the simulator reads
// the wall clock.
using SimDuration = std::chrono::microseconds;

class SimClock {
 public:
  SimDuration now() const noexcept { return now_; }
  void advance(SimDuration d) noexcept {
    if (d.count() > 0) now_ += d;
  }

 private:
  SimDuration now_{0};
};

}  // namespace unicr
