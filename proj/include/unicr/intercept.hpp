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

#include <cstdint>
#include <string>
#include <vector>

#include "unicr/sim_gpu_cuda.hpp"

namespace unicr {

enum class WorkloadVariant : std::uint8_t {
  Deterministic,
  Nondeterministic,  // a kernel depends on hardware scheduling order
  HostImplicit,      // a kernel reads mapped host memory the log never sees
};

struct TrainingSpec {
  std::uint32_t batches_per_epoch = 4;
  std::uint64_t param_bytes = 16384;
  std::uint64_t batch_bytes = 4096;
  std::uint32_t ordinal = 0;
  std::uint64_t seed = 1;
  WorkloadVariant variant = WorkloadVariant::Deterministic;
};

// A synthetic training loop expressed as device API calls.
class TrainingWorkload {
 public:
  static constexpr std::uint64_t kInitCalls = 5;
  static constexpr std::uint64_t kCallsPerBatch = 6;
  static constexpr std::uint64_t kHostAddr = 0x10000;

  explicit TrainingWorkload(TrainingSpec spec) : spec_(spec) {}

  const TrainingSpec& spec() const noexcept { return spec_; }
  std::uint64_t calls_per_epoch() const noexcept { return kCallsPerBatch * spec_.batches_per_epoch; }

  void init(CudaDriver& driver, Pid pid);
  void epoch(CudaDriver& driver, Pid pid);
  std::uint64_t epochs_done() const noexcept { return epochs_; }

 private:
  TrainingSpec spec_;
  std::uint64_t stream_ = 0;
  std::uint64_t params_ = 0;
  std::uint64_t batch_ = 0;
  std::uint64_t grad_ = 0;
  std::uint64_t epochs_ = 0;
};

struct CallLogEntry {
  std::string api_name;
  std::uint64_t params_digest = 0;
  std::vector<std::uint64_t> handles_created;
  SimDuration overhead{0};
  ApiCall call;  // as forwarded to the driver
  std::uint64_t result_digest = 0;
};

struct CallLog {
  std::vector<CallLogEntry> entries;
  std::size_t size() const noexcept { return entries.size(); }
  SimDuration total_overhead() const;
};

std::uint64_t params_digest(const ApiCall& call);

// Device proxy: every call is logged and charged a fixed overhead; async
// copies are forwarded as synchronous ones without their stream.
class DeviceProxy final : public ApiInterposer {
 public:
  DeviceProxy(SimClock& clock, SimDuration per_call_overhead = SimDuration(20))
      : clock_(clock), overhead_(per_call_overhead) {}

  ApiResult intercept(Pid pid, const ApiCall& call, const std::function<ApiResult(const ApiCall&)>& forward) override;
  const CallLog& log() const noexcept { return log_; }

 private:
  SimClock& clock_;
  SimDuration overhead_;
  CallLog log_;
};

struct InterceptRun {
  std::uint64_t call_count = 0;
  SimDuration total_overhead{0};
  SimDuration elapsed{0};
  CallLog log;
  CudaTaskState state;
};

InterceptRun run_intercepted(const TrainingSpec& spec, std::uint32_t epochs,
                             SimDuration per_call_overhead = SimDuration(20));

struct DriverRun {
  std::uint64_t interposed_calls = 0;
  SimDuration elapsed{0};
  std::vector<SimDuration> epoch_times;
  CudaTaskState state;
};

// The same workload on the driver path. With `checkpoint_support` the engine
// and its plugins are loaded alongside; they stay off the API path.
DriverRun run_driver_path(const TrainingSpec& spec, std::uint32_t epochs, bool checkpoint_support);

// Re-executes a log on a fresh driver, remapping recorded handles. Throws
// NonDeterministicDivergence when a result differs from the recorded one.
const CudaTaskState& replay_log(const CallLog& log, CudaDriver& fresh, Pid pid);

}  // namespace unicr
