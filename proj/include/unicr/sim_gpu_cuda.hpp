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
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unicr/bytes.hpp"
#include "unicr/error.hpp"
#include "unicr/sim_clock.hpp"
#include "unicr/sim_host.hpp"

namespace unicr {

struct CudaDeviceInfo {
  std::string model;  // e.g. "A100-80GB"
  std::uint64_t memory = 0;
  friend bool operator==(const CudaDeviceInfo&, const CudaDeviceInfo&) = default;
};

enum class CudaPhase { Running, Locked, Checkpointed };
std::string_view to_string(CudaPhase p);

struct DeviceAlloc {
  std::uint32_t ordinal = 0;
  std::uint64_t addr = 0;
  Bytes contents;  // size == contents.size()
  friend bool operator==(const DeviceAlloc&, const DeviceAlloc&) = default;
};

struct StreamState {
  std::uint32_t id = 0;
  std::uint32_t ordinal = 0;
  std::uint64_t submitted = 0;  // operations accepted on this stream
  friend bool operator==(const StreamState&, const StreamState&) = default;
};

struct ContextState {
  std::uint32_t id = 0;
  std::uint32_t ordinal = 0;
  friend bool operator==(const ContextState&, const ContextState&) = default;
};

struct CallbackSpec {
  std::uint32_t id = 0;
  std::optional<SimDuration> completion_delay;  // nullopt: never completes
  friend bool operator==(const CallbackSpec&, const CallbackSpec&) = default;
};

// Query-only device handle obtained through the management library during
// initialisation. The driver cannot checkpoint these; they are recorded and
// presented again verbatim.
struct NvmlHandle {
  std::uint32_t index = 0;
  std::string uuid;
  bool leftover = true;
  friend bool operator==(const NvmlHandle&, const NvmlHandle&) = default;
};

struct CudaTaskState {
  Pid pid = 0;
  CudaPhase phase = CudaPhase::Running;
  std::map<std::uint64_t, DeviceAlloc> device_allocs;
  std::vector<StreamState> streams;
  std::vector<ContextState> contexts;
  std::vector<CallbackSpec> pending_callbacks;
  std::vector<NvmlHandle> nvml_handles;
  std::optional<Bytes> host_blob;  // present iff phase == Checkpointed
  std::uint64_t next_alloc_id = 1;
  std::uint64_t next_addr = 0x7f0000000000ULL;

  std::uint64_t device_bytes() const;
  friend bool operator==(const CudaTaskState&, const CudaTaskState&) = default;
};

// --- API surface -------------------------------------------------------------

enum class ApiOp : std::uint8_t {
  Malloc,
  Free,
  MemcpyHtoD,
  MemcpyDtoH,
  MemcpyAsync,  // host-to-device on a stream
  LaunchKernel,
  StreamCreate,
  Synchronize,
};
std::string_view to_string(ApiOp op);

struct ApiCall {
  ApiOp op = ApiOp::Synchronize;
  std::uint32_t ordinal = 0;
  std::uint64_t handle = 0;  // allocation or stream id the call acts on
  std::uint64_t source = 0;  // LaunchKernel: allocation read by the kernel, 0 = none
  std::uint64_t stream = 0;
  std::uint64_t offset = 0;
  std::uint64_t size = 0;
  std::uint64_t param = 0;
  Bytes payload;
  bool nondeterministic = false;  // kernel mixes in hardware scheduling order
  std::optional<std::uint64_t> host_addr;  // kernel reads mapped host memory directly
  friend bool operator==(const ApiCall&, const ApiCall&) = default;
};

struct ApiResult {
  std::uint64_t handle = 0;
  Bytes data;
};

// Something that sits between an application and the driver's API. The
// driver path of the engine installs none.
class ApiInterposer {
 public:
  virtual ~ApiInterposer() = default;
  virtual ApiResult intercept(Pid pid, const ApiCall& call,
                              const std::function<ApiResult(const ApiCall&)>& forward) = 0;
};

struct LockResult {
  SimDuration waited{0};
};

// Thrown when a lock does not complete within its timeout. All listed tasks
// have been returned to Running with their state untouched.
class LockTimeoutError : public Error {
 public:
  LockTimeoutError(const std::string& message, std::vector<Pid> rolled_back)
      : Error(ErrorKind::TimeoutExpired, message), rolled_back_(std::move(rolled_back)) {}
  const std::vector<Pid>& rolled_back() const noexcept { return rolled_back_; }

 private:
  std::vector<Pid> rolled_back_;
};

// Simulated cost model of the driver, in simulated microseconds.
struct CudaCosts {
  SimDuration api_call{5};
  SimDuration lock_base{200};
  SimDuration unlock{150};
  SimDuration per_mib_transfer{400};  // device <-> host memory
};

class CudaDriver {
 public:
  CudaDriver(SimClock& clock, std::vector<CudaDeviceInfo> devices, CudaCosts costs = {});

  const std::vector<CudaDeviceInfo>& devices() const noexcept { return devices_; }
  std::string device_path(std::uint32_t ordinal) const;

  CudaTaskState& create_task(Pid pid);
  bool has_task(Pid pid) const { return tasks_.contains(pid); }
  const CudaTaskState& task(Pid pid) const;
  CudaTaskState& mutable_task(Pid pid);
  std::vector<Pid> pids() const;
  void release(Pid pid);

  // Application-side entry point. Calls pass through the installed
  // interposer, if any.
  ApiResult call(Pid pid, const ApiCall& call);
  void set_interposer(ApiInterposer* interposer) noexcept { interposer_ = interposer; }
  std::uint64_t interposed_calls() const noexcept { return interposed_calls_; }
  std::uint64_t api_calls() const noexcept { return api_calls_; }

  // Reports whether the CPU side of a task can run. Locking needs the task
  // to be runnable; a stopped task blocks the lock until it times out.
  void set_runnable_probe(std::function<bool(Pid)> probe) { runnable_ = std::move(probe); }
  // Host memory reader for kernels that consume mapped host memory.
  void set_host_reader(std::function<Bytes(Pid, std::uint64_t, std::uint64_t)> reader) {
    host_reader_ = std::move(reader);
  }

  // Checkpoint actions. Each acts on the whole pid set atomically.
  LockResult lock(std::span<const Pid> pids, SimDuration timeout);
  void checkpoint_to_host(std::span<const Pid> pids);
  void restore_from_host(std::span<const Pid> pids, const std::map<std::uint32_t, std::uint32_t>& device_map);
  void unlock(std::span<const Pid> pids);

  // Recreates a checkpointed task from its host blob on this driver, as
  // happens when the process memory holding the blob is restored.
  void adopt_checkpointed(Pid pid, Bytes blob);

  // Accepted device-side operations per ordinal.
  std::uint64_t mutation_counter(std::uint32_t ordinal) const;
  std::uint64_t state_hash(Pid pid) const;
  std::uint64_t state_hash() const;

  static std::map<std::uint32_t, std::uint32_t> identity_map(std::size_t n);

 private:
  ApiResult execute(Pid pid, const ApiCall& call);
  CudaTaskState& running_task(Pid pid);
  void charge_transfer(std::uint64_t bytes);

  SimClock& clock_;
  std::vector<CudaDeviceInfo> devices_;
  CudaCosts costs_;
  std::map<Pid, CudaTaskState> tasks_;
  std::vector<std::uint64_t> mutations_;
  ApiInterposer* interposer_ = nullptr;
  std::uint64_t interposed_calls_ = 0;
  std::uint64_t api_calls_ = 0;
  std::uint64_t entropy_;
  std::function<bool(Pid)> runnable_;
  std::function<Bytes(Pid, std::uint64_t, std::uint64_t)> host_reader_;
  mutable std::recursive_mutex mu_;
};

// Host blob codec. The layout is owned by the simulator:
//   magic "UCUDABLB", u32 version,
//   source devices, allocations, streams, contexts, callbacks, NVML handles,
//   allocator cursors, trailing crc32 of everything before it.
Bytes encode_host_blob(const CudaTaskState& state, const std::vector<CudaDeviceInfo>& source_devices);
struct DecodedHostBlob {
  CudaTaskState state;  // phase Locked, host_blob unset
  std::vector<CudaDeviceInfo> source_devices;
};
DecodedHostBlob decode_host_blob(std::span<const std::uint8_t> blob);

}  // namespace unicr
