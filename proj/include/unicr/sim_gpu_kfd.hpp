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

inline constexpr const char* kKfdPath = "/dev/kfd";
inline constexpr const char* kRenderNodePrefix = "/dev/dri/renderD";

struct KfdDeviceProps {
  std::string instruction_set;  // e.g. "gfx90a"
  std::uint32_t compute_units = 0;
  std::uint64_t vram = 0;
  bool host_vram_accessible = false;
  friend bool operator==(const KfdDeviceProps&, const KfdDeviceProps&) = default;
};

// Device identifier derived from the instruction set and compute unit count,
// mixed with a per-machine salt.
std::uint32_t compute_gpuid(const KfdDeviceProps& props, std::uint64_t salt);

struct KfdDevice {
  std::uint32_t gpuid = 0;
  KfdDeviceProps props;
  std::vector<std::uint32_t> links;  // gpuids of directly connected peers
  std::string render_node;
  friend bool operator==(const KfdDevice&, const KfdDevice&) = default;
};

struct GpuTopology {
  std::vector<KfdDevice> devices;

  const KfdDevice* find(std::uint32_t gpuid) const;
  std::optional<std::size_t> index_of(std::uint32_t gpuid) const;
  bool linked(std::uint32_t a, std::uint32_t b) const;
  friend bool operator==(const GpuTopology&, const GpuTopology&) = default;
};

// Builds a topology from device properties and an undirected link list over
// device indices. Identical devices get distinct gpuids: on a collision the
// salt is bumped until the id is unused.
GpuTopology make_topology(const std::vector<KfdDeviceProps>& props,
                          const std::vector<std::pair<int, int>>& links, std::uint64_t salt);

enum class BoKind : std::uint8_t { Vram, Gtt, Userptr, Doorbell, Mmio };
std::string_view to_string(BoKind k);
BoKind parse_bo_kind(std::string_view s);
bool has_contents(BoKind k);

struct BufferObject {
  std::uint64_t handle = 0;
  BoKind kind = BoKind::Vram;
  std::uint32_t gpuid = 0;
  std::uint64_t size = 0;
  std::uint64_t virtual_addr = 0;
  std::uint64_t mmap_offset = 0;  // identifies the BO within its render node
  // VRAM/GTT: device-side bytes. Userptr: empty in the driver (the pages are
  // host memory); filled from the host in checkpoint bundles.
  Bytes contents;
  friend bool operator==(const BufferObject&, const BufferObject&) = default;
};

enum class QueueKind : std::uint8_t { Compute, Dma };
std::string_view to_string(QueueKind k);

struct QueueBos {
  std::uint64_t ring_buffer = 0;
  std::uint64_t aql_queue = 0;
  std::uint64_t eop_buffer = 0;
  std::uint64_t ctx_save_area = 0;
  friend bool operator==(const QueueBos&, const QueueBos&) = default;
};

struct QueueState {
  std::uint32_t queue_id = 0;
  QueueKind kind = QueueKind::Compute;
  std::uint32_t gpuid = 0;
  Bytes control_stack;  // captured at eviction, cleared when mapped again
  Bytes mqd;
  std::uint64_t read_ptr = 0;
  std::uint64_t write_ptr = 0;
  std::uint64_t doorbell_offset = 0;
  std::uint64_t aql_ptr = 0;
  QueueBos user_bos;
  bool evicted = false;
  friend bool operator==(const QueueState&, const QueueState&) = default;
};

struct KfdEvent {
  std::uint32_t event_id = 0;
  bool signaled = false;
  friend bool operator==(const KfdEvent&, const KfdEvent&) = default;
};

enum class KfdRunState : std::uint8_t { Running, Paused, Restored };

struct KfdProcessState {
  Pid pid = 0;
  std::optional<Pid> opener;  // process holding the /dev/kfd descriptor
  KfdRunState state = KfdRunState::Running;
  std::map<std::uint64_t, BufferObject> bos;
  std::vector<QueueState> queues;
  std::vector<KfdEvent> events;
  std::uint64_t next_handle = 1;
  friend bool operator==(const KfdProcessState&, const KfdProcessState&) = default;
};

struct ProcessInfo {
  std::size_t bos = 0;
  std::size_t queues = 0;
  std::size_t events = 0;
  friend bool operator==(const ProcessInfo&, const ProcessInfo&) = default;
};

struct KfdCheckpointBundle {
  Pid pid = 0;
  GpuTopology topology;
  std::vector<BufferObject> bos;
  std::vector<QueueState> queues;
  std::vector<KfdEvent> events;
  std::uint64_t next_handle = 1;
  friend bool operator==(const KfdCheckpointBundle&, const KfdCheckpointBundle&) = default;
};

struct KfdCaller {
  Pid pid = 0;
  std::uint32_t capabilities = 0;
};

// Where a BO lives after restore, for translating CPU mappings.
struct BoRelocation {
  std::uint64_t handle = 0;
  std::uint32_t old_gpuid = 0;
  std::uint32_t new_gpuid = 0;
  std::uint64_t old_offset = 0;
  std::uint64_t new_offset = 0;
};

using GpuidMap = std::map<std::uint32_t, std::uint32_t>;

// Host memory as seen by the driver for userptr buffers.
class HostMemory {
 public:
  virtual ~HostMemory() = default;
  virtual bool is_mapped(Pid pid, std::uint64_t addr, std::uint64_t len) const = 0;
  virtual Bytes read(Pid pid, std::uint64_t addr, std::uint64_t len) const = 0;
};

struct KfdCosts {
  SimDuration ioctl{50};
  SimDuration per_mib_transfer{400};
};

class KfdDriver {
 public:
  KfdDriver(SimClock& clock, GpuTopology topology, std::uint64_t mmap_offset_base, KfdCosts costs = {});

  const GpuTopology& topology() const noexcept { return topology_; }
  void set_host_memory(const HostMemory* host) noexcept { host_ = host; }

  // Opens /dev/kfd on behalf of a process, creating its driver state if needed.
  void open(Pid pid);
  bool has_process(Pid pid) const { return procs_.contains(pid); }
  const KfdProcessState& process(Pid pid) const;
  std::vector<Pid> pids() const;
  void release(Pid pid);

  // Allocation interface used by applications.
  std::uint64_t alloc_bo(Pid pid, BoKind kind, std::uint32_t gpuid, std::uint64_t size, std::uint64_t va);
  std::uint32_t create_queue(Pid pid, QueueKind kind, std::uint32_t gpuid, QueueBos bos);
  std::uint32_t create_event(Pid pid);
  // Device-side write into a VRAM/GTT buffer, as a kernel dispatched on one
  // of the process's queues would do.
  void write_bo(Pid pid, std::uint64_t handle, std::uint64_t offset, std::span<const std::uint8_t> data);

  // Checkpoint/restore ioctls.
  ProcessInfo ioctl_process_info(const KfdCaller& caller, Pid pid);
  KfdCheckpointBundle ioctl_checkpoint(const KfdCaller& caller, Pid pid);
  void ioctl_unpause(const KfdCaller& caller, Pid pid);
  std::vector<BoRelocation> ioctl_restore(const KfdCaller& caller, Pid pid, const KfdCheckpointBundle& bundle,
                                          const GpuidMap& gpuid_map);
  void ioctl_resume(const KfdCaller& caller, Pid pid);

  std::uint64_t state_hash(Pid pid) const;
  std::uint64_t state_hash() const;

 private:
  KfdProcessState& proc(Pid pid);
  void authorize(const KfdCaller& caller, const KfdProcessState& p) const;
  std::uint64_t allocate_offset(std::uint32_t gpuid, std::uint64_t size);
  void charge_transfer(std::uint64_t bytes);

  SimClock& clock_;
  GpuTopology topology_;
  KfdCosts costs_;
  const HostMemory* host_ = nullptr;
  std::map<Pid, KfdProcessState> procs_;
  std::map<std::uint32_t, std::uint64_t> next_offset_;
  // Userptr contents recorded in a bundle, checked against host memory when
  // the process resumes.
  std::map<Pid, std::map<std::uint64_t, std::uint64_t>> pending_userptr_;
  mutable std::recursive_mutex mu_;
};

// Finds a device bijection from `from` onto `to` that preserves properties
// and connectivity. Returns nullopt and fills `report` when none exists.
std::optional<GpuidMap> match_topology(const GpuTopology& from, const GpuTopology& to, std::string* report);

// Verifies that `map` carries `from` onto `to`. Throws BadGpuidMap or
// TopologyIncompatible with a description of every difference.
void check_topology_map(const GpuTopology& from, const GpuTopology& to, const GpuidMap& map);

}  // namespace unicr
