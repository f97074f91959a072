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
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "unicr/bytes.hpp"
#include "json.hpp"

namespace unicr {

using Pid = std::int32_t;

inline constexpr std::uint64_t kPageSize = 4096;

enum class RunState { Running, Seized, Frozen };
std::string_view to_string(RunState s);

// Capability bits carried by a task's credentials.
enum Capability : std::uint32_t {
  kCapCheckpointRestore = 1u << 0,
  kCapSysAdmin = 1u << 1,
};

struct AnonymousBacking {
  friend bool operator==(const AnonymousBacking&, const AnonymousBacking&) = default;
};

struct DeviceFileBacking {
  std::string device_name;
  std::uint64_t mmap_offset = 0;
  friend bool operator==(const DeviceFileBacking&, const DeviceFileBacking&) = default;
};

using VmaBacking = std::variant<AnonymousBacking, DeviceFileBacking>;

struct Vma {
  std::uint64_t start = 0;
  std::uint64_t length = 0;
  VmaBacking backing;
  Bytes contents;  // empty for device-backed mappings

  std::uint64_t end() const noexcept { return start + length; }
  bool is_device() const noexcept { return std::holds_alternative<DeviceFileBacking>(backing); }
  const DeviceFileBacking* device() const noexcept { return std::get_if<DeviceFileBacking>(&backing); }
  bool contains(std::uint64_t addr, std::uint64_t len) const noexcept {
    return addr >= start && len <= length && addr - start <= length - len;
  }
  friend bool operator==(const Vma&, const Vma&) = default;
};

struct DeviceFd {
  int fd = -1;
  std::string path;
  friend bool operator==(const DeviceFd&, const DeviceFd&) = default;
};

// Parameters of the synthetic, seed-driven workload a task runs.
struct WorkloadParams {
  std::uint64_t seed = 0;
  std::uint32_t cpu_writes_per_step = 4;
  std::uint32_t device_writes_per_step = 2;
  friend bool operator==(const WorkloadParams&, const WorkloadParams&) = default;
};

struct SimTask {
  Pid pid = 0;
  Pid ppid = 0;
  std::vector<Pid> thread_ids;
  RunState run_state = RunState::Running;
  std::vector<Vma> vmas;  // sorted by start, non-overlapping
  std::vector<DeviceFd> open_devices;
  std::uint32_t capabilities = 0;
  WorkloadParams workload;
  // Register state of the workload. Collapsed into a counter: the next
  // step's randomness is derived from (seed, pid, steps).
  std::uint64_t steps = 0;

  Vma* find_vma(std::uint64_t addr, std::uint64_t len = 1);
  const Vma* find_vma(std::uint64_t addr, std::uint64_t len = 1) const;
  friend bool operator==(const SimTask&, const SimTask&) = default;
};

struct FreezerCgroup {
  enum class State { Thawed, Frozen };
  std::set<Pid> member_pids;
  State state = State::Thawed;
  friend bool operator==(const FreezerCgroup&, const FreezerCgroup&) = default;
};

class SimProcessTree {
 public:
  void register_device(const std::string& path);
  bool has_device(const std::string& path) const { return devices_.contains(path); }
  const std::set<std::string>& devices() const noexcept { return devices_; }

  // Inserts a task after validating its VMAs and device fds. The task joins
  // the tree's freezer cgroup.
  void add_task(SimTask task);
  void remove_task(Pid pid);
  // Adds a VMA to an existing task, keeping the layout sorted.
  void map_vma(Pid pid, Vma vma);

  bool contains(Pid pid) const { return tasks_.contains(pid); }
  SimTask& task(Pid pid);
  const SimTask& task(Pid pid) const;
  std::vector<Pid> pids() const;
  std::vector<Pid> children(Pid pid) const;
  const std::map<Pid, SimTask>& tasks() const noexcept { return tasks_; }
  std::size_t size() const noexcept { return tasks_.size(); }

  FreezerCgroup& freezer() noexcept { return freezer_; }
  const FreezerCgroup& freezer() const noexcept { return freezer_; }

  Bytes read_memory(Pid pid, std::uint64_t addr, std::uint64_t len) const;
  void write_memory(Pid pid, std::uint64_t addr, std::span<const std::uint8_t> data);

  // Fingerprint of every task's run state, layout, memory and registers.
  std::uint64_t state_hash() const;

 private:
  std::map<Pid, SimTask> tasks_;
  std::set<std::string> devices_;
  FreezerCgroup freezer_;
};

// Checks that VMAs are sorted-able without overlap and well-formed.
void validate_vmas(const std::vector<Vma>& vmas);

// --- Process tree specification -------------------------------------------

struct VmaSpec {
  std::uint64_t start = 0;
  std::uint64_t length = 0;
  std::optional<std::string> device;
  std::uint64_t offset = 0;
  std::optional<std::uint8_t> fill;  // default: seeded pseudo-random bytes
};

struct ProcessSpec {
  Pid pid = 0;
  Pid ppid = 0;
  std::uint32_t threads = 1;
  std::uint32_t capabilities = 0;
  std::vector<VmaSpec> vmas;
  std::vector<std::string> devices;  // device node paths opened by the task
  WorkloadParams workload;
};

struct ProcessTreeSpec {
  std::uint64_t seed = 0;
  std::vector<std::string> devices;  // device nodes present on the host
  std::vector<ProcessSpec> processes;
};

ProcessTreeSpec parse_process_tree_spec(const nlohmann::json& doc);
nlohmann::json to_json(const ProcessTreeSpec& spec);

// Bytes used to populate a fresh anonymous mapping.
Bytes initial_contents(std::uint64_t seed, Pid pid, std::uint64_t start, std::uint64_t length);

// --- Operations ------------------------------------------------------------

SimProcessTree spawn_tree(const ProcessTreeSpec& spec);

// Stops the listed tasks (and their threads) with ptrace-style seize and
// interrupt. Tasks must be Running.
void seize_interrupt(SimProcessTree& tree, std::span<const Pid> pids);
// Detaches from seized tasks, letting them run again.
void resume(SimProcessTree& tree, std::span<const Pid> pids);

void freeze(SimProcessTree& tree, FreezerCgroup& cgroup);
void thaw(SimProcessTree& tree, FreezerCgroup& cgroup);

enum class DeviceFamily : std::uint8_t { Cuda = 0, Kfd = 1 };

struct CpuWrite {
  std::uint64_t addr = 0;
  Bytes bytes;
  friend bool operator==(const CpuWrite&, const CpuWrite&) = default;
};

struct DeviceWrite {
  DeviceFamily family = DeviceFamily::Cuda;
  std::uint64_t target = 0;  // CUDA allocation id or KFD buffer handle
  std::uint64_t offset = 0;
  Bytes bytes;
  friend bool operator==(const DeviceWrite&, const DeviceWrite&) = default;
};

struct MutationRecord {
  Pid pid = 0;
  std::uint64_t step = 0;
  std::vector<CpuWrite> cpu;
  std::vector<DeviceWrite> device;
  friend bool operator==(const MutationRecord&, const MutationRecord&) = default;
};

struct DeviceTarget {
  DeviceFamily family = DeviceFamily::Cuda;
  std::uint64_t id = 0;
  std::uint64_t size = 0;
};

// Receives the device half of a workload step.
class DeviceWorkSink {
 public:
  virtual ~DeviceWorkSink() = default;
  // Writable device buffers of a task, in a stable order.
  virtual std::vector<DeviceTarget> targets(Pid pid) = 0;
  virtual void submit(Pid pid, const DeviceWrite& write) = 0;
};

MutationRecord run_workload_step(SimProcessTree& tree, Pid pid, DeviceWorkSink* sink = nullptr);

}  // namespace unicr
