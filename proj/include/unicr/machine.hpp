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
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "unicr/sim_clock.hpp"
#include "unicr/sim_gpu_cuda.hpp"
#include "unicr/sim_gpu_kfd.hpp"
#include "unicr/sim_host.hpp"

namespace unicr {

inline constexpr const char* kNvidiaCtl = "/dev/nvidiactl";
inline constexpr const char* kNvidiaUvm = "/dev/nvidia-uvm";
inline constexpr const char* kNvidiaPrefix = "/dev/nvidia";

// A simulated host: CPU side plus whichever GPU drivers it carries.
struct MachineSpec {
  std::string name = "local";
  std::vector<CudaDeviceInfo> cuda_devices;
  std::vector<KfdDeviceProps> kfd_devices;
  std::vector<std::pair<int, int>> kfd_links;
  std::uint64_t gpuid_salt = 0;
  std::uint64_t mmap_offset_base = 0x100000000ULL;
};

MachineSpec parse_machine_spec(const nlohmann::json& doc);
nlohmann::json to_json(const MachineSpec& spec);

struct CudaAllocSpec {
  std::uint32_t ordinal = 0;
  std::uint64_t size = 0;
};

struct CudaTaskSpec {
  std::vector<CudaAllocSpec> allocs;
  std::uint32_t streams = 0;  // created round-robin over the ordinals in use
  std::vector<std::optional<SimDuration>> callbacks;  // nullopt: never completes
  std::uint32_t nvml_handles = 0;
};

struct KfdBoSpec {
  BoKind kind = BoKind::Vram;
  std::uint32_t gpu = 0;  // device index on the machine
  std::uint64_t size = 0;
};

struct KfdQueueSpec {
  QueueKind kind = QueueKind::Compute;
  std::uint32_t gpu = 0;
};

struct KfdTaskSpec {
  std::vector<KfdBoSpec> bos;
  std::vector<KfdQueueSpec> queues;
  std::uint32_t events = 0;
};

struct TreeSpec {
  ProcessTreeSpec processes;
  std::map<Pid, CudaTaskSpec> cuda;
  std::map<Pid, KfdTaskSpec> kfd;
};

// Process entries may carry "cuda" and "kfd" objects next to the usual
// process tree fields.
TreeSpec parse_tree_spec(const nlohmann::json& doc);

class Machine final : public HostMemory, public DeviceWorkSink {
 public:
  explicit Machine(MachineSpec spec);
  Machine(const Machine&) = delete;
  Machine& operator=(const Machine&) = delete;

  const MachineSpec& spec() const noexcept { return spec_; }
  SimClock& clock() noexcept { return clock_; }
  const SimClock& clock() const noexcept { return clock_; }
  SimProcessTree& tree() noexcept { return tree_; }
  const SimProcessTree& tree() const noexcept { return tree_; }
  CudaDriver& cuda() noexcept { return *cuda_; }
  const CudaDriver& cuda() const noexcept { return *cuda_; }
  KfdDriver& kfd() noexcept { return *kfd_; }
  const KfdDriver& kfd() const noexcept { return *kfd_; }

  bool has_gpus() const noexcept { return !spec_.cuda_devices.empty() || !spec_.kfd_devices.empty(); }
  std::vector<std::string> device_nodes() const;

  // Starts the processes of `spec` and builds their device state. The machine
  // must not already run any of the pids.
  void spawn(const TreeSpec& spec);
  MutationRecord step(Pid pid);
  void kill(Pid pid);
  void kill_all();

  // Raw fingerprint of host and driver state.
  std::uint64_t state_hash() const;

  bool is_mapped(Pid pid, std::uint64_t addr, std::uint64_t len) const override;
  Bytes read(Pid pid, std::uint64_t addr, std::uint64_t len) const override;
  std::vector<DeviceTarget> targets(Pid pid) override;
  void submit(Pid pid, const DeviceWrite& write) override;

 private:
  void build_cuda(Pid pid, const CudaTaskSpec& spec);
  void build_kfd(Pid pid, const KfdTaskSpec& spec);

  MachineSpec spec_;
  SimClock clock_;
  SimProcessTree tree_;
  std::unique_ptr<CudaDriver> cuda_;
  std::unique_ptr<KfdDriver> kfd_;
};

// Machine-independent fingerprint: gpuids are replaced by device indices,
// render nodes and mmap offsets by the buffer they map, and pending CUDA
// callbacks are left out (locking drains them). Two machines that differ
// only in salt, offset base or device enumeration agree on it.
std::uint64_t canonical_digest(const Machine& m);
std::uint64_t canonical_digest(const Machine& m, Pid pid);

// Device references in host and driver state that do not resolve on this
// machine: gpuids outside its topology, render nodes it lacks, and device
// mappings whose offset names no buffer object. Empty when consistent.
std::vector<std::string> stale_device_references(const Machine& m);

}  // namespace unicr
