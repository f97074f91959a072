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

#include "support.hpp"

#include <algorithm>
#include <sstream>

namespace unicr::test {

namespace fs = std::filesystem;

TempDir::TempDir() {
  std::random_device rd;
  std::ostringstream name;
  name << "unicr-test-" << std::hex << rd() << rd();
  path_ = fs::temp_directory_path() / name.str();
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

RandomCase random_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::uint64_t lo, std::uint64_t hi) { return std::uniform_int_distribution<std::uint64_t>(lo, hi)(rng); };

  RandomCase rc;
  rc.machine.name = "random";
  rc.machine.gpuid_salt = pick(0, 1000);
  const auto cuda_n = pick(0, 4);
  const auto kfd_n = pick(0, 4);
  static const char* models[] = {"A100", "H100"};
  for (std::uint64_t i = 0; i < cuda_n; ++i) {
    rc.machine.cuda_devices.push_back(CudaDeviceInfo{models[pick(0, 1)], std::uint64_t{80} << 30});
  }
  static const KfdDeviceProps kinds[] = {{"gfx90a", 104, std::uint64_t{64} << 30, true},
                                         {"gfx908", 120, std::uint64_t{32} << 30, false},
                                         {"gfx942", 304, std::uint64_t{192} << 30, true}};
  for (std::uint64_t i = 0; i < kfd_n; ++i) rc.machine.kfd_devices.push_back(kinds[pick(0, 2)]);
  for (std::uint64_t a = 0; a < kfd_n; ++a) {
    for (std::uint64_t b = a + 1; b < kfd_n; ++b) {
      if (pick(0, 1)) rc.machine.kfd_links.emplace_back(static_cast<int>(a), static_cast<int>(b));
    }
  }

  auto& pt = rc.tree.processes;
  pt.seed = pick(1, 1u << 30);
  const auto nprocs = pick(1, 8);
  std::vector<Pid> pids;
  Pid next_pid = 100;
  for (std::uint64_t i = 0; i < nprocs; ++i) {
    ProcessSpec p;
    next_pid += static_cast<Pid>(pick(1, 5));
    p.pid = next_pid;
    p.ppid = pids.empty() ? 0 : pids[pick(0, pids.size() - 1)];
    p.threads = static_cast<std::uint32_t>(pick(1, 4));
    const auto nvmas = pick(1, 3);
    for (std::uint64_t v = 0; v < nvmas; ++v) {
      VmaSpec vs;
      vs.start = 0x10000 * (v + 1);
      vs.length = kPageSize * pick(1, 4);
      if (pick(0, 3) == 0) vs.fill = static_cast<std::uint8_t>(pick(0, 255));
      p.vmas.push_back(vs);
    }
    p.workload.seed = pick(1, 1u << 30);
    p.workload.cpu_writes_per_step = static_cast<std::uint32_t>(pick(0, 4));
    p.workload.device_writes_per_step = static_cast<std::uint32_t>(pick(0, 3));
    pids.push_back(p.pid);

    if (cuda_n > 0 && pick(0, 2) != 0) {
      CudaTaskSpec c;
      const auto nalloc = pick(1, 3);
      for (std::uint64_t a = 0; a < nalloc; ++a) {
        c.allocs.push_back(CudaAllocSpec{static_cast<std::uint32_t>(pick(0, cuda_n - 1)), kPageSize * pick(1, 4)});
      }
      c.streams = static_cast<std::uint32_t>(pick(0, 2));
      const auto ncb = pick(0, 2);
      for (std::uint64_t k = 0; k < ncb; ++k) c.callbacks.push_back(SimDuration(pick(0, 100000)));
      c.nvml_handles = static_cast<std::uint32_t>(pick(0, 1));
      rc.tree.cuda[p.pid] = c;
    }
    if (kfd_n > 0 && pick(0, 2) != 0) {
      KfdTaskSpec k;
      static const BoKind bo_kinds[] = {BoKind::Vram, BoKind::Gtt, BoKind::Userptr, BoKind::Mmio};
      const auto nbo = pick(1, 4);
      for (std::uint64_t b = 0; b < nbo; ++b) {
        k.bos.push_back(KfdBoSpec{bo_kinds[pick(0, 3)], static_cast<std::uint32_t>(pick(0, kfd_n - 1)), kPageSize * pick(1, 3)});
      }
      const auto nq = pick(0, 2);
      for (std::uint64_t q = 0; q < nq; ++q) {
        k.queues.push_back(KfdQueueSpec{pick(0, 1) ? QueueKind::Compute : QueueKind::Dma,
                                        static_cast<std::uint32_t>(pick(0, kfd_n - 1))});
      }
      k.events = static_cast<std::uint32_t>(pick(0, 3));
      rc.tree.kfd[p.pid] = k;
    }
    pt.processes.push_back(std::move(p));
  }
  rc.warmup_steps = static_cast<std::uint32_t>(pick(0, 3));
  return rc;
}

namespace {

std::vector<std::size_t> hooks(const HookTrace& t, HookId id) { return t.find(id); }

}  // namespace

std::string check_dump_order(const HookTrace& trace) {
  const auto init = hooks(trace, HookId::PluginInit);
  const auto pause = hooks(trace, HookId::PauseDevices);
  const auto ckpt = hooks(trace, HookId::CheckpointDevices);
  const auto exits = hooks(trace, HookId::PluginExit);
  const auto seize = trace.find(TraceKind::Seize);
  const auto dump = trace.find(TraceKind::MemoryDump);
  const auto thaw = trace.find(TraceKind::Thaw);
  const auto rollback = trace.find(TraceKind::Rollback);

  if (init.size() != exits.size()) return "every initialised plugin must exit exactly once";
  if (!init.empty() && !pause.empty() && init.back() > pause.front()) return "PLUGIN_INIT after PAUSE_DEVICES";
  if (seize.size() > 1) return "tasks seized more than once";
  if (!seize.empty()) {
    for (auto p : pause) {
      if (p > seize.front()) return "PAUSE_DEVICES after the tasks were stopped";
    }
    for (auto c : ckpt) {
      if (c < seize.front()) return "CHECKPOINT_DEVICES before all tasks were stopped";
    }
    for (auto t : thaw) {
      if (t > seize.front() && (dump.empty() || t < dump.front())) return "thaw while the tasks were seized";
    }
  }
  if (!dump.empty()) {
    for (auto c : ckpt) {
      if (c > dump.front()) return "CHECKPOINT_DEVICES after the memory dump";
    }
    for (auto e : exits) {
      if (e < dump.front()) return "PLUGIN_EXIT before the memory dump";
    }
  }
  if (rollback.empty() && dump.empty()) return "successful dump without a memory dump";
  return {};
}

std::string check_restore_order(const HookTrace& trace) {
  const auto init = hooks(trace, HookId::PluginInit);
  const auto ext = hooks(trace, HookId::RestoreExtFile);
  const auto upd = hooks(trace, HookId::UpdateVmaMap);
  const auto late = hooks(trace, HookId::ResumeDevicesLate);
  const auto exits = hooks(trace, HookId::PluginExit);
  const auto vma = trace.find(TraceKind::VmaRestore);
  const auto create = trace.find(TraceKind::TaskCreate);

  if (init.size() != exits.size()) return "every initialised plugin must exit exactly once";
  if (!create.empty()) {
    for (auto e : ext) {
      if (e < create.front()) return "RESTORE_EXT_FILE before tasks exist";
    }
  }
  if (!vma.empty()) {
    for (auto e : ext) {
      if (e > vma.front()) return "RESTORE_EXT_FILE after VMA restore";
    }
    for (auto u : upd) {
      if (u > vma.front()) return "UPDATE_VMA_MAP after VMA restore completed";
    }
    for (auto l : late) {
      if (l < vma.front()) return "RESUME_DEVICES_LATE before all VMAs were restored";
    }
  }
  if (!late.empty() && !exits.empty() && exits.front() < late.back()) return "PLUGIN_EXIT before RESUME_DEVICES_LATE";
  return {};
}

MemoryReplay::MemoryReplay(const SimTask& initial) {
  for (const auto& v : initial.vmas) {
    if (!v.is_device()) vmas_.push_back(v);
  }
}

void MemoryReplay::apply(const MutationRecord& r) {
  for (const auto& w : r.cpu) {
    for (auto& v : vmas_) {
      if (w.addr >= v.start && w.addr + w.bytes.size() <= v.end()) {
        std::copy(w.bytes.begin(), w.bytes.end(), v.contents.begin() + static_cast<std::ptrdiff_t>(w.addr - v.start));
      }
    }
  }
}

bool MemoryReplay::matches(const SimTask& t) const {
  std::vector<Vma> anon;
  for (const auto& v : t.vmas) {
    if (!v.is_device()) anon.push_back(v);
  }
  return anon == vmas_;
}

bool same_tasks(const SimProcessTree& a, const SimProcessTree& b, std::string* why) {
  auto say = [&](const std::string& s) {
    if (why) *why = s;
    return false;
  };
  if (a.pids() != b.pids()) return say("pid sets differ");
  for (const auto& [pid, ta] : a.tasks()) {
    const auto& tb = b.task(pid);
    if (ta.ppid != tb.ppid) return say("ppid of " + std::to_string(pid));
    if (ta.thread_ids != tb.thread_ids) return say("threads of " + std::to_string(pid));
    if (ta.run_state != tb.run_state) return say("run state of " + std::to_string(pid));
    if (ta.capabilities != tb.capabilities) return say("capabilities of " + std::to_string(pid));
    if (ta.workload != tb.workload || ta.steps != tb.steps) return say("workload of " + std::to_string(pid));
    if (ta.open_devices != tb.open_devices) return say("device fds of " + std::to_string(pid));
    if (ta.vmas != tb.vmas) return say("VMAs of " + std::to_string(pid));
  }
  return true;
}

RandomCase replicated_case(std::uint32_t gpus, std::uint64_t alloc, std::uint64_t host) {
  RandomCase rc;
  rc.machine.name = "replicated";
  rc.machine.cuda_devices.assign(gpus, CudaDeviceInfo{"A100", std::uint64_t{80} << 30});
  rc.tree.processes.seed = 17;
  for (std::uint32_t g = 0; g < gpus; ++g) {
    ProcessSpec p;
    p.pid = static_cast<Pid>(g + 1);
    p.vmas.push_back(VmaSpec{0x10000, host, std::nullopt, 0, std::nullopt});
    rc.tree.processes.processes.push_back(p);
    CudaTaskSpec c;
    c.allocs.push_back(CudaAllocSpec{g, alloc});
    c.streams = 1;
    rc.tree.cuda[p.pid] = c;
  }
  return rc;
}

fs::path scenario_path(const std::string& name) { return fs::path(UNICR_SCENARIO_DIR) / (name + ".json"); }

}  // namespace unicr::test
