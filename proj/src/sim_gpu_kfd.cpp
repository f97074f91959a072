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

#include "unicr/sim_gpu_kfd.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace unicr {

namespace {

constexpr std::uint64_t kQueuePacketSize = 64;

std::string pid_str(Pid pid) { return std::to_string(pid); }

std::uint64_t round_up_page(std::uint64_t n) { return (n + kPageSize - 1) / kPageSize * kPageSize; }

Bytes control_stack_image(const QueueState& q) {
  ByteWriter w;
  w.u32(q.queue_id);
  w.u64(q.read_ptr);
  w.u64(q.write_ptr);
  w.u64(Hasher{}.add_u64(q.queue_id).add_u64(q.read_ptr).add_u64(q.write_ptr).digest());
  return w.take();
}

Bytes mqd_image(const QueueState& q) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(q.kind));
  w.u64(q.read_ptr);
  w.u64(q.write_ptr);
  w.u64(q.doorbell_offset);
  w.u64(q.aql_ptr);
  return w.take();
}

}  // namespace

std::uint32_t compute_gpuid(const KfdDeviceProps& props, std::uint64_t salt) {
  auto h = Hasher{}.add(props.instruction_set).add_u64(props.compute_units).add_u64(salt).digest();
  auto id = static_cast<std::uint32_t>(h ^ (h >> 32)) & 0xffff;
  return id == 0 ? 1 : id;
}

const KfdDevice* GpuTopology::find(std::uint32_t gpuid) const {
  for (const auto& d : devices) {
    if (d.gpuid == gpuid) return &d;
  }
  return nullptr;
}

std::optional<std::size_t> GpuTopology::index_of(std::uint32_t gpuid) const {
  for (std::size_t i = 0; i < devices.size(); ++i) {
    if (devices[i].gpuid == gpuid) return i;
  }
  return std::nullopt;
}

bool GpuTopology::linked(std::uint32_t a, std::uint32_t b) const {
  const auto* d = find(a);
  return d != nullptr && std::find(d->links.begin(), d->links.end(), b) != d->links.end();
}

GpuTopology make_topology(const std::vector<KfdDeviceProps>& props, const std::vector<std::pair<int, int>>& links,
                          std::uint64_t salt) {
  GpuTopology topo;
  std::set<std::uint32_t> used;
  for (std::size_t i = 0; i < props.size(); ++i) {
    auto s = salt;
    auto id = compute_gpuid(props[i], s);
    while (used.contains(id)) id = compute_gpuid(props[i], ++s);
    used.insert(id);
    topo.devices.push_back(KfdDevice{id, props[i], {}, kRenderNodePrefix + std::to_string(128 + i)});
  }
  for (auto [a, b] : links) {
    if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= props.size() || static_cast<std::size_t>(b) >= props.size() ||
        a == b) {
      throw Error(ErrorKind::SpecError, "invalid GPU link " + std::to_string(a) + "-" + std::to_string(b));
    }
    auto& da = topo.devices[static_cast<std::size_t>(a)];
    auto& db = topo.devices[static_cast<std::size_t>(b)];
    if (std::find(da.links.begin(), da.links.end(), db.gpuid) == da.links.end()) da.links.push_back(db.gpuid);
    if (std::find(db.links.begin(), db.links.end(), da.gpuid) == db.links.end()) db.links.push_back(da.gpuid);
  }
  for (auto& d : topo.devices) std::sort(d.links.begin(), d.links.end());
  return topo;
}

std::string_view to_string(BoKind k) {
  switch (k) {
    case BoKind::Vram: return "VRAM";
    case BoKind::Gtt: return "GTT";
    case BoKind::Userptr: return "USERPTR";
    case BoKind::Doorbell: return "DOORBELL";
    case BoKind::Mmio: return "MMIO";
  }
  return "?";
}

BoKind parse_bo_kind(std::string_view s) {
  for (auto k : {BoKind::Vram, BoKind::Gtt, BoKind::Userptr, BoKind::Doorbell, BoKind::Mmio}) {
    if (s == to_string(k)) return k;
  }
  throw Error(ErrorKind::SpecError, "unknown buffer kind " + std::string(s));
}

bool has_contents(BoKind k) { return k == BoKind::Vram || k == BoKind::Gtt || k == BoKind::Userptr; }

std::string_view to_string(QueueKind k) { return k == QueueKind::Compute ? "compute" : "dma"; }

// --- driver ------------------------------------------------------------------

KfdDriver::KfdDriver(SimClock& clock, GpuTopology topology, std::uint64_t mmap_offset_base, KfdCosts costs)
    : clock_(clock), topology_(std::move(topology)), costs_(costs) {
  for (const auto& d : topology_.devices) next_offset_[d.gpuid] = mmap_offset_base;
}

void KfdDriver::charge_transfer(std::uint64_t bytes) {
  clock_.advance(SimDuration(static_cast<std::int64_t>(
      (static_cast<double>(bytes) / (1024.0 * 1024.0)) * static_cast<double>(costs_.per_mib_transfer.count()))));
}

void KfdDriver::open(Pid pid) {
  std::lock_guard lk(mu_);
  auto& p = procs_[pid];
  p.pid = pid;
  p.opener = pid;
}

KfdProcessState& KfdDriver::proc(Pid pid) {
  auto it = procs_.find(pid);
  if (it == procs_.end()) throw Error(ErrorKind::NoKfdFd, "process " + pid_str(pid) + " has no open kfd descriptor");
  return it->second;
}

const KfdProcessState& KfdDriver::process(Pid pid) const { return const_cast<KfdDriver*>(this)->proc(pid); }

std::vector<Pid> KfdDriver::pids() const {
  std::vector<Pid> out;
  for (const auto& [p, _] : procs_) out.push_back(p);
  return out;
}

void KfdDriver::release(Pid pid) {
  std::lock_guard lk(mu_);
  procs_.erase(pid);
  pending_userptr_.erase(pid);
}

std::uint64_t KfdDriver::allocate_offset(std::uint32_t gpuid, std::uint64_t size) {
  auto& next = next_offset_.at(gpuid);
  auto off = next;
  next += std::max<std::uint64_t>(kPageSize, round_up_page(size));
  return off;
}

std::uint64_t KfdDriver::alloc_bo(Pid pid, BoKind kind, std::uint32_t gpuid, std::uint64_t size, std::uint64_t va) {
  std::lock_guard lk(mu_);
  auto& p = proc(pid);
  if (topology_.find(gpuid) == nullptr) throw Error(ErrorKind::UnknownDevice, "no GPU with gpuid " + std::to_string(gpuid));
  if (size == 0) throw Error(ErrorKind::SpecError, "zero-sized buffer object");
  BufferObject bo;
  bo.handle = p.next_handle++;
  bo.kind = kind;
  bo.gpuid = gpuid;
  bo.size = size;
  bo.virtual_addr = va;
  if (kind == BoKind::Userptr) {
    if (host_ != nullptr && !host_->is_mapped(pid, va, size)) {
      throw Error(ErrorKind::InvalidState, "userptr range " + to_hex(va) + " is not mapped host memory");
    }
  } else {
    bo.mmap_offset = allocate_offset(gpuid, size);
  }
  if (kind == BoKind::Vram || kind == BoKind::Gtt) bo.contents.assign(size, 0);
  auto handle = bo.handle;
  p.bos.emplace(handle, std::move(bo));
  return handle;
}

std::uint32_t KfdDriver::create_queue(Pid pid, QueueKind kind, std::uint32_t gpuid, QueueBos bos) {
  std::lock_guard lk(mu_);
  auto& p = proc(pid);
  if (topology_.find(gpuid) == nullptr) throw Error(ErrorKind::UnknownDevice, "no GPU with gpuid " + std::to_string(gpuid));
  for (auto h : {bos.ring_buffer, bos.aql_queue, bos.eop_buffer, bos.ctx_save_area}) {
    if (!p.bos.contains(h)) throw Error(ErrorKind::InvalidState, "queue references unknown buffer " + std::to_string(h));
  }
  QueueState q;
  q.queue_id = static_cast<std::uint32_t>(p.queues.size());
  q.kind = kind;
  q.gpuid = gpuid;
  q.doorbell_offset = 8 * static_cast<std::uint64_t>(q.queue_id);
  q.aql_ptr = p.bos.at(bos.aql_queue).virtual_addr;
  q.user_bos = bos;
  p.queues.push_back(q);
  return q.queue_id;
}

std::uint32_t KfdDriver::create_event(Pid pid) {
  std::lock_guard lk(mu_);
  auto& p = proc(pid);
  auto id = static_cast<std::uint32_t>(p.events.size() + 1);
  p.events.push_back(KfdEvent{id, false});
  return id;
}

void KfdDriver::write_bo(Pid pid, std::uint64_t handle, std::uint64_t offset, std::span<const std::uint8_t> data) {
  std::lock_guard lk(mu_);
  auto& p = proc(pid);
  if (p.state != KfdRunState::Running) {
    throw Error(ErrorKind::DeviceLocked, "KFD process " + pid_str(pid) + " queues are not running");
  }
  auto it = p.bos.find(handle);
  if (it == p.bos.end() || (it->second.kind != BoKind::Vram && it->second.kind != BoKind::Gtt)) {
    throw Error(ErrorKind::InvalidState, "buffer " + std::to_string(handle) + " is not device-writable");
  }
  auto& bo = it->second;
  if (offset > bo.contents.size() || data.size() > bo.contents.size() - offset) {
    throw Error(ErrorKind::InvalidState, "device write out of bounds");
  }
  std::copy(data.begin(), data.end(), bo.contents.begin() + static_cast<std::ptrdiff_t>(offset));
  for (auto& q : p.queues) {
    if (q.gpuid == bo.gpuid) {
      q.write_ptr += kQueuePacketSize;
      q.read_ptr = q.write_ptr;
      break;
    }
  }
  if (!p.events.empty() && !data.empty()) {
    auto& ev = p.events[data[0] % p.events.size()];
    ev.signaled = !ev.signaled;
  }
}

void KfdDriver::authorize(const KfdCaller& caller, const KfdProcessState& p) const {
  if (!p.opener) throw Error(ErrorKind::NoKfdFd, "process " + pid_str(p.pid) + " has no open kfd descriptor");
  if (caller.pid != *p.opener) {
    throw Error(ErrorKind::PermissionDenied, "caller " + pid_str(caller.pid) +
                                                 " did not open the kfd descriptor of process " + pid_str(p.pid));
  }
  if ((caller.capabilities & (kCapCheckpointRestore | kCapSysAdmin)) == 0) {
    throw Error(ErrorKind::PermissionDenied, "caller lacks CAP_CHECKPOINT_RESTORE and CAP_SYS_ADMIN");
  }
}

ProcessInfo KfdDriver::ioctl_process_info(const KfdCaller& caller, Pid pid) {
  std::lock_guard lk(mu_);
  auto& p = proc(pid);
  authorize(caller, p);
  clock_.advance(costs_.ioctl);
  if (p.state != KfdRunState::Running) {
    throw Error(ErrorKind::InvalidState, "process " + pid_str(pid) + " is not running on the GPU");
  }
  for (auto& q : p.queues) {
    q.evicted = true;
    q.control_stack = control_stack_image(q);
    q.mqd = mqd_image(q);
  }
  p.state = KfdRunState::Paused;
  return ProcessInfo{p.bos.size(), p.queues.size(), p.events.size()};
}

KfdCheckpointBundle KfdDriver::ioctl_checkpoint(const KfdCaller& caller, Pid pid) {
  std::lock_guard lk(mu_);
  auto& p = proc(pid);
  authorize(caller, p);
  clock_.advance(costs_.ioctl);
  if (p.state != KfdRunState::Paused) throw Error(ErrorKind::NotPaused, "process " + pid_str(pid) + " is not paused");
  KfdCheckpointBundle b;
  b.pid = pid;
  b.topology = topology_;
  std::uint64_t bytes = 0;
  for (const auto& [_, bo] : p.bos) {
    auto copy = bo;
    if (bo.kind == BoKind::Userptr && host_ != nullptr) copy.contents = host_->read(pid, bo.virtual_addr, bo.size);
    bytes += copy.contents.size();
    b.bos.push_back(std::move(copy));
  }
  b.queues = p.queues;
  b.events = p.events;
  b.next_handle = p.next_handle;
  charge_transfer(bytes);
  return b;
}

void KfdDriver::ioctl_unpause(const KfdCaller& caller, Pid pid) {
  std::lock_guard lk(mu_);
  auto& p = proc(pid);
  authorize(caller, p);
  clock_.advance(costs_.ioctl);
  if (p.state != KfdRunState::Paused) throw Error(ErrorKind::NotPaused, "process " + pid_str(pid) + " is not paused");
  for (auto& q : p.queues) {
    q.evicted = false;
    q.control_stack.clear();
    q.mqd.clear();
  }
  p.state = KfdRunState::Running;
}

std::vector<BoRelocation> KfdDriver::ioctl_restore(const KfdCaller& caller, Pid pid, const KfdCheckpointBundle& bundle,
                                                   const GpuidMap& gpuid_map) {
  std::lock_guard lk(mu_);
  auto& p = proc(pid);
  authorize(caller, p);
  clock_.advance(costs_.ioctl);
  if (!p.bos.empty() || !p.queues.empty() || !p.events.empty() || p.state != KfdRunState::Running) {
    throw Error(ErrorKind::InvalidState, "process " + pid_str(pid) + " already has GPU state");
  }
  check_topology_map(bundle.topology, topology_, gpuid_map);

  KfdProcessState fresh;
  fresh.pid = pid;
  fresh.opener = p.opener;
  fresh.state = KfdRunState::Restored;
  fresh.next_handle = bundle.next_handle;
  std::vector<BoRelocation> relocs;
  std::map<std::uint64_t, std::uint64_t> userptr;
  std::uint64_t bytes = 0;
  for (const auto& src : bundle.bos) {
    auto bo = src;
    bo.gpuid = gpuid_map.at(src.gpuid);
    if (bo.kind == BoKind::Userptr) {
      userptr[bo.handle] = fingerprint(src.contents);
      bo.contents.clear();
    } else {
      bo.mmap_offset = allocate_offset(bo.gpuid, bo.size);
    }
    if (bo.kind == BoKind::Doorbell || bo.kind == BoKind::Mmio) bo.contents.clear();
    bytes += bo.contents.size();
    relocs.push_back(BoRelocation{bo.handle, src.gpuid, bo.gpuid, src.mmap_offset, bo.mmap_offset});
    fresh.bos.emplace(bo.handle, std::move(bo));
  }
  for (auto q : bundle.queues) {
    q.gpuid = gpuid_map.at(q.gpuid);
    q.evicted = true;
    fresh.queues.push_back(std::move(q));
  }
  fresh.events = bundle.events;
  charge_transfer(bytes);
  p = std::move(fresh);
  pending_userptr_[pid] = std::move(userptr);
  return relocs;
}

void KfdDriver::ioctl_resume(const KfdCaller& caller, Pid pid) {
  std::lock_guard lk(mu_);
  auto& p = proc(pid);
  authorize(caller, p);
  clock_.advance(costs_.ioctl);
  if (p.state != KfdRunState::Restored) throw Error(ErrorKind::NotRestored, "process " + pid_str(pid) + " was not restored");
  // Userptr buffers are bound to host pages, which must exist by now.
  auto& pending = pending_userptr_[pid];
  for (const auto& [handle, digest] : pending) {
    const auto& bo = p.bos.at(handle);
    if (host_ == nullptr || !host_->is_mapped(pid, bo.virtual_addr, bo.size)) {
      throw Error(ErrorKind::InvalidState, "userptr buffer " + std::to_string(handle) + " has no host mapping yet");
    }
    if (fingerprint(host_->read(pid, bo.virtual_addr, bo.size)) != digest) {
      throw Error(ErrorKind::InvalidState, "userptr buffer " + std::to_string(handle) + " diverged from checkpoint");
    }
  }
  pending_userptr_.erase(pid);
  for (auto& q : p.queues) {
    q.evicted = false;
    q.control_stack.clear();
    q.mqd.clear();
  }
  p.state = KfdRunState::Running;
}

std::uint64_t KfdDriver::state_hash(Pid pid) const {
  std::lock_guard lk(mu_);
  const auto& p = process(pid);
  Hasher h;
  h.add_u64(static_cast<std::uint64_t>(p.pid)).add_u64(static_cast<std::uint64_t>(p.state)).add_u64(p.next_handle);
  for (const auto& [handle, bo] : p.bos) {
    h.add_u64(handle).add_u64(static_cast<std::uint64_t>(bo.kind)).add_u64(bo.gpuid).add_u64(bo.size);
    h.add_u64(bo.virtual_addr).add_u64(bo.mmap_offset).add(bo.contents);
  }
  for (const auto& q : p.queues) {
    h.add_u64(q.queue_id).add_u64(static_cast<std::uint64_t>(q.kind)).add_u64(q.gpuid);
    h.add(q.control_stack).add(q.mqd).add_u64(q.read_ptr).add_u64(q.write_ptr);
    h.add_u64(q.doorbell_offset).add_u64(q.aql_ptr).add_u64(q.evicted);
    h.add_u64(q.user_bos.ring_buffer).add_u64(q.user_bos.aql_queue).add_u64(q.user_bos.eop_buffer);
    h.add_u64(q.user_bos.ctx_save_area);
  }
  for (const auto& e : p.events) h.add_u64(e.event_id).add_u64(e.signaled);
  return h.digest();
}

std::uint64_t KfdDriver::state_hash() const {
  std::lock_guard lk(mu_);
  Hasher h;
  for (const auto& [pid, _] : procs_) h.add_u64(state_hash(pid));
  return h.digest();
}

// --- topology matching -------------------------------------------------------

namespace {

bool assign(const GpuTopology& from, const GpuTopology& to, std::size_t i, std::vector<int>& target,
            std::vector<bool>& taken) {
  if (i == from.devices.size()) return true;
  for (std::size_t j = 0; j < to.devices.size(); ++j) {
    if (taken[j] || from.devices[i].props != to.devices[j].props) continue;
    bool ok = true;
    for (std::size_t k = 0; k < i && ok; ++k) {
      auto tk = static_cast<std::size_t>(target[k]);
      ok = from.linked(from.devices[i].gpuid, from.devices[k].gpuid) ==
           to.linked(to.devices[j].gpuid, to.devices[tk].gpuid);
    }
    if (!ok) continue;
    target[i] = static_cast<int>(j);
    taken[j] = true;
    if (assign(from, to, i + 1, target, taken)) return true;
    taken[j] = false;
  }
  return false;
}

std::string describe(const KfdDevice& d) {
  std::ostringstream os;
  os << "gpuid " << d.gpuid << " (" << d.props.instruction_set << ", " << d.props.compute_units << " CUs, "
     << d.props.vram << " bytes VRAM, host access " << (d.props.host_vram_accessible ? "yes" : "no") << ")";
  return os.str();
}

}  // namespace

std::optional<GpuidMap> match_topology(const GpuTopology& from, const GpuTopology& to, std::string* report) {
  if (from.devices.size() != to.devices.size()) {
    if (report) {
      *report = "device count differs: checkpoint has " + std::to_string(from.devices.size()) + ", target has " +
                std::to_string(to.devices.size());
    }
    return std::nullopt;
  }
  std::vector<int> target(from.devices.size(), -1);
  std::vector<bool> taken(to.devices.size(), false);
  if (!assign(from, to, 0, target, taken)) {
    if (report) {
      std::ostringstream os;
      os << "no property- and link-preserving assignment exists;";
      for (const auto& d : from.devices) {
        bool any = std::any_of(to.devices.begin(), to.devices.end(),
                               [&](const KfdDevice& t) { return t.props == d.props; });
        if (!any) os << " no match for " << describe(d) << ";";
      }
      *report = os.str();
    }
    return std::nullopt;
  }
  GpuidMap m;
  for (std::size_t i = 0; i < from.devices.size(); ++i) {
    m[from.devices[i].gpuid] = to.devices[static_cast<std::size_t>(target[i])].gpuid;
  }
  return m;
}

void check_topology_map(const GpuTopology& from, const GpuTopology& to, const GpuidMap& map) {
  if (from.devices.size() != to.devices.size()) {
    throw Error(ErrorKind::TopologyIncompatible, "device count differs: checkpoint has " +
                                                     std::to_string(from.devices.size()) + ", target has " +
                                                     std::to_string(to.devices.size()));
  }
  std::set<std::uint32_t> seen;
  for (const auto& d : from.devices) {
    auto it = map.find(d.gpuid);
    if (it == map.end()) throw Error(ErrorKind::BadGpuidMap, "gpuid " + std::to_string(d.gpuid) + " is not mapped");
    if (to.find(it->second) == nullptr) {
      throw Error(ErrorKind::BadGpuidMap, "gpuid " + std::to_string(it->second) + " does not exist on target");
    }
    if (!seen.insert(it->second).second) {
      throw Error(ErrorKind::BadGpuidMap, "gpuid " + std::to_string(it->second) + " is mapped twice");
    }
  }
  if (map.size() != from.devices.size()) throw Error(ErrorKind::BadGpuidMap, "map names gpuids not in the checkpoint");
  std::ostringstream diff;
  for (const auto& d : from.devices) {
    const auto& t = *to.find(map.at(d.gpuid));
    if (d.props != t.props) diff << describe(d) << " -> " << describe(t) << "; ";
    for (const auto& e : from.devices) {
      if (from.linked(d.gpuid, e.gpuid) != to.linked(t.gpuid, map.at(e.gpuid))) {
        diff << "link " << d.gpuid << "-" << e.gpuid << " not preserved; ";
      }
    }
  }
  if (!diff.str().empty()) throw Error(ErrorKind::TopologyIncompatible, diff.str());
}

}  // namespace unicr
