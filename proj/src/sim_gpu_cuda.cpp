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

#include "unicr/sim_gpu_cuda.hpp"

#include <algorithm>
#include <atomic>
#include <set>

namespace unicr {

namespace {

constexpr std::uint32_t kBlobVersion = 1;
constexpr std::string_view kBlobMagic = "UCUDABLB";
constexpr std::uint64_t kAllocAlignment = 64 * 1024;

std::uint64_t next_entropy() {
  static std::atomic<std::uint64_t> counter{0x9e3779b97f4a7c15ULL};
  auto z = counter.fetch_add(0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string pid_str(Pid pid) { return std::to_string(pid); }

}  // namespace

std::string_view to_string(CudaPhase p) {
  switch (p) {
    case CudaPhase::Running: return "Running";
    case CudaPhase::Locked: return "Locked";
    case CudaPhase::Checkpointed: return "Checkpointed";
  }
  return "?";
}

std::string_view to_string(ApiOp op) {
  switch (op) {
    case ApiOp::Malloc: return "cuMemAlloc";
    case ApiOp::Free: return "cuMemFree";
    case ApiOp::MemcpyHtoD: return "cuMemcpyHtoD";
    case ApiOp::MemcpyDtoH: return "cuMemcpyDtoH";
    case ApiOp::MemcpyAsync: return "cuMemcpyHtoDAsync";
    case ApiOp::LaunchKernel: return "cuLaunchKernel";
    case ApiOp::StreamCreate: return "cuStreamCreate";
    case ApiOp::Synchronize: return "cuCtxSynchronize";
  }
  return "?";
}

std::uint64_t CudaTaskState::device_bytes() const {
  std::uint64_t n = 0;
  for (const auto& [_, a] : device_allocs) n += a.contents.size();
  return n;
}

CudaDriver::CudaDriver(SimClock& clock, std::vector<CudaDeviceInfo> devices, CudaCosts costs)
    : clock_(clock),
      devices_(std::move(devices)),
      costs_(costs),
      mutations_(devices_.size(), 0),
      entropy_(next_entropy()) {}

std::string CudaDriver::device_path(std::uint32_t ordinal) const { return "/dev/nvidia" + std::to_string(ordinal); }

CudaTaskState& CudaDriver::create_task(Pid pid) {
  std::lock_guard lk(mu_);
  if (tasks_.contains(pid)) throw Error(ErrorKind::InvalidState, "CUDA task " + pid_str(pid) + " already exists");
  auto& t = tasks_[pid];
  t.pid = pid;
  return t;
}

const CudaTaskState& CudaDriver::task(Pid pid) const {
  return const_cast<CudaDriver*>(this)->mutable_task(pid);
}

CudaTaskState& CudaDriver::mutable_task(Pid pid) {
  auto it = tasks_.find(pid);
  if (it == tasks_.end()) throw Error(ErrorKind::NoSuchTask, "no CUDA task " + pid_str(pid));
  return it->second;
}

std::vector<Pid> CudaDriver::pids() const {
  std::vector<Pid> out;
  for (const auto& [p, _] : tasks_) out.push_back(p);
  return out;
}

void CudaDriver::release(Pid pid) {
  std::lock_guard lk(mu_);
  tasks_.erase(pid);
}

CudaTaskState& CudaDriver::running_task(Pid pid) {
  auto& t = mutable_task(pid);
  if (t.phase != CudaPhase::Running) {
    throw Error(ErrorKind::DeviceLocked, "CUDA task " + pid_str(pid) + " is " + std::string(to_string(t.phase)));
  }
  return t;
}

void CudaDriver::charge_transfer(std::uint64_t bytes) {
  clock_.advance(SimDuration(static_cast<std::int64_t>(
      (static_cast<double>(bytes) / (1024.0 * 1024.0)) * static_cast<double>(costs_.per_mib_transfer.count()))));
}

ApiResult CudaDriver::call(Pid pid, const ApiCall& c) {
  std::lock_guard lk(mu_);
  if (interposer_ != nullptr) {
    ++interposed_calls_;
    return interposer_->intercept(pid, c, [this, pid](const ApiCall& fwd) { return execute(pid, fwd); });
  }
  return execute(pid, c);
}

ApiResult CudaDriver::execute(Pid pid, const ApiCall& c) {
  ++api_calls_;
  clock_.advance(costs_.api_call);
  auto& t = running_task(pid);
  auto check_ordinal = [&](std::uint32_t ord) {
    if (ord >= devices_.size()) throw Error(ErrorKind::UnknownDevice, "no CUDA device " + std::to_string(ord));
  };
  auto alloc = [&](std::uint64_t h) -> DeviceAlloc& {
    auto it = t.device_allocs.find(h);
    if (it == t.device_allocs.end()) throw Error(ErrorKind::InvalidState, "invalid device allocation " + std::to_string(h));
    return it->second;
  };
  auto write = [&](DeviceAlloc& a, std::uint64_t off, const Bytes& data) {
    if (off > a.contents.size() || data.size() > a.contents.size() - off) {
      throw Error(ErrorKind::InvalidState, "device write out of bounds");
    }
    std::copy(data.begin(), data.end(), a.contents.begin() + static_cast<std::ptrdiff_t>(off));
    ++mutations_[a.ordinal];
  };

  ApiResult r;
  switch (c.op) {
    case ApiOp::Malloc: {
      check_ordinal(c.ordinal);
      auto id = t.next_alloc_id++;
      DeviceAlloc a{c.ordinal, t.next_addr, Bytes(c.size, 0)};
      t.next_addr += std::max<std::uint64_t>(kAllocAlignment, (c.size + kAllocAlignment - 1) / kAllocAlignment * kAllocAlignment);
      t.device_allocs.emplace(id, std::move(a));
      ++mutations_[c.ordinal];
      r.handle = id;
      break;
    }
    case ApiOp::Free: {
      auto ord = alloc(c.handle).ordinal;
      t.device_allocs.erase(c.handle);
      ++mutations_[ord];
      break;
    }
    case ApiOp::MemcpyHtoD: {
      auto& a = alloc(c.handle);
      write(a, c.offset, c.payload);
      for (auto& s : t.streams) {
        if (s.ordinal == a.ordinal) {
          ++s.submitted;
          break;
        }
      }
      charge_transfer(c.payload.size());
      break;
    }
    case ApiOp::MemcpyAsync: {
      auto& a = alloc(c.handle);
      auto sit = std::find_if(t.streams.begin(), t.streams.end(), [&](const StreamState& s) { return s.id == c.stream; });
      if (sit == t.streams.end()) throw Error(ErrorKind::InvalidState, "invalid stream " + std::to_string(c.stream));
      write(a, c.offset, c.payload);
      ++sit->submitted;
      charge_transfer(c.payload.size());
      break;
    }
    case ApiOp::MemcpyDtoH: {
      auto& a = alloc(c.handle);
      if (c.offset > a.contents.size() || c.size > a.contents.size() - c.offset) {
        throw Error(ErrorKind::InvalidState, "device read out of bounds");
      }
      r.data.assign(a.contents.begin() + static_cast<std::ptrdiff_t>(c.offset),
                    a.contents.begin() + static_cast<std::ptrdiff_t>(c.offset + c.size));
      charge_transfer(c.size);
      break;
    }
    case ApiOp::LaunchKernel: {
      auto& dst = alloc(c.handle);
      Bytes src;
      if (c.source != 0) src = alloc(c.source).contents;
      Bytes host;
      if (c.host_addr) {
        host = host_reader_ ? host_reader_(pid, *c.host_addr, dst.contents.size()) : Bytes(dst.contents.size(), 0);
      }
      const std::uint64_t noise = c.nondeterministic ? entropy_ : 0;
      for (std::size_t i = 0; i < dst.contents.size(); ++i) {
        std::uint64_t v = dst.contents[i] * 31u + (c.param >> (8 * (i % 8)));
        if (!src.empty()) v += src[i % src.size()];
        if (!host.empty()) v += host[i % host.size()];
        v += noise >> (8 * (i % 8));
        dst.contents[i] = static_cast<std::uint8_t>(v);
      }
      if (c.nondeterministic) entropy_ = entropy_ * 6364136223846793005ULL + 1442695040888963407ULL;
      ++mutations_[dst.ordinal];
      for (auto& s : t.streams) {
        if (s.id == c.stream || (c.stream == 0 && s.ordinal == dst.ordinal)) {
          ++s.submitted;
          break;
        }
      }
      break;
    }
    case ApiOp::StreamCreate: {
      check_ordinal(c.ordinal);
      std::uint32_t id = 1;
      for (const auto& s : t.streams) id = std::max(id, s.id + 1);
      t.streams.push_back(StreamState{id, c.ordinal, 0});
      if (std::none_of(t.contexts.begin(), t.contexts.end(),
                       [&](const ContextState& cx) { return cx.ordinal == c.ordinal; })) {
        t.contexts.push_back(ContextState{static_cast<std::uint32_t>(t.contexts.size() + 1), c.ordinal});
      }
      r.handle = id;
      break;
    }
    case ApiOp::Synchronize:
      break;
  }
  return r;
}

LockResult CudaDriver::lock(std::span<const Pid> pids, SimDuration timeout) {
  std::lock_guard lk(mu_);
  for (auto pid : pids) {
    const auto& t = mutable_task(pid);
    if (t.phase != CudaPhase::Running) {
      throw Error(ErrorKind::TaskNotRunning,
                  "lock requires phase Running; task " + pid_str(pid) + " is " + std::string(to_string(t.phase)));
    }
  }
  if (pids.empty()) return {};

  // The lock completes once every pending callback of every task has
  // finished. A task whose CPU side is stopped never reaches the lock point.
  bool blocked = false;
  SimDuration wait{0};
  for (auto pid : pids) {
    if (runnable_ && !runnable_(pid)) blocked = true;
    for (const auto& cb : tasks_.at(pid).pending_callbacks) {
      if (!cb.completion_delay) {
        blocked = true;
      } else {
        wait = std::max(wait, *cb.completion_delay);
      }
    }
  }
  if (blocked || wait > timeout) {
    clock_.advance(timeout);
    throw LockTimeoutError("lock did not complete within " + std::to_string(timeout.count()) +
                               "us; all tasks returned to Running",
                           std::vector<Pid>(pids.begin(), pids.end()));
  }
  clock_.advance(wait + costs_.lock_base);
  for (auto pid : pids) {
    auto& t = tasks_.at(pid);
    t.pending_callbacks.clear();
    t.phase = CudaPhase::Locked;
  }
  return LockResult{wait + costs_.lock_base};
}

void CudaDriver::checkpoint_to_host(std::span<const Pid> pids) {
  std::lock_guard lk(mu_);
  for (auto pid : pids) {
    if (mutable_task(pid).phase != CudaPhase::Locked) {
      throw Error(ErrorKind::NotLocked, "checkpoint requires a locked task; " + pid_str(pid) + " is " +
                                            std::string(to_string(tasks_.at(pid).phase)));
    }
  }
  for (auto pid : pids) {
    auto& t = tasks_.at(pid);
    charge_transfer(t.device_bytes());
    t.host_blob = encode_host_blob(t, devices_);
    t.device_allocs.clear();
    t.streams.clear();
    t.contexts.clear();
    t.nvml_handles.clear();
    t.phase = CudaPhase::Checkpointed;
  }
}

std::map<std::uint32_t, std::uint32_t> CudaDriver::identity_map(std::size_t n) {
  std::map<std::uint32_t, std::uint32_t> m;
  for (std::uint32_t i = 0; i < n; ++i) m[i] = i;
  return m;
}

void CudaDriver::restore_from_host(std::span<const Pid> pids,
                                   const std::map<std::uint32_t, std::uint32_t>& device_map) {
  std::lock_guard lk(mu_);
  std::vector<DecodedHostBlob> decoded;
  for (auto pid : pids) {
    auto& t = mutable_task(pid);
    if (t.phase != CudaPhase::Checkpointed || !t.host_blob) {
      throw Error(ErrorKind::MissingBlob, "task " + pid_str(pid) + " has no checkpoint in host memory");
    }
    auto d = decode_host_blob(*t.host_blob);
    // Same device count, and each recorded device mapped onto one of the same
    // type, with no two recorded devices sharing a target.
    if (d.source_devices.size() != devices_.size()) {
      throw Error(ErrorKind::TopologyMismatch, "checkpoint recorded " + std::to_string(d.source_devices.size()) +
                                                   " devices; this system has " + std::to_string(devices_.size()));
    }
    std::set<std::uint32_t> targets;
    for (std::uint32_t ord = 0; ord < d.source_devices.size(); ++ord) {
      auto it = device_map.find(ord);
      if (it == device_map.end()) {
        throw Error(ErrorKind::TopologyMismatch, "device map does not cover ordinal " + std::to_string(ord));
      }
      if (it->second >= devices_.size() || !targets.insert(it->second).second) {
        throw Error(ErrorKind::TopologyMismatch, "device map target " + std::to_string(it->second) + " invalid");
      }
      if (devices_[it->second].model != d.source_devices[ord].model) {
        throw Error(ErrorKind::TopologyMismatch, "device " + std::to_string(ord) + " was " +
                                                     d.source_devices[ord].model + ", target is " +
                                                     devices_[it->second].model);
      }
    }
    decoded.push_back(std::move(d));
  }
  for (std::size_t i = 0; i < pids.size(); ++i) {
    auto& st = decoded[i].state;
    for (auto& [_, a] : st.device_allocs) a.ordinal = device_map.at(a.ordinal);
    for (auto& s : st.streams) s.ordinal = device_map.at(s.ordinal);
    for (auto& c : st.contexts) c.ordinal = device_map.at(c.ordinal);
    st.pid = pids[i];
    st.phase = CudaPhase::Locked;
    st.host_blob.reset();
    charge_transfer(st.device_bytes());
    tasks_[pids[i]] = std::move(st);
  }
}

void CudaDriver::unlock(std::span<const Pid> pids) {
  std::lock_guard lk(mu_);
  for (auto pid : pids) {
    if (mutable_task(pid).phase != CudaPhase::Locked) {
      throw Error(ErrorKind::NotLocked, "unlock requires a locked task; " + pid_str(pid) + " is " +
                                            std::string(to_string(tasks_.at(pid).phase)));
    }
  }
  if (!pids.empty()) clock_.advance(costs_.unlock);
  for (auto pid : pids) tasks_.at(pid).phase = CudaPhase::Running;
}

void CudaDriver::adopt_checkpointed(Pid pid, Bytes blob) {
  std::lock_guard lk(mu_);
  (void)decode_host_blob(blob);
  if (tasks_.contains(pid)) throw Error(ErrorKind::InvalidState, "CUDA task " + pid_str(pid) + " already exists");
  CudaTaskState t;
  t.pid = pid;
  t.phase = CudaPhase::Checkpointed;
  t.host_blob = std::move(blob);
  tasks_.emplace(pid, std::move(t));
}

std::uint64_t CudaDriver::mutation_counter(std::uint32_t ordinal) const {
  std::lock_guard lk(mu_);
  return mutations_.at(ordinal);
}

std::uint64_t CudaDriver::state_hash(Pid pid) const {
  std::lock_guard lk(mu_);
  const auto& t = task(pid);
  Hasher h;
  h.add_u64(static_cast<std::uint64_t>(t.pid)).add_u64(static_cast<std::uint64_t>(t.phase));
  for (const auto& [id, a] : t.device_allocs) h.add_u64(id).add_u64(a.ordinal).add_u64(a.addr).add(a.contents);
  for (const auto& s : t.streams) h.add_u64(s.id).add_u64(s.ordinal).add_u64(s.submitted);
  for (const auto& c : t.contexts) h.add_u64(c.id).add_u64(c.ordinal);
  for (const auto& cb : t.pending_callbacks) {
    h.add_u64(cb.id).add_u64(cb.completion_delay ? static_cast<std::uint64_t>(cb.completion_delay->count()) : ~0ULL);
  }
  for (const auto& n : t.nvml_handles) h.add_u64(n.index).add(n.uuid).add_u64(n.leftover);
  h.add_u64(t.host_blob ? fingerprint(*t.host_blob) : 0);
  h.add_u64(t.next_alloc_id).add_u64(t.next_addr);
  return h.digest();
}

std::uint64_t CudaDriver::state_hash() const {
  std::lock_guard lk(mu_);
  Hasher h;
  for (const auto& [pid, _] : tasks_) h.add_u64(state_hash(pid));
  return h.digest();
}

// --- host blob codec ---------------------------------------------------------

Bytes encode_host_blob(const CudaTaskState& t, const std::vector<CudaDeviceInfo>& source_devices) {
  ByteWriter w;
  w.raw(std::span(reinterpret_cast<const std::uint8_t*>(kBlobMagic.data()), kBlobMagic.size()));
  w.u32(kBlobVersion);
  w.u32(static_cast<std::uint32_t>(source_devices.size()));
  for (const auto& d : source_devices) {
    w.str(d.model);
    w.u64(d.memory);
  }
  w.u32(static_cast<std::uint32_t>(t.device_allocs.size()));
  for (const auto& [id, a] : t.device_allocs) {
    w.u64(id);
    w.u32(a.ordinal);
    w.u64(a.addr);
    w.bytes(a.contents);
  }
  w.u32(static_cast<std::uint32_t>(t.streams.size()));
  for (const auto& s : t.streams) {
    w.u32(s.id);
    w.u32(s.ordinal);
    w.u64(s.submitted);
  }
  w.u32(static_cast<std::uint32_t>(t.contexts.size()));
  for (const auto& c : t.contexts) {
    w.u32(c.id);
    w.u32(c.ordinal);
  }
  w.u32(static_cast<std::uint32_t>(t.pending_callbacks.size()));
  for (const auto& cb : t.pending_callbacks) {
    w.u32(cb.id);
    w.boolean(cb.completion_delay.has_value());
    w.i64(cb.completion_delay ? cb.completion_delay->count() : 0);
  }
  w.u32(static_cast<std::uint32_t>(t.nvml_handles.size()));
  for (const auto& n : t.nvml_handles) {
    w.u32(n.index);
    w.str(n.uuid);
    w.boolean(n.leftover);
  }
  w.u64(t.next_alloc_id);
  w.u64(t.next_addr);
  w.u32(crc32(w.data()));
  return w.take();
}

DecodedHostBlob decode_host_blob(std::span<const std::uint8_t> blob) {
  if (blob.size() < kBlobMagic.size() + 8) throw Error(ErrorKind::MissingBlob, "host blob truncated");
  auto body = blob.first(blob.size() - 4);
  ByteReader tail(blob.last(4));
  if (crc32(body) != tail.u32()) throw Error(ErrorKind::ImageCorrupt, "host blob checksum mismatch");
  ByteReader r(body);
  auto magic = r.raw(kBlobMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kBlobMagic.begin())) {
    throw Error(ErrorKind::ImageCorrupt, "bad host blob magic");
  }
  if (auto v = r.u32(); v != kBlobVersion) {
    throw Error(ErrorKind::VersionUnsupported, "host blob version " + std::to_string(v));
  }
  DecodedHostBlob out;
  auto& t = out.state;
  t.phase = CudaPhase::Locked;
  for (auto n = r.u32(); n > 0; --n) {
    CudaDeviceInfo d;
    d.model = r.str();
    d.memory = r.u64();
    out.source_devices.push_back(std::move(d));
  }
  for (auto n = r.u32(); n > 0; --n) {
    auto id = r.u64();
    DeviceAlloc a;
    a.ordinal = r.u32();
    a.addr = r.u64();
    a.contents = r.bytes();
    t.device_allocs.emplace(id, std::move(a));
  }
  for (auto n = r.u32(); n > 0; --n) {
    StreamState s;
    s.id = r.u32();
    s.ordinal = r.u32();
    s.submitted = r.u64();
    t.streams.push_back(s);
  }
  for (auto n = r.u32(); n > 0; --n) {
    ContextState c;
    c.id = r.u32();
    c.ordinal = r.u32();
    t.contexts.push_back(c);
  }
  for (auto n = r.u32(); n > 0; --n) {
    CallbackSpec cb;
    cb.id = r.u32();
    bool finite = r.boolean();
    auto delay = r.i64();
    if (finite) cb.completion_delay = SimDuration(delay);
    t.pending_callbacks.push_back(cb);
  }
  for (auto n = r.u32(); n > 0; --n) {
    NvmlHandle h;
    h.index = r.u32();
    h.uuid = r.str();
    h.leftover = r.boolean();
    t.nvml_handles.push_back(std::move(h));
  }
  t.next_alloc_id = r.u64();
  t.next_addr = r.u64();
  r.expect_end();
  return out;
}

}  // namespace unicr
