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

#include "unicr/machine.hpp"

#include <algorithm>
#include <set>

namespace unicr {

namespace {

constexpr std::uint64_t kCudaVmaBase = 0x7e0000000000ULL;
constexpr std::uint64_t kCudaVmaStride = 0x1000000ULL;
constexpr std::uint64_t kCudaVmaLength = 16 * kPageSize;
constexpr std::uint64_t kKfdVaBase = 0x500000000000ULL;
constexpr std::uint64_t kQueueRingSize = 4096;
constexpr std::uint64_t kCtxSaveSize = 8192;
constexpr std::uint64_t kDoorbellSize = 8192;

std::uint64_t page_round(std::uint64_t n) { return std::max<std::uint64_t>(kPageSize, (n + kPageSize - 1) / kPageSize * kPageSize); }

template <typename F>
auto json_guard(F&& f, const char* what) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SpecError, std::string("malformed ") + what + ": " + e.what());
  }
}

std::optional<SimDuration> parse_callback(const nlohmann::json& j) {
  if (j.is_string() && j.get<std::string>() == "never") return std::nullopt;
  if (j.is_number()) return SimDuration(j.get<std::int64_t>());
  if (j.value("never", false)) return std::nullopt;
  return SimDuration(j.at("delay_us").get<std::int64_t>());
}

}  // namespace

MachineSpec parse_machine_spec(const nlohmann::json& doc) {
  return json_guard(
      [&] {
        MachineSpec m;
        m.name = doc.value("name", std::string("local"));
        for (const auto& d : doc.value("cuda", nlohmann::json::array())) {
          m.cuda_devices.push_back(CudaDeviceInfo{d.value("model", std::string("A100")), d.value("memory", std::uint64_t{1} << 30)});
        }
        if (doc.contains("kfd")) {
          const auto& k = doc["kfd"];
          for (const auto& d : k.value("devices", nlohmann::json::array())) {
            m.kfd_devices.push_back(KfdDeviceProps{d.value("isa", std::string("gfx90a")), d.value("cus", 104u),
                                                   d.value("vram", std::uint64_t{64} << 30), d.value("host_access", true)});
          }
          for (const auto& l : k.value("links", nlohmann::json::array())) {
            m.kfd_links.emplace_back(l.at(0).get<int>(), l.at(1).get<int>());
          }
        }
        m.gpuid_salt = doc.value("salt", std::uint64_t{0});
        m.mmap_offset_base = doc.value("mmap_offset_base", std::uint64_t{0x100000000ULL});
        return m;
      },
      "machine spec");
}

nlohmann::json to_json(const MachineSpec& m) {
  nlohmann::json doc;
  doc["name"] = m.name;
  doc["cuda"] = nlohmann::json::array();
  for (const auto& d : m.cuda_devices) doc["cuda"].push_back({{"model", d.model}, {"memory", d.memory}});
  auto devs = nlohmann::json::array();
  for (const auto& d : m.kfd_devices) {
    devs.push_back({{"isa", d.instruction_set}, {"cus", d.compute_units}, {"vram", d.vram}, {"host_access", d.host_vram_accessible}});
  }
  auto links = nlohmann::json::array();
  for (auto [a, b] : m.kfd_links) links.push_back({a, b});
  doc["kfd"] = {{"devices", devs}, {"links", links}};
  doc["salt"] = m.gpuid_salt;
  doc["mmap_offset_base"] = m.mmap_offset_base;
  return doc;
}

TreeSpec parse_tree_spec(const nlohmann::json& doc) {
  TreeSpec spec;
  spec.processes = parse_process_tree_spec(doc);
  json_guard(
      [&] {
        for (const auto& pj : doc.at("processes")) {
          auto pid = pj.at("pid").get<Pid>();
          if (pj.contains("cuda")) {
            const auto& cj = pj["cuda"];
            CudaTaskSpec c;
            for (const auto& a : cj.value("allocs", nlohmann::json::array())) {
              c.allocs.push_back(CudaAllocSpec{a.value("ordinal", 0u), a.at("size").get<std::uint64_t>()});
            }
            c.streams = cj.value("streams", 0u);
            for (const auto& cb : cj.value("callbacks", nlohmann::json::array())) c.callbacks.push_back(parse_callback(cb));
            c.nvml_handles = cj.value("nvml", 0u);
            spec.cuda[pid] = std::move(c);
          }
          if (pj.contains("kfd")) {
            const auto& kj = pj["kfd"];
            KfdTaskSpec k;
            for (const auto& b : kj.value("bos", nlohmann::json::array())) {
              k.bos.push_back(KfdBoSpec{parse_bo_kind(b.value("kind", std::string("VRAM"))), b.value("gpu", 0u),
                                        b.at("size").get<std::uint64_t>()});
            }
            for (const auto& q : kj.value("queues", nlohmann::json::array())) {
              auto kind = q.value("kind", std::string("compute"));
              if (kind != "compute" && kind != "dma") throw Error(ErrorKind::SpecError, "unknown queue kind " + kind);
              k.queues.push_back(KfdQueueSpec{kind == "dma" ? QueueKind::Dma : QueueKind::Compute, q.value("gpu", 0u)});
            }
            k.events = kj.value("events", 0u);
            spec.kfd[pid] = std::move(k);
          }
        }
        return 0;
      },
      "tree spec");
  return spec;
}

Machine::Machine(MachineSpec spec) : spec_(std::move(spec)) {
  cuda_ = std::make_unique<CudaDriver>(clock_, spec_.cuda_devices);
  kfd_ = std::make_unique<KfdDriver>(clock_, make_topology(spec_.kfd_devices, spec_.kfd_links, spec_.gpuid_salt),
                                     spec_.mmap_offset_base);
  kfd_->set_host_memory(this);
  cuda_->set_runnable_probe(
      [this](Pid pid) { return tree_.contains(pid) && tree_.task(pid).run_state == RunState::Running; });
  cuda_->set_host_reader([this](Pid pid, std::uint64_t addr, std::uint64_t len) { return read(pid, addr, len); });
  for (const auto& n : device_nodes()) tree_.register_device(n);
}

std::vector<std::string> Machine::device_nodes() const {
  std::vector<std::string> out;
  if (!spec_.cuda_devices.empty()) {
    out.emplace_back(kNvidiaCtl);
    out.emplace_back(kNvidiaUvm);
    for (std::uint32_t i = 0; i < spec_.cuda_devices.size(); ++i) out.push_back(cuda_->device_path(i));
  }
  if (!spec_.kfd_devices.empty()) {
    out.emplace_back(kKfdPath);
    for (const auto& d : kfd_->topology().devices) out.push_back(d.render_node);
  }
  return out;
}

void Machine::spawn(const TreeSpec& spec) {
  for (const auto& p : spec.processes.processes) {
    if (tree_.contains(p.pid)) throw Error(ErrorKind::SpecError, "pid " + std::to_string(p.pid) + " already running");
  }
  if (!spec.cuda.empty() && spec_.cuda_devices.empty()) {
    throw Error(ErrorKind::SpecError, "machine " + spec_.name + " has no CUDA devices");
  }
  if (!spec.kfd.empty() && spec_.kfd_devices.empty()) {
    throw Error(ErrorKind::SpecError, "machine " + spec_.name + " has no KFD devices");
  }

  auto pspec = spec.processes;
  for (const auto& d : device_nodes()) {
    if (std::find(pspec.devices.begin(), pspec.devices.end(), d) == pspec.devices.end()) pspec.devices.push_back(d);
  }
  for (const auto& d : pspec.devices) tree_.register_device(d);
  for (auto& p : pspec.processes) {
    auto add = [&](const std::string& path) {
      if (std::find(p.devices.begin(), p.devices.end(), path) == p.devices.end()) p.devices.push_back(path);
    };
    if (auto it = spec.cuda.find(p.pid); it != spec.cuda.end()) {
      add(kNvidiaCtl);
      add(kNvidiaUvm);
      std::set<std::uint32_t> ords;
      for (const auto& a : it->second.allocs) ords.insert(a.ordinal);
      for (auto o : ords) {
        if (o >= spec_.cuda_devices.size()) throw Error(ErrorKind::SpecError, "no CUDA device " + std::to_string(o));
        add(cuda_->device_path(o));
      }
    }
    if (auto it = spec.kfd.find(p.pid); it != spec.kfd.end()) {
      add(kKfdPath);
      std::set<std::uint32_t> gpus;
      for (const auto& b : it->second.bos) gpus.insert(b.gpu);
      for (const auto& q : it->second.queues) gpus.insert(q.gpu);
      if (it->second.events > 0) gpus.insert(gpus.empty() ? 0 : *gpus.begin());
      for (auto g : gpus) {
        if (g >= spec_.kfd_devices.size()) throw Error(ErrorKind::SpecError, "no KFD device " + std::to_string(g));
        add(kfd_->topology().devices[g].render_node);
      }
    }
  }

  auto fresh = spawn_tree(pspec);
  std::vector<Pid> added;
  try {
    for (const auto& [pid, t] : fresh.tasks()) {
      tree_.add_task(t);
      added.push_back(pid);
    }
    for (const auto& [pid, c] : spec.cuda) {
      if (!tree_.contains(pid)) throw Error(ErrorKind::SpecError, "CUDA state for unknown pid " + std::to_string(pid));
      build_cuda(pid, c);
    }
    for (const auto& [pid, k] : spec.kfd) {
      if (!tree_.contains(pid)) throw Error(ErrorKind::SpecError, "KFD state for unknown pid " + std::to_string(pid));
      build_kfd(pid, k);
    }
  } catch (...) {
    for (auto pid : added) kill(pid);
    throw;
  }
}

void Machine::build_cuda(Pid pid, const CudaTaskSpec& spec) {
  cuda_->create_task(pid);
  std::set<std::uint32_t> ords;
  for (const auto& a : spec.allocs) {
    ApiCall c;
    c.op = ApiOp::Malloc;
    c.ordinal = a.ordinal;
    c.size = a.size;
    cuda_->call(pid, c);
    ords.insert(a.ordinal);
  }
  std::vector<std::uint32_t> ord_list(ords.begin(), ords.end());
  if (ord_list.empty()) ord_list.push_back(0);
  for (std::uint32_t s = 0; s < spec.streams; ++s) {
    ApiCall c;
    c.op = ApiOp::StreamCreate;
    c.ordinal = ord_list[s % ord_list.size()];
    cuda_->call(pid, c);
  }
  auto& t = cuda_->mutable_task(pid);
  for (std::size_t i = 0; i < spec.callbacks.size(); ++i) {
    t.pending_callbacks.push_back(CallbackSpec{static_cast<std::uint32_t>(i + 1), spec.callbacks[i]});
  }
  for (std::uint32_t i = 0; i < spec.nvml_handles; ++i) {
    auto idx = static_cast<std::uint32_t>(i % spec_.cuda_devices.size());
    t.nvml_handles.push_back(NvmlHandle{idx, "GPU-" + to_hex(Hasher{}.add(spec_.cuda_devices[idx].model).add_u64(idx).digest()), true});
  }
  for (auto o : ords) {
    tree_.map_vma(pid, Vma{kCudaVmaBase + o * kCudaVmaStride, kCudaVmaLength, DeviceFileBacking{cuda_->device_path(o), 0}, {}});
  }
}

void Machine::build_kfd(Pid pid, const KfdTaskSpec& spec) {
  const auto& topo = kfd_->topology();
  kfd_->open(pid);
  std::uint64_t va = kKfdVaBase;
  auto next_va = [&](std::uint64_t size) {
    auto at = va;
    va += page_round(size) + kPageSize;
    return at;
  };
  auto gpuid = [&](std::uint32_t index) { return topo.devices.at(index).gpuid; };
  auto map_device = [&](std::uint64_t handle) {
    const auto& bo = kfd_->process(pid).bos.at(handle);
    if (bo.kind == BoKind::Userptr) return;
    const auto& node = topo.find(bo.gpuid)->render_node;
    tree_.map_vma(pid, Vma{bo.virtual_addr, page_round(bo.size), DeviceFileBacking{node, bo.mmap_offset}, {}});
  };
  auto alloc = [&](BoKind kind, std::uint32_t gpu, std::uint64_t size) {
    auto at = next_va(size);
    if (kind == BoKind::Userptr) {
      auto seed = tree_.task(pid).workload.seed;
      tree_.map_vma(pid, Vma{at, page_round(size), AnonymousBacking{}, initial_contents(seed, pid, at, page_round(size))});
    }
    auto h = kfd_->alloc_bo(pid, kind, gpuid(gpu), size, at);
    map_device(h);
    return h;
  };

  for (const auto& b : spec.bos) alloc(b.kind, b.gpu, b.size);
  std::set<std::uint32_t> doorbells;
  for (const auto& q : spec.queues) {
    if (doorbells.insert(q.gpu).second) alloc(BoKind::Doorbell, q.gpu, kDoorbellSize);
    QueueBos bos;
    bos.ring_buffer = alloc(BoKind::Gtt, q.gpu, kQueueRingSize);
    bos.aql_queue = alloc(BoKind::Gtt, q.gpu, kQueueRingSize);
    bos.eop_buffer = alloc(BoKind::Vram, q.gpu, kPageSize);
    bos.ctx_save_area = alloc(BoKind::Vram, q.gpu, kCtxSaveSize);
    kfd_->create_queue(pid, q.kind, gpuid(q.gpu), bos);
  }
  if (spec.events > 0) {
    std::uint32_t gpu = spec.bos.empty() ? (spec.queues.empty() ? 0 : spec.queues.front().gpu) : spec.bos.front().gpu;
    alloc(BoKind::Gtt, gpu, kPageSize);
    for (std::uint32_t i = 0; i < spec.events; ++i) kfd_->create_event(pid);
  }
}

MutationRecord Machine::step(Pid pid) { return run_workload_step(tree_, pid, this); }

void Machine::kill(Pid pid) {
  if (tree_.contains(pid)) tree_.remove_task(pid);
  if (cuda_->has_task(pid)) cuda_->release(pid);
  if (kfd_->has_process(pid)) kfd_->release(pid);
}

void Machine::kill_all() {
  for (auto pid : tree_.pids()) kill(pid);
  for (auto pid : cuda_->pids()) cuda_->release(pid);
  for (auto pid : kfd_->pids()) kfd_->release(pid);
}

std::uint64_t Machine::state_hash() const {
  return Hasher{}.add_u64(tree_.state_hash()).add_u64(cuda_->state_hash()).add_u64(kfd_->state_hash()).digest();
}

bool Machine::is_mapped(Pid pid, std::uint64_t addr, std::uint64_t len) const {
  if (!tree_.contains(pid)) return false;
  const auto* v = tree_.task(pid).find_vma(addr, len);
  return v != nullptr && !v->is_device();
}

Bytes Machine::read(Pid pid, std::uint64_t addr, std::uint64_t len) const { return tree_.read_memory(pid, addr, len); }

std::vector<DeviceTarget> Machine::targets(Pid pid) {
  std::vector<DeviceTarget> out;
  if (cuda_->has_task(pid)) {
    for (const auto& [id, a] : cuda_->task(pid).device_allocs) {
      out.push_back(DeviceTarget{DeviceFamily::Cuda, id, a.contents.size()});
    }
  }
  if (kfd_->has_process(pid)) {
    for (const auto& [h, bo] : kfd_->process(pid).bos) {
      if (bo.kind == BoKind::Vram || bo.kind == BoKind::Gtt) out.push_back(DeviceTarget{DeviceFamily::Kfd, h, bo.size});
    }
  }
  return out;
}

void Machine::submit(Pid pid, const DeviceWrite& w) {
  if (w.family == DeviceFamily::Cuda) {
    ApiCall c;
    c.op = ApiOp::MemcpyHtoD;
    c.handle = w.target;
    c.offset = w.offset;
    c.payload = w.bytes;
    cuda_->call(pid, c);
  } else {
    kfd_->write_bo(pid, w.target, w.offset, w.bytes);
  }
}

// --- canonical view ----------------------------------------------------------

namespace {

struct CanonicalNames {
  std::map<std::string, std::string> nodes;  // render node -> "render:<index>"
  std::map<std::uint32_t, std::uint64_t> gpu_index;
};

CanonicalNames canonical_names(const Machine& m) {
  CanonicalNames n;
  const auto& devs = m.kfd().topology().devices;
  for (std::size_t i = 0; i < devs.size(); ++i) {
    n.nodes[devs[i].render_node] = "render:" + std::to_string(i);
    n.gpu_index[devs[i].gpuid] = i;
  }
  return n;
}

void hash_task(const Machine& m, const CanonicalNames& names, Pid pid, Hasher& h) {
  const auto& t = m.tree().task(pid);
  h.add_u64(static_cast<std::uint64_t>(pid)).add_u64(static_cast<std::uint64_t>(t.ppid));
  for (auto tid : t.thread_ids) h.add_u64(static_cast<std::uint64_t>(tid));
  h.add_u64(static_cast<std::uint64_t>(t.run_state)).add_u64(t.capabilities);
  h.add_u64(t.workload.seed).add_u64(t.workload.cpu_writes_per_step).add_u64(t.workload.device_writes_per_step);
  h.add_u64(t.steps);
  const KfdProcessState* kp = m.kfd().has_process(pid) ? &m.kfd().process(pid) : nullptr;
  for (const auto& v : t.vmas) {
    h.add_u64(v.start).add_u64(v.length);
    if (const auto* d = v.device()) {
      if (auto it = names.nodes.find(d->device_name); it != names.nodes.end()) {
        h.add(it->second);
        std::uint64_t handle = 0;
        if (kp != nullptr) {
          for (const auto& [hd, bo] : kp->bos) {
            if (bo.kind != BoKind::Userptr && bo.mmap_offset == d->mmap_offset &&
                m.kfd().topology().find(bo.gpuid)->render_node == d->device_name) {
              handle = hd;
            }
          }
        }
        h.add_u64(handle);
      } else {
        h.add(d->device_name).add_u64(d->mmap_offset);
      }
    } else {
      h.add(v.contents);
    }
  }
  for (const auto& fd : t.open_devices) {
    auto it = names.nodes.find(fd.path);
    h.add_u64(static_cast<std::uint64_t>(fd.fd)).add(it != names.nodes.end() ? it->second : fd.path);
  }
  if (m.cuda().has_task(pid)) {
    const auto& c = m.cuda().task(pid);
    h.add("cuda").add_u64(static_cast<std::uint64_t>(c.phase));
    for (const auto& [id, a] : c.device_allocs) h.add_u64(id).add_u64(a.ordinal).add_u64(a.addr).add(a.contents);
    for (const auto& s : c.streams) h.add_u64(s.id).add_u64(s.ordinal).add_u64(s.submitted);
    for (const auto& cx : c.contexts) h.add_u64(cx.id).add_u64(cx.ordinal);
    for (const auto& n : c.nvml_handles) h.add_u64(n.index).add(n.uuid).add_u64(n.leftover);
    h.add_u64(c.next_alloc_id).add_u64(c.next_addr);
  }
  if (kp != nullptr) {
    h.add("kfd").add_u64(static_cast<std::uint64_t>(kp->state)).add_u64(kp->next_handle);
    for (const auto& [hd, bo] : kp->bos) {
      h.add_u64(hd).add_u64(static_cast<std::uint64_t>(bo.kind)).add_u64(names.gpu_index.at(bo.gpuid));
      h.add_u64(bo.size).add_u64(bo.virtual_addr).add(bo.contents);
    }
    for (const auto& q : kp->queues) {
      h.add_u64(q.queue_id).add_u64(static_cast<std::uint64_t>(q.kind)).add_u64(names.gpu_index.at(q.gpuid));
      h.add(q.control_stack).add(q.mqd).add_u64(q.read_ptr).add_u64(q.write_ptr);
      h.add_u64(q.doorbell_offset).add_u64(q.aql_ptr).add_u64(q.evicted);
      h.add_u64(q.user_bos.ring_buffer).add_u64(q.user_bos.aql_queue).add_u64(q.user_bos.eop_buffer);
      h.add_u64(q.user_bos.ctx_save_area);
    }
    for (const auto& e : kp->events) h.add_u64(e.event_id).add_u64(e.signaled);
  }
}

}  // namespace

std::uint64_t canonical_digest(const Machine& m, Pid pid) {
  Hasher h;
  hash_task(m, canonical_names(m), pid, h);
  return h.digest();
}

std::uint64_t canonical_digest(const Machine& m) {
  auto names = canonical_names(m);
  Hasher h;
  for (auto pid : m.tree().pids()) hash_task(m, names, pid, h);
  h.add_u64(static_cast<std::uint64_t>(m.tree().freezer().state));
  return h.digest();
}

std::vector<std::string> stale_device_references(const Machine& m) {
  std::vector<std::string> out;
  const auto& topo = m.kfd().topology();
  auto node_known = [&](const std::string& path) { return m.tree().has_device(path); };
  for (const auto& [pid, t] : m.tree().tasks()) {
    auto where = "task " + std::to_string(pid) + ": ";
    for (const auto& fd : t.open_devices) {
      if (!node_known(fd.path)) out.push_back(where + "fd " + std::to_string(fd.fd) + " names " + fd.path);
    }
    const KfdProcessState* kp = m.kfd().has_process(pid) ? &m.kfd().process(pid) : nullptr;
    for (const auto& v : t.vmas) {
      const auto* d = v.device();
      if (d == nullptr) continue;
      if (!node_known(d->device_name)) {
        out.push_back(where + "mapping at " + to_hex(v.start) + " names " + d->device_name);
        continue;
      }
      if (!d->device_name.starts_with(kRenderNodePrefix)) continue;
      bool found = false;
      if (kp != nullptr) {
        for (const auto& [h, bo] : kp->bos) {
          const auto* dev = topo.find(bo.gpuid);
          found = found || (bo.kind != BoKind::Userptr && dev != nullptr && dev->render_node == d->device_name &&
                            bo.mmap_offset == d->mmap_offset && bo.virtual_addr == v.start);
        }
      }
      if (!found) out.push_back(where + "mapping at " + to_hex(v.start) + " has stale offset " + to_hex(d->mmap_offset));
    }
    if (kp != nullptr) {
      for (const auto& [h, bo] : kp->bos) {
        if (topo.find(bo.gpuid) == nullptr) out.push_back(where + "buffer " + std::to_string(h) + " on gpuid " + std::to_string(bo.gpuid));
      }
      for (const auto& q : kp->queues) {
        if (topo.find(q.gpuid) == nullptr) out.push_back(where + "queue " + std::to_string(q.queue_id) + " on gpuid " + std::to_string(q.gpuid));
      }
    }
  }
  return out;
}

}  // namespace unicr
