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

#include "unicr/sim_host.hpp"

#include <algorithm>
#include <random>

#include "unicr/error.hpp"

namespace unicr {

std::string_view to_string(RunState s) {
  switch (s) {
    case RunState::Running: return "Running";
    case RunState::Seized: return "Seized";
    case RunState::Frozen: return "Frozen";
  }
  return "?";
}

Vma* SimTask::find_vma(std::uint64_t addr, std::uint64_t len) {
  for (auto& v : vmas) {
    if (v.contains(addr, len)) return &v;
  }
  return nullptr;
}

const Vma* SimTask::find_vma(std::uint64_t addr, std::uint64_t len) const {
  return const_cast<SimTask*>(this)->find_vma(addr, len);
}

void validate_vmas(const std::vector<Vma>& vmas) {
  std::vector<const Vma*> sorted;
  for (const auto& v : vmas) {
    if (v.length == 0) throw Error(ErrorKind::SpecError, "zero-length VMA at " + to_hex(v.start));
    if (v.start + v.length < v.start) throw Error(ErrorKind::SpecError, "VMA wraps address space");
    if (!v.is_device() && v.contents.size() != v.length) {
      throw Error(ErrorKind::SpecError, "anonymous VMA contents do not match its length");
    }
    if (v.is_device() && !v.contents.empty()) {
      throw Error(ErrorKind::SpecError, "device-backed VMA carries contents");
    }
    sorted.push_back(&v);
  }
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->start < b->start; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->start < sorted[i - 1]->end()) {
      throw Error(ErrorKind::SpecError, "overlapping VMAs at " + to_hex(sorted[i]->start));
    }
  }
}

void SimProcessTree::register_device(const std::string& path) { devices_.insert(path); }

void SimProcessTree::add_task(SimTask task) {
  if (tasks_.contains(task.pid)) {
    throw Error(ErrorKind::SpecError, "duplicate pid " + std::to_string(task.pid));
  }
  validate_vmas(task.vmas);
  for (const auto& fd : task.open_devices) {
    if (!has_device(fd.path)) throw Error(ErrorKind::UnknownDevice, "no such device " + fd.path, fd.path);
  }
  std::sort(task.vmas.begin(), task.vmas.end(), [](const Vma& a, const Vma& b) { return a.start < b.start; });
  if (task.thread_ids.empty()) task.thread_ids.push_back(task.pid);
  freezer_.member_pids.insert(task.pid);
  tasks_.emplace(task.pid, std::move(task));
}

void SimProcessTree::remove_task(Pid pid) {
  tasks_.erase(pid);
  freezer_.member_pids.erase(pid);
}

void SimProcessTree::map_vma(Pid pid, Vma vma) {
  auto& t = task(pid);
  auto vmas = t.vmas;
  vmas.push_back(std::move(vma));
  validate_vmas(vmas);
  std::sort(vmas.begin(), vmas.end(), [](const Vma& a, const Vma& b) { return a.start < b.start; });
  t.vmas = std::move(vmas);
}

SimTask& SimProcessTree::task(Pid pid) {
  auto it = tasks_.find(pid);
  if (it == tasks_.end()) throw Error(ErrorKind::NoSuchTask, "no task with pid " + std::to_string(pid));
  return it->second;
}

const SimTask& SimProcessTree::task(Pid pid) const { return const_cast<SimProcessTree*>(this)->task(pid); }

std::vector<Pid> SimProcessTree::pids() const {
  std::vector<Pid> out;
  for (const auto& [pid, _] : tasks_) out.push_back(pid);
  return out;
}

std::vector<Pid> SimProcessTree::children(Pid pid) const {
  std::vector<Pid> out;
  for (const auto& [p, t] : tasks_) {
    if (t.ppid == pid && p != pid) out.push_back(p);
  }
  return out;
}

Bytes SimProcessTree::read_memory(Pid pid, std::uint64_t addr, std::uint64_t len) const {
  const auto& t = task(pid);
  const Vma* v = t.find_vma(addr, len);
  if (v == nullptr || v->is_device()) {
    throw Error(ErrorKind::InvalidState, "address " + to_hex(addr) + " not mapped anonymously in pid " +
                                             std::to_string(pid));
  }
  auto off = addr - v->start;
  return Bytes(v->contents.begin() + static_cast<std::ptrdiff_t>(off),
               v->contents.begin() + static_cast<std::ptrdiff_t>(off + len));
}

void SimProcessTree::write_memory(Pid pid, std::uint64_t addr, std::span<const std::uint8_t> data) {
  auto& t = task(pid);
  Vma* v = t.find_vma(addr, data.size());
  if (v == nullptr || v->is_device()) {
    throw Error(ErrorKind::InvalidState, "address " + to_hex(addr) + " not mapped anonymously in pid " +
                                             std::to_string(pid));
  }
  std::copy(data.begin(), data.end(), v->contents.begin() + static_cast<std::ptrdiff_t>(addr - v->start));
}

std::uint64_t SimProcessTree::state_hash() const {
  Hasher h;
  for (const auto& [pid, t] : tasks_) {
    h.add_u64(static_cast<std::uint64_t>(pid)).add_u64(static_cast<std::uint64_t>(t.ppid));
    for (auto tid : t.thread_ids) h.add_u64(static_cast<std::uint64_t>(tid));
    h.add_u64(static_cast<std::uint64_t>(t.run_state)).add_u64(t.capabilities);
    h.add_u64(t.workload.seed).add_u64(t.workload.cpu_writes_per_step).add_u64(t.workload.device_writes_per_step);
    h.add_u64(t.steps);
    for (const auto& v : t.vmas) {
      h.add_u64(v.start).add_u64(v.length);
      if (const auto* d = v.device()) {
        h.add(d->device_name).add_u64(d->mmap_offset);
      } else {
        h.add(v.contents);
      }
    }
    for (const auto& fd : t.open_devices) h.add_u64(static_cast<std::uint64_t>(fd.fd)).add(fd.path);
  }
  h.add_u64(static_cast<std::uint64_t>(freezer_.state));
  for (auto p : freezer_.member_pids) h.add_u64(static_cast<std::uint64_t>(p));
  return h.digest();
}

// --- spec parsing ----------------------------------------------------------

namespace {

std::uint32_t parse_caps(const nlohmann::json& j) {
  std::uint32_t caps = 0;
  for (const auto& c : j) {
    auto s = c.get<std::string>();
    if (s == "CAP_CHECKPOINT_RESTORE") {
      caps |= kCapCheckpointRestore;
    } else if (s == "CAP_SYS_ADMIN") {
      caps |= kCapSysAdmin;
    } else {
      throw Error(ErrorKind::SpecError, "unknown capability " + s);
    }
  }
  return caps;
}

nlohmann::json caps_to_json(std::uint32_t caps) {
  auto out = nlohmann::json::array();
  if (caps & kCapCheckpointRestore) out.push_back("CAP_CHECKPOINT_RESTORE");
  if (caps & kCapSysAdmin) out.push_back("CAP_SYS_ADMIN");
  return out;
}

}  // namespace

ProcessTreeSpec parse_process_tree_spec(const nlohmann::json& doc) {
  try {
    ProcessTreeSpec spec;
    spec.seed = doc.value("seed", std::uint64_t{0});
    spec.devices = doc.value("devices", std::vector<std::string>{});
    for (const auto& pj : doc.at("processes")) {
      ProcessSpec p;
      p.pid = pj.at("pid").get<Pid>();
      p.ppid = pj.value("ppid", Pid{0});
      p.threads = pj.value("threads", 1u);
      if (pj.contains("caps")) p.capabilities = parse_caps(pj["caps"]);
      p.devices = pj.value("devices", std::vector<std::string>{});
      for (const auto& vj : pj.value("vmas", nlohmann::json::array())) {
        VmaSpec v;
        v.start = vj.at("start").get<std::uint64_t>();
        v.length = vj.at("length").get<std::uint64_t>();
        if (vj.contains("device")) v.device = vj["device"].get<std::string>();
        v.offset = vj.value("offset", std::uint64_t{0});
        if (vj.contains("fill")) v.fill = vj["fill"].get<std::uint8_t>();
        p.vmas.push_back(std::move(v));
      }
      if (pj.contains("workload")) {
        const auto& wj = pj["workload"];
        p.workload.seed = wj.value("seed", spec.seed ^ static_cast<std::uint64_t>(p.pid));
        p.workload.cpu_writes_per_step = wj.value("cpu_writes", 4u);
        p.workload.device_writes_per_step = wj.value("device_writes", 2u);
      } else {
        p.workload.seed = spec.seed ^ static_cast<std::uint64_t>(p.pid);
      }
      spec.processes.push_back(std::move(p));
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SpecError, std::string("malformed process tree spec: ") + e.what());
  }
}

nlohmann::json to_json(const ProcessTreeSpec& spec) {
  nlohmann::json doc;
  doc["seed"] = spec.seed;
  doc["devices"] = spec.devices;
  auto procs = nlohmann::json::array();
  for (const auto& p : spec.processes) {
    nlohmann::json pj;
    pj["pid"] = p.pid;
    pj["ppid"] = p.ppid;
    pj["threads"] = p.threads;
    pj["caps"] = caps_to_json(p.capabilities);
    pj["devices"] = p.devices;
    auto vmas = nlohmann::json::array();
    for (const auto& v : p.vmas) {
      nlohmann::json vj{{"start", v.start}, {"length", v.length}};
      if (v.device) {
        vj["device"] = *v.device;
        vj["offset"] = v.offset;
      }
      if (v.fill) vj["fill"] = *v.fill;
      vmas.push_back(std::move(vj));
    }
    pj["vmas"] = std::move(vmas);
    pj["workload"] = {{"seed", p.workload.seed},
                      {"cpu_writes", p.workload.cpu_writes_per_step},
                      {"device_writes", p.workload.device_writes_per_step}};
    procs.push_back(std::move(pj));
  }
  doc["processes"] = std::move(procs);
  return doc;
}

Bytes initial_contents(std::uint64_t seed, Pid pid, std::uint64_t start, std::uint64_t length) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(pid), static_cast<std::uint32_t>(start),
                    static_cast<std::uint32_t>(start >> 32)};
  std::mt19937_64 rng(seq);
  Bytes out(length);
  for (std::uint64_t i = 0; i < length; i += 8) {
    auto v = rng();
    for (std::uint64_t b = 0; b < 8 && i + b < length; ++b) out[i + b] = static_cast<std::uint8_t>(v >> (8 * b));
  }
  return out;
}

SimProcessTree spawn_tree(const ProcessTreeSpec& spec) {
  if (spec.processes.empty()) throw Error(ErrorKind::SpecError, "process tree spec has no processes");
  SimProcessTree tree;
  for (const auto& d : spec.devices) tree.register_device(d);
  std::set<Pid> pids;
  for (const auto& p : spec.processes) pids.insert(p.pid);
  for (const auto& p : spec.processes) {
    if (p.pid <= 0) throw Error(ErrorKind::SpecError, "pid must be positive");
    if (p.ppid != 0 && !pids.contains(p.ppid)) {
      throw Error(ErrorKind::SpecError, "pid " + std::to_string(p.pid) + " has unknown parent");
    }
    SimTask t;
    t.pid = p.pid;
    t.ppid = p.ppid;
    t.capabilities = p.capabilities;
    t.workload = p.workload;
    t.thread_ids.push_back(p.pid);
    for (std::uint32_t i = 1; i < p.threads; ++i) {
      t.thread_ids.push_back(static_cast<Pid>((static_cast<std::uint32_t>(p.pid) << 12) + i));
    }
    for (const auto& vs : p.vmas) {
      Vma v;
      v.start = vs.start;
      v.length = vs.length;
      if (vs.device) {
        v.backing = DeviceFileBacking{*vs.device, vs.offset};
      } else if (vs.fill) {
        v.contents.assign(vs.length, *vs.fill);
      } else {
        v.contents = initial_contents(spec.seed, p.pid, vs.start, vs.length);
      }
      t.vmas.push_back(std::move(v));
    }
    int fd = 3;
    for (const auto& d : p.devices) t.open_devices.push_back(DeviceFd{fd++, d});
    tree.add_task(std::move(t));
  }
  return tree;
}

// --- suspension ------------------------------------------------------------

void seize_interrupt(SimProcessTree& tree, std::span<const Pid> pids) {
  for (auto pid : pids) {
    const auto& t = tree.task(pid);
    if (t.run_state != RunState::Running) {
      throw Error(ErrorKind::InvalidState,
                  "seize requires a runnable task; pid " + std::to_string(pid) + " is " +
                      std::string(to_string(t.run_state)));
    }
  }
  for (auto pid : pids) tree.task(pid).run_state = RunState::Seized;
}

void resume(SimProcessTree& tree, std::span<const Pid> pids) {
  for (auto pid : pids) {
    if (tree.task(pid).run_state != RunState::Seized) {
      throw Error(ErrorKind::InvalidState, "pid " + std::to_string(pid) + " is not seized");
    }
  }
  for (auto pid : pids) tree.task(pid).run_state = RunState::Running;
}

void freeze(SimProcessTree& tree, FreezerCgroup& cgroup) {
  for (auto pid : cgroup.member_pids) (void)tree.task(pid);
  for (auto pid : cgroup.member_pids) tree.task(pid).run_state = RunState::Frozen;
  cgroup.state = FreezerCgroup::State::Frozen;
}

void thaw(SimProcessTree& tree, FreezerCgroup& cgroup) {
  for (auto pid : cgroup.member_pids) (void)tree.task(pid);
  for (auto pid : cgroup.member_pids) tree.task(pid).run_state = RunState::Running;
  cgroup.state = FreezerCgroup::State::Thawed;
}

// --- workload --------------------------------------------------------------

namespace {

Bytes le_bytes(std::uint64_t v, std::size_t n) {
  Bytes b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * (i % 8)));
  return b;
}

}  // namespace

MutationRecord run_workload_step(SimProcessTree& tree, Pid pid, DeviceWorkSink* sink) {
  auto& t = tree.task(pid);
  if (t.run_state != RunState::Running) {
    throw Error(ErrorKind::InvalidState, "workload step on pid " + std::to_string(pid) + " in state " +
                                             std::string(to_string(t.run_state)));
  }
  std::seed_seq seq{static_cast<std::uint32_t>(t.workload.seed), static_cast<std::uint32_t>(t.workload.seed >> 32),
                    static_cast<std::uint32_t>(pid), static_cast<std::uint32_t>(t.steps),
                    static_cast<std::uint32_t>(t.steps >> 32)};
  std::mt19937_64 rng(seq);

  MutationRecord rec;
  rec.pid = pid;
  rec.step = t.steps;

  std::vector<Vma*> anon;
  for (auto& v : t.vmas) {
    if (!v.is_device()) anon.push_back(&v);
  }
  if (!anon.empty()) {
    for (std::uint32_t i = 0; i < t.workload.cpu_writes_per_step; ++i) {
      Vma* v = anon[rng() % anon.size()];
      auto width = std::min<std::uint64_t>(8, v->length);
      auto off = rng() % (v->length - width + 1);
      CpuWrite w{v->start + off, le_bytes(rng(), width)};
      std::copy(w.bytes.begin(), w.bytes.end(), v->contents.begin() + static_cast<std::ptrdiff_t>(off));
      rec.cpu.push_back(std::move(w));
    }
  }

  if (sink != nullptr && t.workload.device_writes_per_step > 0) {
    auto targets = sink->targets(pid);
    std::erase_if(targets, [](const DeviceTarget& d) { return d.size == 0; });
    for (std::uint32_t i = 0; i < t.workload.device_writes_per_step && !targets.empty(); ++i) {
      const auto& d = targets[rng() % targets.size()];
      auto width = std::min<std::uint64_t>(8, d.size);
      auto off = rng() % (d.size - width + 1);
      DeviceWrite w{d.family, d.id, off, le_bytes(rng(), width)};
      sink->submit(pid, w);
      rec.device.push_back(std::move(w));
    }
  }
  ++t.steps;
  return rec;
}

}  // namespace unicr
