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

#include "unicr/engine.hpp"

#include <algorithm>

namespace unicr {

namespace {

SimDuration mib_cost(std::uint64_t bytes, SimDuration per_mib) {
  return SimDuration(static_cast<std::int64_t>(static_cast<double>(bytes) / (1024.0 * 1024.0) *
                                               static_cast<double>(per_mib.count())));
}

bool is_image_error(ErrorKind k) {
  return k == ErrorKind::ChecksumMismatch || k == ErrorKind::VersionUnsupported || k == ErrorKind::MissingFile ||
         k == ErrorKind::ImageCorrupt;
}

// Runs `f`, turning foreign exceptions into PluginError for `plugin`.
template <typename F>
auto guarded(const Plugin& plugin, F&& f) {
  try {
    return f();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::PluginError, plugin.id() + ": " + e.what(), plugin.id());
  }
}

bool contains(const std::vector<Plugin*>& v, const Plugin* p) { return std::find(v.begin(), v.end(), p) != v.end(); }

}  // namespace

Engine::Engine(EngineCosts costs) : costs_(costs) {}

void Engine::register_plugin(std::unique_ptr<Plugin> plugin) { registry_.add(std::move(plugin)); }

void register_default_plugins(Engine& engine) {
  engine.register_plugin(make_cuda_plugin());
  engine.register_plugin(make_kfd_plugin());
}

void Engine::hook_event(Machine& m, HookId id, const Plugin& p, std::vector<Pid> pids, std::string detail) {
  trace_.append(TraceEvent{TraceKind::Hook, id, p.id(), std::move(pids), std::move(detail), m.clock().now()});
}

void Engine::event(Machine& m, TraceKind kind, std::vector<Pid> pids, std::string detail) {
  trace_.append(TraceEvent{kind, std::nullopt, {}, std::move(pids), std::move(detail), m.clock().now()});
}

std::vector<Plugin*> Engine::plugins_for_devices(const SimProcessTree& tree) const {
  std::vector<std::string> paths;
  for (const auto& [_, t] : tree.tasks()) {
    for (const auto& fd : t.open_devices) paths.push_back(fd.path);
    for (const auto& v : t.vmas) {
      if (const auto* d = v.device()) paths.push_back(d->device_name);
    }
  }
  std::vector<Plugin*> out;
  for (auto* p : registry_.plugins()) {
    auto prefixes = p->device_prefixes();
    bool wanted = prefixes.empty() || std::any_of(paths.begin(), paths.end(), [&](const std::string& path) {
                    return std::any_of(prefixes.begin(), prefixes.end(),
                                       [&](const std::string& pre) { return path.starts_with(pre); });
                  });
    if (wanted) out.push_back(p);
  }
  return out;
}

DumpResult Engine::dump(Machine& m, const DumpOptions& opts) {
  trace_.clear();
  auto& tree = m.tree();
  const auto pids = tree.pids();
  if (pids.empty()) throw Error(ErrorKind::InvalidState, "nothing to dump: the process tree is empty");
  for (auto pid : pids) {
    if (tree.task(pid).run_state == RunState::Seized) {
      throw Error(ErrorKind::InvalidState, "task " + std::to_string(pid) + " is already seized by another tracer");
    }
  }

  const auto start = m.clock().now();
  auto loaded = plugins_for_devices(tree);
  Snapshot snap;
  PluginContext ctx{opts.stage, m, snap, trace_, capabilities_, opts.lock_timeout};

  const bool was_frozen = tree.freezer().state == FreezerCgroup::State::Frozen;
  const bool gpu = std::any_of(pids.begin(), pids.end(),
                               [&](Pid p) { return m.cuda().has_task(p) || m.kfd().has_process(p); });
  std::vector<Plugin*> inited;
  bool thawed = false;
  bool seized = false;

  auto exit_all = [&](bool success) {
    for (auto* p : inited) {
      hook_event(m, HookId::PluginExit, *p, pids, success ? "success" : "failure");
      guarded(*p, [&] { p->exit(ctx, success); });
    }
    inited.clear();
  };

  try {
    for (auto* p : loaded) {
      hook_event(m, HookId::PluginInit, *p, pids, std::string(to_string(opts.stage)));
      inited.push_back(p);
      guarded(*p, [&] { p->init(ctx); });
    }
    if (opts.stage != Stage::Dump) {
      throw Error(ErrorKind::Unsupported, "stage " + std::string(to_string(opts.stage)) + " is not implemented");
    }

    // Device locking needs runnable tasks, so a frozen tree with GPU work is
    // thawed and stopped with seize instead.
    if (was_frozen && gpu) {
      thaw(tree, tree.freezer());
      thawed = true;
      event(m, TraceKind::Thaw, pids);
    }

    const auto pause_begin = m.clock().now();
    for (auto* p : registry_.plugins_for(HookId::PauseDevices)) {
      if (!contains(loaded, p)) continue;
      hook_event(m, HookId::PauseDevices, *p, pids);
      guarded(*p, [&] { p->pause_devices(ctx, pids); });
    }
    if (!(was_frozen && !gpu)) {
      seize_interrupt(tree, pids);
      seized = true;
      event(m, TraceKind::Seize, pids);
    }
    const auto stopped_at = m.clock().now();

    for (auto* p : registry_.plugins_for(HookId::CheckpointDevices)) {
      if (!contains(loaded, p)) continue;
      hook_event(m, HookId::CheckpointDevices, *p, pids);
      guarded(*p, [&] { p->checkpoint_devices(ctx, pids); });
    }

    const auto fd_plugins = registry_.plugins_for(HookId::DumpExtFile);
    const auto vma_plugins = registry_.plugins_for(HookId::HandleDeviceVma);
    std::uint64_t pages = 0;
    std::uint64_t cpu_bytes = 0;
    for (auto pid : pids) {
      const auto& t = tree.task(pid);
      TaskImage ti{t.pid, t.ppid, t.thread_ids, t.capabilities, t.workload, t.steps, {}, {}};
      for (const auto& fd : t.open_devices) {
        bool claimed = false;
        for (auto* p : fd_plugins) {
          if (!contains(loaded, p)) continue;
          auto payload = guarded(*p, [&] { return p->dump_ext_file(ctx, pid, fd); });
          if (payload) {
            hook_event(m, HookId::DumpExtFile, *p, {pid}, fd.path);
            ti.fds.push_back(FdImage{fd, p->id(), std::move(*payload)});
            claimed = true;
            break;
          }
        }
        if (!claimed) throw Error(ErrorKind::UnknownDevice, "no plugin handles device file " + fd.path, fd.path);
      }
      for (const auto& v : t.vmas) {
        VmaImage vi{v, {}};
        if (v.is_device()) {
          for (auto* p : vma_plugins) {
            if (!contains(loaded, p)) continue;
            if (guarded(*p, [&] { return p->handle_device_vma(ctx, pid, v); })) {
              hook_event(m, HookId::HandleDeviceVma, *p, {pid}, v.device()->device_name);
              vi.handler = p->id();
              break;
            }
          }
          if (vi.handler.empty()) {
            throw Error(ErrorKind::UnknownDevice, "no plugin handles mapping of " + v.device()->device_name,
                        v.device()->device_name);
          }
        } else {
          pages += v.length / kPageSize;
          cpu_bytes += v.contents.size();
        }
        ti.vmas.push_back(std::move(vi));
      }
      snap.tasks.push_back(std::move(ti));
    }
    const auto dump_begin = m.clock().now();
    m.clock().advance(costs_.page_scan * static_cast<std::int64_t>(pages));
    const auto write_begin = m.clock().now();
    m.clock().advance(mib_cost(cpu_bytes, costs_.per_mib_write));
    const auto dump_end = m.clock().now();
    event(m, TraceKind::MemoryDump, pids);

    if (opts.on_frozen) opts.on_frozen(snap);

    std::uint64_t device_file_bytes = 0;
    for (const auto& [_, images] : snap.device_images) {
      for (const auto& [pid, b] : images) device_file_bytes += b.size();
    }
    m.clock().advance(mib_cost(device_file_bytes, costs_.per_mib_write));

    snap.inventory.created_at = m.clock().now().count();
    snap.inventory.process_count = static_cast<std::uint32_t>(pids.size());
    snap.inventory.has_gpu_state = std::any_of(snap.device_images.begin(), snap.device_images.end(),
                                               [](const auto& kv) { return !kv.second.empty(); });
    for (auto* p : loaded) snap.inventory.plugin_ids.push_back(p->id());
    snap.inventory.pids = pids;

    const auto commit = m.clock().now();
    auto& st = snap.stats;
    st.freezing_time = stopped_at - pause_begin;
    st.frozen_time = commit - pause_begin;
    st.mem_dump_time = dump_end - dump_begin;
    st.mem_write_time = dump_end - write_begin;
    st.checkpoint_total = commit - start;
    st.pages_scanned = pages;
    st.cpu_bytes = cpu_bytes;

    write_image_set(snap, opts.images_dir, opts.write);
    event(m, TraceKind::ImageCommit, pids, opts.images_dir.string());

    exit_all(true);
    if (seized) {
      resume(tree, pids);
      event(m, TraceKind::Resume, pids);
    }
    if (opts.final_state == FinalState::Frozen && tree.freezer().state != FreezerCgroup::State::Frozen) {
      freeze(tree, tree.freezer());
      event(m, TraceKind::Freeze, pids);
    } else if (opts.final_state == FinalState::Running && tree.freezer().state == FreezerCgroup::State::Frozen) {
      thaw(tree, tree.freezer());
      event(m, TraceKind::Thaw, pids);
    }

    DumpResult r;
    r.path = opts.images_dir;
    r.stats = st;
    r.plugins = snap.inventory.plugin_ids;
    r.has_gpu_state = snap.inventory.has_gpu_state;
    return r;
  } catch (const std::exception& e) {
    event(m, TraceKind::Rollback, pids, e.what());
    try {
      exit_all(false);
    } catch (...) {
    }
    if (seized) {
      std::vector<Pid> stopped;
      for (auto pid : pids) {
        if (tree.contains(pid) && tree.task(pid).run_state == RunState::Seized) stopped.push_back(pid);
      }
      resume(tree, stopped);
    }
    if (thawed) freeze(tree, tree.freezer());
    throw;
  }
}

RestoreResult Engine::restore(const std::filesystem::path& dir, Machine& m) {
  trace_.clear();
  const auto start = m.clock().now();
  Snapshot snap;
  try {
    snap = read_image_set(dir);
  } catch (const Error& e) {
    if (!is_image_error(e.kind())) throw;
    throw Error(ErrorKind::ImageCorrupt, std::string(e.what()), e.subject());
  }
  std::uint64_t total = 0;
  for (const auto& [_, n] : encoded_sizes(snap)) total += n;
  m.clock().advance(mib_cost(total, costs_.per_mib_read));

  if (snap.inventory.has_gpu_state && !m.has_gpus()) {
    throw Error(ErrorKind::TopologyMismatch, "image holds GPU state but machine " + m.spec().name + " has no GPUs");
  }
  std::vector<Plugin*> loaded;
  for (const auto& id : snap.inventory.plugin_ids) {
    if (!registry_.contains(id)) throw Error(ErrorKind::PluginError, "image needs plugin " + id, id);
    loaded.push_back(&registry_.get(id));
  }
  std::stable_sort(loaded.begin(), loaded.end(), [](Plugin* a, Plugin* b) { return a->priority() < b->priority(); });
  auto& tree = m.tree();
  std::vector<Pid> pids;
  for (const auto& t : snap.tasks) {
    if (tree.contains(t.pid)) throw Error(ErrorKind::InvalidState, "pid " + std::to_string(t.pid) + " is in use on target");
    pids.push_back(t.pid);
  }

  PluginContext ctx{Stage::Restore, m, snap, trace_, capabilities_, {}};
  std::vector<Plugin*> inited;
  std::vector<Pid> created;
  auto plugin_for = [&](const std::string& id) -> Plugin& {
    for (auto* p : loaded) {
      if (p->id() == id) return *p;
    }
    throw Error(ErrorKind::ImageCorrupt, "image refers to plugin " + id + " it does not list", id);
  };

  try {
    for (auto* p : loaded) {
      hook_event(m, HookId::PluginInit, *p, pids, "restore");
      inited.push_back(p);
      guarded(*p, [&] { p->init(ctx); });
    }

    for (const auto& ti : snap.tasks) {
      SimTask t;
      t.pid = ti.pid;
      t.ppid = ti.ppid;
      t.thread_ids = ti.thread_ids;
      t.run_state = RunState::Seized;
      t.capabilities = ti.capabilities;
      t.workload = ti.workload;
      t.steps = ti.steps;
      tree.add_task(std::move(t));
      created.push_back(ti.pid);
      m.clock().advance(costs_.task_create);
    }
    event(m, TraceKind::TaskCreate, pids);

    for (const auto& ti : snap.tasks) {
      for (const auto& fi : ti.fds) {
        auto& p = plugin_for(fi.plugin);
        hook_event(m, HookId::RestoreExtFile, p, {ti.pid}, fi.fd.path);
        auto fd = guarded(p, [&] { return p.restore_ext_file(ctx, ti.pid, fi); });
        if (!fd) throw Error(ErrorKind::PluginError, p.id() + " did not restore " + fi.fd.path, p.id());
        if (!tree.has_device(fd->path)) {
          throw Error(ErrorKind::TopologyMismatch, "device " + fd->path + " does not exist on " + m.spec().name, fd->path);
        }
        tree.task(ti.pid).open_devices.push_back(*fd);
      }
    }

    for (const auto& ti : snap.tasks) {
      for (const auto& vi : ti.vmas) {
        auto v = vi.vma;
        if (const auto* d = v.device()) {
          auto& p = plugin_for(vi.handler);
          if (p.hooks().contains(HookId::UpdateVmaMap)) {
            hook_event(m, HookId::UpdateVmaMap, p, {ti.pid}, d->device_name);
            auto moved = guarded(p, [&] { return p.update_vma_map(ctx, ti.pid, *d); });
            if (moved) v.backing = *moved;
          }
          const auto& name = v.device()->device_name;
          if (!tree.has_device(name)) {
            throw Error(ErrorKind::TopologyMismatch, "device " + name + " does not exist on " + m.spec().name, name);
          }
        }
        tree.map_vma(ti.pid, std::move(v));
      }
    }
    event(m, TraceKind::VmaRestore, pids);

    for (auto* p : registry_.plugins_for(HookId::ResumeDevicesLate)) {
      if (!contains(loaded, p)) continue;
      hook_event(m, HookId::ResumeDevicesLate, *p, pids);
      guarded(*p, [&] { p->resume_devices_late(ctx, pids); });
    }

    resume(tree, pids);
    event(m, TraceKind::Resume, pids);
    for (auto* p : inited) {
      hook_event(m, HookId::PluginExit, *p, pids, "success");
      guarded(*p, [&] { p->exit(ctx, true); });
    }
  } catch (const std::exception& e) {
    event(m, TraceKind::Rollback, pids, e.what());
    for (auto* p : inited) {
      try {
        hook_event(m, HookId::PluginExit, *p, pids, "failure");
        p->exit(ctx, false);
      } catch (...) {
      }
    }
    for (auto pid : created) m.kill(pid);
    for (auto pid : pids) {
      if (m.cuda().has_task(pid)) m.cuda().release(pid);
      if (m.kfd().has_process(pid)) m.kfd().release(pid);
    }
    throw;
  }

  RestoreResult r;
  r.pids = pids;
  r.stats = snap.stats;
  r.stats.restore_total = m.clock().now() - start;
  r.extra_files = std::move(snap.extra_files);
  return r;
}

}  // namespace unicr
