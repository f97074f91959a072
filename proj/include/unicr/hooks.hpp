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
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "unicr/image_store.hpp"
#include "unicr/machine.hpp"

namespace unicr {

enum class HookId : std::uint8_t {
  PauseDevices,
  CheckpointDevices,
  DumpExtFile,
  RestoreExtFile,
  HandleDeviceVma,
  UpdateVmaMap,
  ResumeDevicesLate,
  PluginInit,
  PluginExit,
};
std::string_view to_string(HookId id);  // e.g. "PAUSE_DEVICES"

enum class Stage : std::uint8_t { Dump, PreDump, Restore };
std::string_view to_string(Stage s);

enum class TraceKind : std::uint8_t {
  Hook,
  Thaw,
  Freeze,
  Seize,
  Resume,
  MemoryDump,
  ImageCommit,
  TaskCreate,
  VmaRestore,
  Rollback,
  External,  // recorded by callers such as the container layer
};
std::string_view to_string(TraceKind k);

struct TraceEvent {
  TraceKind kind = TraceKind::Hook;
  std::optional<HookId> hook;
  std::string plugin;
  std::vector<Pid> pids;
  std::string detail;
  SimDuration at{0};
};

class HookTrace {
 public:
  void append(TraceEvent e) { events_.push_back(std::move(e)); }
  const std::vector<TraceEvent>& events() const noexcept { return events_; }
  void clear() { events_.clear(); }

  // Positions of matching events, in order.
  std::vector<std::size_t> find(HookId id) const;
  std::vector<std::size_t> find(TraceKind kind) const;
  std::string to_text() const;

 private:
  std::vector<TraceEvent> events_;
};

struct PluginContext {
  Stage stage = Stage::Dump;
  Machine& machine;
  Snapshot& snapshot;
  HookTrace& trace;
  std::uint32_t capabilities = 0;  // credentials the engine acts with
  SimDuration lock_timeout{0};
};

// A device plugin. Hooks receive every pid of the tree; plugins pick the ones
// they own. Optional hooks return nullopt/false when the resource is not theirs.
class Plugin {
 public:
  virtual ~Plugin() = default;

  virtual std::string id() const = 0;
  // Device node prefixes that make the engine load this plugin. A plugin with
  // none is always loaded.
  virtual std::vector<std::string> device_prefixes() const { return {}; }
  virtual int priority() const { return 100; }
  virtual std::set<HookId> hooks() const = 0;

  virtual void init(PluginContext&) {}
  virtual void exit(PluginContext&, bool /*success*/) {}

  virtual void pause_devices(PluginContext&, std::span<const Pid>) {}
  virtual void checkpoint_devices(PluginContext&, std::span<const Pid>) {}
  virtual std::optional<Bytes> dump_ext_file(PluginContext&, Pid, const DeviceFd&) { return std::nullopt; }
  virtual bool handle_device_vma(PluginContext&, Pid, const Vma&) { return false; }

  virtual std::optional<DeviceFd> restore_ext_file(PluginContext&, Pid, const FdImage&) { return std::nullopt; }
  virtual std::optional<DeviceFileBacking> update_vma_map(PluginContext&, Pid, const DeviceFileBacking&) {
    return std::nullopt;
  }
  virtual void resume_devices_late(PluginContext&, std::span<const Pid>) {}
};

class HookRegistry {
 public:
  void add(std::unique_ptr<Plugin> plugin);
  bool contains(const std::string& id) const;
  Plugin& get(const std::string& id) const;
  // Plugins in priority order, then registration order.
  std::vector<Plugin*> plugins() const;
  std::vector<Plugin*> plugins_for(HookId id) const;

 private:
  std::vector<std::unique_ptr<Plugin>> plugins_;
};

}  // namespace unicr
