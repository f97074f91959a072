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

#include "unicr/hooks.hpp"

#include <algorithm>
#include <sstream>

namespace unicr {

std::string_view to_string(HookId id) {
  switch (id) {
    case HookId::PauseDevices: return "PAUSE_DEVICES";
    case HookId::CheckpointDevices: return "CHECKPOINT_DEVICES";
    case HookId::DumpExtFile: return "DUMP_EXT_FILE";
    case HookId::RestoreExtFile: return "RESTORE_EXT_FILE";
    case HookId::HandleDeviceVma: return "HANDLE_DEVICE_VMA";
    case HookId::UpdateVmaMap: return "UPDATE_VMA_MAP";
    case HookId::ResumeDevicesLate: return "RESUME_DEVICES_LATE";
    case HookId::PluginInit: return "PLUGIN_INIT";
    case HookId::PluginExit: return "PLUGIN_EXIT";
  }
  return "?";
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Dump: return "dump";
    case Stage::PreDump: return "pre-dump";
    case Stage::Restore: return "restore";
  }
  return "?";
}

std::string_view to_string(TraceKind k) {
  switch (k) {
    case TraceKind::Hook: return "hook";
    case TraceKind::Thaw: return "thaw";
    case TraceKind::Freeze: return "freeze";
    case TraceKind::Seize: return "seize";
    case TraceKind::Resume: return "resume";
    case TraceKind::MemoryDump: return "memory-dump";
    case TraceKind::ImageCommit: return "image-commit";
    case TraceKind::TaskCreate: return "task-create";
    case TraceKind::VmaRestore: return "vma-restore";
    case TraceKind::Rollback: return "rollback";
    case TraceKind::External: return "external";
  }
  return "?";
}

std::vector<std::size_t> HookTrace::find(HookId id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < events_.size(); ++i) {
    if (events_[i].kind == TraceKind::Hook && events_[i].hook == id) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> HookTrace::find(TraceKind kind) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < events_.size(); ++i) {
    if (events_[i].kind == kind) out.push_back(i);
  }
  return out;
}

std::string HookTrace::to_text() const {
  std::ostringstream os;
  for (const auto& e : events_) {
    os << e.at.count() << "\t" << (e.hook ? to_string(*e.hook) : to_string(e.kind)) << "\t" << e.plugin << "\t";
    for (std::size_t i = 0; i < e.pids.size(); ++i) os << (i ? "," : "") << e.pids[i];
    os << "\t" << e.detail << "\n";
  }
  return os.str();
}

void HookRegistry::add(std::unique_ptr<Plugin> plugin) {
  if (!plugin) throw Error(ErrorKind::PluginError, "null plugin");
  auto id = plugin->id();
  if (contains(id)) throw Error(ErrorKind::DuplicatePlugin, "plugin " + id + " is already registered", id);
  plugins_.push_back(std::move(plugin));
}

bool HookRegistry::contains(const std::string& id) const {
  return std::any_of(plugins_.begin(), plugins_.end(), [&](const auto& p) { return p->id() == id; });
}

Plugin& HookRegistry::get(const std::string& id) const {
  for (const auto& p : plugins_) {
    if (p->id() == id) return *p;
  }
  throw Error(ErrorKind::PluginError, "plugin " + id + " is not registered", id);
}

std::vector<Plugin*> HookRegistry::plugins() const {
  std::vector<Plugin*> out;
  for (const auto& p : plugins_) out.push_back(p.get());
  std::stable_sort(out.begin(), out.end(), [](Plugin* a, Plugin* b) { return a->priority() < b->priority(); });
  return out;
}

std::vector<Plugin*> HookRegistry::plugins_for(HookId id) const {
  auto all = plugins();
  std::erase_if(all, [&](Plugin* p) { return !p->hooks().contains(id); });
  return all;
}

}  // namespace unicr
