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

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "unicr/hooks.hpp"
#include "unicr/image_store.hpp"
#include "unicr/machine.hpp"

namespace unicr {

enum class FinalState : std::uint8_t { Running, Frozen };

struct DumpOptions {
  std::filesystem::path images_dir;
  SimDuration lock_timeout = std::chrono::seconds(10);
  FinalState final_state = FinalState::Running;
  Stage stage = Stage::Dump;
  // Runs while every task is stopped, after memory has been captured.
  std::function<void(Snapshot&)> on_frozen;
  WriteOptions write;
};

struct DumpResult {
  std::filesystem::path path;
  CrStats stats;
  std::vector<std::string> plugins;
  bool has_gpu_state = false;
};

struct RestoreResult {
  std::vector<Pid> pids;
  CrStats stats;  // as dumped, with restore_total filled in
  std::map<std::string, Bytes> extra_files;
};

// Simulated cost of the engine's own work.
struct EngineCosts {
  SimDuration page_scan{1};
  SimDuration per_mib_write{250};
  SimDuration per_mib_read{200};
  SimDuration task_create{100};
};

class Engine {
 public:
  explicit Engine(EngineCosts costs = {});

  void register_plugin(std::unique_ptr<Plugin> plugin);
  const HookRegistry& registry() const noexcept { return registry_; }

  // Credentials the engine runs with.
  void set_capabilities(std::uint32_t caps) noexcept { capabilities_ = caps; }
  std::uint32_t capabilities() const noexcept { return capabilities_; }

  DumpResult dump(Machine& machine, const DumpOptions& options);
  RestoreResult restore(const std::filesystem::path& images_dir, Machine& target);

  // Events of the most recent dump or restore.
  const HookTrace& trace() const noexcept { return trace_; }
  HookTrace& trace() noexcept { return trace_; }

 private:
  std::vector<Plugin*> plugins_for_devices(const SimProcessTree& tree) const;
  void hook_event(Machine& m, HookId id, const Plugin& p, std::vector<Pid> pids, std::string detail = {});
  void event(Machine& m, TraceKind kind, std::vector<Pid> pids, std::string detail = {});

  EngineCosts costs_;
  HookRegistry registry_;
  std::uint32_t capabilities_ = kCapCheckpointRestore;
  HookTrace trace_;
};

// The CUDA and KFD plugins.
std::unique_ptr<Plugin> make_cuda_plugin();
std::unique_ptr<Plugin> make_kfd_plugin();
void register_default_plugins(Engine& engine);

}  // namespace unicr
