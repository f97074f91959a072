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

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "unicr/container.hpp"
#include "unicr/engine.hpp"

namespace unicr {

inline constexpr int kScenarioVersion = 1;

struct ContainerSpec {
  std::string id = "c0";
  std::vector<FileMap> layers;
  GpuConfig gpu;
};

enum class StepKind : std::uint8_t { Run, Dump, Kill, Restore, Verify, Freeze, Thaw };
std::string_view to_string(StepKind k);

struct VerifyChecks {
  bool twin = false;          // canonical state equals the uninterrupted twin
  bool no_stale = false;      // no dangling device references
  bool unchanged = false;     // state hash equals the one before the last failed step
  std::optional<bool> has_gpu_state;
  std::optional<std::string> dir_absent;
  std::optional<std::string> run_state;  // "running" or "frozen"
  bool counter_consistent = false;  // container counter matches the dumped tasks
};

struct ScenarioStep {
  StepKind kind = StepKind::Run;
  std::uint32_t count = 1;             // Run
  std::string dir = "checkpoint";      // Dump, Restore
  FinalState final_state = FinalState::Running;
  std::optional<SimDuration> timeout;  // Dump
  std::string machine;                 // Restore; empty: the current machine
  VerifyChecks verify;
  std::optional<ErrorKind> expect_error;
};

struct Scenario {
  int version = kScenarioVersion;
  std::string name;
  std::map<std::string, MachineSpec> machines;
  std::string machine;  // where the tree starts
  TreeSpec tree;
  nlohmann::json tree_doc;
  std::optional<ContainerSpec> container;
  std::vector<ScenarioStep> steps;
};

Scenario parse_scenario(const nlohmann::json& doc);
Scenario load_scenario(const std::filesystem::path& path);
std::optional<ErrorKind> parse_error_kind(std::string_view name);

// Executes a scenario against fresh machines. A twin of the starting machine
// runs the same workload steps without ever being checkpointed.
class ScenarioRunner {
 public:
  ScenarioRunner(Scenario scenario, std::filesystem::path images_root);

  void setup();
  void run_step(const ScenarioStep& step);
  // Runs every step, writing one line per step to `out`.
  void run_all(std::ostream& out);

  Scenario& scenario() noexcept { return scenario_; }
  Engine& engine() noexcept { return engine_; }
  Machine& current();
  Machine& twin() { return *twin_; }
  Machine& machine(const std::string& name);
  SimContainer* container() noexcept { return container_ ? container_.get() : nullptr; }
  LayerStore& layers() noexcept { return layers_; }
  std::filesystem::path dir(const std::string& name) const { return images_root_ / name; }

  std::optional<DumpResult> dump(const ScenarioStep& step);
  RestoreResult restore(const ScenarioStep& step);
  const std::optional<DumpResult>& last_dump() const noexcept { return last_dump_; }
  const std::optional<RestoreResult>& last_restore() const noexcept { return last_restore_; }

 private:
  void verify(const VerifyChecks& checks);

  Scenario scenario_;
  std::filesystem::path images_root_;
  Engine engine_;
  LayerStore layers_;
  std::map<std::string, std::unique_ptr<Machine>> machines_;
  std::unique_ptr<Machine> twin_;
  std::string current_;
  std::unique_ptr<SimContainer> container_;
  std::optional<DumpResult> last_dump_;
  std::optional<RestoreResult> last_restore_;
  std::optional<std::uint64_t> hash_before_failure_;
  std::uint64_t dumped_steps_ = 0;
};

}  // namespace unicr
