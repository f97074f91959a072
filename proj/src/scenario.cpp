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

#include "unicr/scenario.hpp"

#include <fstream>
#include <numeric>
#include <ostream>

namespace unicr {

namespace fs = std::filesystem;

std::string_view to_string(StepKind k) {
  switch (k) {
    case StepKind::Run: return "run";
    case StepKind::Dump: return "dump";
    case StepKind::Kill: return "kill";
    case StepKind::Restore: return "restore";
    case StepKind::Verify: return "verify";
    case StepKind::Freeze: return "freeze";
    case StepKind::Thaw: return "thaw";
  }
  return "?";
}

std::optional<ErrorKind> parse_error_kind(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(ErrorKind::UsageError); ++i) {
    auto k = static_cast<ErrorKind>(i);
    if (to_string(k) == name) return k;
  }
  return std::nullopt;
}

namespace {

std::optional<SimDuration> parse_timeout(const nlohmann::json& j) {
  if (j.contains("timeout_us")) return SimDuration(j["timeout_us"].get<std::int64_t>());
  if (j.contains("timeout_s")) return std::chrono::duration_cast<SimDuration>(std::chrono::duration<double>(j["timeout_s"].get<double>()));
  return std::nullopt;
}

FinalState parse_leave(const std::string& s) {
  if (s == "running") return FinalState::Running;
  if (s == "frozen") return FinalState::Frozen;
  throw Error(ErrorKind::SpecError, "leave must be running or frozen, not " + s);
}

ScenarioStep parse_step(const nlohmann::json& sj, const Scenario& sc) {
  ScenarioStep st;
  std::size_t kinds = 0;
  for (auto k : {StepKind::Run, StepKind::Dump, StepKind::Kill, StepKind::Restore, StepKind::Verify, StepKind::Freeze,
                 StepKind::Thaw}) {
    if (sj.contains(std::string(to_string(k)))) {
      st.kind = k;
      ++kinds;
    }
  }
  if (kinds != 1) throw Error(ErrorKind::SpecError, "each step needs exactly one action: " + sj.dump());
  const auto& body = sj.at(std::string(to_string(st.kind)));
  switch (st.kind) {
    case StepKind::Run:
      st.count = body.is_number() ? body.get<std::uint32_t>() : body.value("count", 1u);
      break;
    case StepKind::Dump:
      st.dir = body.value("dir", st.dir);
      st.final_state = parse_leave(body.value("leave", std::string("running")));
      st.timeout = parse_timeout(body);
      break;
    case StepKind::Restore:
      st.dir = body.value("dir", st.dir);
      st.machine = body.value("machine", std::string());
      if (!st.machine.empty() && !sc.machines.contains(st.machine)) {
        throw Error(ErrorKind::SpecError, "restore names undefined machine " + st.machine);
      }
      break;
    case StepKind::Verify: {
      auto& v = st.verify;
      v.twin = body.value("twin", false);
      v.no_stale = body.value("no_stale", false);
      v.unchanged = body.value("unchanged", false);
      if (body.contains("has_gpu_state")) v.has_gpu_state = body["has_gpu_state"].get<bool>();
      if (body.contains("dir_absent")) v.dir_absent = body["dir_absent"].get<std::string>();
      if (body.contains("run_state")) v.run_state = body["run_state"].get<std::string>();
      v.counter_consistent = body.value("counter_consistent", false);
      break;
    }
    default: break;
  }
  if (sj.contains("expect_error")) {
    auto name = sj["expect_error"].get<std::string>();
    st.expect_error = parse_error_kind(name);
    if (!st.expect_error) throw Error(ErrorKind::SpecError, "unknown error class " + name);
  }
  return st;
}

}  // namespace

Scenario parse_scenario(const nlohmann::json& doc) {
  try {
    Scenario sc;
    sc.version = doc.value("version", kScenarioVersion);
    if (sc.version != kScenarioVersion) {
      throw Error(ErrorKind::VersionUnsupported, "scenario version " + std::to_string(sc.version) + " is not supported");
    }
    sc.name = doc.value("name", std::string("scenario"));
    for (const auto& [name, mj] : doc.at("machines").items()) {
      auto m = parse_machine_spec(mj);
      m.name = name;
      sc.machines[name] = std::move(m);
    }
    if (sc.machines.empty()) throw Error(ErrorKind::SpecError, "scenario defines no machines");
    sc.machine = doc.value("machine", sc.machines.begin()->first);
    if (!sc.machines.contains(sc.machine)) throw Error(ErrorKind::SpecError, "undefined machine " + sc.machine);
    sc.tree_doc = doc.at("tree");
    sc.tree = parse_tree_spec(sc.tree_doc);
    if (doc.contains("container")) {
      const auto& cj = doc["container"];
      ContainerSpec c;
      c.id = cj.value("id", c.id);
      for (const auto& lj : cj.value("layers", nlohmann::json::array())) {
        FileMap files;
        for (const auto& [path, content] : lj.at("files").items()) {
          auto s = content.get<std::string>();
          files[path] = Bytes(s.begin(), s.end());
        }
        c.layers.push_back(std::move(files));
      }
      if (cj.contains("gpu")) {
        c.gpu.device_ids = cj["gpu"].value("devices", std::vector<std::string>{});
        c.gpu.capabilities = cj["gpu"].value("capabilities", std::vector<std::string>{});
      }
      sc.container = std::move(c);
    }
    for (const auto& sj : doc.value("steps", nlohmann::json::array())) sc.steps.push_back(parse_step(sj, sc));
    return sc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SpecError, std::string("malformed scenario: ") + e.what());
  }
}

Scenario load_scenario(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open scenario " + path.string(), path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SpecError, path.string() + ": " + e.what(), path.string());
  }
  return parse_scenario(doc);
}

ScenarioRunner::ScenarioRunner(Scenario scenario, fs::path images_root)
    : scenario_(std::move(scenario)), images_root_(std::move(images_root)) {
  register_default_plugins(engine_);
}

Machine& ScenarioRunner::machine(const std::string& name) {
  auto it = machines_.find(name);
  if (it != machines_.end()) return *it->second;
  auto spec = scenario_.machines.find(name);
  if (spec == scenario_.machines.end()) throw Error(ErrorKind::SpecError, "undefined machine " + name);
  return *machines_.emplace(name, std::make_unique<Machine>(spec->second)).first->second;
}

Machine& ScenarioRunner::current() { return machine(current_); }

void ScenarioRunner::setup() {
  current_ = scenario_.machine;
  auto& m = current();
  twin_ = std::make_unique<Machine>(scenario_.machines.at(current_));
  twin_->spawn(scenario_.tree);
  if (scenario_.container) {
    std::vector<std::string> digests;
    for (const auto& files : scenario_.container->layers) digests.push_back(layers_.add(make_layer(files)));
    container_ = std::make_unique<SimContainer>(
        create_container(m, layers_, scenario_.container->id, digests, scenario_.container->gpu));
    container_->start(scenario_.tree);
  } else {
    m.spawn(scenario_.tree);
  }
}

std::optional<DumpResult> ScenarioRunner::dump(const ScenarioStep& step) {
  auto& m = current();
  const auto before = m.state_hash();
  try {
    if (container_) {
      ContainerCheckpointOptions o;
      o.images_dir = dir(step.dir);
      if (step.timeout) o.lock_timeout = *step.timeout;
      last_dump_ = container_checkpoint(engine_, *container_, o);
    } else {
      DumpOptions o;
      o.images_dir = dir(step.dir);
      o.final_state = step.final_state;
      if (step.timeout) o.lock_timeout = *step.timeout;
      last_dump_ = engine_.dump(m, o);
    }
  } catch (...) {
    hash_before_failure_ = before;
    throw;
  }
  dumped_steps_ = 0;
  for (const auto& [_, t] : m.tree().tasks()) dumped_steps_ += t.steps;
  return last_dump_;
}

RestoreResult ScenarioRunner::restore(const ScenarioStep& step) {
  auto name = step.machine.empty() ? current_ : step.machine;
  auto& target = machine(name);
  const auto before = target.state_hash();
  try {
    if (container_) {
      RestoreResult r;
      auto c = container_restore(engine_, dir(step.dir), target, layers_, &r);
      container_ = std::make_unique<SimContainer>(std::move(c));
      last_restore_ = std::move(r);
    } else {
      last_restore_ = engine_.restore(dir(step.dir), target);
    }
  } catch (...) {
    hash_before_failure_ = before;
    throw;
  }
  current_ = name;
  return *last_restore_;
}

void ScenarioRunner::run_step(const ScenarioStep& step) {
  auto& m = current();
  switch (step.kind) {
    case StepKind::Run:
      for (std::uint32_t i = 0; i < step.count; ++i) {
        for (auto pid : m.tree().pids()) {
          if (m.tree().task(pid).run_state != RunState::Running) continue;
          if (container_) {
            container_->step(pid);
          } else {
            m.step(pid);
          }
          if (twin_->tree().contains(pid)) twin_->step(pid);
        }
      }
      break;
    case StepKind::Dump: dump(step); break;
    case StepKind::Kill: m.kill_all(); break;
    case StepKind::Restore: restore(step); break;
    case StepKind::Verify: verify(step.verify); break;
    case StepKind::Freeze: freeze(m.tree(), m.tree().freezer()); break;
    case StepKind::Thaw: thaw(m.tree(), m.tree().freezer()); break;
  }
}

void ScenarioRunner::verify(const VerifyChecks& v) {
  auto& m = current();
  auto fail = [](const std::string& what) { throw Error(ErrorKind::InvalidState, "verification failed: " + what); };
  if (v.twin && canonical_digest(m) != canonical_digest(*twin_)) fail("state differs from the uninterrupted run");
  if (v.no_stale) {
    auto stale = stale_device_references(m);
    if (!stale.empty()) fail(stale.front());
  }
  if (v.unchanged && (!hash_before_failure_ || *hash_before_failure_ != m.state_hash())) {
    fail("state changed across the failed step");
  }
  if (v.has_gpu_state && (!last_dump_ || last_dump_->has_gpu_state != *v.has_gpu_state)) fail("GPU state flag");
  if (v.dir_absent && fs::exists(dir(*v.dir_absent))) fail("image directory " + *v.dir_absent + " exists");
  if (v.run_state) {
    auto want = *v.run_state == "frozen" ? RunState::Frozen : RunState::Running;
    for (const auto& [pid, t] : m.tree().tasks()) {
      if (t.run_state != want) fail("task " + std::to_string(pid) + " is " + std::string(to_string(t.run_state)));
    }
  }
  if (v.counter_consistent) {
    if (!container_) fail("no container");
    auto f = container_->read_file(kCounterFile);
    std::uint64_t steps = 0;
    for (const auto& [_, t] : m.tree().tasks()) steps += t.steps;
    auto text = f ? std::string(f->begin(), f->end()) : std::string("0");
    if (text != std::to_string(steps)) fail("counter file holds " + text + " but tasks ran " + std::to_string(steps) + " steps");
  }
}

void ScenarioRunner::run_all(std::ostream& out) {
  setup();
  for (std::size_t i = 0; i < scenario_.steps.size(); ++i) {
    const auto& st = scenario_.steps[i];
    try {
      run_step(st);
    } catch (const Error& e) {
      if (st.expect_error && e.kind() == *st.expect_error) {
        out << i << "\t" << to_string(st.kind) << "\texpected-error\t" << to_string(e.kind()) << "\n";
        continue;
      }
      throw;
    }
    if (st.expect_error) {
      throw Error(ErrorKind::InvalidState, "step " + std::to_string(i) + " succeeded but " +
                                               std::string(to_string(*st.expect_error)) + " was expected");
    }
    out << i << "\t" << to_string(st.kind) << "\tok\t";
    if (st.kind == StepKind::Dump && last_dump_) out << "gpu=" << (last_dump_->has_gpu_state ? 1 : 0);
    if (st.kind == StepKind::Restore && last_restore_) out << "restore_total_us=" << last_restore_->stats.restore_total.count();
    out << "\n";
  }
}

}  // namespace unicr
