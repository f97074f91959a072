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

#include <gtest/gtest.h>

#include "support.hpp"

using namespace unicr;
using unicr::test::error_of;

namespace {

ProcessTreeSpec one_proc() {
  ProcessTreeSpec s;
  s.seed = 7;
  ProcessSpec p;
  p.pid = 1;
  p.threads = 2;
  p.vmas.push_back(VmaSpec{0x1000, 4096, std::nullopt, 0, std::nullopt});
  s.processes.push_back(p);
  return s;
}

ProcessTreeSpec family() {
  ProcessTreeSpec s;
  s.seed = 3;
  for (Pid pid : {1, 2, 3}) {
    ProcessSpec p;
    p.pid = pid;
    p.ppid = pid == 1 ? 0 : 1;
    p.vmas.push_back(VmaSpec{0x10000, 8192, std::nullopt, 0, std::nullopt});
    s.processes.push_back(p);
  }
  return s;
}

}  // namespace

TEST(SpawnTree, MinimalSpec) {
  auto tree = spawn_tree(one_proc());
  ASSERT_EQ(tree.pids(), std::vector<Pid>{1});
  const auto& t = tree.task(1);
  EXPECT_EQ(t.run_state, RunState::Running);
  EXPECT_EQ(t.thread_ids.size(), 2u);
  ASSERT_EQ(t.vmas.size(), 1u);
  EXPECT_EQ(t.vmas[0].contents.size(), 4096u);
}

TEST(SpawnTree, ParentLinks) {
  auto tree = spawn_tree(family());
  EXPECT_EQ(tree.size(), 3u);
  EXPECT_EQ(tree.task(2).ppid, 1);
  EXPECT_EQ(tree.task(3).ppid, 1);
  EXPECT_EQ(tree.children(1), (std::vector<Pid>{2, 3}));
}

TEST(SpawnTree, OverlappingVmasRejected) {
  auto s = one_proc();
  s.processes[0].vmas = {VmaSpec{0x1000, 8192, std::nullopt, 0, std::nullopt},
                         VmaSpec{0x2000, 4096, std::nullopt, 0, std::nullopt}};
  EXPECT_EQ(error_of([&] { spawn_tree(s); }), ErrorKind::SpecError);
}

TEST(SpawnTree, DeterministicFromSeed) {
  EXPECT_EQ(spawn_tree(family()).state_hash(), spawn_tree(family()).state_hash());
  auto other = family();
  other.seed = 4;
  EXPECT_NE(spawn_tree(family()).state_hash(), spawn_tree(other).state_hash());
}

TEST(SpawnTree, EmptySpecRejected) {
  EXPECT_EQ(error_of([] { spawn_tree(ProcessTreeSpec{}); }), ErrorKind::SpecError);
}

TEST(SpawnTree, JsonRoundTrip) {
  auto s = family();
  s.processes[1].capabilities = kCapSysAdmin;
  s.processes[2].vmas[0].fill = 0xAB;
  auto back = parse_process_tree_spec(to_json(s));
  EXPECT_EQ(spawn_tree(back).state_hash(), spawn_tree(s).state_hash());
}

TEST(Seize, RunningTask) {
  auto tree = spawn_tree(one_proc());
  std::vector<Pid> pids{1};
  seize_interrupt(tree, pids);
  EXPECT_EQ(tree.task(1).run_state, RunState::Seized);
}

TEST(Seize, FrozenTaskIsInvalid) {
  auto tree = spawn_tree(one_proc());
  freeze(tree, tree.freezer());
  std::vector<Pid> pids{1};
  EXPECT_EQ(error_of([&] { seize_interrupt(tree, pids); }), ErrorKind::InvalidState);
  EXPECT_EQ(tree.task(1).run_state, RunState::Frozen);
}

TEST(Seize, EmptySetIsNoop) {
  auto tree = spawn_tree(one_proc());
  const auto h = tree.state_hash();
  seize_interrupt(tree, {});
  EXPECT_EQ(tree.state_hash(), h);
}

TEST(Seize, MissingPid) {
  auto tree = spawn_tree(one_proc());
  std::vector<Pid> pids{1, 9};
  EXPECT_EQ(error_of([&] { seize_interrupt(tree, pids); }), ErrorKind::NoSuchTask);
  EXPECT_EQ(tree.task(1).run_state, RunState::Running);
}

TEST(Seize, ResumeIsIdentityOnMemory) {
  auto tree = spawn_tree(family());
  for (int i = 0; i < 3; ++i) run_workload_step(tree, 2);
  const auto h = tree.state_hash();
  auto pids = tree.pids();
  seize_interrupt(tree, pids);
  resume(tree, pids);
  EXPECT_EQ(tree.state_hash(), h);
}

TEST(Freezer, FreezeAndThaw) {
  auto tree = spawn_tree(family());
  freeze(tree, tree.freezer());
  EXPECT_EQ(tree.freezer().state, FreezerCgroup::State::Frozen);
  for (const auto& [_, t] : tree.tasks()) EXPECT_EQ(t.run_state, RunState::Frozen);
  thaw(tree, tree.freezer());
  for (const auto& [_, t] : tree.tasks()) EXPECT_EQ(t.run_state, RunState::Running);
}

TEST(Freezer, EmptyCgroup) {
  SimProcessTree tree;
  freeze(tree, tree.freezer());
  EXPECT_EQ(tree.freezer().state, FreezerCgroup::State::Frozen);
  EXPECT_TRUE(tree.tasks().empty());
}

TEST(Workload, DeterministicRecords) {
  auto a = spawn_tree(one_proc());
  auto b = spawn_tree(one_proc());
  EXPECT_EQ(run_workload_step(a, 1), run_workload_step(b, 1));
  EXPECT_EQ(run_workload_step(a, 1), run_workload_step(b, 1));
}

TEST(Workload, SeizedTaskRefuses) {
  auto tree = spawn_tree(one_proc());
  std::vector<Pid> pids{1};
  seize_interrupt(tree, pids);
  const auto h = tree.state_hash();
  EXPECT_EQ(error_of([&] { run_workload_step(tree, 1); }), ErrorKind::InvalidState);
  EXPECT_EQ(tree.state_hash(), h);
}

TEST(Workload, FrozenTaskRefuses) {
  auto tree = spawn_tree(family());
  freeze(tree, tree.freezer());
  const auto h = tree.state_hash();
  for (auto pid : tree.pids()) EXPECT_EQ(error_of([&] { run_workload_step(tree, pid); }), ErrorKind::InvalidState);
  EXPECT_EQ(tree.state_hash(), h);
}

TEST(Workload, ReplayOfRecordsMatchesMemory) {
  auto tree = spawn_tree(family());
  unicr::test::MemoryReplay oracle(tree.task(2));
  for (int i = 0; i < 10; ++i) oracle.apply(run_workload_step(tree, 2));
  EXPECT_TRUE(oracle.matches(tree.task(2)));
}

TEST(Workload, ReplayProperty) {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    auto rc = unicr::test::random_case(seed);
    for (auto& p : rc.tree.processes.processes) p.workload.device_writes_per_step = 0;
    auto tree = spawn_tree(rc.tree.processes);
    std::map<Pid, unicr::test::MemoryReplay> oracles;
    for (auto pid : tree.pids()) oracles.emplace(pid, unicr::test::MemoryReplay(tree.task(pid)));
    for (int i = 0; i < 5; ++i) {
      for (auto pid : tree.pids()) oracles.at(pid).apply(run_workload_step(tree, pid));
    }
    for (auto pid : tree.pids()) EXPECT_TRUE(oracles.at(pid).matches(tree.task(pid))) << "seed " << seed;
  }
}

TEST(Workload, UnknownDeviceFdRejected) {
  auto s = one_proc();
  s.processes[0].devices.push_back("/dev/nvidia0");
  EXPECT_EQ(error_of([&] { spawn_tree(s); }), ErrorKind::UnknownDevice);
  s.devices.push_back("/dev/nvidia0");
  EXPECT_EQ(spawn_tree(s).task(1).open_devices.size(), 1u);
}
