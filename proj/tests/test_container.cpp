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
#include "unicr/container.hpp"

using namespace unicr;
using unicr::test::error_of;
using unicr::test::TempDir;
namespace fs = std::filesystem;

namespace {

Bytes text(const std::string& s) { return Bytes(s.begin(), s.end()); }

std::uint64_t counter_of(const SimContainer& c) {
  auto b = c.read_file(kCounterFile);
  if (!b) return 0;
  return std::stoull(std::string(b->begin(), b->end()));
}

std::uint64_t total_steps(const SimContainer& c) {
  std::uint64_t n = 0;
  for (const auto& [_, t] : c.machine().tree().tasks()) n += t.steps;
  return n;
}

MachineSpec gpu_host(std::size_t cuda = 2, std::size_t kfd = 1) {
  MachineSpec m;
  m.name = "host";
  m.cuda_devices.assign(cuda, CudaDeviceInfo{"A100", 40ULL << 30});
  m.kfd_devices.assign(kfd, KfdDeviceProps{"gfx90a", 104, 64ULL << 30, true});
  return m;
}

TreeSpec workload(bool gpu) {
  TreeSpec t;
  t.processes.seed = 3;
  ProcessSpec p;
  p.pid = 1;
  p.threads = 4;
  p.vmas.push_back(VmaSpec{0x10000, 16384, std::nullopt, 0, std::nullopt});
  t.processes.processes.push_back(p);
  if (gpu) {
    CudaTaskSpec c;
    c.allocs = {{0, 32768}};
    c.streams = 2;
    c.callbacks = {SimDuration(500)};
    c.nvml_handles = 1;
    t.cuda[1] = c;
  }
  return t;
}

struct Rig {
  TempDir tmp;
  LayerStore store;
  Engine engine;
  std::string base;
  std::string app;
  Rig() {
    register_default_plugins(engine);
    base = store.add(make_layer({{"/etc/os-release", text("sim 1")}, {"/bin/sh", text("ELF")}}));
    app = store.add(make_layer({{"/app/train.py", text("print(1)")}, {"/etc/os-release", text("sim 2")}}));
  }
};

}  // namespace

TEST(Layers, DigestIsContentAddressed) {
  auto a = make_layer({{"/x", text("1")}});
  auto b = make_layer({{"/x", text("1")}});
  auto c = make_layer({{"/x", text("2")}});
  EXPECT_EQ(a.digest, b.digest);
  EXPECT_NE(a.digest, c.digest);
  LayerStore s;
  EXPECT_EQ(error_of([&] { s.get(a.digest); }), ErrorKind::MissingLayer);
}

TEST(Layers, MergedViewTopDown) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "c", {r.base, r.app}, {});
  EXPECT_EQ(c.read_file("/etc/os-release"), text("sim 2"));
  EXPECT_EQ(c.read_file("/bin/sh"), text("ELF"));
  EXPECT_FALSE(c.read_file("/nope"));
  c.write_file("/etc/os-release", text("mine"));
  EXPECT_EQ(c.read_file("/etc/os-release"), text("mine"));
  EXPECT_EQ(r.store.get(r.app).files.at("/etc/os-release"), text("sim 2"));
}

TEST(Create, OneGpuInjectsDeviceAndLibraries) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "train", {r.base}, GpuConfig{{"nvidia1"}, {"compute", "utility"}});
  std::vector<std::string> devs;
  std::vector<std::string> libs;
  for (const auto& mt : c.external_mounts()) (mt.kind == MountKind::GpuDevice ? devs : libs).push_back(mt.target);
  EXPECT_NE(std::find(devs.begin(), devs.end(), m.cuda().device_path(1)), devs.end());
  EXPECT_EQ(std::find(devs.begin(), devs.end(), m.cuda().device_path(0)), devs.end());
  EXPECT_NE(std::find(devs.begin(), devs.end(), std::string(kNvidiaCtl)), devs.end());
  EXPECT_FALSE(libs.empty());
  EXPECT_EQ(c.config().gpu.capabilities, (std::vector<std::string>{"compute", "utility"}));
}

TEST(Create, ZeroGpusHasNoDeviceMounts) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "cpu", {r.base}, {});
  EXPECT_TRUE(c.external_mounts().empty());
  c.start(workload(false));
  EXPECT_EQ(m.tree().size(), 1u);
}

TEST(Create, AmdDeviceInjectsKfdNode) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "rocm", {r.base}, GpuConfig{{"amd0"}, {}});
  bool kfd = false;
  bool render = false;
  for (const auto& mt : c.external_mounts()) {
    kfd |= mt.target == kKfdPath;
    render |= mt.target == m.kfd().topology().devices[0].render_node;
  }
  EXPECT_TRUE(kfd);
  EXPECT_TRUE(render);
}

TEST(Create, AbsentDeviceRejected) {
  Rig r;
  Machine m(gpu_host(1, 0));
  EXPECT_EQ(error_of([&] { create_container(m, r.store, "x", {r.base}, GpuConfig{{"nvidia3"}, {}}); }),
            ErrorKind::UnknownDevice);
  EXPECT_EQ(error_of([&] { create_container(m, r.store, "x", {r.base}, GpuConfig{{"amd0"}, {}}); }),
            ErrorKind::UnknownDevice);
  EXPECT_EQ(error_of([&] { create_container(m, r.store, "x", {r.base}, GpuConfig{{"tpu0"}, {}}); }),
            ErrorKind::UnknownDevice);
  EXPECT_EQ(error_of([&] { create_container(m, r.store, "x", {"sha-missing"}, {}); }), ErrorKind::MissingLayer);
}

TEST(Create, UnexposedDeviceFdRejectedAtStart) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "x", {r.base}, {});
  EXPECT_EQ(error_of([&] { c.start(workload(true)); }), ErrorKind::UnknownDevice);
  EXPECT_TRUE(m.tree().tasks().empty());
}

TEST(Config, JsonRoundTrip) {
  ContainerConfig c{"id", {"a", "b"}, GpuConfig{{"nvidia0", "amd1"}, {"compute"}},
                    {ExternalMount{"/dev/nvidia0", "/dev/nvidia0", MountKind::GpuDevice},
                     ExternalMount{"/lib/x.so", "/lib/x.so", MountKind::Library}}};
  EXPECT_EQ(parse_container_config(to_json(c)), c);
  auto bad = to_json(c);
  bad["mounts"][0]["kind"] = "bind";
  EXPECT_EQ(error_of([&] { parse_container_config(bad); }), ErrorKind::SpecError);
  bad = to_json(c);
  bad["version"] = 7;
  EXPECT_EQ(error_of([&] { parse_container_config(bad); }), ErrorKind::VersionUnsupported);
}

TEST(Config, FileMapRoundTrip) {
  FileMap f{{"/a", text("x")}, {"/b/c", Bytes{}}, {"/d", Bytes(300, 7)}};
  EXPECT_EQ(decode_file_map(encode_file_map(f)), f);
}

TEST(Checkpoint, RunningGpuContainerEndsFrozen) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "train", {r.base, r.app}, GpuConfig{{"nvidia0"}, {"compute"}});
  c.start(workload(true));
  for (int i = 0; i < 5; ++i) c.step(1);
  auto res = container_checkpoint(r.engine, c, {r.tmp / "ckpt"});
  EXPECT_TRUE(res.has_gpu_state);
  EXPECT_TRUE(c.frozen());
  EXPECT_EQ(unicr::test::check_dump_order(r.engine.trace()), "") << r.engine.trace().to_text();
  auto snap = read_image_set(r.tmp / "ckpt");
  EXPECT_TRUE(snap.extra_files.contains(kRootfsDiffFile));
  EXPECT_TRUE(snap.extra_files.contains(kContainerConfigFile));
}

TEST(Checkpoint, FrozenGpuContainerThawsBeforeSeize) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "train", {r.base}, GpuConfig{{"nvidia0"}, {}});
  c.start(workload(true));
  for (int i = 0; i < 3; ++i) c.step(1);
  c.freeze();
  container_checkpoint(r.engine, c, {r.tmp / "ckpt"});
  EXPECT_TRUE(c.frozen());
  const auto& tr = r.engine.trace();
  auto thaw_at = tr.find(TraceKind::Thaw);
  auto seize_at = tr.find(TraceKind::Seize);
  ASSERT_FALSE(thaw_at.empty());
  ASSERT_FALSE(seize_at.empty());
  EXPECT_LT(thaw_at.front(), seize_at.front());
  auto captured = std::find_if(tr.events().begin(), tr.events().end(),
                               [](const TraceEvent& e) { return e.kind == TraceKind::External; });
  ASSERT_NE(captured, tr.events().end());
  EXPECT_GT(static_cast<std::size_t>(captured - tr.events().begin()), seize_at.front());
}

TEST(Checkpoint, LockTimeoutLeavesContainerFrozenAndUntouched) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "train", {r.base}, GpuConfig{{"nvidia0"}, {}});
  auto t = workload(true);
  t.cuda[1].callbacks = {std::nullopt};
  c.start(t);
  c.step(1);
  c.freeze();
  const auto h = m.state_hash();
  EXPECT_EQ(error_of([&] { container_checkpoint(r.engine, c, {r.tmp / "ckpt"}); }), ErrorKind::LockTimeout);
  EXPECT_TRUE(c.frozen());
  EXPECT_EQ(m.state_hash(), h);
  EXPECT_FALSE(fs::exists(r.tmp / "ckpt"));
}

TEST(Restore, CounterConsistentAndGpuUsable) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "train", {r.base, r.app}, GpuConfig{{"nvidia0"}, {"compute", "utility"}});
  c.start(workload(true));
  for (int i = 0; i < 6; ++i) c.step(1);
  c.write_file("/tmp/notes", text("kept"));
  c.freeze();
  container_checkpoint(r.engine, c, {r.tmp / "ckpt"});
  EXPECT_EQ(counter_of(c), total_steps(c));
  const auto ro = r.store.get(r.app).files;
  m.kill_all();

  Machine target(gpu_host());
  RestoreResult rr;
  auto back = container_restore(r.engine, r.tmp / "ckpt", target, r.store, &rr);
  EXPECT_EQ(rr.pids, std::vector<Pid>{1});
  EXPECT_FALSE(back.frozen());
  EXPECT_EQ(counter_of(back), 6u);
  EXPECT_EQ(counter_of(back), total_steps(back));
  EXPECT_EQ(back.read_file("/tmp/notes"), text("kept"));
  EXPECT_EQ(back.config().gpu.capabilities, (std::vector<std::string>{"compute", "utility"}));
  EXPECT_TRUE(stale_device_references(target).empty());
  EXPECT_EQ(unicr::test::check_restore_order(r.engine.trace()), "");
  for (int i = 0; i < 2; ++i) back.step(1);
  EXPECT_EQ(counter_of(back), 8u);
  EXPECT_EQ(counter_of(back), total_steps(back));
  EXPECT_EQ(r.store.get(r.app).files, ro);
  EXPECT_EQ(target.cuda().task(1).phase, CudaPhase::Running);
}

TEST(Restore, LibraryMountsFollowDeviceKinds) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "t", {r.base}, GpuConfig{{"nvidia0"}, {}});
  c.start(workload(true));
  container_checkpoint(r.engine, c, {r.tmp / "ckpt"});
  m.kill_all();
  Machine target(gpu_host());
  auto back = container_restore(r.engine, r.tmp / "ckpt", target, r.store);
  auto libs = [](const SimContainer& x) {
    std::vector<std::string> out;
    for (const auto& mt : x.external_mounts()) {
      if (mt.kind == MountKind::Library) out.push_back(mt.target);
    }
    return out;
  };
  EXPECT_EQ(libs(back), libs(c));
  for (const auto& [_, t] : target.tree().tasks()) {
    for (const auto& fd : t.open_devices) {
      bool exposed = false;
      for (const auto& mt : back.external_mounts()) exposed |= mt.target == fd.path;
      EXPECT_TRUE(exposed) << fd.path;
    }
  }
}

TEST(Restore, MissingGpuOnTarget) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "t", {r.base}, GpuConfig{{"nvidia1"}, {}});
  c.start(workload(false));
  container_checkpoint(r.engine, c, {r.tmp / "ckpt"});
  m.kill_all();
  Machine small(gpu_host(1, 0));
  EXPECT_EQ(error_of([&] { container_restore(r.engine, r.tmp / "ckpt", small, r.store); }),
            ErrorKind::TopologyMismatch);
  EXPECT_TRUE(small.tree().tasks().empty());
}

TEST(Restore, MissingLayer) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "t", {r.base, r.app}, {});
  c.start(workload(false));
  container_checkpoint(r.engine, c, {r.tmp / "ckpt"});
  m.kill_all();
  LayerStore partial;
  partial.add(r.store.get(r.base));
  Machine target(gpu_host());
  try {
    container_restore(r.engine, r.tmp / "ckpt", target, partial);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingLayer);
    EXPECT_EQ(e.subject(), r.app);
  }
  EXPECT_TRUE(target.tree().tasks().empty());
}

TEST(Restore, PlainImageIsNotAContainer) {
  Rig r;
  Machine m(gpu_host());
  m.spawn(workload(false));
  DumpOptions o;
  o.images_dir = r.tmp / "plain";
  r.engine.dump(m, o);
  Machine target(gpu_host());
  EXPECT_EQ(error_of([&] { container_restore(r.engine, r.tmp / "plain", target, r.store); }),
            ErrorKind::ImageCorrupt);
}

TEST(Restore, GarbledCounterIsCorrupt) {
  Rig r;
  Machine m(gpu_host());
  auto c = create_container(m, r.store, "t", {r.base}, {});
  c.start(workload(false));
  c.write_file(kCounterFile, text("12abc"));
  container_checkpoint(r.engine, c, {r.tmp / "ckpt"});
  m.kill_all();
  Machine target(gpu_host());
  EXPECT_EQ(error_of([&] { container_restore(r.engine, r.tmp / "ckpt", target, r.store); }), ErrorKind::ImageCorrupt);
  EXPECT_TRUE(target.tree().tasks().empty());
}
