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

#include <algorithm>

#include "support.hpp"

using namespace unicr;
using unicr::test::error_of;

namespace {

const KfdDeviceProps kMi250{"gfx90a", 104, 64ULL << 30, true};
const KfdDeviceProps kMi100{"gfx908", 120, 32ULL << 30, false};

class FakeHost final : public HostMemory {
 public:
  void map(Pid pid, std::uint64_t addr, Bytes b) { mem_[{pid, addr}] = std::move(b); }
  bool is_mapped(Pid pid, std::uint64_t addr, std::uint64_t len) const override {
    auto it = mem_.find({pid, addr});
    return it != mem_.end() && it->second.size() >= len;
  }
  Bytes read(Pid pid, std::uint64_t addr, std::uint64_t len) const override {
    const auto& b = mem_.at({pid, addr});
    return Bytes(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(len));
  }

 private:
  std::map<std::pair<Pid, std::uint64_t>, Bytes> mem_;
};

struct Rig {
  SimClock clock;
  FakeHost host;
  KfdDriver driver;
  explicit Rig(std::vector<KfdDeviceProps> props = {kMi250, kMi100}, std::uint64_t salt = 1,
               std::vector<std::pair<int, int>> links = {{0, 1}}, std::uint64_t base = 0x100000000ULL)
      : driver(clock, make_topology(props, props.size() > 1 ? links : std::vector<std::pair<int, int>>{}, salt), base) {
    driver.set_host_memory(&host);
  }
  std::uint32_t gpu(std::size_t i) const { return driver.topology().devices.at(i).gpuid; }
};

constexpr Pid kPid = 7;
const KfdCaller kSelf{kPid, kCapCheckpointRestore};

// Two buffers, one queue, three events on the first GPU.
void small_process(Rig& r) {
  r.driver.open(kPid);
  auto g = r.gpu(0);
  auto vram = r.driver.alloc_bo(kPid, BoKind::Vram, g, 4096, 0x500000000000);
  auto gtt = r.driver.alloc_bo(kPid, BoKind::Gtt, g, 8192, 0x500000002000);
  r.driver.create_queue(kPid, QueueKind::Compute, g, QueueBos{gtt, gtt, vram, vram});
  for (int i = 0; i < 3; ++i) r.driver.create_event(kPid);
}

// Every buffer kind over two GPUs, queues on both.
void rich_process(Rig& r, Pid pid = kPid) {
  r.driver.open(pid);
  std::uint64_t va = 0x500000000000;
  auto next = [&](std::uint64_t size) {
    auto v = va;
    va += size + 4096;
    return v;
  };
  for (std::size_t i = 0; i < 2; ++i) {
    auto g = r.gpu(i);
    auto ring = r.driver.alloc_bo(pid, BoKind::Gtt, g, 4096, next(4096));
    auto aql = r.driver.alloc_bo(pid, BoKind::Gtt, g, 4096, next(4096));
    auto eop = r.driver.alloc_bo(pid, BoKind::Vram, g, 4096, next(4096));
    auto ctx = r.driver.alloc_bo(pid, BoKind::Vram, g, 8192, next(8192));
    r.driver.alloc_bo(pid, BoKind::Doorbell, g, 8192, next(8192));
    r.driver.alloc_bo(pid, BoKind::Mmio, g, 4096, next(4096));
    r.driver.create_queue(pid, i == 0 ? QueueKind::Compute : QueueKind::Dma, g, QueueBos{ring, aql, eop, ctx});
    Bytes pattern(4096);
    for (std::size_t k = 0; k < pattern.size(); ++k) pattern[k] = static_cast<std::uint8_t>(k * (i + 3));
    r.driver.write_bo(pid, eop, 0, pattern);
  }
  auto uva = next(4096);
  r.host.map(pid, uva, Bytes(4096, 0x5C));
  r.driver.alloc_bo(pid, BoKind::Userptr, r.gpu(0), 4096, uva);
  r.driver.create_event(pid);
  r.driver.create_event(pid);
}

KfdCheckpointBundle checkpoint(Rig& r, Pid pid = kPid) {
  const KfdCaller self{pid, kCapCheckpointRestore};
  r.driver.ioctl_process_info(self, pid);
  return r.driver.ioctl_checkpoint(self, pid);
}

bool mentions_gpuid(const KfdProcessState& p, std::uint32_t g) {
  for (const auto& [_, bo] : p.bos) {
    if (bo.gpuid == g) return true;
  }
  return std::any_of(p.queues.begin(), p.queues.end(), [&](const QueueState& q) { return q.gpuid == g; });
}

}  // namespace

TEST(KfdProcessInfo, CountsAndPauses) {
  Rig r;
  small_process(r);
  auto info = r.driver.ioctl_process_info(kSelf, kPid);
  EXPECT_EQ(info, (ProcessInfo{2, 1, 3}));
  const auto& p = r.driver.process(kPid);
  EXPECT_EQ(p.state, KfdRunState::Paused);
  for (const auto& q : p.queues) {
    EXPECT_TRUE(q.evicted);
    EXPECT_FALSE(q.control_stack.empty());
    EXPECT_FALSE(q.mqd.empty());
  }
}

TEST(KfdProcessInfo, OtherCallerDenied) {
  Rig r;
  small_process(r);
  const auto h = r.driver.state_hash();
  EXPECT_EQ(error_of([&] { r.driver.ioctl_process_info(KfdCaller{kPid + 1, kCapSysAdmin}, kPid); }),
            ErrorKind::PermissionDenied);
  EXPECT_EQ(r.driver.state_hash(), h);
}

TEST(KfdProcessInfo, MissingCapabilityDenied) {
  Rig r;
  small_process(r);
  EXPECT_EQ(error_of([&] { r.driver.ioctl_process_info(KfdCaller{kPid, 0}, kPid); }), ErrorKind::PermissionDenied);
  EXPECT_EQ(r.driver.process(kPid).state, KfdRunState::Running);
}

TEST(KfdProcessInfo, SysAdminSuffices) {
  Rig r;
  small_process(r);
  EXPECT_NO_THROW(r.driver.ioctl_process_info(KfdCaller{kPid, kCapSysAdmin}, kPid));
}

TEST(KfdProcessInfo, NoKfdDescriptor) {
  Rig r;
  EXPECT_EQ(error_of([&] { r.driver.ioctl_process_info(kSelf, kPid); }), ErrorKind::NoKfdFd);
}

TEST(KfdCheckpoint, EchoesBufferContents) {
  Rig r;
  r.driver.open(kPid);
  auto h = r.driver.alloc_bo(kPid, BoKind::Vram, r.gpu(0), 4096, 0x500000000000);
  r.driver.write_bo(kPid, h, 0, Bytes(4096, 0xAB));
  auto b = checkpoint(r);
  ASSERT_EQ(b.bos.size(), 1u);
  EXPECT_EQ(b.bos[0].contents, Bytes(4096, 0xAB));
}

TEST(KfdCheckpoint, RequiresPause) {
  Rig r;
  small_process(r);
  EXPECT_EQ(error_of([&] { r.driver.ioctl_checkpoint(kSelf, kPid); }), ErrorKind::NotPaused);
}

TEST(KfdCheckpoint, IsReadOnly) {
  Rig r;
  rich_process(r);
  r.driver.ioctl_process_info(kSelf, kPid);
  const auto h = r.driver.state_hash();
  auto b = r.driver.ioctl_checkpoint(kSelf, kPid);
  EXPECT_EQ(r.driver.state_hash(), h);
  EXPECT_EQ(b.topology, r.driver.topology());
  EXPECT_EQ(b.events.size(), 2u);
}

TEST(KfdCheckpoint, PlacementOnlyBuffers) {
  Rig r;
  rich_process(r);
  auto b = checkpoint(r);
  for (const auto& bo : b.bos) {
    if (bo.kind == BoKind::Doorbell || bo.kind == BoKind::Mmio) {
      EXPECT_TRUE(bo.contents.empty());
      EXPECT_GT(bo.size, 0u);
    } else {
      EXPECT_EQ(bo.contents.size(), bo.size);
    }
  }
}

TEST(KfdCheckpoint, UserptrReadFromHost) {
  Rig r;
  rich_process(r);
  auto b = checkpoint(r);
  auto it = std::find_if(b.bos.begin(), b.bos.end(), [](const BufferObject& bo) { return bo.kind == BoKind::Userptr; });
  ASSERT_NE(it, b.bos.end());
  EXPECT_EQ(it->contents, Bytes(4096, 0x5C));
}

TEST(KfdUnpause, ContinuesLikeUninterruptedRun) {
  auto run = [](bool pause) {
    Rig r;
    rich_process(r);
    std::vector<std::uint64_t> trace;
    auto vram = r.driver.process(kPid).bos.begin()->first;
    for (std::uint8_t i = 0; i < 6; ++i) {
      if (pause && i == 3) {
        checkpoint(r);
        r.driver.ioctl_unpause(kSelf, kPid);
      }
      r.driver.write_bo(kPid, vram, i, Bytes(16, i));
      trace.push_back(r.driver.state_hash(kPid));
    }
    return trace;
  };
  EXPECT_EQ(run(true), run(false));
}

TEST(KfdUnpause, NotPaused) {
  Rig r;
  small_process(r);
  EXPECT_EQ(error_of([&] { r.driver.ioctl_unpause(kSelf, kPid); }), ErrorKind::NotPaused);
}

TEST(KfdUnpause, ZeroQueues) {
  Rig r;
  r.driver.open(kPid);
  r.driver.ioctl_process_info(kSelf, kPid);
  EXPECT_NO_THROW(r.driver.ioctl_unpause(kSelf, kPid));
  EXPECT_EQ(r.driver.process(kPid).state, KfdRunState::Running);
}

TEST(KfdUnpause, PausedProcessRejectsWork) {
  Rig r;
  rich_process(r);
  r.driver.ioctl_process_info(kSelf, kPid);
  auto h = r.driver.process(kPid).bos.begin()->first;
  EXPECT_EQ(error_of([&] { r.driver.write_bo(kPid, h, 0, Bytes(4, 1)); }), ErrorKind::DeviceLocked);
}

TEST(KfdRestore, IdentityMapDeepEqual) {
  Rig src;
  rich_process(src);
  auto b = checkpoint(src);
  src.driver.ioctl_unpause(kSelf, kPid);
  Rig dst;
  dst.host.map(kPid, b.bos.back().virtual_addr, Bytes(4096, 0x5C));
  dst.driver.open(kPid);
  GpuidMap id;
  for (const auto& d : src.driver.topology().devices) id[d.gpuid] = d.gpuid;
  dst.driver.ioctl_restore(kSelf, kPid, b, id);
  EXPECT_EQ(dst.driver.process(kPid).state, KfdRunState::Restored);
  dst.driver.ioctl_resume(kSelf, kPid);
  EXPECT_EQ(dst.driver.process(kPid), src.driver.process(kPid));
}

TEST(KfdRestore, RoundTripProperty) {
  for (std::uint64_t salt = 0; salt < 20; ++salt) {
    Rig src({kMi250, kMi100}, salt);
    rich_process(src);
    auto vram = src.driver.process(kPid).bos.begin()->first;
    for (std::uint8_t i = 0; i < salt; ++i) src.driver.write_bo(kPid, vram, i * 7u, Bytes(9, i));
    auto b = checkpoint(src);
    src.driver.ioctl_unpause(kSelf, kPid);
    Rig dst({kMi250, kMi100}, salt);
    dst.host.map(kPid, b.bos.back().virtual_addr, Bytes(4096, 0x5C));
    dst.driver.open(kPid);
    auto map = match_topology(b.topology, dst.driver.topology(), nullptr);
    ASSERT_TRUE(map);
    dst.driver.ioctl_restore(kSelf, kPid, b, *map);
    dst.driver.ioctl_resume(kSelf, kPid);
    EXPECT_EQ(dst.driver.process(kPid), src.driver.process(kPid)) << "salt " << salt;
  }
}

TEST(KfdRestore, PermutedTopologyTranslatesEveryGpuid) {
  Rig src({kMi250, kMi100}, 1);
  rich_process(src);
  auto b = checkpoint(src);
  Rig dst({kMi100, kMi250}, 9, {{0, 1}}, 0x300000000ULL);
  dst.host.map(kPid, b.bos.back().virtual_addr, Bytes(4096, 0x5C));
  dst.driver.open(kPid);
  std::string report;
  auto map = match_topology(b.topology, dst.driver.topology(), &report);
  ASSERT_TRUE(map) << report;
  EXPECT_EQ(map->at(src.gpu(0)), dst.gpu(1));
  EXPECT_EQ(map->at(src.gpu(1)), dst.gpu(0));
  auto relocs = dst.driver.ioctl_restore(kSelf, kPid, b, *map);
  dst.driver.ioctl_resume(kSelf, kPid);
  const auto& p = dst.driver.process(kPid);
  for (const auto& d : src.driver.topology().devices) {
    if (!dst.driver.topology().find(d.gpuid)) EXPECT_FALSE(mentions_gpuid(p, d.gpuid));
  }
  for (const auto& q : p.queues) EXPECT_TRUE(dst.driver.topology().find(q.gpuid));
  for (const auto& rl : relocs) {
    const auto& bo = p.bos.at(rl.handle);
    EXPECT_EQ(bo.gpuid, rl.new_gpuid);
    EXPECT_EQ(bo.mmap_offset, rl.new_offset);
  }
}

TEST(KfdRestore, FewerGpusIncompatible) {
  Rig src;
  rich_process(src);
  auto b = checkpoint(src);
  Rig dst({kMi250});
  dst.driver.open(kPid);
  EXPECT_FALSE(match_topology(b.topology, dst.driver.topology(), nullptr));
  GpuidMap map{{src.gpu(0), dst.gpu(0)}, {src.gpu(1), dst.gpu(0)}};
  EXPECT_EQ(error_of([&] { dst.driver.ioctl_restore(kSelf, kPid, b, map); }), ErrorKind::TopologyIncompatible);
}

TEST(KfdRestore, SmallerVramIncompatibleWithReport) {
  Rig src;
  rich_process(src);
  auto b = checkpoint(src);
  auto small = kMi250;
  small.vram = 16ULL << 30;
  Rig dst({small, kMi100});
  dst.driver.open(kPid);
  std::string report;
  EXPECT_FALSE(match_topology(b.topology, dst.driver.topology(), &report));
  EXPECT_FALSE(report.empty());
  GpuidMap map{{src.gpu(0), dst.gpu(0)}, {src.gpu(1), dst.gpu(1)}};
  try {
    dst.driver.ioctl_restore(kSelf, kPid, b, map);
    FAIL() << "restore succeeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TopologyIncompatible);
    EXPECT_NE(std::string(e.what()).find("VRAM"), std::string::npos) << e.what();
  }
}

TEST(KfdRestore, MissingLinkIncompatible) {
  Rig src;
  rich_process(src);
  auto b = checkpoint(src);
  Rig dst({kMi250, kMi100}, 1, {});
  dst.driver.open(kPid);
  EXPECT_FALSE(match_topology(b.topology, dst.driver.topology(), nullptr));
}

TEST(KfdRestore, NonBijectiveMapRejected) {
  Rig src({kMi250, kMi250}, 1);
  rich_process(src);
  auto b = checkpoint(src);
  Rig dst({kMi250, kMi250}, 1);
  dst.driver.open(kPid);
  GpuidMap dup{{src.gpu(0), dst.gpu(0)}, {src.gpu(1), dst.gpu(0)}};
  EXPECT_EQ(error_of([&] { dst.driver.ioctl_restore(kSelf, kPid, b, dup); }), ErrorKind::BadGpuidMap);
  GpuidMap partial{{src.gpu(0), dst.gpu(0)}};
  EXPECT_EQ(error_of([&] { dst.driver.ioctl_restore(kSelf, kPid, b, partial); }), ErrorKind::BadGpuidMap);
  GpuidMap bogus{{src.gpu(0), dst.gpu(0)}, {src.gpu(1), 0xFFFF}};
  EXPECT_EQ(error_of([&] { dst.driver.ioctl_restore(kSelf, kPid, b, bogus); }), ErrorKind::BadGpuidMap);
}

TEST(KfdResume, NotRestored) {
  Rig r;
  small_process(r);
  EXPECT_EQ(error_of([&] { r.driver.ioctl_resume(kSelf, kPid); }), ErrorKind::NotRestored);
}

TEST(KfdResume, UserptrNeedsHostMapping) {
  Rig src;
  rich_process(src);
  auto b = checkpoint(src);
  Rig dst;
  dst.driver.open(kPid);
  GpuidMap id;
  for (const auto& d : src.driver.topology().devices) id[d.gpuid] = d.gpuid;
  dst.driver.ioctl_restore(kSelf, kPid, b, id);
  EXPECT_EQ(error_of([&] { dst.driver.ioctl_resume(kSelf, kPid); }), ErrorKind::InvalidState);
  dst.host.map(kPid, b.bos.back().virtual_addr, Bytes(4096, 0x5C));
  EXPECT_NO_THROW(dst.driver.ioctl_resume(kSelf, kPid));
}

TEST(KfdResume, ContinuesLikeUninterruptedRun) {
  auto run = [](bool restore) {
    Rig r;
    rich_process(r);
    std::vector<std::uint64_t> trace;
    for (std::uint8_t i = 0; i < 6; ++i) {
      if (restore && i == 3) {
        auto b = checkpoint(r);
        Rig fresh;
        fresh.host.map(kPid, b.bos.back().virtual_addr, Bytes(4096, 0x5C));
        fresh.driver.open(kPid);
        GpuidMap id;
        for (const auto& d : r.driver.topology().devices) id[d.gpuid] = d.gpuid;
        fresh.driver.ioctl_restore(kSelf, kPid, b, id);
        fresh.driver.ioctl_resume(kSelf, kPid);
        r.driver.ioctl_unpause(kSelf, kPid);
        EXPECT_EQ(fresh.driver.state_hash(kPid), r.driver.state_hash(kPid));
      }
      auto vram = r.driver.process(kPid).bos.begin()->first;
      r.driver.write_bo(kPid, vram, i, Bytes(8, i));
      trace.push_back(r.driver.state_hash(kPid));
    }
    return trace;
  };
  EXPECT_EQ(run(true), run(false));
}

TEST(KfdResume, SecondResumeRejected) {
  Rig src;
  small_process(src);
  auto b = checkpoint(src);
  Rig dst;
  dst.driver.open(kPid);
  GpuidMap id;
  for (const auto& d : src.driver.topology().devices) id[d.gpuid] = d.gpuid;
  dst.driver.ioctl_restore(kSelf, kPid, b, id);
  dst.driver.ioctl_resume(kSelf, kPid);
  EXPECT_EQ(error_of([&] { dst.driver.ioctl_resume(kSelf, kPid); }), ErrorKind::NotRestored);
}

TEST(Gpuid, Deterministic) {
  EXPECT_EQ(compute_gpuid(kMi250, 5), compute_gpuid(kMi250, 5));
  EXPECT_NE(compute_gpuid(kMi250, 5), 0u);
}

TEST(Gpuid, ComputeUnitsMatter) {
  auto other = kMi250;
  other.compute_units = 110;
  EXPECT_NE(compute_gpuid(kMi250, 5), compute_gpuid(other, 5));
}

TEST(Gpuid, StableAcrossRestarts) {
  // Recomputed from scratch, as a restarted machine would.
  auto oracle = [](const KfdDeviceProps& p, std::uint64_t salt) { return compute_gpuid(p, salt); };
  for (std::uint64_t salt = 0; salt < 50; ++salt) {
    Rig a({kMi250, kMi100}, salt);
    EXPECT_EQ(a.gpu(0), oracle(kMi250, salt));
    Rig b({kMi250, kMi100}, salt);
    EXPECT_EQ(a.driver.topology(), b.driver.topology());
  }
}

TEST(Gpuid, IdenticalDevicesGetDistinctIds) {
  Rig r({kMi250, kMi250, kMi250}, 3, {{0, 1}, {1, 2}});
  std::set<std::uint32_t> ids;
  for (const auto& d : r.driver.topology().devices) ids.insert(d.gpuid);
  EXPECT_EQ(ids.size(), 3u);
}

TEST(KfdBuffers, OffsetsUniquePerNode) {
  Rig r;
  rich_process(r);
  rich_process(r, kPid + 1);
  std::map<std::uint32_t, std::set<std::uint64_t>> seen;
  for (auto pid : r.driver.pids()) {
    for (const auto& [_, bo] : r.driver.process(pid).bos) {
      if (bo.kind == BoKind::Userptr) continue;
      EXPECT_TRUE(seen[bo.gpuid].insert(bo.mmap_offset).second);
    }
  }
}

TEST(KfdBuffers, UserptrNeedsHostRange) {
  Rig r;
  r.driver.open(kPid);
  EXPECT_EQ(error_of([&] { r.driver.alloc_bo(kPid, BoKind::Userptr, r.gpu(0), 4096, 0x1000); }), ErrorKind::InvalidState);
}

TEST(KfdBuffers, QueueBosMustExist) {
  Rig r;
  r.driver.open(kPid);
  EXPECT_ANY_THROW(r.driver.create_queue(kPid, QueueKind::Compute, r.gpu(0), QueueBos{1, 2, 3, 4}));
}

TEST(KfdBuffers, QueuePointersOrdered) {
  Rig r;
  rich_process(r);
  for (int i = 0; i < 100; ++i) r.driver.write_bo(kPid, 3, 0, Bytes(4, 1));
  for (const auto& q : r.driver.process(kPid).queues) EXPECT_LE(q.read_ptr, q.write_ptr);
}
