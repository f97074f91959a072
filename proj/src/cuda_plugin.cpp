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

#include <algorithm>
#include <cctype>

#include "unicr/engine.hpp"

namespace unicr {

namespace {

constexpr const char* kPluginId = "cuda";

// Ordinal of a per-device node such as /dev/nvidia3.
std::optional<std::uint32_t> device_ordinal(std::string_view path) {
  std::string_view prefix = kNvidiaPrefix;
  if (!path.starts_with(prefix) || path.size() == prefix.size()) return std::nullopt;
  auto rest = path.substr(prefix.size());
  if (!std::all_of(rest.begin(), rest.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; })) {
    return std::nullopt;
  }
  return static_cast<std::uint32_t>(std::stoul(std::string(rest)));
}

class CudaPlugin final : public Plugin {
 public:
  std::string id() const override { return kPluginId; }
  std::vector<std::string> device_prefixes() const override { return {kNvidiaPrefix}; }
  int priority() const override { return 10; }
  std::set<HookId> hooks() const override {
    return {HookId::PauseDevices,    HookId::CheckpointDevices, HookId::DumpExtFile,       HookId::RestoreExtFile,
            HookId::HandleDeviceVma, HookId::UpdateVmaMap,      HookId::ResumeDevicesLate, HookId::PluginInit,
            HookId::PluginExit};
  }

  void init(PluginContext&) override {
    locked_.clear();
    device_map_.clear();
  }

  void pause_devices(PluginContext& ctx, std::span<const Pid> pids) override {
    auto& drv = ctx.machine.cuda();
    std::vector<Pid> mine;
    for (auto pid : pids) {
      if (drv.has_task(pid)) mine.push_back(pid);
    }
    try {
      drv.lock(mine, ctx.lock_timeout);
    } catch (const LockTimeoutError& e) {
      throw Error(ErrorKind::LockTimeout, e.what(), kPluginId);
    }
    locked_ = mine;
  }

  void checkpoint_devices(PluginContext& ctx, std::span<const Pid>) override {
    auto& drv = ctx.machine.cuda();
    for (auto pid : locked_) ctx.snapshot.stats.gpu_bytes += drv.task(pid).device_bytes();
    drv.checkpoint_to_host(locked_);
    for (auto pid : locked_) ctx.snapshot.device_images[kPluginId][pid] = *drv.task(pid).host_blob;
  }

  std::optional<Bytes> dump_ext_file(PluginContext&, Pid, const DeviceFd& fd) override {
    if (fd.path == kNvidiaCtl || fd.path == kNvidiaUvm) return Bytes{};
    if (auto ord = device_ordinal(fd.path)) {
      ByteWriter w;
      w.u32(*ord);
      return w.take();
    }
    return std::nullopt;
  }

  bool handle_device_vma(PluginContext&, Pid, const Vma& v) override {
    return v.device()->device_name.starts_with(kNvidiaPrefix);
  }

  void exit(PluginContext& ctx, bool) override {
    if (ctx.stage == Stage::Restore) {
      device_map_.clear();
      return;
    }
    // After a dump, successful or not, the tasks get their devices back.
    auto& drv = ctx.machine.cuda();
    for (auto pid : locked_) {
      if (!drv.has_task(pid)) continue;
      std::vector<Pid> one{pid};
      if (drv.task(pid).phase == CudaPhase::Checkpointed) {
        drv.restore_from_host(one, CudaDriver::identity_map(drv.devices().size()));
      }
      if (drv.task(pid).phase == CudaPhase::Locked) drv.unlock(one);
    }
    locked_.clear();
  }

  std::optional<DeviceFd> restore_ext_file(PluginContext& ctx, Pid pid, const FdImage& fi) override {
    adopt(ctx, pid);
    if (fi.fd.path == kNvidiaCtl || fi.fd.path == kNvidiaUvm) return fi.fd;
    ByteReader r(fi.payload);
    auto ord = r.u32();
    auto it = device_map_[pid].find(ord);
    if (it == device_map_[pid].end()) {
      throw Error(ErrorKind::TopologyMismatch, "device " + fi.fd.path + " has no counterpart on the target");
    }
    return DeviceFd{fi.fd.fd, ctx.machine.cuda().device_path(it->second)};
  }

  std::optional<DeviceFileBacking> update_vma_map(PluginContext& ctx, Pid pid, const DeviceFileBacking& d) override {
    adopt(ctx, pid);
    auto ord = device_ordinal(d.device_name);
    if (!ord) return d;
    auto it = device_map_[pid].find(*ord);
    if (it == device_map_[pid].end()) {
      throw Error(ErrorKind::TopologyMismatch, "device " + d.device_name + " has no counterpart on the target");
    }
    return DeviceFileBacking{ctx.machine.cuda().device_path(it->second), d.mmap_offset};
  }

  void resume_devices_late(PluginContext& ctx, std::span<const Pid> pids) override {
    auto& drv = ctx.machine.cuda();
    for (auto pid : pids) {
      if (!ctx.snapshot.device_images[kPluginId].contains(pid)) continue;
      adopt(ctx, pid);
      std::vector<Pid> one{pid};
      drv.restore_from_host(one, device_map_.at(pid));
      drv.unlock(one);
    }
  }

 private:
  // Makes the checkpointed task known to the target driver and works out
  // where each recorded device goes.
  void adopt(PluginContext& ctx, Pid pid) {
    if (device_map_.contains(pid)) return;
    auto& images = ctx.snapshot.device_images[kPluginId];
    auto it = images.find(pid);
    if (it == images.end()) throw Error(ErrorKind::ImageCorrupt, "no CUDA image for task " + std::to_string(pid));
    auto& drv = ctx.machine.cuda();
    auto decoded = decode_host_blob(it->second);
    const auto& src = decoded.source_devices;
    const auto& dst = drv.devices();
    if (src.size() != dst.size()) {
      throw Error(ErrorKind::TopologyMismatch, "checkpoint used " + std::to_string(src.size()) + " CUDA devices; " +
                                                   ctx.machine.spec().name + " has " + std::to_string(dst.size()));
    }
    // Keep ordinals where the models agree, otherwise pair devices of the
    // same model in order.
    std::map<std::uint32_t, std::uint32_t> map;
    bool same = true;
    for (std::size_t i = 0; i < src.size(); ++i) same = same && src[i].model == dst[i].model;
    if (same) {
      map = CudaDriver::identity_map(src.size());
    } else {
      std::vector<bool> taken(dst.size(), false);
      for (std::uint32_t i = 0; i < src.size(); ++i) {
        std::uint32_t j = 0;
        while (j < dst.size() && (taken[j] || dst[j].model != src[i].model)) ++j;
        if (j == dst.size()) {
          throw Error(ErrorKind::TopologyMismatch, "no " + src[i].model + " available for device " + std::to_string(i));
        }
        taken[j] = true;
        map[i] = j;
      }
    }
    drv.adopt_checkpointed(pid, it->second);
    device_map_[pid] = std::move(map);
  }

  std::vector<Pid> locked_;
  std::map<Pid, std::map<std::uint32_t, std::uint32_t>> device_map_;
};

}  // namespace

std::unique_ptr<Plugin> make_cuda_plugin() { return std::make_unique<CudaPlugin>(); }

}  // namespace unicr
