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

namespace unicr {

namespace {

constexpr const char* kPluginId = "kfd";

class KfdPlugin final : public Plugin {
 public:
  std::string id() const override { return kPluginId; }
  std::vector<std::string> device_prefixes() const override { return {kKfdPath, kRenderNodePrefix}; }
  int priority() const override { return 20; }
  std::set<HookId> hooks() const override {
    return {HookId::PauseDevices,    HookId::CheckpointDevices, HookId::DumpExtFile,       HookId::RestoreExtFile,
            HookId::HandleDeviceVma, HookId::UpdateVmaMap,      HookId::ResumeDevicesLate, HookId::PluginInit,
            HookId::PluginExit};
  }

  void init(PluginContext&) override {
    paused_.clear();
    restored_.clear();
  }

  // The ioctls are only honoured for the process that opened /dev/kfd, so the
  // plugin issues them from inside the target with the engine's credentials.
  static KfdCaller as_target(const PluginContext& ctx, Pid pid) { return KfdCaller{pid, ctx.capabilities}; }

  void pause_devices(PluginContext& ctx, std::span<const Pid> pids) override {
    auto& drv = ctx.machine.kfd();
    for (auto pid : pids) {
      if (!drv.has_process(pid)) continue;
      drv.ioctl_process_info(as_target(ctx, pid), pid);
      paused_.push_back(pid);
    }
  }

  void checkpoint_devices(PluginContext& ctx, std::span<const Pid>) override {
    auto& drv = ctx.machine.kfd();
    for (auto pid : paused_) {
      auto bundle = drv.ioctl_checkpoint(as_target(ctx, pid), pid);
      for (const auto& bo : bundle.bos) {
        if (bo.kind == BoKind::Vram || bo.kind == BoKind::Gtt) ctx.snapshot.stats.gpu_bytes += bo.contents.size();
      }
      ctx.snapshot.device_images[kPluginId][pid] = encode_kfd_bundle(bundle);
    }
  }

  std::optional<Bytes> dump_ext_file(PluginContext& ctx, Pid, const DeviceFd& fd) override {
    if (fd.path == kKfdPath) return Bytes{};
    for (const auto& d : ctx.machine.kfd().topology().devices) {
      if (d.render_node == fd.path) {
        ByteWriter w;
        w.u32(d.gpuid);
        return w.take();
      }
    }
    return std::nullopt;
  }

  bool handle_device_vma(PluginContext&, Pid, const Vma& v) override {
    return v.device()->device_name.starts_with(kRenderNodePrefix);
  }

  void exit(PluginContext& ctx, bool) override {
    if (ctx.stage != Stage::Restore) {
      auto& drv = ctx.machine.kfd();
      for (auto pid : paused_) {
        if (drv.has_process(pid) && drv.process(pid).state == KfdRunState::Paused) {
          drv.ioctl_unpause(as_target(ctx, pid), pid);
        }
      }
    }
    paused_.clear();
    restored_.clear();
  }

  std::optional<DeviceFd> restore_ext_file(PluginContext& ctx, Pid pid, const FdImage& fi) override {
    auto& st = ensure_restored(ctx, pid);
    if (fi.fd.path == kKfdPath) return fi.fd;
    ByteReader r(fi.payload);
    auto old_gpuid = r.u32();
    auto it = st.map.find(old_gpuid);
    if (it == st.map.end()) throw Error(ErrorKind::BadGpuidMap, "render node of unknown gpuid " + std::to_string(old_gpuid));
    return DeviceFd{fi.fd.fd, ctx.machine.kfd().topology().find(it->second)->render_node};
  }

  std::optional<DeviceFileBacking> update_vma_map(PluginContext& ctx, Pid pid, const DeviceFileBacking& d) override {
    auto& st = ensure_restored(ctx, pid);
    const auto& target = ctx.machine.kfd().topology();
    for (const auto& rel : st.relocations) {
      const auto* old_dev = st.source.find(rel.old_gpuid);
      if (old_dev != nullptr && old_dev->render_node == d.device_name && rel.old_offset == d.mmap_offset) {
        return DeviceFileBacking{target.find(rel.new_gpuid)->render_node, rel.new_offset};
      }
    }
    throw Error(ErrorKind::ImageCorrupt, "no buffer object behind mapping " + d.device_name + "@" + to_hex(d.mmap_offset));
  }

  void resume_devices_late(PluginContext& ctx, std::span<const Pid> pids) override {
    for (auto pid : pids) {
      if (!ctx.snapshot.device_images[kPluginId].contains(pid)) continue;
      ensure_restored(ctx, pid);
      ctx.machine.kfd().ioctl_resume(as_target(ctx, pid), pid);
    }
  }

 private:
  struct Restored {
    GpuTopology source;
    GpuidMap map;
    std::vector<BoRelocation> relocations;
  };

  Restored& ensure_restored(PluginContext& ctx, Pid pid) {
    if (auto it = restored_.find(pid); it != restored_.end()) return it->second;
    auto& images = ctx.snapshot.device_images[kPluginId];
    auto img = images.find(pid);
    if (img == images.end()) throw Error(ErrorKind::ImageCorrupt, "no KFD image for task " + std::to_string(pid));
    auto bundle = decode_kfd_bundle(img->second);
    auto& drv = ctx.machine.kfd();
    std::string report;
    auto map = match_topology(bundle.topology, drv.topology(), &report);
    if (!map) throw Error(ErrorKind::TopologyIncompatible, "target GPUs do not match the checkpoint: " + report);
    if (!drv.has_process(pid)) drv.open(pid);
    Restored st;
    st.relocations = drv.ioctl_restore(as_target(ctx, pid), pid, bundle, *map);
    st.source = std::move(bundle.topology);
    st.map = std::move(*map);
    return restored_.emplace(pid, std::move(st)).first->second;
  }

  std::vector<Pid> paused_;
  std::map<Pid, Restored> restored_;
};

}  // namespace

std::unique_ptr<Plugin> make_kfd_plugin() { return std::make_unique<KfdPlugin>(); }

}  // namespace unicr
