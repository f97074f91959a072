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

#include "unicr/container.hpp"

#include <algorithm>
#include <charconv>
#include <set>

namespace unicr {

namespace {

constexpr const char* kCudaLibrary = "/usr/lib/x86_64-linux-gnu/libcuda.so.1";
constexpr const char* kNvmlLibrary = "/usr/lib/x86_64-linux-gnu/libnvidia-ml.so.1";
constexpr const char* kHsaLibrary = "/opt/rocm/lib/libhsa-runtime64.so.1";

struct DeviceRef {
  bool nvidia = false;
  std::uint32_t index = 0;
};

DeviceRef parse_device_id(const std::string& id) {
  auto number = [&](std::size_t skip) {
    auto rest = id.substr(skip);
    if (rest.empty() || !std::all_of(rest.begin(), rest.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw Error(ErrorKind::UnknownDevice, "unknown device id " + id, id);
    }
    return static_cast<std::uint32_t>(std::stoul(rest));
  };
  if (id.starts_with("nvidia")) return DeviceRef{true, number(6)};
  if (id.starts_with("amd")) return DeviceRef{false, number(3)};
  throw Error(ErrorKind::UnknownDevice, "unknown device id " + id, id);
}

// Host node of a device id, or nullopt if the machine lacks it.
std::optional<std::string> device_node(const Machine& m, const DeviceRef& d) {
  if (d.nvidia) {
    if (d.index >= m.spec().cuda_devices.size()) return std::nullopt;
    return m.cuda().device_path(d.index);
  }
  const auto& devs = m.kfd().topology().devices;
  if (d.index >= devs.size()) return std::nullopt;
  return devs[d.index].render_node;
}

std::vector<ExternalMount> build_mounts(const std::vector<std::string>& nodes, bool nvidia, bool amd) {
  std::vector<ExternalMount> out;
  auto dev = [&](const std::string& p) { out.push_back(ExternalMount{p, p, MountKind::GpuDevice}); };
  auto lib = [&](const std::string& p) { out.push_back(ExternalMount{p, p, MountKind::Library}); };
  if (nvidia) {
    dev(kNvidiaCtl);
    dev(kNvidiaUvm);
  }
  if (amd) dev(kKfdPath);
  for (const auto& n : nodes) dev(n);
  if (nvidia) {
    lib(kCudaLibrary);
    lib(kNvmlLibrary);
  }
  if (amd) lib(kHsaLibrary);
  return out;
}

std::string device_id_for_node(const Machine& m, const std::string& node) {
  for (std::uint32_t i = 0; i < m.spec().cuda_devices.size(); ++i) {
    if (m.cuda().device_path(i) == node) return "nvidia" + std::to_string(i);
  }
  const auto& devs = m.kfd().topology().devices;
  for (std::size_t i = 0; i < devs.size(); ++i) {
    if (devs[i].render_node == node) return "amd" + std::to_string(i);
  }
  return {};
}

std::uint64_t parse_counter(const FileMap& rw) {
  auto it = rw.find(kCounterFile);
  if (it == rw.end()) return 0;
  std::string_view text(reinterpret_cast<const char*>(it->second.data()), it->second.size());
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || end != text.data() + text.size()) {
    throw Error(ErrorKind::ImageCorrupt, "counter file holds " + std::string(text), kRootfsDiffFile);
  }
  return v;
}

}  // namespace

Layer make_layer(FileMap files) {
  Hasher h;
  for (const auto& [path, data] : files) h.add(path).add(data);
  return Layer{"sha-" + to_hex(h.digest()), std::move(files)};
}

std::string LayerStore::add(Layer layer) {
  auto d = layer.digest;
  layers_.emplace(d, std::move(layer));
  return d;
}

const Layer& LayerStore::get(const std::string& digest) const {
  auto it = layers_.find(digest);
  if (it == layers_.end()) throw Error(ErrorKind::MissingLayer, "layer " + digest + " is not available", digest);
  return it->second;
}

std::string_view to_string(MountKind k) { return k == MountKind::GpuDevice ? "gpu-device" : "library"; }

nlohmann::json to_json(const ContainerConfig& c) {
  auto mounts = nlohmann::json::array();
  for (const auto& m : c.mounts) {
    mounts.push_back({{"source", m.source}, {"target", m.target}, {"kind", std::string(to_string(m.kind))}});
  }
  return {{"version", 1},
          {"id", c.id},
          {"layers", c.layers},
          {"gpu", {{"devices", c.gpu.device_ids}, {"capabilities", c.gpu.capabilities}}},
          {"mounts", mounts}};
}

ContainerConfig parse_container_config(const nlohmann::json& doc) {
  try {
    if (doc.value("version", 1) != 1) throw Error(ErrorKind::VersionUnsupported, "container config version");
    ContainerConfig c;
    c.id = doc.at("id").get<std::string>();
    c.layers = doc.value("layers", std::vector<std::string>{});
    if (doc.contains("gpu")) {
      c.gpu.device_ids = doc["gpu"].value("devices", std::vector<std::string>{});
      c.gpu.capabilities = doc["gpu"].value("capabilities", std::vector<std::string>{});
    }
    for (const auto& mj : doc.value("mounts", nlohmann::json::array())) {
      auto kind = mj.at("kind").get<std::string>();
      if (kind != "gpu-device" && kind != "library") throw Error(ErrorKind::SpecError, "unknown mount kind " + kind);
      c.mounts.push_back(ExternalMount{mj.at("source").get<std::string>(), mj.at("target").get<std::string>(),
                                       kind == "library" ? MountKind::Library : MountKind::GpuDevice});
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SpecError, std::string("malformed container config: ") + e.what());
  }
}

Bytes encode_file_map(const FileMap& files) {
  ByteWriter w;
  w.u64(files.size());
  for (const auto& [path, data] : files) {
    w.str(path);
    w.bytes(data);
  }
  return w.take();
}

FileMap decode_file_map(std::span<const std::uint8_t> data) {
  ByteReader r(data);
  FileMap out;
  for (auto n = r.count(16); n > 0; --n) {
    auto path = r.str();
    out[path] = r.bytes();
  }
  r.expect_end();
  return out;
}

SimContainer::SimContainer(Machine& machine, const LayerStore& store, ContainerConfig config)
    : machine_(&machine), store_(&store), config_(std::move(config)) {
  for (const auto& d : config_.layers) (void)store.get(d);
}

std::optional<Bytes> SimContainer::read_file(const std::string& path) const {
  if (auto it = rw_.find(path); it != rw_.end()) return it->second;
  for (auto l = config_.layers.rbegin(); l != config_.layers.rend(); ++l) {
    const auto& files = store_->get(*l).files;
    if (auto it = files.find(path); it != files.end()) return it->second;
  }
  return std::nullopt;
}

void SimContainer::set_rw_layer(FileMap rw) {
  counter_ = parse_counter(rw);
  rw_ = std::move(rw);
}

void SimContainer::write_file(const std::string& path, Bytes data) { rw_[path] = std::move(data); }

void SimContainer::start(const TreeSpec& spec) {
  std::set<std::string> mounted;
  for (const auto& m : config_.mounts) {
    if (m.kind == MountKind::GpuDevice) mounted.insert(m.target);
  }
  machine_->spawn(spec);
  std::optional<std::string> hidden;
  for (const auto& [pid, t] : machine_->tree().tasks()) {
    for (const auto& fd : t.open_devices) {
      if (!hidden && !mounted.contains(fd.path)) hidden = fd.path;
    }
  }
  if (hidden) {
    machine_->kill_all();
    throw Error(ErrorKind::UnknownDevice, "device " + *hidden + " is not exposed to container " + config_.id, *hidden);
  }
}

MutationRecord SimContainer::step(Pid pid) {
  auto rec = machine_->step(pid);
  ++counter_;
  auto s = std::to_string(counter_);
  write_file(kCounterFile, Bytes(s.begin(), s.end()));
  return rec;
}

void SimContainer::freeze() { unicr::freeze(machine_->tree(), machine_->tree().freezer()); }
void SimContainer::thaw() { unicr::thaw(machine_->tree(), machine_->tree().freezer()); }
bool SimContainer::frozen() const { return machine_->tree().freezer().state == FreezerCgroup::State::Frozen; }

SimContainer create_container(Machine& machine, const LayerStore& store, const std::string& id,
                              const std::vector<std::string>& layers, const GpuConfig& gpu) {
  for (const auto& d : layers) {
    if (!store.contains(d)) throw Error(ErrorKind::MissingLayer, "layer " + d + " is not available", d);
  }
  std::vector<std::string> nodes;
  bool nvidia = false;
  bool amd = false;
  for (const auto& dev : gpu.device_ids) {
    auto ref = parse_device_id(dev);
    auto node = device_node(machine, ref);
    if (!node) throw Error(ErrorKind::UnknownDevice, "device " + dev + " does not exist on " + machine.spec().name, dev);
    (ref.nvidia ? nvidia : amd) = true;
    nodes.push_back(*node);
  }
  ContainerConfig cfg{id, layers, gpu, build_mounts(nodes, nvidia, amd)};
  return SimContainer(machine, store, std::move(cfg));
}

DumpResult container_checkpoint(Engine& engine, SimContainer& c, const ContainerCheckpointOptions& opts) {
  DumpOptions d;
  d.images_dir = opts.images_dir;
  d.lock_timeout = opts.lock_timeout;
  d.final_state = FinalState::Frozen;
  d.on_frozen = [&](Snapshot& snap) {
    snap.extra_files[kRootfsDiffFile] = encode_file_map(c.rw_layer());
    auto cfg = to_json(c.config()).dump(2);
    snap.extra_files[kContainerConfigFile] = Bytes(cfg.begin(), cfg.end());
    engine.trace().append(TraceEvent{TraceKind::External, std::nullopt, {}, {}, "rw-layer captured",
                                     c.machine().clock().now()});
  };
  return engine.dump(c.machine(), d);
}

SimContainer container_restore(Engine& engine, const std::filesystem::path& dir, Machine& host, const LayerStore& store,
                               RestoreResult* result) {
  Snapshot snap;
  try {
    snap = read_image_set(dir);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::IoError) throw;
    throw Error(ErrorKind::ImageCorrupt, e.what(), e.subject());
  }
  auto cfg_it = snap.extra_files.find(kContainerConfigFile);
  auto diff_it = snap.extra_files.find(kRootfsDiffFile);
  if (cfg_it == snap.extra_files.end() || diff_it == snap.extra_files.end()) {
    throw Error(ErrorKind::ImageCorrupt, "image set is not a container checkpoint");
  }
  ContainerConfig cfg;
  try {
    cfg = parse_container_config(nlohmann::json::parse(cfg_it->second.begin(), cfg_it->second.end()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ImageCorrupt, std::string("container config: ") + e.what(), kContainerConfigFile);
  }
  for (const auto& d : cfg.layers) {
    if (!store.contains(d)) throw Error(ErrorKind::MissingLayer, "layer " + d + " is not available", d);
  }
  bool nvidia = false;
  bool amd = false;
  for (const auto& dev : cfg.gpu.device_ids) {
    auto ref = parse_device_id(dev);
    if (!device_node(host, ref)) {
      throw Error(ErrorKind::TopologyMismatch, "device " + dev + " is not available on " + host.spec().name, dev);
    }
    (ref.nvidia ? nvidia : amd) = true;
  }
  FileMap rw;
  try {
    rw = decode_file_map(diff_it->second);
  } catch (const Error& e) {
    throw Error(ErrorKind::ImageCorrupt, e.what(), kRootfsDiffFile);
  }
  (void)parse_counter(rw);

  auto restored = engine.restore(dir, host);

  // Devices are re-bound to wherever the plugins put the restored file
  // descriptors; libraries are re-bound by kind.
  std::set<std::string> nodes;
  for (auto pid : restored.pids) {
    for (const auto& fd : host.tree().task(pid).open_devices) {
      if (!device_id_for_node(host, fd.path).empty()) nodes.insert(fd.path);
    }
  }
  std::set<std::string> referenced_ids;
  for (const auto& n : nodes) referenced_ids.insert(device_id_for_node(host, n));
  GpuConfig gpu;
  gpu.capabilities = cfg.gpu.capabilities;
  for (const auto& dev : cfg.gpu.device_ids) {
    auto ref = parse_device_id(dev);
    auto node = *device_node(host, ref);
    bool used_by_fd = false;
    for (const auto& o : referenced_ids) used_by_fd = used_by_fd || parse_device_id(o).nvidia == ref.nvidia;
    if (!used_by_fd) nodes.insert(node);
  }
  for (const auto& n : nodes) gpu.device_ids.push_back(device_id_for_node(host, n));
  cfg.gpu = gpu;
  cfg.mounts = build_mounts(std::vector<std::string>(nodes.begin(), nodes.end()), nvidia, amd);

  SimContainer c(host, store, std::move(cfg));
  c.set_rw_layer(std::move(rw));
  if (result != nullptr) *result = std::move(restored);
  return c;
}

}  // namespace unicr
