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
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "unicr/engine.hpp"

namespace unicr {

using FileMap = std::map<std::string, Bytes>;

// Immutable filesystem layer, addressed by the digest of its contents.
struct Layer {
  std::string digest;
  FileMap files;
};
Layer make_layer(FileMap files);

class LayerStore {
 public:
  std::string add(Layer layer);
  bool contains(const std::string& digest) const { return layers_.contains(digest); }
  const Layer& get(const std::string& digest) const;

 private:
  std::map<std::string, Layer> layers_;
};

enum class MountKind : std::uint8_t { GpuDevice, Library };
std::string_view to_string(MountKind k);

struct ExternalMount {
  std::string source;
  std::string target;
  MountKind kind = MountKind::GpuDevice;
  friend bool operator==(const ExternalMount&, const ExternalMount&) = default;
};

// Device ids are "nvidia<N>" for CUDA ordinals and "amd<N>" for KFD device
// indices; capabilities are free-form tags such as "compute" or "utility".
struct GpuConfig {
  std::vector<std::string> device_ids;
  std::vector<std::string> capabilities;
  friend bool operator==(const GpuConfig&, const GpuConfig&) = default;
};

struct ContainerConfig {
  std::string id;
  std::vector<std::string> layers;  // bottom to top
  GpuConfig gpu;
  std::vector<ExternalMount> mounts;
  friend bool operator==(const ContainerConfig&, const ContainerConfig&) = default;
};
nlohmann::json to_json(const ContainerConfig& c);
ContainerConfig parse_container_config(const nlohmann::json& doc);

inline constexpr const char* kCounterFile = "/run/counter";
inline constexpr const char* kRootfsDiffFile = "rootfs-diff";
inline constexpr const char* kContainerConfigFile = "container";

class SimContainer {
 public:
  SimContainer(Machine& machine, const LayerStore& store, ContainerConfig config);

  const ContainerConfig& config() const noexcept { return config_; }
  const std::vector<ExternalMount>& external_mounts() const noexcept { return config_.mounts; }
  Machine& machine() noexcept { return *machine_; }
  const Machine& machine() const noexcept { return *machine_; }
  const FileMap& rw_layer() const noexcept { return rw_; }
  // Replaces the writable layer; the step counter continues from its
  // counter file.
  void set_rw_layer(FileMap rw);

  // Merged view: writable layer first, then read-only layers top-down.
  std::optional<Bytes> read_file(const std::string& path) const;
  void write_file(const std::string& path, Bytes data);

  void start(const TreeSpec& spec);
  // One workload step of `pid`, then the step counter is written to the
  // writable layer.
  MutationRecord step(Pid pid);
  void freeze();
  void thaw();
  bool frozen() const;

 private:
  Machine* machine_;
  const LayerStore* store_;
  ContainerConfig config_;
  FileMap rw_;
  std::uint64_t counter_ = 0;
};

// Resolves device ids against the machine and builds the container with its
// GPU devices and libraries injected as external mounts.
SimContainer create_container(Machine& machine, const LayerStore& store, const std::string& id,
                              const std::vector<std::string>& layers, const GpuConfig& gpu);

struct ContainerCheckpointOptions {
  std::filesystem::path images_dir;
  SimDuration lock_timeout = std::chrono::seconds(10);
};

// Dumps the container's tree and writable layer. The container is left frozen.
DumpResult container_checkpoint(Engine& engine, SimContainer& container, const ContainerCheckpointOptions& opts);

SimContainer container_restore(Engine& engine, const std::filesystem::path& images_dir, Machine& host,
                               const LayerStore& store, RestoreResult* result = nullptr);

FileMap decode_file_map(std::span<const std::uint8_t> data);
Bytes encode_file_map(const FileMap& files);

}  // namespace unicr
