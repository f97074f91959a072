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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "unicr/bytes.hpp"
#include "unicr/sim_clock.hpp"
#include "unicr/sim_gpu_kfd.hpp"
#include "unicr/sim_host.hpp"

namespace unicr {

inline constexpr std::uint32_t kImageFormatVersion = 1;
inline constexpr std::uint32_t kStatsFormatVersion = 1;

struct Inventory {
  std::uint32_t format_version = kImageFormatVersion;
  std::int64_t created_at = 0;  // simulated microseconds
  std::uint32_t process_count = 0;
  bool has_gpu_state = false;
  std::vector<std::string> plugin_ids;
  std::vector<Pid> pids;  // in restore order
  friend bool operator==(const Inventory&, const Inventory&) = default;
};

struct CrStats {
  SimDuration freezing_time{0};
  SimDuration frozen_time{0};
  SimDuration mem_dump_time{0};
  SimDuration mem_write_time{0};
  SimDuration checkpoint_total{0};
  SimDuration restore_total{0};
  std::uint64_t pages_scanned = 0;
  std::uint64_t gpu_bytes = 0;
  std::uint64_t cpu_bytes = 0;
  friend bool operator==(const CrStats&, const CrStats&) = default;
};

// A mapping as dumped. Device mappings name the plugin that claimed them.
struct VmaImage {
  Vma vma;
  std::string handler;
  friend bool operator==(const VmaImage&, const VmaImage&) = default;
};

// A device file descriptor as dumped by the plugin that owns it.
struct FdImage {
  DeviceFd fd;
  std::string plugin;
  Bytes payload;
  friend bool operator==(const FdImage&, const FdImage&) = default;
};

struct TaskImage {
  Pid pid = 0;
  Pid ppid = 0;
  std::vector<Pid> thread_ids;
  std::uint32_t capabilities = 0;
  WorkloadParams workload;
  std::uint64_t steps = 0;
  std::vector<VmaImage> vmas;
  std::vector<FdImage> fds;
  friend bool operator==(const TaskImage&, const TaskImage&) = default;
};

struct Snapshot {
  Inventory inventory;
  std::vector<TaskImage> tasks;
  // plugin id -> pid -> opaque device image
  std::map<std::string, std::map<Pid, Bytes>> device_images;
  // Files added by callers, e.g. a container's writable layer.
  std::map<std::string, Bytes> extra_files;
  CrStats stats;
  friend bool operator==(const Snapshot&, const Snapshot&) = default;
};

struct WriteOptions {
  // Called before each file is written; throwing aborts the write. Used to
  // inject I/O faults.
  std::function<void(const std::string& file)> before_file;
};

// Names of the files an image set consists of, in write order.
std::vector<std::string> image_file_names(const Snapshot& snapshot);

// Writes the set into a temporary sibling directory and renames it into
// place. `dir` must not exist. On failure nothing is left behind.
std::filesystem::path write_image_set(const Snapshot& snapshot, const std::filesystem::path& dir,
                                      const WriteOptions& options = {});
Snapshot read_image_set(const std::filesystem::path& dir);

// Encoded sizes of every file of the set, without touching the disk.
std::map<std::string, std::uint64_t> encoded_sizes(const Snapshot& snapshot);

struct Breakdown {
  double gpu_share = 0.0;
  double cpu_share = 1.0;
};
Breakdown compute_breakdown(const Snapshot& snapshot);
Breakdown compute_breakdown(const CrStats& stats);

enum class StatsFormat { Text, Json };
std::string format_stats(const CrStats& stats, StatsFormat format);

Bytes encode_stats(const CrStats& stats);
CrStats decode_stats(std::span<const std::uint8_t> data);

Bytes encode_kfd_bundle(const KfdCheckpointBundle& bundle);
KfdCheckpointBundle decode_kfd_bundle(std::span<const std::uint8_t> data);

}  // namespace unicr
