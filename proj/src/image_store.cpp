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

#include "unicr/image_store.hpp"

#include <array>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace unicr {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::uint8_t, 8> kInventoryMagic{'U', 'N', 'I', 'C', 'R', 'I', 'N', 'V'};
constexpr std::array<std::uint8_t, 8> kPagesMagic{'U', 'N', 'I', 'C', 'R', 'P', 'G', 'S'};
constexpr std::array<std::uint8_t, 8> kStatsMagic{'U', 'N', 'I', 'C', 'R', 'S', 'T', 'A'};
constexpr std::array<std::uint8_t, 8> kBundleMagic{'U', 'K', 'F', 'D', 'B', 'N', 'D', 'L'};
constexpr std::uint32_t kBundleVersion = 1;

constexpr const char* kInventoryFile = "inventory";
constexpr const char* kStatsFile = "stats";

enum class Role : std::uint8_t { Pages = 0, Device = 1, Extra = 2, Stats = 3 };

struct FileEntry {
  std::string name;
  Role role = Role::Extra;
  std::string plugin;
  Pid pid = 0;
  std::uint64_t size = 0;
  std::uint32_t crc = 0;
};

void expect_magic(ByteReader& r, const std::array<std::uint8_t, 8>& magic, const std::string& file) {
  auto got = r.raw(magic.size());
  if (!std::equal(got.begin(), got.end(), magic.begin())) {
    throw Error(ErrorKind::ImageCorrupt, "bad magic in " + file, file);
  }
}

std::string pages_name(Pid pid) { return "pages-" + std::to_string(pid); }
std::string device_name(const std::string& plugin, Pid pid) { return plugin + "-" + std::to_string(pid); }

Bytes encode_task(const TaskImage& t) {
  ByteWriter w;
  w.raw(kPagesMagic);
  w.u32(kImageFormatVersion);
  w.i32(t.pid);
  w.i32(t.ppid);
  w.u64(t.thread_ids.size());
  for (auto tid : t.thread_ids) w.i32(tid);
  w.u32(t.capabilities);
  w.u64(t.workload.seed);
  w.u32(t.workload.cpu_writes_per_step);
  w.u32(t.workload.device_writes_per_step);
  w.u64(t.steps);
  w.u64(t.vmas.size());
  for (const auto& v : t.vmas) {
    w.u64(v.vma.start);
    w.u64(v.vma.length);
    if (const auto* d = v.vma.device()) {
      w.u8(1);
      w.str(d->device_name);
      w.u64(d->mmap_offset);
    } else {
      w.u8(0);
    }
    w.bytes(v.vma.contents);
    w.str(v.handler);
  }
  w.u64(t.fds.size());
  for (const auto& f : t.fds) {
    w.i32(f.fd.fd);
    w.str(f.fd.path);
    w.str(f.plugin);
    w.bytes(f.payload);
  }
  return w.take();
}

TaskImage decode_task(std::span<const std::uint8_t> data, const std::string& file) {
  ByteReader r(data);
  expect_magic(r, kPagesMagic, file);
  if (auto v = r.u32(); v != kImageFormatVersion) {
    throw Error(ErrorKind::VersionUnsupported, file + " has format version " + std::to_string(v), file);
  }
  TaskImage t;
  t.pid = r.i32();
  t.ppid = r.i32();
  for (auto n = r.count(4); n > 0; --n) t.thread_ids.push_back(r.i32());
  t.capabilities = r.u32();
  t.workload.seed = r.u64();
  t.workload.cpu_writes_per_step = r.u32();
  t.workload.device_writes_per_step = r.u32();
  t.steps = r.u64();
  for (auto n = r.count(17); n > 0; --n) {
    VmaImage v;
    v.vma.start = r.u64();
    v.vma.length = r.u64();
    auto tag = r.u8();
    if (tag == 1) {
      DeviceFileBacking d;
      d.device_name = r.str();
      d.mmap_offset = r.u64();
      v.vma.backing = d;
    } else if (tag != 0) {
      throw Error(ErrorKind::ImageCorrupt, "bad mapping kind in " + file, file);
    }
    v.vma.contents = r.bytes();
    v.handler = r.str();
    t.vmas.push_back(std::move(v));
  }
  for (auto n = r.count(4); n > 0; --n) {
    FdImage f;
    f.fd.fd = r.i32();
    f.fd.path = r.str();
    f.plugin = r.str();
    f.payload = r.bytes();
    t.fds.push_back(std::move(f));
  }
  r.expect_end();
  return t;
}

struct EncodedSet {
  std::vector<std::pair<FileEntry, Bytes>> files;  // inventory excluded
};

EncodedSet encode_files(const Snapshot& s) {
  bool any_device = false;
  for (const auto& [_, images] : s.device_images) any_device = any_device || !images.empty();
  if (any_device != s.inventory.has_gpu_state) {
    throw Error(ErrorKind::InvalidState, "inventory GPU flag disagrees with the device images present");
  }
  EncodedSet out;
  std::set<std::string> names{kInventoryFile, kStatsFile};
  auto add = [&](FileEntry e, Bytes b) {
    if (e.role != Role::Stats && !names.insert(e.name).second) {
      throw Error(ErrorKind::InvalidState, "duplicate image file " + e.name, e.name);
    }
    e.size = b.size();
    e.crc = crc32(b);
    out.files.emplace_back(std::move(e), std::move(b));
  };
  for (const auto& t : s.tasks) add(FileEntry{pages_name(t.pid), Role::Pages, {}, t.pid, 0, 0}, encode_task(t));
  for (const auto& [plugin, images] : s.device_images) {
    if (plugin.empty() || plugin.find('/') != std::string::npos) throw Error(ErrorKind::InvalidState, "bad plugin id");
    for (const auto& [pid, b] : images) add(FileEntry{device_name(plugin, pid), Role::Device, plugin, pid, 0, 0}, b);
  }
  for (const auto& [name, b] : s.extra_files) {
    if (name.empty() || name.find('/') != std::string::npos || name[0] == '.') {
      throw Error(ErrorKind::InvalidState, "bad extra file name " + name, name);
    }
    add(FileEntry{name, Role::Extra, {}, 0, 0, 0}, b);
  }
  add(FileEntry{kStatsFile, Role::Stats, {}, 0, 0, 0}, encode_stats(s.stats));
  return out;
}

Bytes encode_inventory(const Inventory& inv, const EncodedSet& set) {
  ByteWriter w;
  w.raw(kInventoryMagic);
  w.u32(inv.format_version);
  w.i64(inv.created_at);
  w.u32(inv.process_count);
  w.boolean(inv.has_gpu_state);
  w.u64(inv.plugin_ids.size());
  for (const auto& p : inv.plugin_ids) w.str(p);
  w.u64(inv.pids.size());
  for (auto p : inv.pids) w.i32(p);
  w.u64(set.files.size());
  for (const auto& [e, _] : set.files) {
    w.str(e.name);
    w.u8(static_cast<std::uint8_t>(e.role));
    w.str(e.plugin);
    w.i32(e.pid);
    w.u64(e.size);
    w.u32(e.crc);
  }
  w.u32(crc32(w.data()));
  return w.take();
}

Bytes read_file(const fs::path& p, const std::string& name) {
  std::error_code ec;
  if (!fs::is_regular_file(p, ec)) throw Error(ErrorKind::MissingFile, "image file " + name + " is missing", name);
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + p.string(), name);
  Bytes b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::IoError, "cannot read " + p.string(), name);
  return b;
}

void write_file(const fs::path& p, const Bytes& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  out.close();
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + p.string(), p.filename().string());
}

}  // namespace

std::vector<std::string> image_file_names(const Snapshot& snapshot) {
  std::vector<std::string> out;
  for (const auto& [e, _] : encode_files(snapshot).files) out.push_back(e.name);
  out.emplace_back(kInventoryFile);
  return out;
}

std::map<std::string, std::uint64_t> encoded_sizes(const Snapshot& snapshot) {
  auto set = encode_files(snapshot);
  std::map<std::string, std::uint64_t> out;
  for (const auto& [e, b] : set.files) out[e.name] = b.size();
  out[kInventoryFile] = encode_inventory(snapshot.inventory, set).size();
  return out;
}

fs::path write_image_set(const Snapshot& snapshot, const fs::path& dir, const WriteOptions& options) {
  auto set = encode_files(snapshot);
  auto inventory = encode_inventory(snapshot.inventory, set);
  std::error_code ec;
  if (fs::exists(dir, ec)) throw Error(ErrorKind::IoError, "image directory " + dir.string() + " already exists");
  auto parent = dir.parent_path().empty() ? fs::path(".") : dir.parent_path();
  std::random_device rd;
  std::ostringstream suffix;
  suffix << std::hex << rd();
  auto tmp = parent / ("." + dir.filename().string() + ".tmp-" + suffix.str());
  try {
    fs::create_directories(parent);
    fs::create_directory(tmp);
    auto put = [&](const std::string& name, const Bytes& b) {
      if (options.before_file) options.before_file(name);
      write_file(tmp / name, b);
    };
    for (const auto& [e, b] : set.files) put(e.name, b);
    put(kInventoryFile, inventory);
    fs::rename(tmp, dir);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(tmp, ec);
    throw Error(ErrorKind::IoError, e.what());
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
  return dir;
}

Snapshot read_image_set(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw Error(ErrorKind::MissingFile, "no image directory " + dir.string(), dir.string());
  auto inv_bytes = read_file(dir / kInventoryFile, kInventoryFile);
  if (inv_bytes.size() < kInventoryMagic.size() + 8) {
    throw Error(ErrorKind::ChecksumMismatch, "inventory is truncated", kInventoryFile);
  }
  auto body = std::span<const std::uint8_t>(inv_bytes).first(inv_bytes.size() - 4);
  ByteReader trailer(std::span<const std::uint8_t>(inv_bytes).last(4));
  if (crc32(body) != trailer.u32()) throw Error(ErrorKind::ChecksumMismatch, "checksum mismatch in inventory", kInventoryFile);

  Snapshot s;
  ByteReader r(body);
  expect_magic(r, kInventoryMagic, kInventoryFile);
  s.inventory.format_version = r.u32();
  if (s.inventory.format_version != kImageFormatVersion) {
    throw Error(ErrorKind::VersionUnsupported,
                "image format version " + std::to_string(s.inventory.format_version) + " is not supported (expected " +
                    std::to_string(kImageFormatVersion) + ")",
                kInventoryFile);
  }
  s.inventory.created_at = r.i64();
  s.inventory.process_count = r.u32();
  s.inventory.has_gpu_state = r.boolean();
  for (auto n = r.count(8); n > 0; --n) s.inventory.plugin_ids.push_back(r.str());
  for (auto n = r.count(4); n > 0; --n) s.inventory.pids.push_back(r.i32());
  std::vector<FileEntry> entries;
  for (auto n = r.count(25); n > 0; --n) {
    FileEntry e;
    e.name = r.str();
    e.role = static_cast<Role>(r.u8());
    e.plugin = r.str();
    e.pid = r.i32();
    e.size = r.u64();
    e.crc = r.u32();
    if (e.name.empty() || e.name.find('/') != std::string::npos || e.name == kInventoryFile) {
      throw Error(ErrorKind::ImageCorrupt, "bad file name in inventory", kInventoryFile);
    }
    entries.push_back(std::move(e));
  }
  r.expect_end();

  bool saw_stats = false;
  for (const auto& e : entries) {
    auto b = read_file(dir / e.name, e.name);
    if (b.size() != e.size || crc32(b) != e.crc) {
      throw Error(ErrorKind::ChecksumMismatch, "checksum mismatch in " + e.name, e.name);
    }
    switch (e.role) {
      case Role::Pages: s.tasks.push_back(decode_task(b, e.name)); break;
      case Role::Device: s.device_images[e.plugin][e.pid] = std::move(b); break;
      case Role::Extra: s.extra_files[e.name] = std::move(b); break;
      case Role::Stats:
        s.stats = decode_stats(b);
        saw_stats = true;
        break;
      default: throw Error(ErrorKind::ImageCorrupt, "unknown file role for " + e.name, e.name);
    }
  }
  if (!saw_stats) throw Error(ErrorKind::MissingFile, "image set has no stats record", kStatsFile);
  return s;
}

Breakdown compute_breakdown(const CrStats& stats) {
  auto total = stats.gpu_bytes + stats.cpu_bytes;
  if (total == 0) return {};
  Breakdown b;
  b.gpu_share = static_cast<double>(stats.gpu_bytes) / static_cast<double>(total);
  b.cpu_share = 1.0 - b.gpu_share;
  return b;
}

Breakdown compute_breakdown(const Snapshot& snapshot) { return compute_breakdown(snapshot.stats); }

Bytes encode_stats(const CrStats& s) {
  ByteWriter w;
  w.raw(kStatsMagic);
  w.u32(kStatsFormatVersion);
  for (auto d : {s.freezing_time, s.frozen_time, s.mem_dump_time, s.mem_write_time, s.checkpoint_total, s.restore_total}) {
    w.i64(d.count());
  }
  w.u64(s.pages_scanned);
  w.u64(s.gpu_bytes);
  w.u64(s.cpu_bytes);
  return w.take();
}

CrStats decode_stats(std::span<const std::uint8_t> data) {
  ByteReader r(data);
  expect_magic(r, kStatsMagic, kStatsFile);
  if (auto v = r.u32(); v != kStatsFormatVersion) {
    throw Error(ErrorKind::VersionUnsupported, "stats version " + std::to_string(v) + " is not supported", kStatsFile);
  }
  CrStats s;
  for (auto* d : {&s.freezing_time, &s.frozen_time, &s.mem_dump_time, &s.mem_write_time, &s.checkpoint_total, &s.restore_total}) {
    *d = SimDuration(r.i64());
  }
  s.pages_scanned = r.u64();
  s.gpu_bytes = r.u64();
  s.cpu_bytes = r.u64();
  r.expect_end();
  return s;
}

std::string format_stats(const CrStats& s, StatsFormat format) {
  auto b = compute_breakdown(s);
  if (format == StatsFormat::Json) {
    nlohmann::json j{{"freezing_time_us", s.freezing_time.count()}, {"frozen_time_us", s.frozen_time.count()},
                     {"mem_dump_time_us", s.mem_dump_time.count()}, {"mem_write_time_us", s.mem_write_time.count()},
                     {"checkpoint_total_us", s.checkpoint_total.count()}, {"restore_total_us", s.restore_total.count()},
                     {"pages_scanned", s.pages_scanned}, {"gpu_bytes", s.gpu_bytes}, {"cpu_bytes", s.cpu_bytes},
                     {"gpu_share", b.gpu_share}, {"cpu_share", b.cpu_share}, {"stats_version", kStatsFormatVersion}};
    return j.dump(2) + "\n";
  }
  std::ostringstream os;
  auto row = [&](const char* k, auto v, const char* unit) { os << std::left << std::setw(18) << k << v << unit << "\n"; };
  row("freezing time", s.freezing_time.count(), " us");
  row("frozen time", s.frozen_time.count(), " us");
  row("mem dump time", s.mem_dump_time.count(), " us");
  row("mem write time", s.mem_write_time.count(), " us");
  row("checkpoint total", s.checkpoint_total.count(), " us");
  row("restore total", s.restore_total.count(), " us");
  row("pages scanned", s.pages_scanned, "");
  row("gpu bytes", s.gpu_bytes, "");
  row("cpu bytes", s.cpu_bytes, "");
  std::ostringstream share;
  share << std::fixed << std::setprecision(4) << b.gpu_share;
  row("gpu share", share.str(), "");
  return os.str();
}

// --- KFD bundle --------------------------------------------------------------

Bytes encode_kfd_bundle(const KfdCheckpointBundle& b) {
  ByteWriter w;
  w.raw(kBundleMagic);
  w.u32(kBundleVersion);
  w.i32(b.pid);
  w.u64(b.topology.devices.size());
  for (const auto& d : b.topology.devices) {
    w.u32(d.gpuid);
    w.str(d.props.instruction_set);
    w.u32(d.props.compute_units);
    w.u64(d.props.vram);
    w.boolean(d.props.host_vram_accessible);
    w.u64(d.links.size());
    for (auto l : d.links) w.u32(l);
    w.str(d.render_node);
  }
  w.u64(b.bos.size());
  for (const auto& bo : b.bos) {
    w.u64(bo.handle);
    w.u8(static_cast<std::uint8_t>(bo.kind));
    w.u32(bo.gpuid);
    w.u64(bo.size);
    w.u64(bo.virtual_addr);
    w.u64(bo.mmap_offset);
    w.bytes(bo.contents);
  }
  w.u64(b.queues.size());
  for (const auto& q : b.queues) {
    w.u32(q.queue_id);
    w.u8(static_cast<std::uint8_t>(q.kind));
    w.u32(q.gpuid);
    w.bytes(q.control_stack);
    w.bytes(q.mqd);
    w.u64(q.read_ptr);
    w.u64(q.write_ptr);
    w.u64(q.doorbell_offset);
    w.u64(q.aql_ptr);
    w.u64(q.user_bos.ring_buffer);
    w.u64(q.user_bos.aql_queue);
    w.u64(q.user_bos.eop_buffer);
    w.u64(q.user_bos.ctx_save_area);
    w.boolean(q.evicted);
  }
  w.u64(b.events.size());
  for (const auto& e : b.events) {
    w.u32(e.event_id);
    w.boolean(e.signaled);
  }
  w.u64(b.next_handle);
  return w.take();
}

KfdCheckpointBundle decode_kfd_bundle(std::span<const std::uint8_t> data) {
  ByteReader r(data);
  expect_magic(r, kBundleMagic, "kfd bundle");
  if (auto v = r.u32(); v != kBundleVersion) {
    throw Error(ErrorKind::VersionUnsupported, "KFD bundle version " + std::to_string(v) + " is not supported");
  }
  KfdCheckpointBundle b;
  b.pid = r.i32();
  for (auto n = r.count(29); n > 0; --n) {
    KfdDevice d;
    d.gpuid = r.u32();
    d.props.instruction_set = r.str();
    d.props.compute_units = r.u32();
    d.props.vram = r.u64();
    d.props.host_vram_accessible = r.boolean();
    for (auto m = r.count(4); m > 0; --m) d.links.push_back(r.u32());
    d.render_node = r.str();
    b.topology.devices.push_back(std::move(d));
  }
  for (auto n = r.count(45); n > 0; --n) {
    BufferObject bo;
    bo.handle = r.u64();
    auto kind = r.u8();
    if (kind > static_cast<std::uint8_t>(BoKind::Mmio)) throw Error(ErrorKind::ImageCorrupt, "bad buffer kind");
    bo.kind = static_cast<BoKind>(kind);
    bo.gpuid = r.u32();
    bo.size = r.u64();
    bo.virtual_addr = r.u64();
    bo.mmap_offset = r.u64();
    bo.contents = r.bytes();
    b.bos.push_back(std::move(bo));
  }
  for (auto n = r.count(90); n > 0; --n) {
    QueueState q;
    q.queue_id = r.u32();
    auto kind = r.u8();
    if (kind > static_cast<std::uint8_t>(QueueKind::Dma)) throw Error(ErrorKind::ImageCorrupt, "bad queue kind");
    q.kind = static_cast<QueueKind>(kind);
    q.gpuid = r.u32();
    q.control_stack = r.bytes();
    q.mqd = r.bytes();
    q.read_ptr = r.u64();
    q.write_ptr = r.u64();
    q.doorbell_offset = r.u64();
    q.aql_ptr = r.u64();
    q.user_bos.ring_buffer = r.u64();
    q.user_bos.aql_queue = r.u64();
    q.user_bos.eop_buffer = r.u64();
    q.user_bos.ctx_save_area = r.u64();
    q.evicted = r.boolean();
    b.queues.push_back(std::move(q));
  }
  for (auto n = r.count(5); n > 0; --n) {
    KfdEvent e;
    e.event_id = r.u32();
    e.signaled = r.boolean();
    b.events.push_back(e);
  }
  b.next_handle = r.u64();
  r.expect_end();
  return b;
}

}  // namespace unicr
