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
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "unicr/engine.hpp"

namespace unicr::test {

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

struct RandomCase {
  MachineSpec machine;
  TreeSpec tree;
  std::uint32_t warmup_steps = 0;
};

// 1-8 processes; 0-4 devices of each driver family; random buffers, queues,
// events, allocations and finite callbacks.
RandomCase random_case(std::uint64_t seed);

// Empty when the trace respects the required order, otherwise what broke.
std::string check_dump_order(const HookTrace& trace);
std::string check_restore_order(const HookTrace& trace);

// Independent memory model: anonymous VMA contents rebuilt from the initial
// layout plus recorded CPU writes.
class MemoryReplay {
 public:
  explicit MemoryReplay(const SimTask& initial);
  void apply(const MutationRecord& r);
  bool matches(const SimTask& t) const;

 private:
  std::vector<Vma> vmas_;
};

// Raw per-task equality of host state, ignoring nothing.
bool same_tasks(const SimProcessTree& a, const SimProcessTree& b, std::string* why = nullptr);

// A CUDA-only machine and tree: one process per device, each with `alloc`
// bytes on its device and `host` bytes of anonymous memory.
RandomCase replicated_case(std::uint32_t gpus, std::uint64_t alloc, std::uint64_t host);

std::filesystem::path scenario_path(const std::string& name);

}  // namespace unicr::test

namespace unicr {
inline void PrintTo(ErrorKind k, std::ostream* os) { *os << to_string(k); }
}  // namespace unicr

namespace unicr::test {

// Kind of the error `f` throws, or nullopt when it returns normally.
template <class F>
std::optional<ErrorKind> error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

}  // namespace unicr::test
