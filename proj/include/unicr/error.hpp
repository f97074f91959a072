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

#include <stdexcept>
#include <string>
#include <string_view>

namespace unicr {

enum class ErrorKind {
  SpecError,
  NoSuchTask,
  InvalidState,
  TaskNotRunning,
  TimeoutExpired,
  NotLocked,
  DeviceLocked,
  TopologyMismatch,
  MissingBlob,
  PermissionDenied,
  NoKfdFd,
  NotPaused,
  NotRestored,
  TopologyIncompatible,
  BadGpuidMap,
  IoError,
  ChecksumMismatch,
  VersionUnsupported,
  MissingFile,
  ImageCorrupt,
  LockTimeout,
  PluginError,
  DuplicatePlugin,
  UnknownDevice,
  Unsupported,
  MissingLayer,
  NonDeterministicDivergence,
  UsageError,
};

std::string_view to_string(ErrorKind kind);

// Process exit code reported by the CLI for an error class. Stable across
// releases; 0 and 1 are reserved for success and unexpected failures.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::string subject = {});

  ErrorKind kind() const noexcept { return kind_; }
  // The file, plugin or device the error is about, when there is one.
  const std::string& subject() const noexcept { return subject_; }

 private:
  ErrorKind kind_;
  std::string subject_;
};

}  // namespace unicr
