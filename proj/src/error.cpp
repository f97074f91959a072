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

#include "unicr/error.hpp"

namespace unicr {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::SpecError: return "SpecError";
    case ErrorKind::NoSuchTask: return "NoSuchTask";
    case ErrorKind::InvalidState: return "InvalidState";
    case ErrorKind::TaskNotRunning: return "TaskNotRunning";
    case ErrorKind::TimeoutExpired: return "TimeoutExpired";
    case ErrorKind::NotLocked: return "NotLocked";
    case ErrorKind::DeviceLocked: return "DeviceLocked";
    case ErrorKind::TopologyMismatch: return "TopologyMismatch";
    case ErrorKind::MissingBlob: return "MissingBlob";
    case ErrorKind::PermissionDenied: return "PermissionDenied";
    case ErrorKind::NoKfdFd: return "NoKfdFd";
    case ErrorKind::NotPaused: return "NotPaused";
    case ErrorKind::NotRestored: return "NotRestored";
    case ErrorKind::TopologyIncompatible: return "TopologyIncompatible";
    case ErrorKind::BadGpuidMap: return "BadGpuidMap";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorKind::VersionUnsupported: return "VersionUnsupported";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::ImageCorrupt: return "ImageCorrupt";
    case ErrorKind::LockTimeout: return "LockTimeout";
    case ErrorKind::PluginError: return "PluginError";
    case ErrorKind::DuplicatePlugin: return "DuplicatePlugin";
    case ErrorKind::UnknownDevice: return "UnknownDevice";
    case ErrorKind::Unsupported: return "Unsupported";
    case ErrorKind::MissingLayer: return "MissingLayer";
    case ErrorKind::NonDeterministicDivergence: return "NonDeterministicDivergence";
    case ErrorKind::UsageError: return "UsageError";
  }
  return "Unknown";
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::UsageError: return 2;
    case ErrorKind::SpecError: return 3;
    case ErrorKind::LockTimeout:
    case ErrorKind::TimeoutExpired: return 10;
    case ErrorKind::TopologyMismatch:
    case ErrorKind::TopologyIncompatible: return 11;
    case ErrorKind::ImageCorrupt:
    case ErrorKind::ChecksumMismatch:
    case ErrorKind::MissingFile: return 12;
    case ErrorKind::VersionUnsupported: return 13;
    case ErrorKind::PluginError:
    case ErrorKind::DuplicatePlugin: return 14;
    case ErrorKind::UnknownDevice: return 15;
    case ErrorKind::PermissionDenied: return 16;
    case ErrorKind::IoError: return 17;
    case ErrorKind::MissingLayer: return 18;
    case ErrorKind::Unsupported: return 19;
    case ErrorKind::NonDeterministicDivergence: return 20;
    default: return 30;
  }
}

Error::Error(ErrorKind kind, const std::string& message, std::string subject)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message),
      kind_(kind),
      subject_(std::move(subject)) {}

}  // namespace unicr
