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
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace unicr {

using Bytes = std::vector<std::uint8_t>;

// Little-endian, fixed-width encoder. Variable-length fields are written as a
// u64 length followed by the payload.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void i32(std::int32_t v) { put_le(static_cast<std::uint32_t>(v), 4); }
  void i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v), 8); }
  void boolean(bool v) { u8(v ? 1 : 0); }
  void str(std::string_view s);
  void bytes(std::span<const std::uint8_t> b);
  void raw(std::span<const std::uint8_t> b);

  const Bytes& data() const noexcept { return buf_; }
  Bytes take() noexcept { return std::move(buf_); }
  std::size_t size() const noexcept { return buf_.size(); }

 private:
  void put_le(std::uint64_t v, int width);
  Bytes buf_;
};

// Counterpart of ByteWriter. Reading past the end throws ImageCorrupt.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8();
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  bool boolean();
  std::string str();
  Bytes bytes();
  std::span<const std::uint8_t> raw(std::size_t n);

  // Guards element counts read from untrusted input.
  std::uint64_t count(std::uint64_t min_element_size = 1);

  bool at_end() const noexcept { return pos_ == data_.size(); }
  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  void expect_end() const;

 private:
  std::uint64_t get_le(int width);
  void need(std::size_t n) const;
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32(std::span<const std::uint8_t> data);

// 64-bit FNV-1a accumulator for state fingerprints. Not a checksum for files;
// images use crc32.
class Hasher {
 public:
  Hasher& add(std::span<const std::uint8_t> data);
  Hasher& add(std::string_view s);
  Hasher& add_u64(std::uint64_t v);
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fingerprint(std::span<const std::uint8_t> data);

std::string to_hex(std::uint64_t v);

}  // namespace unicr
