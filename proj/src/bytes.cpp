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

#include "unicr/bytes.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>

#include "unicr/error.hpp"

namespace unicr {

void ByteWriter::put_le(std::uint64_t v, int width) {
  for (int i = 0; i < width; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::str(std::string_view s) {
  u64(s.size());
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void ByteWriter::bytes(std::span<const std::uint8_t> b) {
  u64(b.size());
  raw(b);
}

void ByteWriter::raw(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

void ByteReader::need(std::size_t n) const {
  if (n > remaining()) {
    throw Error(ErrorKind::ImageCorrupt, "truncated record: need " + std::to_string(n) +
                                             " bytes at offset " + std::to_string(pos_));
  }
}

std::uint64_t ByteReader::get_le(int width) {
  need(static_cast<std::size_t>(width));
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += static_cast<std::size_t>(width);
  return v;
}

std::uint8_t ByteReader::u8() {
  need(1);
  return data_[pos_++];
}

bool ByteReader::boolean() {
  auto v = u8();
  if (v > 1) throw Error(ErrorKind::ImageCorrupt, "invalid boolean byte");
  return v == 1;
}

std::string ByteReader::str() {
  auto n = u64();
  auto s = raw(n);
  return {s.begin(), s.end()};
}

Bytes ByteReader::bytes() {
  auto n = u64();
  auto s = raw(n);
  return {s.begin(), s.end()};
}

std::span<const std::uint8_t> ByteReader::raw(std::size_t n) {
  need(n);
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint64_t ByteReader::count(std::uint64_t min_element_size) {
  auto n = u64();
  if (min_element_size != 0 && n > remaining() / min_element_size) {
    throw Error(ErrorKind::ImageCorrupt, "element count " + std::to_string(n) + " exceeds record size");
  }
  return n;
}

void ByteReader::expect_end() const {
  if (!at_end()) {
    throw Error(ErrorKind::ImageCorrupt, std::to_string(remaining()) + " trailing bytes in record");
  }
}

std::uint32_t crc32(std::span<const std::uint8_t> data) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  std::size_t off = 0;
  while (off < data.size()) {
    auto n = static_cast<uInt>(std::min<std::size_t>(data.size() - off, 1u << 30));
    crc = ::crc32(crc, data.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

Hasher& Hasher::add(std::span<const std::uint8_t> data) {
  add_u64(data.size());
  for (auto b : data) {
    state_ ^= b;
    state_ *= 0x100000001b3ULL;
  }
  return *this;
}

Hasher& Hasher::add(std::string_view s) {
  return add(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

Hasher& Hasher::add_u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    state_ ^= static_cast<std::uint8_t>(v >> (8 * i));
    state_ *= 0x100000001b3ULL;
  }
  return *this;
}

std::uint64_t fingerprint(std::span<const std::uint8_t> data) { return Hasher{}.add(data).digest(); }

std::string to_hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace unicr
