// Copyright 2026 The BindCal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Little-endian byte buffers shared by every container file, plus SHA-256.

#ifndef BINDCAL_BINIO_HPP_
#define BINDCAL_BINIO_HPP_

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bindcal/error.hpp"

namespace bindcal {

using Bytes = std::vector<std::uint8_t>;

// Container magic; byte 6 of every file is the container kind.
inline constexpr std::array<std::uint8_t, 5> kMagic = {'B', 'C', 'A', 'L', '1'};
inline constexpr std::uint8_t kKindDataset = 0x01;
inline constexpr std::uint8_t kKindPairs = 0x02;
inline constexpr std::uint8_t kKindCheckpoint = 0x03;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void header(std::uint8_t kind) {
    bytes(kMagic);
    u8(kind);
  }

  const Bytes &buffer() const noexcept { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() {
    const std::uint32_t n = u32();
    auto b = bytes(n);
    return {b.begin(), b.end()};
  }

  // Checks magic and returns the kind byte.
  std::uint8_t header() {
    if (data_.size() < kMagic.size() ||
        std::memcmp(data_.data(), kMagic.data(), kMagic.size()) != 0) {
      throw Error(ErrorCode::kBadMagic, "expected BCAL1 container");
    }
    pos_ = kMagic.size();
    return u8();
  }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  void expect_end() const {
    if (remaining() != 0) {
      throw Error(ErrorCode::kTrailingBytes,
                  std::to_string(remaining()) + " unexpected bytes after payload");
    }
  }

  // Throws kTruncated unless `n` more bytes remain. Used to validate payload
  // sizes announced by headers before allocating.
  void need(std::size_t n) const {
    if (remaining() < n) {
      throw Error(ErrorCode::kTruncated, "needed " + std::to_string(n) + " bytes, " +
                                             std::to_string(remaining()) + " left");
    }
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path &path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char *>(data.data()),
            static_cast<std::streamsize>(data.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

inline void write_text(const std::filesystem::path &path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t *>(text.data()), text.size()});
}

inline std::string read_text(const std::filesystem::path &path) {
  const Bytes b = read_file(path);
  return {b.begin(), b.end()};
}

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(std::span<const std::uint8_t> data) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size()) {
    throw Error(ErrorCode::kIo, "sha256 failed");
  }
  return out;
}

inline Digest sha256(std::string_view s) {
  return sha256({reinterpret_cast<const std::uint8_t *>(s.data()), s.size()});
}

inline std::string to_hex(std::span<const std::uint8_t> d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(d.size() * 2);
  for (std::uint8_t b : d) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xF]);
  }
  return s;
}

}  // namespace bindcal

#endif  // BINDCAL_BINIO_HPP_
