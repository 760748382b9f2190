// Copyright (c) 2026 The antkv Authors
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

#ifndef ANTKV_BINARY_IO_HPP
#define ANTKV_BINARY_IO_HPP

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "antkv/error.hpp"

namespace antkv::io {

using Bytes = std::vector<std::uint8_t>;

inline void append_f32_le(Bytes& out, float x) {
  const auto bits = std::bit_cast<std::uint32_t>(x);
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(bits >> s));
}

inline void append_f32_le(Bytes& out, std::span<const float> xs) {
  out.reserve(out.size() + xs.size() * 4);
  for (const float x : xs) append_f32_le(out, x);
}

inline float read_f32_le(std::span<const std::uint8_t> in, std::size_t offset) {
  if (offset + 4 > in.size()) throw FormatError("truncated f32 payload");
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(in[offset + b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

inline std::vector<float> read_f32_le(std::span<const std::uint8_t> in, std::size_t offset,
                                      std::size_t count) {
  if (offset + count * 4 > in.size()) throw FormatError("truncated f32 payload");
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = read_f32_le(in, offset + 4 * i);
  return out;
}

/// MSB-first bit stream.
class BitWriter {
 public:
  void write(std::uint32_t value, std::uint32_t bits) {
    for (std::uint32_t b = bits; b-- > 0;) {
      if (used_ == 0) bytes_.push_back(0);
      if ((value >> b) & 1U) bytes_.back() |= static_cast<std::uint8_t>(0x80U >> used_);
      used_ = (used_ + 1) % 8;
    }
  }
  void pad_to_byte() noexcept { used_ = 0; }
  [[nodiscard]] const Bytes& bytes() const noexcept { return bytes_; }
  Bytes take() { return std::move(bytes_); }

 private:
  Bytes bytes_;
  std::uint32_t used_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint32_t read(std::uint32_t bits) {
    std::uint32_t v = 0;
    for (std::uint32_t b = 0; b < bits; ++b) {
      const std::size_t byte = pos_ / 8;
      if (byte >= in_.size()) throw FormatError("truncated code stream");
      v = (v << 1) | ((in_[byte] >> (7 - pos_ % 8)) & 1U);
      ++pos_;
    }
    return v;
  }
  void align_to_byte() noexcept { pos_ = (pos_ + 7) / 8 * 8; }
  [[nodiscard]] std::size_t byte_position() const noexcept { return (pos_ + 7) / 8; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("short write to " + path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

}  // namespace antkv::io

#endif  // ANTKV_BINARY_IO_HPP
