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

// Tensor files:
//
//   ANTV1\n
//   {"dtype":"f32","layout":"row-major","positions":[...],"role":"K","shape":[h,n,d]}\n
//   <product(shape) little-endian f32 values>
//
// Shape is [n, d] for a single head or [heads, n, d].

#ifndef ANTKV_TENSOR_FILE_HPP
#define ANTKV_TENSOR_FILE_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antkv/binary_io.hpp"
#include "antkv/matrix.hpp"

namespace antkv {

inline constexpr std::string_view kTensorMagic = "ANTV1";

struct TensorFile {
  std::vector<std::size_t> shape;
  std::string role;  // Q, K, V or grad
  std::optional<std::vector<std::int64_t>> positions;
  std::vector<float> data;

  [[nodiscard]] std::size_t heads() const { return shape.size() == 3 ? shape[0] : 1; }
  [[nodiscard]] std::size_t tokens() const { return shape.size() == 3 ? shape[1] : shape.at(0); }
  [[nodiscard]] std::size_t width() const { return shape.back(); }

  [[nodiscard]] HeadTensor head(std::size_t h) const {
    const std::size_t n = tokens();
    const std::size_t d = width();
    detail::require(h < heads(), "TensorFile: head index out of range");
    const auto first = data.begin() + static_cast<std::ptrdiff_t>(h * n * d);
    return HeadTensor(n, d, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(n * d)));
  }

  /// Stored positions, or 0..n-1 when the file carries none.
  [[nodiscard]] std::vector<std::int64_t> token_positions() const {
    if (positions) return *positions;
    std::vector<std::int64_t> p(tokens());
    std::iota(p.begin(), p.end(), std::int64_t{0});
    return p;
  }

  static TensorFile from_heads(const std::vector<HeadTensor>& heads, std::string role,
                               std::optional<std::vector<std::int64_t>> positions = std::nullopt) {
    detail::require(!heads.empty(), "TensorFile: no heads");
    TensorFile f;
    const std::size_t n = heads.front().rows();
    const std::size_t d = heads.front().cols();
    f.shape = heads.size() == 1 ? std::vector<std::size_t>{n, d}
                                : std::vector<std::size_t>{heads.size(), n, d};
    f.role = std::move(role);
    f.positions = std::move(positions);
    for (const auto& h : heads) {
      detail::require(h.rows() == n && h.cols() == d, "TensorFile: heads differ in shape");
      f.data.insert(f.data.end(), h.values().begin(), h.values().end());
    }
    return f;
  }

  bool operator==(const TensorFile&) const = default;
};

[[nodiscard]] inline io::Bytes encode_tensor_file(const TensorFile& f) {
  detail::require(f.shape.size() == 2 || f.shape.size() == 3, "TensorFile: shape must be 2-D or 3-D");
  const std::size_t count =
      std::accumulate(f.shape.begin(), f.shape.end(), std::size_t{1}, std::multiplies<>());
  detail::require(count == f.data.size(), "TensorFile: payload does not match shape");
  nlohmann::json header = {{"dtype", "f32"}, {"shape", f.shape}, {"layout", "row-major"}, {"role", f.role}};
  if (f.positions) header["positions"] = *f.positions;
  const std::string text = std::string(kTensorMagic) + "\n" + header.dump() + "\n";
  io::Bytes out(text.begin(), text.end());
  io::append_f32_le(out, f.data);
  return out;
}

[[nodiscard]] inline TensorFile decode_tensor_file(std::span<const std::uint8_t> bytes) {
  const std::string magic = std::string(kTensorMagic) + "\n";
  if (bytes.size() < magic.size() || !std::equal(magic.begin(), magic.end(), bytes.begin()))
    throw FormatError("tensor file: missing ANTV1 magic");
  const auto nl = std::find(bytes.begin() + static_cast<std::ptrdiff_t>(magic.size()), bytes.end(),
                            std::uint8_t{'\n'});
  if (nl == bytes.end()) throw FormatError("tensor file: header line is not terminated");
  const std::string header_text(bytes.begin() + static_cast<std::ptrdiff_t>(magic.size()), nl);
  TensorFile f;
  try {
    const auto h = nlohmann::json::parse(header_text);
    if (h.at("dtype").get<std::string>() != "f32") throw FormatError("tensor file: dtype must be f32");
    if (h.at("layout").get<std::string>() != "row-major")
      throw FormatError("tensor file: layout must be row-major");
    f.shape = h.at("shape").get<std::vector<std::size_t>>();
    f.role = h.at("role").get<std::string>();
    if (h.contains("positions") && !h.at("positions").is_null())
      f.positions = h.at("positions").get<std::vector<std::int64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tensor file header: ") + e.what());
  }
  if (f.shape.size() != 2 && f.shape.size() != 3) throw FormatError("tensor file: shape must be 2-D or 3-D");
  const std::size_t count =
      std::accumulate(f.shape.begin(), f.shape.end(), std::size_t{1}, std::multiplies<>());
  const std::size_t offset = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  if (bytes.size() - offset != count * 4)
    throw FormatError("tensor file: payload is " + std::to_string(bytes.size() - offset) +
                      " bytes, shape needs " + std::to_string(count * 4));
  if (f.positions && f.positions->size() != f.tokens())
    throw FormatError("tensor file: positions length does not match token count");
  f.data = io::read_f32_le(bytes, offset, count);
  return f;
}

inline void write_tensor_file(const std::filesystem::path& path, const TensorFile& f) {
  io::write_file(path, encode_tensor_file(f));
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
  return decode_tensor_file(io::read_file(path));
}

}  // namespace antkv

#endif  // ANTKV_TENSOR_FILE_HPP
