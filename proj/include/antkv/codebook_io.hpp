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

// Codebook files: a JSON descriptor
//   {format_version, d_sub, m, groups, seed, centroids_file}
// next to a raw little-endian f32 table of m * d_sub values.
// A KvCodebooks set adds an index file listing the key and value descriptors.

#ifndef ANTKV_CODEBOOK_IO_HPP
#define ANTKV_CODEBOOK_IO_HPP

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "antkv/binary_io.hpp"
#include "antkv/vector_quant.hpp"

namespace antkv {

inline constexpr int kCodebookFormatVersion = 1;

/// Writes `<stem>.json` and `<stem>.bin`; returns the descriptor path.
inline std::filesystem::path save_codebook(const Codebook& book, const std::filesystem::path& stem) {
  book.validate();
  const std::filesystem::path json_path = stem.string() + ".json";
  const std::filesystem::path bin_path = stem.string() + ".bin";
  io::Bytes payload;
  io::append_f32_le(payload, book.centroids.values());
  io::write_file(bin_path, payload);
  const nlohmann::json doc = {
      {"format_version", kCodebookFormatVersion},
      {"d_sub", book.config.d_sub},
      {"m", book.config.m},
      {"groups", book.groups},
      {"seed", book.seed},
      {"centroids_file", bin_path.filename().string()},
  };
  io::write_text(json_path, doc.dump(2) + "\n");
  return json_path;
}

inline Codebook load_codebook(const std::filesystem::path& json_path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_text(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("codebook " + json_path.string() + ": " + e.what());
  }
  try {
    if (doc.at("format_version").get<int>() != kCodebookFormatVersion)
      throw FormatError("codebook " + json_path.string() + ": unsupported format_version");
    Codebook book;
    book.config = {doc.at("d_sub").get<std::size_t>(), doc.at("m").get<std::size_t>()};
    book.groups = doc.at("groups").get<std::size_t>();
    book.seed = doc.at("seed").get<std::uint64_t>();
    const auto bin = json_path.parent_path() / doc.at("centroids_file").get<std::string>();
    const io::Bytes payload = io::read_file(bin);
    const std::size_t count = book.config.m * book.config.d_sub;
    if (payload.size() != count * 4)
      throw FormatError("codebook " + bin.string() + ": expected " + std::to_string(count * 4) +
                        " bytes, found " + std::to_string(payload.size()));
    book.centroids = Matrix<float>(book.config.m, book.config.d_sub, io::read_f32_le(payload, 0, count));
    book.validate();
    return book;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("codebook " + json_path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError("codebook " + json_path.string() + ": " + e.what());
  }
}

namespace detail {

inline nlohmann::json save_quantizer(const TokenQuantizer& q, const std::filesystem::path& dir,
                                     const std::string& prefix) {
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < q.books().size(); ++i) {
    const std::string stem =
        q.sharing() == CodebookSharing::shared ? prefix : prefix + "_p" + std::to_string(i);
    files.push_back(save_codebook(q.books()[i], dir / stem).filename().string());
  }
  return files;
}

inline TokenQuantizer load_quantizer(const nlohmann::json& files, CodebookSharing sharing,
                                     const std::filesystem::path& dir) {
  std::vector<Codebook> books;
  for (const auto& f : files) books.push_back(load_codebook(dir / f.get<std::string>()));
  try {
    return TokenQuantizer(std::move(books), sharing);
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("codebook set: ") + e.what());
  }
}

}  // namespace detail

/// Writes `dir/codebooks.json` plus one descriptor/table pair per codebook.
inline std::filesystem::path save_kv_codebooks(const KvCodebooks& books,
                                               const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const nlohmann::json index = {
      {"format_version", kCodebookFormatVersion},
      {"vq", books.key.config().name()},
      {"sharing", to_string(books.key.sharing())},
      {"key", detail::save_quantizer(books.key, dir, "k_codebook")},
      {"value", detail::save_quantizer(books.value, dir, "v_codebook")},
  };
  const auto path = dir / "codebooks.json";
  io::write_text(path, index.dump(2) + "\n");
  return path;
}

inline KvCodebooks load_kv_codebooks(const std::filesystem::path& dir) {
  const auto path = dir / "codebooks.json";
  if (!std::filesystem::exists(path)) throw FormatError("missing codebooks: " + path.string());
  try {
    const auto index = nlohmann::json::parse(io::read_text(path));
    const CodebookSharing sharing = parse_sharing(index.at("sharing").get<std::string>());
    return {detail::load_quantizer(index.at("key"), sharing, dir),
            detail::load_quantizer(index.at("value"), sharing, dir)};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("codebook index " + path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError("codebook index " + path.string() + ": " + e.what());
  }
}

}  // namespace antkv

#endif  // ANTKV_CODEBOOK_IO_HPP
