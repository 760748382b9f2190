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

// Quantized KV cache for one attention head.
//
// Every token is in one of three states:
//   anchor     full-precision pre-RoPE K row and V row, chosen at prefill, never changes
//   quantized  sub-vector codes for K (pre-RoPE) and V
//   windowed   full precision, waiting to be quantized once it leaves the
//              sliding window of the most recent non-anchor tokens
// Keys are rotated on read, so all three states share the pre-RoPE layout.

#ifndef ANTKV_KV_CACHE_HPP
#define ANTKV_KV_CACHE_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antkv/anchor_score.hpp"
#include "antkv/attention.hpp"
#include "antkv/binary_io.hpp"
#include "antkv/vector_quant.hpp"

namespace antkv {

enum class TokenState : std::uint8_t { anchor, quantized, windowed };

struct CacheConfig {
  VqConfig vq;
  double anchor_fraction = 0.01;
  /// Overrides anchor_fraction when set.
  std::optional<std::size_t> anchor_count;
  std::size_t window_size = 32;
  AnchorPolicy policy = AnchorPolicy::combined;
  bool use_rope = true;
  double theta_base = kDefaultRopeBase;
  BlockSizes blocks{64, 64};

  void validate() const {
    vq.validate();
    detail::require(anchor_fraction >= 0.0 && anchor_fraction <= 1.0,
                    "CacheConfig: anchor_fraction must be in [0, 1]");
    detail::require(blocks.q >= 1 && blocks.k >= 1, "CacheConfig: block sizes must be >= 1");
    detail::require(theta_base > 0.0, "CacheConfig: theta_base must be positive");
  }

  [[nodiscard]] std::size_t anchor_budget_for(std::size_t n) const {
    return anchor_count ? std::min(*anchor_count, n) : anchor_budget(anchor_fraction, n);
  }

  bool operator==(const CacheConfig& o) const {
    return vq == o.vq && anchor_fraction == o.anchor_fraction && anchor_count == o.anchor_count &&
           window_size == o.window_size && policy == o.policy && use_rope == o.use_rope &&
           theta_base == o.theta_base && blocks.q == o.blocks.q && blocks.k == o.blocks.k;
  }
};

struct CacheEntry {
  TokenState state = TokenState::windowed;
  std::int64_t position = 0;
  std::vector<float> k;  // pre-RoPE; empty when quantized
  std::vector<float> v;
  TokenCodes k_codes;  // empty unless quantized
  TokenCodes v_codes;
  bool operator==(const CacheEntry&) const = default;
};

/// Where the prefill output comes from: attention over the quantized cache,
/// or the full-precision blocked attention (quantized KV only used later when decoding).
enum class PrefillOutput { quantized, full_precision };

struct PrefillResult {
  HeadTensor output;
  AttentionAux<float> aux;
  AnchorScores scores;  // empty when anchors were supplied by the caller
  AnchorSelection anchors;
};

struct DequantizedKV {
  HeadTensor k;  // pre-RoPE
  HeadTensor v;
};

struct MemoryReport {
  std::uint64_t payload_bits = 0;
  std::uint64_t codebook_bits = 0;
  std::uint64_t fp_baseline_bits = 0;
  double effective_bits_per_element = 0.0;
};

class QuantizedKVCache {
 public:
  QuantizedKVCache(CacheConfig config, KvCodebooks codebooks)
      : config_(config), books_(std::move(codebooks)) {
    config_.validate();
    detail::require(!books_.key.empty() && !books_.value.empty(), "QuantizedKVCache: missing codebooks");
    detail::require(books_.key.config() == config_.vq && books_.value.config() == config_.vq,
                    "QuantizedKVCache: codebooks are " + books_.key.config().name() +
                        " but the cache expects " + config_.vq.name());
  }

  /// Causal prefill: blocked attention, anchor scores from the aux statistics,
  /// anchor selection, then quantization of everything that is neither an
  /// anchor nor inside the trailing window.
  PrefillResult prefill(const HeadTensor& q, const HeadTensor& k, const HeadTensor& v,
                        std::span<const std::int64_t> positions,
                        PrefillOutput mode = PrefillOutput::quantized) {
    return prefill_impl(q, k, v, positions, std::nullopt, mode);
  }

  /// Prefill with a caller-chosen anchor set (random controls, oracles).
  PrefillResult prefill_with_anchors(const HeadTensor& q, const HeadTensor& k, const HeadTensor& v,
                                     std::span<const std::int64_t> positions,
                                     std::span<const std::size_t> anchors,
                                     PrefillOutput mode = PrefillOutput::quantized) {
    return prefill_impl(q, k, v, positions, std::vector<std::size_t>(anchors.begin(), anchors.end()),
                        mode);
  }

  /// Appends one token and returns its attention output over the cache.
  std::vector<float> decode_step(std::span<const float> q, std::span<const float> k,
                                 std::span<const float> v, std::int64_t position) {
    if (entries_.empty()) set_width(k.size());
    detail::require(q.size() == d_ && k.size() == d_ && v.size() == d_,
                    "decode_step: vectors must have width " + std::to_string(d_));
    detail::require(position >= 0, "decode_step: negative position");
    detail::require(entries_.empty() || position > entries_.back().position,
                    "decode_step: position " + std::to_string(position) +
                        " is not after the last cached position");
    if (!all_finite(q) || !all_finite(k) || !all_finite(v))
      throw NumericalError("decode_step: non-finite input");

    CacheEntry e;
    e.state = TokenState::windowed;
    e.position = position;
    e.k.assign(k.begin(), k.end());
    e.v.assign(v.begin(), v.end());
    entries_.push_back(std::move(e));
    enforce_window();

    HeadTensor qm(1, d_, std::vector<float>(q.begin(), q.end()));
    const std::vector<std::int64_t> qpos{position};
    const HeadTensor out = attend(qm, qpos, false);
    return {out.values().begin(), out.values().end()};
  }

  [[nodiscard]] DequantizedKV dequantize() const {
    DequantizedKV kv{HeadTensor(entries_.size(), d_), HeadTensor(entries_.size(), d_)};
    for (std::size_t t = 0; t < entries_.size(); ++t) {
      const CacheEntry& e = entries_[t];
      if (e.state == TokenState::quantized) {
        const auto kr = books_.key.decode(e.k_codes);
        const auto vr = books_.value.decode(e.v_codes);
        std::copy(kr.begin(), kr.end(), kv.k.row(t).begin());
        std::copy(vr.begin(), vr.end(), kv.v.row(t).begin());
      } else {
        std::copy(e.k.begin(), e.k.end(), kv.k.row(t).begin());
        std::copy(e.v.begin(), e.v.end(), kv.v.row(t).begin());
      }
    }
    return kv;
  }

  /// Attention of `q` against the current cache contents (keys rotated at
  /// their stored positions). Recomputed from dequantized rows on every call.
  [[nodiscard]] HeadTensor attend(const HeadTensor& q, std::span<const std::int64_t> q_positions,
                                  bool causal) const {
    detail::require(!entries_.empty(), "attend: cache is empty");
    const DequantizedKV kv = dequantize();
    AttentionOptions opt;
    opt.causal = causal;
    if (config_.use_rope) {
      RopeSpec rope;
      rope.theta_base = config_.theta_base;
      rope.q_positions.assign(q_positions.begin(), q_positions.end());
      rope.k_positions = positions();
      opt.rope = std::move(rope);
    }
    return attention_exact(q, kv.k, kv.v, opt);
  }

  [[nodiscard]] MemoryReport memory_report() const {
    MemoryReport r;
    const std::uint64_t d = d_;
    const std::uint64_t subs = d_ == 0 ? 0 : d / config_.vq.d_sub;
    const std::uint64_t code_bits = index_bits(config_.vq.m);
    for (const CacheEntry& e : entries_)
      r.payload_bits += e.state == TokenState::quantized ? 2 * subs * code_bits : 2 * d * 32;
    for (const auto* q : {&books_.key, &books_.value})
      for (const Codebook& b : q->books()) r.codebook_bits += std::uint64_t{b.centroids.size()} * 32;
    r.fp_baseline_bits = 2 * entries_.size() * d * 32;
    const std::uint64_t elements = 2 * entries_.size() * d;
    r.effective_bits_per_element =
        elements == 0 ? 0.0 : static_cast<double>(r.payload_bits) / static_cast<double>(elements);
    return r;
  }

  [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
  [[nodiscard]] std::size_t width() const noexcept { return d_; }
  [[nodiscard]] const CacheConfig& config() const noexcept { return config_; }
  [[nodiscard]] const KvCodebooks& codebooks() const noexcept { return books_; }
  [[nodiscard]] const std::vector<CacheEntry>& entries() const noexcept { return entries_; }
  [[nodiscard]] const std::vector<std::size_t>& anchor_indices() const noexcept { return anchors_; }

  [[nodiscard]] std::vector<std::int64_t> positions() const {
    std::vector<std::int64_t> p(entries_.size());
    for (std::size_t t = 0; t < entries_.size(); ++t) p[t] = entries_[t].position;
    return p;
  }

  [[nodiscard]] std::size_t count(TokenState s) const {
    return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(),
                                                  [s](const CacheEntry& e) { return e.state == s; }));
  }

  bool operator==(const QuantizedKVCache&) const = default;

  /// Rebuilds a cache from stored state; used by snapshot loading.
  static QuantizedKVCache restore(CacheConfig config, KvCodebooks books, std::size_t width,
                                  std::vector<CacheEntry> entries, std::vector<std::size_t> anchors) {
    QuantizedKVCache c(config, std::move(books));
    if (!entries.empty()) c.set_width(width);
    c.entries_ = std::move(entries);
    c.anchors_ = std::move(anchors);
    return c;
  }

 private:
  void set_width(std::size_t d) {
    detail::require(d >= 2 && d % 2 == 0, "QuantizedKVCache: head dimension must be even and >= 2");
    books_.key.check_width(d);
    books_.value.check_width(d);
    d_ = d;
  }

  void quantize_entry(CacheEntry& e) const {
    e.k_codes = books_.key.encode(e.k);
    e.v_codes = books_.value.encode(e.v);
    e.k.clear();
    e.k.shrink_to_fit();
    e.v.clear();
    e.v.shrink_to_fit();
    e.state = TokenState::quantized;
  }

  void enforce_window() {
    std::size_t windowed = count(TokenState::windowed);
    for (CacheEntry& e : entries_) {
      if (windowed <= config_.window_size) break;
      if (e.state != TokenState::windowed) continue;
      quantize_entry(e);
      --windowed;
    }
  }

  PrefillResult prefill_impl(const HeadTensor& q, const HeadTensor& k, const HeadTensor& v,
                             std::span<const std::int64_t> positions,
                             std::optional<std::vector<std::size_t>> anchors, PrefillOutput mode) {
    detail::require(entries_.empty(), "prefill: cache is not empty");
    detail::require(q.rows() == k.rows() && k.rows() == v.rows() && q.rows() >= 1,
                    "prefill: Q, K and V must have the same nonzero token count");
    detail::require(q.cols() == k.cols() && k.cols() == v.cols(),
                    "prefill: Q, K and V must have the same width");
    validate_positions(positions, k.rows());
    set_width(k.cols());

    AttentionOptions opt;
    opt.causal = true;
    if (config_.use_rope)
      opt.rope = RopeSpec::self(std::vector<std::int64_t>(positions.begin(), positions.end()),
                                config_.theta_base);

    PrefillResult res;
    res.aux = flash_attention_aux(q, k, v, config_.blocks, opt);
    const std::size_t n = k.rows();
    if (anchors) {
      res.anchors.indices = std::move(*anchors);
      std::sort(res.anchors.indices.begin(), res.anchors.indices.end());
      res.anchors.indices.erase(std::unique(res.anchors.indices.begin(), res.anchors.indices.end()),
                                res.anchors.indices.end());
      for (const auto i : res.anchors.indices)
        detail::require(i < n, "prefill: anchor index out of range");
      res.anchors.budget = res.anchors.indices.size();
      res.anchors.policy = config_.policy;
    } else {
      res.scores = anchor_scores_blocked(q, k, v, res.aux, config_.blocks, opt);
      res.anchors = select_anchors(res.scores, config_.anchor_budget_for(n), config_.policy);
    }
    anchors_ = res.anchors.indices;

    std::vector<bool> is_anchor(n, false);
    for (const auto i : anchors_) is_anchor[i] = true;
    const std::size_t window_start = n > config_.window_size ? n - config_.window_size : 0;
    entries_.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
      CacheEntry e;
      e.position = positions[t];
      e.k.assign(k.row(t).begin(), k.row(t).end());
      e.v.assign(v.row(t).begin(), v.row(t).end());
      if (is_anchor[t]) {
        e.state = TokenState::anchor;
      } else if (t >= window_start) {
        e.state = TokenState::windowed;
      } else {
        quantize_entry(e);
      }
      entries_.push_back(std::move(e));
    }

    res.output = mode == PrefillOutput::full_precision ? res.aux.output : attend(q, positions, true);
    return res;
  }

  CacheConfig config_;
  KvCodebooks books_;
  std::size_t d_ = 0;
  std::vector<CacheEntry> entries_;
  std::vector<std::size_t> anchors_;
};

// ---------------------------------------------------------------------------
// Snapshots: JSON manifest + one binary blob with three sections
//   rows       K then V row (f32 LE) of every anchor/windowed token, in token order
//   codes      per quantized token: K codes then V codes, ceil(log2 m) bits each,
//              MSB first, padded to a byte boundary per token
//   codebooks  centroid tables (f32 LE), key codebooks then value codebooks
// ---------------------------------------------------------------------------

inline constexpr int kCacheSnapshotVersion = 1;

struct CacheSnapshot {
  nlohmann::json manifest;
  io::Bytes payload;
};

namespace detail {

inline char state_tag(TokenState s) {
  switch (s) {
    case TokenState::anchor: return 'A';
    case TokenState::quantized: return 'Q';
    case TokenState::windowed: return 'W';
  }
  return '?';
}

inline TokenState parse_state_tag(char c) {
  switch (c) {
    case 'A': return TokenState::anchor;
    case 'Q': return TokenState::quantized;
    case 'W': return TokenState::windowed;
    default: throw FormatError(std::string("cache snapshot: unknown token tag '") + c + "'");
  }
}

inline nlohmann::json codebook_shapes(const TokenQuantizer& q) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& b : q.books())
    out.push_back({{"d_sub", b.config.d_sub}, {"m", b.config.m}, {"groups", b.groups}, {"seed", b.seed}});
  return out;
}

inline TokenQuantizer read_books(const nlohmann::json& shapes, CodebookSharing sharing,
                                 std::span<const std::uint8_t> payload, std::size_t& offset) {
  std::vector<Codebook> books;
  for (const auto& s : shapes) {
    Codebook b;
    b.config = {s.at("d_sub").get<std::size_t>(), s.at("m").get<std::size_t>()};
    b.groups = s.at("groups").get<std::size_t>();
    b.seed = s.at("seed").get<std::uint64_t>();
    const std::size_t count = b.config.m * b.config.d_sub;
    b.centroids = Matrix<float>(b.config.m, b.config.d_sub, io::read_f32_le(payload, offset, count));
    offset += count * 4;
    books.push_back(std::move(b));
  }
  return TokenQuantizer(std::move(books), sharing);
}

}  // namespace detail

[[nodiscard]] inline CacheSnapshot encode_cache(const QuantizedKVCache& cache) {
  const CacheConfig& cfg = cache.config();
  const std::uint32_t bits = index_bits(cfg.vq.m);
  io::Bytes rows;
  io::BitWriter codes;
  std::string tags;
  for (const CacheEntry& e : cache.entries()) {
    tags.push_back(detail::state_tag(e.state));
    if (e.state == TokenState::quantized) {
      for (const auto idx : e.k_codes.indices) codes.write(idx, bits);
      for (const auto idx : e.v_codes.indices) codes.write(idx, bits);
      codes.pad_to_byte();
    } else {
      io::append_f32_le(rows, e.k);
      io::append_f32_le(rows, e.v);
    }
  }
  io::Bytes books;
  for (const auto* q : {&cache.codebooks().key, &cache.codebooks().value})
    for (const auto& b : q->books()) io::append_f32_le(books, b.centroids.values());

  CacheSnapshot snap;
  const io::Bytes code_bytes = codes.take();
  snap.payload = rows;
  snap.payload.insert(snap.payload.end(), code_bytes.begin(), code_bytes.end());
  snap.payload.insert(snap.payload.end(), books.begin(), books.end());

  nlohmann::json config = {
      {"vq", cfg.vq.name()},
      {"anchor_fraction", cfg.anchor_fraction},
      {"anchor_count", cfg.anchor_count ? nlohmann::json(*cfg.anchor_count) : nlohmann::json(nullptr)},
      {"window_size", cfg.window_size},
      {"policy", to_string(cfg.policy)},
      {"use_rope", cfg.use_rope},
      {"theta_base", cfg.theta_base},
      {"block_q", cfg.blocks.q},
      {"block_k", cfg.blocks.k},
  };
  snap.manifest = {
      {"format_version", kCacheSnapshotVersion},
      {"config", config},
      {"d", cache.width()},
      {"token_count", cache.size()},
      {"positions", cache.positions()},
      {"tags", tags},
      {"anchors", cache.anchor_indices()},
      {"index_bits", bits},
      {"codebooks",
       {{"sharing", to_string(cache.codebooks().key.sharing())},
        {"key", detail::codebook_shapes(cache.codebooks().key)},
        {"value", detail::codebook_shapes(cache.codebooks().value)}}},
      {"sections",
       {{"rows", {{"offset", 0}, {"length", rows.size()}}},
        {"codes", {{"offset", rows.size()}, {"length", code_bytes.size()}}},
        {"codebooks", {{"offset", rows.size() + code_bytes.size()}, {"length", books.size()}}}}},
  };
  return snap;
}

[[nodiscard]] inline QuantizedKVCache decode_cache(const CacheSnapshot& snap) {
  try {
    const auto& m = snap.manifest;
    if (m.at("format_version").get<int>() != kCacheSnapshotVersion)
      throw FormatError("cache snapshot: unsupported format_version");
    const auto& c = m.at("config");
    CacheConfig cfg;
    cfg.vq = VqConfig::parse(c.at("vq").get<std::string>());
    cfg.anchor_fraction = c.at("anchor_fraction").get<double>();
    if (!c.at("anchor_count").is_null()) cfg.anchor_count = c.at("anchor_count").get<std::size_t>();
    cfg.window_size = c.at("window_size").get<std::size_t>();
    cfg.policy = parse_anchor_policy(c.at("policy").get<std::string>());
    cfg.use_rope = c.at("use_rope").get<bool>();
    cfg.theta_base = c.at("theta_base").get<double>();
    cfg.blocks = {c.at("block_q").get<std::size_t>(), c.at("block_k").get<std::size_t>()};

    const std::size_t d = m.at("d").get<std::size_t>();
    const std::size_t n = m.at("token_count").get<std::size_t>();
    const auto positions = m.at("positions").get<std::vector<std::int64_t>>();
    const auto tags = m.at("tags").get<std::string>();
    if (positions.size() != n || tags.size() != n)
      throw FormatError("cache snapshot: positions/tags do not match token_count");
    const auto bits = m.at("index_bits").get<std::uint32_t>();
    if (bits != index_bits(cfg.vq.m)) throw FormatError("cache snapshot: index_bits mismatch");

    const auto& sec = m.at("sections");
    auto section = [&](const char* name) {
      const std::size_t off = sec.at(name).at("offset").get<std::size_t>();
      const std::size_t len = sec.at(name).at("length").get<std::size_t>();
      if (off + len > snap.payload.size()) throw FormatError("cache snapshot: section out of range");
      return std::span<const std::uint8_t>(snap.payload).subspan(off, len);
    };
    const auto rows = section("rows");
    const auto codes = section("codes");
    const auto books_bytes = section("codebooks");

    const auto& cb = m.at("codebooks");
    const CodebookSharing sharing = parse_sharing(cb.at("sharing").get<std::string>());
    std::size_t off = 0;
    KvCodebooks books;
    books.key = detail::read_books(cb.at("key"), sharing, books_bytes, off);
    books.value = detail::read_books(cb.at("value"), sharing, books_bytes, off);
    if (off != books_bytes.size()) throw FormatError("cache snapshot: codebook section length mismatch");

    const std::size_t subs = d / cfg.vq.d_sub;
    std::vector<CacheEntry> entries(n);
    std::size_t row_off = 0;
    io::BitReader reader(codes);
    for (std::size_t t = 0; t < n; ++t) {
      CacheEntry& e = entries[t];
      e.state = detail::parse_state_tag(tags[t]);
      e.position = positions[t];
      if (e.state == TokenState::quantized) {
        e.k_codes.indices.resize(subs);
        e.v_codes.indices.resize(subs);
        for (auto& idx : e.k_codes.indices) idx = reader.read(bits);
        for (auto& idx : e.v_codes.indices) idx = reader.read(bits);
        reader.align_to_byte();
        for (const auto idx : e.k_codes.indices)
          if (idx >= cfg.vq.m) throw FormatError("cache snapshot: code out of range");
        for (const auto idx : e.v_codes.indices)
          if (idx >= cfg.vq.m) throw FormatError("cache snapshot: code out of range");
      } else {
        e.k = io::read_f32_le(rows, row_off, d);
        e.v = io::read_f32_le(rows, row_off + 4 * d, d);
        row_off += 8 * d;
      }
    }
    if (row_off != rows.size() || reader.byte_position() != codes.size())
      throw FormatError("cache snapshot: section length mismatch");
    return QuantizedKVCache::restore(cfg, std::move(books), d, std::move(entries),
                                     m.at("anchors").get<std::vector<std::size_t>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("cache snapshot: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("cache snapshot: ") + e.what());
  }
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (payload).
inline void write_cache_snapshot(const QuantizedKVCache& cache, const std::filesystem::path& stem) {
  CacheSnapshot snap = encode_cache(cache);
  const std::filesystem::path bin = stem.string() + ".bin";
  snap.manifest["payload_file"] = bin.filename().string();
  io::write_file(bin, snap.payload);
  io::write_text(stem.string() + ".json", snap.manifest.dump(2) + "\n");
}

inline QuantizedKVCache read_cache_snapshot(const std::filesystem::path& stem) {
  CacheSnapshot snap;
  const std::filesystem::path json_path = stem.string() + ".json";
  try {
    snap.manifest = nlohmann::json::parse(io::read_text(json_path));
    snap.payload = io::read_file(json_path.parent_path() /
                                 snap.manifest.at("payload_file").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cache snapshot " + json_path.string() + ": " + e.what());
  }
  return decode_cache(snap);
}

}  // namespace antkv

#endif  // ANTKV_KV_CACHE_HPP
