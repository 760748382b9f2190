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

// Reference attention, rotary position embedding and the blocked
// (online-softmax) attention that also reports the per-query statistics
// needed to rebuild attention probabilities after the fact.
//
// Everything here is templated on the storage scalar. Dot products, softmax
// normalizers and output accumulators are always carried in double.

#ifndef ANTKV_ATTENTION_HPP
#define ANTKV_ATTENTION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ranges>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "antkv/error.hpp"
#include "antkv/matrix.hpp"

namespace antkv {

inline constexpr double kDefaultRopeBase = 10000.0;

/// Rotary embedding for one tensor: frequency base plus one position per row.
struct RopeParams {
  double theta_base = kDefaultRopeBase;
  std::vector<std::int64_t> positions;
};

/// Rotary embedding for a query/key pair. Decoding uses different query and
/// key positions, prefill uses the same sequence for both.
struct RopeSpec {
  double theta_base = kDefaultRopeBase;
  std::vector<std::int64_t> q_positions;
  std::vector<std::int64_t> k_positions;

  static RopeSpec self(std::vector<std::int64_t> positions,
                       double theta_base = kDefaultRopeBase) {
    RopeSpec r;
    r.theta_base = theta_base;
    r.q_positions = positions;
    r.k_positions = std::move(positions);
    return r;
  }
};

struct AttentionOptions {
  std::optional<RopeSpec> rope;
  /// Query i sees key j iff j <= i + (n_k - n_q), i.e. queries are aligned
  /// with the most recent keys.
  bool causal = false;
};

struct BlockSizes {
  std::size_t q = 64;
  std::size_t k = 64;
};

template <typename T>
struct AttentionScores {
  Matrix<T> probs;  // n_q x n_k, masked cells exactly 0
  bool causal = false;
};

/// Output of the blocked attention plus what is needed to rebuild
/// probabilities: A[i,j] = exp(logit[i,j] - row_max[i]) / row_sum[i].
template <typename T>
struct AttentionAux {
  Matrix<T> output;
  std::vector<double> row_sum;  // L
  std::vector<double> row_max;  // M, on scaled logits
  std::vector<double> q_norms;
};

[[nodiscard]] inline bool key_visible(std::size_t i, std::size_t j, std::size_t n_q,
                                      std::size_t n_k, bool causal) noexcept {
  return !causal || j + n_q <= i + n_k;
}

/// One past the last key visible to query i.
[[nodiscard]] inline std::size_t visible_end(std::size_t i, std::size_t n_q, std::size_t n_k,
                                             bool causal) noexcept {
  return causal ? std::min(n_k, i + n_k - n_q + 1) : n_k;
}

/// Sequence positions must be non-negative; `strict` also requires them to increase.
inline void validate_positions(std::span<const std::int64_t> positions, std::size_t rows,
                               bool strict = true) {
  detail::require(positions.size() == rows, "rope: expected " + std::to_string(rows) +
                                                " positions, got " +
                                                std::to_string(positions.size()));
  for (std::size_t t = 0; t < positions.size(); ++t) {
    detail::require(positions[t] >= 0, "rope: negative position");
    detail::require(!strict || t == 0 || positions[t] > positions[t - 1],
                    "rope: positions must be strictly increasing");
  }
}

namespace detail {

template <typename T>
void rotate_rows(Matrix<T>& x, std::span<const std::int64_t> positions, double theta_base,
                 double direction, bool strict = true) {
  require(x.cols() >= 2 && x.cols() % 2 == 0, "rope: head dimension must be even and >= 2");
  require(theta_base > 0.0, "rope: theta_base must be positive");
  validate_positions(positions, x.rows(), strict);
  const std::size_t d = x.cols();
  std::vector<double> freq(d / 2);
  for (std::size_t i = 0; i < d / 2; ++i)
    freq[i] = std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto r = x.row(t);
    const double p = static_cast<double>(positions[t]);
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle = direction * p * freq[i];
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      const double a = r[2 * i];
      const double b = r[2 * i + 1];
      r[2 * i] = static_cast<T>(a * c - b * s);
      r[2 * i + 1] = static_cast<T>(a * s + b * c);
    }
  }
}

template <typename T>
void check_qk(const Matrix<T>& q, const Matrix<T>& k, const AttentionOptions& opt) {
  require(q.rows() >= 1 && k.rows() >= 1, "attention: empty Q or K");
  require(q.cols() == k.cols(), "attention: Q has d=" + std::to_string(q.cols()) +
                                    " but K has d=" + std::to_string(k.cols()));
  require(!opt.causal || k.rows() >= q.rows(),
          "attention: causal masking needs at least as many keys as queries");
  if (!all_finite(q) || !all_finite(k)) throw NumericalError("attention: non-finite Q or K");
}

template <typename T>
void check_qkv(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
               const AttentionOptions& opt) {
  check_qk(q, k, opt);
  require(k.rows() == v.rows(), "attention: K has " + std::to_string(k.rows()) +
                                    " rows but V has " + std::to_string(v.rows()));
  if (!all_finite(v)) throw NumericalError("attention: non-finite V");
}

template <typename T>
std::pair<Matrix<T>, Matrix<T>> rotated_qk(const Matrix<T>& q, const Matrix<T>& k,
                                           const AttentionOptions& opt) {
  Matrix<T> qr = q;
  Matrix<T> kr = k;
  if (opt.rope) {
    rotate_rows(qr, opt.rope->q_positions, opt.rope->theta_base, 1.0);
    rotate_rows(kr, opt.rope->k_positions, opt.rope->theta_base, 1.0);
  }
  return {std::move(qr), std::move(kr)};
}

template <std::ranges::random_access_range A, std::ranges::random_access_range B>
double dot(const A& a, const B& b) noexcept {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) s += static_cast<double>(a[c]) * static_cast<double>(b[c]);
  return s;
}

/// Row-wise softmax in place over double logits; masked cells become 0.
inline void softmax_inplace(Matrix<double>& s, bool causal) {
  const std::size_t nq = s.rows();
  const std::size_t nk = s.cols();
  for (std::size_t i = 0; i < nq; ++i) {
    auto r = s.row(i);
    const std::size_t end = visible_end(i, nq, nk, causal);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < end; ++j) mx = std::max(mx, r[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < end; ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    for (std::size_t j = 0; j < end; ++j) r[j] /= sum;
    for (std::size_t j = end; j < nk; ++j) r[j] = 0.0;
  }
}

}  // namespace detail

/// Row-wise softmax with per-row max subtraction. With `causal` the
/// upper-right cells (j > i + n_k - n_q) are treated as -inf.
template <typename T>
[[nodiscard]] Matrix<T> softmax_rows(const Matrix<T>& logits, bool causal = false) {
  if (!all_finite(logits)) throw NumericalError("softmax_rows: non-finite logit");
  detail::require(!causal || logits.cols() >= logits.rows(),
                  "softmax_rows: causal mask needs cols >= rows");
  Matrix<double> s = logits.template cast<double>();
  detail::softmax_inplace(s, causal);
  return s.template cast<T>();
}

template <typename T>
[[nodiscard]] Matrix<T> apply_rope(const Matrix<T>& x, std::span<const std::int64_t> positions,
                                   double theta_base = kDefaultRopeBase) {
  Matrix<T> out = x;
  detail::rotate_rows(out, positions, theta_base, 1.0, false);
  return out;
}

template <typename T>
[[nodiscard]] Matrix<T> apply_rope(const Matrix<T>& x, const RopeParams& params) {
  return apply_rope(x, std::span<const std::int64_t>(params.positions), params.theta_base);
}

/// Transpose of the rotation: maps post-RoPE gradients back to pre-RoPE rows.
template <typename T>
[[nodiscard]] Matrix<T> apply_rope_inverse(const Matrix<T>& x,
                                           std::span<const std::int64_t> positions,
                                           double theta_base = kDefaultRopeBase) {
  Matrix<T> out = x;
  detail::rotate_rows(out, positions, theta_base, -1.0, false);
  return out;
}

/// Scaled logits Q~K~^T / sqrt(d) in double; masked cells hold -inf.
template <typename T>
[[nodiscard]] Matrix<double> attention_logits(const Matrix<T>& q, const Matrix<T>& k,
                                              const AttentionOptions& opt = {}) {
  detail::check_qk(q, k, opt);
  const auto [qr, kr] = detail::rotated_qk(q, k, opt);
  const std::size_t nq = q.rows();
  const std::size_t nk = k.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix<double> s(nq, nk, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t end = visible_end(i, nq, nk, opt.causal);
    for (std::size_t j = 0; j < end; ++j) s(i, j) = detail::dot(qr.row(i), kr.row(j)) * scale;
  }
  return s;
}

/// Softmax(Q~K~^T / sqrt(d)) in double precision.
template <typename T>
[[nodiscard]] Matrix<double> attention_probs(const Matrix<T>& q, const Matrix<T>& k,
                                             const AttentionOptions& opt = {}) {
  Matrix<double> s = attention_logits(q, k, opt);
  detail::softmax_inplace(s, opt.causal);
  return s;
}

template <typename T>
[[nodiscard]] AttentionScores<T> attention_scores(const Matrix<T>& q, const Matrix<T>& k,
                                                  const AttentionOptions& opt = {}) {
  return {attention_probs(q, k, opt).template cast<T>(), opt.causal};
}

/// Reference attention; the oracle for every blocked or quantized path.
template <typename T>
[[nodiscard]] Matrix<T> attention_exact(const Matrix<T>& q, const Matrix<T>& k,
                                        const Matrix<T>& v, const AttentionOptions& opt = {}) {
  detail::check_qkv(q, k, v, opt);
  const Matrix<double> a = attention_probs(q, k, opt);
  const std::size_t d = v.cols();
  Matrix<T> out(q.rows(), d);
  std::vector<double> acc(d);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const std::size_t end = visible_end(i, q.rows(), k.rows(), opt.causal);
    for (std::size_t j = 0; j < end; ++j) {
      const double p = a(i, j);
      const auto vr = v.row(j);
      for (std::size_t c = 0; c < d; ++c) acc[c] += p * static_cast<double>(vr[c]);
    }
    for (std::size_t c = 0; c < d; ++c) out(i, c) = static_cast<T>(acc[c]);
  }
  return out;
}

/// Tiled attention with online softmax rescaling. Besides the output it
/// returns the final running max M, normalizer L and the query norms.
template <typename T>
[[nodiscard]] AttentionAux<T> flash_attention_aux(const Matrix<T>& q, const Matrix<T>& k,
                                                  const Matrix<T>& v, BlockSizes blocks,
                                                  const AttentionOptions& opt = {}) {
  detail::require(blocks.q >= 1 && blocks.k >= 1, "flash_attention_aux: block size must be >= 1");
  detail::check_qkv(q, k, v, opt);
  const auto [qr, kr] = detail::rotated_qk(q, k, opt);
  const std::size_t nq = q.rows();
  const std::size_t nk = k.rows();
  const std::size_t d = v.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));

  AttentionAux<T> aux;
  aux.output = Matrix<T>(nq, d);
  aux.row_max.assign(nq, -std::numeric_limits<double>::infinity());
  aux.row_sum.assign(nq, 0.0);
  aux.q_norms.resize(nq);
  for (std::size_t i = 0; i < nq; ++i) aux.q_norms[i] = l2_norm(q.row(i));

  Matrix<double> acc(nq, d, 0.0);
  std::vector<double> logits(blocks.k);
  for (std::size_t i0 = 0; i0 < nq; i0 += blocks.q) {
    const std::size_t i1 = std::min(nq, i0 + blocks.q);
    for (std::size_t j0 = 0; j0 < nk; j0 += blocks.k) {
      const std::size_t j1 = std::min(nk, j0 + blocks.k);
      for (std::size_t i = i0; i < i1; ++i) {
        const std::size_t end = std::min(j1, visible_end(i, nq, nk, opt.causal));
        if (end <= j0) continue;
        double block_max = -std::numeric_limits<double>::infinity();
        for (std::size_t j = j0; j < end; ++j) {
          logits[j - j0] = detail::dot(qr.row(i), kr.row(j)) * scale;
          block_max = std::max(block_max, logits[j - j0]);
        }
        const double m_new = std::max(aux.row_max[i], block_max);
        const double rescale = std::exp(aux.row_max[i] - m_new);
        auto acc_row = acc.row(i);
        double l = aux.row_sum[i] * rescale;
        for (double& a : acc_row) a *= rescale;
        for (std::size_t j = j0; j < end; ++j) {
          const double p = std::exp(logits[j - j0] - m_new);
          l += p;
          const auto vr = v.row(j);
          for (std::size_t c = 0; c < d; ++c) acc_row[c] += p * static_cast<double>(vr[c]);
        }
        aux.row_sum[i] = l;
        aux.row_max[i] = m_new;
      }
    }
  }
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t c = 0; c < d; ++c)
      aux.output(i, c) = static_cast<T>(acc(i, c) / aux.row_sum[i]);
  return aux;
}

}  // namespace antkv

#endif  // ANTKV_ATTENTION_HPP
