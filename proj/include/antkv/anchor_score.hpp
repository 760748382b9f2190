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

// Anchor scores and the attention perturbation bounds they come from.
//
// For a perturbation dV of the values the output error is bounded exactly by
//   sum_j ||A[:, j]||_1 * ||dV_j||_1,
// and for a small perturbation dK of the keys, to first order, by
//   sum_j sum_i ||(V^T Diag(A_i)(I - e A_i))[:, j]||_1 * ||Q_i||_2 * ||dK_j||_1.
// The column inside the key bound simplifies to A_ij * (V_j - O_i), which is
// what is evaluated here (O(n d) memory instead of an n x n matrix per query).
//
// The anchor scores drop the V factor from the key term:
//   AnS(V)_j = sum_i A_ij,   AnS(K)_j = sum_i A_ij (1 - A_ij) ||Q_i||_2.

#ifndef ANTKV_ANCHOR_SCORE_HPP
#define ANTKV_ANCHOR_SCORE_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "antkv/attention.hpp"

namespace antkv {

struct AnchorScores {
  std::vector<double> ans_k;
  std::vector<double> ans_v;
};

enum class AnchorPolicy {
  by_k,
  by_v,
  /// Half the budget (rounded up) goes to the top AnS(K) tokens, the rest is
  /// filled from the AnS(V) ranking, skipping tokens already chosen.
  combined,
};

[[nodiscard]] inline std::string to_string(AnchorPolicy p) {
  switch (p) {
    case AnchorPolicy::by_k: return "by_k";
    case AnchorPolicy::by_v: return "by_v";
    case AnchorPolicy::combined: return "combined";
  }
  return "combined";
}

[[nodiscard]] inline AnchorPolicy parse_anchor_policy(std::string_view s) {
  if (s == "by_k" || s == "k") return AnchorPolicy::by_k;
  if (s == "by_v" || s == "v") return AnchorPolicy::by_v;
  if (s == "combined" || s == "by_sum" || s == "sum") return AnchorPolicy::combined;
  throw InvalidArgument("unknown anchor policy '" + std::string(s) + "'");
}

struct AnchorSelection {
  std::vector<std::size_t> indices;  // sorted ascending
  std::size_t budget = 0;
  AnchorPolicy policy = AnchorPolicy::combined;
};

struct PerturbationBoundReport {
  double bound_value = 0.0;
  double actual_error = 0.0;
  std::vector<double> per_token_terms;
  /// ||dK||_1 > 0.5 ||K||_1: the first-order bound is not expected to hold.
  bool outside_first_order_regime = false;
};

template <typename P>
[[nodiscard]] AnchorScores anchor_scores(const Matrix<P>& probs, std::span<const double> q_norms) {
  detail::require(q_norms.size() == probs.rows(),
                  "anchor_scores: " + std::to_string(q_norms.size()) + " query norms for " +
                      std::to_string(probs.rows()) + " query rows");
  AnchorScores s{std::vector<double>(probs.cols(), 0.0), std::vector<double>(probs.cols(), 0.0)};
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto r = probs.row(i);
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      const double a = r[j];
      s.ans_v[j] += a;
      s.ans_k[j] += a * (1.0 - a) * q_norms[i];
    }
  }
  return s;
}

template <typename T>
[[nodiscard]] AnchorScores anchor_scores(const AttentionScores<T>& a, std::span<const double> q_norms) {
  return anchor_scores(a.probs, q_norms);
}

/// Rebuilds each attention tile from the aux statistics and accumulates both
/// scores tile by tile: outer loop over key blocks, inner over query blocks.
template <typename T>
[[nodiscard]] AnchorScores anchor_scores_blocked(const Matrix<T>& q, const Matrix<T>& k,
                                                 const Matrix<T>& v, const AttentionAux<T>& aux,
                                                 BlockSizes blocks, const AttentionOptions& opt = {}) {
  detail::require(blocks.q >= 1 && blocks.k >= 1, "anchor_scores_blocked: block size must be >= 1");
  detail::check_qkv(q, k, v, opt);
  const std::size_t nq = q.rows();
  const std::size_t nk = k.rows();
  detail::require(aux.row_max.size() == nq && aux.row_sum.size() == nq && aux.q_norms.size() == nq,
                  "anchor_scores_blocked: aux statistics do not match the query count");
  const auto [qr, kr] = detail::rotated_qk(q, k, opt);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));

  AnchorScores s{std::vector<double>(nk, 0.0), std::vector<double>(nk, 0.0)};
  for (std::size_t j0 = 0; j0 < nk; j0 += blocks.k) {
    const std::size_t j1 = std::min(nk, j0 + blocks.k);
    for (std::size_t i0 = 0; i0 < nq; i0 += blocks.q) {
      const std::size_t i1 = std::min(nq, i0 + blocks.q);
      for (std::size_t i = i0; i < i1; ++i) {
        const std::size_t end = std::min(j1, visible_end(i, nq, nk, opt.causal));
        const double inv_l = 1.0 / aux.row_sum[i];
        for (std::size_t j = j0; j < end; ++j) {
          const double a = std::exp(detail::dot(qr.row(i), kr.row(j)) * scale - aux.row_max[i]) * inv_l;
          s.ans_v[j] += a;
          s.ans_k[j] += a * (1.0 - a) * aux.q_norms[i];
        }
      }
    }
  }
  return s;
}

/// Indices of the k largest scores, larger first, lower index first on ties.
[[nodiscard]] inline std::vector<std::size_t> top_k_indices(std::span<const double> scores,
                                                            std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                    });
  idx.resize(k);
  return idx;
}

[[nodiscard]] inline AnchorSelection select_anchors(const AnchorScores& scores, std::size_t budget,
                                                    AnchorPolicy policy) {
  const std::size_t n = scores.ans_v.size();
  detail::require(scores.ans_k.size() == n, "select_anchors: score vectors differ in length");
  AnchorSelection sel;
  sel.budget = budget;
  sel.policy = policy;
  const std::size_t take = std::min(budget, n);
  switch (policy) {
    case AnchorPolicy::by_k: sel.indices = top_k_indices(scores.ans_k, take); break;
    case AnchorPolicy::by_v: sel.indices = top_k_indices(scores.ans_v, take); break;
    case AnchorPolicy::combined: {
      sel.indices = top_k_indices(scores.ans_k, (take + 1) / 2);
      std::vector<bool> used(n, false);
      for (const auto i : sel.indices) used[i] = true;
      for (const auto i : top_k_indices(scores.ans_v, n)) {
        if (sel.indices.size() >= take) break;
        if (!used[i]) {
          sel.indices.push_back(i);
          used[i] = true;
        }
      }
      break;
    }
  }
  std::sort(sel.indices.begin(), sel.indices.end());
  return sel;
}

/// Anchor count for a fraction of the context: ceil(fraction * n).
[[nodiscard]] inline std::size_t anchor_budget(double fraction, std::size_t n) {
  detail::require(fraction >= 0.0 && fraction <= 1.0, "anchor fraction must be in [0, 1]");
  const double raw = fraction * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

/// Exact value-side bound: sum_j ||A[:, j]||_1 ||dV_j||_1 >= ||A dV||_1.
template <typename P, typename T>
[[nodiscard]] PerturbationBoundReport v_perturbation_bound(const Matrix<P>& probs,
                                                           const Matrix<T>& dv) {
  detail::require(dv.rows() == probs.cols(), "v_perturbation_bound: dV has " +
                                                 std::to_string(dv.rows()) + " rows for " +
                                                 std::to_string(probs.cols()) + " keys");
  const std::size_t nq = probs.rows();
  const std::size_t nk = probs.cols();
  const std::size_t d = dv.cols();
  PerturbationBoundReport rep;
  rep.per_token_terms.assign(nk, 0.0);
  std::vector<double> colsum(nk, 0.0);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < nk; ++j) colsum[j] += static_cast<double>(probs(i, j));
  for (std::size_t j = 0; j < nk; ++j) {
    rep.per_token_terms[j] = colsum[j] * l1_norm(dv.row(j));
    rep.bound_value += rep.per_token_terms[j];
  }
  std::vector<double> acc(d);
  for (std::size_t i = 0; i < nq; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < nk; ++j) {
      const double a = static_cast<double>(probs(i, j));
      if (a == 0.0) continue;
      const auto r = dv.row(j);
      for (std::size_t c = 0; c < d; ++c) acc[c] += a * static_cast<double>(r[c]);
    }
    for (const double x : acc) rep.actual_error += std::abs(x);
  }
  return rep;
}

template <typename T>
[[nodiscard]] PerturbationBoundReport v_perturbation_bound(const AttentionScores<T>& a,
                                                           const Matrix<T>& dv) {
  return v_perturbation_bound(a.probs, dv);
}

namespace detail {

template <typename T>
void check_key_perturbation(const Matrix<T>& k, const Matrix<T>& dk) {
  require(dk.rows() == k.rows() && dk.cols() == k.cols(),
          "key perturbation must have the shape of K");
  if (!all_finite(dk)) throw NumericalError("non-finite key perturbation");
}

/// O = A V in double.
template <typename T>
Matrix<double> mix_values(const Matrix<double>& a, const Matrix<T>& v) {
  Matrix<double> o(a.rows(), v.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double p = a(i, j);
      if (p == 0.0) continue;
      for (std::size_t c = 0; c < v.cols(); ++c) o(i, c) += p * static_cast<double>(v(j, c));
    }
  return o;
}

}  // namespace detail

/// First-order change of the attention output for a key perturbation dK
/// (pre-RoPE, rotated with the keys): (A o Y) V with X = Q~ dK~^T / sqrt(d)
/// and Y_ij = X_ij - sum_s A_is X_is.
template <typename T>
[[nodiscard]] Matrix<T> first_order_attention_delta(const Matrix<T>& q, const Matrix<T>& k,
                                                    const Matrix<T>& v, const Matrix<T>& dk,
                                                    const AttentionOptions& opt = {}) {
  detail::check_qkv(q, k, v, opt);
  detail::check_key_perturbation(k, dk);
  const Matrix<double> a = attention_probs(q, k, opt);
  const auto [qr, dkr] = detail::rotated_qk(q, dk, opt);
  const std::size_t nq = q.rows();
  const std::size_t nk = k.rows();
  const std::size_t d = v.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));

  Matrix<T> out(nq, d);
  std::vector<double> x(nk);
  std::vector<double> acc(d);
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t end = visible_end(i, nq, nk, opt.causal);
    double mean = 0.0;
    for (std::size_t j = 0; j < end; ++j) {
      x[j] = detail::dot(qr.row(i), dkr.row(j)) * scale;
      mean += a(i, j) * x[j];
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < end; ++j) {
      const double w = a(i, j) * (x[j] - mean);
      const auto vr = v.row(j);
      for (std::size_t c = 0; c < d; ++c) acc[c] += w * static_cast<double>(vr[c]);
    }
    for (std::size_t c = 0; c < d; ++c) out(i, c) = static_cast<T>(acc[c]);
  }
  return out;
}

/// First-order key-side bound. `actual_error` is ||Attn(Q, K + dK, V) - Attn(Q, K, V)||_1
/// evaluated in double.
template <typename T>
[[nodiscard]] PerturbationBoundReport k_perturbation_bound(const Matrix<T>& q, const Matrix<T>& k,
                                                           const Matrix<T>& v, const Matrix<T>& dk,
                                                           const AttentionOptions& opt = {}) {
  detail::check_qkv(q, k, v, opt);
  detail::check_key_perturbation(k, dk);
  const Matrix<double> a = attention_probs(q, k, opt);
  const Matrix<double> o = detail::mix_values(a, v);
  const std::size_t nq = q.rows();
  const std::size_t nk = k.rows();
  const std::size_t d = v.cols();

  std::vector<double> q_norm(nq);
  for (std::size_t i = 0; i < nq; ++i) q_norm[i] = l2_norm(q.row(i));

  PerturbationBoundReport rep;
  rep.per_token_terms.assign(nk, 0.0);
  for (std::size_t j = 0; j < nk; ++j) {
    const double dk_l1 = l1_norm(dk.row(j));
    if (dk_l1 == 0.0) continue;
    const auto vj = v.row(j);
    double factor = 0.0;
    for (std::size_t i = 0; i < nq; ++i) {
      const double aij = a(i, j);
      if (aij == 0.0) continue;
      double col = 0.0;
      for (std::size_t c = 0; c < d; ++c) col += std::abs(static_cast<double>(vj[c]) - o(i, c));
      factor += aij * col * q_norm[i];
    }
    rep.per_token_terms[j] = factor * dk_l1;
    rep.bound_value += rep.per_token_terms[j];
  }

  const Matrix<double> qd = q.template cast<double>();
  const Matrix<double> kd = k.template cast<double>();
  const Matrix<double> vd = v.template cast<double>();
  const Matrix<double> kp = add(kd, dk.template cast<double>());
  rep.actual_error = l1_distance(attention_exact(qd, kp, vd, opt), attention_exact(qd, kd, vd, opt));
  rep.outside_first_order_regime = l1_norm(dk) > 0.5 * l1_norm(k);
  return rep;
}

}  // namespace antkv

#endif  // ANTKV_ANCHOR_SCORE_HPP
