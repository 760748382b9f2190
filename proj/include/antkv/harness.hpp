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

// Experiment driver behind the `antkv` command line: synthetic data,
// calibration, evaluation grids, the RoPE clustering study and anchor sweeps.
// Every entry point is a pure function of its inputs and seed; reports are
// nlohmann::json documents with a schema_version field.

#ifndef ANTKV_HARNESS_HPP
#define ANTKV_HARNESS_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "antkv/anchor_score.hpp"
#include "antkv/attention.hpp"
#include "antkv/centroid_learning.hpp"
#include "antkv/codebook_io.hpp"
#include "antkv/kv_cache.hpp"
#include "antkv/rng.hpp"
#include "antkv/stats.hpp"
#include "antkv/tensor_file.hpp"
#include "antkv/vector_quant.hpp"

namespace antkv::harness {

inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

enum class Structure { gaussian, clustered, heavy_hitter };

[[nodiscard]] inline Structure parse_structure(std::string_view s) {
  if (s == "gaussian") return Structure::gaussian;
  if (s == "clustered") return Structure::clustered;
  if (s == "heavy_hitter" || s == "heavy-hitter") return Structure::heavy_hitter;
  throw InvalidArgument("unknown structure '" + std::string(s) + "'");
}

[[nodiscard]] inline std::string to_string(Structure s) {
  switch (s) {
    case Structure::gaussian: return "gaussian";
    case Structure::clustered: return "clustered";
    case Structure::heavy_hitter: return "heavy_hitter";
  }
  return "gaussian";
}

struct GenOptions {
  std::uint64_t seed = 0;
  std::size_t n = 256;
  std::size_t d = 64;
  std::size_t heads = 1;
  Structure structure = Structure::gaussian;
  /// heavy_hitter: planted token count; 0 means ceil(1% of n).
  std::size_t planted = 0;
  /// clustered: number of sub-vector centres and their width.
  std::size_t clusters = 16;
  std::size_t cluster_dsub = 8;
};

struct HeadData {
  HeadTensor q;
  HeadTensor k;  // pre-RoPE
  HeadTensor v;
  std::vector<std::int64_t> positions;
  std::vector<std::size_t> planted;  // heavy_hitter only, sorted
};

struct Dataset {
  std::vector<HeadData> heads;
};

namespace detail {

inline std::vector<std::int64_t> iota_positions(std::size_t n) {
  std::vector<std::int64_t> p(n);
  std::iota(p.begin(), p.end(), std::int64_t{0});
  return p;
}

/// k distinct indices from [lo, hi), sorted.
inline std::vector<std::size_t> sample_distinct(Rng& rng, std::size_t lo, std::size_t hi, std::size_t k) {
  std::vector<std::size_t> pool(hi - lo);
  std::iota(pool.begin(), pool.end(), lo);
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline void fill_clustered(HeadTensor& x, const Matrix<float>& centers, std::size_t dsub, Rng& rng) {
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t s = 0; s < x.cols(); s += dsub) {
      const auto c = centers.row(rng.index(centers.rows()));
      for (std::size_t k = 0; k < dsub; ++k)
        x(t, s + k) = static_cast<float>(c[k] + 0.05 * rng.normal());
    }
}

}  // namespace detail

/// Deterministic synthetic heads.
///
/// heavy_hitter: every query carries a component along a direction u living in
/// the lowest-frequency RoPE channels, and the planted keys are aligned with u,
/// so the planted tokens draw a large share of every row's attention mass
/// regardless of relative position. Token 0 is always planted (sink-like).
[[nodiscard]] inline Dataset generate(const GenOptions& opt) {
  antkv::detail::require(opt.n >= 1, "gen: n must be >= 1");
  antkv::detail::require(opt.d >= 2 && opt.d % 2 == 0, "gen: d must be even and >= 2");
  antkv::detail::require(opt.heads >= 1, "gen: heads must be >= 1");
  Dataset ds;
  for (std::size_t h = 0; h < opt.heads; ++h) {
    Rng rng(opt.seed, "data", h);
    HeadData hd;
    hd.positions = detail::iota_positions(opt.n);
    hd.q = rng.normal_matrix(opt.n, opt.d);
    hd.k = rng.normal_matrix(opt.n, opt.d);
    hd.v = rng.normal_matrix(opt.n, opt.d);
    switch (opt.structure) {
      case Structure::gaussian: break;
      case Structure::clustered: {
        antkv::detail::require(opt.cluster_dsub >= 1 && opt.d % opt.cluster_dsub == 0,
                        "gen: cluster width must divide d");
        antkv::detail::require(opt.clusters >= 1, "gen: clusters must be >= 1");
        const Matrix<float> kc = rng.normal_matrix(opt.clusters, opt.cluster_dsub, 3.0);
        const Matrix<float> vc = rng.normal_matrix(opt.clusters, opt.cluster_dsub, 3.0);
        detail::fill_clustered(hd.k, kc, opt.cluster_dsub, rng);
        detail::fill_clustered(hd.v, vc, opt.cluster_dsub, rng);
        break;
      }
      case Structure::heavy_hitter: {
        const std::size_t count =
            opt.planted > 0 ? std::min(opt.planted, opt.n) : std::max<std::size_t>(1, anchor_budget(0.01, opt.n));
        hd.planted = {0};
        const auto rest = detail::sample_distinct(rng, 1, std::max<std::size_t>(2, opt.n / 2), count - 1);
        hd.planted.insert(hd.planted.end(), rest.begin(), rest.end());
        hd.planted.resize(std::min(hd.planted.size(), opt.n));

        const std::size_t span = std::min<std::size_t>(8, opt.d);
        std::vector<double> u(opt.d, 0.0);
        double norm = 0.0;
        for (std::size_t c = opt.d - span; c < opt.d; ++c) {
          u[c] = rng.normal();
          norm += u[c] * u[c];
        }
        for (double& x : u) x /= std::sqrt(norm);
        const double q_gain = 5.0;
        const double k_gain = std::sqrt(static_cast<double>(opt.d));
        for (std::size_t t = 0; t < opt.n; ++t)
          for (std::size_t c = 0; c < opt.d; ++c) hd.q(t, c) += static_cast<float>(q_gain * u[c]);
        for (const std::size_t p : hd.planted)
          for (std::size_t c = 0; c < opt.d; ++c)
            hd.k(p, c) = static_cast<float>(0.5 * hd.k(p, c) + k_gain * u[c]);
        break;
      }
    }
    ds.heads.push_back(std::move(hd));
  }
  return ds;
}

struct DatasetFiles {
  TensorFile q;
  TensorFile k;
  TensorFile v;
};

[[nodiscard]] inline DatasetFiles to_files(const Dataset& ds) {
  std::vector<HeadTensor> q, k, v;
  for (const auto& h : ds.heads) {
    q.push_back(h.q);
    k.push_back(h.k);
    v.push_back(h.v);
  }
  const auto pos = ds.heads.front().positions;
  return {TensorFile::from_heads(q, "Q", pos), TensorFile::from_heads(k, "K", pos),
          TensorFile::from_heads(v, "V", pos)};
}

[[nodiscard]] inline Dataset from_files(const TensorFile& q, const TensorFile& k, const TensorFile& v) {
  if (q.shape != k.shape || k.shape != v.shape)
    throw FormatError("Q, K and V tensor files must have identical shapes");
  Dataset ds;
  for (std::size_t h = 0; h < k.heads(); ++h)
    ds.heads.push_back({q.head(h), k.head(h), v.head(h), k.token_positions(), {}});
  return ds;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct CalibrateOptions {
  VqConfig vq;
  std::uint64_t seed = 0;
  CodebookSharing sharing = CodebookSharing::shared;
  double epsilon_floor = 1e-8;
  std::size_t max_iter = 50;
  double tol = 1e-6;
  bool causal = true;
  bool use_rope = true;
  double theta_base = kDefaultRopeBase;
  bool token_aware = true;
};

/// One codebook set per head, or a single pooled set shared by all heads.
struct CalibrationOutcome {
  std::vector<LearnedCodebooks> learned;
  nlohmann::json report;
};

[[nodiscard]] inline nlohmann::json to_json(const TrainingReport& r) {
  return {
      {"objective_trace", r.objective_trace},
      {"iterations", r.iterations},
      {"seed", r.seed},
      {"weight_stats", {{"min", r.weight_stats.min}, {"max", r.weight_stats.max}, {"mean", r.weight_stats.mean}}},
      {"unclustered_objective", r.unclustered_objective},
      {"final_objective", r.objective_trace.empty() ? 0.0 : r.objective_trace.back()},
      {"surplus_centroids", r.surplus_centroids},
  };
}

/// Trains codebooks on every (dataset, head) sample. With `pool_heads` all
/// heads share one set; otherwise head h is trained on the h-th head of every
/// dataset, with its own seed stream.
[[nodiscard]] inline CalibrationOutcome calibrate(const std::vector<Dataset>& data, const CalibrateOptions& opt,
                                                  bool pool_heads = false) {
  antkv::detail::require(!data.empty(), "calibrate: no calibration data");
  const std::size_t heads = data.front().heads.size();
  for (const auto& ds : data)
    antkv::detail::require(ds.heads.size() == heads, "calibrate: inputs differ in head count");
  LearnOptions lopt;
  lopt.config = opt.vq;
  lopt.sharing = opt.sharing;
  lopt.epsilon_floor = opt.epsilon_floor;
  lopt.max_iter = opt.max_iter;
  lopt.tol = opt.tol;
  lopt.token_aware = opt.token_aware;

  CalibrationOutcome out;
  nlohmann::json sets = nlohmann::json::array();
  const std::size_t groups = pool_heads ? 1 : heads;
  for (std::size_t g = 0; g < groups; ++g) {
    CalibrationSet calib;
    for (const auto& ds : data)
      for (std::size_t h = 0; h < heads; ++h)
        if (pool_heads || h == g)
          calib.samples.push_back({ds.heads[h].q, ds.heads[h].k, ds.heads[h].v, ds.heads[h].positions});
    const std::uint64_t seed = pool_heads ? opt.seed : stream_seed(opt.seed, "head", g);
    SurrogateLoss loss{stream_seed(seed, "surrogate"), opt.causal, opt.use_rope, opt.theta_base};
    out.learned.push_back(learn_kv_codebooks(calib, lopt, loss, seed));
    nlohmann::json keys = nlohmann::json::array();
    nlohmann::json values = nlohmann::json::array();
    for (const auto& r : out.learned.back().key_reports) keys.push_back(to_json(r));
    for (const auto& r : out.learned.back().value_reports) values.push_back(to_json(r));
    sets.push_back({{"head", pool_heads ? nlohmann::json("all") : nlohmann::json(g)},
                    {"samples", calib.samples.size()},
                    {"key", keys},
                    {"value", values}});
  }
  out.report = {
      {"schema_version", kReportSchemaVersion},
      {"command", "calibrate"},
      {"vq", opt.vq.name()},
      {"seed", opt.seed},
      {"sharing", to_string(opt.sharing)},
      {"pool_heads", pool_heads},
      {"token_aware", opt.token_aware},
      {"epsilon_floor", opt.epsilon_floor},
      {"codebook_sets", sets},
  };
  return out;
}

[[nodiscard]] inline CalibrationOutcome calibrate(const Dataset& data, const CalibrateOptions& opt,
                                                  bool pool_heads = false) {
  return calibrate(std::vector<Dataset>{data}, opt, pool_heads);
}

/// Codebooks per head; a single entry is shared by every head.
using HeadCodebooks = std::vector<KvCodebooks>;

[[nodiscard]] inline HeadCodebooks codebooks_of(const CalibrationOutcome& c) {
  HeadCodebooks out;
  for (const auto& l : c.learned) out.push_back(l.codebooks);
  return out;
}

/// Writes `dir/codebooks.json` for a single set, else `dir/head_<h>/codebooks.json`.
inline void save_head_codebooks(const HeadCodebooks& books, const std::filesystem::path& dir) {
  if (books.size() == 1) {
    save_kv_codebooks(books.front(), dir);
    return;
  }
  for (std::size_t h = 0; h < books.size(); ++h)
    save_kv_codebooks(books[h], dir / ("head_" + std::to_string(h)));
}

[[nodiscard]] inline HeadCodebooks load_head_codebooks(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir / "codebooks.json")) return {load_kv_codebooks(dir)};
  HeadCodebooks out;
  for (std::size_t h = 0; std::filesystem::exists(dir / ("head_" + std::to_string(h)) / "codebooks.json"); ++h)
    out.push_back(load_kv_codebooks(dir / ("head_" + std::to_string(h))));
  if (out.empty()) throw FormatError("missing codebooks in " + dir.string());
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Which rows are quantized when measuring a single token's effect on the output.
enum class PerTokenMode { joint, k_only, v_only };

[[nodiscard]] inline PerTokenMode parse_per_token_mode(std::string_view s) {
  if (s == "joint") return PerTokenMode::joint;
  if (s == "k_only" || s == "k") return PerTokenMode::k_only;
  if (s == "v_only" || s == "v") return PerTokenMode::v_only;
  throw InvalidArgument("unknown per-token mode '" + std::string(s) + "'");
}

[[nodiscard]] inline std::string to_string(PerTokenMode m) {
  switch (m) {
    case PerTokenMode::joint: return "joint";
    case PerTokenMode::k_only: return "k_only";
    case PerTokenMode::v_only: return "v_only";
  }
  return "joint";
}

struct EvalOptions {
  std::vector<VqConfig> vqs;
  std::vector<double> anchor_fractions{0.0, 0.01};
  std::size_t trials = 50;  // random-anchor controls per grid point
  std::uint64_t seed = 0;
  std::size_t window = 0;
  AnchorPolicy policy = AnchorPolicy::combined;
  bool use_rope = true;
  double theta_base = kDefaultRopeBase;
  BlockSizes blocks{64, 64};
  bool per_token = true;
  PerTokenMode per_token_mode = PerTokenMode::joint;
  bool timing = false;
};

using CodebookMap = std::map<std::string, HeadCodebooks>;

[[nodiscard]] inline AttentionOptions causal_options(const HeadData& h, bool use_rope, double theta) {
  AttentionOptions opt;
  opt.causal = true;
  if (use_rope) opt.rope = RopeSpec::self(h.positions, theta);
  return opt;
}

[[nodiscard]] inline CacheConfig cache_config(const VqConfig& vq, double fraction, std::size_t window,
                                              AnchorPolicy policy, bool use_rope, double theta,
                                              BlockSizes blocks) {
  CacheConfig cfg;
  cfg.vq = vq;
  cfg.anchor_fraction = fraction;
  cfg.window_size = window;
  cfg.policy = policy;
  cfg.use_rope = use_rope;
  cfg.theta_base = theta;
  cfg.blocks = blocks;
  return cfg;
}

/// Output error (entrywise L1 against exact attention) of the quantized
/// prefill path, for AnS-selected anchors or a given anchor set.
struct PrefillEvaluation {
  double attention_l1_error = 0.0;
  AnchorSelection anchors;
  DequantizedKV dequantized;
};

[[nodiscard]] inline PrefillEvaluation evaluate_prefill(
    const HeadData& h, const KvCodebooks& books, const CacheConfig& cfg, const HeadTensor& exact,
    std::optional<std::vector<std::size_t>> anchors = std::nullopt) {
  QuantizedKVCache cache(cfg, books);
  PrefillResult res = anchors ? cache.prefill_with_anchors(h.q, h.k, h.v, h.positions, *anchors)
                              : cache.prefill(h.q, h.k, h.v, h.positions);
  return {l1_distance(res.output, exact), res.anchors, cache.dequantize()};
}

/// Output error when only token j is quantized, for every j. Uses a rank-one
/// update of each affected softmax row, so the whole profile costs O(n^2 d).
[[nodiscard]] inline std::vector<double> per_token_errors(const HeadData& h, const KvCodebooks& books,
                                                          PerTokenMode mode, bool use_rope,
                                                          double theta) {
  const AttentionOptions opt = causal_options(h, use_rope, theta);
  const std::size_t n = h.k.rows();
  const std::size_t d = h.v.cols();
  const Matrix<double> logits = attention_logits(h.q, h.k, opt);
  const Matrix<double> kq = books.key.reconstruct(h.k).cast<double>();
  const Matrix<double> vq = books.value.reconstruct(h.v).cast<double>();
  const Matrix<double> qd = h.q.cast<double>();
  Matrix<double> qr = qd;
  Matrix<double> kr = kq;
  if (opt.rope) {
    qr = apply_rope(qd, std::span<const std::int64_t>(h.positions), theta);
    kr = apply_rope(kq, std::span<const std::int64_t>(h.positions), theta);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(h.q.cols()));

  std::vector<double> row_max(n), row_sum(n, 0.0);
  Matrix<double> acc(n, d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t end = visible_end(i, n, n, true);
    row_max[i] = *std::max_element(logits.row(i).begin(), logits.row(i).begin() + static_cast<std::ptrdiff_t>(end));
    for (std::size_t j = 0; j < end; ++j) {
      const double e = std::exp(logits(i, j) - row_max[i]);
      row_sum[i] += e;
      for (std::size_t c = 0; c < d; ++c) acc(i, c) += e * static_cast<double>(h.v(j, c));
    }
  }

  std::vector<double> errors(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const bool swap_k = mode != PerTokenMode::v_only;
    const bool swap_v = mode != PerTokenMode::k_only;
    for (std::size_t i = j; i < n; ++i) {
      const double e = std::exp(logits(i, j) - row_max[i]);
      const double s_new = swap_k ? antkv::detail::dot(qr.row(i), kr.row(j)) * scale : logits(i, j);
      const double e_new = std::exp(s_new - row_max[i]);
      const double l_new = row_sum[i] - e + e_new;
      double err = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double v_old = h.v(j, c);
        const double v_new = swap_v ? vq(j, c) : v_old;
        const double o_old = acc(i, c) / row_sum[i];
        const double o_new = (acc(i, c) - e * v_old + e_new * v_new) / l_new;
        err += std::abs(o_new - o_old);
      }
      errors[j] += err;
    }
  }
  return errors;
}

/// AnS ranking that matches a per-token mode: AnS(K), AnS(V) or their sum.
[[nodiscard]] inline std::vector<double> ans_for_mode(const AnchorScores& s, PerTokenMode mode) {
  switch (mode) {
    case PerTokenMode::k_only: return s.ans_k;
    case PerTokenMode::v_only: return s.ans_v;
    case PerTokenMode::joint: break;
  }
  std::vector<double> out(s.ans_v.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = s.ans_k[j] + s.ans_v[j];
  return out;
}

[[nodiscard]] inline AnchorScores direct_scores(const HeadData& h, const AttentionOptions& opt) {
  std::vector<double> qn(h.q.rows());
  for (std::size_t i = 0; i < qn.size(); ++i) qn[i] = l2_norm(h.q.row(i));
  return anchor_scores(attention_probs(h.q, h.k, opt), qn);
}

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline const KvCodebooks& books_for(const CodebookMap& books, const VqConfig& vq, std::size_t head) {
  const auto it = books.find(vq.name());
  if (it == books.end() || it->second.empty()) throw FormatError("missing codebooks for " + vq.name());
  if (it->second.size() == 1) return it->second.front();
  if (head >= it->second.size())
    throw FormatError("codebooks for " + vq.name() + " cover " + std::to_string(it->second.size()) +
                      " heads, input has more");
  return it->second[head];
}

}  // namespace detail

/// Evaluation grid: one record per (VQ setting, anchor fraction), each
/// averaging over heads.
[[nodiscard]] inline nlohmann::json evaluate(const Dataset& data, const CodebookMap& books,
                                             const EvalOptions& opt) {
  antkv::detail::require(!opt.vqs.empty(), "eval: no VQ settings");
  antkv::detail::require(!opt.anchor_fractions.empty(), "eval: no anchor fractions");
  antkv::detail::require(!data.heads.empty(), "eval: no heads");
  for (const auto& vq : opt.vqs)
    for (std::size_t h = 0; h < data.heads.size(); ++h) (void)detail::books_for(books, vq, h);

  struct HeadCache {
    AttentionOptions attn;
    HeadTensor exact;
    Matrix<double> probs;
    AnchorScores scores;
  };
  std::vector<HeadCache> hc;
  for (const auto& h : data.heads) {
    HeadCache c;
    c.attn = causal_options(h, opt.use_rope, opt.theta_base);
    c.exact = attention_exact(h.q, h.k, h.v, c.attn);
    c.probs = attention_probs(h.q, h.k, c.attn);
    c.scores = direct_scores(h, c.attn);
    hc.push_back(std::move(c));
  }
  const std::size_t n = data.heads.front().k.rows();
  const std::size_t topk = std::max<std::size_t>(1, anchor_budget(0.01, n));

  nlohmann::json records = nlohmann::json::array();
  for (std::size_t vi = 0; vi < opt.vqs.size(); ++vi) {
    const VqConfig& vq = opt.vqs[vi];
    nlohmann::json agreement = nullptr;
    if (opt.per_token) {
      std::vector<double> rho, overlap;
      for (std::size_t h = 0; h < data.heads.size(); ++h) {
        const auto errs = per_token_errors(data.heads[h], detail::books_for(books, vq, h), opt.per_token_mode, opt.use_rope, opt.theta_base);
        const auto score = ans_for_mode(hc[h].scores, opt.per_token_mode);
        rho.push_back(stats::spearman(errs, score));
        overlap.push_back(stats::top_k_overlap(errs, score, topk));
      }
      agreement = {{"mode", to_string(opt.per_token_mode)},
                   {"spearman", stats::mean(rho)},
                   {"top_k_overlap", stats::mean(overlap)},
                   {"top_k", topk},
                   {"per_head_spearman", rho}};
    }

    for (std::size_t fi = 0; fi < opt.anchor_fractions.size(); ++fi) {
      const double fraction = opt.anchor_fractions[fi];
      const auto t0 = std::chrono::steady_clock::now();
      const CacheConfig cfg =
          cache_config(vq, fraction, opt.window, opt.policy, opt.use_rope, opt.theta_base, opt.blocks);
      std::vector<double> errors, vb, kb, fo;
      nlohmann::json per_head = nlohmann::json::array();
      std::size_t budget = 0;
      for (std::size_t h = 0; h < data.heads.size(); ++h) {
        const HeadData& hd = data.heads[h];
        const PrefillEvaluation pe = evaluate_prefill(hd, detail::books_for(books, vq, h), cfg, hc[h].exact);
        budget = pe.anchors.indices.size();
        const HeadTensor dk = subtract(pe.dequantized.k, hd.k);
        const HeadTensor dv = subtract(pe.dequantized.v, hd.v);
        const auto vrep = v_perturbation_bound(hc[h].probs, dv);
        const auto krep = k_perturbation_bound(hd.q, hd.k, hd.v, dk, hc[h].attn);
        const Matrix<double> qd = hd.q.cast<double>();
        const Matrix<double> kd = hd.k.cast<double>();
        const Matrix<double> vd = hd.v.cast<double>();
        const Matrix<double> dkd = dk.cast<double>();
        const Matrix<double> exact_delta =
            subtract(attention_exact(qd, add(kd, dkd), vd, hc[h].attn), attention_exact(qd, kd, vd, hc[h].attn));
        const double residual =
            l1_distance(exact_delta, first_order_attention_delta(qd, kd, vd, dkd, hc[h].attn));
        errors.push_back(pe.attention_l1_error);
        vb.push_back(vrep.bound_value);
        kb.push_back(krep.bound_value);
        fo.push_back(residual);
        per_head.push_back({{"head", h},
                            {"attention_l1_error", pe.attention_l1_error},
                            {"v_bound", vrep.bound_value},
                            {"v_actual", vrep.actual_error},
                            {"k_bound", krep.bound_value},
                            {"k_actual", krep.actual_error},
                            {"first_order_residual", residual},
                            {"anchors", pe.anchors.indices}});
      }
      const double ans_error = stats::mean(errors);

      nlohmann::json controls = nullptr;
      if (opt.trials > 0 && budget > 0 && budget < n) {
        std::vector<double> trial_errors;
        for (std::size_t t = 0; t < opt.trials; ++t) {
          std::vector<double> per;
          for (std::size_t h = 0; h < data.heads.size(); ++h) {
            Rng rng(opt.seed, "controls/" + vq.name() + "/" + std::to_string(fi), t * data.heads.size() + h);
            const auto random_anchors = detail::sample_distinct(rng, 0, n, budget);
            per.push_back(evaluate_prefill(data.heads[h], detail::books_for(books, vq, h), cfg, hc[h].exact,
                                           random_anchors)
                              .attention_l1_error);
          }
          trial_errors.push_back(stats::mean(per));
        }
        const auto beaten = static_cast<double>(std::count_if(
            trial_errors.begin(), trial_errors.end(), [&](double e) { return e > ans_error; }));
        controls = {{"trials", opt.trials},
                    {"mean", stats::mean(trial_errors)},
                    {"p10", stats::percentile(trial_errors, 10.0)},
                    {"ans_beats_fraction", beaten / static_cast<double>(trial_errors.size())},
                    {"errors", trial_errors}};
      }

      records.push_back({
          {"vq", vq.name()},
          {"bits_per_element", bits_per_element(vq).value()},
          {"anchor_fraction", fraction},
          {"anchor_count", budget},
          {"seed", opt.seed},
          {"attention_l1_error", ans_error},
          {"v_bound", stats::mean(vb)},
          {"k_bound", stats::mean(kb)},
          {"first_order_residual", stats::mean(fo)},
          {"ans_rank_agreement", agreement},
          {"random_controls", controls},
          {"runtime_ms", opt.timing ? nlohmann::json(detail::elapsed_ms(t0)) : nlohmann::json(nullptr)},
          {"per_head", per_head},
      });
    }
  }
  return {{"schema_version", kReportSchemaVersion},
          {"command", "eval"},
          {"seed", opt.seed},
          {"heads", data.heads.size()},
          {"tokens", n},
          {"window", opt.window},
          {"policy", to_string(opt.policy)},
          {"records", records}};
}

// ---------------------------------------------------------------------------
// Pre- vs post-RoPE clustering
// ---------------------------------------------------------------------------

struct RopeStatsOptions {
  VqConfig vq;
  std::uint64_t seed = 0;
  double theta_base = kDefaultRopeBase;
  std::size_t max_iter = 50;
};

struct ClusterStats {
  double mean_intra_cluster_variance = 0.0;
  double mean_reconstruction_error = 0.0;
  double mean_inter_centroid_distance = 0.0;
  std::size_t nonempty_clusters = 0;
};

[[nodiscard]] inline ClusterStats cluster_stats(const Matrix<float>& points, const KMeansResult& res) {
  const std::size_t m = res.codebook.centroids.rows();
  std::vector<double> within(m, 0.0);
  std::vector<std::size_t> count(m, 0);
  ClusterStats s;
  for (std::size_t j = 0; j < points.rows(); ++j) {
    const auto a = res.assignment[j];
    const double e = squared_distance(points.row(j), res.codebook.centroid(a));
    within[a] += e;
    ++count[a];
    s.mean_reconstruction_error += e;
  }
  s.mean_reconstruction_error /= static_cast<double>(points.rows());
  for (std::size_t c = 0; c < m; ++c) {
    if (count[c] == 0) continue;
    ++s.nonempty_clusters;
    s.mean_intra_cluster_variance += within[c] / static_cast<double>(count[c]);
  }
  if (s.nonempty_clusters > 0) s.mean_intra_cluster_variance /= static_cast<double>(s.nonempty_clusters);
  double dist = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < m; ++a) {
    if (count[a] == 0) continue;
    for (std::size_t b = a + 1; b < m; ++b) {
      if (count[b] == 0) continue;
      dist += std::sqrt(squared_distance(res.codebook.centroid(a), res.codebook.centroid(b)));
      ++pairs;
    }
  }
  s.mean_inter_centroid_distance = pairs == 0 ? 0.0 : dist / static_cast<double>(pairs);
  return s;
}

[[nodiscard]] inline nlohmann::json to_json(const ClusterStats& s) {
  return {{"mean_intra_cluster_variance", s.mean_intra_cluster_variance},
          {"mean_reconstruction_error", s.mean_reconstruction_error},
          {"mean_inter_centroid_distance", s.mean_inter_centroid_distance},
          {"nonempty_clusters", s.nonempty_clusters}};
}

/// Clusters pre-RoPE and post-RoPE key sub-vectors with the same m, seed and
/// iteration budget (uniform weights) and reports both.
[[nodiscard]] inline nlohmann::json rope_stats(const std::vector<HeadTensor>& keys,
                                               std::span<const std::int64_t> positions,
                                               const RopeStatsOptions& opt) {
  antkv::detail::require(!keys.empty(), "rope-stats: no key heads");
  const std::size_t d = keys.front().cols();
  antkv::detail::require(d >= 2 && d % 2 == 0, "rope-stats: d must be even");
  opt.vq.validate_for(d);
  std::vector<float> pre, post;
  for (const auto& k : keys) {
    pre.insert(pre.end(), k.values().begin(), k.values().end());
    const HeadTensor r = apply_rope(k, positions, opt.theta_base);
    post.insert(post.end(), r.values().begin(), r.values().end());
  }
  const std::size_t count = pre.size() / opt.vq.d_sub;
  const Matrix<float> pre_pts(count, opt.vq.d_sub, std::move(pre));
  const Matrix<float> post_pts(count, opt.vq.d_sub, std::move(post));
  const std::vector<double> w(count, 1.0);
  const KMeansOptions km{stream_seed(opt.seed, "rope-stats"), opt.max_iter, 1e-6};
  const KMeansResult pre_res = weighted_kmeans(pre_pts, w, opt.vq.m, km);
  const KMeansResult post_res = weighted_kmeans(post_pts, w, opt.vq.m, km);
  return {{"schema_version", kReportSchemaVersion},
          {"command", "rope-stats"},
          {"vq", opt.vq.name()},
          {"seed", opt.seed},
          {"theta_base", opt.theta_base},
          {"points", count},
          {"pre_rope", to_json(cluster_stats(pre_pts, pre_res))},
          {"post_rope", to_json(cluster_stats(post_pts, post_res))}};
}

// ---------------------------------------------------------------------------
// Anchor-count sweep
// ---------------------------------------------------------------------------

struct SweepOptions {
  std::vector<VqConfig> vqs;
  std::vector<double> fractions{0.0, 0.01, 0.02, 0.05, 0.10};
  std::vector<std::uint64_t> seeds;
  std::size_t window = 0;
  AnchorPolicy policy = AnchorPolicy::combined;
  bool use_rope = true;
  double theta_base = kDefaultRopeBase;
  BlockSizes blocks{64, 64};
};

/// Data for one sweep seed (fixed inputs simply ignore the seed).
using DataProvider = std::function<Dataset(std::uint64_t)>;

/// One record per (anchor fraction, VQ setting, seed) plus per-fraction means.
[[nodiscard]] inline nlohmann::json anchor_sweep(const DataProvider& provider, const CodebookMap& books,
                                                 const SweepOptions& opt) {
  antkv::detail::require(!opt.fractions.empty(), "anchor-sweep: empty fraction list");
  antkv::detail::require(!opt.seeds.empty(), "anchor-sweep: empty seed list");
  antkv::detail::require(!opt.vqs.empty(), "anchor-sweep: no VQ settings");
  for (const auto& vq : opt.vqs) (void)detail::books_for(books, vq, 0);

  // errors[vq][fraction] over seeds
  std::vector<std::vector<std::vector<double>>> errors(
      opt.vqs.size(), std::vector<std::vector<double>>(opt.fractions.size()));
  nlohmann::json records = nlohmann::json::array();
  for (const auto seed : opt.seeds) {
    const Dataset data = provider(seed);
    std::vector<HeadTensor> exact;
    for (const auto& h : data.heads)
      exact.push_back(attention_exact(h.q, h.k, h.v, causal_options(h, opt.use_rope, opt.theta_base)));
    for (std::size_t vi = 0; vi < opt.vqs.size(); ++vi) {
      for (std::size_t fi = 0; fi < opt.fractions.size(); ++fi) {
        const CacheConfig cfg = cache_config(opt.vqs[vi], opt.fractions[fi], opt.window, opt.policy,
                                             opt.use_rope, opt.theta_base, opt.blocks);
        std::vector<double> per_head;
        std::size_t budget = 0;
        for (std::size_t h = 0; h < data.heads.size(); ++h) {
          const auto pe = evaluate_prefill(data.heads[h], detail::books_for(books, opt.vqs[vi], h), cfg, exact[h]);
          per_head.push_back(pe.attention_l1_error);
          budget = pe.anchors.indices.size();
        }
        const double e = stats::mean(per_head);
        errors[vi][fi].push_back(e);
        records.push_back({{"vq", opt.vqs[vi].name()},
                           {"bits_per_element", bits_per_element(opt.vqs[vi]).value()},
                           {"anchor_fraction", opt.fractions[fi]},
                           {"anchor_count", budget},
                           {"seed", seed},
                           {"attention_l1_error", e},
                           {"per_head_errors", per_head}});
      }
    }
  }
  nlohmann::json summary = nlohmann::json::array();
  for (std::size_t vi = 0; vi < opt.vqs.size(); ++vi) {
    nlohmann::json means = nlohmann::json::array();
    bool non_increasing = true;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t fi = 0; fi < opt.fractions.size(); ++fi) {
      const double m = stats::mean(errors[vi][fi]);
      non_increasing = non_increasing && m <= prev;
      prev = m;
      means.push_back({{"anchor_fraction", opt.fractions[fi]}, {"mean_attention_l1_error", m},
                       {"seeds", errors[vi][fi].size()}});
    }
    summary.push_back({{"vq", opt.vqs[vi].name()}, {"means", means}, {"non_increasing", non_increasing}});
  }
  return {{"schema_version", kReportSchemaVersion},
          {"command", "anchor-sweep"},
          {"window", opt.window},
          {"policy", to_string(opt.policy)},
          {"records", records},
          {"summary", summary}};
}

// ---------------------------------------------------------------------------
// CSV flattening
// ---------------------------------------------------------------------------

namespace detail {

inline void flatten(const nlohmann::json& j, const std::string& prefix,
                    std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else if (j.is_array()) {
    return;  // per-head and per-trial detail stays in the JSON report
  } else if (j.is_string()) {
    out.emplace_back(prefix, j.get<std::string>());
  } else if (j.is_null()) {
    out.emplace_back(prefix, "");
  } else {
    out.emplace_back(prefix, j.dump());
  }
}

}  // namespace detail

/// One CSV row per report record; scalar fields only, nested objects dotted.
[[nodiscard]] inline std::string records_to_csv(const nlohmann::json& report) {
  std::vector<std::string> columns;
  std::vector<std::map<std::string, std::string>> rows;
  for (const auto& rec : report.at("records")) {
    std::vector<std::pair<std::string, std::string>> flat;
    detail::flatten(rec, "", flat);
    std::map<std::string, std::string> row;
    for (auto& [k, v] : flat) {
      if (std::find(columns.begin(), columns.end(), k) == columns.end()) columns.push_back(k);
      row[k] = v;
    }
    rows.push_back(std::move(row));
  }
  std::ostringstream os;
  for (std::size_t c = 0; c < columns.size(); ++c) os << (c ? "," : "") << columns[c];
  os << "\n";
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto it = row.find(columns[c]);
      os << (c ? "," : "") << (it == row.end() ? "" : it->second);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace antkv::harness

#endif  // ANTKV_HARNESS_HPP
