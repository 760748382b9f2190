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

// Offline codebook learning. The loss change caused by replacing K and V by
// their reconstructions is, to first order, sum_j <dL/dK_j, K_j - vq(K_j)> +
// <dL/dV_j, V_j - vq(V_j)>, so sub-vectors whose gradients are large get a
// proportionally larger say in where centroids go.

#ifndef ANTKV_CENTROID_LEARNING_HPP
#define ANTKV_CENTROID_LEARNING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "antkv/attention.hpp"
#include "antkv/rng.hpp"
#include "antkv/vector_quant.hpp"

namespace antkv {

template <typename T>
struct KvGradients {
  Matrix<T> dK;  // pre-RoPE
  Matrix<T> dV;
};

/// Gradients of L = <dO, Attn(Q, K, V)> with respect to K and V.
///
/// dV = A^T dO. For dK each query row goes through the softmax Jacobian,
/// dS_ij = A_ij (g_ij - sum_s A_is g_is) with g_ij = dO_i . V_j, then through
/// the 1/sqrt(d) scaling, the product with Q~ and finally the transpose of the
/// key rotation.
template <typename T>
[[nodiscard]] KvGradients<T> attention_backward(const Matrix<T>& q, const Matrix<T>& k,
                                                const Matrix<T>& v, const Matrix<T>& d_out,
                                                const AttentionOptions& opt = {}) {
  detail::check_qkv(q, k, v, opt);
  detail::require(d_out.rows() == q.rows() && d_out.cols() == v.cols(),
                  "attention_backward: upstream gradient shape must match the output");
  const Matrix<double> a = attention_probs(q, k, opt);
  const auto [qr, kr] = detail::rotated_qk(q, k, opt);
  const std::size_t nq = q.rows();
  const std::size_t nk = k.rows();
  const std::size_t d = q.cols();
  const std::size_t dv = v.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Matrix<double> dk_rot(nk, d, 0.0);
  Matrix<double> dval(nk, dv, 0.0);
  std::vector<double> g(nk);
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t end = visible_end(i, nq, nk, opt.causal);
    const auto go = d_out.row(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < end; ++j) {
      g[j] = detail::dot(go, v.row(j));
      mean += a(i, j) * g[j];
      auto dvr = dval.row(j);
      for (std::size_t c = 0; c < dv; ++c) dvr[c] += a(i, j) * static_cast<double>(go[c]);
    }
    const auto qi = qr.row(i);
    for (std::size_t j = 0; j < end; ++j) {
      const double ds = a(i, j) * (g[j] - mean) * scale;
      auto dkr = dk_rot.row(j);
      for (std::size_t c = 0; c < d; ++c) dkr[c] += ds * static_cast<double>(qi[c]);
    }
  }
  if (opt.rope)
    dk_rot = apply_rope_inverse(dk_rot, std::span<const std::int64_t>(opt.rope->k_positions),
                                opt.rope->theta_base);
  return {dk_rot.template cast<T>(), dval.template cast<T>()};
}

/// Clustering weight of every sub-vector, token-major (token t, position s at t*P + s).
struct ClusterWeights {
  std::vector<double> weights;
  double epsilon_floor = 1e-8;
};

/// weight = epsilon_floor + ||gradient sub-vector||^2
template <typename T>
[[nodiscard]] ClusterWeights gradient_token_weights(const Matrix<T>& grads, std::size_t d_sub,
                                                    double epsilon_floor = 1e-8) {
  detail::require(epsilon_floor >= 0.0, "gradient_token_weights: epsilon_floor must be >= 0");
  detail::require(d_sub >= 1 && grads.cols() % d_sub == 0,
                  "gradient_token_weights: d_sub must divide d");
  if (!all_finite(grads)) throw NumericalError("gradient_token_weights: non-finite gradient");
  ClusterWeights out;
  out.epsilon_floor = epsilon_floor;
  out.weights.reserve(grads.rows() * grads.cols() / d_sub);
  for (std::size_t t = 0; t < grads.rows(); ++t) {
    const auto r = grads.row(t);
    for (std::size_t s = 0; s < r.size(); s += d_sub) {
      double sq = 0.0;
      for (std::size_t c = s; c < s + d_sub; ++c) sq += static_cast<double>(r[c]) * static_cast<double>(r[c]);
      out.weights.push_back(epsilon_floor + sq);
    }
  }
  return out;
}

struct CalibrationSample {
  HeadTensor q;
  HeadTensor k;  // pre-RoPE
  HeadTensor v;
  std::vector<std::int64_t> positions;
};

struct CalibrationSet {
  std::vector<CalibrationSample> samples;
};

/// Desk-scale stand-in for the model loss: L = <G, Attn(Q, K, V)> with G
/// standard normal, drawn per sample from `seed`.
struct SurrogateLoss {
  std::uint64_t seed = 0;
  bool causal = true;
  bool use_rope = true;
  double theta_base = kDefaultRopeBase;
};

struct LearnOptions {
  VqConfig config;
  CodebookSharing sharing = CodebookSharing::shared;
  double epsilon_floor = 1e-8;
  std::size_t max_iter = 50;
  double tol = 1e-6;
  /// false trains on uniform weights (plain k-means) for comparisons.
  bool token_aware = true;
};

struct WeightStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

struct TrainingReport {
  std::vector<double> objective_trace;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
  WeightStats weight_stats;
  /// Weighted scatter around the weighted mean (the objective with one centroid).
  double unclustered_objective = 0.0;
  bool surplus_centroids = false;
};

struct LearnedCodebooks {
  KvCodebooks codebooks;
  std::vector<TrainingReport> key_reports;
  std::vector<TrainingReport> value_reports;
};

[[nodiscard]] inline WeightStats weight_stats(std::span<const double> w) {
  WeightStats s{std::numeric_limits<double>::infinity(), 0.0, 0.0};
  for (const double x : w) {
    s.min = std::min(s.min, x);
    s.max = std::max(s.max, x);
    s.mean += x;
  }
  s.mean = w.empty() ? 0.0 : s.mean / static_cast<double>(w.size());
  if (w.empty()) s.min = 0.0;
  return s;
}

[[nodiscard]] inline double unclustered_objective(const Matrix<float>& points,
                                                  std::span<const double> weights) {
  std::vector<double> mean(points.cols(), 0.0);
  double wsum = 0.0;
  for (std::size_t j = 0; j < points.rows(); ++j) {
    for (std::size_t c = 0; c < points.cols(); ++c)
      mean[c] += weights[j] * static_cast<double>(points(j, c));
    wsum += weights[j];
  }
  if (wsum <= 0.0) return 0.0;
  for (double& x : mean) x /= wsum;
  double obj = 0.0;
  for (std::size_t j = 0; j < points.rows(); ++j)
    obj += weights[j] * squared_distance(points.row(j), std::span<const double>(mean));
  return obj;
}

/// Weighted reconstruction objective sum_j w_j ||x_j - c(x_j)||^2 of a codebook.
[[nodiscard]] inline double codebook_objective(const Codebook& book, const Matrix<float>& points,
                                               std::span<const double> weights) {
  double obj = 0.0;
  for (std::size_t j = 0; j < points.rows(); ++j) {
    const auto idx = nearest_centroid(points.row(j), book.centroids);
    obj += weights[j] * squared_distance(points.row(j), book.centroid(idx));
  }
  return obj;
}

/// Training points and weights gathered from a calibration set.
struct TrainingData {
  Matrix<float> key_points;
  std::vector<double> key_weights;
  Matrix<float> value_points;
  std::vector<double> value_weights;
  std::size_t positions = 0;  // sub-vectors per token
};

/// Runs the surrogate backward pass on every sample and stacks all pre-RoPE
/// key and value sub-vectors (sample order, then token-major) with their weights.
[[nodiscard]] inline TrainingData gather_training_data(const CalibrationSet& calib,
                                                       const LearnOptions& opt,
                                                       const SurrogateLoss& loss) {
  detail::require(!calib.samples.empty(), "learn_kv_codebooks: empty calibration set");
  const std::size_t d = calib.samples.front().k.cols();
  opt.config.validate_for(d);
  const std::size_t ds = opt.config.d_sub;

  std::vector<float> kp, vp;
  TrainingData data;
  data.positions = d / ds;
  for (std::size_t s = 0; s < calib.samples.size(); ++s) {
    const auto& smp = calib.samples[s];
    detail::require(smp.q.cols() == d && smp.k.cols() == d && smp.v.cols() == d,
                    "learn_kv_codebooks: calibration samples disagree on d");
    AttentionOptions aopt;
    aopt.causal = loss.causal;
    if (loss.use_rope) aopt.rope = RopeSpec::self(smp.positions, loss.theta_base);
    Rng g_rng(loss.seed, "surrogate-loss", s);
    const HeadTensor g = g_rng.normal_matrix<float>(smp.q.rows(), smp.v.cols());
    const KvGradients<float> grads = attention_backward(smp.q, smp.k, smp.v, g, aopt);

    const auto kw = gradient_token_weights(grads.dK, ds, opt.epsilon_floor);
    const auto vw = gradient_token_weights(grads.dV, ds, opt.epsilon_floor);
    data.key_weights.insert(data.key_weights.end(), kw.weights.begin(), kw.weights.end());
    data.value_weights.insert(data.value_weights.end(), vw.weights.begin(), vw.weights.end());
    kp.insert(kp.end(), smp.k.values().begin(), smp.k.values().end());
    vp.insert(vp.end(), smp.v.values().begin(), smp.v.values().end());
  }
  const std::size_t count = kp.size() / ds;
  data.key_points = Matrix<float>(count, ds, std::move(kp));
  data.value_points = Matrix<float>(count, ds, std::move(vp));
  if (!opt.token_aware) {
    std::fill(data.key_weights.begin(), data.key_weights.end(), 1.0);
    std::fill(data.value_weights.begin(), data.value_weights.end(), 1.0);
  }
  return data;
}

namespace detail {

/// Rows of `points` (token-major, P positions per token) at position s.
inline std::pair<Matrix<float>, std::vector<double>> position_slice(
    const Matrix<float>& points, std::span<const double> weights, std::size_t positions,
    std::size_t s) {
  const std::size_t tokens = points.rows() / positions;
  Matrix<float> out(tokens, points.cols());
  std::vector<double> w(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    const auto src = points.row(t * positions + s);
    std::copy(src.begin(), src.end(), out.row(t).begin());
    w[t] = weights[t * positions + s];
  }
  return {std::move(out), std::move(w)};
}

inline std::pair<TokenQuantizer, std::vector<TrainingReport>> train_quantizer(
    const Matrix<float>& points, std::span<const double> weights, std::size_t positions,
    const LearnOptions& opt, std::uint64_t seed, std::string_view stream) {
  std::vector<Codebook> books;
  std::vector<TrainingReport> reports;
  const std::size_t count =
      opt.sharing == CodebookSharing::shared ? std::size_t{1} : positions;
  for (std::size_t p = 0; p < count; ++p) {
    Matrix<float> pts;
    std::vector<double> w;
    if (opt.sharing == CodebookSharing::shared) {
      pts = points;
      w.assign(weights.begin(), weights.end());
    } else {
      std::tie(pts, w) = position_slice(points, weights, positions, p);
    }
    KMeansOptions km{stream_seed(seed, stream, p), opt.max_iter, opt.tol};
    KMeansResult res = weighted_kmeans(pts, w, opt.config.m, km);
    res.codebook.groups = opt.sharing == CodebookSharing::shared ? positions : 1;
    TrainingReport rep;
    rep.objective_trace = res.objective_trace;
    rep.iterations = res.iterations;
    rep.seed = km.seed;
    rep.weight_stats = weight_stats(w);
    rep.unclustered_objective = unclustered_objective(pts, w);
    rep.surplus_centroids = res.surplus_centroids;
    books.push_back(std::move(res.codebook));
    reports.push_back(std::move(rep));
  }
  return {TokenQuantizer(std::move(books), opt.sharing), std::move(reports)};
}

}  // namespace detail

/// Trains the key codebooks on pre-RoPE key sub-vectors and the value
/// codebooks on value sub-vectors, each weighted by its surrogate-loss gradient.
[[nodiscard]] inline LearnedCodebooks learn_kv_codebooks(const CalibrationSet& calib,
                                                         const LearnOptions& opt,
                                                         const SurrogateLoss& loss,
                                                         std::uint64_t seed) {
  const TrainingData data = gather_training_data(calib, opt, loss);
  LearnedCodebooks out;
  std::tie(out.codebooks.key, out.key_reports) = detail::train_quantizer(
      data.key_points, data.key_weights, data.positions, opt, seed, "key-codebook");
  std::tie(out.codebooks.value, out.value_reports) = detail::train_quantizer(
      data.value_points, data.value_weights, data.positions, opt, seed, "value-codebook");
  return out;
}

}  // namespace antkv

#endif  // ANTKV_CENTROID_LEARNING_HPP
