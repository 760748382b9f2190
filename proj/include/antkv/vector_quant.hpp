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

// Sub-vector quantization of token rows: a row of width d is split into
// d / d_sub consecutive sub-vectors and each one is replaced by the index of
// its nearest centroid.

#ifndef ANTKV_VECTOR_QUANT_HPP
#define ANTKV_VECTOR_QUANT_HPP

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "antkv/error.hpp"
#include "antkv/matrix.hpp"
#include "antkv/rng.hpp"

namespace antkv {

inline constexpr std::size_t kMaxCentroids = std::size_t{1} << 24;

/// Sub-vector length and centroid count; written "d8m256" on the command line.
struct VqConfig {
  std::size_t d_sub = 8;
  std::size_t m = 256;

  void validate() const {
    detail::require(d_sub >= 1, "VqConfig: d_sub must be >= 1");
    detail::require(m >= 1 && m <= kMaxCentroids, "VqConfig: m must be in [1, 2^24]");
  }

  void validate_for(std::size_t d) const {
    validate();
    detail::require(d % d_sub == 0, "VqConfig: d_sub=" + std::to_string(d_sub) +
                                        " does not divide d=" + std::to_string(d));
  }

  [[nodiscard]] std::string name() const {
    return "d" + std::to_string(d_sub) + "m" + std::to_string(m);
  }

  /// Parses the dNmM notation, e.g. "d2m256" or "d32m4096".
  static VqConfig parse(std::string_view text) {
    auto fail = [&] { throw InvalidArgument("cannot parse VQ setting '" + std::string(text) + "'"); };
    if (text.size() < 4 || text[0] != 'd') fail();
    const auto mpos = text.find('m');
    if (mpos == std::string_view::npos || mpos < 2) fail();
    VqConfig cfg;
    auto parse_num = [&](std::string_view s, std::size_t& out) {
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
      if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) fail();
    };
    parse_num(text.substr(1, mpos - 1), cfg.d_sub);
    parse_num(text.substr(mpos + 1), cfg.m);
    cfg.validate();
    return cfg;
  }

  bool operator==(const VqConfig&) const = default;
};

/// ceil(log2 m): the width of one stored index.
[[nodiscard]] inline std::uint32_t index_bits(std::size_t m) {
  detail::require(m >= 1, "index_bits: m must be >= 1");
  return static_cast<std::uint32_t>(std::bit_width(m - 1));
}

/// Exact rational bit rate; `padded` is set when m is not a power of two.
struct BitRate {
  std::uint64_t numerator = 0;
  std::uint64_t denominator = 1;
  bool padded = false;

  [[nodiscard]] double value() const {
    return static_cast<double>(numerator) / static_cast<double>(denominator);
  }
  bool operator==(const BitRate&) const = default;
};

[[nodiscard]] inline BitRate bits_per_element(const VqConfig& cfg) {
  cfg.validate();
  const std::uint64_t num = index_bits(cfg.m);
  const std::uint64_t den = cfg.d_sub;
  const std::uint64_t g = std::gcd(num, den);
  return {num / (g == 0 ? 1 : g), den / (g == 0 ? 1 : g), !std::has_single_bit(cfg.m)};
}

struct Codebook {
  VqConfig config;
  std::size_t groups = 1;  // sub-vector positions that share this table
  Matrix<float> centroids;  // m x d_sub
  std::uint64_t seed = 0;

  [[nodiscard]] std::span<const float> centroid(std::size_t idx) const {
    return centroids.row(idx);
  }

  void validate() const {
    config.validate();
    detail::require(centroids.rows() == config.m && centroids.cols() == config.d_sub,
                    "Codebook: centroid table shape does not match " + config.name());
    detail::require(groups >= 1, "Codebook: groups must be >= 1");
    if (!all_finite(centroids)) throw NumericalError("Codebook: non-finite centroid");
  }

  bool operator==(const Codebook&) const = default;
};

struct TokenCodes {
  std::vector<std::uint32_t> indices;
  bool operator==(const TokenCodes&) const = default;
};

/// Nearest centroid by squared Euclidean distance, lowest index on ties.
[[nodiscard]] inline std::uint32_t nearest_centroid(std::span<const float> sub,
                                                    const Matrix<float>& centroids) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    const double dist = squared_distance(sub, centroids.row(c));
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return best;
}

[[nodiscard]] inline TokenCodes encode_token(std::span<const float> row, const Codebook& book) {
  const std::size_t ds = book.config.d_sub;
  detail::require(ds > 0 && row.size() % ds == 0,
                  "encode_token: row width " + std::to_string(row.size()) +
                      " is not a multiple of d_sub=" + std::to_string(ds));
  TokenCodes codes;
  codes.indices.reserve(row.size() / ds);
  for (std::size_t s = 0; s < row.size(); s += ds)
    codes.indices.push_back(nearest_centroid(row.subspan(s, ds), book.centroids));
  return codes;
}

[[nodiscard]] inline std::vector<float> decode_token(const TokenCodes& codes, const Codebook& book) {
  std::vector<float> row;
  row.reserve(codes.indices.size() * book.config.d_sub);
  for (const std::uint32_t idx : codes.indices) {
    detail::require(idx < book.centroids.rows(),
                    "decode_token: index " + std::to_string(idx) + " out of range for m=" +
                        std::to_string(book.centroids.rows()));
    const auto c = book.centroid(idx);
    row.insert(row.end(), c.begin(), c.end());
  }
  return row;
}

/// Splits every row into sub-vectors, token-major: row t position s lands at t*P + s.
[[nodiscard]] inline Matrix<float> split_subvectors(const Matrix<float>& rows, std::size_t d_sub) {
  detail::require(d_sub >= 1 && rows.cols() % d_sub == 0, "split_subvectors: d_sub must divide d");
  // Row-major storage already lays sub-vectors out in exactly this order.
  return Matrix<float>(rows.rows() * (rows.cols() / d_sub), d_sub,
                       std::vector<float>(rows.values().begin(), rows.values().end()));
}

/// Sub-vectors of a single position s across all rows.
[[nodiscard]] inline Matrix<float> subvectors_at(const Matrix<float>& rows, std::size_t d_sub,
                                                 std::size_t position) {
  detail::require(d_sub >= 1 && rows.cols() % d_sub == 0, "subvectors_at: d_sub must divide d");
  Matrix<float> out(rows.rows(), d_sub);
  for (std::size_t t = 0; t < rows.rows(); ++t) {
    const auto src = rows.row(t).subspan(position * d_sub, d_sub);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weighted k-means
// ---------------------------------------------------------------------------

struct KMeansOptions {
  std::uint64_t seed = 0;
  std::size_t max_iter = 50;
  /// Stop once the objective decreases by less than tol * previous objective.
  double tol = 1e-6;
};

struct KMeansResult {
  Codebook codebook;
  /// trace[0] is the objective at the initial centroids, then one entry per iteration.
  std::vector<double> objective_trace;
  std::size_t iterations = 0;
  bool converged = false;
  /// Set when fewer than m distinct weighted points existed and some centroids
  /// were seeded from perturbed duplicates.
  bool surplus_centroids = false;
  std::vector<std::uint32_t> assignment;
};

namespace detail {

inline void check_kmeans_inputs(const Matrix<float>& points, std::span<const double> weights) {
  require(points.rows() >= 1, "weighted_kmeans: need at least one point");
  require(points.cols() >= 1, "weighted_kmeans: zero-width points");
  require(weights.size() == points.rows(), "weighted_kmeans: one weight per point required");
  if (!all_finite(points)) throw NumericalError("weighted_kmeans: non-finite point");
  bool any_positive = false;
  for (const double w : weights) {
    if (!std::isfinite(w)) throw NumericalError("weighted_kmeans: non-finite weight");
    require(w >= 0.0, "weighted_kmeans: negative weight");
    any_positive = any_positive || w > 0.0;
  }
  require(any_positive, "weighted_kmeans: all weights are zero");
}

inline std::vector<std::uint32_t> assign_all(const Matrix<float>& points,
                                             const Matrix<float>& centroids) {
  std::vector<std::uint32_t> a(points.rows());
  for (std::size_t j = 0; j < points.rows(); ++j) a[j] = nearest_centroid(points.row(j), centroids);
  return a;
}

}  // namespace detail

[[nodiscard]] inline double weighted_objective(const Matrix<float>& points,
                                               std::span<const double> weights,
                                               const Matrix<float>& centroids,
                                               std::span<const std::uint32_t> assignment) {
  double obj = 0.0;
  for (std::size_t j = 0; j < points.rows(); ++j)
    obj += weights[j] * squared_distance(points.row(j), centroids.row(assignment[j]));
  return obj;
}

/// Weighted k-means++ seeding: the first centroid is drawn with probability
/// proportional to w, later ones proportional to w * D^2.
[[nodiscard]] inline Matrix<float> kmeanspp_init(const Matrix<float>& points,
                                                 std::span<const double> weights, std::size_t m,
                                                 std::uint64_t seed, bool* surplus = nullptr) {
  detail::check_kmeans_inputs(points, weights);
  detail::require(m >= 1, "kmeanspp_init: m must be >= 1");
  const std::size_t n = points.rows();
  const std::size_t ds = points.cols();
  Rng rng(seed, "kmeans-init");

  auto draw = [&](const std::vector<double>& mass, double total) {
    const double u = rng.uniform() * total;
    double cum = 0.0;
    std::size_t last_positive = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (mass[j] <= 0.0) continue;
      cum += mass[j];
      last_positive = j;
      if (cum > u) return j;
    }
    return last_positive;
  };

  Matrix<float> centroids(m, ds);
  std::vector<double> mass(weights.begin(), weights.end());
  double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  std::size_t first = draw(mass, total);
  std::copy(points.row(first).begin(), points.row(first).end(), centroids.row(0).begin());

  std::vector<double> d2(n);
  for (std::size_t j = 0; j < n; ++j) d2[j] = squared_distance(points.row(j), centroids.row(0));

  std::size_t chosen = 1;
  for (; chosen < m; ++chosen) {
    total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      mass[j] = weights[j] * d2[j];
      total += mass[j];
    }
    if (!(total > 0.0)) break;
    const std::size_t pick = draw(mass, total);
    std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(chosen).begin());
    for (std::size_t j = 0; j < n; ++j)
      d2[j] = std::min(d2[j], squared_distance(points.row(j), centroids.row(chosen)));
  }

  if (surplus != nullptr) *surplus = chosen < m;
  for (std::size_t c = chosen; c < m; ++c) {
    const auto src = centroids.row(c % chosen);
    auto dst = centroids.row(c);
    for (std::size_t k = 0; k < ds; ++k) {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double mag = (0.5 + 0.5 * rng.uniform()) * 1e-3 * (std::abs(src[k]) + 1.0);
      dst[k] = static_cast<float>(src[k] + sign * mag);
    }
  }
  return centroids;
}

/// Lloyd iterations from given initial centroids. Assignment is unweighted
/// nearest-centroid; weights enter the centroid update and the objective.
[[nodiscard]] inline KMeansResult weighted_kmeans_from(const Matrix<float>& points,
                                                       std::span<const double> weights,
                                                       Matrix<float> initial,
                                                       const KMeansOptions& opt) {
  detail::check_kmeans_inputs(points, weights);
  detail::require(initial.rows() >= 1 && initial.cols() == points.cols(),
                  "weighted_kmeans_from: initial centroids have the wrong shape");
  const std::size_t n = points.rows();
  const std::size_t m = initial.rows();
  const std::size_t ds = points.cols();

  KMeansResult res;
  res.codebook.config = {ds, m};
  res.codebook.seed = opt.seed;
  Matrix<float>& cent = res.codebook.centroids;
  cent = std::move(initial);

  std::vector<std::uint32_t> assign = detail::assign_all(points, cent);
  double obj = weighted_objective(points, weights, cent, assign);
  res.objective_trace.push_back(obj);

  Matrix<double> sums(m, ds);
  std::vector<double> wsum(m);
  std::vector<double> wdist(n);
  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    std::fill(sums.values().begin(), sums.values().end(), 0.0);
    std::fill(wsum.begin(), wsum.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      if (weights[j] <= 0.0) continue;
      const auto x = points.row(j);
      auto s = sums.row(assign[j]);
      for (std::size_t k = 0; k < ds; ++k) s[k] += weights[j] * static_cast<double>(x[k]);
      wsum[assign[j]] += weights[j];
    }
    for (std::size_t c = 0; c < m; ++c) {
      if (wsum[c] <= 0.0) continue;
      for (std::size_t k = 0; k < ds; ++k) cent(c, k) = static_cast<float>(sums(c, k) / wsum[c]);
    }

    // Empty clusters take the point with the largest weighted distance.
    bool have_wdist = false;
    for (std::size_t c = 0; c < m; ++c) {
      if (wsum[c] > 0.0) continue;
      if (!have_wdist) {
        for (std::size_t j = 0; j < n; ++j)
          wdist[j] = weights[j] * squared_distance(points.row(j), cent.row(assign[j]));
        have_wdist = true;
      }
      std::size_t far = n;
      double far_d = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (wdist[j] > far_d) {
          far_d = wdist[j];
          far = j;
        }
      }
      if (far == n) continue;
      std::copy(points.row(far).begin(), points.row(far).end(), cent.row(c).begin());
      wdist[far] = 0.0;
      assign[far] = static_cast<std::uint32_t>(c);
    }

    std::vector<std::uint32_t> next = detail::assign_all(points, cent);
    const double next_obj = weighted_objective(points, weights, cent, next);
    res.objective_trace.push_back(next_obj);
    res.iterations = it + 1;

    bool changed = false;
    for (std::size_t j = 0; j < n && !changed; ++j)
      changed = weights[j] > 0.0 && next[j] != assign[j];
    assign = std::move(next);
    if (!changed || obj - next_obj <= opt.tol * obj) {
      res.converged = true;
      break;
    }
    obj = next_obj;
  }
  res.assignment = std::move(assign);
  return res;
}

/// Weighted k-means with k-means++ seeding. m > number of points is allowed;
/// the surplus centroids are perturbed duplicates and `surplus_centroids` is set.
[[nodiscard]] inline KMeansResult weighted_kmeans(const Matrix<float>& points,
                                                  std::span<const double> weights, std::size_t m,
                                                  const KMeansOptions& opt = {}) {
  detail::require(m >= 1 && m <= kMaxCentroids, "weighted_kmeans: m must be in [1, 2^24]");
  bool surplus = false;
  Matrix<float> init = kmeanspp_init(points, weights, m, opt.seed, &surplus);
  KMeansResult res = weighted_kmeans_from(points, weights, std::move(init), opt);
  res.surplus_centroids = surplus;
  return res;
}

// ---------------------------------------------------------------------------
// Codebook sets
// ---------------------------------------------------------------------------

enum class CodebookSharing { shared, per_position };

[[nodiscard]] inline std::string to_string(CodebookSharing s) {
  return s == CodebookSharing::shared ? "shared" : "per_position";
}

[[nodiscard]] inline CodebookSharing parse_sharing(std::string_view s) {
  if (s == "shared") return CodebookSharing::shared;
  if (s == "per_position" || s == "per-position") return CodebookSharing::per_position;
  throw InvalidArgument("unknown codebook sharing '" + std::string(s) + "'");
}

/// Quantizer for whole token rows: either one codebook shared by every
/// sub-vector position or one codebook per position.
class TokenQuantizer {
 public:
  TokenQuantizer() = default;
  TokenQuantizer(std::vector<Codebook> books, CodebookSharing sharing)
      : books_(std::move(books)), sharing_(sharing) {
    detail::require(!books_.empty(), "TokenQuantizer: no codebooks");
    for (const auto& b : books_) {
      b.validate();
      detail::require(b.config == books_.front().config,
                      "TokenQuantizer: codebooks disagree on the VQ setting");
    }
    detail::require(sharing_ == CodebookSharing::per_position || books_.size() == 1,
                    "TokenQuantizer: shared sharing takes exactly one codebook");
  }

  [[nodiscard]] bool empty() const noexcept { return books_.empty(); }
  [[nodiscard]] const VqConfig& config() const { return books_.front().config; }
  [[nodiscard]] CodebookSharing sharing() const noexcept { return sharing_; }
  [[nodiscard]] const std::vector<Codebook>& books() const noexcept { return books_; }

  void check_width(std::size_t d) const {
    detail::require(!books_.empty(), "TokenQuantizer: no codebooks loaded");
    config().validate_for(d);
    if (sharing_ == CodebookSharing::per_position)
      detail::require(books_.size() == d / config().d_sub,
                      "TokenQuantizer: " + std::to_string(books_.size()) +
                          " per-position codebooks cannot cover d=" + std::to_string(d));
  }

  [[nodiscard]] const Codebook& book_for(std::size_t position) const {
    return sharing_ == CodebookSharing::shared ? books_.front() : books_.at(position);
  }

  [[nodiscard]] TokenCodes encode(std::span<const float> row) const {
    check_width(row.size());
    if (sharing_ == CodebookSharing::shared) return encode_token(row, books_.front());
    const std::size_t ds = config().d_sub;
    TokenCodes codes;
    for (std::size_t s = 0; s * ds < row.size(); ++s)
      codes.indices.push_back(nearest_centroid(row.subspan(s * ds, ds), books_[s].centroids));
    return codes;
  }

  [[nodiscard]] std::vector<float> decode(const TokenCodes& codes) const {
    if (sharing_ == CodebookSharing::shared) return decode_token(codes, books_.front());
    detail::require(codes.indices.size() == books_.size(), "TokenQuantizer: code count mismatch");
    std::vector<float> row;
    for (std::size_t s = 0; s < books_.size(); ++s) {
      const auto part = decode_token(TokenCodes{{codes.indices[s]}}, books_[s]);
      row.insert(row.end(), part.begin(), part.end());
    }
    return row;
  }

  /// Quantize-then-reconstruct every row.
  [[nodiscard]] Matrix<float> reconstruct(const Matrix<float>& rows) const {
    Matrix<float> out(rows.rows(), rows.cols());
    for (std::size_t t = 0; t < rows.rows(); ++t) {
      const auto r = decode(encode(rows.row(t)));
      std::copy(r.begin(), r.end(), out.row(t).begin());
    }
    return out;
  }

  bool operator==(const TokenQuantizer&) const = default;

 private:
  std::vector<Codebook> books_;
  CodebookSharing sharing_ = CodebookSharing::shared;
};

/// Key codebooks (trained on pre-RoPE keys) and value codebooks.
struct KvCodebooks {
  TokenQuantizer key;
  TokenQuantizer value;
  bool operator==(const KvCodebooks&) const = default;
};

}  // namespace antkv

#endif  // ANTKV_VECTOR_QUANT_HPP
