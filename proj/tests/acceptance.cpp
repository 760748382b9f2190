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

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "antkv/antkv.hpp"
#include "oracles.hpp"

namespace {

namespace h = antkv::harness;
using antkv::HeadTensor;
using antkv::Matrix;
using antkv::VqConfig;
using Clock = std::chrono::steady_clock;

// Pinned tolerances and budgets.
constexpr double kVEqualityRel = 1e-6;
constexpr double kVBudgetSeconds = 30.0;
constexpr double kKBoundHoldFraction = 0.99;
constexpr double kKBudgetSeconds = 120.0;
constexpr double kRatioLo = 1.7;
constexpr double kRatioHi = 2.5;
constexpr double kBlockedRel = 1e-4;
constexpr double kBlockedAbs = 1e-4;
constexpr double kGradRel = 1e-3;
constexpr double kGradMagnitude = 1e-6;
// Brute-force profiles over 20 seeds x 4 heads of this data: min 0.9836, mean 0.9898.
constexpr double kSpearmanThreshold = 0.95;
constexpr double kControlsBeaten = 0.9;
constexpr double kAnsBudgetSeconds = 300.0;
constexpr double kCacheAbs = 1e-5;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void fail(const std::string& why) {
    if (pass) detail << "first failure: " << why << "; ";
    pass = false;
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::size_t even_width(std::mt19937_64& g, std::size_t max_half) { return 2 * (1 + g() % max_half); }

antkv::AttentionOptions self_opt(std::size_t n, bool causal, bool rope) {
  antkv::AttentionOptions o;
  o.causal = causal;
  if (rope) o.rope = antkv::RopeSpec::self(oracle::iota(n));
  return o;
}

// 1. V bound
void criterion_v_bound(Outcome& out) {
  const auto t0 = Clock::now();
  std::mt19937_64 g(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t violations = 0, tight_misses = 0;
  double worst_rel = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + g() % 256;
    const std::size_t d = even_width(g, 32);
    const HeadTensor q = oracle::random_matrix(g, n, d, 1.5), k = oracle::random_matrix(g, n, d, 1.5);
    const auto a = antkv::attention_probs(q, k, self_opt(n, trial % 2 == 0, trial % 3 != 0));
    const auto signed_dv = oracle::random_matrix(g, n, d, 0.1).cast<double>();
    const auto r = antkv::v_perturbation_bound(a, signed_dv);
    if (r.bound_value < r.actual_error) ++violations;
    Matrix<double> pos_dv(n, d);
    for (double& x : pos_dv.values()) x = u(g);
    const auto p = antkv::v_perturbation_bound(a, pos_dv);
    const double rel = oracle::rel_diff(p.bound_value, p.actual_error);
    worst_rel = std::max(worst_rel, rel);
    if (rel > kVEqualityRel) ++tight_misses;
  }
  const double secs = seconds_since(t0);
  if (violations) out.fail(std::to_string(violations) + " bound violations");
  if (tight_misses) out.fail(std::to_string(tight_misses) + " nonnegative cases not tight");
  if (secs > kVBudgetSeconds) out.fail("runtime over budget");
  out.detail << "1000 instances, violations=" << violations << ", worst equality rel=" << worst_rel
             << ", " << secs << " s";
}

// 2. K bound
void criterion_k_bound(Outcome& out) {
  const auto t0 = Clock::now();
  std::mt19937_64 g(202);
  const double eps[3] = {1e-2, 5e-3, 2.5e-3};
  std::size_t holds[3] = {0, 0, 0}, slow_shrink = 0;
  const int trials = 500;
  for (int trial = 0; trial < trials; ++trial) {
    const std::size_t n = 2 + g() % 95;
    const std::size_t d = even_width(g, 16);
    const auto q = oracle::random_matrix(g, n, d, 1.5).cast<double>();
    const auto k = oracle::random_matrix(g, n, d, 1.5).cast<double>();
    const auto v = oracle::random_matrix(g, n, d).cast<double>();
    const auto dir = oracle::random_matrix(g, n, d).cast<double>();
    const auto opt = self_opt(n, trial % 2 == 0, trial % 4 != 0);
    double margin[3];
    for (int e = 0; e < 3; ++e) {
      const auto r = antkv::k_perturbation_bound(q, k, v, antkv::scaled(dir, eps[e]), opt);
      margin[e] = r.actual_error - r.bound_value;
      if (margin[e] <= 0.0) ++holds[e];
    }
    for (int e = 1; e < 3; ++e) {
      const double shrink = (eps[e] / eps[e - 1]) * (eps[e] / eps[e - 1]);
      if (margin[e] > 0.0 && margin[e] > margin[e - 1] * shrink * 1.05) ++slow_shrink;
    }
  }
  const double secs = seconds_since(t0);
  const double frac = static_cast<double>(holds[2]) / trials;
  if (frac < kKBoundHoldFraction) out.fail("bound held in only " + std::to_string(frac));
  if (slow_shrink) out.fail(std::to_string(slow_shrink) + " violation margins shrank slower than eps^2");
  if (secs > kKBudgetSeconds) out.fail("runtime over budget");
  out.detail << "held " << holds[0] << "/" << holds[1] << "/" << holds[2] << " of " << trials
             << " at eps 1e-2/5e-3/2.5e-3, " << secs << " s";
}

// 3. First-order residual decays linearly
void criterion_first_order(Outcome& out) {
  std::mt19937_64 g(303);
  const double eps[3] = {1e-2, 5e-3, 2.5e-3};
  double lo = 1e300, hi = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + g() % 61;
    const std::size_t d = even_width(g, 16) + 2;
    const auto q = oracle::random_matrix(g, n, d, 1.5).cast<double>();
    const auto k = oracle::random_matrix(g, n, d, 1.5).cast<double>();
    const auto v = oracle::random_matrix(g, n, d).cast<double>();
    const auto dir = oracle::random_matrix(g, n, d).cast<double>();
    const auto opt = self_opt(n, trial % 2 == 0, trial % 3 != 0);
    const auto base = antkv::attention_exact(q, k, v, opt);
    double rel[3];
    for (int e = 0; e < 3; ++e) {
      const auto dk = antkv::scaled(dir, eps[e]);
      const auto exact = antkv::subtract(antkv::attention_exact(q, antkv::add(k, dk), v, opt), base);
      rel[e] = antkv::l1_distance(exact, antkv::first_order_attention_delta(q, k, v, dk, opt)) / antkv::l1_norm(exact);
    }
    for (int e = 1; e < 3; ++e) {
      const double ratio = rel[e - 1] / rel[e];
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
      if (ratio < kRatioLo || ratio > kRatioHi) out.fail("trial " + std::to_string(trial) + " ratio " + std::to_string(ratio));
    }
  }
  out.detail << "100 trials, halving ratios in [" << lo << ", " << hi << "]";
}

// 4. Blocked scores and output
void criterion_blocked(Outcome& out) {
  const auto t0 = Clock::now();
  std::mt19937_64 g(404);
  double worst_score = 0.0, worst_out = 0.0;
  std::size_t configs = 0;
  for (const std::size_t n : {64u, 512u, 2048u}) {
    const std::size_t d = 64;
    const HeadTensor q = oracle::random_matrix(g, n, d, 1.5), k = oracle::random_matrix(g, n, d, 1.5);
    const HeadTensor v = oracle::random_matrix(g, n, d);
    for (const bool causal : {false, true}) {
      const auto opt = self_opt(n, causal, true);
      const auto exact = antkv::attention_exact(q, k, v, opt);
      std::vector<double> qn(n);
      for (std::size_t i = 0; i < n; ++i) qn[i] = antkv::l2_norm(q.row(i));
      const auto direct = antkv::anchor_scores(antkv::attention_probs(q, k, opt), qn);
      for (const std::size_t bq : {std::size_t{1}, std::size_t{16}, std::size_t{64}, n})
        for (const std::size_t bk : {std::size_t{1}, std::size_t{16}, std::size_t{64}, n}) {
          const antkv::BlockSizes b{bq, bk};
          const auto aux = antkv::flash_attention_aux(q, k, v, b, opt);
          const auto s = antkv::anchor_scores_blocked(q, k, v, aux, b, opt);
          for (std::size_t j = 0; j < n; ++j) {
            worst_score = std::max({worst_score, oracle::rel_diff(s.ans_k[j], direct.ans_k[j]),
                                    oracle::rel_diff(s.ans_v[j], direct.ans_v[j])});
          }
          worst_out = std::max(worst_out, oracle::max_abs_diff(aux.output, exact));
          ++configs;
        }
    }
  }
  if (worst_score > kBlockedRel) out.fail("score relative error " + std::to_string(worst_score));
  if (worst_out > kBlockedAbs) out.fail("output absolute error " + std::to_string(worst_out));
  out.detail << configs << " configurations, worst score rel=" << worst_score << ", worst output abs=" << worst_out
             << ", " << seconds_since(t0) << " s";
}

// 5. Bit rates
void criterion_bits(Outcome& out) {
  struct Row { const char* name; std::uint64_t num, den; };
  const Row rows[] = {{"d2m256", 4, 1}, {"d4m256", 2, 1}, {"d8m256", 1, 1}, {"d16m4096", 3, 4}, {"d32m4096", 3, 8}};
  for (const auto& r : rows) {
    const auto b = antkv::bits_per_element(VqConfig::parse(r.name));
    if (b.numerator != r.num || b.denominator != r.den) out.fail(r.name);
    out.detail << r.name << "=" << b.numerator << "/" << b.denominator << " ";
  }
}

// 6. Gradients vs central differences
void criterion_gradients(Outcome& out) {
  std::mt19937_64 g(606);
  std::size_t checked = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 8; ++trial) {
    const bool causal = trial % 2 == 0, rope = (trial / 2) % 2 == 0;
    const std::size_t n = 3 + g() % 10, d = even_width(g, 4);
    const auto q = oracle::random_matrix(g, n, d).cast<double>();
    const auto k = oracle::random_matrix(g, n, d).cast<double>();
    const auto v = oracle::random_matrix(g, n, d).cast<double>();
    const auto dout = oracle::random_matrix(g, n, d).cast<double>();
    const auto opt = self_opt(n, causal, rope);
    const auto grads = antkv::attention_backward(q, k, v, dout, opt);
    auto loss = [&](const Matrix<double>& kk, const Matrix<double>& vv) {
      const auto o = antkv::attention_exact(q, kk, vv, opt);
      double s = 0.0;
      for (std::size_t i = 0; i < o.size(); ++i) s += o.values()[i] * dout.values()[i];
      return s;
    };
    const double step = 1e-5;
    for (int which = 0; which < 2; ++which) {
      for (std::size_t idx = 0; idx < n * d; ++idx) {
        auto kp = k, km = k, vp = v, vm = v;
        auto& p = which == 0 ? kp : vp;
        auto& m = which == 0 ? km : vm;
        p.values()[idx] += step;
        m.values()[idx] -= step;
        const double fd = (loss(kp, vp) - loss(km, vm)) / (2 * step);
        const double an = (which == 0 ? grads.dK : grads.dV).values()[idx];
        if (std::abs(an) <= kGradMagnitude && std::abs(fd) <= kGradMagnitude) continue;
        const double rel = oracle::rel_diff(an, fd);
        worst = std::max(worst, rel);
        ++checked;
        if (rel > kGradRel) out.fail("coordinate mismatch rel=" + std::to_string(rel));
      }
    }
  }
  out.detail << checked << " coordinates, worst rel=" << worst;
}

// 7. Weighted k-means
void criterion_kmeans(Outcome& out) {
  std::mt19937_64 g(707);
  std::exponential_distribution<double> ex(1.0);
  std::size_t increases = 0, mismatches = 0;
  for (int run = 0; run < 50; ++run) {
    const std::size_t n = 100 + g() % 300, ds = 1 + g() % 8, m = 2 + g() % 30;
    const auto pts = oracle::random_matrix(g, n, ds);
    std::vector<double> w(n);
    for (double& x : w) x = ex(g);
    const auto res = antkv::weighted_kmeans(pts, w, m, antkv::KMeansOptions{std::uint64_t(run), 100, 0.0});
    for (std::size_t i = 1; i < res.objective_trace.size(); ++i)
      if (res.objective_trace[i] > res.objective_trace[i - 1]) ++increases;

    const std::vector<double> ones(n, 1.0);
    const auto init = antkv::kmeanspp_init(pts, ones, m, std::uint64_t(run));
    const auto uni = antkv::weighted_kmeans_from(pts, ones, init, antkv::KMeansOptions{std::uint64_t(run), 40, 1e-6});
    if (!(uni.codebook.centroids == oracle::lloyd_oracle(pts, init, 40, 1e-6))) ++mismatches;
  }
  if (increases) out.fail(std::to_string(increases) + " objective increases");
  if (mismatches) out.fail(std::to_string(mismatches) + " uniform-weight runs differ from plain Lloyd");
  out.detail << "50 runs, increases=" << increases << ", Lloyd mismatches=" << mismatches;
}

h::Dataset heavy(std::uint64_t seed) {
  h::GenOptions o;
  o.seed = seed;
  o.n = 256;
  o.d = 64;
  o.heads = 4;
  o.structure = h::Structure::heavy_hitter;
  return h::generate(o);
}

h::HeadCodebooks calibrate_on(const std::vector<std::uint64_t>& seeds, VqConfig vq, bool pool, std::size_t max_iter) {
  std::vector<h::Dataset> data;
  for (auto s : seeds) data.push_back(heavy(s));
  h::CalibrateOptions o;
  o.vq = vq;
  o.seed = 7;
  o.max_iter = max_iter;
  return h::codebooks_of(h::calibrate(data, o, pool));
}

// Per-token joint error by full recomputation for every token.
std::vector<double> brute_force_profile(const h::HeadData& hd, const antkv::KvCodebooks& books) {
  const auto opt = h::causal_options(hd, true, antkv::kDefaultRopeBase);
  const auto q = hd.q.cast<double>(), k = hd.k.cast<double>(), v = hd.v.cast<double>();
  const auto kq = books.key.reconstruct(hd.k), vq = books.value.reconstruct(hd.v);
  const auto exact = antkv::attention_exact(q, k, v, opt);
  std::vector<double> errs(k.rows());
  for (std::size_t j = 0; j < k.rows(); ++j) {
    auto kj = k, vj = v;
    for (std::size_t c = 0; c < k.cols(); ++c) {
      kj(j, c) = kq(j, c);
      vj(j, c) = vq(j, c);
    }
    errs[j] = antkv::l1_distance(antkv::attention_exact(q, kj, vj, opt), exact);
  }
  return errs;
}

// 8. AnS effectiveness
void criterion_ans(Outcome& out) {
  const auto t0 = Clock::now();
  const VqConfig vq{8, 256};
  const auto data = heavy(0);
  const h::CodebookMap books{{vq.name(), calibrate_on({1000, 1001}, vq, false, 20)}};
  double min_rho = 1.0, mean_rho = 0.0;
  for (std::size_t hh = 0; hh < data.heads.size(); ++hh) {
    const auto& hd = data.heads[hh];
    const auto errs = brute_force_profile(hd, h::detail::books_for(books, vq, hh));
    const auto score = h::ans_for_mode(h::direct_scores(hd, h::causal_options(hd, true, antkv::kDefaultRopeBase)),
                                       h::PerTokenMode::joint);
    const double rho = antkv::stats::spearman(errs, score);
    min_rho = std::min(min_rho, rho);
    mean_rho += rho / static_cast<double>(data.heads.size());
  }
  h::EvalOptions o;
  o.vqs = {vq};
  o.anchor_fractions = {0.01};
  o.trials = 50;
  o.per_token = false;
  const auto rep = h::evaluate(data, books, o);
  const auto& r = rep["records"][0];
  const double beaten = r["random_controls"]["ans_beats_fraction"].get<double>();
  const double secs = seconds_since(t0);
  if (min_rho <= kSpearmanThreshold) out.fail("head Spearman " + std::to_string(min_rho));
  if (beaten < kControlsBeaten) out.fail("beat only " + std::to_string(beaten) + " of controls");
  if (secs > kAnsBudgetSeconds) out.fail("runtime over budget");
  out.detail << "Spearman mean=" << mean_rho << " min=" << min_rho << " (threshold " << kSpearmanThreshold
             << "), AnS error=" << r["attention_l1_error"].get<double>() << ", controls mean="
             << r["random_controls"]["mean"].get<double>() << ", beaten=" << beaten << ", " << secs << " s";
}

// 9. Anchor sweep
void criterion_sweep(Outcome& out) {
  const auto t0 = Clock::now();
  const VqConfig one_bit{8, 256}, low{32, 4096};
  h::CodebookMap books;
  books.emplace(one_bit.name(), calibrate_on({1000, 1001}, one_bit, false, 20));
  books.emplace(low.name(), calibrate_on({1000, 1001, 1002, 1003}, low, true, 15));
  h::SweepOptions o;
  o.vqs = {one_bit, low};
  for (std::uint64_t s = 0; s < 10; ++s) o.seeds.push_back(s);
  const auto rep = h::anchor_sweep(heavy, books, o);
  for (const auto& s : rep["summary"]) {
    out.detail << s["vq"].get<std::string>() << ":";
    for (const auto& m : s["means"]) out.detail << " " << m["mean_attention_l1_error"].get<double>();
    out.detail << "; ";
    if (!s["non_increasing"].get<bool>()) out.fail(s["vq"].get<std::string>() + " means increase");
  }
  out.detail << seconds_since(t0) << " s";
}

// 10. Cache correctness
void criterion_cache(Outcome& out) {
  std::mt19937_64 g(1010);
  const std::size_t n = 128, steps = 64, d = 64;
  const HeadTensor q = oracle::random_matrix(g, n + steps, d, 1.5), k = oracle::random_matrix(g, n + steps, d, 1.5);
  const HeadTensor v = oracle::random_matrix(g, n + steps, d);
  const auto pos = oracle::iota(n + steps);
  auto rows = [&](const HeadTensor& x, std::size_t count) {
    return HeadTensor(count, d, std::vector<float>(x.values().begin(), x.values().begin() + count * d));
  };
  auto one = [&](std::size_t t) { return HeadTensor(1, d, std::vector<float>(q.row(t).begin(), q.row(t).end())); };
  auto opt_at = [&](std::size_t t) {
    antkv::AttentionOptions o;
    antkv::RopeSpec r;
    r.q_positions = {pos[t]};
    r.k_positions.assign(pos.begin(), pos.begin() + t + 1);
    o.rope = r;
    return o;
  };
  const VqConfig vq{8, 256};
  auto rand_books = [&] {
    auto tq = [&] { return antkv::TokenQuantizer({antkv::Codebook{vq, d / 8, oracle::random_matrix(g, 256, 8), 0}},
                                                 antkv::CodebookSharing::shared); };
    return antkv::KvCodebooks{tq(), tq()};
  };
  const std::vector<std::int64_t> prefill_pos(pos.begin(), pos.begin() + n);

  // Lossless limit: every prefill token anchored, decoded tokens stay in the window.
  double worst_lossless = 0.0;
  {
    antkv::CacheConfig c;
    c.vq = vq;
    c.anchor_fraction = 1.0;
    c.window_size = steps;
    antkv::QuantizedKVCache cache(c, rand_books());
    const auto res = cache.prefill(rows(q, n), rows(k, n), rows(v, n), prefill_pos);
    antkv::AttentionOptions po;
    po.causal = true;
    po.rope = antkv::RopeSpec::self(prefill_pos);
    worst_lossless = oracle::max_abs_diff(res.output, antkv::attention_exact(rows(q, n), rows(k, n), rows(v, n), po));
    for (std::size_t t = n; t < n + steps; ++t) {
      const auto o = cache.decode_step(q.row(t), k.row(t), v.row(t), pos[t]);
      const auto e = antkv::attention_exact(one(t), rows(k, t + 1), rows(v, t + 1), opt_at(t));
      for (std::size_t c2 = 0; c2 < d; ++c2) worst_lossless = std::max(worst_lossless, double(std::abs(o[c2] - e(0, c2))));
    }
  }
  if (worst_lossless > kCacheAbs) out.fail("lossless limit error " + std::to_string(worst_lossless));

  // Schedule replay with 1% anchors and a window of 8.
  double worst_replay = 0.0;
  bool round_trip = true;
  {
    antkv::CacheConfig c;
    c.vq = vq;
    c.anchor_fraction = 0.01;
    c.window_size = 8;
    const auto books = rand_books();
    antkv::QuantizedKVCache cache(c, books);
    const auto res = cache.prefill(rows(q, n), rows(k, n), rows(v, n), prefill_pos);
    const auto& anchors = res.anchors.indices;
    for (std::size_t t = n; t < n + steps; ++t) {
      const auto o = cache.decode_step(q.row(t), k.row(t), v.row(t), pos[t]);
      std::vector<std::size_t> plain;
      for (std::size_t j = 0; j <= t; ++j)
        if (!std::binary_search(anchors.begin(), anchors.end(), j)) plain.push_back(j);
      HeadTensor kh = rows(k, t + 1), vh = rows(v, t + 1);
      for (std::size_t i = 0; i + c.window_size < plain.size(); ++i) {
        const auto kr = books.key.decode(books.key.encode(k.row(plain[i])));
        const auto vr = books.value.decode(books.value.encode(v.row(plain[i])));
        std::copy(kr.begin(), kr.end(), kh.row(plain[i]).begin());
        std::copy(vr.begin(), vr.end(), vh.row(plain[i]).begin());
      }
      const auto e = antkv::attention_exact(one(t), kh, vh, opt_at(t));
      for (std::size_t c2 = 0; c2 < d; ++c2) worst_replay = std::max(worst_replay, double(std::abs(o[c2] - e(0, c2))));
    }
    round_trip = antkv::decode_cache(antkv::encode_cache(cache)) == cache;
    const auto snap = antkv::encode_cache(cache);
    const auto again = antkv::encode_cache(antkv::decode_cache(snap));
    round_trip = round_trip && again.payload == snap.payload && again.manifest == snap.manifest;
  }
  if (worst_replay > kCacheAbs) out.fail("schedule replay error " + std::to_string(worst_replay));
  if (!round_trip) out.fail("snapshot round trip differs");
  out.detail << "lossless max abs=" << worst_lossless << ", replay max abs=" << worst_replay
             << ", round trip " << (round_trip ? "bit-exact" : "differs");
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<void(Outcome&)>> criteria[] = {
      {"V perturbation bound", criterion_v_bound},
      {"K perturbation bound", criterion_k_bound},
      {"first-order attention delta", criterion_first_order},
      {"blocked anchor scores", criterion_blocked},
      {"bit-rate table", criterion_bits},
      {"attention gradients", criterion_gradients},
      {"weighted k-means", criterion_kmeans},
      {"anchor score effectiveness", criterion_ans},
      {"anchor sweep", criterion_sweep},
      {"cache correctness", criterion_cache},
  };
  int failed = 0;
  int index = 0;
  for (const auto& [name, run] : criteria) {
    ++index;
    Outcome out;
    try {
      run(out);
    } catch (const std::exception& e) {
      out.fail(std::string("exception: ") + e.what());
    }
    std::printf("[%s] criterion %d: %s: %s\n", out.pass ? "PASS" : "FAIL", index, name, out.detail.str().c_str());
    std::fflush(stdout);
    if (!out.pass) ++failed;
  }
  std::printf("%d of %d criteria passed\n", index - failed, index);
  return failed == 0 ? 0 : 1;
}
