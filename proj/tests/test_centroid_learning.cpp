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

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "antkv/centroid_learning.hpp"
#include "antkv/codebook_io.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

namespace {

using antkv::AttentionOptions;
using antkv::HeadTensor;
using antkv::Matrix;

AttentionOptions make_opt(bool causal, bool rope, std::size_t n) {
  AttentionOptions o;
  o.causal = causal;
  if (rope) o.rope = antkv::RopeSpec::self(oracle::iota(n, 5));
  return o;
}

double loss(const oracle::Mat& q, const oracle::Mat& k, const oracle::Mat& v, const oracle::Mat& g,
            const AttentionOptions& opt) {
  std::optional<oracle::Rope> r;
  if (opt.rope) r = oracle::Rope{opt.rope->q_positions, opt.rope->k_positions, opt.rope->theta_base};
  const auto o = oracle::attention(q, k, v, opt.causal, r);
  double s = 0.0;
  for (std::size_t i = 0; i < o.size(); ++i)
    for (std::size_t c = 0; c < o[i].size(); ++c) s += g[i][c] * o[i][c];
  return s;
}

TEST(AttentionBackward, ZeroUpstreamGradient) {
  std::mt19937_64 gen(1);
  const HeadTensor q = oracle::random_matrix(gen, 6, 4);
  const HeadTensor k = oracle::random_matrix(gen, 6, 4);
  const HeadTensor v = oracle::random_matrix(gen, 6, 4);
  const auto g = antkv::attention_backward(q, k, v, HeadTensor(6, 4, 0.0f), make_opt(true, true, 6));
  EXPECT_EQ(g.dK, HeadTensor(6, 4, 0.0f));
  EXPECT_EQ(g.dV, HeadTensor(6, 4, 0.0f));
}

TEST(AttentionBackward, SingleToken) {
  std::mt19937_64 gen(2);
  const HeadTensor q = oracle::random_matrix(gen, 1, 4);
  const HeadTensor k = oracle::random_matrix(gen, 1, 4);
  const HeadTensor v = oracle::random_matrix(gen, 1, 4);
  const HeadTensor d_out = oracle::random_matrix(gen, 1, 4);
  const auto g = antkv::attention_backward(q, k, v, d_out);
  EXPECT_EQ(g.dV, d_out);
  for (float x : g.dK.values()) EXPECT_EQ(x, 0.0f);
}

TEST(AttentionBackward, MatchesCentralFiniteDifferences) {
  std::mt19937_64 gen(3);
  const double h = 1e-3;
  for (bool causal : {false, true})
    for (bool rope : {false, true}) {
      const std::size_t n = 7, d = 6;
      const HeadTensor q = oracle::random_matrix(gen, n, d);
      const HeadTensor k = oracle::random_matrix(gen, n, d);
      const HeadTensor v = oracle::random_matrix(gen, n, d);
      const HeadTensor g = oracle::random_matrix(gen, n, d);
      const auto opt = make_opt(causal, rope, n);
      const auto grads = antkv::attention_backward(q.cast<double>(), k.cast<double>(), v.cast<double>(),
                                                   g.cast<double>(), opt);
      const auto qm = oracle::to_mat(q), gm = oracle::to_mat(g);
      for (int which = 0; which < 2; ++which) {
        const Matrix<double>& analytic = which == 0 ? grads.dK : grads.dV;
        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t c = 0; c < d; ++c) {
            auto km = oracle::to_mat(k), vm = oracle::to_mat(v);
            auto& x = which == 0 ? km[t][c] : vm[t][c];
            const double x0 = x;
            x = x0 + h;
            const double up = loss(qm, km, vm, gm, opt);
            x = x0 - h;
            const double down = loss(qm, km, vm, gm, opt);
            const double fd = (up - down) / (2 * h);
            if (std::abs(analytic(t, c)) > 1e-6) {
              EXPECT_LT(oracle::rel_diff(analytic(t, c), fd), 1e-3)
                  << (which == 0 ? "dK" : "dV") << "(" << t << "," << c << ") causal=" << causal << " rope=" << rope;
            }
          }
      }
    }
}

TEST(AttentionBackward, CausalZeroesGradientsOfUnseenRows) {
  std::mt19937_64 gen(4);
  const HeadTensor q = oracle::random_matrix(gen, 5, 4);
  const HeadTensor k = oracle::random_matrix(gen, 5, 4);
  const HeadTensor v = oracle::random_matrix(gen, 5, 4);
  HeadTensor g(5, 4, 0.0f);
  g(1, 2) = 1.0f;  // only query 1 contributes, which sees keys 0 and 1
  const auto grads = antkv::attention_backward(q, k, v, g, make_opt(true, false, 5));
  for (std::size_t t = 2; t < 5; ++t)
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(grads.dK(t, c), 0.0f);
      EXPECT_EQ(grads.dV(t, c), 0.0f);
    }
}

TEST(AttentionBackward, RejectsShapeMismatch) {
  const HeadTensor x(4, 4, 1.0f);
  EXPECT_THROW((void)antkv::attention_backward(x, x, x, HeadTensor(3, 4)), antkv::InvalidArgument);
}

TEST(FirstOrderFidelity, ResidualShrinksQuadratically) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 12, d = 8;
    const auto q = oracle::random_matrix(gen, n, d).cast<double>();
    const auto k = oracle::random_matrix(gen, n, d).cast<double>();
    const auto v = oracle::random_matrix(gen, n, d).cast<double>();
    const auto g = oracle::random_matrix(gen, n, d).cast<double>();
    const auto rk = oracle::random_matrix(gen, n, d, 0.5).cast<double>();
    const auto rv = oracle::random_matrix(gen, n, d, 0.5).cast<double>();
    const auto opt = make_opt(true, true, n);
    const auto grads = antkv::attention_backward(q, k, v, g, opt);
    auto total = [&](const Matrix<double>& kk, const Matrix<double>& vv) {
      const auto o = antkv::attention_exact(q, kk, vv, opt);
      double s = 0.0;
      for (std::size_t i = 0; i < o.size(); ++i) s += o.values()[i] * g.values()[i];
      return s;
    };
    const double base = total(k, v);
    double inner = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i)
      inner += grads.dK.values()[i] * rk.values()[i] + grads.dV.values()[i] * rv.values()[i];
    std::vector<double> residual;
    for (double eps : {1e-1, 5e-2, 2.5e-2}) {
      const double changed = total(antkv::subtract(k, antkv::scaled(rk, eps)), antkv::subtract(v, antkv::scaled(rv, eps)));
      residual.push_back(std::abs((base - changed) - eps * inner));
    }
    for (std::size_t i = 0; i + 1 < residual.size(); ++i) {
      const double ratio = residual[i] / residual[i + 1];
      EXPECT_GE(ratio, 3.0) << "trial " << trial;
      EXPECT_LE(ratio, 5.0) << "trial " << trial;
    }
  }
}

TEST(GradientTokenWeights, ZeroGradientGivesFloor) {
  const auto w = antkv::gradient_token_weights(HeadTensor(4, 8, 0.0f), 4, 1e-8);
  ASSERT_EQ(w.weights.size(), 8u);
  for (double x : w.weights) EXPECT_EQ(x, 1e-8);
  EXPECT_EQ(w.epsilon_floor, 1e-8);
}

TEST(GradientTokenWeights, SingleUnitSubvector) {
  HeadTensor g(3, 4, 0.0f);
  g(1, 2) = 0.6f;
  g(1, 3) = 0.8f;
  const auto w = antkv::gradient_token_weights(g, 2, 1e-8);
  for (std::size_t i = 0; i < w.weights.size(); ++i) {
    if (i == 3)
      EXPECT_NEAR(w.weights[i], 1.0 + 1e-8, 1e-7);
    else
      EXPECT_EQ(w.weights[i], 1e-8);
  }
}

TEST(GradientTokenWeights, MatchesDirectSquaredNorms) {
  std::mt19937_64 gen(6);
  const HeadTensor g = oracle::random_matrix(gen, 10, 12);
  for (std::size_t ds : {1u, 3u, 4u, 12u}) {
    const auto w = antkv::gradient_token_weights(g, ds, 1e-6);
    ASSERT_EQ(w.weights.size(), 10 * 12 / ds);
    for (std::size_t t = 0; t < 10; ++t)
      for (std::size_t s = 0; s < 12 / ds; ++s) {
        double sq = 0.0;
        for (std::size_t c = 0; c < ds; ++c) sq += std::pow(double(g(t, s * ds + c)), 2);
        EXPECT_NEAR(w.weights[t * (12 / ds) + s], 1e-6 + sq, 1e-12 * (1.0 + sq));
        EXPECT_GE(w.weights[t * (12 / ds) + s], 1e-6);
      }
  }
}

TEST(GradientTokenWeights, RejectsBadArguments) {
  const HeadTensor g(2, 4, 1.0f);
  EXPECT_THROW((void)antkv::gradient_token_weights(g, 2, -1.0), antkv::InvalidArgument);
  EXPECT_THROW((void)antkv::gradient_token_weights(g, 3), antkv::InvalidArgument);
}

antkv::CalibrationSet random_calibration(std::mt19937_64& gen, std::size_t samples, std::size_t n, std::size_t d) {
  antkv::CalibrationSet c;
  for (std::size_t s = 0; s < samples; ++s)
    c.samples.push_back({oracle::random_matrix(gen, n, d), oracle::random_matrix(gen, n, d),
                         oracle::random_matrix(gen, n, d), oracle::iota(n)});
  return c;
}

TEST(LearnKvCodebooks, IdenticalTokensGiveZeroError) {
  std::mt19937_64 gen(7);
  const HeadTensor krow = oracle::random_matrix(gen, 1, 8);
  const HeadTensor vrow = oracle::random_matrix(gen, 1, 8);
  HeadTensor k(16, 8), v(16, 8);
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t c = 0; c < 8; ++c) k(t, c) = krow(0, c), v(t, c) = vrow(0, c);
  antkv::CalibrationSet calib;
  calib.samples.push_back({oracle::random_matrix(gen, 16, 8), k, v, oracle::iota(16)});
  antkv::LearnOptions opt;
  opt.config = {8, 4};
  const auto learned = antkv::learn_kv_codebooks(calib, opt, antkv::SurrogateLoss{}, 1);
  EXPECT_EQ(learned.codebooks.key.reconstruct(k), k);
  EXPECT_EQ(learned.codebooks.value.reconstruct(v), v);
  EXPECT_EQ(learned.key_reports.front().objective_trace.back(), 0.0);
  EXPECT_EQ(learned.value_reports.front().objective_trace.back(), 0.0);
}

TEST(LearnKvCodebooks, TokenAwareBeatsUniformUnderGradientWeights) {
  std::mt19937_64 gen(8);
  const auto calib = random_calibration(gen, 4, 64, 16);
  antkv::LearnOptions aware;
  aware.config = {4, 16};
  antkv::LearnOptions uniform = aware;
  uniform.token_aware = false;
  const antkv::SurrogateLoss loss{99};
  const auto a = antkv::learn_kv_codebooks(calib, aware, loss, 5);
  const auto u = antkv::learn_kv_codebooks(calib, uniform, loss, 5);
  const auto data = antkv::gather_training_data(calib, aware, loss);
  const double aware_k = antkv::codebook_objective(a.codebooks.key.books().front(), data.key_points, data.key_weights);
  const double uniform_k = antkv::codebook_objective(u.codebooks.key.books().front(), data.key_points, data.key_weights);
  EXPECT_LE(aware_k, uniform_k);
  const double aware_v = antkv::codebook_objective(a.codebooks.value.books().front(), data.value_points, data.value_weights);
  const double uniform_v = antkv::codebook_objective(u.codebooks.value.books().front(), data.value_points, data.value_weights);
  EXPECT_LE(aware_v, uniform_v);
}

TEST(LearnKvCodebooks, DeterministicAndSeedSensitive) {
  std::mt19937_64 gen(9);
  const auto calib = random_calibration(gen, 2, 32, 8);
  antkv::LearnOptions opt;
  opt.config = {4, 8};
  const auto a = antkv::learn_kv_codebooks(calib, opt, antkv::SurrogateLoss{1}, 3);
  const auto b = antkv::learn_kv_codebooks(calib, opt, antkv::SurrogateLoss{1}, 3);
  const auto c = antkv::learn_kv_codebooks(calib, opt, antkv::SurrogateLoss{1}, 4);
  EXPECT_EQ(a.codebooks, b.codebooks);
  EXPECT_NE(a.codebooks, c.codebooks);
}

TEST(LearnKvCodebooks, WeightsRespectFloor) {
  std::mt19937_64 gen(10);
  const auto calib = random_calibration(gen, 2, 16, 8);
  antkv::LearnOptions opt;
  opt.config = {2, 4};
  opt.epsilon_floor = 1e-3;
  const auto data = antkv::gather_training_data(calib, opt, antkv::SurrogateLoss{});
  EXPECT_EQ(data.key_weights.size(), 2u * 16u * 4u);
  for (double w : data.key_weights) EXPECT_GE(w, 1e-3);
  for (double w : data.value_weights) EXPECT_GE(w, 1e-3);
  const auto learned = antkv::learn_kv_codebooks(calib, opt, antkv::SurrogateLoss{}, 0);
  EXPECT_GE(learned.key_reports.front().weight_stats.min, 1e-3);
}

TEST(LearnKvCodebooks, PerPositionSharing) {
  std::mt19937_64 gen(11);
  const auto calib = random_calibration(gen, 2, 32, 8);
  antkv::LearnOptions opt;
  opt.config = {2, 8};
  opt.sharing = antkv::CodebookSharing::per_position;
  const auto learned = antkv::learn_kv_codebooks(calib, opt, antkv::SurrogateLoss{}, 0);
  EXPECT_EQ(learned.codebooks.key.books().size(), 4u);
  EXPECT_EQ(learned.key_reports.size(), 4u);
  for (const auto& b : learned.codebooks.key.books()) EXPECT_EQ(b.groups, 1u);
}

TEST(LearnKvCodebooks, SerializationRoundTripPreservesCodes) {
  TempDir dir("learn");
  std::mt19937_64 gen(12);
  const auto calib = random_calibration(gen, 2, 32, 16);
  for (auto sharing : {antkv::CodebookSharing::shared, antkv::CodebookSharing::per_position}) {
    antkv::LearnOptions opt;
    opt.config = {4, 16};
    opt.sharing = sharing;
    const auto learned = antkv::learn_kv_codebooks(calib, opt, antkv::SurrogateLoss{}, 7);
    const auto sub = dir / antkv::to_string(sharing);
    antkv::save_kv_codebooks(learned.codebooks, sub);
    const auto back = antkv::load_kv_codebooks(sub);
    EXPECT_EQ(back, learned.codebooks);
    for (const auto& s : calib.samples)
      for (std::size_t t = 0; t < s.k.rows(); ++t) {
        EXPECT_EQ(back.key.encode(s.k.row(t)), learned.codebooks.key.encode(s.k.row(t)));
        EXPECT_EQ(back.value.encode(s.v.row(t)), learned.codebooks.value.encode(s.v.row(t)));
      }
  }
}

TEST(LearnKvCodebooks, RejectsInvalidInputs) {
  antkv::LearnOptions opt;
  opt.config = {3, 4};
  EXPECT_THROW((void)antkv::learn_kv_codebooks(antkv::CalibrationSet{}, opt, antkv::SurrogateLoss{}, 0),
               antkv::InvalidArgument);
  std::mt19937_64 gen(13);
  EXPECT_THROW((void)antkv::learn_kv_codebooks(random_calibration(gen, 1, 8, 8), opt, antkv::SurrogateLoss{}, 0),
               antkv::InvalidArgument);
}

}  // namespace
