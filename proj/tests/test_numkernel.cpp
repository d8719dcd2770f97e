// Copyright 2026 The BindCal Authors
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
#include <cstdint>
#include <limits>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "bindcal/numkernel.hpp"

using namespace bindcal;

namespace {

Eigen::MatrixXd to_eigen(const Matrix &m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

double max_abs_diff(const Matrix &a, const Eigen::MatrixXd &b) {
  double d = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) d = std::max(d, std::abs(a(i, j) - b(i, j)));
  return d;
}

// Textbook xoshiro256** on an explicit state, for cross-checking Rng.
struct RefXoshiro {
  std::uint64_t s[4];
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t next() {
    const std::uint64_t r = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return r;
  }
};

}  // namespace

TEST(Matrix, ShapeAndRowViews) {
  Matrix m(2, 3, 1.5);
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  m.row(1)[2] = 4.0;
  EXPECT_EQ(m(1, 2), 4.0);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>(3)), Error);
  EXPECT_THROW(Matrix::from_rows({{1, 2}, {3}}), Error);
  EXPECT_EQ(Matrix::identity(3)(2, 2), 1.0);
  EXPECT_EQ(Matrix::identity(3)(0, 2), 0.0);
}

TEST(Kernels, MatmulAndGemmAgreeWithEigen) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 1 + rng.below(40), k = 1 + rng.below(70), m = 1 + rng.below(90);
    const Matrix a = gaussian_matrix(n, k, 1.0, rng);
    const Matrix b = gaussian_matrix(k, m, 1.0, rng);
    const Matrix w = gaussian_matrix(m, k, 1.0, rng);
    EXPECT_LT(max_abs_diff(matmul(a, b), to_eigen(a) * to_eigen(b)), 1e-12);
    Matrix out(n, m);
    gemm_nt(a, w, out);
    EXPECT_LT(max_abs_diff(out, to_eigen(a) * to_eigen(w).transpose()), 1e-12);
    const Matrix g = gaussian_matrix(n, m, 1.0, rng);
    Matrix back(n, k);
    gemm_nn(g, w, back);
    EXPECT_LT(max_abs_diff(back, to_eigen(g) * to_eigen(w)), 1e-12);
    EXPECT_LT(max_abs_diff(transpose(a), to_eigen(a).transpose()), 0.0 + 1e-300);
  }
}

TEST(Kernels, MatvecBothWays) {
  const Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  const Vector y = matvec(m, Vector{1, 0, -1});
  EXPECT_EQ(y, (Vector{-2, -2}));
  const Vector z = matvec_t(m, Vector{1, 1});
  EXPECT_EQ(z, (Vector{5, 7, 9}));
  EXPECT_THROW(matvec(m, Vector{1, 2}), Error);
  EXPECT_THROW(matmul(m, m), Error);
}

TEST(Kernels, GemmRowsIndependentOfBatch) {
  // A row's result must not depend on which other rows share the call.
  Rng rng(9);
  const Matrix x = gaussian_matrix(17, 33, 1.0, rng);
  const Matrix w = gaussian_matrix(21, 33, 1.0, rng);
  Matrix all(17, 21);
  gemm_nt(x, w, all);
  for (std::size_t i = 0; i < 17; ++i) {
    Matrix one(1, 33);
    std::copy(x.row(i).begin(), x.row(i).end(), one.row(0).begin());
    Matrix o(1, 21);
    gemm_nt(one, w, o);
    for (std::size_t j = 0; j < 21; ++j) EXPECT_EQ(o(0, j), all(i, j));
  }
}

TEST(Numerics, DotNormCosine) {
  EXPECT_EQ(dot(Vector{1, 2, 3}, Vector{4, 5, 6}), 32.0);
  EXPECT_DOUBLE_EQ(norm2(Vector{3, 4}), 5.0);
  EXPECT_NEAR(cosine(Vector{1, 0}, Vector{1, 1}), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(cosine(Vector{0, 0}, Vector{1, 1}), Error);
  EXPECT_THROW(dot(Vector{1}, Vector{1, 2}), Error);
}

TEST(Numerics, LogSumExpStableAndSoftmaxSumsToOne) {
  EXPECT_NEAR(log_sum_exp(Vector{0, 0, 0, 0}), std::log(4.0), 1e-15);
  EXPECT_NEAR(log_sum_exp(Vector{1000, 1000}), 1000 + std::log(2.0), 1e-12);
  EXPECT_NEAR(log_sum_exp(Vector{-1000, -1000}), -1000 + std::log(2.0), 1e-12);
  const Vector p = softmax(Vector{1, 2, 3});
  const double z = std::exp(1) + std::exp(2) + std::exp(3);
  EXPECT_NEAR(p[2], std::exp(3) / z, 1e-15);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-15);
}

TEST(Numerics, RequireFinite) {
  EXPECT_NO_THROW(require_finite(Vector{1, 2}, "v"));
  EXPECT_THROW(require_finite(Vector{1, std::nan("")}, "v"), Error);
  EXPECT_THROW(require_finite(Vector{std::numeric_limits<double>::infinity()}, "v"), Error);
}

TEST(Rng, SplitMixKnownValue) {
  std::uint64_t s = 0;
  EXPECT_EQ(splitmix64(s), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, XoshiroReferenceVector) {
  RefXoshiro ref{{1, 2, 3, 4}};
  EXPECT_EQ(ref.next(), 11520ULL);
  EXPECT_EQ(ref.next(), 0ULL);
  EXPECT_EQ(ref.next(), 1509978240ULL);
  EXPECT_EQ(ref.next(), 1215971899390074240ULL);
}

TEST(Rng, MatchesReferenceWhenSeededBySplitMix) {
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xFFFFFFFFFFFFFFFFULL}) {
    std::uint64_t s = seed;
    RefXoshiro ref{};
    for (auto &w : ref.s) w = splitmix64(s);
    Rng rng(seed);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(rng.next_u64(), ref.next());
  }
}

TEST(Rng, DistributionsLookRight) {
  Rng rng(5);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0, ss = 0;
  std::size_t below_max = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double g = rng.normal();
    sn += g;
    sn2 += g * g;
    ss += rng.sign();
    below_max = std::max(below_max, rng.below(7));
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.01);
  EXPECT_NEAR(ss / n, 0.0, 0.01);
  EXPECT_EQ(below_max, 6u);
}

TEST(Rng, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
}

TEST(GradCheck, QuadraticIsExact) {
  auto f = [](std::span<const double> x) { return x[0] * x[0] + 3 * x[0] * x[1]; };
  const Vector p{0.7, -1.3};
  const Vector g{2 * 0.7 + 3 * -1.3, 3 * 0.7};
  EXPECT_LT(grad_check(f, g, p), 1e-8);
  const Vector wrong{g[0] + 0.1, g[1]};
  EXPECT_GT(grad_check(f, wrong, p), 1e-2);
}

TEST(Eigen, JacobiMatchesEigenSolver) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 2 + rng.below(9);
    const Matrix a = gaussian_matrix(n, n, 1.0, rng);
    Matrix s = matmul(a, transpose(a));
    const SymmetricEigen mine = symmetric_eigen(s);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(s));
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_NEAR(mine.values[j], es.eigenvalues()(static_cast<Eigen::Index>(n - 1 - j)), 1e-9);
      // Eigenvector up to sign.
      double d = 0;
      for (std::size_t k = 0; k < n; ++k)
        d += mine.vectors(k, j) * es.eigenvectors()(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n - 1 - j));
      EXPECT_NEAR(std::abs(d), 1.0, 1e-8);
    }
  }
}

TEST(Eigen, Pca2ProjectsOnLeadingDirections) {
  // Points spread along x much more than y, z flat.
  Rng rng(13);
  Matrix p(300, 3);
  for (std::size_t i = 0; i < 300; ++i) {
    p(i, 0) = 10 * rng.normal();
    p(i, 1) = 2 * rng.normal();
    p(i, 2) = 0.01 * rng.normal();
  }
  const Matrix q = pca2(p);
  ASSERT_EQ(q.cols(), 2u);
  Eigen::MatrixXd e = to_eigen(p);
  e.rowwise() -= e.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(e.transpose() * e / 300.0);
  const Eigen::VectorXd v0 = es.eigenvectors().col(2);
  // Projection matches the Eigen principal axis up to sign.
  double dp = 0, dm = 0;
  for (std::size_t i = 0; i < 300; ++i) {
    const double ref = e.row(static_cast<Eigen::Index>(i)).dot(v0);
    dp = std::max(dp, std::abs(q(i, 0) - ref));
    dm = std::max(dm, std::abs(q(i, 0) + ref));
  }
  EXPECT_LT(std::min(dp, dm), 1e-8);
  EXPECT_THROW(pca2(Matrix(1, 3)), Error);
  EXPECT_THROW(pca2(Matrix(4, 3)), Error);
}

TEST(Numerics, RoundF32) {
  EXPECT_EQ(round_f32(0.1), static_cast<double>(0.1f));
  EXPECT_EQ(round_f32(0.5), 0.5);
}
