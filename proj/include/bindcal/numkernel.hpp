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

#ifndef BINDCAL_NUMKERNEL_HPP_
#define BINDCAL_NUMKERNEL_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bindcal/error.hpp"

namespace bindcal {

using Vector = std::vector<double>;

// Dense row-major matrix of 64-bit floats.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "matrix data length " + std::to_string(data_.size()) +
                      " != " + std::to_string(rows_) + "x" +
                      std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_rows(
      std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto &row : rows) {
      if (row.size() != c) {
        throw Error(ErrorCode::kDimensionMismatch, "ragged row list");
      }
      std::copy(row.begin(), row.end(), m.row(i++).begin());
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double &operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double> &storage() noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Matrix &) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Matrix &m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_finite(std::span<const double> v, const char *what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw Error(ErrorCode::kNonFinite, std::string(what) + " has a non-finite entry");
    }
  }
}

// Rounds to the nearest binary32 value; every persisted number goes through
// this so that files round-trip bit-exactly.
inline double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// ---------------------------------------------------------------------------
// Reductions. `dot` accumulates strictly left to right; `dot_lanes` uses four
// interleaved partial sums combined as (s0+s1)+(s2+s3). Both orders depend only
// on the vector length, so results never depend on batch composition.

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "dot of " + std::to_string(a.size()) + " and " +
                    std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double dot_lanes(const double *a, const double *b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline double frobenius(const Matrix &m) { return norm2(m.data()); }

// Standard product with deterministic accumulation (row-major, left-to-right).
inline Matrix matmul(const Matrix &a, const Matrix &b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "matmul " + shape_str(a) + " x " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  }
  return out;
}

inline Matrix transpose(const Matrix &m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

inline Vector matvec(const Matrix &m, std::span<const double> x) {
  if (m.cols() != x.size()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "matvec " + shape_str(m) + " x " + std::to_string(x.size()));
  }
  Vector y(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    y[i] = dot_lanes(m.row(i).data(), x.data(), x.size());
  return y;
}

// y = m^T g, accumulated over rows of m in order.
inline Vector matvec_t(const Matrix &m, std::span<const double> g) {
  if (m.rows() != g.size()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "matvec_t " + shape_str(m) + " x " + std::to_string(g.size()));
  }
  Vector y(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double gi = g[i];
    const double *w = m.row(i).data();
    for (std::size_t j = 0; j < m.cols(); ++j) y[j] += gi * w[j];
  }
  return y;
}

// out = x * w^T where x is (n x k) and w is (m x k). Blocked over rows of w so
// a weight tile stays cache resident while the batch streams past it.
inline void gemm_nt(const Matrix &x, const Matrix &w, Matrix &out) {
  if (x.cols() != w.cols()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "gemm_nt " + shape_str(x) + " x " + shape_str(w) + "^T");
  }
  if (out.rows() != x.rows() || out.cols() != w.rows()) {
    out = Matrix(x.rows(), w.rows());
  }
  const std::size_t k = x.cols();
  constexpr std::size_t kTile = 64;
  for (std::size_t j0 = 0; j0 < w.rows(); j0 += kTile) {
    const std::size_t j1 = std::min(w.rows(), j0 + kTile);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const double *xi = x.row(i).data();
      double *oi = out.row(i).data();
      for (std::size_t j = j0; j < j1; ++j) {
        oi[j] = dot_lanes(xi, w.row(j).data(), k);
      }
    }
  }
}

// out = g * w where g is (n x m) and w is (m x k); each output row accumulates
// the rows of w in order.
inline void gemm_nn(const Matrix &g, const Matrix &w, Matrix &out) {
  if (g.cols() != w.rows()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "gemm_nn " + shape_str(g) + " x " + shape_str(w));
  }
  out = Matrix(g.rows(), w.cols());
  const std::size_t k = w.cols();
  constexpr std::size_t kTile = 64;
  for (std::size_t j0 = 0; j0 < w.rows(); j0 += kTile) {
    const std::size_t j1 = std::min(w.rows(), j0 + kTile);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const double *gi = g.row(i).data();
      double *oi = out.row(i).data();
      for (std::size_t j = j0; j < j1; ++j) {
        const double s = gi[j];
        if (s == 0.0) continue;
        const double *wj = w.row(j).data();
        for (std::size_t c = 0; c < k; ++c) oi[c] += s * wj[c];
      }
    }
  }
}

// ---------------------------------------------------------------------------

inline double cosine(std::span<const double> u, std::span<const double> v) {
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (!(nu > 0.0) || !(nv > 0.0)) {
    throw Error(ErrorCode::kDegenerate, "cosine of a zero-norm vector");
  }
  return dot(u, v) / (nu * nv);
}

inline double log_sum_exp(std::span<const double> v) {
  require_finite(v, "log_sum_exp input");
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline Vector softmax(std::span<const double> logits) {
  require_finite(logits, "softmax input");
  if (logits.empty()) return {};
  const double m = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    s += p[i];
  }
  for (double &x : p) x /= s;
  return p;
}

// ---------------------------------------------------------------------------
// Rng: xoshiro256** (Blackman & Vigna) seeded through SplitMix64. This is the
// only source of randomness in the repository.

inline std::uint64_t splitmix64(std::uint64_t &state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Child seed for (seed, stream); used to split work deterministically.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0xD1B54A32D192ED03ULL * (stream + 1));
  splitmix64(s);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t s = seed;
    for (auto &w : state_) w = splitmix64(s);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }

  // Standard normal via the Box-Muller transform; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double sign() { return (next_u64() >> 63) != 0 ? 1.0 : -1.0; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Fills a matrix with N(0, scale^2) entries drawn row by row.
inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double scale,
                              Rng &rng) {
  Matrix m(rows, cols);
  for (double &v : m.data()) v = scale * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / (|central| + 1e-8).
inline double grad_check(const std::function<double(std::span<const double>)> &f,
                         std::span<const double> analytic,
                         std::span<const double> point, double h = 1e-5) {
  if (!(h > 0.0)) throw Error(ErrorCode::kInvalidArgument, "grad_check step must be > 0");
  if (analytic.size() != point.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "grad_check gradient/point size");
  }
  Vector x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x);
    x[i] = saved - h;
    const double fm = f(x);
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw Error(ErrorCode::kNonFinite, "grad_check objective not finite");
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

// Central-difference gradient of f at `point`.
inline Vector numeric_gradient(const std::function<double(std::span<const double>)> &f,
                               std::span<const double> point, double h = 1e-5) {
  if (!(h > 0.0)) throw Error(ErrorCode::kInvalidArgument, "finite-difference step must be > 0");
  Vector x(point.begin(), point.end()), g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x);
    x[i] = saved - h;
    const double fm = f(x);
    x[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  require_finite(g, "numeric gradient");
  return g;
}

// |a - b| / max(|a|, |b|, floor) in the Euclidean norm. The floor keeps
// finite-difference noise on a (locally) flat objective from reading as a
// large relative error.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  if (a.size() != b.size()) throw Error(ErrorCode::kDimensionMismatch, "relative_error sizes");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d) / std::max({norm2(a), norm2(b), floor});
}

// ---------------------------------------------------------------------------

struct SymmetricEigen {
  Vector values;   // descending
  Matrix vectors;  // column j is the eigenvector of values[j]
};

// Cyclic Jacobi rotations; intended for the small covariance matrices used by
// pca2, not for large problems.
inline SymmetricEigen symmetric_eigen(Matrix a, int max_sweeps = 100) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw Error(ErrorCode::kDimensionMismatch, "eigen of non-square");
  Matrix v = Matrix::identity(n);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  SymmetricEigen out{Vector(n), Matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = v(k, order[j]);
  }
  return out;
}

inline Matrix covariance(const Matrix &points) {
  const std::size_t n = points.rows(), d = points.cols();
  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += points(i, j);
  for (double &m : mean) m /= static_cast<double>(n);
  Matrix cov(d, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov(a, b) += (points(i, a) - mean[a]) * (points(i, b) - mean[b]);
  for (double &c : cov.data()) c /= static_cast<double>(n);
  return cov;
}

// Projection of mean-centered rows onto the top-2 principal directions. Each
// direction is signed so that its largest-magnitude loading is positive.
inline Matrix pca2(const Matrix &points) {
  if (points.rows() < 2) throw Error(ErrorCode::kInvalidArgument, "pca2 needs >= 2 rows");
  const std::size_t d = points.cols();
  const Matrix cov = covariance(points);
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += cov(i, i);
  if (!(trace > 0.0)) throw Error(ErrorCode::kDegenerate, "pca2 of rank-0 input");
  const SymmetricEigen eig = symmetric_eigen(cov);
  const std::size_t k = std::min<std::size_t>(2, d);
  Matrix dirs(d, 2);
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (std::abs(eig.vectors(i, j)) > std::abs(eig.vectors(arg, j))) arg = i;
    const double s = eig.vectors(arg, j) < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < d; ++i) dirs(i, j) = s * eig.vectors(i, j);
  }
  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < points.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += points(i, j);
  for (double &m : mean) m /= static_cast<double>(points.rows());
  Matrix out(points.rows(), 2);
  for (std::size_t i = 0; i < points.rows(); ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += (points(i, c) - mean[c]) * dirs(c, j);
      out(i, j) = s;
    }
  return out;
}

}  // namespace bindcal

#endif  // BINDCAL_NUMKERNEL_HPP_
