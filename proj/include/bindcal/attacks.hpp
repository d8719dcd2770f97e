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

// l-infinity attacks on cosine-logit classifiers: PGD, APGD (CE and DLR) and
// Square, plus worst-case suite aggregation and the adversarial-pair cache.
//
// Attacks run on batches, but each row's trajectory depends only on that row:
// the GEMM kernels accumulate per output element in a fixed order and every
// row owns an Rng seeded from (cfg.seed, sample id, restart). Dropping rows
// that have already been broken therefore never changes the others.
//
// Pair cache layout (little-endian):
//   "BCAL1" | u8 0x02 | u8 method | f64 epsilon | u64 seed | u32 iterations |
//   32-byte model hash | u32 n | u32 raw_dim | u32 n_classes | u8 split |
//   n x u32 label | n*raw_dim x f32 clean | n*raw_dim x f32 adv | n x u8 success

#ifndef BINDCAL_ATTACKS_HPP_
#define BINDCAL_ATTACKS_HPP_

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bindcal/binio.hpp"
#include "bindcal/error.hpp"
#include "bindcal/heads.hpp"
#include "bindcal/losses.hpp"
#include "bindcal/model.hpp"
#include "bindcal/numkernel.hpp"
#include "bindcal/synthdata.hpp"

namespace bindcal {

// Per-row objective maximized by an attack.
enum class Objective { kCe, kDlr, kMargin };

inline double objective_from_logits(Objective o, std::span<const double> f, std::size_t y, Vector *grad) {
  switch (o) {
    case Objective::kCe: return ce_from_logits(f, y, grad);
    case Objective::kDlr: return dlr_from_logits(f, y, grad);
    case Objective::kMargin: return margin_from_logits(f, y, grad);
  }
  return 0.0;
}

// A batched differentiable classifier. `loss_grad` evaluates the objective on
// every row of x, the gradient with respect to the input rows, and the
// predicted class of each row.
template <class M>
concept AttackModel = requires(const M &m, const Matrix &x, std::span<const std::uint32_t> y,
                               Objective o, Vector &loss, Matrix &grad, std::vector<std::size_t> &pred) {
  { m.num_classes() } -> std::convertible_to<std::size_t>;
  { m.logits(x) } -> std::same_as<Matrix>;
  m.loss_grad(x, y, o, loss, grad, pred);
};

// Encoder, optional head, centers. Holds references; the parts must outlive it.
class CosineClassifier {
 public:
  CosineClassifier(const FrozenEncoder &enc, const ProjectionHead *head, const SemanticCenters &centers)
      : enc_(enc), head_(head), centers_(centers) {
    if (centers.dim() != enc.out_dim()) throw Error(ErrorCode::kDimensionMismatch, "centers vs encoder");
    if (head != nullptr && head->in_dim() != enc.out_dim()) {
      throw Error(ErrorCode::kDimensionMismatch, "head vs encoder");
    }
  }

  std::size_t num_classes() const { return centers_.num_classes(); }
  std::size_t input_dim() const { return enc_.in_dim(); }

  Matrix embeddings(const Matrix &x) const {
    Matrix z = enc_.encode_all(x);
    if (head_ == nullptr) return z;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const Vector e = head_->forward(z.row(i));
      std::copy(e.begin(), e.end(), z.row(i).begin());
    }
    return z;
  }

  Matrix logits(const Matrix &x) const {
    const Matrix e = embeddings(x);
    Matrix f(e.rows(), num_classes());
    for (std::size_t i = 0; i < e.rows(); ++i) {
      const Vector fi = cosine_logits(e.row(i), centers_);
      std::copy(fi.begin(), fi.end(), f.row(i).begin());
    }
    return f;
  }

  void loss_grad(const Matrix &x, std::span<const std::uint32_t> y, Objective o, Vector &loss,
                 Matrix &grad, std::vector<std::size_t> &pred) const {
    Matrix hidden, z;
    enc_.encode_batch(x, z, &hidden);
    Matrix gz(z.rows(), z.cols());
    loss.assign(z.rows(), 0.0);
    pred.assign(z.rows(), 0);
    ProjectionHead::Trace trace;
    Vector gf;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      const Vector e = head_ != nullptr ? head_->forward(z.row(i), trace) : Vector(z.row(i).begin(), z.row(i).end());
      const Vector f = cosine_logits(e, centers_);
      pred[i] = predict(f);
      loss[i] = objective_from_logits(o, f, y[i], &gf);
      Vector de = cosine_logits_backward(e, centers_, gf);
      if (head_ != nullptr) de = head_->backward(trace, de, nullptr);
      std::copy(de.begin(), de.end(), gz.row(i).begin());
    }
    enc_.backward_batch(hidden, gz, grad);
  }

 private:
  const FrozenEncoder &enc_;
  const ProjectionHead *head_;
  const SemanticCenters &centers_;
};

// ---------------------------------------------------------------------------

enum class AttackMethod : std::uint8_t { kPgd = 0, kApgdCe = 1, kApgdDlr = 2, kSquare = 3 };

inline const char *attack_method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::kPgd: return "pgd";
    case AttackMethod::kApgdCe: return "apgd-ce";
    case AttackMethod::kApgdDlr: return "apgd-dlr";
    case AttackMethod::kSquare: return "square";
  }
  return "?";
}

inline AttackMethod parse_attack_method(const std::string &s) {
  if (s == "pgd") return AttackMethod::kPgd;
  if (s == "apgd-ce") return AttackMethod::kApgdCe;
  if (s == "apgd-dlr") return AttackMethod::kApgdDlr;
  if (s == "square") return AttackMethod::kSquare;
  throw Error(ErrorCode::kConfig, "unknown attack method '" + s + "'");
}

struct AttackBudget {
  double epsilon = 8.0 / 255.0;

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
      throw Error(ErrorCode::kInvalidArgument, "epsilon must be finite and >= 0");
    }
  }
};

struct AttackConfig {
  AttackMethod method = AttackMethod::kApgdCe;
  std::size_t iterations = 50;  // gradient steps, or queries for square
  std::size_t restarts = 1;
  std::uint64_t seed = 0;
  bool random_start = false;
  bool early_stop = true;       // stop a row once it is misclassified
  // APGD schedule.
  double momentum = 0.75;
  double rho = 0.75;
  double p1 = 0.22;
  double p_decay = 0.03;
  double p_min = 0.06;
  // Square block fraction at the first query.
  double p_init = 0.8;

  void validate() const {
    if (restarts < 1) throw Error(ErrorCode::kInvalidArgument, "restarts must be >= 1");
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "momentum in [0,1]");
    if (!(rho > 0.0 && rho <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "rho in (0,1]");
    if (!(p_init > 0.0 && p_init <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "p_init in (0,1]");
  }
};

struct AdvPair {
  Vector clean;
  Vector adv;
  std::uint32_t label = 0;
  AttackBudget budget;
  bool success = false;
  Vector loss_trace;  // best objective value after each evaluation
};

namespace detail {

inline double project(double v, double x, double eps) {
  return std::clamp(v, std::max(0.0, x - eps), std::min(1.0, x + eps));
}

// Rounds to binary32; if rounding leaves the feasible set, moves one ulp
// toward the clean value. A clean value that is not itself binary32 (and an
// interval too narrow to hold one) falls back to the clean value unrounded.
inline double feasible_f32(double v, double x, double eps) {
  float f = static_cast<float>(v);
  const double lo = std::max(0.0, x - eps), hi = std::min(1.0, x + eps);
  auto inside = [&](float t) { return static_cast<double>(t) >= lo && static_cast<double>(t) <= hi; };
  if (!inside(f)) f = std::nextafter(f, static_cast<float>(x));
  return inside(f) ? static_cast<double>(f) : x;
}

inline Matrix gather(const Matrix &m, const std::vector<std::size_t> &rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  return out;
}

template <class T>
std::vector<T> gather(const std::vector<T> &v, const std::vector<std::size_t> &rows) {
  std::vector<T> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = v[rows[i]];
  return out;
}

inline void copy_row(std::span<const double> src, std::span<double> dst) { std::copy(src.begin(), src.end(), dst.begin()); }

// Result of one restart for one row.
struct RowResult {
  Vector best;          // highest-objective iterate
  double best_loss = -std::numeric_limits<double>::infinity();
  std::optional<Vector> fooled;  // first misclassified iterate seen
  Vector trace;
};

inline Vector starting_point(std::span<const double> x, std::span<const double> init, double eps,
                             bool random, Rng &rng) {
  Vector s(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    double v = init[j];
    if (random) v = x[j] + eps * rng.uniform(-1.0, 1.0);
    s[j] = project(v, x[j], eps);
  }
  return s;
}

// Evaluates the objective on `active` rows of `cur`; updates best/fooled state;
// returns the gradient rows (aligned with `active`).
template <AttackModel M>
Matrix evaluate(const M &model, const Matrix &cur, const std::vector<std::uint32_t> &y,
                const std::vector<std::size_t> &active, Objective o, std::vector<RowResult> &res,
                Vector &loss, std::vector<std::size_t> &pred, bool need_grad) {
  const Matrix xa = gather(cur, active);
  const std::vector<std::uint32_t> ya = gather(y, active);
  Matrix grad;
  if (need_grad) {
    model.loss_grad(xa, ya, o, loss, grad, pred);
    require_finite(grad.data(), "attack gradient");
  } else {
    const Matrix f = model.logits(xa);
    loss.resize(active.size());
    pred.resize(active.size());
    for (std::size_t i = 0; i < active.size(); ++i) {
      loss[i] = objective_from_logits(o, f.row(i), ya[i], nullptr);
      pred[i] = predict(f.row(i));
    }
  }
  for (std::size_t i = 0; i < active.size(); ++i) {
    RowResult &r = res[active[i]];
    if (loss[i] > r.best_loss) {
      r.best_loss = loss[i];
      r.best.assign(xa.row(i).begin(), xa.row(i).end());
    }
    r.trace.push_back(r.best_loss);
    if (pred[i] != ya[i] && !r.fooled) r.fooled = Vector(xa.row(i).begin(), xa.row(i).end());
  }
  return grad;
}

inline void drop_fooled(std::vector<std::size_t> &active, const std::vector<RowResult> &res) {
  std::erase_if(active, [&](std::size_t r) { return res[r].fooled.has_value(); });
}

template <AttackModel M>
std::vector<RowResult> pgd_batch(const M &model, const Matrix &x, const std::vector<std::uint32_t> &y,
                                 const Matrix &start, double eps, const AttackConfig &cfg) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<RowResult> res(n);
  Matrix cur = start;
  std::vector<std::size_t> active(n);
  for (std::size_t i = 0; i < n; ++i) active[i] = i;
  const double step = eps / 4.0;
  Vector loss;
  std::vector<std::size_t> pred;
  for (std::size_t it = 0;; ++it) {
    const Matrix g = evaluate(model, cur, y, active, Objective::kCe, res, loss, pred, it < cfg.iterations);
    if (it == cfg.iterations) break;
    std::vector<std::size_t> next;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t r = active[i];
      if (cfg.early_stop && res[r].fooled) continue;
      auto c = cur.row(r);
      auto gi = g.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        const double s = gi[j] > 0.0 ? 1.0 : (gi[j] < 0.0 ? -1.0 : 0.0);
        c[j] = project(c[j] + step * s, x(r, j), eps);
      }
      next.push_back(r);
    }
    active = std::move(next);
    if (active.empty()) break;
  }
  return res;
}

// Iterations at which APGD checks progress: the first after ceil(p1 N), then
// intervals shrinking by ceil(p_decay N) down to ceil(p_min N).
inline std::vector<std::size_t> apgd_checkpoints(std::size_t n_iter, double p1, double p_decay, double p_min) {
  std::vector<std::size_t> out;
  const auto N = static_cast<double>(n_iter);
  std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(p1 * N)));
  const auto decr = static_cast<std::size_t>(std::ceil(p_decay * N));
  const auto kmin = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(p_min * N)));
  std::size_t at = k;
  while (at <= n_iter) {
    out.push_back(at);
    k = std::max(k > decr ? k - decr : 0, kmin);
    at += k;
  }
  return out;
}

template <AttackModel M>
std::vector<RowResult> apgd_batch(const M &model, const Matrix &x, const std::vector<std::uint32_t> &y,
                                  const Matrix &start, double eps, const AttackConfig &cfg, Objective o) {
  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t N = cfg.iterations;
  std::vector<RowResult> res(n);
  Matrix cur = start, prev = start, grad_cur(n, d), grad_best(n, d);
  Vector eta(n, 2.0 * eps);
  Vector last_loss(n, 0.0), best_at_check(n, 0.0);
  std::vector<std::size_t> improved(n, 0);
  std::vector<char> reduced_last(n, 0);
  std::vector<std::size_t> active(n);
  for (std::size_t i = 0; i < n; ++i) active[i] = i;
  Vector loss;
  std::vector<std::size_t> pred;

  auto absorb = [&](const Matrix &g, std::size_t it) {
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t r = active[i];
      copy_row(g.row(i), grad_cur.row(r));
      if (res[r].best_loss == loss[i]) copy_row(g.row(i), grad_best.row(r));
      if (it > 0 && loss[i] > last_loss[r]) ++improved[r];
      last_loss[r] = loss[i];
    }
  };

  Matrix g = evaluate(model, cur, y, active, o, res, loss, pred, N > 0);
  if (N == 0) return res;
  absorb(g, 0);
  for (std::size_t r : active) best_at_check[r] = res[r].best_loss;
  if (cfg.early_stop) drop_fooled(active, res);

  const std::vector<std::size_t> checks = apgd_checkpoints(N, cfg.p1, cfg.p_decay, cfg.p_min);
  std::size_t next_check = 0, last_check_at = 0;
  for (std::size_t it = 0; it < N && !active.empty(); ++it) {
    const double a = it == 0 ? 1.0 : cfg.momentum;
    for (std::size_t r : active) {
      auto c = cur.row(r);
      auto p = prev.row(r);
      auto gr = grad_cur.row(r);
      for (std::size_t j = 0; j < d; ++j) {
        const double s = gr[j] > 0.0 ? 1.0 : (gr[j] < 0.0 ? -1.0 : 0.0);
        const double z = project(c[j] + eta[r] * s, x(r, j), eps);
        const double v = project(c[j] + a * (z - c[j]) + (1.0 - a) * (c[j] - p[j]), x(r, j), eps);
        p[j] = c[j];
        c[j] = v;
      }
    }
    g = evaluate(model, cur, y, active, o, res, loss, pred, true);
    absorb(g, it + 1);

    if (next_check < checks.size() && it + 1 == checks[next_check]) {
      const std::size_t interval = checks[next_check] - last_check_at;
      for (std::size_t r : active) {
        const bool oscillating = static_cast<double>(improved[r]) <= cfg.rho * static_cast<double>(interval);
        const bool stalled = !reduced_last[r] && best_at_check[r] >= res[r].best_loss;
        const bool reduce = oscillating || stalled;
        reduced_last[r] = reduce;
        best_at_check[r] = res[r].best_loss;
        improved[r] = 0;
        if (reduce) {
          eta[r] *= 0.5;
          copy_row(res[r].best, cur.row(r));
          copy_row(res[r].best, prev.row(r));
          copy_row(grad_best.row(r), grad_cur.row(r));
        }
      }
      last_check_at = checks[next_check];
      ++next_check;
    }
    if (cfg.early_stop) drop_fooled(active, res);
  }
  return res;
}

// Block length for query `it` of `n_iter`: the AutoAttack halving schedule on
// a 10000-query scale, applied to a fraction of the input dimension.
inline std::size_t square_block(double p_init, std::size_t it, std::size_t n_iter, std::size_t dim) {
  const auto i = static_cast<std::size_t>(static_cast<double>(it) / static_cast<double>(std::max<std::size_t>(n_iter, 1)) * 10000.0);
  double p = p_init;
  if (i > 8000) p /= 512;
  else if (i > 6000) p /= 256;
  else if (i > 4000) p /= 128;
  else if (i > 2000) p /= 64;
  else if (i > 1000) p /= 32;
  else if (i > 500) p /= 16;
  else if (i > 200) p /= 8;
  else if (i > 50) p /= 4;
  else if (i > 10) p /= 2;
  const auto len = static_cast<std::size_t>(std::lround(p * static_cast<double>(dim)));
  return std::clamp<std::size_t>(len, 1, dim);
}

template <AttackModel M>
std::vector<RowResult> square_batch(const M &model, const Matrix &x, const std::vector<std::uint32_t> &y,
                                    const Matrix &start, double eps, const AttackConfig &cfg,
                                    std::vector<Rng> &rngs) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<RowResult> res(n);
  std::vector<std::size_t> active(n);
  for (std::size_t i = 0; i < n; ++i) active[i] = i;
  Vector loss;
  std::vector<std::size_t> pred;
  evaluate(model, start, y, active, Objective::kMargin, res, loss, pred, false);
  if (cfg.early_stop) drop_fooled(active, res);
  Matrix trial = start;
  for (std::size_t it = 0; it < cfg.iterations && !active.empty(); ++it) {
    for (std::size_t r : active) {
      auto t = trial.row(r);
      copy_row(res[r].best, t);
      Rng &rng = rngs[r];
      if (it == 0) {
        for (std::size_t j = 0; j < d; ++j) t[j] = project(x(r, j) + eps * rng.sign(), x(r, j), eps);
        continue;
      }
      const std::size_t len = square_block(cfg.p_init, it, cfg.iterations, d);
      const std::size_t lo = rng.below(d - len + 1);
      double s = rng.sign();
      bool same = true;
      for (std::size_t j = lo; j < lo + len && same; ++j) same = t[j] == project(x(r, j) + s * eps, x(r, j), eps);
      if (same) s = -s;
      for (std::size_t j = lo; j < lo + len; ++j) t[j] = project(x(r, j) + s * eps, x(r, j), eps);
    }
    // Accept-if-better is exactly the best-iterate bookkeeping in evaluate().
    evaluate(model, trial, y, active, Objective::kMargin, res, loss, pred, false);
    if (cfg.early_stop) drop_fooled(active, res);
  }
  return res;
}

}  // namespace detail

// Runs one configured attack on every row of x. `ids` seed per-row streams
// (defaults to row indices); `init` warm-starts from given points.
template <AttackModel M>
std::vector<AdvPair> run_attack(const M &model, const Matrix &x, std::span<const std::uint32_t> labels,
                                const AttackBudget &budget, const AttackConfig &cfg,
                                std::span<const std::uint64_t> ids = {}, const Matrix *init = nullptr) {
  budget.validate();
  cfg.validate();
  const std::size_t n = x.rows(), d = x.cols();
  if (labels.size() != n) throw Error(ErrorCode::kDimensionMismatch, "labels vs rows");
  if (!ids.empty() && ids.size() != n) throw Error(ErrorCode::kDimensionMismatch, "ids vs rows");
  if (init != nullptr && (init->rows() != n || init->cols() != d)) {
    throw Error(ErrorCode::kDimensionMismatch, "warm start shape");
  }
  if (cfg.method == AttackMethod::kApgdDlr && model.num_classes() < 3) {
    throw Error(ErrorCode::kInvalidArgument, "DLR requires >= 3 classes");
  }
  const std::vector<std::uint32_t> y(labels.begin(), labels.end());
  const double eps = budget.epsilon;

  std::vector<detail::RowResult> best(n);
  for (std::size_t rs = 0; rs < cfg.restarts; ++rs) {
    std::vector<Rng> rngs;
    rngs.reserve(n);
    Matrix start(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t id = ids.empty() ? i : ids[i];
      rngs.emplace_back(derive_seed(derive_seed(cfg.seed, id), rs));
      const auto from = init != nullptr ? init->row(i) : x.row(i);
      const Vector s = detail::starting_point(x.row(i), from, eps, cfg.random_start || rs > 0, rngs.back());
      std::copy(s.begin(), s.end(), start.row(i).begin());
    }
    // Rows already broken by an earlier restart are skipped.
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < n; ++i)
      if (!best[i].fooled) todo.push_back(i);
    if (todo.empty()) break;
    const Matrix xs = detail::gather(x, todo), ss = detail::gather(start, todo);
    const std::vector<std::uint32_t> ys = detail::gather(y, todo);
    std::vector<Rng> rs_rngs;
    for (std::size_t i : todo) rs_rngs.push_back(rngs[i]);
    std::vector<detail::RowResult> got;
    switch (cfg.method) {
      case AttackMethod::kPgd: got = detail::pgd_batch(model, xs, ys, ss, eps, cfg); break;
      case AttackMethod::kApgdCe: got = detail::apgd_batch(model, xs, ys, ss, eps, cfg, Objective::kCe); break;
      case AttackMethod::kApgdDlr: got = detail::apgd_batch(model, xs, ys, ss, eps, cfg, Objective::kDlr); break;
      case AttackMethod::kSquare: got = detail::square_batch(model, xs, ys, ss, eps, cfg, rs_rngs); break;
    }
    for (std::size_t k = 0; k < todo.size(); ++k) {
      detail::RowResult &b = best[todo[k]];
      detail::RowResult &g = got[k];
      if (rs == 0 || g.fooled || g.best_loss > b.best_loss) {
        if (rs > 0 && !g.trace.empty()) {
          // Keep the trace monotone across restarts.
          for (double &v : g.trace) v = std::max(v, b.best_loss);
        }
        b = std::move(g);
      }
    }
  }

  std::vector<AdvPair> out(n);
  Matrix adv(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const Vector &src = best[i].fooled ? *best[i].fooled : best[i].best;
    for (std::size_t j = 0; j < d; ++j) adv(i, j) = detail::feasible_f32(src[j], x(i, j), eps);
  }
  const Matrix f = model.logits(adv);
  for (std::size_t i = 0; i < n; ++i) {
    AdvPair &p = out[i];
    p.clean.assign(x.row(i).begin(), x.row(i).end());
    p.adv.assign(adv.row(i).begin(), adv.row(i).end());
    p.label = y[i];
    p.budget = budget;
    p.success = predict(f.row(i)) != y[i];
    p.loss_trace = std::move(best[i].trace);
  }
  return out;
}

template <AttackModel M>
AdvPair pgd(const M &model, std::span<const double> x, std::uint32_t y, const AttackBudget &b, AttackConfig cfg) {
  cfg.method = AttackMethod::kPgd;
  const Matrix xm(1, x.size(), Vector(x.begin(), x.end()));
  return run_attack(model, xm, std::span<const std::uint32_t>(&y, 1), b, cfg).front();
}

template <AttackModel M>
AdvPair apgd(const M &model, std::span<const double> x, std::uint32_t y, const AttackBudget &b, AttackConfig cfg,
             Objective loss) {
  if (loss == Objective::kMargin) throw Error(ErrorCode::kInvalidArgument, "apgd loss is ce or dlr");
  cfg.method = loss == Objective::kCe ? AttackMethod::kApgdCe : AttackMethod::kApgdDlr;
  const Matrix xm(1, x.size(), Vector(x.begin(), x.end()));
  return run_attack(model, xm, std::span<const std::uint32_t>(&y, 1), b, cfg).front();
}

template <AttackModel M>
AdvPair square(const M &model, std::span<const double> x, std::uint32_t y, const AttackBudget &b, AttackConfig cfg) {
  cfg.method = AttackMethod::kSquare;
  const Matrix xm(1, x.size(), Vector(x.begin(), x.end()));
  return run_attack(model, xm, std::span<const std::uint32_t>(&y, 1), b, cfg).front();
}

// ---------------------------------------------------------------------------

struct SuiteResult {
  std::vector<AdvPair> pairs;  // worst case per sample
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  // Robust accuracy after each method, counting a sample as robust only if it
  // also survived every earlier method.
  std::vector<std::pair<std::string, double>> per_method;
};

// AutoAttack-style worst case: methods run in order on the samples that are
// still correctly classified. A sample is robust only if every method fails.
// Robust samples keep the first method's output as their adversarial point.
template <AttackModel M>
SuiteResult attack_suite(const M &model, const Dataset &ds, const AttackBudget &budget,
                         const std::vector<AttackConfig> &cfgs, const std::vector<AdvPair> *warm = nullptr) {
  if (cfgs.empty()) throw Error(ErrorCode::kInvalidArgument, "attack suite needs >= 1 method");
  for (const auto &c : cfgs) {
    if (c.method == AttackMethod::kApgdDlr && model.num_classes() < 3) {
      throw Error(ErrorCode::kInvalidArgument, "DLR requires >= 3 classes");
    }
  }
  const std::size_t n = ds.size();
  if (warm != nullptr && warm->size() != n) throw Error(ErrorCode::kDimensionMismatch, "warm-start size");
  SuiteResult out;
  out.pairs.resize(n);
  const Matrix f = model.logits(ds.samples);
  std::vector<std::size_t> alive;
  for (std::size_t i = 0; i < n; ++i) {
    AdvPair &p = out.pairs[i];
    p.clean.assign(ds.samples.row(i).begin(), ds.samples.row(i).end());
    p.label = ds.labels[i];
    p.budget = budget;
    if (predict(f.row(i)) == ds.labels[i]) {
      alive.push_back(i);
    } else {
      p.adv = p.clean;
      p.success = true;
    }
  }
  const double denom = n == 0 ? 1.0 : static_cast<double>(n);
  out.clean_accuracy = 100.0 * static_cast<double>(alive.size()) / denom;
  for (std::size_t m = 0; m < cfgs.size(); ++m) {
    std::vector<std::size_t> still;
    if (!alive.empty()) {
      const Matrix xs = detail::gather(ds.samples, alive);
      const std::vector<std::uint32_t> ys = detail::gather(ds.labels, alive);
      std::vector<std::uint64_t> ids(alive.begin(), alive.end());
      Matrix init;
      if (warm != nullptr) {
        init = Matrix(alive.size(), ds.samples.cols());
        for (std::size_t k = 0; k < alive.size(); ++k) {
          const Vector &w = (*warm)[alive[k]].adv;
          std::copy(w.begin(), w.end(), init.row(k).begin());
        }
      }
      std::vector<AdvPair> got = run_attack(model, xs, ys, budget, cfgs[m], ids, warm != nullptr ? &init : nullptr);
      for (std::size_t k = 0; k < alive.size(); ++k) {
        AdvPair &p = out.pairs[alive[k]];
        if (got[k].success || m == 0) p = std::move(got[k]);
        if (!p.success) still.push_back(alive[k]);
      }
    }
    alive = std::move(still);
    out.per_method.emplace_back(attack_method_name(cfgs[m].method), 100.0 * static_cast<double>(alive.size()) / denom);
  }
  out.robust_accuracy = 100.0 * static_cast<double>(alive.size()) / denom;
  return out;
}

// ---------------------------------------------------------------------------
// Cached adversarial pairs.

struct PairCache {
  AttackMethod method = AttackMethod::kApgdCe;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  std::uint32_t iterations = 0;
  Digest model_hash{};
  Dataset clean;
  Matrix adv;
  std::vector<std::uint8_t> success;

  std::size_t size() const noexcept { return clean.size(); }
};

inline PairCache make_pair_cache(const Dataset &ds, const std::vector<AdvPair> &pairs, const AttackConfig &cfg,
                                 const AttackBudget &b, const Digest &model_hash) {
  if (pairs.size() != ds.size()) throw Error(ErrorCode::kDimensionMismatch, "pairs vs dataset");
  PairCache pc;
  pc.method = cfg.method;
  pc.epsilon = b.epsilon;
  pc.seed = cfg.seed;
  pc.iterations = static_cast<std::uint32_t>(cfg.iterations);
  pc.model_hash = model_hash;
  pc.clean = ds;
  pc.adv = Matrix(ds.size(), ds.samples.cols());
  pc.success.resize(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::copy(pairs[i].adv.begin(), pairs[i].adv.end(), pc.adv.row(i).begin());
    pc.success[i] = pairs[i].success ? 1 : 0;
  }
  return pc;
}

inline Bytes encode_pairs(const PairCache &pc) {
  ByteWriter w;
  w.header(kKindPairs);
  w.u8(static_cast<std::uint8_t>(pc.method));
  w.f64(pc.epsilon);
  w.u64(pc.seed);
  w.u32(pc.iterations);
  w.bytes(pc.model_hash);
  const Dataset &ds = pc.clean;
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.samples.cols()));
  w.u32(static_cast<std::uint32_t>(ds.spec.n_classes));
  w.u8(static_cast<std::uint8_t>(ds.split));
  for (auto y : ds.labels) w.u32(y);
  for (double v : ds.samples.data()) w.f32(v);
  for (double v : pc.adv.data()) w.f32(v);
  for (auto s : pc.success) w.u8(s);
  return w.take();
}

inline PairCache decode_pairs(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.header() != kKindPairs) throw Error(ErrorCode::kBadMagic, "container is not a pair cache");
  PairCache pc;
  const std::uint8_t m = r.u8();
  if (m > 3) throw Error(ErrorCode::kInconsistent, "unknown attack method tag");
  pc.method = static_cast<AttackMethod>(m);
  pc.epsilon = r.f64();
  pc.seed = r.u64();
  pc.iterations = r.u32();
  auto h = r.bytes(pc.model_hash.size());
  std::copy(h.begin(), h.end(), pc.model_hash.begin());
  const std::uint32_t n = r.u32(), d = r.u32(), k = r.u32();
  const std::uint8_t tag = r.u8();
  if (tag > 2) throw Error(ErrorCode::kInconsistent, "unknown split tag");
  if (d == 0 || k == 0) throw Error(ErrorCode::kInconsistent, "zero raw_dim or n_classes");
  r.need(static_cast<std::size_t>(n) * (4 + 8 * static_cast<std::size_t>(d) + 1));
  Dataset &ds = pc.clean;
  ds.spec.raw_dim = d;
  ds.spec.n_classes = k;
  ds.split = static_cast<Split>(tag);
  ds.labels.resize(n);
  for (auto &y : ds.labels) {
    y = r.u32();
    if (y >= k) throw Error(ErrorCode::kInconsistent, "label out of range");
  }
  ds.samples = Matrix(n, d);
  for (double &v : ds.samples.data()) v = r.f32();
  pc.adv = Matrix(n, d);
  for (double &v : pc.adv.data()) v = r.f32();
  pc.success.resize(n);
  for (auto &s : pc.success) s = r.u8();
  r.expect_end();
  for (std::size_t i = 0; i < pc.adv.size(); ++i) {
    const double a = pc.adv.data()[i], c = ds.samples.data()[i];
    if (!(a >= 0.0 && a <= 1.0) || std::abs(a - c) > pc.epsilon + 1e-9) {
      throw Error(ErrorCode::kInconsistent, "adversarial row outside the budget");
    }
  }
  return pc;
}

inline void save_pairs(const PairCache &pc, const std::filesystem::path &path) { write_file(path, encode_pairs(pc)); }

// Rejects a cache produced against a different model.
inline PairCache load_pairs(const std::filesystem::path &path, const Digest &expected_model_hash) {
  PairCache pc = decode_pairs(read_file(path));
  if (pc.model_hash != expected_model_hash) {
    throw Error(ErrorCode::kHashMismatch, path.string() + " was generated against model " + to_hex(pc.model_hash) +
                                              ", expected " + to_hex(expected_model_hash));
  }
  return pc;
}

}  // namespace bindcal

#endif  // BINDCAL_ATTACKS_HPP_
