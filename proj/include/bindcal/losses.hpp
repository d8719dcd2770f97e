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

// Training objectives with hand-derived backward passes.
//
// Embedding-level functions return d(loss)/d(embedding); the head-level
// wrappers push that through ProjectionHead::backward to produce parameter
// gradients.

#ifndef BINDCAL_LOSSES_HPP_
#define BINDCAL_LOSSES_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "bindcal/error.hpp"
#include "bindcal/heads.hpp"
#include "bindcal/model.hpp"
#include "bindcal/numkernel.hpp"

namespace bindcal {

enum class LossTag { kDistill, kL2Align, kCe, kInfoNce };

inline const char *loss_tag_name(LossTag t) {
  switch (t) {
    case LossTag::kDistill: return "distill";
    case LossTag::kL2Align: return "l2";
    case LossTag::kCe: return "ce";
    case LossTag::kInfoNce: return "infonce";
  }
  return "?";
}

inline LossTag parse_loss_tag(const std::string &s) {
  if (s == "distill") return LossTag::kDistill;
  if (s == "l2" || s == "l2-align") return LossTag::kL2Align;
  if (s == "ce") return LossTag::kCe;
  if (s == "infonce") return LossTag::kInfoNce;
  throw Error(ErrorCode::kConfig, "unknown loss '" + s + "'");
}

struct LossKind {
  LossTag tag = LossTag::kCe;
  double tau = 0.07;  // InfoNCE temperature

  void validate() const {
    if (!(tau > 0.0)) throw Error(ErrorCode::kInvalidArgument, "temperature must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Logit-level objectives. `grad` receives d(loss)/d(logits) when non-null.

inline double ce_from_logits(std::span<const double> f, std::size_t y, Vector *grad) {
  const double lse = log_sum_exp(f);
  if (grad != nullptr) {
    grad->resize(f.size());
    for (std::size_t k = 0; k < f.size(); ++k) (*grad)[k] = std::exp(f[k] - lse);
    (*grad)[y] -= 1.0;
  }
  return lse - f[y];
}

// Difference-of-logits ratio: -(f_y - max_{k != y} f_k) / (f_pi1 - f_pi3 + 1e-12)
// with pi the descending order of the logits. Needs at least three classes.
inline double dlr_from_logits(std::span<const double> f, std::size_t y, Vector *grad) {
  const std::size_t K = f.size();
  if (K < 3) throw Error(ErrorCode::kInvalidArgument, "DLR requires >= 3 classes");
  std::vector<std::size_t> order(K);
  for (std::size_t k = 0; k < K; ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f[a] > f[b]; });
  const std::size_t other = order[0] == y ? order[1] : order[0];
  const double num = f[y] - f[other];
  const double den = f[order[0]] - f[order[2]] + 1e-12;
  if (grad != nullptr) {
    grad->assign(K, 0.0);
    (*grad)[y] += -1.0 / den;
    (*grad)[other] += 1.0 / den;
    (*grad)[order[0]] += num / (den * den);
    (*grad)[order[2]] -= num / (den * den);
  }
  return -num / den;
}

// max_{k != y} f_k - f_y; positive exactly when the prediction is wrong.
inline double margin_from_logits(std::span<const double> f, std::size_t y, Vector *grad) {
  std::size_t other = y == 0 ? 1 : 0;
  for (std::size_t k = 0; k < f.size(); ++k)
    if (k != y && f[k] > f[other]) other = k;
  if (grad != nullptr) {
    grad->assign(f.size(), 0.0);
    (*grad)[other] = 1.0;
    (*grad)[y] = -1.0;
  }
  return f[other] - f[y];
}

// Pulls d(loss)/d(cosine logits) back to d(loss)/d(embedding):
// u = e/|e|, du = sum_k g_k c_k/|c_k|, de = (du - u (u . du)) / |e|.
inline Vector cosine_logits_backward(std::span<const double> e, const SemanticCenters &centers,
                                     std::span<const double> grad_f) {
  const double n = norm2(e);
  Vector du(e.size(), 0.0);
  for (std::size_t k = 0; k < grad_f.size(); ++k) {
    if (grad_f[k] == 0.0) continue;
    auto c = centers.unit().row(k);
    for (std::size_t j = 0; j < du.size(); ++j) du[j] += grad_f[k] * c[j];
  }
  double ud = 0.0;
  for (std::size_t j = 0; j < e.size(); ++j) ud += e[j] * du[j];
  ud /= n;
  Vector de(e.size());
  for (std::size_t j = 0; j < e.size(); ++j) de[j] = (du[j] - (e[j] / n) * ud) / n;
  return de;
}

// -log softmax(cos(e, c))_y on raw cosine logits (no temperature).
inline double ce_on_embedding(std::span<const double> e, const SemanticCenters &centers,
                              std::size_t y, Vector *grad_e) {
  if (y >= centers.num_classes()) throw Error(ErrorCode::kInvalidArgument, "label out of range");
  const Vector f = cosine_logits(e, centers);
  Vector gf;
  const double loss = ce_from_logits(f, y, grad_e != nullptr ? &gf : nullptr);
  if (grad_e != nullptr) *grad_e = cosine_logits_backward(e, centers, gf);
  return loss;
}

// |out - target|^2 and its gradient 2 (out - target).
inline double squared_error(std::span<const double> out, std::span<const double> target, Vector *grad) {
  if (out.size() != target.size()) throw Error(ErrorCode::kDimensionMismatch, "squared_error sizes");
  double s = 0.0;
  if (grad != nullptr) grad->resize(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = out[i] - target[i];
    s += d * d;
    if (grad != nullptr) (*grad)[i] = 2.0 * d;
  }
  return s;
}

// Supervised contrastive InfoNCE over the rows of `z`:
//   L = -1/N sum_i log( sum_{j != i, y_j = y_i} e^{s_ij} / sum_{j != i} e^{s_ij} )
// with s_ij = cos(z_i, z_j) / tau. Every row needs a same-label partner.
inline double infonce_on_embeddings(const Matrix &z, std::span<const std::uint32_t> labels,
                                    double tau, Matrix *grad) {
  const std::size_t n = z.rows();
  if (labels.size() != n) throw Error(ErrorCode::kDimensionMismatch, "infonce labels vs rows");
  if (n < 2) throw Error(ErrorCode::kInvalidArgument, "infonce needs >= 2 rows");
  if (!(tau > 0.0)) throw Error(ErrorCode::kInvalidArgument, "temperature must be > 0");
  Matrix u = z;
  Vector norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = norm2(z.row(i));
    if (!(norms[i] > 0.0)) throw Error(ErrorCode::kDegenerate, "zero-norm embedding in row " + std::to_string(i));
    for (double &v : u.row(i)) v /= norms[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    bool found = false;
    for (std::size_t j = 0; j < n && !found; ++j) found = j != i && labels[j] == labels[i];
    if (!found) {
      throw Error(ErrorCode::kInvalidArgument, "row " + std::to_string(i) + " has no positive partner");
    }
  }
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) s(i, j) = i == j ? 0.0 : dot(u.row(i), u.row(j)) / tau;

  double total = 0.0;
  Matrix gs(n, n);  // d(loss)/d(s_ij)
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m_all = -std::numeric_limits<double>::infinity();
    double m_pos = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      m_all = std::max(m_all, s(i, j));
      if (labels[j] == labels[i]) m_pos = std::max(m_pos, s(i, j));
    }
    double z_all = 0.0, z_pos = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      z_all += std::exp(s(i, j) - m_all);
      if (labels[j] == labels[i]) z_pos += std::exp(s(i, j) - m_pos);
    }
    const double log_all = m_all + std::log(z_all);
    const double log_pos = m_pos + std::log(z_pos);
    total += log_all - log_pos;
    if (grad != nullptr) {
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        double g = std::exp(s(i, j) - log_all);
        if (labels[j] == labels[i]) g -= std::exp(s(i, j) - log_pos);
        gs(i, j) = g * inv_n;
      }
    }
  }
  if (grad != nullptr) {
    Matrix gu(n, z.cols());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double g = gs(i, j) / tau;
        if (g == 0.0) continue;
        auto ui = u.row(i), uj = u.row(j);
        auto gi = gu.row(i), gj = gu.row(j);
        for (std::size_t c = 0; c < z.cols(); ++c) {
          gi[c] += g * uj[c];
          gj[c] += g * ui[c];
        }
      }
    *grad = Matrix(n, z.cols());
    for (std::size_t i = 0; i < n; ++i) {
      auto ui = u.row(i);
      auto gi = gu.row(i);
      const double proj = dot(ui, gi);
      auto out = grad->row(i);
      for (std::size_t c = 0; c < z.cols(); ++c) out[c] = (gi[c] - ui[c] * proj) / norms[i];
    }
  }
  return total * inv_n;
}

// ---------------------------------------------------------------------------
// Head-level objectives.

struct LossResult {
  double value = 0.0;
  HeadGrad grad;
};

// |h(z) - z|^2
inline LossResult distill_loss(const ProjectionHead &head, std::span<const double> z) {
  ProjectionHead::Trace t;
  const Vector out = head.forward(z, t);
  Vector g;
  LossResult r{squared_error(out, z, &g), head.zero_grad()};
  head.backward(t, g, &r.grad);
  return r;
}

// |h(z_adv) - h_target(z_clean)|^2; the target head only provides a constant.
inline LossResult l2_align_loss(const ProjectionHead &head, const ProjectionHead &target,
                                std::span<const double> z_adv, std::span<const double> z_clean) {
  const Vector anchor = target.forward(z_clean);
  ProjectionHead::Trace t;
  const Vector out = head.forward(z_adv, t);
  Vector g;
  LossResult r{squared_error(out, anchor, &g), head.zero_grad()};
  head.backward(t, g, &r.grad);
  return r;
}

inline LossResult ce_loss(const ProjectionHead &head, const SemanticCenters &centers,
                          std::span<const double> z_adv, std::size_t y) {
  ProjectionHead::Trace t;
  const Vector out = head.forward(z_adv, t);
  Vector g;
  LossResult r{ce_on_embedding(out, centers, y, &g), head.zero_grad()};
  head.backward(t, g, &r.grad);
  return r;
}

// Encoder embeddings of n clean samples and their n adversarial versions.
struct Batch {
  Matrix clean_embeddings;
  Matrix adv_embeddings;
  std::vector<std::uint32_t> labels;
};

// InfoNCE over the 2n projected rows [h(clean); h(adv)].
inline LossResult infonce_loss(const ProjectionHead &head, const Batch &batch, double tau) {
  const std::size_t n = batch.labels.size();
  if (batch.clean_embeddings.rows() != n || batch.adv_embeddings.rows() != n) {
    throw Error(ErrorCode::kDimensionMismatch, "batch rows vs labels");
  }
  std::vector<ProjectionHead::Trace> traces(2 * n);
  Matrix z(2 * n, head.out_dim());
  std::vector<std::uint32_t> labels(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    const Matrix &src = i < n ? batch.clean_embeddings : batch.adv_embeddings;
    const Vector out = head.forward(src.row(i % n), traces[i]);
    std::copy(out.begin(), out.end(), z.row(i).begin());
    labels[i] = batch.labels[i % n];
  }
  Matrix g;
  LossResult r{infonce_on_embeddings(z, labels, tau, &g), head.zero_grad()};
  for (std::size_t i = 0; i < 2 * n; ++i) head.backward(traces[i], g.row(i), &r.grad);
  return r;
}

}  // namespace bindcal

#endif  // BINDCAL_LOSSES_HPP_
