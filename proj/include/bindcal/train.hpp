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

// Two-stage head training: clean distillation, then adversarial fine-tuning
// on cached pairs with early stopping on 0.25 clean + 0.75 adversarial.

#ifndef BINDCAL_TRAIN_HPP_
#define BINDCAL_TRAIN_HPP_

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bindcal/attacks.hpp"
#include "bindcal/error.hpp"
#include "bindcal/heads.hpp"
#include "bindcal/losses.hpp"
#include "bindcal/model.hpp"
#include "bindcal/numkernel.hpp"
#include "bindcal/synthdata.hpp"

namespace bindcal {

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamWState {
  std::vector<Vector> m;
  std::vector<Vector> v;
  std::uint64_t t = 0;
};

// Decoupled weight decay (p <- p (1 - lr wd)) followed by the bias-corrected
// Adam step.
inline void adamw_step(std::vector<std::span<double>> params, const std::vector<Vector> &grads,
                       AdamWState &state, const AdamWHyper &hp) {
  if (params.size() != grads.size()) throw Error(ErrorCode::kDimensionMismatch, "params vs grads");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) {
      throw Error(ErrorCode::kDimensionMismatch, "param tensor " + std::to_string(i) + " vs its grad");
    }
    require_finite(grads[i], "gradient");
  }
  if (state.m.empty()) {
    for (const auto &g : grads) {
      state.m.emplace_back(g.size(), 0.0);
      state.v.emplace_back(g.size(), 0.0);
    }
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - hp.lr * hp.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    Vector &m = state.m[i];
    Vector &v = state.v[i];
    const Vector &g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= decay;
      m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
      v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
      p[j] -= hp.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + hp.eps);
    }
  }
}

struct LoraSettings {
  std::size_t rank = 8;
  double alpha = 1.0;
  bool train_bias = true;
};

struct TrainConfig {
  int stage = 1;
  LossKind loss{LossTag::kDistill, 0.07};
  SizeClass size = SizeClass::kMedium;
  std::optional<LoraSettings> lora;
  AdamWHyper optimizer;
  std::size_t epochs_max = 30;
  double w_clean = 0.25;
  double w_adv = 0.75;
  std::size_t patience = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double distill_threshold = 1e-3;  // per-dimension mean squared error
  // Validation attack for early stopping.
  AttackConfig val_attack{};
  double val_epsilon = 8.0 / 255.0;

  void validate() const {
    if (stage != 1 && stage != 2) throw Error(ErrorCode::kConfig, "stage must be 1 or 2");
    if (!(optimizer.lr >= 0.0)) throw Error(ErrorCode::kConfig, "lr must be >= 0");
    if (epochs_max < 1 && stage == 2) throw Error(ErrorCode::kConfig, "epochs_max must be >= 1");
    if (std::abs(w_clean + w_adv - 1.0) > 1e-12 || w_clean < 0.0 || w_adv < 0.0) {
      throw Error(ErrorCode::kConfig, "early-stop weights must be >= 0 and sum to 1");
    }
    if (batch_size < 1) throw Error(ErrorCode::kConfig, "batch_size must be >= 1");
    loss.validate();
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double clean_acc = 0.0;
  double adv_acc = 0.0;
  double weighted = 0.0;
  double wall_time = 0.0;
};

// Early-stopping score: w_clean * clean + w_adv * adversarial accuracy.
inline double weighted_accuracy(double clean_acc, double adv_acc, double w_clean = 0.25, double w_adv = 0.75) {
  return w_clean * clean_acc + w_adv * adv_acc;
}

// Index of the epoch with the largest weighted metric; the earliest wins ties.
inline std::size_t select_best(const std::vector<EpochMetrics> &log) {
  if (log.empty()) throw Error(ErrorCode::kInvalidArgument, "empty training log");
  std::size_t best = 0;
  for (std::size_t i = 1; i < log.size(); ++i)
    if (log[i].weighted > log[best].weighted) best = i;
  return best;
}

// Tracks the best epoch by weighted metric and signals a stop once `patience`
// consecutive epochs fail to beat it.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  // Returns true when `m` is the new best epoch.
  bool push(const EpochMetrics &m) {
    log_.push_back(m);
    if (log_.size() == 1 || select_best(log_) == log_.size() - 1) {
      since_best_ = 0;
      return true;
    }
    ++since_best_;
    return false;
  }
  bool should_stop() const { return since_best_ > patience_; }
  std::size_t best_index() const { return select_best(log_); }
  const std::vector<EpochMetrics> &log() const { return log_; }

 private:
  std::size_t patience_;
  std::size_t since_best_ = 0;
  std::vector<EpochMetrics> log_;
};

inline std::string training_log_csv(const std::vector<EpochMetrics> &log) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,loss,clean_acc,adv_acc,weighted,wall_time\n";
  for (const auto &e : log) {
    os << e.epoch << ',' << e.loss << ',' << e.clean_acc << ',' << e.adv_acc << ',' << e.weighted << ','
       << e.wall_time << '\n';
  }
  return os.str();
}

namespace detail {

inline std::vector<std::size_t> shuffled(std::size_t n, Rng &rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// Trainable tensors, optionally without the biases of adapter layers.
inline std::vector<std::span<double>> select_params(ProjectionHead &head, bool with_bias) {
  auto all = head.trainable_params();
  if (with_bias || !head.has_lora()) return all;
  std::vector<std::span<double>> out;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (i % 3 != 2) out.push_back(all[i]);
  return out;
}

inline std::vector<Vector> select_grads(const ProjectionHead &head, const HeadGrad &g, bool with_bias) {
  auto all = head.trainable_grads(g);
  if (with_bias || !head.has_lora()) return all;
  std::vector<Vector> out;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (i % 3 != 2) out.push_back(std::move(all[i]));
  return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1.

struct Stage1Result {
  ProjectionHead head;
  bool converged = false;       // per-dimension error below the threshold
  double per_dim_error = 0.0;   // mean |h(z) - z|^2 / D on the training split
  std::vector<EpochMetrics> log;
};

inline double distill_error(const ProjectionHead &head, const Matrix &z) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) s += squared_error(head.forward(z.row(i)), z.row(i), nullptr);
  return s / static_cast<double>(z.rows() * z.cols());
}

// Trains a fresh head to reproduce the encoder's clean embeddings. Runs all
// epochs_max epochs and keeps the epoch with the lowest error.
inline Stage1Result stage1_distill(const FrozenEncoder &enc, const Dataset &train, const TrainConfig &cfg) {
  cfg.validate();
  if (cfg.stage != 1 || cfg.loss.tag != LossTag::kDistill) {
    throw Error(ErrorCode::kStageMismatch, "stage 1 trains the distillation loss only");
  }
  const auto t0 = std::chrono::steady_clock::now();
  Rng init_rng(derive_seed(cfg.seed, 1));
  ProjectionHead head = ProjectionHead::make(enc.out_dim(), cfg.size, init_rng);
  head.quantize_f32();
  const Matrix z = enc.encode_all(train.samples);
  Stage1Result out{head, false, distill_error(head, z), {}};
  AdamWState state;
  for (std::size_t epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 100 + epoch));
    const auto order = detail::shuffled(z.rows(), rng);
    double total = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      HeadGrad g = head.zero_grad();
      for (std::size_t k = b0; k < b1; ++k) {
        LossResult r = distill_loss(head, z.row(order[k]));
        total += r.value;
        g.add(r.grad);
      }
      g.scale(1.0 / static_cast<double>(b1 - b0));
      adamw_step(head.trainable_params(), head.trainable_grads(g), state, cfg.optimizer);
      head.refresh();
    }
    head.quantize_f32();
    const double err = distill_error(head, z);
    out.log.push_back({epoch, total / static_cast<double>(z.rows()), 0.0, 0.0, 0.0, detail::seconds_since(t0)});
    if (err < out.per_dim_error) {
      out.per_dim_error = err;
      out.head = head;
    }
  }
  out.converged = out.per_dim_error < cfg.distill_threshold;
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2.

// Running record of ||h2(phi(x_adv)) - phi(x)|| <= ||h2(phi(x_adv)) - h1(phi(x))||
//                                                  + ||h1(phi(x)) - phi(x)||.
struct TriangleLedger {
  std::size_t trials = 0;
  std::size_t violations = 0;
  double min_slack = std::numeric_limits<double>::infinity();  // rhs - lhs

  void record(std::span<const double> h2_adv, std::span<const double> h1_clean, std::span<const double> z_clean,
              double tol = 1e-9) {
    auto dist = [](std::span<const double> a, std::span<const double> b) {
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
      return std::sqrt(s);
    };
    const double lhs = dist(h2_adv, z_clean);
    const double rhs = dist(h2_adv, h1_clean) + dist(h1_clean, z_clean);
    ++trials;
    min_slack = std::min(min_slack, rhs - lhs);
    if (lhs > rhs + tol) ++violations;
  }

  void merge(const TriangleLedger &o) {
    trials += o.trials;
    violations += o.violations;
    min_slack = std::min(min_slack, o.min_slack);
  }
};

struct ValidationResult {
  double clean_acc = 0.0;
  double adv_acc = 0.0;
};

// Clean and adversarial accuracy of (enc, head, centers) on `val`, attacking
// with cfg.val_attack at cfg.val_epsilon. Every evaluated adversarial point is
// also recorded in the triangle ledger against the Stage-1 head.
inline ValidationResult validate_head(const FrozenEncoder &enc, const ProjectionHead &head,
                                      const ProjectionHead &stage1, const SemanticCenters &centers,
                                      const Dataset &val, const TrainConfig &cfg, TriangleLedger *ledger) {
  CosineClassifier model(enc, &head, centers);
  const Matrix f = model.logits(val.samples);
  std::size_t clean_ok = 0;
  for (std::size_t i = 0; i < val.size(); ++i) clean_ok += predict(f.row(i)) == val.labels[i];
  const auto pairs = run_attack(model, val.samples, val.labels, AttackBudget{cfg.val_epsilon}, cfg.val_attack);
  std::size_t adv_ok = 0;
  for (const auto &p : pairs) adv_ok += !p.success;
  if (ledger != nullptr) {
    Matrix adv(pairs.size(), val.samples.cols());
    for (std::size_t i = 0; i < pairs.size(); ++i) std::copy(pairs[i].adv.begin(), pairs[i].adv.end(), adv.row(i).begin());
    const Matrix za = enc.encode_all(adv), zc = enc.encode_all(val.samples);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      ledger->record(head.forward(za.row(i)), stage1.forward(zc.row(i)), zc.row(i));
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(val.size(), 1));
  return {100.0 * static_cast<double>(clean_ok) / n, 100.0 * static_cast<double>(adv_ok) / n};
}

struct Stage2Result {
  ProjectionHead head;
  std::vector<EpochMetrics> log;
  std::size_t best_epoch = 0;  // 1-based
  TriangleLedger triangle;
};

// Fine-tunes a copy of the Stage-1 head on cached adversarial pairs. The pair
// cache must have been generated against (enc, centers, head0).
inline Stage2Result stage2_finetune(const FrozenEncoder &enc, const ProjectionHead &head0,
                                    const SemanticCenters &centers, const PairCache &pairs, const Dataset &val,
                                    const TrainConfig &cfg) {
  cfg.validate();
  if (cfg.stage != 2 || cfg.loss.tag == LossTag::kDistill) {
    throw Error(ErrorCode::kStageMismatch, "stage 2 takes l2, ce or infonce");
  }
  const ModelCheckpoint source{enc, centers, head0};
  if (pairs.model_hash != checkpoint_hash(source)) {
    throw Error(ErrorCode::kHashMismatch, "pair cache was not generated against this Stage-1 model");
  }
  const Digest frozen_before = frozen_hash(source);
  const auto t0 = std::chrono::steady_clock::now();

  ProjectionHead head = head0;
  const bool with_bias = !cfg.lora || cfg.lora->train_bias;
  if (cfg.lora) {
    Rng lrng(derive_seed(cfg.seed, 2));
    head.enable_lora(cfg.lora->rank, cfg.lora->alpha, lrng);
    head.quantize_f32();
  }
  const Matrix zc = enc.encode_all(pairs.clean.samples);
  const Matrix za = enc.encode_all(pairs.adv);
  const auto &labels = pairs.clean.labels;
  Matrix anchor(zc.rows(), zc.cols());
  for (std::size_t i = 0; i < zc.rows(); ++i) {
    const Vector a = head0.forward(zc.row(i));
    std::copy(a.begin(), a.end(), anchor.row(i).begin());
  }

  Stage2Result out{head, {}, 0, {}};
  AdamWState state;
  EarlyStopper stopper(cfg.patience);
  for (std::size_t epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 200 + epoch));
    const auto order = detail::shuffled(zc.rows(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      HeadGrad g = head.zero_grad();
      double value = 0.0;
      if (cfg.loss.tag == LossTag::kInfoNce) {
        Batch batch{Matrix(b1 - b0, zc.cols()), Matrix(b1 - b0, zc.cols()), {}};
        for (std::size_t k = b0; k < b1; ++k) {
          detail::copy_row(zc.row(order[k]), batch.clean_embeddings.row(k - b0));
          detail::copy_row(za.row(order[k]), batch.adv_embeddings.row(k - b0));
          batch.labels.push_back(labels[order[k]]);
        }
        LossResult r = infonce_loss(head, batch, cfg.loss.tau);
        value = r.value;
        g = std::move(r.grad);
      } else {
        for (std::size_t k = b0; k < b1; ++k) {
          const std::size_t i = order[k];
          ProjectionHead::Trace t;
          const Vector e = head.forward(za.row(i), t);
          Vector ge;
          if (cfg.loss.tag == LossTag::kL2Align) {
            value += squared_error(e, anchor.row(i), &ge);
          } else {
            value += ce_on_embedding(e, centers, labels[i], &ge);
          }
          head.backward(t, ge, &g);
        }
        const double inv = 1.0 / static_cast<double>(b1 - b0);
        value *= inv;
        g.scale(inv);
      }
      total += value;
      ++batches;
      adamw_step(detail::select_params(head, with_bias), detail::select_grads(head, g, with_bias), state,
                 cfg.optimizer);
      head.refresh();
    }
    head.quantize_f32();
    TriangleLedger ledger;
    const ValidationResult v = validate_head(enc, head, head0, centers, val, cfg, &ledger);
    out.triangle.merge(ledger);
    const double weighted = weighted_accuracy(v.clean_acc, v.adv_acc, cfg.w_clean, cfg.w_adv);
    if (stopper.push({epoch, total / static_cast<double>(std::max<std::size_t>(batches, 1)), v.clean_acc, v.adv_acc,
                      weighted, detail::seconds_since(t0)})) {
      out.head = head;
      out.best_epoch = epoch;
    } else if (stopper.should_stop()) {
      break;
    }
  }
  out.log = stopper.log();

  if (frozen_hash({enc, centers, out.head}) != frozen_before) {
    throw Error(ErrorCode::kInconsistent, "frozen encoder or centers changed during training");
  }
  if (cfg.lora) {
    for (std::size_t l = 0; l < head0.num_layers(); ++l) {
      if (!(out.head.layers()[l].weight == head0.layers()[l].weight)) {
        throw Error(ErrorCode::kInconsistent, "adapter base weight changed in layer " + std::to_string(l));
      }
    }
  }
  return out;
}

}  // namespace bindcal

#endif  // BINDCAL_TRAIN_HPP_
