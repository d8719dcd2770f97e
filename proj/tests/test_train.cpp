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
#include <vector>

#include <gtest/gtest.h>

#include "bindcal/model.hpp"
#include "bindcal/train.hpp"

using namespace bindcal;

namespace {

struct Fixture {
  ModalitySpec spec;
  FrozenEncoder enc;
  SemanticCenters centers;
  Dataset train;
  Dataset val;
};

Fixture make_setup() {
  Fixture s;
  s.spec.name = "toy";
  s.spec.raw_dim = 16;
  s.spec.n_classes = 4;
  s.spec.class_seed = 31;
  s.spec.encoder_seed = 32;
  EncoderShape shape;
  shape.hidden = 64;
  shape.out_dim = 12;
  shape.sensitive_rank = 2;
  shape.sensitive_gain = 5;
  s.enc = build_encoder(s.spec, shape);
  s.centers = estimate_centers(s.enc, generate(s.spec, 8, 1, Split::kCenters));
  s.train = generate(s.spec, 10, 2, Split::kTrain);
  s.val = generate(s.spec, 3, 3, Split::kCenters);
  return s;
}

TrainConfig stage1_cfg() {
  TrainConfig c;
  c.stage = 1;
  c.loss = {LossTag::kDistill, 0.07};
  c.size = SizeClass::kSmall;
  c.epochs_max = 300;
  c.optimizer.lr = 5e-3;
  c.batch_size = 16;
  c.seed = 5;
  return c;
}

TrainConfig stage2_cfg(LossTag tag, bool lora) {
  TrainConfig c;
  c.stage = 2;
  c.loss = {tag, 0.07};
  c.size = SizeClass::kSmall;
  if (lora) c.lora = LoraSettings{4, 1.0, true};
  c.epochs_max = 4;
  c.batch_size = 16;
  c.seed = 6;
  c.val_attack.method = AttackMethod::kApgdCe;
  c.val_attack.iterations = 3;
  return c;
}

PairCache make_pairs(const Fixture &s, const ProjectionHead &h1) {
  CosineClassifier model(s.enc, &h1, s.centers);
  AttackConfig a;
  a.method = AttackMethod::kPgd;
  a.iterations = 5;
  const AttackBudget b{8.0 / 255.0};
  const auto pairs = run_attack(model, s.train.samples, s.train.labels, b, a);
  return make_pair_cache(s.train, pairs, a, b, checkpoint_hash({s.enc, s.centers, h1}));
}

}  // namespace

TEST(AdamW, ZeroGradientAppliesOnlyDecoupledDecay) {
  Vector p{1.0, -2.0, 0.5};
  AdamWState st;
  AdamWHyper hp;
  hp.lr = 0.1;
  hp.weight_decay = 0.01;
  adamw_step({std::span<double>(p)}, {Vector(3, 0.0)}, st, hp);
  EXPECT_DOUBLE_EQ(p[0], 1.0 * (1 - 0.001));
  EXPECT_DOUBLE_EQ(p[1], -2.0 * (1 - 0.001));
  EXPECT_DOUBLE_EQ(p[2], 0.5 * (1 - 0.001));
  EXPECT_EQ(st.t, 1u);
}

TEST(AdamW, FirstStepIsBiasCorrectedSignStep) {
  // After one step m_hat = g and v_hat = g^2, so the update is lr g / (|g| + eps).
  Vector p{0.3, 0.3};
  const Vector g{2.0, -1e-3};
  AdamWState st;
  AdamWHyper hp;
  hp.lr = 0.01;
  hp.weight_decay = 0.1;
  adamw_step({std::span<double>(p)}, {g}, st, hp);
  for (int i = 0; i < 2; ++i) {
    const double expect = 0.3 * (1 - 0.001) - 0.01 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(p[i], expect, 1e-15);
  }
}

TEST(AdamW, ConvergesOnQuadraticBowl) {
  const Vector a{1.0, 10.0, 0.1, 3.0}, c{0.5, -1.0, 2.0, 0.0};
  Vector p(4, 0.0);
  AdamWState st;
  AdamWHyper hp;
  hp.lr = 0.05;
  hp.weight_decay = 0.0;
  for (int it = 0; it < 500; ++it) {
    Vector g(4);
    for (int i = 0; i < 4; ++i) g[i] = a[i] * (p[i] - c[i]);
    adamw_step({std::span<double>(p)}, {g}, st, hp);
  }
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(p[i], c[i], 1e-3) << i;
}

TEST(AdamW, RejectsShapeMismatchAndNonFinite) {
  Vector p{1.0};
  AdamWState st;
  EXPECT_THROW(adamw_step({std::span<double>(p)}, {Vector{1.0, 2.0}}, st, AdamWHyper{}), Error);
  EXPECT_THROW(adamw_step({std::span<double>(p)}, {Vector{std::nan("")}}, st, AdamWHyper{}), Error);
  EXPECT_THROW(adamw_step({std::span<double>(p)}, {}, st, AdamWHyper{}), Error);
}

TEST(EarlyStop, SelectBestTakesEarliestMaximum) {
  std::vector<EpochMetrics> log;
  for (double w : {10.0, 30.0, 20.0, 30.0, 5.0}) log.push_back({log.size() + 1, 0, 0, 0, w, 0});
  EXPECT_EQ(select_best(log), 1u);
  log[4].weighted = 30.5;
  EXPECT_EQ(select_best(log), 4u);
  EXPECT_THROW(select_best({}), Error);
}

TEST(EarlyStop, ScriptedSequenceStopsAfterPatience) {
  // Weighted metric peaks at epoch 3, ties it at epoch 5; patience 2 stops
  // after epoch 6 and keeps epoch 3.
  const double script[] = {40, 50, 60, 55, 60, 58, 70};
  EarlyStopper st(2);
  std::size_t stopped_at = 0;
  for (std::size_t e = 0; e < 7; ++e) {
    st.push({e + 1, 0, 0, 0, script[e], 0});
    if (st.should_stop()) {
      stopped_at = e + 1;
      break;
    }
  }
  EXPECT_EQ(stopped_at, 6u);
  EXPECT_EQ(st.best_index() + 1, 3u);
  EXPECT_EQ(st.log().size(), 6u);
  EarlyStopper never(100);
  for (std::size_t e = 0; e < 7; ++e) never.push({e + 1, 0, 0, 0, script[e], 0});
  EXPECT_FALSE(never.should_stop());
  EXPECT_EQ(never.best_index() + 1, 7u);
}

TEST(EarlyStop, LogCsvHeader) {
  const std::string csv = training_log_csv({{1, 0.5, 90, 40, 52.5, 0.1}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,loss,clean_acc,adv_acc,weighted,wall_time");
  EXPECT_NE(csv.find("\n1,0.5,90,40,52.5,"), std::string::npos);
}

TEST(TrainConfig, ValidationRejectsBadSettings) {
  TrainConfig c = stage1_cfg();
  c.w_clean = 0.5;
  EXPECT_THROW(c.validate(), Error);
  c = stage1_cfg();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
  c = stage1_cfg();
  c.stage = 3;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Triangle, LedgerCountsViolationsAndSlack) {
  TriangleLedger t;
  const Vector a{3, 0}, b{0, 0}, z{0, 4};
  t.record(a, b, z);  // lhs 5, rhs 3 + 4 = 7
  EXPECT_EQ(t.trials, 1u);
  EXPECT_EQ(t.violations, 0u);
  EXPECT_NEAR(t.min_slack, 2.0, 1e-12);
  // Feeding an impossible configuration by hand (distances cannot violate
  // the inequality, so a negative tolerance forces the count).
  t.record(a, a, z, -1.0);
  EXPECT_EQ(t.violations, 1u);
  TriangleLedger u;
  u.record(z, z, z);
  u.merge(t);
  EXPECT_EQ(u.trials, 3u);
  EXPECT_EQ(u.violations, 1u);
  EXPECT_EQ(u.min_slack, 0.0);
}

TEST(Stage1, DistillsToIdentityAndIsDeterministic) {
  const Fixture s = make_setup();
  const Stage1Result a = stage1_distill(s.enc, s.train, stage1_cfg());
  EXPECT_TRUE(a.converged) << a.per_dim_error;
  EXPECT_LT(a.per_dim_error, 1e-3);
  EXPECT_EQ(a.log.size(), 300u);
  EXPECT_NEAR(distill_error(a.head, s.enc.encode_all(s.train.samples)), a.per_dim_error, 1e-15);
  const Stage1Result b = stage1_distill(s.enc, s.train, stage1_cfg());
  EXPECT_EQ(encode_checkpoint(ModelCheckpoint{s.enc, s.centers, a.head}), encode_checkpoint(ModelCheckpoint{s.enc, s.centers, b.head}));
  TrainConfig wrong = stage1_cfg();
  wrong.loss.tag = LossTag::kCe;
  EXPECT_THROW(stage1_distill(s.enc, s.train, wrong), Error);
}

TEST(Stage2, KeepsFrozenPartsAndRecordsLog) {
  const Fixture s = make_setup();
  const Stage1Result s1 = stage1_distill(s.enc, s.train, stage1_cfg());
  const PairCache pc = make_pairs(s, s1.head);
  const Digest frozen = frozen_hash({s.enc, s.centers, s1.head});
  for (LossTag tag : {LossTag::kL2Align, LossTag::kCe, LossTag::kInfoNce}) {
    for (bool lora : {false, true}) {
      const TrainConfig cfg = stage2_cfg(tag, lora);
      const Stage2Result r = stage2_finetune(s.enc, s1.head, s.centers, pc, s.val, cfg);
      ASSERT_FALSE(r.log.empty());
      EXPECT_LE(r.log.size(), cfg.epochs_max);
      EXPECT_EQ(r.best_epoch, select_best(r.log) + 1);
      for (const auto &e : r.log) {
        EXPECT_NEAR(e.weighted, 0.25 * e.clean_acc + 0.75 * e.adv_acc, 1e-12);
        EXPECT_TRUE(std::isfinite(e.loss));
      }
      EXPECT_EQ(frozen_hash({s.enc, s.centers, r.head}), frozen);
      EXPECT_EQ(r.triangle.trials, r.log.size() * s.val.size());
      EXPECT_EQ(r.triangle.violations, 0u);
      EXPECT_EQ(r.head.has_lora(), lora);
      if (lora) {
        for (std::size_t l = 0; l < s1.head.num_layers(); ++l)
          EXPECT_TRUE(r.head.layers()[l].weight == s1.head.layers()[l].weight);
      }
    }
  }
}

TEST(Stage2, PatienceStopsAfterStall) {
  const Fixture s = make_setup();
  const Stage1Result s1 = stage1_distill(s.enc, s.train, stage1_cfg());
  const PairCache pc = make_pairs(s, s1.head);
  TrainConfig cfg = stage2_cfg(LossTag::kCe, false);
  cfg.epochs_max = 12;
  cfg.patience = 1;
  const Stage2Result r = stage2_finetune(s.enc, s1.head, s.centers, pc, s.val, cfg);
  if (r.log.size() < cfg.epochs_max) {
    // Stopped early: exactly patience + 1 epochs without a new best.
    EXPECT_EQ(r.log.size(), r.best_epoch + cfg.patience + 1);
  } else {
    EXPECT_LE(r.log.size() - r.best_epoch, cfg.patience + 1);
  }
}

TEST(Stage2, RejectsForeignPairsAndWrongStage) {
  const Fixture s = make_setup();
  const Stage1Result s1 = stage1_distill(s.enc, s.train, stage1_cfg());
  PairCache pc = make_pairs(s, s1.head);
  EXPECT_THROW(stage2_finetune(s.enc, s1.head, s.centers, pc, s.val, stage1_cfg()), Error);
  pc.model_hash[0] ^= 1;
  try {
    stage2_finetune(s.enc, s1.head, s.centers, pc, s.val, stage2_cfg(LossTag::kL2Align, false));
    FAIL() << "expected a hash mismatch";
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kHashMismatch);
  }
}
