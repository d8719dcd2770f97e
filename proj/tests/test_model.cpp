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

#include <gtest/gtest.h>

#include "bindcal/model.hpp"

using namespace bindcal;

namespace {

ModalitySpec spec(std::size_t d = 16, std::size_t k = 4) {
  ModalitySpec s;
  s.name = "toy";
  s.raw_dim = d;
  s.n_classes = k;
  s.class_seed = 3;
  s.encoder_seed = 4;
  return s;
}

EncoderShape shape(std::size_t hidden = 40, std::size_t out = 8) {
  EncoderShape s;
  s.hidden = hidden;
  s.out_dim = out;
  return s;
}

// Straight-line reference: W2 tanh(W1 x + b1) + b2.
Vector reference_encode(const FrozenEncoder &e, std::span<const double> x) {
  Vector h(e.hidden());
  for (std::size_t i = 0; i < e.hidden(); ++i) {
    double s = e.b1()[i];
    for (std::size_t j = 0; j < e.in_dim(); ++j) s += e.w1()(i, j) * x[j];
    h[i] = std::tanh(s);
  }
  Vector out(e.out_dim());
  for (std::size_t i = 0; i < e.out_dim(); ++i) {
    double s = e.b2()[i];
    for (std::size_t j = 0; j < e.hidden(); ++j) s += e.w2()(i, j) * h[j];
    out[i] = s;
  }
  return out;
}

}  // namespace

TEST(Encoder, ForwardMatchesReference) {
  const FrozenEncoder enc = build_encoder(spec(), shape());
  Rng rng(1);
  Matrix x(5, 16);
  for (double &v : x.data()) v = rng.uniform();
  const Matrix e = enc.encode_all(x);
  for (std::size_t i = 0; i < 5; ++i) {
    const Vector ref = reference_encode(enc, x.row(i));
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(e(i, j), ref[j], 1e-13);
    const Vector one = enc.encode(x.row(i));
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(one[j], e(i, j));
  }
  EXPECT_THROW(enc.encode(Vector(15)), Error);
}

TEST(Encoder, WeightsAreBinary32AndDeterministic) {
  const FrozenEncoder a = build_encoder(spec(), shape());
  const FrozenEncoder b = build_encoder(spec(), shape());
  EXPECT_TRUE(a == b);
  for (double v : a.w1().data()) EXPECT_EQ(v, round_f32(v));
  for (double v : a.b1()) EXPECT_EQ(v, round_f32(v));
  for (double v : a.w2().data()) EXPECT_EQ(v, round_f32(v));
  EXPECT_EQ(a.param_count(), 40u * 16 + 40 + 8 * 40 + 8);
}

TEST(Encoder, HiddenBiasCentersTheBox) {
  // At the box midpoint the pre-activation is b1 + W1 * 0.5, which is just the
  // small random part of the bias.
  EncoderShape s = shape(200, 8);
  s.hidden_bias_scale = 0.1;
  const FrozenEncoder enc = build_encoder(spec(), s);
  double sum2 = 0;
  for (std::size_t i = 0; i < enc.hidden(); ++i) {
    double pre = enc.b1()[i];
    for (std::size_t j = 0; j < enc.in_dim(); ++j) pre += 0.5 * enc.w1()(i, j);
    sum2 += pre * pre;
  }
  EXPECT_NEAR(std::sqrt(sum2 / 200), 0.1, 0.03);
}

TEST(Encoder, SensitiveSubspaceIsLowRankBoost) {
  EncoderShape plain = shape();
  plain.sensitive_rank = 2;
  plain.sensitive_gain = 1.0;
  EncoderShape boosted = plain;
  boosted.sensitive_gain = 5.0;
  const FrozenEncoder a = build_encoder(spec(), plain);
  const FrozenEncoder b = build_encoder(spec(), boosted);
  // W1(gain) - W1(1) = (gain - 1) W1(1) Q Q^T has rank 2.
  Matrix diff = b.w1();
  for (std::size_t i = 0; i < diff.size(); ++i) diff.data()[i] -= a.w1().data()[i];
  const SymmetricEigen eig = symmetric_eigen(matmul(transpose(diff), diff));
  EXPECT_GT(eig.values[1], 1.0);
  for (std::size_t j = 2; j < eig.values.size(); ++j) EXPECT_LT(eig.values[j], 1e-9);
  EXPECT_THROW(
      [] {
        EncoderShape s = shape();
        s.sensitive_rank = 17;
        build_encoder(spec(), s);
      }(),
      Error);
}

TEST(Encoder, RandomOrthonormalColumns) {
  Rng rng(2);
  const Matrix q = random_orthonormal(12, 4, rng);
  const Matrix g = matmul(transpose(q), q);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g(i, j), i == j ? 1.0 : 0.0, 1e-12);
}

TEST(Encoder, BackwardMatchesFiniteDifference) {
  const FrozenEncoder enc = build_encoder(spec(), shape());
  Rng rng(5);
  Matrix x(3, 16);
  for (double &v : x.data()) v = rng.uniform();
  Matrix w = gaussian_matrix(3, 8, 1.0, rng);
  Matrix out, hidden;
  enc.encode_batch(x, out, &hidden);
  Matrix gin;
  enc.backward_batch(hidden, w, gin);
  for (std::size_t i = 0; i < 3; ++i) {
    auto f = [&](std::span<const double> xi) { return dot(enc.encode(xi), w.row(i)); };
    EXPECT_LT(grad_check(f, gin.row(i), x.row(i)), 1e-6);
  }
}

TEST(Centers, EmpiricalMeansAndLogits) {
  const ModalitySpec s = spec();
  const FrozenEncoder enc = build_encoder(s, shape());
  const Dataset ds = generate(s, 6, 1, Split::kCenters);
  const SemanticCenters c = estimate_centers(enc, ds);
  ASSERT_EQ(c.num_classes(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    Vector m(8, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == k) {
        const Vector e = enc.encode(ds.samples.row(i));
        for (std::size_t j = 0; j < 8; ++j) m[j] += e[j] / 6.0;
      }
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(c.centers()(k, j), m[j], 1e-6);
    EXPECT_NEAR(norm2(c.unit().row(k)), 1.0, 1e-14);
  }
  const Vector e = enc.encode(ds.samples.row(0));
  const Vector f = cosine_logits(e, c);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(f[k], cosine(e, c.centers().row(k)), 1e-14);
  EXPECT_THROW(cosine_logits(Vector(8, 0.0), c), Error);
  EXPECT_THROW(SemanticCenters(Matrix(2, 3, 0.0)), Error);
}

TEST(Predict, ArgmaxLowestIndexOnTies) {
  EXPECT_EQ(predict(Vector{0.1, 0.5, 0.5, 0.2}), 1u);
  EXPECT_EQ(predict(Vector{0.3, 0.3}), 0u);
  EXPECT_EQ(predict(Vector{-1, -2, 0}), 2u);
}

TEST(Checkpoint, RoundTripAndHashes) {
  const ModalitySpec s = spec();
  const FrozenEncoder enc = build_encoder(s, shape());
  const SemanticCenters c = estimate_centers(enc, generate(s, 4, 1, Split::kCenters));
  Rng rng(8);
  ProjectionHead h = ProjectionHead::make(8, SizeClass::kSmall, rng);
  h.quantize_f32();
  ModelCheckpoint ck{enc, c, h};
  const Bytes b = encode_checkpoint(ck);
  const ModelCheckpoint back = decode_checkpoint(b);
  EXPECT_TRUE(back.encoder == enc);
  EXPECT_TRUE(back.centers == c);
  ASSERT_TRUE(back.head.has_value());
  EXPECT_EQ(encode_checkpoint(back), b);

  // LoRA sections survive too.
  ProjectionHead hl = h;
  hl.enable_lora(2, 1.0, rng);
  hl.quantize_f32();
  ModelCheckpoint ckl{enc, c, hl};
  const ModelCheckpoint backl = decode_checkpoint(encode_checkpoint(ckl));
  ASSERT_TRUE(backl.head->has_lora());
  EXPECT_EQ(encode_checkpoint(backl), encode_checkpoint(ckl));

  EXPECT_NE(checkpoint_hash(ck), checkpoint_hash(ckl));
  EXPECT_EQ(frozen_hash(ck), frozen_hash(ckl));

  Bytes cut(b.begin(), b.end() - 3);
  EXPECT_THROW(decode_checkpoint(cut), Error);
  Bytes extra = b;
  extra.push_back(1);
  EXPECT_THROW(decode_checkpoint(extra), Error);
}

TEST(Checkpoint, FrozenCountAndFraction) {
  const FrozenEncoder enc = build_encoder(spec(), shape());
  const SemanticCenters c(Matrix(4, 8, 1.0));
  const ProjectionHead h = ProjectionHead::identity(8);
  ModelCheckpoint ck{enc, c, h};
  EXPECT_EQ(ck.frozen_count(), enc.param_count() + 32);
  EXPECT_DOUBLE_EQ(trainable_fraction(enc, c, h), 72.0 / static_cast<double>(enc.param_count() + 32 + 72));
}
