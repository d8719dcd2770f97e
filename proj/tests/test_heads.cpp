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

#include "bindcal/heads.hpp"

using namespace bindcal;

namespace {

double objective(const ProjectionHead &h, std::span<const double> z, std::span<const double> w) {
  return dot(h.forward(z), w);
}

}  // namespace

TEST(Head, SizeClassesAndShapes) {
  Rng rng(1);
  EXPECT_EQ(hidden_width(64, SizeClass::kSmall), 32u);
  EXPECT_EQ(hidden_width(64, SizeClass::kMedium), 64u);
  EXPECT_EQ(hidden_width(64, SizeClass::kLarge), 128u);
  const ProjectionHead h = ProjectionHead::make(10, SizeClass::kLarge, rng);
  EXPECT_EQ(h.num_layers(), 3u);
  EXPECT_EQ(h.in_dim(), 10u);
  EXPECT_EQ(h.out_dim(), 10u);
  EXPECT_EQ(h.trainable_count(), 20u * 10 + 20 + 20 * 20 + 20 + 10 * 20 + 10);
  EXPECT_EQ(parse_size_class("large"), SizeClass::kLarge);
  EXPECT_THROW(parse_size_class("huge"), Error);
}

TEST(Head, ForwardMatchesHandComputation) {
  // One hidden unit: h(z) = w2 tanh(w1 . z + b1) + b2 with 2-d in/out.
  LinearLayer l1{Matrix::from_rows({{0.5, -1.0}}), Vector{0.25}, std::nullopt};
  LinearLayer l2{Matrix::from_rows({{2.0}, {-3.0}}), Vector{0.1, 0.2}, std::nullopt};
  const ProjectionHead h({l1, l2});
  const Vector out = h.forward(Vector{1.0, 2.0});
  const double a = std::tanh(0.5 - 2.0 + 0.25);
  EXPECT_NEAR(out[0], 2.0 * a + 0.1, 1e-15);
  EXPECT_NEAR(out[1], -3.0 * a + 0.2, 1e-15);
  EXPECT_THROW(h.forward(Vector{1.0}), Error);
}

TEST(Head, IdentityHeadIsIdentity) {
  const ProjectionHead h = ProjectionHead::identity(5);
  const Vector z{0.1, -0.2, 3.0, 4.5, -7.0};
  EXPECT_EQ(h.forward(z), z);
}

TEST(Head, BackwardMatchesFiniteDifferences) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 2 + rng.below(6);
    ProjectionHead h = ProjectionHead::make(d, static_cast<SizeClass>(trial % 3), rng);
    for (auto p : h.trainable_params())
      for (double &v : p) v += 0.1 * rng.normal();  // non-zero biases
    h.refresh();
    const Vector z = [&] { Vector v(d); for (double &x : v) x = rng.normal(); return v; }();
    const Vector w = [&] { Vector v(d); for (double &x : v) x = rng.normal(); return v; }();
    ProjectionHead::Trace t;
    h.forward(z, t);
    HeadGrad g = h.zero_grad();
    const Vector gz = h.backward(t, w, &g);
    EXPECT_LT(grad_check([&](std::span<const double> zz) { return objective(h, zz, w); }, gz, z), 1e-6);
    // Parameter gradient through the flat view.
    std::vector<Vector> tg = h.trainable_grads(g);
    Vector flat_g;
    for (const auto &v : tg) flat_g.insert(flat_g.end(), v.begin(), v.end());
    const Vector p0 = h.flat_trainable();
    auto f = [&](std::span<const double> p) {
      ProjectionHead c = h;
      c.set_flat_trainable(p);
      return objective(c, z, w);
    };
    EXPECT_LT(grad_check(f, flat_g, p0), 1e-5);
  }
}

TEST(Lora, ZeroAInitLeavesOutputUnchanged) {
  Rng rng(3);
  ProjectionHead h = ProjectionHead::make(12, SizeClass::kMedium, rng);
  const Vector z = [&] { Vector v(12); for (double &x : v) x = rng.normal(); return v; }();
  const Vector before = h.forward(z);
  h.enable_lora(4, 1.0, rng);
  EXPECT_TRUE(h.has_lora());
  EXPECT_EQ(h.forward(z), before);
  EXPECT_EQ(h.trainable_count(), 3u * (12 * 4 + 4 * 12 + 12));
  EXPECT_THROW(h.enable_lora(13, 1.0, rng), Error);
}

TEST(Lora, EffectiveWeightAndFactorGradients) {
  Rng rng(4);
  ProjectionHead h = ProjectionHead::make(6, SizeClass::kSmall, rng);
  h.enable_lora(2, 0.5, rng);
  auto params = h.trainable_params();
  for (auto p : params)
    for (double &v : p) v = rng.normal() * 0.3;
  h.refresh();
  // W_eff = W0 + alpha A B, checked against an explicit product.
  for (std::size_t l = 0; l < h.num_layers(); ++l) {
    const auto &L = h.layers()[l];
    const Matrix ab = matmul(L.lora->a, L.lora->b);
    for (std::size_t i = 0; i < ab.size(); ++i)
      EXPECT_NEAR(h.effective_weight(l).data()[i], L.weight.data()[i] + 0.5 * ab.data()[i], 1e-15);
  }
  const Vector z{0.3, -0.1, 0.8, 1.2, -0.5, 0.05};
  const Vector w{1, -1, 0.5, 0.25, -2, 1};
  ProjectionHead::Trace t;
  h.forward(z, t);
  HeadGrad g = h.zero_grad();
  h.backward(t, w, &g);
  Vector flat_g;
  for (const auto &v : h.trainable_grads(g)) flat_g.insert(flat_g.end(), v.begin(), v.end());
  auto f = [&](std::span<const double> p) {
    ProjectionHead c = h;
    c.set_flat_trainable(p);
    return objective(c, z, w);
  };
  EXPECT_LT(grad_check(f, flat_g, h.flat_trainable()), 1e-5);
}

TEST(Lora, FractionUnderOnePercentAtDefaultSizing) {
  // Default sizing: D = 64, medium head, r = 8, encoder 64 -> 2560 -> 64.
  Rng rng(5);
  ProjectionHead h = ProjectionHead::make(64, SizeClass::kMedium, rng);
  h.enable_lora(8, 1.0, rng);
  const std::size_t frozen = 2560 * 64 + 2560 + 64 * 2560 + 64 + 10 * 64;
  const double f = trainable_fraction(frozen, h);
  EXPECT_EQ(h.trainable_count(), 3u * (64 * 8 + 8 * 64 + 64));
  EXPECT_LT(f, 0.01);
}

TEST(Head, QuantizeAndFlatRoundTrip) {
  Rng rng(6);
  ProjectionHead h = ProjectionHead::make(4, SizeClass::kMedium, rng);
  h.quantize_f32();
  for (double v : h.flat_trainable()) EXPECT_EQ(v, round_f32(v));
  Vector p = h.flat_trainable();
  p[0] += 1.0;
  h.set_flat_trainable(p);
  EXPECT_EQ(h.layers()[0].weight.data()[0], p[0]);
  EXPECT_THROW(h.set_flat_trainable(Vector(3)), Error);
}

TEST(HeadGrad, AddAndScale) {
  const ProjectionHead h = ProjectionHead::identity(2);
  HeadGrad a = h.zero_grad(), b = h.zero_grad();
  a.weight[0](0, 1) = 1.0;
  b.weight[0](0, 1) = 2.0;
  b.bias[0][1] = 4.0;
  a.add(b);
  a.scale(0.5);
  EXPECT_EQ(a.weight[0](0, 1), 1.5);
  EXPECT_EQ(a.bias[0][1], 2.0);
}
