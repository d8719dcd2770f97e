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

// The frozen zero-shot classifier: per-modality encoder, fixed semantic
// centers, and cosine logits f_k = cos(e, c_k) with e = phi(x) or h(phi(x)).
//
// Checkpoint layout (little-endian):
//   "BCAL1" | u8 0x03 | u32 section_count |
//   section_count x { u8 tag | u32 rows | u32 cols | rows*cols x f32 }
// Tags: 0x01/0x02 encoder layer-1 weight/bias, 0x03/0x04 encoder layer-2
// weight/bias, 0x10 centers, then per head layer 0x20 weight (W0 under an
// adapter), 0x21 bias, and optionally 0x30 A, 0x31 B, 0x32 alpha (1x1).

#ifndef BINDCAL_MODEL_HPP_
#define BINDCAL_MODEL_HPP_

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bindcal/binio.hpp"
#include "bindcal/error.hpp"
#include "bindcal/heads.hpp"
#include "bindcal/numkernel.hpp"
#include "bindcal/synthdata.hpp"

namespace bindcal {

struct EncoderShape {
  std::size_t hidden = 256;
  std::size_t out_dim = 64;
  // A seeded rank-`sensitive_rank` subspace of the input is amplified by
  // `sensitive_gain` in the first layer. Pretrained backbones respond strongly
  // to a few input directions; this reproduces that sensitivity.
  std::size_t sensitive_rank = 0;
  double sensitive_gain = 1.0;
  double hidden_bias_scale = 0.1;
  double output_bias_scale = 0.0;
};

// phi(x) = W2 tanh(W1 x + b1) + b2. Weights are immutable after construction.
class FrozenEncoder {
 public:
  FrozenEncoder() = default;
  FrozenEncoder(Matrix w1, Vector b1, Matrix w2, Vector b2)
      : w1_(std::move(w1)), b1_(std::move(b1)), w2_(std::move(w2)), b2_(std::move(b2)) {
    if (b1_.size() != w1_.rows() || w2_.cols() != w1_.rows() || b2_.size() != w2_.rows()) {
      throw Error(ErrorCode::kDimensionMismatch, "encoder layer shapes");
    }
  }

  std::size_t in_dim() const { return w1_.cols(); }
  std::size_t hidden() const { return w1_.rows(); }
  std::size_t out_dim() const { return w2_.rows(); }
  std::size_t param_count() const { return w1_.size() + b1_.size() + w2_.size() + b2_.size(); }

  const Matrix &w1() const { return w1_; }
  const Vector &b1() const { return b1_; }
  const Matrix &w2() const { return w2_; }
  const Vector &b2() const { return b2_; }

  Vector encode(std::span<const double> x) const {
    if (x.size() != in_dim()) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "encoder input " + std::to_string(x.size()) + " != " + std::to_string(in_dim()));
    }
    Matrix xm(1, x.size(), Vector(x.begin(), x.end()));
    Matrix e;
    encode_batch(xm, e, nullptr);
    return Vector(e.data().begin(), e.data().end());
  }

  // Rows of `x` are inputs; `hidden` (optional) receives tanh activations for
  // a later backward pass.
  void encode_batch(const Matrix &x, Matrix &out, Matrix *hidden) const {
    if (x.cols() != in_dim()) {
      throw Error(ErrorCode::kDimensionMismatch, "encoder batch " + shape_str(x));
    }
    Matrix h;
    gemm_nt(x, w1_, h);
    for (std::size_t i = 0; i < h.rows(); ++i) {
      auto r = h.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] = std::tanh(r[j] + b1_[j]);
    }
    gemm_nt(h, w2_, out);
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto r = out.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += b2_[j];
    }
    if (hidden != nullptr) *hidden = std::move(h);
  }

  Matrix encode_all(const Matrix &x) const {
    Matrix e;
    encode_batch(x, e, nullptr);
    return e;
  }

  // d(loss)/d(input) from d(loss)/d(output) and the cached activations.
  void backward_batch(const Matrix &hidden, const Matrix &grad_out, Matrix &grad_in) const {
    Matrix gh;
    gemm_nn(grad_out, w2_, gh);
    for (std::size_t i = 0; i < gh.rows(); ++i) {
      auto g = gh.row(i);
      auto a = hidden.row(i);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] *= 1.0 - a[j] * a[j];
    }
    gemm_nn(gh, w1_, grad_in);
  }

  bool operator==(const FrozenEncoder &) const = default;

 private:
  Matrix w1_;
  Vector b1_;
  Matrix w2_;
  Vector b2_;
};

// Orthonormal basis (columns) of a seeded Gaussian d x m matrix.
inline Matrix random_orthonormal(std::size_t d, std::size_t m, Rng &rng) {
  Matrix q = gaussian_matrix(d, m, 1.0, rng);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += q(i, j) * q(i, p);
      for (std::size_t i = 0; i < d; ++i) q(i, j) -= s * q(i, p);
    }
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) n += q(i, j) * q(i, j);
    n = std::sqrt(n);
    for (std::size_t i = 0; i < d; ++i) q(i, j) /= n;
  }
  return q;
}

// Two-layer tanh encoder with N(0, 1/fan_in) weights. The hidden bias is
// centered on the input-box midpoint so that tanh stays in its responsive
// range over [0,1]^d. All weights are binary32-representable.
inline FrozenEncoder build_encoder(const ModalitySpec &spec, const EncoderShape &shape) {
  spec.validate();
  if (shape.hidden < 1) throw Error(ErrorCode::kInvalidArgument, "encoder hidden must be >= 1");
  if (shape.out_dim < 2) throw Error(ErrorCode::kInvalidArgument, "embedding dim must be >= 2");
  if (shape.sensitive_rank > spec.raw_dim) {
    throw Error(ErrorCode::kInvalidArgument, "sensitive_rank exceeds raw_dim");
  }
  const std::size_t d = spec.raw_dim, h = shape.hidden, D = shape.out_dim;
  Rng rng(spec.encoder_seed);
  Matrix w1 = gaussian_matrix(h, d, 1.0 / std::sqrt(double(d)), rng);
  if (shape.sensitive_rank > 0) {
    const Matrix q = random_orthonormal(d, shape.sensitive_rank, rng);
    // w1 <- w1 (I + (gain - 1) Q Q^T)
    Matrix proj(d, d);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) {
        double s = 0.0;
        for (std::size_t k = 0; k < q.cols(); ++k) s += q(a, k) * q(b, k);
        proj(a, b) = (a == b ? 1.0 : 0.0) + (shape.sensitive_gain - 1.0) * s;
      }
    w1 = matmul(w1, proj);
  }
  for (double &v : w1.data()) v = round_f32(v);
  Vector b1(h);
  for (std::size_t i = 0; i < h; ++i) {
    double mid = 0.0;
    for (std::size_t j = 0; j < d; ++j) mid += 0.5 * w1(i, j);
    b1[i] = round_f32(-mid + shape.hidden_bias_scale * rng.normal());
  }
  Matrix w2 = gaussian_matrix(D, h, 1.0 / std::sqrt(double(h)), rng);
  for (double &v : w2.data()) v = round_f32(v);
  Vector b2(D);
  for (double &v : b2) v = round_f32(shape.output_bias_scale * rng.normal());
  return FrozenEncoder(std::move(w1), std::move(b1), std::move(w2), std::move(b2));
}

// K fixed class vectors. Immutable once built.
class SemanticCenters {
 public:
  SemanticCenters() = default;
  explicit SemanticCenters(Matrix centers) : centers_(std::move(centers)) {
    unit_ = centers_;
    for (std::size_t k = 0; k < centers_.rows(); ++k) {
      const double n = norm2(centers_.row(k));
      if (!(n > 0.0)) {
        throw Error(ErrorCode::kDegenerate, "semantic center " + std::to_string(k) + " has zero norm");
      }
      for (double &v : unit_.row(k)) v /= n;
    }
  }

  std::size_t num_classes() const { return centers_.rows(); }
  std::size_t dim() const { return centers_.cols(); }
  const Matrix &centers() const { return centers_; }
  const Matrix &unit() const { return unit_; }

  bool operator==(const SemanticCenters &o) const { return centers_ == o.centers_; }

 private:
  Matrix centers_;
  Matrix unit_;
};

// c_k = mean of phi(x) over class-k samples, rounded to binary32.
inline SemanticCenters estimate_centers(const FrozenEncoder &enc, const Dataset &ds) {
  const std::size_t K = ds.spec.n_classes;
  const Matrix e = enc.encode_all(ds.samples);
  Matrix sum(K, e.cols());
  std::vector<std::size_t> count(K, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto y = ds.labels[i];
    ++count[y];
    auto r = sum.row(y);
    auto src = e.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += src[j];
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (count[k] == 0) {
      throw Error(ErrorCode::kDegenerate, "class " + std::to_string(k) + " has no samples");
    }
    for (double &v : sum.row(k)) v = round_f32(v / static_cast<double>(count[k]));
  }
  return SemanticCenters(std::move(sum));
}

// Cosine logits of one embedding against every center.
inline Vector cosine_logits(std::span<const double> e, const SemanticCenters &centers) {
  if (e.size() != centers.dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "embedding dim vs centers");
  }
  const double n = norm2(e);
  if (!(n > 0.0)) throw Error(ErrorCode::kDegenerate, "zero-norm embedding");
  Vector f(centers.num_classes());
  for (std::size_t k = 0; k < f.size(); ++k) f[k] = dot(e, centers.unit().row(k)) / n;
  return f;
}

inline Vector embed(const FrozenEncoder &enc, const ProjectionHead *head, std::span<const double> x) {
  Vector z = enc.encode(x);
  return head != nullptr ? head->forward(z) : z;
}

inline Vector logits(const FrozenEncoder &enc, const ProjectionHead *head,
                     const SemanticCenters &centers, std::span<const double> x) {
  return cosine_logits(embed(enc, head, x), centers);
}

// Argmax; ties resolve to the lowest class index.
inline std::size_t predict(std::span<const double> lv) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < lv.size(); ++k)
    if (lv[k] > lv[best]) best = k;
  return best;
}

// ---------------------------------------------------------------------------

struct ModelCheckpoint {
  FrozenEncoder encoder;
  SemanticCenters centers;
  std::optional<ProjectionHead> head;

  // Scalars that never train: encoder and centers.
  std::size_t frozen_count() const { return encoder.param_count() + centers.centers().size(); }
};

inline double trainable_fraction(const FrozenEncoder &enc, const SemanticCenters &centers,
                                 const ProjectionHead &head) {
  return trainable_fraction(enc.param_count() + centers.centers().size(), head);
}

namespace detail {

inline void put_section(ByteWriter &w, std::uint8_t tag, std::size_t rows, std::size_t cols,
                        std::span<const double> v) {
  w.u8(tag);
  w.u32(static_cast<std::uint32_t>(rows));
  w.u32(static_cast<std::uint32_t>(cols));
  for (double x : v) w.f32(x);
}

struct Section {
  std::uint8_t tag;
  Matrix value;
};

}  // namespace detail

inline Bytes encode_checkpoint(const ModelCheckpoint &ck) {
  ByteWriter w;
  w.header(kKindCheckpoint);
  std::uint32_t n = 5;
  if (ck.head) {
    for (const auto &L : ck.head->layers()) n += L.lora ? 5 : 2;
  }
  w.u32(n);
  const auto &e = ck.encoder;
  detail::put_section(w, 0x01, e.w1().rows(), e.w1().cols(), e.w1().data());
  detail::put_section(w, 0x02, 1, e.b1().size(), e.b1());
  detail::put_section(w, 0x03, e.w2().rows(), e.w2().cols(), e.w2().data());
  detail::put_section(w, 0x04, 1, e.b2().size(), e.b2());
  const Matrix &c = ck.centers.centers();
  detail::put_section(w, 0x10, c.rows(), c.cols(), c.data());
  if (ck.head) {
    for (const auto &L : ck.head->layers()) {
      detail::put_section(w, 0x20, L.weight.rows(), L.weight.cols(), L.weight.data());
      detail::put_section(w, 0x21, 1, L.bias.size(), L.bias);
      if (L.lora) {
        detail::put_section(w, 0x30, L.lora->a.rows(), L.lora->a.cols(), L.lora->a.data());
        detail::put_section(w, 0x31, L.lora->b.rows(), L.lora->b.cols(), L.lora->b.data());
        const double alpha = L.lora->alpha;
        detail::put_section(w, 0x32, 1, 1, std::span<const double>(&alpha, 1));
      }
    }
  }
  return w.take();
}

inline ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.header() != kKindCheckpoint) throw Error(ErrorCode::kBadMagic, "container is not a checkpoint");
  const std::uint32_t n = r.u32();
  std::vector<detail::Section> sections;
  for (std::uint32_t s = 0; s < n; ++s) {
    const std::uint8_t tag = r.u8();
    const std::uint32_t rows = r.u32(), cols = r.u32();
    r.need(static_cast<std::size_t>(rows) * cols * 4);
    Matrix m(rows, cols);
    for (double &v : m.data()) v = r.f32();
    sections.push_back({tag, std::move(m)});
  }
  r.expect_end();
  if (sections.size() < 5 || sections[0].tag != 0x01 || sections[1].tag != 0x02 ||
      sections[2].tag != 0x03 || sections[3].tag != 0x04 || sections[4].tag != 0x10) {
    throw Error(ErrorCode::kInconsistent, "checkpoint must start with encoder and centers sections");
  }
  auto as_vec = [](const Matrix &m) { return Vector(m.data().begin(), m.data().end()); };
  ModelCheckpoint ck;
  ck.encoder = FrozenEncoder(sections[0].value, as_vec(sections[1].value), sections[2].value,
                             as_vec(sections[3].value));
  ck.centers = SemanticCenters(sections[4].value);
  if (ck.centers.dim() != ck.encoder.out_dim()) {
    throw Error(ErrorCode::kInconsistent, "centers dim != encoder output dim");
  }
  std::vector<LinearLayer> layers;
  for (std::size_t i = 5; i < sections.size();) {
    if (sections[i].tag != 0x20 || i + 1 >= sections.size() || sections[i + 1].tag != 0x21) {
      throw Error(ErrorCode::kInconsistent, "unexpected section tag " + std::to_string(sections[i].tag));
    }
    LinearLayer L{sections[i].value, as_vec(sections[i + 1].value), std::nullopt};
    i += 2;
    if (i < sections.size() && sections[i].tag == 0x30) {
      if (i + 2 >= sections.size() || sections[i + 1].tag != 0x31 || sections[i + 2].tag != 0x32 ||
          sections[i + 2].value.size() != 1) {
        throw Error(ErrorCode::kInconsistent, "incomplete adapter sections");
      }
      L.lora = LoraFactors{sections[i].value, sections[i + 1].value, sections[i + 2].value.data()[0]};
      i += 3;
    }
    layers.push_back(std::move(L));
  }
  if (!layers.empty()) {
    ck.head = ProjectionHead(std::move(layers));
    if (ck.head->in_dim() != ck.encoder.out_dim()) {
      throw Error(ErrorCode::kInconsistent, "head dim != encoder output dim");
    }
  }
  return ck;
}

inline Digest checkpoint_hash(const ModelCheckpoint &ck) { return sha256(encode_checkpoint(ck)); }

// Hash of the frozen part only (encoder and centers).
inline Digest frozen_hash(const ModelCheckpoint &ck) {
  ModelCheckpoint frozen{ck.encoder, ck.centers, std::nullopt};
  return sha256(encode_checkpoint(frozen));
}

inline void save_checkpoint(const ModelCheckpoint &ck, const std::filesystem::path &path) {
  write_file(path, encode_checkpoint(ck));
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path &path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace bindcal

#endif  // BINDCAL_MODEL_HPP_
