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

// Trainable projection heads: a square tanh MLP whose linear layers can carry
// a low-rank adapter W = W0 + alpha * A * B with W0 frozen.

#ifndef BINDCAL_HEADS_HPP_
#define BINDCAL_HEADS_HPP_

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bindcal/error.hpp"
#include "bindcal/numkernel.hpp"

namespace bindcal {

enum class SizeClass { kSmall, kMedium, kLarge };

inline const char *size_class_name(SizeClass s) {
  switch (s) {
    case SizeClass::kSmall: return "small";
    case SizeClass::kMedium: return "medium";
    case SizeClass::kLarge: return "large";
  }
  return "?";
}

inline SizeClass parse_size_class(const std::string &s) {
  if (s == "small") return SizeClass::kSmall;
  if (s == "medium") return SizeClass::kMedium;
  if (s == "large") return SizeClass::kLarge;
  throw Error(ErrorCode::kConfig, "unknown head size class '" + s + "'");
}

// Hidden width for a size class: D/2, D or 2D.
inline std::size_t hidden_width(std::size_t dim, SizeClass s) {
  switch (s) {
    case SizeClass::kSmall: return std::max<std::size_t>(1, dim / 2);
    case SizeClass::kMedium: return dim;
    case SizeClass::kLarge: return 2 * dim;
  }
  return dim;
}

// a is (d_out x r), b is (r x d_in).
struct LoraFactors {
  Matrix a;
  Matrix b;
  double alpha = 1.0;

  std::size_t rank() const noexcept { return a.cols(); }
};

inline Matrix lora_effective(const Matrix &base, const LoraFactors &f) {
  if (f.a.rows() != base.rows() || f.b.cols() != base.cols() || f.a.cols() != f.b.rows()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "lora factors " + shape_str(f.a) + " * " + shape_str(f.b) + " for base " +
                    shape_str(base));
  }
  Matrix w = base;
  const Matrix ab = matmul(f.a, f.b);
  for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] += f.alpha * ab.data()[i];
  return w;
}

struct LinearLayer {
  Matrix weight;  // W0 when an adapter is attached
  Vector bias;
  std::optional<LoraFactors> lora;
};

// Gradient with respect to the effective weights and biases of each layer.
struct HeadGrad {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  void add(const HeadGrad &o) {
    for (std::size_t l = 0; l < weight.size(); ++l) {
      auto w = weight[l].data();
      auto ow = o.weight[l].data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += ow[i];
      for (std::size_t i = 0; i < bias[l].size(); ++i) bias[l][i] += o.bias[l][i];
    }
  }
  void scale(double s) {
    for (auto &w : weight)
      for (double &v : w.data()) v *= s;
    for (auto &b : bias)
      for (double &v : b) v *= s;
  }
};

class ProjectionHead {
 public:
  // Forward activations: acts[0] is the input, acts[l + 1] the output of
  // layer l after its activation.
  struct Trace {
    std::vector<Vector> acts;
  };

  ProjectionHead() = default;

  explicit ProjectionHead(std::vector<LinearLayer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw Error(ErrorCode::kInvalidArgument, "head needs >= 1 layer");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto &L = layers_[l];
      if (L.bias.size() != L.weight.rows()) {
        throw Error(ErrorCode::kDimensionMismatch, "bias/weight rows in layer " + std::to_string(l));
      }
      if (l > 0 && L.weight.cols() != layers_[l - 1].weight.rows()) {
        throw Error(ErrorCode::kDimensionMismatch, "layer chain broken at " + std::to_string(l));
      }
    }
    if (in_dim() != out_dim()) {
      throw Error(ErrorCode::kDimensionMismatch, "projection head must be square end to end");
    }
    refresh();
  }

  // Two tanh hidden layers of the size class width, weights N(0, 1/fan_in),
  // zero biases.
  static ProjectionHead make(std::size_t dim, SizeClass size, Rng &rng) {
    const std::size_t h = hidden_width(dim, size);
    const std::size_t dims[] = {dim, h, h, dim};
    std::vector<LinearLayer> layers;
    for (int l = 0; l < 3; ++l) {
      LinearLayer L;
      L.weight = gaussian_matrix(dims[l + 1], dims[l], 1.0 / std::sqrt(double(dims[l])), rng);
      L.bias = Vector(dims[l + 1], 0.0);
      layers.push_back(std::move(L));
    }
    return ProjectionHead(std::move(layers));
  }

  // Single linear layer W = I, b = 0.
  static ProjectionHead identity(std::size_t dim) {
    return ProjectionHead({LinearLayer{Matrix::identity(dim), Vector(dim, 0.0), std::nullopt}});
  }

  std::size_t in_dim() const { return layers_.front().weight.cols(); }
  std::size_t out_dim() const { return layers_.back().weight.rows(); }
  std::size_t num_layers() const { return layers_.size(); }
  const std::vector<LinearLayer> &layers() const { return layers_; }
  const Matrix &effective_weight(std::size_t l) const { return effective_[l]; }
  bool has_lora() const { return layers_.front().lora.has_value(); }

  // Attaches an adapter to every linear layer: A = 0, B ~ N(0, 1/d_in). With
  // A zero the head computes exactly what it computed before.
  void enable_lora(std::size_t rank, double alpha, Rng &rng) {
    if (!(alpha > 0.0)) throw Error(ErrorCode::kInvalidArgument, "lora alpha must be > 0");
    for (auto &L : layers_) {
      const std::size_t d_out = L.weight.rows(), d_in = L.weight.cols();
      if (rank == 0 || rank > std::min(d_out, d_in)) {
        throw Error(ErrorCode::kInvalidArgument,
                    "lora rank " + std::to_string(rank) + " exceeds min(d_out, d_in)");
      }
      L.lora = LoraFactors{Matrix(d_out, rank, 0.0),
                           gaussian_matrix(rank, d_in, 1.0 / std::sqrt(double(d_in)), rng), alpha};
    }
    refresh();
  }

  // Recomputes effective weights after parameters change.
  void refresh() {
    effective_.clear();
    for (const auto &L : layers_) {
      effective_.push_back(L.lora ? lora_effective(L.weight, *L.lora) : L.weight);
    }
  }

  Vector forward(std::span<const double> z) const {
    Trace t;
    return forward(z, t);
  }

  Vector forward(std::span<const double> z, Trace &trace) const {
    if (z.size() != in_dim()) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "head input " + std::to_string(z.size()) + " != " + std::to_string(in_dim()));
    }
    trace.acts.resize(layers_.size() + 1);
    trace.acts[0].assign(z.begin(), z.end());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Vector y = matvec(effective_[l], trace.acts[l]);
      const Vector &b = layers_[l].bias;
      const bool hidden = l + 1 < layers_.size();
      for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] += b[i];
        if (hidden) y[i] = std::tanh(y[i]);
      }
      trace.acts[l + 1] = std::move(y);
    }
    return trace.acts.back();
  }

  // Back-propagates d(loss)/d(output). Accumulates parameter gradients into
  // `grad` when non-null and returns d(loss)/d(input).
  Vector backward(const Trace &trace, std::span<const double> grad_out, HeadGrad *grad) const {
    Vector g(grad_out.begin(), grad_out.end());
    for (std::size_t l = layers_.size(); l-- > 0;) {
      if (l + 1 < layers_.size()) {
        const Vector &a = trace.acts[l + 1];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - a[i] * a[i];
      }
      if (grad != nullptr) {
        const Vector &x = trace.acts[l];
        Matrix &gw = grad->weight[l];
        for (std::size_t i = 0; i < g.size(); ++i) {
          grad->bias[l][i] += g[i];
          if (g[i] == 0.0) continue;
          double *row = gw.row(i).data();
          for (std::size_t j = 0; j < x.size(); ++j) row[j] += g[i] * x[j];
        }
      }
      g = matvec_t(effective_[l], g);
    }
    return g;
  }

  HeadGrad zero_grad() const {
    HeadGrad g;
    for (const auto &L : layers_) {
      g.weight.emplace_back(L.weight.rows(), L.weight.cols(), 0.0);
      g.bias.emplace_back(L.bias.size(), 0.0);
    }
    return g;
  }

  // Trainable tensors in a fixed order: per layer either W or (A, B), then b.
  std::vector<std::span<double>> trainable_params() {
    std::vector<std::span<double>> out;
    for (auto &L : layers_) {
      if (L.lora) {
        out.push_back(L.lora->a.data());
        out.push_back(L.lora->b.data());
      } else {
        out.push_back(L.weight.data());
      }
      out.push_back(L.bias);
    }
    return out;
  }

  // Maps effective-weight gradients onto the trainable tensors, in the order
  // of trainable_params(). For an adapter: dA = alpha G B^T, dB = alpha A^T G.
  std::vector<Vector> trainable_grads(const HeadGrad &g) const {
    std::vector<Vector> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto &L = layers_[l];
      const Matrix &G = g.weight[l];
      if (L.lora) {
        const LoraFactors &f = *L.lora;
        Matrix da = matmul(G, transpose(f.b));
        Matrix db = matmul(transpose(f.a), G);
        for (double &v : da.data()) v *= f.alpha;
        for (double &v : db.data()) v *= f.alpha;
        out.emplace_back(da.data().begin(), da.data().end());
        out.emplace_back(db.data().begin(), db.data().end());
      } else {
        out.emplace_back(G.data().begin(), G.data().end());
      }
      out.push_back(g.bias[l]);
    }
    return out;
  }

  Vector flat_trainable() {
    Vector flat;
    for (auto p : trainable_params()) flat.insert(flat.end(), p.begin(), p.end());
    return flat;
  }

  void set_flat_trainable(std::span<const double> flat) {
    std::size_t off = 0;
    for (auto p : trainable_params()) {
      if (off + p.size() > flat.size()) throw Error(ErrorCode::kDimensionMismatch, "flat params");
      std::copy(flat.begin() + off, flat.begin() + off + p.size(), p.begin());
      off += p.size();
    }
    if (off != flat.size()) throw Error(ErrorCode::kDimensionMismatch, "flat params");
    refresh();
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto &L : layers_) {
      n += L.bias.size();
      n += L.lora ? L.lora->a.size() + L.lora->b.size() : L.weight.size();
    }
    return n;
  }

  // Every stored scalar, frozen base weights included.
  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto &L : layers_) {
      n += L.weight.size() + L.bias.size();
      if (L.lora) n += L.lora->a.size() + L.lora->b.size();
    }
    return n;
  }

  // Rounds every parameter to binary32 so checkpoints reload bit-exactly.
  void quantize_f32() {
    for (auto &L : layers_) {
      for (double &v : L.weight.data()) v = round_f32(v);
      for (double &v : L.bias) v = round_f32(v);
      if (L.lora) {
        for (double &v : L.lora->a.data()) v = round_f32(v);
        for (double &v : L.lora->b.data()) v = round_f32(v);
      }
    }
    refresh();
  }

 private:
  std::vector<LinearLayer> layers_;
  std::vector<Matrix> effective_;
};

// Fraction of scalars that receive gradient updates, over everything stored:
// the frozen encoder and centers (`frozen_scalars`) plus the whole head.
inline double trainable_fraction(std::size_t frozen_scalars, const ProjectionHead &head) {
  return static_cast<double>(head.trainable_count()) /
         static_cast<double>(frozen_scalars + head.total_count());
}

}  // namespace bindcal

#endif  // BINDCAL_HEADS_HPP_
