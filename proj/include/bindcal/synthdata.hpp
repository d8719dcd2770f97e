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

// Seeded synthetic multi-class datasets on [0,1]^d and their binary container.
//
// File layout (little-endian):
//   "BCAL1" | u8 0x01 | u32 n_samples | u32 raw_dim | u32 n_classes |
//   u8 split | n_samples x u32 label (0-based) | n_samples*raw_dim x f32
// Readers reject anything after the last value.

#ifndef BINDCAL_SYNTHDATA_HPP_
#define BINDCAL_SYNTHDATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "bindcal/binio.hpp"
#include "bindcal/error.hpp"
#include "bindcal/numkernel.hpp"

namespace bindcal {

enum class Split : std::uint8_t { kTrain = 0, kEval = 1, kCenters = 2 };

inline const char *split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kEval: return "eval";
    case Split::kCenters: return "centers";
  }
  return "?";
}

struct ModalitySpec {
  std::string name;
  std::size_t raw_dim = 0;
  std::size_t n_classes = 0;
  double noise = 0.05;          // per-coordinate Gaussian sigma
  double mean_spread = 0.12;    // class means live in 0.5 +- spread
  std::uint64_t class_seed = 0;
  std::uint64_t encoder_seed = 0;

  void validate() const {
    if (raw_dim < 2) throw Error(ErrorCode::kInvalidArgument, name + ": raw_dim must be >= 2");
    if (n_classes < 2) throw Error(ErrorCode::kInvalidArgument, name + ": n_classes must be >= 2");
    if (!(noise >= 0.0) || !std::isfinite(noise)) {
      throw Error(ErrorCode::kInvalidArgument, name + ": noise must be >= 0");
    }
    if (!(mean_spread > 0.0) || mean_spread > 0.25) {
      throw Error(ErrorCode::kInvalidArgument, name + ": mean_spread must be in (0, 0.25]");
    }
  }
};

struct Dataset {
  ModalitySpec spec;
  Matrix samples;                     // n x raw_dim, entries in [0,1]
  std::vector<std::uint32_t> labels;  // 0-based class indices
  Split split = Split::kTrain;

  std::size_t size() const noexcept { return labels.size(); }
  bool operator==(const Dataset &o) const {
    return samples == o.samples && labels == o.labels && split == o.split;
  }
};

// Class means mu_k, one row per class, drawn uniformly from
// [0.5 - spread, 0.5 + spread]^d (a sub-box of [0.25, 0.75]^d).
inline Matrix class_means(const ModalitySpec &spec) {
  spec.validate();
  Rng rng(spec.class_seed);
  Matrix mu(spec.n_classes, spec.raw_dim);
  for (double &v : mu.data()) v = 0.5 + rng.uniform(-spec.mean_spread, spec.mean_spread);
  return mu;
}

inline double min_center_distance(const Matrix &mu) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < mu.rows(); ++a)
    for (std::size_t b = a + 1; b < mu.rows(); ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < mu.cols(); ++j) {
        const double d = mu(a, j) - mu(b, j);
        s += d * d;
      }
      best = std::min(best, std::sqrt(s));
    }
  return best;
}

// Draws n_per_class samples per class as clip(mu_k + sigma * N(0, I), 0, 1),
// rounded to binary32. Samples are grouped by class in label order.
inline Dataset generate(const ModalitySpec &spec, std::size_t n_per_class,
                        std::uint64_t split_seed, Split split) {
  spec.validate();
  if (n_per_class < 2) throw Error(ErrorCode::kInvalidArgument, "n_per_class must be >= 2");
  const Matrix mu = class_means(spec);
  // Separation along the segment joining two means must exceed four noise
  // standard deviations.
  if (spec.noise > 0.0 && min_center_distance(mu) < 4.0 * spec.noise) {
    throw Error(ErrorCode::kInvalidArgument,
                spec.name + ": class means closer than 4 sigma; increase mean_spread");
  }
  Rng rng(derive_seed(split_seed, static_cast<std::uint64_t>(split)));
  Dataset ds;
  ds.spec = spec;
  ds.split = split;
  ds.samples = Matrix(spec.n_classes * n_per_class, spec.raw_dim);
  ds.labels.resize(spec.n_classes * n_per_class);
  std::size_t r = 0;
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    for (std::size_t i = 0; i < n_per_class; ++i, ++r) {
      ds.labels[r] = static_cast<std::uint32_t>(k);
      auto row = ds.samples.row(r);
      for (std::size_t j = 0; j < spec.raw_dim; ++j) {
        const double noise = spec.noise > 0.0 ? spec.noise * rng.normal() : 0.0;
        row[j] = round_f32(std::clamp(mu(k, j) + noise, 0.0, 1.0));
      }
    }
  }
  return ds;
}

inline std::vector<std::size_t> class_histogram(const Dataset &ds) {
  std::vector<std::size_t> h(ds.spec.n_classes, 0);
  for (auto y : ds.labels) ++h[y];
  return h;
}

inline Bytes encode_dataset(const Dataset &ds) {
  ByteWriter w;
  w.header(kKindDataset);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.samples.cols()));
  w.u32(static_cast<std::uint32_t>(ds.spec.n_classes));
  w.u8(static_cast<std::uint8_t>(ds.split));
  for (auto y : ds.labels) w.u32(y);
  for (double v : ds.samples.data()) w.f32(v);
  return w.take();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.header() != kKindDataset) {
    throw Error(ErrorCode::kBadMagic, "container is not a dataset");
  }
  const std::uint32_t n = r.u32();
  const std::uint32_t d = r.u32();
  const std::uint32_t k = r.u32();
  const std::uint8_t tag = r.u8();
  if (tag > 2) throw Error(ErrorCode::kInconsistent, "unknown split tag " + std::to_string(tag));
  if (d == 0 || k == 0) throw Error(ErrorCode::kInconsistent, "zero raw_dim or n_classes");
  r.need(static_cast<std::size_t>(n) * 4 + static_cast<std::size_t>(n) * d * 4);
  Dataset ds;
  ds.spec.raw_dim = d;
  ds.spec.n_classes = k;
  ds.split = static_cast<Split>(tag);
  ds.labels.resize(n);
  for (auto &y : ds.labels) {
    y = r.u32();
    if (y >= k) throw Error(ErrorCode::kInconsistent, "label " + std::to_string(y) + " >= n_classes");
  }
  ds.samples = Matrix(n, d);
  for (double &v : ds.samples.data()) {
    v = r.f32();
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::kInconsistent, "sample outside [0,1]");
  }
  r.expect_end();
  return ds;
}

inline void save(const Dataset &ds, const std::filesystem::path &path) {
  write_file(path, encode_dataset(ds));
}

inline Dataset load_dataset(const std::filesystem::path &path) {
  return decode_dataset(read_file(path));
}

}  // namespace bindcal

#endif  // BINDCAL_SYNTHDATA_HPP_
