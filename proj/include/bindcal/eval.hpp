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

// Classification metrics, bound checks, and CSV/SVG report emission.
//
// Eval CSV schema: modality,setting,metric,value. Settings are clean, aa2,
// aa4, aa8 (and "bounds" for the triangle ledger of that modality). P/R/F1
// are macro averages over classes. Values use the shortest representation
// that round-trips.

#ifndef BINDCAL_EVAL_HPP_
#define BINDCAL_EVAL_HPP_

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bindcal/error.hpp"
#include "bindcal/model.hpp"
#include "bindcal/numkernel.hpp"
#include "bindcal/train.hpp"

namespace bindcal {

struct ClassMetrics {
  double accuracy = 0.0;   // all in percent
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  bool operator==(const ClassMetrics &) const = default;
};

// Per-class precision and recall use 0 for an empty denominator; F1 is taken
// per class before the macro average.
inline ClassMetrics classification_metrics(std::span<const std::size_t> preds, std::span<const std::uint32_t> labels,
                                           std::size_t K) {
  if (preds.size() != labels.size()) throw Error(ErrorCode::kDimensionMismatch, "preds vs labels");
  if (K == 0) throw Error(ErrorCode::kInvalidArgument, "K must be >= 1");
  std::vector<std::size_t> tp(K, 0), predicted(K, 0), actual(K, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= K || labels[i] >= K) throw Error(ErrorCode::kInvalidArgument, "class index out of range");
    ++predicted[preds[i]];
    ++actual[labels[i]];
    if (preds[i] == labels[i]) {
      ++tp[labels[i]];
      ++correct;
    }
  }
  ClassMetrics m;
  if (preds.empty()) return m;
  m.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(preds.size());
  for (std::size_t k = 0; k < K; ++k) {
    const double p = predicted[k] ? static_cast<double>(tp[k]) / static_cast<double>(predicted[k]) : 0.0;
    const double r = actual[k] ? static_cast<double>(tp[k]) / static_cast<double>(actual[k]) : 0.0;
    m.precision += p;
    m.recall += r;
    m.f1 += p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  const double scale = 100.0 / static_cast<double>(K);
  m.precision *= scale;
  m.recall *= scale;
  m.f1 *= scale;
  return m;
}

// Mean cosine (in percent) between each embedding and its class center.
inline double cosine_to_center(const Matrix &embeddings, std::span<const std::uint32_t> labels,
                               const SemanticCenters &centers) {
  if (embeddings.rows() != labels.size()) throw Error(ErrorCode::kDimensionMismatch, "embeddings vs labels");
  if (labels.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= centers.num_classes()) throw Error(ErrorCode::kInvalidArgument, "label out of range");
    s += cosine(embeddings.row(i), centers.centers().row(labels[i]));
  }
  return 100.0 * s / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------

inline const char *setting_name(double epsilon) {
  if (epsilon == 0.0) return "clean";
  if (epsilon == 2.0 / 255.0) return "aa2";
  if (epsilon == 4.0 / 255.0) return "aa4";
  if (epsilon == 8.0 / 255.0) return "aa8";
  return "custom";
}

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string &s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::kInconsistent, "bad number '" + s + "'");
  }
  return v;
}

struct ReportRow {
  std::string modality;
  std::string setting;
  std::string metric;
  double value = 0.0;

  bool operator==(const ReportRow &o) const {
    return modality == o.modality && setting == o.setting && metric == o.metric &&
           format_double(value) == format_double(o.value);
  }
};

struct EvalReport {
  std::vector<ReportRow> rows;

  void add(const std::string &modality, const std::string &setting, const ClassMetrics &m, double cos_center) {
    rows.push_back({modality, setting, "accuracy", m.accuracy});
    rows.push_back({modality, setting, "precision", m.precision});
    rows.push_back({modality, setting, "recall", m.recall});
    rows.push_back({modality, setting, "f1", m.f1});
    rows.push_back({modality, setting, "cos_center", cos_center});
  }

  void add_triangle(const std::string &modality, const TriangleLedger &t) {
    rows.push_back({modality, "bounds", "triangle_trials", static_cast<double>(t.trials)});
    rows.push_back({modality, "bounds", "triangle_violations", static_cast<double>(t.violations)});
    rows.push_back({modality, "bounds", "triangle_min_slack", t.trials ? t.min_slack : 0.0});
  }

  // Value lookup; throws when absent.
  double get(const std::string &modality, const std::string &setting, const std::string &metric) const {
    for (const auto &r : rows)
      if (r.modality == modality && r.setting == setting && r.metric == metric) return r.value;
    throw Error(ErrorCode::kMissingArtifact, "no " + metric + " for " + modality + "/" + setting);
  }

  bool operator==(const EvalReport &) const = default;
};

inline std::string report_csv(const EvalReport &r) {
  std::string out = "modality,setting,metric,value\n";
  for (const auto &row : r.rows) {
    out += row.modality + ',' + row.setting + ',' + row.metric + ',' + format_double(row.value) + '\n';
  }
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string &line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline EvalReport parse_report_csv(const std::string &text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "modality,setting,metric,value") {
    throw Error(ErrorCode::kInconsistent, "missing eval CSV header");
  }
  EvalReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw Error(ErrorCode::kInconsistent, "eval CSV row needs 4 fields: " + line);
    r.rows.push_back({f[0], f[1], f[2], parse_double(f[3])});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Bound checks.

struct BoundsReport {
  std::size_t sublemma_trials = 0;
  std::size_t sublemma_violations = 0;
  double sublemma_max_ratio = 0.0;  // lhs / rhs, <= 1 when the bound holds
  std::size_t triangle_trials = 0;
  std::size_t triangle_violations = 0;
  double triangle_min_slack = 0.0;
  std::size_t lora_trials = 0;
  std::size_t lora_violations = 0;
  double lora_max_ratio = 0.0;
  // InfoNCE difference vs perturbation scale t on a log-log grid.
  double scaling_slope = 0.0;
  double scaling_correlation = 0.0;
  double scaling_k = 0.0;  // max over t of diff / t
  double scaling_zero_diff = 0.0;  // difference at t = 0

  bool all_hold() const {
    return sublemma_violations == 0 && triangle_violations == 0 && lora_violations == 0 && scaling_slope <= 1.05 &&
           scaling_zero_diff == 0.0;
  }
};

// |cos(v, psi) - cos(u, psi)| <= 2 |v - u| / |u|. Returns lhs and rhs.
inline std::pair<double, double> cosine_sublemma(std::span<const double> u, std::span<const double> v,
                                                 std::span<const double> psi) {
  double d = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) d += (v[i] - u[i]) * (v[i] - u[i]);
  const double lhs = std::abs(cosine(v, psi) - cosine(u, psi));
  const double rhs = 2.0 * std::sqrt(d) / norm2(u);
  return {lhs, rhs};
}

// Paired InfoNCE of rows phi_i against psi_i with the other psi_j as
// negatives: -1/N sum_i log(e^{cos(phi_i,psi_i)/tau} / sum_j e^{cos(phi_i,psi_j)/tau}).
inline double paired_infonce(const Matrix &phi, const Matrix &psi, double tau) {
  if (phi.rows() != psi.rows() || phi.cols() != psi.cols()) throw Error(ErrorCode::kDimensionMismatch, "phi vs psi");
  const std::size_t n = phi.rows();
  double total = 0.0;
  Vector s(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) s[j] = cosine(phi.row(i), psi.row(j)) / tau;
    total += log_sum_exp(s) - s[i];
  }
  return total / static_cast<double>(n);
}

struct BoundsConfig {
  std::size_t sublemma_trials = 100000;
  std::size_t lora_trials = 10000;
  std::size_t scaling_trials = 8;  // independent (phi, Delta) draws
  double tau = 0.07;
  std::uint64_t seed = 0;
};

namespace detail {

inline double ols_slope(const Vector &x, const Vector &y, double *corr) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (corr != nullptr) *corr = sxx > 0.0 && syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
  return sxx > 0.0 ? sxy / sxx : 0.0;
}

}  // namespace detail

// Fuzzes the cosine sub-lemma and the adapter norm bound, runs the InfoNCE
// scaling check, and folds in a triangle ledger collected from real Stage-2
// states. `phi`/`psi` (optional, same shape) seed the scaling check with real
// embeddings; otherwise Gaussian rows are used.
inline BoundsReport verify_bounds(const BoundsConfig &cfg, const TriangleLedger &triangle,
                                  const Matrix *phi = nullptr, const Matrix *psi = nullptr) {
  if (cfg.sublemma_trials < 1 || cfg.lora_trials < 1 || cfg.scaling_trials < 1) {
    throw Error(ErrorCode::kInvalidArgument, "trials must be >= 1");
  }
  BoundsReport b;
  Rng rng(derive_seed(cfg.seed, 0xB0));
  for (std::size_t t = 0; t < cfg.sublemma_trials; ++t) {
    const std::size_t d = 2 + rng.below(63);
    Vector u(d), v(d), psi_v(d);
    const double su = std::exp(rng.uniform(-5.0, 5.0));
    const double sd = std::exp(rng.uniform(-12.0, 3.0));
    for (std::size_t i = 0; i < d; ++i) {
      u[i] = su * rng.normal();
      psi_v[i] = rng.normal();
      v[i] = u[i] + su * sd * rng.normal();
    }
    if (!(norm2(u) > 0.0) || !(norm2(v) > 0.0)) continue;
    const auto [lhs, rhs] = cosine_sublemma(u, v, psi_v);
    ++b.sublemma_trials;
    if (lhs > rhs + 1e-9) ++b.sublemma_violations;
    if (rhs > 0.0) b.sublemma_max_ratio = std::max(b.sublemma_max_ratio, lhs / rhs);
  }

  b.triangle_trials = triangle.trials;
  b.triangle_violations = triangle.violations;
  b.triangle_min_slack = triangle.trials ? triangle.min_slack : 0.0;

  for (std::size_t t = 0; t < cfg.lora_trials; ++t) {
    const std::size_t dout = 1 + rng.below(32), din = 1 + rng.below(32);
    const std::size_t r = 1 + rng.below(std::min(dout, din));
    const double alpha = rng.uniform(0.0, 4.0);
    const double scale = std::exp(rng.uniform(-4.0, 2.0));
    Matrix a = gaussian_matrix(dout, r, scale, rng);
    if (t % 10 == 0) a.fill(0.0);  // exact-zero update case
    const Matrix bm = gaussian_matrix(r, din, scale, rng);
    const Matrix ab = matmul(a, bm);
    const double lhs = alpha * frobenius(ab);
    const double rhs = alpha * frobenius(a) * frobenius(bm);
    ++b.lora_trials;
    if (lhs > rhs + 1e-9) ++b.lora_violations;
    if (rhs > 0.0) b.lora_max_ratio = std::max(b.lora_max_ratio, lhs / rhs);
  }

  // Scaling: |L(phi + t Delta) - L(phi)| against t on a log grid.
  Vector lx, ly;
  for (std::size_t s = 0; s < cfg.scaling_trials; ++s) {
    Matrix p0, q0;
    if (phi != nullptr && psi != nullptr) {
      p0 = *phi;
      q0 = *psi;
    } else {
      p0 = gaussian_matrix(16, 8, 1.0, rng);
      q0 = gaussian_matrix(16, 8, 1.0, rng);
    }
    // Each direction row has the norm of its phi row, so t is a relative size.
    Matrix delta = gaussian_matrix(p0.rows(), p0.cols(), 1.0, rng);
    for (std::size_t i = 0; i < delta.rows(); ++i) {
      const double s = norm2(p0.row(i)) / norm2(delta.row(i));
      for (double &v : delta.row(i)) v *= s;
    }
    const double base = paired_infonce(p0, q0, cfg.tau);
    b.scaling_zero_diff = std::max(b.scaling_zero_diff, std::abs(paired_infonce(p0, q0, cfg.tau) - base));
    for (int e = 0; e <= 10; ++e) {
      const double t = std::pow(10.0, -1.0 - 0.5 * e);
      Matrix p = p0;
      for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] += t * delta.data()[i];
      const double diff = std::abs(paired_infonce(p, q0, cfg.tau) - base);
      if (!(diff > 0.0)) continue;
      lx.push_back(std::log(t));
      ly.push_back(std::log(diff));
      b.scaling_k = std::max(b.scaling_k, diff / t);
    }
  }
  b.scaling_slope = detail::ols_slope(lx, ly, &b.scaling_correlation);
  return b;
}

inline std::string bounds_csv(const BoundsReport &b) {
  std::string out = "check,metric,value\n";
  auto row = [&](const char *c, const char *m, double v) { out += std::string(c) + ',' + m + ',' + format_double(v) + '\n'; };
  row("sublemma", "trials", static_cast<double>(b.sublemma_trials));
  row("sublemma", "violations", static_cast<double>(b.sublemma_violations));
  row("sublemma", "max_ratio", b.sublemma_max_ratio);
  row("triangle", "trials", static_cast<double>(b.triangle_trials));
  row("triangle", "violations", static_cast<double>(b.triangle_violations));
  row("triangle", "min_slack", b.triangle_min_slack);
  row("lora", "trials", static_cast<double>(b.lora_trials));
  row("lora", "violations", static_cast<double>(b.lora_violations));
  row("lora", "max_ratio", b.lora_max_ratio);
  row("scaling", "slope", b.scaling_slope);
  row("scaling", "correlation", b.scaling_correlation);
  row("scaling", "k", b.scaling_k);
  row("scaling", "zero_diff", b.scaling_zero_diff);
  return out;
}

// ---------------------------------------------------------------------------
// SVG output. Self-contained; no external assets.

namespace detail {

inline std::string svg_num(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << v;
  return os.str();
}

inline const char *palette(std::size_t k) {
  static const char *kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return kColors[k % 10];
}

}  // namespace detail

struct RadarSeries {
  std::string name;
  std::string color;
  std::vector<double> values;  // percent, one per axis
};

// One axis per modality; each series is a polygon with one vertex per axis.
inline std::string radar_svg(const std::vector<std::string> &axes, const std::vector<RadarSeries> &series,
                             const std::string &title) {
  const double cx = 250, cy = 250, radius = 180;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"540\" viewBox=\"0 0 500 540\">\n";
  os << "<text x=\"250\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" << title
     << "</text>\n";
  const std::size_t n = axes.size();
  auto point = [&](std::size_t i, double frac) {
    const double a = -std::numbers::pi / 2 + 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(n, 1));
    return std::pair{cx + radius * frac * std::cos(a), cy + 20 + radius * frac * std::sin(a)};
  };
  for (int ring = 1; ring <= 4; ++ring) {
    os << "<circle cx=\"" << cx << "\" cy=\"" << cy + 20 << "\" r=\"" << radius * ring / 4
       << "\" fill=\"none\" stroke=\"#ddd\"/>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto [x, y] = point(i, 1.0);
    const auto [lx, ly] = point(i, 1.12);
    os << "<line class=\"axis\" x1=\"" << cx << "\" y1=\"" << cy + 20 << "\" x2=\"" << detail::svg_num(x) << "\" y2=\""
       << detail::svg_num(y) << "\" stroke=\"#999\"/>\n";
    os << "<text x=\"" << detail::svg_num(lx) << "\" y=\"" << detail::svg_num(ly)
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << axes[i] << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto &sr = series[s];
    if (sr.values.size() != n) throw Error(ErrorCode::kDimensionMismatch, "radar series vs axes");
    os << "<polygon class=\"series\" data-name=\"" << sr.name << "\" points=\"";
    for (std::size_t i = 0; i < n; ++i) {
      const auto [x, y] = point(i, std::clamp(sr.values[i], 0.0, 100.0) / 100.0);
      os << (i ? " " : "") << detail::svg_num(x) << ',' << detail::svg_num(y);
    }
    os << "\" fill=\"" << sr.color << "\" fill-opacity=\"0.3\" stroke=\"" << sr.color << "\"/>\n";
    os << "<text x=\"20\" y=\"" << 500 + 16 * s << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
       << sr.color << "\">" << sr.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// PCA (not t-SNE) scatter of clean and adversarial embeddings, with class
// centers drawn as diamonds.
inline std::string pca_scatter_svg(const Matrix &clean, const Matrix &adv, std::span<const std::uint32_t> labels,
                                   const Matrix &centers, const std::string &title) {
  if (clean.rows() != labels.size() || adv.rows() != labels.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "scatter rows vs labels");
  }
  const std::size_t n = clean.rows(), k = centers.rows();
  Matrix all(2 * n + k, clean.cols());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(clean.row(i).begin(), clean.row(i).end(), all.row(i).begin());
    std::copy(adv.row(i).begin(), adv.row(i).end(), all.row(n + i).begin());
  }
  for (std::size_t c = 0; c < k; ++c) std::copy(centers.row(c).begin(), centers.row(c).end(), all.row(2 * n + c).begin());
  const Matrix p = pca2(all);
  double lo0 = p(0, 0), hi0 = p(0, 0), lo1 = p(0, 1), hi1 = p(0, 1);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    lo0 = std::min(lo0, p(i, 0));
    hi0 = std::max(hi0, p(i, 0));
    lo1 = std::min(lo1, p(i, 1));
    hi1 = std::max(hi1, p(i, 1));
  }
  auto sx = [&](double v) { return 40 + 420 * (hi0 > lo0 ? (v - lo0) / (hi0 - lo0) : 0.5); };
  auto sy = [&](double v) { return 480 - 420 * (hi1 > lo1 ? (v - lo1) / (hi1 - lo1) : 0.5); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"520\" viewBox=\"0 0 500 520\">\n";
  os << "<text x=\"250\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" << title
     << " (PCA projection)</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    os << "<circle class=\"clean\" cx=\"" << detail::svg_num(sx(p(i, 0))) << "\" cy=\"" << detail::svg_num(sy(p(i, 1)))
       << "\" r=\"3\" fill=\"" << detail::palette(labels[i]) << "\"/>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double x = sx(p(n + i, 0)), y = sy(p(n + i, 1));
    os << "<path class=\"adv\" d=\"M" << detail::svg_num(x - 3) << ' ' << detail::svg_num(y - 3) << "L"
       << detail::svg_num(x + 3) << ' ' << detail::svg_num(y + 3) << "M" << detail::svg_num(x - 3) << ' '
       << detail::svg_num(y + 3) << "L" << detail::svg_num(x + 3) << ' ' << detail::svg_num(y - 3)
       << "\" stroke=\"" << detail::palette(labels[i]) << "\" fill=\"none\"/>\n";
  }
  for (std::size_t c = 0; c < k; ++c) {
    const double x = sx(p(2 * n + c, 0)), y = sy(p(2 * n + c, 1));
    os << "<path class=\"center\" d=\"M" << detail::svg_num(x) << ' ' << detail::svg_num(y - 8) << "L"
       << detail::svg_num(x + 8) << ' ' << detail::svg_num(y) << "L" << detail::svg_num(x) << ' '
       << detail::svg_num(y + 8) << "L" << detail::svg_num(x - 8) << ' ' << detail::svg_num(y) << "Z\" fill=\""
       << detail::palette(c) << "\" stroke=\"black\"/>\n";
  }
  os << "<text x=\"20\" y=\"505\" font-family=\"sans-serif\" font-size=\"12\">dots: clean, crosses: adversarial, "
        "diamonds: class centers</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace bindcal

#endif  // BINDCAL_EVAL_HPP_
