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

// Run configuration: one JSON file per run. Every key is optional except the
// modality list; unknown keys are rejected so typos cannot silently fall back
// to defaults. See configs/default.json for the full key list.

#ifndef BINDCAL_CONFIG_HPP_
#define BINDCAL_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "bindcal/attacks.hpp"
#include "bindcal/binio.hpp"
#include "bindcal/error.hpp"
#include "bindcal/eval.hpp"
#include "bindcal/model.hpp"
#include "bindcal/synthdata.hpp"
#include "bindcal/train.hpp"

namespace bindcal {

struct ModalityConfig {
  ModalitySpec spec;
  std::size_t encoder_hidden = 256;
};

struct VariantConfig {
  std::string name;
  LossTag loss = LossTag::kCe;
  bool lora = false;
  std::optional<double> lr;  // overrides stage2.lr for this variant
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::string output_dir = "run";
  std::vector<ModalityConfig> modalities;
  std::size_t train_per_class = 100;
  std::size_t eval_per_class = 20;
  std::size_t center_per_class = 20;
  std::size_t val_per_class = 10;  // taken from the center-estimation split

  std::size_t embed_dim = 64;
  std::size_t sensitive_rank_divisor = 8;  // rank = raw_dim / divisor (0 disables)
  double sensitive_gain = 5.0;
  double hidden_bias_scale = 0.1;

  SizeClass head_size = SizeClass::kMedium;
  LoraSettings lora;

  // Stage 1.
  std::size_t stage1_epochs = 100;
  std::size_t stage1_batch = 64;
  double stage1_lr = 1e-3;
  double distill_threshold = 1e-3;

  // Stage 2.
  TrainConfig stage2;
  std::vector<VariantConfig> variants;

  // Attacks.
  AttackConfig train_attack;
  double train_epsilon = 8.0 / 255.0;
  std::vector<double> eval_budgets = {2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0};
  std::vector<AttackConfig> eval_attacks;

  BoundsConfig bounds;

  EncoderShape encoder_shape(const ModalityConfig &m) const {
    EncoderShape s;
    s.hidden = m.encoder_hidden;
    s.out_dim = embed_dim;
    s.sensitive_rank = sensitive_rank_divisor ? m.spec.raw_dim / sensitive_rank_divisor : 0;
    s.sensitive_gain = sensitive_gain;
    s.hidden_bias_scale = hidden_bias_scale;
    return s;
  }

  TrainConfig stage1_config() const {
    TrainConfig c;
    c.stage = 1;
    c.loss = {LossTag::kDistill, stage2.loss.tau};
    c.size = head_size;
    c.optimizer = stage2.optimizer;
    c.optimizer.lr = stage1_lr;
    c.epochs_max = stage1_epochs;
    c.batch_size = stage1_batch;
    c.seed = derive_seed(seed, 0x51);
    c.distill_threshold = distill_threshold;
    return c;
  }

  TrainConfig stage2_config(const VariantConfig &v) const {
    TrainConfig c = stage2;
    c.stage = 2;
    c.loss.tag = v.loss;
    c.size = head_size;
    if (v.lora) c.lora = lora;
    if (v.lr) c.optimizer.lr = *v.lr;
    c.seed = derive_seed(seed, 0x52);
    return c;
  }

  const VariantConfig &variant(const std::string &name) const {
    for (const auto &v : variants)
      if (v.name == name) return v;
    throw Error(ErrorCode::kConfig, "unknown variant '" + name + "'");
  }
};

namespace detail {

using nlohmann::json;

// Reads keys from one JSON object and rejects any key left unread.
class ObjectReader {
 public:
  ObjectReader(const json &j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw Error(ErrorCode::kConfig, where_ + " must be an object");
  }
  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw Error(ErrorCode::kConfig, "unknown key '" + where_ + "." + it.key() + "'");
    }
  }

  bool has(const std::string &k) {
    seen_.insert(k);
    return j_.contains(k);
  }
  const json &at(const std::string &k) {
    seen_.insert(k);
    if (!j_.contains(k)) throw Error(ErrorCode::kConfig, "missing key '" + where_ + "." + k + "'");
    return j_.at(k);
  }
  std::string path(const std::string &k) const { return where_ + "." + k; }

  template <class T>
  void get(const std::string &k, T &out) {
    if (!has(k)) return;
    try {
      out = j_.at(k).get<T>();
    } catch (const nlohmann::json::exception &e) {
      throw Error(ErrorCode::kConfig, path(k) + ": " + e.what());
    }
  }

  void get_count(const std::string &k, std::size_t &out, std::size_t min) {
    if (!has(k)) return;
    const json &v = j_.at(k);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw Error(ErrorCode::kConfig, path(k) + " must be a non-negative integer");
    }
    out = v.get<std::size_t>();
    if (out < min) throw Error(ErrorCode::kConfig, path(k) + " must be >= " + std::to_string(min));
  }

  void get_real(const std::string &k, double &out, double lo, double hi) {
    if (!has(k)) return;
    const json &v = j_.at(k);
    if (!v.is_number()) throw Error(ErrorCode::kConfig, path(k) + " must be a number");
    out = v.get<double>();
    if (!(out >= lo && out <= hi)) {
      throw Error(ErrorCode::kConfig, path(k) + " = " + format_double(out) + " outside [" + format_double(lo) + ", " +
                                          format_double(hi) + "]");
    }
  }

 private:
  const json &j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline AttackConfig parse_attack(const json &j, const std::string &where, std::uint64_t seed) {
  ObjectReader r(j, where);
  AttackConfig c;
  std::string method = "apgd-ce";
  r.get("method", method);
  c.method = parse_attack_method(method);
  r.get_count("iterations", c.iterations, 0);
  r.get_count("restarts", c.restarts, 1);
  c.seed = seed;
  r.get("random_start", c.random_start);
  r.get("early_stop", c.early_stop);
  r.get_real("momentum", c.momentum, 0.0, 1.0);
  r.get_real("rho", c.rho, 1e-9, 1.0);
  r.get_real("p_init", c.p_init, 1e-9, 1.0);
  if (method == "square" && !r.has("iterations")) c.iterations = 250;
  return c;
}

inline double parse_budget(const json &v, const std::string &where) {
  if (!v.is_number()) throw Error(ErrorCode::kConfig, where + " must be a number (in units of 1/255)");
  const double e = v.get<double>();
  if (!(e >= 0.0 && e <= 255.0)) throw Error(ErrorCode::kConfig, where + " must be in [0, 255]");
  return e / 255.0;
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json &j) {
  using detail::ObjectReader;
  RunConfig c;
  ObjectReader top(j, "config");
  if (top.has("seed")) {
    const auto &s = j.at("seed");
    if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0)) {
      throw Error(ErrorCode::kConfig, "config.seed must be a non-negative integer");
    }
    c.seed = s.get<std::uint64_t>();
  }
  top.get("output_dir", c.output_dir);

  const auto &mods = top.at("modalities");
  if (!mods.is_array() || mods.empty()) throw Error(ErrorCode::kConfig, "config.modalities must be a non-empty list");
  std::set<std::string> names;
  for (std::size_t i = 0; i < mods.size(); ++i) {
    ObjectReader r(mods[i], "config.modalities[" + std::to_string(i) + "]");
    ModalityConfig m;
    r.get("name", m.spec.name);
    if (m.spec.name.empty() || m.spec.name.find_first_of(",/\\ ") != std::string::npos) {
      throw Error(ErrorCode::kConfig, r.path("name") + " must be non-empty without spaces, commas or slashes");
    }
    if (!names.insert(m.spec.name).second) throw Error(ErrorCode::kConfig, "duplicate modality " + m.spec.name);
    r.get_count("raw_dim", m.spec.raw_dim, 2);
    r.get_count("n_classes", m.spec.n_classes, 2);
    r.get_real("noise", m.spec.noise, 0.0, 1.0);
    r.get_real("mean_spread", m.spec.mean_spread, 1e-9, 0.25);
    r.get("class_seed", m.spec.class_seed);
    r.get("encoder_seed", m.spec.encoder_seed);
    r.get_count("encoder_hidden", m.encoder_hidden, 1);
    m.spec.validate();
    c.modalities.push_back(m);
  }

  if (top.has("data")) {
    ObjectReader r(j.at("data"), "config.data");
    r.get_count("train_per_class", c.train_per_class, 2);
    r.get_count("eval_per_class", c.eval_per_class, 2);
    r.get_count("center_per_class", c.center_per_class, 2);
    r.get_count("val_per_class", c.val_per_class, 1);
    if (c.val_per_class > c.center_per_class) {
      throw Error(ErrorCode::kConfig, "config.data.val_per_class exceeds center_per_class");
    }
  }
  if (top.has("encoder")) {
    ObjectReader r(j.at("encoder"), "config.encoder");
    r.get_count("embed_dim", c.embed_dim, 2);
    r.get_count("sensitive_rank_divisor", c.sensitive_rank_divisor, 0);
    r.get_real("sensitive_gain", c.sensitive_gain, 0.0, 1e3);
    r.get_real("hidden_bias_scale", c.hidden_bias_scale, 0.0, 1e3);
  }
  if (top.has("head")) {
    ObjectReader r(j.at("head"), "config.head");
    std::string size = "medium";
    r.get("size", size);
    c.head_size = parse_size_class(size);
  }
  if (top.has("lora")) {
    ObjectReader r(j.at("lora"), "config.lora");
    r.get_count("rank", c.lora.rank, 1);
    r.get_real("alpha", c.lora.alpha, 1e-12, 1e6);
    r.get("train_bias", c.lora.train_bias);
  }
  if (top.has("stage1")) {
    ObjectReader r(j.at("stage1"), "config.stage1");
    r.get_count("epochs", c.stage1_epochs, 0);
    r.get_count("batch_size", c.stage1_batch, 1);
    r.get_real("lr", c.stage1_lr, 0.0, 10.0);
    r.get_real("threshold", c.distill_threshold, 0.0, 1e6);
  }

  TrainConfig &s2 = c.stage2;
  s2.stage = 2;
  s2.val_attack.iterations = 10;
  s2.val_attack.seed = derive_seed(c.seed, 0xA2);
  if (top.has("stage2")) {
    ObjectReader r(j.at("stage2"), "config.stage2");
    r.get_count("epochs_max", s2.epochs_max, 1);
    r.get_count("patience", s2.patience, 0);
    r.get_count("batch_size", s2.batch_size, 1);
    r.get_real("lr", s2.optimizer.lr, 0.0, 10.0);
    r.get_real("beta1", s2.optimizer.beta1, 0.0, 1.0 - 1e-12);
    r.get_real("beta2", s2.optimizer.beta2, 0.0, 1.0 - 1e-12);
    r.get_real("weight_decay", s2.optimizer.weight_decay, 0.0, 1e3);
    r.get_real("w_clean", s2.w_clean, 0.0, 1.0);
    r.get_real("w_adv", s2.w_adv, 0.0, 1.0);
    r.get_real("tau", s2.loss.tau, 1e-12, 1e6);
    if (r.has("val_epsilon_255")) s2.val_epsilon = detail::parse_budget(j.at("stage2").at("val_epsilon_255"), r.path("val_epsilon_255"));
    if (r.has("val_attack")) s2.val_attack = detail::parse_attack(j.at("stage2").at("val_attack"), r.path("val_attack"), derive_seed(c.seed, 0xA2));
    if (std::abs(s2.w_clean + s2.w_adv - 1.0) > 1e-12) {
      throw Error(ErrorCode::kConfig, "config.stage2 early-stop weights must sum to 1");
    }
  }
  c.stage1_config().validate();

  if (top.has("variants")) {
    const auto &vs = j.at("variants");
    if (!vs.is_array()) throw Error(ErrorCode::kConfig, "config.variants must be a list");
    std::set<std::string> vn;
    for (std::size_t i = 0; i < vs.size(); ++i) {
      ObjectReader r(vs[i], "config.variants[" + std::to_string(i) + "]");
      VariantConfig v;
      std::string loss = "ce";
      r.get("name", v.name);
      r.get("loss", loss);
      r.get("lora", v.lora);
      if (r.has("lr")) {
        double lr = 0.0;
        r.get_real("lr", lr, 1e-12, 10.0);
        v.lr = lr;
      }
      v.loss = parse_loss_tag(loss);
      if (v.loss == LossTag::kDistill) throw Error(ErrorCode::kConfig, r.path("loss") + ": distill is a Stage-1 loss");
      if (v.name.empty() || v.name == "undefended" || v.name == "stage1" ||
          v.name.find_first_of(",/\\ ") != std::string::npos) {
        throw Error(ErrorCode::kConfig, r.path("name") + " is empty, reserved or has spaces, commas or slashes");
      }
      if (!vn.insert(v.name).second) throw Error(ErrorCode::kConfig, "duplicate variant " + v.name);
      c.variants.push_back(v);
    }
  } else {
    const std::pair<const char *, LossTag> grid[] = {{"l2", LossTag::kL2Align}, {"ce", LossTag::kCe}, {"infonce", LossTag::kInfoNce}};
    for (bool lora : {false, true})
      for (const auto &[name, loss] : grid) {
        VariantConfig v;
        v.name = std::string(name) + (lora ? "-lora" : "");
        v.loss = loss;
        v.lora = lora;
        c.variants.push_back(v);
      }
  }

  c.train_attack.early_stop = false;
  c.train_attack.seed = derive_seed(c.seed, 0xA1);
  c.eval_attacks.resize(3);
  c.eval_attacks[0].method = AttackMethod::kApgdCe;
  c.eval_attacks[1].method = AttackMethod::kApgdDlr;
  c.eval_attacks[2].method = AttackMethod::kSquare;
  c.eval_attacks[2].iterations = 250;
  if (top.has("attacks")) {
    const auto &ja = j.at("attacks");
    ObjectReader r(ja, "config.attacks");
    if (r.has("train")) {
      c.train_attack = detail::parse_attack(ja.at("train"), r.path("train"), derive_seed(c.seed, 0xA1));
      if (!ja.at("train").contains("early_stop")) c.train_attack.early_stop = false;
    }
    if (r.has("train_epsilon_255")) c.train_epsilon = detail::parse_budget(ja.at("train_epsilon_255"), r.path("train_epsilon_255"));
    if (r.has("eval_budgets_255")) {
      const auto &b = ja.at("eval_budgets_255");
      if (!b.is_array() || b.empty()) throw Error(ErrorCode::kConfig, r.path("eval_budgets_255") + " must be a non-empty list");
      c.eval_budgets.clear();
      for (std::size_t i = 0; i < b.size(); ++i) {
        c.eval_budgets.push_back(detail::parse_budget(b[i], r.path("eval_budgets_255")));
        if (i > 0 && c.eval_budgets[i] <= c.eval_budgets[i - 1]) {
          throw Error(ErrorCode::kConfig, r.path("eval_budgets_255") + " must be strictly increasing");
        }
      }
    }
    if (r.has("eval")) {
      const auto &e = ja.at("eval");
      if (!e.is_array() || e.empty()) throw Error(ErrorCode::kConfig, r.path("eval") + " must be a non-empty list");
      c.eval_attacks.clear();
      for (std::size_t i = 0; i < e.size(); ++i) {
        c.eval_attacks.push_back(detail::parse_attack(e[i], r.path("eval") + "[" + std::to_string(i) + "]", 0));
      }
    }
  }
  for (std::size_t i = 0; i < c.eval_attacks.size(); ++i) c.eval_attacks[i].seed = derive_seed(c.seed, 0xE0 + i);
  for (const auto &m : c.modalities) {
    for (const auto &a : c.eval_attacks) {
      if (a.method == AttackMethod::kApgdDlr && m.spec.n_classes < 3) {
        throw Error(ErrorCode::kConfig, m.spec.name + ": DLR requires >= 3 classes");
      }
    }
  }

  if (top.has("bounds")) {
    ObjectReader r(j.at("bounds"), "config.bounds");
    r.get_count("sublemma_trials", c.bounds.sublemma_trials, 1);
    r.get_count("lora_trials", c.bounds.lora_trials, 1);
    r.get_count("scaling_trials", c.bounds.scaling_trials, 1);
  }
  c.bounds.tau = s2.loss.tau;
  c.bounds.seed = derive_seed(c.seed, 0xB0);
  return c;
}

inline nlohmann::json load_config_json(const std::filesystem::path &path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::kConfig, "config file not found: " + path.string());
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error &e) {
    throw Error(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
}

// Hash of the configuration with the output directory removed, so identical
// settings written to different directories share one hash.
inline std::string config_hash(nlohmann::json j) {
  j.erase("output_dir");
  return to_hex(sha256(j.dump()));
}

}  // namespace bindcal

#endif  // BINDCAL_CONFIG_HPP_
