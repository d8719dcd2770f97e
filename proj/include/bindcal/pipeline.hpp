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

// Pipeline phases behind the command-line tool. Run directory layout:
//
//   data/<modality>/{train,eval,centers}.bcd
//   ckpt/<modality>/stage1.bcm, ckpt/<modality>/<variant>.bcm
//   pairs/<modality>/train.bcp
//   logs/<modality>/{stage1,<variant>}.csv, logs/<modality>/<variant>.triangle.json
//   eval/<modality>/{undefended,<variant>}.csv, eval/<modality>/<variant>.scatter.svg
//   bounds/bounds.csv
//   report/{report.csv,grid.csv,checks.csv,radar.svg}
//
// Every artifact has a <file>.meta.json sidecar holding the config hash,
// version string, seed, producing phase and the SHA-256 of its inputs. Each
// phase checks its inputs' sidecars against the current config hash.

#ifndef BINDCAL_PIPELINE_HPP_
#define BINDCAL_PIPELINE_HPP_

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bindcal/attacks.hpp"
#include "bindcal/config.hpp"
#include "bindcal/eval.hpp"
#include "bindcal/model.hpp"
#include "bindcal/synthdata.hpp"
#include "bindcal/train.hpp"

#ifndef BINDCAL_VERSION
#define BINDCAL_VERSION "v0.1.0"
#endif

namespace bindcal {

namespace fs = std::filesystem;

using Logger = std::function<void(const std::string &)>;

class Pipeline {
 public:
  Pipeline(RunConfig cfg, std::string cfg_hash, fs::path root, Logger log = nullptr)
      : cfg_(std::move(cfg)), hash_(std::move(cfg_hash)), root_(std::move(root)), log_(std::move(log)) {}

  const RunConfig &config() const { return cfg_; }
  const fs::path &root() const { return root_; }

  // ---- paths
  fs::path data_path(const std::string &m, Split s) const { return root_ / "data" / m / (std::string(split_name(s)) + ".bcd"); }
  fs::path stage1_path(const std::string &m) const { return root_ / "ckpt" / m / "stage1.bcm"; }
  fs::path variant_path(const std::string &m, const std::string &v) const { return root_ / "ckpt" / m / (v + ".bcm"); }
  fs::path pairs_path(const std::string &m) const { return root_ / "pairs" / m / "train.bcp"; }
  fs::path log_path(const std::string &m, const std::string &v) const { return root_ / "logs" / m / (v + ".csv"); }
  fs::path triangle_path(const std::string &m, const std::string &v) const { return root_ / "logs" / m / (v + ".triangle.json"); }
  fs::path eval_path(const std::string &m, const std::string &v) const { return root_ / "eval" / m / (v + ".csv"); }
  fs::path scatter_path(const std::string &m, const std::string &v) const { return root_ / "eval" / m / (v + ".scatter.svg"); }
  fs::path bounds_path() const { return root_ / "bounds" / "bounds.csv"; }
  fs::path report_dir() const { return root_ / "report"; }

  // ---- phases

  void gen_data() {
    for (const auto &m : cfg_.modalities) {
      const std::string &name = m.spec.name;
      const std::pair<Split, std::size_t> splits[] = {
          {Split::kTrain, cfg_.train_per_class}, {Split::kEval, cfg_.eval_per_class}, {Split::kCenters, cfg_.center_per_class}};
      for (const auto &[split, per_class] : splits) {
        const Dataset ds = generate(m.spec, per_class, data_seed(m), split);
        put(data_path(name, split), encode_dataset(ds), "gen-data", {});
      }
      say("gen-data " + name + ": " + std::to_string(cfg_.train_per_class * m.spec.n_classes) + " train, " +
          std::to_string(cfg_.eval_per_class * m.spec.n_classes) + " eval, " +
          std::to_string(cfg_.center_per_class * m.spec.n_classes) + " center-estimation samples");
    }
  }

  void distill() {
    for (const auto &m : cfg_.modalities) {
      const std::string &name = m.spec.name;
      const Dataset train = load_ds(name, Split::kTrain);
      const Dataset centers_ds = load_ds(name, Split::kCenters);
      const FrozenEncoder enc = build_encoder(m.spec, cfg_.encoder_shape(m));
      const SemanticCenters centers = estimate_centers(enc, centers_ds);
      const Stage1Result s1 = stage1_distill(enc, train, cfg_.stage1_config());
      const ModelCheckpoint ck{enc, centers, s1.head};
      put(stage1_path(name), encode_checkpoint(ck), "distill", {data_path(name, Split::kTrain), data_path(name, Split::kCenters)},
          {{"per_dim_error", s1.per_dim_error}, {"converged", s1.converged},
           {"trainable_fraction_lora", lora_fraction(ck)}});
      put_text(log_path(name, "stage1"), training_log_csv(s1.log), "distill", {stage1_path(name)});
      say("distill " + name + ": per-dim error " + format_double(s1.per_dim_error) +
          (s1.converged ? " (converged)" : " (WARNING: above threshold " + format_double(cfg_.distill_threshold) + ")"));
    }
  }

  void attack() {
    for (const auto &m : cfg_.modalities) {
      const std::string &name = m.spec.name;
      const ModelCheckpoint ck = load_stage1(name);
      const Dataset train = load_ds(name, Split::kTrain);
      CosineClassifier model(ck.encoder, &*ck.head, ck.centers);
      const AttackBudget b{cfg_.train_epsilon};
      const auto pairs = run_attack(model, train.samples, train.labels, b, cfg_.train_attack);
      const PairCache pc = make_pair_cache(train, pairs, cfg_.train_attack, b, checkpoint_hash(ck));
      std::size_t ok = 0;
      for (const auto &p : pairs) ok += p.success;
      put(pairs_path(name), encode_pairs(pc), "attack", {stage1_path(name), data_path(name, Split::kTrain)},
          {{"method", attack_method_name(cfg_.train_attack.method)},
           {"epsilon", b.epsilon},
           {"iterations", cfg_.train_attack.iterations},
           {"success_rate", 100.0 * static_cast<double>(ok) / static_cast<double>(pairs.size())}});
      say("attack " + name + ": " + std::to_string(ok) + "/" + std::to_string(pairs.size()) + " training pairs adversarial");
    }
  }

  // Trains every configured variant, or only `only` when given.
  void finetune(const std::optional<std::string> &only = std::nullopt) {
    for (const auto &m : cfg_.modalities) {
      const std::string &name = m.spec.name;
      const ModelCheckpoint ck = load_stage1(name);
      const Digest h = checkpoint_hash(ck);
      check_meta(pairs_path(name), "attack");
      const PairCache pc = load_pairs(pairs_path(name), h);
      const Dataset val = validation_split(load_ds(name, Split::kCenters));
      for (const auto &v : cfg_.variants) {
        if (only && v.name != *only) continue;
        const Stage2Result r = stage2_finetune(ck.encoder, *ck.head, ck.centers, pc, val, cfg_.stage2_config(v));
        const ModelCheckpoint out{ck.encoder, ck.centers, r.head};
        put(variant_path(name, v.name), encode_checkpoint(out), "finetune", {stage1_path(name), pairs_path(name)},
            {{"variant", v.name},
             {"loss", loss_tag_name(v.loss)},
             {"lora", v.lora},
             {"best_epoch", r.best_epoch},
             {"trainable_fraction", trainable_fraction(out.encoder, out.centers, r.head)}});
        put_text(log_path(name, v.name), training_log_csv(r.log), "finetune", {variant_path(name, v.name)});
        const nlohmann::json tri = {{"trials", r.triangle.trials},
                                    {"violations", r.triangle.violations},
                                    {"min_slack", r.triangle.trials ? r.triangle.min_slack : 0.0}};
        put_text(triangle_path(name, v.name), tri.dump(2) + "\n", "finetune", {variant_path(name, v.name)});
        const auto &best = r.log[r.best_epoch - 1];
        say("finetune " + name + "/" + v.name + ": best epoch " + std::to_string(r.best_epoch) + " clean " +
            format_double(best.clean_acc) + " adv " + format_double(best.adv_acc));
      }
    }
  }

  // Evaluates the undefended classifier and every trained variant.
  void eval(const std::optional<std::string> &only = std::nullopt) {
    for (const auto &m : cfg_.modalities) {
      const std::string &name = m.spec.name;
      const ModelCheckpoint s1 = load_stage1(name);
      const Dataset ev = load_ds(name, Split::kEval);
      if (!only || *only == "undefended") {
        const EvalReport r = evaluate_model(name, s1.encoder, nullptr, nullptr, s1.centers, ev, nullptr);
        put_text(eval_path(name, "undefended"), report_csv(r), "eval", {stage1_path(name), data_path(name, Split::kEval)});
        say("eval " + name + "/undefended: " + summary(r, name));
      }
      for (const auto &v : cfg_.variants) {
        if (only && v.name != *only) continue;
        const fs::path p = variant_path(name, v.name);
        require(p, "stage-2 checkpoint (" + name + "/" + v.name + ")", "finetune");
        check_meta(p, "finetune");
        const ModelCheckpoint ck = decode_checkpoint(read_file(p));
        if (frozen_hash(ck) != frozen_hash(s1)) {
          throw Error(ErrorCode::kHashMismatch, p.string() + " does not share the Stage-1 encoder and centers");
        }
        Matrix scatter_clean, scatter_adv;
        const EvalReport r = evaluate_model(name, ck.encoder, &*ck.head, &*s1.head, ck.centers, ev, &scatter_adv);
        put_text(eval_path(name, v.name), report_csv(r), "eval", {p, data_path(name, Split::kEval)});
        CosineClassifier model(ck.encoder, &*ck.head, ck.centers);
        put_text(scatter_path(name, v.name),
                 pca_scatter_svg(model.embeddings(ev.samples), model.embeddings(scatter_adv), ev.labels,
                                 ck.centers.centers(), name + " / " + v.name + " at " + setting_name(cfg_.eval_budgets.back())),
                 "eval", {p, data_path(name, Split::kEval)});
        say("eval " + name + "/" + v.name + ": " + summary(r, name));
      }
    }
  }

  BoundsReport verify() {
    TriangleLedger tri;
    std::size_t runs = 0;
    std::vector<fs::path> eval_inputs;
    Matrix phi, psi;
    for (const auto &m : cfg_.modalities) {
      const std::string &name = m.spec.name;
      for (const auto &v : cfg_.variants) {
        const fs::path p = triangle_path(name, v.name);
        require(p, "stage-2 triangle ledger (" + name + "/" + v.name + ")", "finetune");
        check_meta(p, "finetune");
        const auto j = nlohmann::json::parse(read_text(p));
        TriangleLedger t;
        t.trials = j.at("trials").get<std::size_t>();
        t.violations = j.at("violations").get<std::size_t>();
        t.min_slack = j.at("min_slack").get<double>();
        tri.merge(t);
        ++runs;
        // Adversarial eval batches of the same head, when evaluated.
        const fs::path ep = eval_path(name, v.name);
        if (fs::exists(ep)) {
          check_meta(ep, "eval");
          const EvalReport r = parse_report_csv(read_text(ep));
          TriangleLedger e;
          e.trials = static_cast<std::size_t>(r.get(name, "bounds", "triangle_trials"));
          e.violations = static_cast<std::size_t>(r.get(name, "bounds", "triangle_violations"));
          e.min_slack = r.get(name, "bounds", "triangle_min_slack");
          if (e.trials) tri.merge(e);
          eval_inputs.push_back(ep);
        }
      }
      if (phi.empty()) {
        // Real embeddings for the scaling check: one eval sample per class,
        // against the class centers.
        const ModelCheckpoint s1 = load_stage1(name);
        const Dataset ev = load_ds(name, Split::kEval);
        const std::size_t K = m.spec.n_classes;
        phi = Matrix(K, s1.encoder.out_dim());
        psi = Matrix(K, s1.encoder.out_dim());
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t i = k * cfg_.eval_per_class;
          const Vector e = s1.encoder.encode(ev.samples.row(i));
          std::copy(e.begin(), e.end(), phi.row(k).begin());
          std::copy(s1.centers.centers().row(ev.labels[i]).begin(), s1.centers.centers().row(ev.labels[i]).end(),
                    psi.row(k).begin());
        }
      }
    }
    const BoundsReport b = verify_bounds(cfg_.bounds, tri, &phi, &psi);
    std::vector<fs::path> inputs;
    for (const auto &m : cfg_.modalities)
      for (const auto &v : cfg_.variants) inputs.push_back(triangle_path(m.spec.name, v.name));
    inputs.insert(inputs.end(), eval_inputs.begin(), eval_inputs.end());
    put_text(bounds_path(), bounds_csv(b), "verify", inputs);
    say("verify: sub-lemma " + std::to_string(b.sublemma_violations) + "/" + std::to_string(b.sublemma_trials) +
        " violations, triangle " + std::to_string(b.triangle_violations) + "/" + std::to_string(b.triangle_trials) +
        " over " + std::to_string(runs) + " runs, LoRA " + std::to_string(b.lora_violations) + "/" +
        std::to_string(b.lora_trials) + ", scaling slope " + format_double(b.scaling_slope));
    return b;
  }

  // Aggregates eval CSVs of every modality and variant.
  void report() {
    std::vector<std::string> variants = {"undefended"};
    for (const auto &v : cfg_.variants) variants.push_back(v.name);
    std::map<std::string, EvalReport> by_variant;
    std::vector<fs::path> inputs;
    std::string all = "variant,modality,setting,metric,value\n";
    for (const auto &vn : variants) {
      EvalReport merged;
      for (const auto &m : cfg_.modalities) {
        const fs::path p = eval_path(m.spec.name, vn);
        require(p, "eval report (" + m.spec.name + "/" + vn + ")", "eval");
        check_meta(p, "eval");
        inputs.push_back(p);
        const EvalReport r = parse_report_csv(read_text(p));
        merged.rows.insert(merged.rows.end(), r.rows.begin(), r.rows.end());
        for (const auto &row : r.rows) {
          all += vn + ',' + row.modality + ',' + row.setting + ',' + row.metric + ',' + format_double(row.value) + '\n';
        }
      }
      by_variant[vn] = std::move(merged);
    }
    put_text(report_dir() / "report.csv", all, "report", inputs);

    // Table-style grid: one row per variant, accuracy per modality x setting.
    std::vector<std::string> settings = {"clean"};
    for (double e : cfg_.eval_budgets) settings.push_back(setting_name(e));
    std::string grid = "variant,loss,lora";
    for (const auto &m : cfg_.modalities)
      for (const auto &s : settings) grid += ',' + m.spec.name + ':' + s;
    grid += '\n';
    for (const auto &vn : variants) {
      std::string loss = "none", lora = "no";
      if (vn != "undefended") {
        const auto &v = cfg_.variant(vn);
        loss = loss_tag_name(v.loss);
        lora = v.lora ? "r" + std::to_string(cfg_.lora.rank) : "no";
      }
      grid += vn + ',' + loss + ',' + lora;
      for (const auto &m : cfg_.modalities)
        for (const auto &s : settings) grid += ',' + format_double(by_variant[vn].get(m.spec.name, s, "accuracy"));
      grid += '\n';
    }
    put_text(report_dir() / "grid.csv", grid, "report", inputs);

    put_text(report_dir() / "checks.csv", checks_csv(variants, settings, by_variant), "report", inputs);

    std::vector<std::string> axes;
    RadarSeries clean{"clean (undefended)", "#1f77b4", {}}, adv{"adversarial " + settings.back() + " (undefended)", "#d62728", {}};
    std::vector<RadarSeries> series;
    for (const auto &m : cfg_.modalities) {
      axes.push_back(m.spec.name);
      clean.values.push_back(by_variant["undefended"].get(m.spec.name, "clean", "accuracy"));
      adv.values.push_back(by_variant["undefended"].get(m.spec.name, settings.back(), "accuracy"));
    }
    series = {clean, adv};
    for (const auto &v : cfg_.variants) {
      if (v.loss != LossTag::kCe || v.lora) continue;
      RadarSeries s{"adversarial " + settings.back() + " (" + v.name + ")", "#2ca02c", {}};
      for (const auto &m : cfg_.modalities) s.values.push_back(by_variant[v.name].get(m.spec.name, settings.back(), "accuracy"));
      series.push_back(s);
      break;
    }
    put_text(report_dir() / "radar.svg", radar_svg(axes, series, "Clean vs adversarial accuracy"), "report", inputs);
    say("report: " + std::to_string(variants.size()) + " variants x " + std::to_string(cfg_.modalities.size()) +
        " modalities written to " + report_dir().string());
  }

  void run_all() {
    gen_data();
    distill();
    attack();
    finetune();
    eval();
    verify();
    report();
  }

  // Trainable fraction of the LoRA configuration on a Stage-1 checkpoint.
  double lora_fraction(const ModelCheckpoint &ck) const {
    ProjectionHead h = *ck.head;
    Rng rng(0);
    h.enable_lora(cfg_.lora.rank, cfg_.lora.alpha, rng);
    return trainable_fraction(ck.encoder, ck.centers, h);
  }

  ModelCheckpoint load_stage1(const std::string &name) const {
    require(stage1_path(name), "stage-1 checkpoint (" + name + ")", "distill");
    check_meta(stage1_path(name), "distill");
    ModelCheckpoint ck = decode_checkpoint(read_file(stage1_path(name)));
    if (!ck.head) throw Error(ErrorCode::kInconsistent, stage1_path(name).string() + " has no head");
    return ck;
  }

 private:
  std::uint64_t data_seed(const ModalityConfig &m) const { return derive_seed(cfg_.seed, m.spec.class_seed); }

  void say(const std::string &s) const {
    if (log_) log_(s);
  }

  static void require(const fs::path &p, const std::string &what, const std::string &phase) {
    if (!fs::exists(p)) {
      throw Error(ErrorCode::kMissingArtifact, "missing " + what + " at " + p.string() + "; run '" + phase + "' first");
    }
  }

  Dataset load_ds(const std::string &name, Split s) const {
    const fs::path p = data_path(name, s);
    require(p, std::string(split_name(s)) + " dataset (" + name + ")", "gen-data");
    check_meta(p, "gen-data");
    Dataset ds = load_dataset(p);
    for (const auto &m : cfg_.modalities)
      if (m.spec.name == name) {
        const std::size_t n_classes = ds.spec.n_classes;
        ds.spec = m.spec;
        if (n_classes != m.spec.n_classes || ds.samples.cols() != m.spec.raw_dim) {
          throw Error(ErrorCode::kInconsistent, p.string() + " does not match the configured modality");
        }
      }
    return ds;
  }

  // First val_per_class samples of each class from the center-estimation split.
  Dataset validation_split(const Dataset &centers) const {
    Dataset v;
    v.spec = centers.spec;
    v.split = centers.split;
    std::vector<std::size_t> take;
    std::vector<std::size_t> seen(centers.spec.n_classes, 0);
    for (std::size_t i = 0; i < centers.size(); ++i)
      if (seen[centers.labels[i]]++ < cfg_.val_per_class) take.push_back(i);
    v.samples = detail::gather(centers.samples, take);
    v.labels = detail::gather(centers.labels, take);
    return v;
  }

  nlohmann::json meta(const std::string &phase, const std::vector<fs::path> &inputs, const nlohmann::json &extra) const {
    nlohmann::json j;
    j["config_hash"] = hash_;
    j["version"] = BINDCAL_VERSION;
    j["seed"] = cfg_.seed;
    j["phase"] = phase;
    nlohmann::json in = nlohmann::json::object();
    for (const auto &p : inputs) in[fs::relative(p, root_).generic_string()] = to_hex(sha256(read_file(p)));
    j["inputs"] = in;
    if (!extra.is_null()) j["info"] = extra;
    return j;
  }

  void put(const fs::path &p, const Bytes &bytes, const std::string &phase, const std::vector<fs::path> &inputs,
           const nlohmann::json &extra = nullptr) const {
    write_file(p, bytes);
    write_text(meta_path(p), meta(phase, inputs, extra).dump(2) + "\n");
  }

  void put_text(const fs::path &p, const std::string &text, const std::string &phase,
                const std::vector<fs::path> &inputs) const {
    write_text(p, text);
    write_text(meta_path(p), meta(phase, inputs, nullptr).dump(2) + "\n");
  }

  static fs::path meta_path(const fs::path &p) { return fs::path(p.string() + ".meta.json"); }

  void check_meta(const fs::path &p, const std::string &phase) const {
    const fs::path mp = meta_path(p);
    if (!fs::exists(mp)) throw Error(ErrorCode::kMissingArtifact, "missing provenance sidecar " + mp.string());
    const auto j = nlohmann::json::parse(read_text(mp));
    const std::string h = j.value("config_hash", "");
    if (h != hash_) {
      throw Error(ErrorCode::kHashMismatch, p.string() + " was produced by '" + phase + "' under config " + h +
                                                ", current config is " + hash_);
    }
  }

  // Clean metrics, then the full suite at each budget (warm-started from the
  // previous budget). With a Stage-1 head given, adversarial points of each
  // budget also feed the triangle ledger.
  EvalReport evaluate_model(const std::string &name, const FrozenEncoder &enc, const ProjectionHead *head,
                            const ProjectionHead *stage1, const SemanticCenters &centers, const Dataset &ev,
                            Matrix *last_adv) const {
    CosineClassifier model(enc, head, centers);
    EvalReport r;
    const std::size_t K = centers.num_classes();
    auto score = [&](const Matrix &x, const std::string &setting) {
      const Matrix f = model.logits(x);
      std::vector<std::size_t> pred(x.rows());
      for (std::size_t i = 0; i < x.rows(); ++i) pred[i] = predict(f.row(i));
      r.add(name, setting, classification_metrics(pred, ev.labels, K), cosine_to_center(model.embeddings(x), ev.labels, centers));
    };
    score(ev.samples, "clean");
    TriangleLedger tri;
    std::vector<AdvPair> warm;
    Matrix adv(ev.size(), ev.samples.cols());
    for (double eps : cfg_.eval_budgets) {
      const std::string setting = setting_name(eps);
      const SuiteResult s = attack_suite(model, ev, AttackBudget{eps}, cfg_.eval_attacks, warm.empty() ? nullptr : &warm);
      for (std::size_t i = 0; i < ev.size(); ++i) std::copy(s.pairs[i].adv.begin(), s.pairs[i].adv.end(), adv.row(i).begin());
      score(adv, setting);
      for (const auto &[method, acc] : s.per_method) r.rows.push_back({name, setting, "acc_after_" + method, acc});
      if (stage1 != nullptr) {
        const Matrix za = enc.encode_all(adv), zc = enc.encode_all(ev.samples);
        for (std::size_t i = 0; i < ev.size(); ++i) tri.record(head->forward(za.row(i)), stage1->forward(zc.row(i)), zc.row(i));
      }
      warm = s.pairs;
    }
    // Gradient-masking probe at the largest budget: each method on its own.
    const double eps = cfg_.eval_budgets.back();
    const std::string setting = setting_name(eps);
    for (const auto &a : cfg_.eval_attacks) {
      if (a.method != AttackMethod::kApgdCe && a.method != AttackMethod::kSquare) continue;
      const SuiteResult s = attack_suite(model, ev, AttackBudget{eps}, {a});
      r.rows.push_back({name, setting, std::string("solo_acc_") + attack_method_name(a.method), s.robust_accuracy});
    }
    if (stage1 != nullptr) r.add_triangle(name, tri);
    if (last_adv != nullptr) *last_adv = adv;
    return r;
  }

  std::string summary(const EvalReport &r, const std::string &name) const {
    std::string s = "clean " + format_double(r.get(name, "clean", "accuracy"));
    for (double e : cfg_.eval_budgets) s += std::string(", ") + setting_name(e) + " " + format_double(r.get(name, setting_name(e), "accuracy"));
    return s;
  }

  std::string checks_csv(const std::vector<std::string> &variants, const std::vector<std::string> &settings,
                         std::map<std::string, EvalReport> &by) const {
    std::string out = "check,subject,value,status\n";
    const std::string top = settings.back();
    // Robust accuracy never above clean accuracy on the undefended model.
    for (const auto &m : cfg_.modalities) {
      const double c = by["undefended"].get(m.spec.name, "clean", "accuracy");
      for (std::size_t s = 1; s < settings.size(); ++s) {
        const double a = by["undefended"].get(m.spec.name, settings[s], "accuracy");
        out += "robust_le_clean," + m.spec.name + ':' + settings[s] + ',' + format_double(a - c) + ',' +
               (a <= c ? "ok" : "FLAG") + '\n';
      }
    }
    // Gradient-masking probe on trained heads.
    for (const auto &v : cfg_.variants)
      for (const auto &m : cfg_.modalities) {
        const EvalReport &r = by[v.name];
        const double apgd = r.get(m.spec.name, top, "solo_acc_apgd-ce");
        const double sq = r.get(m.spec.name, top, "solo_acc_square");
        // Masking shows up as Square fooling rows that APGD cannot.
        const double gap = apgd - sq;
        out += "masking_probe," + v.name + ':' + m.spec.name + ',' + format_double(gap) + ',' + (gap <= 10.0 ? "ok" : "FLAG") + '\n';
      }
    // Method ordering by accuracy vs by macro-F1, per (modality, setting).
    std::size_t cells = 0, agree = 0;
    for (const auto &m : cfg_.modalities)
      for (const auto &s : settings) {
        ++cells;
        bool same = true;
        for (std::size_t a = 0; a < variants.size() && same; ++a)
          for (std::size_t b = a + 1; b < variants.size() && same; ++b) {
            const double da = by[variants[a]].get(m.spec.name, s, "accuracy") - by[variants[b]].get(m.spec.name, s, "accuracy");
            const double df = by[variants[a]].get(m.spec.name, s, "f1") - by[variants[b]].get(m.spec.name, s, "f1");
            if ((da > 0 && df < 0) || (da < 0 && df > 0)) same = false;
          }
        agree += same;
      }
    const double frac = cells ? 100.0 * static_cast<double>(agree) / static_cast<double>(cells) : 100.0;
    out += "acc_f1_ordering,all," + format_double(frac) + ',' + (frac >= 90.0 ? "ok" : "FLAG") + '\n';
    // CE at least as robust as L2 at the largest budget.
    for (const auto &v : cfg_.variants) {
      if (v.loss != LossTag::kCe) continue;
      for (const auto &w : cfg_.variants) {
        if (w.loss != LossTag::kL2Align || w.lora != v.lora) continue;
        for (const auto &m : cfg_.modalities) {
          const double d = by[v.name].get(m.spec.name, top, "accuracy") - by[w.name].get(m.spec.name, top, "accuracy");
          out += "ce_ge_l2," + v.name + '-' + w.name + ':' + m.spec.name + ',' + format_double(d) + ',' + (d >= 0 ? "ok" : "FLAG") + '\n';
        }
      }
    }
    return out;
  }

  RunConfig cfg_;
  std::string hash_;
  fs::path root_;
  Logger log_;
};

}  // namespace bindcal

#endif  // BINDCAL_PIPELINE_HPP_
