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

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bindcal/config.hpp"
#include "bindcal/pipeline.hpp"

namespace {

// 0 ok, 1 other, 2 config, 3 missing artifact, 4 hash mismatch, 5 numeric,
// 6 format, 7 io.
int exit_code(bindcal::ErrorCode c) {
  using bindcal::ErrorCode;
  switch (c) {
    case ErrorCode::kConfig:
    case ErrorCode::kInvalidArgument: return 2;
    case ErrorCode::kMissingArtifact: return 3;
    case ErrorCode::kHashMismatch:
    case ErrorCode::kStageMismatch: return 4;
    case ErrorCode::kNonFinite:
    case ErrorCode::kDegenerate: return 5;
    case ErrorCode::kBadMagic:
    case ErrorCode::kTruncated:
    case ErrorCode::kInconsistent:
    case ErrorCode::kTrailingBytes:
    case ErrorCode::kDimensionMismatch: return 6;
    case ErrorCode::kIo: return 7;
  }
  return 1;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Adversarial calibration of projection heads over frozen multimodal encoders"};
  app.set_version_flag("--version", std::string(BINDCAL_VERSION));
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  app.add_option("-c,--config", config_path, "JSON run configuration")->required();
  app.add_option("-o,--out", out_dir, "run directory (overrides output_dir)");
  app.add_option("-s,--seed", seed, "master seed (overrides seed)");
  app.add_flag("-q,--quiet", quiet, "suppress progress lines");

  std::optional<std::string> variant;
  auto *gen = app.add_subcommand("gen-data", "generate train/eval/center splits for every modality");
  auto *dis = app.add_subcommand("distill", "Stage 1: fit heads to the identity on clean embeddings");
  auto *att = app.add_subcommand("attack", "generate adversarial training pairs against Stage-1 models");
  auto *fin = app.add_subcommand("finetune", "Stage 2: adversarial fine-tuning of every variant");
  fin->add_option("--variant", variant, "train a single variant");
  auto *ev = app.add_subcommand("eval", "clean and AutoAttack-style evaluation");
  ev->add_option("--variant", variant, "evaluate a single variant (or 'undefended')");
  auto *ver = app.add_subcommand("verify", "bound checks: cosine sub-lemma, triangle ledger, LoRA, InfoNCE scaling");
  auto *rep = app.add_subcommand("report", "aggregate CSV tables, checks and figures");
  auto *all = app.add_subcommand("run-all", "every phase in order");

  CLI11_PARSE(app, argc, argv);

  try {
    nlohmann::json j = bindcal::load_config_json(config_path);
    if (seed) j["seed"] = *seed;
    if (out_dir) j["output_dir"] = *out_dir;
    const bindcal::RunConfig cfg = bindcal::parse_config(j);
    const std::string hash = bindcal::config_hash(j);
    bindcal::Logger log;
    if (!quiet) log = [](const std::string &s) { std::cerr << s << '\n'; };
    bindcal::Pipeline p(cfg, hash, cfg.output_dir, log);

    if (*gen) p.gen_data();
    if (*dis) p.distill();
    if (*att) p.attack();
    if (*fin) {
      if (variant) (void)cfg.variant(*variant);
      p.finetune(variant);
    }
    if (*ev) {
      if (variant && *variant != "undefended") (void)cfg.variant(*variant);
      p.eval(variant);
    }
    if (*ver) {
      const bindcal::BoundsReport b = p.verify();
      if (!b.all_hold()) {
        std::cerr << "error: bound checks reported violations, see " << p.bounds_path().string() << '\n';
        return 5;
      }
    }
    if (*rep) p.report();
    if (*all) p.run_all();
  } catch (const bindcal::Error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const nlohmann::json::exception &e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 7;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
