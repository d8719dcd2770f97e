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

#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "bindcal/config.hpp"

using namespace bindcal;
using nlohmann::json;

namespace {

json minimal() {
  return json::parse(R"({
    "modalities": [{"name": "m", "raw_dim": 16, "n_classes": 4, "class_seed": 1, "encoder_seed": 2}]
  })");
}

ErrorCode code_of(const json &j) {
  try {
    parse_config(j);
  } catch (const Error &e) {
    return e.code();
  }
  ADD_FAILURE() << "config accepted: " << j.dump();
  return ErrorCode::kIo;
}

const std::string kConfigs = std::string(BINDCAL_SOURCE_DIR) + "/configs/";

}  // namespace

TEST(Config, MinimalGetsDefaults) {
  const RunConfig c = parse_config(minimal());
  EXPECT_EQ(c.seed, 42u);
  ASSERT_EQ(c.modalities.size(), 1u);
  EXPECT_EQ(c.variants.size(), 6u);
  EXPECT_EQ(c.variants[0].name, "l2");
  EXPECT_EQ(c.variants[4].name, "ce-lora");
  EXPECT_TRUE(c.variants[4].lora);
  EXPECT_EQ(c.eval_budgets.size(), 3u);
  EXPECT_DOUBLE_EQ(c.eval_budgets.back(), 8.0 / 255.0);
  EXPECT_EQ(c.eval_attacks.size(), 3u);
  EXPECT_EQ(c.eval_attacks[2].method, AttackMethod::kSquare);
  EXPECT_FALSE(c.train_attack.early_stop);
  EXPECT_EQ(c.lora.rank, 8u);
  EXPECT_DOUBLE_EQ(c.stage2.optimizer.lr, 1e-3);
  EXPECT_DOUBLE_EQ(c.stage2.loss.tau, 0.07);
  EXPECT_DOUBLE_EQ(c.stage2.w_clean, 0.25);
  const TrainConfig s2 = c.stage2_config(c.variant("ce-lora"));
  EXPECT_EQ(s2.loss.tag, LossTag::kCe);
  ASSERT_TRUE(s2.lora.has_value());
  EXPECT_EQ(s2.lora->rank, 8u);
  EXPECT_THROW(c.variant("nope"), Error);
}

TEST(Config, OverridesAreApplied) {
  json j = minimal();
  j["seed"] = 9;
  j["stage2"] = {{"lr", 0.01}, {"epochs_max", 5}, {"w_clean", 0.5}, {"w_adv", 0.5}};
  j["variants"] = json::array({{{"name", "a"}, {"loss", "infonce"}, {"lr", 0.002}}, {{"name", "b"}, {"loss", "l2"}}});
  j["attacks"] = {{"eval_budgets_255", {1, 3}}, {"train", {{"method", "pgd"}, {"iterations", 7}}}};
  const RunConfig c = parse_config(j);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_DOUBLE_EQ(c.stage2_config(c.variant("a")).optimizer.lr, 0.002);
  EXPECT_DOUBLE_EQ(c.stage2_config(c.variant("b")).optimizer.lr, 0.01);
  EXPECT_EQ(c.stage2.epochs_max, 5u);
  EXPECT_DOUBLE_EQ(c.eval_budgets[0], 1.0 / 255.0);
  EXPECT_EQ(c.train_attack.method, AttackMethod::kPgd);
  EXPECT_EQ(c.train_attack.iterations, 7u);
  EXPECT_FALSE(c.train_attack.early_stop);
}

TEST(Config, RejectsUnknownAndInvalidKeys) {
  json j = minimal();
  j["sed"] = 1;
  EXPECT_EQ(code_of(j), ErrorCode::kConfig);
  j = minimal();
  j["modalities"][0]["raw_dimm"] = 3;
  EXPECT_EQ(code_of(j), ErrorCode::kConfig);
  j = minimal();
  j["stage2"] = {{"w_clean", 0.5}};
  EXPECT_EQ(code_of(j), ErrorCode::kConfig);
  j = minimal();
  j["attacks"] = {{"eval_budgets_255", {4, 2}}};
  EXPECT_EQ(code_of(j), ErrorCode::kConfig);
  j = minimal();
  j["modalities"][0]["n_classes"] = 2;
  EXPECT_EQ(code_of(j), ErrorCode::kConfig);  // default suite includes DLR
  j = minimal();
  j["variants"] = json::array({{{"name", "undefended"}, {"loss", "ce"}}});
  EXPECT_EQ(code_of(j), ErrorCode::kConfig);
  j = minimal();
  j["variants"] = json::array({{{"name", "x"}, {"loss", "distill"}}});
  EXPECT_EQ(code_of(j), ErrorCode::kConfig);
  j = minimal();
  j["seed"] = -1;
  EXPECT_EQ(code_of(j), ErrorCode::kConfig);
  j = minimal();
  j["data"] = {{"val_per_class", 50}};
  EXPECT_EQ(code_of(j), ErrorCode::kConfig);
  EXPECT_EQ(code_of(json::object()), ErrorCode::kConfig);
}

TEST(Config, HashIgnoresOutputDirOnly) {
  json a = minimal(), b = minimal();
  a["output_dir"] = "x";
  b["output_dir"] = "y";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b["seed"] = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 64u);
}

TEST(Config, ShippedConfigsParse) {
  for (const char *name : {"default.json", "paper-suite.json", "smoke.json"}) {
    const json j = load_config_json(kConfigs + name);
    EXPECT_NO_THROW(parse_config(j)) << name;
  }
  // The default configuration is the full experiment grid.
  EXPECT_EQ(config_hash(load_config_json(kConfigs + "default.json")),
            config_hash(load_config_json(kConfigs + "paper-suite.json")));
  const RunConfig p = parse_config(load_config_json(kConfigs + "paper-suite.json"));
  EXPECT_EQ(p.modalities.size(), 3u);
  EXPECT_EQ(p.variants.size(), 6u);
  EXPECT_THROW(load_config_json(kConfigs + "missing.json"), Error);
}
