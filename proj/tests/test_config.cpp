// Copyright 2026 The crowdrec Authors
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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>

#include "crowdrec/config.hpp"

using namespace crowdrec;
using nlohmann::json;

TEST_CASE("defaults validate and pin the loss constants") {
  RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  CHECK(cfg.loss.consistency_weight == 0.2);
  CHECK(cfg.loss.silhouette_weight == 0.1);
  CHECK(cfg.loss.ordering_weight == 0.1);
  CHECK(cfg.loss.occupied_class_weight == 0.7);
  CHECK(cfg.loss.confidence_weight == 0.001);

  CHECK(cfg.dataset.scenes == 50);
  CHECK(cfg.dataset.figure_count == 3);
  CHECK(cfg.pose.auc_max_threshold == 0.10);
}

TEST_CASE("round trip through json preserves every field") {
  RunConfig cfg;
  cfg.seed = 1234567890123456789ull;
  cfg.dataset.scenes = 7;
  cfg.dataset.figure_count = 5;
  cfg.voxel.steps = 321;
  cfg.refine.lr = 0.0025;
  cfg.pose.model_points = 99;
  cfg.metrics.scene_grid_res = 40;
  cfg.ablation.disable_consistency = true;
  cfg.ablation.features.depth_gap = false;

  const RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.to_json().dump() == cfg.to_json().dump());
  CHECK(back.seed == cfg.seed);
  CHECK(back.ablation.features.depth_gap == false);
}

TEST_CASE("partial documents keep defaults for unset keys") {
  const json j = {{"seed", 7}, {"voxel", {{"steps", 123}}}};
  const RunConfig cfg = RunConfig::from_json(j);
  CHECK(cfg.seed == 7);
  CHECK(cfg.voxel.steps == 123);
  CHECK(cfg.voxel.batch == 96);
  CHECK(cfg.refine.steps == 1200);
  CHECK(cfg.loss.consistency_weight == 0.2);
}

TEST_CASE("unknown keys are rejected at every level") {
  CHECK_THROWS_AS(RunConfig::from_json({{"bogus", 1}}), std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"dataset", {{"scene_count", 5}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"loss", {{"alpha", 0.2}}}}), std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"voxel", {{"resolution", 16}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"refine", {{"iterations", 10}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"pose", {{"iters", 10}}}}), std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"metrics", {{"samples", 10}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"ablation", {{"no_loss", true}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      RunConfig::from_json({{"ablation", {{"features", {{"normals", true}}}}}}),
      std::invalid_argument);

  // The offending key is named in the message.
  try {
    RunConfig::from_json({{"voxel", {{"resolution", 16}}}});
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("resolution") != std::string::npos);
    CHECK(std::string(e.what()).find("voxel") != std::string::npos);
  }
}

TEST_CASE("validation rejects out-of-range values") {
  CHECK_THROWS_AS(RunConfig::from_json({{"dataset", {{"figure_count", 11}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"dataset", {{"figure_count", 1}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"dataset", {{"scenes", 0}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"refine", {{"sample_count", 999}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"refine", {{"input_view", 4}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"pose", {{"model_points", 2}}}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunConfig::from_json({{"voxel", {{"steps", "many"}}}}),
                  std::invalid_argument);

  try {
    RunConfig::from_json({{"dataset", {{"figure_count", 11}}}});
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("figure_count") != std::string::npos);
  }
}

TEST_CASE("config file loading") {
  const std::string path = "test_config_tmp.json";
  {
    std::ofstream out(path);
    out << R"({"seed": 42, "dataset": {"scenes": 2, "figure_count": 2}})";
  }
  const RunConfig cfg = RunConfig::load(path);
  CHECK(cfg.seed == 42);
  CHECK(cfg.dataset.scenes == 2);
  CHECK(cfg.dataset.figure_count == 2);

  CHECK_THROWS_AS(RunConfig::load("does_not_exist.json"), std::runtime_error);

  {
    std::ofstream out(path);
    out << "{not json";
  }
  CHECK_THROWS_AS(RunConfig::load(path), std::invalid_argument);
  std::remove(path.c_str());
}

TEST_CASE("scene specs derive decorrelated per-scene seeds") {
  RunConfig cfg;
  cfg.seed = 99;
  cfg.dataset.figure_count = 4;
  cfg.dataset.views = 3;
  cfg.dataset.image_width = 48;

  const SceneSpec a = cfg.dataset.scene_spec(cfg.seed, 0);
  const SceneSpec b = cfg.dataset.scene_spec(cfg.seed, 1);
  CHECK(a.index == 0);
  CHECK(b.index == 1);
  CHECK(a.seed != b.seed);
  CHECK(a.figure_count == 4);
  CHECK(a.rig.n_views == 3);
  CHECK(a.rig.image_width == 48);

  // Same run seed, same index: identical spec.
  const SceneSpec a2 = cfg.dataset.scene_spec(cfg.seed, 0);
  CHECK(a2.seed == a.seed);
  // Different run seed: different stream.
  CHECK(cfg.dataset.scene_spec(100, 0).seed != a.seed);
}

TEST_CASE("oracle stage lists") {
  const OracleStages none = parse_oracle_stages("");
  CHECK(!none.any());

  const OracleStages one = parse_oracle_stages("voxel");
  CHECK(one.voxel);
  CHECK(!one.refine);
  CHECK(!one.pose);

  const OracleStages two = parse_oracle_stages(" voxel , pose ");
  CHECK(two.voxel);
  CHECK(!two.refine);
  CHECK(two.pose);

  const OracleStages all = parse_oracle_stages("all");
  CHECK(all.voxel);
  CHECK(all.refine);
  CHECK(all.pose);
  CHECK(all.any());

  CHECK_THROWS_AS(parse_oracle_stages("meshes"), std::invalid_argument);
}
