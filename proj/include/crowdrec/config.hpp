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

#ifndef CROWDREC_CONFIG_HPP_
#define CROWDREC_CONFIG_HPP_

// Run configuration: one schema-checked JSON document drives dataset
// generation, the reconstruction stages, pose fitting, and evaluation.
// Parsing is strict: unknown keys are rejected so a typo fails loudly
// instead of silently falling back to a default.

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>

#include "crowdrec/implicit.hpp"
#include "crowdrec/scene.hpp"
#include "crowdrec/voxelnet.hpp"

#include "json.hpp"

namespace crowdrec {

namespace detail {

// Every key in `j` must be listed in `allowed`; `where` names the object in
// the error message ("voxel", "dataset.rig", ...).
inline void check_keys(const nlohmann::json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw std::invalid_argument("config: \"" + where + "\" must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed)
      if (item.key() == key) {
        known = true;
        break;
      }
    if (!known)
      throw std::invalid_argument("config: unknown key \"" + item.key() + "\" in \"" +
                                  where + "\"");
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T* out) {
  if (!j.contains(key)) return;
  try {
    *out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config: bad value for \"" + std::string(key) +
                                "\": " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset

struct DatasetConfig {
  int scenes = 50;
  int figure_count = 3;
  double arena_half = 1.5;
  int figure_mesh_res = 64;
  int views = 4;
  double rig_radius = 4.0;
  double rig_height = 1.6;
  int image_width = 64;
  int image_height = 64;
  double focal = 48.0;

  void validate() const {
    if (scenes <= 0) throw std::invalid_argument("dataset: scenes must be positive");
    if (figure_count < 2 || figure_count > 10)
      throw std::invalid_argument("dataset: figure_count must be in {2..10}");
    rig().validate();
  }

  CameraRigSpec rig() const {
    CameraRigSpec spec;
    spec.n_views = views;
    spec.radius = rig_radius;
    spec.height = rig_height;
    spec.image_width = image_width;
    spec.image_height = image_height;
    spec.focal = focal;
    return spec;
  }

  // Per-scene seeds are decorrelated streams forked from the run seed.
  SceneSpec scene_spec(std::uint64_t run_seed, int index) const {
    SceneSpec spec;
    spec.seed = Rng(run_seed).fork(std::uint64_t(index) + 1).next_u64();
    spec.index = index;
    spec.figure_count = figure_count;
    spec.arena_half = arena_half;
    spec.figure_mesh_res = figure_mesh_res;
    spec.rig = rig();
    return spec;
  }

  static DatasetConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, "dataset",
                       {"scenes", "figure_count", "arena_half", "figure_mesh_res", "views",
                        "rig_radius", "rig_height", "image_width", "image_height", "focal"});
    DatasetConfig c;
    detail::read_field(j, "scenes", &c.scenes);
    detail::read_field(j, "figure_count", &c.figure_count);
    detail::read_field(j, "arena_half", &c.arena_half);
    detail::read_field(j, "figure_mesh_res", &c.figure_mesh_res);
    detail::read_field(j, "views", &c.views);
    detail::read_field(j, "rig_radius", &c.rig_radius);
    detail::read_field(j, "rig_height", &c.rig_height);
    detail::read_field(j, "image_width", &c.image_width);
    detail::read_field(j, "image_height", &c.image_height);
    detail::read_field(j, "focal", &c.focal);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"scenes", scenes},
            {"figure_count", figure_count},
            {"arena_half", arena_half},
            {"figure_mesh_res", figure_mesh_res},
            {"views", views},
            {"rig_radius", rig_radius},
            {"rig_height", rig_height},
            {"image_width", image_width},
            {"image_height", image_height},
            {"focal", focal}};
  }
};

// ---------------------------------------------------------------------------
// Stage 1: voxel occupancy

struct VoxelStageConfig {
  int lattice_res = 16;      // nodes per axis of the person lattice
  double lattice_pad = 0.06; // bbox padding, fraction of the extent per axis
  double far_depth = 8.0;    // depth-normalisation cap for view features
  int steps = 700;
  int batch = 96;
  double lr = 0.02;
  double momentum = 0.9;
  double decay = 0.5;
  int decay_every = 300;
  int silhouette_every = 3;  // 0 disables the silhouette term
  int silhouette_proxy_res = 10;
  int silhouette_samples_per_ray = 16;
  double silhouette_tau = 0.05;

  void validate() const {
    if (lattice_res < 2) throw std::invalid_argument("voxel: lattice_res must be >= 2");
    if (!(lattice_pad >= 0.0)) throw std::invalid_argument("voxel: negative lattice_pad");
    if (!(far_depth > 0.0)) throw std::invalid_argument("voxel: far_depth must be positive");
    if (steps <= 0) throw std::invalid_argument("voxel: steps must be positive");
    if (batch <= 0) throw std::invalid_argument("voxel: batch must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("voxel: lr must be positive");
    if (silhouette_every < 0)
      throw std::invalid_argument("voxel: negative silhouette_every");
    if (silhouette_proxy_res < 2)
      throw std::invalid_argument("voxel: silhouette_proxy_res must be >= 2");
  }

  static VoxelStageConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, "voxel",
                       {"lattice_res", "lattice_pad", "far_depth", "steps", "batch", "lr",
                        "momentum", "decay", "decay_every", "silhouette_every",
                        "silhouette_proxy_res", "silhouette_samples_per_ray",
                        "silhouette_tau"});
    VoxelStageConfig c;
    detail::read_field(j, "lattice_res", &c.lattice_res);
    detail::read_field(j, "lattice_pad", &c.lattice_pad);
    detail::read_field(j, "far_depth", &c.far_depth);
    detail::read_field(j, "steps", &c.steps);
    detail::read_field(j, "batch", &c.batch);
    detail::read_field(j, "lr", &c.lr);
    detail::read_field(j, "momentum", &c.momentum);
    detail::read_field(j, "decay", &c.decay);
    detail::read_field(j, "decay_every", &c.decay_every);
    detail::read_field(j, "silhouette_every", &c.silhouette_every);
    detail::read_field(j, "silhouette_proxy_res", &c.silhouette_proxy_res);
    detail::read_field(j, "silhouette_samples_per_ray", &c.silhouette_samples_per_ray);
    detail::read_field(j, "silhouette_tau", &c.silhouette_tau);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"lattice_res", lattice_res},
            {"lattice_pad", lattice_pad},
            {"far_depth", far_depth},
            {"steps", steps},
            {"batch", batch},
            {"lr", lr},
            {"momentum", momentum},
            {"decay", decay},
            {"decay_every", decay_every},
            {"silhouette_every", silhouette_every},
            {"silhouette_proxy_res", silhouette_proxy_res},
            {"silhouette_samples_per_ray", silhouette_samples_per_ray},
            {"silhouette_tau", silhouette_tau}};
  }
};

// ---------------------------------------------------------------------------
// Stage 2: implicit refinement

struct RefineStageConfig {
  int steps = 1200;
  int batch = 256;
  int sample_count = 10000;
  double sigma = 0.05;     // surface-sample noise, fraction of the bbox diagonal
  double lr = 1e-3;
  double depth_far = 0.0;  // view depth cap in scene units; 0 = auto per person
  int holdout_stride = 10;
  int eval_every = 25;
  int input_view = 0;      // which camera feeds the image features

  void validate() const {
    if (steps <= 0) throw std::invalid_argument("refine: steps must be positive");
    if (batch <= 0) throw std::invalid_argument("refine: batch must be positive");
    if (sample_count <= 0 || sample_count % 2 != 0)
      throw std::invalid_argument("refine: sample_count must be positive and even");
    if (!(sigma > 0.0)) throw std::invalid_argument("refine: sigma must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("refine: lr must be positive");
    if (depth_far < 0.0) throw std::invalid_argument("refine: negative depth_far");
    if (holdout_stride < 2) throw std::invalid_argument("refine: holdout_stride must be >= 2");
    if (eval_every <= 0) throw std::invalid_argument("refine: eval_every must be positive");
    if (input_view < 0) throw std::invalid_argument("refine: negative input_view");
  }

  static RefineStageConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, "refine",
                       {"steps", "batch", "sample_count", "sigma", "lr", "depth_far",
                        "holdout_stride", "eval_every", "input_view"});
    RefineStageConfig c;
    detail::read_field(j, "steps", &c.steps);
    detail::read_field(j, "batch", &c.batch);
    detail::read_field(j, "sample_count", &c.sample_count);
    detail::read_field(j, "sigma", &c.sigma);
    detail::read_field(j, "lr", &c.lr);
    detail::read_field(j, "depth_far", &c.depth_far);
    detail::read_field(j, "holdout_stride", &c.holdout_stride);
    detail::read_field(j, "eval_every", &c.eval_every);
    detail::read_field(j, "input_view", &c.input_view);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"steps", steps},
            {"batch", batch},
            {"sample_count", sample_count},
            {"sigma", sigma},
            {"lr", lr},
            {"depth_far", depth_far},
            {"holdout_stride", holdout_stride},
            {"eval_every", eval_every},
            {"input_view", input_view}};
  }
};

// ---------------------------------------------------------------------------
// Stage 3: pose fitting

struct PoseStageConfig {
  int model_points = 160;  // vertex subsample used as the correspondence set
  int max_iters = 200;
  double step = 0.5;
  double max_step_norm = 0.1;
  int scene_rounds = 40;   // round-robin sweeps of the composed-scene fit
  double auc_max_threshold = 0.10;

  void validate() const {
    if (model_points < 3) throw std::invalid_argument("pose: model_points must be >= 3");
    if (max_iters <= 0) throw std::invalid_argument("pose: max_iters must be positive");
    if (!(step > 0.0)) throw std::invalid_argument("pose: step must be positive");
    if (!(max_step_norm > 0.0))
      throw std::invalid_argument("pose: max_step_norm must be positive");
    if (scene_rounds <= 0) throw std::invalid_argument("pose: scene_rounds must be positive");
    if (!(auc_max_threshold > 0.0))
      throw std::invalid_argument("pose: auc_max_threshold must be positive");
  }

  // Per-person fit; the ordinal weight comes from the loss block.
  PoseFitConfig fit(double ordering_weight) const {
    PoseFitConfig cfg;
    cfg.max_iters = max_iters;
    cfg.step = step;
    cfg.max_step_norm = max_step_norm;
    cfg.gamma = ordering_weight;
    cfg.rounds = scene_rounds;
    return cfg;
  }

  static PoseStageConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, "pose",
                       {"model_points", "max_iters", "step", "max_step_norm", "scene_rounds",
                        "auc_max_threshold"});
    PoseStageConfig c;
    detail::read_field(j, "model_points", &c.model_points);
    detail::read_field(j, "max_iters", &c.max_iters);
    detail::read_field(j, "step", &c.step);
    detail::read_field(j, "max_step_norm", &c.max_step_norm);
    detail::read_field(j, "scene_rounds", &c.scene_rounds);
    detail::read_field(j, "auc_max_threshold", &c.auc_max_threshold);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"model_points", model_points},
            {"max_iters", max_iters},
            {"step", step},
            {"max_step_norm", max_step_norm},
            {"scene_rounds", scene_rounds},
            {"auc_max_threshold", auc_max_threshold}};
  }
};

// ---------------------------------------------------------------------------
// Evaluation

struct MetricConfig {
  int surface_samples = 4000;  // per mesh, for the sampled chamfer distance
  int p2s_samples = 4000;
  int scene_grid_res = 48;     // lattice for the scene-level volumetric IoU

  void validate() const {
    if (surface_samples <= 0)
      throw std::invalid_argument("metrics: surface_samples must be positive");
    if (p2s_samples <= 0) throw std::invalid_argument("metrics: p2s_samples must be positive");
    if (scene_grid_res < 2)
      throw std::invalid_argument("metrics: scene_grid_res must be >= 2");
  }

  static MetricConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, "metrics", {"surface_samples", "p2s_samples", "scene_grid_res"});
    MetricConfig c;
    detail::read_field(j, "surface_samples", &c.surface_samples);
    detail::read_field(j, "p2s_samples", &c.p2s_samples);
    detail::read_field(j, "scene_grid_res", &c.scene_grid_res);
    return c;
  }

  nlohmann::json to_json() const {
    return {{"surface_samples", surface_samples},
            {"p2s_samples", p2s_samples},
            {"scene_grid_res", scene_grid_res}};
  }
};

// ---------------------------------------------------------------------------
// Ablation toggles

struct AblationConfig {
  bool disable_silhouette = false;   // drop the silhouette term from stage 1
  bool disable_consistency = false;  // drop the multi-view term from stage 1
  bool disable_implicit = false;     // mesh the stage-1 grid directly
  FeatureToggles features;           // refinement feature groups

  static AblationConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, "ablation",
                       {"disable_silhouette", "disable_consistency", "disable_implicit",
                        "features"});
    AblationConfig c;
    detail::read_field(j, "disable_silhouette", &c.disable_silhouette);
    detail::read_field(j, "disable_consistency", &c.disable_consistency);
    detail::read_field(j, "disable_implicit", &c.disable_implicit);
    if (j.contains("features")) {
      const auto& f = j.at("features");
      detail::check_keys(f, "ablation.features", {"occupancy", "image", "depth_gap"});
      detail::read_field(f, "occupancy", &c.features.occupancy);
      detail::read_field(f, "image", &c.features.image);
      detail::read_field(f, "depth_gap", &c.features.depth_gap);
    }
    return c;
  }

  nlohmann::json to_json() const {
    return {{"disable_silhouette", disable_silhouette},
            {"disable_consistency", disable_consistency},
            {"disable_implicit", disable_implicit},
            {"features",
             {{"occupancy", features.occupancy},
              {"image", features.image},
              {"depth_gap", features.depth_gap}}}};
  }
};

// ---------------------------------------------------------------------------
// Top-level run configuration

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  LossConfig loss;  // weights: consistency 0.2, silhouette 0.1, ordering 0.1,
                    // occupied class 0.7, confidence 0.001
  VoxelStageConfig voxel;
  RefineStageConfig refine;
  PoseStageConfig pose;
  MetricConfig metrics;
  AblationConfig ablation;

  void validate() const {
    dataset.validate();
    loss.validate();
    voxel.validate();
    refine.validate();
    pose.validate();
    metrics.validate();
    if (refine.input_view >= dataset.views)
      throw std::invalid_argument("refine: input_view out of range for dataset views");
  }

  static RunConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, "config",
                       {"seed", "dataset", "loss", "voxel", "refine", "pose", "metrics",
                        "ablation"});
    RunConfig c;
    detail::read_field(j, "seed", &c.seed);
    if (j.contains("dataset")) c.dataset = DatasetConfig::from_json(j.at("dataset"));
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      detail::check_keys(l, "loss",
                         {"consistency_weight", "silhouette_weight", "ordering_weight",
                          "occupied_class_weight", "confidence_weight"});
      detail::read_field(l, "consistency_weight", &c.loss.consistency_weight);
      detail::read_field(l, "silhouette_weight", &c.loss.silhouette_weight);
      detail::read_field(l, "ordering_weight", &c.loss.ordering_weight);
      detail::read_field(l, "occupied_class_weight", &c.loss.occupied_class_weight);
      detail::read_field(l, "confidence_weight", &c.loss.confidence_weight);
    }
    if (j.contains("voxel")) c.voxel = VoxelStageConfig::from_json(j.at("voxel"));
    if (j.contains("refine")) c.refine = RefineStageConfig::from_json(j.at("refine"));
    if (j.contains("pose")) c.pose = PoseStageConfig::from_json(j.at("pose"));
    if (j.contains("metrics")) c.metrics = MetricConfig::from_json(j.at("metrics"));
    if (j.contains("ablation")) c.ablation = AblationConfig::from_json(j.at("ablation"));
    c.validate();
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("config: parse error in " + path + ": " + e.what());
    }
    return from_json(j);
  }

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"dataset", dataset.to_json()},
            {"loss",
             {{"consistency_weight", loss.consistency_weight},
              {"silhouette_weight", loss.silhouette_weight},
              {"ordering_weight", loss.ordering_weight},
              {"occupied_class_weight", loss.occupied_class_weight},
              {"confidence_weight", loss.confidence_weight}}},
            {"voxel", voxel.to_json()},
            {"refine", refine.to_json()},
            {"pose", pose.to_json()},
            {"metrics", metrics.to_json()},
            {"ablation", ablation.to_json()}};
  }
};

// ---------------------------------------------------------------------------
// Oracle stage selection

// Stages that read from the ground truth instead of running the trained
// component; selected on the command line, recorded in every run manifest.
struct OracleStages {
  bool voxel = false;   // stage-1 occupancy taken from the mesh voxelization
  bool refine = false;  // refined field taken from the mesh voxelization
  bool pose = false;    // poses taken from the dataset placement

  bool any() const { return voxel || refine || pose; }

  nlohmann::json to_json() const {
    return {{"voxel", voxel}, {"refine", refine}, {"pose", pose}};
  }
};

// Parses a comma-separated stage list: "voxel", "refine", "pose", or "all".
inline OracleStages parse_oracle_stages(const std::string& list) {
  OracleStages stages;
  std::stringstream ss(list);
  std::string token;
  while (std::getline(ss, token, ',')) {
    // Trim surrounding blanks so "voxel, pose" parses.
    const auto a = token.find_first_not_of(" \t");
    if (a == std::string::npos) continue;
    const auto b = token.find_last_not_of(" \t");
    token = token.substr(a, b - a + 1);
    if (token == "voxel") {
      stages.voxel = true;
    } else if (token == "refine") {
      stages.refine = true;
    } else if (token == "pose") {
      stages.pose = true;
    } else if (token == "all") {
      stages.voxel = stages.refine = stages.pose = true;
    } else {
      throw std::invalid_argument("unknown oracle stage \"" + token +
                                  "\" (expected voxel, refine, pose, or all)");
    }
  }
  return stages;
}

}  // namespace crowdrec

#endif  // CROWDREC_CONFIG_HPP_
