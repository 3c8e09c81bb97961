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

#ifndef CROWDREC_PIPELINE_HPP_
#define CROWDREC_PIPELINE_HPP_

// End-to-end orchestration: dataset generation, the per-person stages
// (voxel occupancy, implicit refinement, pose fitting), scene composition,
// evaluation, and the ablation table.  Every command is a pure function of
// (config, seed, dataset), so a rerun reproduces its artifacts byte for byte.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdrec/config.hpp"
#include "crowdrec/metrics.hpp"
#include "crowdrec/pose.hpp"

#include "json.hpp"

namespace crowdrec {

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  return j;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset generation

inline nlohmann::json dataset_index(const RunConfig& cfg) {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < cfg.dataset.scenes; ++i) {
    const SceneSpec spec = cfg.dataset.scene_spec(cfg.seed, i);
    rows.push_back({{"id", scene_id(i)},
                    {"index", i},
                    {"seed", spec.seed},
                    {"split", scene_split(i)}});
  }
  return {{"config", cfg.to_json()}, {"scenes", rows}};
}

// Builds every scene and writes the dataset tree plus an index manifest;
// returns the dataset root.
inline std::filesystem::path cmd_dataset(const RunConfig& cfg,
                                         const std::filesystem::path& out_root) {
  cfg.validate();
  const std::filesystem::path root = out_root / "dataset";
  std::filesystem::create_directories(root);
  for (int i = 0; i < cfg.dataset.scenes; ++i) {
    const Scene scene = build_scene(cfg.dataset.scene_spec(cfg.seed, i));
    export_scene(scene, root.string());
  }
  detail::write_json(root / "index.json", dataset_index(cfg));
  return root;
}

// ---------------------------------------------------------------------------
// Per-person stage plumbing

// Stage seeds fork from the scene seed, so every command derives the same
// streams no matter which stages ran before it or which toggles are active.
inline std::uint64_t stage_seed(std::uint64_t scene_seed, std::uint64_t stage_tag,
                                std::size_t person) {
  return Rng(scene_seed).fork(stage_tag * 64 + person + 1).next_u64();
}

constexpr std::uint64_t kVoxelStageTag = 1;
constexpr std::uint64_t kRefineStageTag = 2;
constexpr std::uint64_t kMetricStageTag = 3;

// Person lattice: the local-frame bbox grown by `pad` per axis.  Cells stay
// anisotropic on purpose; a cube wastes most nodes on empty space.
inline VoxelLattice person_lattice(const TriMesh& local_mesh, int res, double pad) {
  const auto [lo, hi] = local_mesh.bbox();
  const Vec3 extent = hi - lo;
  const Vec3 margin{extent.x * pad, extent.y * pad, extent.z * pad};
  return VoxelLattice::from_bounds(lo - margin, hi + margin, {res, res, res});
}

// Scene camera re-expressed in the person's local frame.
inline Camera local_camera(const Camera& cam, const RigidTransform& world_from_local) {
  Camera out = cam;
  out.world_to_cam = compose(cam.world_to_cam, world_from_local);
  return out;
}

// Stage-1 inputs for one person: the composite depth and the person's full
// silhouette per view, with silhouette supervision switched off wherever a
// different instance is in front (those pixels say nothing about this body).
inline VoxelTrainData person_train_data(const Scene& scene,
                                        const std::vector<RenderedView>& views,
                                        std::size_t j, const VoxelStageConfig& cfg) {
  if (j >= scene.figures.size())
    throw std::invalid_argument("person_train_data: person index out of range");
  if (views.size() != scene.cameras.size())
    throw std::invalid_argument("person_train_data: view count != camera count");
  VoxelTrainData data;
  data.lattice = person_lattice(scene.figures[j].local_mesh, cfg.lattice_res, cfg.lattice_pad);
  data.occupancy = voxelize(scene.figures[j].local_mesh, data.lattice).values;
  for (std::size_t k = 0; k < views.size(); ++k) {
    ViewObservation obs;
    obs.camera = local_camera(scene.cameras[k], scene.figures[j].world_from_local);
    obs.depth = cap_depth(views[k].depth, cfg.far_depth);
    obs.silhouette = silhouette_from_mask(views[k].instance_mask[j]);
    data.views.push_back(std::move(obs));
    GrayImage sup(views[k].instances.width, views[k].instances.height, 1.0);
    for (std::size_t p = 0; p < sup.pixels.size(); ++p) {
      const std::uint8_t id = views[k].instances.pixels[p];
      if (id != 0 && id != std::uint8_t(j + 1)) sup.pixels[p] = 0.0;
    }
    data.silhouette_supervision.push_back(std::move(sup));
  }
  return data;
}

// Stage 1 for one person: the fused occupancy on the person lattice.  Oracle
// mode voxelizes the ground-truth mesh instead of training the predictor.
// When `run_dir` is non-empty, the grid (and for trained runs the loss curve
// and checkpoint) land there.
inline ScalarGrid run_voxel_stage(const Scene& scene, const std::vector<RenderedView>& views,
                                  std::size_t j, const RunConfig& cfg, bool oracle,
                                  const std::filesystem::path& run_dir = {}) {
  const std::string tag = std::to_string(j);
  VoxelTrainData data = person_train_data(scene, views, j, cfg.voxel);
  ScalarGrid fused;
  if (oracle) {
    fused.lattice = data.lattice;
    fused.values = data.occupancy;
  } else {
    VoxelTrainConfig tc;
    tc.loss = cfg.loss;
    tc.steps = cfg.voxel.steps;
    tc.batch = cfg.voxel.batch;
    tc.gd.lr = cfg.voxel.lr;
    tc.gd.momentum = cfg.voxel.momentum;
    tc.gd.decay = cfg.voxel.decay;
    tc.gd.decay_every = cfg.voxel.decay_every;
    tc.seed = stage_seed(scene.spec.seed, kVoxelStageTag, j);
    tc.silhouette_every = cfg.voxel.silhouette_every;
    tc.silhouette_proxy_res = cfg.voxel.silhouette_proxy_res;
    tc.silhouette.samples_per_ray = cfg.voxel.silhouette_samples_per_ray;
    tc.silhouette.tau = cfg.voxel.silhouette_tau;
    if (cfg.ablation.disable_silhouette) {
      tc.loss.silhouette_weight = 0.0;
      tc.silhouette_every = 0;
    }
    if (cfg.ablation.disable_consistency) tc.loss.consistency_weight = 0.0;
    if (!run_dir.empty()) {
      tc.curve_csv = (run_dir / ("voxel_curve_" + tag + ".csv")).string();
      tc.checkpoint_path = (run_dir / ("voxel_" + tag + ".ckpt")).string();
    }
    const Mlp mlp = train_voxel_stage(data, tc);
    fused = predict_fused_grid(mlp, data.lattice, data.views);
  }
  if (!run_dir.empty()) save_grid((run_dir / ("voxel_" + tag + ".grid")).string(), fused);
  return fused;
}

struct RefineOutput {
  ScalarGrid refined;
  TriMesh local_mesh;
};

// Stage 2 for one person.  Oracle mode hands back the ground-truth shape;
// with the implicit stage disabled the coarse grid is meshed directly.
inline RefineOutput run_refine_stage(const Scene& scene, const std::vector<RenderedView>& views,
                                     std::size_t j, const ScalarGrid& coarse,
                                     const RunConfig& cfg, bool oracle,
                                     const std::filesystem::path& run_dir = {}) {
  const std::string tag = std::to_string(j);
  RefineOutput out;
  if (cfg.ablation.disable_implicit) {
    out.refined = coarse;
    out.local_mesh = extract_refined_mesh(coarse);
    if (!run_dir.empty())
      save_obj((run_dir / ("person_" + tag + ".obj")).string(), out.local_mesh);
    return out;
  }
  if (oracle) {
    out.refined = voxelize(scene.figures[j].local_mesh, refined_lattice(coarse.lattice));
    out.local_mesh = scene.figures[j].local_mesh;
    if (!run_dir.empty()) {
      save_grid((run_dir / ("refined_" + tag + ".grid")).string(), out.refined);
      save_obj((run_dir / ("person_" + tag + ".obj")).string(), out.local_mesh);
    }
    return out;
  }

  const std::size_t v = std::size_t(cfg.refine.input_view);
  if (v >= views.size()) throw std::invalid_argument("refine: input_view out of range");
  ViewFrame frame;
  frame.camera = local_camera(scene.cameras[v], scene.figures[j].world_from_local);
  frame.intensity = views[v].intensity;
  frame.silhouette = silhouette_from_mask(views[v].instance_mask[j]);
  double far = cfg.refine.depth_far;
  if (far == 0.0) {
    // Auto cap: camera-to-lattice distance plus most of the diagonal, so the
    // whole person stays metric and the background clamps just beyond it.
    const Point3 lo = coarse.lattice.bounds_min();
    const Point3 hi = coarse.lattice.bounds_max();
    const Point3 centre = lo + (hi - lo) * 0.5;
    far = (frame.camera.center() - centre).norm() + 0.75 * (hi - lo).norm();
  }
  frame.depth = clamp_depth(views[v].depth, far);

  RefineConfig rc;
  rc.steps = cfg.refine.steps;
  rc.batch = cfg.refine.batch;
  rc.sample_count = cfg.refine.sample_count;
  rc.sigma = cfg.refine.sigma;
  rc.adam.lr = cfg.refine.lr;
  rc.seed = stage_seed(scene.spec.seed, kRefineStageTag, j);
  rc.features = cfg.ablation.features;
  rc.holdout_stride = cfg.refine.holdout_stride;
  rc.eval_every = cfg.refine.eval_every;
  if (!run_dir.empty()) {
    rc.curve_csv = (run_dir / ("refine_curve_" + tag + ".csv")).string();
    rc.checkpoint_path = (run_dir / ("refined_" + tag + ".ckpt")).string();
  }
  const RefineResult rr = refine(coarse, frame, scene.figures[j].local_mesh, rc);
  out.refined = rr.refined;
  if (!run_dir.empty())
    save_grid((run_dir / ("refined_" + tag + ".grid")).string(), out.refined);
  out.local_mesh = extract_refined_mesh(out.refined);
  if (!run_dir.empty())
    save_obj((run_dir / ("person_" + tag + ".obj")).string(), out.local_mesh);
  return out;
}

// ---------------------------------------------------------------------------
// Pose stage, composition, evaluation

struct PersonArtifacts {
  bool reconstructed = false;
  std::string error;    // set when a stage threw
  ScalarGrid coarse;    // stage-1 fused occupancy, local frame
  ScalarGrid refined;   // stage-2 field (equals coarse when implicit disabled)
  TriMesh local_mesh;   // reconstructed surface, local frame
};

// Deterministic vertex subsample used as the pose correspondence set.
inline std::vector<Point3> pose_model_points(const TriMesh& mesh, int count) {
  if (mesh.vertices.empty()) throw std::invalid_argument("pose_model_points: empty mesh");
  const std::size_t n = mesh.vertices.size();
  const std::size_t stride = std::max<std::size_t>(1, n / std::size_t(count));
  std::vector<Point3> points;
  for (std::size_t i = 0; i < n && points.size() < std::size_t(count); i += stride)
    points.push_back(mesh.vertices[i]);
  return points;
}

// Front-instance map restricted to the reconstructed persons, with ids
// renumbered to the compact 1-based order used by the scene fit.
inline InstanceMap compact_front_map(const InstanceMap& full,
                                     const std::vector<int>& compact_of_person) {
  InstanceMap out(full.width, full.height, 0);
  for (std::size_t p = 0; p < full.pixels.size(); ++p) {
    const std::uint8_t id = full.pixels[p];
    if (id == 0) continue;
    const std::size_t person = std::size_t(id - 1);
    if (person < compact_of_person.size() && compact_of_person[person] >= 0)
      out.pixels[p] = std::uint8_t(compact_of_person[person] + 1);
  }
  return out;
}

struct PoseStageOutput {
  std::vector<RigidTransform> fitted;  // indexed by person; identity when failed
  std::vector<int> compact_of_person;  // -1 for failed persons
  SceneFitReport scene_report;
  nlohmann::json poses_json;
  std::vector<double> add_errors;      // reconstructed persons, compact order
};

// Fits 6DOF placements for every reconstructed person: an independent dense
// fit per person, then the composed-scene fit with the ordinal coupling.
// Oracle mode takes the dataset placements.  Writes poses.json and auc.csv
// when `run_dir` is set.
inline PoseStageOutput run_pose_stage(const Scene& scene,
                                      const std::vector<RenderedView>& views,
                                      const std::vector<PersonArtifacts>& persons,
                                      const RunConfig& cfg, bool oracle,
                                      const std::filesystem::path& run_dir = {}) {
  const std::size_t n = persons.size();
  PoseStageOutput out;
  out.fitted.assign(n, RigidTransform{});
  out.compact_of_person.assign(n, -1);

  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < n; ++j)
    if (persons[j].reconstructed) {
      out.compact_of_person[j] = int(kept.size());
      kept.push_back(j);
    }
  if (kept.empty()) throw std::runtime_error("pose: no reconstructed persons");

  std::vector<PoseProblem> problems(kept.size());
  std::vector<TriMesh> locals(kept.size());
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const std::size_t j = kept[k];
    problems[k].model_points = pose_model_points(persons[j].local_mesh, cfg.pose.model_points);
    problems[k].gt = scene.figures[j].world_from_local;
    problems[k].w = cfg.loss.confidence_weight;
    problems[k].gamma = cfg.loss.ordering_weight;
    locals[k] = persons[j].local_mesh;
  }

  std::vector<RigidTransform> fitted(kept.size());
  std::vector<PoseFitReport> reports(kept.size());
  if (oracle) {
    for (std::size_t k = 0; k < kept.size(); ++k) {
      fitted[k] = problems[k].gt;
      reports[k].converged = true;
    }
  } else {
    const PoseFitConfig fit_cfg = cfg.pose.fit(cfg.loss.ordering_weight);
    PoseFitConfig solo_cfg = fit_cfg;
    solo_cfg.gamma = 0.0;
    for (std::size_t k = 0; k < kept.size(); ++k)
      fitted[k] = fit_pose(problems[k], RigidTransform{}, solo_cfg, &reports[k]);
    if (kept.size() > 1 && fit_cfg.gamma > 0.0) {
      const std::size_t v = std::size_t(cfg.refine.input_view);
      const InstanceMap front =
          compact_front_map(views[v].instances, out.compact_of_person);
      fitted = fit_scene_poses(problems, locals, scene.cameras[v], front, fitted, fit_cfg,
                               &out.scene_report);
      for (std::size_t k = 0; k < kept.size(); ++k)
        reports[k] = out.scene_report.per_person[k];
    }
  }

  for (std::size_t k = 0; k < kept.size(); ++k) {
    out.fitted[kept[k]] = fitted[k];
    out.add_errors.push_back(add_error(problems[k].model_points, problems[k].gt, fitted[k]));
  }

  nlohmann::json poses = nlohmann::json::array();
  for (std::size_t j = 0; j < n; ++j)
    poses.push_back({{"person", j + 1},
                     {"reconstructed", persons[j].reconstructed},
                     {"world_from_local", detail::rt_to_json(out.fitted[j])}});
  out.poses_json = {{"report", pose_report_json(problems, fitted, reports,
                                                cfg.pose.auc_max_threshold)},
                    {"poses", poses}};
  if (!run_dir.empty()) {
    detail::write_json(run_dir / "poses.json", out.poses_json);
    write_auc_curve_csv((run_dir / "auc.csv").string(), out.add_errors,
                        cfg.pose.auc_max_threshold);
  }
  return out;
}

// Reads poses.json back into per-person transforms.
inline std::vector<RigidTransform> poses_from_json(const nlohmann::json& doc,
                                                   std::size_t expected) {
  const auto& rows = doc.at("poses");
  if (rows.size() != expected)
    throw std::runtime_error("poses.json: person count mismatch");
  std::vector<RigidTransform> out(expected);
  for (const auto& row : rows)
    out.at(row.at("person").get<std::size_t>() - 1) =
        detail::rt_from_json(row.at("world_from_local"));
  return out;
}

// Composes the reconstructed persons in world space; writes composed.obj and
// compose.json when `run_dir` is set.
inline ComposedScene run_compose_stage(const std::vector<PersonArtifacts>& persons,
                                       const std::vector<RigidTransform>& fitted,
                                       const std::filesystem::path& run_dir = {}) {
  std::vector<TriMesh> locals;
  std::vector<RigidTransform> poses;
  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < persons.size(); ++j)
    if (persons[j].reconstructed) {
      locals.push_back(persons[j].local_mesh);
      poses.push_back(fitted[j]);
      kept.push_back(j);
    }
  if (kept.empty()) throw std::runtime_error("compose: no reconstructed persons");
  ComposedScene composed = compose_scene(locals, poses);
  if (!run_dir.empty()) {
    save_obj((run_dir / "composed.obj").string(), composed.mesh);
    nlohmann::json instances = nlohmann::json::array();
    for (std::size_t k = 0; k < kept.size(); ++k)
      instances.push_back({{"person", kept[k] + 1},
                           {"triangle_begin", composed.triangle_ranges[k][0]},
                           {"triangle_end", composed.triangle_ranges[k][1]},
                           {"world_from_local", detail::rt_to_json(poses[k])}});
    detail::write_json(run_dir / "compose.json", {{"instances", instances}});
  }
  return composed;
}

// Full evaluation of one scene against its ground truth.  Failed persons
// enter as missing instances; per-vertex error maps land in `run_dir`.
inline MetricReport evaluate_scene(const Scene& scene,
                                   const std::vector<RenderedView>& views,
                                   const std::vector<PersonArtifacts>& persons,
                                   const ComposedScene& composed, const RunConfig& cfg,
                                   const std::filesystem::path& run_dir = {}) {
  const std::size_t n = persons.size();
  MetricReport report;

  std::vector<TriMesh> recon_world(n);
  std::vector<TriMesh> gt_world(n);
  std::vector<RigidTransform> gt_poses(n);
  std::vector<TriMesh> gt_locals(n);
  for (std::size_t j = 0; j < n; ++j) {
    gt_world[j] = scene.world_mesh(j);
    gt_poses[j] = scene.figures[j].world_from_local;
    gt_locals[j] = scene.figures[j].local_mesh;
  }
  {
    std::size_t k = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (persons[j].reconstructed) recon_world[j] = composed.instance_meshes[k++];
  }

  double cd_sum = 0.0, p2s_v_sum = 0.0, p2s_s_sum = 0.0;
  std::size_t ok = 0;
  for (std::size_t j = 0; j < n; ++j) {
    InstanceMetrics im;
    im.instance = int(j + 1);
    im.reconstructed = persons[j].reconstructed;
    if (persons[j].reconstructed) {
      Rng rng(stage_seed(scene.spec.seed, kMetricStageTag, j));
      Rng rng_a = rng.fork(1);
      Rng rng_b = rng.fork(2);
      std::vector<Point3> pa, pb;
      for (const auto& s : sample_surface(recon_world[j], cfg.metrics.surface_samples, rng_a))
        pa.push_back(s.position);
      for (const auto& s : sample_surface(gt_world[j], cfg.metrics.surface_samples, rng_b))
        pb.push_back(s.position);
      im.cd = chamfer(pa, pb);
      const P2sResult p = p2s(recon_world[j], gt_world[j], cfg.metrics.p2s_samples,
                              rng.fork(3).next_u64());
      im.p2s_vertex = p.vertex_mean;
      im.p2s_sample = p.sample_mean;
      if (!run_dir.empty())
        write_error_map_obj((run_dir / ("error_map_" + std::to_string(j) + ".obj")).string(),
                            recon_world[j], p.vertex_errors);
      cd_sum += im.cd;
      p2s_v_sum += im.p2s_vertex;
      p2s_s_sum += im.p2s_sample;
      ++ok;
    } else {
      report.notices.push_back("instance " + std::to_string(j + 1) +
                               " reconstruction failed: " + persons[j].error);
    }
    report.per_instance.push_back(im);
  }
  if (ok == 0) throw std::runtime_error("evaluate: no reconstructed persons");
  report.cd = cd_sum / double(ok);
  report.p2s = p2s_v_sum / double(ok);
  report.p2s_samples = p2s_s_sum / double(ok);

  std::vector<std::vector<MaskImage>> gt_masks;
  for (const auto& rv : views) gt_masks.push_back(rv.instance_mask);
  const Iou2dResult iou = iou2d(recon_world, scene.cameras, gt_masks);
  report.iou2d = iou.mean;
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t v = 0; v < views.size(); ++v) acc += iou.per[v][j];
    report.per_instance[j].iou2d = acc / double(views.size());
  }
  for (const auto& note : iou.notices) report.notices.push_back(note);

  // Scene-level volumetric IoU on a lattice covering both compositions.
  const ComposedScene gt_composed = compose_scene(gt_locals, gt_poses);
  auto [lo, hi] = gt_composed.mesh.bbox();
  const auto [rlo, rhi] = composed.mesh.bbox();
  lo = lo.cwise_min(rlo);
  hi = hi.cwise_max(rhi);
  const Vec3 margin = (hi - lo) * 0.06;
  const int r = cfg.metrics.scene_grid_res;
  const VoxelLattice lat = VoxelLattice::from_bounds(lo - margin, hi + margin, {r, r, r});
  std::string notice;
  report.iou3d = iou3d(voxelize(composed.mesh, lat), voxelize(gt_composed.mesh, lat), 0.5,
                       &notice);
  if (!notice.empty()) report.notices.push_back(notice);

  report.validate();
  return report;
}

// ---------------------------------------------------------------------------
// Scene pipeline

struct PipelineResult {
  std::vector<PersonArtifacts> persons;
  PoseStageOutput pose;
  ComposedScene composed;
  MetricReport report;
  nlohmann::json manifest;
};

inline std::filesystem::path run_dir_for(const std::filesystem::path& out_root, int index) {
  return out_root / "runs" / scene_id(index);
}

// Runs every stage on one scene.  A person whose reconstruction throws is
// recorded and skipped; the scene fails only when nobody survives or a
// scene-level artifact cannot be produced.
inline PipelineResult cmd_pipeline(const RunConfig& cfg,
                                   const std::filesystem::path& dataset_root, int index,
                                   const std::filesystem::path& out_root,
                                   const OracleStages& oracle,
                                   bool write_artifacts = true) {
  cfg.validate();
  const Scene scene = load_scene(dataset_root.string(), index);
  const std::vector<RenderedView> views = render_views(scene);
  std::filesystem::path run_dir;
  if (write_artifacts) {
    run_dir = run_dir_for(out_root, index);
    std::filesystem::create_directories(run_dir);
  }

  PipelineResult result;
  result.persons.resize(scene.figures.size());
  for (std::size_t j = 0; j < scene.figures.size(); ++j) {
    PersonArtifacts& person = result.persons[j];
    try {
      person.coarse = run_voxel_stage(scene, views, j, cfg, oracle.voxel, run_dir);
      RefineOutput refined =
          run_refine_stage(scene, views, j, person.coarse, cfg, oracle.refine, run_dir);
      person.refined = std::move(refined.refined);
      person.local_mesh = std::move(refined.local_mesh);
      person.reconstructed = true;
    } catch (const std::exception& e) {
      person.error = e.what();
    }
  }

  result.pose = run_pose_stage(scene, views, result.persons, cfg, oracle.pose, run_dir);
  result.composed = run_compose_stage(result.persons, result.pose.fitted, run_dir);
  result.report = evaluate_scene(scene, views, result.persons, result.composed, cfg,
                                 run_dir);

  nlohmann::json person_rows = nlohmann::json::array();
  for (std::size_t j = 0; j < result.persons.size(); ++j)
    person_rows.push_back({{"person", j + 1},
                           {"reconstructed", result.persons[j].reconstructed},
                           {"error", result.persons[j].error}});
  result.manifest = {{"scene", scene_id(index)},
                     {"index", index},
                     {"config", cfg.to_json()},
                     {"oracle", oracle.to_json()},
                     {"persons", person_rows}};
  if (write_artifacts) {
    detail::write_json(run_dir / "metrics.json", result.report.to_json());
    detail::write_text(run_dir / "metrics.txt", result.report.table());
    std::vector<std::string> names;
    for (const auto& entry : std::filesystem::directory_iterator(run_dir))
      names.push_back(entry.path().filename().string());
    names.erase(std::remove(names.begin(), names.end(), std::string("pipeline.json")),
                names.end());
    std::sort(names.begin(), names.end());
    result.manifest["artifacts"] = names;
    detail::write_json(run_dir / "pipeline.json", result.manifest);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Stage commands (disk round trip)

// Stage 1 for every person of one scene.
inline void cmd_train_voxel(const RunConfig& cfg, const std::filesystem::path& dataset_root,
                            int index, const std::filesystem::path& out_root, bool oracle) {
  cfg.validate();
  const Scene scene = load_scene(dataset_root.string(), index);
  const std::vector<RenderedView> views = render_views(scene);
  const std::filesystem::path run_dir = run_dir_for(out_root, index);
  std::filesystem::create_directories(run_dir);
  for (std::size_t j = 0; j < scene.figures.size(); ++j)
    run_voxel_stage(scene, views, j, cfg, oracle, run_dir);
}

// Stage 2 for every person, reading the stage-1 grids from the run directory.
inline void cmd_refine(const RunConfig& cfg, const std::filesystem::path& dataset_root,
                       int index, const std::filesystem::path& out_root, bool oracle) {
  cfg.validate();
  const Scene scene = load_scene(dataset_root.string(), index);
  const std::vector<RenderedView> views = render_views(scene);
  const std::filesystem::path run_dir = run_dir_for(out_root, index);
  for (std::size_t j = 0; j < scene.figures.size(); ++j) {
    const auto grid_path = run_dir / ("voxel_" + std::to_string(j) + ".grid");
    if (!std::filesystem::exists(grid_path))
      throw std::runtime_error("refine: missing " + grid_path.string() +
                               " (run train-voxel first)");
    const ScalarGrid coarse = load_grid(grid_path.string());
    run_refine_stage(scene, views, j, coarse, cfg, oracle, run_dir);
  }
}

// Loads the per-person artifacts a staged pose/compose/eval command needs.
inline std::vector<PersonArtifacts> load_person_artifacts(
    const Scene& scene, const std::filesystem::path& run_dir) {
  std::vector<PersonArtifacts> persons(scene.figures.size());
  bool any = false;
  for (std::size_t j = 0; j < persons.size(); ++j) {
    const auto mesh_path = run_dir / ("person_" + std::to_string(j) + ".obj");
    if (!std::filesystem::exists(mesh_path)) {
      persons[j].error = "missing " + mesh_path.string();
      continue;
    }
    persons[j].local_mesh = load_obj(mesh_path.string());
    persons[j].reconstructed = true;
    any = true;
  }
  if (!any)
    throw std::runtime_error("no person meshes under " + run_dir.string() +
                             " (run refine first)");
  return persons;
}

inline void cmd_pose(const RunConfig& cfg, const std::filesystem::path& dataset_root,
                     int index, const std::filesystem::path& out_root, bool oracle) {
  cfg.validate();
  const Scene scene = load_scene(dataset_root.string(), index);
  const std::vector<RenderedView> views = render_views(scene);
  const std::filesystem::path run_dir = run_dir_for(out_root, index);
  const auto persons = load_person_artifacts(scene, run_dir);
  run_pose_stage(scene, views, persons, cfg, oracle, run_dir);
}

inline void cmd_compose(const RunConfig& cfg, const std::filesystem::path& dataset_root,
                        int index, const std::filesystem::path& out_root) {
  cfg.validate();
  const Scene scene = load_scene(dataset_root.string(), index);
  const std::filesystem::path run_dir = run_dir_for(out_root, index);
  const auto persons = load_person_artifacts(scene, run_dir);
  const auto poses =
      poses_from_json(detail::read_json(run_dir / "poses.json"), persons.size());
  run_compose_stage(persons, poses, run_dir);
}

inline void cmd_eval(const RunConfig& cfg, const std::filesystem::path& dataset_root,
                     int index, const std::filesystem::path& out_root) {
  cfg.validate();
  const Scene scene = load_scene(dataset_root.string(), index);
  const std::vector<RenderedView> views = render_views(scene);
  const std::filesystem::path run_dir = run_dir_for(out_root, index);
  const auto persons = load_person_artifacts(scene, run_dir);
  const auto poses =
      poses_from_json(detail::read_json(run_dir / "poses.json"), persons.size());
  const ComposedScene composed = run_compose_stage(persons, poses);
  const MetricReport report =
      evaluate_scene(scene, views, persons, composed, cfg, run_dir);
  detail::write_json(run_dir / "metrics.json", report.to_json());
  detail::write_text(run_dir / "metrics.txt", report.table());
}

// ---------------------------------------------------------------------------
// Ablation table

struct AblationRowSpec {
  std::string key;    // machine name, used in JSON and file names
  std::string label;  // table label
  AblationConfig toggles;
};

inline std::vector<AblationRowSpec> ablation_rows() {
  std::vector<AblationRowSpec> rows(6);
  rows[0] = {"proposed", "proposed", {}};
  rows[1] = {"no_silhouette", "w/o silhouette", {}};
  rows[1].toggles.disable_silhouette = true;
  rows[2] = {"no_consistency", "w/o consistency", {}};
  rows[2].toggles.disable_consistency = true;
  rows[3] = {"no_implicit", "w/o implicit", {}};
  rows[3].toggles.disable_implicit = true;
  rows[4] = {"occupancy_depth", "occupancy+depth", {}};
  rows[4].toggles.features.image = false;
  rows[5] = {"occupancy_image", "occupancy+image", {}};
  rows[5].toggles.features.depth_gap = false;
  return rows;
}

struct AblationCell {
  bool ok = false;
  std::string error;
  MetricReport report;
};

struct AblationTable {
  std::vector<AblationRowSpec> rows;
  std::vector<int> scene_indices;
  std::vector<std::vector<AblationCell>> cells;  // [row][scene]

  // Means over the scenes whose cell succeeded; zero when none did.
  struct RowMean {
    int scenes = 0;
    double cd = 0.0, p2s = 0.0, p2s_samples = 0.0, iou3d = 0.0, iou2d = 0.0;
  };

  RowMean row_mean(std::size_t r) const {
    RowMean m;
    for (const auto& cell : cells[r]) {
      if (!cell.ok) continue;
      m.cd += cell.report.cd;
      m.p2s += cell.report.p2s;
      m.p2s_samples += cell.report.p2s_samples;
      m.iou3d += cell.report.iou3d;
      m.iou2d += cell.report.iou2d;
      ++m.scenes;
    }
    if (m.scenes > 0) {
      m.cd /= m.scenes;
      m.p2s /= m.scenes;
      m.p2s_samples /= m.scenes;
      m.iou3d /= m.scenes;
      m.iou2d /= m.scenes;
    }
    return m;
  }

  std::string table_text() const {
    std::string out = "row                    cd       p2s     iou3d     iou2d"
                      "   (cd/p2s in 1e-2 scene units)\n";
    char line[256];
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const RowMean m = row_mean(r);
      if (m.scenes == 0) {
        std::snprintf(line, sizeof line, "%-18s  failed\n", rows[r].label.c_str());
      } else {
        std::snprintf(line, sizeof line, "%-18s %8.4f  %8.4f  %8.4f  %8.4f\n",
                      rows[r].label.c_str(), 100.0 * m.cd, 100.0 * m.p2s, m.iou3d, m.iou2d);
      }
      out += line;
    }
    std::size_t failed = 0, total = 0;
    for (const auto& row : cells)
      for (const auto& cell : row) {
        failed += cell.ok ? 0 : 1;
        ++total;
      }
    out += "cells: " + std::to_string(total - failed) + "/" + std::to_string(total) +
           " ok over " + std::to_string(scene_indices.size()) + " scenes\n";
    return out;
  }

  std::string table_csv() const {
    std::string out = "row,scenes,cd,p2s,p2s_samples,iou3d,iou2d\n";
    char line[256];
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const RowMean m = row_mean(r);
      std::snprintf(line, sizeof line, "%s,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    rows[r].key.c_str(), m.scenes, m.cd, m.p2s, m.p2s_samples, m.iou3d,
                    m.iou2d);
      out += line;
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      nlohmann::json cells_json = nlohmann::json::array();
      for (std::size_t s = 0; s < cells[r].size(); ++s) {
        nlohmann::json cell = {{"scene", scene_indices[s]}, {"ok", cells[r][s].ok}};
        if (cells[r][s].ok)
          cell["report"] = cells[r][s].report.to_json();
        else
          cell["error"] = cells[r][s].error;
        cells_json.push_back(cell);
      }
      const RowMean m = row_mean(r);
      rows_json.push_back({{"key", rows[r].key},
                           {"label", rows[r].label},
                           {"toggles", rows[r].toggles.to_json()},
                           {"cells", cells_json},
                           {"mean",
                            {{"scenes", m.scenes},
                             {"cd", m.cd},
                             {"p2s", m.p2s},
                             {"p2s_samples", m.p2s_samples},
                             {"iou3d", m.iou3d},
                             {"iou2d", m.iou2d}}}});
    }
    return {{"rows", rows_json}};
  }
};

// One scene evaluated under one toggle set, with stage outputs shared across
// rows through the caller's caches (keyed by the toggles that matter to the
// stage, so identical work is never repeated).
namespace detail {

inline std::string voxel_cache_key(const AblationConfig& ab) {
  return std::string("v") + (ab.disable_silhouette ? "1" : "0") +
         (ab.disable_consistency ? "1" : "0");
}

inline std::string refine_cache_key(const AblationConfig& ab) {
  return voxel_cache_key(ab) + "r" + (ab.disable_implicit ? "1" : "0") +
         (ab.features.occupancy ? "1" : "0") + (ab.features.image ? "1" : "0") +
         (ab.features.depth_gap ? "1" : "0");
}

}  // namespace detail

// Builds the six-row ablation table over the given scenes; writes table.txt,
// table.csv, and ablation.json under <out_root>/ablation.
inline AblationTable cmd_ablate(const RunConfig& cfg,
                                const std::filesystem::path& dataset_root,
                                const std::vector<int>& scene_indices,
                                const std::filesystem::path& out_root,
                                const OracleStages& oracle) {
  cfg.validate();
  if (scene_indices.empty()) throw std::invalid_argument("ablate: no scenes given");

  AblationTable table;
  table.rows = ablation_rows();
  table.scene_indices = scene_indices;
  table.cells.assign(table.rows.size(), std::vector<AblationCell>(scene_indices.size()));

  for (std::size_t s = 0; s < scene_indices.size(); ++s) {
    Scene scene;
    std::vector<RenderedView> views;
    try {
      scene = load_scene(dataset_root.string(), scene_indices[s]);
      views = render_views(scene);
    } catch (const std::exception& e) {
      for (std::size_t r = 0; r < table.rows.size(); ++r)
        table.cells[r][s].error = e.what();
      continue;
    }
    std::map<std::string, std::vector<ScalarGrid>> voxel_cache;
    std::map<std::string, std::vector<PersonArtifacts>> person_cache;

    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      AblationCell& cell = table.cells[r][s];
      try {
        RunConfig row_cfg = cfg;
        row_cfg.ablation = table.rows[r].toggles;

        const std::string vkey = detail::voxel_cache_key(row_cfg.ablation);
        if (!voxel_cache.count(vkey)) {
          std::vector<ScalarGrid> grids(scene.figures.size());
          for (std::size_t j = 0; j < scene.figures.size(); ++j)
            grids[j] = run_voxel_stage(scene, views, j, row_cfg, oracle.voxel);
          voxel_cache[vkey] = std::move(grids);
        }

        const std::string rkey = detail::refine_cache_key(row_cfg.ablation);
        if (!person_cache.count(rkey)) {
          std::vector<PersonArtifacts> persons(scene.figures.size());
          for (std::size_t j = 0; j < scene.figures.size(); ++j) {
            persons[j].coarse = voxel_cache[vkey][j];
            try {
              RefineOutput out = run_refine_stage(scene, views, j, persons[j].coarse,
                                                  row_cfg, oracle.refine);
              persons[j].refined = std::move(out.refined);
              persons[j].local_mesh = std::move(out.local_mesh);
              persons[j].reconstructed = true;
            } catch (const std::exception& e) {
              persons[j].error = e.what();
            }
          }
          person_cache[rkey] = std::move(persons);
        }

        const std::vector<PersonArtifacts>& persons = person_cache[rkey];
        const PoseStageOutput pose =
            run_pose_stage(scene, views, persons, row_cfg, oracle.pose);
        const ComposedScene composed = run_compose_stage(persons, pose.fitted);
        cell.report = evaluate_scene(scene, views, persons, composed, row_cfg);
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
    }
  }

  const std::filesystem::path dir = out_root / "ablation";
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "table.txt", table.table_text());
  detail::write_text(dir / "table.csv", table.table_csv());
  detail::write_json(dir / "ablation.json", table.to_json());
  return table;
}

}  // namespace crowdrec

#endif  // CROWDREC_PIPELINE_HPP_
