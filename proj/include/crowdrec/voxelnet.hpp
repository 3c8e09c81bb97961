// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Coarse occupancy stage: a small per-point network predicts one occupancy
// grid per view from positional encodings plus image samples, trained with a
// class-weighted voxel cross entropy, a cross-view consistency term, and a
// soft-rendered silhouette term.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdrec/core.hpp"
#include "crowdrec/diff_render.hpp"
#include "crowdrec/image.hpp"
#include "crowdrec/mlp.hpp"
#include "crowdrec/tape.hpp"

namespace crowdrec {

// Weights shared by the training stages. All must be nonnegative; the class
// balance lives in (0,1) and splits the voxel cross entropy between occupied
// and free nodes.
struct LossConfig {
  double consistency_weight = 0.2;     // cross-view grid agreement
  double silhouette_weight = 0.1;      // soft-rendered silhouette match
  double ordering_weight = 0.1;        // depth-ordering term (pose stage)
  double occupied_class_weight = 0.7;  // class balance in the voxel BCE
  double confidence_weight = 0.001;    // confidence regularizer (pose stage)

  void validate() const {
    if (consistency_weight < 0 || silhouette_weight < 0 ||
        ordering_weight < 0 || confidence_weight < 0)
      throw std::invalid_argument("LossConfig: negative weight");
    if (!(occupied_class_weight > 0.0 && occupied_class_weight < 1.0))
      throw std::invalid_argument(
          "LossConfig: occupied_class_weight outside (0,1)");
  }
};

// A value grid with its lattice and the rigid transform placing the lattice
// in world coordinates; identity when the lattice is world-aligned.
struct FramedGrid {
  diff::Var values;
  VoxelLattice lattice;
  RigidTransform grid_to_world;
};

namespace diff {

inline constexpr double kProbFloor = 1e-7;  // keeps the BCE logs finite

// Class-weighted binary cross entropy between each view's predicted grid and
// the shared occupancy target, averaged over every node of every view.
inline Var loss_3d(Tape& t, const std::vector<Var>& view_grids,
                   const std::vector<double>& target,
                   double occupied_class_weight) {
  if (view_grids.empty()) throw std::invalid_argument("loss_3d: no views");
  if (!(occupied_class_weight > 0.0 && occupied_class_weight < 1.0))
    throw std::invalid_argument("loss_3d: class weight outside (0,1)");
  const std::size_t m = target.size();
  if (m == 0) throw std::invalid_argument("loss_3d: empty target");
  std::vector<double> w_occ(m), w_free(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (target[i] < 0.0 || target[i] > 1.0)
      throw std::invalid_argument("loss_3d: target outside [0,1]");
    w_occ[i] = occupied_class_weight * target[i];
    w_free[i] = (1.0 - occupied_class_weight) * (1.0 - target[i]);
  }
  Var acc = t.leaf_scalar(0.0);
  for (const Var& g : view_grids) {
    if (t.value(g).size() != m)
      throw std::invalid_argument("loss_3d: grid size != target size");
    const Var p = t.clamp(g, kProbFloor, 1.0 - kProbFloor);
    const Var occ = t.mul_const(t.log_(p), w_occ);
    const Var free = t.mul_const(t.log_(t.add_scalar(t.neg(p), 1.0)), w_free);
    acc = t.add(acc, t.add(t.sum(occ), t.sum(free)));
  }
  return t.scale(acc, -1.0 / (double(m) * double(view_grids.size())));
}

// Cross-view consistency on a shared lattice: mean squared disagreement over
// every node and unordered view pair. A single view has nothing to compare,
// so the loss is zero; *single_view_notice reports that.
inline Var loss_mv(Tape& t, const std::vector<Var>& view_grids,
                   bool* single_view_notice = nullptr) {
  if (single_view_notice) *single_view_notice = view_grids.size() < 2;
  if (view_grids.empty()) throw std::invalid_argument("loss_mv: no views");
  if (view_grids.size() < 2) return t.leaf_scalar(0.0);
  const std::size_t m = t.value(view_grids[0]).size();
  for (const Var& g : view_grids)
    if (t.value(g).size() != m)
      throw std::invalid_argument("loss_mv: grid sizes differ");
  Var acc = t.leaf_scalar(0.0);
  std::size_t pairs = 0;
  for (std::size_t v = 0; v < view_grids.size(); ++v)
    for (std::size_t u = v + 1; u < view_grids.size(); ++u) {
      const Var d = t.sub(view_grids[v], view_grids[u]);
      acc = t.add(acc, t.sum(t.mul(d, d)));
      ++pairs;
    }
  return t.scale(acc, 1.0 / (double(m) * double(pairs)));
}

// General form for grids living on per-view lattices: each grid is first
// trilinearly resampled at the canonical lattice nodes. With identical
// frames the resampling is the identity and this matches the overload above.
inline Var loss_mv(Tape& t, const std::vector<FramedGrid>& views,
                   const VoxelLattice& canonical,
                   const RigidTransform& canonical_to_world = {},
                   bool* single_view_notice = nullptr) {
  canonical.validate();
  std::vector<Point3> world_nodes;
  world_nodes.reserve(canonical.node_count());
  for (int k = 0; k < canonical.res[2]; ++k)
    for (int j = 0; j < canonical.res[1]; ++j)
      for (int i = 0; i < canonical.res[0]; ++i)
        world_nodes.push_back(canonical_to_world.apply(canonical.node_pos(i, j, k)));
  std::vector<Var> resampled;
  resampled.reserve(views.size());
  for (const auto& vg : views) {
    const RigidTransform world_to_grid = vg.grid_to_world.inverse();
    std::vector<Point3> pts;
    pts.reserve(world_nodes.size());
    for (const auto& p : world_nodes) pts.push_back(world_to_grid.apply(p));
    resampled.push_back(t.sample_trilinear(vg.values, vg.lattice, pts));
  }
  return loss_mv(t, resampled, single_view_notice);
}

// Target silhouette plus a per-pixel supervision mask; an empty mask means
// every pixel counts, zero disables a pixel (an occluded region, say).
struct SilhouetteTarget {
  GrayImage target;
  GrayImage supervision;
};

// Masked L1 between soft-rendered and target silhouettes, averaged over all
// view x person x pixel triples. A fully masked view contributes nothing to
// the numerator but still counts in the mean.
inline Var loss_os(Tape& t, const std::vector<FramedGrid>& persons,
                   const std::vector<Camera>& cameras,
                   const std::vector<std::vector<SilhouetteTarget>>& targets,
                   const SoftSilhouetteOptions& opts = {}) {
  if (persons.empty()) throw std::invalid_argument("loss_os: no persons");
  if (cameras.empty()) throw std::invalid_argument("loss_os: no views");
  if (targets.size() != cameras.size())
    throw std::invalid_argument("loss_os: target rows != view count");
  double denom = 0.0;
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    if (targets[v].size() != persons.size())
      throw std::invalid_argument("loss_os: target cols != person count");
    denom += double(persons.size()) * cameras[v].width * cameras[v].height;
  }
  Var acc = t.leaf_scalar(0.0);
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    const Camera& cam = cameras[v];
    for (std::size_t j = 0; j < persons.size(); ++j) {
      const auto& tgt = targets[v][j];
      if (tgt.target.width != cam.width || tgt.target.height != cam.height)
        throw std::invalid_argument("loss_os: silhouette size != image size");
      if (!tgt.supervision.pixels.empty() &&
          (tgt.supervision.width != cam.width ||
           tgt.supervision.height != cam.height))
        throw std::invalid_argument("loss_os: mask size != image size");
      const Var shat =
          soft_silhouette(t, persons[j].values, persons[j].lattice,
                          persons[j].grid_to_world, cam, opts);
      Var l1 = t.abs_(t.sub(shat, t.leaf(tgt.target.pixels)));
      if (!tgt.supervision.pixels.empty())
        l1 = t.mul_const(l1, tgt.supervision.pixels);
      acc = t.add(acc, t.sum(l1));
    }
  }
  return t.scale(acc, 1.0 / denom);
}

}  // namespace diff

// -- per-point occupancy predictor --------------------------------------------

inline constexpr int kOccupancyFrequencies = 4;
inline constexpr int kOccupancyFeatureWidth = 6 * kOccupancyFrequencies + 2;

inline MlpSpec occupancy_predictor_spec() {
  MlpSpec spec;
  spec.layers = {kOccupancyFeatureWidth, 64, 64, 64, 1};
  spec.hidden = Activation::kTanh;
  spec.output = Activation::kLogistic;
  return spec;
}

// One observed view: camera plus the images the predictor samples. Depth is
// stored capped and scaled so every input stays O(1).
struct ViewObservation {
  Camera camera;
  GrayImage depth;
  GrayImage silhouette;
};

// Background depth is infinite in rendered maps; the predictor input replaces
// it by a far cap and rescales to [0,1].
inline GrayImage cap_depth(const DepthImage& raw, double far_depth = 8.0) {
  if (!(far_depth > 0.0)) throw std::invalid_argument("cap_depth: far <= 0");
  GrayImage out(raw.width, raw.height, 1.0);
  for (std::size_t i = 0; i < raw.pixels.size(); ++i)
    out.pixels[i] = std::min(raw.pixels[i], far_depth) / far_depth;
  return out;
}

inline GrayImage silhouette_from_mask(const MaskImage& mask) {
  GrayImage out(mask.width, mask.height, 0.0);
  for (std::size_t i = 0; i < mask.pixels.size(); ++i)
    out.pixels[i] = mask.pixels[i] ? 1.0 : 0.0;
  return out;
}

// Feature rows for the given lattice nodes under one view: a sinusoidal
// encoding of the node position in normalized lattice coordinates, then the
// view's depth and silhouette bilinearly sampled at the node's projection.
// Nodes projecting outside the image read far depth and empty silhouette.
inline void occupancy_features(const VoxelLattice& lattice,
                               const ViewObservation& view,
                               const std::vector<std::size_t>& nodes,
                               std::vector<double>* rows) {
  lattice.validate();
  if (view.depth.width != view.camera.width ||
      view.depth.height != view.camera.height ||
      view.silhouette.width != view.camera.width ||
      view.silhouette.height != view.camera.height)
    throw std::invalid_argument("occupancy_features: image size != camera");
  const Point3 lo = lattice.bounds_min();
  const Point3 hi = lattice.bounds_max();
  rows->clear();
  rows->reserve(nodes.size() * kOccupancyFeatureWidth);
  for (std::size_t idx : nodes) {
    const int i = int(idx % std::size_t(lattice.res[0]));
    const int j = int((idx / std::size_t(lattice.res[0])) % std::size_t(lattice.res[1]));
    const int k = int(idx / (std::size_t(lattice.res[0]) * lattice.res[1]));
    const Point3 p = lattice.node_pos(i, j, k);
    for (int a = 0; a < 3; ++a) {
      const double q = 2.0 * (p[a] - lo[a]) / (hi[a] - lo[a]) - 1.0;
      for (int f = 0; f < kOccupancyFrequencies; ++f) {
        const double arg = kPi * double(1 << f) * q;
        rows->push_back(std::sin(arg));
        rows->push_back(std::cos(arg));
      }
    }
    const auto pr = view.camera.project(p);
    if (pr && view.camera.in_image(pr->u, pr->v)) {
      rows->push_back(bilinear_sample(view.depth, pr->u, pr->v));
      rows->push_back(bilinear_sample(view.silhouette, pr->u, pr->v));
    } else {
      rows->push_back(1.0);
      rows->push_back(0.0);
    }
  }
}

inline std::vector<std::size_t> all_nodes(const VoxelLattice& lattice) {
  std::vector<std::size_t> nodes(lattice.node_count());
  for (std::size_t i = 0; i < nodes.size(); ++i) nodes[i] = i;
  return nodes;
}

inline ScalarGrid predict_view_grid(const Mlp& mlp, const VoxelLattice& lattice,
                                    const ViewObservation& view) {
  std::vector<double> rows;
  occupancy_features(lattice, view, all_nodes(lattice), &rows);
  return ScalarGrid(lattice, mlp.eval(rows, int(lattice.node_count())));
}

// The fused stage output: mean of the per-view grids.
inline ScalarGrid predict_fused_grid(const Mlp& mlp,
                                     const VoxelLattice& lattice,
                                     const std::vector<ViewObservation>& views) {
  if (views.empty())
    throw std::invalid_argument("predict_fused_grid: no views");
  ScalarGrid fused = ScalarGrid::filled(lattice, 0.0);
  for (const auto& view : views) {
    const ScalarGrid g = predict_view_grid(mlp, lattice, view);
    for (std::size_t i = 0; i < fused.values.size(); ++i)
      fused.values[i] += g.values[i] / double(views.size());
  }
  return fused;
}

// Full-grid class-weighted BCE of a trained model, for before/after reports.
inline double occupancy_bce(const Mlp& mlp, const VoxelLattice& lattice,
                            const std::vector<ViewObservation>& views,
                            const std::vector<double>& target,
                            double occupied_class_weight) {
  if (target.size() != lattice.node_count())
    throw std::invalid_argument("occupancy_bce: target size != node count");
  double acc = 0.0;
  for (const auto& view : views) {
    const ScalarGrid g = predict_view_grid(mlp, lattice, view);
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double p = std::clamp(g.values[i], diff::kProbFloor,
                                  1.0 - diff::kProbFloor);
      acc -= occupied_class_weight * target[i] * std::log(p) +
             (1.0 - occupied_class_weight) * (1.0 - target[i]) *
                 std::log(1.0 - p);
    }
  }
  return acc / (double(target.size()) * double(views.size()));
}

// -- training -----------------------------------------------------------------

struct VoxelTrainData {
  VoxelLattice lattice;
  RigidTransform grid_to_world;   // identity for a world-aligned lattice
  std::vector<double> occupancy;  // target per node
  std::vector<ViewObservation> views;
  std::vector<GrayImage> silhouette_supervision;  // per view; empty = all on

  void validate() const {
    lattice.validate();
    if (occupancy.size() != lattice.node_count())
      throw std::invalid_argument("VoxelTrainData: target size != node count");
    if (views.empty()) throw std::invalid_argument("VoxelTrainData: no views");
    if (!silhouette_supervision.empty() &&
        silhouette_supervision.size() != views.size())
      throw std::invalid_argument("VoxelTrainData: mask count != view count");
  }
};

struct VoxelTrainConfig {
  LossConfig loss;
  int steps = 2000;
  int batch = 256;
  GdConfig gd;
  std::uint64_t seed = 0;
  int silhouette_every = 5;       // cadence of the silhouette term; 0 = off
  int silhouette_proxy_res = 12;  // coarse lattice the term renders from
  SoftSilhouetteOptions silhouette{32, 0.05};
  std::string curve_csv;          // loss curve output, empty = skip
  std::string checkpoint_path;    // final model output, empty = skip

  void validate() const {
    loss.validate();
    if (steps < 1 || batch < 1)
      throw std::invalid_argument("VoxelTrainConfig: steps/batch < 1");
    if (silhouette_every < 0 || silhouette_proxy_res < 2)
      throw std::invalid_argument("VoxelTrainConfig: bad silhouette params");
  }
};

struct VoxelCurveRow {
  int step = 0;
  double total = 0.0, bce = 0.0, consistency = 0.0;
  double silhouette = -1.0;  // negative marks steps that skipped the term
};

struct VoxelTrainReport {
  double initial_bce = 0.0;  // full-grid, all views, before training
  double final_bce = 0.0;
  int steps = 0;
  std::vector<VoxelCurveRow> curve;
};

inline void write_curve_csv(const std::string& path,
                            const std::vector<VoxelCurveRow>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_curve_csv: cannot open " + path);
  out << "step,total,bce,consistency,silhouette\n";
  char buf[128];
  for (const auto& row : curve) {
    out << row.step << ',';
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", row.total, row.bce,
                  row.consistency);
    out << buf << ',';
    if (row.silhouette >= 0.0) {
      std::snprintf(buf, sizeof(buf), "%.17g", row.silhouette);
      out << buf;
    }
    out << '\n';
  }
}

// Minibatch gradient descent on the per-point predictor. The voxel BCE and
// the consistency term run every step on a random node batch; the silhouette
// term renders a coarse proxy grid on a fixed cadence. Deterministic in the
// seed, single threaded; a non-finite loss aborts with the failing step.
inline Mlp train_voxel_stage(const VoxelTrainData& data,
                             const VoxelTrainConfig& cfg,
                             VoxelTrainReport* report = nullptr) {
  data.validate();
  cfg.validate();
  const std::size_t n_views = data.views.size();
  const std::size_t node_count = data.lattice.node_count();

  Rng rng(cfg.seed);
  Mlp mlp = Mlp::init(occupancy_predictor_spec(), rng.fork(1).next_u64());
  Rng batch_rng = rng.fork(2);

  VoxelTrainReport local;
  VoxelTrainReport& rep = report ? *report : local;
  rep.initial_bce = occupancy_bce(mlp, data.lattice, data.views,
                                  data.occupancy, cfg.loss.occupied_class_weight);

  // The silhouette term needs a dense grid; a coarse proxy over the same
  // bounds keeps it affordable. Its features never change, so build once.
  const bool use_silhouette =
      cfg.loss.silhouette_weight > 0.0 && cfg.silhouette_every > 0;
  VoxelLattice proxy;
  std::vector<std::vector<double>> proxy_rows(n_views);
  std::vector<std::vector<diff::SilhouetteTarget>> sil_targets;
  std::vector<Camera> sil_cameras;
  if (use_silhouette) {
    for (const auto& view : data.views) sil_cameras.push_back(view.camera);
    const int pr = cfg.silhouette_proxy_res;
    proxy = VoxelLattice::from_bounds(data.lattice.bounds_min(),
                                      data.lattice.bounds_max(), {pr, pr, pr});
    const auto proxy_nodes = all_nodes(proxy);
    for (std::size_t v = 0; v < n_views; ++v)
      occupancy_features(proxy, data.views[v], proxy_nodes, &proxy_rows[v]);
    for (std::size_t v = 0; v < n_views; ++v) {
      diff::SilhouetteTarget tgt;
      tgt.target = data.views[v].silhouette;
      if (!data.silhouette_supervision.empty())
        tgt.supervision = data.silhouette_supervision[v];
      sil_targets.push_back({std::move(tgt)});
    }
  }

  GradientDescent gd(cfg.gd);
  std::vector<std::size_t> batch_nodes(std::size_t(cfg.batch));
  std::vector<double> batch_target(std::size_t(cfg.batch));
  std::vector<double> batch_rows, stacked;

  for (int step = 0; step < cfg.steps; ++step) {
    for (auto& idx : batch_nodes) idx = batch_rng.uniform_index(node_count);
    for (std::size_t b = 0; b < batch_nodes.size(); ++b)
      batch_target[b] = data.occupancy[batch_nodes[b]];

    stacked.clear();
    for (std::size_t v = 0; v < n_views; ++v) {
      occupancy_features(data.lattice, data.views[v], batch_nodes, &batch_rows);
      stacked.insert(stacked.end(), batch_rows.begin(), batch_rows.end());
    }

    diff::Tape t;
    const diff::Var params = t.leaf(mlp.params());
    const diff::Var out = mlp.forward_var(t, params, t.leaf(std::move(stacked)),
                                    int(n_views) * cfg.batch);
    std::vector<diff::Var> view_batches;
    view_batches.reserve(n_views);
    for (std::size_t v = 0; v < n_views; ++v)
      view_batches.push_back(t.slice(out, int(v) * cfg.batch, cfg.batch));

    const diff::Var bce = diff::loss_3d(t, view_batches, batch_target,
                                  cfg.loss.occupied_class_weight);
    const diff::Var consistency = diff::loss_mv(t, view_batches);
    diff::Var total = t.add(bce, t.scale(consistency, cfg.loss.consistency_weight));

    VoxelCurveRow row;
    row.step = step;
    row.bce = t.scalar(bce);
    row.consistency = t.scalar(consistency);

    if (use_silhouette && step % cfg.silhouette_every == 0) {
      diff::Var fused{-1};
      for (std::size_t v = 0; v < n_views; ++v) {
        const diff::Var pv = mlp.forward_var(t, params, t.leaf(proxy_rows[v]),
                                       int(proxy.node_count()));
        fused = v == 0 ? pv : t.add(fused, pv);
      }
      fused = t.scale(fused, 1.0 / double(n_views));
      const diff::Var sil =
          diff::loss_os(t, {{fused, proxy, data.grid_to_world}}, sil_cameras,
                        sil_targets, cfg.silhouette);
      row.silhouette = t.scalar(sil);
      total = t.add(total, t.scale(sil, cfg.loss.silhouette_weight));
    }

    row.total = t.scalar(total);
    if (!std::isfinite(row.total))
      throw std::runtime_error("train_voxel_stage: non-finite loss at step " +
                               std::to_string(step) + " (bce " +
                               std::to_string(row.bce) + ")");
    rep.curve.push_back(row);

    t.backward(total);
    gd.step(mlp.params_mut(), t.grad(params));
  }

  rep.steps = cfg.steps;
  rep.final_bce = occupancy_bce(mlp, data.lattice, data.views, data.occupancy,
                                cfg.loss.occupied_class_weight);
  if (!cfg.curve_csv.empty()) write_curve_csv(cfg.curve_csv, rep.curve);
  if (!cfg.checkpoint_path.empty())
    save_checkpoint(cfg.checkpoint_path, mlp, cfg.seed, cfg.steps);
  return mlp;
}

}  // namespace crowdrec
