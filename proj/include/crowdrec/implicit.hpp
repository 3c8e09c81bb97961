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

// Implicit refinement stage: a per-point decoder maps hybrid features
// (multi-scale occupancy samples, image samples at the point's projection,
// and a depth gap against the observed depth map) to a refined occupancy,
// trained with an L1 occupancy loss against labelled point samples and
// evaluated on a lattice at twice the coarse resolution.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdrec/core.hpp"
#include "crowdrec/image.hpp"
#include "crowdrec/marching_cubes.hpp"
#include "crowdrec/mesh.hpp"
#include "crowdrec/mlp.hpp"
#include "crowdrec/tape.hpp"

#include "json.hpp"

namespace crowdrec {

// ---------------------------------------------------------------------------
// Occupancy pyramid

// Three scales of the coarse occupancy grid: the grid itself plus two rounds
// of 2x average pooling.
struct GridPyramid {
  std::array<ScalarGrid, 3> levels;
};

// 2x average pooling over 2x2x2 node blocks, edges clamped.  A pooled node
// sits at the centroid of its (clamped) source block, so for interior blocks
// the pooled lattice has twice the cell size and starts half a source cell
// inside the original origin.
inline ScalarGrid pool_grid(const ScalarGrid& grid) {
  const VoxelLattice& lat = grid.lattice;
  std::array<int, 3> res{};
  for (int a = 0; a < 3; ++a) {
    res[a] = (lat.res[a] + 1) / 2;
    if (res[a] < 2)
      throw std::invalid_argument("pool_grid: resolution too small to pool");
  }
  VoxelLattice pooled(lat.origin + 0.5 * lat.cell, 2.0 * lat.cell, res);
  std::vector<double> values(pooled.node_count(), 0.0);
  for (int k = 0; k < res[2]; ++k)
    for (int j = 0; j < res[1]; ++j)
      for (int i = 0; i < res[0]; ++i) {
        double acc = 0.0;
        for (int dk = 0; dk < 2; ++dk)
          for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
              const int si = std::min(2 * i + di, lat.res[0] - 1);
              const int sj = std::min(2 * j + dj, lat.res[1] - 1);
              const int sk = std::min(2 * k + dk, lat.res[2] - 1);
              acc += grid.at(si, sj, sk);
            }
        values[pooled.node_index(i, j, k)] = acc / 8.0;
      }
  return ScalarGrid(pooled, std::move(values));
}

inline GridPyramid build_pyramid(const ScalarGrid& coarse) {
  GridPyramid pyr;
  pyr.levels[0] = coarse;
  pyr.levels[1] = pool_grid(pyr.levels[0]);
  pyr.levels[2] = pool_grid(pyr.levels[1]);
  return pyr;
}

// ---------------------------------------------------------------------------
// Single-view image inputs

// The one input view the image-space features are sampled from.  Depth is in
// scene units and must be finite everywhere (cap background pixels at a far
// value before building the frame).
struct ViewFrame {
  Camera camera;
  GrayImage intensity;
  GrayImage silhouette;
  GrayImage depth;

  void validate() const {
    for (const GrayImage* img : {&intensity, &silhouette, &depth}) {
      if (img->width != camera.width || img->height != camera.height)
        throw std::invalid_argument("ViewFrame: image size != camera size");
    }
    for (double d : depth.pixels)
      if (!std::isfinite(d)) throw std::invalid_argument("ViewFrame: depth not finite");
  }
};

// Depth capped at `far` but kept in scene units, so depth gaps stay metric.
inline GrayImage clamp_depth(const DepthImage& depth, double far) {
  if (!(far > 0.0)) throw std::invalid_argument("clamp_depth: far must be positive");
  GrayImage out(depth.width, depth.height, 0.0);
  for (std::size_t i = 0; i < depth.pixels.size(); ++i)
    out.pixels[i] = std::min(depth.pixels[i], far);
  return out;
}

// ---------------------------------------------------------------------------
// Hybrid point features

constexpr int kImplicitFeatureWidth = 8;

// Per-point decoder input.  Layout of flat():
//   [0..2] occupancy sampled trilinearly at each pyramid scale
//   [3..5] intensity, silhouette, depth sampled bilinearly at the projection
//   [6]    depth gap: camera-space z minus observed depth (positive = behind
//          the visible surface)
//   [7]    off-image flag; when set, entries 3..6 are zero-filled
struct HybridFeatures {
  std::array<double, 3> occupancy{0, 0, 0};
  std::array<double, 3> image{0, 0, 0};
  double depth_gap = 0.0;
  bool off_image = false;

  std::array<double, kImplicitFeatureWidth> flat() const {
    return {occupancy[0], occupancy[1], occupancy[2],
            image[0],     image[1],     image[2],
            depth_gap,    off_image ? 1.0 : 0.0};
  }
};

// Deterministic, total: points that project outside the image (or behind the
// camera) get zero-filled image features and the flag instead of an error.
inline HybridFeatures extract_features(const Point3& p, const GridPyramid& pyramid,
                                       const ViewFrame& view) {
  HybridFeatures f;
  for (int s = 0; s < 3; ++s)
    f.occupancy[std::size_t(s)] = trilinear_sample(pyramid.levels[std::size_t(s)], p,
                                                   /*clamp=*/true);
  const auto proj = view.camera.project(p);
  if (!proj || !view.camera.in_image(proj->u, proj->v)) {
    f.off_image = true;
    return f;
  }
  f.image[0] = bilinear_sample(view.intensity, proj->u, proj->v);
  f.image[1] = bilinear_sample(view.silhouette, proj->u, proj->v);
  f.image[2] = bilinear_sample(view.depth, proj->u, proj->v);
  f.depth_gap = proj->depth - f.image[2];
  return f;
}

// Feature group switches for ablations.  Disabled groups are zero-filled so
// the decoder width stays fixed.
struct FeatureToggles {
  bool occupancy = true;
  bool image = true;
  bool depth_gap = true;
};

inline void write_feature_row(const HybridFeatures& f, const FeatureToggles& toggles,
                              double* out) {
  const auto flat = f.flat();
  for (int c = 0; c < kImplicitFeatureWidth; ++c) out[c] = flat[std::size_t(c)];
  if (!toggles.occupancy) out[0] = out[1] = out[2] = 0.0;
  if (!toggles.image) out[3] = out[4] = out[5] = 0.0;
  if (!toggles.depth_gap) out[6] = 0.0;
}

// ---------------------------------------------------------------------------
// Training samples

// Labelled query points: half sampled near the surface (surface samples
// perturbed by an isotropic Gaussian), half uniform over the lattice bounds.
struct SampleSet {
  std::vector<Point3> points;
  std::vector<double> labels;              // 1 inside, 0 outside
  std::vector<std::uint8_t> near_surface;  // provenance: 1 = perturbed surface sample

  std::size_t size() const { return points.size(); }
};

inline SampleSet sample_training_points(const TriMesh& mesh, const VoxelLattice& lattice,
                                        int count, double sigma, std::uint64_t seed) {
  if (count <= 0 || count % 2 != 0)
    throw std::invalid_argument("sample_training_points: count must be positive and even");
  if (!(sigma > 0.0))
    throw std::invalid_argument("sample_training_points: sigma must be positive");
  const int half = count / 2;
  const auto [lo, hi] = mesh.bbox();
  const double noise = sigma * (hi - lo).norm();

  Rng rng(seed);
  Rng surf_rng = rng.fork(1);
  Rng uni_rng = rng.fork(2);

  SampleSet set;
  set.points.reserve(std::size_t(count));
  set.labels.reserve(std::size_t(count));
  set.near_surface.reserve(std::size_t(count));

  for (const auto& s : sample_surface(mesh, half, surf_rng)) {
    Point3 p = s.position;
    p.x += noise * surf_rng.normal();
    p.y += noise * surf_rng.normal();
    p.z += noise * surf_rng.normal();
    set.points.push_back(p);
    set.near_surface.push_back(1);
  }
  const Point3 blo = lattice.bounds_min();
  const Point3 bhi = lattice.bounds_max();
  for (int i = 0; i < half; ++i) {
    set.points.push_back({uni_rng.uniform(blo.x, bhi.x), uni_rng.uniform(blo.y, bhi.y),
                          uni_rng.uniform(blo.z, bhi.z)});
    set.near_surface.push_back(0);
  }

  InsideTester tester(mesh);
  for (const Point3& p : set.points) set.labels.push_back(tester.inside(p) ? 1.0 : 0.0);
  return set;
}

// ---------------------------------------------------------------------------
// Occupancy regression loss

namespace diff {

// Mean absolute error between predicted occupancies and point labels.
inline Var loss_gt(Tape& t, const Var& predicted, const std::vector<double>& labels) {
  if (labels.empty()) throw std::invalid_argument("loss_gt: empty labels");
  if (t.value(predicted).size() != labels.size())
    throw std::invalid_argument("loss_gt: prediction/label size mismatch");
  for (double o : labels)
    if (!(o >= 0.0 && o <= 1.0)) throw std::invalid_argument("loss_gt: label outside [0,1]");
  return t.mean(t.abs_(t.sub(predicted, t.leaf(labels))));
}

}  // namespace diff

// ---------------------------------------------------------------------------
// Decoder

inline MlpSpec implicit_decoder_spec() {
  MlpSpec spec;
  spec.layers = {kImplicitFeatureWidth, 128, 128, 64, 1};
  spec.hidden = Activation::kTanh;
  spec.output = Activation::kLogistic;
  return spec;
}

// Refined lattice: same bounds, twice the cell density (2r-1 nodes per axis),
// so even refined nodes coincide with coarse nodes exactly.
inline VoxelLattice refined_lattice(const VoxelLattice& coarse) {
  return VoxelLattice::from_bounds(
      coarse.bounds_min(), coarse.bounds_max(),
      {2 * coarse.res[0] - 1, 2 * coarse.res[1] - 1, 2 * coarse.res[2] - 1});
}

// Dense decoder evaluation over a lattice.  Pure in (decoder params, inputs);
// rows are processed in fixed-size chunks.
inline ScalarGrid evaluate_decoder(const Mlp& decoder, const GridPyramid& pyramid,
                                   const ViewFrame& view, const VoxelLattice& lattice,
                                   const FeatureToggles& toggles = {}) {
  const std::size_t n = lattice.node_count();
  std::vector<double> values(n, 0.0);
  constexpr std::size_t kChunk = 4096;
  std::vector<double> rows;
  rows.reserve(kChunk * kImplicitFeatureWidth);
  std::size_t done = 0;
  while (done < n) {
    const std::size_t m = std::min(kChunk, n - done);
    rows.assign(m * kImplicitFeatureWidth, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t idx = done + r;
      const int i = int(idx % std::size_t(lattice.res[0]));
      const int j = int((idx / std::size_t(lattice.res[0])) % std::size_t(lattice.res[1]));
      const int k = int(idx / (std::size_t(lattice.res[0]) * std::size_t(lattice.res[1])));
      const HybridFeatures f = extract_features(lattice.node_pos(i, j, k), pyramid, view);
      write_feature_row(f, toggles, rows.data() + r * kImplicitFeatureWidth);
    }
    const std::vector<double> out = decoder.eval(rows, int(m));
    std::copy(out.begin(), out.end(), values.begin() + std::ptrdiff_t(done));
    done += m;
  }
  return ScalarGrid(lattice, std::move(values));
}

// ---------------------------------------------------------------------------
// Grid files: raw little-endian doubles behind a JSON header, same framing as
// network checkpoints (8-byte header length, header, payload).

inline void save_grid(const std::string& path, const ScalarGrid& grid) {
  nlohmann::json header;
  header["kind"] = "occupancy_grid";
  header["origin"] = {grid.lattice.origin.x, grid.lattice.origin.y, grid.lattice.origin.z};
  header["cell"] = {grid.lattice.cell.x, grid.lattice.cell.y, grid.lattice.cell.z};
  header["res"] = {grid.lattice.res[0], grid.lattice.res[1], grid.lattice.res[2]};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_grid: cannot open " + path);
  const std::uint64_t len = text.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = char((len >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(text.data(), std::streamsize(text.size()));
  out.write(reinterpret_cast<const char*>(grid.values.data()),
            std::streamsize(grid.values.size() * sizeof(double)));
  if (!out) throw std::runtime_error("save_grid: write failed for " + path);
}

inline ScalarGrid load_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_grid: cannot open " + path);
  char lenbuf[8];
  in.read(lenbuf, 8);
  if (!in) throw std::runtime_error("load_grid: truncated header in " + path);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(std::uint8_t(lenbuf[i])) << (8 * i);
  if (len > (std::uint64_t(1) << 20))
    throw std::runtime_error("load_grid: implausible header length in " + path);
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (!in) throw std::runtime_error("load_grid: truncated header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("load_grid: bad header in " + path + ": " + e.what());
  }
  if (header.value("kind", "") != std::string("occupancy_grid"))
    throw std::runtime_error("load_grid: not an occupancy grid: " + path);
  const auto o = header.at("origin");
  const auto c = header.at("cell");
  const auto r = header.at("res");
  if (o.size() != 3 || c.size() != 3 || r.size() != 3)
    throw std::runtime_error("load_grid: malformed lattice in " + path);
  VoxelLattice lattice(
      Point3{o[0].get<double>(), o[1].get<double>(), o[2].get<double>()},
      Vec3{c[0].get<double>(), c[1].get<double>(), c[2].get<double>()},
      {r[0].get<int>(), r[1].get<int>(), r[2].get<int>()});
  std::vector<double> values(lattice.node_count());
  in.read(reinterpret_cast<char*>(values.data()),
          std::streamsize(values.size() * sizeof(double)));
  if (!in) throw std::runtime_error("load_grid: truncated payload in " + path);
  return ScalarGrid(lattice, std::move(values));
}

// ---------------------------------------------------------------------------
// Refinement training

struct RefineConfig {
  int steps = 3000;
  int batch = 256;
  int sample_count = 10000;
  double sigma = 0.05;            // surface noise, relative to the mesh bbox diagonal
  AdamConfig adam;
  std::uint64_t seed = 0;
  FeatureToggles features;
  int holdout_stride = 10;        // every holdout_stride-th sample is held out
  int eval_every = 10;            // held-out loss cadence, in steps
  std::string curve_csv;          // empty: no curve file
  std::string checkpoint_path;    // empty: no checkpoint

  void validate() const {
    if (steps <= 0) throw std::invalid_argument("RefineConfig: steps must be positive");
    if (batch <= 0) throw std::invalid_argument("RefineConfig: batch must be positive");
    if (sample_count <= 0 || sample_count % 2 != 0)
      throw std::invalid_argument("RefineConfig: sample_count must be positive and even");
    if (!(sigma > 0.0)) throw std::invalid_argument("RefineConfig: sigma must be positive");
    if (holdout_stride < 2)
      throw std::invalid_argument("RefineConfig: holdout_stride must be >= 2");
    if (eval_every <= 0) throw std::invalid_argument("RefineConfig: eval_every must be positive");
  }
};

struct RefineCurveRow {
  int step = 0;
  double train = 0.0;    // minibatch loss at this step
  double holdout = 0.0;  // held-out loss after this step
};

struct RefineReport {
  double initial_holdout = 0.0;
  double final_holdout = 0.0;
  std::vector<RefineCurveRow> curve;
};

struct RefineResult {
  Mlp decoder;
  ScalarGrid refined;  // decoder evaluated on refined_lattice(coarse)
};

inline void write_refine_curve_csv(const std::string& path,
                                   const std::vector<RefineCurveRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_refine_curve_csv: cannot open " + path);
  out << "step,train,holdout\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", r.step, r.train, r.holdout);
    out << buf;
  }
  if (!out) throw std::runtime_error("write_refine_curve_csv: write failed for " + path);
}

namespace detail {

// Plain (tape-free) mean absolute error of the decoder over cached rows.
inline double decoder_l1(const Mlp& decoder, const std::vector<double>& rows,
                         const std::vector<double>& labels) {
  if (labels.empty()) return 0.0;
  const std::vector<double> out = decoder.eval(rows, int(labels.size()));
  double acc = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) acc += std::abs(out[i] - labels[i]);
  return acc / double(labels.size());
}

}  // namespace detail

// Trains the decoder on labelled samples of the ground-truth mesh and
// evaluates it densely at twice the coarse resolution.  Aborts with a
// diagnostic if the training loss stops being finite.
inline RefineResult refine(const ScalarGrid& coarse, const ViewFrame& view,
                           const TriMesh& gt_mesh, const RefineConfig& cfg,
                           RefineReport* report = nullptr) {
  cfg.validate();
  view.validate();
  if (!coarse.is_probability_field(1e-9))
    throw std::invalid_argument("refine: coarse grid is not a probability field");

  const GridPyramid pyramid = build_pyramid(coarse);
  const SampleSet samples = sample_training_points(gt_mesh, coarse.lattice,
                                                   cfg.sample_count, cfg.sigma, cfg.seed);

  // Features are fixed per point; cache one row per sample up front.  The
  // holdout interleaves both provenance halves because it strides the index.
  std::vector<double> train_rows, hold_rows;
  std::vector<double> train_labels, hold_labels;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double row[kImplicitFeatureWidth];
    write_feature_row(extract_features(samples.points[i], pyramid, view), cfg.features, row);
    const bool held = (int(i) % cfg.holdout_stride) == cfg.holdout_stride - 1;
    auto& rows = held ? hold_rows : train_rows;
    auto& labels = held ? hold_labels : train_labels;
    rows.insert(rows.end(), row, row + kImplicitFeatureWidth);
    labels.push_back(samples.labels[i]);
  }
  if (train_labels.empty() || hold_labels.empty())
    throw std::invalid_argument("refine: sample_count too small for the holdout split");

  Rng rng(cfg.seed);
  Mlp decoder = Mlp::init(implicit_decoder_spec(), rng.fork(1).next_u64());
  Rng batch_rng = rng.fork(2);
  Adam opt(cfg.adam);

  RefineReport local;
  RefineReport& rep = report ? *report : local;
  rep.initial_holdout = detail::decoder_l1(decoder, hold_rows, hold_labels);
  rep.curve.clear();

  const int batch = std::min<int>(cfg.batch, int(train_labels.size()));
  std::vector<double> batch_rows(std::size_t(batch) * kImplicitFeatureWidth);
  std::vector<double> batch_labels(std::size_t(batch), 0.0);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int b = 0; b < batch; ++b) {
      const std::size_t pick = batch_rng.uniform_index(train_labels.size());
      std::copy_n(train_rows.begin() + std::ptrdiff_t(pick) * kImplicitFeatureWidth,
                  kImplicitFeatureWidth,
                  batch_rows.begin() + std::ptrdiff_t(b) * kImplicitFeatureWidth);
      batch_labels[std::size_t(b)] = train_labels[pick];
    }
    diff::Tape t;
    const diff::Var params = t.leaf(decoder.params());
    const diff::Var input = t.leaf(batch_rows);
    const diff::Var predicted = decoder.forward_var(t, params, input, batch);
    const diff::Var loss = diff::loss_gt(t, predicted, batch_labels);
    const double train_loss = t.scalar(loss);
    if (!std::isfinite(train_loss))
      throw std::runtime_error("refine: non-finite loss at step " + std::to_string(step));
    t.backward(loss);
    opt.step(decoder.params_mut(), t.grad(params));

    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      RefineCurveRow row;
      row.step = step + 1;
      row.train = train_loss;
      row.holdout = detail::decoder_l1(decoder, hold_rows, hold_labels);
      rep.curve.push_back(row);
    }
  }
  rep.final_holdout = detail::decoder_l1(decoder, hold_rows, hold_labels);

  if (!cfg.curve_csv.empty()) write_refine_curve_csv(cfg.curve_csv, rep.curve);
  if (!cfg.checkpoint_path.empty())
    save_checkpoint(cfg.checkpoint_path, decoder, cfg.seed, cfg.steps);

  RefineResult result{std::move(decoder), ScalarGrid()};
  result.refined = evaluate_decoder(result.decoder, pyramid, view,
                                    refined_lattice(coarse.lattice), cfg.features);
  return result;
}

// ---------------------------------------------------------------------------
// Mesh extraction

// Iso-surface of a refined grid.  An empty occupancy (no node reaches the
// iso level) is a failed reconstruction, not a silent empty mesh.
inline TriMesh extract_refined_mesh(const ScalarGrid& grid, double iso = 0.5) {
  bool any = false;
  for (double v : grid.values)
    if (v >= iso) {
      any = true;
      break;
    }
  if (!any)
    throw std::runtime_error("reconstruction failed: occupancy is empty at iso " +
                             std::to_string(iso));
  return marching_cubes(grid, iso);
}

// Full single-person inference path: coarse grid -> pyramid features ->
// dense decoder evaluation at 2x resolution -> iso-surface.  The mesh stays
// in the person-local frame of the coarse lattice.
inline TriMesh reconstruct_person(const Mlp& decoder, const ScalarGrid& coarse,
                                  const ViewFrame& view, const FeatureToggles& toggles = {},
                                  double iso = 0.5) {
  const GridPyramid pyramid = build_pyramid(coarse);
  const ScalarGrid refined =
      evaluate_decoder(decoder, pyramid, view, refined_lattice(coarse.lattice), toggles);
  return extract_refined_mesh(refined, iso);
}

}  // namespace crowdrec
