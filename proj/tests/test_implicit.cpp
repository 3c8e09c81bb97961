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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "crowdrec/figures.hpp"
#include "crowdrec/grad_check.hpp"
#include "crowdrec/implicit.hpp"
#include "crowdrec/render.hpp"
#include "crowdrec/voxelnet.hpp"

using namespace crowdrec;

namespace {

// Sphere mesh from the iso-surface of the signed distance r - |p - c|.
TriMesh sphere_mesh(double radius, const Point3& center, int res) {
  const double pad = 1.3 * radius;
  const VoxelLattice lat = VoxelLattice::from_bounds(
      center - Vec3{pad, pad, pad}, center + Vec3{pad, pad, pad}, {res, res, res});
  std::vector<double> values(lat.node_count());
  for (int k = 0; k < res; ++k)
    for (int j = 0; j < res; ++j)
      for (int i = 0; i < res; ++i)
        values[lat.node_index(i, j, k)] = radius - (lat.node_pos(i, j, k) - center).norm();
  return marching_cubes(ScalarGrid(lat, std::move(values)), 0.0);
}

double nearest_mean(const std::vector<Point3>& from, const std::vector<Point3>& to) {
  double acc = 0.0;
  for (const Point3& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Point3& q : to) best = std::min(best, (p - q).norm());
    acc += best;
  }
  return acc / double(from.size());
}

// Brute-force symmetric chamfer distance between surface point samples.
double mesh_chamfer(const TriMesh& a, const TriMesh& b, int n, std::uint64_t seed) {
  Rng rng(seed);
  Rng ra = rng.fork(1), rb = rng.fork(2);
  std::vector<Point3> pa, pb;
  for (const auto& s : sample_surface(a, n, ra)) pa.push_back(s.position);
  for (const auto& s : sample_surface(b, n, rb)) pb.push_back(s.position);
  return 0.5 * (nearest_mean(pa, pb) + nearest_mean(pb, pa));
}

struct FigureFixture {
  TriMesh mesh;
  ScalarGrid coarse;  // binary occupancy of the mesh (oracle stage one)
  ViewFrame view;
};

FigureFixture make_figure_fixture(int lattice_res, int image_px) {
  FigureFixture fx;
  FigureSpec spec = FigureSpec::proportioned(0, 1.75);
  spec.mesh_res = 48;
  fx.mesh = generate_figure(spec);

  auto [lo, hi] = fx.mesh.bbox();
  const Vec3 pad = 0.05 * (hi - lo);
  const VoxelLattice lat = VoxelLattice::from_bounds(
      lo - pad, hi + pad, {lattice_res, lattice_res, lattice_res});
  fx.coarse = voxelize(fx.mesh, lat);

  const Point3 center = 0.5 * (lo + hi);
  const Point3 eye{center.x, center.y - 2.6, center.z + 0.3};
  const double f = 0.9 * image_px;
  Camera cam = Camera::look_at(eye, center, f, f, image_px, image_px);
  const RenderedView rv = render_scene({fx.mesh}, cam);
  fx.view.camera = cam;
  fx.view.intensity = rv.intensity;
  fx.view.silhouette = silhouette_from_mask(rv.instance_mask[0]);
  fx.view.depth = clamp_depth(rv.depth, 4.0);
  return fx;
}

double threshold_agreement(const ScalarGrid& coarse, const ScalarGrid& refined,
                           double iso) {
  int agree = 0, total = 0;
  for (int k = 0; k < coarse.lattice.res[2]; ++k)
    for (int j = 0; j < coarse.lattice.res[1]; ++j)
      for (int i = 0; i < coarse.lattice.res[0]; ++i) {
        const bool a = coarse.at(i, j, k) >= iso;
        const bool b = refined.at(2 * i, 2 * j, 2 * k) >= iso;
        agree += (a == b);
        ++total;
      }
  return double(agree) / double(total);
}

std::string temp_path(const char* name) {
  return std::string("/tmp/crowdrec_implicit_") + name;
}

}  // namespace

TEST_CASE("average pooling halves resolution and preserves constants") {
  const VoxelLattice lat =
      VoxelLattice::from_bounds({-1, -1, -1}, {1, 1, 1}, {5, 5, 5});
  const ScalarGrid constant = ScalarGrid::filled(lat, 0.7);
  const GridPyramid pyr = build_pyramid(constant);

  CHECK(pyr.levels[1].lattice.res == std::array<int, 3>{3, 3, 3});
  CHECK(pyr.levels[2].lattice.res == std::array<int, 3>{2, 2, 2});
  for (int s = 1; s < 3; ++s)
    for (double v : pyr.levels[std::size_t(s)].values)
      CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

  // Pooled node centers: twice the cell, origin half a source cell inside.
  CHECK(pyr.levels[1].lattice.cell.x == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pyr.levels[1].lattice.origin.x == doctest::Approx(-0.75).epsilon(1e-15));

  // Hand-computed block means on an index-valued 4x4x4 grid.
  const VoxelLattice lat4 =
      VoxelLattice::from_bounds({0, 0, 0}, {3, 3, 3}, {4, 4, 4});
  std::vector<double> values(lat4.node_count());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = double(i);
  const ScalarGrid g4(lat4, values);
  const ScalarGrid p4 = pool_grid(g4);
  REQUIRE(p4.lattice.res == std::array<int, 3>{2, 2, 2});
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 2; ++i) {
        double acc = 0.0;
        for (int dk = 0; dk < 2; ++dk)
          for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di)
              acc += g4.at(2 * i + di, 2 * j + dj, 2 * k + dk);
        CHECK(p4.at(i, j, k) == doctest::Approx(acc / 8.0).epsilon(1e-15));
      }

  // Two pooling rounds need at least 5 nodes per axis.
  const ScalarGrid small = ScalarGrid::filled(
      VoxelLattice::from_bounds({0, 0, 0}, {1, 1, 1}, {4, 4, 4}), 0.5);
  CHECK_THROWS_AS(build_pyramid(small), std::invalid_argument);
}

TEST_CASE("hybrid features: occupied voxel on the silhouette and signed depth gap") {
  const VoxelLattice lat =
      VoxelLattice::from_bounds({-1, -1, 1.5}, {1, 1, 3.5}, {9, 9, 9});
  const GridPyramid pyr = build_pyramid(ScalarGrid::filled(lat, 1.0));

  ViewFrame view;
  view.camera.fx = view.camera.fy = 10.0;
  view.camera.cx = view.camera.cy = 8.0;
  view.camera.width = view.camera.height = 16;
  view.intensity = GrayImage(16, 16, 0.6);
  view.silhouette = GrayImage(16, 16, 1.0);
  view.depth = GrayImage(16, 16, 2.5);
  view.validate();

  // Fully occupied grid and an all-ones silhouette: every scale reads 1.
  const HybridFeatures f = extract_features({0.0, 0.0, 2.7}, pyr, view);
  CHECK(!f.off_image);
  for (int s = 0; s < 3; ++s) CHECK(f.occupancy[std::size_t(s)] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(f.image[1] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(f.image[0] == doctest::Approx(0.6).epsilon(1e-14));

  // Camera-space z 2.7 against observed depth 2.5: 0.2 behind the surface.
  CHECK(f.depth_gap == doctest::Approx(0.2).epsilon(1e-12));
  const HybridFeatures g = extract_features({0.0, 0.0, 2.3}, pyr, view);
  CHECK(g.depth_gap == doctest::Approx(-0.2).epsilon(1e-12));

  // Behind the camera or outside the frame: zero-filled plus the flag.
  for (const Point3& p : {Point3{0, 0, -1.0}, Point3{50.0, 0, 2.7}}) {
    const HybridFeatures h = extract_features(p, pyr, view);
    CHECK(h.off_image);
    CHECK(h.image[0] == 0.0);
    CHECK(h.image[1] == 0.0);
    CHECK(h.image[2] == 0.0);
    CHECK(h.depth_gap == 0.0);
    CHECK(h.flat()[7] == 1.0);
  }

  // Feature toggles zero their group and nothing else.
  double row[kImplicitFeatureWidth];
  write_feature_row(f, FeatureToggles{true, false, true}, row);
  CHECK(row[0] == doctest::Approx(1.0));
  CHECK(row[3] == 0.0);
  CHECK(row[4] == 0.0);
  CHECK(row[5] == 0.0);
  CHECK(row[6] == doctest::Approx(0.2));
  write_feature_row(f, FeatureToggles{true, true, false}, row);
  CHECK(row[4] == doctest::Approx(1.0));
  CHECK(row[6] == 0.0);
  write_feature_row(f, FeatureToggles{false, true, true}, row);
  CHECK(row[0] == 0.0);
  CHECK(row[1] == 0.0);
  CHECK(row[2] == 0.0);

  // Mismatched image sizes are rejected.
  ViewFrame bad = view;
  bad.depth = GrayImage(8, 16, 2.5);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("feature map matches an independent recomputation from raw buffers") {
  Rng rng(314);
  const VoxelLattice lat =
      VoxelLattice::from_bounds({-0.9, -1.1, 0.2}, {1.0, 0.8, 2.1}, {11, 9, 13});
  std::vector<double> occ(lat.node_count());
  for (double& v : occ) v = rng.uniform();
  const GridPyramid pyr = build_pyramid(ScalarGrid(lat, occ));

  ViewFrame view;
  view.camera = Camera::look_at({0.3, -3.2, 1.4}, {0.0, 0.0, 1.0}, 22.0, 22.0, 24, 20);
  view.intensity = GrayImage(24, 20);
  view.silhouette = GrayImage(24, 20);
  view.depth = GrayImage(24, 20);
  for (int i = 0; i < 24 * 20; ++i) {
    view.intensity.pixels[std::size_t(i)] = rng.uniform();
    view.silhouette.pixels[std::size_t(i)] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    view.depth.pixels[std::size_t(i)] = rng.uniform(1.0, 6.0);
  }

  // Hand-rolled clamped trilinear and bilinear interpolation.
  const auto tri = [](const ScalarGrid& g, const Point3& p) {
    const VoxelLattice& l = g.lattice;
    double c[3];
    for (int a = 0; a < 3; ++a) {
      c[a] = (p[a] - l.origin[a]) / l.cell[a];
      c[a] = std::min(std::max(c[a], 0.0), double(l.res[a] - 1));
    }
    const int i0 = std::min(int(c[0]), l.res[0] - 2);
    const int j0 = std::min(int(c[1]), l.res[1] - 2);
    const int k0 = std::min(int(c[2]), l.res[2] - 2);
    const double fx = c[0] - i0, fy = c[1] - j0, fz = c[2] - k0;
    double acc = 0.0;
    for (int dk = 0; dk < 2; ++dk)
      for (int dj = 0; dj < 2; ++dj)
        for (int di = 0; di < 2; ++di)
          acc += g.at(i0 + di, j0 + dj, k0 + dk) * (di ? fx : 1 - fx) *
                 (dj ? fy : 1 - fy) * (dk ? fz : 1 - fz);
    return acc;
  };
  const auto bil = [](const GrayImage& img, double u, double v) {
    const double x = std::min(std::max(u - 0.5, 0.0), double(img.width - 1));
    const double y = std::min(std::max(v - 0.5, 0.0), double(img.height - 1));
    const int x0 = std::min(int(x), img.width - 2);
    const int y0 = std::min(int(y), img.height - 2);
    const double fx = x - x0, fy = y - y0;
    return img.at(x0, y0) * (1 - fx) * (1 - fy) + img.at(x0 + 1, y0) * fx * (1 - fy) +
           img.at(x0, y0 + 1) * (1 - fx) * fy + img.at(x0 + 1, y0 + 1) * fx * fy;
  };

  int off_image = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Point3 p{rng.uniform(-1.6, 1.8), rng.uniform(-1.9, 1.6), rng.uniform(-0.5, 2.9)};
    const HybridFeatures f = extract_features(p, pyr, view);
    for (int s = 0; s < 3; ++s)
      CHECK(f.occupancy[std::size_t(s)] ==
            doctest::Approx(tri(pyr.levels[std::size_t(s)], p)).epsilon(1e-12));

    const Point3 pc = view.camera.world_to_cam.apply(p);
    if (pc.z <= 1e-12) {
      CHECK(f.off_image);
      ++off_image;
      continue;
    }
    const double u = view.camera.fx * pc.x / pc.z + view.camera.cx;
    const double v = view.camera.fy * pc.y / pc.z + view.camera.cy;
    if (u < 0.0 || v < 0.0 || u >= view.camera.width || v >= view.camera.height) {
      CHECK(f.off_image);
      ++off_image;
      continue;
    }
    CHECK(!f.off_image);
    CHECK(f.image[0] == doctest::Approx(bil(view.intensity, u, v)).epsilon(1e-12));
    CHECK(f.image[1] == doctest::Approx(bil(view.silhouette, u, v)).epsilon(1e-12));
    CHECK(f.image[2] == doctest::Approx(bil(view.depth, u, v)).epsilon(1e-12));
    CHECK(f.depth_gap == doctest::Approx(pc.z - bil(view.depth, u, v)).epsilon(1e-12));
  }
  // The sampling box extends past the frustum, so both branches are exercised.
  CHECK(off_image > 50);
  CHECK(off_image < 950);
}

TEST_CASE("training samples balance labels near the surface and match volume in the bulk") {
  const TriMesh sphere = sphere_mesh(0.35, {0, 0, 0}, 48);
  const VoxelLattice lat =
      VoxelLattice::from_bounds({-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}, {9, 9, 9});
  const int n = 8000;
  const SampleSet set = sample_training_points(sphere, lat, n, 0.05, 17);
  REQUIRE(set.size() == std::size_t(n));
  REQUIRE(set.labels.size() == std::size_t(n));
  REQUIRE(set.near_surface.size() == std::size_t(n));

  int near_count = 0, near_inside = 0, far_inside = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.near_surface[i]) {
      ++near_count;
      near_inside += set.labels[i] > 0.5;
    } else {
      far_inside += set.labels[i] > 0.5;
    }
  }
  CHECK(near_count == n / 2);

  // Gaussian perturbation around a closed surface: half the samples inside.
  const double near_frac = double(near_inside) / double(n / 2);
  CHECK(near_frac > 0.4);
  CHECK(near_frac < 0.6);

  // Uniform half: inside fraction tracks the mesh/box volume ratio.
  const double box_volume = 1.0;
  const double expect = sphere.signed_volume() / box_volume;
  const double far_frac = double(far_inside) / double(n / 2);
  CHECK(std::abs(far_frac - expect) < 0.02);

  // Deterministic per seed; a different seed moves the points.
  const SampleSet again = sample_training_points(sphere, lat, n, 0.05, 17);
  REQUIRE(again.size() == set.size());
  bool identical = true;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (!(again.points[i].x == set.points[i].x && again.points[i].y == set.points[i].y &&
          again.points[i].z == set.points[i].z && again.labels[i] == set.labels[i]))
      identical = false;
  }
  CHECK(identical);
  const SampleSet other = sample_training_points(sphere, lat, n, 0.05, 18);
  bool moved = false;
  for (std::size_t i = 0; i < set.size() && !moved; ++i)
    if (other.points[i].x != set.points[i].x) moved = true;
  CHECK(moved);

  CHECK_THROWS_AS(sample_training_points(sphere, lat, 7, 0.05, 1), std::invalid_argument);
  CHECK_THROWS_AS(sample_training_points(sphere, lat, 0, 0.05, 1), std::invalid_argument);
  CHECK_THROWS_AS(sample_training_points(sphere, lat, 8, 0.0, 1), std::invalid_argument);
}

TEST_CASE("occupancy regression loss: hand values and gradients") {
  {
    diff::Tape t;
    const diff::Var pred = t.leaf({1.0, 0.0, 0.5});
    CHECK(t.scalar(diff::loss_gt(t, pred, {1.0, 0.0, 0.5})) == 0.0);
  }
  {
    diff::Tape t;
    const diff::Var pred = t.leaf({0.75, 0.25});
    CHECK(t.scalar(diff::loss_gt(t, pred, {1.0, 0.0})) == doctest::Approx(0.25).epsilon(1e-15));
  }
  {
    diff::Tape t;
    const diff::Var pred = t.leaf({0.5});
    CHECK_THROWS_AS(diff::loss_gt(t, pred, {0.5, 0.5}), std::invalid_argument);
    CHECK_THROWS_AS(diff::loss_gt(t, pred, std::vector<double>{}), std::invalid_argument);
    CHECK_THROWS_AS(diff::loss_gt(t, pred, {1.5}), std::invalid_argument);
  }

  // Squash raw parameters through the logistic so predictions never touch the
  // labels and the absolute value stays differentiable.
  Rng rng(99);
  const std::vector<double> labels{1, 0, 1, 1, 0, 0, 1, 0};
  std::vector<double> theta(labels.size());
  for (double& v : theta) v = rng.uniform(-2.0, 2.0);
  const auto fval = [&](const std::vector<double>& x) {
    diff::Tape t;
    return t.scalar(diff::loss_gt(t, t.logistic(t.leaf(x)), labels));
  };
  const auto fgrad = [&](const std::vector<double>& x) {
    diff::Tape t;
    const diff::Var leaf = t.leaf(x);
    const diff::Var loss = diff::loss_gt(t, t.logistic(leaf), labels);
    t.backward(loss);
    return t.grad(leaf);
  };
  const diff::GradCheckReport rep = diff::grad_check(fval, fgrad, theta);
  CHECK(rep.pass);
  CHECK(rep.checked == int(theta.size()));
}

TEST_CASE("grid files round trip through the raw volume format") {
  const VoxelLattice lat =
      VoxelLattice::from_bounds({-0.25, 0.5, 1.0}, {0.75, 1.25, 2.5}, {4, 3, 5});
  Rng rng(5);
  std::vector<double> values(lat.node_count());
  for (double& v : values) v = rng.uniform();
  const ScalarGrid grid(lat, values);

  const std::string path = temp_path("grid.bin");
  save_grid(path, grid);
  const ScalarGrid back = load_grid(path);
  CHECK(back.lattice == grid.lattice);
  REQUIRE(back.values.size() == grid.values.size());
  bool identical = true;
  for (std::size_t i = 0; i < grid.values.size(); ++i)
    if (back.values[i] != grid.values[i]) identical = false;
  CHECK(identical);

  // Truncated payloads and foreign files are rejected.
  {
    std::ofstream out(temp_path("grid_trunc.bin"), std::ios::binary);
    std::ifstream in(path, std::ios::binary);
    std::vector<char> head(256);
    in.read(head.data(), 256);
    out.write(head.data(), in.gcount() < 256 ? in.gcount() : 256);
  }
  CHECK_THROWS_AS(load_grid(temp_path("grid_trunc.bin")), std::runtime_error);
  CHECK_THROWS_AS(load_grid(temp_path("no_such_grid.bin")), std::runtime_error);
  {
    std::ofstream out(temp_path("grid_kind.bin"), std::ios::binary);
    const std::string header = "{\"kind\":\"something_else\"}";
    const std::uint64_t len = header.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = char((len >> (8 * i)) & 0xff);
    out.write(lenbuf, 8);
    out.write(header.data(), std::streamsize(header.size()));
  }
  CHECK_THROWS_AS(load_grid(temp_path("grid_kind.bin")), std::runtime_error);
}

TEST_CASE("refinement beats the coarse stage on an oracle grid and is deterministic") {
  const FigureFixture fx = make_figure_fixture(16, 48);
  REQUIRE(fx.coarse.is_probability_field());

  RefineConfig cfg;
  cfg.steps = 1200;
  cfg.batch = 192;
  cfg.sample_count = 4000;
  cfg.sigma = 0.05;
  cfg.seed = 11;
  cfg.eval_every = 10;
  cfg.curve_csv = temp_path("refine_curve.csv");
  cfg.checkpoint_path = temp_path("refine_decoder.ckpt");

  RefineReport rep;
  const RefineResult result = refine(fx.coarse, fx.view, fx.mesh, cfg, &rep);

  // Training made clear progress on held-out samples.
  CHECK(rep.final_holdout < 0.08);
  CHECK(rep.final_holdout < 0.5 * rep.initial_holdout);
  REQUIRE(!rep.curve.empty());
  CHECK(rep.curve.back().step == cfg.steps);

  // Held-out loss decreases monotonically on average (10-row smoothing).
  std::vector<double> holdout;
  for (const auto& row : rep.curve) holdout.push_back(row.holdout);
  REQUIRE(holdout.size() >= 20);
  std::vector<double> smoothed;
  for (std::size_t i = 0; i + 10 <= holdout.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j = i; j < i + 10; ++j) acc += holdout[j];
    smoothed.push_back(acc / 10.0);
  }
  int rises = 0;
  for (std::size_t i = 1; i < smoothed.size(); ++i)
    if (smoothed[i] > smoothed[i - 1] + 0.01 * smoothed.front()) ++rises;
  CHECK(rises == 0);
  CHECK(smoothed.back() < 0.5 * smoothed.front());

  // The refined lattice doubles the density and keeps the bounds.
  CHECK(result.refined.lattice.res == std::array<int, 3>{31, 31, 31});
  CHECK(result.refined.lattice.bounds_max().x ==
        doctest::Approx(fx.coarse.lattice.bounds_max().x).epsilon(1e-12));

  // Refined iso-surface is strictly closer to the truth than the coarse one.
  const TriMesh coarse_mesh = marching_cubes(fx.coarse, 0.5);
  const TriMesh refined_mesh = extract_refined_mesh(result.refined);
  const double cd_coarse = mesh_chamfer(coarse_mesh, fx.mesh, 1500, 23);
  const double cd_refined = mesh_chamfer(refined_mesh, fx.mesh, 1500, 23);
  CHECK(cd_refined < cd_coarse);

  // Thresholded refined grid agrees with the coarse grid on coincident nodes.
  CHECK(threshold_agreement(fx.coarse, result.refined, 0.5) >= 0.9);

  // Same configuration and seed: identical parameters and refined values.
  RefineConfig cfg2 = cfg;
  cfg2.curve_csv.clear();
  cfg2.checkpoint_path.clear();
  const RefineResult redo = refine(fx.coarse, fx.view, fx.mesh, cfg2);
  bool params_identical = redo.decoder.params() == result.decoder.params();
  CHECK(params_identical);
  bool grids_identical = redo.refined.values == result.refined.values;
  CHECK(grids_identical);

  // Curve file and checkpoint landed and reload cleanly.
  {
    std::ifstream curve(cfg.curve_csv);
    std::string header;
    std::getline(curve, header);
    CHECK(header == "step,train,holdout");
    int lines = 0;
    for (std::string line; std::getline(curve, line);) ++lines;
    CHECK(lines == int(rep.curve.size()));
  }
  const Checkpoint ck = load_checkpoint(cfg.checkpoint_path);
  CHECK(ck.params == result.decoder.params());
  CHECK(ck.spec.layers == implicit_decoder_spec().layers);

  // Inference path: oracle grid in, mesh out, within the coarsest cell axis.
  const TriMesh person = reconstruct_person(result.decoder, fx.coarse, fx.view);
  const double cd_person = mesh_chamfer(person, fx.mesh, 1500, 29);
  const Vec3 fine_cell = result.refined.lattice.cell;
  const double max_cell = std::max({fine_cell.x, fine_cell.y, fine_cell.z});
  CHECK(cd_person < 1.5 * max_cell);

  // An empty coarse occupancy is a failed reconstruction.
  const ScalarGrid empty = ScalarGrid::filled(fx.coarse.lattice, 0.0);
  ViewFrame blank = fx.view;
  std::fill(blank.intensity.pixels.begin(), blank.intensity.pixels.end(), 0.0);
  std::fill(blank.silhouette.pixels.begin(), blank.silhouette.pixels.end(), 0.0);
  std::fill(blank.depth.pixels.begin(), blank.depth.pixels.end(), 8.0);
  bool failed_with_message = false;
  try {
    reconstruct_person(result.decoder, empty, blank);
  } catch (const std::runtime_error& e) {
    failed_with_message = std::string(e.what()).find("reconstruction failed") != std::string::npos;
  }
  CHECK(failed_with_message);
  CHECK_THROWS_AS(extract_refined_mesh(ScalarGrid::filled(fx.coarse.lattice, 0.2), 0.5),
                  std::runtime_error);
}

TEST_CASE("image features help: full decoder at least matches the depth-only ablation") {
  // The comparison only has teeth when the coarse grid is imperfect, as a
  // predicted stage one is: at 10 nodes per axis the blocky occupancy misses
  // limb detail, so the image features carry real extra signal.
  const FigureFixture fx = make_figure_fixture(10, 64);

  RefineConfig cfg;
  cfg.steps = 1500;
  cfg.batch = 192;
  cfg.sample_count = 4000;
  cfg.sigma = 0.05;
  cfg.seed = 3;

  RefineReport rep_full;
  const RefineResult full = refine(fx.coarse, fx.view, fx.mesh, cfg, &rep_full);

  RefineConfig ablated = cfg;
  ablated.features.image = false;  // keeps occupancy and the depth gap
  RefineReport rep_ablated;
  const RefineResult depth_only = refine(fx.coarse, fx.view, fx.mesh, ablated, &rep_ablated);

  const TriMesh mesh_full = extract_refined_mesh(full.refined);
  const TriMesh mesh_ablated = extract_refined_mesh(depth_only.refined);
  const double cd_full = mesh_chamfer(mesh_full, fx.mesh, 1200, 7);
  const double cd_ablated = mesh_chamfer(mesh_ablated, fx.mesh, 1200, 7);
  CHECK(cd_full <= cd_ablated + 1e-9);
}

TEST_CASE("occluded view still yields a watertight full-body mesh") {
  FigureFixture fx = make_figure_fixture(12, 40);

  // Hide the left half of the view: silhouette off, depth pushed to far.
  for (int y = 0; y < fx.view.camera.height; ++y)
    for (int x = 0; x < fx.view.camera.width / 2; ++x) {
      fx.view.silhouette.at(x, y) = 0.0;
      fx.view.intensity.at(x, y) = 0.0;
      fx.view.depth.at(x, y) = 4.0;
    }

  RefineConfig cfg;
  cfg.steps = 1200;
  cfg.batch = 160;
  cfg.sample_count = 4000;
  cfg.sigma = 0.05;
  cfg.seed = 21;

  const RefineResult result = refine(fx.coarse, fx.view, fx.mesh, cfg);
  const TriMesh mesh = extract_refined_mesh(result.refined);
  CHECK(check_watertight(mesh).watertight());

  // The occupancy features carry the hidden half: the reconstruction spans
  // roughly the same bounds as the truth instead of half a body.
  const auto [lo_gt, hi_gt] = fx.mesh.bbox();
  const auto [lo, hi] = mesh.bbox();
  CHECK(std::abs((hi.x - lo.x) - (hi_gt.x - lo_gt.x)) < 0.3 * (hi_gt.x - lo_gt.x));
  const double cd = mesh_chamfer(mesh, fx.mesh, 1200, 13);
  const Vec3 fine_cell = result.refined.lattice.cell;
  CHECK(cd < 3.0 * std::max({fine_cell.x, fine_cell.y, fine_cell.z}));
}
