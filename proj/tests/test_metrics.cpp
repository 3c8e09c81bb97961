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
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "crowdrec/metrics.hpp"
#include "crowdrec/scene.hpp"

using namespace crowdrec;

namespace {

std::vector<Point3> random_points(int n, std::uint64_t seed, double lo = -1.0,
                                  double hi = 1.0) {
  Rng rng(seed);
  std::vector<Point3> pts;
  for (int i = 0; i < n; ++i)
    pts.push_back({rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)});
  return pts;
}

// O(n^2) reference for the accelerated nearest-neighbor paths.
double brute_chamfer(const std::vector<Point3>& a, const std::vector<Point3>& b) {
  const auto one_way = [](const std::vector<Point3>& from, const std::vector<Point3>& to) {
    double sum = 0.0;
    for (const auto& p : from) {
      double best2 = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best2 = std::min(best2, (p - q).squared_norm());
      sum += std::sqrt(best2);
    }
    return sum / double(from.size());
  };
  return 0.5 * (one_way(a, b) + one_way(b, a));
}

// Axis-aligned box as a closed 12-triangle mesh.
TriMesh box_mesh(const Point3& lo, const Point3& hi) {
  TriMesh m;
  m.vertices = {{lo.x, lo.y, lo.z}, {hi.x, lo.y, lo.z}, {hi.x, hi.y, lo.z},
                {lo.x, hi.y, lo.z}, {lo.x, lo.y, hi.z}, {hi.x, lo.y, hi.z},
                {hi.x, hi.y, hi.z}, {lo.x, hi.y, hi.z}};
  m.triangles = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
                 {2, 3, 7}, {2, 7, 6}, {1, 2, 6}, {1, 6, 5}, {3, 0, 4}, {3, 4, 7}};
  return m;
}

double round_dyadic(double x) { return std::ldexp(std::round(std::ldexp(x, 20)), -20); }

}  // namespace

TEST_CASE("chamfer distance: hand values, symmetry, grid equals brute force") {
  const std::vector<Point3> single_a = {{0.0, 0.0, 0.0}};
  const std::vector<Point3> single_b = {{3.0, 4.0, 0.0}};
  CHECK(chamfer(single_a, single_a) == 0.0);
  CHECK(chamfer(single_a, single_b) == 5.0);
  CHECK_THROWS_AS(chamfer({}, single_b), std::invalid_argument);
  CHECK_THROWS_AS(chamfer(single_a, {}), std::invalid_argument);

  const std::vector<Point3> a = random_points(500, 11);
  std::vector<Point3> b = random_points(500, 12, -0.8, 1.3);
  CHECK(std::abs(chamfer(a, b) - brute_chamfer(a, b)) <= 1e-9);
  CHECK(chamfer(a, a) == 0.0);

  // Clustered sets stress the cell walk: two tight lumps plus one outlier.
  std::vector<Point3> lumpy = random_points(200, 13, -0.01, 0.01);
  for (const auto& p : random_points(200, 14, -0.01, 0.01))
    lumpy.push_back(p + Vec3{5.0, 0.0, 0.0});
  lumpy.push_back({40.0, -7.0, 3.0});
  CHECK(std::abs(chamfer(lumpy, b) - brute_chamfer(lumpy, b)) <= 1e-9);
  CHECK(std::abs(chamfer(a, lumpy) - brute_chamfer(a, lumpy)) <= 1e-9);

  // Symmetric in its arguments, exactly.
  CHECK(chamfer(a, b) == chamfer(b, a));

  // Translating both sets together changes nothing; dyadic coordinates keep
  // the float arithmetic exact so the equality holds bitwise.
  for (auto& p : b) p = {round_dyadic(p.x), round_dyadic(p.y), round_dyadic(p.z)};
  std::vector<Point3> a_q = a;
  for (auto& p : a_q) p = {round_dyadic(p.x), round_dyadic(p.y), round_dyadic(p.z)};
  const Vec3 t{0.5, -8.25, 3.125};
  std::vector<Point3> a_t = a_q, b_t = b;
  for (auto& p : a_t) p += t;
  for (auto& p : b_t) p += t;
  CHECK(chamfer(a_q, b) == chamfer(a_t, b_t));
}

TEST_CASE("point-to-triangle kernel: regions, degenerates, dense-sampling bound") {
  const Point3 ta{0.0, 0.0, 0.0}, tb{1.0, 0.0, 0.0}, tc{0.0, 1.0, 0.0};
  CHECK(detail::point_triangle_distance2({0.25, 0.25, 2.0}, ta, tb, tc) == 4.0);
  CHECK(detail::point_triangle_distance2({2.0, 0.0, 0.0}, ta, tb, tc) == 1.0);
  CHECK(detail::point_triangle_distance2({0.5, -1.0, 0.0}, ta, tb, tc) == 1.0);
  CHECK(detail::point_triangle_distance2({0.25, 0.25, 0.0}, ta, tb, tc) == 0.0);

  // Degenerate triangles fall back to their edges and vertices.
  CHECK(detail::point_triangle_distance2({1.0, 1.0, 0.0}, {0, 0, 0}, {1, 0, 0},
                                         {2, 0, 0}) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(detail::point_triangle_distance2({3.0, 4.0, 0.0}, {0, 0, 0}, {0, 0, 0},
                                         {0, 0, 0}) == 25.0);

  // Exact kernel vs a dense barycentric sampling of each triangle: never
  // larger, and the gap is below the sample spacing.
  Rng rng(77);
  const int grid = 60;
  for (int trial = 0; trial < 100; ++trial) {
    Point3 v[3];
    for (auto& p : v)
      p = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    const Point3 q{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
    const double exact = std::sqrt(detail::point_triangle_distance2(q, v[0], v[1], v[2]));
    double approx2 = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= grid; ++i)
      for (int j = 0; j <= grid - i; ++j) {
        const double u = double(i) / grid, w = double(j) / grid;
        const Point3 s = v[0] + u * (v[1] - v[0]) + w * (v[2] - v[0]);
        approx2 = std::min(approx2, (q - s).squared_norm());
      }
    const double approx = std::sqrt(approx2);
    const double spacing = std::max({(v[1] - v[0]).norm(), (v[2] - v[1]).norm(),
                                     (v[0] - v[2]).norm()}) /
                           double(grid);
    CHECK(exact <= approx + 1e-12);
    CHECK(approx - exact <= spacing + 1e-12);
  }
}

TEST_CASE("nearest-surface index equals brute force on a random triangle soup") {
  TriMesh soup;
  soup.vertices = random_points(90, 21);
  Rng rng(22);
  for (int t = 0; t < 120; ++t) {
    const int i = int(rng.uniform_index(soup.vertices.size()));
    const int j = int(rng.uniform_index(soup.vertices.size()));
    const int k = int(rng.uniform_index(soup.vertices.size()));
    soup.triangles.push_back({i, j, k});
  }
  const detail::TriangleIndex index(soup);

  const auto brute = [&](const Point3& q) {
    double best2 = std::numeric_limits<double>::infinity();
    for (const auto& tri : soup.triangles)
      best2 = std::min(best2, detail::point_triangle_distance2(
                                  q, soup.vertices[std::size_t(tri[0])],
                                  soup.vertices[std::size_t(tri[1])],
                                  soup.vertices[std::size_t(tri[2])]));
    return std::sqrt(best2);
  };

  std::vector<Point3> queries = random_points(120, 23, -1.4, 1.4);
  for (const auto& p : random_points(40, 24)) queries.push_back(p + Vec3{9.0, -4.0, 11.0});
  for (const auto& q : queries) CHECK(std::abs(index.distance(q) - brute(q)) <= 1e-12);
}

TEST_CASE("point-to-surface error: zero on itself, offset boxes, zero-iff") {
  const TriMesh cube = box_mesh({0, 0, 0}, {1, 1, 1});

  const P2sResult self = p2s(cube, cube, 400, 5);
  CHECK(self.vertex_mean == 0.0);
  CHECK(self.sample_mean <= 1e-12);
  REQUIRE(self.vertex_errors.size() == 8);
  for (double e : self.vertex_errors) CHECK(e == 0.0);

  // Unit box against the box inflated by 0.1: every point of the unit box
  // surface sits exactly 0.1 inside, so both means are 0.1.
  const TriMesh inflated = box_mesh({-0.1, -0.1, -0.1}, {1.1, 1.1, 1.1});
  const P2sResult off = p2s(cube, inflated, 600, 6);
  CHECK(off.vertex_mean == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(off.sample_mean == doctest::Approx(0.1).epsilon(1e-9));

  // Zero exactly when every vertex lies on the reference surface: one vertex
  // nudged off the surface must show up, located and sized.
  TriMesh nudged = cube;
  nudged.vertices[6] = {1.002, 1.0, 1.0};
  const P2sResult bumped = p2s(nudged, cube, 100, 7);
  CHECK(bumped.vertex_mean > 0.0);
  CHECK(bumped.vertex_errors[6] == doctest::Approx(0.002).epsilon(1e-9));
  for (int i = 0; i < 6; ++i) CHECK(bumped.vertex_errors[std::size_t(i)] == 0.0);

  CHECK_THROWS_AS(p2s(TriMesh{}, cube, 10), std::invalid_argument);
  CHECK_THROWS_AS(p2s(cube, TriMesh{}, 10), std::invalid_argument);
  CHECK_THROWS_AS(p2s(cube, cube, 0), std::invalid_argument);
}

TEST_CASE("volumetric IoU: offset cubes within a voxel shell, edge cases") {
  const VoxelLattice lat = VoxelLattice::from_bounds({-0.2, -0.2, -0.2},
                                                     {1.7, 1.7, 1.7}, {64, 64, 64});
  const auto fill_box = [&](const Point3& lo, const Point3& hi) {
    ScalarGrid g = ScalarGrid::filled(lat, 0.0);
    for (int k = 0; k < lat.res[2]; ++k)
      for (int j = 0; j < lat.res[1]; ++j)
        for (int i = 0; i < lat.res[0]; ++i) {
          const Point3 p = lat.node_pos(i, j, k);
          const bool in = p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y &&
                          p.z >= lo.z && p.z <= hi.z;
          if (in) g.values[lat.node_index(i, j, k)] = 1.0;
        }
    return g;
  };
  const auto count_box = [&](const Point3& lo, const Point3& hi) {
    const ScalarGrid g = fill_box(lo, hi);
    double n = 0;
    for (double v : g.values) n += (v >= 0.5);
    return n;
  };

  const ScalarGrid a = fill_box({0, 0, 0}, {1, 1, 1});
  const ScalarGrid b = fill_box({0.5, 0, 0}, {1.5, 1, 1});
  CHECK(iou3d(a, a) == 1.0);

  const double iou = iou3d(a, b);
  // One voxel shell of slack around the analytic ratio 1/3: bracket the
  // intersection [0.5,1]x[0,1]^2 and union [0,1.5]x[0,1]^2 node counts by
  // boxes shrunk and grown by one cell.
  const double h = std::max({lat.cell.x, lat.cell.y, lat.cell.z});
  const double int_lo = count_box({0.5 + h, h, h}, {1 - h, 1 - h, 1 - h});
  const double int_hi = count_box({0.5 - h, -h, -h}, {1 + h, 1 + h, 1 + h});
  const double uni_lo = count_box({h, h, h}, {1.5 - h, 1 - h, 1 - h});
  const double uni_hi = count_box({-h, -h, -h}, {1.5 + h, 1 + h, 1 + h});
  const double lo_bound = int_lo / uni_hi;
  const double hi_bound = int_hi / uni_lo;
  CHECK(lo_bound <= 1.0 / 3.0);
  CHECK(1.0 / 3.0 <= hi_bound);
  CHECK(iou >= lo_bound);
  CHECK(iou <= hi_bound);
  CHECK(std::abs(iou - 1.0 / 3.0) < 0.05);

  // Disjoint shapes share nothing.
  const ScalarGrid far_box = fill_box({1.3, 1.3, 1.3}, {1.6, 1.6, 1.6});
  CHECK(iou3d(a, far_box) == 0.0);

  // Empty union is defined as 1 and says so.
  const ScalarGrid empty1 = ScalarGrid::filled(lat, 0.0);
  const ScalarGrid empty2 = ScalarGrid::filled(lat, 0.0);
  std::string notice;
  CHECK(iou3d(empty1, empty2, 0.5, &notice) == 1.0);
  CHECK(!notice.empty());

  // Lattice mismatch is an error, not a guess.
  const VoxelLattice other = VoxelLattice::from_bounds({-0.2, -0.2, -0.2},
                                                       {1.7, 1.7, 1.7}, {32, 32, 32});
  CHECK_THROWS_AS(iou3d(a, ScalarGrid::filled(other, 0.0)), std::invalid_argument);
  const VoxelLattice shifted = VoxelLattice::from_bounds({-0.3, -0.2, -0.2},
                                                         {1.7, 1.7, 1.7}, {64, 64, 64});
  CHECK_THROWS_AS(iou3d(a, ScalarGrid::filled(shifted, 0.0)), std::invalid_argument);
}

TEST_CASE("silhouette IoU: oracle self-consistency, off-frame, missing instance") {
  SceneSpec spec;
  spec.seed = 99;
  spec.figure_count = 3;
  spec.figure_mesh_res = 40;
  spec.rig.n_views = 2;
  spec.rig.image_width = 48;
  spec.rig.image_height = 48;
  spec.rig.focal = 36.0;
  const Scene scene = build_scene(spec);

  std::vector<TriMesh> world;
  for (std::size_t j = 0; j < 3; ++j) world.push_back(scene.world_mesh(j));
  std::vector<std::vector<MaskImage>> gt_masks;
  for (const auto& cam : scene.cameras)
    gt_masks.push_back(render_scene(world, cam).instance_mask);

  {  // the scene against its own masks matches exactly
    const Iou2dResult res = iou2d(world, scene.cameras, gt_masks);
    CHECK(res.mean == 1.0);
    REQUIRE(res.per.size() == 2);
    for (const auto& row : res.per)
      for (double v : row) CHECK(v == 1.0);
    CHECK(res.notices.empty());
  }
  {  // an instance moved fully off-frame scores zero in every view
    std::vector<TriMesh> moved = world;
    RigidTransform away;
    away.translation = {1000.0, 0.0, 0.0};
    moved[0] = world[0].transformed(away);
    const Iou2dResult res = iou2d(moved, scene.cameras, gt_masks);
    CHECK(res.per[0][0] == 0.0);
    CHECK(res.per[1][0] == 0.0);
    CHECK(res.per[0][1] == 1.0);
    CHECK(res.mean < 1.0);
  }
  {  // a missing reconstruction scores zero and leaves a notice
    std::vector<TriMesh> partial = world;
    partial[1] = TriMesh{};
    const Iou2dResult res = iou2d(partial, scene.cameras, gt_masks);
    CHECK(res.per[0][1] == 0.0);
    CHECK(res.per[1][1] == 0.0);
    REQUIRE(res.notices.size() == 1);
    CHECK(res.notices[0].find("missing") != std::string::npos);
  }

  CHECK_THROWS_AS(iou2d(world, {}, {}), std::invalid_argument);
  CHECK_THROWS_AS(iou2d(world, scene.cameras, {gt_masks[0]}), std::invalid_argument);
  std::vector<std::vector<MaskImage>> short_masks = gt_masks;
  short_masks[0].pop_back();
  CHECK_THROWS_AS(iou2d(world, scene.cameras, short_masks), std::invalid_argument);
}

TEST_CASE("metric report: unit scaling, validation, table, error map export") {
  MetricReport rep;
  rep.cd = 0.0147;
  rep.p2s = 0.0123;
  rep.p2s_samples = 0.0125;
  rep.iou3d = 0.82;
  rep.iou2d = 0.93;
  rep.per_instance.push_back({1, true, 0.01, 0.02, 0.021, 0.9});
  rep.per_instance.push_back({2, false, 0.0, 0.0, 0.0, 0.0});
  rep.notices.push_back("instance 2 missing");

  const nlohmann::json doc = rep.to_json();
  CHECK(doc["cd"].get<double>() == doctest::Approx(1.47).epsilon(1e-12));
  CHECK(doc["p2s"].get<double>() == doctest::Approx(1.23).epsilon(1e-12));
  CHECK(doc["iou3d"].get<double>() == 0.82);
  CHECK(doc["units"]["cd"] == "1e-2 scene units");
  REQUIRE(doc["per_instance"].size() == 2);
  CHECK(doc["per_instance"][0]["cd"].get<double>() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(doc["per_instance"][1]["reconstructed"] == false);
  CHECK(doc["notices"].size() == 1);

  const std::string table = rep.table();
  CHECK(table.find("1e-2 scene units") != std::string::npos);
  CHECK(table.find("1.4700") != std::string::npos);
  CHECK(table.find("note: instance 2 missing") != std::string::npos);

  MetricReport bad = rep;
  bad.iou2d = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = rep;
  bad.cd = -0.1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  // Error map: red at no error, blue at the maximum, linear in between.
  const TriMesh cube = box_mesh({0, 0, 0}, {1, 1, 1});
  std::vector<double> errors(8, 0.0);
  errors[3] = 0.05;  // the maximum
  errors[5] = 0.025;
  const std::string path = "/tmp/crowdrec_error_map.obj";
  write_error_map_obj(path, cube, errors);
  std::ifstream in(path);
  std::vector<std::string> vlines;
  int flines = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("v ", 0) == 0) vlines.push_back(line);
    if (line.rfind("f ", 0) == 0) ++flines;
  }
  REQUIRE(vlines.size() == 8);
  CHECK(flines == 12);
  CHECK(vlines[0].find(" 1 0 0") != std::string::npos);     // zero error: red
  CHECK(vlines[3].find(" 0 0 1") != std::string::npos);     // max error: blue
  CHECK(vlines[5].find(" 0.5 0 0.5") != std::string::npos); // halfway

  CHECK_THROWS_AS(write_error_map_obj(path, cube, {0.0, 0.0}), std::invalid_argument);
  CHECK_THROWS_AS(write_error_map_obj(path, cube,
                                      {0, 0, 0, -1, 0, 0, 0, 0}),
                  std::invalid_argument);

  // All-zero errors color every vertex red.
  write_error_map_obj(path, cube, std::vector<double>(8, 0.0));
  std::ifstream in2(path);
  for (std::string line; std::getline(in2, line);)
    if (line.rfind("v ", 0) == 0) CHECK(line.find(" 1 0 0") != std::string::npos);
}
