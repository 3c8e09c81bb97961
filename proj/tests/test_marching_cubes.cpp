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
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <utility>

#include "crowdrec/core.hpp"
#include "crowdrec/marching_cubes.hpp"
#include "crowdrec/mesh.hpp"

using namespace crowdrec;

namespace {

ScalarGrid fill_field(const VoxelLattice& lat,
                      const std::function<double(const Point3&)>& f) {
  ScalarGrid g;
  g.lattice = lat;
  g.values.resize(lat.node_count());
  for (int k = 0; k < lat.res[2]; ++k)
    for (int j = 0; j < lat.res[1]; ++j)
      for (int i = 0; i < lat.res[0]; ++i)
        g.values[lat.node_index(i, j, k)] = f(lat.node_pos(i, j, k));
  return g;
}

VoxelLattice cube_lattice(double half, int res) {
  VoxelLattice lat;
  lat.origin = {-half, -half, -half};
  const double cell = 2 * half / (res - 1);
  lat.cell = {cell, cell, cell};
  lat.res = {res, res, res};
  return lat;
}

// V - E + F with E counted over undirected welded edges.
long euler_characteristic(const TriMesh& m) {
  std::set<std::pair<int, int>> edges;
  for (const auto& t : m.triangles)
    for (int e = 0; e < 3; ++e) {
      const int a = t[std::size_t(e)], b = t[std::size_t((e + 1) % 3)];
      edges.emplace(std::min(a, b), std::max(a, b));
    }
  return long(m.vertices.size()) - long(edges.size()) + long(m.triangles.size());
}

}  // namespace

TEST_CASE("sphere field extracts a watertight sphere with correct measures") {
  const double r = 0.3;
  const VoxelLattice lat = cube_lattice(0.4, 64);
  const ScalarGrid grid =
      fill_field(lat, [&](const Point3& p) { return r - p.norm(); });
  CHECK_FALSE(field_touches_boundary(grid, 0.0));
  const TriMesh mesh = marching_cubes(grid, 0.0);
  REQUIRE(mesh.triangles.size() > 1000);

  const auto rep = check_watertight(mesh);
  CHECK(rep.closed);
  CHECK(rep.oriented);
  CHECK(euler_characteristic(mesh) == 2);

  // 4 pi r^2 = 1.130973..., 4/3 pi r^3 = 0.1130973...
  CHECK(mesh.area() == doctest::Approx(4 * kPi * r * r).epsilon(0.02));
  CHECK(mesh.signed_volume() == doctest::Approx(4.0 / 3.0 * kPi * r * r * r).epsilon(0.02));
  CHECK(mesh.signed_volume() > 0);  // outward winding

  // Linear interpolation of an exact signed distance keeps vertices close.
  for (const auto& v : mesh.vertices) CHECK(std::abs(v.norm() - r) < 1e-3);
}

TEST_CASE("torus field has genus one and matches analytic measures loosely") {
  const double R = 0.25, rm = 0.08;
  const VoxelLattice lat = cube_lattice(0.4, 56);
  const ScalarGrid grid = fill_field(lat, [&](const Point3& p) {
    const double q = std::sqrt(p.x * p.x + p.y * p.y) - R;
    return rm - std::sqrt(q * q + p.z * p.z);
  });
  const TriMesh mesh = marching_cubes(grid, 0.0);
  const auto rep = check_watertight(mesh);
  CHECK(rep.closed);
  CHECK(rep.oriented);
  CHECK(euler_characteristic(mesh) == 0);
  // area = 4 pi^2 R rm, volume = 2 pi^2 R rm^2
  CHECK(mesh.area() == doctest::Approx(4 * kPi * kPi * R * rm).epsilon(0.03));
  CHECK(mesh.signed_volume() == doctest::Approx(2 * kPi * kPi * R * rm * rm).epsilon(0.03));
}

TEST_CASE("single hot node yields the analytic octahedron") {
  const VoxelLattice lat = cube_lattice(0.5, 11);  // cell 0.1, node at origin
  ScalarGrid grid = fill_field(lat, [](const Point3&) { return 0.0; });
  grid.values[lat.node_index(5, 5, 5)] = 0.6;
  const TriMesh mesh = marching_cubes(grid, 0.5);

  // Crossings sit at t = (0.5 - 0.6) / (0 - 0.6) = 1/6 of a cell from the
  // hot node, so the surface is an octahedron with semi-axis d = 0.1 / 6.
  const double d = 0.1 / 6.0;
  REQUIRE(mesh.triangles.size() == 8);
  CHECK(mesh.vertices.size() == 6);
  CHECK(check_watertight(mesh).watertight());
  CHECK(mesh.signed_volume() == doctest::Approx(4.0 / 3.0 * d * d * d).epsilon(1e-10));
  CHECK(mesh.area() == doctest::Approx(4.0 * std::sqrt(3.0) * d * d).epsilon(1e-10));
  for (const auto& v : mesh.vertices)
    CHECK(std::abs(v.x) + std::abs(v.y) + std::abs(v.z) == doctest::Approx(d).epsilon(1e-9));
}

TEST_CASE("interpolation snapping welds onto lattice nodes without slivers") {
  const VoxelLattice lat = cube_lattice(0.5, 11);
  ScalarGrid grid = fill_field(lat, [](const Point3&) { return 0.0; });
  // Barely above iso: every crossing snaps onto the hot node itself, so all
  // eight faces collapse and the mesh comes out empty.
  grid.values[lat.node_index(5, 5, 5)] = 0.5 + 1e-14;
  const TriMesh tiny = marching_cubes(grid, 0.5);
  CHECK(tiny.triangles.empty());

  // A snapped crossing shared between cells must weld to one vertex: take a
  // 2-node segment at exactly-representable values.
  grid = fill_field(lat, [](const Point3&) { return 0.0; });
  grid.values[lat.node_index(5, 5, 5)] = 1.0;
  grid.values[lat.node_index(6, 5, 5)] = 1.0 - 1e-14;
  const TriMesh seg = marching_cubes(grid, 0.5);
  CHECK(check_watertight(seg).watertight());
  CHECK(euler_characteristic(seg) == 2);
}

TEST_CASE("binary occupancy fields extract closed blocky surfaces") {
  const TriMesh cube_mesh = [] {
    TriMesh m;
    for (int c = 0; c < 8; ++c)
      m.vertices.push_back(
          {(c & 1) ? 0.5 : -0.5, (c & 2) ? 0.5 : -0.5, (c & 4) ? 0.5 : -0.5});
    const int quads[6][4] = {{0, 4, 6, 2}, {1, 3, 7, 5}, {0, 1, 5, 4},
                             {2, 6, 7, 3}, {0, 2, 3, 1}, {4, 5, 7, 6}};
    for (const auto& q : quads) {
      m.triangles.push_back({q[0], q[1], q[2]});
      m.triangles.push_back({q[0], q[2], q[3]});
    }
    return m;
  }();
  const VoxelLattice lat = cube_lattice(1.0, 21);
  const ScalarGrid occ = voxelize(cube_mesh, lat);
  CHECK(occ.is_probability_field());
  const TriMesh blocky = marching_cubes(occ, 0.5);
  CHECK(check_watertight(blocky).watertight());
  CHECK(euler_characteristic(blocky) == 2);
  CHECK(blocky.signed_volume() > 1.0);
  CHECK(blocky.signed_volume() < 1.331);  // at most the 1.1-cube hull
  // Every vertex sits within a cell of the source surface.
  for (const auto& v : blocky.vertices) {
    const double m = std::max({std::abs(v.x), std::abs(v.y), std::abs(v.z)});
    CHECK(std::abs(m - 0.5) < 0.1 + 1e-9);
  }
}

TEST_CASE("fields crossing the border are reported and extract open sheets") {
  const VoxelLattice lat = cube_lattice(0.5, 12);
  const ScalarGrid half = fill_field(lat, [](const Point3& p) { return 0.2 - p.x; });
  CHECK(field_touches_boundary(half, 0.0));
  const TriMesh sheet = marching_cubes(half, 0.0);
  REQUIRE(!sheet.triangles.empty());
  const auto rep = check_watertight(sheet);
  CHECK_FALSE(rep.closed);
  CHECK(rep.boundary_edges > 0);

  const ScalarGrid zeros = fill_field(lat, [](const Point3&) { return 0.0; });
  CHECK_FALSE(field_touches_boundary(zeros, 0.5));
  CHECK(marching_cubes(zeros, 0.5).triangles.empty());
}

TEST_CASE("extraction is deterministic") {
  const VoxelLattice lat = cube_lattice(0.4, 40);
  Rng rng(31);
  ScalarGrid grid;
  grid.lattice = lat;
  grid.values.resize(lat.node_count());
  // Smooth random blob union so many case-table entries fire.
  Point3 centers[5];
  double radii[5];
  for (int b = 0; b < 5; ++b) {
    centers[b] = rng.uniform_in_box({-0.2, -0.2, -0.2}, {0.2, 0.2, 0.2});
    radii[b] = rng.uniform(0.05, 0.15);
  }
  for (int k = 0; k < lat.res[2]; ++k)
    for (int j = 0; j < lat.res[1]; ++j)
      for (int i = 0; i < lat.res[0]; ++i) {
        const Point3 p = lat.node_pos(i, j, k);
        double v = -1e9;
        for (int b = 0; b < 5; ++b)
          v = std::max(v, radii[b] - (p - centers[b]).norm());
        grid.values[lat.node_index(i, j, k)] = v;
      }
  const TriMesh a = marching_cubes(grid, 0.0);
  const TriMesh b = marching_cubes(grid, 0.0);
  REQUIRE(a.vertices.size() == b.vertices.size());
  REQUIRE(a.triangles.size() == b.triangles.size());
  for (std::size_t i = 0; i < a.vertices.size(); ++i) {
    CHECK(a.vertices[i].x == b.vertices[i].x);
    CHECK(a.vertices[i].y == b.vertices[i].y);
    CHECK(a.vertices[i].z == b.vertices[i].z);
  }
  for (std::size_t i = 0; i < a.triangles.size(); ++i)
    CHECK(a.triangles[i] == b.triangles[i]);
  CHECK(check_watertight(a).watertight());

  // The blob union is itself closed and reasonably smooth.
  CHECK(a.signed_volume() > 0);
}
