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

// Marching cubes over node-centered scalar grids.  Vertices are welded
// globally by lattice edge, so the output is a closed 2-manifold whenever
// the iso-surface stays strictly interior to the lattice.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "crowdrec/core.hpp"
#include "crowdrec/mc_tables.hpp"
#include "crowdrec/mesh.hpp"

namespace crowdrec {

namespace detail {

// Corner offsets in table order: bottom ring 0-3 counterclockwise, then the
// +z ring 4-7 above it.
inline constexpr std::array<std::array<int, 3>, 8> kMcCorner = {{
    {0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
    {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1},
}};

// Edge e connects corners kMcEdgeEnds[e][0] and [1].
inline constexpr std::array<std::array<int, 2>, 12> kMcEdgeEnds = {{
    {0, 1}, {1, 2}, {2, 3}, {3, 0},
    {4, 5}, {5, 6}, {6, 7}, {7, 4},
    {0, 4}, {1, 5}, {2, 6}, {3, 7},
}};

}  // namespace detail

// True when any lattice boundary node is on the high side of iso, i.e. the
// extracted surface would be clipped open by the grid border.
inline bool field_touches_boundary(const ScalarGrid& grid, double iso) {
  grid.lattice.validate();
  const auto& r = grid.lattice.res;
  for (int k = 0; k < r[2]; ++k)
    for (int j = 0; j < r[1]; ++j)
      for (int i = 0; i < r[0]; ++i) {
        if (i != 0 && i != r[0] - 1 && j != 0 && j != r[1] - 1 && k != 0 &&
            k != r[2] - 1)
          continue;
        if (grid.at(i, j, k) > iso) return true;
      }
  return false;
}

// Extracts the iso-surface of the grid seen as a continuous trilinear field.
// Nodes with value > iso count as interior; triangles wind so that normals
// point out of the high-valued region (positive signed volume for a solid).
inline TriMesh marching_cubes(const ScalarGrid& grid, double iso = 0.5) {
  grid.lattice.validate();
  if (grid.values.size() != grid.lattice.node_count())
    throw std::invalid_argument("marching_cubes: value count != node count");
  const VoxelLattice& lat = grid.lattice;
  const std::int64_t node_count = std::int64_t(lat.node_count());

  TriMesh mesh;
  // Keys < node_count name a lattice node (interpolation snapped onto it);
  // the rest name an interior point of a lattice edge.
  std::unordered_map<std::int64_t, int> weld;
  weld.reserve(1024);

  auto vertex_on_edge = [&](std::int64_t na, std::int64_t nb, double va,
                            double vb, const Point3& pa, const Point3& pb) {
    double t = (iso - va) / (vb - va);
    t = std::min(std::max(t, 0.0), 1.0);
    std::int64_t key;
    Point3 pos;
    if (t < 1e-12) {
      key = na;
      pos = pa;
    } else if (t > 1.0 - 1e-12) {
      key = nb;
      pos = pb;
    } else {
      const std::int64_t lo = std::min(na, nb), hi = std::max(na, nb);
      key = node_count + lo * node_count + hi;
      pos = pa + (pb - pa) * t;
    }
    const auto it = weld.find(key);
    if (it != weld.end()) return it->second;
    const int id = int(mesh.vertices.size());
    mesh.vertices.push_back(pos);
    weld.emplace(key, id);
    return id;
  };

  std::array<double, 8> val;
  std::array<std::int64_t, 8> node;
  std::array<Point3, 8> pos;
  for (int k = 0; k + 1 < lat.res[2]; ++k) {
    for (int j = 0; j + 1 < lat.res[1]; ++j) {
      for (int i = 0; i + 1 < lat.res[0]; ++i) {
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          const int ci = i + detail::kMcCorner[std::size_t(c)][0];
          const int cj = j + detail::kMcCorner[std::size_t(c)][1];
          const int ck = k + detail::kMcCorner[std::size_t(c)][2];
          node[std::size_t(c)] = std::int64_t(lat.node_index(ci, cj, ck));
          val[std::size_t(c)] = grid.values[std::size_t(node[std::size_t(c)])];
          pos[std::size_t(c)] = lat.node_pos(ci, cj, ck);
          if (val[std::size_t(c)] > iso) cube |= 1 << c;
        }
        const int active = detail::kMcEdgeTable[std::size_t(cube)];
        if (active == 0) continue;
        std::array<int, 12> edge_vertex;
        for (int e = 0; e < 12; ++e) {
          if (!(active & (1 << e))) continue;
          const int a = detail::kMcEdgeEnds[std::size_t(e)][0];
          const int b = detail::kMcEdgeEnds[std::size_t(e)][1];
          edge_vertex[std::size_t(e)] = vertex_on_edge(
              node[std::size_t(a)], node[std::size_t(b)], val[std::size_t(a)],
              val[std::size_t(b)], pos[std::size_t(a)], pos[std::size_t(b)]);
        }
        const auto& tri = detail::kMcTriTable[std::size_t(cube)];
        for (int t = 0; tri[std::size_t(t)] != -1; t += 3) {
          const int v0 = edge_vertex[std::size_t(tri[std::size_t(t)])];
          const int v1 = edge_vertex[std::size_t(tri[std::size_t(t) + 1])];
          const int v2 = edge_vertex[std::size_t(tri[std::size_t(t) + 2])];
          if (v0 == v1 || v1 == v2 || v0 == v2) continue;  // snapped sliver
          // Table order winds around the low side; swapping puts normals on
          // the high-valued (interior) side's outside.
          mesh.triangles.push_back({v0, v2, v1});
        }
      }
    }
  }
  mesh.drop_degenerate();
  return mesh;
}

}  // namespace crowdrec
