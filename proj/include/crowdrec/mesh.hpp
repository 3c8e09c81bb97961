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

// Triangle meshes: OBJ round-tripping (with optional per-vertex colors),
// watertightness analysis, robust point-in-mesh parity tests, node-centric
// voxelization, area-weighted surface sampling, and triangle-triangle
// intersection for overlap rejection.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crowdrec/core.hpp"

namespace crowdrec {

struct TriMesh {
  std::vector<Point3> vertices;
  std::vector<std::array<int, 3>> triangles;
  // Either empty or one RGB color in [0,1] per vertex.
  std::vector<Vec3> colors;

  bool has_colors() const { return !colors.empty(); }

  void validate() const {
    if (!colors.empty() && colors.size() != vertices.size())
      throw std::invalid_argument("TriMesh: color count mismatch");
    const int n = int(vertices.size());
    for (const auto& t : triangles)
      for (int v : t)
        if (v < 0 || v >= n) throw std::invalid_argument("TriMesh: vertex index out of range");
  }

  std::pair<Point3, Point3> bbox() const {
    if (vertices.empty()) throw std::invalid_argument("TriMesh::bbox: empty mesh");
    Point3 lo = vertices[0], hi = vertices[0];
    for (const auto& v : vertices) {
      lo = lo.cwise_min(v);
      hi = hi.cwise_max(v);
    }
    return {lo, hi};
  }

  double triangle_area(int t) const {
    const auto& tri = triangles[std::size_t(t)];
    const Vec3 e1 = vertices[tri[1]] - vertices[tri[0]];
    const Vec3 e2 = vertices[tri[2]] - vertices[tri[0]];
    return 0.5 * cross(e1, e2).norm();
  }

  // Unit normal following the triangle's winding; zero for degenerate faces.
  Vec3 triangle_normal(int t) const {
    const auto& tri = triangles[std::size_t(t)];
    const Vec3 e1 = vertices[tri[1]] - vertices[tri[0]];
    const Vec3 e2 = vertices[tri[2]] - vertices[tri[0]];
    const Vec3 n = cross(e1, e2);
    const double len = n.norm();
    return len > 0 ? n * (1.0 / len) : Vec3{0, 0, 0};
  }

  double area() const {
    double a = 0;
    for (int t = 0; t < int(triangles.size()); ++t) a += triangle_area(t);
    return a;
  }

  // One sixth of the summed triple products; positive for outward-wound
  // closed surfaces.
  double signed_volume() const {
    double vol = 0;
    for (const auto& t : triangles) {
      const Point3& a = vertices[t[0]];
      const Point3& b = vertices[t[1]];
      const Point3& c = vertices[t[2]];
      vol += dot(a, cross(b, c));
    }
    return vol / 6.0;
  }

  TriMesh transformed(const RigidTransform& tf) const {
    TriMesh out = *this;
    for (auto& v : out.vertices) v = tf.apply(v);
    return out;
  }

  void append(const TriMesh& other) {
    if (has_colors() != other.has_colors() && !triangles.empty() && !other.triangles.empty())
      throw std::invalid_argument("TriMesh::append: mixed color presence");
    const int base = int(vertices.size());
    vertices.insert(vertices.end(), other.vertices.begin(), other.vertices.end());
    colors.insert(colors.end(), other.colors.begin(), other.colors.end());
    for (const auto& t : other.triangles)
      triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
  }

  void drop_degenerate(double min_area = 1e-12) {
    std::vector<std::array<int, 3>> kept;
    kept.reserve(triangles.size());
    for (int t = 0; t < int(triangles.size()); ++t)
      if (triangle_area(t) > min_area) kept.push_back(triangles[std::size_t(t)]);
    triangles = std::move(kept);
  }
};

// ---------------------------------------------------------------------------
// Watertightness: closed means every undirected edge borders exactly two
// triangles; oriented means the two appearances run in opposite directions.

struct WatertightReport {
  bool closed = false;
  bool oriented = false;
  std::size_t boundary_edges = 0;
  std::size_t nonmanifold_edges = 0;
  std::size_t misoriented_edges = 0;
  bool watertight() const { return closed && oriented; }
};

inline WatertightReport check_watertight(const TriMesh& mesh) {
  mesh.validate();
  struct EdgeUse {
    int total = 0;
    int forward = 0;  // uses with lower index first
  };
  const std::int64_t n = std::int64_t(mesh.vertices.size());
  std::unordered_map<std::int64_t, EdgeUse> edges;
  edges.reserve(mesh.triangles.size() * 3);
  for (const auto& t : mesh.triangles) {
    for (int e = 0; e < 3; ++e) {
      const int a = t[std::size_t(e)], b = t[std::size_t((e + 1) % 3)];
      if (a == b) continue;  // collapsed edge counts as nonmanifold via its mates
      const std::int64_t key = std::min(a, b) * n + std::max(a, b);
      auto& use = edges[key];
      ++use.total;
      if (a < b) ++use.forward;
    }
  }
  WatertightReport rep;
  for (const auto& [key, use] : edges) {
    (void)key;
    if (use.total == 1) ++rep.boundary_edges;
    if (use.total > 2) ++rep.nonmanifold_edges;
    if (use.total == 2 && use.forward != 1) ++rep.misoriented_edges;
  }
  rep.closed = rep.boundary_edges == 0 && rep.nonmanifold_edges == 0 && !edges.empty();
  rep.oriented = rep.closed && rep.misoriented_edges == 0;
  return rep;
}

// ---------------------------------------------------------------------------
// OBJ io.  Supported: v (3 or 6 floats, the extra triple being an RGB color),
// f with 1-based or negative indices and any of the a, a/b, a//c, a/b/c
// forms, polygon fan triangulation.  vn/vt/usemtl/o/g/s/mtllib are skipped.

inline void save_obj(const std::string& path, const TriMesh& mesh) {
  mesh.validate();
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_obj: cannot open " + path);
  char buf[256];
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Point3& v = mesh.vertices[i];
    if (mesh.has_colors()) {
      const Vec3& c = mesh.colors[i];
      std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g %.9g %.9g %.9g\n",
                    v.x, v.y, v.z, c.x, c.y, c.z);
    } else {
      std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", v.x, v.y, v.z);
    }
    f << buf;
  }
  for (const auto& t : mesh.triangles) {
    std::snprintf(buf, sizeof buf, "f %d %d %d\n", t[0] + 1, t[1] + 1, t[2] + 1);
    f << buf;
  }
  if (!f) throw std::runtime_error("save_obj: write failed for " + path);
}

inline TriMesh load_obj(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_obj: cannot open " + path);
  TriMesh mesh;
  bool any_colors = false;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& why) {
    throw std::runtime_error("load_obj: " + path + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(f, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z)) fail("malformed vertex");
      mesh.vertices.push_back({x, y, z});
      double r, g, b;
      if (ss >> r >> g >> b) {
        if (!any_colors) {
          any_colors = true;
          mesh.colors.assign(mesh.vertices.size() - 1, Vec3{1, 1, 1});
        }
        mesh.colors.push_back({r, g, b});
      } else if (any_colors) {
        mesh.colors.push_back({1, 1, 1});
      }
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string item;
      while (ss >> item) {
        const std::size_t slash = item.find('/');
        const std::string head = slash == std::string::npos ? item : item.substr(0, slash);
        int v = 0;
        try {
          v = std::stoi(head);
        } catch (const std::exception&) {
          fail("malformed face index '" + item + "'");
        }
        if (v < 0) v = int(mesh.vertices.size()) + v;  // relative indexing
        else v -= 1;
        if (v < 0 || v >= int(mesh.vertices.size())) fail("face index out of range");
        idx.push_back(v);
      }
      if (idx.size() < 3) fail("face with fewer than three vertices");
      for (std::size_t i = 1; i + 1 < idx.size(); ++i)
        mesh.triangles.push_back({idx[0], idx[i], idx[i + 1]});
    }
    // Every other tag (vn, vt, o, g, s, usemtl, mtllib) is ignorable here.
  }
  mesh.drop_degenerate();
  mesh.validate();
  return mesh;
}

// ---------------------------------------------------------------------------
// Ray-triangle classification.  The parity tests below must never silently
// miscount a grazing hit, so edge-band and parallel-plane cases are surfaced
// as distinct outcomes and the caller recasts along a jittered direction.

namespace detail {

enum class RayHitClass { kMiss, kHit, kEdgeGraze, kOnSurface };

// Moller-Trumbore with symmetric tolerance bands.  scale is a length that
// normalizes the on-surface test (mesh bbox diagonal).
inline RayHitClass classify_ray_triangle(const Point3& o, const Vec3& d,
                                         const Point3& a, const Point3& b,
                                         const Point3& c, double scale,
                                         double* t_out) {
  constexpr double kBand = 1e-9;  // barycentric graze band
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 pv = cross(d, e2);
  const double det = dot(e1, pv);
  const Vec3 n = cross(e1, e2);
  const double area2 = n.norm();
  if (std::abs(det) <= 1e-12 * area2) {
    // Parallel ray: harmless unless it runs (nearly) inside the plane.
    if (std::abs(dot(o - a, n)) < 1e-9 * scale * area2) return RayHitClass::kEdgeGraze;
    return RayHitClass::kMiss;
  }
  const double inv = 1.0 / det;
  const Vec3 tv = o - a;
  const double u = dot(tv, pv) * inv;
  if (u < -kBand || u > 1 + kBand) return RayHitClass::kMiss;
  const Vec3 qv = cross(tv, e1);
  const double v = dot(d, qv) * inv;
  if (v < -kBand || u + v > 1 + kBand) return RayHitClass::kMiss;
  const double t = dot(e2, qv) * inv;
  if (std::abs(t) < 1e-12 * scale) return RayHitClass::kOnSurface;
  if (t < 0) return RayHitClass::kMiss;
  if (u < kBand || v < kBand || u + v > 1 - kBand) return RayHitClass::kEdgeGraze;
  *t_out = t;
  return RayHitClass::kHit;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Point-in-mesh parity test.  Triangles are binned over (y, z) so the default
// +x ray only visits a handful of candidates; grazing outcomes trigger a
// brute-force recast along deterministic jittered directions.

class InsideTester {
 public:
  explicit InsideTester(const TriMesh& mesh) {
    mesh.validate();
    if (mesh.triangles.empty()) throw std::invalid_argument("InsideTester: empty mesh");
    auto [lo, hi] = mesh.bbox();
    lo_ = lo;
    hi_ = hi;
    scale_ = std::max((hi - lo).norm(), 1e-12);
    tris_.reserve(mesh.triangles.size());
    for (const auto& t : mesh.triangles)
      tris_.push_back({mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]});

    const int want = int(std::ceil(std::sqrt(double(tris_.size()))));
    res_ = std::clamp(want, 4, 128);
    bins_.assign(std::size_t(res_) * res_, {});
    const double sy = std::max(hi_.y - lo_.y, 1e-12);
    const double sz = std::max(hi_.z - lo_.z, 1e-12);
    inv_cy_ = res_ / sy;
    inv_cz_ = res_ / sz;
    for (int i = 0; i < int(tris_.size()); ++i) {
      const Tri& tr = tris_[std::size_t(i)];
      const double y0 = std::min({tr.a.y, tr.b.y, tr.c.y});
      const double y1 = std::max({tr.a.y, tr.b.y, tr.c.y});
      const double z0 = std::min({tr.a.z, tr.b.z, tr.c.z});
      const double z1 = std::max({tr.a.z, tr.b.z, tr.c.z});
      for (int by = bin_y(y0); by <= bin_y(y1); ++by)
        for (int bz = bin_z(z0); bz <= bin_z(z1); ++bz)
          bins_[std::size_t(bz) * res_ + by].push_back(i);
    }
  }

  bool inside(const Point3& p) const {
    if (p.x < lo_.x || p.y < lo_.y || p.z < lo_.z ||
        p.x > hi_.x || p.y > hi_.y || p.z > hi_.z)
      return false;
    // Attempt 0 uses the binned +x ray; recasts go brute force.
    {
      const auto& bin = bins_[std::size_t(bin_z(p.z)) * res_ + bin_y(p.y)];
      int parity = 0;
      bool graze = false;
      for (int i : bin) {
        double t;
        const auto cls = detail::classify_ray_triangle(
            p, Vec3{1, 0, 0}, tris_[std::size_t(i)].a, tris_[std::size_t(i)].b,
            tris_[std::size_t(i)].c, scale_, &t);
        if (cls == detail::RayHitClass::kOnSurface) return true;
        if (cls == detail::RayHitClass::kEdgeGraze) {
          graze = true;
          break;
        }
        if (cls == detail::RayHitClass::kHit) parity ^= 1;
      }
      if (!graze) return parity != 0;
    }
    for (int attempt = 1; attempt <= 32; ++attempt) {
      Rng rng(0x517cc1b727220a95ULL ^ std::uint64_t(attempt));
      Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
      if (dir.norm() < 1e-3) continue;
      dir = dir.normalized();
      int parity = 0;
      bool graze = false;
      for (const Tri& tr : tris_) {
        double t;
        const auto cls =
            detail::classify_ray_triangle(p, dir, tr.a, tr.b, tr.c, scale_, &t);
        if (cls == detail::RayHitClass::kOnSurface) return true;
        if (cls == detail::RayHitClass::kEdgeGraze) {
          graze = true;
          break;
        }
        if (cls == detail::RayHitClass::kHit) parity ^= 1;
      }
      if (!graze) return parity != 0;
    }
    throw std::runtime_error("InsideTester: persistent grazing, degenerate mesh?");
  }

  // Sorted x coordinates where the +x line at (y, z) crosses the surface.
  // Returns false when a grazing configuration makes the column unreliable.
  bool column_crossings(double y, double z, std::vector<double>* xs) const {
    xs->clear();
    if (y < lo_.y || y > hi_.y || z < lo_.z || z > hi_.z) return true;
    const Point3 origin{lo_.x - 0.125 * scale_ - 1e-6, y, z};
    const auto& bin = bins_[std::size_t(bin_z(z)) * res_ + bin_y(y)];
    for (int i : bin) {
      double t;
      const auto cls = detail::classify_ray_triangle(
          origin, Vec3{1, 0, 0}, tris_[std::size_t(i)].a, tris_[std::size_t(i)].b,
          tris_[std::size_t(i)].c, scale_, &t);
      if (cls == detail::RayHitClass::kEdgeGraze ||
          cls == detail::RayHitClass::kOnSurface)
        return false;
      if (cls == detail::RayHitClass::kHit) xs->push_back(origin.x + t);
    }
    std::sort(xs->begin(), xs->end());
    return true;
  }

  double scale() const { return scale_; }

 private:
  struct Tri {
    Point3 a, b, c;
  };

  int bin_y(double y) const {
    return std::clamp(int((y - lo_.y) * inv_cy_), 0, res_ - 1);
  }
  int bin_z(double z) const {
    return std::clamp(int((z - lo_.z) * inv_cz_), 0, res_ - 1);
  }

  std::vector<Tri> tris_;
  Point3 lo_, hi_;
  double scale_ = 1;
  int res_ = 0;
  double inv_cy_ = 0, inv_cz_ = 0;
  std::vector<std::vector<int>> bins_;
};

inline bool point_inside(const TriMesh& mesh, const Point3& p) {
  return InsideTester(mesh).inside(p);
}

// Occupancy sampled at lattice nodes: 1 on or inside the surface, else 0.
// Columns of constant (y, z) share one ray; nodes that land within snapping
// distance of a crossing fall back to the full parity test.
inline ScalarGrid voxelize(const TriMesh& mesh, const VoxelLattice& lattice) {
  lattice.validate();
  const InsideTester tester(mesh);
  ScalarGrid grid;
  grid.lattice = lattice;
  grid.values.assign(lattice.node_count(), 0.0);
  const double snap = 1e-9 * tester.scale();
  std::vector<double> xs;
  for (int k = 0; k < lattice.res[2]; ++k) {
    for (int j = 0; j < lattice.res[1]; ++j) {
      const double y = lattice.origin.y + j * lattice.cell.y;
      const double z = lattice.origin.z + k * lattice.cell.z;
      const bool ok = tester.column_crossings(y, z, &xs);
      std::size_t idx = 0;
      for (int i = 0; i < lattice.res[0]; ++i) {
        const Point3 p = lattice.node_pos(i, j, k);
        double value;
        if (!ok) {
          value = tester.inside(p) ? 1.0 : 0.0;
        } else {
          while (idx < xs.size() && xs[idx] < p.x - snap) ++idx;
          if (idx < xs.size() && std::abs(xs[idx] - p.x) <= snap)
            value = tester.inside(p) ? 1.0 : 0.0;
          else
            value = (idx % 2 == 1) ? 1.0 : 0.0;
        }
        grid.values[lattice.node_index(i, j, k)] = value;
      }
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Area-weighted surface sampling.

struct SurfaceSample {
  Point3 position;
  Vec3 normal;
  int triangle = -1;
};

inline std::vector<SurfaceSample> sample_surface(const TriMesh& mesh, int count,
                                                 Rng& rng) {
  mesh.validate();
  if (mesh.triangles.empty()) throw std::invalid_argument("sample_surface: empty mesh");
  std::vector<double> cdf(mesh.triangles.size());
  double acc = 0;
  for (int t = 0; t < int(mesh.triangles.size()); ++t) {
    acc += mesh.triangle_area(t);
    cdf[std::size_t(t)] = acc;
  }
  if (acc <= 0) throw std::invalid_argument("sample_surface: zero total area");
  std::vector<SurfaceSample> out;
  out.reserve(std::size_t(count));
  for (int s = 0; s < count; ++s) {
    const double pick = rng.uniform() * acc;
    const int t = int(std::lower_bound(cdf.begin(), cdf.end(), pick) - cdf.begin());
    const int ti = std::min(t, int(mesh.triangles.size()) - 1);
    const auto& tri = mesh.triangles[std::size_t(ti)];
    // sqrt trick gives the uniform density over the triangle
    const double su = std::sqrt(rng.uniform());
    const double r2 = rng.uniform();
    const double wa = 1 - su, wb = su * (1 - r2), wc = su * r2;
    SurfaceSample smp;
    smp.position = mesh.vertices[tri[0]] * wa + mesh.vertices[tri[1]] * wb +
                   mesh.vertices[tri[2]] * wc;
    smp.normal = mesh.triangle_normal(ti);
    smp.triangle = ti;
    out.push_back(smp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Triangle-triangle intersection.  Non-coplanar pairs intersect iff an edge
// of one pierces the other; near-coplanar pairs fall back to a projected 2D
// overlap test.  Contacts within the tolerance band count as intersecting.

namespace detail {

inline bool segment_hits_triangle(const Point3& s0, const Point3& s1,
                                  const Point3& a, const Point3& b,
                                  const Point3& c, double scale) {
  const Vec3 d = s1 - s0;
  const double len = d.norm();
  if (len < 1e-15) return false;
  const Vec3 dir = d * (1.0 / len);
  double t;
  const auto cls = classify_ray_triangle(s0, dir, a, b, c, scale, &t);
  switch (cls) {
    case RayHitClass::kOnSurface:
      return true;
    case RayHitClass::kHit:
      return t <= len + 1e-12 * scale;
    case RayHitClass::kEdgeGraze: {
      // Grazing along the boundary: resolve with a midpoint plane check plus
      // a conservative proximity answer.
      const Vec3 n = cross(b - a, c - a);
      const double nn = n.norm();
      if (nn < 1e-15) return false;
      const double d0 = dot(s0 - a, n) / nn;
      const double d1 = dot(s1 - a, n) / nn;
      return std::abs(d0) < 1e-9 * scale || std::abs(d1) < 1e-9 * scale ||
             d0 * d1 < 0;
    }
    case RayHitClass::kMiss:
      return false;
  }
  return false;
}

inline bool point_in_tri_2d(double px, double py, const double t[3][2]) {
  double prev = 0;
  for (int e = 0; e < 3; ++e) {
    const double ax = t[e][0], ay = t[e][1];
    const double bx = t[(e + 1) % 3][0], by = t[(e + 1) % 3][1];
    const double crossv = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
    if (crossv != 0) {
      if (prev != 0 && (crossv > 0) != (prev > 0)) return false;
      prev = crossv;
    }
  }
  return true;
}

inline bool segments_cross_2d(const double a0[2], const double a1[2],
                              const double b0[2], const double b1[2]) {
  auto orient = [](const double p[2], const double q[2], const double r[2]) {
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
  };
  const double o1 = orient(a0, a1, b0), o2 = orient(a0, a1, b1);
  const double o3 = orient(b0, b1, a0), o4 = orient(b0, b1, a1);
  return ((o1 > 0) != (o2 > 0)) && ((o3 > 0) != (o4 > 0));
}

inline bool coplanar_tri_tri(const Point3 p[3], const Point3 q[3], const Vec3& n) {
  // Project onto the dominant-axis plane and test edge crossings plus
  // mutual containment.
  const double ax = std::abs(n.x), ay = std::abs(n.y), az = std::abs(n.z);
  int i0 = 0, i1 = 1;
  if (ax >= ay && ax >= az) {
    i0 = 1;
    i1 = 2;
  } else if (ay >= az) {
    i0 = 0;
    i1 = 2;
  }
  double tp[3][2], tq[3][2];
  for (int v = 0; v < 3; ++v) {
    tp[v][0] = p[v][i0];
    tp[v][1] = p[v][i1];
    tq[v][0] = q[v][i0];
    tq[v][1] = q[v][i1];
  }
  for (int e = 0; e < 3; ++e)
    for (int g = 0; g < 3; ++g)
      if (segments_cross_2d(tp[e], tp[(e + 1) % 3], tq[g], tq[(g + 1) % 3]))
        return true;
  if (point_in_tri_2d(tq[0][0], tq[0][1], tp)) return true;
  if (point_in_tri_2d(tp[0][0], tp[0][1], tq)) return true;
  return false;
}

}  // namespace detail

inline bool tri_tri_intersect(const Point3& p0, const Point3& p1, const Point3& p2,
                              const Point3& q0, const Point3& q1, const Point3& q2) {
  const Point3 p[3] = {p0, p1, p2};
  const Point3 q[3] = {q0, q1, q2};
  double scale = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      scale = std::max(scale, std::abs(p[i][j] - q[0][j]) + std::abs(q[i][j] - q[0][j]));
  scale = std::max(scale, 1e-12);

  const Vec3 np = cross(p1 - p0, p2 - p0);
  const Vec3 nq = cross(q1 - q0, q2 - q0);
  const double lp = np.norm(), lq = nq.norm();
  if (lp > 1e-15 && lq > 1e-15) {
    bool coplanar = true;
    for (int v = 0; v < 3 && coplanar; ++v)
      if (std::abs(dot(q[v] - p0, np)) / lp > 1e-9 * scale) coplanar = false;
    if (coplanar) return detail::coplanar_tri_tri(p, q, np * (1.0 / lp));
  }
  for (int e = 0; e < 3; ++e) {
    if (detail::segment_hits_triangle(p[e], p[(e + 1) % 3], q0, q1, q2, scale))
      return true;
    if (detail::segment_hits_triangle(q[e], q[(e + 1) % 3], p0, p1, p2, scale))
      return true;
  }
  return false;
}

// True when any triangle of a touches any triangle of b.  b's triangles are
// hashed into a coarse grid over the bbox overlap so typical rejections cost
// a few candidate tests per triangle.
inline bool meshes_intersect(const TriMesh& a, const TriMesh& b) {
  if (a.triangles.empty() || b.triangles.empty()) return false;
  a.validate();
  b.validate();
  auto [alo, ahi] = a.bbox();
  auto [blo, bhi] = b.bbox();
  const Point3 lo = alo.cwise_max(blo);
  const Point3 hi = ahi.cwise_min(bhi);
  if (lo.x > hi.x || lo.y > hi.y || lo.z > hi.z) return false;

  constexpr int kRes = 24;
  const Vec3 span{std::max(hi.x - lo.x, 1e-12), std::max(hi.y - lo.y, 1e-12),
                  std::max(hi.z - lo.z, 1e-12)};
  auto cell_of = [&](double v, int axis) {
    return std::clamp(int((v - lo[axis]) / span[axis] * kRes), 0, kRes - 1);
  };
  std::vector<std::vector<int>> grid(kRes * kRes * kRes);
  for (int t = 0; t < int(b.triangles.size()); ++t) {
    const auto& tr = b.triangles[std::size_t(t)];
    Point3 tlo = b.vertices[tr[0]], thi = tlo;
    for (int v = 1; v < 3; ++v) {
      tlo = tlo.cwise_min(b.vertices[tr[v]]);
      thi = thi.cwise_max(b.vertices[tr[v]]);
    }
    if (thi.x < lo.x || thi.y < lo.y || thi.z < lo.z || tlo.x > hi.x ||
        tlo.y > hi.y || tlo.z > hi.z)
      continue;
    for (int cz = cell_of(tlo.z, 2); cz <= cell_of(thi.z, 2); ++cz)
      for (int cy = cell_of(tlo.y, 1); cy <= cell_of(thi.y, 1); ++cy)
        for (int cx = cell_of(tlo.x, 0); cx <= cell_of(thi.x, 0); ++cx)
          grid[std::size_t((cz * kRes + cy) * kRes + cx)].push_back(t);
  }

  std::vector<int> stamp(b.triangles.size(), -1);
  for (int t = 0; t < int(a.triangles.size()); ++t) {
    const auto& tr = a.triangles[std::size_t(t)];
    Point3 tlo = a.vertices[tr[0]], thi = tlo;
    for (int v = 1; v < 3; ++v) {
      tlo = tlo.cwise_min(a.vertices[tr[v]]);
      thi = thi.cwise_max(a.vertices[tr[v]]);
    }
    if (thi.x < lo.x || thi.y < lo.y || thi.z < lo.z || tlo.x > hi.x ||
        tlo.y > hi.y || tlo.z > hi.z)
      continue;
    for (int cz = cell_of(tlo.z, 2); cz <= cell_of(thi.z, 2); ++cz)
      for (int cy = cell_of(tlo.y, 1); cy <= cell_of(thi.y, 1); ++cy)
        for (int cx = cell_of(tlo.x, 0); cx <= cell_of(thi.x, 0); ++cx)
          for (int cand : grid[std::size_t((cz * kRes + cy) * kRes + cx)]) {
            if (stamp[std::size_t(cand)] == t) continue;
            stamp[std::size_t(cand)] = t;
            const auto& qr = b.triangles[std::size_t(cand)];
            if (tri_tri_intersect(a.vertices[tr[0]], a.vertices[tr[1]],
                                  a.vertices[tr[2]], b.vertices[qr[0]],
                                  b.vertices[qr[1]], b.vertices[qr[2]]))
              return true;
          }
  }
  return false;
}

}  // namespace crowdrec
