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

// Evaluation suite: symmetric chamfer distance, point-to-surface error with
// per-vertex error maps, volumetric IoU on a shared lattice, and per-instance
// silhouette IoU in the ground-truth cameras.  All metrics are pure; the
// accelerated paths are required to agree with their brute-force oracles.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdrec/core.hpp"
#include "crowdrec/image.hpp"
#include "crowdrec/mesh.hpp"
#include "crowdrec/render.hpp"

#include "json.hpp"

namespace crowdrec {

namespace detail {

// Uniform-grid nearest-neighbor index over a fixed point set.  Queries walk
// Chebyshev rings of cells outward; a point in a cell at ring d is at least
// (d - 1) cell widths away, so the walk stops as soon as the ring bound
// exceeds the best distance found.  Results equal brute force exactly.
class PointIndex {
 public:
  explicit PointIndex(const std::vector<Point3>& pts) : pts_(pts) {
    if (pts.empty()) throw std::invalid_argument("PointIndex: empty point set");
    lo_ = pts[0];
    Point3 hi = pts[0];
    for (const auto& p : pts) {
      if (!p.all_finite()) throw std::invalid_argument("PointIndex: non-finite point");
      lo_ = lo_.cwise_min(p);
      hi = hi.cwise_max(p);
    }
    const Vec3 span = hi - lo_;
    const double vol = std::max(span.x, 1e-12) * std::max(span.y, 1e-12) *
                       std::max(span.z, 1e-12);
    // Aim for order-one points per cell.
    cell_ = std::max(std::cbrt(vol / double(pts.size())), 1e-12);
    for (int a = 0; a < 3; ++a)
      res_[a] = std::max(1, int(std::floor(span[a] / cell_)) + 1);
    cells_.assign(std::size_t(res_[0]) * std::size_t(res_[1]) * std::size_t(res_[2]), {});
    for (std::size_t i = 0; i < pts.size(); ++i)
      cells_[cell_of(coords(pts[i]))].push_back(int(i));
  }

  double nearest_distance(const Point3& q) const {
    const std::array<int, 3> c = coords(q);
    int max_ring = 0;
    for (int a = 0; a < 3; ++a)
      max_ring = std::max(max_ring, std::max(c[a], res_[a] - 1 - c[a]));
    double best2 = std::numeric_limits<double>::infinity();
    for (int d = 0; d <= max_ring; ++d) {
      if (best2 < std::numeric_limits<double>::infinity() &&
          double(d - 1) * cell_ > 0.0 &&
          double(d - 1) * double(d - 1) * cell_ * cell_ > best2)
        break;
      visit_ring(c, d, [&](const std::vector<int>& ids) {
        for (int i : ids) {
          const double d2 = (pts_[std::size_t(i)] - q).squared_norm();
          if (d2 < best2) best2 = d2;
        }
      });
    }
    return std::sqrt(best2);
  }

 private:
  std::array<int, 3> coords(const Point3& p) const {
    std::array<int, 3> c;
    const Vec3 rel = p - lo_;
    c[0] = std::min(res_[0] - 1, std::max(0, int(std::floor(rel.x / cell_))));
    c[1] = std::min(res_[1] - 1, std::max(0, int(std::floor(rel.y / cell_))));
    c[2] = std::min(res_[2] - 1, std::max(0, int(std::floor(rel.z / cell_))));
    return c;
  }

  std::size_t cell_of(const std::array<int, 3>& c) const {
    return (std::size_t(c[2]) * std::size_t(res_[1]) + std::size_t(c[1])) *
               std::size_t(res_[0]) +
           std::size_t(c[0]);
  }

  template <typename Fn>
  void visit_ring(const std::array<int, 3>& c, int d, Fn&& fn) const {
    const int i0 = std::max(0, c[0] - d), i1 = std::min(res_[0] - 1, c[0] + d);
    const int j0 = std::max(0, c[1] - d), j1 = std::min(res_[1] - 1, c[1] + d);
    const int k0 = std::max(0, c[2] - d), k1 = std::min(res_[2] - 1, c[2] + d);
    for (int k = k0; k <= k1; ++k)
      for (int j = j0; j <= j1; ++j)
        for (int i = i0; i <= i1; ++i) {
          const int ring = std::max({std::abs(i - c[0]), std::abs(j - c[1]),
                                     std::abs(k - c[2])});
          if (ring != d) continue;
          const auto& ids = cells_[cell_of({i, j, k})];
          if (!ids.empty()) fn(ids);
        }
  }

  const std::vector<Point3>& pts_;
  Point3 lo_;
  double cell_ = 1.0;
  std::array<int, 3> res_ = {1, 1, 1};
  std::vector<std::vector<int>> cells_;
};

inline double point_segment_distance2(const Point3& p, const Point3& a,
                                      const Point3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squared_norm();
  if (len2 <= 0.0) return (p - a).squared_norm();
  const double t = std::min(1.0, std::max(0.0, dot(p - a, ab) / len2));
  return (p - (a + t * ab)).squared_norm();
}

// Exact squared distance from a point to a triangle, by closest-feature
// classification.  Degenerate triangles fall back to their edges.
inline double point_triangle_distance2(const Point3& p, const Point3& a,
                                       const Point3& b, const Point3& c) {
  const Vec3 ab = b - a;
  const Vec3 ac = c - a;
  const Vec3 ap = p - a;
  const double d1 = dot(ab, ap);
  const double d2 = dot(ac, ap);
  if (d1 <= 0.0 && d2 <= 0.0) return ap.squared_norm();

  const Vec3 bp = p - b;
  const double d3 = dot(ab, bp);
  const double d4 = dot(ac, bp);
  if (d3 >= 0.0 && d4 <= d3) return bp.squared_norm();

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double denom = d1 - d3;
    if (denom <= 0.0) return std::min(ap.squared_norm(), bp.squared_norm());
    const double v = d1 / denom;
    return (p - (a + v * ab)).squared_norm();
  }

  const Vec3 cp = p - c;
  const double d5 = dot(ab, cp);
  const double d6 = dot(ac, cp);
  if (d6 >= 0.0 && d5 <= d6) return cp.squared_norm();

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double denom = d2 - d6;
    if (denom <= 0.0) return std::min(ap.squared_norm(), cp.squared_norm());
    const double w = d2 / denom;
    return (p - (a + w * ac)).squared_norm();
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0) {
    const double denom = (d4 - d3) + (d5 - d6);
    if (denom <= 0.0) return std::min(bp.squared_norm(), cp.squared_norm());
    const double w = (d4 - d3) / denom;
    return (p - (b + w * (c - b))).squared_norm();
  }

  const double total = va + vb + vc;
  if (!(total > 0.0)) {
    return std::min({point_segment_distance2(p, a, b),
                     point_segment_distance2(p, b, c),
                     point_segment_distance2(p, c, a)});
  }
  const double inv = 1.0 / total;
  const double v = vb * inv;
  const double w = vc * inv;
  return (p - (a + v * ab + w * ac)).squared_norm();
}

// Uniform grid over triangle bounding boxes for exact nearest-surface
// queries, with the same ring-bound walk as PointIndex.
class TriangleIndex {
 public:
  explicit TriangleIndex(const TriMesh& mesh) : mesh_(mesh) {
    if (mesh.triangles.empty())
      throw std::invalid_argument("TriangleIndex: mesh has no triangles");
    mesh.validate();
    auto [lo, hi] = mesh.bbox();
    lo_ = lo;
    const Vec3 span = hi - lo;
    const double vol = std::max(span.x, 1e-12) * std::max(span.y, 1e-12) *
                       std::max(span.z, 1e-12);
    cell_ = std::max(std::cbrt(vol / double(mesh.triangles.size())), 1e-12);
    for (int a = 0; a < 3; ++a)
      res_[a] = std::max(1, int(std::floor(span[a] / cell_)) + 1);
    cells_.assign(std::size_t(res_[0]) * std::size_t(res_[1]) * std::size_t(res_[2]), {});
    for (int t = 0; t < int(mesh.triangles.size()); ++t) {
      const auto& tri = mesh.triangles[std::size_t(t)];
      Point3 tlo = mesh.vertices[std::size_t(tri[0])];
      Point3 thi = tlo;
      for (int v = 1; v < 3; ++v) {
        tlo = tlo.cwise_min(mesh.vertices[std::size_t(tri[std::size_t(v)])]);
        thi = thi.cwise_max(mesh.vertices[std::size_t(tri[std::size_t(v)])]);
      }
      const auto c0 = coords(tlo);
      const auto c1 = coords(thi);
      for (int k = c0[2]; k <= c1[2]; ++k)
        for (int j = c0[1]; j <= c1[1]; ++j)
          for (int i = c0[0]; i <= c1[0]; ++i)
            cells_[cell_of({i, j, k})].push_back(t);
    }
  }

  double distance(const Point3& q) const {
    const std::array<int, 3> c = coords(q);
    int max_ring = 0;
    for (int a = 0; a < 3; ++a)
      max_ring = std::max(max_ring, std::max(c[a], res_[a] - 1 - c[a]));
    double best2 = std::numeric_limits<double>::infinity();
    for (int d = 0; d <= max_ring; ++d) {
      if (best2 < std::numeric_limits<double>::infinity() && d > 0 &&
          double(d - 1) * double(d - 1) * cell_ * cell_ > best2)
        break;
      const int i0 = std::max(0, c[0] - d), i1 = std::min(res_[0] - 1, c[0] + d);
      const int j0 = std::max(0, c[1] - d), j1 = std::min(res_[1] - 1, c[1] + d);
      const int k0 = std::max(0, c[2] - d), k1 = std::min(res_[2] - 1, c[2] + d);
      for (int k = k0; k <= k1; ++k)
        for (int j = j0; j <= j1; ++j)
          for (int i = i0; i <= i1; ++i) {
            const int ring = std::max({std::abs(i - c[0]), std::abs(j - c[1]),
                                       std::abs(k - c[2])});
            if (ring != d) continue;
            for (int t : cells_[cell_of({i, j, k})]) {
              const auto& tri = mesh_.triangles[std::size_t(t)];
              const double d2 = point_triangle_distance2(
                  q, mesh_.vertices[std::size_t(tri[0])],
                  mesh_.vertices[std::size_t(tri[1])],
                  mesh_.vertices[std::size_t(tri[2])]);
              if (d2 < best2) best2 = d2;
            }
          }
    }
    return std::sqrt(best2);
  }

 private:
  std::array<int, 3> coords(const Point3& p) const {
    std::array<int, 3> c;
    const Vec3 rel = p - lo_;
    c[0] = std::min(res_[0] - 1, std::max(0, int(std::floor(rel.x / cell_))));
    c[1] = std::min(res_[1] - 1, std::max(0, int(std::floor(rel.y / cell_))));
    c[2] = std::min(res_[2] - 1, std::max(0, int(std::floor(rel.z / cell_))));
    return c;
  }

  std::size_t cell_of(const std::array<int, 3>& c) const {
    return (std::size_t(c[2]) * std::size_t(res_[1]) + std::size_t(c[1])) *
               std::size_t(res_[0]) +
           std::size_t(c[0]);
  }

  const TriMesh& mesh_;
  Point3 lo_;
  double cell_ = 1.0;
  std::array<int, 3> res_ = {1, 1, 1};
  std::vector<std::vector<int>> cells_;
};

}  // namespace detail

// Symmetric chamfer distance between point sets, in scene units:
// ½ [mean over A of nearest distance into B + mean over B into A].
inline double chamfer(const std::vector<Point3>& a, const std::vector<Point3>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer: empty point set");
  const detail::PointIndex ia(a);
  const detail::PointIndex ib(b);
  double sum_a = 0.0;
  for (const auto& p : a) sum_a += ib.nearest_distance(p);
  double sum_b = 0.0;
  for (const auto& p : b) sum_b += ia.nearest_distance(p);
  return 0.5 * (sum_a / double(a.size()) + sum_b / double(b.size()));
}

struct P2sResult {
  double vertex_mean = 0.0;           // over recon vertices, scene units
  double sample_mean = 0.0;           // over area-uniform surface samples
  std::vector<double> vertex_errors;  // per recon vertex, for error maps
};

// Point-to-surface error of a reconstruction against a reference mesh: the
// mean exact point-to-triangle distance, over the recon vertices and over
// sample_count surface samples.  Both means are reported; the vertex errors
// feed the error-map export.
inline P2sResult p2s(const TriMesh& recon, const TriMesh& gt, int sample_count,
                     std::uint64_t seed = 0) {
  if (recon.vertices.empty()) throw std::invalid_argument("p2s: empty recon mesh");
  if (gt.triangles.empty()) throw std::invalid_argument("p2s: empty reference mesh");
  if (sample_count <= 0) throw std::invalid_argument("p2s: sample count must be positive");
  const detail::TriangleIndex index(gt);

  P2sResult res;
  res.vertex_errors.reserve(recon.vertices.size());
  double acc = 0.0;
  for (const auto& v : recon.vertices) {
    const double d = index.distance(v);
    res.vertex_errors.push_back(d);
    acc += d;
  }
  res.vertex_mean = acc / double(recon.vertices.size());

  Rng rng(seed);
  const auto samples = sample_surface(recon, sample_count, rng);
  acc = 0.0;
  for (const auto& s : samples) acc += index.distance(s.position);
  res.sample_mean = acc / double(samples.size());
  return res;
}

// Volumetric IoU of two occupancy grids on the same lattice: nodes at or
// above iso in both over nodes at or above iso in either.  An empty union is
// defined as 1.0 and noted.
inline double iou3d(const ScalarGrid& a, const ScalarGrid& b, double iso = 0.5,
                    std::string* notice = nullptr) {
  const VoxelLattice& la = a.lattice;
  const VoxelLattice& lb = b.lattice;
  const bool same = la.res == lb.res && (la.origin - lb.origin).norm() == 0.0 &&
                    (la.cell - lb.cell).norm() == 0.0;
  if (!same) throw std::invalid_argument("iou3d: grids live on different lattices");
  std::size_t both = 0, either = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool ia = a.values[i] >= iso;
    const bool ib = b.values[i] >= iso;
    both += (ia && ib);
    either += (ia || ib);
  }
  if (either == 0) {
    if (notice) *notice = "iou3d: both grids empty at iso, union defined as 1";
    return 1.0;
  }
  return double(both) / double(either);
}

// Pixel IoU of one mask pair; an empty union counts as 1.
inline double mask_iou(const MaskImage& a, const MaskImage& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("mask_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const bool pa = a.pixels[i] != 0;
    const bool pb = b.pixels[i] != 0;
    inter += (pa && pb);
    uni += (pa || pb);
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

struct Iou2dResult {
  double mean = 0.0;                           // over views and instances
  std::vector<std::vector<double>> per;        // [view][instance]
  std::vector<std::string> notices;
};

// Silhouette IoU of reconstructed instances rasterized in the ground-truth
// cameras, matched to the reference masks by instance id.  A missing
// reconstruction scores 0 for that instance and is noted.
inline Iou2dResult iou2d(const std::vector<TriMesh>& recon_world,
                         const std::vector<Camera>& cameras,
                         const std::vector<std::vector<MaskImage>>& gt_masks) {
  if (cameras.empty()) throw std::invalid_argument("iou2d: no cameras");
  if (gt_masks.size() != cameras.size())
    throw std::invalid_argument("iou2d: one mask set per camera required");
  for (const auto& masks : gt_masks)
    if (masks.size() != recon_world.size())
      throw std::invalid_argument("iou2d: mask count does not match instance count");

  Iou2dResult res;
  double acc = 0.0;
  std::size_t terms = 0;
  std::vector<bool> noted(recon_world.size(), false);
  for (std::size_t v = 0; v < cameras.size(); ++v) {
    std::vector<double> row;
    for (std::size_t k = 0; k < recon_world.size(); ++k) {
      double iou = 0.0;
      if (recon_world[k].triangles.empty()) {
        if (!noted[k]) {
          res.notices.push_back("iou2d: instance " + std::to_string(k + 1) +
                                " missing, counted as 0");
          noted[k] = true;
        }
      } else {
        const RenderedInstance solo = render_mesh_depth(recon_world[k], cameras[v]);
        iou = mask_iou(solo.mask, gt_masks[v][k]);
      }
      row.push_back(iou);
      acc += iou;
      ++terms;
    }
    res.per.push_back(std::move(row));
  }
  res.mean = acc / double(terms);
  return res;
}

struct InstanceMetrics {
  int instance = 0;         // ground-truth instance id, 1-based
  bool reconstructed = true;
  double cd = 0.0;          // scene units
  double p2s_vertex = 0.0;  // scene units
  double p2s_sample = 0.0;  // scene units
  double iou2d = 0.0;
};

// Distances are held in scene units; reports scale them by 100 and label the
// column so table magnitudes land in the conventional range.
struct MetricReport {
  double cd = 0.0;
  double p2s = 0.0;          // vertex mean
  double p2s_samples = 0.0;  // surface-sample mean
  double iou3d = 0.0;
  double iou2d = 0.0;
  std::vector<InstanceMetrics> per_instance;
  std::vector<std::string> notices;

  void validate() const {
    const auto frac = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!frac(iou3d) || !frac(iou2d))
      throw std::invalid_argument("MetricReport: IoU outside [0, 1]");
    if (cd < 0.0 || p2s < 0.0 || p2s_samples < 0.0)
      throw std::invalid_argument("MetricReport: negative distance");
    for (const auto& inst : per_instance)
      if (inst.cd < 0.0 || inst.p2s_vertex < 0.0 || inst.p2s_sample < 0.0 ||
          !frac(inst.iou2d))
        throw std::invalid_argument("MetricReport: bad per-instance entry");
  }

  nlohmann::json to_json() const {
    validate();
    nlohmann::json doc;
    doc["units"] = {{"cd", "1e-2 scene units"}, {"p2s", "1e-2 scene units"}};
    doc["cd"] = cd * 100.0;
    doc["p2s"] = p2s * 100.0;
    doc["p2s_samples"] = p2s_samples * 100.0;
    doc["iou3d"] = iou3d;
    doc["iou2d"] = iou2d;
    doc["per_instance"] = nlohmann::json::array();
    for (const auto& inst : per_instance) {
      doc["per_instance"].push_back({{"instance", inst.instance},
                                     {"reconstructed", inst.reconstructed},
                                     {"cd", inst.cd * 100.0},
                                     {"p2s", inst.p2s_vertex * 100.0},
                                     {"p2s_samples", inst.p2s_sample * 100.0},
                                     {"iou2d", inst.iou2d}});
    }
    doc["notices"] = notices;
    return doc;
  }

  std::string table() const {
    validate();
    std::string out;
    char buf[160];
    out += "metric        value   (cd/p2s in 1e-2 scene units)\n";
    std::snprintf(buf, sizeof buf, "cd          %9.4f\n", cd * 100.0);
    out += buf;
    std::snprintf(buf, sizeof buf, "p2s         %9.4f\n", p2s * 100.0);
    out += buf;
    std::snprintf(buf, sizeof buf, "p2s_samples %9.4f\n", p2s_samples * 100.0);
    out += buf;
    std::snprintf(buf, sizeof buf, "iou3d       %9.4f\n", iou3d);
    out += buf;
    std::snprintf(buf, sizeof buf, "iou2d       %9.4f\n", iou2d);
    out += buf;
    if (!per_instance.empty())
      out += "instance  recon        cd       p2s     iou2d\n";
    for (const auto& inst : per_instance) {
      std::snprintf(buf, sizeof buf, "%8d  %5s %9.4f %9.4f %9.4f\n", inst.instance,
                    inst.reconstructed ? "yes" : "no", inst.cd * 100.0,
                    inst.p2s_vertex * 100.0, inst.iou2d);
      out += buf;
    }
    for (const auto& n : notices) out += "note: " + n + "\n";
    return out;
  }
};

// Writes the mesh with per-vertex error colors: red at zero error fading to
// blue at the maximum error over the mesh.
inline void write_error_map_obj(const std::string& path, const TriMesh& mesh,
                                const std::vector<double>& vertex_errors) {
  if (vertex_errors.size() != mesh.vertices.size())
    throw std::invalid_argument("write_error_map_obj: one error per vertex required");
  double max_err = 0.0;
  for (double e : vertex_errors) {
    if (!(e >= 0.0) || !std::isfinite(e))
      throw std::invalid_argument("write_error_map_obj: errors must be finite and nonnegative");
    max_err = std::max(max_err, e);
  }
  TriMesh colored = mesh;
  colored.colors.resize(mesh.vertices.size());
  const double scale = max_err > 0.0 ? 1.0 / max_err : 0.0;
  for (std::size_t i = 0; i < vertex_errors.size(); ++i) {
    const double t = vertex_errors[i] * scale;
    colored.colors[i] = {1.0 - t, 0.0, t};
  }
  save_obj(path, colored);
}

}  // namespace crowdrec
