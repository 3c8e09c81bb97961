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

// CPU z-buffer rasterization of triangle meshes: composite depth, per-pixel
// front instance ids, flat-shaded intensity, and per-instance depth and
// coverage layers.  Depth is interpolated perspective-correctly (linear in
// 1/z across the screen plane).

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "crowdrec/core.hpp"
#include "crowdrec/image.hpp"
#include "crowdrec/mesh.hpp"

namespace crowdrec {

struct RenderOptions {
  double znear = 1e-4;     // triangles with any vertex closer are skipped
  double ambient = 0.15;   // intensity floor for front-facing shading
  bool keep_instance_layers = true;
};

namespace detail {

// Calls write(x, y, depth, tri) for every covered pixel center.  Pixel
// (x, y) is sampled at (x + 0.5, y + 0.5); coverage is inclusive on edges,
// which is harmless for depth buffers and keeps the test exact.
template <typename WriteFn>
void rasterize_mesh(const TriMesh& mesh, const Camera& cam, double znear,
                    WriteFn&& write) {
  for (int t = 0; t < int(mesh.triangles.size()); ++t) {
    const auto& tri = mesh.triangles[std::size_t(t)];
    double u[3], v[3], z[3];
    bool ok = true;
    for (int c = 0; c < 3 && ok; ++c) {
      const Point3 pc = cam.world_to_cam.apply(mesh.vertices[tri[std::size_t(c)]]);
      if (pc.z < znear) {
        ok = false;  // near-plane clipping is out of scope for these scenes
        break;
      }
      u[c] = cam.fx * pc.x / pc.z + cam.cx;
      v[c] = cam.fy * pc.y / pc.z + cam.cy;
      z[c] = pc.z;
    }
    if (!ok) continue;
    const double area = (u[1] - u[0]) * (v[2] - v[0]) - (v[1] - v[0]) * (u[2] - u[0]);
    if (std::abs(area) < 1e-18) continue;
    const double umin = std::min({u[0], u[1], u[2]});
    const double umax = std::max({u[0], u[1], u[2]});
    const double vmin = std::min({v[0], v[1], v[2]});
    const double vmax = std::max({v[0], v[1], v[2]});
    const int x0 = std::max(0, int(std::floor(umin - 0.5)));
    const int x1 = std::min(cam.width - 1, int(std::ceil(umax - 0.5)));
    const int y0 = std::max(0, int(std::floor(vmin - 0.5)));
    const int y1 = std::min(cam.height - 1, int(std::ceil(vmax - 0.5)));
    if (x0 > x1 || y0 > y1) continue;
    const double sgn = area > 0 ? 1.0 : -1.0;
    const double inv_area = 1.0 / area;
    for (int y = y0; y <= y1; ++y) {
      const double py = y + 0.5;
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5;
        const double e0 = (u[2] - u[1]) * (py - v[1]) - (v[2] - v[1]) * (px - u[1]);
        const double e1 = (u[0] - u[2]) * (py - v[2]) - (v[0] - v[2]) * (px - u[2]);
        const double e2 = (u[1] - u[0]) * (py - v[0]) - (v[1] - v[0]) * (px - u[0]);
        if (sgn * e0 < 0 || sgn * e1 < 0 || sgn * e2 < 0) continue;
        const double b0 = e0 * inv_area;
        const double b1 = e1 * inv_area;
        const double b2 = e2 * inv_area;
        const double inv_z = b0 / z[0] + b1 / z[1] + b2 / z[2];
        if (inv_z <= 0) continue;
        write(x, y, 1.0 / inv_z, t);
      }
    }
  }
}

}  // namespace detail

// Depth and coverage of one mesh alone, ignoring every other instance.
struct RenderedInstance {
  DepthImage depth;  // kNoDepth where the mesh does not cover
  MaskImage mask;    // full silhouette
};

inline RenderedInstance render_mesh_depth(const TriMesh& mesh, const Camera& cam,
                                          const RenderOptions& opts = {}) {
  mesh.validate();
  RenderedInstance out;
  out.depth = DepthImage(cam.width, cam.height, kNoDepth);
  out.mask = MaskImage(cam.width, cam.height, 0);
  detail::rasterize_mesh(mesh, cam, opts.znear,
                         [&](int x, int y, double depth, int) {
                           if (depth < out.depth.at(x, y)) {
                             out.depth.at(x, y) = depth;
                             out.mask.at(x, y) = 1;
                           }
                         });
  return out;
}

struct RenderedView {
  DepthImage depth;       // composite z-buffer, kNoDepth background
  InstanceMap instances;  // front-most instance id (1-based), 0 background
  GrayImage intensity;    // flat shading in [ambient, 1], 0 background
  // Indexed by id - 1; filled when keep_instance_layers is set.
  std::vector<DepthImage> instance_depth;
  std::vector<MaskImage> instance_mask;
  std::vector<MaskImage> visible_mask;
};

// Renders the instances jointly.  Depth ties keep the earlier instance, so
// output is deterministic for identical input order.
inline RenderedView render_scene(const std::vector<TriMesh>& meshes,
                                 const Camera& cam,
                                 const RenderOptions& opts = {}) {
  if (meshes.size() > 255) throw std::invalid_argument("render_scene: too many instances");
  RenderedView view;
  view.depth = DepthImage(cam.width, cam.height, kNoDepth);
  view.instances = InstanceMap(cam.width, cam.height, 0);
  view.intensity = GrayImage(cam.width, cam.height, 0.0);
  const Point3 eye = cam.center();

  for (int m = 0; m < int(meshes.size()); ++m) {
    const TriMesh& mesh = meshes[std::size_t(m)];
    mesh.validate();
    // Flat shade against the viewing direction, two-sided.
    std::vector<double> shade(mesh.triangles.size());
    for (int t = 0; t < int(mesh.triangles.size()); ++t) {
      const auto& tri = mesh.triangles[std::size_t(t)];
      const Point3 centroid = (mesh.vertices[tri[0]] + mesh.vertices[tri[1]] +
                               mesh.vertices[tri[2]]) * (1.0 / 3.0);
      const Vec3 to_eye = eye - centroid;
      const double len = to_eye.norm();
      const Vec3 n = mesh.triangle_normal(t);
      const double c = len > 0 ? std::abs(dot(n, to_eye)) / len : 0.0;
      shade[std::size_t(t)] = opts.ambient + (1.0 - opts.ambient) * c;
    }
    detail::rasterize_mesh(mesh, cam, opts.znear,
                           [&](int x, int y, double depth, int t) {
                             if (depth < view.depth.at(x, y)) {
                               view.depth.at(x, y) = depth;
                               view.instances.at(x, y) = std::uint8_t(m + 1);
                               view.intensity.at(x, y) = shade[std::size_t(t)];
                             }
                           });
    if (opts.keep_instance_layers) {
      RenderedInstance solo = render_mesh_depth(mesh, cam, opts);
      view.instance_depth.push_back(std::move(solo.depth));
      view.instance_mask.push_back(std::move(solo.mask));
    }
  }
  if (opts.keep_instance_layers) {
    for (int m = 0; m < int(meshes.size()); ++m) {
      MaskImage vis(cam.width, cam.height, 0);
      for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
          vis.at(x, y) = view.instances.at(x, y) == m + 1 ? 1 : 0;
      view.visible_mask.push_back(std::move(vis));
    }
  }
  return view;
}

}  // namespace crowdrec
