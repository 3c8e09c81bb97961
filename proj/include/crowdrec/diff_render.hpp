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

// Differentiable silhouettes of a placed occupancy grid.  Each pixel ray is
// sampled at fixed depths inside the grid's bounding box and reduced with a
// temperature-smoothed maximum
//
//     pixel = tau * log(mean_i exp(v_i / tau)),
//
// which stays in [0, 1] for probability-valued grids, returns exactly 0 on
// empty rays, and reaches at least 1 - tau * log(#samples) when every sample
// sits in fully occupied cells.  Sample positions depend only on geometry,
// so the pixel is smooth in the grid values.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "crowdrec/core.hpp"
#include "crowdrec/image.hpp"
#include "crowdrec/tape.hpp"

namespace crowdrec {

struct SoftSilhouetteOptions {
  int samples_per_ray = 64;
  double tau = 0.05;
};

namespace detail {

// Ray-box span in the grid frame; false when the ray misses.
inline bool ray_box_span(const Point3& o, const Vec3& d, const Point3& lo,
                         const Point3& hi, double* t0, double* t1) {
  double tmin = 0.0, tmax = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a];
    double tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    tmin = std::max(tmin, ta);
    tmax = std::min(tmax, tb);
  }
  if (tmax <= tmin) return false;
  *t0 = tmin;
  *t1 = tmax;
  return true;
}

// Shared ray setup: for pixel (x, y) produces the grid-frame ray and span.
struct SilhouetteRays {
  std::vector<Point3> origin;   // per pixel, grid frame
  std::vector<Vec3> dir;        // unit camera-z parameterization
  std::vector<double> t0, t1;   // valid span, t1 <= t0 marks a miss
};

inline SilhouetteRays make_silhouette_rays(const VoxelLattice& lattice,
                                           const RigidTransform& grid_to_world,
                                           const Camera& cam) {
  lattice.validate();
  const RigidTransform world_to_grid = grid_to_world.inverse();
  const Point3 lo = lattice.bounds_min();
  const Point3 hi = lattice.bounds_max();
  SilhouetteRays rays;
  const std::size_t n = std::size_t(cam.width) * cam.height;
  rays.origin.resize(n);
  rays.dir.resize(n);
  rays.t0.assign(n, 0.0);
  rays.t1.assign(n, -1.0);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const std::size_t p = std::size_t(y) * cam.width + x;
      const Camera::Ray r = cam.pixel_ray(x + 0.5, y + 0.5);
      rays.origin[p] = world_to_grid.apply(r.origin);
      rays.dir[p] = world_to_grid.rotate(r.dir);
      double a, b;
      if (ray_box_span(rays.origin[p], rays.dir[p], lo, hi, &a, &b)) {
        rays.t0[p] = a;
        rays.t1[p] = b;
      }
    }
  }
  return rays;
}

}  // namespace detail

// Forward-only evaluation into an image.
inline GrayImage soft_silhouette_image(const ScalarGrid& grid,
                                       const RigidTransform& grid_to_world,
                                       const Camera& cam,
                                       const SoftSilhouetteOptions& opts = {}) {
  if (opts.samples_per_ray < 1 || opts.tau <= 0)
    throw std::invalid_argument("soft_silhouette: bad options");
  if (grid.values.size() != grid.lattice.node_count())
    throw std::invalid_argument("soft_silhouette: value count != node count");
  const auto rays = detail::make_silhouette_rays(grid.lattice, grid_to_world, cam);
  GrayImage img(cam.width, cam.height, 0.0);
  const int K = opts.samples_per_ray;
  std::vector<double> v(std::size_t(K), 0.0);
  for (std::size_t p = 0; p < rays.t0.size(); ++p) {
    if (rays.t1[p] <= rays.t0[p]) continue;
    const double step = (rays.t1[p] - rays.t0[p]) / K;
    double vmax = 0.0;
    for (int i = 0; i < K; ++i) {
      const Point3 q = rays.origin[p] + rays.dir[p] * (rays.t0[p] + (i + 0.5) * step);
      v[std::size_t(i)] = trilinear_sample(grid, q, /*clamp=*/true);
      vmax = std::max(vmax, v[std::size_t(i)]);
    }
    double acc = 0.0;
    for (int i = 0; i < K; ++i) acc += std::exp((v[std::size_t(i)] - vmax) / opts.tau);
    img.pixels[p] = vmax + opts.tau * std::log(acc / K);
  }
  return img;
}

namespace diff {

// Tape version: grid_values must hold one value per lattice node; the result
// is the flattened row-major image.  The backward pass recomputes sample
// weights instead of storing them.
inline Var soft_silhouette(Tape& tape, Var grid_values,
                           const VoxelLattice& lattice,
                           const RigidTransform& grid_to_world,
                           const Camera& cam,
                           const SoftSilhouetteOptions& opts = {}) {
  if (opts.samples_per_ray < 1 || opts.tau <= 0)
    throw std::invalid_argument("soft_silhouette: bad options");
  lattice.validate();
  const std::vector<double>& values = tape.value(grid_values);
  if (values.size() != lattice.node_count())
    throw std::invalid_argument("soft_silhouette: value count != node count");

  auto rays = detail::make_silhouette_rays(lattice, grid_to_world, cam);
  const int K = opts.samples_per_ray;
  const double tau = opts.tau;

  const ScalarGrid grid_view(lattice, values);
  std::vector<double> out(rays.t0.size(), 0.0);
  std::vector<double> v(std::size_t(K), 0.0);
  for (std::size_t p = 0; p < rays.t0.size(); ++p) {
    if (rays.t1[p] <= rays.t0[p]) continue;
    const double step = (rays.t1[p] - rays.t0[p]) / K;
    double vmax = 0.0;
    for (int i = 0; i < K; ++i) {
      const Point3 q = rays.origin[p] + rays.dir[p] * (rays.t0[p] + (i + 0.5) * step);
      v[std::size_t(i)] = trilinear_sample(grid_view, q, /*clamp=*/true);
      vmax = std::max(vmax, v[std::size_t(i)]);
    }
    double acc = 0.0;
    for (int i = 0; i < K; ++i) acc += std::exp((v[std::size_t(i)] - vmax) / tau);
    out[p] = vmax + tau * std::log(acc / K);
  }

  const int grid_id = grid_values.id;
  auto backward = [rays = std::move(rays), lattice, K, tau,
                   grid_id](Tape& t, int out_id) {
    const std::vector<double>& g_out = t.grad(Var{out_id});
    const std::vector<double>& vals = t.value(Var{grid_id});
    std::vector<double>& g_grid = t.grad_mut(Var{grid_id});
    const ScalarGrid grid(lattice, vals);
    std::vector<double> v(std::size_t(K), 0.0);
    std::vector<detail::TrilinearCell> cells(std::size_t(K), detail::TrilinearCell{});
    for (std::size_t p = 0; p < rays.t0.size(); ++p) {
      const double gp = g_out[p];
      if (gp == 0.0 || rays.t1[p] <= rays.t0[p]) continue;
      const double step = (rays.t1[p] - rays.t0[p]) / K;
      double vmax = 0.0;
      for (int i = 0; i < K; ++i) {
        const Point3 q =
            rays.origin[p] + rays.dir[p] * (rays.t0[p] + (i + 0.5) * step);
        cells[std::size_t(i)] = detail::locate_trilinear(lattice, q, /*clamp=*/true);
        v[std::size_t(i)] = trilinear_sample(grid, q, /*clamp=*/true);
        vmax = std::max(vmax, v[std::size_t(i)]);
      }
      double acc = 0.0;
      for (int i = 0; i < K; ++i) acc += std::exp((v[std::size_t(i)] - vmax) / tau);
      // d pixel / d v_i is the softmax weight of sample i.
      for (int i = 0; i < K; ++i) {
        const double w = std::exp((v[std::size_t(i)] - vmax) / tau) / acc;
        if (w == 0.0) continue;
        const double spread = gp * w;
        const auto& c = cells[std::size_t(i)];
        const int i1 = c.i0 + 1, j1 = c.j0 + 1, k1 = c.k0 + 1;
        g_grid[lattice.node_index(c.i0, c.j0, c.k0)] +=
            spread * (1 - c.fx) * (1 - c.fy) * (1 - c.fz);
        g_grid[lattice.node_index(i1, c.j0, c.k0)] += spread * c.fx * (1 - c.fy) * (1 - c.fz);
        g_grid[lattice.node_index(c.i0, j1, c.k0)] += spread * (1 - c.fx) * c.fy * (1 - c.fz);
        g_grid[lattice.node_index(i1, j1, c.k0)] += spread * c.fx * c.fy * (1 - c.fz);
        g_grid[lattice.node_index(c.i0, c.j0, k1)] += spread * (1 - c.fx) * (1 - c.fy) * c.fz;
        g_grid[lattice.node_index(i1, c.j0, k1)] += spread * c.fx * (1 - c.fy) * c.fz;
        g_grid[lattice.node_index(c.i0, j1, k1)] += spread * (1 - c.fx) * c.fy * c.fz;
        g_grid[lattice.node_index(i1, j1, k1)] += spread * c.fx * c.fy * c.fz;
      }
    }
  };
  return tape.custom(std::move(out), std::move(backward));
}

}  // namespace diff
}  // namespace crowdrec
