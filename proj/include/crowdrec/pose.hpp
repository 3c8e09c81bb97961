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

// Rigid pose estimation: a dense point-matching loss over model points with
// per-sample confidences, an ordinal depth loss that penalizes contradictory
// occlusion orderings in the composed scene, gradient-descent pose fitting
// over axis-angle plus translation, scene composition, and the ADD/AUC pose
// accuracy metric.

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
#include "crowdrec/mesh.hpp"
#include "crowdrec/render.hpp"
#include "crowdrec/tape.hpp"

#include "json.hpp"

namespace crowdrec {

// ---------------------------------------------------------------------------
// Problem statement

// Matching problem for one person: model points in the person-local frame, a
// supervising transform, and the dense-sample confidences of the predictor.
struct PoseProblem {
  std::vector<Point3> model_points;  // Q >= 3, non-collinear
  RigidTransform gt;
  std::vector<double> confidence{1.0};  // one entry per dense sample
  double w = 0.001;                     // confidence regularizer weight
  double gamma = 0.1;                   // ordinal depth weight in L_Pose

  void validate() const {
    if (model_points.size() < 3)
      throw std::invalid_argument("PoseProblem: need at least 3 model points");
    // Collinear points leave rotation about the common axis unobservable.
    double scale = 0.0;
    for (const Point3& p : model_points)
      scale = std::max(scale, (p - model_points[0]).norm());
    double span = 0.0;
    for (const Point3& p : model_points)
      span = std::max(span,
                      (p - model_points[0]).cross(model_points.back() - model_points[0]).norm());
    for (std::size_t j = 1; j + 1 < model_points.size(); ++j)
      span = std::max(span, (model_points[j] - model_points[0])
                                .cross(model_points[j + 1] - model_points[0])
                                .norm());
    if (!(span > 1e-12 * std::max(scale * scale, 1e-12)))
      throw std::invalid_argument("PoseProblem: model points are collinear");
    if (confidence.empty())
      throw std::invalid_argument("PoseProblem: empty confidence set");
    for (double c : confidence)
      if (!std::isfinite(c) || c <= 0.0 || c > 1.0)
        throw std::invalid_argument("PoseProblem: confidence outside (0, 1]");
    if (w < 0.0) throw std::invalid_argument("PoseProblem: negative w");
    if (gamma < 0.0) throw std::invalid_argument("PoseProblem: negative gamma");
  }
};

inline constexpr double kConfidenceFloor = 1e-6;

namespace diff {

// ---------------------------------------------------------------------------
// Pose-specific tape operations

// R(axis_angle) applied to fixed points; output is xyz-interleaved, length 3n.
inline Var rotate_points(Tape& t, const Var& axis_angle,
                         const std::vector<Point3>& points) {
  const std::vector<double>& w = t.value(axis_angle);
  if (w.size() != 3) throw std::invalid_argument("rotate_points: axis_angle must have 3 entries");
  if (points.empty()) throw std::invalid_argument("rotate_points: no points");
  const Vec3 wv{w[0], w[1], w[2]};
  const Mat3 r = rotation_from_axis_angle(wv);
  const std::array<Mat3, 3> jac = rotation_jacobian(wv);
  std::vector<double> out(points.size() * 3);
  for (std::size_t j = 0; j < points.size(); ++j) {
    const Point3 q = r * points[j];
    out[3 * j] = q.x;
    out[3 * j + 1] = q.y;
    out[3 * j + 2] = q.z;
  }
  return t.custom(std::move(out), [axis_angle, points, jac](Tape& tt, int o) {
    const auto& g = tt.grad(Var{o});
    auto& gw = tt.grad_mut(axis_angle);
    for (std::size_t j = 0; j < points.size(); ++j) {
      const Vec3 go{g[3 * j], g[3 * j + 1], g[3 * j + 2]};
      for (int a = 0; a < 3; ++a) gw[std::size_t(a)] += go.dot(jac[std::size_t(a)] * points[j]);
    }
  });
}

// Adds a 3-vector to every xyz triple of a length-3n vector.
inline Var add_tiled3(Tape& t, const Var& xyz, const Var& offset) {
  const auto& v = t.value(xyz);
  const auto& d = t.value(offset);
  if (d.size() != 3) throw std::invalid_argument("add_tiled3: offset must have 3 entries");
  if (v.size() % 3 != 0) throw std::invalid_argument("add_tiled3: length not a multiple of 3");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] + d[i % 3];
  return t.custom(std::move(out), [xyz, offset](Tape& tt, int o) {
    const auto& g = tt.grad(Var{o});
    auto& gx = tt.grad_mut(xyz);
    auto& gd = tt.grad_mut(offset);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i];
      gd[i % 3] += g[i];
    }
  });
}

// Euclidean norm of every xyz triple; subgradient 0 at coincident points.
inline Var norms3(Tape& t, const Var& xyz) {
  const auto& v = t.value(xyz);
  if (v.size() % 3 != 0) throw std::invalid_argument("norms3: length not a multiple of 3");
  std::vector<double> out(v.size() / 3);
  for (std::size_t j = 0; j < out.size(); ++j)
    out[j] = std::sqrt(v[3 * j] * v[3 * j] + v[3 * j + 1] * v[3 * j + 1] +
                       v[3 * j + 2] * v[3 * j + 2]);
  return t.custom(std::move(out), [xyz](Tape& tt, int o) {
    const auto& g = tt.grad(Var{o});
    const auto& v = tt.value(xyz);
    auto& gx = tt.grad_mut(xyz);
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double n = std::sqrt(v[3 * j] * v[3 * j] + v[3 * j + 1] * v[3 * j + 1] +
                                 v[3 * j + 2] * v[3 * j + 2]);
      if (n == 0.0) continue;
      for (int c = 0; c < 3; ++c) gx[3 * j + std::size_t(c)] += g[j] * v[3 * j + std::size_t(c)] / n;
    }
  });
}

// Repeats a scalar n times so it can meet elementwise ops.
inline Var tile_scalar(Tape& t, const Var& s, std::size_t n) {
  const auto& v = t.value(s);
  if (v.size() != 1) throw std::invalid_argument("tile_scalar: input must be scalar");
  return t.custom(std::vector<double>(n, v[0]), [s](Tape& tt, int o) {
    const auto& g = tt.grad(Var{o});
    auto& gs = tt.grad_mut(s);
    for (double gi : g) gs[0] += gi;
  });
}

// ---------------------------------------------------------------------------
// Dense pose loss

// (1/U) sum_i [ (c_i/Q) sum_j |(R x_j + t) - (Rhat x_j + that)| - w log c_i ]
// with a single pose hypothesis shared across the dense samples.
inline Var loss_dp(Tape& t, const PoseProblem& problem, const Var& axis_angle,
                   const Var& translation) {
  problem.validate();
  const std::size_t q = problem.model_points.size();
  std::vector<double> target(3 * q);
  for (std::size_t j = 0; j < q; ++j) {
    const Point3 p = problem.gt.apply(problem.model_points[j]);
    target[3 * j] = p.x;
    target[3 * j + 1] = p.y;
    target[3 * j + 2] = p.z;
  }
  const Var predicted = add_tiled3(t, rotate_points(t, axis_angle, problem.model_points),
                                   translation);
  const Var point_term = t.mean(norms3(t, t.sub(predicted, t.leaf(target))));

  double mean_c = 0.0, log_term = 0.0;
  for (double c : problem.confidence) {
    const double cc = std::min(std::max(c, kConfidenceFloor), 1.0);
    mean_c += cc;
    log_term += std::log(cc);
  }
  const double u = double(problem.confidence.size());
  mean_c /= u;
  log_term *= problem.w / u;
  return t.add_scalar(t.scale(point_term, mean_c), -log_term);
}

// Joint variant with optimizable confidences (one Var entry per dense
// sample); confidences are hard-clamped into [1e-6, 1] inside the loss.
inline Var loss_dp(Tape& t, const PoseProblem& problem, const Var& axis_angle,
                   const Var& translation, const Var& confidence) {
  problem.validate();
  const std::size_t u = t.value(confidence).size();
  if (u != problem.confidence.size())
    throw std::invalid_argument("loss_dp: confidence size mismatch");
  const std::size_t q = problem.model_points.size();
  std::vector<double> target(3 * q);
  for (std::size_t j = 0; j < q; ++j) {
    const Point3 p = problem.gt.apply(problem.model_points[j]);
    target[3 * j] = p.x;
    target[3 * j + 1] = p.y;
    target[3 * j + 2] = p.z;
  }
  const Var predicted = add_tiled3(t, rotate_points(t, axis_angle, problem.model_points),
                                   translation);
  const Var point_term = t.mean(norms3(t, t.sub(predicted, t.leaf(target))));
  const Var c = t.clamp(confidence, kConfidenceFloor, 1.0);
  const Var weighted = t.mul(c, tile_scalar(t, point_term, u));
  const Var reg = t.scale(t.sum(t.log_(c)), problem.w / double(u));
  return t.sub(t.mean(weighted), reg);
}

}  // namespace diff

// ---------------------------------------------------------------------------
// Scene composition

struct ComposedScene {
  TriMesh mesh;                            // all instances concatenated
  std::vector<TriMesh> instance_meshes;    // world-frame copies, render-ready
  std::vector<std::array<std::size_t, 2>> triangle_ranges;  // [begin, end) per instance
};

// No scale factor is applied: composition is rigid placement only.
inline ComposedScene compose_scene(const std::vector<TriMesh>& locals,
                                   const std::vector<RigidTransform>& poses) {
  if (locals.size() != poses.size())
    throw std::invalid_argument("compose_scene: mesh/pose count mismatch");
  ComposedScene scene;
  for (std::size_t k = 0; k < locals.size(); ++k) {
    TriMesh world = locals[k].transformed(poses[k]);
    const std::size_t begin = scene.mesh.triangles.size();
    scene.mesh.append(world);
    scene.triangle_ranges.push_back({begin, scene.mesh.triangles.size()});
    scene.instance_meshes.push_back(std::move(world));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Ordinal depth loss

// A pixel where the predicted composition puts a different instance in front
// than the ground truth does, with both instances covering the pixel.
struct MisorderedPixel {
  int px = 0, py = 0;
  int gt_front = 0, pred_front = 0;  // instance ids, 1-based
  std::size_t gt_tri = 0, pred_tri = 0;  // local triangle indices, frozen
};

namespace detail {

// Moeller-Trumbore against every triangle; keeps the closest hit along the
// ray.  Ray directions are scaled so the parameter equals camera depth.
inline bool ray_mesh_hit(const TriMesh& mesh, const Camera::Ray& ray, double* depth,
                         std::size_t* tri) {
  bool hit = false;
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_tri = 0;
  for (std::size_t f = 0; f < mesh.triangles.size(); ++f) {
    const auto& tr = mesh.triangles[f];
    const Point3& a = mesh.vertices[std::size_t(tr[0])];
    const Vec3 e1 = mesh.vertices[std::size_t(tr[1])] - a;
    const Vec3 e2 = mesh.vertices[std::size_t(tr[2])] - a;
    const Vec3 pv = ray.dir.cross(e2);
    const double det = e1.dot(pv);
    if (std::abs(det) < 1e-14) continue;
    const double inv = 1.0 / det;
    const Vec3 tv = ray.origin - a;
    const double u = tv.dot(pv) * inv;
    if (u < -1e-9 || u > 1.0 + 1e-9) continue;
    const Vec3 qv = tv.cross(e1);
    const double v = ray.dir.dot(qv) * inv;
    if (v < -1e-9 || u + v > 1.0 + 1e-9) continue;
    const double tt = e2.dot(qv) * inv;
    if (tt <= 1e-9 || tt >= best) continue;
    best = tt;
    best_tri = f;
    hit = true;
  }
  if (hit) {
    *depth = best;
    *tri = best_tri;
  }
  return hit;
}

}  // namespace detail

// Pixels whose front instance disagrees between the ground-truth map and the
// composition under `poses`, restricted to predicted overlaps.  The triangle
// each instance shows at the pixel is recorded so the depth stays a smooth
// function of pose while the set is held fixed.
inline std::vector<MisorderedPixel> misordered_pixels(
    const std::vector<TriMesh>& locals, const std::vector<RigidTransform>& poses,
    const Camera& cam, const InstanceMap& gt_front) {
  if (locals.size() != poses.size())
    throw std::invalid_argument("misordered_pixels: mesh/pose count mismatch");
  if (gt_front.width != cam.width || gt_front.height != cam.height)
    throw std::invalid_argument("misordered_pixels: map size != camera size");
  const ComposedScene scene = compose_scene(locals, poses);
  const RenderedView view = render_scene(scene.instance_meshes, cam);

  std::vector<MisorderedPixel> out;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const int gt_id = gt_front.at(x, y);
      const int pred_id = view.instances.at(x, y);
      if (gt_id == 0 || pred_id == 0 || gt_id == pred_id) continue;
      if (gt_id > int(locals.size())) continue;
      // Both instances must cover the pixel in the predicted composition.
      if (!view.instance_mask[std::size_t(gt_id - 1)].at(x, y)) continue;
      const Camera::Ray ray = cam.pixel_ray(x + 0.5, y + 0.5);
      MisorderedPixel mp;
      mp.px = x;
      mp.py = y;
      mp.gt_front = gt_id;
      mp.pred_front = pred_id;
      double d0 = 0, d1 = 0;
      // Raster coverage and ray intersection can disagree on edge pixels;
      // such pixels are skipped rather than guessed.
      if (!detail::ray_mesh_hit(scene.instance_meshes[std::size_t(gt_id - 1)], ray, &d0,
                                &mp.gt_tri))
        continue;
      if (!detail::ray_mesh_hit(scene.instance_meshes[std::size_t(pred_id - 1)], ray, &d1,
                                &mp.pred_tri))
        continue;
      out.push_back(mp);
    }
  return out;
}

namespace diff {

struct PoseVars {
  Var axis_angle;   // 3 entries
  Var translation;  // 3 entries
};

// Depth of the pixel ray against the plane of one rigidly transformed local
// triangle; smooth in the pose while the triangle stays fixed.
inline Var frozen_triangle_depth(Tape& t, const PoseVars& pose, const TriMesh& local,
                                 std::size_t tri, const Camera::Ray& ray) {
  const auto& tr = local.triangles.at(tri);
  const std::vector<Point3> corners{local.vertices[std::size_t(tr[0])],
                                    local.vertices[std::size_t(tr[1])],
                                    local.vertices[std::size_t(tr[2])]};
  const Var verts = add_tiled3(t, rotate_points(t, pose.axis_angle, corners),
                               pose.translation);
  const std::vector<double>& v = t.value(verts);
  const Vec3 v0{v[0], v[1], v[2]}, v1{v[3], v[4], v[5]}, v2{v[6], v[7], v[8]};
  const Vec3 e1 = v1 - v0, e2 = v2 - v0;
  const Vec3 n = e1.cross(e2);
  const double s = n.dot(ray.dir);
  if (std::abs(s) < 1e-14)
    throw std::runtime_error("frozen_triangle_depth: ray parallel to triangle");
  const double depth = n.dot(v0 - ray.origin) / s;

  const Vec3 origin = ray.origin, dir = ray.dir;
  return t.custom({depth}, [verts, origin, dir](Tape& tt, int o) {
    const double g = tt.grad(Var{o})[0];
    const std::vector<double>& v = tt.value(verts);
    const Vec3 v0{v[0], v[1], v[2]}, v1{v[3], v[4], v[5]}, v2{v[6], v[7], v[8]};
    const Vec3 e1 = v1 - v0, e2 = v2 - v0;
    const Vec3 n = e1.cross(e2);
    const double s = n.dot(dir);
    const Vec3 q = v0 - origin;
    const double depth = n.dot(q) / s;
    const Vec3 gn = (q - depth * dir) / s;  // d depth / d n
    const Vec3 ge1 = e2.cross(gn);          // via dn/de1 = -skew(e2)
    const Vec3 ge2 = gn.cross(e1);          // via dn/de2 =  skew(e1)
    const Vec3 gq = n / s;
    const Vec3 gv0 = gq - ge1 - ge2;
    auto& gv = tt.grad_mut(verts);
    const Vec3 parts[3] = {gv0, ge1, ge2};
    for (int c = 0; c < 3; ++c) {
      gv[std::size_t(c)] += g * parts[0][c];
      gv[std::size_t(3 + c)] += g * parts[1][c];
      gv[std::size_t(6 + c)] += g * parts[2][c];
    }
  });
}

// Ordering penalty over a fixed mis-ordered pixel set: softplus of how far
// the true-front instance sits behind the predicted-front one.  Smooth in
// the poses; loss_od recomputes the set from the current pose values.
inline Var ordering_penalty(Tape& t, const std::vector<TriMesh>& locals,
                            const std::vector<PoseVars>& poses, const Camera& cam,
                            const std::vector<MisorderedPixel>& set) {
  if (locals.size() != poses.size())
    throw std::invalid_argument("ordering_penalty: mesh/pose count mismatch");
  Var total = t.leaf_scalar(0.0);
  for (const MisorderedPixel& mp : set) {
    const Camera::Ray ray = cam.pixel_ray(mp.px + 0.5, mp.py + 0.5);
    const Var d_gt = frozen_triangle_depth(t, poses[std::size_t(mp.gt_front - 1)],
                                           locals[std::size_t(mp.gt_front - 1)], mp.gt_tri, ray);
    const Var d_pred =
        frozen_triangle_depth(t, poses[std::size_t(mp.pred_front - 1)],
                              locals[std::size_t(mp.pred_front - 1)], mp.pred_tri, ray);
    total = t.add(total, t.softplus(t.sub(d_gt, d_pred)));
  }
  return total;
}

// Full ordinal depth loss: zero when the predicted composition agrees with
// the ground-truth front instance everywhere.
inline Var loss_od(Tape& t, const std::vector<TriMesh>& locals,
                   const std::vector<PoseVars>& poses, const Camera& cam,
                   const InstanceMap& gt_front,
                   std::vector<MisorderedPixel>* set_out = nullptr) {
  std::vector<RigidTransform> current(poses.size());
  for (std::size_t k = 0; k < poses.size(); ++k) {
    const auto& w = t.value(poses[k].axis_angle);
    const auto& tr = t.value(poses[k].translation);
    if (w.size() != 3 || tr.size() != 3)
      throw std::invalid_argument("loss_od: pose vars must have 3 entries each");
    current[k].rotation = rotation_from_axis_angle({w[0], w[1], w[2]});
    current[k].translation = {tr[0], tr[1], tr[2]};
  }
  const std::vector<MisorderedPixel> set = misordered_pixels(locals, current, cam, gt_front);
  if (set_out) *set_out = set;
  return ordering_penalty(t, locals, poses, cam, set);
}

}  // namespace diff

// ---------------------------------------------------------------------------
// Pose fitting

struct PoseFitConfig {
  int max_iters = 200;
  double step = 0.5;           // initial step, shrunk by backtracking
  double max_step_norm = 0.1;  // cap on parameter displacement per step
  double loss_tol = 1e-10;     // stop when the loss falls below this
  double decrease_tol = 1e-12; // stop when backtracking cannot improve
  double gamma = 0.1;          // ordinal depth weight for scene fits
  int rounds = 40;             // round-robin sweeps for scene fits

  void validate() const {
    if (max_iters < 0) throw std::invalid_argument("PoseFitConfig: negative max_iters");
    if (!(step > 0.0)) throw std::invalid_argument("PoseFitConfig: step must be positive");
    if (!(max_step_norm > 0.0))
      throw std::invalid_argument("PoseFitConfig: max_step_norm must be positive");
    if (rounds <= 0) throw std::invalid_argument("PoseFitConfig: rounds must be positive");
    if (gamma < 0.0) throw std::invalid_argument("PoseFitConfig: negative gamma");
  }
};

struct PoseFitReport {
  double final_loss = 0.0;
  int iterations = 0;
  bool converged = false;
  double rotation_error_deg = 0.0;
  double translation_error = 0.0;
};

namespace detail {

inline RigidTransform params_to_pose(const std::vector<double>& p, std::size_t off = 0) {
  RigidTransform rt;
  rt.rotation = rotation_from_axis_angle({p[off], p[off + 1], p[off + 2]});
  rt.translation = {p[off + 3], p[off + 4], p[off + 5]};
  return rt;
}

inline double rotation_error_deg(const Mat3& gt, const Mat3& pred) {
  const Mat3 rel = pred.transpose() * gt;
  const double tr = rel(0, 0) + rel(1, 1) + rel(2, 2);
  const double c = std::min(1.0, std::max(-1.0, (tr - 1.0) / 2.0));
  return std::acos(c) * 180.0 / kPi;
}

}  // namespace detail

// Gradient descent with backtracking over axis-angle + translation on the
// dense pose loss.  Non-convergence is reported, not raised.
inline RigidTransform fit_pose(const PoseProblem& problem, const RigidTransform& init,
                               const PoseFitConfig& cfg, PoseFitReport* report = nullptr) {
  problem.validate();
  cfg.validate();
  std::vector<double> params(6, 0.0);
  const Vec3 aa0 = axis_angle_from_rotation(init.rotation);
  params[0] = aa0.x;
  params[1] = aa0.y;
  params[2] = aa0.z;
  params[3] = init.translation.x;
  params[4] = init.translation.y;
  params[5] = init.translation.z;

  const auto eval = [&](const std::vector<double>& p, std::vector<double>* grad) {
    diff::Tape t;
    const diff::Var aa = t.leaf({p[0], p[1], p[2]});
    const diff::Var tr = t.leaf({p[3], p[4], p[5]});
    const diff::Var loss = diff::loss_dp(t, problem, aa, tr);
    const double value = t.scalar(loss);
    if (grad) {
      t.backward(loss);
      const auto& ga = t.grad(aa);
      const auto& gt = t.grad(tr);
      *grad = {ga[0], ga[1], ga[2], gt[0], gt[1], gt[2]};
    }
    return value;
  };

  PoseFitReport local;
  PoseFitReport& rep = report ? *report : local;
  std::vector<double> grad;
  double loss = eval(params, &grad);
  rep.converged = loss < cfg.loss_tol;
  int iter = 0;
  while (!rep.converged && iter < cfg.max_iters) {
    double gnorm2 = 0.0;
    for (double g : grad) gnorm2 += g * g;
    if (gnorm2 == 0.0) break;  // flat point, nothing to follow
    // Armijo backtracking along the negative gradient.  The initial step is
    // capped so one move never displaces the pose by more than
    // max_step_norm; the ordinal term makes the landscape only piecewise
    // smooth and an uncapped first trial can leap across a seam.
    double step = std::min(cfg.step, cfg.max_step_norm / std::sqrt(gnorm2));
    bool moved = false;
    std::vector<double> trial(6);
    for (int bt = 0; bt < 40; ++bt) {
      for (int i = 0; i < 6; ++i) trial[std::size_t(i)] = params[std::size_t(i)] - step * grad[std::size_t(i)];
      const double trial_loss = eval(trial, nullptr);
      if (trial_loss <= loss - 1e-4 * step * gnorm2) {
        params = trial;
        loss = trial_loss;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    ++iter;
    if (!moved) break;  // no descent direction left at this scale
    loss = eval(params, &grad);
    if (loss < cfg.loss_tol) rep.converged = true;
  }

  const RigidTransform result = detail::params_to_pose(params);
  rep.final_loss = loss;
  rep.iterations = iter;
  rep.rotation_error_deg = detail::rotation_error_deg(problem.gt.rotation, result.rotation);
  rep.translation_error = (problem.gt.translation - result.translation).norm();
  return result;
}

struct SceneFitReport {
  std::vector<PoseFitReport> per_person;
  double final_dp = 0.0;
  double final_od = 0.0;
  int rounds = 0;
};

// Joint fit of several persons with the composed-scene coupling: sweeps the
// persons in a fixed round-robin order, taking one backtracked step on
// L_DP(k) + gamma * L_OD per visit.  Deterministic and single-threaded.
inline std::vector<RigidTransform> fit_scene_poses(
    const std::vector<PoseProblem>& problems, const std::vector<TriMesh>& locals,
    const Camera& cam, const InstanceMap& gt_front,
    const std::vector<RigidTransform>& init, const PoseFitConfig& cfg,
    SceneFitReport* report = nullptr) {
  cfg.validate();
  const std::size_t n = problems.size();
  if (n == 0) throw std::invalid_argument("fit_scene_poses: no persons");
  if (locals.size() != n || init.size() != n)
    throw std::invalid_argument("fit_scene_poses: size mismatch");
  for (const auto& p : problems) p.validate();

  std::vector<double> params(6 * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec3 aa = axis_angle_from_rotation(init[k].rotation);
    params[6 * k] = aa.x;
    params[6 * k + 1] = aa.y;
    params[6 * k + 2] = aa.z;
    params[6 * k + 3] = init[k].translation.x;
    params[6 * k + 4] = init[k].translation.y;
    params[6 * k + 5] = init[k].translation.z;
  }

  // Loss and gradient for person k with every pose current; the full
  // mis-ordered set is rebuilt from the trial poses on every evaluation.
  const auto eval = [&](const std::vector<double>& p, std::size_t k,
                        std::vector<double>* grad) {
    diff::Tape t;
    std::vector<diff::PoseVars> poses;
    poses.reserve(n);
    for (std::size_t m = 0; m < n; ++m)
      poses.push_back({t.leaf({p[6 * m], p[6 * m + 1], p[6 * m + 2]}),
                       t.leaf({p[6 * m + 3], p[6 * m + 4], p[6 * m + 5]})});
    diff::Var loss = diff::loss_dp(t, problems[k], poses[k].axis_angle, poses[k].translation);
    if (cfg.gamma > 0.0)
      loss = t.add(loss, t.scale(diff::loss_od(t, locals, poses, cam, gt_front), cfg.gamma));
    const double value = t.scalar(loss);
    if (grad) {
      t.backward(loss);
      const auto& ga = t.grad(poses[k].axis_angle);
      const auto& gt = t.grad(poses[k].translation);
      *grad = {ga[0], ga[1], ga[2], gt[0], gt[1], gt[2]};
    }
    return value;
  };

  SceneFitReport local;
  SceneFitReport& rep = report ? *report : local;
  rep.per_person.assign(n, PoseFitReport{});
  int round = 0;
  for (; round < cfg.rounds; ++round) {
    bool any_moved = false;
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<double> grad;
      const double loss = eval(params, k, &grad);
      if (loss < cfg.loss_tol) continue;
      double gnorm2 = 0.0;
      for (double g : grad) gnorm2 += g * g;
      if (gnorm2 == 0.0) continue;
      double step = std::min(cfg.step, cfg.max_step_norm / std::sqrt(gnorm2));
      std::vector<double> trial = params;
      for (int bt = 0; bt < 40; ++bt) {
        for (int i = 0; i < 6; ++i)
          trial[6 * k + std::size_t(i)] = params[6 * k + std::size_t(i)] - step * grad[std::size_t(i)];
        if (eval(trial, k, nullptr) <= loss - 1e-4 * step * gnorm2) {
          params = trial;
          any_moved = true;
          ++rep.per_person[k].iterations;
          break;
        }
        step *= 0.5;
      }
    }
    if (!any_moved) break;
  }
  rep.rounds = round;

  std::vector<RigidTransform> result(n);
  for (std::size_t k = 0; k < n; ++k) result[k] = detail::params_to_pose(params, 6 * k);

  // Final diagnostics under the fitted poses.
  {
    diff::Tape t;
    std::vector<diff::PoseVars> poses;
    double dp = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      poses.push_back({t.leaf({params[6 * k], params[6 * k + 1], params[6 * k + 2]}),
                       t.leaf({params[6 * k + 3], params[6 * k + 4], params[6 * k + 5]})});
      dp += t.scalar(diff::loss_dp(t, problems[k], poses[k].axis_angle, poses[k].translation));
    }
    rep.final_dp = dp;
    rep.final_od = t.scalar(diff::loss_od(t, locals, poses, cam, gt_front));
  }
  for (std::size_t k = 0; k < n; ++k) {
    rep.per_person[k].rotation_error_deg =
        detail::rotation_error_deg(problems[k].gt.rotation, result[k].rotation);
    rep.per_person[k].translation_error =
        (problems[k].gt.translation - result[k].translation).norm();
    diff::Tape t;
    const diff::Var aa = t.leaf({params[6 * k], params[6 * k + 1], params[6 * k + 2]});
    const diff::Var tr = t.leaf({params[6 * k + 3], params[6 * k + 4], params[6 * k + 5]});
    rep.per_person[k].final_loss = t.scalar(diff::loss_dp(t, problems[k], aa, tr));
    rep.per_person[k].converged = rep.per_person[k].final_loss < cfg.loss_tol;
  }
  return result;
}

// ---------------------------------------------------------------------------
// ADD error and AUC metric

// Mean distance between GT-transformed and predicted-transformed points.
inline double add_error(const std::vector<Point3>& model_points, const RigidTransform& gt,
                        const RigidTransform& predicted) {
  if (model_points.empty()) throw std::invalid_argument("add_error: no model points");
  double acc = 0.0;
  for (const Point3& p : model_points) acc += (gt.apply(p) - predicted.apply(p)).norm();
  return acc / double(model_points.size());
}

// Area under the accuracy-vs-threshold curve, normalized to [0, 100]:
// (1/N) sum_e (M - min(e, M)) / M * 100 for max threshold M.
inline double auc_metric(const std::vector<double>& add_errors, double max_threshold = 0.10) {
  if (add_errors.empty()) throw std::invalid_argument("auc_metric: empty error set");
  if (!(max_threshold > 0.0))
    throw std::invalid_argument("auc_metric: max threshold must be positive");
  double acc = 0.0;
  for (double e : add_errors) {
    if (!(e >= 0.0)) throw std::invalid_argument("auc_metric: negative error");
    acc += (max_threshold - std::min(e, max_threshold)) / max_threshold;
  }
  return 100.0 * acc / double(add_errors.size());
}

// Accuracy-vs-threshold curve as CSV; the threshold column ends exactly at
// the configured maximum so the recorded convention is visible in the file.
inline void write_auc_curve_csv(const std::string& path,
                                const std::vector<double>& add_errors,
                                double max_threshold = 0.10, int steps = 100) {
  if (add_errors.empty()) throw std::invalid_argument("write_auc_curve_csv: empty error set");
  if (steps < 1) throw std::invalid_argument("write_auc_curve_csv: steps must be positive");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_auc_curve_csv: cannot open " + path);
  out << "threshold,accuracy\n";
  char buf[96];
  for (int s = 0; s <= steps; ++s) {
    const double tau = max_threshold * double(s) / double(steps);
    int hits = 0;
    for (double e : add_errors) hits += (e <= tau);
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", tau,
                  double(hits) / double(add_errors.size()));
    out << buf;
  }
  if (!out) throw std::runtime_error("write_auc_curve_csv: write failed for " + path);
}

// Per-instance pose report: rotation row-major, translation, ADD, iterations.
inline nlohmann::json pose_report_json(const std::vector<PoseProblem>& problems,
                                       const std::vector<RigidTransform>& fitted,
                                       const std::vector<PoseFitReport>& reports,
                                       double auc_max_threshold = 0.10) {
  if (problems.size() != fitted.size() || problems.size() != reports.size())
    throw std::invalid_argument("pose_report_json: size mismatch");
  nlohmann::json doc;
  doc["auc_max_threshold"] = auc_max_threshold;
  std::vector<double> errors;
  nlohmann::json instances = nlohmann::json::array();
  for (std::size_t k = 0; k < problems.size(); ++k) {
    nlohmann::json inst;
    std::vector<double> r;
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 3; ++col) r.push_back(fitted[k].rotation(row, col));
    inst["rotation"] = r;
    inst["translation"] = {fitted[k].translation.x, fitted[k].translation.y,
                           fitted[k].translation.z};
    const double add = add_error(problems[k].model_points, problems[k].gt, fitted[k]);
    inst["add"] = add;
    inst["iterations"] = reports[k].iterations;
    inst["final_loss"] = reports[k].final_loss;
    inst["converged"] = reports[k].converged;
    errors.push_back(add);
    instances.push_back(inst);
  }
  doc["instances"] = instances;
  doc["auc"] = auc_metric(errors, auc_max_threshold);
  return doc;
}

}  // namespace crowdrec
