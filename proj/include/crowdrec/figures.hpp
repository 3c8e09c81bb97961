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

// Procedural articulated figures: a capsule skeleton posed by forward
// kinematics, meshed as the zero level set of its union signed-distance
// field. Local frame is z-up with the ground plane at z = 0 under the
// straight-leg stance; the body axis is the z axis, arms spread along x in
// the reference pose, legs swing in the y-z plane.

#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdrec/core.hpp"
#include "crowdrec/marching_cubes.hpp"
#include "crowdrec/mesh.hpp"

namespace crowdrec {

// Hinge angles in radians; zero everywhere is the T-pose (arms horizontal,
// legs straight). Shoulders/elbows articulate in the x-z plane (positive
// raises the arm), hips/knees in the y-z plane (positive swings forward).
struct JointAngles {
  double shoulder_l = 0.0, shoulder_r = 0.0;
  double elbow_l = 0.0, elbow_r = 0.0;
  double hip_l = 0.0, hip_r = 0.0;
  double knee_l = 0.0, knee_r = 0.0;

  std::array<double, 8> flat() const {
    return {shoulder_l, shoulder_r, elbow_l, elbow_r,
            hip_l,      hip_r,      knee_l,  knee_r};
  }
};

struct FigureSpec {
  std::uint64_t seed = 0;
  double height = 1.75;  // T-pose stature, [1.5, 2.0]

  // Capsule dimensions in scene units. The factory scales a ratio template so
  // the analytic T-pose stature equals `height` exactly.
  double head_radius = 0.0;
  double neck_length = 0.0;
  double torso_length = 0.0, torso_radius = 0.0;
  double shoulder_width = 0.0;  // lateral offset chest -> shoulder joint
  double upper_arm_length = 0.0, lower_arm_length = 0.0, arm_radius = 0.0;
  double hip_width = 0.0;  // lateral offset pelvis -> hip joint
  double upper_leg_length = 0.0, lower_leg_length = 0.0, leg_radius = 0.0;

  JointAngles pose;
  double joint_clamp = 2.0;  // max |angle|, radians
  int mesh_res = 128;        // target node count along the body axis

  // Stature of the straight-pose skeleton: leg column + torso + neck + head.
  double analytic_height() const {
    return leg_radius + lower_leg_length + upper_leg_length + torso_length +
           neck_length + 2.0 * head_radius;
  }

  void validate() const {
    if (!(height >= 1.5 && height <= 2.0))
      throw std::invalid_argument("FigureSpec: height outside [1.5, 2.0]");
    for (double d : {head_radius, torso_length, torso_radius, shoulder_width,
                     upper_arm_length, lower_arm_length, arm_radius, hip_width,
                     upper_leg_length, lower_leg_length, leg_radius})
      if (!(d > 0.0))
        throw std::invalid_argument("FigureSpec: dimensions must be positive");
    if (neck_length < 0.0)
      throw std::invalid_argument("FigureSpec: negative neck length");
    if (!(joint_clamp > 0.0))
      throw std::invalid_argument("FigureSpec: joint clamp must be positive");
    for (double a : pose.flat())
      if (std::abs(a) > joint_clamp)
        throw std::invalid_argument("FigureSpec: joint angle beyond clamp");
    if (mesh_res < 24 || mesh_res > 512)
      throw std::invalid_argument("FigureSpec: mesh_res outside [24, 512]");
    if (std::abs(analytic_height() - height) > 1e-6)
      throw std::invalid_argument(
          "FigureSpec: capsule dimensions do not add up to height");
  }

  // Canonical proportions scaled so the analytic stature equals `height`.
  static FigureSpec proportioned(std::uint64_t seed, double height) {
    FigureSpec s;
    s.seed = seed;
    s.height = height;
    s.head_radius = 0.065;
    s.neck_length = 0.020;
    s.torso_length = 0.310;
    s.torso_radius = 0.075;
    s.shoulder_width = 0.130;
    s.upper_arm_length = 0.160;
    s.lower_arm_length = 0.150;
    s.arm_radius = 0.030;
    s.hip_width = 0.058;
    s.upper_leg_length = 0.240;
    s.lower_leg_length = 0.220;
    s.leg_radius = 0.045;
    s.rescale(height / s.analytic_height());
    return s;
  }

  // Seeded proportion jitter and a mild standing pose. Rejects articulations
  // whose capsules collide, so every seed yields a valid figure.
  static FigureSpec random(std::uint64_t seed);

  void rescale(double s) {
    for (double* d : {&head_radius, &neck_length, &torso_length, &torso_radius,
                      &shoulder_width, &upper_arm_length, &lower_arm_length,
                      &arm_radius, &hip_width, &upper_leg_length,
                      &lower_leg_length, &leg_radius})
      *d *= s;
  }
};

// One posed capsule (a == b degenerates to a sphere).
struct PosedCapsule {
  Point3 a, b;
  double radius = 0.0;
  const char* name = "";
};

// Named joint positions of the posed skeleton, figure-local frame.
struct FigureSkeleton {
  Point3 pelvis, chest, head_center;
  Point3 shoulder_l, elbow_l, wrist_l;
  Point3 shoulder_r, elbow_r, wrist_r;
  Point3 hip_l, knee_l, ankle_l;
  Point3 hip_r, knee_r, ankle_r;
  std::vector<PosedCapsule> capsules;

  // Midpoint of a shin capsule; the articulation oracle measures its travel.
  Point3 shin_center_l() const { return (knee_l + ankle_l) * 0.5; }
  Point3 shin_center_r() const { return (knee_r + ankle_r) * 0.5; }
};

namespace detail {

inline double capsule_sdf(const Point3& p, const Point3& a, const Point3& b,
                          double r) {
  const Vec3 pa = p - a;
  const Vec3 ba = b - a;
  const double bb = ba.dot(ba);
  const double h =
      bb > 0.0 ? std::min(std::max(pa.dot(ba) / bb, 0.0), 1.0) : 0.0;
  return (pa - ba * h).norm() - r;
}

// Closest distance between two segments (Ericson, Real-Time Collision
// Detection, 5.1.9), robust to degenerate segments.
inline double segment_distance(const Point3& p1, const Point3& q1,
                               const Point3& p2, const Point3& q2) {
  const Vec3 d1 = q1 - p1, d2 = q2 - p2, r = p1 - p2;
  const double a = d1.dot(d1), e = d2.dot(d2), f = d2.dot(r);
  double s = 0.0, t = 0.0;
  constexpr double kEps = 1e-30;
  if (a <= kEps && e <= kEps) {
    return r.norm();
  } else if (a <= kEps) {
    t = std::min(std::max(f / e, 0.0), 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= kEps) {
      s = std::min(std::max(-c / a, 0.0), 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      if (denom > kEps) s = std::min(std::max((b * f - c * e) / denom, 0.0), 1.0);
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::min(std::max(-c / a, 0.0), 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::min(std::max((b - c) / a, 0.0), 1.0);
      }
    }
  }
  return ((p1 + d1 * s) - (p2 + d2 * t)).norm();
}

}  // namespace detail

// Forward kinematics. Hinges are one-axis: arm chains stay in x-z planes,
// leg chains in y-z planes; angles compose additively along each chain.
inline FigureSkeleton pose_skeleton(const FigureSpec& s) {
  FigureSkeleton k;
  const double ground_to_pelvis =
      s.leg_radius + s.lower_leg_length + s.upper_leg_length;
  k.pelvis = {0.0, 0.0, ground_to_pelvis};
  k.chest = k.pelvis + Vec3{0.0, 0.0, s.torso_length};
  k.head_center = k.chest + Vec3{0.0, 0.0, s.neck_length + s.head_radius};

  // arms: angle measured from the horizontal, positive raising the hand
  const auto arm_dir = [](double phi, double side) {
    return Vec3{side * std::cos(phi), 0.0, std::sin(phi)};
  };
  k.shoulder_l = k.chest + Vec3{-s.shoulder_width, 0.0, 0.0};
  k.shoulder_r = k.chest + Vec3{+s.shoulder_width, 0.0, 0.0};
  k.elbow_l = k.shoulder_l + arm_dir(s.pose.shoulder_l, -1.0) * s.upper_arm_length;
  k.elbow_r = k.shoulder_r + arm_dir(s.pose.shoulder_r, +1.0) * s.upper_arm_length;
  k.wrist_l = k.elbow_l +
              arm_dir(s.pose.shoulder_l + s.pose.elbow_l, -1.0) * s.lower_arm_length;
  k.wrist_r = k.elbow_r +
              arm_dir(s.pose.shoulder_r + s.pose.elbow_r, +1.0) * s.lower_arm_length;

  // legs: angle measured from straight down, positive swinging toward +y
  const auto leg_dir = [](double phi) {
    return Vec3{0.0, std::sin(phi), -std::cos(phi)};
  };
  k.hip_l = k.pelvis + Vec3{-s.hip_width, 0.0, 0.0};
  k.hip_r = k.pelvis + Vec3{+s.hip_width, 0.0, 0.0};
  k.knee_l = k.hip_l + leg_dir(s.pose.hip_l) * s.upper_leg_length;
  k.knee_r = k.hip_r + leg_dir(s.pose.hip_r) * s.upper_leg_length;
  k.ankle_l = k.knee_l + leg_dir(s.pose.hip_l + s.pose.knee_l) * s.lower_leg_length;
  k.ankle_r = k.knee_r + leg_dir(s.pose.hip_r + s.pose.knee_r) * s.lower_leg_length;

  // Clavicles bridge the torso to the shoulder joints, which sit outside the
  // torso radius; without them the arms would be disconnected components.
  k.capsules = {
      {k.pelvis, k.chest, s.torso_radius, "torso"},
      {k.chest, k.head_center, 0.4 * s.head_radius, "neck"},
      {k.head_center, k.head_center, s.head_radius, "head"},
      {k.chest, k.shoulder_l, s.arm_radius, "clavicle_l"},
      {k.chest, k.shoulder_r, s.arm_radius, "clavicle_r"},
      {k.shoulder_l, k.elbow_l, s.arm_radius, "upper_arm_l"},
      {k.elbow_l, k.wrist_l, s.arm_radius, "lower_arm_l"},
      {k.shoulder_r, k.elbow_r, s.arm_radius, "upper_arm_r"},
      {k.elbow_r, k.wrist_r, s.arm_radius, "lower_arm_r"},
      {k.hip_l, k.knee_l, s.leg_radius, "upper_leg_l"},
      {k.knee_l, k.ankle_l, s.leg_radius, "lower_leg_l"},
      {k.hip_r, k.knee_r, s.leg_radius, "upper_leg_r"},
      {k.knee_r, k.ankle_r, s.leg_radius, "lower_leg_r"},
  };
  return k;
}

namespace detail {

// Capsule pairs that legitimately overlap because they share a joint (or the
// neck region). Everything else overlapping means the articulation folded
// the body into itself.
inline bool capsules_adjacent(const std::string& a, const std::string& b) {
  static const std::vector<std::pair<const char*, const char*>> allow = {
      {"torso", "neck"},
      {"neck", "head"},
      {"torso", "head"},
      {"torso", "clavicle_l"},
      {"torso", "clavicle_r"},
      {"clavicle_l", "clavicle_r"},
      {"clavicle_l", "neck"},
      {"clavicle_r", "neck"},
      {"clavicle_l", "head"},
      {"clavicle_r", "head"},
      {"clavicle_l", "upper_arm_l"},
      {"clavicle_r", "upper_arm_r"},
      {"upper_arm_l", "lower_arm_l"},
      {"upper_arm_r", "lower_arm_r"},
      {"torso", "upper_leg_l"},
      {"torso", "upper_leg_r"},
      {"upper_leg_l", "lower_leg_l"},
      {"upper_leg_r", "lower_leg_r"},
  };
  for (const auto& [x, y] : allow)
    if ((a == x && b == y) || (a == y && b == x)) return true;
  return false;
}

}  // namespace detail

// Returns the first overlapping non-adjacent capsule pair, or empty.
inline std::string find_self_intersection(const FigureSkeleton& k) {
  for (std::size_t i = 0; i < k.capsules.size(); ++i)
    for (std::size_t j = i + 1; j < k.capsules.size(); ++j) {
      const auto& ca = k.capsules[i];
      const auto& cb = k.capsules[j];
      if (detail::capsules_adjacent(ca.name, cb.name)) continue;
      const double d = detail::segment_distance(ca.a, ca.b, cb.a, cb.b);
      if (d < ca.radius + cb.radius - 1e-9)
        return std::string(ca.name) + " / " + cb.name;
    }
  return {};
}

inline double figure_sdf(const Point3& p, const std::vector<PosedCapsule>& caps) {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& c : caps)
    d = std::min(d, detail::capsule_sdf(p, c.a, c.b, c.radius));
  return d;
}

// Lattice for meshing one posed skeleton. The cell size targets `mesh_res`
// nodes along z, then snaps so node columns pass exactly through x = 0 and
// x = +-hip_width (and y = 0): along those columns the distance field is
// linear in z near the head and foot apexes, so the extracted stature is
// exact rather than a cell-sized undershoot.
inline VoxelLattice figure_lattice(const FigureSpec& s,
                                   const FigureSkeleton& k) {
  Vec3 lo = k.capsules[0].a, hi = k.capsules[0].a;
  for (const auto& c : k.capsules) {
    const Vec3 r{c.radius, c.radius, c.radius};
    lo = lo.cwise_min((c.a.cwise_min(c.b)) - r);
    hi = hi.cwise_max((c.a.cwise_max(c.b)) + r);
  }
  const double zext = hi.z - lo.z;
  const double cell0 = zext / double(s.mesh_res - 1);
  const double snaps = std::max(1.0, std::round(s.hip_width / cell0));
  const double cell = s.hip_width / snaps;
  const double margin = 2.5 * cell;
  VoxelLattice lat;
  lat.cell = {cell, cell, cell};
  Vec3 origin;
  int res[3];
  for (int axis = 0; axis < 3; ++axis) {
    const double a = lo[axis] - margin;
    const double b = hi[axis] + margin;
    origin[axis] = std::floor(a / cell) * cell;
    res[axis] = int(std::ceil((b - origin[axis]) / cell)) + 1;
  }
  lat.origin = origin;
  lat.res = {res[0], res[1], res[2]};
  lat.validate();
  return lat;
}

// Poses the skeleton, rejects self-intersecting articulations, and extracts
// the union surface. Deterministic: equal specs give bit-identical meshes.
inline TriMesh generate_figure(const FigureSpec& spec,
                               FigureSkeleton* skeleton_out = nullptr) {
  spec.validate();
  const FigureSkeleton k = pose_skeleton(spec);
  if (const std::string clash = find_self_intersection(k); !clash.empty())
    throw std::invalid_argument("generate_figure: self-intersecting articulation: " + clash);
  const VoxelLattice lat = figure_lattice(spec, k);
  ScalarGrid field = ScalarGrid::filled(lat, 0.0);
  for (int kk = 0; kk < lat.res[2]; ++kk)
    for (int jj = 0; jj < lat.res[1]; ++jj)
      for (int ii = 0; ii < lat.res[0]; ++ii)
        field.values[lat.node_index(ii, jj, kk)] =
            -figure_sdf(lat.node_pos(ii, jj, kk), k.capsules);
  TriMesh mesh = marching_cubes(field, 0.0);
  if (mesh.vertices.empty())
    throw std::runtime_error("generate_figure: empty surface (degenerate spec)");
  if (skeleton_out) *skeleton_out = k;
  return mesh;
}

inline FigureSpec FigureSpec::random(std::uint64_t seed) {
  Rng rng(seed ^ 0x66696775726573ULL);
  for (int attempt = 0; attempt < 100; ++attempt) {
    FigureSpec s = proportioned(seed, rng.uniform(1.5, 2.0));
    s.seed = seed;
    // proportion jitter, then restore the exact stature
    const auto jitter = [&rng](double& d, double amount) {
      d *= 1.0 + rng.uniform(-amount, amount);
    };
    jitter(s.head_radius, 0.08);
    jitter(s.torso_length, 0.06);
    jitter(s.torso_radius, 0.10);
    jitter(s.shoulder_width, 0.06);
    jitter(s.upper_arm_length, 0.08);
    jitter(s.lower_arm_length, 0.08);
    jitter(s.arm_radius, 0.10);
    jitter(s.hip_width, 0.06);
    jitter(s.upper_leg_length, 0.08);
    jitter(s.lower_leg_length, 0.08);
    jitter(s.leg_radius, 0.08);
    s.rescale(s.height / s.analytic_height());

    s.pose.shoulder_l = rng.uniform(-1.25, 0.15);
    s.pose.shoulder_r = rng.uniform(-1.25, 0.15);
    s.pose.elbow_l = rng.uniform(0.0, 0.9);
    s.pose.elbow_r = rng.uniform(0.0, 0.9);
    s.pose.hip_l = rng.uniform(-0.45, 0.45);
    s.pose.hip_r = rng.uniform(-0.45, 0.45);
    s.pose.knee_l = rng.uniform(0.0, 0.9);
    s.pose.knee_r = rng.uniform(0.0, 0.9);

    if (find_self_intersection(pose_skeleton(s)).empty()) return s;
  }
  throw std::runtime_error("FigureSpec::random: no valid articulation found");
}

}  // namespace crowdrec
