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

// Geometry and scalar-field primitives shared by every other header: 3-vectors,
// rigid transforms with an exact axis-angle parameterization, pinhole cameras,
// voxel lattices and trilinearly sampled scalar grids, and a small
// deterministic RNG whose streams are reproducible across platforms.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdrec {

inline constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// Vec3

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  constexpr Vec3() = default;
  constexpr Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double squared_norm() const { return dot(*this); }
  double norm() const { return std::sqrt(squared_norm()); }
  Vec3 normalized() const {
    const double n = norm();
    if (n == 0.0) throw std::invalid_argument("Vec3::normalized: zero vector");
    return *this / n;
  }
  Vec3 cwise_min(const Vec3& o) const {
    return {std::min(x, o.x), std::min(y, o.y), std::min(z, o.z)};
  }
  Vec3 cwise_max(const Vec3& o) const {
    return {std::max(x, o.x), std::max(y, o.y), std::max(z, o.z)};
  }
  double max_coeff() const { return std::max(x, std::max(y, z)); }
  bool all_finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
};

using Point3 = Vec3;

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }
inline double dot(const Vec3& a, const Vec3& b) { return a.dot(b); }
inline Vec3 cross(const Vec3& a, const Vec3& b) { return a.cross(b); }

// ---------------------------------------------------------------------------
// Mat3 (row-major)

struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return Mat3{}; }
  static Mat3 zero() { return Mat3{{0, 0, 0, 0, 0, 0, 0, 0, 0}}; }
  static Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2) {
    return Mat3{{r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z}};
  }
  // Cross-product matrix: skew(a) * b == a.cross(b).
  static Mat3 skew(const Vec3& a) {
    return Mat3{{0, -a.z, a.y, a.z, 0, -a.x, -a.y, a.x, 0}};
  }

  double operator()(int r, int c) const { return m[3 * r + c]; }
  double& operator()(int r, int c) { return m[3 * r + c]; }

  Vec3 row(int r) const { return {m[3 * r], m[3 * r + 1], m[3 * r + 2]}; }
  Vec3 col(int c) const { return {m[c], m[c + 3], m[c + 6]}; }

  Mat3 transpose() const {
    return Mat3{{m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}};
  }
  Mat3 operator+(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
    return r;
  }
  Mat3 operator-(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] - o.m[i];
    return r;
  }
  Mat3 operator*(double s) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] * s;
    return r;
  }
  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r = Mat3::zero();
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) {
        const double a = m[3 * i + k];
        for (int j = 0; j < 3; ++j) r.m[3 * i + j] += a * o.m[3 * k + j];
      }
    return r;
  }
  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) -
           m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
  double trace() const { return m[0] + m[4] + m[8]; }
  double max_abs_diff(const Mat3& o) const {
    double d = 0.0;
    for (int i = 0; i < 9; ++i) d = std::max(d, std::abs(m[i] - o.m[i]));
    return d;
  }
};

// ---------------------------------------------------------------------------
// Axis-angle <-> rotation matrix

// Rodrigues formula, series-stabilized near theta = 0.
inline Mat3 rotation_from_axis_angle(const Vec3& w) {
  const double theta2 = w.squared_norm();
  const double theta = std::sqrt(theta2);
  double a, b;  // sin(t)/t and (1-cos(t))/t^2
  if (theta < 1e-8) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 k = Mat3::skew(w);
  return Mat3::identity() + k * a + (k * k) * b;
}

// Log map; returns the axis-angle with angle in [0, pi]. The angle comes from
// atan2 of the independently computed sine and cosine, which stays
// well-conditioned at both ends of the range.
inline Vec3 axis_angle_from_rotation(const Mat3& r) {
  const Vec3 v{r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)};
  const double cos_t = std::min(1.0, std::max(-1.0, (r.trace() - 1.0) * 0.5));
  const double sin_t = 0.5 * std::min(2.0, v.norm());
  const double theta = std::atan2(sin_t, cos_t);
  if (sin_t > 1e-6) return v * (theta / (2.0 * sin_t));
  if (cos_t > 0.0) return v * 0.5;  // w ~ v/2 to first order near identity
  // Near pi: a a^T = I + (sym(R) - I) / (1 - cos), digits intact because
  // 1 - cos ~ 2. Signs come from the column of the dominant component.
  const Mat3 sym = (r + r.transpose()) * 0.5;
  const double k = 1.0 / (1.0 - cos_t);
  Vec3 diag{1.0 + (sym(0, 0) - 1.0) * k, 1.0 + (sym(1, 1) - 1.0) * k,
            1.0 + (sym(2, 2) - 1.0) * k};
  int c = 0;
  if (diag.y > diag[c]) c = 1;
  if (diag.z > diag[c]) c = 2;
  Vec3 axis;
  axis[c] = std::sqrt(std::max(0.0, diag[c]));
  for (int j = 0; j < 3; ++j)
    if (j != c) axis[j] = sym(c, j) * k / axis[c];
  axis = axis.normalized();
  if (axis.dot(v) < 0.0) axis = -axis;  // sign is moot exactly at pi
  return axis * theta;
}

// d(R)/d(w_i) for R = exp([w]x), the Gallego-Yezzi closed form; exact limit
// [e_i]x at w = 0.
inline std::array<Mat3, 3> rotation_jacobian(const Vec3& w) {
  const double theta2 = w.squared_norm();
  std::array<Mat3, 3> jac;
  if (theta2 < 1e-12) {
    jac[0] = Mat3::skew({1, 0, 0});
    jac[1] = Mat3::skew({0, 1, 0});
    jac[2] = Mat3::skew({0, 0, 1});
    return jac;
  }
  const Mat3 r = rotation_from_axis_angle(w);
  const Mat3 eye_minus_r = Mat3::identity() - r;
  for (int i = 0; i < 3; ++i) {
    Vec3 e{0, 0, 0};
    e[i] = 1.0;
    const Vec3 u = w.cross(eye_minus_r * e);
    const Mat3 num = Mat3::skew(w) * w[i] + Mat3::skew(u);
    jac[i] = num * (1.0 / theta2) * r;
  }
  return jac;
}

// ---------------------------------------------------------------------------
// RigidTransform

struct RigidTransform {
  Mat3 rotation = Mat3::identity();
  Vec3 translation{0, 0, 0};

  static RigidTransform identity() { return {}; }

  Point3 apply(const Point3& p) const { return rotation * p + translation; }
  Vec3 rotate(const Vec3& v) const { return rotation * v; }

  RigidTransform inverse() const {
    const Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  // Orthonormality defect: max |R^T R - I| plus |det - 1|.
  double rigidity_error() const {
    const Mat3 g = rotation.transpose() * rotation;
    double e = g.max_abs_diff(Mat3::identity());
    return std::max(e, std::abs(rotation.det() - 1.0));
  }
  bool is_rigid(double eps = 1e-9) const { return rigidity_error() <= eps; }

  // Re-projects the rotation onto SO(3) via Gram-Schmidt on rows.
  RigidTransform orthonormalized() const {
    Vec3 r0 = rotation.row(0).normalized();
    Vec3 r1 = rotation.row(1) - r0 * r0.dot(rotation.row(1));
    r1 = r1.normalized();
    const Vec3 r2 = r0.cross(r1);
    return {Mat3::from_rows(r0, r1, r2), translation};
  }

  // Unit quaternion (w, x, y, z), w >= 0. Shepperd's branching keeps the
  // conversion stable for every sign pattern of the diagonal.
  std::array<double, 4> to_quaternion() const {
    const Mat3& r = rotation;
    const double t = r.trace();
    std::array<double, 4> q{};
    if (t > 0.0) {
      double s = std::sqrt(t + 1.0) * 2.0;
      q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s,
           (r(1, 0) - r(0, 1)) / s};
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
      double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
      q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s,
           (r(0, 2) + r(2, 0)) / s};
    } else if (r(1, 1) > r(2, 2)) {
      double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
      q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s,
           (r(1, 2) + r(2, 1)) / s};
    } else {
      double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
      q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s,
           (r(1, 2) + r(2, 1)) / s, 0.25 * s};
    }
    if (q[0] < 0.0)
      for (double& c : q) c = -c;
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    for (double& c : q) c /= n;
    return q;
  }

  static RigidTransform from_quaternion(const std::array<double, 4>& q,
                                        const Vec3& t = {0, 0, 0}) {
    const double n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
    if (n2 < 1e-24) throw std::invalid_argument("from_quaternion: zero quaternion");
    const double s = 2.0 / n2;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r{{1 - s * (y * y + z * z), s * (x * y - w * z), s * (x * z + w * y),
            s * (x * y + w * z), 1 - s * (x * x + z * z), s * (y * z - w * x),
            s * (x * z - w * y), s * (y * z + w * x), 1 - s * (x * x + y * y)}};
    return {r, t};
  }
};

// b applied after a: (compose(b, a))(p) == b(a(p)).
inline RigidTransform compose(const RigidTransform& b, const RigidTransform& a) {
  return {b.rotation * a.rotation, b.rotation * a.translation + b.translation};
}

// Geodesic rotation distance in radians.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
  return axis_angle_from_rotation(a.transpose() * b).norm();
}

// ---------------------------------------------------------------------------
// Camera: pinhole, world -> camera extrinsics, +z looks forward, image v grows
// downward.

struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;
  RigidTransform world_to_cam;

  struct Projection {
    double u = 0.0, v = 0.0;
    double depth = 0.0;  // camera-space z
  };

  // nullopt when the point is not strictly in front of the camera.
  std::optional<Projection> project(const Point3& p) const {
    const Point3 pc = world_to_cam.apply(p);
    if (pc.z <= 1e-12) return std::nullopt;
    return Projection{fx * pc.x / pc.z + cx, fy * pc.y / pc.z + cy, pc.z};
  }

  Point3 unproject(double u, double v, double depth) const {
    if (depth <= 0.0) throw std::invalid_argument("Camera::unproject: depth <= 0");
    const Point3 pc{(u - cx) / fx * depth, (v - cy) / fy * depth, depth};
    return world_to_cam.inverse().apply(pc);
  }

  Point3 center() const { return world_to_cam.inverse().translation; }

  struct Ray {
    Point3 origin;
    Vec3 dir;  // scaled so camera-space z of dir is 1: depth == ray parameter
  };

  Ray pixel_ray(double u, double v) const {
    const Vec3 dir_cam{(u - cx) / fx, (v - cy) / fy, 1.0};
    const RigidTransform cam_to_world = world_to_cam.inverse();
    return {cam_to_world.translation, cam_to_world.rotate(dir_cam)};
  }

  bool in_image(double u, double v) const {
    return u >= 0.0 && v >= 0.0 && u < width && v < height;
  }

  // Camera at `eye` looking toward `target`; `up` must not be parallel to the
  // view direction. The target projects exactly onto the principal point.
  static Camera look_at(const Point3& eye, const Point3& target, double fx,
                        double fy, int width, int height,
                        const Vec3& up = {0, 0, 1}) {
    const Vec3 fwd = (target - eye).normalized();
    Vec3 right = fwd.cross(up);
    const double rn = right.norm();
    if (rn < 1e-12)
      throw std::invalid_argument("Camera::look_at: view direction parallel to up");
    right = right / rn;
    const Vec3 down = fwd.cross(right);
    Camera cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = width * 0.5;
    cam.cy = height * 0.5;
    cam.width = width;
    cam.height = height;
    cam.world_to_cam.rotation = Mat3::from_rows(right, down, fwd);
    cam.world_to_cam.translation = -(cam.world_to_cam.rotation * eye);
    return cam;
  }
};

// ---------------------------------------------------------------------------
// VoxelLattice: axis-aligned array of sample nodes. Node (i,j,k) sits at
// origin + (i*cell.x, j*cell.y, k*cell.z); each node is the center of its
// dual voxel of size `cell`.

struct VoxelLattice {
  Point3 origin{0, 0, 0};
  Vec3 cell{1, 1, 1};
  std::array<int, 3> res{2, 2, 2};  // node counts, each >= 2

  VoxelLattice() = default;
  VoxelLattice(const Point3& origin_, const Vec3& cell_, std::array<int, 3> res_)
      : origin(origin_), cell(cell_), res(res_) {
    validate();
  }

  static VoxelLattice from_bounds(const Point3& lo, const Point3& hi,
                                  std::array<int, 3> res_) {
    VoxelLattice l;
    l.origin = lo;
    l.res = res_;
    for (int a = 0; a < 3; ++a) {
      if (res_[a] < 2) throw std::invalid_argument("VoxelLattice: res < 2");
      l.cell[a] = (hi[a] - lo[a]) / (res_[a] - 1);
    }
    l.validate();
    return l;
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (res[a] < 2) throw std::invalid_argument("VoxelLattice: res < 2");
      if (!(cell[a] > 0.0) || !std::isfinite(cell[a]))
        throw std::invalid_argument("VoxelLattice: cell size must be positive");
    }
    if (!origin.all_finite())
      throw std::invalid_argument("VoxelLattice: origin not finite");
  }

  std::size_t node_count() const {
    return std::size_t(res[0]) * res[1] * res[2];
  }
  std::size_t node_index(int i, int j, int k) const {
    return (std::size_t(k) * res[1] + j) * res[0] + i;
  }
  Point3 node_pos(int i, int j, int k) const {
    return {origin.x + i * cell.x, origin.y + j * cell.y, origin.z + k * cell.z};
  }
  // Continuous lattice coordinates; node (i,j,k) maps to (i,j,k) exactly.
  Vec3 to_lattice(const Point3& p) const {
    return {(p.x - origin.x) / cell.x, (p.y - origin.y) / cell.y,
            (p.z - origin.z) / cell.z};
  }
  Point3 bounds_min() const { return origin; }
  Point3 bounds_max() const {
    return node_pos(res[0] - 1, res[1] - 1, res[2] - 1);
  }
  bool contains(const Point3& p, double eps = 0.0) const {
    const Vec3 g = to_lattice(p);
    for (int a = 0; a < 3; ++a)
      if (g[a] < -eps || g[a] > res[a] - 1 + eps) return false;
    return true;
  }
  double min_cell() const { return std::min(cell.x, std::min(cell.y, cell.z)); }
  double diagonal() const { return (bounds_max() - bounds_min()).norm(); }

  bool operator==(const VoxelLattice& o) const {
    return origin.x == o.origin.x && origin.y == o.origin.y &&
           origin.z == o.origin.z && cell.x == o.cell.x && cell.y == o.cell.y &&
           cell.z == o.cell.z && res == o.res;
  }
};

// ---------------------------------------------------------------------------
// ScalarGrid: dense values at lattice nodes. Occupancy fields keep values in
// [0,1]; signed fields are legal wherever a plain scalar field is accepted.

struct ScalarGrid {
  VoxelLattice lattice;
  std::vector<double> values;

  ScalarGrid() = default;
  ScalarGrid(const VoxelLattice& lattice_, std::vector<double> values_)
      : lattice(lattice_), values(std::move(values_)) {
    if (values.size() != lattice.node_count())
      throw std::invalid_argument("ScalarGrid: value count != node count");
  }
  static ScalarGrid filled(const VoxelLattice& lattice_, double v) {
    return ScalarGrid(lattice_, std::vector<double>(lattice_.node_count(), v));
  }

  double at(int i, int j, int k) const { return values[lattice.node_index(i, j, k)]; }
  double& at(int i, int j, int k) { return values[lattice.node_index(i, j, k)]; }

  bool is_probability_field(double eps = 1e-12) const {
    for (double v : values)
      if (!(v >= -eps && v <= 1.0 + eps)) return false;
    return true;
  }
};

using OccupancyGrid = ScalarGrid;

namespace detail {

struct TrilinearCell {
  int i0, j0, k0;
  double fx, fy, fz;
};

// Locates p in the lattice. With clamp the coordinates are clamped to the
// boundary; otherwise out-of-range (beyond 1e-9 cells) throws. Coordinates
// within 1e-9 cells of a node snap onto it so that node positions recover
// stored values exactly despite world<->lattice rounding.
inline TrilinearCell locate_trilinear(const VoxelLattice& l, const Point3& p,
                                      bool clamp) {
  Vec3 g = l.to_lattice(p);
  for (int a = 0; a < 3; ++a) {
    const double r = std::round(g[a]);
    if (std::abs(g[a] - r) < 1e-9) g[a] = r;
    if (clamp) {
      if (g[a] < 0.0) g[a] = 0.0;
      if (g[a] > l.res[a] - 1) g[a] = double(l.res[a] - 1);
    } else if (g[a] < -1e-9 || g[a] > l.res[a] - 1 + 1e-9) {
      throw std::out_of_range("trilinear_sample: point outside lattice");
    } else {
      g[a] = std::min(std::max(g[a], 0.0), double(l.res[a] - 1));
    }
  }
  TrilinearCell c;
  c.i0 = std::min(int(g.x), l.res[0] - 2);
  c.j0 = std::min(int(g.y), l.res[1] - 2);
  c.k0 = std::min(int(g.z), l.res[2] - 2);
  c.fx = g.x - c.i0;
  c.fy = g.y - c.j0;
  c.fz = g.z - c.k0;
  return c;
}

}  // namespace detail

// Exact at nodes; affine per cell. With clamp=false, points outside the
// lattice bounds raise std::out_of_range.
inline double trilinear_sample(const ScalarGrid& grid, const Point3& p,
                               bool clamp = true) {
  const auto c = detail::locate_trilinear(grid.lattice, p, clamp);
  auto v = [&](int di, int dj, int dk) {
    return grid.at(c.i0 + di, c.j0 + dj, c.k0 + dk);
  };
  const double c00 = v(0, 0, 0) * (1 - c.fx) + v(1, 0, 0) * c.fx;
  const double c10 = v(0, 1, 0) * (1 - c.fx) + v(1, 1, 0) * c.fx;
  const double c01 = v(0, 0, 1) * (1 - c.fx) + v(1, 0, 1) * c.fx;
  const double c11 = v(0, 1, 1) * (1 - c.fx) + v(1, 1, 1) * c.fx;
  const double c0 = c00 * (1 - c.fy) + c10 * c.fy;
  const double c1 = c01 * (1 - c.fy) + c11 * c.fy;
  return c0 * (1 - c.fz) + c1 * c.fz;
}

// ---------------------------------------------------------------------------
// Rng: splitmix64 core with explicit uniform/normal algorithms so streams do
// not depend on the standard library's distribution implementations.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Uniform in {0, ..., n-1} via rejection-free scaling (n << 2^64 here).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_index: n == 0");
    return std::uint64_t(uniform() * double(n)) % n;
  }

  // Marsaglia polar method, spare discarded to keep the stream stateless.
  double normal() {
    for (;;) {
      const double u = uniform(-1.0, 1.0);
      const double v = uniform(-1.0, 1.0);
      const double s = u * u + v * v;
      if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
    }
  }

  Vec3 uniform_in_box(const Point3& lo, const Point3& hi) {
    return {uniform(lo.x, hi.x), uniform(lo.y, hi.y), uniform(lo.z, hi.z)};
  }

  // Derives an independent stream; distinct tags give distinct streams.
  Rng fork(std::uint64_t tag) {
    Rng r(state_ ^ (0xd1342543de82ef95ull * (tag + 1)));
    r.next_u64();
    return r;
  }

 private:
  std::uint64_t state_;
};

}  // namespace crowdrec
