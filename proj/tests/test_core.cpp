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

#include <cmath>

#include "crowdrec/core.hpp"

using namespace crowdrec;

TEST_CASE("rotation round-trips through axis-angle with angle in [0, pi]") {
  Rng rng(11);
  for (int it = 0; it < 200; ++it) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    axis = axis.normalized();
    const double theta = rng.uniform(1e-6, kPi - 1e-6);
    const Vec3 w = axis * theta;
    const Mat3 r = rotation_from_axis_angle(w);
    CHECK(std::abs(r.det() - 1.0) < 1e-12);
    const Vec3 back = axis_angle_from_rotation(r);
    CHECK(back.norm() <= kPi + 1e-12);
    CHECK((back - w).norm() < 1e-9 * std::max(1.0, theta));
  }
}

TEST_CASE("axis-angle log map handles identity and near-pi rotations") {
  CHECK(axis_angle_from_rotation(Mat3::identity()).norm() == 0.0);
  Rng rng(12);
  for (int it = 0; it < 50; ++it) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    axis = axis.normalized();
    const double theta = kPi - rng.uniform(0.0, 1e-6);
    const Mat3 r = rotation_from_axis_angle(axis * theta);
    const Vec3 back = axis_angle_from_rotation(r);
    const Mat3 r2 = rotation_from_axis_angle(back);
    CHECK(r.max_abs_diff(r2) < 1e-7);
  }
}

TEST_CASE("rotation jacobian matches central finite differences") {
  Rng rng(13);
  for (int it = 0; it < 50; ++it) {
    Vec3 w{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    if (it == 0) w = {0, 0, 0};  // exact limit case
    const auto jac = rotation_jacobian(w);
    const double h = 1e-6;
    for (int i = 0; i < 3; ++i) {
      Vec3 wp = w, wm = w;
      wp[i] += h;
      wm[i] -= h;
      const Mat3 rp = rotation_from_axis_angle(wp);
      const Mat3 rm = rotation_from_axis_angle(wm);
      for (int e = 0; e < 9; ++e) {
        const double fd = (rp.m[e] - rm.m[e]) / (2 * h);
        CHECK(std::abs(jac[i].m[e] - fd) < 1e-6);
      }
    }
  }
}

TEST_CASE("quaternion conversion round-trips to 1e-12") {
  Rng rng(14);
  for (int it = 0; it < 200; ++it) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    const Mat3 r =
        rotation_from_axis_angle(axis.normalized() * rng.uniform(0, kPi));
    RigidTransform t{r, {rng.normal(), rng.normal(), rng.normal()}};
    const auto q = t.to_quaternion();
    const RigidTransform back = RigidTransform::from_quaternion(q, t.translation);
    CHECK(r.max_abs_diff(back.rotation) < 1e-12);
  }
}

TEST_CASE("composition chains of length 1000 stay rigid within 1e-7") {
  Rng rng(15);
  RigidTransform acc = RigidTransform::identity();
  std::vector<RigidTransform> steps;
  for (int i = 0; i < 1000; ++i) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    RigidTransform s{rotation_from_axis_angle(axis.normalized() * rng.uniform(0, 3)),
                     {rng.normal(), rng.normal(), rng.normal()}};
    steps.push_back(s);
    acc = compose(s, acc);
  }
  CHECK(acc.rigidity_error() < 1e-7);
  // inverse(chain) composed with chain is identity
  RigidTransform inv = RigidTransform::identity();
  for (const auto& s : steps) inv = compose(inv, s.inverse());
  const RigidTransform eye = compose(inv, acc);
  CHECK(eye.rotation.max_abs_diff(Mat3::identity()) < 1e-9);
  CHECK(eye.translation.norm() < 1e-6);
  CHECK(acc.orthonormalized().rigidity_error() < 1e-14);
}

TEST_CASE("apply and inverse round-trip points exactly") {
  Rng rng(16);
  for (int it = 0; it < 100; ++it) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    RigidTransform t{rotation_from_axis_angle(axis.normalized() * rng.uniform(0, 3)),
                     {rng.normal(), rng.normal(), rng.normal()}};
    const Point3 p{rng.normal(), rng.normal(), rng.normal()};
    CHECK((t.inverse().apply(t.apply(p)) - p).norm() < 1e-13);
  }
}

TEST_CASE("unit camera maps the optical axis to the principal point") {
  Camera cam;
  cam.fx = cam.fy = 1.0;
  cam.cx = cam.cy = 0.0;
  cam.width = cam.height = 2;
  const auto pr = cam.project({0, 0, 1});
  REQUIRE(pr.has_value());
  CHECK(pr->u == 0.0);
  CHECK(pr->v == 0.0);
  CHECK(pr->depth == 1.0);
  CHECK(!cam.project({0, 0, 0}).has_value());
  CHECK(!cam.project({0, 0, -1}).has_value());
}

TEST_CASE("project and unproject are mutually inverse in front of the camera") {
  Rng rng(17);
  Camera cam = Camera::look_at({3, 1, 2}, {0, 0, 1}, 120, 120, 128, 128);
  for (int it = 0; it < 200; ++it) {
    const Point3 p = rng.uniform_in_box({-1, -1, 0}, {1, 1, 2});
    const auto pr = cam.project(p);
    REQUIRE(pr.has_value());
    const Point3 back = cam.unproject(pr->u, pr->v, pr->depth);
    CHECK((back - p).norm() < 1e-10);
  }
}

TEST_CASE("look_at projects the target onto the principal point within 1e-6 px") {
  const Point3 target{0.3, -0.2, 1.1};
  Camera cam = Camera::look_at({4, 2, 3}, target, 150, 150, 96, 96);
  const auto pr = cam.project(target);
  REQUIRE(pr.has_value());
  CHECK(std::abs(pr->u - cam.cx) < 1e-6);
  CHECK(std::abs(pr->v - cam.cy) < 1e-6);
  CHECK(cam.world_to_cam.is_rigid(1e-12));
}

TEST_CASE("pixel rays are parameterized by camera depth") {
  Camera cam = Camera::look_at({2, -3, 1.5}, {0, 0, 1}, 110, 110, 64, 64);
  Rng rng(18);
  for (int it = 0; it < 50; ++it) {
    const double u = rng.uniform(0, 64), v = rng.uniform(0, 64);
    const auto ray = cam.pixel_ray(u, v);
    const double t = rng.uniform(0.5, 5.0);
    const Point3 p = ray.origin + ray.dir * t;
    const auto pr = cam.project(p);
    REQUIRE(pr.has_value());
    CHECK(std::abs(pr->depth - t) < 1e-9);
    CHECK(std::abs(pr->u - u) < 1e-7);
    CHECK(std::abs(pr->v - v) < 1e-7);
  }
}

TEST_CASE("lattice node positions and indices are bijective") {
  const VoxelLattice l({-1, -2, 0.5}, {0.25, 0.5, 0.125}, {5, 4, 9});
  CHECK(l.node_count() == 5u * 4u * 9u);
  std::vector<bool> seen(l.node_count(), false);
  for (int k = 0; k < 9; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 5; ++i) {
        const auto idx = l.node_index(i, j, k);
        CHECK(!seen[idx]);
        seen[idx] = true;
        const Vec3 g = l.to_lattice(l.node_pos(i, j, k));
        CHECK(std::abs(g.x - i) < 1e-12);
        CHECK(std::abs(g.y - j) < 1e-12);
        CHECK(std::abs(g.z - k) < 1e-12);
      }
  CHECK(l.contains(l.bounds_min()));
  CHECK(l.contains(l.bounds_max()));
  CHECK(!l.contains(l.bounds_max() + Vec3{0.01, 0, 0}));
  CHECK_THROWS_AS(VoxelLattice({0, 0, 0}, {1, 1, 1}, {1, 2, 2}),
                  std::invalid_argument);
  CHECK_THROWS_AS(VoxelLattice({0, 0, 0}, {0, 1, 1}, {2, 2, 2}),
                  std::invalid_argument);
}

namespace {

// Independent 8-corner weighted sum used as the trilinear oracle.
double trilinear_oracle(const ScalarGrid& g, const Point3& p) {
  const Vec3 q = g.lattice.to_lattice(p);
  const int i0 = std::min(int(q.x), g.lattice.res[0] - 2);
  const int j0 = std::min(int(q.y), g.lattice.res[1] - 2);
  const int k0 = std::min(int(q.z), g.lattice.res[2] - 2);
  const double fx = q.x - i0, fy = q.y - j0, fz = q.z - k0;
  double acc = 0.0;
  for (int dk = 0; dk < 2; ++dk)
    for (int dj = 0; dj < 2; ++dj)
      for (int di = 0; di < 2; ++di) {
        const double wx = di ? fx : 1 - fx;
        const double wy = dj ? fy : 1 - fy;
        const double wz = dk ? fz : 1 - fz;
        acc += wx * wy * wz * g.at(i0 + di, j0 + dj, k0 + dk);
      }
  return acc;
}

}  // namespace

TEST_CASE("trilinear sampling matches the 8-corner oracle and is exact at nodes") {
  Rng rng(19);
  const VoxelLattice l({-0.5, -0.5, -0.5}, {0.2, 0.25, 0.125}, {6, 5, 9});
  std::vector<double> vals(l.node_count());
  for (double& v : vals) v = rng.uniform(-2, 2);
  const ScalarGrid g(l, vals);

  for (int k = 0; k < l.res[2]; ++k)
    for (int j = 0; j < l.res[1]; ++j)
      for (int i = 0; i < l.res[0]; ++i)
        CHECK(trilinear_sample(g, l.node_pos(i, j, k)) == g.at(i, j, k));

  for (int it = 0; it < 500; ++it) {
    const Point3 p = rng.uniform_in_box(l.bounds_min(), l.bounds_max());
    CHECK(std::abs(trilinear_sample(g, p) - trilinear_oracle(g, p)) < 1e-13);
  }
}

TEST_CASE("trilinear sampling reproduces affine fields exactly") {
  const VoxelLattice l({0, 0, 0}, {0.5, 0.5, 0.5}, {4, 4, 4});
  auto f = [](const Point3& p) { return 0.3 + 1.7 * p.x - 0.4 * p.y + 2.2 * p.z; };
  std::vector<double> vals(l.node_count());
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i)
        vals[l.node_index(i, j, k)] = f(l.node_pos(i, j, k));
  const ScalarGrid g(l, vals);
  Rng rng(20);
  for (int it = 0; it < 200; ++it) {
    const Point3 p = rng.uniform_in_box(l.bounds_min(), l.bounds_max());
    CHECK(std::abs(trilinear_sample(g, p) - f(p)) < 1e-12);
  }
}

TEST_CASE("trilinear clamp policy: clamped at the border or out-of-range error") {
  const VoxelLattice l({0, 0, 0}, {1, 1, 1}, {2, 2, 2});
  ScalarGrid g = ScalarGrid::filled(l, 0.0);
  g.at(1, 0, 0) = 1.0;
  CHECK(trilinear_sample(g, {2.5, 0, 0}, true) == 1.0);
  CHECK(trilinear_sample(g, {-1.0, 0, 0}, true) == 0.0);
  CHECK_THROWS_AS(trilinear_sample(g, {2.5, 0, 0}, false), std::out_of_range);
  CHECK_THROWS_AS(trilinear_sample(g, {0, 0, -0.2}, false), std::out_of_range);
  CHECK(trilinear_sample(g, {1.0, 1.0, 1.0}, false) == g.at(1, 1, 1));
}

TEST_CASE("scalar grid rejects mismatched value counts") {
  const VoxelLattice l({0, 0, 0}, {1, 1, 1}, {2, 2, 2});
  CHECK_THROWS_AS(ScalarGrid(l, std::vector<double>(7, 0.0)),
                  std::invalid_argument);
  CHECK(ScalarGrid::filled(l, 0.5).is_probability_field());
  ScalarGrid g = ScalarGrid::filled(l, 0.5);
  g.at(0, 0, 0) = -3.0;
  CHECK(!g.is_probability_field());
}

TEST_CASE("rng streams are deterministic and forks are independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  Rng f1 = c.fork(1);
  Rng f2 = c.fork(2);
  CHECK(f1.next_u64() != f2.next_u64());
  // uniform stays in [0,1), normal has roughly unit scale
  Rng d(7);
  double acc = 0, acc2 = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = d.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const double n = d.normal();
    acc += n;
    acc2 += n * n;
  }
  CHECK(std::abs(acc / 20000) < 0.03);
  CHECK(std::abs(acc2 / 20000 - 1.0) < 0.05);
}
