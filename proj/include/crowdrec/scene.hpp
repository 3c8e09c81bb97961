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

// Synthetic multi-person scenes: seeded figures dropped onto a ground square
// by rejection sampling, observed by a ring of inward-looking cameras, and
// exported as depth/instance/silhouette images plus a JSON manifest that
// regenerates the scene bit-identically.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "crowdrec/core.hpp"
#include "crowdrec/figures.hpp"
#include "crowdrec/image.hpp"
#include "crowdrec/mesh.hpp"
#include "crowdrec/render.hpp"

namespace crowdrec {

// Inward-looking cameras equally spaced in azimuth on a circle around the
// arena. Radius/height/focal defaults frame a 3x3-unit arena of standing
// figures; every manifest records the values it was built with.
struct CameraRigSpec {
  int n_views = 4;
  double radius = 4.0;
  double height = 1.6;
  Point3 look_at{0.0, 0.0, 0.9};
  int image_width = 64, image_height = 64;
  double focal = 48.0;  // pixels; fx = fy

  void validate() const {
    if (n_views < 1) throw std::invalid_argument("CameraRigSpec: n_views < 1");
    if (!(radius > 0.0)) throw std::invalid_argument("CameraRigSpec: radius <= 0");
    if (image_width < 2 || image_height < 2)
      throw std::invalid_argument("CameraRigSpec: image too small");
    if (!(focal > 0.0)) throw std::invalid_argument("CameraRigSpec: focal <= 0");
  }
};

inline std::vector<Camera> build_camera_rig(const CameraRigSpec& rig) {
  rig.validate();
  std::vector<Camera> cams;
  cams.reserve(rig.n_views);
  for (int k = 0; k < rig.n_views; ++k) {
    const double az = 2.0 * kPi * double(k) / double(rig.n_views);
    const Point3 eye{rig.radius * std::cos(az), rig.radius * std::sin(az),
                     rig.height};
    cams.push_back(Camera::look_at(eye, rig.look_at, rig.focal, rig.focal,
                                   rig.image_width, rig.image_height));
  }
  return cams;
}

struct SceneSpec {
  std::uint64_t seed = 0;
  int index = 0;          // position in the dataset; names the scene directory
  int figure_count = 3;   // people per scene, {2..10}
  double arena_half = 1.5;  // ground square [-arena_half, arena_half]^2
  int figure_mesh_res = 64;
  CameraRigSpec rig;

  void validate() const {
    if (figure_count < 2 || figure_count > 10)
      throw std::invalid_argument("SceneSpec: figure_count outside {2..10}");
    if (!(arena_half > 0.0))
      throw std::invalid_argument("SceneSpec: arena_half <= 0");
    if (index < 0) throw std::invalid_argument("SceneSpec: negative index");
    rig.validate();
  }
};

inline std::string scene_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04d", index);
  return buf;
}

// Stable 70-30 split keyed on the scene index alone, so train and test sets
// stay disjoint no matter how many scenes exist.
inline const char* scene_split(int index) {
  return index % 10 < 7 ? "train" : "test";
}

struct PlacedFigure {
  FigureSpec spec;
  RigidTransform world_from_local;  // yaw about z plus ground translation
  TriMesh local_mesh;
};

struct Scene {
  SceneSpec spec;
  std::vector<PlacedFigure> figures;
  std::vector<Camera> cameras;

  TriMesh world_mesh(std::size_t j) const {
    return figures.at(j).local_mesh.transformed(figures[j].world_from_local);
  }
};

namespace detail {

inline RigidTransform yaw_placement(double yaw, double x, double y) {
  RigidTransform rt;
  rt.rotation = rotation_from_axis_angle(Vec3{0.0, 0.0, yaw});
  rt.translation = {x, y, 0.0};
  return rt;
}

// Radius of the smallest vertical cylinder about the local z axis containing
// the capsule union; invariant under yaw, which is all placement applies.
inline double horizontal_radius(const std::vector<PosedCapsule>& caps) {
  double r = 0.0;
  for (const auto& c : caps) {
    r = std::max(r, std::hypot(c.a.x, c.a.y) + c.radius);
    r = std::max(r, std::hypot(c.b.x, c.b.y) + c.radius);
  }
  return r;
}

inline std::vector<PosedCapsule> transform_capsules(
    const std::vector<PosedCapsule>& caps, const RigidTransform& rt) {
  std::vector<PosedCapsule> out = caps;
  for (auto& c : out) {
    c.a = rt.apply(c.a);
    c.b = rt.apply(c.b);
  }
  return out;
}

inline bool capsule_sets_clear(const std::vector<PosedCapsule>& a,
                               const std::vector<PosedCapsule>& b,
                               double margin) {
  for (const auto& ca : a)
    for (const auto& cb : b)
      if (segment_distance(ca.a, ca.b, cb.a, cb.b) <=
          ca.radius + cb.radius + margin)
        return false;
  return true;
}

}  // namespace detail

// Rejection-samples a ground position and yaw per figure until every pair of
// posed capsule unions keeps a clearance margin; the figure meshes are the
// zero isosurfaces of those unions, so capsule clearance implies mesh
// disjointness. When one figure stalls, the whole layout restarts so early
// placements cannot wall off the arena; the shared try budget turns genuine
// overcrowding into an error instead of a hang.
inline std::vector<RigidTransform> place_figures(
    const std::vector<std::vector<PosedCapsule>>& figure_capsules,
    double arena_half, Rng& rng, double margin = 0.03, int budget = 10000) {
  const std::size_t n = figure_capsules.size();
  std::vector<double> radii(n);
  for (std::size_t j = 0; j < n; ++j) {
    radii[j] = detail::horizontal_radius(figure_capsules[j]);
    if (radii[j] >= arena_half)
      throw std::runtime_error(
          "place_figures: arena too small for a figure of radius " +
          std::to_string(radii[j]));
  }

  constexpr int kStallLimit = 300;  // tries per figure before a full restart
  int tries = 0;
  std::vector<RigidTransform> placed;
  std::vector<std::vector<PosedCapsule>> accepted;
  for (std::size_t j = 0; j < n;) {
    bool stalled = true;
    for (int attempt = 0; attempt < kStallLimit; ++attempt) {
      if (++tries > budget)
        throw std::runtime_error(
            "place_figures: try budget exhausted; arena too small for " +
            std::to_string(n) + " figures");
      const double x = rng.uniform(-(arena_half - radii[j]), arena_half - radii[j]);
      const double y = rng.uniform(-(arena_half - radii[j]), arena_half - radii[j]);
      const double yaw = rng.uniform(0.0, 2.0 * kPi);
      const RigidTransform rt = detail::yaw_placement(yaw, x, y);
      auto world = detail::transform_capsules(figure_capsules[j], rt);
      bool clear = true;
      for (const auto& other : accepted)
        if (!detail::capsule_sets_clear(world, other, margin)) {
          clear = false;
          break;
        }
      if (clear) {
        placed.push_back(rt);
        accepted.push_back(std::move(world));
        ++j;
        stalled = false;
        break;
      }
    }
    if (stalled) {
      placed.clear();
      accepted.clear();
      j = 0;
    }
  }
  return placed;
}

// Seeds figures, meshes them, places them without contact, and builds the
// rig. Deterministic in spec.seed. Capsule clearance already implies mesh
// disjointness (the meshes are the capsule-union isosurfaces and the margin
// absorbs meshing error); the exact pairwise triangle test stays on as a
// cheap invariant check.
inline Scene build_scene(const SceneSpec& spec) {
  spec.validate();
  Scene scene;
  scene.spec = spec;
  Rng rng(spec.seed);
  Rng figure_rng = rng.fork(1);
  Rng place_rng = rng.fork(2);

  // Posed legs can lift both feet off the local ground plane, so each figure
  // is dropped by its own z offset; baking the drop into the capsules keeps
  // the clearance test exact for the final world geometry.
  std::vector<std::vector<PosedCapsule>> capsules;
  std::vector<double> drop;
  for (int j = 0; j < spec.figure_count; ++j) {
    PlacedFigure pf;
    pf.spec = FigureSpec::random(figure_rng.next_u64());
    pf.spec.mesh_res = spec.figure_mesh_res;
    FigureSkeleton skeleton;
    pf.local_mesh = generate_figure(pf.spec, &skeleton);
    drop.push_back(-pf.local_mesh.bbox().first.z);
    auto caps = skeleton.capsules;
    for (auto& c : caps) {
      c.a.z += drop.back();
      c.b.z += drop.back();
    }
    capsules.push_back(std::move(caps));
    scene.figures.push_back(std::move(pf));
  }
  auto placements = place_figures(capsules, spec.arena_half, place_rng);
  for (int j = 0; j < spec.figure_count; ++j) {
    placements[j].translation[2] = drop[j];
    scene.figures[j].world_from_local = placements[j];
  }

  for (std::size_t a = 0; a < scene.figures.size(); ++a)
    for (std::size_t b = a + 1; b < scene.figures.size(); ++b)
      if (meshes_intersect(scene.world_mesh(a), scene.world_mesh(b)))
        throw std::logic_error("build_scene: placement produced contact");

  scene.cameras = build_camera_rig(spec.rig);
  return scene;
}

inline std::vector<RenderedView> render_views(const Scene& scene,
                                              const RenderOptions& opts = {}) {
  std::vector<TriMesh> world;
  world.reserve(scene.figures.size());
  for (std::size_t j = 0; j < scene.figures.size(); ++j)
    world.push_back(scene.world_mesh(j));
  std::vector<RenderedView> views;
  views.reserve(scene.cameras.size());
  for (const auto& cam : scene.cameras)
    views.push_back(render_scene(world, cam, opts));
  return views;
}

// -- manifest serialization ---------------------------------------------------

namespace detail {

inline nlohmann::json rt_to_json(const RigidTransform& rt) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rows.push_back(rt.rotation(r, c));
    rows.push_back(rt.translation[r]);
  }
  return rows;  // 3x4 row-major
}

inline RigidTransform rt_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 12)
    throw std::runtime_error("manifest: transform needs 12 row-major entries");
  RigidTransform rt;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rt.rotation(r, c) = j[4 * r + c].get<double>();
    rt.translation[r] = j[4 * r + 3].get<double>();
  }
  return rt;
}

inline nlohmann::json camera_to_json(const Camera& cam) {
  return {
      {"fx", cam.fx},         {"fy", cam.fy},
      {"cx", cam.cx},         {"cy", cam.cy},
      {"width", cam.width},   {"height", cam.height},
      {"world_to_cam", rt_to_json(cam.world_to_cam)},
  };
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera cam;
  cam.fx = j.at("fx").get<double>();
  cam.fy = j.at("fy").get<double>();
  cam.cx = j.at("cx").get<double>();
  cam.cy = j.at("cy").get<double>();
  cam.width = j.at("width").get<int>();
  cam.height = j.at("height").get<int>();
  cam.world_to_cam = rt_from_json(j.at("world_to_cam"));
  return cam;
}

inline nlohmann::json figure_spec_to_json(const FigureSpec& s) {
  return {
      {"seed", s.seed},
      {"height", s.height},
      {"head_radius", s.head_radius},
      {"neck_length", s.neck_length},
      {"torso_length", s.torso_length},
      {"torso_radius", s.torso_radius},
      {"shoulder_width", s.shoulder_width},
      {"upper_arm_length", s.upper_arm_length},
      {"lower_arm_length", s.lower_arm_length},
      {"arm_radius", s.arm_radius},
      {"hip_width", s.hip_width},
      {"upper_leg_length", s.upper_leg_length},
      {"lower_leg_length", s.lower_leg_length},
      {"leg_radius", s.leg_radius},
      {"joint_clamp", s.joint_clamp},
      {"mesh_res", s.mesh_res},
      {"pose",
       {{"shoulder_l", s.pose.shoulder_l},
        {"shoulder_r", s.pose.shoulder_r},
        {"elbow_l", s.pose.elbow_l},
        {"elbow_r", s.pose.elbow_r},
        {"hip_l", s.pose.hip_l},
        {"hip_r", s.pose.hip_r},
        {"knee_l", s.pose.knee_l},
        {"knee_r", s.pose.knee_r}}},
  };
}

inline FigureSpec figure_spec_from_json(const nlohmann::json& j) {
  FigureSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.height = j.at("height").get<double>();
  s.head_radius = j.at("head_radius").get<double>();
  s.neck_length = j.at("neck_length").get<double>();
  s.torso_length = j.at("torso_length").get<double>();
  s.torso_radius = j.at("torso_radius").get<double>();
  s.shoulder_width = j.at("shoulder_width").get<double>();
  s.upper_arm_length = j.at("upper_arm_length").get<double>();
  s.lower_arm_length = j.at("lower_arm_length").get<double>();
  s.arm_radius = j.at("arm_radius").get<double>();
  s.hip_width = j.at("hip_width").get<double>();
  s.upper_leg_length = j.at("upper_leg_length").get<double>();
  s.lower_leg_length = j.at("lower_leg_length").get<double>();
  s.leg_radius = j.at("leg_radius").get<double>();
  s.joint_clamp = j.at("joint_clamp").get<double>();
  s.mesh_res = j.at("mesh_res").get<int>();
  const auto& p = j.at("pose");
  s.pose.shoulder_l = p.at("shoulder_l").get<double>();
  s.pose.shoulder_r = p.at("shoulder_r").get<double>();
  s.pose.elbow_l = p.at("elbow_l").get<double>();
  s.pose.elbow_r = p.at("elbow_r").get<double>();
  s.pose.hip_l = p.at("hip_l").get<double>();
  s.pose.hip_r = p.at("hip_r").get<double>();
  s.pose.knee_l = p.at("knee_l").get<double>();
  s.pose.knee_r = p.at("knee_r").get<double>();
  return s;
}

}  // namespace detail

inline nlohmann::json scene_manifest(const Scene& scene) {
  const auto& spec = scene.spec;
  nlohmann::json m;
  m["id"] = scene_id(spec.index);
  m["split"] = scene_split(spec.index);
  m["seed"] = spec.seed;
  m["index"] = spec.index;
  m["figure_count"] = spec.figure_count;
  m["arena_half"] = spec.arena_half;
  m["figure_mesh_res"] = spec.figure_mesh_res;
  m["rig"] = {
      {"n_views", spec.rig.n_views},
      {"radius", spec.rig.radius},
      {"height", spec.rig.height},
      {"look_at", {spec.rig.look_at.x, spec.rig.look_at.y, spec.rig.look_at.z}},
      {"image_width", spec.rig.image_width},
      {"image_height", spec.rig.image_height},
      {"focal", spec.rig.focal},
  };
  m["cameras"] = nlohmann::json::array();
  for (const auto& cam : scene.cameras)
    m["cameras"].push_back(detail::camera_to_json(cam));
  m["figures"] = nlohmann::json::array();
  for (std::size_t j = 0; j < scene.figures.size(); ++j) {
    nlohmann::json f;
    f["obj"] = "person_" + std::to_string(j) + ".obj";
    f["spec"] = detail::figure_spec_to_json(scene.figures[j].spec);
    f["world_from_local"] =
        detail::rt_to_json(scene.figures[j].world_from_local);
    m["figures"].push_back(std::move(f));
  }
  return m;
}

// Rebuilds the scene a manifest describes. Figure meshes are regenerated
// from their full specs, so a reloaded scene re-renders bit-identically.
inline Scene scene_from_manifest(const nlohmann::json& m) {
  Scene scene;
  scene.spec.seed = m.at("seed").get<std::uint64_t>();
  scene.spec.index = m.at("index").get<int>();
  scene.spec.figure_count = m.at("figure_count").get<int>();
  scene.spec.arena_half = m.at("arena_half").get<double>();
  scene.spec.figure_mesh_res = m.at("figure_mesh_res").get<int>();
  const auto& rig = m.at("rig");
  scene.spec.rig.n_views = rig.at("n_views").get<int>();
  scene.spec.rig.radius = rig.at("radius").get<double>();
  scene.spec.rig.height = rig.at("height").get<double>();
  const auto& look = rig.at("look_at");
  scene.spec.rig.look_at = {look[0].get<double>(), look[1].get<double>(),
                            look[2].get<double>()};
  scene.spec.rig.image_width = rig.at("image_width").get<int>();
  scene.spec.rig.image_height = rig.at("image_height").get<int>();
  scene.spec.rig.focal = rig.at("focal").get<double>();
  scene.spec.validate();
  for (const auto& cj : m.at("cameras"))
    scene.cameras.push_back(detail::camera_from_json(cj));
  for (const auto& fj : m.at("figures")) {
    PlacedFigure pf;
    pf.spec = detail::figure_spec_from_json(fj.at("spec"));
    pf.world_from_local = detail::rt_from_json(fj.at("world_from_local"));
    pf.local_mesh = generate_figure(pf.spec);
    scene.figures.push_back(std::move(pf));
  }
  if (int(scene.figures.size()) != scene.spec.figure_count)
    throw std::runtime_error("manifest: figure list disagrees with count");
  return scene;
}

// -- dataset layout -----------------------------------------------------------
//
//   <root>/scenes/<id>/view_<k>.pfm          composite depth, +inf background
//   <root>/scenes/<id>/view_<k>.pgm          instance map, 0 background, 1-based
//   <root>/scenes/<id>/view_<k>_mask_<j>.pgm full per-person silhouettes
//   <root>/scenes/<id>/person_<j>.obj        person-local mesh
//   <root>/scenes/<id>/manifest.json

inline std::filesystem::path scene_dir(const std::string& root, int index) {
  return std::filesystem::path(root) / "scenes" / scene_id(index);
}

inline void export_scene(const Scene& scene, const std::string& root) {
  const auto dir = scene_dir(root, scene.spec.index);
  std::filesystem::create_directories(dir);
  const auto views = render_views(scene);
  for (std::size_t k = 0; k < views.size(); ++k) {
    const std::string stem = (dir / ("view_" + std::to_string(k))).string();
    write_pfm(stem + ".pfm", views[k].depth);
    write_pgm(stem + ".pgm", views[k].instances);
    for (std::size_t j = 0; j < scene.figures.size(); ++j) {
      MaskImage mask = views[k].instance_mask[j];
      for (auto& px : mask.pixels) px = px ? 255 : 0;
      write_pgm(stem + "_mask_" + std::to_string(j) + ".pgm", mask);
    }
  }
  for (std::size_t j = 0; j < scene.figures.size(); ++j)
    save_obj((dir / ("person_" + std::to_string(j) + ".obj")).string(),
             scene.figures[j].local_mesh);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("export_scene: cannot write manifest");
  out << scene_manifest(scene).dump(2) << "\n";
}

inline Scene load_scene(const std::string& root, int index) {
  const auto path = scene_dir(root, index) / "manifest.json";
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("load_scene: cannot open " + path.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("load_scene: bad manifest " + path.string() +
                             ": " + e.what());
  }
  return scene_from_manifest(m);
}

}  // namespace crowdrec
