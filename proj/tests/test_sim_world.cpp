#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <vector>

#include "hiloc/clip.hpp"
#include "hiloc/control_ekf.hpp"
#include "hiloc/errors.hpp"
#include "hiloc/eskf.hpp"
#include "hiloc/geometry.hpp"
#include "hiloc/pointcloud.hpp"
#include "hiloc/sim_world.hpp"

using namespace hiloc;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDeg = kPi / 180.0;

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("hiloc_sim_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

WorldSpec flat_spec() {
  WorldSpec ws;
  ws.grade_amp = 0.0;
  ws.bank_amp = 0.0;
  ws.grass_height = 0.0;
  ws.grass_rough = 0.0;
  return ws;
}

WorldSpec bench_spec(bool walls) {
  WorldSpec ws;
  ws.structures.pole_spacing = 50.0;
  ws.structures.barriers = true;
  ws.structures.sound_walls = walls;
  return ws;
}

LidarModel coarse_lidar() {
  LidarModel lm;
  lm.rings = 16;
  lm.azimuths = 300;
  return lm;
}

Pose road_pose(const World& w, double s, double ell, double height) {
  const Vec2 xy = w.road_to_world(s, ell);
  Pose p;
  p.p = Vec3(xy.x(), xy.y(), w.road_surface_z(s, ell) + height);
  p.R = rot_z(w.road_heading(s));
  return p;
}

bool clouds_equal(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.points[i] != b.points[i] || a.intensity[i] != b.intensity[i]) return false;
  }
  return true;
}

// Ray azimuth index of a body-frame return; exact because range noise acts
// along the ray direction.
int azimuth_index(const Vec3& p_body, int azimuths) {
  const double psi = std::atan2(p_body.y(), p_body.x());
  const auto k = static_cast<long long>(std::llround(psi / (2.0 * kPi / azimuths)));
  return static_cast<int>(((k % azimuths) + azimuths) % azimuths);
}

bool sector_contains(const std::array<double, 2>& sec, double psi) {
  return psi >= sec[0] && psi <= sec[1];
}

}  // namespace

TEST_CASE("road frame mapping is exact on straight and arc worlds") {
  const World straight = generate_world(flat_spec());
  CHECK(straight.road_to_world(123.25, -4.5) == Vec2(123.25, -4.5));
  CHECK(straight.to_road(77.0, 2.25).s == 77.0);
  CHECK(straight.to_road(77.0, 2.25).ell == 2.25);
  CHECK(straight.road_heading(500.0) == 0.0);

  WorldSpec arc_spec = flat_spec();
  arc_spec.centerline = CenterlineKind::kArc;
  arc_spec.arc_radius = 600.0;
  const World arc = generate_world(arc_spec);

  for (double s : {0.0, 55.5, 400.0, 799.0}) {
    for (double ell : {-7.0, -1.8, 0.0, 3.3, 9.5}) {
      const Vec2 xy = arc.road_to_world(s, ell);
      const RoadPoint rp = arc.to_road(xy.x(), xy.y());
      CHECK(std::abs(rp.s - s) < 1e-8);
      CHECK(std::abs(rp.ell - ell) < 1e-9);
    }
  }

  // Heading matches the numeric tangent of the centerline.
  for (double s : {10.0, 250.0, 790.0}) {
    const double h = arc.road_heading(s);
    const Vec2 d = (arc.road_to_world(s + 1e-5, 0.0) - arc.road_to_world(s - 1e-5, 0.0)) / 2e-5;
    CHECK(std::abs(d.x() - std::cos(h)) < 1e-6);
    CHECK(std::abs(d.y() - std::sin(h)) < 1e-6);
  }

  // s is arclength: summed chord length along the centerline.
  double len = 0.0;
  const int steps = 1600;
  for (int i = 0; i < steps; ++i) {
    const double a = 800.0 * i / steps, b = 800.0 * (i + 1) / steps;
    len += (arc.road_to_world(b, 0.0) - arc.road_to_world(a, 0.0)).norm();
  }
  CHECK(std::abs(len - 800.0) < 0.01);
}

TEST_CASE("world validation rejects degenerate geometry") {
  WorldSpec ws;
  ws.lanes = 0;
  CHECK_THROWS_AS(generate_world(ws), InvalidArgumentError);

  ws = WorldSpec{};
  ws.lane_width = 2.6;
  CHECK_THROWS_AS(generate_world(ws), InvalidArgumentError);

  ws = WorldSpec{};
  ws.length = 50.0;
  CHECK_THROWS_AS(generate_world(ws), InvalidArgumentError);

  ws = WorldSpec{};
  ws.grass_ramp = 0.0;
  CHECK_THROWS_AS(generate_world(ws), InvalidArgumentError);

  ws = WorldSpec{};
  ws.grade_period = 0.5;
  CHECK_THROWS_AS(generate_world(ws), InvalidArgumentError);

  ws = WorldSpec{};
  ws.centerline = CenterlineKind::kArc;
  ws.arc_radius = 90.0;
  CHECK_THROWS_AS(generate_world(ws), InvalidArgumentError);

  // 1600 m of road on a 600 m radius wraps past the usable half circle.
  ws = WorldSpec{};
  ws.centerline = CenterlineKind::kArc;
  ws.arc_radius = 600.0;
  ws.length = 1600.0;
  CHECK_THROWS_AS(generate_world(ws), InvalidArgumentError);
}

TEST_CASE("painted markings and surface regions") {
  const World w = generate_world(WorldSpec{});
  // Defaults: 3 lanes x 3.6 m, edge lines at +-5.15, boundaries at +-1.8,
  // shoulder out to 7.4. Dashes: 3 m painted per 9 m, phase 3.7 per boundary.
  CHECK(w.half_width_left() == 5.4);
  CHECK(w.half_width_right() == 5.4);
  CHECK(w.road_extent(true) == doctest::Approx(7.4));

  CHECK(w.ground_intensity(6.0, 1.8) == 200.0);   // (6 + 3.7) mod 9 = 0.7 < 3
  CHECK(w.ground_intensity(0.0, 1.8) == 40.0);    // 3.7 -> gap
  CHECK(w.ground_intensity(2.0, -1.8) == 200.0);  // (2 + 7.4) mod 9 = 0.4
  CHECK(w.ground_intensity(6.0, -1.8) == 40.0);   // 4.4 -> gap

  for (double s : {1.0, 4.0, 7.3, 300.0}) {
    CHECK(w.ground_intensity(s, 5.15) == 200.0);
    CHECK(w.ground_intensity(s, -5.15) == 200.0);
  }

  CHECK(w.ground_intensity(10.0, 0.0) == 40.0);
  CHECK(w.ground_intensity(10.0, 4.0) == 40.0);
  CHECK(w.ground_intensity(10.0, 6.3) == 55.0);
  CHECK(w.ground_intensity(10.0, -6.3) == 55.0);
  CHECK(w.ground_intensity(10.0, 9.0) == 90.0);

  // Marking width 0.15 -> half width 0.075 around the boundary.
  CHECK(w.ground_intensity(6.0, 1.8 + 0.074) == 200.0);
  CHECK(w.ground_intensity(6.0, 1.8 - 0.074) == 200.0);
  CHECK(w.ground_intensity(6.0, 1.8 + 0.076) == 40.0);
  CHECK(w.ground_intensity(6.0, 1.8 - 0.076) == 40.0);
}

TEST_CASE("botts dots replace interior dashes") {
  WorldSpec ws;
  ws.markings = MarkingPattern::kBottsDots;
  const World w = generate_world(ws);
  CHECK(w.effective_markings() == MarkingPattern::kBottsDots);

  // Dot centers at s = 5 i + 14 j on boundary i, radius 0.1.
  CHECK(w.ground_intensity(19.0, 1.8) == 230.0);
  CHECK(w.ground_intensity(19.05, 1.83) == 230.0);  // inside the disc
  CHECK(w.ground_intensity(19.15, 1.8) == 40.0);    // just outside
  CHECK(w.ground_intensity(12.0, 1.8) == 40.0);     // between dots
  CHECK(w.ground_intensity(24.0, -1.8) == 230.0);
  CHECK(w.ground_intensity(17.0, -1.8) == 40.0);

  // Edge lines stay painted and solid.
  CHECK(w.ground_intensity(19.0, 5.15) == 200.0);
  CHECK(w.ground_intensity(6.0, -5.15) == 200.0);
}

TEST_CASE("terrain profile: grade, bank, grass ramp and roughness") {
  const World flat = generate_world(flat_spec());
  for (double x : {3.0, 111.0, 640.0}) {
    for (double y : {-20.0, -5.0, 0.0, 8.0, 25.0}) {
      CHECK(flat.ground_height(x, y) == 0.0);
    }
  }

  const WorldSpec ws;  // defaults: grade 0.5/310, bank 0.015/170, grass 1.3
  const World w = generate_world(ws);
  const double tau = 2.0 * kPi;
  for (double s : {12.0, 260.0, 555.0}) {
    const double grade = ws.grade_amp * std::sin(tau * s / ws.grade_period);
    const double bank = ws.bank_amp * std::sin(tau * s / ws.bank_period);
    CHECK(w.ground_height(s, 0.0) == w.road_surface_z(s, 0.0));
    CHECK(std::abs(w.road_surface_z(s, 0.0) - grade) < 1e-12);
    CHECK(std::abs(w.ground_height(s, 3.0) - (grade + 3.0 * bank)) < 1e-12);

    // Past the ramp the verge sits a grass height above the road edge, give
    // or take the roughness field.
    const double edge = grade + 7.4 * bank;
    CHECK(std::abs(w.ground_height(s, 11.4) - edge - 1.3) < 0.05);
    const double edge_r = grade - 7.4 * bank;
    CHECK(std::abs(w.ground_height(s, -11.4) - edge_r - 1.3) < 0.05);

    // Monotone climb across the ramp, continuous at the road edge.
    const double z0 = w.ground_height(s, 7.4 + 0.5);
    const double z1 = w.ground_height(s, 7.4 + 1.0);
    const double z2 = w.ground_height(s, 7.4 + 1.5);
    const double z3 = w.ground_height(s, 7.4 + 2.0);
    CHECK(z0 < z1);
    CHECK(z1 < z2);
    CHECK(z2 < z3);
    CHECK(std::abs(w.ground_height(s, 7.399) - w.ground_height(s, 7.401)) < 0.01);
  }

  // Steep-band clearance hints used by the renderer's ray march.
  double margin = -1.0;
  w.ground_height(100.0, 0.0, &margin);
  CHECK(margin == doctest::Approx(6.9));  // to ext - 0.5 = 6.9
  w.ground_height(100.0, 8.0, &margin);
  CHECK(margin == 0.0);  // inside the ramp band
  w.ground_height(100.0, 12.0, &margin);
  CHECK(margin == doctest::Approx(12.0 - 9.9));

  // The arc world realizes the same field in road coordinates.
  WorldSpec arc_spec = ws;
  arc_spec.centerline = CenterlineKind::kArc;
  const World arc = generate_world(arc_spec);
  for (double s : {12.0, 260.0, 555.0}) {
    for (double ell : {0.0, 3.0, -6.0, 10.5}) {
      const Vec2 xy = arc.road_to_world(s, ell);
      CHECK(std::abs(arc.ground_height(xy.x(), xy.y()) - w.ground_height(s, ell)) < 1e-6);
    }
  }
}

TEST_CASE("repavement shifts markings without touching geometry") {
  const World base = generate_world(WorldSpec{});
  ScenarioPerturbation pert;
  pert.kind = ScenarioPerturbation::Kind::kRepavementShift;
  pert.lateral = 0.3;
  pert.longitudinal = 0.5;
  const World shifted = apply_perturbation(base, pert);

  for (double s : {5.0, 80.0, 412.0}) {
    for (double ell : {0.0, 1.8, 5.15, 8.0, 12.0}) {
      CHECK(shifted.ground_height(s, ell) == base.ground_height(s, ell));
    }
  }

  // The old marking position reads asphalt, the shifted one reads paint.
  CHECK(base.ground_intensity(6.0, 1.8) == 200.0);
  CHECK(shifted.ground_intensity(6.0, 1.8) == 40.0);
  CHECK(shifted.ground_intensity(6.5, 2.1) == 200.0);
  CHECK(shifted.ground_intensity(6.5, 5.45) == 200.0);  // edge line moved too

  // Region intensities key off the true lateral position, not the shift.
  CHECK(shifted.ground_intensity(10.0, 6.3) == 55.0);
  CHECK(shifted.ground_intensity(10.0, 9.0) == 90.0);
}

TEST_CASE("mowing lowers the verge and nothing else") {
  const World base = generate_world(WorldSpec{});
  ScenarioPerturbation pert;
  pert.kind = ScenarioPerturbation::Kind::kMowing;
  pert.mow_delta = 1.0;
  pert.mow_band = 9.0;
  const World mowed = apply_perturbation(base, pert);

  for (double s : {5.0, 80.0, 412.0}) {
    // Road and shoulder untouched.
    for (double ell : {0.0, 4.0, 7.0}) {
      CHECK(mowed.ground_height(s, ell) == base.ground_height(s, ell));
    }
    // Interior of the band: grass fully grown (1.3) drops by exactly 1.0.
    for (double ell : {11.0, 14.0, -12.5}) {
      CHECK(mowed.ground_height(s, ell) == doctest::Approx(base.ground_height(s, ell) - 1.0));
    }
    // On the ramp the cut saturates at ground level.
    for (double ell : {7.8, 8.3, 8.9}) {
      const double d = mowed.ground_height(s, ell) - base.ground_height(s, ell);
      CHECK(d <= 0.0);
      CHECK(d >= -1.0 - 1e-12);
    }
    // Beyond the band everything is untouched.
    for (double ell : {16.5, -17.0, 30.0}) {
      CHECK(mowed.ground_height(s, ell) == base.ground_height(s, ell));
    }
    // Intensity is not affected by mowing at all.
    for (double ell : {0.0, 1.8, 6.3, 11.0}) {
      CHECK(mowed.ground_intensity(s, ell) == base.ground_intensity(s, ell));
    }
  }
}

TEST_CASE("dots-to-paint and widening perturbations") {
  WorldSpec ws;
  ws.markings = MarkingPattern::kBottsDots;
  const World dots = generate_world(ws);

  ScenarioPerturbation to_paint;
  to_paint.kind = ScenarioPerturbation::Kind::kBottsDotsToPaint;
  const World painted = apply_perturbation(dots, to_paint);
  CHECK(painted.effective_markings() == MarkingPattern::kPainted);
  CHECK(dots.ground_intensity(19.0, 1.8) == 230.0);
  CHECK(painted.ground_intensity(19.0, 1.8) == 40.0);  // (19+3.7) mod 9 = 4.7
  CHECK(painted.ground_intensity(6.0, 1.8) == 200.0);
  for (double s : {5.0, 80.0}) {
    CHECK(painted.ground_height(s, 3.0) == dots.ground_height(s, 3.0));
  }

  const World base = generate_world(WorldSpec{});
  ScenarioPerturbation widen;
  widen.kind = ScenarioPerturbation::Kind::kRoadWidening;
  widen.widen = 3.6;
  const World wide = apply_perturbation(base, widen);
  CHECK(wide.half_width_left() == 9.0);
  CHECK(wide.half_width_right() == 5.4);

  // Left edge line moves out with the new edge; the old one is paved over.
  CHECK(wide.ground_intensity(6.0, 8.75) == 200.0);
  CHECK(wide.ground_intensity(6.0, 5.15) == 40.0);
  CHECK(wide.ground_intensity(6.0, -5.15) == 200.0);
  // Interior lane boundaries stay put.
  CHECK(wide.ground_intensity(6.0, 1.8) == 200.0);
  CHECK(wide.ground_intensity(0.0, 1.8) == 40.0);
  // What used to be shoulder is asphalt now.
  CHECK(wide.ground_intensity(10.0, 6.3) == 40.0);
  CHECK(wide.ground_intensity(10.0, -6.3) == 55.0);
  // The grass ramp moves out along with the paved extent.
  CHECK(wide.ground_height(100.0, 10.0) != base.ground_height(100.0, 10.0));
  CHECK(wide.ground_height(100.0, -10.0) == base.ground_height(100.0, -10.0));
}

TEST_CASE("perturbation validation") {
  const World base = generate_world(WorldSpec{});
  WorldSpec dspec;
  dspec.markings = MarkingPattern::kBottsDots;
  const World dots = generate_world(dspec);

  ScenarioPerturbation mow;
  mow.kind = ScenarioPerturbation::Kind::kMowing;
  const World mowed = apply_perturbation(base, mow);

  // Only one perturbation per scenario.
  CHECK_THROWS_AS(apply_perturbation(mowed, mow), InvalidArgumentError);

  ScenarioPerturbation bad = mow;
  bad.mow_delta = 1.5;
  CHECK_THROWS_AS(apply_perturbation(base, bad), InvalidArgumentError);
  bad.mow_delta = 0.0;
  CHECK_THROWS_AS(apply_perturbation(base, bad), InvalidArgumentError);

  ScenarioPerturbation rep;
  rep.kind = ScenarioPerturbation::Kind::kRepavementShift;
  rep.lateral = 5.0;
  CHECK_THROWS_AS(apply_perturbation(base, rep), InvalidArgumentError);
  rep.lateral = 0.0;
  rep.longitudinal = 6.0;
  CHECK_THROWS_AS(apply_perturbation(base, rep), InvalidArgumentError);

  ScenarioPerturbation paint;
  paint.kind = ScenarioPerturbation::Kind::kBottsDotsToPaint;
  CHECK_THROWS_AS(apply_perturbation(base, paint), InvalidArgumentError);
  CHECK_NOTHROW(apply_perturbation(dots, paint));

  ScenarioPerturbation widen;
  widen.kind = ScenarioPerturbation::Kind::kRoadWidening;
  widen.widen = 0.0;
  CHECK_THROWS_AS(apply_perturbation(base, widen), InvalidArgumentError);
  widen.widen = 8.0;
  CHECK_THROWS_AS(apply_perturbation(base, widen), InvalidArgumentError);
}

TEST_CASE("occlusion masks per role") {
  ScenarioPerturbation occ;
  occ.kind = ScenarioPerturbation::Kind::kOcclusion;

  occ.occlusion = ScenarioPerturbation::Occlusion::kOneSide;
  CHECK(occlusion_mask(occ, ClipRole::kMapping).empty());
  auto m = occlusion_mask(occ, ClipRole::kTest);
  REQUIRE(m.size() == 1);
  CHECK(m[0][0] == doctest::Approx(60.0 * kDeg));
  CHECK(m[0][1] == doctest::Approx(120.0 * kDeg));

  occ.occlusion = ScenarioPerturbation::Occlusion::kSandwich;
  CHECK(occlusion_mask(occ, ClipRole::kMapping).empty());
  m = occlusion_mask(occ, ClipRole::kTest);
  REQUIRE(m.size() == 2);
  CHECK(m[1][0] == doctest::Approx(-120.0 * kDeg));
  CHECK(m[1][1] == doctest::Approx(-60.0 * kDeg));

  occ.occlusion = ScenarioPerturbation::Occlusion::kMapSideOnboardOther;
  m = occlusion_mask(occ, ClipRole::kMapping);
  REQUIRE(m.size() == 1);
  CHECK(m[0][0] == doctest::Approx(60.0 * kDeg));
  m = occlusion_mask(occ, ClipRole::kTest);
  REQUIRE(m.size() == 1);
  CHECK(m[0][0] == doctest::Approx(-120.0 * kDeg));

  ScenarioPerturbation none;
  CHECK(occlusion_mask(none, ClipRole::kMapping).empty());
  CHECK(occlusion_mask(none, ClipRole::kTest).empty());
}

TEST_CASE("flat-world scan matches the analytic ray count") {
  const World w = generate_world(flat_spec());
  const LidarModel lm;
  Pose sensor;
  sensor.p = Vec3(400.0, 0.0, 2.0);
  const PointCloud pc = render_scan(w, sensor, lm, {}, 77);

  // On level ground every downward ring either hits at 2/|sin e| on all
  // azimuths or is entirely out of range.
  std::size_t wet_rings = 0;
  for (int j = 0; j < lm.rings; ++j) {
    const double elev =
        (lm.elev_min_deg + (lm.elev_max_deg - lm.elev_min_deg) * j / (lm.rings - 1)) * kDeg;
    const double se = std::sin(elev);
    if (se >= 0.0) continue;
    const double t = 2.0 / -se;
    if (t >= lm.min_range && t < lm.max_range) ++wet_rings;
  }
  CHECK(wet_rings > 50);
  CHECK(pc.size() == wet_rings * static_cast<std::size_t>(lm.azimuths));

  for (std::size_t i = 0; i < pc.size(); ++i) {
    CHECK(std::abs(pc.points[i].z() + 2.0) < 0.08);
    CHECK(pc.intensity[i] >= 0.0);
    CHECK(pc.intensity[i] <= 255.0);
  }
}

TEST_CASE("scan determinism and mask subsetting") {
  const World w = generate_world(bench_spec(false));
  const Pose sensor = road_pose(w, 400.0, 0.0, 2.0);
  const LidarModel lm;

  const PointCloud a = render_scan(w, sensor, lm, {}, 9);
  const PointCloud b = render_scan(w, sensor, lm, {}, 9);
  CHECK(clouds_equal(a, b));

  const PointCloud c = render_scan(w, sensor, lm, {}, 10);
  CHECK(!clouds_equal(a, c));
  CHECK(a.size() == c.size());  // same geometry, different noise

  // Masked render = unmasked render minus exactly the masked rays' returns.
  const AzimuthMask mask{{60.0 * kDeg, 120.0 * kDeg}, {-120.0 * kDeg, -60.0 * kDeg}};
  const PointCloud masked = render_scan(w, sensor, lm, mask, 9);
  const double az_step = 2.0 * kPi / lm.azimuths;
  PointCloud expect;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int idx = azimuth_index(a.points[i], lm.azimuths);
    const double psi = wrap_angle(idx * az_step);
    if (sector_contains(mask[0], psi) || sector_contains(mask[1], psi)) continue;
    expect.push_back(a.points[i], a.intensity[i]);
  }
  CHECK(expect.size() < a.size());
  CHECK(clouds_equal(masked, expect));
}

TEST_CASE("scan candidate budgets after downsampling") {
  for (bool walls : {false, true}) {
    CAPTURE(walls);
    const World w = generate_world(bench_spec(walls));
    const Pose sensor = road_pose(w, 400.0, 0.0, 2.0);
    const PointCloud pc = render_scan(w, sensor, LidarModel{}, {}, 3);

    PointCloud near;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      if (pc.points[i].norm() <= 60.0) near.push_back(pc.points[i], pc.intensity[i]);
    }
    CHECK(downsample_voxel(near, 0.5, 0).size() >= 5000);
    CHECK(downsample_grid_2d(near, 0.1, 0).size() >= 30000);
  }
}

TEST_CASE("structures appear in scans") {
  SUBCASE("poles") {
    WorldSpec ws = flat_spec();
    ws.structures.pole_spacing = 60.0;  // poles at s = 30, 90, ...
    const World w = generate_world(ws);
    Pose sensor;
    sensor.p = Vec3(0.0, 0.0, 2.0);
    const PointCloud pc = render_scan(w, sensor, LidarModel{}, {}, 4);

    int shaft = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const Vec3 p = pc.points[i];  // identity pose: body == world
      if (p.z() < 1.0) continue;    // flat world: anything elevated is a pole
      const double d = std::hypot(p.x() - 30.0, p.y() - 9.0);
      if (d < 0.5) {
        CHECK(d > 0.02);
        CHECK(d < 0.30);
        ++shaft;
      }
    }
    CHECK(shaft >= 3);
  }

  SUBCASE("barriers") {
    const World w = generate_world(bench_spec(false));
    const Pose sensor = road_pose(w, 400.0, 0.0, 2.0);
    const PointCloud pc = render_scan(w, sensor, LidarModel{}, {}, 5);
    int rail = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const Vec3 pw = sensor.R * pc.points[i] + sensor.p;
      const RoadPoint rp = w.to_road(pw.x(), pw.y());
      if (std::abs(std::abs(rp.ell) - 7.7) > 0.15) continue;
      const double above = pw.z() - w.road_surface_z(rp.s, std::clamp(rp.ell, -7.4, 7.4));
      if (above > 0.2 && above < 1.1) ++rail;
    }
    CHECK(rail > 50);
  }

  SUBCASE("bridge deck overhead") {
    WorldSpec ws;
    ws.structures.bridges = {100.0};
    const World w = generate_world(ws);
    const Pose sensor = road_pose(w, 70.0, 0.0, 2.0);
    const PointCloud pc = render_scan(w, sensor, LidarModel{}, {}, 6);
    int overhead = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      if (pc.points[i].z() > 1.5) ++overhead;
    }
    CHECK(overhead > 0);
  }

  SUBCASE("sensor out of range of everything") {
    const World w = generate_world(flat_spec());
    Pose sensor;
    sensor.p = Vec3(400.0, 0.0, 500.0);
    CHECK_THROWS_AS(render_scan(w, sensor, LidarModel{}, {}, 7), EmptyScanError);
  }

  SUBCASE("sensor below the terrain") {
    const World w = generate_world(WorldSpec{});
    Pose sensor;
    sensor.p = Vec3(400.0, 20.0, 0.3);  // buried in the verge
    CHECK_THROWS_AS(render_scan(w, sensor, LidarModel{}, {}, 8), InvalidArgumentError);
  }

  SUBCASE("degenerate ray grid") {
    const World w = generate_world(flat_spec());
    Pose sensor;
    sensor.p = Vec3(400.0, 0.0, 2.0);
    LidarModel lm;
    lm.azimuths = 4;
    CHECK_THROWS_AS(render_scan(w, sensor, lm, {}, 9), InvalidArgumentError);
  }
}

TEST_CASE("botts dots bloom into azimuth neighbors") {
  WorldSpec ws = flat_spec();
  ws.markings = MarkingPattern::kBottsDots;
  const World dots = generate_world(ws);
  Pose sensor;
  sensor.p = Vec3(40.0, 0.0, 2.0);
  const LidarModel lm;
  const PointCloud pc = render_scan(dots, sensor, lm, {}, 12);

  // Group returns by ring (via elevation) and azimuth index.
  auto ring_of = [&](const Vec3& p) {
    const double e = std::asin(std::clamp(p.z() / p.norm(), -1.0, 1.0)) / kDeg;
    return static_cast<int>(std::lround((e - lm.elev_min_deg) / (lm.elev_max_deg - lm.elev_min_deg) *
                                        (lm.rings - 1)));
  };
  std::vector<std::vector<double>> grid(static_cast<std::size_t>(lm.rings),
                                        std::vector<double>(static_cast<std::size_t>(lm.azimuths), -1.0));
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const int r = ring_of(pc.points[i]);
    const int a = azimuth_index(pc.points[i], lm.azimuths);
    if (r >= 0 && r < lm.rings) grid[static_cast<std::size_t>(r)][static_cast<std::size_t>(a)] = pc.intensity[i];
  }

  int blooms = 0;
  for (int r = 0; r < lm.rings; ++r) {
    for (int a = 0; a < lm.azimuths; ++a) {
      const double v = grid[static_cast<std::size_t>(r)][static_cast<std::size_t>(a)];
      if (v < 215.0) continue;  // a dot return
      for (int nb : {(a + lm.azimuths - 1) % lm.azimuths, (a + 1) % lm.azimuths}) {
        const double nv = grid[static_cast<std::size_t>(r)][static_cast<std::size_t>(nb)];
        if (nv >= 170.0 && nv <= 212.0) ++blooms;
      }
    }
  }
  CHECK(blooms >= 1);

  // A painted world never produces intensities near the dot level.
  const World painted = generate_world(flat_spec());
  const PointCloud pp = render_scan(painted, sensor, lm, {}, 12);
  CHECK(*std::max_element(pp.intensity.begin(), pp.intensity.end()) <= 214.0);
}

TEST_CASE("straight-and-level clip produces quiet channels") {
  const World w = generate_world(flat_spec());
  TrajectorySpec traj;
  traj.s0 = 40.0;
  traj.duration = 2.0;
  traj.speed = 20.0;
  traj.speed_amp = 0.0;
  traj.weave_amp = 0.0;
  const ClipNoise quiet{0.0, 0.0, 0.0, 0.0};
  const Clip clip = generate_clip(w, traj, coarse_lidar(), ClipRates{}, ScenarioPerturbation{},
                                  ClipRole::kMapping, nominal_truck_coeffs(), quiet, 5);

  for (const ImuSample& s : clip.imu) {
    CHECK(s.gyro.norm() < 1e-9);
    CHECK((s.accel - Vec3(0.0, 0.0, 9.80665)).norm() < 1e-7);
  }
  for (const CommandSample& c : clip.commands) {
    CHECK(std::abs(c.steer) < 1e-6);
    CHECK(std::abs(c.accel) < 1e-5);
  }
  for (const GtSample& g : clip.gt) {
    CHECK(g.pose.p.z() == 2.0);
    CHECK(std::abs(g.velocity.norm() - 20.0) < 1e-9);
    CHECK(std::abs(g.velocity.y()) < 1e-9);
  }
  CHECK(clip.frame_count() == 20);
}

TEST_CASE("imu replay reproduces ground truth") {
  const World w = generate_world(WorldSpec{});
  TrajectorySpec traj;
  traj.duration = 6.0;
  traj.speed = 23.0;
  const ClipNoise quiet{0.0, 0.0, 0.0, 0.0};
  const Clip clip = generate_clip(w, traj, coarse_lidar(), ClipRates{}, ScenarioPerturbation{},
                                  ClipRole::kMapping, nominal_truck_coeffs(), quiet, 7);

  EskfState st;
  st.t = 0.0;
  st.p = clip.gt[0].pose.p;
  st.v = clip.gt[0].velocity;
  st.R = clip.gt[0].pose.R;

  double max_p = 0.0, max_v = 0.0, max_r = 0.0;
  for (std::size_t k = 0; k < clip.imu.size(); ++k) {
    const double dt = clip.imu[k].t - st.t;
    st = ins_predict(st, clip.imu[k], dt);
    const GtSample& g = clip.gt[k + 1];
    max_p = std::max(max_p, (st.p - g.pose.p).norm());
    max_v = std::max(max_v, (st.v - g.velocity).norm());
    max_r = std::max(max_r, log_so3(g.pose.R.transpose() * st.R).norm());
  }
  CAPTURE(max_p);
  CAPTURE(max_v);
  CAPTURE(max_r);
  CHECK(max_p < 1e-6);
  CHECK(max_v < 1e-8);
  CHECK(max_r < 1e-9);
}

TEST_CASE("command replay reproduces the model channels") {
  const World w = generate_world(WorldSpec{});
  TrajectorySpec traj;
  traj.duration = 6.0;
  traj.speed = 23.0;
  const ClipNoise quiet{0.0, 0.0, 0.0, 0.0};
  const TruckModelCoeffs coeffs = nominal_truck_coeffs();
  const Clip clip = generate_clip(w, traj, coarse_lidar(), ClipRates{}, ScenarioPerturbation{},
                                  ClipRole::kMapping, coeffs, quiet, 7);

  const double dt = 0.01;
  const std::size_t N = clip.commands.size();
  std::vector<double> yaw(N + 2), spd(N + 2);
  // One sample beyond the command horizon exists in gt; the yaw rate at the
  // last command tick needs it.
  REQUIRE(clip.gt.size() == N + 1);
  for (std::size_t k = 0; k <= N; ++k) {
    yaw[k] = std::atan2(clip.gt[k].velocity.y(), clip.gt[k].velocity.x());
    spd[k] = clip.gt[k].velocity.norm();
    CHECK(std::abs(wrap_angle(yaw_of(clip.gt[k].pose.R) - yaw[k])) < 1e-12);
  }

  ControlState cs;
  cs.t = 0.0;
  cs.x = clip.gt[0].pose.p.x();
  cs.y = clip.gt[0].pose.p.y();
  cs.v = spd[0];
  cs.phi = phi_from_yaw(yaw[0]);
  cs.r = wrap_angle(yaw[1] - yaw[0]) / dt;
  cs.a = (spd[1] - spd[0]) / dt;

  double max_v = 0.0, max_phi = 0.0, max_r = 0.0, max_xy = 0.0;
  for (std::size_t k = 0; k < N; ++k) {
    ControlCommand cmd;
    cmd.t = clip.commands[k].t;
    cmd.sigma_cmd = clip.commands[k].steer;
    cmd.a_cmd = clip.commands[k].accel;
    const TruckPredictResult res = truck_predict(cs, cmd, coeffs, ControlNoise{}, dt);
    CHECK(!res.low_speed);
    cs = res.state;

    max_v = std::max(max_v, std::abs(cs.v - spd[k + 1]));
    max_phi = std::max(max_phi, std::abs(wrap_angle(cs.phi - phi_from_yaw(yaw[k + 1]))));
    if (k + 2 <= N) {
      max_r = std::max(max_r, std::abs(cs.r - wrap_angle(yaw[k + 2] - yaw[k + 1]) / dt));
    }
    max_xy = std::max(max_xy, std::hypot(cs.x - clip.gt[k + 1].pose.p.x(),
                                         cs.y - clip.gt[k + 1].pose.p.y()));
  }
  CAPTURE(max_v);
  CAPTURE(max_phi);
  CAPTURE(max_r);
  CAPTURE(max_xy);
  CHECK(max_v < 1e-6);
  CHECK(max_phi < 1e-6);
  CHECK(max_r < 1e-6);
  // The planar model cannot represent the vertical component; xy drifts a
  // few millimetres over the clip.
  CHECK(max_xy < 0.05);
}

TEST_CASE("clip shapes, determinism and disk roundtrip") {
  const World w = generate_world(WorldSpec{});
  TrajectorySpec traj;
  traj.duration = 3.0;
  const Clip a = generate_clip(w, traj, coarse_lidar(), ClipRates{}, ScenarioPerturbation{},
                               ClipRole::kMapping, nominal_truck_coeffs(), ClipNoise{}, 42);

  const std::size_t N = 300;
  REQUIRE(a.imu.size() == N);
  REQUIRE(a.commands.size() == N);
  REQUIRE(a.gt.size() == N + 1);
  REQUIRE(a.frame_count() == 30);
  for (std::size_t f = 0; f < a.frame_count(); ++f) {
    CHECK(a.frame_times[f] == static_cast<double>((f + 1) * 10) * 0.01);
    CHECK(a.frame(f).size() > 0);
  }
  for (std::size_t k = 0; k < N; ++k) {
    CHECK(a.imu[k].t == static_cast<double>(k + 1) * 0.01);
    CHECK(a.commands[k].t == static_cast<double>(k) * 0.01);
    CHECK(a.gt[k].t == static_cast<double>(k) * 0.01);
  }

  const Clip b = generate_clip(w, traj, coarse_lidar(), ClipRates{}, ScenarioPerturbation{},
                               ClipRole::kMapping, nominal_truck_coeffs(), ClipNoise{}, 42);
  CHECK(a.imu[7].accel == b.imu[7].accel);
  CHECK(a.commands[13].steer == b.commands[13].steer);
  for (std::size_t f = 0; f < a.frame_count(); ++f) CHECK(clouds_equal(a.frame(f), b.frame(f)));

  const Clip c = generate_clip(w, traj, coarse_lidar(), ClipRates{}, ScenarioPerturbation{},
                               ClipRole::kMapping, nominal_truck_coeffs(), ClipNoise{}, 43);
  CHECK(!clouds_equal(a.frame(0), c.frame(0)));

  TempDir td;
  save_clip(a, td.path);
  const Clip r = load_clip(td.path);
  REQUIRE(r.imu.size() == a.imu.size());
  REQUIRE(r.commands.size() == a.commands.size());
  REQUIRE(r.gt.size() == a.gt.size());
  REQUIRE(r.frame_count() == a.frame_count());
  for (std::size_t k = 0; k < a.imu.size(); ++k) {
    CHECK(r.imu[k].t == a.imu[k].t);
    CHECK(r.imu[k].accel == a.imu[k].accel);
    CHECK(r.imu[k].gyro == a.imu[k].gyro);
    CHECK(r.commands[k].steer == a.commands[k].steer);
    CHECK(r.commands[k].accel == a.commands[k].accel);
  }
  for (std::size_t k = 0; k < a.gt.size(); ++k) {
    CHECK((r.gt[k].pose.p - a.gt[k].pose.p).norm() == 0.0);
    CHECK((r.gt[k].pose.R - a.gt[k].pose.R).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((r.gt[k].velocity - a.gt[k].velocity).norm() == 0.0);
  }
  for (std::size_t f = 0; f < a.frame_count(); ++f) CHECK(clouds_equal(r.frame(f), a.frame(f)));
  CHECK(r.manifest.at("seed").get<std::uint64_t>() == 42);
  CHECK(r.manifest.at("role").get<std::string>() == "mapping");
}

TEST_CASE("clip validation") {
  const World w = generate_world(WorldSpec{});
  const TruckModelCoeffs coeffs = nominal_truck_coeffs();

  ClipRates rates;
  rates.cmd_hz = 50.0;
  CHECK_THROWS_AS(generate_clip(w, TrajectorySpec{}, coarse_lidar(), rates, {},
                                ClipRole::kMapping, coeffs, ClipNoise{}, 1),
                  InvalidArgumentError);
  rates = ClipRates{};
  rates.imu_hz = 105.0;
  rates.cmd_hz = 105.0;
  CHECK_THROWS_AS(generate_clip(w, TrajectorySpec{}, coarse_lidar(), rates, {},
                                ClipRole::kMapping, coeffs, ClipNoise{}, 1),
                  InvalidArgumentError);

  TrajectorySpec traj;
  traj.lane_center = 4.2;
  CHECK_THROWS_AS(generate_clip(w, traj, coarse_lidar(), ClipRates{}, {}, ClipRole::kMapping,
                                coeffs, ClipNoise{}, 1),
                  InvalidArgumentError);

  traj = TrajectorySpec{};
  traj.s0 = 5.0;
  CHECK_THROWS_AS(generate_clip(w, traj, coarse_lidar(), ClipRates{}, {}, ClipRole::kMapping,
                                coeffs, ClipNoise{}, 1),
                  InvalidArgumentError);

  traj = TrajectorySpec{};
  traj.duration = 40.0;  // 25 m/s for 40 s runs off an 800 m road
  CHECK_THROWS_AS(generate_clip(w, traj, coarse_lidar(), ClipRates{}, {}, ClipRole::kMapping,
                                coeffs, ClipNoise{}, 1),
                  InvalidArgumentError);

  traj = TrajectorySpec{};
  traj.duration = 0.5;
  CHECK_THROWS_AS(generate_clip(w, traj, coarse_lidar(), ClipRates{}, {}, ClipRole::kMapping,
                                coeffs, ClipNoise{}, 1),
                  InvalidArgumentError);

  traj = TrajectorySpec{};
  traj.speed = 2.0;
  traj.speed_amp = 1.0;
  CHECK_THROWS_AS(generate_clip(w, traj, coarse_lidar(), ClipRates{}, {}, ClipRole::kMapping,
                                coeffs, ClipNoise{}, 1),
                  InvalidArgumentError);

  traj = TrajectorySpec{};
  traj.speed_amp = 10.0;
  traj.speed_period = 12.0;  // peak |accel| beyond the feasibility cap
  CHECK_THROWS_AS(generate_clip(w, traj, coarse_lidar(), ClipRates{}, {}, ClipRole::kMapping,
                                coeffs, ClipNoise{}, 1),
                  InvalidArgumentError);

  TruckModelCoeffs bad = coeffs;
  bad.w3 = 0.0;
  CHECK_THROWS_AS(generate_clip(w, TrajectorySpec{}, coarse_lidar(), ClipRates{}, {},
                                ClipRole::kMapping, bad, ClipNoise{}, 1),
                  InvalidArgumentError);
}

TEST_CASE("clip roles render different worlds") {
  const World w = generate_world(WorldSpec{});
  TrajectorySpec traj;
  traj.duration = 1.0;
  const LidarModel lm = coarse_lidar();
  const ClipNoise quiet{0.0, 0.0, 0.0, 0.0};
  const TruckModelCoeffs coeffs = nominal_truck_coeffs();

  SUBCASE("repavement changes test intensities only") {
    ScenarioPerturbation rep;
    rep.kind = ScenarioPerturbation::Kind::kRepavementShift;
    rep.lateral = 0.3;

    const Clip map_none = generate_clip(w, traj, lm, ClipRates{}, ScenarioPerturbation{},
                                        ClipRole::kMapping, coeffs, quiet, 21);
    const Clip map_rep = generate_clip(w, traj, lm, ClipRates{}, rep, ClipRole::kMapping,
                                       coeffs, quiet, 21);
    const Clip test_rep = generate_clip(w, traj, lm, ClipRates{}, rep, ClipRole::kTest,
                                        coeffs, quiet, 21);

    // Mapping drives always see the base world.
    for (std::size_t f = 0; f < map_none.frame_count(); ++f) {
      CHECK(clouds_equal(map_none.frame(f), map_rep.frame(f)));
    }
    // The test drive sees identical geometry with moved paint.
    bool intensity_differs = false;
    for (std::size_t f = 0; f < map_none.frame_count(); ++f) {
      const PointCloud& m = map_none.frames[f];
      const PointCloud& t = test_rep.frames[f];
      REQUIRE(m.size() == t.size());
      for (std::size_t i = 0; i < m.size(); ++i) {
        CHECK(m.points[i] == t.points[i]);
        if (m.intensity[i] != t.intensity[i]) intensity_differs = true;
      }
    }
    CHECK(intensity_differs);
  }

  SUBCASE("side occlusion masks opposite sectors per role") {
    ScenarioPerturbation occ;
    occ.kind = ScenarioPerturbation::Kind::kOcclusion;
    occ.occlusion = ScenarioPerturbation::Occlusion::kMapSideOnboardOther;

    const Clip plain = generate_clip(w, traj, lm, ClipRates{}, ScenarioPerturbation{},
                                     ClipRole::kMapping, coeffs, quiet, 22);
    const Clip map_occ = generate_clip(w, traj, lm, ClipRates{}, occ, ClipRole::kMapping,
                                       coeffs, quiet, 22);
    const Clip test_occ = generate_clip(w, traj, lm, ClipRates{}, occ, ClipRole::kTest,
                                        coeffs, quiet, 22);

    const double az_step = 2.0 * kPi / lm.azimuths;
    for (std::size_t f = 0; f < plain.frame_count(); ++f) {
      const PointCloud& m = map_occ.frames[f];
      const PointCloud& t = test_occ.frames[f];
      CHECK(m.size() < plain.frames[f].size());
      CHECK(t.size() < plain.frames[f].size());
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double psi = wrap_angle(azimuth_index(m.points[i], lm.azimuths) * az_step);
        CHECK(!sector_contains({60.0 * kDeg, 120.0 * kDeg}, psi));
      }
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double psi = wrap_angle(azimuth_index(t.points[i], lm.azimuths) * az_step);
        CHECK(!sector_contains({-120.0 * kDeg, -60.0 * kDeg}, psi));
      }
    }
  }
}
