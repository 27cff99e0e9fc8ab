#include "hiloc/sim_world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "hiloc/errors.hpp"
#include "hiloc/rng.hpp"

namespace hiloc {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTau = 2.0 * std::numbers::pi;
inline Vec3 gravity() { return Vec3(0.0, 0.0, -9.80665); }

double smoothstep01(double u) {
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 1.0;
  return u * u * (3.0 - 2.0 * u);
}

inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 33;
  z *= 0xff51afd7ed558ccdULL;
  z ^= z >> 33;
  z *= 0xc4ceb9fe1a85ec53ULL;
  z ^= z >> 33;
  return z;
}

// Smooth lattice noise in [-1, 1], C1 across cell boundaries.
double lattice_value(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  const std::uint64_t h = mix64(seed ^ (static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ULL +
                                        static_cast<std::uint64_t>(iy) * 0xC2B2AE3D27D4EB4FULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

double value_noise(std::uint64_t seed, double u, double v) {
  const double fu = std::floor(u), fv = std::floor(v);
  const auto iu = static_cast<std::int64_t>(fu), iv = static_cast<std::int64_t>(fv);
  const double wu = smoothstep01(u - fu), wv = smoothstep01(v - fv);
  const double a = lattice_value(seed, iu, iv);
  const double b = lattice_value(seed, iu + 1, iv);
  const double c = lattice_value(seed, iu, iv + 1);
  const double d = lattice_value(seed, iu + 1, iv + 1);
  return (a + (b - a) * wu) + ((c + (d - c) * wu) - (a + (b - a) * wu)) * wv;
}

}  // namespace

const char* perturbation_name(ScenarioPerturbation::Kind kind) {
  switch (kind) {
    case ScenarioPerturbation::Kind::kNone: return "none";
    case ScenarioPerturbation::Kind::kRepavementShift: return "repavement-shift";
    case ScenarioPerturbation::Kind::kBottsDotsToPaint: return "botts-dots-to-paint";
    case ScenarioPerturbation::Kind::kRoadWidening: return "road-widening";
    case ScenarioPerturbation::Kind::kMowing: return "mowing";
    case ScenarioPerturbation::Kind::kOcclusion: return "occlusion";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Road frame
// ---------------------------------------------------------------------------

RoadPoint World::to_road(double x, double y) const {
  if (spec_.centerline == CenterlineKind::kStraight) return {x, y};
  const double R = spec_.arc_radius;
  const double dx = x - 0.0, dy = y - R;  // arc center sits at (0, R)
  const double r = std::hypot(dx, dy);
  return {R * std::atan2(dx, -dy), R - r};
}

Vec2 World::road_to_world(double s, double ell) const {
  if (spec_.centerline == CenterlineKind::kStraight) return Vec2(s, ell);
  const double R = spec_.arc_radius;
  const double alpha = s / R;
  return Vec2(0.0, R) + (R - ell) * Vec2(std::sin(alpha), -std::cos(alpha));
}

double World::road_heading(double s) const {
  if (spec_.centerline == CenterlineKind::kStraight) return 0.0;
  return s / spec_.arc_radius;
}

double World::road_surface_z(double s, double ell) const {
  const double grade = spec_.grade_amp * std::sin(kTau * s / spec_.grade_period);
  const double bank = spec_.bank_amp * std::sin(kTau * s / spec_.bank_period);
  return grade + bank * ell;
}

double World::grass_rise(double s, double ell, double road_ext) const {
  (void)s;
  const double lg = std::abs(ell) - road_ext;
  if (lg <= 0.0) return 0.0;
  double rise = spec_.grass_height * smoothstep01(lg / std::max(spec_.grass_ramp, 1e-6));
  if (pert_.kind == ScenarioPerturbation::Kind::kMowing && lg <= pert_.mow_band) {
    rise = std::max(rise - pert_.mow_delta, 0.0);
  }
  return rise;
}

double World::ground_height(double x, double y, double* steep_margin) const {
  const RoadPoint rp = to_road(x, y);
  const bool left = rp.ell >= 0.0;
  const double ext = road_extent(left);
  const double al = std::abs(rp.ell);
  const double clamped = left ? std::min(rp.ell, ext) : std::max(rp.ell, -ext);
  double z = road_surface_z(rp.s, clamped);
  const double lg = al - ext;
  if (lg > 0.0) {
    z += grass_rise(rp.s, rp.ell, ext);
    const double fade = smoothstep01(lg);
    z += spec_.grass_rough * fade * value_noise(spec_.seed, rp.s * 0.5, rp.ell * 0.5);
  }
  if (steep_margin != nullptr) {
    // Clearance to the grass elevation ramp and, when mowed, the band edge.
    auto dist_to = [al](double lo, double hi) {
      if (al < lo) return lo - al;
      if (al > hi) return al - hi;
      return 0.0;
    };
    double m = dist_to(ext - 0.5, ext + spec_.grass_ramp + 0.5);
    if (pert_.kind == ScenarioPerturbation::Kind::kMowing) {
      m = std::min(m, dist_to(ext + pert_.mow_band - 0.5, ext + pert_.mow_band + 0.5));
    }
    *steep_margin = m;
  }
  return z;
}

MarkingPattern World::effective_markings() const {
  if (pert_.kind == ScenarioPerturbation::Kind::kBottsDotsToPaint) {
    return MarkingPattern::kPainted;
  }
  return spec_.markings;
}

bool World::marking_at(double s, double ell, double* value) const {
  const double half_mark = 0.5 * spec_.marking_width;
  // Solid edge lines inset from both asphalt edges.
  if (std::abs(ell - (half_left_ - 0.25)) <= half_mark ||
      std::abs(ell + (half_right_ - 0.25)) <= half_mark) {
    *value = spec_.marking_intensity;
    return true;
  }
  const double base_half = 0.5 * spec_.lanes * spec_.lane_width;
  const MarkingPattern pattern = effective_markings();
  for (int i = 1; i < spec_.lanes; ++i) {
    const double boundary = base_half - i * spec_.lane_width;
    if (pattern == MarkingPattern::kPainted) {
      if (std::abs(ell - boundary) > half_mark) continue;
      const double phase = s + 3.7 * i;
      const double m = phase - spec_.dash_period * std::floor(phase / spec_.dash_period);
      if (m < spec_.dash_on) {
        *value = spec_.marking_intensity;
        return true;
      }
    } else {
      const double phase = 5.0 * i;
      const double j = std::round((s - phase) / spec_.dot_spacing);
      const double ds = s - (phase + j * spec_.dot_spacing);
      const double dl = ell - boundary;
      if (ds * ds + dl * dl <= spec_.dot_radius * spec_.dot_radius) {
        *value = spec_.dot_intensity;
        return true;
      }
    }
  }
  return false;
}

double World::ground_intensity(double x, double y) const {
  const RoadPoint rp = to_road(x, y);
  double ms = rp.s, mell = rp.ell;
  if (pert_.kind == ScenarioPerturbation::Kind::kRepavementShift) {
    ms -= pert_.longitudinal;
    mell -= pert_.lateral;
  }
  double v = 0.0;
  if (marking_at(ms, mell, &v)) return v;
  const bool left = rp.ell >= 0.0;
  const double al = std::abs(rp.ell);
  const double hw = left ? half_left_ : half_right_;
  if (al <= hw) return spec_.asphalt_intensity;
  if (al <= hw + spec_.shoulder_width) return spec_.shoulder_intensity;
  return spec_.grass_intensity;
}

// ---------------------------------------------------------------------------
// World construction
// ---------------------------------------------------------------------------

void World::rebuild() {
  const double base_half = 0.5 * spec_.lanes * spec_.lane_width;
  half_left_ = base_half;
  half_right_ = base_half;
  if (pert_.kind == ScenarioPerturbation::Kind::kRoadWidening) half_left_ += pert_.widen;

  poles_.clear();
  boxes_.clear();
  const StructureSpec& st = spec_.structures;

  if (st.pole_spacing > 0.0) {
    for (double s = 0.5 * st.pole_spacing; s <= spec_.length; s += st.pole_spacing) {
      for (double side : {1.0, -1.0}) {
        const Vec2 c = road_to_world(s, side * st.pole_offset);
        const double z0 = ground_height(c.x(), c.y()) - 0.2;
        poles_.push_back({c, st.pole_radius, z0, z0 + 0.2 + st.pole_height});
      }
    }
  }

  auto add_chain = [&](double offset_from_edge, double height, double half_thick,
                       bool from_road_edge) {
    const double seg = 12.0;
    for (double s = 0.5 * seg; s < spec_.length; s += seg) {
      for (double side : {1.0, -1.0}) {
        const double off =
            from_road_edge ? road_extent(side > 0.0) + offset_from_edge : offset_from_edge;
        const Vec2 c = road_to_world(s, side * off);
        const double h = road_heading(s);
        const double z0 = ground_height(c.x(), c.y()) - 0.1;
        boxes_.push_back({c, std::cos(h), std::sin(h), 0.5 * seg + 0.5, half_thick, z0,
                          z0 + 0.1 + height});
      }
    }
  };
  if (st.barriers) add_chain(0.3, st.barrier_height, 0.07, true);
  if (st.sound_walls) add_chain(st.wall_offset, st.wall_height, 0.15, false);

  for (double sb : st.bridges) {
    const Vec2 c = road_to_world(sb, 0.0);
    const double h = road_heading(sb);
    const double deck_lo = road_surface_z(sb, 0.0) + 5.5;
    const double ext = std::max(road_extent(true), road_extent(false));
    boxes_.push_back({c, std::cos(h), std::sin(h), 5.0, ext + 5.0, deck_lo, deck_lo + 1.0});
    for (double side : {1.0, -1.0}) {
      const Vec2 pc = road_to_world(sb, side * (ext + 3.5));
      const double z0 = ground_height(pc.x(), pc.y()) - 0.2;
      boxes_.push_back({pc, std::cos(h), std::sin(h), 0.7, 0.7, z0, deck_lo});
    }
  }
}

World generate_world(const WorldSpec& spec) {
  if (!(spec.lanes >= 1)) throw InvalidArgumentError("world: need at least one lane");
  if (!(spec.lane_width > 2.6)) {
    throw InvalidArgumentError("world: lane width must exceed the vehicle width");
  }
  if (!(spec.length > 50.0)) throw InvalidArgumentError("world: road too short");
  if (!(spec.grass_height >= 0.0) || !(spec.grass_ramp > 0.0) || !(spec.grass_width > 0.0)) {
    throw InvalidArgumentError("world: invalid grass profile");
  }
  if (!(spec.grade_period > 1.0) || !(spec.bank_period > 1.0)) {
    throw InvalidArgumentError("world: invalid terrain periods");
  }
  if (spec.centerline == CenterlineKind::kArc) {
    if (!(spec.arc_radius >= 100.0)) throw InvalidArgumentError("world: arc radius too small");
    // The sensing margin past both road ends must stay clear of the atan2
    // branch cut, which is where the circle would start self-intersecting.
    if ((spec.length + 140.0) / spec.arc_radius >= 0.9 * kPi) {
      throw InvalidArgumentError("world: arc road wraps around onto itself");
    }
  }
  World w;
  w.spec_ = spec;
  w.rebuild();
  return w;
}

World apply_perturbation(const World& world, const ScenarioPerturbation& pert) {
  if (world.perturbation().kind != ScenarioPerturbation::Kind::kNone) {
    throw InvalidArgumentError("perturbation: world is already perturbed");
  }
  using Kind = ScenarioPerturbation::Kind;
  switch (pert.kind) {
    case Kind::kNone:
    case Kind::kOcclusion:
      return world;  // occlusion is a render-time mask, not a world change
    case Kind::kRepavementShift:
      if (std::abs(pert.lateral) > world.spec().lane_width ||
          std::abs(pert.longitudinal) > 0.6 * world.spec().dash_period) {
        throw InvalidArgumentError("perturbation: repavement shift out of bounds");
      }
      break;
    case Kind::kBottsDotsToPaint:
      if (world.spec().markings != MarkingPattern::kBottsDots) {
        throw InvalidArgumentError("perturbation: base world has no dots to replace");
      }
      break;
    case Kind::kRoadWidening:
      if (!(pert.widen > 0.0) || pert.widen > 2.0 * world.spec().lane_width) {
        throw InvalidArgumentError("perturbation: widening out of bounds");
      }
      break;
    case Kind::kMowing:
      if (!(pert.mow_delta > 0.0) || pert.mow_delta > 1.0) {
        throw InvalidArgumentError("perturbation: mowing depth must be in (0, 1] m");
      }
      if (!(pert.mow_band > 0.0)) throw InvalidArgumentError("perturbation: empty mowing band");
      break;
  }
  World out = world;
  out.pert_ = pert;
  out.rebuild();
  return out;
}

// ---------------------------------------------------------------------------
// Occlusion masks
// ---------------------------------------------------------------------------

namespace {
constexpr std::array<double, 2> kLeftSector{60.0 * kPi / 180.0, 120.0 * kPi / 180.0};
constexpr std::array<double, 2> kRightSector{-120.0 * kPi / 180.0, -60.0 * kPi / 180.0};
}  // namespace

AzimuthMask occlusion_mask(const ScenarioPerturbation& pert, ClipRole role) {
  if (pert.kind != ScenarioPerturbation::Kind::kOcclusion) return {};
  switch (pert.occlusion) {
    case ScenarioPerturbation::Occlusion::kOneSide:
      return role == ClipRole::kTest ? AzimuthMask{kLeftSector} : AzimuthMask{};
    case ScenarioPerturbation::Occlusion::kSandwich:
      return role == ClipRole::kTest ? AzimuthMask{kLeftSector, kRightSector} : AzimuthMask{};
    case ScenarioPerturbation::Occlusion::kMapSideOnboardOther:
      return role == ClipRole::kMapping ? AzimuthMask{kLeftSector} : AzimuthMask{kRightSector};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Scan rendering
// ---------------------------------------------------------------------------

namespace {

struct TerrainQuery {
  const World* world;
  double steep_slope;   // slope bound inside the grass ramp band
  double max_terrain_z;
  double arc_radius;  // infinity for straight worlds

  double height(const Vec3& o, const Vec3& d, double t, double* steep_margin) const {
    return world->ground_height(o.x() + t * d.x(), o.y() + t * d.y(), steep_margin);
  }
};

// Slope bound away from the steep bands: grade, bank, and grass roughness.
constexpr double kGentleSlope = 0.12;

// First intersection of the ray with the terrain height field in
// [t_lo, t_hi], or a negative value when there is none. Newton steps handle
// the gently sloped road and grass plateau; a Lipschitz-bounded march crosses
// the ramp bands, and bracketed regula falsi polishes the crossing.
double ray_terrain(const TerrainQuery& q, const Vec3& o, const Vec3& d, double t_lo,
                   double t_hi) {
  const double dxy = std::hypot(d.x(), d.y());
  if (d.z() > 1e-9) {
    // Rising ray: can only hit terrain while still below the highest ground.
    t_hi = std::min(t_hi, (q.max_terrain_z - o.z()) / d.z());
    if (t_hi <= t_lo) return -1.0;
  }

  // Lateral travel distance over which the gentle slope bound stays valid:
  // stop short of the steep band, allowing for ray curvature in road frame.
  auto gentle_travel = [&](double m) {
    double trav = (m - 0.3) / std::max(dxy, 1e-9);
    if (std::isfinite(q.arc_radius)) {
      trav = std::min(trav, std::sqrt(std::max(m, 0.0) * q.arc_radius) / std::max(dxy, 1e-9));
    }
    return trav;
  };

  double t = t_lo;
  double m = 0.0;
  double f = q.height(o, d, t, &m);
  f = o.z() + t * d.z() - f;
  if (f <= 0.0) return t;  // started at (or inside) the ground

  double ba = -1.0, bb = -1.0, fa = 0.0, fb = 0.0;

  // Newton phase: descending ray over gentle terrain aims straight at the
  // surface; overshoot flips the sign and hands a bracket to the polisher.
  if (d.z() < -0.005) {
    for (int it = 0; it < 10; ++it) {
      const double step = f / -d.z();
      if (step * dxy >= gentle_travel(m) * 0.999) break;
      const double tn = t + step;
      if (tn > t_hi) break;
      double mn = 0.0;
      double fn = q.height(o, d, tn, &mn);
      fn = o.z() + tn * d.z() - fn;
      if (std::abs(fn) < 1e-4) return tn;
      if (fn < 0.0) {
        ba = t;
        fa = f;
        bb = tn;
        fb = fn;
        break;
      }
      if (fn >= f) break;  // not descending toward the surface; march instead
      t = tn;
      f = fn;
      m = mn;
    }
  }

  if (ba < 0.0) {
    while (true) {
      const double gentle = std::max(-d.z(), 0.0) + kGentleSlope * dxy + 1e-4;
      const double steep = std::max(-d.z(), 0.0) + q.steep_slope * dxy + 1e-4;
      const double step =
          std::max({0.25, f / steep, std::min(f / gentle, gentle_travel(m))});
      const double tn = t + step;
      if (tn > t_hi) return -1.0;
      double fn = q.height(o, d, tn, &m);
      fn = o.z() + tn * d.z() - fn;
      if (fn <= 0.0) {
        ba = t;
        fa = f;
        bb = tn;
        fb = fn;
        break;
      }
      t = tn;
      f = fn;
    }
  }

  // Regula falsi (Illinois) on the bracket.
  for (int it = 0; it < 30; ++it) {
    if (bb - ba < 3e-6) break;
    const double tm = bb - fb * (bb - ba) / (fb - fa);
    const double fm = o.z() + tm * d.z() - q.height(o, d, tm, nullptr);
    if (std::abs(fm) < 1e-5) return tm;
    if (fm > 0.0) {
      ba = tm;
      fa = fm;
    } else {
      bb = tm;
      fb = fm;
      fa *= 0.5;  // Illinois: keep the stagnant end moving
    }
  }
  return bb;
}

struct StructureHit {
  double t = -1.0;
};

bool ray_pole(const detail::PoleUprights& p, const Vec3& o, const Vec3& d, double t_lo,
              double t_hi, double* t_out) {
  const double ox = o.x() - p.center.x(), oy = o.y() - p.center.y();
  const double a = d.x() * d.x() + d.y() * d.y();
  if (a < 1e-12) return false;
  const double b = 2.0 * (ox * d.x() + oy * d.y());
  const double c = ox * ox + oy * oy - p.radius * p.radius;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return false;
  const double t = (-b - std::sqrt(disc)) / (2.0 * a);
  if (t < t_lo || t > t_hi) return false;
  const double z = o.z() + t * d.z();
  if (z < p.z0 || z > p.z1) return false;
  *t_out = t;
  return true;
}

bool ray_box(const detail::OrientedBox& bx, const Vec3& o, const Vec3& d, double t_lo,
             double t_hi, double* t_out) {
  // Slab test in the box frame: s along the road heading, l across, z up.
  const double rx = o.x() - bx.center.x(), ry = o.y() - bx.center.y();
  const double os = rx * bx.cos_h + ry * bx.sin_h;
  const double ol = -rx * bx.sin_h + ry * bx.cos_h;
  const double ds = d.x() * bx.cos_h + d.y() * bx.sin_h;
  const double dl = -d.x() * bx.sin_h + d.y() * bx.cos_h;
  const double zc = 0.5 * (bx.z0 + bx.z1), hz = 0.5 * (bx.z1 - bx.z0);

  double tmin = t_lo, tmax = t_hi;
  const double oo[3] = {os, ol, o.z() - zc};
  const double dd[3] = {ds, dl, d.z()};
  const double hh[3] = {bx.half_s, bx.half_ell, hz};
  for (int i = 0; i < 3; ++i) {
    if (std::abs(dd[i]) < 1e-12) {
      if (std::abs(oo[i]) > hh[i]) return false;
      continue;
    }
    double t1 = (-hh[i] - oo[i]) / dd[i];
    double t2 = (hh[i] - oo[i]) / dd[i];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
    if (tmin > tmax) return false;
  }
  *t_out = tmin;
  return true;
}

bool in_mask(const AzimuthMask& mask, double psi) {
  for (const auto& sector : mask) {
    if (psi >= sector[0] && psi <= sector[1]) return true;
  }
  return false;
}

}  // namespace

PointCloud render_scan(const World& world, const Pose& sensor, const LidarModel& lidar,
                       const AzimuthMask& mask, std::uint64_t seed) {
  if (lidar.azimuths < 8 || lidar.rings < 1) {
    throw InvalidArgumentError("render: ray grid too small");
  }
  if (!(lidar.max_range > lidar.min_range) || !(lidar.min_range > 0.0)) {
    throw InvalidArgumentError("render: invalid range limits");
  }
  const double ground_below = world.ground_height(sensor.p.x(), sensor.p.y());
  if (!(sensor.p.z() > ground_below + 0.2)) {
    throw InvalidArgumentError("render: sensor pose is below the terrain");
  }

  const WorldSpec& spec = world.spec();
  TerrainQuery tq;
  tq.world = &world;
  tq.steep_slope =
      1.5 * std::max(spec.grass_height, 0.2) / std::max(spec.grass_ramp, 0.5) + kGentleSlope;
  tq.max_terrain_z = spec.grade_amp + spec.grass_height + spec.grass_rough +
                     spec.bank_amp * std::max(world.road_extent(true), world.road_extent(false)) +
                     0.2;
  tq.arc_radius = spec.centerline == CenterlineKind::kArc
                      ? spec.arc_radius
                      : std::numeric_limits<double>::infinity();

  // Azimuth buckets of candidate structures, left in grid-index space.
  const int A = lidar.azimuths;
  const double az_step = kTau / A;
  const double yaw = yaw_of(sensor.R);
  const std::size_t n_poles = world.poles().size();
  const std::size_t n_struct = n_poles + world.boxes().size();
  std::vector<std::vector<std::int32_t>> buckets(static_cast<std::size_t>(A));
  for (std::size_t idx = 0; idx < n_struct; ++idx) {
    Vec2 c;
    double bound;
    if (idx < n_poles) {
      const auto& p = world.poles()[idx];
      c = p.center;
      bound = p.radius;
    } else {
      const auto& b = world.boxes()[idx - n_poles];
      c = b.center;
      bound = std::hypot(b.half_s, b.half_ell);
    }
    const double dx = c.x() - sensor.p.x(), dy = c.y() - sensor.p.y();
    const double dist = std::hypot(dx, dy);
    if (dist - bound > lidar.max_range) continue;
    if (dist <= bound + 1.0) {
      for (auto& bin : buckets) bin.push_back(static_cast<std::int32_t>(idx));
      continue;
    }
    const double body_az = wrap_angle(std::atan2(dy, dx) - yaw);
    const double half = std::asin(std::min(1.0, bound / dist)) + az_step;
    const auto lo = static_cast<std::int64_t>(std::floor((body_az - half) / az_step));
    const auto hi = static_cast<std::int64_t>(std::ceil((body_az + half) / az_step));
    for (std::int64_t b = lo; b <= hi; ++b) {
      const auto bin = static_cast<std::size_t>(((b % A) + A) % A);
      buckets[bin].push_back(static_cast<std::int32_t>(idx));
    }
  }

  PointCloud out;
  out.points.reserve(static_cast<std::size_t>(A) * static_cast<std::size_t>(lidar.rings) / 2);
  out.intensity.reserve(out.points.capacity());

  const bool bloom = world.effective_markings() == MarkingPattern::kBottsDots;
  std::vector<char> hit(static_cast<std::size_t>(A));
  std::vector<double> hit_t(static_cast<std::size_t>(A));
  std::vector<double> hit_i(static_cast<std::size_t>(A));
  std::vector<Vec3> hit_dir(static_cast<std::size_t>(A));
  std::vector<std::uint64_t> hit_ray(static_cast<std::size_t>(A));

  for (int j = 0; j < lidar.rings; ++j) {
    const double elev =
        lidar.rings == 1
            ? lidar.elev_min_deg * kPi / 180.0
            : (lidar.elev_min_deg +
               (lidar.elev_max_deg - lidar.elev_min_deg) * j / (lidar.rings - 1)) *
                  kPi / 180.0;
    const double ce = std::cos(elev), se = std::sin(elev);
    std::fill(hit.begin(), hit.end(), 0);

    for (int i = 0; i < A; ++i) {
      const double psi = wrap_angle(i * az_step);
      if (in_mask(mask, psi)) continue;
      const Vec3 d_body(ce * std::cos(psi), ce * std::sin(psi), se);
      const Vec3 d = sensor.R * d_body;

      double t_best = lidar.max_range;
      bool found = false;
      for (const std::int32_t idx : buckets[static_cast<std::size_t>(i)]) {
        double t = 0.0;
        const bool ok =
            static_cast<std::size_t>(idx) < n_poles
                ? ray_pole(world.poles()[static_cast<std::size_t>(idx)], sensor.p, d,
                           lidar.min_range, t_best, &t)
                : ray_box(world.boxes()[static_cast<std::size_t>(idx) - n_poles], sensor.p, d,
                          lidar.min_range, t_best, &t);
        if (ok && t < t_best) {
          t_best = t;
          found = true;
        }
      }
      bool terrain = false;
      if (d.z() < 0.1) {
        const double t = ray_terrain(tq, sensor.p, d, lidar.min_range, t_best);
        if (t > 0.0 && t < t_best) {
          t_best = t;
          found = true;
          terrain = true;
        }
      }
      if (!found) continue;

      const Vec3 hit_world = sensor.p + t_best * d;
      const double raw = terrain ? world.ground_intensity(hit_world.x(), hit_world.y())
                                 : spec.structure_intensity;
      const auto ui = static_cast<std::size_t>(i);
      hit[ui] = 1;
      hit_t[ui] = t_best;
      hit_i[ui] = raw;
      hit_dir[ui] = d_body;
      hit_ray[ui] =
          static_cast<std::uint64_t>(j) * static_cast<std::uint64_t>(A) + static_cast<std::uint64_t>(i);
    }

    if (bloom) {
      // High-intensity dot returns bleed into azimuth neighbors at a similar
      // range, widening each dot by roughly one ray on either side.
      std::vector<double> raw(hit_i);
      for (int i = 0; i < A; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        if (!hit[ui]) continue;
        for (const int nb : {(i + A - 1) % A, (i + 1) % A}) {
          const auto un = static_cast<std::size_t>(nb);
          if (!hit[un]) continue;
          if (raw[un] >= spec.dot_intensity - 1.0 && std::abs(hit_t[ui] - hit_t[un]) < 3.0) {
            hit_i[ui] = std::max(hit_i[ui], raw[un] - 40.0);
          }
        }
      }
    }

    for (int i = 0; i < A; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (!hit[ui]) continue;
      Rng rng(Rng::derive(seed, hit_ray[ui]));
      const double range = hit_t[ui] + rng.normal(0.0, lidar.range_noise);
      const double inten =
          std::clamp(hit_i[ui] + rng.normal(0.0, lidar.intensity_noise), 0.0, 255.0);
      out.push_back(hit_dir[ui] * range, inten);
    }
  }

  if (out.size() == 0) throw EmptyScanError("render: no returns within range");
  return out;
}

// ---------------------------------------------------------------------------
// Clip generation
// ---------------------------------------------------------------------------

TruckModelCoeffs nominal_truck_coeffs() {
  TruckModelCoeffs w;
  w.w1 = -5.0;
  w.w2 = -0.02;
  w.w3 = 1.5;
  w.w4 = 2.0;
  return w;
}

Clip generate_clip(const World& world, const TrajectorySpec& traj, const LidarModel& lidar,
                   const ClipRates& rates, const ScenarioPerturbation& pert, ClipRole role,
                   const TruckModelCoeffs& coeffs, const ClipNoise& noise, std::uint64_t seed) {
  if (!(rates.lidar_hz > 0.0) || !(rates.imu_hz >= rates.lidar_hz)) {
    throw InvalidArgumentError("clip: invalid sensor rates");
  }
  const double ratio_f = rates.imu_hz / rates.lidar_hz;
  const auto ratio = static_cast<std::int64_t>(std::llround(ratio_f));
  if (std::abs(ratio_f - static_cast<double>(ratio)) > 1e-9) {
    throw InvalidArgumentError("clip: imu rate must be an integer multiple of the lidar rate");
  }
  if (std::abs(rates.cmd_hz - rates.imu_hz) > 1e-9) {
    throw InvalidArgumentError("clip: commands are synthesized on the imu ticks");
  }
  if (!(traj.duration >= 1.0)) throw InvalidArgumentError("clip: duration too short");
  if (!(traj.speed - std::abs(traj.speed_amp) >= 1.2)) {
    throw InvalidArgumentError("clip: speed profile dips below the model guard");
  }
  const double max_ell = std::abs(traj.lane_center) + std::abs(traj.weave_amp);
  if (max_ell > std::min(world.half_width_left(), world.half_width_right()) - 1.0) {
    throw InvalidArgumentError("clip: trajectory leaves the paved lanes");
  }
  if (!(coeffs.w3 != 0.0) || !(coeffs.w4 > 0.0)) {
    throw InvalidArgumentError("clip: command synthesis needs w3 != 0 and w4 > 0");
  }

  const double dt = 1.0 / rates.imu_hz;
  const auto N = static_cast<std::size_t>(std::llround(traj.duration * rates.imu_hz));

  const double om_s = kTau / traj.speed_period;
  const double om_w = kTau / traj.weave_period;
  auto arc_at = [&](double t) {
    return traj.s0 + traj.speed * t + traj.speed_amp / om_s * (1.0 - std::cos(om_s * t));
  };
  auto path = [&](double t) {
    const double s = arc_at(t);
    const double ell = traj.lane_center + traj.weave_amp * std::sin(om_w * t);
    const Vec2 xy = world.road_to_world(s, ell);
    return Vec3(xy.x(), xy.y(), world.road_surface_z(s, ell) + lidar.sensor_height);
  };
  if (!(traj.s0 >= 10.0) || !(arc_at(traj.duration) <= world.spec().length - 10.0)) {
    throw InvalidArgumentError("clip: trajectory leaves the road extent");
  }

  // Sampled kinematics: analytic velocity by central difference, attitude
  // from the velocity direction plus the surface bank.
  const double fd = 5e-4;
  std::vector<Vec3> vel(N + 2);
  std::vector<Mat3> rot(N + 2);
  std::vector<double> yaw_s(N + 2), spd(N + 2);
  for (std::size_t k = 0; k <= N + 1; ++k) {
    const double t = static_cast<double>(k) * dt;
    const Vec3 v = (path(t + fd) - path(t - fd)) / (2.0 * fd);
    vel[k] = v;
    spd[k] = v.norm();
    yaw_s[k] = std::atan2(v.y(), v.x());
    const double pitch = -std::asin(std::clamp(v.z() / std::max(spd[k], 1e-9), -1.0, 1.0));
    const double bank =
        world.spec().bank_amp * std::sin(kTau * arc_at(t) / world.spec().bank_period);
    rot[k] = rot_z(yaw_s[k]) * rot_y(pitch) * rot_x(std::atan(bank));
  }

  // Ground-truth positions integrate the sampled velocities exactly the way
  // the navigation filter propagates, so noise-free IMU replay is exact.
  std::vector<Vec3> pos(N + 1);
  pos[0] = path(0.0);
  for (std::size_t k = 0; k < N; ++k) pos[k + 1] = pos[k] + vel[k] * dt;

  Clip clip;
  clip.gt.reserve(N + 1);
  for (std::size_t k = 0; k <= N; ++k) {
    clip.gt.push_back({static_cast<double>(k) * dt, Pose{pos[k], rot[k]}, vel[k]});
  }

  Rng rng_acc(Rng::derive(seed, 1));
  Rng rng_gyr(Rng::derive(seed, 2));
  Rng rng_steer(Rng::derive(seed, 3));
  Rng rng_acmd(Rng::derive(seed, 4));

  clip.imu.reserve(N);
  for (std::size_t k = 0; k < N; ++k) {
    const Vec3 a_w = (vel[k + 1] - vel[k]) / dt;
    if (a_w.norm() > 5.0) {
      throw InvalidArgumentError("clip: dynamically infeasible trajectory (|accel| > 5)");
    }
    ImuSample s;
    s.t = static_cast<double>(k + 1) * dt;
    s.accel = rot[k].transpose() * (a_w - gravity()) +
              Vec3(rng_acc.normal(0.0, noise.accel_std), rng_acc.normal(0.0, noise.accel_std),
                   rng_acc.normal(0.0, noise.accel_std));
    s.gyro = log_so3(rot[k].transpose() * rot[k + 1]) / dt +
             Vec3(rng_gyr.normal(0.0, noise.gyro_std), rng_gyr.normal(0.0, noise.gyro_std),
                  rng_gyr.normal(0.0, noise.gyro_std));
    clip.imu.push_back(s);
  }

  // Command channels invert the vehicle model along the ground truth.
  std::vector<double> r(N + 1), ax(N + 1);
  for (std::size_t k = 0; k <= N; ++k) {
    r[k] = wrap_angle(yaw_s[k + 1] - yaw_s[k]) / dt;
    ax[k] = (spd[k + 1] - spd[k]) / dt;
  }
  clip.commands.reserve(N);
  for (std::size_t k = 0; k < N; ++k) {
    const double vg = std::max(spd[k], kControlMinSpeed);
    const double sigma =
        ((r[k + 1] - r[k]) / dt - (coeffs.w1 / vg + coeffs.w2 * spd[k]) * r[k]) / coeffs.w3;
    const double a_cmd = ax[k] + (ax[k + 1] - ax[k]) / (coeffs.w4 * dt);
    CommandSample c;
    c.t = static_cast<double>(k) * dt;
    c.steer = sigma + rng_steer.normal(0.0, noise.steer_std);
    c.accel = a_cmd + rng_acmd.normal(0.0, noise.accel_cmd_std);
    if (std::abs(c.steer) >= 0.6) {
      throw InvalidArgumentError("clip: synthesized steering exceeds the actuator range");
    }
    clip.commands.push_back(c);
  }

  const World render_world =
      role == ClipRole::kTest ? apply_perturbation(world, pert) : world;
  const AzimuthMask mask = occlusion_mask(pert, role);

  const auto frame_count = static_cast<std::size_t>(N / static_cast<std::size_t>(ratio));
  clip.frames.reserve(frame_count);
  clip.frame_times.reserve(frame_count);
  for (std::size_t f = 1; f <= frame_count; ++f) {
    const std::size_t k = f * static_cast<std::size_t>(ratio);
    const Pose pose{pos[k], rot[k]};
    clip.frames.push_back(
        render_scan(render_world, pose, lidar, mask, Rng::derive(seed, 0x100000 + f)));
    clip.frame_times.push_back(static_cast<double>(k) * dt);
  }

  clip.manifest = nlohmann::json{
      {"generator", "sim"},
      {"seed", seed},
      {"role", role == ClipRole::kTest ? "test" : "mapping"},
      {"perturbation", perturbation_name(pert.kind)},
      {"rates",
       {{"lidar_hz", rates.lidar_hz}, {"imu_hz", rates.imu_hz}, {"cmd_hz", rates.cmd_hz}}},
      {"trajectory",
       {{"s0", traj.s0},
        {"duration", traj.duration},
        {"speed", traj.speed},
        {"speed_amp", traj.speed_amp},
        {"lane_center", traj.lane_center},
        {"weave_amp", traj.weave_amp}}},
      {"coeffs", {{"w1", coeffs.w1}, {"w2", coeffs.w2}, {"w3", coeffs.w3}, {"w4", coeffs.w4}}},
  };
  return clip;
}

}  // namespace hiloc
