#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "hiloc/clip.hpp"
#include "hiloc/control_ekf.hpp"
#include "hiloc/geometry.hpp"
#include "hiloc/pointcloud.hpp"

namespace hiloc {

enum class CenterlineKind { kStraight, kArc };
enum class MarkingPattern { kPainted, kBottsDots };

struct StructureSpec {
  double pole_spacing = 0.0;  // meters along the road; 0 disables poles
  double pole_offset = 9.0;   // lateral distance of pole centers, both sides
  double pole_radius = 0.15;
  double pole_height = 6.0;
  bool barriers = false;  // guard rails along both shoulders
  double barrier_height = 0.9;
  bool sound_walls = false;  // tall roadside walls, both sides
  double wall_offset = 14.0;
  double wall_height = 4.0;
  std::vector<double> bridges;  // arclength positions of overpasses
};

// Analytic road scene. The centerline runs from arclength 0 to `length`;
// `ell` is the signed lateral offset, positive to the left of travel.
struct WorldSpec {
  CenterlineKind centerline = CenterlineKind::kStraight;
  double arc_radius = 600.0;  // arc worlds curve left with this radius
  double length = 800.0;

  int lanes = 3;
  double lane_width = 3.6;

  MarkingPattern markings = MarkingPattern::kPainted;
  double marking_width = 0.15;
  double dash_on = 3.0;      // painted length of an interior dash
  double dash_period = 9.0;  // dash repeat distance
  double dot_spacing = 14.0;
  double dot_radius = 0.1;

  double shoulder_width = 2.0;
  double grass_ramp = 2.0;    // lateral run of the grass elevation ramp
  double grass_height = 1.3;  // fully developed grass band elevation
  double grass_width = 9.0;   // band extent past the shoulder
  double grass_rough = 0.04;  // smooth elevation noise amplitude on grass

  double grade_amp = 0.5;  // vertical road profile, sinusoidal in s
  double grade_period = 310.0;
  double bank_amp = 0.015;  // lateral surface slope, sinusoidal in s
  double bank_period = 170.0;

  double marking_intensity = 200.0;
  double dot_intensity = 230.0;
  double asphalt_intensity = 40.0;
  double shoulder_intensity = 55.0;
  double grass_intensity = 90.0;
  double structure_intensity = 80.0;

  StructureSpec structures;
  std::uint64_t seed = 1;
};

struct ScenarioPerturbation {
  enum class Kind {
    kNone,
    kRepavementShift,
    kBottsDotsToPaint,
    kRoadWidening,
    kMowing,
    kOcclusion,
  };
  enum class Occlusion { kOneSide, kSandwich, kMapSideOnboardOther };

  Kind kind = Kind::kNone;
  double lateral = 0.0;       // repavement: marking shift to the left
  double longitudinal = 0.0;  // repavement: marking shift along travel
  double widen = 3.6;         // widening: extra asphalt on the left side
  double mow_delta = 1.0;     // mowing: elevation removed from the grass
  double mow_band = 9.0;      // mowing: lateral extent past the shoulder
  Occlusion occlusion = Occlusion::kOneSide;
};

const char* perturbation_name(ScenarioPerturbation::Kind kind);

struct RoadPoint {
  double s = 0.0;
  double ell = 0.0;
};

namespace detail {
struct PoleUprights {
  Vec2 center;
  double radius, z0, z1;
};
struct OrientedBox {
  Vec2 center;      // plan-view center
  double cos_h, sin_h;  // plan orientation (road heading at the box)
  double half_s, half_ell, z0, z1;
};
}  // namespace detail

class World {
 public:
  const WorldSpec& spec() const { return spec_; }
  const ScenarioPerturbation& perturbation() const { return pert_; }

  RoadPoint to_road(double x, double y) const;
  Vec2 road_to_world(double s, double ell) const;
  double road_heading(double s) const;

  // Drivable surface height in road coordinates (asphalt and shoulder only,
  // no grass or roughness); used to place the vehicle.
  double road_surface_z(double s, double ell) const;

  // Full terrain height / intensity fields at a world position. The optional
  // out-parameter receives the lateral clearance to the nearest steep terrain
  // band (grass ramp, mowing edge); the renderer's ray march takes long steps
  // while that clearance is large.
  double ground_height(double x, double y, double* steep_margin = nullptr) const;
  double ground_intensity(double x, double y) const;

  double half_width_left() const { return half_left_; }
  double half_width_right() const { return half_right_; }
  double road_extent(bool left) const {
    return (left ? half_left_ : half_right_) + spec_.shoulder_width;
  }
  MarkingPattern effective_markings() const;

  const std::vector<detail::PoleUprights>& poles() const { return poles_; }
  const std::vector<detail::OrientedBox>& boxes() const { return boxes_; }

 private:
  friend World generate_world(const WorldSpec&);
  friend World apply_perturbation(const World&, const ScenarioPerturbation&);

  void rebuild();
  bool marking_at(double s, double ell, double* value) const;
  double grass_rise(double s, double ell, double road_ext) const;

  WorldSpec spec_;
  ScenarioPerturbation pert_;
  double half_left_ = 0.0;
  double half_right_ = 0.0;
  std::vector<detail::PoleUprights> poles_;
  std::vector<detail::OrientedBox> boxes_;
};

// Validates the spec and builds the derived structure primitives. Throws
// InvalidArgumentError on degenerate geometry (self-intersecting arc, lane
// narrower than a vehicle, ...).
World generate_world(const WorldSpec& spec);

// Returns a copy of `world` with one perturbation applied. Occlusion leaves
// the world untouched (it is a render-time mask); the input world must be
// unperturbed.
World apply_perturbation(const World& world, const ScenarioPerturbation& pert);

struct LidarModel {
  int azimuths = 1200;
  int rings = 80;
  double elev_min_deg = -22.0;
  double elev_max_deg = 3.0;
  double min_range = 1.5;
  double max_range = 120.0;
  double range_noise = 0.02;      // 1-sigma, along the ray
  double intensity_noise = 2.0;   // 1-sigma
  double sensor_height = 2.0;     // sensor origin above the road surface
};

// Blocked body-frame azimuth sectors, radians in (-pi, pi].
using AzimuthMask = std::vector<std::array<double, 2>>;

enum class ClipRole { kMapping, kTest };

// Sectors hidden from the sensor for the given pipeline role. Only occlusion
// perturbations produce a non-empty mask; the map_side_onboard_other case
// blocks the left side while mapping and the right side on the test drive.
AzimuthMask occlusion_mask(const ScenarioPerturbation& pert, ClipRole role);

// Casts the fixed azimuth x elevation ray grid from the sensor pose and
// returns body-frame returns with per-point range and intensity noise.
// Deterministic given the seed; rays draw noise from per-ray streams so a
// mask removes points without disturbing the survivors. Throws
// EmptyScanError when nothing is hit.
PointCloud render_scan(const World& world, const Pose& sensor, const LidarModel& lidar,
                       const AzimuthMask& mask, std::uint64_t seed);

struct TrajectorySpec {
  double s0 = 40.0;        // start arclength
  double duration = 60.0;  // seconds
  double speed = 25.0;     // cruise speed, m/s
  double speed_amp = 2.0;  // sinusoidal speed modulation
  double speed_period = 41.0;
  double lane_center = 0.0;  // lateral offset of the driven lane
  double weave_amp = 0.3;    // sinusoidal in-lane weave
  double weave_period = 53.0;
};

struct ClipRates {
  double lidar_hz = 10.0;
  double imu_hz = 100.0;
  double cmd_hz = 100.0;  // must equal imu_hz; commands share the IMU ticks
};

struct ClipNoise {
  double accel_std = 0.02;      // m/s^2, per IMU axis
  double gyro_std = 0.0015;     // rad/s, per IMU axis
  double steer_std = 0.002;     // rad, on synthesized steering commands
  double accel_cmd_std = 0.05;  // m/s^2, on synthesized acceleration commands
};

// Vehicle-model coefficients used when synthesizing command channels.
TruckModelCoeffs nominal_truck_coeffs();

// Drives a smooth lane-following trajectory through the world and emits the
// full sensor record: 10 Hz scans, IMU and command channels at the IMU rate,
// and dense ground truth. Ground truth is constructed so that noise-free IMU
// integration under the navigation filter's discretization reproduces it
// exactly, and noise-free commands reproduce the yaw-rate and acceleration
// channels under the vehicle model. Test clips render from the perturbed
// world; mapping clips always see the base world.
Clip generate_clip(const World& world, const TrajectorySpec& traj, const LidarModel& lidar,
                   const ClipRates& rates, const ScenarioPerturbation& pert, ClipRole role,
                   const TruckModelCoeffs& coeffs, const ClipNoise& noise, std::uint64_t seed);

}  // namespace hiloc
