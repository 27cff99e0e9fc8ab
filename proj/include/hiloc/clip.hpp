#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hiloc/geometry.hpp"
#include "hiloc/pointcloud.hpp"

namespace hiloc {

struct ImuSample {
  double t = 0.0;
  Vec3 accel = Vec3::Zero();  // specific force, body frame
  Vec3 gyro = Vec3::Zero();   // angular rate, body frame
};

struct CommandSample {
  double t = 0.0;
  double steer = 0.0;  // commanded steering angle, rad
  double accel = 0.0;  // commanded acceleration, m/s^2
};

struct GtSample {
  double t = 0.0;
  Pose pose;
  Vec3 velocity = Vec3::Zero();  // world frame
};

// A recorded drive: scans at the sensor rate plus dense IMU, command and
// ground truth tables. Frames live either in memory (fresh from the
// simulator) or on disk, loaded one at a time to keep memory flat.
struct Clip {
  nlohmann::json manifest;
  std::vector<ImuSample> imu;
  std::vector<CommandSample> commands;
  std::vector<GtSample> gt;
  std::vector<double> frame_times;

  std::filesystem::path dir;            // set when disk backed
  std::vector<PointCloud> frames;       // set when memory backed

  std::size_t frame_count() const { return frame_times.size(); }
  PointCloud frame(std::size_t i) const;

  // Ground truth pose at an arbitrary time, linear in translation and
  // geodesic in rotation between the two bracketing samples.
  Pose gt_pose_at(double t) const;
  Vec3 gt_velocity_at(double t) const;
};

void save_clip(const Clip& clip, const std::filesystem::path& dir);
Clip load_clip(const std::filesystem::path& dir);

}  // namespace hiloc
