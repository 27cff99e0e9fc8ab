#pragma once

#include <deque>

#include "hiloc/clip.hpp"
#include "hiloc/geometry.hpp"
#include "hiloc/measurement.hpp"

namespace hiloc {

using Mat9 = Eigen::Matrix<double, 9, 9>;
using Vec9 = Eigen::Matrix<double, 9, 1>;

// Error state order: (dp, dv, dtheta); dtheta is a body-frame right
// perturbation of the attitude.
struct EskfState {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Mat3 R = Mat3::Identity();
  Mat9 P = Mat9::Identity();

  // Process noise densities: variance growth per second of the velocity and
  // attitude error from accel/gyro white noise.
  double q_accel = 1e-5;  // (m/s^2)^2 * s
  double q_gyro = 1e-7;   // (rad/s)^2 * s
  Vec3 g = Vec3(0.0, 0.0, -9.80665);
};

// Propagates nominal state and covariance by one IMU sample over dt.
// Throws TimingError unless 0 < dt <= 0.05.
EskfState ins_predict(const EskfState& state, const ImuSample& imu, double dt);

// Error-state transition matrix used by ins_predict.
Mat9 ins_transition(const EskfState& state, const ImuSample& imu, double dt);

struct EskfUpdateResult {
  EskfState state;
  bool accepted = false;
  double mahalanobis_sq = 0.0;
};

// Pose update with chi-square gating (99.9%, 6 DoF). A rejected measurement
// leaves the state untouched. The caller must have propagated the state to
// the measurement timestamp.
EskfUpdateResult eskf_update(const EskfState& state, const PoseMeasurement& meas,
                             double gate = 22.46);

// Sequential filter front end. Buffers recent states so a pose measurement
// timestamped up to `horizon` seconds in the past can be applied at its own
// time and the newer IMU samples replayed on top.
class EskfFilter {
 public:
  EskfFilter(const EskfState& init, double horizon = 0.2) : state_(init), horizon_(horizon) {}

  void process_imu(const ImuSample& imu);

  struct MeasurementReport {
    bool accepted = false;
    double mahalanobis_sq = 0.0;
  };
  MeasurementReport process_measurement(const PoseMeasurement& meas);

  const EskfState& state() const { return state_; }
  std::size_t rejected_count() const { return rejected_; }

 private:
  struct HistoryEntry {
    EskfState before;  // state at before.t, prior to applying imu
    ImuSample imu;     // advances the state to imu.t
  };

  EskfState state_;
  double horizon_;
  std::deque<HistoryEntry> history_;
  std::size_t rejected_ = 0;
};

}  // namespace hiloc
