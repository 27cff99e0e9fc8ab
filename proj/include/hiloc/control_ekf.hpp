#pragma once

#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hiloc/geometry.hpp"

namespace hiloc {

struct ControlCommand {
  double t = 0.0;
  double sigma_cmd = 0.0;  // steering angle, rad
  double a_cmd = 0.0;      // commanded acceleration, m/s^2
};

// Coefficients of the identified yaw-rate / acceleration dynamics:
//   r' = (w1/v + w2*v) r + w3 * sigma_cmd
//   a' = w4 * (-a + a_cmd)
struct TruckModelCoeffs {
  double w1 = 0.0;
  double w2 = 0.0;
  double w3 = 0.0;
  double w4 = 0.0;
  double residual_r = 0.0;  // RMS regression residual, yaw-rate channel
  double residual_a = 0.0;  // RMS regression residual, acceleration channel
  std::vector<std::string> unidentifiable;  // features with no excitation, zeroed
};

// Planar vehicle state. phi is the heading measured from the +y axis, so
// forward motion advances (x, y) by (-v sin phi, +v cos phi) per unit time;
// phi itself integrates the yaw rate and is not wrapped.
struct ControlState {
  double t = 0.0;
  double x = 0.0;
  double y = 0.0;
  double v = 0.0;
  double phi = 0.0;
  double r = 0.0;
  double a = 0.0;
  Mat6 P = Mat6::Identity();
};

// Process disturbances enter through the command channels only.
struct ControlNoise {
  double sigma_cmd_std = 0.01;  // rad
  double accel_cmd_std = 0.2;   // m/s^2
};

// Below this speed the w1/v term is evaluated at the guard speed.
inline constexpr double kControlMinSpeed = 1.0;

struct TruckPredictResult {
  ControlState state;
  bool low_speed = false;
};

// One prediction step of the vehicle model plus covariance propagation with
// the analytic Jacobian. dt must lie in (0, 0.05].
TruckPredictResult truck_predict(const ControlState& s, const ControlCommand& cmd,
                                 const TruckModelCoeffs& w, const ControlNoise& noise,
                                 double dt);

// State-transition Jacobian of the prediction step, order (x, y, v, phi, r, a).
Mat6 truck_jacobian(const ControlState& s, const TruckModelCoeffs& w, double dt);

struct ControlMeasurement {
  double t = 0.0;
  double x = 0.0;
  double y = 0.0;
  double v = 0.0;
  double phi = 0.0;
  Eigen::Matrix4d W = Eigen::Matrix4d::Identity();
};

// Linear update on the (x, y, v, phi) channels; the heading innovation is
// wrapped so measurements on either side of +-pi pull the shortest way.
ControlState control_ekf_update(const ControlState& s, const ControlMeasurement& m);

// Projects a navigation pose/velocity into the update's measurement space:
// heading from the attitude, speed from the velocity norm signed by the
// body-frame forward component.
ControlMeasurement project_nav(double t, const Vec3& p, const Mat3& R, const Vec3& v,
                               const Eigen::Matrix4d& W);

// Heading conversions between the vehicle model (angle from +y) and the
// geometry convention (angle from +x).
inline double phi_from_yaw(double yaw) { return wrap_angle(yaw - std::numbers::pi / 2.0); }
inline double yaw_from_phi(double phi) { return wrap_angle(phi + std::numbers::pi / 2.0); }

struct FitSample {
  double t = 0.0;
  double v = 0.0;
  double r = 0.0;
  double a = 0.0;
  double sigma_cmd = 0.0;
  double a_cmd = 0.0;
};

// Identifies (w1..w4) from a driving log by two linear least-squares
// regressions on finite-differenced yaw rate and acceleration, followed by a
// sequential-thresholding pass that zeroes terms contributing less than 5% of
// the target signal. Features with no excitation are zeroed and reported in
// `unidentifiable`; linearly dependent feature sets raise
// IllConditionedFitError naming the dependent features.
TruckModelCoeffs fit_truck_model(const std::vector<FitSample>& log, double dt);

// Two cascaded one-pole sections, zero-initialized; unit DC gain.
class LowPassFilter2 {
 public:
  explicit LowPassFilter2(double cutoff_hz);
  double step(double x, double dt);
  void reset();
  double cutoff_hz() const { return cutoff_hz_; }

 private:
  double cutoff_hz_;
  double y1_ = 0.0;
  double y2_ = 0.0;
};

std::vector<double> lowpass2_apply(double cutoff_hz, const std::vector<double>& signal,
                                   double dt);

// Delay of `estimate` relative to `reference` (positive when the estimate
// lags), from the peak of the normalized cross-correlation with parabolic
// sub-sample refinement. Throws UnreliableDelayError when the peak
// correlation is below 0.5.
double measure_delay(const std::vector<double>& reference, const std::vector<double>& estimate,
                     double dt, double max_lag = 1.0);

}  // namespace hiloc
