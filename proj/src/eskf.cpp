#include "hiloc/eskf.hpp"

#include <Eigen/Cholesky>
#include <cmath>

#include "hiloc/errors.hpp"

namespace hiloc {

Mat9 ins_transition(const EskfState& state, const ImuSample& imu, double dt) {
  Mat9 F = Mat9::Identity();
  F.block<3, 3>(0, 3) = dt * Mat3::Identity();
  F.block<3, 3>(3, 6) = -skew(state.R * imu.accel) * dt;
  F.block<3, 3>(6, 6) = exp_so3(-imu.gyro * dt);
  return F;
}

EskfState ins_predict(const EskfState& state, const ImuSample& imu, double dt) {
  if (!(dt > 0.0) || dt > 0.05) {
    throw TimingError("ins_predict: dt must be in (0, 0.05], got " + std::to_string(dt));
  }

  EskfState out = state;
  out.t = state.t + dt;
  out.p = state.p + state.v * dt;
  out.v = state.v + (state.R * imu.accel + state.g) * dt;
  out.R = state.R * exp_so3(imu.gyro * dt);

  const Mat9 F = ins_transition(state, imu, dt);

  Mat9 Qd = Mat9::Zero();
  Qd.block<3, 3>(3, 3) = state.q_accel * dt * Mat3::Identity();
  Qd.block<3, 3>(6, 6) = state.q_gyro * dt * Mat3::Identity();

  out.P = F * state.P * F.transpose() + Qd;
  out.P = 0.5 * (out.P + out.P.transpose()).eval();
  return out;
}

EskfUpdateResult eskf_update(const EskfState& state, const PoseMeasurement& meas, double gate) {
  Eigen::LLT<Mat6> wllt(meas.W);
  if (wllt.info() != Eigen::Success) {
    throw InvalidArgumentError("eskf_update: measurement covariance is not PSD");
  }

  Vec6 y;
  y.head<3>() = meas.p - state.p;
  const Vec3 theta_rel = log_so3(state.R.transpose() * meas.R);
  y.tail<3>() = theta_rel;

  Eigen::Matrix<double, 6, 9> H = Eigen::Matrix<double, 6, 9>::Zero();
  H.block<3, 3>(0, 0) = Mat3::Identity();
  H.block<3, 3>(3, 6) = right_jacobian_inv(theta_rel);

  const Mat6 S = H * state.P * H.transpose() + meas.W;
  Eigen::LLT<Mat6> sllt(S);
  if (sllt.info() != Eigen::Success) {
    throw InvalidArgumentError("eskf_update: innovation covariance is not PSD");
  }

  EskfUpdateResult result;
  result.mahalanobis_sq = y.dot(sllt.solve(y));
  if (result.mahalanobis_sq > gate) {
    result.state = state;
    result.accepted = false;
    return result;
  }

  const Eigen::Matrix<double, 9, 6> K = sllt.solve(H * state.P).transpose();
  const Vec9 delta = K * y;

  EskfState out = state;
  out.p += delta.head<3>();
  out.v += delta.segment<3>(3);
  out.R = state.R * exp_so3(delta.tail<3>());

  const Mat9 A = Mat9::Identity() - K * H;
  out.P = A * state.P * A.transpose() + K * meas.W * K.transpose();
  out.P = 0.5 * (out.P + out.P.transpose()).eval();

  result.state = out;
  result.accepted = true;
  return result;
}

void EskfFilter::process_imu(const ImuSample& imu) {
  const double dt = imu.t - state_.t;
  history_.push_back({state_, imu});
  state_ = ins_predict(state_, imu, dt);
  while (!history_.empty() && state_.t - history_.front().imu.t > horizon_) {
    history_.pop_front();
  }
}

EskfFilter::MeasurementReport EskfFilter::process_measurement(const PoseMeasurement& meas) {
  constexpr double kTimeEps = 1e-9;

  auto apply = [&](EskfState& s) {
    const EskfUpdateResult r = eskf_update(s, meas);
    if (r.accepted) {
      s = r.state;
    } else {
      ++rejected_;
    }
    return MeasurementReport{r.accepted, r.mahalanobis_sq};
  };

  if (meas.t >= state_.t - kTimeEps) {
    // Measurement at (or ahead of) the filter head: update in place. The
    // caller is expected to have propagated to the scan time already.
    return apply(state_);
  }

  if (history_.empty() || meas.t < history_.front().before.t - kTimeEps) {
    throw TimingError("measurement older than the state buffer");
  }

  // Rewind to the last state at or before the measurement time.
  std::size_t idx = history_.size();
  while (idx > 0 && history_[idx - 1].before.t > meas.t + kTimeEps) --idx;
  // history_[idx - 1].before.t <= meas.t; entries idx.. replay afterwards.
  EskfState s = history_[idx - 1].before;
  std::vector<ImuSample> replay;
  for (std::size_t i = idx - 1; i < history_.size(); ++i) replay.push_back(history_[i].imu);

  MeasurementReport report;
  if (meas.t > s.t + kTimeEps) {
    // Split the first IMU interval at the measurement time.
    s = ins_predict(s, replay.front(), meas.t - s.t);
    report = apply(s);
    s = ins_predict(s, replay.front(), replay.front().t - meas.t);
    replay.erase(replay.begin());
  } else {
    report = apply(s);
  }

  history_.erase(history_.begin() + static_cast<std::ptrdiff_t>(idx - 1), history_.end());
  for (const ImuSample& imu : replay) {
    history_.push_back({s, imu});
    s = ins_predict(s, imu, imu.t - s.t);
  }
  state_ = s;
  return report;
}

}  // namespace hiloc
