#include "hiloc/control_ekf.hpp"

#include <algorithm>
#include <cmath>

#include "hiloc/errors.hpp"

namespace hiloc {

namespace {

void check_dt(double dt) {
  if (!(dt > 0.0 && dt <= 0.05)) {
    throw TimingError("prediction step outside (0, 0.05] s");
  }
}

}  // namespace

TruckPredictResult truck_predict(const ControlState& s, const ControlCommand& cmd,
                                 const TruckModelCoeffs& w, const ControlNoise& noise,
                                 double dt) {
  check_dt(dt);
  TruckPredictResult out;
  out.low_speed = s.v < kControlMinSpeed;
  const double vg = std::max(s.v, kControlMinSpeed);

  ControlState n = s;
  n.t = s.t + dt;
  n.x = s.x - s.v * std::sin(s.phi) * dt;
  n.y = s.y + s.v * std::cos(s.phi) * dt;
  n.v = s.v + s.a * dt;
  n.phi = s.phi + s.r * dt;
  n.r = s.r + ((w.w1 / vg + w.w2 * s.v) * s.r + w.w3 * cmd.sigma_cmd) * dt;
  n.a = s.a + w.w4 * (-s.a + cmd.a_cmd) * dt;

  const Mat6 F = truck_jacobian(s, w, dt);
  // Disturbances act on the commands; map them through the input Jacobian.
  Eigen::Matrix<double, 6, 2> G = Eigen::Matrix<double, 6, 2>::Zero();
  G(4, 0) = w.w3 * dt;
  G(5, 1) = w.w4 * dt;
  const Eigen::Vector2d qd(noise.sigma_cmd_std * noise.sigma_cmd_std,
                           noise.accel_cmd_std * noise.accel_cmd_std);
  Mat6 P = F * s.P * F.transpose() + G * qd.asDiagonal() * G.transpose();
  n.P = 0.5 * (P + P.transpose());
  out.state = n;
  return out;
}

Mat6 truck_jacobian(const ControlState& s, const TruckModelCoeffs& w, double dt) {
  const double vg = std::max(s.v, kControlMinSpeed);
  Mat6 F = Mat6::Identity();
  F(0, 2) = -std::sin(s.phi) * dt;
  F(0, 3) = -s.v * std::cos(s.phi) * dt;
  F(1, 2) = std::cos(s.phi) * dt;
  F(1, 3) = -s.v * std::sin(s.phi) * dt;
  F(2, 5) = dt;
  F(3, 4) = dt;
  const double dvg = s.v >= kControlMinSpeed ? -w.w1 / (vg * vg) : 0.0;
  F(4, 2) = (dvg + w.w2) * s.r * dt;
  F(4, 4) = 1.0 + (w.w1 / vg + w.w2 * s.v) * dt;
  F(5, 5) = 1.0 - w.w4 * dt;
  return F;
}

ControlState control_ekf_update(const ControlState& s, const ControlMeasurement& m) {
  Eigen::Matrix<double, 4, 6> H = Eigen::Matrix<double, 4, 6>::Zero();
  H(0, 0) = 1.0;
  H(1, 1) = 1.0;
  H(2, 2) = 1.0;
  H(3, 3) = 1.0;

  Eigen::Vector4d y;
  y << m.x - s.x, m.y - s.y, m.v - s.v, wrap_angle(m.phi - s.phi);

  const Eigen::Matrix4d S = H * s.P * H.transpose() + m.W;
  Eigen::LLT<Eigen::Matrix4d> llt(S);
  if (llt.info() != Eigen::Success) {
    throw InvalidArgumentError("innovation covariance not positive definite");
  }
  const Eigen::Matrix<double, 6, 4> K = llt.solve(H * s.P).transpose();
  const Vec6 dx = K * y;

  ControlState n = s;
  n.x += dx(0);
  n.y += dx(1);
  n.v += dx(2);
  n.phi += dx(3);
  n.r += dx(4);
  n.a += dx(5);

  const Mat6 IKH = Mat6::Identity() - K * H;
  Mat6 P = IKH * s.P * IKH.transpose() + K * m.W * K.transpose();
  n.P = 0.5 * (P + P.transpose());
  return n;
}

ControlMeasurement project_nav(double t, const Vec3& p, const Mat3& R, const Vec3& v,
                               const Eigen::Matrix4d& W) {
  ControlMeasurement m;
  m.t = t;
  m.x = p.x();
  m.y = p.y();
  const double forward = (R.transpose() * v).x();
  m.v = forward >= 0.0 ? v.norm() : -v.norm();
  m.phi = phi_from_yaw(yaw_of(R));
  m.W = W;
  return m;
}

namespace {

struct ChannelFit {
  Eigen::VectorXd coeffs;   // one entry per feature column, zeroed where dropped
  double rms = 0.0;
  std::vector<int> dead;    // zero-excitation columns
};

// Least squares with a zero-column scan, a rank check on the surviving
// columns, and sequential thresholding of terms contributing less than
// `threshold` of the target RMS.
ChannelFit fit_channel(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                       const std::vector<std::string>& names, double threshold) {
  const int ncol = static_cast<int>(A.cols());
  ChannelFit out;
  out.coeffs = Eigen::VectorXd::Zero(ncol);

  std::vector<int> active;
  for (int j = 0; j < ncol; ++j) {
    if (A.col(j).cwiseAbs().maxCoeff() < 1e-12) {
      out.dead.push_back(j);
    } else {
      active.push_back(j);
    }
  }

  const double b_rms = std::max(std::sqrt(b.squaredNorm() / std::max<int>(1, b.size())), 1e-15);

  while (!active.empty()) {
    Eigen::MatrixXd As(A.rows(), active.size());
    for (size_t j = 0; j < active.size(); ++j) As.col(j) = A.col(active[j]);

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(As);
    qr.setThreshold(1e-6);
    const int rank = static_cast<int>(qr.rank());
    if (rank < static_cast<int>(active.size())) {
      std::vector<std::string> dependent;
      const auto& perm = qr.colsPermutation().indices();
      for (int j = rank; j < static_cast<int>(active.size()); ++j) {
        dependent.push_back(names[active[perm(j)]]);
      }
      throw IllConditionedFitError("feature matrix is rank deficient", dependent);
    }
    const Eigen::VectorXd ws = qr.solve(b);

    // Drop the weakest term below the contribution threshold and refit.
    int drop = -1;
    double worst = threshold;
    for (size_t j = 0; j < active.size(); ++j) {
      const double contrib =
          std::abs(ws(j)) * std::sqrt(As.col(j).squaredNorm() / As.rows()) / b_rms;
      if (contrib < worst) {
        worst = contrib;
        drop = static_cast<int>(j);
      }
    }
    if (drop < 0) {
      for (size_t j = 0; j < active.size(); ++j) out.coeffs(active[j]) = ws(j);
      out.rms = std::sqrt((As * ws - b).squaredNorm() / A.rows());
      return out;
    }
    active.erase(active.begin() + drop);
  }
  out.rms = std::sqrt(b.squaredNorm() / std::max<Eigen::Index>(1, A.rows()));
  return out;
}

}  // namespace

TruckModelCoeffs fit_truck_model(const std::vector<FitSample>& log, double dt) {
  if (log.size() < 2) throw InvalidArgumentError("fit needs at least two samples");
  if (!(dt > 0.0)) throw InvalidArgumentError("fit needs a positive sample interval");
  const int n = static_cast<int>(log.size()) - 1;

  Eigen::MatrixXd Ar(n, 3);
  Eigen::VectorXd br(n);
  Eigen::MatrixXd Aa(n, 1);
  Eigen::VectorXd ba(n);
  for (int i = 0; i < n; ++i) {
    const FitSample& s = log[i];
    const double vg = std::max(s.v, kControlMinSpeed);
    Ar(i, 0) = s.r / vg;
    Ar(i, 1) = s.v * s.r;
    Ar(i, 2) = s.sigma_cmd;
    br(i) = (log[i + 1].r - s.r) / dt;
    Aa(i, 0) = -s.a + s.a_cmd;
    ba(i) = (log[i + 1].a - s.a) / dt;
  }

  const std::vector<std::string> r_names = {"r/v", "v*r", "sigma_cmd"};
  const std::vector<std::string> a_names = {"accel_error"};
  const ChannelFit fr = fit_channel(Ar, br, r_names, 0.05);
  const ChannelFit fa = fit_channel(Aa, ba, a_names, 0.05);

  TruckModelCoeffs w;
  w.w1 = fr.coeffs(0);
  w.w2 = fr.coeffs(1);
  w.w3 = fr.coeffs(2);
  w.w4 = fa.coeffs(0);
  w.residual_r = fr.rms;
  w.residual_a = fa.rms;
  for (int j : fr.dead) w.unidentifiable.push_back(r_names[j]);
  for (int j : fa.dead) w.unidentifiable.push_back(a_names[j]);
  return w;
}

LowPassFilter2::LowPassFilter2(double cutoff_hz) : cutoff_hz_(cutoff_hz) {
  if (!(cutoff_hz > 0.0)) throw InvalidArgumentError("cutoff must be positive");
}

double LowPassFilter2::step(double x, double dt) {
  const double alpha = 1.0 - std::exp(-2.0 * std::numbers::pi * cutoff_hz_ * dt);
  y1_ += alpha * (x - y1_);
  y2_ += alpha * (y1_ - y2_);
  return y2_;
}

void LowPassFilter2::reset() {
  y1_ = 0.0;
  y2_ = 0.0;
}

std::vector<double> lowpass2_apply(double cutoff_hz, const std::vector<double>& signal,
                                   double dt) {
  LowPassFilter2 f(cutoff_hz);
  std::vector<double> out;
  out.reserve(signal.size());
  for (double x : signal) out.push_back(f.step(x, dt));
  return out;
}

double measure_delay(const std::vector<double>& reference, const std::vector<double>& estimate,
                     double dt, double max_lag) {
  if (!(dt > 0.0)) throw InvalidArgumentError("sample interval must be positive");
  const int nr = static_cast<int>(reference.size());
  const int ne = static_cast<int>(estimate.size());
  const int min_overlap = 16;
  if (nr < min_overlap || ne < min_overlap) {
    throw InvalidArgumentError("series too short for delay measurement");
  }
  int K = static_cast<int>(std::lround(max_lag / dt));
  K = std::min(K, std::min(nr, ne) - min_overlap);
  if (K < 1) throw InvalidArgumentError("max_lag too small for the sample interval");

  // corr(k): reference[i] against estimate[i + k]; the peak sits at positive
  // k when the estimate lags the reference.
  std::vector<double> corr(2 * K + 1, 0.0);
  for (int k = -K; k <= K; ++k) {
    const int i0 = std::max(0, -k);
    const int i1 = std::min(nr, ne - k);
    const int m = i1 - i0;
    if (m < min_overlap) continue;
    double sr = 0.0, se = 0.0;
    for (int i = i0; i < i1; ++i) {
      sr += reference[i];
      se += estimate[i + k];
    }
    const double mr = sr / m;
    const double me = se / m;
    double cre = 0.0, crr = 0.0, cee = 0.0;
    for (int i = i0; i < i1; ++i) {
      const double dr = reference[i] - mr;
      const double de = estimate[i + k] - me;
      cre += dr * de;
      crr += dr * dr;
      cee += de * de;
    }
    const double denom = std::sqrt(crr * cee);
    corr[k + K] = denom > 0.0 ? cre / denom : 0.0;
  }

  int best = 0;
  for (int j = 1; j < static_cast<int>(corr.size()); ++j) {
    if (corr[j] > corr[best]) best = j;
  }
  const double peak = corr[best];
  if (peak < 0.5) {
    throw UnreliableDelayError("correlation peak below 0.5", peak);
  }

  double refine = 0.0;
  if (best > 0 && best + 1 < static_cast<int>(corr.size())) {
    const double c0 = corr[best - 1], c1 = corr[best], c2 = corr[best + 1];
    const double denom = c0 - 2.0 * c1 + c2;
    if (std::abs(denom) > 1e-15) refine = 0.5 * (c0 - c2) / denom;
    refine = std::clamp(refine, -0.5, 0.5);
  }
  return (best - K + refine) * dt;
}

}  // namespace hiloc
