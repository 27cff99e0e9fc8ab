#include "hiloc/geometry.hpp"

#include <cmath>

#include "hiloc/errors.hpp"

namespace hiloc {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Mat3 exp_so3(const Vec3& theta) {
  const double angle = theta.norm();
  const Mat3 s = skew(theta);
  if (angle < 1e-6) {
    return Mat3::Identity() + s + 0.5 * s * s;
  }
  const double a2 = angle * angle;
  return Mat3::Identity() + (std::sin(angle) / angle) * s +
         ((1.0 - std::cos(angle)) / a2) * s * s;
}

Vec3 log_so3(const Mat3& R) {
  const Mat3 defect = R * R.transpose() - Mat3::Identity();
  if (defect.cwiseAbs().maxCoeff() > 1e-6 || std::abs(R.determinant() - 1.0) > 1e-6) {
    throw InvalidArgumentError("log_so3: matrix is not a rotation");
  }

  const double c = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  Vec3 v;  // vee(R - R^T) / 2 = sin(angle) * axis
  v << 0.5 * (R(2, 1) - R(1, 2)), 0.5 * (R(0, 2) - R(2, 0)), 0.5 * (R(1, 0) - R(0, 1));
  // atan2 keeps full precision where acos((trace-1)/2) would lose ~6 digits
  // near 0 and pi.
  const double angle = std::atan2(v.norm(), c);

  if (angle < 1e-8) return v;
  if (angle < M_PI - 1e-4) return (angle / std::sin(angle)) * v;

  // Near pi sin(angle) vanishes; recover the axis from the symmetric part:
  // (R + R^T)/2 = c I + (1 - c) u u^T.
  const Mat3 M = ((R + R.transpose()) * 0.5 - c * Mat3::Identity()) / (1.0 - c);
  int i = 0;
  if (M(1, 1) > M(i, i)) i = 1;
  if (M(2, 2) > M(i, i)) i = 2;
  Vec3 u;
  u(i) = std::sqrt(std::max(M(i, i), 0.0));
  const int j = (i + 1) % 3;
  const int k = (i + 2) % 3;
  u(j) = M(j, i) / u(i);
  u(k) = M(k, i) / u(i);
  u.normalize();
  if (u.dot(v) < 0.0) u = -u;
  if (v.norm() < 1e-12) {
    // Angle is pi to machine precision; both signs are valid, pick one.
    if (u(0) < 0.0 || (u(0) == 0.0 && (u(1) < 0.0 || (u(1) == 0.0 && u(2) < 0.0)))) {
      u = -u;
    }
  }
  return angle * u;
}

Mat3 right_jacobian_inv(const Vec3& theta) {
  const double angle = theta.norm();
  if (angle >= M_PI) {
    throw InvalidArgumentError("right_jacobian_inv: magnitude must be below pi");
  }
  const Mat3 s = skew(theta);
  double coeff;
  if (angle < 1e-4) {
    coeff = 1.0 / 12.0 + angle * angle / 720.0;
  } else {
    coeff = 1.0 / (angle * angle) -
            (1.0 + std::cos(angle)) / (2.0 * angle * std::sin(angle));
  }
  return Mat3::Identity() + 0.5 * s + coeff * s * s;
}

Mat3 rot_x(double a) { return exp_so3(Vec3(a, 0.0, 0.0)); }
Mat3 rot_y(double a) { return exp_so3(Vec3(0.0, a, 0.0)); }
Mat3 rot_z(double a) { return exp_so3(Vec3(0.0, 0.0, a)); }

double yaw_of(const Mat3& R) { return std::atan2(R(1, 0), R(0, 0)); }

double wrap_angle(double a) {
  const double w = std::remainder(a, 2.0 * M_PI);
  return w;
}

Vec3 transform_point(const Pose& T, const Vec3& q) { return T.R * q + T.p; }

Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.R = a.R * b.R;
  out.p = a.R * b.p + a.p;
  return out;
}

Pose inverse(const Pose& T) {
  Pose out;
  out.R = T.R.transpose();
  out.p = -(out.R * T.p);
  return out;
}

Pose between(const Pose& a, const Pose& b) { return compose(inverse(a), b); }

Pose interpolate(const Pose& a, const Pose& b, double alpha) {
  Pose out;
  out.p = (1.0 - alpha) * a.p + alpha * b.p;
  out.R = a.R * exp_so3(alpha * log_so3(a.R.transpose() * b.R));
  return out;
}

}  // namespace hiloc
