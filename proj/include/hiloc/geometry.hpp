#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace hiloc {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;

Mat3 skew(const Vec3& v);

// Rodrigues formula; second-order Taylor expansion below 1e-6 rad.
Mat3 exp_so3(const Vec3& theta);

// Inverse of exp_so3, returning the canonical rotation vector with
// magnitude in [0, pi]. Near pi the axis is recovered from the largest
// diagonal element, where the off-diagonal formula loses precision.
// Throws InvalidArgumentError when R is not orthonormal to 1e-6.
Vec3 log_so3(const Mat3& R);

// Inverse right Jacobian of exp_so3. Taylor fallback below 1e-4 rad.
// Throws InvalidArgumentError for magnitudes >= pi.
Mat3 right_jacobian_inv(const Vec3& theta);

Mat3 rot_x(double a);
Mat3 rot_y(double a);
Mat3 rot_z(double a);

// Heading of the body x axis in the world xy plane.
double yaw_of(const Mat3& R);

// Wraps to [-pi, pi].
double wrap_angle(double a);

struct Pose {
  Vec3 p = Vec3::Zero();
  Mat3 R = Mat3::Identity();

  static Pose Identity() { return Pose{}; }
};

Vec3 transform_point(const Pose& T, const Vec3& q);
Pose compose(const Pose& a, const Pose& b);
Pose inverse(const Pose& T);
// inverse(a) * b
Pose between(const Pose& a, const Pose& b);

// Linear in translation, geodesic in rotation. alpha in [0, 1].
Pose interpolate(const Pose& a, const Pose& b, double alpha);

}  // namespace hiloc
