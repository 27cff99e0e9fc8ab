#pragma once

#include "hiloc/geometry.hpp"

namespace hiloc {

// Pose with uncertainty as produced by the scan localizer. W is the 6x6
// covariance over (position, body-frame rotation delta), right perturbation.
struct PoseMeasurement {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Mat3 R = Mat3::Identity();
  Mat6 W = Mat6::Identity();
};

}  // namespace hiloc
