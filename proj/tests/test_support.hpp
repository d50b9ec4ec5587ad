#pragma once

#include "splatmap/geom.hpp"

#include <random>

namespace splatmap::testing {

inline Vec3 random_vec3(std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

inline Quat random_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Quat q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized();
}

inline Pose random_pose(std::mt19937_64& rng, double extent = 5.0) {
  return Pose(random_quat(rng), random_vec3(rng, -extent, extent));
}

inline double pose_distance(const Pose& a, const Pose& b) {
  return (a.translation - b.translation).norm() + rotation_angle(a.rotation, b.rotation);
}

}  // namespace splatmap::testing
