#pragma once

// SE(3)/SO(3) algebra, pinhole camera and trajectory alignment.
//
// Conventions: quaternions are Hamilton, stored (w,x,y,z) when serialized.
// Twists are ordered [rotation; translation]. A Pose maps points from its
// local frame into the parent frame: p_parent = R * p_local + t.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace splatmap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Quat = Eigen::Quaterniond;

struct Pose {
  Quat rotation = Quat::Identity();
  Vec3 translation = Vec3::Zero();

  Pose() = default;
  Pose(const Quat& q, const Vec3& t) : rotation(q.normalized()), translation(t) {}
  Pose(const Mat3& R, const Vec3& t) : rotation(Quat(R).normalized()), translation(t) {}

  static Pose identity() { return {}; }

  Mat3 rotation_matrix() const { return rotation.toRotationMatrix(); }
  Mat4 matrix() const;

  Pose inverse() const;
  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }
  Pose operator*(const Pose& other) const;
};

Mat3 skew(const Vec3& v);

Mat3 so3_exp(const Vec3& phi);
Vec3 so3_log(const Mat3& R);
// Left Jacobian of SO(3).
Mat3 so3_left_jacobian(const Vec3& phi);

Pose se3_exp(const Vec6& twist);
Vec6 se3_log(const Pose& pose);
// Left Jacobian of SE(3) in [rotation; translation] ordering:
// exp(xi + d) ~= exp(J_l(xi) d) * exp(xi).
Mat6 se3_left_jacobian(const Vec6& xi);
Mat6 se3_right_jacobian(const Vec6& xi);
// Adjoint in [rotation; translation] ordering: T exp(d) T^-1 = exp(Ad_T d).
Mat6 se3_adjoint(const Pose& pose);

// Geodesic angle on SO(3), in [0, pi].
double rotation_angle(const Quat& a, const Quat& b);
double rotation_angle(const Quat& q);

struct Camera {
  double fx = 100.0;
  double fy = 100.0;
  double cx = 64.0;
  double cy = 64.0;
  int width = 128;
  int height = 128;

  void validate() const;
  double focal(bool use_mean) const { return use_mean ? 0.5 * (fx + fy) : fx; }
};

struct Projection {
  Vec2 pixel;
  double depth = 0.0;
  bool in_image = false;
};

// Throws NonPositiveDepth for z <= 0.
Projection project(const Camera& cam, const Vec3& p_cam);
// Same as project() but returns nullopt for z <= 0.
std::optional<Projection> try_project(const Camera& cam, const Vec3& p_cam);
Vec3 unproject(const Camera& cam, const Vec2& pixel, double depth);

struct Alignment {
  Pose transform;   // maps estimated positions onto ground truth
  double ate_rmse = 0.0;
};

// Rigid (no scale) least-squares alignment over translations.
Alignment umeyama_align(std::span<const Pose> est, std::span<const Pose> gt);

struct TimedPose {
  double timestamp = 0.0;
  Pose pose;
};

void write_trajectory_tsv(const std::filesystem::path& path, std::span<const TimedPose> poses);
std::vector<TimedPose> read_trajectory_tsv(const std::filesystem::path& path);

}  // namespace splatmap
