#include "splatmap/geom.hpp"

#include "splatmap/error.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace splatmap {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::DegenerateTrajectory: return "DegenerateTrajectory";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::DegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptySegment: return "EmptySegment";
    case ErrorCode::SingularCov2d: return "SingularCov2d";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::EmptyTarget: return "EmptyTarget";
    case ErrorCode::NoCorrespondences: return "NoCorrespondences";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MissingViews: return "MissingViews";
  }
  return "Unknown";
}

Mat4 Pose::matrix() const {
  Mat4 T = Mat4::Identity();
  T.topLeftCorner<3, 3>() = rotation_matrix();
  T.topRightCorner<3, 1>() = translation;
  return T;
}

Pose Pose::inverse() const {
  Pose out;
  out.rotation = rotation.conjugate();
  out.translation = -(out.rotation * translation);
  return out;
}

Pose Pose::operator*(const Pose& other) const {
  Pose out;
  out.rotation = (rotation * other.rotation).normalized();
  out.translation = rotation * other.translation + translation;
  return out;
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<     0.0, -v.z(),  v.y(),
         v.z(),    0.0, -v.x(),
        -v.y(),  v.x(),    0.0;
  // clang-format on
  return s;
}

Mat3 so3_exp(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 K = skew(phi);
  if (theta < 1e-8) {
    return Mat3::Identity() + K + 0.5 * K * K;
  }
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + a * K + b * K * K;
}

Vec3 so3_log(const Mat3& R) {
  const Eigen::AngleAxisd aa(R);
  Vec3 v = aa.axis() * aa.angle();
  if (!v.allFinite()) return Vec3::Zero();
  return v;
}

Mat3 so3_left_jacobian(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 K = skew(phi);
  if (theta < 1e-5) {
    return Mat3::Identity() + 0.5 * K + (1.0 / 6.0) * K * K;
  }
  const double t2 = theta * theta;
  return Mat3::Identity() + ((1.0 - std::cos(theta)) / t2) * K +
         ((theta - std::sin(theta)) / (t2 * theta)) * K * K;
}

Pose se3_exp(const Vec6& twist) {
  const Vec3 phi = twist.head<3>();
  const Vec3 rho = twist.tail<3>();
  const Mat3 R = so3_exp(phi);
  const Vec3 t = so3_left_jacobian(phi) * rho;
  Pose out;
  out.rotation = Quat(R).normalized();
  out.translation = t;
  return out;
}

Vec6 se3_log(const Pose& pose) {
  const Vec3 phi = so3_log(pose.rotation_matrix());
  const Vec3 rho = so3_left_jacobian(phi).inverse() * pose.translation;
  Vec6 out;
  out << phi, rho;
  return out;
}

namespace {

// Off-diagonal block of the SE(3) left Jacobian (Barfoot's Q(rho, phi)).
Mat3 se3_q_block(const Vec3& phi, const Vec3& rho) {
  const double theta = phi.norm();
  const Mat3 P = skew(phi);
  const Mat3 Rh = skew(rho);
  const Mat3 PR = P * Rh;
  const Mat3 RP = Rh * P;
  const Mat3 PRP = P * Rh * P;
  const Mat3 PPR = P * P * Rh;
  const Mat3 RPP = Rh * P * P;
  const Mat3 PRPP = PRP * P;
  const Mat3 PPRP = P * PRP;

  double c1, c2, c3;
  const double t2 = theta * theta;
  if (theta < 1e-4) {
    c1 = 1.0 / 6.0 - t2 / 120.0;
    c2 = 1.0 / 24.0 - t2 / 720.0;
    c3 = 1.0 / 120.0 - t2 / 2520.0;
  } else {
    const double s = std::sin(theta);
    const double c = std::cos(theta);
    c1 = (theta - s) / (t2 * theta);
    c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2);
    c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta);
  }
  return 0.5 * Rh + c1 * (PR + RP + PRP) + c2 * (PPR + RPP - 3.0 * PRP) + c3 * (PRPP + PPRP);
}

}  // namespace

Mat6 se3_left_jacobian(const Vec6& xi) {
  const Vec3 phi = xi.head<3>();
  const Vec3 rho = xi.tail<3>();
  const Mat3 J = so3_left_jacobian(phi);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = J;
  out.bottomRightCorner<3, 3>() = J;
  out.bottomLeftCorner<3, 3>() = se3_q_block(phi, rho);
  return out;
}

Mat6 se3_right_jacobian(const Vec6& xi) { return se3_left_jacobian(-xi); }

Mat6 se3_adjoint(const Pose& pose) {
  const Mat3 R = pose.rotation_matrix();
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = R;
  out.bottomRightCorner<3, 3>() = R;
  out.bottomLeftCorner<3, 3>() = skew(pose.translation) * R;
  return out;
}

double rotation_angle(const Quat& q) {
  const double w = std::min(1.0, std::abs(q.normalized().w()));
  const double v = q.normalized().vec().norm();
  return 2.0 * std::atan2(v, w);
}

double rotation_angle(const Quat& a, const Quat& b) { return rotation_angle(a.conjugate() * b); }

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || width < 1 || height < 1) {
    throw Error(ErrorCode::InvalidArgument, "geom", "camera needs fx, fy > 0 and a non-empty image");
  }
}

std::optional<Projection> try_project(const Camera& cam, const Vec3& p_cam) {
  if (!(p_cam.z() > 0.0)) return std::nullopt;
  Projection out;
  out.pixel = {cam.fx * p_cam.x() / p_cam.z() + cam.cx, cam.fy * p_cam.y() / p_cam.z() + cam.cy};
  out.depth = p_cam.z();
  out.in_image = out.pixel.x() >= 0.0 && out.pixel.x() < cam.width && out.pixel.y() >= 0.0 &&
                 out.pixel.y() < cam.height;
  return out;
}

Projection project(const Camera& cam, const Vec3& p_cam) {
  auto p = try_project(cam, p_cam);
  if (!p) throw Error(ErrorCode::NonPositiveDepth, "geom", "point is not in front of the camera");
  return *p;
}

Vec3 unproject(const Camera& cam, const Vec2& pixel, double depth) {
  return {(pixel.x() - cam.cx) / cam.fx * depth, (pixel.y() - cam.cy) / cam.fy * depth, depth};
}

Alignment umeyama_align(std::span<const Pose> est, std::span<const Pose> gt) {
  if (est.size() != gt.size() || est.size() < 3) {
    throw Error(ErrorCode::DegenerateTrajectory, "geom", "need two equal-length sequences of >= 3 poses");
  }
  const auto n = static_cast<double>(est.size());
  Vec3 mu_e = Vec3::Zero(), mu_g = Vec3::Zero();
  for (std::size_t i = 0; i < est.size(); ++i) {
    mu_e += est[i].translation;
    mu_g += gt[i].translation;
  }
  mu_e /= n;
  mu_g /= n;

  Mat3 H = Mat3::Zero();
  Mat3 C = Mat3::Zero();
  for (std::size_t i = 0; i < est.size(); ++i) {
    const Vec3 de = est[i].translation - mu_e;
    const Vec3 dg = gt[i].translation - mu_g;
    H += de * dg.transpose();
    C += de * de.transpose();
  }
  Eigen::JacobiSVD<Mat3> cov_svd(C);
  const Vec3 sv = cov_svd.singularValues();
  if (sv(0) <= 0.0 || sv(1) < 1e-10 * sv(0)) {
    throw Error(ErrorCode::DegenerateTrajectory, "geom", "estimated translations are collinear");
  }

  Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 U = svd.matrixU();
  const Mat3 V = svd.matrixV();
  Mat3 S = Mat3::Identity();
  if ((V * U.transpose()).determinant() < 0.0) S(2, 2) = -1.0;
  const Mat3 R = V * S * U.transpose();
  const Vec3 t = mu_g - R * mu_e;

  Alignment out;
  out.transform = Pose(R, t);
  double sq = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    sq += (R * est[i].translation + t - gt[i].translation).squaredNorm();
  }
  out.ate_rmse = std::sqrt(sq / n);
  return out;
}

void write_trajectory_tsv(const std::filesystem::path& path, std::span<const TimedPose> poses) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "geom", "cannot write " + path.string());
  os.imbue(std::locale::classic());
  os << std::setprecision(17);
  for (const auto& p : poses) {
    const auto& q = p.pose.rotation;
    const auto& t = p.pose.translation;
    os << p.timestamp << '\t' << t.x() << '\t' << t.y() << '\t' << t.z() << '\t' << q.w() << '\t'
       << q.x() << '\t' << q.y() << '\t' << q.z() << '\n';
  }
}

std::vector<TimedPose> read_trajectory_tsv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "geom", "cannot read " + path.string());
  std::vector<TimedPose> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ls.imbue(std::locale::classic());
    double ts, tx, ty, tz, qw, qx, qy, qz;
    if (!(ls >> ts >> tx >> ty >> tz >> qw >> qx >> qy >> qz)) {
      throw Error(ErrorCode::IoError, "geom", "malformed trajectory line in " + path.string());
    }
    out.push_back({ts, Pose(Quat(qw, qx, qy, qz), Vec3(tx, ty, tz))});
  }
  return out;
}

}  // namespace splatmap
