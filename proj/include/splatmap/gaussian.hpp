#pragma once

#include "splatmap/geom.hpp"

#include <array>
#include <cmath>
#include <cstdint>

namespace splatmap {

inline constexpr int kMaxShCoeffs = 16;  // degree 3
inline constexpr double kShC0 = 0.28209479177387814;

inline constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

// Eigen vectors are not zeroed by value-initialization.
inline std::array<Vec3, kMaxShCoeffs> zero_sh() {
  std::array<Vec3, kMaxShCoeffs> out;
  out.fill(Vec3::Zero());
  return out;
}

enum class InitSource { Model, Pca, Heuristic };

struct Gaussian {
  Vec3 mean = Vec3::Zero();
  Vec3 log_scale = Vec3::Constant(-3.0);
  Vec4 rotation = Vec4(1.0, 0.0, 0.0, 0.0);  // (w,x,y,z); unit after every update
  double opacity_logit = 0.0;
  std::array<Vec3, kMaxShCoeffs> sh = zero_sh();  // sh[0] is the DC band, RGB per entry
  int segment_id = 0;
  bool frozen = false;
  InitSource source = InitSource::Heuristic;
  std::uint64_t id = 0;

  Quat quat() const { return Quat(rotation(0), rotation(1), rotation(2), rotation(3)).normalized(); }
  void set_quat(const Quat& q) {
    const Quat n = q.normalized();
    rotation = {n.w(), n.x(), n.y(), n.z()};
  }
  Mat3 covariance() const {
    const Mat3 R = quat().toRotationMatrix();
    const Vec3 s2 = (2.0 * log_scale).array().exp();
    return R * s2.asDiagonal() * R.transpose();
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline Vec3 color_to_sh_dc(const Vec3& color) { return (color - Vec3::Constant(0.5)) / kShC0; }
inline Vec3 sh_dc_to_color(const Vec3& dc) { return dc * kShC0 + Vec3::Constant(0.5); }

// Real SH basis values for a unit direction, first sh_coeff_count(degree) entries filled.
// When grad is non-null it receives d(basis)/d(dir) per coefficient.
void sh_basis(int degree, const Vec3& dir, std::array<double, kMaxShCoeffs>& basis,
              std::array<Vec3, kMaxShCoeffs>* grad = nullptr);

}  // namespace splatmap
