#include "splatmap/voxel_pca.hpp"

#include "splatmap/error.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace splatmap {

namespace {

VoxelStats decompose(const Vec3& mean, const Mat3& cov, int count) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (cov + cov.transpose()));
  VoxelStats s;
  s.mean = mean;
  s.count = count;
  s.eigenvalues = es.eigenvalues();
  s.eigenvectors = es.eigenvectors();
  if (s.eigenvectors.determinant() < 0.0) s.eigenvectors.col(0) *= -1.0;
  return s;
}

}  // namespace

VoxelKey voxel_index(const Vec3& p, double voxel_size) {
  if (!(voxel_size > 0.0)) throw Error(ErrorCode::InvalidArgument, "voxel_pca", "voxel size must be positive");
  return {static_cast<std::int64_t>(std::floor(p.x() / voxel_size)),
          static_cast<std::int64_t>(std::floor(p.y() / voxel_size)),
          static_cast<std::int64_t>(std::floor(p.z() / voxel_size))};
}

VoxelStats fit_voxel(std::span<const WorldPoint> points, int min_points) {
  if (points.size() < static_cast<std::size_t>(std::max(min_points, 1))) {
    throw Error(ErrorCode::TooFewPoints, "voxel_pca",
                std::to_string(points.size()) + " points, need " + std::to_string(min_points));
  }
  const auto n = static_cast<double>(points.size());
  Vec3 mu = Vec3::Zero();
  for (const auto& p : points) mu += p.position;
  mu /= n;
  Mat3 C = Mat3::Zero();
  for (const auto& p : points) {
    const Vec3 d = p.position - mu;
    C += d * d.transpose();
  }
  C /= n;
  return decompose(mu, C, static_cast<int>(points.size()));
}

GeomClass classify(const VoxelStats& stats, double tau_planar, double tau_linear, bool require_mid_above_tau_p) {
  const double lmin = stats.eigenvalues(0);
  const double lmid = stats.eigenvalues(1);
  const double lmax = stats.eigenvalues(2);
  if (lmin < tau_planar && (!require_mid_above_tau_p || lmid >= tau_planar)) return GeomClass::Planar;
  if (lmax / std::max(lmin, 1e-12) > tau_linear) return GeomClass::Linear;
  return GeomClass::Unreliable;
}

Mat6 descriptor_covariance(std::span<const WorldPoint> points, const VoxelStats& stats, EigenAxis axis) {
  const int k = static_cast<int>(axis);
  const auto n = static_cast<double>(points.size());
  const Mat3& V = stats.eigenvectors;
  const Vec3& lam = stats.eigenvalues;
  for (int m = 0; m < 3; ++m) {
    if (m != k && std::abs(lam(k) - lam(m)) < 1e-10) {
      throw Error(ErrorCode::DegenerateSpectrum, "voxel_pca", "eigenvalue gap below 1e-10");
    }
  }

  // Per-axis 3x3 operators so that f_i^(m) = (p_i - mu)^T * A_m.
  std::array<Mat3, 3> A;
  for (int m = 0; m < 3; ++m) {
    if (m == k) {
      A[m].setZero();
      continue;
    }
    const Vec3 vm = V.col(m);
    const Vec3 vk = V.col(k);
    A[m] = (vm * vk.transpose() + vk * vm.transpose()) / (n * (lam(k) - lam(m)));
  }

  Mat6 sigma = Mat6::Zero();
  Eigen::Matrix<double, 6, 3> J;
  for (const auto& p : points) {
    const Vec3 d = p.position - stats.mean;
    Mat3 F;
    for (int m = 0; m < 3; ++m) F.row(m) = d.transpose() * A[m];
    J.topRows<3>() = V * F;
    J.bottomRows<3>() = Mat3::Identity() / n;
    sigma.noalias() += J * p.covariance * J.transpose();
  }
  return 0.5 * (sigma + sigma.transpose());
}

bool reliability(const Mat6& descriptor_cov, double tau_trace) {
  return descriptor_cov.topLeftCorner<3, 3>().trace() < tau_trace;
}

GeomPrior geom_prior(const VoxelStats& stats, double eigen_floor) {
  Mat3 R;
  R.col(0) = stats.eigenvectors.col(2);
  R.col(1) = stats.eigenvectors.col(1);
  R.col(2) = stats.eigenvectors.col(0);
  if (R.determinant() < 0.0) R.col(2) *= -1.0;

  GeomPrior out;
  out.rotation = Quat(R).normalized();
  out.log_scale = {0.5 * std::log(std::max(stats.eigenvalues(2), eigen_floor)),
                   0.5 * std::log(std::max(stats.eigenvalues(1), eigen_floor)),
                   0.5 * std::log(std::max(stats.eigenvalues(0), eigen_floor))};
  out.reliable = stats.reliable;
  return out;
}

void assess_voxel(std::span<const WorldPoint> points, VoxelStats& stats, const VoxelConfig& cfg) {
  stats.cls = classify(stats, cfg.tau_planar, cfg.tau_linear, cfg.require_mid_above_tau_p);
  stats.reliable = false;
  stats.descriptor_cov.setZero();
  if (stats.cls == GeomClass::Unreliable) return;
  const EigenAxis axis = stats.cls == GeomClass::Planar ? EigenAxis::Min : EigenAxis::Max;
  try {
    stats.descriptor_cov = descriptor_covariance(points, stats, axis);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateSpectrum) throw;
    stats.cls = GeomClass::Unreliable;
    return;
  }
  stats.reliable = reliability(stats.descriptor_cov, cfg.tau_trace);
}

std::vector<GeomPrior> VoxelMap::insert(std::span<const WorldPoint> points) {
  std::vector<VoxelKey> keys;
  keys.reserve(points.size());
  std::vector<VoxelKey> touched;
  for (const auto& p : points) {
    const VoxelKey key = voxel_index(p.position, cfg_.voxel_size);
    keys.push_back(key);
    auto [it, fresh] = voxels_.try_emplace(key);
    Voxel& v = it->second;
    if (cfg_.max_points > 0 && v.points.size() >= static_cast<std::size_t>(cfg_.max_points)) continue;
    if (v.points.empty()) v.origin = p.position;
    const Vec3 d = p.position - v.origin;
    v.sum += d;
    v.sum_outer += d * d.transpose();
    v.points.push_back(p);
    touched.push_back(key);
  }
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
  for (const auto& key : touched) refit(voxels_.at(key));

  std::vector<GeomPrior> out;
  out.reserve(points.size());
  for (const auto& key : keys) out.push_back(voxels_.at(key).prior);
  return out;
}

void VoxelMap::refit(Voxel& v) const {
  v.fitted.reset();
  v.prior = GeomPrior{};
  if (v.points.size() < static_cast<std::size_t>(std::max(cfg_.min_points, 1))) return;
  const auto n = static_cast<double>(v.points.size());
  const Vec3 m = v.sum / n;
  const Mat3 C = v.sum_outer / n - m * m.transpose();
  VoxelStats s = decompose(v.origin + m, C, static_cast<int>(v.points.size()));
  assess_voxel(v.points, s, cfg_);
  v.prior = geom_prior(s, cfg_.eigen_floor);
  v.fitted = s;
}

std::optional<VoxelStats> VoxelMap::stats(const VoxelKey& key) const {
  auto it = voxels_.find(key);
  if (it == voxels_.end()) return std::nullopt;
  return it->second.fitted;
}

std::span<const WorldPoint> VoxelMap::points(const VoxelKey& key) const {
  auto it = voxels_.find(key);
  if (it == voxels_.end()) return {};
  return it->second.points;
}

std::optional<VoxelStats> VoxelMap::incremental_stats(const VoxelKey& key) const {
  auto it = voxels_.find(key);
  if (it == voxels_.end() || it->second.points.empty()) return std::nullopt;
  const Voxel& v = it->second;
  const auto n = static_cast<double>(v.points.size());
  const Vec3 m = v.sum / n;
  return decompose(v.origin + m, v.sum_outer / n - m * m.transpose(), static_cast<int>(v.points.size()));
}

GeomPrior VoxelMap::prior(const VoxelKey& key) const {
  auto it = voxels_.find(key);
  if (it == voxels_.end()) return {};
  return it->second.prior;
}

}  // namespace splatmap
