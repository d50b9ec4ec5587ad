#pragma once

// Hash-grid voxel map over world-frame colored points with per-voxel PCA,
// planar/linear classification and descriptor-covariance propagation.

#include "splatmap/geom.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

namespace splatmap {

struct WorldPoint {
  Vec3 position = Vec3::Zero();
  Vec3 color = Vec3::Zero();     // RGB in [0,1]
  Mat3 covariance = Mat3::Zero();  // m^2
};

enum class GeomClass { Unreliable, Planar, Linear };

enum class EigenAxis { Min = 0, Mid = 1, Max = 2 };

struct VoxelStats {
  Vec3 mean = Vec3::Zero();
  Vec3 eigenvalues = Vec3::Zero();     // ascending
  Mat3 eigenvectors = Mat3::Identity();  // columns v_min, v_mid, v_max; det = +1
  int count = 0;
  GeomClass cls = GeomClass::Unreliable;
  Mat6 descriptor_cov = Mat6::Zero();  // [direction; mean]
  bool reliable = false;
};

struct GeomPrior {
  Quat rotation = Quat::Identity();
  Vec3 log_scale = Vec3::Zero();  // local axes ordered (max, mid, min)
  bool reliable = false;
};

struct VoxelConfig {
  double voxel_size = 0.5;
  double tau_planar = 0.0025;  // m^2
  double tau_linear = 25.0;
  double tau_trace = 1e-3;
  int min_points = 10;
  // Once a voxel holds this many points it stops updating; 0 means never.
  int max_points = 0;
  double eigen_floor = 1e-8;  // m^2, applied before the log
  bool require_mid_above_tau_p = false;
};

using VoxelKey = std::array<std::int64_t, 3>;

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const noexcept {
    return static_cast<std::size_t>(k[0] * 73856093LL ^ k[1] * 19349669LL ^ k[2] * 83492791LL);
  }
};

VoxelKey voxel_index(const Vec3& p, double voxel_size);

// Batch two-pass PCA. Throws TooFewPoints below min_points.
VoxelStats fit_voxel(std::span<const WorldPoint> points, int min_points = 10);

GeomClass classify(const VoxelStats& stats, double tau_planar, double tau_linear,
                   bool require_mid_above_tau_p = false);

// First-order propagation of point covariances into the 6x6 covariance of
// [v_axis; mean]. Throws DegenerateSpectrum when an eigen-gap to the selected
// axis is below 1e-10.
Mat6 descriptor_covariance(std::span<const WorldPoint> points, const VoxelStats& stats, EigenAxis axis);

bool reliability(const Mat6& descriptor_cov, double tau_trace);

GeomPrior geom_prior(const VoxelStats& stats, double eigen_floor = 1e-8);

// Runs classify -> descriptor_covariance -> reliability on fitted stats.
void assess_voxel(std::span<const WorldPoint> points, VoxelStats& stats, const VoxelConfig& cfg);

class VoxelMap {
 public:
  explicit VoxelMap(VoxelConfig cfg = {}) : cfg_(cfg) {}

  const VoxelConfig& config() const { return cfg_; }

  // Inserts points and refits every touched voxel. Returns one prior per input point.
  std::vector<GeomPrior> insert(std::span<const WorldPoint> points);

  std::size_t voxel_count() const { return voxels_.size(); }
  std::optional<VoxelStats> stats(const VoxelKey& key) const;
  std::span<const WorldPoint> points(const VoxelKey& key) const;
  // Mean/covariance from running moments, eigen-decomposed; class unset.
  std::optional<VoxelStats> incremental_stats(const VoxelKey& key) const;
  GeomPrior prior(const VoxelKey& key) const;

 private:
  struct Voxel {
    std::vector<WorldPoint> points;
    Vec3 origin = Vec3::Zero();  // first point, moments are taken relative to it
    Vec3 sum = Vec3::Zero();
    Mat3 sum_outer = Mat3::Zero();
    std::optional<VoxelStats> fitted;
    GeomPrior prior;
  };

  void refit(Voxel& v) const;

  VoxelConfig cfg_;
  std::unordered_map<VoxelKey, Voxel, VoxelKeyHash> voxels_;
};

}  // namespace splatmap
