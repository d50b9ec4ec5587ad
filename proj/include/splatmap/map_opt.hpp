#pragma once

// Global Gaussian map: dedup insertion, view windows, freezing, sparse Adam
// updates, bounded opacity pruning, segment corrections and splat PLY export.

#include "splatmap/gauss_init.hpp"
#include "splatmap/splat_render.hpp"

#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <unordered_map>
#include <vector>

namespace splatmap {

// A committed keyframe used as supervision.
struct KeyView {
  int frame_index = 0;
  int segment_id = 0;
  Pose pose;  // world-from-camera, corrected
  std::shared_ptr<const Image> rgb;
  std::shared_ptr<const Image> depth;
};

struct SegmentRecord {
  int id = 0;
  int loopframe_index = 0;
  Pose anchor_pose;  // loopframe pose when the segment was created
  Pose correction;   // applied on the left of everything in the segment
  std::size_t begin = 0;
  std::size_t end = 0;  // Gaussians [begin, end) of the flat array
};

// Uniform hash grid over points with exact radius queries.
class PointGrid {
 public:
  explicit PointGrid(double cell) : cell_(cell) {}
  void clear() { cells_.clear(); }
  void insert(const Vec3& p, std::size_t index);
  bool any_within(const Vec3& p, double r, std::span<const Vec3> points) const;
  // Indices of points within r, ascending.
  std::vector<std::size_t> within(const Vec3& p, double r, std::span<const Vec3> points) const;
  double cell() const { return cell_; }

 private:
  double cell_;
  std::unordered_map<VoxelKey, std::vector<std::size_t>, VoxelKeyHash> cells_;
};

class GlobalMap {
 public:
  explicit GlobalMap(double r_dup = 0.05, bool dedup_within_segment = true);

  // Drops candidates within r_dup of an existing Gaussian and appends the rest.
  std::size_t insert_segment(const Segment& seg);

  std::span<const Gaussian> gaussians() const { return gaussians_; }
  std::vector<Gaussian>& mutable_gaussians() { return gaussians_; }
  const std::vector<SegmentRecord>& segments() const { return segments_; }
  const SegmentRecord* find_segment(int id) const;
  std::span<const Gaussian> segment_gaussians(int id) const;

  void add_view(KeyView v) { views_.push_back(std::move(v)); }
  const std::vector<KeyView>& views() const { return views_; }

  void apply_freeze_policy(int k);
  std::size_t prune(double o_thresh, double max_ratio);

  // Sets a segment's correction, moving its Gaussians and views by new * old^-1.
  void set_segment_correction(int segment_id, const Pose& correction);
  // Batched form: applies every (segment id, correction) pair, one index rebuild.
  void set_segment_corrections(std::span<const std::pair<int, Pose>> corrections);

  double r_dup() const { return r_dup_; }
  std::size_t size() const { return gaussians_.size(); }
  void rebuild_index();

 private:
  double r_dup_;
  bool dedup_within_segment_;
  std::vector<Gaussian> gaussians_;
  std::vector<Vec3> means_;
  std::vector<SegmentRecord> segments_;
  std::vector<KeyView> views_;
  PointGrid grid_;
  std::uint64_t next_id_ = 1;
};

struct WindowConfig {
  int recent = 10;   // most recent views
  int history = 0;   // views before the recent window; 0 = all of them
  double recent_ratio = 0.7;
};

// Indices into `view_count` committed views, recent window = the newest ones.
std::vector<std::size_t> sample_views(std::size_t view_count, const WindowConfig& cfg, std::size_t batch,
                                      std::mt19937_64& rng);

struct OptimizerConfig {
  double lr_mean = 1.6e-4;
  double spatial_scale = 1.0;  // scene extent multiplying lr_mean
  double lr_scale = 5e-3;
  double lr_rotation = 1e-3;
  double lr_opacity = 5e-2;
  double lr_sh = 2.5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
  double alpha_thresh = 0.5;
  int r_erode = 2;
  LossWeights weights;
  RenderConfig render;
};

inline constexpr int kParamsPerGaussian = 3 + 3 + 4 + 1 + 3 * kMaxShCoeffs;

struct AdamMoments {
  std::array<double, kParamsPerGaussian> m{};
  std::array<double, kParamsPerGaussian> v{};
  int steps = 0;
};

// Sparse Adam state, allocated lazily for Gaussians that receive updates.
struct OptimizerState {
  std::unordered_map<std::uint64_t, AdamMoments> moments;
  std::size_t steps = 0;
};

struct LossRecord {
  LossTerms terms;  // averaged over the views used
  int views_used = 0;
  int views_skipped = 0;  // empty interior mask
  std::size_t updated = 0;
};

LossRecord optimize_step(GlobalMap& map, const Camera& cam, std::span<const std::size_t> batch,
                         const OptimizerConfig& cfg, OptimizerState& state);

// Splat PLY in the common 3DGS layout plus a JSON sidecar with segment bookkeeping.
void write_splat_ply(const std::filesystem::path& path, std::span<const Gaussian> gaussians, int sh_degree);
std::vector<Gaussian> read_splat_ply(const std::filesystem::path& path);
void save_checkpoint(const std::filesystem::path& ply_path, const GlobalMap& map, int sh_degree,
                     const std::string& config_json = "{}");

}  // namespace splatmap
