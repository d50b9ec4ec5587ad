#pragma once

// End-to-end mapping run over a dataset: frame ingest with voxel priors and
// cascaded initialization, windowed map optimization, Gaussian loop closure,
// trajectory and rendering metrics. Runs either single-threaded in a fixed
// interleave (bit-reproducible) or as three workers joined by bounded queues.

#include "splatmap/loop_graph.hpp"
#include "splatmap/synth.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace splatmap {

struct LoopConfig {
  bool enabled = true;
  double r_search = 10.0;
  int min_gap = 20;
  double d_max = 30.0;
  int neighbors = 5;  // keyframe views around the historical loopframe
  GicpConfig gicp;
  double eps_res = 0.5;
  double info_odometry = 1.0;
  double info_loop = 10.0;
  int max_candidates = 3;
  std::size_t max_source = 3000;  // GICP inputs are subsampled to these sizes
  std::size_t max_target = 20000;
  // Only Gaussians with smallest/middle scale ratio below this enter GICP; the
  // planar regularization leaves the normal of rounder ones undefined. 1 keeps all.
  double planarity_max = 0.3;
  // Registrations whose translational information is this ill-conditioned are
  // rejected: the sets can slide along an unconstrained direction.
  double min_conditioning = 0.01;
};

struct PipelineConfig {
  std::string mode = "deterministic";  // or "streaming"
  std::uint64_t seed = 1;
  int hold_out = 8;  // every Nth frame is a test view
  std::string provider = "stub";
  StubProviderConfig stub;
  InitConfig init;
  VoxelConfig voxel;
  double r_dup = 0.05;
  bool dedup_within_segment = true;
  int freeze_k = 3;
  double prune_opacity = 0.05;
  double prune_ratio = 0.1;
  int prune_every = 50;
  OptimizerConfig opt;
  WindowConfig window;
  int steps_per_frame = 10;
  int total_steps = 0;  // when positive, the exact step budget: caps streamed steps, the rest run after the stream
  int batch = 1;
  LoopConfig loop;
  int queue_depth = 4;
  bool paced = false;  // streaming mode: release frames at the dataset rate
};

nlohmann::json config_to_json(const PipelineConfig& cfg);
// Accepts partial documents; unknown keys are an error.
PipelineConfig config_from_json(const nlohmann::json& j);
// Sets "a.b.c" to value, parsed as JSON when possible and as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& dotted_key, const std::string& value);
PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

bool is_test_frame(int index, int hold_out);

struct LoopEvent {
  int cur_node = 0;
  int hist_node = 0;
  int cur_frame = 0;
  int hist_frame = 0;
  bool accepted = false;
  std::string outcome;  // "accepted", "rejected", "degenerate", "no_correspondences", "empty_target"
  double residual = 0.0;
  std::size_t source_size = 0;  // GICP inputs after filtering and subsampling
  std::size_t target_size = 0;
  std::size_t correspondences = 0;
  double conditioning = 0.0;
  int iterations = 0;
  // Accepted relative pose against ground truth.
  double gt_rotation_error_deg = 0.0;
  double gt_translation_error = 0.0;
};

struct ViewMetrics {
  int frame = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalResult {
  std::vector<ViewMetrics> views;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

// Renders every held-out frame at its pose in `trajectory` (indexed by frame).
// Throws MissingViews when there is none.
EvalResult evaluate_views(std::span<const Gaussian> gaussians, const Dataset& data,
                          std::span<const TimedPose> trajectory, int hold_out, const RenderConfig& render);

struct RunResult {
  nlohmann::json report;  // deterministic content only
  nlohmann::json timing;  // wall-clock figures, memory and real-time factors
  std::vector<TimedPose> trajectory;
  GlobalMap map;
  PoseGraph graph;
  std::vector<LoopEvent> loops;
  EvalResult eval;
  double ate = 0.0;
  double ate_odometry = 0.0;
  std::size_t held_out_violations = 0;
};

RunResult run_pipeline(const Dataset& data, const PipelineConfig& cfg);

// report.json, timing.json, trajectory.tsv, map.ply (+ map.json), pose_graph.txt
void write_run(const RunResult& run, const PipelineConfig& cfg, const std::filesystem::path& out);

}  // namespace splatmap
