#pragma once

// Loop closure on the Gaussian map: metric candidate gating, frustum target
// extraction, planar-regularized Gaussian GICP, an SE(3) pose graph solved by
// Levenberg-Marquardt, and propagation of node corrections to segments.

#include "splatmap/map_opt.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace splatmap {

struct LoopCandidate {
  int cur = 0;   // current loopframe index i
  int hist = 0;  // historical loopframe index j < i
  Pose initial_guess;  // world-frame refinement, identity by default
  double distance = 0.0;
};

// Historical loopframes within r_search of loopframe `cur` and at least
// min_gap indices older, nearest first.
std::vector<LoopCandidate> find_candidates(std::span<const Pose> loopframe_poses, int cur, double r_search,
                                           int min_gap);

// Indices of Gaussians seen by at least one query view within d_max of that
// view's camera center, excluding the given segments. Throws EmptyTarget.
std::vector<std::size_t> extract_target_set(std::span<const Gaussian> gaussians, std::span<const Pose> views,
                                            const Camera& cam, double d_max, std::span<const int> excluded_segments);

// U diag(1, 1, 1e-3) U^T with U the eigenvectors of sigma in descending order.
Mat3 regularize_covariance(const Mat3& sigma);

struct GicpConfig {
  double d_corr = 1.0;
  std::size_t n_min = 50;
  double eps_t = 1e-6;
  int max_iters = 50;
  double lambda0 = 1e-6;
};

struct GicpResult {
  Pose transform;  // maps source means onto the target
  double residual = 0.0;  // mean Mahalanobis distance over final correspondences
  int iterations = 0;
  bool converged = false;
  std::size_t correspondences = 0;
  // Smallest over largest eigenvalue of the translational information summed
  // over the final correspondences; near 0 when a direction is unconstrained.
  double conditioning = 0.0;
  // Objective before/after every accepted step, correspondences held fixed.
  std::vector<std::pair<double, double>> accepted_steps;
};

GicpResult gaussian_gicp(std::span<const Gaussian> src, std::span<const Gaussian> tar, const Pose& t_init,
                         const GicpConfig& cfg = {});

bool accept_loop(const GicpResult& result, double eps_res, std::size_t n_min);

// Gaussians for a raw point cloud, for standalone registration: each point
// takes the covariance of its neighbours within `radius`. Points with fewer
// than `min_neighbors` neighbours are dropped.
std::vector<Gaussian> gaussians_from_points(std::span<const Vec3> points, double radius, int min_neighbors = 5);

struct PoseGraphEdge {
  int i = 0;
  int j = 0;
  Pose measurement;  // expected X_i^-1 X_j
  Mat6 information = Mat6::Identity();
  bool loop = false;
};

struct PoseGraph {
  std::vector<Pose> nodes;
  std::vector<PoseGraphEdge> edges;
};

Vec6 edge_residual(const PoseGraphEdge& e, const Pose& xi, const Pose& xj);
double pose_graph_cost(const PoseGraph& g, std::span<const Pose> poses);

struct LmConfig {
  int max_iters = 100;
  double lambda0 = 1e-4;
  double eps_step = 1e-12;
};

struct PoseGraphResult {
  std::vector<Pose> poses;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  std::vector<double> cost_history;  // after every accepted step
};

// Node 0 is the gauge and is returned bit-identical.
PoseGraphResult optimize_pose_graph(const PoseGraph& graph, const LmConfig& cfg = {});

// Moves every segment by X_new * X_old^-1 of its anchor node. node_of_segment
// lists, per map segment in order, the node index anchoring it.
void propagate_correction(GlobalMap& map, std::span<const Pose> old_nodes, std::span<const Pose> new_nodes,
                          std::span<const int> node_of_segment);

void write_pose_graph(const std::filesystem::path& path, const PoseGraph& graph);
PoseGraph read_pose_graph(const std::filesystem::path& path);

}  // namespace splatmap
