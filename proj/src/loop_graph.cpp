#include "splatmap/loop_graph.hpp"

#include "splatmap/error.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <queue>
#include <sstream>

namespace splatmap {
namespace {

constexpr const char* kModule = "loop_graph";

struct Correspondence {
  std::size_t src = 0;
  std::size_t tar = 0;
};

// Exact nearest target mean within d_corr of every transformed source mean.
std::vector<Correspondence> associate(std::span<const Vec3> src, std::span<const Vec3> tar, const PointGrid& grid,
                                      const Pose& t, double d_corr) {
  std::vector<Correspondence> out;
  for (std::size_t m = 0; m < src.size(); ++m) {
    const Vec3 q = t * src[m];
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_n = 0;
    for (std::size_t n : grid.within(q, d_corr, tar)) {
      const double d = (tar[n] - q).squaredNorm();
      if (d < best) {
        best = d;
        best_n = n;
      }
    }
    if (std::isfinite(best)) out.push_back({m, best_n});
  }
  return out;
}

Mat3 combined_information(const Mat3& cov_tar, const Mat3& cov_src, const Mat3& R) {
  const Mat3 sigma = cov_tar + R * cov_src * R.transpose();
  return sigma.inverse();
}

}  // namespace

std::vector<LoopCandidate> find_candidates(std::span<const Pose> loopframe_poses, int cur, double r_search,
                                           int min_gap) {
  if (cur < 0 || cur >= static_cast<int>(loopframe_poses.size()))
    throw Error(ErrorCode::InvalidArgument, kModule, "current loopframe out of range");
  std::vector<LoopCandidate> out;
  const Vec3& c = loopframe_poses[cur].translation;
  for (int j = 0; j + min_gap <= cur; ++j) {
    const double d = (loopframe_poses[j].translation - c).norm();
    if (d < r_search) out.push_back({cur, j, Pose::identity(), d});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const LoopCandidate& a, const LoopCandidate& b) { return a.distance < b.distance; });
  return out;
}

std::vector<std::size_t> extract_target_set(std::span<const Gaussian> gaussians, std::span<const Pose> views,
                                            const Camera& cam, double d_max, std::span<const int> excluded_segments) {
  std::vector<Pose> inv;
  inv.reserve(views.size());
  for (const auto& v : views) inv.push_back(v.inverse());
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < gaussians.size(); ++n) {
    const Gaussian& g = gaussians[n];
    if (std::find(excluded_segments.begin(), excluded_segments.end(), g.segment_id) != excluded_segments.end())
      continue;
    for (std::size_t k = 0; k < views.size(); ++k) {
      if ((g.mean - views[k].translation).norm() >= d_max) continue;
      const auto proj = try_project(cam, inv[k] * g.mean);
      if (proj && proj->in_image) {
        out.push_back(n);
        break;
      }
    }
  }
  if (out.empty()) throw Error(ErrorCode::EmptyTarget, kModule, "no Gaussian inside the query frusta");
  return out;
}

Mat3 regularize_covariance(const Mat3& sigma) {
  const Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (sigma + sigma.transpose()));
  // Eigen returns ascending eigenvalues; reverse to descending and fix each
  // column's sign so its largest-magnitude component is positive.
  Mat3 U;
  for (int c = 0; c < 3; ++c) {
    Vec3 v = es.eigenvectors().col(2 - c);
    Eigen::Index k = 0;
    v.cwiseAbs().maxCoeff(&k);
    if (v(k) < 0) v = -v;
    U.col(c) = v;
  }
  return U * Vec3(1.0, 1.0, 1e-3).asDiagonal() * U.transpose();
}

GicpResult gaussian_gicp(std::span<const Gaussian> src, std::span<const Gaussian> tar, const Pose& t_init,
                         const GicpConfig& cfg) {
  if (src.empty() || tar.empty()) throw Error(ErrorCode::NoCorrespondences, kModule, "empty Gaussian set");
  std::vector<Vec3> src_mu, tar_mu;
  std::vector<Mat3> src_cov, tar_cov;
  for (const auto& g : src) {
    src_mu.push_back(g.mean);
    src_cov.push_back(regularize_covariance(g.covariance()));
  }
  for (const auto& g : tar) {
    tar_mu.push_back(g.mean);
    tar_cov.push_back(regularize_covariance(g.covariance()));
  }
  PointGrid grid(cfg.d_corr);
  for (std::size_t n = 0; n < tar_mu.size(); ++n) grid.insert(tar_mu[n], n);

  GicpResult res;
  Pose t = t_init;
  double lambda = cfg.lambda0;
  for (int it = 1; it <= cfg.max_iters && !res.converged; ++it) {
    res.iterations = it;
    const auto corr = associate(src_mu, tar_mu, grid, t, cfg.d_corr);
    if (corr.empty()) throw Error(ErrorCode::NoCorrespondences, kModule, "no target within d_corr");
    const Mat3 R = t.rotation_matrix();
    std::vector<Mat3> W;
    W.reserve(corr.size());
    for (const auto& c : corr) W.push_back(combined_information(tar_cov[c.tar], src_cov[c.src], R));

    auto objective = [&](const Pose& p) {
      double f = 0.0;
      for (std::size_t k = 0; k < corr.size(); ++k) {
        const Vec3 r = tar_mu[corr[k].tar] - p * src_mu[corr[k].src];
        f += r.dot(W[k] * r);
      }
      return f;
    };

    Mat6 H = Mat6::Zero();
    Vec6 g = Vec6::Zero();
    for (std::size_t k = 0; k < corr.size(); ++k) {
      const Vec3 q = t * src_mu[corr[k].src];
      const Vec3 r = tar_mu[corr[k].tar] - q;
      Eigen::Matrix<double, 3, 6> J;
      J.leftCols<3>() = skew(q);
      J.rightCols<3>() = -Mat3::Identity();
      H += J.transpose() * W[k] * J;
      g += J.transpose() * W[k] * r;
    }
    const double f0 = objective(t);
    const double floor = 1e-12 * std::max(H.diagonal().maxCoeff(), 1e-300);
    for (int trial = 0; trial < 60; ++trial) {
      Mat6 A = H;
      A.diagonal() += lambda * H.diagonal() + Vec6::Constant(floor);
      const Vec6 delta = -A.ldlt().solve(g);
      if (!delta.allFinite() || delta.norm() < cfg.eps_t) {
        res.converged = true;
        break;
      }
      const Pose candidate = se3_exp(delta) * t;
      const double f1 = objective(candidate);
      if (f1 < f0) {
        res.accepted_steps.emplace_back(f0, f1);
        t = candidate;
        lambda = std::max(lambda * 0.1, 1e-12);
        break;
      }
      lambda *= 10.0;
    }
  }

  const auto corr = associate(src_mu, tar_mu, grid, t, cfg.d_corr);
  if (corr.empty()) throw Error(ErrorCode::NoCorrespondences, kModule, "no target within d_corr");
  const Mat3 R = t.rotation_matrix();
  double sum = 0.0;
  Mat3 info = Mat3::Zero();
  for (const auto& c : corr) {
    const Vec3 r = tar_mu[c.tar] - t * src_mu[c.src];
    const Mat3 w = combined_information(tar_cov[c.tar], src_cov[c.src], R);
    info += w;
    sum += std::sqrt(std::max(0.0, r.dot(w * r)));
  }
  const Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(info, Eigen::EigenvaluesOnly).eigenvalues();
  res.conditioning = ev(2) > 0.0 ? std::max(ev(0), 0.0) / ev(2) : 0.0;
  res.transform = t;
  res.correspondences = corr.size();
  res.residual = sum / static_cast<double>(corr.size());
  return res;
}

std::vector<Gaussian> gaussians_from_points(std::span<const Vec3> points, double radius, int min_neighbors) {
  if (radius <= 0.0) throw Error(ErrorCode::InvalidArgument, kModule, "neighbour radius must be positive");
  PointGrid grid(radius);
  for (std::size_t i = 0; i < points.size(); ++i) grid.insert(points[i], i);
  std::vector<Gaussian> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    const auto nb = grid.within(p, radius, points);
    if (static_cast<int>(nb.size()) < std::max(min_neighbors, 3)) continue;
    Vec3 mean = Vec3::Zero();
    for (auto i : nb) mean += points[i];
    mean /= static_cast<double>(nb.size());
    Mat3 C = Mat3::Zero();
    for (auto i : nb) C += (points[i] - mean) * (points[i] - mean).transpose();
    C /= static_cast<double>(nb.size());
    const Eigen::SelfAdjointEigenSolver<Mat3> es(C);
    Mat3 V = es.eigenvectors();
    if (V.determinant() < 0) V.col(0) = -V.col(0);
    Gaussian g;
    g.mean = p;
    g.set_quat(Quat(V));
    for (int k = 0; k < 3; ++k) g.log_scale(k) = 0.5 * std::log(std::max(es.eigenvalues()(k), 1e-8));
    out.push_back(g);
  }
  return out;
}

bool accept_loop(const GicpResult& result, double eps_res, std::size_t n_min) {
  return result.converged && result.residual < eps_res && result.correspondences >= n_min;
}

Vec6 edge_residual(const PoseGraphEdge& e, const Pose& xi, const Pose& xj) {
  return se3_log(e.measurement.inverse() * xi.inverse() * xj);
}

double pose_graph_cost(const PoseGraph& g, std::span<const Pose> poses) {
  double c = 0.0;
  for (const auto& e : g.edges) {
    const Vec6 r = edge_residual(e, poses[e.i], poses[e.j]);
    c += r.dot(e.information * r);
  }
  return c;
}

PoseGraphResult optimize_pose_graph(const PoseGraph& graph, const LmConfig& cfg) {
  const int n = static_cast<int>(graph.nodes.size());
  if (n == 0) throw Error(ErrorCode::InvalidArgument, kModule, "empty pose graph");
  std::vector<std::vector<int>> adj(n);
  for (const auto& e : graph.edges) {
    if (e.i < 0 || e.j < 0 || e.i >= n || e.j >= n || e.i == e.j)
      throw Error(ErrorCode::InvalidArgument, kModule, "edge references invalid nodes");
    adj[e.i].push_back(e.j);
    adj[e.j].push_back(e.i);
  }
  std::vector<bool> seen(n, false);
  std::queue<int> frontier;
  frontier.push(0);
  seen[0] = true;
  while (!frontier.empty()) {
    const int a = frontier.front();
    frontier.pop();
    for (int b : adj[a])
      if (!seen[b]) {
        seen[b] = true;
        frontier.push(b);
      }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw Error(ErrorCode::SingularSystem, kModule, "pose graph is not connected to the gauge node");

  PoseGraphResult res;
  res.poses = graph.nodes;
  double cost = pose_graph_cost(graph, res.poses);
  res.initial_cost = cost;
  const int dim = 6 * (n - 1);
  double lambda = cfg.lambda0;
  for (int it = 0; it < cfg.max_iters && dim > 0 && cost > 0.0; ++it) {
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(dim);
    for (const auto& e : graph.edges) {
      const Pose& xi = res.poses[e.i];
      const Pose& xj = res.poses[e.j];
      const Vec6 r = edge_residual(e, xi, xj);
      // Left perturbations X <- exp(d) X on both endpoints.
      const Mat6 Jj = se3_right_jacobian(r).inverse() * se3_adjoint(xj.inverse());
      const Mat6 Ji = -Jj;
      const int bi = 6 * (e.i - 1);
      const int bj = 6 * (e.j - 1);
      if (e.i > 0) {
        H.block<6, 6>(bi, bi) += Ji.transpose() * e.information * Ji;
        g.segment<6>(bi) += Ji.transpose() * e.information * r;
      }
      if (e.j > 0) {
        H.block<6, 6>(bj, bj) += Jj.transpose() * e.information * Jj;
        g.segment<6>(bj) += Jj.transpose() * e.information * r;
      }
      if (e.i > 0 && e.j > 0) {
        const Mat6 off = Ji.transpose() * e.information * Jj;
        H.block<6, 6>(bi, bj) += off;
        H.block<6, 6>(bj, bi) += off.transpose();
      }
    }
    if (it == 0) {
      const Eigen::LLT<Eigen::MatrixXd> llt(H);
      if (llt.info() != Eigen::Success)
        throw Error(ErrorCode::SingularSystem, kModule, "normal equations are not positive definite");
    }
    bool accepted = false;
    bool done = false;
    for (int trial = 0; trial < 60 && !accepted; ++trial) {
      Eigen::MatrixXd A = H;
      A.diagonal() += lambda * H.diagonal();
      const Eigen::VectorXd delta = -A.ldlt().solve(g);
      if (!delta.allFinite() || delta.norm() < cfg.eps_step) {
        done = true;
        break;
      }
      std::vector<Pose> trial_poses = res.poses;
      for (int k = 1; k < n; ++k) trial_poses[k] = se3_exp(delta.segment<6>(6 * (k - 1))) * res.poses[k];
      const double c = pose_graph_cost(graph, trial_poses);
      if (c < cost) {
        res.poses = std::move(trial_poses);
        cost = c;
        res.cost_history.push_back(c);
        lambda = std::max(lambda * 0.1, 1e-12);
        accepted = true;
      } else {
        lambda *= 10.0;
      }
    }
    res.iterations = it + 1;
    if (done || !accepted) break;
  }
  res.final_cost = cost;
  return res;
}

void propagate_correction(GlobalMap& map, std::span<const Pose> old_nodes, std::span<const Pose> new_nodes,
                          std::span<const int> node_of_segment) {
  if (old_nodes.size() != new_nodes.size() || node_of_segment.size() != map.segments().size())
    throw Error(ErrorCode::DimensionMismatch, kModule, "node and segment counts disagree");
  std::vector<std::pair<int, Pose>> updates;
  for (std::size_t s = 0; s < node_of_segment.size(); ++s) {
    const int node = node_of_segment[s];
    if (node < 0 || node >= static_cast<int>(new_nodes.size()))
      throw Error(ErrorCode::InvalidArgument, kModule, "segment anchored at unknown node");
    const Pose& a = new_nodes[node];
    const Pose& b = old_nodes[node];
    if (a.rotation.coeffs() == b.rotation.coeffs() && a.translation == b.translation) continue;
    const SegmentRecord& rec = map.segments()[s];
    updates.emplace_back(rec.id, a * b.inverse() * rec.correction);
  }
  map.set_segment_corrections(updates);
}

void write_pose_graph(const std::filesystem::path& path, const PoseGraph& graph) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, kModule, "cannot open " + path.string());
  out << std::setprecision(17);
  auto pose = [&](const Pose& p) {
    out << p.translation.x() << ' ' << p.translation.y() << ' ' << p.translation.z() << ' ' << p.rotation.w()
        << ' ' << p.rotation.x() << ' ' << p.rotation.y() << ' ' << p.rotation.z();
  };
  for (std::size_t k = 0; k < graph.nodes.size(); ++k) {
    out << "NODE " << k << ' ';
    pose(graph.nodes[k]);
    out << '\n';
  }
  for (const auto& e : graph.edges) {
    out << "EDGE " << e.i << ' ' << e.j << ' ';
    pose(e.measurement);
    for (int r = 0; r < 6; ++r)
      for (int c = r; c < 6; ++c) out << ' ' << e.information(r, c);
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::IoError, kModule, "write failed for " + path.string());
}

PoseGraph read_pose_graph(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, kModule, "cannot open " + path.string());
  auto read_pose = [&](std::istringstream& ss) {
    double tx, ty, tz, qw, qx, qy, qz;
    if (!(ss >> tx >> ty >> tz >> qw >> qx >> qy >> qz))
      throw Error(ErrorCode::IoError, kModule, "malformed pose in " + path.string());
    Pose p;
    p.rotation = Quat(qw, qx, qy, qz);
    p.translation = {tx, ty, tz};
    return p;
  };
  PoseGraph g;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "NODE") {
      std::size_t id;
      ss >> id;
      if (id != g.nodes.size()) throw Error(ErrorCode::IoError, kModule, "node ids must be consecutive");
      g.nodes.push_back(read_pose(ss));
    } else if (tag == "EDGE") {
      PoseGraphEdge e;
      ss >> e.i >> e.j;
      e.measurement = read_pose(ss);
      for (int r = 0; r < 6; ++r)
        for (int c = r; c < 6; ++c) {
          if (!(ss >> e.information(r, c))) throw Error(ErrorCode::IoError, kModule, "malformed information");
          e.information(c, r) = e.information(r, c);
        }
      e.loop = e.j != e.i + 1;
      g.edges.push_back(e);
    } else {
      throw Error(ErrorCode::IoError, kModule, "unknown record " + tag);
    }
  }
  return g;
}

}  // namespace splatmap
