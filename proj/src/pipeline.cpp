#include "splatmap/pipeline.hpp"

#include "splatmap/error.hpp"
#include "splatmap/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <thread>

namespace splatmap {
namespace {

constexpr const char* kModule = "pipeline";
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// One place lists every configuration key; the visitor serves both directions.
template <class F>
void visit_config(PipelineConfig& c, F&& f) {
  f("mode", c.mode);
  f("seed", c.seed);
  f("data.hold_out", c.hold_out);
  f("init.provider", c.provider);
  f("init.stub.contrast_threshold", c.stub.contrast_threshold);
  f("init.stub.opacity", c.stub.opacity);
  f("init.stub.sh_coeffs", c.stub.sh_coeffs);
  f("init.keyframe_gap", c.init.keyframe_gap);
  f("init.loop_tau_t", c.init.loop_tau_t);
  f("init.loop_tau_r", c.init.loop_tau_r);
  f("init.opacity0", c.init.opacity0);
  f("init.beta_min", c.init.beta_min);
  f("init.sh_degree", c.init.sh_degree);
  f("init.focal_mean", c.init.focal_mean);
  f("init.use_pca", c.init.use_pca);
  f("voxel.voxel_size", c.voxel.voxel_size);
  f("voxel.tau_planar", c.voxel.tau_planar);
  f("voxel.tau_linear", c.voxel.tau_linear);
  f("voxel.tau_trace", c.voxel.tau_trace);
  f("voxel.min_points", c.voxel.min_points);
  f("voxel.max_points", c.voxel.max_points);
  f("voxel.eigen_floor", c.voxel.eigen_floor);
  f("voxel.require_mid_above_tau_p", c.voxel.require_mid_above_tau_p);
  f("map.r_dup", c.r_dup);
  f("map.dedup_within_segment", c.dedup_within_segment);
  f("map.freeze_k", c.freeze_k);
  f("map.prune_opacity", c.prune_opacity);
  f("map.prune_ratio", c.prune_ratio);
  f("map.prune_every", c.prune_every);
  f("opt.lr_mean", c.opt.lr_mean);
  f("opt.spatial_scale", c.opt.spatial_scale);
  f("opt.lr_scale", c.opt.lr_scale);
  f("opt.lr_rotation", c.opt.lr_rotation);
  f("opt.lr_opacity", c.opt.lr_opacity);
  f("opt.lr_sh", c.opt.lr_sh);
  f("opt.beta1", c.opt.beta1);
  f("opt.beta2", c.opt.beta2);
  f("opt.eps", c.opt.eps);
  f("opt.alpha_thresh", c.opt.alpha_thresh);
  f("opt.r_erode", c.opt.r_erode);
  f("opt.weights.rgb", c.opt.weights.rgb);
  f("opt.weights.ssim", c.opt.weights.ssim);
  f("opt.weights.depth", c.opt.weights.depth);
  f("opt.render.dilation", c.opt.render.dilation);
  f("opt.render.alpha_max", c.opt.render.alpha_max);
  f("opt.render.transmittance_min", c.opt.render.transmittance_min);
  f("opt.render.z_near", c.opt.render.z_near);
  f("opt.render.frustum_margin", c.opt.render.frustum_margin);
  f("opt.render.alpha_min", c.opt.render.alpha_min);
  f("opt.window.recent", c.window.recent);
  f("opt.window.history", c.window.history);
  f("opt.window.recent_ratio", c.window.recent_ratio);
  f("opt.steps_per_frame", c.steps_per_frame);
  f("opt.total_steps", c.total_steps);
  f("opt.batch", c.batch);
  f("loop.enabled", c.loop.enabled);
  f("loop.r_search", c.loop.r_search);
  f("loop.min_gap", c.loop.min_gap);
  f("loop.d_max", c.loop.d_max);
  f("loop.neighbors", c.loop.neighbors);
  f("loop.eps_res", c.loop.eps_res);
  f("loop.info_odometry", c.loop.info_odometry);
  f("loop.info_loop", c.loop.info_loop);
  f("loop.max_candidates", c.loop.max_candidates);
  f("loop.max_source", c.loop.max_source);
  f("loop.max_target", c.loop.max_target);
  f("loop.planarity_max", c.loop.planarity_max);
  f("loop.min_conditioning", c.loop.min_conditioning);
  f("loop.gicp.d_corr", c.loop.gicp.d_corr);
  f("loop.gicp.n_min", c.loop.gicp.n_min);
  f("loop.gicp.eps_t", c.loop.gicp.eps_t);
  f("loop.gicp.max_iters", c.loop.gicp.max_iters);
  f("loop.gicp.lambda0", c.loop.gicp.lambda0);
  f("stream.queue_depth", c.queue_depth);
  f("stream.paced", c.paced);
}

nlohmann::json::json_pointer pointer(const std::string& dotted) {
  std::string p = "/" + dotted;
  std::replace(p.begin(), p.end(), '.', '/');
  return nlohmann::json::json_pointer(p);
}

// Producer-side view of accumulated loop corrections: version v maps the
// raw odometry frame to the current corrected frame.
class CorrectionBoard {
 public:
  std::pair<int, Pose> latest() const {
    std::lock_guard lock(m_);
    return {static_cast<int>(history_.size()) - 1, history_.back()};
  }
  Pose at(int v) const {
    std::lock_guard lock(m_);
    return history_.at(v);
  }
  void push(const Pose& delta) {
    std::lock_guard lock(m_);
    history_.push_back(delta * history_.back());
  }

 private:
  mutable std::mutex m_;
  std::vector<Pose> history_{Pose::identity()};
};

struct FrameRecord {
  int index = 0;
  Pose pose;
};

struct SegmentMsg {
  int segment_id = -1;  // -1 carries trailing frames only
  SegmentBuild build;
  std::vector<KeyView> views;
  bool first = false;
  Pose first_node_pose;
  Pose node_pose;
  int node_frame = 0;
  std::vector<FrameRecord> frames;
  int version = 0;
};

void transform_frame(Frame& f, const Pose& delta) {
  f.pose = delta * f.pose;
  const Mat3 R = delta.rotation_matrix();
  for (auto& p : f.points) {
    p.position = delta * p.position;
    p.covariance = R * p.covariance * R.transpose();
  }
}

class Frontend {
 public:
  Frontend(const Dataset& data, const PipelineConfig& cfg, const CorrectionBoard& board)
      : data_(data), cfg_(cfg), board_(board), voxels_(cfg.voxel) {
    if (cfg.provider == "stub") {
      provider_ = std::make_unique<StubProvider>(cfg.stub);
    } else {
      provider_ = make_provider(cfg.provider);
    }
  }

  std::optional<SegmentMsg> ingest(int k) {
    sync_version();
    const Pose pose = correction_ * data_.odometry()[k].pose;
    pending_frames_.push_back({k, pose});
    if (is_test_frame(k, cfg_.hold_out)) return std::nullopt;
    const bool first = !prev_lf_.has_value();
    const bool keyframe = first || select_keyframe(k, cfg_.init.keyframe_gap);
    Frame frame = data_.load_frame(k, pose);
    auto priors = voxels_.insert(frame.points);
    if (!keyframe) return std::nullopt;
    frame.priors = std::move(priors);
    if (first) {
      prev_lf_ = frame;
      pending_keyframes_.push_back(std::move(frame));
      return std::nullopt;
    }
    const bool loopframe = select_loopframe(pose, prev_lf_->pose, cfg_.init.loop_tau_t, cfg_.init.loop_tau_r);
    pending_keyframes_.push_back(std::move(frame));
    if (!loopframe) return std::nullopt;
    return close();
  }

  // Closes the open segment at the last keyframe; frames after it travel alone.
  std::optional<SegmentMsg> finish() {
    sync_version();
    if (!pending_keyframes_.empty()) return close();
    if (pending_frames_.empty()) return std::nullopt;
    SegmentMsg tail;
    tail.frames = std::move(pending_frames_);
    tail.version = version_;
    pending_frames_.clear();
    return tail;
  }

  double init_seconds = 0.0;

 private:
  void sync_version() {
    const auto [v, c] = board_.latest();
    if (v == version_) return;
    const Pose delta = c * correction_.inverse();
    for (auto& f : pending_keyframes_) transform_frame(f, delta);
    for (auto& f : pending_frames_) f.pose = delta * f.pose;
    if (prev_lf_) transform_frame(*prev_lf_, delta);
    correction_ = c;
    version_ = v;
  }

  SegmentMsg close() {
    const auto t0 = Clock::now();
    SegmentMsg msg;
    msg.segment_id = segment_id_;
    msg.version = version_;
    msg.first = segment_id_ == 0;
    msg.first_node_pose = prev_lf_->pose;
    const Frame& cur = pending_keyframes_.back();
    std::unique_ptr<AttributeMapPair> maps;
    if (provider_) maps = std::make_unique<AttributeMapPair>(provider_->predict(prev_lf_->rgb, cur.rgb, segment_id_));
    std::vector<const Frame*> ptrs;
    for (const auto& f : pending_keyframes_) ptrs.push_back(&f);
    msg.build = close_segment(ptrs, *prev_lf_, cur, data_.camera(), maps.get(), segment_id_, cfg_.init);
    msg.build.segment.loopframe_index = cur.index;
    msg.node_pose = cur.pose;
    msg.node_frame = cur.index;
    for (const auto& f : pending_keyframes_) {
      KeyView v;
      v.frame_index = f.index;
      v.segment_id = segment_id_;
      v.pose = f.pose;
      v.rgb = std::make_shared<const Image>(f.rgb);
      v.depth = std::make_shared<const Image>(f.depth);
      msg.views.push_back(std::move(v));
    }
    msg.frames = std::move(pending_frames_);
    pending_frames_.clear();
    prev_lf_ = pending_keyframes_.back();
    pending_keyframes_.clear();
    ++segment_id_;
    init_seconds += seconds_since(t0);
    return msg;
  }

  const Dataset& data_;
  const PipelineConfig& cfg_;
  const CorrectionBoard& board_;
  VoxelMap voxels_;
  std::unique_ptr<AttributeProvider> provider_;
  std::optional<Frame> prev_lf_;
  std::vector<Frame> pending_keyframes_;
  std::vector<FrameRecord> pending_frames_;
  int segment_id_ = 0;
  int version_ = 0;
  Pose correction_;
};

std::vector<std::size_t> stride_subsample(std::size_t n, std::size_t cap) {
  std::vector<std::size_t> idx;
  if (n <= cap) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  for (std::size_t k = 0; k < cap; ++k) idx.push_back(k * n / cap);
  return idx;
}

bool planar_enough(const Gaussian& g, double ratio_max) {
  if (ratio_max >= 1.0) return true;
  Vec3 s = g.log_scale;
  std::sort(s.data(), s.data() + 3);
  return std::exp(s(0) - s(1)) < ratio_max;
}

struct LoopInput {
  int node = 0;
  PoseGraph graph;
  std::vector<int> node_frame;
  std::vector<int> node_of_segment;
  std::vector<int> segment_ids;
  std::vector<Gaussian> map;  // subsampled later; copied only in streaming mode
  std::vector<std::pair<int, Pose>> views;
  std::vector<Gaussian> source;
};

struct LoopOutput {
  std::vector<LoopEvent> events;
  std::optional<PoseGraphEdge> edge;
  std::vector<Pose> new_nodes;  // empty unless a loop was accepted
  double seconds = 0.0;
};

LoopOutput loop_check(const LoopInput& in, std::span<const Gaussian> map_gaussians, const PipelineConfig& cfg,
                      const Dataset& data) {
  const auto t0 = Clock::now();
  LoopOutput out;
  const auto& lc = cfg.loop;
  const auto candidates = find_candidates(in.graph.nodes, in.node, lc.r_search, lc.min_gap);
  std::vector<int> excluded;
  for (std::size_t s = 0; s < in.node_of_segment.size(); ++s) {
    if (2 * std::abs(in.node_of_segment[s] - in.node) < lc.min_gap) excluded.push_back(in.segment_ids[s]);
  }
  std::vector<Gaussian> source;
  {
    std::vector<const Gaussian*> planar;
    for (const auto& g : in.source)
      if (planar_enough(g, lc.planarity_max)) planar.push_back(&g);
    for (std::size_t i : stride_subsample(planar.size(), lc.max_source)) source.push_back(*planar[i]);
  }

  int tried = 0;
  for (const auto& cand : candidates) {
    if (tried++ >= lc.max_candidates) break;
    LoopEvent ev;
    ev.cur_node = cand.cur;
    ev.hist_node = cand.hist;
    ev.cur_frame = in.node_frame[cand.cur];
    ev.hist_frame = in.node_frame[cand.hist];
    std::vector<std::pair<int, Pose>> views = in.views;
    std::stable_sort(views.begin(), views.end(), [&](const auto& a, const auto& b) {
      const int da = std::abs(a.first - ev.hist_frame), db = std::abs(b.first - ev.hist_frame);
      return da != db ? da < db : a.first < b.first;
    });
    views.resize(std::min(views.size(), static_cast<std::size_t>(lc.neighbors)));
    std::vector<Pose> view_poses;
    for (const auto& v : views) view_poses.push_back(v.second);
    std::vector<std::size_t> target_idx;
    try {
      target_idx = extract_target_set(map_gaussians, view_poses, data.camera(), lc.d_max, excluded);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyTarget) throw;
      ev.outcome = "empty_target";
      out.events.push_back(ev);
      continue;
    }
    std::erase_if(target_idx, [&](std::size_t i) { return !planar_enough(map_gaussians[i], lc.planarity_max); });
    std::vector<Gaussian> target;
    for (std::size_t i : stride_subsample(target_idx.size(), lc.max_target)) target.push_back(map_gaussians[target_idx[i]]);
    ev.source_size = source.size();
    ev.target_size = target.size();
    GicpResult res;
    try {
      res = gaussian_gicp(source, target, cand.initial_guess, lc.gicp);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoCorrespondences) throw;
      ev.outcome = "no_correspondences";
      out.events.push_back(ev);
      continue;
    }
    ev.residual = res.residual;
    ev.correspondences = res.correspondences;
    ev.conditioning = res.conditioning;
    ev.iterations = res.iterations;
    const Pose& xh = in.graph.nodes[cand.hist];
    const Pose& xc = in.graph.nodes[cand.cur];
    const Pose z = xh.inverse() * res.transform * xc;
    const Pose z_gt = data.ground_truth()[ev.hist_frame].pose.inverse() * data.ground_truth()[ev.cur_frame].pose;
    ev.gt_rotation_error_deg = rotation_angle(z.rotation, z_gt.rotation) * 180.0 / 3.14159265358979323846;
    ev.gt_translation_error = (z.translation - z_gt.translation).norm();
    ev.accepted = accept_loop(res, lc.eps_res, lc.gicp.n_min);
    ev.outcome = ev.accepted ? "accepted" : "rejected";
    if (ev.accepted && res.conditioning < lc.min_conditioning) {
      ev.accepted = false;
      ev.outcome = "degenerate";
    }
    out.events.push_back(ev);
    if (!ev.accepted) continue;
    PoseGraphEdge edge;
    edge.i = cand.hist;
    edge.j = cand.cur;
    edge.measurement = z;
    edge.information = lc.info_loop * Mat6::Identity();
    edge.loop = true;
    PoseGraph g = in.graph;
    g.edges.push_back(edge);
    out.new_nodes = optimize_pose_graph(g).poses;
    out.edge = edge;
    break;
  }
  out.seconds = seconds_since(t0);
  return out;
}

class Backend {
 public:
  Backend(const Dataset& data, const PipelineConfig& cfg, CorrectionBoard& board)
      : data_(data), cfg_(cfg), board_(board), map_(cfg.r_dup, cfg.dedup_within_segment), rng_(cfg.seed) {}

  // Returns the new node index, or -1 for a trailing-frames message.
  int insert(SegmentMsg&& msg) {
    const auto t0 = Clock::now();
    const auto [v, c] = board_.latest();
    const Pose align = c * board_.at(msg.version).inverse();
    const bool moved = v != msg.version;
    if (msg.segment_id < 0) {
      for (const auto& f : msg.frames) record_frame(f.index, align * f.pose, static_cast<int>(graph_.nodes.size()) - 1);
      insert_seconds += seconds_since(t0);
      return -1;
    }
    if (msg.first) {
      graph_.nodes.push_back(align * msg.first_node_pose);
      node_frame_.push_back(0);
    }
    Segment& seg = msg.build.segment;
    if (moved) {
      for (auto& g : seg.gaussians) {
        g.mean = align * g.mean;
        g.set_quat(align.rotation * g.quat());
      }
      for (auto& view : msg.views) view.pose = align * view.pose;
    }
    seg.correction = align;
    const int node = static_cast<int>(graph_.nodes.size());
    const int prev = node - 1;
    graph_.nodes.push_back(align * msg.node_pose);
    node_frame_.push_back(msg.node_frame);
    PoseGraphEdge odo;
    odo.i = prev;
    odo.j = node;
    odo.measurement = data_.odometry()[node_frame_[prev]].pose.inverse() * data_.odometry()[msg.node_frame].pose;
    odo.information = cfg_.loop.info_odometry * Mat6::Identity();
    graph_.edges.push_back(odo);
    node_of_segment_.push_back(node);
    segment_ids_.push_back(seg.id);
    source_ = seg.gaussians;
    counts_.model += msg.build.counts.model;
    counts_.pca += msg.build.counts.pca;
    counts_.heuristic += msg.build.counts.heuristic;
    map_.insert_segment(seg);
    for (auto& view : msg.views) map_.add_view(std::move(view));
    map_.apply_freeze_policy(cfg_.freeze_k);
    for (const auto& f : msg.frames) record_frame(f.index, align * f.pose, node);
    insert_seconds += seconds_since(t0);
    return node;
  }

  bool may_close_loop(int node) const {
    if (!cfg_.loop.enabled || node < cfg_.loop.min_gap) return false;
    return !find_candidates(graph_.nodes, node, cfg_.loop.r_search, cfg_.loop.min_gap).empty();
  }

  LoopInput loop_input(int node, bool copy_map) const {
    LoopInput in;
    in.node = node;
    in.graph = graph_;
    in.node_frame = node_frame_;
    in.node_of_segment = node_of_segment_;
    in.segment_ids = segment_ids_;
    in.source = source_;
    if (copy_map) in.map.assign(map_.gaussians().begin(), map_.gaussians().end());
    for (const auto& v : map_.views()) in.views.emplace_back(v.frame_index, v.pose);
    return in;
  }

  void apply(const LoopOutput& out) {
    const auto t0 = Clock::now();
    loops.insert(loops.end(), out.events.begin(), out.events.end());
    loop_seconds += out.seconds;
    if (!out.edge) return;
    const std::vector<Pose> old = graph_.nodes;
    std::vector<Pose> updated = out.new_nodes;
    const std::size_t known = updated.size();
    const Pose last_delta = updated.back() * old[known - 1].inverse();
    for (std::size_t n = known; n < old.size(); ++n) updated.push_back(last_delta * old[n]);
    propagate_correction(map_, old, updated, node_of_segment_);
    for (auto& f : frames_) {
      if (f.node < 0) continue;
      f.pose = updated[f.node] * old[f.node].inverse() * f.pose;
    }
    graph_.nodes = updated;
    graph_.edges.push_back(*out.edge);
    board_.push(updated.back() * old.back().inverse());
    insert_seconds += seconds_since(t0);
  }

  bool has_views() const { return !map_.views().empty(); }

  void step() {
    const auto t0 = Clock::now();
    const auto batch = sample_views(map_.views().size(), cfg_.window, static_cast<std::size_t>(cfg_.batch), rng_);
    for (std::size_t b : batch) {
      if (is_test_frame(map_.views()[b].frame_index, cfg_.hold_out)) ++held_out_violations;
    }
    const LossRecord rec = optimize_step(map_, data_.camera(), batch, cfg_.opt, state_);
    ++steps;
    if (rec.views_used > 0) recent_losses_.push_back(rec.terms.total);
    if (recent_losses_.size() > 100) recent_losses_.pop_front();
    if (cfg_.prune_every > 0 && steps % static_cast<std::size_t>(cfg_.prune_every) == 0)
      pruned += map_.prune(cfg_.prune_opacity, cfg_.prune_ratio);
    optimize_seconds += seconds_since(t0);
  }

  double recent_loss() const {
    if (recent_losses_.empty()) return 0.0;
    double s = 0.0;
    for (double l : recent_losses_) s += l;
    return s / static_cast<double>(recent_losses_.size());
  }

  std::vector<TimedPose> trajectory() const {
    std::vector<TimedPose> out(data_.size());
    std::vector<bool> seen(data_.size(), false);
    for (const auto& f : frames_) {
      out[f.index] = {data_.ground_truth()[f.index].timestamp, f.pose};
      seen[f.index] = true;
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
      throw Error(ErrorCode::InvalidArgument, kModule, "trajectory is missing frames");
    return out;
  }

  GlobalMap& map() { return map_; }
  const PoseGraph& graph() const { return graph_; }
  const SourceCounts& counts() const { return counts_; }

  std::size_t steps = 0;
  std::size_t pruned = 0;
  std::size_t held_out_violations = 0;
  std::vector<LoopEvent> loops;
  double optimize_seconds = 0.0;
  double insert_seconds = 0.0;
  double loop_seconds = 0.0;

 private:
  struct TrackedFrame {
    int index;
    Pose pose;
    int node;
  };

  void record_frame(int index, const Pose& pose, int node) { frames_.push_back({index, pose, node}); }

  const Dataset& data_;
  const PipelineConfig& cfg_;
  CorrectionBoard& board_;
  GlobalMap map_;
  PoseGraph graph_;
  std::vector<int> node_frame_;
  std::vector<int> node_of_segment_;
  std::vector<int> segment_ids_;
  std::vector<Gaussian> source_;
  std::vector<TrackedFrame> frames_;
  SourceCounts counts_;
  OptimizerState state_;
  std::mt19937_64 rng_;
  std::deque<double> recent_losses_;
};

template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t depth) : depth_(std::max<std::size_t>(depth, 1)) {}

  void push(T v) {
    std::unique_lock lock(m_);
    not_full_.wait(lock, [&] { return q_.size() < depth_; });
    q_.push_back(std::move(v));
    not_empty_.notify_one();
  }
  // Blocks until an item arrives or the queue is closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(m_);
    not_empty_.wait(lock, [&] { return !q_.empty() || closed_; });
    return take();
  }
  std::optional<T> try_pop() {
    std::lock_guard lock(m_);
    return take();
  }
  std::optional<T> pop_for(std::chrono::milliseconds timeout) {
    std::unique_lock lock(m_);
    not_empty_.wait_for(lock, timeout, [&] { return !q_.empty() || closed_; });
    return take();
  }
  void close() {
    std::lock_guard lock(m_);
    closed_ = true;
    not_empty_.notify_all();
  }
  bool drained() const {
    std::lock_guard lock(m_);
    return closed_ && q_.empty();
  }

 private:
  std::optional<T> take() {
    if (q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    not_full_.notify_one();
    return v;
  }

  std::size_t depth_;
  mutable std::mutex m_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::deque<T> q_;
  bool closed_ = false;
};

std::string module_context(const Error& e, int frame) {
  return "frame " + std::to_string(frame) + ": " + e.what();
}

double peak_rss_mb() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("VmHWM:", 0) == 0) return std::stod(line.substr(6)) / 1024.0;
  }
  return 0.0;
}

nlohmann::json loop_json(const LoopEvent& e) {
  return {{"cur_node", e.cur_node},
          {"hist_node", e.hist_node},
          {"cur_frame", e.cur_frame},
          {"hist_frame", e.hist_frame},
          {"outcome", e.outcome},
          {"residual", e.residual},
          {"source_size", e.source_size},
          {"target_size", e.target_size},
          {"correspondences", e.correspondences},
          {"conditioning", e.conditioning},
          {"iterations", e.iterations},
          {"gt_rotation_error_deg", e.gt_rotation_error_deg},
          {"gt_translation_error", e.gt_translation_error}};
}

// A positive total_steps is the exact step budget of the run: streamed steps
// stop there and missing ones are made up after the stream.
std::size_t step_cap(const PipelineConfig& cfg) {
  return cfg.total_steps > 0 ? static_cast<std::size_t>(cfg.total_steps) : std::numeric_limits<std::size_t>::max();
}

std::size_t stream_budget(const PipelineConfig& cfg, int frames_ingested) {
  return std::min(static_cast<std::size_t>(cfg.steps_per_frame) * static_cast<std::size_t>(frames_ingested),
                  step_cap(cfg));
}

void run_deterministic(const Dataset& data, const PipelineConfig& cfg, Frontend& fe, Backend& be) {
  auto handle = [&](std::optional<SegmentMsg> msg) {
    if (!msg) return;
    const int node = be.insert(std::move(*msg));
    if (node > 0 && be.may_close_loop(node)) {
      const LoopInput in = be.loop_input(node, false);
      be.apply(loop_check(in, be.map().gaussians(), cfg, data));
    }
  };
  for (int k = 0; k < data.size(); ++k) {
    try {
      handle(fe.ingest(k));
    } catch (const Error& e) {
      throw Error(e.code(), e.module(), module_context(e, k));
    }
    if (be.has_views())
      for (int s = 0; s < cfg.steps_per_frame && be.steps < step_cap(cfg); ++s) be.step();
  }
  handle(fe.finish());
  while (be.has_views() && be.steps < static_cast<std::size_t>(cfg.total_steps)) be.step();
}

struct StreamTimes {
  double producer_busy = 0.0;
  double loop_busy = 0.0;
  double optimizer_busy = 0.0;
};

StreamTimes run_streaming(const Dataset& data, const PipelineConfig& cfg, Frontend& fe, Backend& be) {
  BoundedQueue<SegmentMsg> segments(cfg.queue_depth);
  BoundedQueue<LoopInput> loop_jobs(cfg.queue_depth);
  BoundedQueue<LoopOutput> corrections(1u << 20);
  std::atomic<int> ingested{0};
  std::exception_ptr producer_error, loop_error;
  StreamTimes times;
  const auto start = Clock::now();

  std::thread producer([&] {
    int k = 0;
    try {
      for (; k < data.size(); ++k) {
        if (cfg.paced) {
          const auto due = start + std::chrono::duration<double>(data.ground_truth()[k].timestamp);
          std::this_thread::sleep_until(due);
        }
        const auto t0 = Clock::now();
        auto msg = fe.ingest(k);
        times.producer_busy += seconds_since(t0);
        if (msg) segments.push(std::move(*msg));
        ingested.store(k + 1);
      }
      const auto t0 = Clock::now();
      auto msg = fe.finish();
      times.producer_busy += seconds_since(t0);
      if (msg) segments.push(std::move(*msg));
    } catch (const Error& e) {
      producer_error = std::make_exception_ptr(Error(e.code(), e.module(), module_context(e, k)));
    } catch (...) {
      producer_error = std::current_exception();
    }
    segments.close();
  });

  std::thread looper([&] {
    try {
      while (auto job = loop_jobs.pop()) {
        const auto t0 = Clock::now();
        auto out = loop_check(*job, job->map, cfg, data);
        times.loop_busy += seconds_since(t0);
        corrections.push(std::move(out));
      }
    } catch (...) {
      loop_error = std::current_exception();
      corrections.push(LoopOutput{});
    }
  });

  bool in_flight = false;
  std::deque<int> waiting_nodes;
  auto dispatch = [&] {
    if (in_flight || waiting_nodes.empty()) return;
    const int node = waiting_nodes.front();
    waiting_nodes.pop_front();
    loop_jobs.push(be.loop_input(node, true));
    in_flight = true;
  };
  auto drain_corrections = [&] {
    while (auto out = corrections.try_pop()) {
      be.apply(*out);
      in_flight = false;
    }
  };

  try {
    while (true) {
      while (auto msg = segments.try_pop()) {
        const int node = be.insert(std::move(*msg));
        if (node > 0 && be.may_close_loop(node)) waiting_nodes.push_back(node);
      }
      drain_corrections();
      dispatch();
      const auto budget = stream_budget(cfg, ingested.load());
      if (be.has_views() && be.steps < budget) {
        be.step();
        continue;
      }
      if (segments.drained()) break;
      if (auto msg = segments.pop_for(std::chrono::milliseconds(2))) {
        const int node = be.insert(std::move(*msg));
        if (node > 0 && be.may_close_loop(node)) waiting_nodes.push_back(node);
      }
    }
    while (in_flight || !waiting_nodes.empty()) {
      if (!in_flight) dispatch();
      if (auto out = corrections.pop_for(std::chrono::milliseconds(50))) {
        be.apply(*out);
        in_flight = false;
      } else if (be.has_views()) {
        const auto budget = stream_budget(cfg, ingested.load());
        if (be.steps < budget) be.step();
      }
    }
    const auto budget = stream_budget(cfg, ingested.load());
    const auto final_budget = cfg.total_steps > 0 ? static_cast<std::size_t>(cfg.total_steps) : budget;
    while (be.has_views() && be.steps < final_budget) be.step();
  } catch (...) {
    loop_jobs.close();
    producer.join();
    looper.join();
    throw;
  }
  loop_jobs.close();
  producer.join();
  looper.join();
  if (producer_error) std::rethrow_exception(producer_error);
  if (loop_error) std::rethrow_exception(loop_error);
  times.optimizer_busy = be.optimize_seconds;
  return times;
}

}  // namespace

bool is_test_frame(int index, int hold_out) { return hold_out > 0 && index % hold_out == hold_out - 1; }

nlohmann::json config_to_json(const PipelineConfig& cfg) {
  PipelineConfig c = cfg;
  nlohmann::json j = nlohmann::json::object();
  visit_config(c, [&](const std::string& key, auto& value) { j[pointer(key)] = value; });
  return j;
}

PipelineConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, kModule, "config must be a JSON object");
  const nlohmann::json defaults = config_to_json(PipelineConfig{});
  const auto known = defaults.flatten();
  const auto given = j.flatten();
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw Error(ErrorCode::InvalidArgument, kModule, "unknown config key " + key);
  }
  nlohmann::json merged = defaults;
  merged.merge_patch(j);
  PipelineConfig c;
  visit_config(c, [&](const std::string& key, auto& value) {
    try {
      merged.at(pointer(key)).get_to(value);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, kModule, "bad value for " + key + ": " + e.what());
    }
  });
  if (c.mode != "deterministic" && c.mode != "streaming")
    throw Error(ErrorCode::InvalidArgument, kModule, "mode must be deterministic or streaming");
  if (c.hold_out < 0 || c.batch < 1 || c.steps_per_frame < 0 || c.total_steps < 0 || c.queue_depth < 1)
    throw Error(ErrorCode::InvalidArgument, kModule, "invalid run parameters");
  c.opt.render.sh_degree = c.init.sh_degree;
  return c;
}

void apply_override(nlohmann::json& j, const std::string& dotted_key, const std::string& value) {
  nlohmann::json v = nlohmann::json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  j[pointer(dotted_key)] = v;
}

PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, kModule, "cannot read config " + path.string());
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::IoError, kModule, std::string("malformed config: ") + e.what());
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::InvalidArgument, kModule, "override must be key=value: " + o);
    apply_override(j, o.substr(0, eq), o.substr(eq + 1));
  }
  return config_from_json(j);
}

EvalResult evaluate_views(std::span<const Gaussian> gaussians, const Dataset& data,
                          std::span<const TimedPose> trajectory, int hold_out, const RenderConfig& render_cfg) {
  EvalResult res;
  const int n = std::min(data.size(), static_cast<int>(trajectory.size()));
  for (int k = 0; k < n; ++k) {
    if (!is_test_frame(k, hold_out)) continue;
    const Image gt = data.load_rgb(k);
    const RenderOutput out = render(gaussians, data.camera(), trajectory[k].pose, render_cfg);
    ViewMetrics m;
    m.frame = k;
    m.psnr = psnr(out.color, gt);
    m.ssim = ssim(out.color, gt);
    res.views.push_back(m);
  }
  if (res.views.empty()) throw Error(ErrorCode::MissingViews, kModule, "no held-out views to evaluate");
  for (const auto& v : res.views) {
    res.mean_psnr += v.psnr;
    res.mean_ssim += v.ssim;
  }
  res.mean_psnr /= static_cast<double>(res.views.size());
  res.mean_ssim /= static_cast<double>(res.views.size());
  return res;
}

RunResult run_pipeline(const Dataset& data, const PipelineConfig& cfg) {
  if (data.size() == 0) throw Error(ErrorCode::InvalidArgument, kModule, "empty dataset");
  const auto start = Clock::now();
  CorrectionBoard board;
  Frontend fe(data, cfg, board);
  Backend be(data, cfg, board);
  StreamTimes times;
  if (cfg.mode == "streaming") {
    times = run_streaming(data, cfg, fe, be);
  } else {
    run_deterministic(data, cfg, fe, be);
  }
  const double wall = seconds_since(start);

  RunResult run;
  run.trajectory = be.trajectory();
  run.loops = be.loops;
  run.held_out_violations = be.held_out_violations;
  std::vector<Pose> est, odo, gt;
  for (int k = 0; k < data.size(); ++k) {
    est.push_back(run.trajectory[k].pose);
    odo.push_back(data.odometry()[k].pose);
    gt.push_back(data.ground_truth()[k].pose);
  }
  run.ate = umeyama_align(est, gt).ate_rmse;
  run.ate_odometry = umeyama_align(odo, gt).ate_rmse;
  const auto eval_start = Clock::now();
  run.eval = evaluate_views(be.map().gaussians(), data, run.trajectory, cfg.hold_out, cfg.opt.render);
  const double eval_seconds = seconds_since(eval_start);
  run.graph = be.graph();

  std::size_t accepted = 0;
  nlohmann::json loops = nlohmann::json::array();
  for (const auto& e : run.loops) {
    loops.push_back(loop_json(e));
    accepted += e.accepted ? 1 : 0;
  }
  nlohmann::json views = nlohmann::json::array();
  for (const auto& v : run.eval.views) views.push_back({{"frame", v.frame}, {"psnr", v.psnr}, {"ssim", v.ssim}});
  std::size_t frozen = 0;
  for (const auto& g : be.map().gaussians()) frozen += g.frozen ? 1 : 0;
  run.report = {{"frames", data.size()},
                {"mode", cfg.mode},
                {"keyframe_views", be.map().views().size()},
                {"segments", be.map().segments().size()},
                {"graph_nodes", run.graph.nodes.size()},
                {"graph_edges", run.graph.edges.size()},
                {"gaussians", be.map().size()},
                {"gaussians_frozen", frozen},
                {"pruned", be.pruned},
                {"init_sources",
                 {{"model", be.counts().model}, {"pca", be.counts().pca}, {"heuristic", be.counts().heuristic}}},
                {"steps", be.steps},
                {"recent_loss", be.recent_loss()},
                {"ate_rmse", run.ate},
                {"ate_rmse_odometry", run.ate_odometry},
                {"loops_accepted", accepted},
                {"loops", loops},
                {"held_out_violations", run.held_out_violations},
                {"eval", {{"mean_psnr", run.eval.mean_psnr}, {"mean_ssim", run.eval.mean_ssim}, {"views", views}}},
                {"config", config_to_json(cfg)}};

  const double duration = static_cast<double>(data.size()) / data.meta().rate;
  const double optimizer = be.optimize_seconds;
  const double loop = cfg.mode == "streaming" ? times.loop_busy : be.loop_seconds;
  const double ingest = cfg.mode == "streaming" ? times.producer_busy : 0.0;
  char rtf[32], rtf_opt[32];
  std::snprintf(rtf, sizeof(rtf), "%.2f", wall / duration);
  std::snprintf(rtf_opt, sizeof(rtf_opt), "%.2f", optimizer / duration);
  run.timing = {{"mode", cfg.mode},
                {"wall_seconds", wall},
                {"stream_seconds", duration},
                {"real_time_factor", std::stod(rtf)},
                {"real_time_factor_optimizer_only", std::stod(rtf_opt)},
                {"optimizer_seconds", optimizer},
                {"loop_seconds", loop},
                {"producer_seconds", ingest},
                {"init_seconds", fe.init_seconds},
                {"eval_seconds", eval_seconds},
                {"steps", be.steps},
                {"peak_rss_mb", peak_rss_mb()}};
  run.map = std::move(be.map());
  return run;
}

void write_run(const RunResult& run, const PipelineConfig& cfg, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  auto write_json = [&](const std::string& name, const nlohmann::json& j) {
    std::ofstream os(out / name);
    if (!os) throw Error(ErrorCode::IoError, kModule, "cannot write " + (out / name).string());
    os << j.dump(2) << '\n';
  };
  write_json("report.json", run.report);
  write_json("timing.json", run.timing);
  write_trajectory_tsv(out / "trajectory.tsv", run.trajectory);
  save_checkpoint(out / "map.ply", run.map, cfg.init.sh_degree, config_to_json(cfg).dump());
  write_pose_graph(out / "pose_graph.txt", run.graph);
}

}  // namespace splatmap
