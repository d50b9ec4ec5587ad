#include "splatmap/map_opt.hpp"

#include "splatmap/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace splatmap {

namespace {

constexpr const char* kModule = "map_opt";

nlohmann::json pose_json(const Pose& p) {
  return {{"t", {p.translation.x(), p.translation.y(), p.translation.z()}},
          {"q", {p.rotation.w(), p.rotation.x(), p.rotation.y(), p.rotation.z()}}};
}

const char* source_name(InitSource s) {
  switch (s) {
    case InitSource::Model: return "model";
    case InitSource::Pca: return "pca";
    case InitSource::Heuristic: return "heuristic";
  }
  return "heuristic";
}

void flatten(const GaussianGrad& g, std::array<double, kParamsPerGaussian>& out) {
  int k = 0;
  for (int i = 0; i < 3; ++i) out[k++] = g.mean(i);
  for (int i = 0; i < 3; ++i) out[k++] = g.log_scale(i);
  for (int i = 0; i < 4; ++i) out[k++] = g.rotation(i);
  out[k++] = g.opacity_logit;
  for (int j = 0; j < kMaxShCoeffs; ++j)
    for (int c = 0; c < 3; ++c) out[k++] = g.sh[j](c);
}

void accumulate(GaussianGrad& acc, const GaussianGrad& g) {
  acc.mean += g.mean;
  acc.log_scale += g.log_scale;
  acc.rotation += g.rotation;
  acc.opacity_logit += g.opacity_logit;
  for (int j = 0; j < kMaxShCoeffs; ++j) acc.sh[j] += g.sh[j];
  acc.touched = true;
}

}  // namespace

void PointGrid::insert(const Vec3& p, std::size_t index) { cells_[voxel_index(p, cell_)].push_back(index); }

std::vector<std::size_t> PointGrid::within(const Vec3& p, double r, std::span<const Vec3> points) const {
  std::vector<std::size_t> out;
  const VoxelKey c = voxel_index(p, cell_);
  const auto reach = static_cast<std::int64_t>(std::ceil(r / cell_));
  for (std::int64_t dx = -reach; dx <= reach; ++dx) {
    for (std::int64_t dy = -reach; dy <= reach; ++dy) {
      for (std::int64_t dz = -reach; dz <= reach; ++dz) {
        auto it = cells_.find({c[0] + dx, c[1] + dy, c[2] + dz});
        if (it == cells_.end()) continue;
        for (std::size_t i : it->second) {
          if ((points[i] - p).squaredNorm() <= r * r) out.push_back(i);
        }
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool PointGrid::any_within(const Vec3& p, double r, std::span<const Vec3> points) const {
  const VoxelKey c = voxel_index(p, cell_);
  const auto reach = static_cast<std::int64_t>(std::ceil(r / cell_));
  for (std::int64_t dx = -reach; dx <= reach; ++dx) {
    for (std::int64_t dy = -reach; dy <= reach; ++dy) {
      for (std::int64_t dz = -reach; dz <= reach; ++dz) {
        auto it = cells_.find({c[0] + dx, c[1] + dy, c[2] + dz});
        if (it == cells_.end()) continue;
        for (std::size_t i : it->second) {
          if ((points[i] - p).squaredNorm() <= r * r) return true;
        }
      }
    }
  }
  return false;
}

GlobalMap::GlobalMap(double r_dup, bool dedup_within_segment)
    : r_dup_(r_dup), dedup_within_segment_(dedup_within_segment), grid_(r_dup > 0.0 ? r_dup : 1.0) {
  if (r_dup < 0.0) throw Error(ErrorCode::InvalidArgument, kModule, "r_dup must be non-negative");
}

std::size_t GlobalMap::insert_segment(const Segment& seg) {
  if (!segments_.empty() && seg.id <= segments_.back().id) {
    throw Error(ErrorCode::InvalidArgument, kModule, "segment ids must be strictly increasing");
  }
  SegmentRecord rec;
  rec.id = seg.id;
  rec.loopframe_index = seg.loopframe_index;
  rec.anchor_pose = seg.anchor_pose;
  rec.correction = seg.correction;
  rec.begin = gaussians_.size();
  std::vector<std::size_t> pending;
  for (const auto& cand : seg.gaussians) {
    if (r_dup_ > 0.0 && grid_.any_within(cand.mean, r_dup_, means_)) continue;
    Gaussian g = cand;
    g.segment_id = seg.id;
    g.id = next_id_++;
    gaussians_.push_back(g);
    means_.push_back(g.mean);
    if (dedup_within_segment_) {
      grid_.insert(g.mean, means_.size() - 1);
    } else {
      pending.push_back(means_.size() - 1);
    }
  }
  for (std::size_t i : pending) grid_.insert(means_[i], i);
  rec.end = gaussians_.size();
  segments_.push_back(rec);
  return rec.end - rec.begin;
}

const SegmentRecord* GlobalMap::find_segment(int id) const {
  for (const auto& s : segments_)
    if (s.id == id) return &s;
  return nullptr;
}

std::span<const Gaussian> GlobalMap::segment_gaussians(int id) const {
  const auto* s = find_segment(id);
  if (!s) return {};
  return std::span<const Gaussian>(gaussians_).subspan(s->begin, s->end - s->begin);
}

void GlobalMap::rebuild_index() {
  means_.resize(gaussians_.size());
  grid_.clear();
  for (std::size_t i = 0; i < gaussians_.size(); ++i) {
    means_[i] = gaussians_[i].mean;
    grid_.insert(means_[i], i);
  }
  // Gaussians stay grouped by segment in insertion order.
  std::size_t cursor = 0;
  for (auto& s : segments_) {
    s.begin = cursor;
    while (cursor < gaussians_.size() && gaussians_[cursor].segment_id == s.id) ++cursor;
    s.end = cursor;
  }
}

void GlobalMap::apply_freeze_policy(int k) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, kModule, "freeze window K must be >= 1");
  const std::size_t n = segments_.size();
  for (std::size_t s = 0; s < n; ++s) {
    const bool frozen = s + static_cast<std::size_t>(k) < n;
    for (std::size_t i = segments_[s].begin; i < segments_[s].end; ++i) gaussians_[i].frozen = frozen;
  }
}

std::size_t GlobalMap::prune(double o_thresh, double max_ratio) {
  if (max_ratio < 0.0 || max_ratio > 1.0) throw Error(ErrorCode::InvalidArgument, kModule, "max_ratio outside [0,1]");
  std::size_t unfrozen = 0;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < gaussians_.size(); ++i) {
    if (gaussians_[i].frozen) continue;
    ++unfrozen;
    if (sigmoid(gaussians_[i].opacity_logit) < o_thresh) candidates.push_back(i);
  }
  const auto budget = static_cast<std::size_t>(std::floor(max_ratio * static_cast<double>(unfrozen) + 1e-12));
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    return gaussians_[a].opacity_logit < gaussians_[b].opacity_logit;
  });
  candidates.resize(std::min(candidates.size(), budget));
  if (candidates.empty()) return 0;
  std::vector<bool> drop(gaussians_.size(), false);
  for (std::size_t i : candidates) drop[i] = true;
  std::size_t w = 0;
  for (std::size_t i = 0; i < gaussians_.size(); ++i) {
    if (!drop[i]) gaussians_[w++] = gaussians_[i];
  }
  gaussians_.resize(w);
  rebuild_index();
  return candidates.size();
}

void GlobalMap::set_segment_correction(int segment_id, const Pose& correction) {
  const std::pair<int, Pose> one{segment_id, correction};
  set_segment_corrections(std::span(&one, 1));
}

void GlobalMap::set_segment_corrections(std::span<const std::pair<int, Pose>> corrections) {
  for (const auto& [segment_id, correction] : corrections) {
    SegmentRecord* rec = nullptr;
    for (auto& s : segments_)
      if (s.id == segment_id) rec = &s;
    if (!rec) throw Error(ErrorCode::InvalidArgument, kModule, "unknown segment " + std::to_string(segment_id));
    const Pose delta = correction * rec->correction.inverse();
    for (std::size_t i = rec->begin; i < rec->end; ++i) {
      Gaussian& g = gaussians_[i];
      g.mean = delta * g.mean;
      g.set_quat(delta.rotation * g.quat());
    }
    for (auto& v : views_) {
      if (v.segment_id == segment_id) v.pose = delta * v.pose;
    }
    rec->correction = correction;
  }
  rebuild_index();
}

std::vector<std::size_t> sample_views(std::size_t view_count, const WindowConfig& cfg, std::size_t batch,
                                      std::mt19937_64& rng) {
  if (view_count == 0) throw Error(ErrorCode::MissingViews, kModule, "no committed views to sample");
  const std::size_t recent = std::min(view_count, static_cast<std::size_t>(std::max(cfg.recent, 1)));
  const std::size_t recent_begin = view_count - recent;
  const std::size_t history_begin =
      cfg.history > 0 ? recent_begin - std::min(recent_begin, static_cast<std::size_t>(cfg.history)) : 0;
  const std::size_t history = recent_begin - history_begin;
  std::bernoulli_distribution pick_recent(std::clamp(cfg.recent_ratio, 0.0, 1.0));
  std::vector<std::size_t> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (history == 0 || pick_recent(rng)) {
      out.push_back(recent_begin + std::uniform_int_distribution<std::size_t>(0, recent - 1)(rng));
    } else {
      out.push_back(history_begin + std::uniform_int_distribution<std::size_t>(0, history - 1)(rng));
    }
  }
  return out;
}

LossRecord optimize_step(GlobalMap& map, const Camera& cam, std::span<const std::size_t> batch,
                         const OptimizerConfig& cfg, OptimizerState& state) {
  LossRecord rec;
  auto& gs = map.mutable_gaussians();
  // Views are rendered over the Gaussians that survive culling only; the
  // others contribute nothing, so the result is unchanged.
  std::unordered_map<std::size_t, GaussianGrad> acc;
  std::vector<std::size_t> ids;
  std::vector<Gaussian> visible;
  visible.reserve(gs.size());
  ids.reserve(gs.size());
  for (std::size_t vi : batch) {
    const KeyView& view = map.views().at(vi);
    ids.clear();
    visible.clear();
    for (std::size_t i = 0; i < gs.size(); ++i) {
      if (!project_gaussian(gs[i], cam, view.pose, cfg.render)) continue;
      ids.push_back(i);
      visible.push_back(gs[i]);
    }
    const auto fwd = render(visible, cam, view.pose, cfg.render);
    const Mask mask = interior_mask(fwd.acc_alpha, cfg.alpha_thresh, cfg.r_erode);
    if (mask.count() == 0) {
      ++rec.views_skipped;
      continue;
    }
    const auto b = backward(visible, cam, view.pose, fwd, *view.rgb, *view.depth, mask, cfg.weights, cfg.render);
    rec.terms.total += b.terms.total;
    rec.terms.rgb += b.terms.rgb;
    rec.terms.ssim += b.terms.ssim;
    rec.terms.depth += b.terms.depth;
    rec.terms.supervised_pixels += b.terms.supervised_pixels;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (b.grads[k].touched) accumulate(acc[ids[k]], b.grads[k]);
    }
    ++rec.views_used;
  }
  if (rec.views_used == 0) return rec;
  const double inv = 1.0 / rec.views_used;
  rec.terms.total *= inv;
  rec.terms.rgb *= inv;
  rec.terms.ssim *= inv;
  rec.terms.depth *= inv;

  std::array<double, kParamsPerGaussian> lr;
  {
    int k = 0;
    for (int i = 0; i < 3; ++i) lr[k++] = cfg.lr_mean * cfg.spatial_scale;
    for (int i = 0; i < 3; ++i) lr[k++] = cfg.lr_scale;
    for (int i = 0; i < 4; ++i) lr[k++] = cfg.lr_rotation;
    lr[k++] = cfg.lr_opacity;
    while (k < kParamsPerGaussian) lr[k++] = cfg.lr_sh;
  }

  ++state.steps;
  std::array<double, kParamsPerGaussian> grad;
  std::vector<std::size_t> order;
  order.reserve(acc.size());
  for (const auto& [i, unused] : acc) order.push_back(i);
  std::sort(order.begin(), order.end());
  for (std::size_t i : order) {
    Gaussian& g = gs[i];
    const GaussianGrad& ga = acc.at(i);
    if (g.frozen || !ga.touched) continue;
    flatten(ga, grad);
    bool nonzero = false;
    for (double& v : grad) {
      v *= inv;
      nonzero = nonzero || v != 0.0;
    }
    if (!nonzero) continue;
    AdamMoments& mo = state.moments[g.id];
    ++mo.steps;
    const double bc1 = 1.0 - std::pow(cfg.beta1, mo.steps);
    const double bc2 = 1.0 - std::pow(cfg.beta2, mo.steps);
    std::array<double, kParamsPerGaussian> step;
    for (int k = 0; k < kParamsPerGaussian; ++k) {
      mo.m[k] = cfg.beta1 * mo.m[k] + (1.0 - cfg.beta1) * grad[k];
      mo.v[k] = cfg.beta2 * mo.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
      step[k] = lr[k] * (mo.m[k] / bc1) / (std::sqrt(mo.v[k] / bc2) + cfg.eps);
    }
    int k = 0;
    for (int j = 0; j < 3; ++j) g.mean(j) -= step[k++];
    for (int j = 0; j < 3; ++j) g.log_scale(j) -= step[k++];
    for (int j = 0; j < 4; ++j) g.rotation(j) -= step[k++];
    g.opacity_logit -= step[k++];
    for (int j = 0; j < kMaxShCoeffs; ++j)
      for (int c = 0; c < 3; ++c) g.sh[j](c) -= step[k++];
    const double qn = g.rotation.norm();
    if (qn > 0.0) g.rotation /= qn;
    ++rec.updated;
  }
  return rec;
}

void write_splat_ply(const std::filesystem::path& path, std::span<const Gaussian> gaussians, int sh_degree) {
  const int coeffs = sh_coeff_count(sh_degree);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, kModule, "cannot write " + path.string());
  std::ostringstream h;
  h << "ply\nformat binary_little_endian 1.0\nelement vertex " << gaussians.size() << "\n";
  for (const char* n : {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"}) h << "property float " << n << "\n";
  for (int i = 0; i < 3 * (coeffs - 1); ++i) h << "property float f_rest_" << i << "\n";
  h << "property float opacity\n";
  for (const char* n : {"scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"}) {
    h << "property float " << n << "\n";
  }
  h << "end_header\n";
  out << h.str();
  std::vector<float> row;
  for (const auto& g : gaussians) {
    row.clear();
    for (int i = 0; i < 3; ++i) row.push_back(static_cast<float>(g.mean(i)));
    row.insert(row.end(), {0.0f, 0.0f, 0.0f});
    for (int c = 0; c < 3; ++c) row.push_back(static_cast<float>(g.sh[0](c)));
    // Higher bands are stored channel-major.
    for (int c = 0; c < 3; ++c)
      for (int k = 1; k < coeffs; ++k) row.push_back(static_cast<float>(g.sh[k](c)));
    row.push_back(static_cast<float>(g.opacity_logit));
    for (int i = 0; i < 3; ++i) row.push_back(static_cast<float>(g.log_scale(i)));
    for (int i = 0; i < 4; ++i) row.push_back(static_cast<float>(g.rotation(i)));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw Error(ErrorCode::IoError, kModule, "short write to " + path.string());
}

std::vector<Gaussian> read_splat_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, kModule, "cannot read " + path.string());
  std::string line;
  std::size_t count = 0;
  std::vector<std::string> props;
  bool binary_le = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (word == "element") {
      std::string name;
      ls >> name >> count;
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      if (type != "float") throw Error(ErrorCode::IoError, kModule, "only float splat properties are supported");
      props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }
  if (!binary_le) throw Error(ErrorCode::IoError, kModule, path.string() + " is not a binary little-endian PLY");
  auto index_of = [&](const std::string& n) {
    const auto it = std::find(props.begin(), props.end(), n);
    return it == props.end() ? -1 : static_cast<int>(it - props.begin());
  };
  int n_rest = 0;
  while (index_of("f_rest_" + std::to_string(n_rest)) >= 0) ++n_rest;
  const int coeffs = 1 + n_rest / 3;
  if (coeffs > kMaxShCoeffs) throw Error(ErrorCode::IoError, kModule, "too many SH coefficients in " + path.string());
  for (const char* req : {"x", "y", "z", "f_dc_0", "opacity", "scale_0", "rot_0"}) {
    if (index_of(req) < 0) throw Error(ErrorCode::IoError, kModule, std::string("missing property ") + req);
  }
  std::vector<Gaussian> out(count);
  std::vector<float> row(props.size());
  for (auto& g : out) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) throw Error(ErrorCode::IoError, kModule, "truncated " + path.string());
    auto get = [&](const std::string& n) { return static_cast<double>(row[index_of(n)]); };
    g.mean = {get("x"), get("y"), get("z")};
    for (int c = 0; c < 3; ++c) g.sh[0](c) = get("f_dc_" + std::to_string(c));
    for (int c = 0; c < 3; ++c)
      for (int k = 1; k < coeffs; ++k) g.sh[k](c) = get("f_rest_" + std::to_string(c * (coeffs - 1) + k - 1));
    g.opacity_logit = get("opacity");
    for (int i = 0; i < 3; ++i) g.log_scale(i) = get("scale_" + std::to_string(i));
    for (int i = 0; i < 4; ++i) g.rotation(i) = get("rot_" + std::to_string(i));
    const double n = g.rotation.norm();
    if (n > 0.0) g.rotation /= n;
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& ply_path, const GlobalMap& map, int sh_degree,
                     const std::string& config_json) {
  if (ply_path.has_parent_path()) std::filesystem::create_directories(ply_path.parent_path());
  write_splat_ply(ply_path, map.gaussians(), sh_degree);
  nlohmann::json j;
  j["sh_degree"] = sh_degree;
  j["gaussian_count"] = map.size();
  j["segments"] = nlohmann::json::array();
  for (const auto& s : map.segments()) {
    j["segments"].push_back({{"id", s.id},
                             {"loopframe_index", s.loopframe_index},
                             {"begin", s.begin},
                             {"end", s.end},
                             {"anchor_pose", pose_json(s.anchor_pose)},
                             {"correction", pose_json(s.correction)}});
  }
  auto& per = j["gaussians"];
  per["id"] = nlohmann::json::array();
  per["segment_id"] = nlohmann::json::array();
  per["frozen"] = nlohmann::json::array();
  per["source"] = nlohmann::json::array();
  for (const auto& g : map.gaussians()) {
    per["id"].push_back(g.id);
    per["segment_id"].push_back(g.segment_id);
    per["frozen"].push_back(g.frozen);
    per["source"].push_back(source_name(g.source));
  }
  j["config"] = nlohmann::json::parse(config_json);
  auto sidecar = ply_path;
  sidecar.replace_extension(".json");
  std::ofstream out(sidecar);
  if (!out) throw Error(ErrorCode::IoError, kModule, "cannot write " + sidecar.string());
  out << j.dump(1) << "\n";
}

}  // namespace splatmap
