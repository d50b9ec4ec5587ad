#include "splatmap/gauss_init.hpp"

#include "splatmap/error.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <tuple>

namespace splatmap {

namespace {

constexpr const char* kModule = "gauss_init";

double luminance(const Image& rgb, int x, int y) {
  return 0.299 * rgb.at(x, y, 0) + 0.587 * rgb.at(x, y, 1) + 0.114 * rgb.at(x, y, 2);
}

struct Plane {
  const char* name;
  int channels;
};

std::vector<Plane> planes_for(int sh_coeffs) {
  return {{"rotation", 4}, {"scale_shape", 3}, {"opacity_logit", 1}, {"sh", 3 * sh_coeffs}, {"valid", 1}};
}

void write_maps(const std::filesystem::path& stem, const AttributeMaps& m) {
  nlohmann::json header;
  header["width"] = m.width;
  header["height"] = m.height;
  header["sh_coeffs"] = m.sh_coeffs;
  header["dtype"] = "float32";
  header["byte_order"] = "little";
  for (const auto& p : planes_for(m.sh_coeffs)) header["planes"].push_back({{"name", p.name}, {"channels", p.channels}});
  std::ofstream hj(stem.string() + ".json");
  if (!hj) throw Error(ErrorCode::IoError, kModule, "cannot write " + stem.string() + ".json");
  hj << header.dump(2) << "\n";

  std::ofstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw Error(ErrorCode::IoError, kModule, "cannot write " + stem.string() + ".bin");
  auto put = [&](const std::vector<float>& v) {
    bin.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  };
  put(m.rotation);
  put(m.scale_shape);
  put(m.opacity_logit);
  put(m.sh);
  std::vector<float> valid(m.valid.begin(), m.valid.end());
  put(valid);
}

AttributeMaps read_maps(const std::filesystem::path& stem) {
  std::ifstream hj(stem.string() + ".json");
  if (!hj) throw Error(ErrorCode::IoError, kModule, "cannot read " + stem.string() + ".json");
  nlohmann::json header;
  try {
    hj >> header;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoError, kModule, stem.string() + ".json: " + e.what());
  }
  if (header.value("dtype", "") != "float32" || header.value("byte_order", "little") != "little") {
    throw Error(ErrorCode::IoError, kModule, "unsupported attribute map encoding in " + stem.string() + ".json");
  }
  AttributeMaps m(header.at("width").get<int>(), header.at("height").get<int>(), header.at("sh_coeffs").get<int>());
  const std::size_t n = static_cast<std::size_t>(m.width) * m.height;

  std::ifstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw Error(ErrorCode::IoError, kModule, "cannot read " + stem.string() + ".bin");
  std::vector<float> valid(n);
  for (const auto& plane : header.at("planes")) {
    const std::string name = plane.at("name").get<std::string>();
    const int channels = plane.at("channels").get<int>();
    std::vector<float>* dst = nullptr;
    if (name == "rotation") dst = &m.rotation;
    else if (name == "scale_shape") dst = &m.scale_shape;
    else if (name == "opacity_logit") dst = &m.opacity_logit;
    else if (name == "sh") dst = &m.sh;
    else if (name == "valid") dst = &valid;
    std::vector<float> scratch;
    if (!dst) dst = &scratch;
    dst->resize(n * channels);
    bin.read(reinterpret_cast<char*>(dst->data()), static_cast<std::streamsize>(dst->size() * sizeof(float)));
    if (!bin) throw Error(ErrorCode::IoError, kModule, "truncated plane '" + name + "' in " + stem.string() + ".bin");
  }
  if (m.rotation.size() != 4 * n || m.scale_shape.size() != 3 * n || m.opacity_logit.size() != n ||
      m.sh.size() != 3 * n * m.sh_coeffs) {
    throw Error(ErrorCode::IoError, kModule, "missing planes in " + stem.string() + ".json");
  }
  for (std::size_t i = 0; i < n; ++i) m.valid[i] = valid[i] != 0.0f ? 1 : 0;
  return m;
}

}  // namespace

bool select_keyframe(int index, int gap) {
  if (gap < 1) throw Error(ErrorCode::InvalidArgument, kModule, "keyframe gap must be >= 1");
  return index % gap == 0;
}

bool select_loopframe(const Pose& pose, const Pose& last_loopframe_pose, double tau_t, double tau_r) {
  return (pose.translation - last_loopframe_pose.translation).norm() > tau_t ||
         rotation_angle(pose.rotation, last_loopframe_pose.rotation) > tau_r;
}

AttributeMaps::AttributeMaps(int w, int h, int coeffs)
    : width(w),
      height(h),
      sh_coeffs(coeffs),
      rotation(static_cast<std::size_t>(w) * h * 4, 0.0f),
      scale_shape(static_cast<std::size_t>(w) * h * 3, 1.0f),
      opacity_logit(static_cast<std::size_t>(w) * h, 0.0f),
      sh(static_cast<std::size_t>(w) * h * 3 * coeffs, 0.0f),
      valid(static_cast<std::size_t>(w) * h, 0) {
  for (std::size_t i = 0; i < rotation.size(); i += 4) rotation[i] = 1.0f;
}

std::size_t AttributeMaps::valid_count() const {
  std::size_t n = 0;
  for (unsigned char v : valid) n += v ? 1 : 0;
  return n;
}

void save_attribute_maps(const std::filesystem::path& dir, const AttributeMapPair& maps) {
  std::filesystem::create_directories(dir);
  write_maps(dir / "prev", maps.prev);
  write_maps(dir / "cur", maps.cur);
}

AttributeMapPair load_attribute_maps(const std::filesystem::path& dir) {
  return {read_maps(dir / "prev"), read_maps(dir / "cur")};
}

AttributeMaps StubProvider::predict_one(const Image& rgb) const {
  const int W = rgb.width, H = rgb.height;
  AttributeMaps m(W, H, cfg_.sh_coeffs);
  std::vector<double> lum(static_cast<std::size_t>(W) * H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) lum[static_cast<std::size_t>(y) * W + x] = luminance(rgb, x, y);
  auto L = [&](int x, int y) {
    x = std::clamp(x, 0, W - 1);
    y = std::clamp(y, 0, H - 1);
    return lum[static_cast<std::size_t>(y) * W + x];
  };
  const float opacity = static_cast<float>(logit(cfg_.opacity));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t p = m.pixel(x, y);
      double s = 0.0, s2 = 0.0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (x + dx < 0 || y + dy < 0 || x + dx >= W || y + dy >= H) continue;
          const double v = L(x + dx, y + dy);
          s += v;
          s2 += v * v;
          ++n;
        }
      }
      const double var = std::max(0.0, s2 / n - (s / n) * (s / n));
      if (std::sqrt(var) < cfg_.contrast_threshold) continue;
      m.valid[p] = 1;
      const double gx = 0.5 * (L(x + 1, y) - L(x - 1, y));
      const double gy = 0.5 * (L(x, y + 1) - L(x, y - 1));
      const double half = 0.5 * std::atan2(gy, gx);
      m.rotation[4 * p + 0] = static_cast<float>(std::cos(half));
      m.rotation[4 * p + 3] = static_cast<float>(std::sin(half));
      for (int k = 0; k < 3; ++k) m.scale_shape[3 * p + k] = static_cast<float>(cfg_.anisotropy(k));
      m.opacity_logit[p] = opacity;
      const std::size_t base = p * 3 * cfg_.sh_coeffs;
      for (int c = 0; c < 3; ++c) m.sh[base + c] = static_cast<float>((rgb.at(x, y, c) - 0.5) / kShC0);
    }
  }
  return m;
}

AttributeMapPair StubProvider::predict(const Image& prev_rgb, const Image& cur_rgb, int) {
  if (!prev_rgb.same_shape(cur_rgb) || prev_rgb.channels != 3) {
    throw Error(ErrorCode::DimensionMismatch, kModule, "attribute provider needs two RGB images of equal size");
  }
  return {predict_one(prev_rgb), predict_one(cur_rgb)};
}

std::filesystem::path DirectoryProvider::pair_dir(const std::filesystem::path& root, int pair_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%06d", pair_index);
  return root / buf;
}

AttributeMapPair DirectoryProvider::predict(const Image& prev_rgb, const Image& cur_rgb, int pair_index) {
  if (!prev_rgb.same_shape(cur_rgb)) {
    throw Error(ErrorCode::DimensionMismatch, kModule, "attribute provider needs two images of equal size");
  }
  auto maps = load_attribute_maps(pair_dir(root_, pair_index));
  if (maps.prev.width != prev_rgb.width || maps.prev.height != prev_rgb.height || maps.cur.width != cur_rgb.width ||
      maps.cur.height != cur_rgb.height) {
    throw Error(ErrorCode::DimensionMismatch, kModule, "stored attribute maps do not match the image size");
  }
  return maps;
}

std::unique_ptr<AttributeProvider> make_provider(const std::string& spec) {
  if (spec == "off") return nullptr;
  if (spec == "stub") return std::make_unique<StubProvider>();
  if (spec.rfind("dir:", 0) == 0) return std::make_unique<DirectoryProvider>(spec.substr(4));
  throw Error(ErrorCode::InvalidArgument, kModule, "unknown attribute provider '" + spec + "'");
}

ViewPick pick_view(const Vec3& p_world, const Camera& cam, const Pose& prev_pose, const Pose& cur_pose) {
  ViewPick best;
  auto consider = [&](View v, const Pose& pose) {
    const auto pr = try_project(cam, pose.inverse() * p_world);
    if (!pr || !pr->in_image) return;
    // Ties go to the current view, which is considered second.
    if (best.view == View::None || pr->depth <= best.depth) best = {v, pr->pixel, pr->depth};
  };
  consider(View::Prev, prev_pose);
  consider(View::Cur, cur_pose);
  return best;
}

std::vector<bool> resolve_pixel_conflicts(std::span<const ViewPick> picks, const Camera& cam) {
  std::vector<bool> keep(picks.size(), false);
  std::map<std::tuple<int, long, long>, std::size_t> owner;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const auto& p = picks[i];
    if (p.view == View::None) continue;
    const long px = std::clamp(std::lround(p.pixel.x()), 0L, static_cast<long>(cam.width - 1));
    const long py = std::clamp(std::lround(p.pixel.y()), 0L, static_cast<long>(cam.height - 1));
    const auto key = std::make_tuple(static_cast<int>(p.view), px, py);
    auto [it, inserted] = owner.emplace(key, i);
    if (!inserted && p.depth < picks[it->second].depth) it->second = i;
  }
  for (const auto& [key, i] : owner) keep[i] = true;
  return keep;
}

std::optional<ModelAttrs> sample_model_attrs(const AttributeMaps& maps, const Vec2& pixel, const Pose& cam_pose,
                                             double d, double f) {
  if (!(d > 0.0) || !(f > 0.0)) throw Error(ErrorCode::InvalidArgument, kModule, "depth and focal must be positive");
  const int x0 = static_cast<int>(std::floor(pixel.x()));
  const int y0 = static_cast<int>(std::floor(pixel.y()));
  const double fx = pixel.x() - x0, fy = pixel.y() - y0;
  struct Tap {
    std::size_t p;
    double w;
  };
  std::vector<Tap> taps;
  double wsum = 0.0;
  for (int dy = 0; dy <= 1; ++dy) {
    for (int dx = 0; dx <= 1; ++dx) {
      const int x = x0 + dx, y = y0 + dy;
      if (x < 0 || y < 0 || x >= maps.width || y >= maps.height) continue;
      const std::size_t p = maps.pixel(x, y);
      if (!maps.valid[p]) continue;
      const double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
      if (w <= 0.0) continue;
      taps.push_back({p, w});
      wsum += w;
    }
  }
  if (taps.empty() || wsum < 1e-12) return std::nullopt;

  auto quat_at = [&](std::size_t p) {
    return Vec4(maps.rotation[4 * p], maps.rotation[4 * p + 1], maps.rotation[4 * p + 2], maps.rotation[4 * p + 3]);
  };
  const auto ref = std::max_element(taps.begin(), taps.end(), [](const Tap& a, const Tap& b) { return a.w < b.w; });
  const Vec4 qref = quat_at(ref->p);
  Vec4 q = Vec4::Zero();
  Vec3 a = Vec3::Zero();
  double opacity = 0.0;
  ModelAttrs out;
  out.sh_coeffs = std::min(maps.sh_coeffs, kMaxShCoeffs);
  for (const auto& t : taps) {
    const double w = t.w / wsum;
    Vec4 qi = quat_at(t.p);
    if (qi.dot(qref) < 0.0) qi = -qi;
    q += w * qi;
    for (int k = 0; k < 3; ++k) a(k) += w * maps.scale_shape[3 * t.p + k];
    opacity += w * maps.opacity_logit[t.p];
    const std::size_t base = t.p * 3 * maps.sh_coeffs;
    for (int k = 0; k < out.sh_coeffs; ++k) {
      for (int c = 0; c < 3; ++c) out.sh[k](c) += w * maps.sh[base + 3 * k + c];
    }
  }
  if (q.norm() < 1e-12 || (a.array() <= 0.0).any()) return std::nullopt;
  q.normalize();
  out.rotation = (cam_pose.rotation * Quat(q(0), q(1), q(2), q(3))).normalized();
  const double gmean = std::cbrt(a(0) * a(1) * a(2));
  out.log_scale = ((d / f) * a / gmean).array().log();
  out.opacity_logit = opacity;
  return out;
}

double compute_beta(std::size_t n_pca_only, std::size_t n_total, double beta_min) {
  if (n_total == 0 || n_pca_only > n_total) {
    throw Error(ErrorCode::InvalidArgument, kModule, "beta needs 0 <= n_pca_only <= n_total and n_total >= 1");
  }
  return std::clamp(static_cast<double>(n_pca_only) / static_cast<double>(n_total), beta_min, 1.0);
}

Gaussian cascade_init(const WorldPoint& point, const GeomPrior& prior, const std::optional<ModelAttrs>& model,
                      double beta, double d, double f, const InitConfig& cfg) {
  Gaussian g;
  g.mean = point.position;
  g.sh[0] = color_to_sh_dc(point.color);
  if (model) {
    g.set_quat(model->rotation);
    g.log_scale = model->log_scale;
    g.opacity_logit = model->opacity_logit;
    const int n = std::min(model->sh_coeffs, sh_coeff_count(cfg.sh_degree));
    for (int k = 1; k < n; ++k) g.sh[k] = model->sh[k];
    g.source = InitSource::Model;
    return g;
  }
  g.opacity_logit = logit(cfg.opacity0);
  if (cfg.use_pca && prior.reliable) {
    g.set_quat(prior.rotation);
    g.log_scale = prior.log_scale + Vec3::Constant(std::log(beta));
    g.source = InitSource::Pca;
    return g;
  }
  if (!(d > 0.0) || !(f > 0.0)) throw Error(ErrorCode::InvalidArgument, kModule, "depth and focal must be positive");
  g.log_scale = Vec3::Constant(std::log(d / f));
  g.source = InitSource::Heuristic;
  return g;
}

SegmentBuild close_segment(std::span<const Frame* const> keyframes, const Frame& prev_lf, const Frame& cur_lf,
                           const Camera& cam, const AttributeMapPair* maps, int segment_id, const InitConfig& cfg) {
  std::vector<const WorldPoint*> points;
  std::vector<const GeomPrior*> priors;
  for (const Frame* kf : keyframes) {
    if (kf->priors.size() != kf->points.size()) {
      throw Error(ErrorCode::DimensionMismatch, kModule, "frame needs one geometric prior per point");
    }
    for (std::size_t i = 0; i < kf->points.size(); ++i) {
      points.push_back(&kf->points[i]);
      priors.push_back(&kf->priors[i]);
    }
  }
  if (points.empty()) throw Error(ErrorCode::EmptySegment, kModule, "no points between loopframes");

  const double f = cam.focal(cfg.focal_mean);
  std::vector<ViewPick> picks(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    picks[i] = pick_view(points[i]->position, cam, prev_lf.pose, cur_lf.pose);
  }
  std::vector<std::optional<ModelAttrs>> model(points.size());
  if (maps) {
    const auto keep = resolve_pixel_conflicts(picks, cam);
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!keep[i]) continue;
      const bool prev = picks[i].view == View::Prev;
      model[i] = sample_model_attrs(prev ? maps->prev : maps->cur, picks[i].pixel, prev ? prev_lf.pose : cur_lf.pose,
                                    picks[i].depth, f);
    }
  }
  std::size_t n_pca_only = 0;
  for (std::size_t i = 0; i < points.size(); ++i) n_pca_only += (!model[i] && priors[i]->reliable) ? 1 : 0;

  SegmentBuild out;
  out.beta = compute_beta(n_pca_only, points.size(), cfg.beta_min);
  out.segment.id = segment_id;
  out.segment.loopframe_index = cur_lf.index;
  out.segment.anchor_pose = cur_lf.pose;
  out.segment.gaussians.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d = picks[i].view != View::None ? picks[i].depth
                                                 : (points[i]->position - cur_lf.pose.translation).norm();
    Gaussian g = cascade_init(*points[i], *priors[i], model[i], out.beta, std::max(d, 1e-6), f, cfg);
    g.segment_id = segment_id;
    switch (g.source) {
      case InitSource::Model: ++out.counts.model; break;
      case InitSource::Pca: ++out.counts.pca; break;
      case InitSource::Heuristic: ++out.counts.heuristic; break;
    }
    out.segment.gaussians.push_back(std::move(g));
  }
  return out;
}

}  // namespace splatmap
