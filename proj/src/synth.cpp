#include "splatmap/synth.hpp"

#include "splatmap/error.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace splatmap {
namespace {

constexpr const char* kModule = "pipeline";

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double lattice(std::uint64_t seed, std::int64_t i, std::int64_t j) {
  const std::uint64_t h = splitmix(seed ^ splitmix(static_cast<std::uint64_t>(i) * 0x632be59bd9b4e019ULL ^
                                                   static_cast<std::uint64_t>(j)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double value_noise(std::uint64_t seed, double u, double v) {
  const double fu = std::floor(u), fv = std::floor(v);
  const auto i = static_cast<std::int64_t>(fu), j = static_cast<std::int64_t>(fv);
  double a = u - fu, b = v - fv;
  a = a * a * (3.0 - 2.0 * a);
  b = b * b * (3.0 - 2.0 * b);
  const double v00 = lattice(seed, i, j), v10 = lattice(seed, i + 1, j);
  const double v01 = lattice(seed, i, j + 1), v11 = lattice(seed, i + 1, j + 1);
  return (1 - b) * ((1 - a) * v00 + a * v10) + b * ((1 - a) * v01 + a * v11);
}

Vec3 texture(std::uint64_t seed, double u, double v, const Vec3& base) {
  const double n = 0.5 * value_noise(seed, u / 0.5, v / 0.5) + 0.3 * value_noise(seed + 1, u / 0.2, v / 0.2) +
                   0.2 * value_noise(seed + 2, u / 1.5, v / 1.5);
  const double tint = value_noise(seed + 3, u / 0.8, v / 0.8) - 0.5;
  const Vec3 c = base * (0.35 + 1.0 * n) + 0.25 * tint * Vec3(1.0, -0.6, -0.4);
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

Vec3 shade(const Vec3& albedo, const Vec3& normal) {
  static const Vec3 light = Vec3(0.4, 0.3, 0.85).normalized();
  return albedo * (0.35 + 0.65 * std::max(0.0, normal.dot(light)));
}

std::optional<Hit> intersect_box(const Box& box, const Vec3& o, const Vec3& d) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  int side = 0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d(a)) < 1e-15) {
      if (o(a) < box.min(a) || o(a) > box.max(a)) return std::nullopt;
      continue;
    }
    double ta = (box.min(a) - o(a)) / d(a);
    double tb = (box.max(a) - o(a)) / d(a);
    int entry_side = 0;  // face index of the entry plane
    if (ta > tb) {
      std::swap(ta, tb);
      entry_side = 1;
    }
    if (ta > t0) {
      t0 = ta;
      axis = a;
      side = entry_side;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  if (axis < 0) return std::nullopt;  // origin inside the box
  Hit h;
  h.t = t0;
  h.normal = Vec3::Zero();
  h.normal(axis) = side == 0 ? -1.0 : 1.0;
  const int face = 2 * axis + side;
  const Vec3 p = o + t0 * d;
  const int ua = axis == 0 ? 1 : 0;
  const int va = axis == 2 ? 1 : 2;
  const Vec3 albedo = box.textureless[face] ? box.color
                                            : texture(box.texture_seed * 16 + static_cast<std::uint64_t>(face),
                                                      p(ua), p(va), box.color);
  h.color = shade(albedo, h.normal);
  return h;
}

nlohmann::json vec_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Vec3 vec3_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw Error(ErrorCode::InvalidArgument, kModule, "expected a 3-vector");
  return {v[0], v[1], v[2]};
}

// Path samples for the obstacle check used by random box placement.
std::vector<Vec2> dense_path(const SynthConfig& cfg);

std::vector<Box> random_boxes(const SynthConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto path = dense_path(cfg);
  const double half = 0.5 * cfg.arena - 1.5;
  std::vector<Box> out;
  for (int b = 0; b < cfg.box_count; ++b) {
    for (int attempt = 0; attempt < 500; ++attempt) {
      const Vec2 c(-half + 2 * half * u(rng), -half + 2 * half * u(rng));
      const Vec2 e(0.5 + 0.75 * u(rng), 0.5 + 0.75 * u(rng));
      const double h = 1.0 + 2.0 * u(rng);
      // Boxes stand beside the path, clear of it but close enough to be seen
      // up close, so registration always has structure to work with.
      double gap = std::numeric_limits<double>::infinity();
      for (const auto& p : path) gap = std::min(gap, ((p - c).cwiseAbs() - e).cwiseMax(0.0).norm());
      bool clear = gap >= 1.5 && gap <= 4.0;
      for (const auto& o : out) {
        if (c.x() - e.x() < o.max.x() + 0.5 && c.x() + e.x() > o.min.x() - 0.5 && c.y() - e.y() < o.max.y() + 0.5 &&
            c.y() + e.y() > o.min.y() - 0.5)
          clear = false;
      }
      if (!clear) continue;
      Box box;
      box.min = Vec3(c.x() - e.x(), c.y() - e.y(), 0.0);
      box.max = Vec3(c.x() + e.x(), c.y() + e.y(), h);
      box.color = Vec3(0.25 + 0.6 * u(rng), 0.25 + 0.6 * u(rng), 0.25 + 0.6 * u(rng));
      box.texture_seed = splitmix(cfg.seed * 131 + static_cast<std::uint64_t>(b));
      for (auto& f : box.textureless) f = u(rng) < cfg.textureless_fraction;
      out.push_back(box);
      break;
    }
  }
  return out;
}

struct PathSample {
  Vec2 p;
  double s;
};

std::vector<PathSample> sample_spline(const std::vector<Vec2>& w) {
  const int n = static_cast<int>(w.size());
  if (n < 3) throw Error(ErrorCode::InvalidArgument, kModule, "need at least three waypoints");
  constexpr int kPerSegment = 400;
  std::vector<PathSample> out;
  double s = 0.0;
  Vec2 prev = w[0];
  for (int i = 0; i < n; ++i) {
    const Vec2& p0 = w[(i + n - 1) % n];
    const Vec2& p1 = w[i];
    const Vec2& p2 = w[(i + 1) % n];
    const Vec2& p3 = w[(i + 2) % n];
    for (int k = 0; k < kPerSegment; ++k) {
      const double t = static_cast<double>(k) / kPerSegment;
      const double t2 = t * t, t3 = t2 * t;
      const Vec2 p = 0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2 +
                            (-p0 + 3 * p1 - 3 * p2 + p3) * t3);
      s += (p - prev).norm();
      out.push_back({p, s});
      prev = p;
    }
  }
  s += (w[0] - prev).norm();
  out.push_back({w[0], s});
  return out;
}

std::vector<Vec2> dense_path(const SynthConfig& cfg) {
  std::vector<Vec2> out;
  for (const auto& s : sample_spline(cfg.waypoints)) out.push_back(s.p);
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const Camera& c) {
  j = {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height}};
}

void from_json(const nlohmann::json& j, Camera& c) {
  const Camera d;
  c.fx = j.value("fx", d.fx);
  c.fy = j.value("fy", d.fy);
  c.cx = j.value("cx", d.cx);
  c.cy = j.value("cy", d.cy);
  c.width = j.value("width", d.width);
  c.height = j.value("height", d.height);
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : c.boxes) {
    boxes.push_back({{"min", vec_json(b.min)},
                     {"max", vec_json(b.max)},
                     {"color", vec_json(b.color)},
                     {"texture_seed", b.texture_seed},
                     {"textureless", b.textureless}});
  }
  nlohmann::json wp = nlohmann::json::array();
  for (const auto& w : c.waypoints) wp.push_back({w.x(), w.y()});
  j = {{"seed", c.seed},
       {"camera", c.camera},
       {"scene",
        {{"arena", c.arena},
         {"wall_height", c.wall_height},
         {"box_count", c.box_count},
         {"textureless_fraction", c.textureless_fraction},
         {"boxes", boxes},
         {"walls", c.walls},
         {"ground", c.ground}}},
       {"trajectory",
        {{"waypoints", wp},
         {"height", c.height},
         {"pitch", c.pitch},
         {"speed", c.speed},
         {"rate", c.rate},
         {"duration", c.duration}}},
       {"noise",
        {{"range_sigma", c.range_sigma},
         {"drift_sigma_t", c.drift_sigma_t},
         {"drift_sigma_r", c.drift_sigma_r},
         {"points_per_frame", c.points_per_frame}}}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  // Start from the defaults so partial documents are accepted.
  nlohmann::json full = SynthConfig{};
  full.merge_patch(j);
  c.seed = full["seed"].get<std::uint64_t>();
  c.camera = full["camera"].get<Camera>();
  const auto& sc = full["scene"];
  c.arena = sc["arena"];
  c.wall_height = sc["wall_height"];
  c.box_count = sc["box_count"];
  c.textureless_fraction = sc["textureless_fraction"];
  c.walls = sc["walls"];
  c.ground = sc["ground"];
  c.boxes.clear();
  for (const auto& b : sc["boxes"]) {
    Box box;
    box.min = vec3_from(b.at("min"));
    box.max = vec3_from(b.at("max"));
    if (b.contains("color")) box.color = vec3_from(b["color"]);
    box.texture_seed = b.value("texture_seed", std::uint64_t{1});
    if (b.contains("textureless")) box.textureless = b["textureless"].get<std::array<bool, 6>>();
    c.boxes.push_back(box);
  }
  const auto& tr = full["trajectory"];
  c.waypoints.clear();
  for (const auto& w : tr["waypoints"]) c.waypoints.emplace_back(w.at(0).get<double>(), w.at(1).get<double>());
  c.height = tr["height"];
  c.pitch = tr["pitch"];
  c.speed = tr["speed"];
  c.rate = tr["rate"];
  c.duration = tr["duration"];
  const auto& nz = full["noise"];
  c.range_sigma = nz["range_sigma"];
  c.drift_sigma_t = nz["drift_sigma_t"];
  c.drift_sigma_r = nz["drift_sigma_r"];
  c.points_per_frame = nz["points_per_frame"];
  if (c.rate <= 0 || c.duration <= 0 || c.speed < 0 || c.arena <= 0 || c.range_sigma < 0 || c.drift_sigma_t < 0 ||
      c.drift_sigma_r < 0 || c.points_per_frame < 0)
    throw Error(ErrorCode::InvalidArgument, kModule, "synth config values must be positive");
  c.camera.validate();
}

SynthScene::SynthScene(const SynthConfig& cfg) : ground(cfg.ground), ground_extent(0.5 * cfg.arena) {
  ground_seed = splitmix(cfg.seed + 99);
  boxes = cfg.boxes.empty() ? random_boxes(cfg) : cfg.boxes;
  if (cfg.walls) {
    const double h = 0.5 * cfg.arena;
    const double t = 0.2;
    const Vec3 wall_color(0.7, 0.65, 0.55);
    const std::array<std::pair<Vec3, Vec3>, 4> walls = {{{{-h - t, -h - t, 0}, {h + t, -h, cfg.wall_height}},
                                                         {{-h - t, h, 0}, {h + t, h + t, cfg.wall_height}},
                                                         {{-h - t, -h, 0}, {-h, h, cfg.wall_height}},
                                                         {{h, -h, 0}, {h + t, h, cfg.wall_height}}}};
    for (std::size_t w = 0; w < walls.size(); ++w) {
      Box b;
      b.min = walls[w].first;
      b.max = walls[w].second;
      b.color = wall_color;
      b.texture_seed = splitmix(cfg.seed * 7 + 1000 + w);
      boxes.push_back(b);
    }
  }
}

std::optional<Hit> SynthScene::intersect(const Vec3& o, const Vec3& d) const {
  std::optional<Hit> best;
  if (ground && d.z() < 0.0 && o.z() > 0.0) {
    const double t = -o.z() / d.z();
    const Vec3 p = o + t * d;
    if (std::abs(p.x()) <= ground_extent && std::abs(p.y()) <= ground_extent) {
      Hit h;
      h.t = t;
      h.normal = Vec3::UnitZ();
      h.color = shade(texture(ground_seed, p.x(), p.y(), Vec3(0.55, 0.55, 0.5)), h.normal);
      best = h;
    }
  }
  for (const auto& b : boxes) {
    const auto h = intersect_box(b, o, d);
    if (h && (!best || h->t < best->t)) best = h;
  }
  return best;
}

void SynthScene::render(const Camera& cam, const Pose& pose, Image& rgb, Image& depth) const {
  rgb = Image(cam.width, cam.height, 3);
  depth = Image(cam.width, cam.height, 1);
  const Mat3 R = pose.rotation_matrix();
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const Vec3 d_cam((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0);
      const auto hit = intersect(pose.translation, R * d_cam);
      const Vec3 c = hit ? hit->color : sky;
      for (int ch = 0; ch < 3; ++ch) rgb.at(x, y, ch) = c(ch);
      depth.at(x, y) = hit ? hit->t : 0.0;
    }
  }
}

std::vector<Pose> synth_trajectory(const SynthConfig& cfg) {
  const auto samples = sample_spline(cfg.waypoints);
  const double length = samples.back().s;
  const int frames = static_cast<int>(std::lround(cfg.duration * cfg.rate));
  std::vector<Pose> out;
  out.reserve(frames);
  std::size_t cursor = 0;
  double prev_s = -1.0;
  for (int k = 0; k < frames; ++k) {
    const double s = std::fmod(cfg.speed * k / cfg.rate, length);
    if (s < prev_s) cursor = 0;
    prev_s = s;
    while (cursor + 2 < samples.size() && samples[cursor + 1].s <= s) ++cursor;
    const auto& a = samples[cursor];
    const auto& b = samples[cursor + 1];
    const double w = b.s > a.s ? (s - a.s) / (b.s - a.s) : 0.0;
    const Vec2 p = (1 - w) * a.p + w * b.p;
    const Vec2 tan = (b.p - a.p).normalized();
    const double yaw = std::atan2(tan.y(), tan.x());
    const Vec3 fwd(std::cos(cfg.pitch) * std::cos(yaw), std::cos(cfg.pitch) * std::sin(yaw), -std::sin(cfg.pitch));
    const Vec3 right(std::sin(yaw), -std::cos(yaw), 0.0);
    Mat3 R;
    R.col(0) = right;
    R.col(1) = fwd.cross(right);
    R.col(2) = fwd;
    out.emplace_back(R, Vec3(p.x(), p.y(), cfg.height));
  }
  return out;
}

void write_points(const std::filesystem::path& ply, std::span<const WorldPoint> points) {
  static_assert(std::endian::native == std::endian::little, "covariance sidecar assumes a little-endian host");
  std::ofstream out(ply);
  if (!out) throw Error(ErrorCode::IoError, kModule, "cannot write " + ply.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << points.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\n"
         "property uchar blue\nend_header\n";
  out << std::setprecision(17);
  auto cov_path = ply;
  cov_path.replace_extension(".cov");
  std::ofstream cov(cov_path, std::ios::binary);
  if (!cov) throw Error(ErrorCode::IoError, kModule, "cannot write " + cov_path.string());
  for (const auto& p : points) {
    out << p.position.x() << ' ' << p.position.y() << ' ' << p.position.z();
    for (int c = 0; c < 3; ++c) out << ' ' << std::lround(std::clamp(p.color(c), 0.0, 1.0) * 255);
    out << '\n';
    double c9[9];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) c9[3 * r + c] = p.covariance(r, c);
    cov.write(reinterpret_cast<const char*>(c9), sizeof(c9));
  }
  if (!out || !cov) throw Error(ErrorCode::IoError, kModule, "write failed for " + ply.string());
}

// Reads an ASCII PLY with x y z red green blue vertex properties (any order,
// extra properties ignored). The covariance sidecar is optional; without it
// covariances are zero.
std::vector<WorldPoint> read_points(const std::filesystem::path& ply) {
  static_assert(std::endian::native == std::endian::little, "covariance sidecar assumes a little-endian host");
  std::ifstream in(ply);
  if (!in) throw Error(ErrorCode::IoError, kModule, "cannot read " + ply.string());
  std::string line;
  std::size_t count = 0;
  std::vector<std::string> props;
  bool ok = false, ascii = false, in_vertex = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string w;
    ls >> w;
    if (w == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (w == "element") {
      std::string name;
      ls >> name;
      in_vertex = name == "vertex";
      if (in_vertex) ls >> count;
    } else if (w == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    } else if (w == "end_header") {
      ok = true;
      break;
    }
  }
  if (!ok || !ascii) throw Error(ErrorCode::IoError, kModule, "not an ASCII point PLY: " + ply.string());
  std::array<int, 6> col{-1, -1, -1, -1, -1, -1};
  const std::array<const char*, 6> names{"x", "y", "z", "red", "green", "blue"};
  for (std::size_t i = 0; i < props.size(); ++i)
    for (int n = 0; n < 6; ++n)
      if (props[i] == names[n]) col[n] = static_cast<int>(i);
  for (int n = 0; n < 6; ++n)
    if (col[n] < 0) throw Error(ErrorCode::IoError, kModule, std::string("missing property ") + names[n] + " in " + ply.string());

  auto cov_path = ply;
  cov_path.replace_extension(".cov");
  std::ifstream cov(cov_path, std::ios::binary);
  std::vector<WorldPoint> out(count);
  std::vector<double> vals(props.size());
  for (auto& p : out) {
    for (auto& v : vals) in >> v;
    if (!in) throw Error(ErrorCode::IoError, kModule, "truncated point file " + ply.string());
    p.position = {vals[col[0]], vals[col[1]], vals[col[2]]};
    p.color = Vec3(vals[col[3]], vals[col[4]], vals[col[5]]) / 255.0;
    if (cov) {
      double c9[9];
      cov.read(reinterpret_cast<char*>(c9), sizeof(c9));
      if (!cov) throw Error(ErrorCode::IoError, kModule, "truncated covariance sidecar " + cov_path.string());
      p.covariance = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(c9);
    }
  }
  return out;
}

void generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  fs::create_directories(out / "frames");
  const SynthScene scene(cfg);
  const auto gt = synth_trajectory(cfg);
  if (gt.empty()) throw Error(ErrorCode::InvalidArgument, kModule, "empty trajectory");

  std::mt19937_64 drift_rng(splitmix(cfg.seed + 1));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<TimedPose> gt_t, odom_t;
  Pose odom = gt[0];
  const bool drift = cfg.drift_sigma_t > 0.0 || cfg.drift_sigma_r > 0.0;
  for (std::size_t k = 0; k < gt.size(); ++k) {
    if (k > 0) {
      if (drift) {
        Vec6 noise;
        for (int i = 0; i < 3; ++i) noise(i) = cfg.drift_sigma_r * normal(drift_rng);
        for (int i = 3; i < 6; ++i) noise(i) = cfg.drift_sigma_t * normal(drift_rng);
        odom = odom * (gt[k - 1].inverse() * gt[k]) * se3_exp(noise);
      } else {
        odom = gt[k];
      }
    }
    const double ts = static_cast<double>(k) / cfg.rate;
    gt_t.push_back({ts, gt[k]});
    odom_t.push_back({ts, odom});
  }
  write_trajectory_tsv(out / "poses_gt.tsv", gt_t);
  write_trajectory_tsv(out / "poses_odom.tsv", odom_t);

  std::mt19937_64 point_rng(splitmix(cfg.seed + 2));
  const Camera& cam = cfg.camera;
  Image rgb, depth;
  for (std::size_t k = 0; k < gt.size(); ++k) {
    scene.render(cam, gt[k], rgb, depth);
    const std::string stem = Dataset::frame_stem(static_cast<int>(k));
    write_png(out / "frames" / (stem + "_rgb.png"), rgb);
    write_pfm(out / "frames" / (stem + "_depth.pfm"), depth);

    std::vector<int> valid;
    for (int i = 0; i < cam.width * cam.height; ++i)
      if (depth.data[i] > 0.0) valid.push_back(i);
    const std::size_t n = std::min(valid.size(), static_cast<std::size_t>(cfg.points_per_frame));
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, valid.size() - 1);
      std::swap(valid[i], valid[pick(point_rng)]);
    }
    std::sort(valid.begin(), valid.begin() + static_cast<std::ptrdiff_t>(n));
    const double var = std::max(cfg.range_sigma, 1e-3) * std::max(cfg.range_sigma, 1e-3);
    std::vector<WorldPoint> pts;
    pts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int x = valid[i] % cam.width, y = valid[i] / cam.width;
      const Vec3 ray((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0);
      const double range = depth.at(x, y) * ray.norm() + cfg.range_sigma * normal(point_rng);
      WorldPoint p;
      p.position = ray.normalized() * range;
      for (int c = 0; c < 3; ++c) p.color(c) = std::round(std::clamp(rgb.at(x, y, c), 0.0, 1.0) * 255.0) / 255.0;
      p.covariance = var * Mat3::Identity();
      pts.push_back(p);
    }
    write_points(out / "frames" / (stem + "_points.ply"), pts);
  }

  nlohmann::json meta = {{"camera", cam},
                         {"rate", cfg.rate},
                         {"frame_count", gt.size()},
                         {"depth", "camera z in metres, 0 = no return"},
                         {"points_frame", "camera"},
                         {"synth", cfg}};
  std::ofstream m(out / "meta.json");
  if (!m) throw Error(ErrorCode::IoError, kModule, "cannot write meta.json");
  m << meta.dump(2) << '\n';
}

std::string Dataset::frame_stem(int k) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", k);
  return buf;
}

Dataset::Dataset(std::filesystem::path root) : root_(std::move(root)) {
  std::ifstream m(root_ / "meta.json");
  if (!m) throw Error(ErrorCode::IoError, kModule, "missing meta.json in " + root_.string());
  nlohmann::json j;
  try {
    m >> j;
    meta_.camera = j.at("camera").get<Camera>();
    meta_.rate = j.at("rate");
    meta_.frame_count = j.at("frame_count");
    meta_.synth = j.value("synth", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoError, kModule, std::string("bad meta.json: ") + e.what());
  }
  gt_ = read_trajectory_tsv(root_ / "poses_gt.tsv");
  odom_ = read_trajectory_tsv(root_ / "poses_odom.tsv");
  if (static_cast<int>(gt_.size()) != meta_.frame_count || static_cast<int>(odom_.size()) != meta_.frame_count)
    throw Error(ErrorCode::IoError, kModule, "trajectory length does not match frame_count");
}

Image Dataset::load_rgb(int k) const { return read_png(root_ / "frames" / (frame_stem(k) + "_rgb.png")); }

Frame Dataset::load_frame(int k, const Pose& pose) const {
  if (k < 0 || k >= meta_.frame_count) throw Error(ErrorCode::InvalidArgument, kModule, "frame index out of range");
  Frame f;
  f.index = k;
  f.timestamp = gt_[k].timestamp;
  f.pose = pose;
  const std::string stem = frame_stem(k);
  f.rgb = read_png(root_ / "frames" / (stem + "_rgb.png"));
  f.depth = read_pfm(root_ / "frames" / (stem + "_depth.pfm"));
  f.points = read_points(root_ / "frames" / (stem + "_points.ply"));
  const Mat3 R = pose.rotation_matrix();
  for (auto& p : f.points) {
    p.position = pose * p.position;
    p.covariance = R * p.covariance * R.transpose();
  }
  return f;
}

}  // namespace splatmap
