#pragma once

// Scene fixtures and brute-force oracles shared by the unit tests and the
// acceptance run.

#include "test_support.hpp"

#include "splatmap/loop_graph.hpp"
#include "splatmap/splat_render.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

namespace splatmap::fixtures {

constexpr double kDeg = std::numbers::pi / 180.0;

inline Gaussian isotropic(const Vec3& mean, double sigma, double opacity_logit, const Vec3& color) {
  Gaussian g;
  g.mean = mean;
  g.log_scale = Vec3::Constant(std::log(sigma));
  g.opacity_logit = opacity_logit;
  g.sh[0] = color_to_sh_dc(color);
  return g;
}

inline Image random_image(int w, int h, int c, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image im(w, h, c);
  for (auto& v : im.data) v = u(rng);
  return im;
}

inline Mask random_mask(int w, int h, double p_true, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p_true);
  Mask m(w, h);
  for (auto& v : m.data) v = b(rng) ? 1 : 0;
  return m;
}

struct Scene {
  Camera cam{20, 20, 7.5, 7.5, 16, 16};
  Pose view;
  std::vector<Gaussian> gaussians;
  Image gt_rgb, gt_depth;
  Mask mask;
};

inline Scene random_scene(std::uint64_t seed, int sh_degree) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene s;
  s.view = splatmap::testing::random_pose(rng, 2.0);
  for (int i = 0; i < 5; ++i) {
    Gaussian g;
    const Vec3 pc(-0.4 + 0.8 * u(rng), -0.4 + 0.8 * u(rng), 1.5 + 1.5 * u(rng));
    g.mean = s.view * pc;
    g.log_scale = Vec3(std::log(0.08 + 0.2 * u(rng)), std::log(0.08 + 0.2 * u(rng)), std::log(0.03 + 0.1 * u(rng)));
    g.set_quat(splatmap::testing::random_quat(rng));
    g.opacity_logit = -1.0 + 2.5 * u(rng);
    g.sh[0] = color_to_sh_dc(Vec3(0.25 + 0.5 * u(rng), 0.25 + 0.5 * u(rng), 0.25 + 0.5 * u(rng)));
    for (int k = 1; k < sh_coeff_count(sh_degree); ++k) {
      g.sh[k] = Vec3(0.1 * (u(rng) - 0.5), 0.1 * (u(rng) - 0.5), 0.1 * (u(rng) - 0.5));
    }
    g.id = static_cast<std::uint64_t>(i);
    s.gaussians.push_back(g);
  }
  s.gt_rgb = random_image(16, 16, 3, rng);
  s.gt_depth = random_image(16, 16, 1, rng, 1.0, 3.0);
  for (int k = 0; k < 20; ++k) s.gt_depth.data[static_cast<std::size_t>(u(rng) * 255)] = 0.0;
  s.mask = random_mask(16, 16, 0.85, rng);
  return s;
}

inline RenderConfig smooth_config(int sh_degree) {
  RenderConfig cfg;
  cfg.alpha_min = 0.0;
  cfg.sh_degree = sh_degree;
  return cfg;
}

inline double scene_loss(const Scene& s, const std::vector<Gaussian>& gs, const RenderConfig& cfg) {
  const auto r = render(gs, s.cam, s.view, cfg);
  return losses(r, s.gt_rgb, s.gt_depth, s.mask, LossWeights{}).total;
}

struct GradCheck {
  int checked = 0;
  int failed = 0;
  std::string first_failure;
};

inline bool grad_close(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  if (diff < 1e-6) return true;
  return diff / std::max(std::abs(analytic), std::abs(numeric)) < 1e-3;
}

// Compares every analytic parameter gradient against central differences.
inline GradCheck check_scene_gradients(const Scene& s, int sh_degree) {
  const RenderConfig cfg = smooth_config(sh_degree);
  const auto fwd = render(s.gaussians, s.cam, s.view, cfg);
  const auto bundle = backward(s.gaussians, s.cam, s.view, fwd, s.gt_rgb, s.gt_depth, s.mask, LossWeights{}, cfg);
  GradCheck out;
  const double eps = 1e-4;
  auto probe = [&](std::size_t gi, const char* name, double analytic, auto&& accessor) {
    auto gs = s.gaussians;
    double& param = accessor(gs[gi]);
    const double x0 = param;
    param = x0 + eps;
    const double fp = scene_loss(s, gs, cfg);
    param = x0 - eps;
    const double fm = scene_loss(s, gs, cfg);
    const double numeric = (fp - fm) / (2 * eps);
    ++out.checked;
    if (!grad_close(analytic, numeric)) {
      if (out.failed++ == 0) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "gaussian %zu %s analytic %.9g numeric %.9g", gi, name, analytic, numeric);
        out.first_failure = buf;
      }
    }
  };
  for (std::size_t gi = 0; gi < s.gaussians.size(); ++gi) {
    const auto& g = bundle.grads[gi];
    for (int k = 0; k < 3; ++k) {
      probe(gi, "mean", g.mean(k), [k](Gaussian& x) -> double& { return x.mean(k); });
      probe(gi, "log_scale", g.log_scale(k), [k](Gaussian& x) -> double& { return x.log_scale(k); });
    }
    for (int k = 0; k < 4; ++k) {
      probe(gi, "rotation", g.rotation(k), [k](Gaussian& x) -> double& { return x.rotation(k); });
    }
    probe(gi, "opacity", g.opacity_logit, [](Gaussian& x) -> double& { return x.opacity_logit; });
    for (int k = 0; k < sh_coeff_count(sh_degree); ++k) {
      for (int c = 0; c < 3; ++c) {
        probe(gi, "sh", g.sh[k](c), [k, c](Gaussian& x) -> double& { return x.sh[k](c); });
      }
    }
  }
  return out;
}

inline Pose yaw_pose(double yaw, const Vec3& t) { return Pose(Quat(Eigen::AngleAxisd(yaw, Vec3::UnitZ())), t); }

inline Gaussian transformed(const Gaussian& g, const Pose& p) {
  Gaussian out = g;
  out.mean = p * g.mean;
  out.set_quat(p.rotation * g.quat());
  return out;
}

inline std::vector<Gaussian> transformed(std::span<const Gaussian> gs, const Pose& p) {
  std::vector<Gaussian> out;
  for (const auto& g : gs) out.push_back(transformed(g, p));
  return out;
}

// Flat Gaussians scattered over two perpendicular walls, thin along the normal.
inline std::vector<Gaussian> two_walls(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Gaussian> out;
  for (std::size_t k = 0; k < n; ++k) {
    Gaussian g;
    const double a = 4.0 * u(rng);
    const double h = 2.5 * u(rng);
    if (k % 2 == 0) {
      g.mean = {0.0, a, h};
      g.set_quat(Quat(Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitY())));  // local z -> world x
    } else {
      g.mean = {a, 0.0, h};
      g.set_quat(Quat(Eigen::AngleAxisd(-std::numbers::pi / 2, Vec3::UnitX())));  // local z -> world y
    }
    g.log_scale = Vec3(std::log(0.1), std::log(0.1), std::log(0.005));
    out.push_back(g);
  }
  return out;
}

inline double translation_error(const Pose& a, const Pose& b) { return (a.translation - b.translation).norm(); }

// Indices kept by the target-set predicate, evaluated directly per Gaussian.
inline std::vector<std::size_t> brute_force_target_set(std::span<const Gaussian> cloud, std::span<const Pose> views,
                                                       const Camera& cam, double d_max,
                                                       std::span<const int> excluded) {
  std::vector<std::size_t> kept;
  for (std::size_t n = 0; n < cloud.size(); ++n) {
    bool skip = false;
    for (int e : excluded) skip = skip || cloud[n].segment_id == e;
    if (skip) continue;
    bool hit = false;
    for (const auto& v : views) {
      const Mat3 R = v.rotation_matrix();
      const Vec3 pc = R.transpose() * (cloud[n].mean - v.translation);
      if (pc.z() <= 0.0 || (cloud[n].mean - v.translation).norm() >= d_max) continue;
      const double u = cam.fx * pc.x() / pc.z() + cam.cx;
      const double w = cam.fy * pc.y() / pc.z() + cam.cy;
      if (u >= 0 && u < cam.width && w >= 0 && w < cam.height) hit = true;
    }
    if (hit) kept.push_back(n);
  }
  return kept;
}

// 1000 Gaussians scattered in a 40 m cube over five segments, viewed by five random cameras.
struct TargetSetFixture {
  std::vector<Gaussian> cloud;
  std::vector<Pose> views;
  std::vector<int> excluded{2};
  double d_max = 15.0;
};

inline TargetSetFixture target_set_fixture(std::uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  TargetSetFixture f;
  f.cloud.resize(1000);
  std::uniform_int_distribution<int> seg(0, 4);
  for (auto& g : f.cloud) {
    g.mean = splatmap::testing::random_vec3(rng, -20.0, 20.0);
    g.segment_id = seg(rng);
  }
  for (int k = 0; k < 5; ++k) f.views.push_back(splatmap::testing::random_pose(rng, 10.0));
  return f;
}

}  // namespace splatmap::fixtures
