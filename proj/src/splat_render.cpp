#include "splatmap/splat_render.hpp"

#include "splatmap/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace splatmap {

namespace {

struct CameraFrame {
  Mat3 W;  // camera-from-world rotation
  Vec3 t;  // camera-from-world translation
  Vec3 center;
};

CameraFrame camera_frame(const Pose& view) {
  CameraFrame f;
  f.W = view.rotation_matrix().transpose();
  f.t = -(f.W * view.translation);
  f.center = view.translation;
  return f;
}

Eigen::Matrix<double, 2, 3> perspective_jacobian(const Camera& cam, const Vec3& p) {
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> J;
  J << cam.fx * iz, 0.0, -cam.fx * p.x() * iz * iz, 0.0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
  return J;
}

bool footprint(const Vec2& mean2d, const Mat2& cov2d, double opacity, const Camera& cam, const RenderConfig& cfg,
               ProjectedGaussian& out) {
  if (cfg.alpha_min > 0.0) {
    if (opacity <= cfg.alpha_min) return false;
    const double q_max = 2.0 * std::log(opacity / cfg.alpha_min);
    const double ex = std::sqrt(q_max * cov2d(0, 0));
    const double ey = std::sqrt(q_max * cov2d(1, 1));
    const double fx0 = std::ceil(mean2d.x() - ex), fx1 = std::floor(mean2d.x() + ex);
    const double fy0 = std::ceil(mean2d.y() - ey), fy1 = std::floor(mean2d.y() + ey);
    if (fx1 < 0.0 || fy1 < 0.0 || fx0 > cam.width - 1 || fy0 > cam.height - 1) return false;
    out.x0 = static_cast<int>(std::max(fx0, 0.0));
    out.y0 = static_cast<int>(std::max(fy0, 0.0));
    out.x1 = static_cast<int>(std::min(fx1, static_cast<double>(cam.width - 1)));
    out.y1 = static_cast<int>(std::min(fy1, static_cast<double>(cam.height - 1)));
  } else {
    out.x0 = 0;
    out.y0 = 0;
    out.x1 = cam.width - 1;
    out.y1 = cam.height - 1;
  }
  return out.x0 <= out.x1 && out.y0 <= out.y1;
}

std::array<Mat3, 4> rotation_derivatives(const Vec4& q) {
  const double w = q(0), x = q(1), y = q(2), z = q(3);
  std::array<Mat3, 4> d;
  // clang-format off
  d[0] <<  0.0,     -2.0 * z,  2.0 * y,
           2.0 * z,  0.0,     -2.0 * x,
          -2.0 * y,  2.0 * x,  0.0;
  d[1] <<  0.0,      2.0 * y,  2.0 * z,
           2.0 * y, -4.0 * x, -2.0 * w,
           2.0 * z,  2.0 * w, -4.0 * x;
  d[2] << -4.0 * y,  2.0 * x,  2.0 * w,
           2.0 * x,  0.0,      2.0 * z,
          -2.0 * w,  2.0 * z, -4.0 * y;
  d[3] << -4.0 * z, -2.0 * w,  2.0 * x,
           2.0 * w, -4.0 * z,  2.0 * y,
           2.0 * x,  2.0 * y,  0.0;
  // clang-format on
  return d;
}

Vec3 sh_color(const Gaussian& g, int degree, const Vec3& dir) {
  std::array<double, kMaxShCoeffs> basis;
  sh_basis(degree, dir, basis);
  Vec3 c = Vec3::Constant(0.5);
  for (int k = 0; k < sh_coeff_count(degree); ++k) c += basis[k] * g.sh[k];
  return c;
}

}  // namespace

std::optional<ProjectedGaussian> project_gaussian(const Gaussian& g, const Camera& cam, const Pose& view,
                                                  const RenderConfig& cfg) {
  const CameraFrame f = camera_frame(view);
  const Vec3 p = f.W * g.mean + f.t;
  if (!(p.z() > cfg.z_near)) return std::nullopt;
  const double lim_x = cfg.frustum_margin * 0.5 * cam.width / cam.fx;
  const double lim_y = cfg.frustum_margin * 0.5 * cam.height / cam.fy;
  if (std::abs(p.x() / p.z()) > lim_x || std::abs(p.y() / p.z()) > lim_y) return std::nullopt;
  const auto J = perspective_jacobian(cam, p);
  const Mat3 M = f.W * g.covariance() * f.W.transpose();
  ProjectedGaussian out;
  out.cov2d = J * M * J.transpose() + cfg.dilation * Mat2::Identity();
  out.mean2d = {cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy};
  out.depth = p.z();
  const double det = out.cov2d.determinant();
  if (!std::isfinite(det) || det <= 0.0 || !out.mean2d.allFinite()) {
    throw Error(ErrorCode::SingularCov2d, "splat_render", "projected covariance is not invertible");
  }
  if (!footprint(out.mean2d, out.cov2d, sigmoid(g.opacity_logit), cam, cfg, out)) return std::nullopt;
  return out;
}

RenderOutput render(std::span<const Gaussian> gaussians, const Camera& cam, const Pose& view,
                    const RenderConfig& cfg) {
  const int W = cam.width, H = cam.height;
  const std::size_t npix = static_cast<std::size_t>(W) * H;
  const CameraFrame frame = camera_frame(view);

  RenderOutput out;
  out.color = Image(W, H, 3, 0.0);
  out.depth = Image(W, H, 1, 0.0);
  out.acc_alpha = Image(W, H, 1, 0.0);
  out.splats.resize(gaussians.size());

  std::vector<ProjectedGaussian> boxes(gaussians.size());
  std::vector<int> order;
  order.reserve(gaussians.size());
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    const Gaussian& g = gaussians[i];
    auto proj = project_gaussian(g, cam, view, cfg);
    if (!proj) continue;
    auto& s = out.splats[i];
    s.visible = true;
    s.mean2d = proj->mean2d;
    s.cov2d = proj->cov2d;
    s.conic = proj->cov2d.inverse();
    s.cam_point = frame.W * g.mean + frame.t;
    s.opacity = sigmoid(g.opacity_logit);
    const Vec3 dir = (g.mean - frame.center).normalized();
    s.color = sh_color(g, cfg.sh_degree, dir).cwiseMax(0.0).cwiseMin(1.0);
    boxes[i] = *proj;
    order.push_back(static_cast<int>(i));
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return out.splats[a].cam_point.z() < out.splats[b].cam_point.z(); });

  // Candidate lists: every pixel inside a footprint box, in depth order.
  std::vector<std::size_t> cand_offsets(npix + 1, 0);
  for (int i : order) {
    const auto& b = boxes[i];
    for (int y = b.y0; y <= b.y1; ++y) {
      for (int x = b.x0; x <= b.x1; ++x) ++cand_offsets[static_cast<std::size_t>(y) * W + x + 1];
    }
  }
  std::partial_sum(cand_offsets.begin(), cand_offsets.end(), cand_offsets.begin());
  std::vector<int> candidates(cand_offsets.back());
  {
    std::vector<std::size_t> cursor(cand_offsets.begin(), cand_offsets.end() - 1);
    for (int i : order) {
      const auto& b = boxes[i];
      for (int y = b.y0; y <= b.y1; ++y) {
        for (int x = b.x0; x <= b.x1; ++x) candidates[cursor[static_cast<std::size_t>(y) * W + x]++] = i;
      }
    }
  }

  out.offsets.assign(npix + 1, 0);
  out.contributors.reserve(candidates.size());
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      const Vec2 pix(x, y);
      double T = 1.0;
      Vec3 C = Vec3::Zero();
      double D = 0.0;
      for (std::size_t k = cand_offsets[p]; k < cand_offsets[p + 1]; ++k) {
        const int i = candidates[k];
        const auto& s = out.splats[i];
        const Vec2 d = pix - s.mean2d;
        const double G = std::exp(-0.5 * d.dot(s.conic * d));
        const double a = std::min(cfg.alpha_max, s.opacity * G);
        if (a < cfg.alpha_min) continue;
        C += s.color * (a * T);
        D += s.cam_point.z() * (a * T);
        T *= 1.0 - a;
        out.contributors.push_back(i);
        if (T < cfg.transmittance_min) break;
      }
      out.offsets[p + 1] = out.contributors.size();
      for (int c = 0; c < 3; ++c) out.color.at(x, y, c) = C(c);
      out.depth.at(x, y) = D;
      out.acc_alpha.at(x, y) = 1.0 - T;
    }
  }
  return out;
}

Mask interior_mask(const Image& acc_alpha, double alpha_thresh, int r_erode) {
  if (r_erode < 0) throw Error(ErrorCode::InvalidArgument, "splat_render", "erosion radius must be >= 0");
  const int W = acc_alpha.width, H = acc_alpha.height;
  Mask geo(W, H);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) geo.set(x, y, acc_alpha.at(x, y) > alpha_thresh);
  }
  if (r_erode == 0) return geo;

  // Square structuring element is separable: min over rows, then columns.
  Mask rows(W, H);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      bool keep = x - r_erode >= 0 && x + r_erode < W;
      for (int dx = -r_erode; keep && dx <= r_erode; ++dx) keep = geo.at(x + dx, y);
      rows.set(x, y, keep);
    }
  }
  Mask out(W, H);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      bool keep = y - r_erode >= 0 && y + r_erode < H;
      for (int dy = -r_erode; keep && dy <= r_erode; ++dy) keep = rows.at(x, y + dy);
      out.set(x, y, keep);
    }
  }
  return out;
}

namespace {

void check_loss_inputs(const RenderOutput& r, const Image& gt_rgb, const Image& gt_depth, const Mask& mask) {
  if (!r.color.same_shape(gt_rgb) || !r.depth.same_shape(gt_depth) || mask.width != r.color.width ||
      mask.height != r.color.height) {
    throw Error(ErrorCode::DimensionMismatch, "splat_render", "loss inputs differ in shape");
  }
  if (mask.count() == 0) throw Error(ErrorCode::EmptyMask, "splat_render", "no supervised pixels");
}

LossTerms compute_terms(const RenderOutput& r, const Image& gt_rgb, const Image& gt_depth, const Mask& mask,
                        const LossWeights& w, const SsimParams& sp, Image* ssim_grad) {
  LossTerms t;
  const int W = r.color.width, H = r.color.height;
  std::size_t n_mask = 0, n_depth = 0;
  double l1 = 0.0, ld = 0.0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (!mask.at(x, y)) continue;
      ++n_mask;
      for (int c = 0; c < 3; ++c) l1 += std::abs(r.color.at(x, y, c) - gt_rgb.at(x, y, c));
      if (gt_depth.at(x, y) > 0.0) {
        ++n_depth;
        ld += std::abs(r.depth.at(x, y) - gt_depth.at(x, y));
      }
    }
  }
  t.supervised_pixels = n_mask;
  t.rgb = l1 / (3.0 * static_cast<double>(n_mask));
  t.depth = n_depth > 0 ? ld / static_cast<double>(n_depth) : 0.0;
  t.ssim = 1.0 - ssim(r.color, gt_rgb, &mask, sp, ssim_grad);
  t.total = w.rgb * t.rgb + w.ssim * t.ssim + w.depth * t.depth;
  return t;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

LossTerms losses(const RenderOutput& r, const Image& gt_rgb, const Image& gt_depth, const Mask& mask,
                 const LossWeights& w, const SsimParams& sp) {
  check_loss_inputs(r, gt_rgb, gt_depth, mask);
  return compute_terms(r, gt_rgb, gt_depth, mask, w, sp, nullptr);
}

LossGradients loss_gradients(const RenderOutput& r, const Image& gt_rgb, const Image& gt_depth, const Mask& mask,
                             const LossWeights& w, const SsimParams& sp) {
  check_loss_inputs(r, gt_rgb, gt_depth, mask);
  const int W = r.color.width, H = r.color.height;
  LossGradients out;
  Image ssim_grad;
  out.terms = compute_terms(r, gt_rgb, gt_depth, mask, w, sp, w.ssim != 0.0 ? &ssim_grad : nullptr);
  out.d_color = Image(W, H, 3, 0.0);
  out.d_depth = Image(W, H, 1, 0.0);

  std::size_t n_depth = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (mask.at(x, y) && gt_depth.at(x, y) > 0.0) ++n_depth;
    }
  }
  const double k_rgb = w.rgb / (3.0 * static_cast<double>(out.terms.supervised_pixels));
  const double k_depth = n_depth > 0 ? w.depth / static_cast<double>(n_depth) : 0.0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (!mask.at(x, y)) continue;
      for (int c = 0; c < 3; ++c) {
        double g = k_rgb * sign(r.color.at(x, y, c) - gt_rgb.at(x, y, c));
        if (w.ssim != 0.0) g -= w.ssim * ssim_grad.at(x, y, c);
        out.d_color.at(x, y, c) = g;
      }
      if (gt_depth.at(x, y) > 0.0) out.d_depth.at(x, y) = k_depth * sign(r.depth.at(x, y) - gt_depth.at(x, y));
    }
  }
  return out;
}

GradBundle backward(std::span<const Gaussian> gaussians, const Camera& cam, const Pose& view,
                    const RenderOutput& fwd, const Image& gt_rgb, const Image& gt_depth, const Mask& mask,
                    const LossWeights& w, const RenderConfig& cfg, const SsimParams& ssim_params) {
  if (fwd.splats.size() != gaussians.size()) {
    throw Error(ErrorCode::DimensionMismatch, "splat_render", "forward pass does not match the Gaussian set");
  }
  const int W = cam.width, H = cam.height;
  const LossGradients lg = loss_gradients(fwd, gt_rgb, gt_depth, mask, w, ssim_params);

  GradBundle out;
  out.terms = lg.terms;
  out.grads.resize(gaussians.size());

  // Screen-space accumulators.
  struct Screen {
    Vec2 mean2d = Vec2::Zero();
    Mat2 conic = Mat2::Zero();
    double logit = 0.0;
    Vec3 color = Vec3::Zero();
    double z = 0.0;
    bool touched = false;
  };
  std::vector<Screen> screen(gaussians.size());

  std::vector<double> alphas, trans, gauss;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      const std::size_t begin = fwd.offsets[p], end = fwd.offsets[p + 1];
      if (begin == end) continue;
      const Vec3 dC(lg.d_color.at(x, y, 0), lg.d_color.at(x, y, 1), lg.d_color.at(x, y, 2));
      const double dD = lg.d_depth.at(x, y);
      if (dC.isZero(0.0) && dD == 0.0) continue;

      const Vec2 pix(x, y);
      const std::size_t n = end - begin;
      alphas.resize(n);
      trans.resize(n);
      gauss.resize(n);
      double T = 1.0;
      for (std::size_t k = 0; k < n; ++k) {
        const auto& s = fwd.splats[fwd.contributors[begin + k]];
        const Vec2 d = pix - s.mean2d;
        gauss[k] = std::exp(-0.5 * d.dot(s.conic * d));
        alphas[k] = std::min(cfg.alpha_max, s.opacity * gauss[k]);
        trans[k] = T;
        T *= 1.0 - alphas[k];
      }

      Vec3 suffix_c = Vec3::Zero();
      double suffix_d = 0.0;
      for (std::size_t kk = n; kk-- > 0;) {
        const int i = fwd.contributors[begin + kk];
        const auto& s = fwd.splats[i];
        const double a = alphas[kk], Ti = trans[kk], wgt = a * Ti;
        const double z = s.cam_point.z();
        Screen& sc = screen[i];
        sc.touched = true;
        sc.color += dC * wgt;
        sc.z += dD * wgt;
        const double dL_da =
            dC.dot(s.color * Ti - suffix_c / (1.0 - a)) + dD * (z * Ti - suffix_d / (1.0 - a));
        suffix_c += s.color * wgt;
        suffix_d += z * wgt;
        if (s.opacity * gauss[kk] >= cfg.alpha_max) continue;
        const double G = gauss[kk];
        sc.logit += dL_da * G * s.opacity * (1.0 - s.opacity);
        const double dL_dG = dL_da * s.opacity;
        const Vec2 d = pix - s.mean2d;
        sc.mean2d += dL_dG * G * (s.conic * d);
        sc.conic += dL_dG * (-0.5 * G) * (d * d.transpose());
      }
    }
  }

  const CameraFrame frame = camera_frame(view);
  const int ncoef = sh_coeff_count(cfg.sh_degree);
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    const Gaussian& g = gaussians[i];
    const Screen& sc = screen[i];
    if (!sc.touched || g.frozen) continue;
    const auto& s = fwd.splats[i];
    GaussianGrad& gr = out.grads[i];
    gr.touched = true;

    // Color: SH coefficients and view direction.
    const Vec3 v = g.mean - frame.center;
    const double vnorm = v.norm();
    const Vec3 dir = v / vnorm;
    std::array<double, kMaxShCoeffs> basis;
    std::array<Vec3, kMaxShCoeffs> dbasis;
    sh_basis(cfg.sh_degree, dir, basis, &dbasis);
    Vec3 raw = Vec3::Constant(0.5);
    for (int k = 0; k < ncoef; ++k) raw += basis[k] * g.sh[k];
    Vec3 g_color = sc.color;
    for (int c = 0; c < 3; ++c) {
      if (raw(c) < 0.0 || raw(c) > 1.0) g_color(c) = 0.0;
    }
    Vec3 g_dir = Vec3::Zero();
    for (int k = 0; k < ncoef; ++k) {
      gr.sh[k] = g_color * basis[k];
      g_dir += dbasis[k] * g_color.dot(g.sh[k]);
    }
    Vec3 g_mean = (Mat3::Identity() - dir * dir.transpose()) * g_dir / vnorm;

    gr.opacity_logit = sc.logit;

    // Conic -> cov2d -> (J, M) -> (camera point, Sigma) -> (scale, rotation).
    const Mat2& A = s.conic;
    const Mat2 g_cov2d = -A.transpose() * sc.conic * A.transpose();
    const Vec3& pc = s.cam_point;
    const auto J = perspective_jacobian(cam, pc);
    const Mat3 R = g.quat().toRotationMatrix();
    const Vec3 s2 = (2.0 * g.log_scale).array().exp();
    const Mat3 Sigma = R * s2.asDiagonal() * R.transpose();
    const Mat3 M = frame.W * Sigma * frame.W.transpose();
    const Mat3 g_M = J.transpose() * g_cov2d * J;
    const Eigen::Matrix<double, 2, 3> g_J = (g_cov2d + g_cov2d.transpose()) * J * M;
    const Mat3 g_Sigma = frame.W.transpose() * g_M * frame.W;
    const Mat3 g_Sym = g_Sigma + g_Sigma.transpose();
    const Mat3 g_R = g_Sym * R * s2.asDiagonal();
    const Mat3 g_D = R.transpose() * g_Sigma * R;
    for (int k = 0; k < 3; ++k) gr.log_scale(k) = g_D(k, k) * 2.0 * s2(k);

    const double qn = g.rotation.norm();
    const Vec4 qhat = g.rotation / qn;
    const auto dR = rotation_derivatives(qhat);
    Vec4 g_qhat;
    for (int k = 0; k < 4; ++k) g_qhat(k) = (g_R.array() * dR[k].array()).sum();
    gr.rotation = (Eigen::Matrix4d::Identity() - qhat * qhat.transpose()) * g_qhat / qn;

    const double iz = 1.0 / pc.z(), iz2 = iz * iz, iz3 = iz2 * iz;
    Vec3 g_pc;
    g_pc.x() = sc.mean2d.x() * cam.fx * iz + g_J(0, 2) * (-cam.fx * iz2);
    g_pc.y() = sc.mean2d.y() * cam.fy * iz + g_J(1, 2) * (-cam.fy * iz2);
    g_pc.z() = sc.mean2d.x() * (-cam.fx * pc.x() * iz2) + sc.mean2d.y() * (-cam.fy * pc.y() * iz2) + sc.z +
               g_J(0, 0) * (-cam.fx * iz2) + g_J(0, 2) * (2.0 * cam.fx * pc.x() * iz3) +
               g_J(1, 1) * (-cam.fy * iz2) + g_J(1, 2) * (2.0 * cam.fy * pc.y() * iz3);
    g_mean += frame.W.transpose() * g_pc;
    gr.mean = g_mean;
  }
  return out;
}

}  // namespace splatmap
