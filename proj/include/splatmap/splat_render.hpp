#pragma once

// CPU reference Gaussian splatting: EWA projection, front-to-back alpha
// compositing of color and depth, interior masking, the masked loss stack and
// exact analytic gradients.
//
// Views are camera poses (world-from-camera). Pixel (x, y) is sampled at the
// continuous coordinate (x, y).

#include "splatmap/gaussian.hpp"
#include "splatmap/image.hpp"
#include "splatmap/metrics.hpp"

#include <optional>
#include <span>
#include <vector>

namespace splatmap {

struct RenderConfig {
  double dilation = 0.3;            // px^2 added to the projected covariance
  double alpha_max = 0.999;
  double transmittance_min = 1e-4;
  double z_near = 0.05;
  // Means projecting further than this multiple of the image half-extent from
  // the principal point are culled; their footprints would be unbounded.
  double frustum_margin = 1.3;
  // Contributions with alpha below this are skipped; 0 makes every Gaussian
  // touch every pixel (smooth, used for gradient checks).
  double alpha_min = 1.0 / 255.0;
  int sh_degree = 1;
};

struct ProjectedGaussian {
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Identity();
  double depth = 0.0;
  // Pixel bounding box of the footprint, inclusive, clipped to the image.
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;
};

std::optional<ProjectedGaussian> project_gaussian(const Gaussian& g, const Camera& cam, const Pose& view,
                                                  const RenderConfig& cfg = {});

struct RenderOutput {
  Image color;      // H x W x 3
  Image depth;      // H x W
  Image acc_alpha;  // H x W

  // Per-pixel contributor lists in compositing order (CSR over pixels).
  std::vector<std::size_t> offsets;
  std::vector<int> contributors;

  // Per-Gaussian projected state, indexed like the input span.
  struct Splat {
    bool visible = false;
    Vec2 mean2d = Vec2::Zero();
    Mat2 conic = Mat2::Identity();  // inverse of cov2d
    Mat2 cov2d = Mat2::Identity();
    Vec3 cam_point = Vec3::Zero();
    Vec3 color = Vec3::Zero();
    double opacity = 0.0;
  };
  std::vector<Splat> splats;

  std::size_t contributor_count(int x, int y) const {
    const std::size_t p = static_cast<std::size_t>(y) * color.width + x;
    return offsets[p + 1] - offsets[p];
  }
};

RenderOutput render(std::span<const Gaussian> gaussians, const Camera& cam, const Pose& view,
                    const RenderConfig& cfg = {});

Mask interior_mask(const Image& acc_alpha, double alpha_thresh, int r_erode);

struct LossWeights {
  double rgb = 0.8;
  double ssim = 0.2;
  double depth = 0.1;
};

struct LossTerms {
  double total = 0.0;
  double rgb = 0.0;
  double ssim = 0.0;
  double depth = 0.0;
  std::size_t supervised_pixels = 0;
};

struct LossGradients {
  LossTerms terms;
  Image d_color;  // dL/dC per pixel
  Image d_depth;  // dL/dD per pixel
};

LossTerms losses(const RenderOutput& r, const Image& gt_rgb, const Image& gt_depth, const Mask& mask,
                 const LossWeights& w, const SsimParams& ssim_params = {});

LossGradients loss_gradients(const RenderOutput& r, const Image& gt_rgb, const Image& gt_depth, const Mask& mask,
                             const LossWeights& w, const SsimParams& ssim_params = {});

struct GaussianGrad {
  Vec3 mean = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Vec4 rotation = Vec4::Zero();  // w.r.t. the ambient (w,x,y,z) 4-vector
  double opacity_logit = 0.0;
  std::array<Vec3, kMaxShCoeffs> sh = zero_sh();
  bool touched = false;
};

struct GradBundle {
  LossTerms terms;
  std::vector<GaussianGrad> grads;  // indexed like the input span
};

// Analytic gradients of the masked loss. `fwd` must come from render() on the
// same inputs. Frozen Gaussians and non-contributors get zero gradients.
GradBundle backward(std::span<const Gaussian> gaussians, const Camera& cam, const Pose& view,
                    const RenderOutput& fwd, const Image& gt_rgb, const Image& gt_depth, const Mask& mask,
                    const LossWeights& w, const RenderConfig& cfg = {}, const SsimParams& ssim_params = {});

}  // namespace splatmap
