#pragma once

#include "splatmap/image.hpp"

namespace splatmap {

struct SsimParams {
  int radius = 5;  // 11x11 window
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

// Mean SSIM over the pixels of `mask` (all pixels when mask is null) and all
// channels. Window statistics only use in-mask, in-image pixels, with the
// Gaussian weights renormalized. When grad_a is non-null it receives
// d(mean SSIM)/d(a), same shape as `a`.
double ssim(const Image& a, const Image& b, const Mask* mask = nullptr, const SsimParams& params = {},
            Image* grad_a = nullptr);

double mse(const Image& a, const Image& b);

// 10 log10(1/MSE) for [0,1] images, capped at `cap` dB when MSE is zero.
double psnr(const Image& a, const Image& b, double cap = 99.0);

}  // namespace splatmap
