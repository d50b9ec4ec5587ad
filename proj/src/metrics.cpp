#include "splatmap/metrics.hpp"

#include "splatmap/error.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace splatmap {

namespace {

// Zero-padded separable blur with the SSIM window.
void blur(std::vector<double>& plane, int W, int H, const std::vector<double>& k, std::vector<double>& tmp) {
  const int r = static_cast<int>(k.size() / 2);
  tmp.assign(plane.size(), 0.0);
  for (int y = 0; y < H; ++y) {
    const double* row = &plane[static_cast<std::size_t>(y) * W];
    double* out = &tmp[static_cast<std::size_t>(y) * W];
    for (int x = 0; x < W; ++x) {
      double s = 0.0;
      const int lo = std::max(-r, -x), hi = std::min(r, W - 1 - x);
      for (int d = lo; d <= hi; ++d) s += k[d + r] * row[x + d];
      out[x] = s;
    }
  }
  for (int y = 0; y < H; ++y) {
    const int lo = std::max(-r, -y), hi = std::min(r, H - 1 - y);
    double* out = &plane[static_cast<std::size_t>(y) * W];
    for (int x = 0; x < W; ++x) out[x] = 0.0;
    for (int d = lo; d <= hi; ++d) {
      const double kd = k[d + r];
      const double* in = &tmp[static_cast<std::size_t>(y + d) * W];
      for (int x = 0; x < W; ++x) out[x] += kd * in[x];
    }
  }
}

}  // namespace

double ssim(const Image& a, const Image& b, const Mask* mask, const SsimParams& p, Image* grad_a) {
  if (!a.same_shape(b)) throw Error(ErrorCode::DimensionMismatch, "metrics", "ssim inputs differ in shape");
  if (mask && (mask->width != a.width || mask->height != a.height)) {
    throw Error(ErrorCode::DimensionMismatch, "metrics", "ssim mask shape");
  }
  const int W = a.width, H = a.height, C = a.channels, r = p.radius;
  const std::size_t n = static_cast<std::size_t>(W) * H;
  const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
  const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
  std::vector<double> k(2 * r + 1);
  for (int d = -r; d <= r; ++d) k[d + r] = std::exp(-(d * d) / (2.0 * p.sigma * p.sigma));

  // Window sums restricted to masked pixels are blurs of masked planes.
  std::vector<double> m(n), tmp;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) m[static_cast<std::size_t>(y) * W + x] = (!mask || mask->at(x, y)) ? 1.0 : 0.0;
  std::vector<double> mass = m;
  blur(mass, W, H, k, tmp);

  std::size_t n_centers = 0;
  for (double v : m) n_centers += v != 0.0;
  if (n_centers == 0) throw Error(ErrorCode::EmptyMask, "metrics", "ssim over an empty mask");
  const double norm = 1.0 / (static_cast<double>(n_centers) * C);

  if (grad_a) *grad_a = Image(W, H, C, 0.0);
  double total = 0.0;
  std::vector<double> sa(n), sb(n), saa(n), sbb(n), sab(n), va(n), vb(n);
  for (int c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      va[i] = a.data[i * C + c];
      vb[i] = b.data[i * C + c];
      sa[i] = m[i] * va[i];
      sb[i] = m[i] * vb[i];
      saa[i] = sa[i] * va[i];
      sbb[i] = sb[i] * vb[i];
      sab[i] = sa[i] * vb[i];
    }
    for (auto* plane : {&sa, &sb, &saa, &sbb, &sab}) blur(*plane, W, H, k, tmp);
    // Reuse sa/saa/sab as the per-center coefficients of dS/dE[a], dS/dE[a^2], dS/dE[ab].
    for (std::size_t i = 0; i < n; ++i) {
      if (m[i] == 0.0) {
        sa[i] = saa[i] = sab[i] = 0.0;
        continue;
      }
      const double ms = mass[i];
      const double mu_a = sa[i] / ms, mu_b = sb[i] / ms;
      const double var_a = saa[i] / ms - mu_a * mu_a;
      const double var_b = sbb[i] / ms - mu_b * mu_b;
      const double cov = sab[i] / ms - mu_a * mu_b;
      const double n1 = 2.0 * mu_a * mu_b + c1, n2 = 2.0 * cov + c2;
      const double d1 = mu_a * mu_a + mu_b * mu_b + c1, d2 = var_a + var_b + c2;
      const double s = (n1 * n2) / (d1 * d2);
      total += s;
      if (grad_a) {
        const double ds_dvar = -s / d2;
        const double ds_dcov = 2.0 * s / n2;
        const double ds_dmu = s * (2.0 * mu_b / n1 - 2.0 * mu_a / d1);
        sa[i] = (ds_dmu + ds_dvar * (-2.0 * mu_a) + ds_dcov * (-mu_b)) / ms;
        saa[i] = ds_dvar / ms;
        sab[i] = ds_dcov / ms;
      }
    }
    if (!grad_a) continue;
    for (auto* plane : {&sa, &saa, &sab}) blur(*plane, W, H, k, tmp);
    for (std::size_t i = 0; i < n; ++i) {
      if (m[i] == 0.0) continue;
      grad_a->data[i * C + c] = (sa[i] + 2.0 * va[i] * saa[i] + vb[i] * sab[i]) * norm;
    }
  }
  return total * norm;
}

double mse(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::DimensionMismatch, "metrics", "mse inputs differ in shape");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

double psnr(const Image& a, const Image& b, double cap) {
  const double m = mse(a, b);
  if (m <= 0.0) return cap;
  return std::min(cap, 10.0 * std::log10(1.0 / m));
}

}  // namespace splatmap
