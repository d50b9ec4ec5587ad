#pragma once

// Independent reference computations used by unit and acceptance tests.
// None of these call into the code paths they check.

#include "splatmap/geom.hpp"
#include "splatmap/image.hpp"
#include "splatmap/voxel_pca.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

namespace splatmap::oracle {

// Eigenvalues (ascending) of a symmetric 3x3 matrix from the characteristic
// polynomial, trigonometric form.
inline Vec3 symmetric_eigenvalues(const Mat3& A) {
  const double p1 = A(0, 1) * A(0, 1) + A(0, 2) * A(0, 2) + A(1, 2) * A(1, 2);
  const double q = A.trace() / 3.0;
  if (p1 == 0.0) {
    Vec3 d(A(0, 0), A(1, 1), A(2, 2));
    std::sort(d.data(), d.data() + 3);
    return d;
  }
  const double p2 = (A(0, 0) - q) * (A(0, 0) - q) + (A(1, 1) - q) * (A(1, 1) - q) + (A(2, 2) - q) * (A(2, 2) - q) +
                    2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  const Mat3 B = (A - q * Mat3::Identity()) / p;
  const double r = std::clamp(B.determinant() / 2.0, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double e1 = q + 2.0 * p * std::cos(phi);
  const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
  const double e2 = 3.0 * q - e1 - e3;
  Vec3 out(e3, e2, e1);
  std::sort(out.data(), out.data() + 3);
  return out;
}

inline Mat3 naive_covariance(const std::vector<Vec3>& pts) {
  Vec3 mu = Vec3::Zero();
  for (const auto& p : pts) mu += p;
  mu /= static_cast<double>(pts.size());
  Mat3 C = Mat3::Zero();
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      double s = 0.0;
      for (const auto& p : pts) s += (p(a) - mu(a)) * (p(b) - mu(b));
      C(a, b) = s / static_cast<double>(pts.size());
    }
  }
  return C;
}

struct MonteCarloDescriptor {
  Mat3 direction_cov;
  Mat3 mean_cov;
};

// Resamples isotropic noise around nominal points, refits PCA and measures the
// empirical covariance of the selected eigenvector (sign-aligned) and the mean.
inline MonteCarloDescriptor monte_carlo_descriptor(const std::vector<Vec3>& nominal, double sigma, int axis,
                                                   const Vec3& reference_dir, int samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<Vec3> dirs, means;
  dirs.reserve(samples);
  means.reserve(samples);
  std::vector<Vec3> pts(nominal.size());
  for (int s = 0; s < samples; ++s) {
    for (std::size_t i = 0; i < nominal.size(); ++i) pts[i] = nominal[i] + Vec3(noise(rng), noise(rng), noise(rng));
    const Mat3 C = naive_covariance(pts);
    Vec3 mu = Vec3::Zero();
    for (const auto& p : pts) mu += p;
    mu /= static_cast<double>(pts.size());
    // Eigenvector by inverse iteration on the oracle eigenvalue.
    const Vec3 lam = symmetric_eigenvalues(C);
    const double shift = lam(axis) + 1e-12;
    Vec3 v = reference_dir;
    for (int it = 0; it < 30; ++it) {
      v = (C - shift * Mat3::Identity()).fullPivLu().solve(v);
      v.normalize();
    }
    if (v.dot(reference_dir) < 0.0) v = -v;
    dirs.push_back(v);
    means.push_back(mu);
  }
  auto cov_of = [](const std::vector<Vec3>& xs) {
    Vec3 m = Vec3::Zero();
    for (const auto& x : xs) m += x;
    m /= static_cast<double>(xs.size());
    Mat3 c = Mat3::Zero();
    for (const auto& x : xs) c += (x - m) * (x - m).transpose();
    return Mat3(c / static_cast<double>(xs.size() - 1));
  };
  return {cov_of(dirs), cov_of(means)};
}

// Chebyshev-disc erosion by direct min over the neighborhood; outside the image counts as false.
inline Mask brute_force_erode(const Mask& m, int r) {
  Mask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      bool all = true;
      for (int dy = -r; dy <= r && all; ++dy) {
        for (int dx = -r; dx <= r && all; ++dx) {
          const int xx = x + dx, yy = y + dy;
          all = xx >= 0 && yy >= 0 && xx < m.width && yy < m.height && m.at(xx, yy);
        }
      }
      out.set(x, y, all);
    }
  }
  return out;
}

// Direct-summation SSIM: per pixel, per channel, two-pass window statistics
// over in-mask, in-image neighbors with renormalized Gaussian weights.
inline double direct_ssim(const Image& a, const Image& b, const Mask* mask, int radius = 5, double sigma = 1.5,
                          double k1 = 0.01, double k2 = 0.03) {
  const double c1 = k1 * k1, c2 = k2 * k2;
  double sum = 0.0;
  std::size_t count = 0;
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      if (mask && !mask->at(x, y)) continue;
      for (int c = 0; c < a.channels; ++c) {
        std::vector<double> ws, va, vb;
        for (int yy = y - radius; yy <= y + radius; ++yy) {
          for (int xx = x - radius; xx <= x + radius; ++xx) {
            if (xx < 0 || yy < 0 || xx >= a.width || yy >= a.height) continue;
            if (mask && !mask->at(xx, yy)) continue;
            const double d2 = (xx - x) * (xx - x) + (yy - y) * (yy - y);
            ws.push_back(std::exp(-d2 / (2 * sigma * sigma)));
            va.push_back(a.at(xx, yy, c));
            vb.push_back(b.at(xx, yy, c));
          }
        }
        double wsum = 0.0;
        for (double w : ws) wsum += w;
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < ws.size(); ++i) {
          ma += ws[i] / wsum * va[i];
          mb += ws[i] / wsum * vb[i];
        }
        double saa = 0, sbb = 0, sab = 0;
        for (std::size_t i = 0; i < ws.size(); ++i) {
          const double w = ws[i] / wsum;
          saa += w * (va[i] - ma) * (va[i] - ma);
          sbb += w * (vb[i] - mb) * (vb[i] - mb);
          sab += w * (va[i] - ma) * (vb[i] - mb);
        }
        sum += ((2 * ma * mb + c1) * (2 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
        ++count;
      }
    }
  }
  return sum / static_cast<double>(count);
}

// Central finite difference of a scalar function of one parameter.
inline double central_difference(const std::function<double(double)>& f, double x0, double eps) {
  return (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps);
}

}  // namespace splatmap::oracle
