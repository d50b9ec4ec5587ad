#include "splatmap/gaussian.hpp"

namespace splatmap {

namespace {
constexpr double C1 = 0.4886025119029199;
constexpr double C2[] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
                         0.5462742152960396};
constexpr double C3[] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
                         -0.4570457994644658, 1.445305721320277, -0.5900435899266435};
}  // namespace

void sh_basis(int degree, const Vec3& dir, std::array<double, kMaxShCoeffs>& b, std::array<Vec3, kMaxShCoeffs>* g) {
  const double x = dir.x(), y = dir.y(), z = dir.z();
  b[0] = kShC0;
  if (g) (*g)[0].setZero();
  if (degree < 1) return;

  b[1] = -C1 * y;
  b[2] = C1 * z;
  b[3] = -C1 * x;
  if (g) {
    (*g)[1] = {0.0, -C1, 0.0};
    (*g)[2] = {0.0, 0.0, C1};
    (*g)[3] = {-C1, 0.0, 0.0};
  }
  if (degree < 2) return;

  const double xx = x * x, yy = y * y, zz = z * z;
  b[4] = C2[0] * x * y;
  b[5] = C2[1] * y * z;
  b[6] = C2[2] * (2.0 * zz - xx - yy);
  b[7] = C2[3] * x * z;
  b[8] = C2[4] * (xx - yy);
  if (g) {
    (*g)[4] = {C2[0] * y, C2[0] * x, 0.0};
    (*g)[5] = {0.0, C2[1] * z, C2[1] * y};
    (*g)[6] = {-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z};
    (*g)[7] = {C2[3] * z, 0.0, C2[3] * x};
    (*g)[8] = {2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0};
  }
  if (degree < 3) return;

  b[9] = C3[0] * y * (3.0 * xx - yy);
  b[10] = C3[1] * x * y * z;
  b[11] = C3[2] * y * (4.0 * zz - xx - yy);
  b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
  b[13] = C3[4] * x * (4.0 * zz - xx - yy);
  b[14] = C3[5] * z * (xx - yy);
  b[15] = C3[6] * x * (xx - 3.0 * yy);
  if (g) {
    (*g)[9] = {C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0};
    (*g)[10] = {C3[1] * y * z, C3[1] * x * z, C3[1] * x * y};
    (*g)[11] = {C3[2] * (-2.0 * x * y), C3[2] * (4.0 * zz - xx - 3.0 * yy), C3[2] * 8.0 * y * z};
    (*g)[12] = {C3[3] * (-6.0 * x * z), C3[3] * (-6.0 * y * z), C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)};
    (*g)[13] = {C3[4] * (4.0 * zz - 3.0 * xx - yy), C3[4] * (-2.0 * x * y), C3[4] * 8.0 * x * z};
    (*g)[14] = {C3[5] * 2.0 * x * z, C3[5] * (-2.0 * y * z), C3[5] * (xx - yy)};
    (*g)[15] = {C3[6] * (3.0 * xx - 3.0 * yy), C3[6] * (-6.0 * x * y), 0.0};
  }
}

}  // namespace splatmap
