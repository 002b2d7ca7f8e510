#pragma once

// Clamped trilinear interpolation shared by the warp and loss kernels.

#include <cmath>
#include <cstdint>

namespace pulsereg::detail {

struct AxisLerp {
  std::int64_t i0, i1;
  double f;
  bool differentiable;  // position inside [0, n - 1); derivatives are right-sided
};

inline AxisLerp axis_lerp(double p, std::int64_t n) {
  const double hi = static_cast<double>(n - 1);
  if (n == 1 || p < 0.0 || std::isnan(p)) return {0, 0, 0.0, false};
  if (p >= hi) return {n - 1, n - 1, 0.0, false};
  const double fl = std::floor(p);
  const auto i0 = static_cast<std::int64_t>(fl);
  return {i0, i0 + 1, p - fl, true};
}

// Eight trilinear corners of a clamped sample plus partial-derivative
// weights with respect to the sample position.
struct Trilinear {
  std::int64_t index[8];
  double weight[8];
  double dwx[8], dwy[8], dwz[8];

  Trilinear(double x, double y, double z, std::int64_t d, std::int64_t h, std::int64_t w) {
    const AxisLerp ax = axis_lerp(x, w), ay = axis_lerp(y, h), az = axis_lerp(z, d);
    const std::int64_t xs[2] = {ax.i0, ax.i1}, ys[2] = {ay.i0, ay.i1}, zs[2] = {az.i0, az.i1};
    const double wx[2] = {1.0 - ax.f, ax.f}, wy[2] = {1.0 - ay.f, ay.f}, wz[2] = {1.0 - az.f, az.f};
    const double sx[2] = {ax.differentiable ? -1.0 : 0.0, ax.differentiable ? 1.0 : 0.0};
    const double sy[2] = {ay.differentiable ? -1.0 : 0.0, ay.differentiable ? 1.0 : 0.0};
    const double sz[2] = {az.differentiable ? -1.0 : 0.0, az.differentiable ? 1.0 : 0.0};
    int k = 0;
    for (int c = 0; c < 2; ++c)
      for (int b = 0; b < 2; ++b)
        for (int a = 0; a < 2; ++a, ++k) {
          index[k] = (zs[c] * h + ys[b]) * w + xs[a];
          weight[k] = wz[c] * wy[b] * wx[a];
          dwx[k] = wz[c] * wy[b] * sx[a];
          dwy[k] = wz[c] * sy[b] * wx[a];
          dwz[k] = sz[c] * wy[b] * wx[a];
        }
  }

  template <typename T>
  [[nodiscard]] double eval(const T* vol) const {
    double acc = 0.0;
    for (int k = 0; k < 8; ++k) acc += weight[k] * static_cast<double>(vol[index[k]]);
    return acc;
  }
};

}  // namespace pulsereg::detail
