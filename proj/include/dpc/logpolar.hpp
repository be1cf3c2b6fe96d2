#pragma once

#include "dpc/types.hpp"

namespace dpc {

// Sum a centered 3D magnitude grid along one axis; the result keeps the
// centered layout of the remaining two axes.
template <typename T>
Grid2<T> accumulate_axis(const Grid3<T>& mag, int axis) {
  if (axis < 0 || axis > 2) throw ConfigError("accumulate_axis: axis must be 0, 1, or 2");
  const int n = mag.n();
  Grid2<T> out(mag.B, mag.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      T acc = T(0);
      for (int q = 0; q < n; ++q) {
        switch (axis) {
          case 0: acc += mag(q, i, j); break;
          case 1: acc += mag(i, q, j); break;
          default: acc += mag(i, j, q); break;
        }
      }
      out(i, j) = acc;
    }
  return out;
}

// Resample a centered 2D map onto (log-radius, angle): 2B log-spaced radii in
// [r_min, B-1], 2B angles in [0, 2pi); bilinear, zero outside.
template <typename T>
LogPolarGrid<T> to_logpolar(const Grid2<T>& g, double r_min = 1.0) {
  if (r_min < 1.0) throw ConfigError("to_logpolar: r_min must be >= 1");
  const int B = g.B, n = g.n();
  LogPolarGrid<T> lp(B, r_min);
  for (int r = 0; r < n; ++r) {
    const double radius = std::exp(lp.ell(r));
    for (int a = 0; a < n; ++a) {
      const double ang = lp.angle(a);
      const double x = radius * std::cos(ang) + B;
      const double y = radius * std::sin(ang) + B;
      const int x0 = int(std::floor(x)), y0 = int(std::floor(y));
      const double fx = x - x0, fy = y - y0;
      double acc = 0;
      for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy) {
          const int xi = x0 + dx, yi = y0 + dy;
          if (xi < 0 || xi >= n || yi < 0 || yi >= n) continue;
          acc += (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * double(g(xi, yi));
        }
      lp(r, a) = T(acc);
    }
  }
  return lp;
}

// Aggregate the angle axis by summation, leaving a 1D log-radius profile.
template <typename T>
RadialProfile<T> radial_profile(const LogPolarGrid<T>& lp) {
  const int n = lp.n();
  RadialProfile<T> p(lp.B, lp.r_min);
  for (int r = 0; r < n; ++r) {
    T acc = T(0);
    for (int a = 0; a < n; ++a) acc += lp(r, a);
    p.data[r] = acc;
  }
  return p;
}

}  // namespace dpc
