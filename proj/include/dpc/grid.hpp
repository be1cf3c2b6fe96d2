#pragma once

#include "dpc/types.hpp"

namespace dpc {

enum class Interp { Nearest, Trilinear };

struct VoxelizeStats {
  Eigen::Index dropped = 0;  // points outside the extent cube
};

// Binary occupancy rasterization: cell side = extent/(2B); cell i is centered
// at (i - B)*side, so a point p lands in round(p/side) + B per axis. The
// center convention keeps poses estimated on grids consistent with poses of
// the underlying points (a floor convention would smuggle in a rotation-
// dependent half-cell translation bias). Out-of-range points are dropped.
template <typename T = double>
Grid3<T> voxelize(const PointCloud& cloud, int B, double extent,
                  VoxelizeStats* stats = nullptr) {
  if (cloud.points.empty()) throw EmptyInput("voxelize: empty point cloud");
  if (extent <= 0) throw ConfigError("voxelize: extent must be positive");
  Grid3<T> g(B, extent);
  const int n = 2 * B;
  const double side = extent / n;
  Eigen::Index dropped = 0;
  for (const auto& p : cloud.points) {
    bool in = true;
    int c[3];
    for (int a = 0; a < 3; ++a) {
      int i = int(std::floor(p[a] / side + 0.5)) + B;
      if (i < 0 || i >= n) {
        in = false;
        break;
      }
      c[a] = i;
    }
    if (in)
      g(c[0], c[1], c[2]) = T(1);
    else
      ++dropped;
  }
  if (stats) stats->dropped = dropped;
  if (dropped == Eigen::Index(cloud.points.size()))
    throw DegenerateInput("voxelize: every point fell outside the extent cube");
  return g;
}

template <typename GridT>
GridT normalize(const GridT& g) {
  double nrm = std::sqrt(double((g.data * g.data).sum()));
  if (!(nrm > 0))
    throw DegenerateInput("normalize: grid has zero energy");
  GridT out = g;
  out.data /= nrm;
  return out;
}

// out(k) = in(R k mu - t), k centered in cells; zero fill outside.
template <typename T>
Grid3<T> apply_pose3(const Grid3<T>& g, const Pose7& p,
                     Interp interp = Interp::Trilinear) {
  const int n = g.n(), B = g.B;
  Grid3<T> out(B, g.extent);
  const Eigen::Matrix3d R = p.rotation();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        Eigen::Vector3d q = R * Eigen::Vector3d(i - B, j - B, k - B) * p.mu - p.t;
        double x = q[0] + B, y = q[1] + B, z = q[2] + B;
        if (interp == Interp::Nearest) {
          int xi = int(std::lround(x)), yi = int(std::lround(y)), zi = int(std::lround(z));
          if (xi >= 0 && xi < n && yi >= 0 && yi < n && zi >= 0 && zi < n)
            out(i, j, k) = g(xi, yi, zi);
        } else {
          int x0 = int(std::floor(x)), y0 = int(std::floor(y)), z0 = int(std::floor(z));
          double fx = x - x0, fy = y - y0, fz = z - z0;
          T acc = T(0);
          for (int dx = 0; dx < 2; ++dx)
            for (int dy = 0; dy < 2; ++dy)
              for (int dz = 0; dz < 2; ++dz) {
                int xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
                if (xi < 0 || xi >= n || yi < 0 || yi >= n || zi < 0 || zi >= n) continue;
                double wgt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                acc += T(wgt) * g(xi, yi, zi);
              }
          out(i, j, k) = acc;
        }
      }
  return out;
}

// 2D analogue: out(k) = in(R(theta) k mu - t).
template <typename T>
Grid2<T> apply_pose2(const Grid2<T>& g, const Pose4& p,
                     Interp interp = Interp::Trilinear) {
  const int n = g.n(), B = g.B;
  Grid2<T> out(B, g.extent);
  const double c = std::cos(p.theta), s = std::sin(p.theta);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double u = i - B, v = j - B;
      double x = (c * u - s * v) * p.mu - p.t[0] + B;
      double y = (s * u + c * v) * p.mu - p.t[1] + B;
      if (interp == Interp::Nearest) {
        int xi = int(std::lround(x)), yi = int(std::lround(y));
        if (xi >= 0 && xi < n && yi >= 0 && yi < n) out(i, j) = g(xi, yi);
      } else {
        int x0 = int(std::floor(x)), y0 = int(std::floor(y));
        double fx = x - x0, fy = y - y0;
        T acc = T(0);
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy) {
            int xi = x0 + dx, yi = y0 + dy;
            if (xi < 0 || xi >= n || yi < 0 || yi >= n) continue;
            acc += T((dx ? fx : 1 - fx) * (dy ? fy : 1 - fy)) * g(xi, yi);
          }
        out(i, j) = acc;
      }
    }
  return out;
}

// Circular (wrapping) shift: out(x) = in(x - s). Test helper and oracle input.
template <typename T>
Grid3<T> circular_shift(const Grid3<T>& g, int sx, int sy, int sz) {
  const int n = g.n();
  Grid3<T> out(g.B, g.extent);
  auto m = [n](int v) { return ((v % n) + n) % n; };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) out(i, j, k) = g(m(i - sx), m(j - sy), m(k - sz));
  return out;
}

template <typename T>
Grid2<T> circular_shift(const Grid2<T>& g, int sx, int sy) {
  const int n = g.n();
  Grid2<T> out(g.B, g.extent);
  auto m = [n](int v) { return ((v % n) + n) % n; };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out(i, j) = g(m(i - sx), m(j - sy));
  return out;
}

}  // namespace dpc
