#pragma once

#include "dpc/grid.hpp"
#include "dpc/types.hpp"

#include <random>

namespace dpc {

enum class Heterogeneity { None, GaussianBlur };
enum class Partial { Complete, Crop };

// Synthetic pair recipe: pose ranges, degradation, and the seed. Generators
// are pure functions of this struct.
struct PairSpec {
  int dims = 2;
  int B = 128;                // image side / grid size = 2B
  double extent = 2.0;        // 3D cube extent, meters
  double t_bound = 50.0;      // 2D: |tx|,|ty| in px; 3D: ||t|| in cells
  double rot_range = M_PI;    // 2D: theta ~ U[0, rot_range)
  double mu_min = 0.8, mu_max = 1.2;
  Heterogeneity het = Heterogeneity::None;
  double blur_sigma = 2.0;
  double outlier_rate = 0.0;  // fraction of target count, uniform in the cube
  Partial partial = Partial::Complete;
  double crop_fraction = 0.2;
  std::uint64_t seed = 0;
  int npts_min = 2000, npts_max = 6000;  // 3D surface samples
  double shape_center_max = 0.3, shape_size_max = 0.45;  // meters

  void validate() const {
    if (dims != 2 && dims != 3) throw ConfigError("PairSpec: dims must be 2 or 3");
    if (B < 2) throw ConfigError("PairSpec: B too small");
    if (!(mu_min > 0) || mu_max < mu_min) throw ConfigError("PairSpec: bad mu range");
    if (outlier_rate < 0 || outlier_rate > 0.5)
      throw ConfigError("PairSpec: outlier_rate outside [0, 0.5]");
    if (crop_fraction < 0 || crop_fraction >= 1)
      throw ConfigError("PairSpec: bad crop_fraction");
    if (t_bound < 0 || rot_range < 0) throw ConfigError("PairSpec: negative range");
    if (npts_min < 4 || npts_max < npts_min) throw ConfigError("PairSpec: bad npts range");
    if (het == Heterogeneity::GaussianBlur && !(blur_sigma > 0))
      throw ConfigError("PairSpec: blur sigma must be positive");
  }
};

struct Pair2 {
  Grid2<double> source, target;
  Pose4 pose;  // target ~ apply_pose2(source, pose), then degradation
};

struct Pair3 {
  PointCloud source, target;
  Pose7 pose;  // voxelize(target) ~ apply_pose3(voxelize(source), pose)
};

// Uniform rotation via a normalized Gaussian quaternion.
inline Eigen::Matrix3d random_rotation(std::mt19937_64& eng) {
  std::normal_distribution<double> N01;
  Eigen::Vector4d q(N01(eng), N01(eng), N01(eng), N01(eng));
  q.normalize();
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Matrix3d R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

// Separable Gaussian blur, reflect boundary, kernel radius 4 sigma.
template <typename T>
Grid2<T> gaussian_blur2(const Grid2<T>& g, double sigma) {
  if (!(sigma > 0)) throw ConfigError("gaussian_blur2: sigma must be positive");
  const int n = g.n();
  const int rad = std::max(1, int(4.0 * sigma + 0.5));
  Eigen::ArrayXd k(2 * rad + 1);
  for (int i = -rad; i <= rad; ++i) k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
  k /= k.sum();
  auto reflect = [n](int i) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  Grid2<T> tmp(g.B, g.extent), out(g.B, g.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int o = -rad; o <= rad; ++o) acc += k[o + rad] * double(g(reflect(i + o), j));
      tmp(i, j) = T(acc);
    }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int o = -rad; o <= rad; ++o) acc += k[o + rad] * double(tmp(i, reflect(j + o)));
      out(i, j) = T(acc);
    }
  return out;
}

namespace detail {

// 3-8 filled primitives (rotated rectangles, discs, triangles) with random
// intensities, kept away from the border so warped copies stay in frame.
inline Grid2<double> primitives_image(int B, std::mt19937_64& eng) {
  const int n = 2 * B;
  Grid2<double> img(B, double(n));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const double margin = 48.0 * n / 256.0;
  const int nprim = 3 + int(eng() % 6);
  for (int pi = 0; pi < nprim; ++pi) {
    const int kind = int(eng() % 3);
    const double val = 0.3 + 0.7 * U(eng);
    const double cx = margin + (n - 2 * margin) * U(eng);
    const double cy = margin + (n - 2 * margin) * U(eng);
    if (kind == 0) {
      const double w = 12 + 38 * U(eng), h = 12 + 38 * U(eng);
      const double ang = M_PI * U(eng), ca = std::cos(ang), sa = std::sin(ang);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double u = (i - cx) * ca + (j - cy) * sa;
          const double v = -(i - cx) * sa + (j - cy) * ca;
          if (std::abs(u) < w / 2 && std::abs(v) < h / 2) img(i, j) = val;
        }
    } else if (kind == 1) {
      const double r = 8 + 22 * U(eng);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          if ((i - cx) * (i - cx) + (j - cy) * (j - cy) < r * r) img(i, j) = val;
    } else {
      Eigen::Vector2d p[3];
      for (auto& v : p)
        v = Eigen::Vector2d(cx - 40 + 80 * U(eng), cy - 40 + 80 * U(eng));
      auto cross = [](const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                      const Eigen::Vector2d& c) {
        return (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
      };
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const Eigen::Vector2d q{double(i), double(j)};
          bool inside = true;
          for (int e = 0; e < 3; ++e) {
            const double s_pt = cross(p[e], p[(e + 1) % 3], q);
            const double s_ref = cross(p[e], p[(e + 1) % 3], p[(e + 2) % 3]);
            if (s_pt * s_ref < 0) inside = false;
          }
          if (inside) img(i, j) = val;
        }
    }
  }
  return img;
}

}  // namespace detail

inline Pair2 gen2d(const PairSpec& spec) {
  spec.validate();
  if (spec.dims != 2) throw ConfigError("gen2d: spec.dims must be 2");
  std::mt19937_64 eng(spec.seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  Pair2 out;
  out.source = detail::primitives_image(spec.B, eng);
  out.pose.theta = spec.rot_range * U(eng);
  out.pose.mu = spec.mu_min + (spec.mu_max - spec.mu_min) * U(eng);
  out.pose.t = Eigen::Vector2d(spec.t_bound * (2 * U(eng) - 1),
                               spec.t_bound * (2 * U(eng) - 1));
  out.target = apply_pose2(out.source, out.pose);
  if (spec.het == Heterogeneity::GaussianBlur)
    out.target = gaussian_blur2(out.target, spec.blur_sigma);
  return out;
}

namespace detail {

// Union of two box surfaces, one sphere, one open cylinder, surface-sampled.
inline std::vector<Eigen::Vector3d> surface_cloud(int npts, double cmax, double smax,
                                                  std::mt19937_64& eng) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N01;
  std::vector<Eigen::Vector3d> pts;
  pts.reserve(npts);
  auto uc = [&](double m) { return m * (2 * U(eng) - 1); };
  for (int b = 0; b < 2; ++b) {
    Eigen::Vector3d c(uc(cmax), uc(cmax), uc(cmax));
    Eigen::Vector3d s(smax * (0.4 + 0.6 * U(eng)), smax * (0.4 + 0.6 * U(eng)),
                      smax * (0.4 + 0.6 * U(eng)));
    for (int q = 0; q < npts / 4; ++q) {
      Eigen::Vector3d u(uc(1), uc(1), uc(1));
      const int face = int(eng() % 6);
      u[face % 3] = face < 3 ? 1.0 : -1.0;
      pts.push_back(c + u.cwiseProduct(s));
    }
  }
  {
    Eigen::Vector3d c(uc(cmax), uc(cmax), uc(cmax));
    const double r = smax * (0.3 + 0.5 * U(eng));
    for (int q = 0; q < npts / 4; ++q) {
      Eigen::Vector3d v(N01(eng), N01(eng), N01(eng));
      pts.push_back(c + r * v.normalized());
    }
  }
  {
    Eigen::Vector3d c(uc(cmax), uc(cmax), uc(cmax));
    const double r = smax * (0.2 + 0.4 * U(eng));
    const double hh = smax * (0.5 + 0.5 * U(eng));
    while (int(pts.size()) < npts) {
      const double a = 2 * M_PI * U(eng), z = hh * (2 * U(eng) - 1);
      pts.push_back(c + Eigen::Vector3d(r * std::cos(a), r * std::sin(a), z));
    }
  }
  return pts;
}

}  // namespace detail

inline Pair3 gen3d(const PairSpec& spec) {
  spec.validate();
  if (spec.dims != 3) throw ConfigError("gen3d: spec.dims must be 3");
  std::mt19937_64 eng(spec.seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N01;
  const int npts = spec.npts_min + int(eng() % std::uint64_t(spec.npts_max - spec.npts_min + 1));
  Pair3 out;
  out.source.points =
      detail::surface_cloud(npts, spec.shape_center_max, spec.shape_size_max, eng);

  const Eigen::Matrix3d R = random_rotation(eng);
  const double mu =
      std::exp(std::log(spec.mu_min) + (std::log(spec.mu_max) - std::log(spec.mu_min)) * U(eng));
  Eigen::Vector3d dir(N01(eng), N01(eng), N01(eng));
  dir.normalize();
  const Eigen::Vector3d t_cells = dir * (spec.t_bound * U(eng));
  out.pose = Pose7::from_rotation(R, mu, t_cells);

  const double side = spec.extent / (2 * spec.B);
  out.target.points.reserve(out.source.points.size());
  for (const auto& p : out.source.points)
    out.target.points.push_back(R.transpose() * (p + t_cells * side) / mu);

  if (spec.partial == Partial::Crop && spec.crop_fraction > 0) {
    Eigen::Vector3d u(N01(eng), N01(eng), N01(eng));
    u.normalize();
    std::vector<double> proj(out.target.points.size());
    for (size_t i = 0; i < proj.size(); ++i) proj[i] = u.dot(out.target.points[i]);
    std::vector<double> sorted = proj;
    const size_t keep = proj.size() - size_t(spec.crop_fraction * double(proj.size()));
    std::nth_element(sorted.begin(), sorted.begin() + keep, sorted.end());
    const double cut = sorted[keep];
    std::vector<Eigen::Vector3d> kept;
    kept.reserve(keep);
    for (size_t i = 0; i < proj.size(); ++i)
      if (proj[i] < cut) kept.push_back(out.target.points[i]);
    out.target.points = std::move(kept);
  }
  if (spec.outlier_rate > 0) {
    const int nout = int(std::lround(spec.outlier_rate * double(out.target.points.size())));
    const double half = spec.extent / 2;
    for (int q = 0; q < nout; ++q)
      out.target.points.push_back(
          Eigen::Vector3d(half * (2 * U(eng) - 1), half * (2 * U(eng) - 1),
                          half * (2 * U(eng) - 1)));
  }
  return out;
}

}  // namespace dpc
