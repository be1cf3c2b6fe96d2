#pragma once

#include <Eigen/Dense>

#include <array>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpc {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyInput : Error {
  using Error::Error;
};
struct DegenerateInput : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Dense containers. Grids of side n = 2B per axis; index k in [-B, B-1] maps
// to storage index k + B. Storage is a flat row-major Eigen array so that
// whole-grid arithmetic stays expression-friendly.
// ---------------------------------------------------------------------------

template <typename T = double>
struct Grid3 {
  using ArrayT = Eigen::Array<T, Eigen::Dynamic, 1>;

  int B = 0;
  double extent = 1.0;  // physical side length of the cube
  ArrayT data;          // (2B)^3 values, row-major (i slowest)

  Grid3() = default;
  Grid3(int bandwidth, double extent_m)
      : B(bandwidth), extent(extent_m), data(ArrayT::Zero(size())) {}

  int n() const { return 2 * B; }
  Eigen::Index size() const { return Eigen::Index(n()) * n() * n(); }
  Eigen::Index idx(int i, int j, int k) const {
    return (Eigen::Index(i) * n() + j) * n() + k;
  }
  T& operator()(int i, int j, int k) { return data[idx(i, j, k)]; }
  T operator()(int i, int j, int k) const { return data[idx(i, j, k)]; }
};

template <typename T = double>
struct Grid2 {
  using ArrayT = Eigen::Array<T, Eigen::Dynamic, 1>;

  int B = 0;
  double extent = 1.0;  // meters per pixel times side (recorded, not used in math)
  ArrayT data;          // (2B)^2 values, row-major

  Grid2() = default;
  Grid2(int bandwidth, double extent_m)
      : B(bandwidth), extent(extent_m), data(ArrayT::Zero(size())) {}

  int n() const { return 2 * B; }
  Eigen::Index size() const { return Eigen::Index(n()) * n(); }
  Eigen::Index idx(int i, int j) const { return Eigen::Index(i) * n() + j; }
  T& operator()(int i, int j) { return data[idx(i, j)]; }
  T operator()(int i, int j) const { return data[idx(i, j)]; }
};

// Complex spectra share the grid layout. `centered` marks whether the zero
// frequency sits at storage index B (true) or 0 (false).
template <typename T = double>
struct Spectrum3 {
  using ArrayT = Eigen::Array<std::complex<T>, Eigen::Dynamic, 1>;

  int B = 0;
  bool centered = false;
  ArrayT data;

  Spectrum3() = default;
  explicit Spectrum3(int bandwidth, bool centered_ = false)
      : B(bandwidth), centered(centered_), data(ArrayT::Zero(size())) {}

  int n() const { return 2 * B; }
  Eigen::Index size() const { return Eigen::Index(n()) * n() * n(); }
  Eigen::Index idx(int i, int j, int k) const {
    return (Eigen::Index(i) * n() + j) * n() + k;
  }
  std::complex<T>& operator()(int i, int j, int k) { return data[idx(i, j, k)]; }
  std::complex<T> operator()(int i, int j, int k) const { return data[idx(i, j, k)]; }
};

template <typename T = double>
struct Spectrum2 {
  using ArrayT = Eigen::Array<std::complex<T>, Eigen::Dynamic, 1>;

  int B = 0;
  bool centered = false;
  ArrayT data;

  Spectrum2() = default;
  explicit Spectrum2(int bandwidth, bool centered_ = false)
      : B(bandwidth), centered(centered_), data(ArrayT::Zero(size())) {}

  int n() const { return 2 * B; }
  Eigen::Index size() const { return Eigen::Index(n()) * n(); }
  Eigen::Index idx(int i, int j) const { return Eigen::Index(i) * n() + j; }
  std::complex<T>& operator()(int i, int j) { return data[idx(i, j)]; }
  std::complex<T> operator()(int i, int j) const { return data[idx(i, j)]; }
};

// Correlation maps over signed shifts: index i along each axis stands for the
// shift i - B in cells, i.e. bin values cover [-B, B-1].
template <typename T = double>
struct CorrMap3 {
  int B = 0;
  Eigen::Array<T, Eigen::Dynamic, 1> data;

  CorrMap3() = default;
  explicit CorrMap3(int bandwidth)
      : B(bandwidth),
        data(Eigen::Array<T, Eigen::Dynamic, 1>::Zero(Eigen::Index(2 * bandwidth) *
                                                      (2 * bandwidth) * (2 * bandwidth))) {}

  int n() const { return 2 * B; }
  Eigen::Index idx(int i, int j, int k) const {
    return (Eigen::Index(i) * n() + j) * n() + k;
  }
  T& operator()(int i, int j, int k) { return data[idx(i, j, k)]; }
  T operator()(int i, int j, int k) const { return data[idx(i, j, k)]; }
  double shift_of(int i) const { return i - B; }
};

template <typename T = double>
struct CorrMap2 {
  int B = 0;
  Eigen::Array<T, Eigen::Dynamic, 1> data;

  CorrMap2() = default;
  explicit CorrMap2(int bandwidth)
      : B(bandwidth), data(Eigen::Array<T, Eigen::Dynamic, 1>::Zero(
                          Eigen::Index(2 * bandwidth) * (2 * bandwidth))) {}

  int n() const { return 2 * B; }
  Eigen::Index idx(int i, int j) const { return Eigen::Index(i) * n() + j; }
  T& operator()(int i, int j) { return data[idx(i, j)]; }
  T operator()(int i, int j) const { return data[idx(i, j)]; }
  double shift_of(int i) const { return i - B; }
};

// 1D correlation over signed shifts (used by the scale stage). Length may be
// odd (log-radius rows get cropped), so the zero-shift bin sits at n/2.
template <typename T = double>
struct CorrMap1 {
  int center = 0;
  Eigen::Array<T, Eigen::Dynamic, 1> data;

  CorrMap1() = default;
  explicit CorrMap1(int length)
      : center(length / 2),
        data(Eigen::Array<T, Eigen::Dynamic, 1>::Zero(length)) {}

  int n() const { return int(data.size()); }
  double shift_of(int i) const { return i - center; }
};

// Equiangular sampling of a function on the unit sphere:
// theta_a = pi (2a+1)/(4B), phi_b = pi b / B, a,b in [0, 2B).
template <typename T = double>
struct SphereGrid {
  int B = 0;
  Eigen::Array<T, Eigen::Dynamic, 1> data;  // (2B) x (2B), row-major over (a, b)

  SphereGrid() = default;
  explicit SphereGrid(int bandwidth)
      : B(bandwidth), data(Eigen::Array<T, Eigen::Dynamic, 1>::Zero(
                          Eigen::Index(2 * bandwidth) * (2 * bandwidth))) {}

  int n() const { return 2 * B; }
  Eigen::Index idx(int a, int b) const { return Eigen::Index(a) * n() + b; }
  T& operator()(int a, int b) { return data[idx(a, b)]; }
  T operator()(int a, int b) const { return data[idx(a, b)]; }
  static double theta(int a, int B) { return M_PI * (2 * a + 1) / (4.0 * B); }
  static double phi(int b, int B) { return M_PI * b / double(B); }
};

// Spherical-harmonic coefficients for degrees l < B, orders |m| <= l, packed
// degree-major: offset(l) = l^2, entry m at offset(l) + (m + l).
template <typename T = double>
struct SphCoeffs {
  int B = 0;
  Eigen::Array<std::complex<T>, Eigen::Dynamic, 1> c;  // B^2 entries

  SphCoeffs() = default;
  explicit SphCoeffs(int bandwidth)
      : B(bandwidth), c(Eigen::Array<std::complex<T>, Eigen::Dynamic, 1>::Zero(
                       Eigen::Index(bandwidth) * bandwidth)) {}

  Eigen::Index idx(int l, int m) const { return Eigen::Index(l) * l + (m + l); }
  std::complex<T>& operator()(int l, int m) { return c[idx(l, m)]; }
  std::complex<T> operator()(int l, int m) const { return c[idx(l, m)]; }
};

// Correlation volume over ZYZ Euler bins:
// alpha_i = 2 pi i / (2B), beta_j = pi (2j+1) / (4B), gamma_k = 2 pi k / (2B).
template <typename T = double>
struct So3Map {
  int B = 0;
  Eigen::Array<T, Eigen::Dynamic, 1> data;  // (2B)^3, row-major over (i, j, k)

  So3Map() = default;
  explicit So3Map(int bandwidth)
      : B(bandwidth), data(Eigen::Array<T, Eigen::Dynamic, 1>::Zero(
                          Eigen::Index(2 * bandwidth) * (2 * bandwidth) *
                          (2 * bandwidth))) {}

  int n() const { return 2 * B; }
  Eigen::Index idx(int i, int j, int k) const {
    return (Eigen::Index(i) * n() + j) * n() + k;
  }
  T& operator()(int i, int j, int k) { return data[idx(i, j, k)]; }
  T operator()(int i, int j, int k) const { return data[idx(i, j, k)]; }
  double alpha(int i) const { return 2.0 * M_PI * i / n(); }
  double beta(int j) const { return M_PI * (2 * j + 1) / (4.0 * B); }
  double gamma(int k) const { return 2.0 * M_PI * k / n(); }
};

// Log-polar resampling of a centered 2D map: rows are log-radius bins, columns
// angle bins; both axes have 2B samples.
template <typename T = double>
struct LogPolarGrid {
  int B = 0;
  double r_min = 1.0;
  Eigen::Array<T, Eigen::Dynamic, 1> data;  // (2B) x (2B) row-major (log-r, angle)

  LogPolarGrid() = default;
  explicit LogPolarGrid(int bandwidth, double rmin = 1.0)
      : B(bandwidth), r_min(rmin),
        data(Eigen::Array<T, Eigen::Dynamic, 1>::Zero(Eigen::Index(2 * bandwidth) *
                                                      (2 * bandwidth))) {}

  int n() const { return 2 * B; }
  Eigen::Index idx(int r, int a) const { return Eigen::Index(r) * n() + a; }
  T& operator()(int r, int a) { return data[idx(r, a)]; }
  T operator()(int r, int a) const { return data[idx(r, a)]; }
  double ell(int r) const {
    return std::log(r_min) + r * bin_width();
  }
  double bin_width() const {
    return (std::log(B - 1.0) - std::log(r_min)) / (n() - 1);
  }
  double angle(int a) const { return 2.0 * M_PI * a / n(); }
};

template <typename T = double>
struct RadialProfile {
  int B = 0;
  double r_min = 1.0;
  Eigen::Array<T, Eigen::Dynamic, 1> data;  // 2B log-radius bins

  RadialProfile() = default;
  explicit RadialProfile(int bandwidth, double rmin = 1.0)
      : B(bandwidth), r_min(rmin),
        data(Eigen::Array<T, Eigen::Dynamic, 1>::Zero(2 * bandwidth)) {}

  int n() const { return 2 * B; }
  double bin_width() const {
    return (std::log(B - 1.0) - std::log(r_min)) / (n() - 1);
  }
};

// ---------------------------------------------------------------------------
// Poses. 3D: out(k) = in(r * k * mu - t) with r the ZYZ rotation
// Rz(alpha) * Ry(beta) * Rz(gamma); t in grid cells. 2D analogue.
// ---------------------------------------------------------------------------

struct Pose7 {
  Eigen::Vector3d t = Eigen::Vector3d::Zero();  // cells
  double alpha = 0.0, beta = 0.0, gamma = 0.0;  // ZYZ, alpha/gamma in [0,2pi), beta in [0,pi]
  double mu = 1.0;

  Eigen::Matrix3d rotation() const;
  Pose7 inverse() const;
  static Pose7 from_rotation(const Eigen::Matrix3d& R, double mu = 1.0,
                             const Eigen::Vector3d& t = Eigen::Vector3d::Zero());
};

struct Pose4 {
  Eigen::Vector2d t = Eigen::Vector2d::Zero();  // pixels
  double theta = 0.0;                           // [0, 2pi)
  double mu = 1.0;
};

struct PointCloud {
  std::vector<Eigen::Vector3d> points;  // meters
};

// A probability density over the bins of some correlation map, together with
// the physical value each bin stands for (shift in cells, Euler angle, or
// log-scale). probs sums to 1.
struct Density {
  Eigen::ArrayXd probs;
  Eigen::ArrayXd bin_values;
};

inline double wrap_2pi(double a) {
  a = std::fmod(a, 2.0 * M_PI);
  return a < 0 ? a + 2.0 * M_PI : a;
}

inline Eigen::Matrix3d rot_z(double a) {
  Eigen::Matrix3d R;
  R << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return R;
}

inline Eigen::Matrix3d rot_y(double a) {
  Eigen::Matrix3d R;
  R << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return R;
}

inline Eigen::Matrix3d Pose7_rotation(double alpha, double beta, double gamma) {
  return rot_z(alpha) * rot_y(beta) * rot_z(gamma);
}

inline Eigen::Matrix3d Pose7::rotation() const {
  return Pose7_rotation(alpha, beta, gamma);
}

// ZYZ extraction: beta = acos(R22); at the beta ~ 0 / pi gimbal the split
// between alpha and gamma is conventional (gamma = 0).
inline Pose7 Pose7::from_rotation(const Eigen::Matrix3d& R, double mu_,
                                  const Eigen::Vector3d& t_) {
  Pose7 p;
  p.mu = mu_;
  p.t = t_;
  double c = std::clamp(R(2, 2), -1.0, 1.0);
  p.beta = std::acos(c);
  if (std::abs(c) > 1.0 - 1e-12) {
    // gimbal: beta ~ 0 gives R = Rz(alpha+gamma); beta ~ pi gives
    // Rz(alpha)Ry(pi)Rz(gamma) with only alpha-gamma observable. gamma := 0.
    p.alpha = c > 0 ? wrap_2pi(std::atan2(R(1, 0), R(0, 0)))
                    : wrap_2pi(std::atan2(-R(1, 0), -R(0, 0)));
    p.gamma = 0.0;
  } else {
    p.alpha = wrap_2pi(std::atan2(R(1, 2), R(0, 2)));
    p.gamma = wrap_2pi(std::atan2(R(2, 1), -R(2, 0)));
  }
  return p;
}

inline Pose7 Pose7::inverse() const {
  Eigen::Matrix3d R = rotation();
  Pose7 q = from_rotation(R.transpose(), 1.0 / mu, -R.transpose() * t / mu);
  return q;
}

using Grid3d = Grid3<double>;
using Grid2d = Grid2<double>;

}  // namespace dpc
