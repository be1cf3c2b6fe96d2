#pragma once

#include "dpc/spectral.hpp"
#include "dpc/types.hpp"

#include <unsupported/Eigen/FFT>

#include <memory>
#include <mutex>
#include <unordered_map>

namespace dpc {

// ---------------------------------------------------------------------------
// Immutable per-bandwidth tables: equiangular grid, pole-compensating
// quadrature weights, and normalized associated Legendre values
//   Pbar[l, m, a] such that Y^l_m(theta_a, phi) = Pbar * e^{i m phi},
// orthonormal convention with Condon-Shortley phase; Pbar includes 1/sqrt(2pi).
// ---------------------------------------------------------------------------

class SphTables {
 public:
  int B;
  Eigen::ArrayXd theta;    // 2B polar samples pi(2a+1)/(4B)
  Eigen::ArrayXd weights;  // 2B quadrature weights, sum = 2
  Eigen::ArrayXd pbar;     // [l][m + B-1][a] flattened

  explicit SphTables(int bandwidth) : B(bandwidth) {
    const int n = 2 * B;
    theta.resize(n);
    for (int a = 0; a < n; ++a) theta[a] = M_PI * (2 * a + 1) / (4.0 * B);
    weights.resize(n);
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < B; ++k) s += std::sin((2 * k + 1) * theta[j]) / (2 * k + 1);
      weights[j] = (2.0 / B) * std::sin(theta[j]) * s;
    }
    build_legendre();
  }

  double P(int l, int m, int a) const {
    return pbar[(Eigen::Index(l) * (2 * B - 1) + (m + B - 1)) * (2 * B) + a];
  }

  // Shared immutable cache; concurrent readers are safe after construction.
  static const SphTables& get(int bandwidth) {
    static std::mutex mu;
    static std::unordered_map<int, std::unique_ptr<SphTables>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = cache[bandwidth];
    if (!slot) slot = std::make_unique<SphTables>(bandwidth);
    return *slot;
  }

 private:
  void build_legendre() {
    const int n = 2 * B;
    pbar = Eigen::ArrayXd::Zero(Eigen::Index(B) * (2 * B - 1) * n);
    auto at = [&](int l, int m, int a) -> double& {
      return pbar[(Eigen::Index(l) * (2 * B - 1) + (m + B - 1)) * n + a];
    };
    for (int a = 0; a < n; ++a) {
      const double x = std::cos(theta[a]);
      const double sx = std::sin(theta[a]);
      for (int m = 0; m < B; ++m) {
        // seed: Pbar^m_m = (-1)^m sqrt((2m+1)/(4pi) * (2m)! / (2^{2m} (m!)^2)) sin^m
        double lg = 0.5 * (std::log(2.0 * m + 1) - std::log(4.0 * M_PI) +
                           std::lgamma(2.0 * m + 1) - 2.0 * m * std::log(2.0) -
                           2.0 * std::lgamma(m + 1.0));
        double pmm = ((m % 2) ? -1.0 : 1.0) * std::exp(lg + m * std::log(std::max(sx, 1e-300)));
        at(m, m, a) = pmm;
        if (m + 1 < B) at(m + 1, m, a) = std::sqrt(2.0 * m + 3.0) * x * pmm;
        for (int l = m + 2; l < B; ++l) {
          double ca = std::sqrt((4.0 * l * l - 1) / (double(l) * l - double(m) * m));
          double cb = std::sqrt((double(l - 1) * (l - 1) - double(m) * m) /
                                (4.0 * double(l - 1) * (l - 1) - 1));
          at(l, m, a) = ca * (x * at(l - 1, m, a) - cb * at(l - 2, m, a));
        }
      }
      for (int m = 1; m < B; ++m)
        for (int l = m; l < B; ++l) at(l, -m, a) = ((m % 2) ? -1.0 : 1.0) * at(l, m, a);
    }
  }
};

// ---------------------------------------------------------------------------
// Wigner-d planes d^l_{m,n}(beta): an iterator producing, for fixed beta, the
// (2B-1)x(2B-1) array for each degree l in turn (three-term recurrence in l,
// closed-form seeds on the |m|,|n| = l ring).
// ---------------------------------------------------------------------------

class WignerPlanes {
 public:
  WignerPlanes(int bandwidth, double beta)
      : B(bandwidth), beta_(beta), x_(std::cos(beta)), sz_(2 * bandwidth - 1),
        D_(Eigen::ArrayXXd::Zero(sz_, sz_)), Dm1_(Eigen::ArrayXXd::Zero(sz_, sz_)),
        l_(-1) {}

  // Advance to the next degree (0, 1, 2, ...) and return d^l as [m+off, n+off].
  const Eigen::ArrayXXd& next() {
    ++l_;
    const int l = l_, off = B - 1;
    Eigen::ArrayXXd cur = Eigen::ArrayXXd::Zero(sz_, sz_);
    if (l == 0) {
      cur(off, off) = 1.0;
    } else {
      if (l == 1) {
        cur(off, off) = x_ * D_(off, off);
      } else {
        const double lp = l, lm = l - 1.0;
        for (int m = -(l - 1); m <= l - 1; ++m)
          for (int n = -(l - 1); n <= l - 1; ++n) {
            double A = std::sqrt((lp * lp - m * m) * (lp * lp - n * n)) * lm;
            double Bc = (2 * lm + 1) * (lm * lp * x_ - double(m) * n);
            double C = std::sqrt((lm * lm - m * m) * (lm * lm - n * n)) * lp;
            cur(off + m, off + n) = (Bc * D_(off + m, off + n) - C * Dm1_(off + m, off + n)) / A;
          }
      }
      // seeds on the boundary ring max(|m|,|n|) = l
      for (int m = -l; m <= l; ++m) {
        cur(off + m, off - l) = seed(l, m, -l);
        cur(off + m, off + l) = seed(l, m, l);
      }
      for (int n = -l; n <= l; ++n) {
        cur(off - l, off + n) = seed(l, -l, n);
        cur(off + l, off + n) = seed(l, l, n);
      }
    }
    Dm1_.swap(D_);
    D_ = cur;
    return D_;
  }

  // Closed-form single-term value valid when l = max(|m|, |n|).
  double seed(int l, int m, int n) const {
    const double k = std::max(0, n - m);
    double lg = 0.5 * (std::lgamma(l + m + 1.0) + std::lgamma(l - m + 1.0) +
                       std::lgamma(l + n + 1.0) + std::lgamma(l - n + 1.0)) -
                std::lgamma(l + n - k + 1.0) - std::lgamma(k + 1.0) -
                std::lgamma(m - n + k + 1.0) - std::lgamma(l - m - k + 1.0);
    const double c = std::cos(beta_ / 2), s = std::sin(beta_ / 2);
    const double pc = 2 * l - 2 * k + n - m, ps = 2 * k + m - n;
    double v = lg;
    v += pc > 0 ? pc * std::log(std::max(c, 1e-300)) : 0.0;
    v += ps > 0 ? ps * std::log(std::max(s, 1e-300)) : 0.0;
    double sign = (std::lround(k) + m - n) % 2 ? -1.0 : 1.0;
    return sign * std::exp(v);
  }

 private:
  int B;
  double beta_, x_;
  int sz_;
  Eigen::ArrayXXd D_, Dm1_;
  int l_;
};

// ---------------------------------------------------------------------------
// Radial aggregation: sum the centered magnitude grid along rays from the
// center out to radius B-1 (DC excluded), one trilinear sample per radius
// step, then L2-normalize. sphere_B sets the output sphere resolution
// (defaults to the grid bandwidth).
// ---------------------------------------------------------------------------

// Linear gather half of the projection (no normalization).
template <typename T>
SphereGrid<T> radial_gather(const Grid3<T>& mag, int n_radial = -1, int sphere_B = -1) {
  const int Bg = mag.B, n = mag.n();
  const int Bs = sphere_B > 0 ? sphere_B : Bg;
  if (n_radial < 0) n_radial = Bg;
  if (n_radial < 2) throw ConfigError("radial_project: need at least two samples");
  SphereGrid<T> s(Bs);
  const int ns = 2 * Bs;
  for (int a = 0; a < ns; ++a) {
    const double th = SphereGrid<T>::theta(a, Bs);
    for (int b = 0; b < ns; ++b) {
      const double ph = SphereGrid<T>::phi(b, Bs);
      const double ux = std::sin(th) * std::cos(ph);
      const double uy = std::sin(th) * std::sin(ph);
      const double uz = std::cos(th);
      double acc = 0;
      for (int q = 0; q < n_radial; ++q) {
        const double r = 1.0 + q * (Bg - 2.0) / (n_radial - 1);
        const double xx = ux * r + Bg, yy = uy * r + Bg, zz = uz * r + Bg;
        const int x0 = int(std::floor(xx)), y0 = int(std::floor(yy)), z0 = int(std::floor(zz));
        const double fx = xx - x0, fy = yy - y0, fz = zz - z0;
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
              int xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
              if (xi < 0 || xi >= n || yi < 0 || yi >= n || zi < 0 || zi >= n) continue;
              acc += (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz) *
                     double(mag(xi, yi, zi));
            }
      }
      s(a, b) = T(acc);
    }
  }
  return s;
}

// Adjoint of radial_gather: scatter sphere values back through the same
// trilinear ray stencils onto a grid of bandwidth grid_B.
template <typename T>
Grid3<T> radial_scatter(const SphereGrid<T>& sbar, int grid_B, int n_radial = -1) {
  const int Bg = grid_B, n = 2 * grid_B;
  const int Bs = sbar.B, ns = 2 * Bs;
  if (n_radial < 0) n_radial = Bg;
  if (n_radial < 2) throw ConfigError("radial_scatter: need at least two samples");
  Grid3<T> out(Bg, 1.0);
  for (int a = 0; a < ns; ++a) {
    const double th = SphereGrid<T>::theta(a, Bs);
    for (int b = 0; b < ns; ++b) {
      const double ph = SphereGrid<T>::phi(b, Bs);
      const double ux = std::sin(th) * std::cos(ph);
      const double uy = std::sin(th) * std::sin(ph);
      const double uz = std::cos(th);
      const double v = double(sbar(a, b));
      for (int q = 0; q < n_radial; ++q) {
        const double r = 1.0 + q * (Bg - 2.0) / (n_radial - 1);
        const double xx = ux * r + Bg, yy = uy * r + Bg, zz = uz * r + Bg;
        const int x0 = int(std::floor(xx)), y0 = int(std::floor(yy)), z0 = int(std::floor(zz));
        const double fx = xx - x0, fy = yy - y0, fz = zz - z0;
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
              int xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
              if (xi < 0 || xi >= n || yi < 0 || yi >= n || zi < 0 || zi >= n) continue;
              out(xi, yi, zi) += T((dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) *
                                   (dz ? fz : 1 - fz) * v);
            }
      }
    }
  }
  return out;
}

template <typename T>
SphereGrid<T> radial_project(const Grid3<T>& mag, int n_radial = -1, int sphere_B = -1) {
  SphereGrid<T> s = radial_gather(mag, n_radial, sphere_B);
  double nrm = std::sqrt(double((s.data * s.data).sum()));
  if (nrm > 0) s.data /= T(nrm);
  return s;
}

// ---------------------------------------------------------------------------
// Spherical Fourier analysis/synthesis on the equiangular grid.
// S^l_m = (pi/B) sum_a w_a Pbar[l,m,a] * (sum_b s(a,b) e^{-i m phi_b});
// the phi sum is one FFT row per a.
// ---------------------------------------------------------------------------

template <typename T>
SphCoeffs<T> sph_ft(const SphereGrid<T>& s) {
  const int B = s.B, n = 2 * B;
  const SphTables& tab = SphTables::get(B);
  SphCoeffs<T> S(B);
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> row(n), frow(n);
  // F[a][m mod n]
  Eigen::ArrayXXcd F(n, n);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) row[b] = std::complex<double>(double(s(a, b)), 0.0);
    fft.fwd(frow, row);
    for (int b = 0; b < n; ++b) F(a, b) = frow[b];
  }
  for (int m = -(B - 1); m <= B - 1; ++m) {
    const int mc = ((m % n) + n) % n;
    for (int l = std::abs(m); l < B; ++l) {
      std::complex<double> acc(0, 0);
      for (int a = 0; a < n; ++a) acc += tab.weights[a] * tab.P(l, m, a) * F(a, mc);
      S(l, m) = std::complex<T>(acc * (M_PI / B));
    }
  }
  return S;
}

template <typename T>
SphereGrid<T> inv_sph_ft(const SphCoeffs<T>& S) {
  const int B = S.B, n = 2 * B;
  const SphTables& tab = SphTables::get(B);
  // G[a][m mod n] = sum_l S^l_m Pbar[l,m,a]; then s(a,b) = sum_m G e^{+i m phi_b}
  Eigen::ArrayXXcd G = Eigen::ArrayXXcd::Zero(n, n);
  for (int m = -(B - 1); m <= B - 1; ++m) {
    const int mc = ((m % n) + n) % n;
    for (int l = std::abs(m); l < B; ++l) {
      const std::complex<double> c = std::complex<double>(S(l, m));
      for (int a = 0; a < n; ++a) G(a, mc) += c * tab.P(l, m, a);
    }
  }
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> row(n), orow(n);
  SphereGrid<T> s(B);
  for (int a = 0; a < n; ++a) {
    // e^{+i m phi_b} synthesis = unnormalized inverse FFT = conj(fwd(conj(.)))
    for (int b = 0; b < n; ++b) row[b] = std::conj(G(a, b));
    fft.fwd(orow, row);
    for (int b = 0; b < n; ++b) s(a, b) = T(std::conj(orow[b]).real());
  }
  return s;
}

// ---------------------------------------------------------------------------
// SO(3) correlation: F^l_{mn} = S1^l_m conj(S2^l_n), then
// f(alpha_i, beta_j, gamma_k) = sum_{l,m,n} F^l_{mn} e^{-i n alpha_i}
//                               d^l_{nm}(beta_j) e^{-i m gamma_k},
// evaluated per beta row by a zero-embedded 2D FFT.
// ---------------------------------------------------------------------------

// Bilinear coefficient product: Fall[l](m+off, n+off) = S1^l_m conj(S2^l_n).
template <typename T>
std::vector<Eigen::ArrayXXcd> so3_outer(const SphCoeffs<T>& S1, const SphCoeffs<T>& S2) {
  if (S1.B != S2.B) throw ShapeError("so3_correlate: bandwidth mismatch");
  const int B = S1.B, off = B - 1, sz = 2 * B - 1;
  std::vector<Eigen::ArrayXXcd> Fall(B);
  for (int l = 0; l < B; ++l) {
    Fall[l] = Eigen::ArrayXXcd::Zero(sz, sz);
    for (int m = -l; m <= l; ++m)
      for (int nn = -l; nn <= l; ++nn)
        Fall[l](off + m, off + nn) =
            std::complex<double>(S1(l, m)) * std::conj(std::complex<double>(S2(l, nn)));
  }
  return Fall;
}

// Linear synthesis of the coefficient planes onto the Euler grid:
// f(alpha_i, beta_j, gamma_k) = Re sum_{l,m,n} F^l_{mn} e^{-i n alpha_i}
//                               d^l_{nm}(beta_j) e^{-i m gamma_k}.
template <typename T>
So3Map<T> so3_synth(const std::vector<Eigen::ArrayXXcd>& Fall, int B) {
  const int n = 2 * B, off = B - 1, sz = 2 * B - 1;
  So3Map<T> out(B);
  Eigen::FFT<double> fft;
  Eigen::ArrayXcd Hflat(Eigen::Index(n) * n);
  std::vector<std::complex<double>> line(n), fline(n);
  for (int j = 0; j < n; ++j) {
    WignerPlanes wp(B, out.beta(j));
    Eigen::ArrayXXcd Hb = Eigen::ArrayXXcd::Zero(sz, sz);  // [n+off, m+off]
    for (int l = 0; l < B; ++l) {
      const Eigen::ArrayXXd& D = wp.next();
      Hb += Fall[l].transpose() * D;  // Hb(n,m) += F_l(m,n) d^l_{n,m}
    }
    // embed into n x n with index (v mod n), then 2D FFT (rows then cols)
    Hflat.setZero();
    for (int a = 0; a < sz; ++a) {
      const int ia = ((a - off) % n + n) % n;
      for (int b = 0; b < sz; ++b) {
        const int ib = ((b - off) % n + n) % n;
        Hflat[Eigen::Index(ia) * n + ib] = Hb(a, b);
      }
    }
    // forward FFT along both axes of the n x n array
    for (int r = 0; r < n; ++r) {
      for (int c2 = 0; c2 < n; ++c2) line[c2] = Hflat[Eigen::Index(r) * n + c2];
      fft.fwd(fline, line);
      for (int c2 = 0; c2 < n; ++c2) Hflat[Eigen::Index(r) * n + c2] = fline[c2];
    }
    for (int c2 = 0; c2 < n; ++c2) {
      for (int r = 0; r < n; ++r) line[r] = Hflat[Eigen::Index(r) * n + c2];
      fft.fwd(fline, line);
      for (int r = 0; r < n; ++r) Hflat[Eigen::Index(r) * n + c2] = fline[r];
    }
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < n; ++k) out(i, j, k) = T(Hflat[Eigen::Index(i) * n + k].real());
  }
  return out;
}

// Adjoint of so3_synth under Re<.,.>: per beta row, inverse-FFT the upstream
// real map over (alpha, gamma), gather the embedded frequencies, and contract
// with the same Wigner planes (a transform of SO(3) Fourier type).
template <typename T>
std::vector<Eigen::ArrayXXcd> so3_synth_adjoint(const So3Map<T>& ybar) {
  const int B = ybar.B, n = 2 * B, off = B - 1, sz = 2 * B - 1;
  std::vector<Eigen::ArrayXXcd> Fbar(B);
  for (int l = 0; l < B; ++l) Fbar[l] = Eigen::ArrayXXcd::Zero(sz, sz);
  Eigen::ArrayXcd Z(Eigen::Index(n) * n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < n; ++k)
        Z[Eigen::Index(i) * n + k] = std::complex<double>(double(ybar(i, j, k)), 0.0);
    detail::ifft_all(Z, {n, n});
    WignerPlanes wp(B, ybar.beta(j));
    for (int l = 0; l < B; ++l) {
      const Eigen::ArrayXXd& D = wp.next();
      for (int m = -l; m <= l; ++m)
        for (int nn = -l; nn <= l; ++nn) {
          const int ia = ((nn) % n + n) % n;   // alpha frequency = n
          const int ib = ((m) % n + n) % n;    // gamma frequency = m
          Fbar[l](off + m, off + nn) +=
              Z[Eigen::Index(ia) * n + ib] * D(off + nn, off + m);
        }
    }
  }
  return Fbar;
}

template <typename T>
So3Map<T> so3_correlate(const SphCoeffs<T>& S1, const SphCoeffs<T>& S2) {
  return so3_synth<T>(so3_outer(S1, S2), S1.B);
}

// Active rotation of a sampled sphere by resampling: out(dir) = s(R^{-1} dir),
// bilinear over the equiangular grid (angle wrap in phi, clamp in theta).
template <typename T>
SphereGrid<T> rotate_sphere(const SphereGrid<T>& s, const Eigen::Matrix3d& R) {
  const int B = s.B, n = 2 * B;
  SphereGrid<T> out(B);
  const Eigen::Matrix3d Rinv = R.transpose();
  for (int a = 0; a < n; ++a) {
    const double th = SphereGrid<T>::theta(a, B);
    for (int b = 0; b < n; ++b) {
      const double ph = SphereGrid<T>::phi(b, B);
      Eigen::Vector3d u(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph),
                        std::cos(th));
      Eigen::Vector3d v = Rinv * u;
      double th2 = std::acos(std::clamp(v[2], -1.0, 1.0));
      double ph2 = wrap_2pi(std::atan2(v[1], v[0]));
      // fractional equiangular indices: theta_a = pi(2a+1)/(4B) -> a = (th 4B/pi - 1)/2
      double fa = (th2 * 4.0 * B / M_PI - 1.0) / 2.0;
      double fb = ph2 * B / M_PI;
      int a0 = int(std::floor(fa)), b0 = int(std::floor(fb));
      double wa = fa - a0, wb = fb - b0;
      double acc = 0;
      for (int da = 0; da < 2; ++da)
        for (int db = 0; db < 2; ++db) {
          int ai = std::clamp(a0 + da, 0, n - 1);
          int bi = ((b0 + db) % n + n) % n;
          acc += (da ? wa : 1 - wa) * (db ? wb : 1 - wb) * double(s(ai, bi));
        }
      out(a, b) = T(acc);
    }
  }
  return out;
}

}  // namespace dpc
