#pragma once

#include "dpc/datagen.hpp"
#include "dpc/filters.hpp"
#include "dpc/grid.hpp"
#include "dpc/logpolar.hpp"
#include "dpc/pipeline.hpp"
#include "dpc/softsolve.hpp"
#include "dpc/spectral.hpp"
#include "dpc/spherical.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace dpc {

// ---------------------------------------------------------------------------
// Reverse-mode gradients of the stage losses. Every forward records the
// intermediates it needs into an explicit tape struct; backward walks the
// fixed chain with hand-written adjoints. Complex gradients use the
// convention zbar = dL/dRe(z) + i dL/dIm(z), so for w = f(z):
//   zbar += conj(dw/dz) wbar + (dw/dzbar) conj(wbar).
// Discrete choices (argmaxes, window centers, clamp/wrap branches) are
// treated as constants of the backward pass.
// ---------------------------------------------------------------------------

// Six loss terms per registered pair; the default weights follow the training
// recipe (KLD rotation 1, L1 rotation 3, KLD translation 3, L1 translation 1,
// KLD scale 1, L1 scale 3).
enum LossTerm {
  kKldRot = 0,
  kL1Rot = 1,
  kKldTrans = 2,
  kL1Trans = 3,
  kKldScale = 4,
  kL1Scale = 5,
};
using LossWeights = Eigen::Array<double, 6, 1>;

inline LossWeights default_loss_weights() {
  LossWeights w;
  w << 1, 3, 3, 1, 1, 3;
  return w;
}

struct GradReport {
  // flattened gradients keyed "g1", "g2", "rs1.w0", ..., "xi_r", "xi_mu", "xi_t"
  std::map<std::string, Eigen::ArrayXd> grads;
  // max relative finite-difference error per key, filled by gradcheck
  std::map<std::string, double> fd_errors;
  Eigen::Array<double, 6, 1> terms = Eigen::Array<double, 6, 1>::Zero();
  double total = 0;

  Eigen::ArrayXd& at(const std::string& key) { return grads[key]; }
  void add(const std::string& key, const Eigen::ArrayXd& g) {
    auto it = grads.find(key);
    if (it == grads.end())
      grads[key] = g;
    else
      it->second += g;
  }
  void add_scalar(const std::string& key, double g) {
    add(key, Eigen::ArrayXd::Constant(1, g));
  }
  double max_fd_error() const {
    double m = 0;
    for (const auto& [k, v] : fd_errors) m = std::max(m, v);
    return m;
  }
};

struct TrainConfig {
  LossWeights weights = default_loss_weights();  // w_a..w_f
  double lr = 3e-4;
  int steps = 2000;
  uint64_t seed = 0;
  double sigma = 1.0;  // KLD target width in bins
  enum class Optimizer { Plain, Adaptive } optimizer = Optimizer::Adaptive;
  // multiplicative step-size decay applied every decay_every steps (0 = off)
  double decay = 1.0;
  int decay_every = 0;
  // adaptive path: per-pair gradients are heavy-tailed (hard pairs spike the
  // second moment and stall the common descent direction), so the global
  // gradient norm is clipped before the moment update
  double clip = 0.3;
};

namespace adj {

// --- DFT pieces -------------------------------------------------------------

// Adjoint of g -> dft(g).data under Re<.,.>: Re(unnormalized inverse)/N^d.
inline Eigen::ArrayXd dft_adjoint(const Eigen::ArrayXcd& Gbar, const std::vector<int>& shape) {
  Eigen::ArrayXcd buf = Gbar;
  detail::ifft_all(buf, shape);
  double cells = 1;
  for (int s : shape) cells *= s;
  return buf.real() / cells;
}

// Adjoint of C -> Re(unnormalized inverse(C))/N^d (the last step of correlate).
inline Eigen::ArrayXcd corr_output_adjoint(const Eigen::ArrayXd& rawbar,
                                           const std::vector<int>& shape) {
  Eigen::ArrayXcd buf = rawbar.cast<std::complex<double>>();
  detail::fft_all(buf, shape);
  double cells = 1;
  for (int s : shape) cells *= s;
  return buf / cells;
}

// Backward through C = A conj(B) / (|B|^2 + eps), eps = eps_rel mean|B|^2 + floor.
// Returns gradients into A and B given Cbar and the recorded spectra.
inline void cross_power_backward(const Eigen::ArrayXcd& A, const Eigen::ArrayXcd& B,
                                 const Eigen::ArrayXcd& Cbar, double eps_rel,
                                 Eigen::ArrayXcd& Abar, Eigen::ArrayXcd& Bbar) {
  Eigen::ArrayXd p = B.abs2();
  const double eps = eps_rel * p.mean() + 1e-300;
  Eigen::ArrayXd D = p + eps;
  Abar += B * Cbar / D;
  // per-frequency denominator path + numerator conj path
  Bbar += (-A * B.square().conjugate() / D.square()).conjugate() * Cbar +
          (A * eps / D.square()) * Cbar.conjugate();
  // eps path through mean|B|^2
  Eigen::ArrayXcd C = A * B.conjugate() / D;
  double epsbar = (-(C / D).conjugate() * Cbar).real().sum();
  Bbar += (2.0 * eps_rel * epsbar / double(B.size())) * B;
}

// --- spherical pieces -------------------------------------------------------

// Adjoint of the spherical analysis sph_ft under Re<.,.>.
template <typename T>
SphereGrid<T> sph_ft_adjoint(const SphCoeffs<T>& Sbar) {
  const int B = Sbar.B, n = 2 * B;
  const SphTables& tab = SphTables::get(B);
  Eigen::ArrayXXcd G = Eigen::ArrayXXcd::Zero(n, n);
  for (int m = -(B - 1); m <= B - 1; ++m) {
    const int mc = ((m % n) + n) % n;
    for (int l = std::abs(m); l < B; ++l) {
      const std::complex<double> c = std::complex<double>(Sbar(l, m));
      for (int a = 0; a < n; ++a) G(a, mc) += c * tab.P(l, m, a);
    }
  }
  SphereGrid<T> out(B);
  Eigen::ArrayXcd row(n);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) row[b] = G(a, b);
    detail::ifft_all(row, {n});  // e^{+i m phi_b} synthesis
    const double wa = (M_PI / B) * tab.weights[a];
    for (int b = 0; b < n; ++b) out(a, b) = T(wa * row[b].real());
  }
  return out;
}

// --- resampling scatters ----------------------------------------------------

// Adjoint of to_logpolar: scatter log-polar values back through the bilinear
// stencils onto the centered map.
template <typename T>
Grid2<T> logpolar_scatter(const LogPolarGrid<T>& lpbar) {
  const int B = lpbar.B, n = lpbar.n();
  Grid2<T> out(B, 1.0);
  for (int r = 0; r < n; ++r) {
    const double radius = std::exp(lpbar.ell(r));
    for (int a = 0; a < n; ++a) {
      const double ang = lpbar.angle(a);
      const double x = radius * std::cos(ang) + B;
      const double y = radius * std::sin(ang) + B;
      const int x0 = int(std::floor(x)), y0 = int(std::floor(y));
      const double fx = x - x0, fy = y - y0;
      const double v = double(lpbar(r, a));
      for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy) {
          const int xi = x0 + dx, yi = y0 + dy;
          if (xi < 0 || xi >= n || yi < 0 || yi >= n) continue;
          out(xi, yi) += T((dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * v);
        }
    }
  }
  return out;
}

// Adjoint of accumulate_axis: broadcast the collapsed map back along the axis.
template <typename T>
Grid3<T> accumulate_axis_adjoint(const Grid2<T>& obar, int axis) {
  if (axis < 0 || axis > 2) throw ConfigError("accumulate_axis_adjoint: bad axis");
  const int n = obar.n();
  Grid3<T> out(obar.B, obar.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const T v = obar(i, j);
      for (int q = 0; q < n; ++q) {
        switch (axis) {
          case 0: out(q, i, j) += v; break;
          case 1: out(i, q, j) += v; break;
          default: out(i, j, q) += v; break;
        }
      }
    }
  return out;
}

// Adjoint of apply_pose3 (trilinear, pose constant): scatter each output
// cell's upstream value through its sampling stencil.
template <typename T>
Grid3<T> pose_scatter3(const Grid3<T>& obar, const Pose7& p) {
  const int n = obar.n(), B = obar.B;
  Grid3<T> out(B, obar.extent);
  const Eigen::Matrix3d R = p.rotation();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        Eigen::Vector3d q = R * Eigen::Vector3d(i - B, j - B, k - B) * p.mu - p.t;
        double x = q[0] + B, y = q[1] + B, z = q[2] + B;
        int x0 = int(std::floor(x)), y0 = int(std::floor(y)), z0 = int(std::floor(z));
        double fx = x - x0, fy = y - y0, fz = z - z0;
        const double v = double(obar(i, j, k));
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
              int xi = x0 + dx, yi = y0 + dy, zi = z0 + dz;
              if (xi < 0 || xi >= n || yi < 0 || yi >= n || zi < 0 || zi >= n) continue;
              out(xi, yi, zi) +=
                  T((dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz) * v);
            }
      }
  return out;
}

template <typename T>
Grid2<T> pose_scatter2(const Grid2<T>& obar, const Pose4& p) {
  const int n = obar.n(), B = obar.B;
  Grid2<T> out(B, obar.extent);
  const double c = std::cos(p.theta), s = std::sin(p.theta);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double u = i - B, v = j - B;
      double x = (c * u - s * v) * p.mu - p.t[0] + B;
      double y = (s * u + c * v) * p.mu - p.t[1] + B;
      int x0 = int(std::floor(x)), y0 = int(std::floor(y));
      double fx = x - x0, fy = y - y0;
      const double g = double(obar(i, j));
      for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy) {
          int xi = x0 + dx, yi = y0 + dy;
          if (xi < 0 || xi >= n || yi < 0 || yi >= n) continue;
          out(xi, yi) += T((dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * g);
        }
    }
  return out;
}

// --- softmax / expectation pieces -------------------------------------------

// Backward of p = softmax(xi * v): given pbar, add into vbar and xibar.
inline void softmax_backward(const Eigen::ArrayXd& p, const Eigen::ArrayXd& v, double xi,
                             const Eigen::ArrayXd& pbar, Eigen::ArrayXd& vbar,
                             double& xibar) {
  const double dot = (pbar * p).sum();
  Eigen::ArrayXd zbar = p * (pbar - dot);
  vbar += xi * zbar;
  xibar += (zbar * v).sum();
}

// Backward of the windowed expectation (window center and indices constant).
inline void expectation_window_backward(const Eigen::ArrayXd& probs, int i0, double value0,
                                        double step, bool circular, int W, double est,
                                        double estbar, Eigen::ArrayXd& pbar) {
  const int n = int(probs.size());
  double den = 0;
  for (int o = -W; o <= W; ++o) {
    int i = circular ? ((i0 + o) % n + n) % n : std::clamp(i0 + o, 0, n - 1);
    den += probs[i];
  }
  for (int o = -W; o <= W; ++o) {
    int i = circular ? ((i0 + o) % n + n) % n : std::clamp(i0 + o, 0, n - 1);
    pbar[i] += estbar * ((value0 + o * step) - est) / den;
  }
}

// Gradient of kld(p||q) w.r.t. p (target constant): log p - log q + 1 on p>0.
inline Eigen::ArrayXd kld_backward(const Eigen::ArrayXd& p, const Eigen::ArrayXd& q) {
  Eigen::ArrayXd g = Eigen::ArrayXd::Zero(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0) g[i] = std::log(p[i]) - std::log(std::max(q[i], 1e-300)) + 1.0;
  return g;
}

// d l1_angular(est, truth) / d est: +-1 by shorter-arc branch.
inline double l1_angular_sign(double est, double truth) {
  double d = wrap_2pi(est) - wrap_2pi(truth);
  double ad = std::abs(d);
  double s = d >= 0 ? 1.0 : -1.0;
  return ad <= 2.0 * M_PI - ad ? s : -s;
}

inline double sign_of(double x) { return x >= 0 ? 1.0 : -1.0; }

// --- one soft-refined axis: forward record + backward ------------------------

// Mirrors soft_refine_axis: v = slice/max(slice) (if max>0), p = softmax(xi v),
// est = windowed expectation about i0.
struct AxisTape {
  Eigen::ArrayXd slice, v, probs;
  double m = 1;       // slice max used for the division
  int mi = 0;         // its index
  int i0 = 0;
  double value0 = 0, step = 1;
  bool circular = true;
  int W = 4;
  double est = 0;
};

inline double axis_forward(const Eigen::ArrayXd& slice, int i0, double value0, double step,
                           bool circular, double xi, int W, AxisTape& t) {
  t.slice = slice;
  Eigen::Index mi;
  t.m = slice.maxCoeff(&mi);
  t.mi = int(mi);
  t.v = t.m > 0 ? Eigen::ArrayXd(slice / t.m) : slice;
  t.probs = soft_probs(t.v, xi);
  t.i0 = i0;
  t.value0 = value0;
  t.step = step;
  t.circular = circular;
  t.W = W;
  t.est = expectation_window(t.probs, i0, value0, step, circular, W);
  return t.est;
}

// Adds the slice gradient into slicebar and the temperature gradient.
inline void axis_backward(const AxisTape& t, double xi, double estbar,
                          Eigen::ArrayXd& slicebar, double& xibar) {
  Eigen::ArrayXd pbar = Eigen::ArrayXd::Zero(t.probs.size());
  expectation_window_backward(t.probs, t.i0, t.value0, t.step, t.circular, t.W, t.est,
                              estbar, pbar);
  Eigen::ArrayXd vbar = Eigen::ArrayXd::Zero(t.v.size());
  softmax_backward(t.probs, t.v, xi, pbar, vbar, xibar);
  if (t.m > 0) {
    slicebar += vbar / t.m;
    slicebar[t.mi] -= (vbar * t.slice).sum() / (t.m * t.m);
  } else {
    slicebar += vbar;
  }
}

// --- convolution stacks -----------------------------------------------------

template <typename GridT>
struct ExtractTape {
  GridT input;
  std::vector<GridT> pre;  // pre-activation output of each layer
};

template <typename GridT>
GridT extract_forward(const GridT& g, const Extractor& ex, ExtractTape<GridT>& t) {
  t.input = g;
  t.pre.clear();
  return extract(g, ex, &t.pre);
}

// Backward through one extractor; accumulates tap gradients (one ArrayXd per
// layer) and returns the gradient w.r.t. the extractor input.
template <typename GridT>
GridT extract_backward(const ExtractTape<GridT>& t, const Extractor& ex, const GridT& obar,
                       std::vector<Eigen::ArrayXd>& wbar) {
  const int L = int(ex.layers.size());
  if (wbar.empty()) {
    for (const auto& k : ex.layers) wbar.push_back(Eigen::ArrayXd::Zero(k.w.size()));
  }
  GridT cur = obar;
  for (int li = L - 1; li >= 0; --li) {
    if (li < L - 1) {
      // backward through the leaky nonlinearity applied after layer li
      for (Eigen::Index i = 0; i < cur.data.size(); ++i)
        if (t.pre[li].data[i] < 0) cur.data[i] *= ex.leak;
    }
    const GridT in = li == 0 ? t.input : leaky(t.pre[li - 1], ex.leak);
    wbar[li] += conv_backward_weights(in, cur, ex.layers[li].k);
    cur = conv_backward_input(cur, ex.layers[li]);
  }
  return cur;
}

// --- recorded spectra: magnitude and phase-correlation tapes ------------------

// Spectrum of one grid, recorded so magnitude/cross-power chains can run
// backward without recomputing forward FFTs.
struct SpectrumTape {
  Eigen::ArrayXcd G;  // dft-normalized spectrum
  std::vector<int> shape;
  int B = 0;
};

inline Grid3<double> mag_forward3(const Grid3<double>& g, SpectrumTape& t) {
  Spectrum3<double> S = dft(g);
  const int n = g.n(), B = g.B;
  t.G = S.data;
  t.shape = {n, n, n};
  t.B = B;
  Grid3<double> m(B, g.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        m((i + B) % n, (j + B) % n, (k + B) % n) = std::abs(S(i, j, k));
  return m;
}

inline Grid2<double> mag_forward2(const Grid2<double>& g, SpectrumTape& t) {
  Spectrum2<double> S = dft(g);
  const int n = g.n(), B = g.B;
  t.G = S.data;
  t.shape = {n, n};
  t.B = B;
  Grid2<double> m(B, g.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m((i + B) % n, (j + B) % n) = std::abs(S(i, j));
  return m;
}

// Backward of m = |dft(g)| (centered): phase factor per frequency, then the
// DFT adjoint. Zero-magnitude bins get zero gradient.
inline Grid3<double> mag_backward3(const SpectrumTape& t, const Grid3<double>& mbar) {
  const int n = t.shape[0], B = t.B;
  Eigen::ArrayXcd Gbar = Eigen::ArrayXcd::Zero(t.G.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        const Eigen::Index fi = (Eigen::Index(i) * n + j) * n + k;
        const double a = std::abs(t.G[fi]);
        if (a > 0)
          Gbar[fi] = mbar((i + B) % n, (j + B) % n, (k + B) % n) * t.G[fi] / a;
      }
  Grid3<double> out(B, 1.0);
  out.data = dft_adjoint(Gbar, t.shape);
  return out;
}

inline Grid2<double> mag_backward2(const SpectrumTape& t, const Grid2<double>& mbar) {
  const int n = t.shape[0], B = t.B;
  Eigen::ArrayXcd Gbar = Eigen::ArrayXcd::Zero(t.G.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const Eigen::Index fi = Eigen::Index(i) * n + j;
      const double a = std::abs(t.G[fi]);
      if (a > 0) Gbar[fi] = mbar((i + B) % n, (j + B) % n) * t.G[fi] / a;
    }
  Grid2<double> out(B, 1.0);
  out.data = dft_adjoint(Gbar, t.shape);
  return out;
}

// Scatter an upstream gradient on the signed-shift layout back onto the raw
// inverse-transform layout (the per-axis re-indexing is an involution).
inline Eigen::ArrayXd reindex_scatter(const Eigen::ArrayXd& outbar, int B,
                                      const std::vector<int>& shape) {
  const int rank = int(shape.size()), n = shape[0];
  Eigen::ArrayXd rawbar = Eigen::ArrayXd::Zero(outbar.size());
  for (Eigen::Index f = 0; f < outbar.size(); ++f) {
    Eigen::Index rem = f, mapped = 0, stride = 1;
    for (int a = rank - 1; a >= 0; --a) {
      const int i = int(rem % n);
      rem /= n;
      mapped += stride * detail::reindex1(i, B, n);
      stride *= n;
    }
    rawbar[mapped] += outbar[f];
  }
  return rawbar;
}

// Phase correlation with recorded input spectra; mirrors correlate/correlate1.
struct CorrTape {
  Eigen::ArrayXcd A, Bc;  // dft-normalized spectra of both inputs
  std::vector<int> shape;
  int B = 0;  // signed-shift center per axis
};

inline CorrMap3<double> corr_forward3(const Grid3<double>& g1, const Grid3<double>& g2,
                                      double eps_rel, CorrTape& t) {
  if (g1.B != g2.B) throw ShapeError("correlate: mismatched grids");
  const int n = g1.n(), B = g1.B;
  t.B = B;
  t.shape = {n, n, n};
  t.A = dft(g1).data;
  t.Bc = dft(g2).data;
  Eigen::ArrayXd p = t.Bc.abs2();
  const double eps = eps_rel * p.mean() + 1e-300;
  Eigen::ArrayXcd buf = t.A * t.Bc.conjugate() / (p + eps);
  detail::ifft_all(buf, t.shape);
  buf /= double(g1.size());
  const double im = buf.imag().abs().maxCoeff();
  if (im > 1e-4)
    throw NumericalError("correlate: imaginary residue " + std::to_string(im));
  CorrMap3<double> out(B);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        out(i, j, k) = buf[(detail::reindex1(i, B, n) * n + detail::reindex1(j, B, n)) * n +
                           detail::reindex1(k, B, n)]
                           .real();
  return out;
}

inline CorrMap2<double> corr_forward2(const Grid2<double>& g1, const Grid2<double>& g2,
                                      double eps_rel, CorrTape& t) {
  if (g1.B != g2.B) throw ShapeError("correlate: mismatched grids");
  const int n = g1.n(), B = g1.B;
  t.B = B;
  t.shape = {n, n};
  t.A = dft(g1).data;
  t.Bc = dft(g2).data;
  Eigen::ArrayXd p = t.Bc.abs2();
  const double eps = eps_rel * p.mean() + 1e-300;
  Eigen::ArrayXcd buf = t.A * t.Bc.conjugate() / (p + eps);
  detail::ifft_all(buf, t.shape);
  buf /= double(g1.size());
  const double im = buf.imag().abs().maxCoeff();
  if (im > 1e-4)
    throw NumericalError("correlate: imaginary residue " + std::to_string(im));
  CorrMap2<double> out(B);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out(i, j) = buf[detail::reindex1(i, B, n) * n + detail::reindex1(j, B, n)].real();
  return out;
}

inline Eigen::ArrayXd corr1_forward(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b,
                                    double eps_rel, CorrTape& t) {
  if (a.size() != b.size()) throw ShapeError("correlate1: length mismatch");
  const int n = int(a.size()), c = n / 2;
  t.B = c;
  t.shape = {n};
  Eigen::ArrayXcd A = a.cast<std::complex<double>>();
  Eigen::ArrayXcd Bc = b.cast<std::complex<double>>();
  detail::fft_all(A, {n});
  detail::fft_all(Bc, {n});
  A /= double(n);
  Bc /= double(n);
  t.A = A;
  t.Bc = Bc;
  Eigen::ArrayXd p = Bc.abs2();
  const double eps = eps_rel * p.mean() + 1e-300;
  Eigen::ArrayXcd C = (A * Bc.conjugate()) / (p + eps);
  detail::ifft_all(C, {n});
  C /= double(n);
  Eigen::ArrayXd out(n);
  for (int i = 0; i < n; ++i) out[i] = C[detail::reindex1(i, c, n)].real();
  return out;
}

// Backward of any recorded correlation (flat gradients, rank-agnostic).
inline void corr_backward(const CorrTape& t, double eps_rel, const Eigen::ArrayXd& outbar,
                          Eigen::ArrayXd& g1bar, Eigen::ArrayXd& g2bar) {
  Eigen::ArrayXd rawbar = reindex_scatter(outbar, t.B, t.shape);
  Eigen::ArrayXcd Cbar = corr_output_adjoint(rawbar, t.shape);
  Eigen::ArrayXcd Abar = Eigen::ArrayXcd::Zero(t.A.size());
  Eigen::ArrayXcd Bbar = Eigen::ArrayXcd::Zero(t.Bc.size());
  cross_power_backward(t.A, t.Bc, Cbar, eps_rel, Abar, Bbar);
  g1bar += dft_adjoint(Abar, t.shape);
  g2bar += dft_adjoint(Bbar, t.shape);
}

// Backward of y = x / x[am] (peak normalization; no-op when the peak is <= 0).
inline void maxdiv_backward(const Eigen::ArrayXd& y, double peak, Eigen::Index am,
                            const Eigen::ArrayXd& ybar, Eigen::ArrayXd& xbar) {
  if (peak > 0) {
    xbar += ybar / peak;
    xbar[am] -= (ybar * y).sum() / peak;
  } else {
    xbar += ybar;
  }
}

// Backward of y = x / ||x||, given the normalized values.
inline Eigen::ArrayXd l2norm_backward(const Eigen::ArrayXd& y, double nrm,
                                      const Eigen::ArrayXd& ybar) {
  return (ybar - y * (y * ybar).sum()) / nrm;
}

// Fold an angular difference into [-pi/2, pi/2) (the half-turn mirror class).
inline double fold_half_pi(double d) {
  double r = std::fmod(d + M_PI / 2.0, M_PI);
  if (r < 0) r += M_PI;
  return r - M_PI / 2.0;
}

// --- 3D rotation stage --------------------------------------------------------

// Records the sphere projections, spherical coefficients, and softened SO(3)
// map of estimate_rotation3 run on the two centered magnitude grids.
struct RotationTape {
  int Bs = 0, grid_B = 0;
  SphereGrid<double> sph1, sph2;  // L2-normalized radial projections
  double nrm1 = 0, nrm2 = 0;
  SphCoeffs<double> S1, S2;
  Eigen::ArrayXd flat;  // peak-normalized correlation values
  double peak = 0;
  Eigen::Index am = 0;
  int i = 0, j = 0, k = 0;
  Eigen::ArrayXd probs;
  AxisTape ta, tb, tg;
  bool beta_clamped = false;
  double alpha = 0, beta = 0, gamma = 0;
};

inline void rotation_forward(const Grid3<double>& m1, const Grid3<double>& m2,
                             const SolverConfig& cfg, RotationTape& t) {
  const int Bg = m1.B;
  t.grid_B = Bg;
  t.Bs = cfg.sphere_B > 0 ? cfg.sphere_B : Bg;
  SphereGrid<double> s1 = radial_gather(m1, Bg, t.Bs);
  t.nrm1 = std::sqrt((s1.data * s1.data).sum());
  if (t.nrm1 > 0) s1.data /= t.nrm1;
  SphereGrid<double> s2 = radial_gather(m2, Bg, t.Bs);
  t.nrm2 = std::sqrt((s2.data * s2.data).sum());
  if (t.nrm2 > 0) s2.data /= t.nrm2;
  t.sph1 = s1;
  t.sph2 = s2;
  t.S1 = sph_ft(s1);
  t.S2 = sph_ft(s2);
  So3Map<double> f = so3_correlate(t.S2, t.S1);
  t.peak = f.data.maxCoeff();
  t.flat = f.data;
  if (t.peak > 0) t.flat /= t.peak;
  t.probs = soft_probs(t.flat, cfg.xi_r.value());
  t.flat.maxCoeff(&t.am);
  const int n = f.n();
  t.i = int(t.am / (Eigen::Index(n) * n));
  t.j = int((t.am / n) % n);
  t.k = int(t.am % n);
  const double xi = cfg.xi_r.value();
  Eigen::ArrayXd ax(n);
  for (int q = 0; q < n; ++q) ax[q] = t.flat[(Eigen::Index(q) * n + t.j) * n + t.k];
  t.alpha = wrap_2pi(
      axis_forward(ax, t.i, f.alpha(t.i), 2.0 * M_PI / n, true, xi, cfg.window, t.ta));
  for (int q = 0; q < n; ++q) ax[q] = t.flat[(Eigen::Index(t.i) * n + q) * n + t.k];
  const double braw = axis_forward(ax, t.j, f.beta(t.j), M_PI / (2.0 * t.Bs), false, xi,
                                   cfg.window, t.tb);
  t.beta_clamped = braw < 0.0 || braw > M_PI;
  t.beta = std::clamp(braw, 0.0, M_PI);
  for (int q = 0; q < n; ++q) ax[q] = t.flat[(Eigen::Index(t.i) * n + t.j) * n + q];
  t.gamma = wrap_2pi(
      axis_forward(ax, t.k, f.gamma(t.k), 2.0 * M_PI / n, true, xi, cfg.window, t.tg));
}

// Backward from the density gradient and the three angle gradients onto the
// two magnitude grids (angle wraps have unit slope; a clamped beta is flat).
inline void rotation_backward(const RotationTape& t, const SolverConfig& cfg,
                              const Eigen::ArrayXd& probsbar, double alphabar,
                              double betabar, double gammabar, Grid3<double>& m1bar,
                              Grid3<double>& m2bar, double& xibar_r) {
  const int n = 2 * t.Bs;
  Eigen::ArrayXd flatbar = Eigen::ArrayXd::Zero(t.flat.size());
  softmax_backward(t.probs, t.flat, cfg.xi_r.value(), probsbar, flatbar, xibar_r);
  Eigen::ArrayXd axbar = Eigen::ArrayXd::Zero(n);
  axis_backward(t.ta, cfg.xi_r.value(), alphabar, axbar, xibar_r);
  for (int q = 0; q < n; ++q) flatbar[(Eigen::Index(q) * n + t.j) * n + t.k] += axbar[q];
  axbar.setZero();
  axis_backward(t.tb, cfg.xi_r.value(), t.beta_clamped ? 0.0 : betabar, axbar, xibar_r);
  for (int q = 0; q < n; ++q) flatbar[(Eigen::Index(t.i) * n + q) * n + t.k] += axbar[q];
  axbar.setZero();
  axis_backward(t.tg, cfg.xi_r.value(), gammabar, axbar, xibar_r);
  for (int q = 0; q < n; ++q) flatbar[(Eigen::Index(t.i) * n + t.j) * n + q] += axbar[q];

  Eigen::ArrayXd fbar = Eigen::ArrayXd::Zero(t.flat.size());
  maxdiv_backward(t.flat, t.peak, t.am, flatbar, fbar);
  So3Map<double> ymap(t.Bs);
  ymap.data = fbar;
  std::vector<Eigen::ArrayXXcd> Fbar = so3_synth_adjoint(ymap);

  // outer product F(m, nn) = S2(l, m) conj(S1(l, nn))
  const int off = t.Bs - 1;
  SphCoeffs<double> S1bar(t.Bs), S2bar(t.Bs);
  for (int l = 0; l < t.Bs; ++l)
    for (int m = -l; m <= l; ++m)
      for (int nn = -l; nn <= l; ++nn) {
        const std::complex<double> fb = Fbar[l](off + m, off + nn);
        S2bar(l, m) += t.S1(l, nn) * fb;
        S1bar(l, nn) += t.S2(l, m) * std::conj(fb);
      }

  SphereGrid<double> sb1 = sph_ft_adjoint(S1bar);
  SphereGrid<double> sb2 = sph_ft_adjoint(S2bar);
  if (t.nrm1 > 0) sb1.data = l2norm_backward(t.sph1.data, t.nrm1, sb1.data);
  if (t.nrm2 > 0) sb2.data = l2norm_backward(t.sph2.data, t.nrm2, sb2.data);
  m1bar.data += radial_scatter(sb1, t.grid_B, t.grid_B).data;
  m2bar.data += radial_scatter(sb2, t.grid_B, t.grid_B).data;
}

// --- 3D scale stage -----------------------------------------------------------

// One axis collapse of a magnitude grid: accumulate -> mean-normalize ->
// log-polar -> log compression -> per-row angular mean removal.
struct ResidualTape {
  int axis = 0;
  Grid2<double> an;  // mean-normalized accumulation
  double mean = 1;
  LogPolarGrid<double> lp;
  Eigen::ArrayXXd m;  // compressed residual (log-radius x angle)
};

inline void residual_forward(const Grid3<double>& mag, int axis, double compress,
                             ResidualTape& t) {
  t.axis = axis;
  Grid2<double> a = accumulate_axis(mag, axis);
  t.mean = a.data.mean();
  if (!(t.mean > 0)) throw DegenerateInput("estimate_scale3: zero magnitude accumulation");
  t.an = Grid2<double>(a.B, a.extent);
  t.an.data = a.data / t.mean;
  t.lp = to_logpolar(t.an, 1.0);
  const int n = t.lp.n();
  t.m.resize(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) t.m(r, c) = std::log1p(compress * t.lp(r, c));
  t.m.colwise() -= t.m.rowwise().mean();
}

inline void residual_backward(const ResidualTape& t, double compress,
                              const Eigen::ArrayXXd& mbar_in, Grid3<double>& magbar) {
  const int n = t.lp.n();
  Eigen::ArrayXXd mbar = mbar_in;  // row-mean removal is self-adjoint
  mbar.colwise() -= mbar.rowwise().mean();
  LogPolarGrid<double> lpbar(t.lp.B, 1.0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      lpbar(r, c) = mbar(r, c) * compress / (1.0 + compress * t.lp(r, c));
  Grid2<double> anbar = logpolar_scatter(lpbar);
  Grid2<double> abar(anbar.B, anbar.extent);
  const double cells = double(anbar.data.size());
  abar.data = anbar.data / t.mean - (anbar.data * t.an.data).sum() / (cells * t.mean);
  magbar.data += accumulate_axis_adjoint(abar, t.axis).data;
}

// Scale stage with ground-truth rotation compensation: per-axis residuals of
// the two magnitudes, windowed per-angle 1D correlations pooled into one
// log-shift profile, softened and windowed into mu.
struct ScaleTape {
  Pose7 comp;  // rotation-only compensation pose
  int i0 = 0, n = 0, nfull = 0, center = 0;
  double dl = 0;
  Eigen::ArrayXd win;
  std::vector<ResidualTape> resA, resB;  // per axis: from m2 and from warped m1
  std::vector<CorrTape> corrs;           // one per (axis, angle column)
  Eigen::Index ncol = 0;
  Eigen::ArrayXd acc, probs;
  Eigen::Index am = 0;
  double shift = 0, mu = 1;
};

inline void scale_forward(const Grid3<double>& m1, const Grid3<double>& m2,
                          const Eigen::Matrix3d& r_star, const SolverConfig& cfg,
                          ScaleTape& t) {
  if (cfg.scale_axes.empty()) throw ConfigError("estimate_scale3: no accumulation axes");
  t.comp = Pose7::from_rotation(r_star);
  Grid3<double> m1h = apply_pose3(m1, t.comp);
  t.nfull = m1.n();
  LogPolarGrid<double> proto(m1.B, 1.0);
  t.dl = proto.bin_width();
  t.i0 = std::max(0, std::min(int(std::ceil(std::log(2.0) / t.dl)), t.nfull - 4));
  t.n = t.nfull - t.i0;
  if (t.n < 4) throw ConfigError("estimate_scale3: bandwidth too small for the scale stage");
  t.win = detail::hann(t.n);
  t.resA.assign(cfg.scale_axes.size(), {});
  t.resB.assign(cfg.scale_axes.size(), {});
  t.corrs.clear();
  t.acc = Eigen::ArrayXd::Zero(t.n);
  t.ncol = 0;
  for (size_t ai = 0; ai < cfg.scale_axes.size(); ++ai) {
    residual_forward(m2, cfg.scale_axes[ai], cfg.scale_compress, t.resA[ai]);
    residual_forward(m1h, cfg.scale_axes[ai], cfg.scale_compress, t.resB[ai]);
    for (int c = 0; c < t.nfull; ++c) {
      Eigen::ArrayXd colA = t.resA[ai].m.col(c).segment(t.i0, t.n) * t.win;
      Eigen::ArrayXd colB = t.resB[ai].m.col(c).segment(t.i0, t.n) * t.win;
      CorrTape ct;
      t.acc += corr1_forward(colA, colB, cfg.eps_rel, ct);
      t.corrs.push_back(std::move(ct));
      ++t.ncol;
    }
  }
  t.acc /= double(t.ncol);
  t.center = t.n / 2;
  t.probs = soft_probs(t.acc, cfg.xi_mu.value());
  t.acc.maxCoeff(&t.am);
  t.shift = expectation_window(t.probs, int(t.am), double(int(t.am) - t.center), 1.0, true,
                               cfg.window);
  t.mu = std::exp(-t.shift * t.dl);
}

inline void scale_backward(const ScaleTape& t, const SolverConfig& cfg,
                           const Eigen::ArrayXd& probsbar, double mubar,
                           Grid3<double>& m1bar, Grid3<double>& m2bar, double& xibar_mu) {
  Eigen::ArrayXd pbar = probsbar;
  const double shiftbar = mubar * (-t.dl * t.mu);
  expectation_window_backward(t.probs, int(t.am), double(int(t.am) - t.center), 1.0, true,
                              cfg.window, t.shift, shiftbar, pbar);
  Eigen::ArrayXd accbar = Eigen::ArrayXd::Zero(t.n);
  softmax_backward(t.probs, t.acc, cfg.xi_mu.value(), pbar, accbar, xibar_mu);
  accbar /= double(t.ncol);
  Grid3<double> m1hbar(m1bar.B, m1bar.extent);
  for (size_t ai = 0; ai < t.resA.size(); ++ai) {
    Eigen::ArrayXXd rAbar = Eigen::ArrayXXd::Zero(t.nfull, t.nfull);
    Eigen::ArrayXXd rBbar = Eigen::ArrayXXd::Zero(t.nfull, t.nfull);
    for (int c = 0; c < t.nfull; ++c) {
      const CorrTape& ct = t.corrs[ai * t.nfull + c];
      Eigen::ArrayXd colAbar = Eigen::ArrayXd::Zero(t.n);
      Eigen::ArrayXd colBbar = Eigen::ArrayXd::Zero(t.n);
      corr_backward(ct, cfg.eps_rel, accbar, colAbar, colBbar);
      rAbar.col(c).segment(t.i0, t.n) += colAbar * t.win;
      rBbar.col(c).segment(t.i0, t.n) += colBbar * t.win;
    }
    residual_backward(t.resA[ai], cfg.scale_compress, rAbar, m2bar);
    residual_backward(t.resB[ai], cfg.scale_compress, rBbar, m1hbar);
  }
  m1bar.data += pose_scatter3(m1hbar, t.comp).data;
}

// --- 3D translation stage -----------------------------------------------------

struct TranslationTape {
  Pose7 comp;  // ground-truth rotation and scale, zero shift
  CorrTape corr;
  Eigen::ArrayXd flat, probs;
  double peak = 0;
  Eigen::Index am = 0;
  int i = 0, j = 0, k = 0;
  AxisTape tx, ty, tz;
  Eigen::Vector3d shift = Eigen::Vector3d::Zero();
};

inline void translation_forward(const Grid3<double>& gt1, const Grid3<double>& gt2,
                                const Pose7& comp, const SolverConfig& cfg,
                                TranslationTape& t) {
  t.comp = comp;
  Grid3<double> h = apply_pose3(gt1, comp);
  CorrMap3<double> c = corr_forward3(h, gt2, cfg.eps_rel, t.corr);
  t.peak = c.data.maxCoeff();
  t.flat = c.data;
  if (t.peak > 0) t.flat /= t.peak;
  t.probs = soft_probs(t.flat, cfg.xi_t.value());
  t.flat.maxCoeff(&t.am);
  const int n = c.n(), B = c.B;
  t.i = int(t.am / (Eigen::Index(n) * n));
  t.j = int((t.am / n) % n);
  t.k = int(t.am % n);
  const double xi = cfg.xi_t.value();
  Eigen::ArrayXd ax(n);
  for (int q = 0; q < n; ++q) ax[q] = t.flat[(Eigen::Index(q) * n + t.j) * n + t.k];
  t.shift[0] = axis_forward(ax, t.i, double(t.i - B), 1.0, true, xi, cfg.window, t.tx);
  for (int q = 0; q < n; ++q) ax[q] = t.flat[(Eigen::Index(t.i) * n + q) * n + t.k];
  t.shift[1] = axis_forward(ax, t.j, double(t.j - B), 1.0, true, xi, cfg.window, t.ty);
  for (int q = 0; q < n; ++q) ax[q] = t.flat[(Eigen::Index(t.i) * n + t.j) * n + q];
  t.shift[2] = axis_forward(ax, t.k, double(t.k - B), 1.0, true, xi, cfg.window, t.tz);
}

inline void translation_backward(const TranslationTape& t, const SolverConfig& cfg,
                                 const Eigen::ArrayXd& probsbar,
                                 const Eigen::Vector3d& shiftbar, Grid3<double>& gt1bar,
                                 Grid3<double>& gt2bar, double& xibar_t) {
  const int n = t.corr.shape[0];
  Eigen::ArrayXd flatbar = Eigen::ArrayXd::Zero(t.flat.size());
  softmax_backward(t.probs, t.flat, cfg.xi_t.value(), probsbar, flatbar, xibar_t);
  Eigen::ArrayXd axbar = Eigen::ArrayXd::Zero(n);
  axis_backward(t.tx, cfg.xi_t.value(), shiftbar[0], axbar, xibar_t);
  for (int q = 0; q < n; ++q) flatbar[(Eigen::Index(q) * n + t.j) * n + t.k] += axbar[q];
  axbar.setZero();
  axis_backward(t.ty, cfg.xi_t.value(), shiftbar[1], axbar, xibar_t);
  for (int q = 0; q < n; ++q) flatbar[(Eigen::Index(t.i) * n + q) * n + t.k] += axbar[q];
  axbar.setZero();
  axis_backward(t.tz, cfg.xi_t.value(), shiftbar[2], axbar, xibar_t);
  for (int q = 0; q < n; ++q) flatbar[(Eigen::Index(t.i) * n + t.j) * n + q] += axbar[q];
  Eigen::ArrayXd cbar = Eigen::ArrayXd::Zero(t.flat.size());
  maxdiv_backward(t.flat, t.peak, t.am, flatbar, cbar);
  Grid3<double> hbar(gt1bar.B, gt1bar.extent);
  corr_backward(t.corr, cfg.eps_rel, cbar, hbar.data, gt2bar.data);
  gt1bar.data += pose_scatter3(hbar, t.comp).data;
}

// --- 2D joint rotation-scale stage ---------------------------------------------

// Hann window -> magnitude spectrum -> log-polar -> mean-relative log
// compression, recorded for one extracted map.
struct FrontTape {
  Grid2<double> win;  // windowed extracted map
  SpectrumTape mt;
  LogPolarGrid<double> lp;  // raw log-polar magnitude samples
  double mean = 1;
};

inline Eigen::ArrayXd front_forward2(const Grid2<double>& gr, double compress,
                                     FrontTape& t) {
  t.win = detail::hann_window2(gr);
  Grid2<double> m = mag_forward2(t.win, t.mt);
  t.lp = to_logpolar(m, 1.0);
  t.mean = t.lp.data.mean();
  if (!(t.mean > 0)) throw DegenerateInput("register2: zero magnitude spectrum");
  return (compress * t.lp.data / t.mean).log1p();
}

inline Grid2<double> front_backward2(const FrontTape& t, double compress,
                                     const Eigen::ArrayXd& outbar) {
  const double cells = double(t.lp.data.size());
  Eigen::ArrayXd tt = outbar * compress / (1.0 + compress * t.lp.data / t.mean);
  LogPolarGrid<double> lpbar(t.lp.B, 1.0);
  lpbar.data = tt / t.mean - (tt * t.lp.data).sum() / (cells * t.mean * t.mean);
  Grid2<double> mbar = logpolar_scatter(lpbar);
  Grid2<double> winbar = mag_backward2(t.mt, mbar);
  const int n = winbar.n();
  Eigen::ArrayXd w = detail::hann(n);
  Grid2<double> grbar(winbar.B, winbar.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) grbar(i, j) = winbar(i, j) * w[i] * w[j];
  return grbar;
}

// Joint (log-scale, angle) correlation of the two compressed log-polar maps;
// losses read the density marginals, the refined axes give mu and theta.
struct RotScaleTape2 {
  FrontTape f1, f2;
  CorrTape corr;
  Eigen::ArrayXd flat, probs;
  double peak = 0;
  Eigen::Index am = 0;
  int i = 0, j = 0;
  Eigen::ArrayXd prow, pcol;  // log-scale marginal, angle marginal
  AxisTape tsl, tsa;
  double dl = 0, sl = 0, sa = 0, mu = 1, theta_e = 0;
};

inline void rotscale_forward2(const Grid2<double>& gr1, const Grid2<double>& gr2,
                              const SolverConfig& cfg, RotScaleTape2& t) {
  const int B = gr1.B, n = gr1.n();
  Eigen::ArrayXd lp1 = front_forward2(gr1, cfg.compress, t.f1);
  Eigen::ArrayXd lp2 = front_forward2(gr2, cfg.compress, t.f2);
  t.dl = LogPolarGrid<double>(B, 1.0).bin_width();
  Grid2<double> a(B, 1.0), b(B, 1.0);
  a.data = lp1;
  b.data = lp2;
  CorrMap2<double> c = corr_forward2(a, b, cfg.eps_rel, t.corr);
  t.peak = c.data.maxCoeff();
  t.flat = c.data;
  if (t.peak > 0) t.flat /= t.peak;
  t.probs = soft_probs(t.flat, cfg.xi_r.value());
  t.flat.maxCoeff(&t.am);
  t.i = int(t.am / n);
  t.j = int(t.am % n);
  t.prow = Eigen::ArrayXd::Zero(n);
  t.pcol = Eigen::ArrayXd::Zero(n);
  for (int r = 0; r < n; ++r)
    for (int c2 = 0; c2 < n; ++c2) {
      const double p = t.probs[Eigen::Index(r) * n + c2];
      t.prow[r] += p;
      t.pcol[c2] += p;
    }
  Eigen::ArrayXd ax(n);
  for (int q = 0; q < n; ++q) ax[q] = t.flat[Eigen::Index(q) * n + t.j];
  t.sl = axis_forward(ax, t.i, double(t.i - B), 1.0, true, cfg.xi_mu.value(), cfg.window,
                      t.tsl);
  for (int q = 0; q < n; ++q) ax[q] = t.flat[Eigen::Index(t.i) * n + q];
  t.sa = axis_forward(ax, t.j, double(t.j - B), 1.0, true, cfg.xi_r.value(), cfg.window,
                      t.tsa);
  t.mu = std::exp(t.sl * t.dl);
  t.theta_e = -t.sa * 2.0 * M_PI / n;
}

inline void rotscale_backward2(const RotScaleTape2& t, const SolverConfig& cfg,
                               const Eigen::ArrayXd& prowbar, const Eigen::ArrayXd& pcolbar,
                               double mubar, double thetabar, Grid2<double>& gr1bar,
                               Grid2<double>& gr2bar, double& xibar_r, double& xibar_mu) {
  const int n = int(t.prow.size());
  Eigen::ArrayXd pbar(t.probs.size());
  for (int r = 0; r < n; ++r)
    for (int c2 = 0; c2 < n; ++c2) pbar[Eigen::Index(r) * n + c2] = prowbar[r] + pcolbar[c2];
  Eigen::ArrayXd flatbar = Eigen::ArrayXd::Zero(t.flat.size());
  softmax_backward(t.probs, t.flat, cfg.xi_r.value(), pbar, flatbar, xibar_r);
  const double slbar = mubar * (t.dl * t.mu);
  const double sabar = thetabar * (-2.0 * M_PI / n);
  Eigen::ArrayXd axbar = Eigen::ArrayXd::Zero(n);
  axis_backward(t.tsl, cfg.xi_mu.value(), slbar, axbar, xibar_mu);
  for (int q = 0; q < n; ++q) flatbar[Eigen::Index(q) * n + t.j] += axbar[q];
  axbar.setZero();
  axis_backward(t.tsa, cfg.xi_r.value(), sabar, axbar, xibar_r);
  for (int q = 0; q < n; ++q) flatbar[Eigen::Index(t.i) * n + q] += axbar[q];
  Eigen::ArrayXd cbar = Eigen::ArrayXd::Zero(t.flat.size());
  maxdiv_backward(t.flat, t.peak, t.am, flatbar, cbar);
  Eigen::ArrayXd lp1bar = Eigen::ArrayXd::Zero(t.flat.size());
  Eigen::ArrayXd lp2bar = Eigen::ArrayXd::Zero(t.flat.size());
  corr_backward(t.corr, cfg.eps_rel, cbar, lp1bar, lp2bar);
  gr1bar.data += front_backward2(t.f1, cfg.compress, lp1bar).data;
  gr2bar.data += front_backward2(t.f2, cfg.compress, lp2bar).data;
}

// --- 2D translation stage -------------------------------------------------------

struct TranslationTape2 {
  Pose4 comp;  // ground-truth rotation and scale, zero shift
  CorrTape corr;
  Eigen::ArrayXd flat, probs;
  double peak = 0;
  Eigen::Index am = 0;
  int i = 0, j = 0;
  AxisTape tx, ty;
  Eigen::Vector2d shift = Eigen::Vector2d::Zero();
};

inline void translation_forward2(const Grid2<double>& gt1, const Grid2<double>& gt2,
                                 const Pose4& comp, const SolverConfig& cfg,
                                 TranslationTape2& t) {
  t.comp = comp;
  Grid2<double> h = apply_pose2(gt1, comp);
  CorrMap2<double> c = corr_forward2(h, gt2, cfg.eps_rel, t.corr);
  t.peak = c.data.maxCoeff();
  t.flat = c.data;
  if (t.peak > 0) t.flat /= t.peak;
  t.probs = soft_probs(t.flat, cfg.xi_t.value());
  t.flat.maxCoeff(&t.am);
  const int n = c.n(), B = c.B;
  t.i = int(t.am / n);
  t.j = int(t.am % n);
  const double xi = cfg.xi_t.value();
  Eigen::ArrayXd ax(n);
  for (int q = 0; q < n; ++q) ax[q] = t.flat[Eigen::Index(q) * n + t.j];
  t.shift[0] = axis_forward(ax, t.i, double(t.i - B), 1.0, true, xi, cfg.window, t.tx);
  for (int q = 0; q < n; ++q) ax[q] = t.flat[Eigen::Index(t.i) * n + q];
  t.shift[1] = axis_forward(ax, t.j, double(t.j - B), 1.0, true, xi, cfg.window, t.ty);
}

inline void translation_backward2(const TranslationTape2& t, const SolverConfig& cfg,
                                  const Eigen::ArrayXd& probsbar,
                                  const Eigen::Vector2d& shiftbar, Grid2<double>& gt1bar,
                                  Grid2<double>& gt2bar, double& xibar_t) {
  const int n = t.corr.shape[0];
  Eigen::ArrayXd flatbar = Eigen::ArrayXd::Zero(t.flat.size());
  softmax_backward(t.probs, t.flat, cfg.xi_t.value(), probsbar, flatbar, xibar_t);
  Eigen::ArrayXd axbar = Eigen::ArrayXd::Zero(n);
  axis_backward(t.tx, cfg.xi_t.value(), shiftbar[0], axbar, xibar_t);
  for (int q = 0; q < n; ++q) flatbar[Eigen::Index(q) * n + t.j] += axbar[q];
  axbar.setZero();
  axis_backward(t.ty, cfg.xi_t.value(), shiftbar[1], axbar, xibar_t);
  for (int q = 0; q < n; ++q) flatbar[Eigen::Index(t.i) * n + q] += axbar[q];
  Eigen::ArrayXd cbar = Eigen::ArrayXd::Zero(t.flat.size());
  maxdiv_backward(t.flat, t.peak, t.am, flatbar, cbar);
  Grid2<double> hbar(gt1bar.B, gt1bar.extent);
  corr_backward(t.corr, cfg.eps_rel, cbar, hbar.data, gt2bar.data);
  gt1bar.data += pose_scatter2(hbar, t.comp).data;
}

// --- seeded smooth test fields -------------------------------------------------

// Random Gaussian-blob field (no pedestal); callers add a positive offset so
// convolution pre-activations stay away from the leaky-ReLU kink during
// finite-difference probing.
inline Grid3<double> blob_grid3(int B, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const int n = 2 * B;
  Grid3<double> g(B, double(n));
  for (int q = 0; q < 6; ++q) {
    const double cx = (U(rng) - 0.5) * B, cy = (U(rng) - 0.5) * B, cz = (U(rng) - 0.5) * B;
    const double s = 0.1 * n + 0.1 * n * U(rng);
    const double a = 0.5 + U(rng);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k) {
          const double dx = i - B - cx, dy = j - B - cy, dz = k - B - cz;
          g(i, j, k) += a * std::exp(-0.5 * (dx * dx + dy * dy + dz * dz) / (s * s));
        }
  }
  return g;
}

inline Grid2<double> blob_grid2(int B, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const int n = 2 * B;
  Grid2<double> g(B, double(n));
  for (int q = 0; q < 6; ++q) {
    const double cx = (U(rng) - 0.5) * B, cy = (U(rng) - 0.5) * B;
    const double s = 0.1 * n + 0.1 * n * U(rng);
    const double a = 0.5 + U(rng);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double dx = i - B - cx, dy = j - B - cy;
        g(i, j) += a * std::exp(-0.5 * (dx * dx + dy * dy) / (s * s));
      }
  }
  return g;
}

}  // namespace adj

// ---------------------------------------------------------------------------
// Whole-pair tapes: one forward records every stage with the training-time
// ground-truth compensation (scale sees the true rotation, translation the
// true rotation and scale); backward returns gradients for both input grids,
// all filter taps, and the three temperatures.
// ---------------------------------------------------------------------------

struct PairTape3 {
  bool recorded = false;
  Pose7 truth;
  double sigma = 1.0;
  double nrm1 = 0, nrm2 = 0;  // input L2 norms
  Grid3<double> n1, n2;       // normalized inputs
  adj::ExtractTape<Grid3<double>> ers1, ers2, et1, et2;
  adj::SpectrumTape mt1, mt2;  // spectra of the rotation-scale features
  adj::RotationTape rot;
  adj::ScaleTape scale;
  adj::TranslationTape trans;
  Eigen::ArrayXd q_rot, q_mu, q_t;  // loss targets
  Eigen::Vector3d s_star = Eigen::Vector3d::Zero();
  Eigen::Array<double, 6, 1> terms = Eigen::Array<double, 6, 1>::Zero();
};

struct PairTape2 {
  bool recorded = false;
  Pose4 truth;
  double sigma = 1.0;
  adj::ExtractTape<Grid2<double>> ers1, ers2, et1, et2;
  adj::RotScaleTape2 rs;
  adj::TranslationTape2 trans;
  Eigen::ArrayXd q_r, q_mu, q_t;  // angle marginal, log-scale marginal, joint shift
  Eigen::Vector2d s_star = Eigen::Vector2d::Zero();
  double dth = 0;  // mirror-folded angular residual
  Eigen::Array<double, 6, 1> terms = Eigen::Array<double, 6, 1>::Zero();
};

inline Eigen::Array<double, 6, 1> forward_pair3(const Grid3<double>& g1,
                                                const Grid3<double>& g2, const Pose7& truth,
                                                const FilterStack& stack, PairTape3& t,
                                                const SolverConfig& cfg = {},
                                                double sigma = 1.0) {
  if (g1.B != g2.B) throw ShapeError("forward_pair3: bandwidth mismatch");
  t.truth = truth;
  t.sigma = sigma;
  t.nrm1 = std::sqrt((g1.data * g1.data).sum());
  t.nrm2 = std::sqrt((g2.data * g2.data).sum());
  if (!(t.nrm1 > 0) || !(t.nrm2 > 0))
    throw DegenerateInput("normalize: grid has zero energy");
  t.n1 = g1;
  t.n1.data /= t.nrm1;
  t.n2 = g2;
  t.n2.data /= t.nrm2;
  Grid3<double> grs1 = adj::extract_forward(t.n1, stack.rs1, t.ers1);
  Grid3<double> grs2 = adj::extract_forward(t.n2, stack.rs2, t.ers2);
  Grid3<double> gt1 = adj::extract_forward(t.n1, stack.t1, t.et1);
  Grid3<double> gt2 = adj::extract_forward(t.n2, stack.t2, t.et2);
  Grid3<double> m1 = adj::mag_forward3(grs1, t.mt1);
  Grid3<double> m2 = adj::mag_forward3(grs2, t.mt2);
  adj::rotation_forward(m1, m2, cfg, t.rot);
  const Eigen::Matrix3d r_star = truth.rotation();
  adj::scale_forward(m1, m2, r_star, cfg, t.scale);
  Pose7 comp;
  comp.alpha = truth.alpha;
  comp.beta = truth.beta;
  comp.gamma = truth.gamma;
  comp.mu = truth.mu;
  adj::translation_forward(gt1, gt2, comp, cfg, t.trans);
  t.s_star = r_star.transpose() * truth.t / truth.mu;

  const int nr = 2 * t.rot.Bs;
  Eigen::ArrayXd qa = gaussian_target(nr, truth.alpha * nr / (2.0 * M_PI), sigma, true);
  Eigen::ArrayXd qb =
      gaussian_target(nr, 2.0 * t.rot.Bs * truth.beta / M_PI - 0.5, sigma, false);
  Eigen::ArrayXd qg = gaussian_target(nr, truth.gamma * nr / (2.0 * M_PI), sigma, true);
  t.q_rot.resize(Eigen::Index(nr) * nr * nr);
  for (int i = 0; i < nr; ++i)
    for (int j = 0; j < nr; ++j)
      for (int k = 0; k < nr; ++k)
        t.q_rot[(Eigen::Index(i) * nr + j) * nr + k] = qa[i] * qb[j] * qg[k];
  t.q_mu = gaussian_target(t.scale.n, t.scale.center - std::log(truth.mu) / t.scale.dl,
                           sigma, true);
  const int nt = g1.n(), B = g1.B;
  Eigen::ArrayXd qx = gaussian_target(nt, B + t.s_star[0], sigma, true);
  Eigen::ArrayXd qy = gaussian_target(nt, B + t.s_star[1], sigma, true);
  Eigen::ArrayXd qz = gaussian_target(nt, B + t.s_star[2], sigma, true);
  t.q_t.resize(Eigen::Index(nt) * nt * nt);
  for (int i = 0; i < nt; ++i)
    for (int j = 0; j < nt; ++j)
      for (int k = 0; k < nt; ++k)
        t.q_t[(Eigen::Index(i) * nt + j) * nt + k] = qx[i] * qy[j] * qz[k];

  t.terms[kKldRot] = kld_loss(t.rot.probs, t.q_rot);
  t.terms[kL1Rot] = l1_loss_angular(t.rot.alpha, truth.alpha) +
                    std::abs(t.rot.beta - truth.beta) +
                    l1_loss_angular(t.rot.gamma, truth.gamma);
  t.terms[kKldTrans] = kld_loss(t.trans.probs, t.q_t);
  t.terms[kL1Trans] = (Eigen::Vector3d(t.trans.shift - t.s_star)).cwiseAbs().sum();
  t.terms[kKldScale] = kld_loss(t.scale.probs, t.q_mu);
  t.terms[kL1Scale] = std::abs(t.scale.mu - truth.mu);
  t.recorded = true;
  return t.terms;
}

inline Eigen::Array<double, 6, 1> forward_pair2(const Grid2<double>& img1,
                                                const Grid2<double>& img2, const Pose4& truth,
                                                const FilterStack& stack, PairTape2& t,
                                                const SolverConfig& cfg = {},
                                                double sigma = 1.0) {
  if (img1.B != img2.B) throw ShapeError("forward_pair2: size mismatch");
  const int B = img1.B, n = img1.n();
  t.truth = truth;
  t.sigma = sigma;
  Grid2<double> gr1 = adj::extract_forward(img1, stack.rs1, t.ers1);
  Grid2<double> gr2 = adj::extract_forward(img2, stack.rs2, t.ers2);
  Grid2<double> gt1 = adj::extract_forward(img1, stack.t1, t.et1);
  Grid2<double> gt2 = adj::extract_forward(img2, stack.t2, t.et2);
  adj::rotscale_forward2(gr1, gr2, cfg, t.rs);
  Pose4 comp;
  comp.theta = truth.theta;
  comp.mu = truth.mu;
  adj::translation_forward2(gt1, gt2, comp, cfg, t.trans);

  const double sl_true = std::log(truth.mu) / t.rs.dl;
  const double sa_true = -truth.theta * n / (2.0 * M_PI);
  // the real-spectrum point symmetry makes the angle target two-peaked
  t.q_r = 0.5 * (gaussian_target(n, B + sa_true, sigma, true) +
                 gaussian_target(n, B + sa_true + n / 2.0, sigma, true));
  t.q_mu = gaussian_target(n, B + sl_true, sigma, true);
  Eigen::Matrix2d R;
  R << std::cos(truth.theta), -std::sin(truth.theta), std::sin(truth.theta),
      std::cos(truth.theta);
  t.s_star = R.transpose() * truth.t / truth.mu;
  Eigen::ArrayXd qx = gaussian_target(n, B + t.s_star[0], sigma, true);
  Eigen::ArrayXd qy = gaussian_target(n, B + t.s_star[1], sigma, true);
  t.q_t.resize(Eigen::Index(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) t.q_t[Eigen::Index(i) * n + j] = qx[i] * qy[j];

  t.dth = adj::fold_half_pi(t.rs.theta_e - truth.theta);
  t.terms[kKldRot] = kld_loss(t.rs.pcol, t.q_r);
  t.terms[kL1Rot] = std::abs(t.dth);
  t.terms[kKldTrans] = kld_loss(t.trans.probs, t.q_t);
  t.terms[kL1Trans] =
      std::abs(t.trans.shift[0] - t.s_star[0]) + std::abs(t.trans.shift[1] - t.s_star[1]);
  t.terms[kKldScale] = kld_loss(t.rs.prow, t.q_mu);
  t.terms[kL1Scale] = std::abs(t.rs.mu - truth.mu);
  t.recorded = true;
  return t.terms;
}

// ---------------------------------------------------------------------------
// Backward passes. Gradient keys: "g1", "g2" (input grids), "<ext>.w<li>"
// (filter taps, ext in {rs1, rs2, t1, t2}), "xi_r", "xi_mu", "xi_t"
// (temperature values; chain by xi for the log-parameter update).
// ---------------------------------------------------------------------------

namespace adj {

template <typename GridT>
inline void report_extract_grads(GradReport& rep, const char* name,
                                 const std::vector<Eigen::ArrayXd>& wbar) {
  for (size_t li = 0; li < wbar.size(); ++li)
    rep.add(std::string(name) + ".w" + std::to_string(li), wbar[li]);
}

}  // namespace adj

inline GradReport backward(const PairTape3& t, const FilterStack& stack,
                           const LossWeights& w, const SolverConfig& cfg = {}) {
  if (!t.recorded) throw StateError("backward: no recorded forward pass");
  GradReport rep;
  rep.terms = t.terms;
  rep.total = (w * t.terms).sum();
  const int B = t.n1.B;

  Eigen::ArrayXd rotpbar = w[kKldRot] * adj::kld_backward(t.rot.probs, t.q_rot);
  const double alphabar = w[kL1Rot] * adj::l1_angular_sign(t.rot.alpha, t.truth.alpha);
  const double betabar = w[kL1Rot] * adj::sign_of(t.rot.beta - t.truth.beta);
  const double gammabar = w[kL1Rot] * adj::l1_angular_sign(t.rot.gamma, t.truth.gamma);
  Eigen::ArrayXd scalepbar = w[kKldScale] * adj::kld_backward(t.scale.probs, t.q_mu);
  const double mubar = w[kL1Scale] * adj::sign_of(t.scale.mu - t.truth.mu);
  Eigen::ArrayXd transpbar = w[kKldTrans] * adj::kld_backward(t.trans.probs, t.q_t);
  Eigen::Vector3d shiftbar;
  for (int a = 0; a < 3; ++a)
    shiftbar[a] = w[kL1Trans] * adj::sign_of(t.trans.shift[a] - t.s_star[a]);

  double xir = 0, ximu = 0, xit = 0;
  Grid3<double> m1bar(B, t.n1.extent), m2bar(B, t.n2.extent);
  adj::rotation_backward(t.rot, cfg, rotpbar, alphabar, betabar, gammabar, m1bar, m2bar,
                         xir);
  adj::scale_backward(t.scale, cfg, scalepbar, mubar, m1bar, m2bar, ximu);
  Grid3<double> gt1bar(B, t.n1.extent), gt2bar(B, t.n2.extent);
  adj::translation_backward(t.trans, cfg, transpbar, shiftbar, gt1bar, gt2bar, xit);

  Grid3<double> grs1bar = adj::mag_backward3(t.mt1, m1bar);
  Grid3<double> grs2bar = adj::mag_backward3(t.mt2, m2bar);

  std::vector<Eigen::ArrayXd> wrs1, wrs2, wt1, wt2;
  Grid3<double> n1bar = adj::extract_backward(t.ers1, stack.rs1, grs1bar, wrs1);
  Grid3<double> n2bar = adj::extract_backward(t.ers2, stack.rs2, grs2bar, wrs2);
  n1bar.data += adj::extract_backward(t.et1, stack.t1, gt1bar, wt1).data;
  n2bar.data += adj::extract_backward(t.et2, stack.t2, gt2bar, wt2).data;

  rep.add("g1", adj::l2norm_backward(t.n1.data, t.nrm1, n1bar.data));
  rep.add("g2", adj::l2norm_backward(t.n2.data, t.nrm2, n2bar.data));
  adj::report_extract_grads<Grid3<double>>(rep, "rs1", wrs1);
  adj::report_extract_grads<Grid3<double>>(rep, "rs2", wrs2);
  adj::report_extract_grads<Grid3<double>>(rep, "t1", wt1);
  adj::report_extract_grads<Grid3<double>>(rep, "t2", wt2);
  rep.add_scalar("xi_r", xir);
  rep.add_scalar("xi_mu", ximu);
  rep.add_scalar("xi_t", xit);
  return rep;
}

inline GradReport backward(const PairTape2& t, const FilterStack& stack,
                           const LossWeights& w, const SolverConfig& cfg = {}) {
  if (!t.recorded) throw StateError("backward: no recorded forward pass");
  GradReport rep;
  rep.terms = t.terms;
  rep.total = (w * t.terms).sum();
  const int B = t.ers1.input.B;

  Eigen::ArrayXd pcolbar = w[kKldRot] * adj::kld_backward(t.rs.pcol, t.q_r);
  Eigen::ArrayXd prowbar = w[kKldScale] * adj::kld_backward(t.rs.prow, t.q_mu);
  const double thetabar = w[kL1Rot] * adj::sign_of(t.dth);  // fold has unit slope
  const double mubar = w[kL1Scale] * adj::sign_of(t.rs.mu - t.truth.mu);
  Eigen::ArrayXd transpbar = w[kKldTrans] * adj::kld_backward(t.trans.probs, t.q_t);
  Eigen::Vector2d shiftbar;
  for (int a = 0; a < 2; ++a)
    shiftbar[a] = w[kL1Trans] * adj::sign_of(t.trans.shift[a] - t.s_star[a]);

  double xir = 0, ximu = 0, xit = 0;
  Grid2<double> gr1bar(B, t.ers1.input.extent), gr2bar(B, t.ers2.input.extent);
  adj::rotscale_backward2(t.rs, cfg, prowbar, pcolbar, mubar, thetabar, gr1bar, gr2bar,
                          xir, ximu);
  Grid2<double> gt1bar(B, t.ers1.input.extent), gt2bar(B, t.ers2.input.extent);
  adj::translation_backward2(t.trans, cfg, transpbar, shiftbar, gt1bar, gt2bar, xit);

  std::vector<Eigen::ArrayXd> wrs1, wrs2, wt1, wt2;
  Grid2<double> i1bar = adj::extract_backward(t.ers1, stack.rs1, gr1bar, wrs1);
  Grid2<double> i2bar = adj::extract_backward(t.ers2, stack.rs2, gr2bar, wrs2);
  i1bar.data += adj::extract_backward(t.et1, stack.t1, gt1bar, wt1).data;
  i2bar.data += adj::extract_backward(t.et2, stack.t2, gt2bar, wt2).data;

  rep.add("g1", i1bar.data);
  rep.add("g2", i2bar.data);
  adj::report_extract_grads<Grid2<double>>(rep, "rs1", wrs1);
  adj::report_extract_grads<Grid2<double>>(rep, "rs2", wrs2);
  adj::report_extract_grads<Grid2<double>>(rep, "t1", wt1);
  adj::report_extract_grads<Grid2<double>>(rep, "t2", wt2);
  rep.add_scalar("xi_r", xir);
  rep.add_scalar("xi_mu", ximu);
  rep.add_scalar("xi_t", xit);
  return rep;
}

// ---------------------------------------------------------------------------
// Finite-difference verification on seeded blob pairs: one loss stage at a
// time, analytic gradients vs central differences for sampled grid cells,
// every filter tap, and the three temperatures.
// ---------------------------------------------------------------------------

enum class GradStage { Rotation3, Scale3, Translation3, RotScale2, Translation2 };

inline GradReport gradcheck(int B, GradStage stage, uint64_t seed = 0) {
  if (B > 16) throw ConfigError("gradcheck: bandwidth above the checkable range");
  const bool is2d = stage == GradStage::RotScale2 || stage == GradStage::Translation2;
  LossWeights w = LossWeights::Zero();
  switch (stage) {
    case GradStage::Rotation3: w[kKldRot] = 1, w[kL1Rot] = 3; break;
    case GradStage::Scale3: w[kKldScale] = 1, w[kL1Scale] = 3; break;
    case GradStage::Translation3:
    case GradStage::Translation2: w[kKldTrans] = 3, w[kL1Trans] = 1; break;
    case GradStage::RotScale2:
      w[kKldRot] = 1, w[kL1Rot] = 3, w[kKldScale] = 1, w[kL1Scale] = 3;
      break;
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  FilterStack stack = FilterStack::identity(is2d ? 2 : 3);
  const double amp = is2d ? 0.01 : 0.005;
  for (Extractor* ex : {&stack.rs1, &stack.rs2, &stack.t1, &stack.t2})
    for (auto& layer : ex->layers)
      for (Eigen::Index q = 0; q < layer.w.size(); ++q)
        layer.w[q] += amp * (2.0 * U(rng) - 1.0);

  SolverConfig solver;
  // small FD step: stage losses are smooth but strongly curved near softmax
  // peaks, so the h^2 truncation term dominates long before roundoff does
  const double h = 1e-5;
  GradReport rep;

  // every tap of every extractor, then sampled grid cells, then temperatures
  auto check_all = [&](auto&& total_of, auto&& run, Grid3<double>* g3a, Grid3<double>* g3b,
                       Grid2<double>* g2a, Grid2<double>* g2b) {
    rep = run(stack, solver);
    const char* names[4] = {"rs1", "rs2", "t1", "t2"};
    Extractor* exts[4] = {&stack.rs1, &stack.rs2, &stack.t1, &stack.t2};
    for (int e = 0; e < 4; ++e)
      for (size_t li = 0; li < exts[e]->layers.size(); ++li) {
        const std::string key = std::string(names[e]) + ".w" + std::to_string(li);
        double worst = 0;
        Eigen::ArrayXd& tap = exts[e]->layers[li].w;
        for (Eigen::Index q = 0; q < tap.size(); ++q) {
          const double keep = tap[q];
          tap[q] = keep + h;
          const double lp = total_of(stack, solver);
          tap[q] = keep - h;
          const double lm = total_of(stack, solver);
          tap[q] = keep;
          const double fd = (lp - lm) / (2.0 * h);
          const double an = rep.grads[key][q];
          worst = std::max(worst,
                           std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
        }
        rep.fd_errors[key] = worst;
      }

    auto check_grid = [&](const char* key, auto& grid) {
      std::vector<Eigen::Index> cells(grid.data.size());
      for (Eigen::Index q = 0; q < Eigen::Index(cells.size()); ++q) cells[q] = q;
      std::shuffle(cells.begin(), cells.end(), rng);
      const size_t ncheck = std::min<size_t>(64, cells.size());
      double worst = 0;
      for (size_t q = 0; q < ncheck; ++q) {
        const Eigen::Index ci = cells[q];
        const double keep = grid.data[ci];
        grid.data[ci] = keep + h;
        const double lp = total_of(stack, solver);
        grid.data[ci] = keep - h;
        const double lm = total_of(stack, solver);
        grid.data[ci] = keep;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = rep.grads[key][ci];
        worst = std::max(worst,
                         std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
      }
      rep.fd_errors[key] = worst;
    };
    if (is2d) {
      check_grid("g1", *g2a);
      check_grid("g2", *g2b);
    } else {
      check_grid("g1", *g3a);
      check_grid("g2", *g3b);
    }

    Temperature* temps[3] = {&solver.xi_r, &solver.xi_mu, &solver.xi_t};
    const char* tkeys[3] = {"xi_r", "xi_mu", "xi_t"};
    for (int q = 0; q < 3; ++q) {
      const double xi = temps[q]->value();
      const double hx = 1e-3 * std::max(1.0, xi);
      *temps[q] = Temperature(xi + hx);
      const double lp = total_of(stack, solver);
      *temps[q] = Temperature(xi - hx);
      const double lm = total_of(stack, solver);
      *temps[q] = Temperature(xi);
      const double fd = (lp - lm) / (2.0 * hx);
      const double an = rep.grads[tkeys[q]][0];
      rep.fd_errors[tkeys[q]] =
          std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
    }
  };

  if (!is2d) {
    Grid3<double> g1 = adj::blob_grid3(B, seed + 1);
    Pose7 truth = Pose7::from_rotation(random_rotation(rng));
    truth.mu = 0.9 + 0.2 * U(rng);
    truth.t = Eigen::Vector3d(U(rng) - 0.5, U(rng) - 0.5, U(rng) - 0.5) * (B / 2.0);
    Grid3<double> g2 = apply_pose3(g1, truth);
    g1.data += 0.3;
    g2.data += 0.3;
    auto total_of = [&](const FilterStack& st, const SolverConfig& sc) {
      PairTape3 tp;
      return (w * forward_pair3(g1, g2, truth, st, tp, sc, 1.0)).sum();
    };
    auto run = [&](const FilterStack& st, const SolverConfig& sc) {
      PairTape3 tp;
      forward_pair3(g1, g2, truth, st, tp, sc, 1.0);
      return backward(tp, st, w, sc);
    };
    check_all(total_of, run, &g1, &g2, nullptr, nullptr);
  } else {
    Grid2<double> g1 = adj::blob_grid2(B, seed + 1);
    Pose4 truth;
    truth.theta = M_PI * U(rng);
    truth.mu = 0.9 + 0.2 * U(rng);
    truth.t = Eigen::Vector2d(U(rng) - 0.5, U(rng) - 0.5) * (B / 2.0);
    Grid2<double> g2 = apply_pose2(g1, truth);
    g1.data += 0.3;
    g2.data += 0.3;
    auto total_of = [&](const FilterStack& st, const SolverConfig& sc) {
      PairTape2 tp;
      return (w * forward_pair2(g1, g2, truth, st, tp, sc, 1.0)).sum();
    };
    auto run = [&](const FilterStack& st, const SolverConfig& sc) {
      PairTape2 tp;
      forward_pair2(g1, g2, truth, st, tp, sc, 1.0);
      return backward(tp, st, w, sc);
    };
    check_all(total_of, run, nullptr, nullptr, &g1, &g2);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Training: pair-at-a-time first-order updates of the filter taps (and any
// temperature marked learnable), with the recorded per-step loss curve.
// ---------------------------------------------------------------------------

struct CurveRow {
  int step = 0;
  double total = 0, loss_r = 0, loss_mu = 0, loss_t = 0;
};

struct TrainResult {
  FilterStack stack;
  SolverConfig solver;
  std::vector<CurveRow> curve;
};

inline TrainResult train(const std::vector<Pair2>& dataset, const TrainConfig& cfg,
                         const SolverConfig& solver = {},
                         const FilterStack* init = nullptr) {
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  if (!(cfg.weights >= 0).all()) throw ConfigError("train: negative loss weight");
  if (cfg.lr < 0) throw ConfigError("train: negative learning rate");
  if (cfg.steps < 0) throw ConfigError("train: negative step count");
  if (!(cfg.sigma > 0)) throw ConfigError("train: sigma must be positive");
  if (!(cfg.decay > 0)) throw ConfigError("train: decay must be positive");

  TrainResult out;
  out.stack = init ? *init : FilterStack::identity(2);
  if (out.stack.dims != 2) throw ShapeError("train: need a 2D filter stack");
  out.solver = solver;
  out.curve.reserve(cfg.steps);

  Extractor* exts[4] = {&out.stack.rs1, &out.stack.rs2, &out.stack.t1, &out.stack.t2};
  const char* names[4] = {"rs1", "rs2", "t1", "t2"};
  Temperature* temps[3] = {&out.solver.xi_r, &out.solver.xi_mu, &out.solver.xi_t};
  const char* tkeys[3] = {"xi_r", "xi_mu", "xi_t"};

  // adaptive-moment state, one slot per tap tensor plus one per temperature
  std::vector<Eigen::ArrayXd> m1, m2;
  for (auto* ex : exts)
    for (auto& layer : ex->layers) {
      m1.push_back(Eigen::ArrayXd::Zero(layer.w.size()));
      m2.push_back(Eigen::ArrayXd::Zero(layer.w.size()));
    }
  double tm1[3] = {0, 0, 0}, tm2[3] = {0, 0, 0};
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;

  for (int step = 0; step < cfg.steps; ++step) {
    const Pair2& pair = dataset[size_t(step) % dataset.size()];
    PairTape2 tape;
    forward_pair2(pair.source, pair.target, pair.pose, out.stack, tape, out.solver,
                  cfg.sigma);
    const double total = (cfg.weights * tape.terms).sum();
    if (!std::isfinite(total))
      throw NumericalError("train: loss diverged at step " + std::to_string(step));
    GradReport rep = backward(tape, out.stack, cfg.weights, out.solver);

    CurveRow row;
    row.step = step;
    row.total = total;
    row.loss_r = cfg.weights[kKldRot] * tape.terms[kKldRot] +
                 cfg.weights[kL1Rot] * tape.terms[kL1Rot];
    row.loss_mu = cfg.weights[kKldScale] * tape.terms[kKldScale] +
                  cfg.weights[kL1Scale] * tape.terms[kL1Scale];
    row.loss_t = cfg.weights[kKldTrans] * tape.terms[kKldTrans] +
                 cfg.weights[kL1Trans] * tape.terms[kL1Trans];
    out.curve.push_back(row);

    // gather gradients in parameter order; temperatures chain onto the log
    std::vector<Eigen::ArrayXd> grads;
    size_t slot = 0;
    double sq = 0;
    for (int e = 0; e < 4; ++e)
      for (size_t li = 0; li < exts[e]->layers.size(); ++li) {
        grads.push_back(rep.grads[std::string(names[e]) + ".w" + std::to_string(li)]);
        sq += (grads.back() * grads.back()).sum();
        ++slot;
      }
    double tgrads[3] = {0, 0, 0};
    for (int q = 0; q < 3; ++q)
      if (temps[q]->learnable) {
        tgrads[q] = rep.grads[tkeys[q]][0] * temps[q]->value();
        sq += tgrads[q] * tgrads[q];
      }
    if (!std::isfinite(sq))
      throw NumericalError("train: gradient diverged at step " + std::to_string(step));
    double scale = 1.0;
    if (cfg.clip > 0) {
      const double norm = std::sqrt(sq);
      if (norm > cfg.clip) scale = cfg.clip / norm;
    }

    double lr = cfg.lr;
    if (cfg.decay_every > 0) lr *= std::pow(cfg.decay, step / cfg.decay_every);
    const double tcount = step + 1;
    const double bc1 = 1.0 - std::pow(b1, tcount), bc2 = 1.0 - std::pow(b2, tcount);

    slot = 0;
    for (auto* ex : exts)
      for (auto& layer : ex->layers) {
        Eigen::ArrayXd g = grads[slot] * scale;
        if (cfg.optimizer == TrainConfig::Optimizer::Adaptive) {
          m1[slot] = b1 * m1[slot] + (1 - b1) * g;
          m2[slot] = b2 * m2[slot] + (1 - b2) * g * g;
          layer.w -= lr * (m1[slot] / bc1) / ((m2[slot] / bc2).sqrt() + adam_eps);
        } else {
          layer.w -= lr * g;
        }
        ++slot;
      }
    for (int q = 0; q < 3; ++q)
      if (temps[q]->learnable) {
        const double g = tgrads[q] * scale;
        if (cfg.optimizer == TrainConfig::Optimizer::Adaptive) {
          tm1[q] = b1 * tm1[q] + (1 - b1) * g;
          tm2[q] = b2 * tm2[q] + (1 - b2) * g * g;
          temps[q]->log_xi -= lr * (tm1[q] / bc1) / (std::sqrt(tm2[q] / bc2) + adam_eps);
        } else {
          temps[q]->log_xi -= lr * g;
        }
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: "DPCW" magic, version, grid dimensionality, then the four
// extractors (layer count, leak slope, per-layer rank/dims/float32 taps).
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& s, uint32_t v) {
  s.write(reinterpret_cast<const char*>(&v), 4);
}

inline uint32_t read_u32(std::istream& s) {
  uint32_t v = 0;
  s.read(reinterpret_cast<char*>(&v), 4);
  if (!s) throw DataError("checkpoint: truncated file");
  return v;
}

inline void write_f64(std::ostream& s, double v) {
  s.write(reinterpret_cast<const char*>(&v), 8);
}

inline double read_f64(std::istream& s) {
  double v = 0;
  s.read(reinterpret_cast<char*>(&v), 8);
  if (!s) throw DataError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const FilterStack& stack) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("save_checkpoint: cannot open " + path);
  f.write("DPCW", 4);
  detail::write_u32(f, 1);  // version
  detail::write_u32(f, uint32_t(stack.dims));
  detail::write_u32(f, 4);  // extractor count
  for (const Extractor* ex : {&stack.rs1, &stack.rs2, &stack.t1, &stack.t2}) {
    detail::write_u32(f, uint32_t(ex->layers.size()));
    detail::write_f64(f, ex->leak);
    for (const auto& layer : ex->layers) {
      detail::write_u32(f, uint32_t(layer.dims));
      for (int d = 0; d < layer.dims; ++d) detail::write_u32(f, uint32_t(layer.k));
      for (Eigen::Index q = 0; q < layer.w.size(); ++q) {
        const float v = float(layer.w[q]);
        f.write(reinterpret_cast<const char*>(&v), 4);
      }
    }
  }
  if (!f) throw DataError("save_checkpoint: write failed for " + path);
}

inline FilterStack load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load_checkpoint: cannot open " + path);
  char magic[4] = {};
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "DPCW")
    throw DataError("load_checkpoint: not a filter checkpoint: " + path);
  const uint32_t version = detail::read_u32(f);
  if (version != 1) throw DataError("load_checkpoint: unsupported version");
  const uint32_t dims = detail::read_u32(f);
  if (dims != 2 && dims != 3) throw DataError("load_checkpoint: bad dimensionality");
  if (detail::read_u32(f) != 4) throw DataError("load_checkpoint: bad extractor count");
  FilterStack stack;
  stack.dims = int(dims);
  for (Extractor* ex : {&stack.rs1, &stack.rs2, &stack.t1, &stack.t2}) {
    const uint32_t nl = detail::read_u32(f);
    if (nl == 0 || nl > 16) throw DataError("load_checkpoint: bad layer count");
    ex->leak = detail::read_f64(f);
    if (!std::isfinite(ex->leak)) throw DataError("load_checkpoint: bad leak slope");
    ex->layers.clear();
    for (uint32_t li = 0; li < nl; ++li) {
      const uint32_t rank = detail::read_u32(f);
      if (rank != dims) throw DataError("load_checkpoint: tensor rank mismatch");
      uint32_t k = 0;
      for (uint32_t d = 0; d < rank; ++d) {
        const uint32_t kd = detail::read_u32(f);
        if (d == 0) k = kd;
        if (kd != k) throw DataError("load_checkpoint: non-cubic kernel");
      }
      if (k == 0 || k % 2 == 0 || k > 31) throw DataError("load_checkpoint: bad kernel size");
      ConvKernel layer;
      layer.k = int(k);
      layer.dims = int(rank);
      Eigen::Index sz = 1;
      for (uint32_t d = 0; d < rank; ++d) sz *= k;
      layer.w.resize(sz);
      for (Eigen::Index q = 0; q < sz; ++q) {
        float v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f) throw DataError("checkpoint: truncated file");
        if (!std::isfinite(v)) throw DataError("load_checkpoint: non-finite tap");
        layer.w[q] = double(v);
      }
      ex->layers.push_back(std::move(layer));
    }
  }
  return stack;
}

inline void write_loss_curve(const std::string& path, const std::vector<CurveRow>& curve) {
  std::ofstream f(path);
  if (!f) throw DataError("write_loss_curve: cannot open " + path);
  f << "step,loss_total,loss_r,loss_mu,loss_t\n";
  for (const auto& r : curve)
    f << r.step << ',' << r.total << ',' << r.loss_r << ',' << r.loss_mu << ',' << r.loss_t
      << "\n";
  if (!f) throw DataError("write_loss_curve: write failed for " + path);
}

}  // namespace dpc
