#pragma once

#include "dpc/filters.hpp"
#include "dpc/grid.hpp"
#include "dpc/logpolar.hpp"
#include "dpc/softsolve.hpp"
#include "dpc/spectral.hpp"
#include "dpc/spherical.hpp"

#include <chrono>

namespace dpc {

struct SolverConfig {
  double eps_rel = 1e-8;
  Temperature xi_r{10.0}, xi_mu{10.0}, xi_t{10.0};
  int window = 4;                      // soft-expectation half-width in bins
  bool use_argmax = false;             // skip sub-bin refinement
  std::vector<int> scale_axes{0, 1, 2};  // accumulation axes pooled by the scale stage
  int sphere_B = -1;                   // SO(3) search bandwidth; -1 = grid bandwidth
  double kld_sigma = 1.0;
  // log1p strength on log-polar maps. The 2D front-end stays mild so learned
  // filters (not fixed whitening) carry heterogeneous pairs; the 3D scale
  // stage needs the strong setting to pull ring structure out of the
  // accumulated magnitude envelope.
  double compress = 3.0;
  double scale_compress = 1e2;
};

struct RotationEstimate {
  double alpha = 0, beta = 0, gamma = 0;
  double peak = 0;
  Density density;  // probs over the flattened (2Bs)^3 Euler map
};

struct ScaleEstimate {
  double mu = 1;
  double peak = 0;
  Density density;  // probs over pooled log-shift bins; bin_values = signed shifts
};

struct TranslationEstimate {
  Eigen::Vector3d shift = Eigen::Vector3d::Zero();
  double peak = 0;
  Density density;  // probs over the flattened (2B)^3 shift map
};

struct Registration3Result {
  Pose7 pose;
  Density rot_density, scale_density, trans_density;
  double peak_r = 0, peak_mu = 0, peak_t = 0;
  double ms_rot = 0, ms_scale = 0, ms_trans = 0;
};

struct Translation2Estimate {
  Eigen::Vector2d shift = Eigen::Vector2d::Zero();
  double peak = 0;
  Density density;
};

struct Registration2Result {
  Pose4 pose;
  Density rotscale_density;  // probs over the flattened joint (log-r, angle) map
  Density trans_density;
  double peak_rs = 0, peak_t = 0;
};

namespace detail {

inline double stage_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Rotation: magnitude spectra -> radial aggregation onto spheres -> spherical
// harmonics -> SO(3) correlation; softmax peak with per-axis sub-bin
// refinement (alpha/gamma circular, beta clamped).
// ---------------------------------------------------------------------------

template <typename T>
RotationEstimate estimate_rotation3(const Grid3<T>& g1, const Grid3<T>& g2,
                                    const SolverConfig& cfg = {}) {
  if (g1.B != g2.B) throw ShapeError("estimate_rotation3: bandwidth mismatch");
  const int Bs = cfg.sphere_B > 0 ? cfg.sphere_B : g1.B;
  Grid3<T> m1 = magnitude_spectrum(g1);
  Grid3<T> m2 = magnitude_spectrum(g2);
  SphereGrid<T> s1 = radial_project(m1, g1.B, Bs);
  SphereGrid<T> s2 = radial_project(m2, g2.B, Bs);
  SphCoeffs<T> S1 = sph_ft(s1);
  SphCoeffs<T> S2 = sph_ft(s2);
  So3Map<T> f = so3_correlate(S2, S1);  // peaks at the pose rotation g1 -> g2

  RotationEstimate est;
  est.peak = double(f.data.maxCoeff());
  Eigen::ArrayXd flat = f.data.template cast<double>();
  if (est.peak > 0) flat /= est.peak;
  est.density = Density{soft_probs(flat, cfg.xi_r.value()), Eigen::ArrayXd()};

  Eigen::Index am;
  flat.maxCoeff(&am);
  const int n = f.n();
  const int i = int(am / (Eigen::Index(n) * n)), j = int((am / n) % n), k = int(am % n);
  if (cfg.use_argmax) {
    est.alpha = f.alpha(i);
    est.beta = f.beta(j);
    est.gamma = f.gamma(k);
    return est;
  }
  Eigen::ArrayXd ax(n);
  const double xi = cfg.xi_r.value();
  for (int q = 0; q < n; ++q) ax[q] = flat[(Eigen::Index(q) * n + j) * n + k];
  est.alpha = wrap_2pi(
      soft_refine_axis(ax, i, f.alpha(i), 2.0 * M_PI / n, true, xi, cfg.window));
  for (int q = 0; q < n; ++q) ax[q] = flat[(Eigen::Index(i) * n + q) * n + k];
  est.beta = std::clamp(
      soft_refine_axis(ax, j, f.beta(j), M_PI / (2.0 * Bs), false, xi, cfg.window), 0.0,
      M_PI);
  for (int q = 0; q < n; ++q) ax[q] = flat[(Eigen::Index(i) * n + j) * n + q];
  est.gamma = wrap_2pi(
      soft_refine_axis(ax, k, f.gamma(k), 2.0 * M_PI / n, true, xi, cfg.window));
  return est;
}

// ---------------------------------------------------------------------------
// Scale: rotation-compensate the source magnitude, collapse each configured
// axis, log-polar with log compression and per-row angular-mean removal
// (kills the stationary radial decay envelope that otherwise self-correlates
// at zero shift), Hann window over log-radius, then pool per-angle 1D phase
// correlations; the softened peak converts to mu via exp(-shift * bin width).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Eigen::ArrayXXd scale_residual(const Grid3<T>& mag, int axis, double compress) {
  Grid2<T> a = accumulate_axis(mag, axis);
  double mean = a.data.template cast<double>().mean();
  if (!(mean > 0)) throw DegenerateInput("estimate_scale3: zero magnitude accumulation");
  Grid2<T> an(a.B, a.extent);
  an.data = a.data / T(mean);
  LogPolarGrid<T> lp = to_logpolar(an, 1.0);
  const int n = lp.n();
  Eigen::ArrayXXd m(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) m(r, c) = std::log1p(compress * double(lp(r, c)));
  m.colwise() -= m.rowwise().mean();
  return m;
}

inline Eigen::ArrayXd hann(int n) {
  Eigen::ArrayXd w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / (n - 1));
  return w;
}

}  // namespace detail

template <typename T>
ScaleEstimate estimate_scale3(const Grid3<T>& g1, const Grid3<T>& g2,
                              const Eigen::Matrix3d& r_hat, const SolverConfig& cfg = {}) {
  if (g1.B != g2.B) throw ShapeError("estimate_scale3: bandwidth mismatch");
  if (cfg.scale_axes.empty()) throw ConfigError("estimate_scale3: no accumulation axes");
  Grid3<T> m1 = magnitude_spectrum(g1);
  Grid3<T> m2 = magnitude_spectrum(g2);
  Grid3<T> m1h = apply_pose3(m1, Pose7::from_rotation(r_hat));  // m1h(k) = m1(R k)

  const int nfull = m1.n();
  LogPolarGrid<T> proto(m1.B, 1.0);
  const double dl = proto.bin_width();
  // Crop away the unreliable small-radius band (roughly the first octave),
  // but never below four rows so small bandwidths stay usable.
  const int i0 = std::max(0, std::min(int(std::ceil(std::log(2.0) / dl)), nfull - 4));
  const int n = nfull - i0;
  if (n < 4) throw ConfigError("estimate_scale3: bandwidth too small for the scale stage");
  Eigen::ArrayXd win = detail::hann(n);

  Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(n);
  Eigen::Index ncol = 0;
  for (int axis : cfg.scale_axes) {
    Eigen::ArrayXXd rA = detail::scale_residual(m2, axis, cfg.scale_compress);
    Eigen::ArrayXXd rB = detail::scale_residual(m1h, axis, cfg.scale_compress);
    for (int c = 0; c < nfull; ++c) {
      Eigen::ArrayXd colA = rA.col(c).segment(i0, n) * win;
      Eigen::ArrayXd colB = rB.col(c).segment(i0, n) * win;
      acc += correlate1(colA, colB, cfg.eps_rel).data;
      ++ncol;
    }
  }
  acc /= double(ncol);

  ScaleEstimate est;
  est.peak = acc.maxCoeff();
  Eigen::Index am;
  acc.maxCoeff(&am);
  const int center = n / 2;
  Eigen::ArrayXd bins(n);
  for (int i = 0; i < n; ++i) bins[i] = i - center;
  // softmax on the raw pooled average (no peak normalization): the pooled
  // peak is well below 1, so this keeps the windowed expectation softer than
  // the other stages and averages out log-radius quantization.
  est.density = Density{soft_probs(acc, cfg.xi_mu.value()), bins};
  double shift;
  if (cfg.use_argmax) {
    shift = double(int(am) - center);
  } else {
    shift = expectation_window(est.density.probs, int(am), double(int(am) - center), 1.0,
                               true, cfg.window);
  }
  est.mu = std::exp(-shift * dl);
  return est;
}

// ---------------------------------------------------------------------------
// Translation: plain phase correlation between grids already aligned in
// rotation and scale; returns the shift taking the first grid to the second.
// ---------------------------------------------------------------------------

template <typename T>
TranslationEstimate estimate_translation3(const Grid3<T>& g1c, const Grid3<T>& g2c,
                                          const SolverConfig& cfg = {}) {
  CorrMap3<T> c = correlate(g1c, g2c, cfg.eps_rel);
  TranslationEstimate est;
  est.peak = double(c.data.maxCoeff());
  Eigen::ArrayXd flat = c.data.template cast<double>();
  if (est.peak > 0) flat /= est.peak;
  est.density = Density{soft_probs(flat, cfg.xi_t.value()), Eigen::ArrayXd()};
  Eigen::Index am;
  flat.maxCoeff(&am);
  const int n = c.n(), B = c.B;
  const int i = int(am / (Eigen::Index(n) * n)), j = int((am / n) % n), k = int(am % n);
  if (cfg.use_argmax) {
    est.shift = Eigen::Vector3d(i - B, j - B, k - B);
    return est;
  }
  const double xi = cfg.xi_t.value();
  Eigen::ArrayXd ax(n);
  for (int q = 0; q < n; ++q) ax[q] = flat[(Eigen::Index(q) * n + j) * n + k];
  est.shift[0] = soft_refine_axis(ax, i, double(i - B), 1.0, true, xi, cfg.window);
  for (int q = 0; q < n; ++q) ax[q] = flat[(Eigen::Index(i) * n + q) * n + k];
  est.shift[1] = soft_refine_axis(ax, j, double(j - B), 1.0, true, xi, cfg.window);
  for (int q = 0; q < n; ++q) ax[q] = flat[(Eigen::Index(i) * n + j) * n + q];
  est.shift[2] = soft_refine_axis(ax, k, double(k - B), 1.0, true, xi, cfg.window);
  return est;
}

// ---------------------------------------------------------------------------
// Full 7DoF solve: rotation -> scale (rotation-compensated) -> translation
// (fully compensated); v2 ~ apply_pose3(v1, result.pose).
// ---------------------------------------------------------------------------

template <typename T>
Registration3Result register3(const Grid3<T>& v1, const Grid3<T>& v2,
                              const FilterStack* stack = nullptr,
                              const SolverConfig& cfg = {}) {
  if (v1.B != v2.B) throw ShapeError("register3: bandwidth mismatch");
  Grid3<T> n1 = normalize(v1), n2 = normalize(v2);
  Grid3<T> gr1 = stack ? extract(n1, *stack, Stage::RotScale, 1) : n1;
  Grid3<T> gr2 = stack ? extract(n2, *stack, Stage::RotScale, 2) : n2;
  Grid3<T> gt1 = stack ? extract(n1, *stack, Stage::Translation, 1) : n1;
  Grid3<T> gt2 = stack ? extract(n2, *stack, Stage::Translation, 2) : n2;

  Registration3Result out;
  auto t0 = std::chrono::steady_clock::now();
  RotationEstimate rot;
  try {
    rot = estimate_rotation3(gr1, gr2, cfg);
  } catch (const Error& e) {
    throw NumericalError(std::string("register3[rotation]: ") + e.what());
  }
  out.ms_rot = detail::stage_ms(t0);
  const Eigen::Matrix3d R = Pose7_rotation(rot.alpha, rot.beta, rot.gamma);

  t0 = std::chrono::steady_clock::now();
  ScaleEstimate sc;
  try {
    sc = estimate_scale3(gr1, gr2, R, cfg);
  } catch (const Error& e) {
    throw NumericalError(std::string("register3[scale]: ") + e.what());
  }
  out.ms_scale = detail::stage_ms(t0);

  t0 = std::chrono::steady_clock::now();
  TranslationEstimate tr;
  try {
    Pose7 comp;
    comp.alpha = rot.alpha;
    comp.beta = rot.beta;
    comp.gamma = rot.gamma;
    comp.mu = sc.mu;
    Grid3<T> h = apply_pose3(gt1, comp);
    tr = estimate_translation3(h, gt2, cfg);
  } catch (const Error& e) {
    throw NumericalError(std::string("register3[translation]: ") + e.what());
  }
  out.ms_trans = detail::stage_ms(t0);

  out.pose.alpha = rot.alpha;
  out.pose.beta = rot.beta;
  out.pose.gamma = rot.gamma;
  out.pose.mu = sc.mu;
  out.pose.t = sc.mu * (R * tr.shift);
  out.rot_density = std::move(rot.density);
  out.scale_density = std::move(sc.density);
  out.trans_density = std::move(tr.density);
  out.peak_r = rot.peak;
  out.peak_mu = sc.peak;
  out.peak_t = tr.peak;
  return out;
}

// ---------------------------------------------------------------------------
// 4DoF 2D solve: Hann-windowed magnitude spectra in log-polar coordinates,
// one joint 2D phase correlation over (log-scale, angle), the pi ambiguity of
// real-spectrum point symmetry resolved by scoring both rotation hypotheses
// on the translation correlation.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Grid2<T> hann_window2(const Grid2<T>& g) {
  const int n = g.n();
  Eigen::ArrayXd w = hann(n);
  Grid2<T> out(g.B, g.extent);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out(i, j) = T(double(g(i, j)) * w[i] * w[j]);
  return out;
}

template <typename T>
LogPolarGrid<T> logpolar_compressed(const Grid2<T>& img, double compress) {
  Grid2<T> m = magnitude_spectrum(hann_window2(img));
  LogPolarGrid<T> lp = to_logpolar(m, 1.0);
  double mean = lp.data.template cast<double>().mean();
  if (!(mean > 0)) throw DegenerateInput("register2: zero magnitude spectrum");
  for (Eigen::Index i = 0; i < lp.data.size(); ++i)
    lp.data[i] = T(std::log1p(compress * double(lp.data[i]) / mean));
  return lp;
}

}  // namespace detail

template <typename T>
Registration2Result register2(const Grid2<T>& img1, const Grid2<T>& img2,
                              const FilterStack* stack = nullptr,
                              const SolverConfig& cfg = {}) {
  if (img1.B != img2.B) throw ShapeError("register2: size mismatch");
  const int B = img1.B, n = img1.n();
  Grid2<T> gr1 = stack ? extract(img1, *stack, Stage::RotScale, 1) : img1;
  Grid2<T> gr2 = stack ? extract(img2, *stack, Stage::RotScale, 2) : img2;
  Grid2<T> gt1 = stack ? extract(img1, *stack, Stage::Translation, 1) : img1;
  Grid2<T> gt2 = stack ? extract(img2, *stack, Stage::Translation, 2) : img2;

  LogPolarGrid<T> lp1 = detail::logpolar_compressed(gr1, cfg.compress);
  LogPolarGrid<T> lp2 = detail::logpolar_compressed(gr2, cfg.compress);
  const double dl = lp1.bin_width();
  Grid2<T> a(B, 1.0), b(B, 1.0);
  a.data = lp1.data;
  b.data = lp2.data;
  CorrMap2<T> c = correlate(a, b, cfg.eps_rel);

  Registration2Result out;
  out.peak_rs = double(c.data.maxCoeff());
  Eigen::ArrayXd flat = c.data.template cast<double>();
  if (out.peak_rs > 0) flat /= out.peak_rs;
  out.rotscale_density = Density{soft_probs(flat, cfg.xi_r.value()), Eigen::ArrayXd()};

  Eigen::Index am;
  flat.maxCoeff(&am);
  const int i = int(am / n), j = int(am % n);
  double sl, sa;
  if (cfg.use_argmax) {
    sl = i - B;
    sa = j - B;
  } else {
    Eigen::ArrayXd ax(n);
    for (int q = 0; q < n; ++q) ax[q] = flat[Eigen::Index(q) * n + j];
    sl = soft_refine_axis(ax, i, double(i - B), 1.0, true, cfg.xi_mu.value(), cfg.window);
    for (int q = 0; q < n; ++q) ax[q] = flat[Eigen::Index(i) * n + q];
    sa = soft_refine_axis(ax, j, double(j - B), 1.0, true, cfg.xi_r.value(), cfg.window);
  }
  const double mu = std::exp(sl * dl);
  const double theta0 = wrap_2pi(-sa * 2.0 * M_PI / n);

  // pi-ambiguity: evaluate both candidate rotations on the translation stage
  double best_peak = -1, best_theta = theta0;
  CorrMap2<T> best_ct;
  for (double cand : {theta0, wrap_2pi(theta0 + M_PI)}) {
    Pose4 comp;
    comp.theta = cand;
    comp.mu = mu;
    Grid2<T> h = apply_pose2(gt1, comp);
    CorrMap2<T> ct = correlate(h, gt2, cfg.eps_rel);
    double pk = double(ct.data.maxCoeff());
    if (pk > best_peak) {
      best_peak = pk;
      best_theta = cand;
      best_ct = std::move(ct);
    }
  }
  out.peak_t = best_peak;
  Eigen::ArrayXd tflat = best_ct.data.template cast<double>();
  if (best_peak > 0) tflat /= best_peak;
  out.trans_density = Density{soft_probs(tflat, cfg.xi_t.value()), Eigen::ArrayXd()};

  tflat.maxCoeff(&am);
  const int ti = int(am / n), tj = int(am % n);
  Eigen::Vector2d s;
  if (cfg.use_argmax) {
    s = Eigen::Vector2d(ti - B, tj - B);
  } else {
    Eigen::ArrayXd ax(n);
    for (int q = 0; q < n; ++q) ax[q] = tflat[Eigen::Index(q) * n + tj];
    s[0] = soft_refine_axis(ax, ti, double(ti - B), 1.0, true, cfg.xi_t.value(), cfg.window);
    for (int q = 0; q < n; ++q) ax[q] = tflat[Eigen::Index(ti) * n + q];
    s[1] = soft_refine_axis(ax, tj, double(tj - B), 1.0, true, cfg.xi_t.value(), cfg.window);
  }
  Eigen::Matrix2d R2;
  R2 << std::cos(best_theta), -std::sin(best_theta), std::sin(best_theta),
      std::cos(best_theta);
  out.pose.theta = best_theta;
  out.pose.mu = mu;
  out.pose.t = mu * (R2 * s);
  return out;
}

}  // namespace dpc
