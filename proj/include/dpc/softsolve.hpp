#pragma once

#include "dpc/types.hpp"

namespace dpc {

// Solver temperature, stored as a log so gradient steps keep it positive.
struct Temperature {
  double log_xi = 0.0;
  bool learnable = false;

  Temperature() = default;
  Temperature(double xi, bool learn = false) : learnable(learn) {
    if (!(xi > 0)) throw ConfigError("Temperature: xi must be positive");
    log_xi = std::log(xi);
  }
  double value() const { return std::exp(log_xi); }
};

// Stable softmax with temperature over a flat map of correlation values.
inline Eigen::ArrayXd soft_probs(const Eigen::ArrayXd& vals, double xi) {
  if (!(xi > 0)) throw ConfigError("soft_probs: xi must be positive");
  if (!vals.isFinite().all()) throw NumericalError("soft_probs: non-finite input");
  Eigen::ArrayXd p = (xi * (vals - vals.maxCoeff())).exp();
  return p / p.sum();
}

inline Density soft_density(const Eigen::ArrayXd& vals, const Eigen::ArrayXd& bin_values,
                            double xi) {
  if (bin_values.size() != 0 && bin_values.size() != vals.size())
    throw ShapeError("soft_density: bin_values size mismatch");
  return Density{soft_probs(vals, xi), bin_values};
}

// Global expectation over the whole density.
inline double expectation(const Density& d) {
  if (d.bin_values.size() != d.probs.size())
    throw ShapeError("expectation: bin_values size mismatch");
  return (d.probs * d.bin_values).sum();
}

// Windowed expectation: renormalize the density over +-W bins around i0 (the
// argmax) and average bin values unwrapped relative to i0, so circular
// domains do not bias toward the domain center. On non-circular axes indices
// clamp at the ends. i0 itself is chosen outside; it is not moved here.
inline double expectation_window(const Eigen::ArrayXd& probs, int i0, double value0,
                                 double step, bool circular, int W) {
  const int n = int(probs.size());
  if (i0 < 0 || i0 >= n) throw ConfigError("expectation_window: bad center");
  double num = 0, den = 0;
  for (int o = -W; o <= W; ++o) {
    int i = circular ? ((i0 + o) % n + n) % n : std::clamp(i0 + o, 0, n - 1);
    num += probs[i] * (value0 + o * step);
    den += probs[i];
  }
  if (den <= 0) throw NumericalError("expectation_window: zero window mass");
  return num / den;
}

// One-axis soft refinement of a peak location: softmax the (max-normalized)
// values along the axis, then windowed expectation around the argmax.
inline double soft_refine_axis(const Eigen::ArrayXd& vals, int i0, double value0,
                               double step, bool circular, double xi, int W) {
  Eigen::ArrayXd v = vals;
  double m = v.maxCoeff();
  if (m > 0) v /= m;
  return expectation_window(soft_probs(v, xi), i0, value0, step, circular, W);
}

inline double l1_loss(double est, double truth) { return std::abs(est - truth); }

inline double l1_loss(const Eigen::ArrayXd& est, const Eigen::ArrayXd& truth) {
  if (est.size() != truth.size()) throw ShapeError("l1_loss: size mismatch");
  return (est - truth).abs().sum();
}

// L1 on a circular quantity: compare along the shorter arc.
inline double l1_loss_angular(double est, double truth) {
  double d = std::abs(wrap_2pi(est) - wrap_2pi(truth));
  return std::min(d, 2.0 * M_PI - d);
}

// Discretized Gaussian target over n bins, centered at the (possibly
// fractional) truth bin coordinate; min-image distance when circular.
inline Eigen::ArrayXd gaussian_target(int n, double truth_bin, double sigma,
                                      bool circular) {
  if (!(sigma > 0)) throw ConfigError("gaussian_target: sigma must be positive");
  Eigen::ArrayXd q(n);
  for (int i = 0; i < n; ++i) {
    double d = i - truth_bin;
    if (circular) {
      d = std::fmod(d, double(n));
      if (d > n / 2.0) d -= n;
      if (d < -n / 2.0) d += n;
    }
    q[i] = std::exp(-0.5 * d * d / (sigma * sigma));
  }
  return q / q.sum();
}

// KLD(p || q) against the discretized Gaussian target.
inline double kld_loss(const Eigen::ArrayXd& probs, double truth_bin, double sigma,
                       bool circular) {
  Eigen::ArrayXd q = gaussian_target(int(probs.size()), truth_bin, sigma, circular);
  double kl = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    kl += probs[i] * (std::log(probs[i]) - std::log(std::max(q[i], 1e-300)));
  }
  return kl;
}

// KLD against an explicit target density (same support).
inline double kld_loss(const Eigen::ArrayXd& probs, const Eigen::ArrayXd& target) {
  if (probs.size() != target.size()) throw ShapeError("kld_loss: size mismatch");
  double kl = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    kl += probs[i] * (std::log(probs[i]) - std::log(std::max(target[i], 1e-300)));
  }
  return kl;
}

}  // namespace dpc
