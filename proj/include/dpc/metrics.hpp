#pragma once

#include "dpc/types.hpp"

#include <vector>

namespace dpc {

struct PairErrors {
  double e_t = 0;      // Euclidean translation error (cells / px)
  double e_r = 0;      // geodesic rotation error, degrees
  double e_mu = 0;     // |mu_hat - mu_true|
  double e_tx = 0, e_ty = 0;  // per-axis absolute (2D accuracy tables)
};

inline double geodesic_deg(const Eigen::Matrix3d& Ra, const Eigen::Matrix3d& Rb) {
  const double c = std::clamp(((Ra.transpose() * Rb).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

inline PairErrors pair_errors(const Pose7& est, const Pose7& truth) {
  PairErrors e;
  e.e_t = (est.t - truth.t).norm();
  e.e_r = geodesic_deg(est.rotation(), truth.rotation());
  e.e_mu = std::abs(est.mu - truth.mu);
  e.e_tx = std::abs(est.t[0] - truth.t[0]);
  e.e_ty = std::abs(est.t[1] - truth.t[1]);
  return e;
}

inline PairErrors pair_errors(const Pose4& est, const Pose4& truth) {
  PairErrors e;
  e.e_t = (est.t - truth.t).norm();
  double d = std::abs(wrap_2pi(est.theta) - wrap_2pi(truth.theta));
  e.e_r = std::min(d, 2.0 * M_PI - d) * 180.0 / M_PI;
  e.e_mu = std::abs(est.mu - truth.mu);
  e.e_tx = std::abs(est.t[0] - truth.t[0]);
  e.e_ty = std::abs(est.t[1] - truth.t[1]);
  return e;
}

// Percentage of pairs whose error (selected by the accessor) is <= tau.
template <typename Field>
double accuracy(const std::vector<PairErrors>& errs, Field field, double tau) {
  if (errs.empty()) throw EmptyInput("accuracy: no pairs");
  int ok = 0;
  for (const auto& e : errs) ok += field(e) <= tau;
  return 100.0 * ok / double(errs.size());
}

struct Metrics {
  std::vector<PairErrors> per_pair;
  double mse_t = 0, mse_r = 0, mse_mu = 0;
  // Acc at integer thresholds 0..19 for translation (Euclidean), rotation
  // (degrees), and 0.01*tau for scale.
  Eigen::ArrayXd acc_t_sweep, acc_r_sweep, acc_mu_sweep;
};

inline Metrics aggregate(const std::vector<PairErrors>& errs) {
  if (errs.empty()) throw EmptyInput("aggregate: no pairs");
  Metrics m;
  m.per_pair = errs;
  for (const auto& e : errs) {
    m.mse_t += e.e_t * e.e_t;
    m.mse_r += e.e_r * e.e_r;
    m.mse_mu += e.e_mu * e.e_mu;
  }
  m.mse_t /= double(errs.size());
  m.mse_r /= double(errs.size());
  m.mse_mu /= double(errs.size());
  m.acc_t_sweep = Eigen::ArrayXd(20);
  m.acc_r_sweep = Eigen::ArrayXd(20);
  m.acc_mu_sweep = Eigen::ArrayXd(20);
  for (int tau = 0; tau < 20; ++tau) {
    m.acc_t_sweep[tau] = accuracy(errs, [](const PairErrors& e) { return e.e_t; }, tau);
    m.acc_r_sweep[tau] = accuracy(errs, [](const PairErrors& e) { return e.e_r; }, tau);
    m.acc_mu_sweep[tau] =
        accuracy(errs, [](const PairErrors& e) { return e.e_mu; }, 0.01 * tau);
  }
  return m;
}

}  // namespace dpc
