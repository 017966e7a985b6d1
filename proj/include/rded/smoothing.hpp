#pragma once

// Kernel smoothers: local polynomial curve and derivative estimation,
// imputation of masked values, a tensor-product surface smoother and the
// final coefficient smoother.

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rded/core.hpp"

namespace rded {

enum class KernelFamily { Epanechnikov, Gaussian };

struct KernelSpec {
  KernelFamily family = KernelFamily::Epanechnikov;
  double bandwidth = 1.0;

  /// Unnormalized kernel weight at u = (t_k - t) / h.
  double weight(double u) const {
    if (family == KernelFamily::Epanechnikov) {
      const double v = 1.0 - u * u;
      return v > 0.0 ? 0.75 * v : 0.0;
    }
    return std::exp(-0.5 * u * u);
  }

  /// Half-width of the window in units of u outside of which weights vanish or are negligible.
  double support() const { return family == KernelFamily::Epanechnikov ? 1.0 : 10.0; }

  KernelSpec widened(double factor) const { return {family, bandwidth * factor}; }
};

inline KernelSpec epanechnikov(double h) { return {KernelFamily::Epanechnikov, h}; }
inline KernelSpec gaussian(double h) { return {KernelFamily::Gaussian, h}; }

namespace detail {

inline double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

// Weighted least squares for the local polynomial at `at`. Observations with
// observed[k] == false are skipped. Returns nullopt on a rank-deficient design.
inline std::optional<double> local_poly_once(std::span<const double> t, std::span<const double> y,
                                             const std::vector<bool>* skip, int degree,
                                             const KernelSpec& kernel, double at, int deriv) {
  const double h = kernel.bandwidth;
  const double reach = kernel.support() * h;
  std::vector<std::size_t> rows;
  rows.reserve(t.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (skip && (*skip)[k]) continue;
    if (std::abs(t[k] - at) >= reach && kernel.family == KernelFamily::Epanechnikov) continue;
    if (kernel.weight((t[k] - at) / h) > 0.0) rows.push_back(k);
  }
  const int p = degree + 1;
  if (static_cast<int>(rows.size()) < p) return std::nullopt;

  Eigen::MatrixXd A(rows.size(), p);
  Eigen::VectorXd b(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t k = rows[r];
    const double u = (t[k] - at) / h;
    const double sw = std::sqrt(kernel.weight(u));
    double pw = 1.0;
    for (int l = 0; l < p; ++l) {
      A(r, l) = sw * pw;
      pw *= u;
    }
    b(r) = sw * y[k];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-12);
  if (qr.rank() < p) return std::nullopt;
  const Eigen::VectorXd theta = qr.solve(b);
  // theta is in the scaled basis u^l = ((t - at)/h)^l.
  return factorial(deriv) * theta(deriv) / std::pow(h, deriv);
}

}  // namespace detail

/// Local polynomial estimate of the deriv-th derivative at `at`: deriv! * theta_deriv
/// from the kernel-weighted least-squares fit of degree `degree` in (t_k - at).
/// Throws SingularDesign when the local design is rank deficient.
inline double local_poly(std::span<const double> t, std::span<const double> y, int degree,
                         const KernelSpec& kernel, double at, int deriv) {
  if (deriv < 0 || deriv > degree) throw Error(ErrorCode::InvalidConfig, "derivative order exceeds degree");
  if (!(kernel.bandwidth > 0.0)) throw Error(ErrorCode::InvalidConfig, "bandwidth must be positive");
  auto v = detail::local_poly_once(t, y, nullptr, degree, kernel, at, deriv);
  if (!v) throw Error(ErrorCode::SingularDesign, "local design rank deficient at t=" + std::to_string(at));
  return *v;
}

/// As local_poly, skipping masked points and doubling the bandwidth up to three
/// times when the window is degenerate.
inline double local_poly_widening(std::span<const double> t, std::span<const double> y,
                                  const std::vector<bool>* skip, int degree, KernelSpec kernel,
                                  double at, int deriv) {
  for (int attempt = 0; attempt <= 3; ++attempt) {
    if (auto v = detail::local_poly_once(t, y, skip, degree, kernel, at, deriv)) return *v;
    kernel = kernel.widened(2.0);
  }
  throw Error(ErrorCode::SingularDesign, "local design rank deficient at t=" + std::to_string(at) +
                                             " after bandwidth doubling");
}

/// Local linear smoothing at every grid point using the observed values only;
/// masked points are imputed and the mask is cleared.
inline Trajectory smooth_trajectory(const Trajectory& traj, const TimeGrid& grid, const KernelSpec& kernel) {
  const auto t = grid.points();
  std::size_t observed = 0;
  for (std::size_t k = 0; k < traj.size(); ++k) observed += traj.missing(k) ? 0 : 1;
  if (observed < 2) throw Error(ErrorCode::SingularDesign, "fewer than two observed points");
  const std::vector<bool>* skip = traj.mask.empty() ? nullptr : &traj.mask;
  Trajectory out;
  out.values.resize(grid.count);
  for (std::size_t k = 0; k < grid.count; ++k)
    out.values[k] = local_poly_widening(t, traj.values, skip, 1, kernel, t[k], 0);
  return out;
}

/// Log-spaced candidate bandwidths for derivative estimation, in time units.
inline std::vector<double> derivative_bandwidth_grid(const TimeGrid& grid) {
  constexpr int count = 8;
  const double lo = 2.5 * grid.step, hi = 20.0 * grid.step;
  std::vector<double> out;
  for (int i = 0; i < count; ++i) out.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (count - 1)));
  return out;
}

/// Leave-one-point-out squared error of the local quadratic curve fit.
inline double local_quadratic_cv_error(const std::vector<double>& t, const std::vector<double>& y,
                                       const KernelSpec& kernel) {
  std::vector<bool> skip(t.size(), false);
  double err = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    skip[k] = true;
    const double pred = local_poly_widening(t, y, &skip, 2, kernel, t[k], 0);
    skip[k] = false;
    err += (y[k] - pred) * (y[k] - pred);
  }
  return err / static_cast<double>(t.size());
}

/// Bandwidth minimizing the leave-one-point-out curve-fit error; smallest on ties.
inline double select_derivative_bandwidth(const std::vector<double>& values, const TimeGrid& grid,
                                          KernelFamily family = KernelFamily::Epanechnikov) {
  const auto t = grid.points();
  double best_h = 0.0, best = std::numeric_limits<double>::infinity();
  for (double h : derivative_bandwidth_grid(grid)) {
    const double e = local_quadratic_cv_error(t, values, {family, h});
    if (e < best) {
      best = e;
      best_h = h;
    }
  }
  return best_h;
}

struct DerivativeOptions {
  KernelFamily family = KernelFamily::Epanechnikov;
  std::optional<double> bandwidth;  // empty: cross-validated per trajectory
};

/// First derivative curve of one trajectory by local quadratic regression.
inline std::vector<double> derivative_curve(const std::vector<double>& values, const TimeGrid& grid,
                                            const DerivativeOptions& opt = {}) {
  const auto t = grid.points();
  const double h = opt.bandwidth ? *opt.bandwidth : select_derivative_bandwidth(values, grid, opt.family);
  std::vector<double> d(grid.count);
  for (std::size_t k = 0; k < grid.count; ++k)
    d[k] = local_poly_widening(t, values, nullptr, 2, {opt.family, h}, t[k], 1);
  return d;
}

/// Fills panel.derivatives from the (already smoothed) responses.
inline TrajectoryPanel estimate_derivatives(TrajectoryPanel panel, const DerivativeOptions& opt = {}) {
  panel.derivatives.clear();
  for (std::size_t i = 0; i < panel.n(); ++i) {
    if (panel.response[i].has_missing())
      throw Error(ErrorCode::InvalidConfig, "response of '" + panel.subjects[i] + "' still has missing values");
    try {
      panel.derivatives.emplace_back(derivative_curve(panel.response[i].values, panel.grid, opt));
    } catch (const Error& e) {
      throw Error(e.code(), "subject '" + panel.subjects[i] + "': " + e.message());
    }
  }
  return panel;
}

/// Smooths every response and covariate trajectory (imputing masked values).
inline TrajectoryPanel smooth_panel(TrajectoryPanel panel, const KernelSpec& kernel) {
  auto run = [&](Trajectory& tr, const std::string& what) {
    try {
      tr = smooth_trajectory(tr, panel.grid, kernel);
    } catch (const Error& e) {
      throw Error(e.code(), what + ": " + e.message());
    }
  };
  for (std::size_t i = 0; i < panel.n(); ++i) run(panel.response[i], "response of '" + panel.subjects[i] + "'");
  for (std::size_t j = 0; j < panel.J(); ++j)
    for (std::size_t i = 0; i < panel.n(); ++i)
      run(panel.covariates[j][i], "covariate '" + panel.covariateNames[j] + "' of '" + panel.subjects[i] + "'");
  return panel;
}

/// Bandwidths of the surface smoother in grid steps along the lag and time axes.
struct SurfaceBandwidth {
  double lagSteps = 2.0;
  double timeSteps = 10.0;
  KernelFamily family = KernelFamily::Epanechnikov;
};

/// Local fit with the tensor-product linear basis (1, ds, dt, ds*dt) under a product
/// kernel, evaluated at every node of the surface. Bandwidths are floored at two axis
/// steps so that each window holds at least 2 x 2 points; a single-point axis drops out.
inline HistorySurface smooth_surface(const HistorySurface& raw, const SurfaceBandwidth& bw, double step) {
  const std::size_t S = raw.lags(), T = raw.times();
  const double floor_steps = 2.0 + 1e-9;
  const double hs = std::max(bw.lagSteps, floor_steps) * step;
  const double ht = std::max(bw.timeSteps, floor_steps) * step;
  const KernelSpec ks{bw.family, hs}, kt{bw.family, ht};
  const bool use_s = S > 1, use_t = T > 1;
  const int p = use_s && use_t ? 4 : (use_s || use_t ? 2 : 1);

  // 1-D weight tables, indexed by offset.
  auto table = [](const KernelSpec& k, std::size_t len, double stp) {
    std::vector<double> w(len);
    for (std::size_t d = 0; d < len; ++d) w[d] = k.weight(static_cast<double>(d) * stp / k.bandwidth);
    return w;
  };
  const auto ws = table(ks, S, step);
  const auto wt = table(kt, T, step);

  HistorySurface out = raw;
  for (std::size_t s0 = 0; s0 < S; ++s0) {
    for (std::size_t c0 = 0; c0 < T; ++c0) {
      Eigen::MatrixXd M = Eigen::MatrixXd::Zero(p, p);
      Eigen::VectorXd r = Eigen::VectorXd::Zero(p);
      Eigen::VectorXd x(p);
      for (std::size_t s = 0; s < S; ++s) {
        const double w1 = ws[s > s0 ? s - s0 : s0 - s];
        if (w1 <= 0.0) continue;
        const double ds = (static_cast<double>(s) - static_cast<double>(s0)) * step / hs;
        for (std::size_t c = 0; c < T; ++c) {
          const double w2 = wt[c > c0 ? c - c0 : c0 - c];
          if (w2 <= 0.0) continue;
          const double dt = (static_cast<double>(c) - static_cast<double>(c0)) * step / ht;
          int q = 0;
          x(q++) = 1.0;
          if (use_s) x(q++) = ds;
          if (use_t) x(q++) = dt;
          if (use_s && use_t) x(q++) = ds * dt;
          const double w = w1 * w2;
          M.noalias() += w * x * x.transpose();
          r.noalias() += w * raw(s, c) * x;
        }
      }
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(M);
      out(s0, c0) = qr.solve(r)(0);
    }
  }
  return out;
}

/// Local linear smooth of a curve sampled at `time`, evaluated at the same points.
inline std::vector<double> smooth_curve(const std::vector<double>& time, const std::vector<double>& values,
                                        const KernelSpec& kernel) {
  std::vector<double> out(values.size());
  for (std::size_t k = 0; k < values.size(); ++k)
    out[k] = local_poly_widening(time, values, nullptr, 1, kernel, time[k], 0);
  return out;
}

/// Replaces the reported coefficient curves by local linear smooths of the raw
/// per-timepoint estimates.
inline FittedRded smooth_coefficients(FittedRded fit, const KernelSpec& kernel = epanechnikov(20.0)) {
  if (fit.time.size() < 2) {
    fit.intercept = fit.rawIntercept;
    fit.historyCoef = fit.rawHistoryCoef;
    fit.covariateCoefs = fit.rawCovariateCoefs;
    return fit;
  }
  fit.intercept = smooth_curve(fit.time, fit.rawIntercept, kernel);
  fit.historyCoef = smooth_curve(fit.time, fit.rawHistoryCoef, kernel);
  fit.covariateCoefs.clear();
  for (const auto& c : fit.rawCovariateCoefs) fit.covariateCoefs.push_back(smooth_curve(fit.time, c, kernel));
  return fit;
}

}  // namespace rded
