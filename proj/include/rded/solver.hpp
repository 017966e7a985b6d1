#pragma once

// Sample-path solutions of linear random differential equations with discrete and
// distributed delays, and a seeded generator of synthetic trajectory panels.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rded/core.hpp"
#include "rded/regression.hpp"

namespace rded {

using TimeFn = std::function<double(double)>;
using SurfaceFn = std::function<double(double s, double t)>;

/// A covariate path on the solver grid extended `lead` points into the past:
/// values[lead + k] is the value at grid index k (k may be negative down to -lead).
struct CovariatePath {
  std::size_t lead = 0;
  std::vector<double> values;

  double at(std::ptrdiff_t k) const { return values[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(lead) + k)]; }
};

/// Distributed covariate history  int_0^horizon weight(s, t) U_j(t - s) ds.
struct CovariateHistoryTerm {
  std::size_t covariate = 0;
  std::size_t horizon = 0;  // grid steps
  SurfaceFn weight;
};

/// Linear RDED
///   X'(t) = alpha(t) + beta0(t) * History(t) + sum_j beta_j(t) U_j(t - tau_j)
///           + sum int gamma_1 U + Z(t),
/// where History(t) = X(t - tau0) when historyWeight is empty (discrete delay) and
/// int_0^tau0 gamma(s, t) X(t - s) ds otherwise. Empty callables read as zero, except an
/// empty beta0 which reads as one when a history weight is supplied.
struct RdedSpec {
  TimeFn intercept;
  TimeFn historyCoef;
  SurfaceFn historyWeight;
  std::vector<TimeFn> covariateCoefs;
  std::vector<CovariateHistoryTerm> covariateHistory;
  LagConfig lagConfig;
  TimeFn initial;
  std::vector<double> forcing;  // Z on the solver grid; empty means zero
};

/// State and right-hand side of a solved path on the grid.
struct SolvedPath {
  std::vector<double> state;
  std::vector<double> rate;
  std::size_t intervals = 0;
};

namespace detail {

inline double eval_or(const TimeFn& f, double t, double fallback) { return f ? f(t) : fallback; }

inline void check_covariates(const RdedSpec& spec, const std::vector<CovariatePath>& cov, const TimeGrid& grid) {
  if (cov.size() < spec.covariateCoefs.size())
    throw Error(ErrorCode::InvalidConfig, "fewer covariate paths than covariate coefficients");
  if (spec.lagConfig.lags.size() < spec.covariateCoefs.size())
    throw Error(ErrorCode::InvalidConfig, "missing lag for a covariate coefficient");
  auto need = [&](std::size_t j, std::size_t back) {
    if (j >= cov.size()) throw Error(ErrorCode::InvalidConfig, "covariate index out of range");
    if (back > cov[j].lead)
      throw Error(ErrorCode::DomainUnderflow, "covariate " + std::to_string(j) + " history of " +
                                                  std::to_string(cov[j].lead) + " steps is shorter than lag " +
                                                  std::to_string(back));
    if (cov[j].values.size() < cov[j].lead + grid.count)
      throw Error(ErrorCode::DomainUnderflow, "covariate " + std::to_string(j) + " does not cover the grid");
  };
  for (std::size_t j = 0; j < spec.covariateCoefs.size(); ++j) need(j, spec.lagConfig.lags[j]);
  for (const auto& term : spec.covariateHistory) need(term.covariate, term.horizon);
  if (!spec.forcing.empty() && spec.forcing.size() != grid.count)
    throw Error(ErrorCode::GridMismatch, "forcing does not match the grid");
}

// Right-hand side contributions that do not involve X.
inline double exogenous_rate(const RdedSpec& spec, const std::vector<CovariatePath>& cov, const TimeGrid& grid,
                             std::size_t k) {
  const double t = grid.at(k);
  double f = eval_or(spec.intercept, t, 0.0);
  for (std::size_t j = 0; j < spec.covariateCoefs.size(); ++j)
    if (spec.covariateCoefs[j])
      f += spec.covariateCoefs[j](t) *
           cov[j].at(static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(spec.lagConfig.lags[j]));
  for (const auto& term : spec.covariateHistory) {
    const auto q = trapezoid_weights(term.horizon, grid.step);
    double acc = 0.0;
    for (std::size_t s = 0; s <= term.horizon; ++s)
      acc += q[s] * term.weight(static_cast<double>(s) * grid.step, t) *
             cov[term.covariate].at(static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(s));
    f += acc;
  }
  if (!spec.forcing.empty()) f += spec.forcing[k];
  return f;
}

inline void require_finite(const std::vector<double>& x) {
  for (double v : x)
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "solution diverged to a non-finite value");
}

}  // namespace detail

/// Method of steps for delay tau0 >= 1 grid step. With a discrete delay the delayed
/// state over each interval of length tau0 is already known, so the solution on that
/// interval is X(start) + composite-trapezoid integral of the right-hand side. With a
/// distributed delay the s = 0 end of the history integral involves the current state;
/// the trapezoid step is then solved for X(t_{k+1}) in closed form (the equation is linear).
inline SolvedPath solve_path(const RdedSpec& spec, const std::vector<CovariatePath>& covariates,
                             const TimeGrid& grid) {
  const std::size_t m = spec.lagConfig.tau0;
  if (m == 0) throw Error(ErrorCode::InvalidConfig, "method of steps needs tau0 >= 1 step; use solve_ode");
  if (!spec.initial) throw Error(ErrorCode::InvalidConfig, "initial function is required");
  detail::check_covariates(spec, covariates, grid);
  const std::size_t K = grid.count;
  const double h = grid.step;
  const bool distributed = static_cast<bool>(spec.historyWeight);
  const double beta_default = distributed ? 1.0 : 0.0;

  // x[m + k] holds X(t_k) for k = -m .. K-1.
  std::vector<double> x(m + K);
  for (std::size_t q = 0; q <= m; ++q) x[q] = spec.initial(grid.at(0) - static_cast<double>(m - q) * h);
  auto X = [&](std::ptrdiff_t k) -> double& { return x[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(m) + k)]; };

  SolvedPath out;
  out.rate.assign(K, 0.0);
  std::vector<double> exo(K);
  for (std::size_t k = 0; k < K; ++k) exo[k] = detail::exogenous_rate(spec, covariates, grid, k);

  if (!distributed) {
    for (std::size_t a = 0;; a += m) {
      ++out.intervals;
      const std::size_t b = std::min(a + m, K - 1);
      // The delayed argument on [t_a, t_b] lies in the previous interval.
      for (std::size_t k = a; k <= b; ++k) {
        const double t = grid.at(k);
        out.rate[k] = exo[k] + detail::eval_or(spec.historyCoef, t, beta_default) *
                                   X(static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(m));
      }
      double integral = 0.0;
      for (std::size_t k = a + 1; k <= b; ++k) {
        integral += 0.5 * h * (out.rate[k - 1] + out.rate[k]);
        X(static_cast<std::ptrdiff_t>(k)) = X(static_cast<std::ptrdiff_t>(a)) + integral;
      }
      if (b == K - 1) break;
    }
  } else {
    const auto q = trapezoid_weights(m, h);
    auto history_without_current = [&](std::size_t k) {
      const double t = grid.at(k);
      double acc = 0.0;
      for (std::size_t s = 1; s <= m; ++s)
        acc += q[s] * spec.historyWeight(static_cast<double>(s) * h, t) *
               X(static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(s));
      return acc;
    };
    auto full_rate = [&](std::size_t k) {
      const double t = grid.at(k);
      const double b0 = detail::eval_or(spec.historyCoef, t, beta_default);
      return exo[k] + b0 * (history_without_current(k) + q[0] * spec.historyWeight(0.0, t) * X(static_cast<std::ptrdiff_t>(k)));
    };
    out.rate[0] = full_rate(0);
    for (std::size_t k = 0; k + 1 < K; ++k) {
      if (k % m == 0) ++out.intervals;
      const double t1 = grid.at(k + 1);
      const double b0 = detail::eval_or(spec.historyCoef, t1, beta_default);
      const double c = b0 * q[0] * spec.historyWeight(0.0, t1);
      const double known = exo[k + 1] + b0 * history_without_current(k + 1);
      const double xk = X(static_cast<std::ptrdiff_t>(k));
      X(static_cast<std::ptrdiff_t>(k + 1)) = (xk + 0.5 * h * (out.rate[k] + known)) / (1.0 - 0.5 * h * c);
      out.rate[k + 1] = known + c * X(static_cast<std::ptrdiff_t>(k + 1));
    }
  }
  out.state.assign(x.begin() + static_cast<std::ptrdiff_t>(m), x.end());
  detail::require_finite(out.state);
  return out;
}

inline Trajectory solve_steps(const RdedSpec& spec, const std::vector<CovariatePath>& covariates,
                              const TimeGrid& grid) {
  return Trajectory(solve_path(spec, covariates, grid).state);
}

/// Integrating-factor solution for tau0 = 0 without a distributed term:
/// X(t) = e^{B(t)} (g(t0) + int q e^{-B}) with B = int beta0 and q the exogenous rate,
/// both integrals by the composite trapezoid rule on the grid.
inline SolvedPath solve_ode_path(const RdedSpec& spec, const std::vector<CovariatePath>& covariates,
                                 const TimeGrid& grid) {
  if (spec.lagConfig.tau0 != 0 || spec.historyWeight)
    throw Error(ErrorCode::InvalidConfig, "integrating factor needs tau0 = 0 and no distributed history");
  if (!spec.initial) throw Error(ErrorCode::InvalidConfig, "initial function is required");
  detail::check_covariates(spec, covariates, grid);
  const std::size_t K = grid.count;
  const double h = grid.step;
  std::vector<double> beta(K), qv(K), B(K, 0.0), I(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    beta[k] = detail::eval_or(spec.historyCoef, grid.at(k), 0.0);
    qv[k] = detail::exogenous_rate(spec, covariates, grid, k);
  }
  for (std::size_t k = 1; k < K; ++k) B[k] = B[k - 1] + 0.5 * h * (beta[k - 1] + beta[k]);
  for (std::size_t k = 1; k < K; ++k)
    I[k] = I[k - 1] + 0.5 * h * (qv[k - 1] * std::exp(-B[k - 1]) + qv[k] * std::exp(-B[k]));
  const double g0 = spec.initial(grid.at(0));
  SolvedPath out;
  out.intervals = 1;
  out.state.resize(K);
  out.rate.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    out.state[k] = std::exp(B[k]) * (g0 + I[k]);
    out.rate[k] = qv[k] + beta[k] * out.state[k];
  }
  detail::require_finite(out.state);
  return out;
}

inline Trajectory solve_ode(const RdedSpec& spec, const std::vector<CovariatePath>& covariates, const TimeGrid& grid) {
  return Trajectory(solve_ode_path(spec, covariates, grid).state);
}

/// Dispatches to the method of steps or the integrating factor.
inline SolvedPath solve(const RdedSpec& spec, const std::vector<CovariatePath>& covariates, const TimeGrid& grid) {
  if (spec.lagConfig.tau0 == 0 && !spec.historyWeight) return solve_ode_path(spec, covariates, grid);
  return solve_path(spec, covariates, grid);
}

/// Gaussian-kernel smoothed white noise with unit marginal variance, scaled and shifted.
/// correlation is the kernel standard deviation in time units; 0 gives white noise.
struct SmoothNoiseLaw {
  double mean = 0.0;
  double sd = 1.0;
  double correlation = 1.5;

  std::vector<double> draw(std::size_t count, double step, std::mt19937_64& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    if (correlation <= 0.0) {
      std::vector<double> out(count);
      for (auto& v : out) v = mean + sd * normal(rng);
      return out;
    }
    const double c = correlation / step;
    const auto half = static_cast<std::size_t>(std::ceil(4.0 * c));
    std::vector<double> kernel(2 * half + 1);
    double norm2 = 0.0;
    for (std::size_t d = 0; d < kernel.size(); ++d) {
      const double u = (static_cast<double>(d) - static_cast<double>(half)) / c;
      kernel[d] = std::exp(-0.5 * u * u);
      norm2 += kernel[d] * kernel[d];
    }
    const double scale = 1.0 / std::sqrt(norm2);
    std::vector<double> white(count + 2 * half);
    for (auto& v : white) v = normal(rng);
    std::vector<double> out(count);
    for (std::size_t k = 0; k < count; ++k) {
      double acc = 0.0;
      for (std::size_t d = 0; d < kernel.size(); ++d) acc += kernel[d] * white[k + d];
      out[k] = mean + sd * scale * acc;
    }
    return out;
  }
};

/// Random initial function g(t) = level + slope (t - t0) + smooth noise on [t0 - tau0, t0].
struct InitialLaw {
  double levelMean = 0.0;
  double levelSd = 1.0;
  double slopeSd = 0.0;
  SmoothNoiseLaw wiggle{0.0, 0.0, 2.0};
};

struct GeneratorSpec {
  RdedSpec model;  // initial and forcing are drawn per subject
  TimeGrid grid;
  std::size_t subjects = 2;
  std::vector<std::string> covariateNames;
  std::vector<SmoothNoiseLaw> covariateLaws;
  InitialLaw initialLaw;
  SmoothNoiseLaw drift{0.0, 0.0, 2.0};
  double noiseSd = 0.0;
  std::string responseName = "X";
};

/// Per-subject random stream, independent of the number of subjects drawn.
inline std::mt19937_64 subject_stream(std::uint64_t seed, std::size_t subject, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(subject), static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

inline std::string subject_name(std::size_t i) {
  std::string s = std::to_string(i + 1);
  return "S" + std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

/// Draws covariates, initial functions and drift per subject, solves each path and adds
/// i.i.d. N(0, noiseSd^2) observation error to the response. Derivatives of the returned
/// panel hold the exact right-hand side on the grid. Reproducible from `seed`.
inline TrajectoryPanel generate_panel(const GeneratorSpec& gen, std::uint64_t seed) {
  if (gen.subjects < 2) throw Error(ErrorCode::TooFewSubjects, "generator needs at least two subjects");
  const std::size_t J = gen.covariateLaws.size();
  if (gen.covariateNames.size() != J)
    throw Error(ErrorCode::InvalidConfig, "covariate names and laws differ in count");
  if (gen.model.covariateCoefs.size() > J)
    throw Error(ErrorCode::InvalidConfig, "more covariate coefficients than covariates");
  const TimeGrid& grid = gen.grid;
  std::size_t lead = 0;
  for (std::size_t j = 0; j < gen.model.covariateCoefs.size(); ++j) lead = std::max(lead, gen.model.lagConfig.lags.at(j));
  for (const auto& term : gen.model.covariateHistory) lead = std::max(lead, term.horizon);

  TrajectoryPanel panel;
  panel.grid = grid;
  panel.responseName = gen.responseName;
  panel.covariateNames = gen.covariateNames;
  panel.covariates.assign(J, {});
  const std::size_t tau0 = gen.model.lagConfig.tau0;

  for (std::size_t i = 0; i < gen.subjects; ++i) {
    auto cov_rng = subject_stream(seed, i, 1);
    auto init_rng = subject_stream(seed, i, 2);
    auto drift_rng = subject_stream(seed, i, 3);
    auto noise_rng = subject_stream(seed, i, 4);

    std::vector<CovariatePath> paths(J);
    for (std::size_t j = 0; j < J; ++j) {
      paths[j].lead = lead;
      paths[j].values = gen.covariateLaws[j].draw(lead + grid.count, grid.step, cov_rng);
    }

    std::normal_distribution<double> normal(0.0, 1.0);
    const double level = gen.initialLaw.levelMean + gen.initialLaw.levelSd * normal(init_rng);
    const double slope = gen.initialLaw.slopeSd * normal(init_rng);
    const auto wiggle = gen.initialLaw.wiggle.draw(tau0 + 1, grid.step, init_rng);
    const double t0 = grid.at(0);
    const double h = grid.step;
    RdedSpec spec = gen.model;
    spec.initial = [=](double t) {
      const double back = std::round((t0 - t) / h);
      const auto idx = static_cast<std::ptrdiff_t>(tau0) - static_cast<std::ptrdiff_t>(back);
      const double w = idx >= 0 && idx <= static_cast<std::ptrdiff_t>(tau0) ? wiggle[static_cast<std::size_t>(idx)] : 0.0;
      return level + slope * (t - t0) + w;
    };
    spec.forcing = gen.drift.sd > 0.0 ? gen.drift.draw(grid.count, grid.step, drift_rng) : std::vector<double>{};

    const SolvedPath path = solve(spec, paths, grid);
    std::vector<double> y = path.state;
    if (gen.noiseSd > 0.0) {
      std::normal_distribution<double> eps(0.0, gen.noiseSd);
      for (auto& v : y) v += eps(noise_rng);
    }
    panel.subjects.push_back(subject_name(i));
    panel.response.emplace_back(std::move(y));
    panel.derivatives.emplace_back(path.rate);
    for (std::size_t j = 0; j < J; ++j)
      panel.covariates[j].emplace_back(
          std::vector<double>(paths[j].values.begin() + static_cast<std::ptrdiff_t>(lead), paths[j].values.end()));
  }
  return panel;
}

}  // namespace rded
