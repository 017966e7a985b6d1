#pragma once

// Learning an RDED from a panel: history-index surface, initial lags, LASSO
// variable selection with a majority vote over time points, lag backfitting and
// the final concurrent fit.

#include <chrono>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rded/core.hpp"
#include "rded/regression.hpp"
#include "rded/smoothing.hpp"

namespace rded {

struct SurfaceOptions {
  SurfaceBandwidth bandwidth;
  std::optional<double> ridge;  // relative ridge; empty means GCV per time point
};

/// Unsmoothed gamma(s, t_k) from a scalar-on-function regression of X'(t_k) on the
/// history X(t_k - s), s in [0, tau0], at every usable time point.
inline HistorySurface raw_history_surface(const TrajectoryPanel& panel, std::size_t tau0,
                                          const SurfaceOptions& opt = {}) {
  if (!panel.has_derivatives()) throw Error(ErrorCode::InvalidConfig, "derivatives have not been estimated");
  const IndexRange dom = fit_domain(panel.grid, LagConfig{tau0, {}, tau0});
  HistorySurface raw = make_surface(panel.grid, tau0, dom);
  const auto q = trapezoid_weights(tau0, panel.grid.step);
  const auto n = static_cast<Eigen::Index>(panel.n());
  Matrix hist(n, static_cast<Eigen::Index>(tau0 + 1));
  Vector y(n);
  for (std::size_t k = dom.first; k <= dom.last; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (std::size_t s = 0; s <= tau0; ++s) hist(i, static_cast<Eigen::Index>(s)) = panel.response[i].values[k - s];
      y(i) = panel.derivatives[i].values[k];
    }
    const FlmFit f = solve_flm(hist, y, q, opt.ridge);
    for (std::size_t s = 0; s <= tau0; ++s) raw(s, k - dom.first) = f.gamma[s];
  }
  return raw;
}

/// Smoothed history-index surface gamma(s, t).
inline HistorySurface estimate_history_surface(const TrajectoryPanel& panel, std::size_t tau0,
                                               const SurfaceOptions& opt = {}) {
  return smooth_surface(raw_history_surface(panel, tau0, opt), opt.bandwidth, panel.grid.step);
}

/// Surface of ones at s = 0: the history predictor becomes X(t) itself.
inline HistorySurface unit_surface(const TimeGrid& grid) {
  HistorySurface s = make_surface(grid, 0, IndexRange{0, grid.count - 1});
  std::fill(s.weights.begin(), s.weights.end(), 1.0);
  return s;
}

/// Per-subject history predictor H_i(t_k) on the surface's time range.
struct HistoryPredictor {
  IndexRange domain;
  std::vector<std::vector<double>> values;  // [subject][k - domain.first]

  double at(std::size_t i, std::size_t k) const { return values[i][k - domain.first]; }
};

/// H_i(t) = int_0^tau0 gamma(s, t) X_i(t - s) ds by the trapezoid rule (point
/// evaluation gamma(0, t) X_i(t) when tau0 = 0).
inline HistoryPredictor history_integral(const TrajectoryPanel& panel, const HistorySurface& surface) {
  if (surface.times() == 0) throw Error(ErrorCode::EmptyDomain, "history surface has no time points");
  const std::size_t tau0 = surface.lags() - 1;
  const auto q = trapezoid_weights(tau0, panel.grid.step);
  HistoryPredictor out;
  out.domain = surface.timeIndex;
  if (out.domain.first < tau0 || out.domain.last >= panel.grid.count)
    throw Error(ErrorCode::EmptyDomain, "surface time range does not fit the panel grid");
  out.values.assign(panel.n(), std::vector<double>(surface.times(), 0.0));
  for (std::size_t i = 0; i < panel.n(); ++i) {
    const auto& x = panel.response[i].values;
    for (std::size_t c = 0; c < surface.times(); ++c) {
      const std::size_t k = out.domain.first + c;
      double acc = 0.0;
      for (std::size_t s = 0; s <= tau0; ++s) acc += q[s] * surface(s, c) * x[k - s];
      out.values[i][c] = acc;
    }
  }
  return out;
}

/// Which predictors enter the per-timepoint concurrent regression.
struct ConcurrentTerms {
  const HistoryPredictor* history = nullptr;  // null: no history term
  std::vector<std::size_t> covariates;        // panel covariate indices
  std::vector<std::size_t> lags;              // one per entry of covariates

  std::size_t columns() const { return 1 + (history ? 1 : 0) + covariates.size(); }

  /// Smallest grid index at which every predictor exists.
  std::size_t first_index() const {
    std::size_t f = history ? history->domain.first : 0;
    for (auto l : lags) f = std::max(f, l);
    return f;
  }

  void row(const TrajectoryPanel& panel, std::size_t i, std::size_t k, double* out) const {
    std::size_t c = 0;
    out[c++] = 1.0;
    if (history) out[c++] = history->at(i, k);
    for (std::size_t q = 0; q < covariates.size(); ++q) out[c++] = panel.covariates[covariates[q]][i].values[k - lags[q]];
  }

  Matrix design(const TrajectoryPanel& panel, std::size_t k) const {
    Matrix X(static_cast<Eigen::Index>(panel.n()), static_cast<Eigen::Index>(columns()));
    std::vector<double> r(columns());
    for (std::size_t i = 0; i < panel.n(); ++i) {
      row(panel, i, k, r.data());
      for (std::size_t c = 0; c < r.size(); ++c) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = r[c];
    }
    return X;
  }
};

inline Vector derivative_column(const TrajectoryPanel& panel, std::size_t k) {
  Vector y(static_cast<Eigen::Index>(panel.n()));
  for (std::size_t i = 0; i < panel.n(); ++i) y(static_cast<Eigen::Index>(i)) = panel.derivatives[i].values[k];
  return y;
}

/// Leave-one-subject-out integrated squared prediction error
/// (1/n) sum_i int_D (X'_i - Xhat'_{i,-i})^2 dt, with the integral taken as the mean over
/// the grid points of D times |D| = size * step.
inline double loo_imse(const TrajectoryPanel& panel, const ConcurrentTerms& terms, IndexRange domain) {
  if (domain.first < terms.first_index())
    throw Error(ErrorCode::EmptyDomain, "criterion domain starts before all predictors exist");
  double total = 0.0;
  for (std::size_t k = domain.first; k <= domain.last; ++k) {
    const Vector y = derivative_column(panel, k);
    OlsLoo fit;
    try {
      fit = ols_with_loo(terms.design(panel, k), y);
    } catch (const Error& e) {
      throw Error(e.code(), "time index " + std::to_string(k) + ": " + e.message());
    }
    total += (y - fit.looPrediction).squaredNorm();
  }
  const double n = static_cast<double>(panel.n());
  const double len = static_cast<double>(domain.size());
  return total / (n * len) * len * panel.grid.step;
}

/// Criterion domain shared by every candidate lag: all candidates in {0..searchMax}
/// and the history window are available on it.
inline IndexRange comparison_domain(const TimeGrid& grid, std::size_t searchMax, std::size_t tau0 = 0) {
  return fit_domain(grid, LagConfig{std::max(searchMax, tau0), {}, std::max(searchMax, tau0)});
}

struct LagSearch {
  std::size_t lag = 0;
  std::vector<double> criterion;  // indexed by candidate lag
};

/// Lag of covariate j minimizing the leave-one-out error of the single-predictor
/// concurrent model X'(t) = a(t) + b(t) U_j(t - tau); smallest lag on ties.
inline LagSearch initial_lag_selection(const TrajectoryPanel& panel, std::size_t j, std::size_t searchMax) {
  if (!panel.has_derivatives()) throw Error(ErrorCode::InvalidConfig, "derivatives have not been estimated");
  const IndexRange dom = comparison_domain(panel.grid, searchMax);
  LagSearch out;
  for (std::size_t tau = 0; tau <= searchMax; ++tau) {
    ConcurrentTerms terms{nullptr, {j}, {tau}};
    // (1/nK) sum_i sum_k of squared LOO errors.
    out.criterion.push_back(loo_imse(panel, terms, dom) / (static_cast<double>(dom.size()) * panel.grid.step));
    if (out.criterion.back() < out.criterion[out.lag]) out.lag = tau;
  }
  return out;
}

struct SelectionReport {
  std::vector<double> proportions;  // p_j per covariate
  double threshold = 0.3;
  std::vector<std::size_t> selected;
  IndexRange domain;
  std::vector<std::vector<bool>> perTimeActive;  // [covariate][time index - domain.first]
  std::vector<bool> historyActive;
  std::vector<double> lambdas;                   // LOO-chosen lambda per time point
  std::vector<std::pair<double, double>> thresholdCriterion;  // (p*, LOO-IMSE) when cross-validated
};

/// Covariates whose activity proportion reaches the threshold.
inline std::vector<std::size_t> threshold_selection(const std::vector<double>& proportions, double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < proportions.size(); ++j)
    if (proportions[j] >= threshold) out.push_back(j);
  return out;
}

inline std::vector<std::size_t> pick(const std::vector<std::size_t>& values, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out;
  for (auto j : idx) out.push_back(values[j]);
  return out;
}

/// Per time point LASSO of X' on (H, U_1(t - tau_1), ..., U_J(t - tau_J)) with
/// leave-one-out lambda; p_j is the fraction of time points where U_j is active.
/// Without a threshold, p* is chosen from {0.1, ..., 0.9} by the leave-one-out error of
/// the resulting concurrent fit (smallest p* on ties).
inline SelectionReport select_variables(const TrajectoryPanel& panel, const HistoryPredictor& history,
                                        const std::vector<std::size_t>& initialLags,
                                        std::optional<double> pStar = 0.3, std::size_t searchMax = 21) {
  const std::size_t J = panel.J();
  if (initialLags.size() != J) throw Error(ErrorCode::InvalidConfig, "one initial lag per covariate is required");
  std::vector<std::size_t> all(J);
  for (std::size_t j = 0; j < J; ++j) all[j] = j;
  ConcurrentTerms terms{&history, all, initialLags};
  const IndexRange dom{terms.first_index(), panel.grid.count - 1};
  if (dom.first > dom.last) throw Error(ErrorCode::EmptyDomain, "no time point for selection");

  SelectionReport rep;
  rep.domain = dom;
  rep.perTimeActive.assign(J, std::vector<bool>(dom.size(), false));
  rep.historyActive.assign(dom.size(), false);
  std::vector<std::size_t> counts(J, 0);
  for (std::size_t k = dom.first; k <= dom.last; ++k) {
    const Matrix full = terms.design(panel, k);
    const Matrix X = full.rightCols(full.cols() - 1);  // intercept is implicit
    LassoCvResult cv;
    try {
      cv = lasso_path_cv({X, derivative_column(panel, k), {}});
    } catch (const Error& e) {
      throw Error(e.code(), "time index " + std::to_string(k) + ": " + e.message());
    }
    rep.lambdas.push_back(cv.lambda);
    rep.historyActive[k - dom.first] = cv.fit.coef(0) != 0.0;
    for (std::size_t j = 0; j < J; ++j) {
      const bool active = cv.fit.coef(static_cast<Eigen::Index>(j + 1)) != 0.0;
      rep.perTimeActive[j][k - dom.first] = active;
      counts[j] += active ? 1 : 0;
    }
  }
  for (std::size_t j = 0; j < J; ++j)
    rep.proportions.push_back(static_cast<double>(counts[j]) / static_cast<double>(dom.size()));

  if (pStar) {
    rep.threshold = *pStar;
  } else {
    const IndexRange cmp = comparison_domain(panel.grid, searchMax, history.domain.first);
    double best = std::numeric_limits<double>::infinity();
    for (int step = 1; step <= 9; ++step) {
      const double p = 0.1 * step;
      const auto sel = threshold_selection(rep.proportions, p);
      const double crit = loo_imse(panel, ConcurrentTerms{&history, sel, pick(initialLags, sel)}, cmp);
      rep.thresholdCriterion.emplace_back(p, crit);
      if (crit < best) {
        best = crit;
        rep.threshold = p;
      }
    }
  }
  rep.selected = threshold_selection(rep.proportions, rep.threshold);
  return rep;
}

struct BackfitStep {
  std::size_t cycle = 0;
  std::size_t covariate = 0;
  std::vector<std::size_t> lags;  // lag vector of the selected covariates after the update
  std::vector<double> criterion;  // LOO-IMSE per candidate lag of this covariate
  double before = 0.0;
  double after = 0.0;
};

struct BackfitTrace {
  std::vector<BackfitStep> iterations;
  bool converged = false;
  std::size_t cycles = 0;
};

/// Coordinate-wise lag updates for the selected covariates: each update grid-searches one
/// lag over {0..searchMax} with the others fixed and keeps the LOO-IMSE argmin (smallest
/// lag on ties). Stops after a cycle without change or at cycleCap.
inline std::pair<LagConfig, BackfitTrace> backfit_lags(const TrajectoryPanel& panel, const HistoryPredictor& history,
                                                       const std::vector<std::size_t>& selected,
                                                       const std::vector<std::size_t>& initialLags,
                                                       std::size_t searchMax = 21, std::size_t cycleCap = 10) {
  const std::size_t tau0 = history.domain.first;
  LagConfig cfg{tau0, initialLags, searchMax};
  BackfitTrace trace;
  if (selected.empty() || cycleCap == 0) return {cfg, trace};
  const IndexRange dom = comparison_domain(panel.grid, searchMax, tau0);
  std::vector<std::size_t> lags = pick(initialLags, selected);

  for (std::size_t cycle = 1; cycle <= cycleCap; ++cycle) {
    trace.cycles = cycle;
    bool changed = false;
    for (std::size_t q = 0; q < selected.size(); ++q) {
      BackfitStep st;
      st.cycle = cycle;
      st.covariate = selected[q];
      std::size_t best = 0;
      for (std::size_t tau = 0; tau <= searchMax; ++tau) {
        auto trial = lags;
        trial[q] = tau;
        st.criterion.push_back(loo_imse(panel, ConcurrentTerms{&history, selected, trial}, dom));
        if (st.criterion.back() < st.criterion[best]) best = tau;
      }
      st.before = st.criterion[lags[q]];
      st.after = st.criterion[best];
      if (best != lags[q]) changed = true;
      lags[q] = best;
      st.lags = lags;
      trace.iterations.push_back(std::move(st));
    }
    if (!changed) {
      trace.converged = true;
      break;
    }
  }
  for (std::size_t q = 0; q < selected.size(); ++q) cfg.lags[selected[q]] = lags[q];
  return {cfg, trace};
}

/// Per time point OLS of X' on (1, H, U_j(t - tau_j) for selected j) over the fit domain of
/// the history window and the selected lags. Raw curves are kept; reported curves are
/// smoothed with `coefKernel`.
inline FittedRded fit_concurrent(const TrajectoryPanel& panel, const HistorySurface& surface,
                                 const LagConfig& lagConfig, const std::vector<std::size_t>& selected,
                                 const KernelSpec& coefKernel = epanechnikov(20.0)) {
  const HistoryPredictor history = history_integral(panel, surface);
  ConcurrentTerms terms{&history, selected, pick(lagConfig.lags, selected)};
  const IndexRange dom{terms.first_index(), panel.grid.count - 1};
  if (dom.first > dom.last) throw Error(ErrorCode::EmptyDomain, "no usable time point for the final fit");

  FittedRded fit;
  fit.fitDomain = dom;
  fit.surface = surface;
  fit.lagConfig = lagConfig;
  fit.selected = selected;
  for (auto j : selected) fit.selectedNames.push_back(panel.covariateNames[j]);
  fit.rawCovariateCoefs.assign(selected.size(), {});
  fit.residuals.assign(panel.n(), {});
  for (std::size_t k = dom.first; k <= dom.last; ++k) {
    const Matrix X = terms.design(panel, k);
    const Vector y = derivative_column(panel, k);
    Vector b;
    try {
      b = solve_ols(X, y);
    } catch (const Error& e) {
      throw Error(e.code(), "t=" + std::to_string(panel.grid.at(k)) + ": " + e.message());
    }
    fit.time.push_back(panel.grid.at(k));
    fit.rawIntercept.push_back(b(0));
    fit.rawHistoryCoef.push_back(b(1));
    for (std::size_t q = 0; q < selected.size(); ++q) fit.rawCovariateCoefs[q].push_back(b(static_cast<Eigen::Index>(q + 2)));
    const Vector r = y - X * b;
    for (std::size_t i = 0; i < panel.n(); ++i) fit.residuals[i].push_back(r(static_cast<Eigen::Index>(i)));
  }
  return smooth_coefficients(std::move(fit), coefKernel);
}

/// In-sample prediction of subject i's derivative at grid index k from raw coefficients.
inline double predict_derivative(const FittedRded& fit, const TrajectoryPanel& panel, const HistoryPredictor& history,
                                 std::size_t i, std::size_t k) {
  const std::size_t c = k - fit.fitDomain.first;
  double v = fit.rawIntercept[c] + fit.rawHistoryCoef[c] * history.at(i, k);
  for (std::size_t q = 0; q < fit.selected.size(); ++q) {
    const std::size_t j = fit.selected[q];
    v += fit.rawCovariateCoefs[q][c] * panel.covariates[j][i].values[k - fit.lagConfig.lags[j]];
  }
  return v;
}

struct PipelineConfig {
  std::size_t tau0 = 14;
  std::size_t searchMax = 21;
  std::optional<double> pStar = 0.3;  // empty: cross-validated
  double dataBandwidth = 1.5;         // Gaussian local linear presmoothing, days
  double coefBandwidth = 20.0;        // Epanechnikov coefficient smoothing, days
  std::optional<double> derivativeBandwidth;  // empty: cross-validated per trajectory
  SurfaceOptions surface;
  std::size_t cycleCap = 10;
  bool smoothInputs = true;
  bool estimateDerivatives = true;
};

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct PipelineResult {
  TrajectoryPanel prepared;  // canonical subject order, smoothed, with derivatives
  HistorySurface rawSurface;
  HistorySurface surface;
  std::vector<LagSearch> initialLags;
  SelectionReport selection;
  LagConfig lags;
  BackfitTrace backfit;
  FittedRded fit;
  std::vector<StageTiming> timings;

  std::vector<std::size_t> initial_lag_vector() const {
    std::vector<std::size_t> v;
    for (const auto& s : initialLags) v.push_back(s.lag);
    return v;
  }
};

class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.code(), "[" + stage + "] " + cause.message()), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

template <typename F>
auto timed_stage(std::vector<StageTiming>& timings, const std::string& name, F&& f) {
  const auto start = std::chrono::steady_clock::now();
  auto record = [&] {
    timings.push_back({name, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()});
  };
  try {
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      record();
    } else {
      auto r = f();
      record();
      return r;
    }
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

/// Given a prepared panel (derivatives present), runs surface estimation, initial lags,
/// selection, backfitting and the final fit.
inline PipelineResult learn_prepared(TrajectoryPanel prepared, const PipelineConfig& cfg,
                                     std::vector<StageTiming> timings = {}) {
  PipelineResult res;
  res.timings = std::move(timings);
  res.prepared = std::move(prepared);
  const auto& panel = res.prepared;
  timed_stage(res.timings, "validate", [&] {
    validate_panel(panel);
    (void)fit_domain(panel.grid, LagConfig{std::max(cfg.tau0, cfg.searchMax), {}, cfg.searchMax});
  });
  res.rawSurface = timed_stage(res.timings, "history_surface", [&] {
    return raw_history_surface(panel, cfg.tau0, cfg.surface);
  });
  res.surface = timed_stage(res.timings, "surface_smoothing", [&] {
    return smooth_surface(res.rawSurface, cfg.surface.bandwidth, panel.grid.step);
  });
  const HistoryPredictor history = timed_stage(res.timings, "history_integral", [&] {
    return history_integral(panel, res.surface);
  });
  res.initialLags = timed_stage(res.timings, "initial_lags", [&] {
    std::vector<LagSearch> out;
    for (std::size_t j = 0; j < panel.J(); ++j) out.push_back(initial_lag_selection(panel, j, cfg.searchMax));
    return out;
  });
  const auto initial = res.initial_lag_vector();
  res.selection = timed_stage(res.timings, "variable_selection", [&] {
    return select_variables(panel, history, initial, cfg.pStar, cfg.searchMax);
  });
  auto [lags, trace] = timed_stage(res.timings, "backfitting", [&] {
    return backfit_lags(panel, history, res.selection.selected, initial, cfg.searchMax, cfg.cycleCap);
  });
  res.lags = lags;
  res.backfit = trace;
  res.fit = timed_stage(res.timings, "final_fit", [&] {
    return fit_concurrent(panel, res.surface, res.lags, res.selection.selected, epanechnikov(cfg.coefBandwidth));
  });
  return res;
}

/// Prepares the panel (canonical order, presmoothing with imputation, derivatives).
inline TrajectoryPanel prepare_panel(const TrajectoryPanel& input, const PipelineConfig& cfg,
                                     std::vector<StageTiming>* timings = nullptr) {
  std::vector<StageTiming> local;
  auto& tm = timings ? *timings : local;
  TrajectoryPanel panel = timed_stage(tm, "canonical_order", [&] { return canonical_order(validate_panel(input)); });
  if (cfg.smoothInputs)
    panel = timed_stage(tm, "presmoothing", [&] { return smooth_panel(std::move(panel), gaussian(cfg.dataBandwidth)); });
  if (cfg.estimateDerivatives)
    panel = timed_stage(tm, "derivatives", [&] {
      return estimate_derivatives(std::move(panel), DerivativeOptions{KernelFamily::Epanechnikov, cfg.derivativeBandwidth});
    });
  return panel;
}

/// Full learning pipeline from an observed panel.
inline PipelineResult learn_rded(const TrajectoryPanel& input, const PipelineConfig& cfg = {}) {
  std::vector<StageTiming> timings;
  TrajectoryPanel panel = prepare_panel(input, cfg, &timings);
  return learn_prepared(std::move(panel), cfg, std::move(timings));
}

}  // namespace rded
