#pragma once

// Leave-one-subject-out prediction, IMSE metrics, residual processes and the
// comparison of a lagged model against a zero-lag one.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "rded/pipeline.hpp"

namespace rded {

/// Everything held fixed while coefficients are refit: history surface, lags and
/// selected covariates.
struct ModelStructure {
  HistorySurface surface;
  LagConfig lagConfig;
  std::vector<std::size_t> selected;

  IndexRange domain(const TimeGrid& grid) const {
    std::size_t first = surface.timeIndex.first;
    for (auto j : selected) first = std::max(first, lagConfig.lags.at(j));
    if (first >= grid.count) throw Error(ErrorCode::EmptyDomain, "model structure leaves no usable time point");
    return {first, grid.count - 1};
  }
};

inline ModelStructure structure_of(const PipelineResult& r) { return {r.surface, r.lags, r.selection.selected}; }

/// The same selection with every lag zero and the history term replaced by X(t).
inline ModelStructure zero_lag_structure(const TimeGrid& grid, const ModelStructure& lagged) {
  ModelStructure z;
  z.surface = unit_surface(grid);
  z.lagConfig = LagConfig{0, std::vector<std::size_t>(lagged.lagConfig.lags.size(), 0), lagged.lagConfig.searchMax};
  z.selected = lagged.selected;
  return z;
}

struct PredictionReport {
  std::vector<std::string> subjects;
  IndexRange domain;
  std::vector<double> time;
  std::vector<std::vector<double>> observed;   // [subject][time]
  std::vector<std::vector<double>> predicted;  // leave-one-subject-out
  std::vector<std::vector<double>> residuals;
  std::vector<double> perSubjectIMSE;
  double totalIMSE = 0.0;
};

struct LooOptions {
  bool refitSurfacePerFold = false;
  bool strict = false;  // rerun the whole learning pipeline per fold
  PipelineConfig pipeline;
};

/// int_D (a - b)^2 dt as mean squared difference times |D| = size * step.
inline double integrated_squared_error(const std::vector<double>& a, const std::vector<double>& b, double step) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return s * step;
}

namespace detail {

// Coefficients fit without subject `held`, evaluated on subject `held`.
inline std::vector<double> held_out_curve(const TrajectoryPanel& panel, const HistoryPredictor& history,
                                          const ModelStructure& m, std::size_t held, IndexRange domain) {
  ConcurrentTerms terms{&history, m.selected, pick(m.lagConfig.lags, m.selected)};
  const auto n = static_cast<Eigen::Index>(panel.n());
  const auto p = static_cast<Eigen::Index>(terms.columns());
  Matrix X(n - 1, p);
  Vector y(n - 1);
  std::vector<double> row(static_cast<std::size_t>(p)), target(static_cast<std::size_t>(p));
  std::vector<double> out;
  for (std::size_t k = domain.first; k <= domain.last; ++k) {
    Eigen::Index q = 0;
    for (std::size_t i = 0; i < panel.n(); ++i) {
      if (i == held) continue;
      terms.row(panel, i, k, row.data());
      for (Eigen::Index c = 0; c < p; ++c) X(q, c) = row[static_cast<std::size_t>(c)];
      y(q++) = panel.derivatives[i].values[k];
    }
    Vector b;
    try {
      b = solve_ols(X, y);
    } catch (const Error& e) {
      throw Error(e.code(), "t=" + std::to_string(panel.grid.at(k)) + ": " + e.message());
    }
    terms.row(panel, held, k, target.data());
    double v = 0.0;
    for (Eigen::Index c = 0; c < p; ++c) v += b(c) * target[static_cast<std::size_t>(c)];
    out.push_back(v);
  }
  return out;
}

inline void finish_report(PredictionReport& rep, double step) {
  double total = 0.0;
  for (std::size_t i = 0; i < rep.subjects.size(); ++i) {
    std::vector<double> r(rep.observed[i].size());
    for (std::size_t c = 0; c < r.size(); ++c) r[c] = rep.observed[i][c] - rep.predicted[i][c];
    rep.residuals.push_back(std::move(r));
    rep.perSubjectIMSE.push_back(integrated_squared_error(rep.observed[i], rep.predicted[i], step));
    total += rep.perSubjectIMSE.back();
  }
  rep.totalIMSE = rep.subjects.empty() ? 0.0 : total / static_cast<double>(rep.subjects.size());
}

}  // namespace detail

/// Leave-one-subject-out prediction of every derivative curve. By default the structure
/// is fixed and only per-timepoint coefficients are refit without subject i; the options
/// refit the surface, or the whole pipeline, per fold. `domain` defaults to the
/// structure's fit domain.
inline PredictionReport loo_predict(const TrajectoryPanel& panel, const ModelStructure& model,
                                    const LooOptions& opt = {}, std::optional<IndexRange> domain = std::nullopt) {
  if (panel.n() < 3) throw Error(ErrorCode::TooFewSubjects, "leave-one-out prediction needs n >= 3");
  if (!panel.has_derivatives()) throw Error(ErrorCode::InvalidConfig, "derivatives have not been estimated");
  const IndexRange dom = domain ? *domain : model.domain(panel.grid);
  if (dom.first < model.domain(panel.grid).first || dom.last >= panel.grid.count)
    throw Error(ErrorCode::EmptyDomain, "prediction domain outside the model's fit domain");

  PredictionReport rep;
  rep.subjects = panel.subjects;

  // Strict folds may learn longer lags; the report then starts where every fold predicts.
  std::vector<ModelStructure> folds;
  IndexRange use = dom;
  if (opt.strict) {
    for (std::size_t i = 0; i < panel.n(); ++i) {
      folds.push_back(structure_of(learn_prepared(without_subject(panel, i), opt.pipeline)));
      use.first = std::max(use.first, folds.back().domain(panel.grid).first);
    }
  }
  rep.domain = use;
  for (std::size_t k = use.first; k <= use.last; ++k) rep.time.push_back(panel.grid.at(k));
  for (std::size_t i = 0; i < panel.n(); ++i)
    rep.observed.emplace_back(panel.derivatives[i].values.begin() + static_cast<std::ptrdiff_t>(use.first),
                              panel.derivatives[i].values.begin() + static_cast<std::ptrdiff_t>(use.last + 1));

  if (opt.strict) {
    for (std::size_t i = 0; i < panel.n(); ++i) {
      const HistoryPredictor h = history_integral(panel, folds[i].surface);
      rep.predicted.push_back(detail::held_out_curve(panel, h, folds[i], i, use));
    }
  } else if (opt.refitSurfacePerFold) {
    const std::size_t tau0 = model.surface.lags() - 1;
    for (std::size_t i = 0; i < panel.n(); ++i) {
      ModelStructure fold = model;
      fold.surface = estimate_history_surface(without_subject(panel, i), tau0, opt.pipeline.surface);
      const HistoryPredictor h = history_integral(panel, fold.surface);
      rep.predicted.push_back(detail::held_out_curve(panel, h, fold, i, dom));
    }
  } else {
    const HistoryPredictor h = history_integral(panel, model.surface);
    for (std::size_t i = 0; i < panel.n(); ++i) rep.predicted.push_back(detail::held_out_curve(panel, h, model, i, dom));
  }
  detail::finish_report(rep, panel.grid.step);
  return rep;
}

struct ComparisonReport {
  IndexRange domain;
  PredictionReport lagged;
  PredictionReport zeroLag;
  std::vector<double> perSubjectRatio;
  double ratio = 1.0;  // total lagged IMSE / total zero-lag IMSE
};

/// Leave-one-out comparison of two structures on the intersection of their fit domains.
inline ComparisonReport compare_models(const TrajectoryPanel& panel, const ModelStructure& lagged,
                                       const ModelStructure& zeroLag, const LooOptions& opt = {}) {
  const IndexRange a = lagged.domain(panel.grid), b = zeroLag.domain(panel.grid);
  ComparisonReport out;
  out.domain = {std::max(a.first, b.first), panel.grid.count - 1};
  out.lagged = loo_predict(panel, lagged, opt, out.domain);
  out.zeroLag = loo_predict(panel, zeroLag, opt, out.domain);
  for (std::size_t i = 0; i < panel.n(); ++i)
    out.perSubjectRatio.push_back(out.lagged.perSubjectIMSE[i] / out.zeroLag.perSubjectIMSE[i]);
  out.ratio = out.lagged.totalIMSE / out.zeroLag.totalIMSE;
  return out;
}

struct ResidualReport {
  IndexRange domain;
  std::vector<double> time;
  std::vector<std::vector<double>> residuals;  // [subject][time]
  std::vector<double> volatility;              // sample standard deviation over time
};

/// Z_i(t) = X'_i(t) - Xhat'_i(t) on the fit domain using the raw per-timepoint coefficients.
inline ResidualReport residual_processes(const FittedRded& fit, const TrajectoryPanel& panel) {
  if (fit.time.empty()) throw Error(ErrorCode::EmptyDomain, "fit has no time points");
  const HistoryPredictor h = history_integral(panel, fit.surface);
  ResidualReport rep;
  rep.domain = fit.fitDomain;
  rep.time = fit.time;
  for (std::size_t i = 0; i < panel.n(); ++i) {
    std::vector<double> r;
    for (std::size_t k = fit.fitDomain.first; k <= fit.fitDomain.last; ++k)
      r.push_back(panel.derivatives[i].values[k] - predict_derivative(fit, panel, h, i, k));
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(r.size());
    double ss = 0.0;
    for (double v : r) ss += (v - mean) * (v - mean);
    rep.volatility.push_back(r.size() > 1 ? std::sqrt(ss / static_cast<double>(r.size() - 1)) : 0.0);
    rep.residuals.push_back(std::move(r));
  }
  return rep;
}

}  // namespace rded
