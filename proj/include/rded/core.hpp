#pragma once

// Domain types shared by every stage: observation grid, trajectories,
// panels of subjects, lag configuration, history surfaces and fitted models.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rded {

enum class ErrorCode {
  GridMismatch,
  NonFinite,
  TooFewSubjects,
  EmptyDomain,
  SingularDesign,
  DomainUnderflow,
  RankDeficient,
  NoConvergence,
  ParseError,
  IrregularGrid,
  DuplicateRow,
  InvalidConfig,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::TooFewSubjects: return "TooFewSubjects";
    case ErrorCode::EmptyDomain: return "EmptyDomain";
    case ErrorCode::SingularDesign: return "SingularDesign";
    case ErrorCode::DomainUnderflow: return "DomainUnderflow";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::IrregularGrid: return "IrregularGrid";
    case ErrorCode::DuplicateRow: return "DuplicateRow";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), message_(what) {}
  ErrorCode code() const noexcept { return code_; }
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

/// Equidistant observation grid t_k = start + k * step, k = 0..count-1.
struct TimeGrid {
  double start = 0.0;
  double step = 1.0;
  std::size_t count = 0;

  double at(std::size_t k) const { return start + static_cast<double>(k) * step; }
  double end() const { return count == 0 ? start : at(count - 1); }
  std::vector<double> points() const {
    std::vector<double> t(count);
    for (std::size_t k = 0; k < count; ++k) t[k] = at(k);
    return t;
  }
  bool operator==(const TimeGrid&) const = default;
};

/// Values of one process on the panel grid. An empty mask means fully observed;
/// otherwise mask[k] == true marks a missing raw observation.
struct Trajectory {
  std::vector<double> values;
  std::vector<bool> mask;

  Trajectory() = default;
  explicit Trajectory(std::vector<double> v) : values(std::move(v)) {}
  Trajectory(std::vector<double> v, std::vector<bool> m) : values(std::move(v)), mask(std::move(m)) {}

  std::size_t size() const { return values.size(); }
  bool missing(std::size_t k) const { return !mask.empty() && mask[k]; }
  bool has_missing() const { return std::find(mask.begin(), mask.end(), true) != mask.end(); }
  double operator[](std::size_t k) const { return values[k]; }
  bool operator==(const Trajectory&) const = default;
};

/// n subjects, one response process X and J covariate processes U_j, all on one grid.
/// covariates[j][i] is covariate j of subject i. derivatives is empty until estimated.
struct TrajectoryPanel {
  TimeGrid grid;
  std::vector<std::string> subjects;
  std::string responseName = "X";
  std::vector<Trajectory> response;
  std::vector<Trajectory> derivatives;
  std::vector<std::string> covariateNames;
  std::vector<std::vector<Trajectory>> covariates;

  std::size_t n() const { return subjects.size(); }
  std::size_t J() const { return covariateNames.size(); }
  std::size_t K() const { return grid.count; }
  bool has_derivatives() const { return derivatives.size() == subjects.size() && !subjects.empty(); }

  /// Index of a covariate by name; throws InvalidConfig if absent.
  std::size_t covariate_index(const std::string& name) const {
    for (std::size_t j = 0; j < covariateNames.size(); ++j)
      if (covariateNames[j] == name) return j;
    throw Error(ErrorCode::InvalidConfig, "unknown covariate '" + name + "'");
  }

  bool operator==(const TrajectoryPanel&) const = default;
};

/// Panel restricted to a subset of subjects, in the given order.
inline TrajectoryPanel subset_subjects(const TrajectoryPanel& panel, const std::vector<std::size_t>& keep) {
  TrajectoryPanel out;
  out.grid = panel.grid;
  out.responseName = panel.responseName;
  out.covariateNames = panel.covariateNames;
  out.covariates.resize(panel.J());
  for (std::size_t i : keep) {
    out.subjects.push_back(panel.subjects[i]);
    out.response.push_back(panel.response[i]);
    if (panel.has_derivatives()) out.derivatives.push_back(panel.derivatives[i]);
    for (std::size_t j = 0; j < panel.J(); ++j) out.covariates[j].push_back(panel.covariates[j][i]);
  }
  return out;
}

/// Panel with subject `drop` removed.
inline TrajectoryPanel without_subject(const TrajectoryPanel& panel, std::size_t drop) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < panel.n(); ++i)
    if (i != drop) keep.push_back(i);
  return subset_subjects(panel, keep);
}

/// Panel with subjects sorted by identifier. Every learning stage works on this
/// canonical order so results do not depend on input row order.
inline TrajectoryPanel canonical_order(const TrajectoryPanel& panel) {
  std::vector<std::size_t> order(panel.n());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return panel.subjects[a] < panel.subjects[b]; });
  return subset_subjects(panel, order);
}

/// Distributed-delay horizon tau0 and per-covariate discrete lags, in grid steps.
struct LagConfig {
  std::size_t tau0 = 0;
  std::vector<std::size_t> lags;
  std::size_t searchMax = 21;

  std::size_t max_lag() const {
    std::size_t m = tau0;
    for (auto l : lags) m = std::max(m, l);
    return m;
  }
  bool operator==(const LagConfig&) const = default;
};

/// Contiguous 0-based index range [first, last] on a grid.
struct IndexRange {
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t size() const { return last - first + 1; }
  bool contains(std::size_t k) const { return k >= first && k <= last; }
  bool operator==(const IndexRange&) const = default;
};

/// Grid indices at which the full history window and every lagged value exist.
inline IndexRange fit_domain(const TimeGrid& grid, const LagConfig& lags) {
  const std::size_t m = lags.max_lag();
  if (grid.count == 0 || m >= grid.count) {
    std::ostringstream os;
    os << "no usable grid point: max lag " << m << " with K=" << grid.count;
    throw Error(ErrorCode::EmptyDomain, os.str());
  }
  return {m, grid.count - 1};
}

/// Distributed-delay weight gamma(s, t): rows follow the lag axis s = 0..tau0 (in grid
/// steps), columns follow the usable time points.
struct HistorySurface {
  std::vector<double> lagAxis;   // s values in time units
  std::vector<double> timeAxis;  // t values in time units
  IndexRange timeIndex;          // grid indices of timeAxis
  std::vector<double> weights;   // row-major, lagAxis.size() x timeAxis.size()

  std::size_t lags() const { return lagAxis.size(); }
  std::size_t times() const { return timeAxis.size(); }
  double operator()(std::size_t s, std::size_t c) const { return weights[s * timeAxis.size() + c]; }
  double& operator()(std::size_t s, std::size_t c) { return weights[s * timeAxis.size() + c]; }
  bool operator==(const HistorySurface&) const = default;
};

inline HistorySurface make_surface(const TimeGrid& grid, std::size_t tau0, IndexRange columns) {
  HistorySurface out;
  for (std::size_t s = 0; s <= tau0; ++s) out.lagAxis.push_back(static_cast<double>(s) * grid.step);
  for (std::size_t k = columns.first; k <= columns.last; ++k) out.timeAxis.push_back(grid.at(k));
  out.timeIndex = columns;
  out.weights.assign(out.lagAxis.size() * out.timeAxis.size(), 0.0);
  return out;
}

/// A learned model. Coefficient curves are indexed by position in fitDomain.
/// `selected` holds covariate indices into the panel; covariateCoefs follows that order.
struct FittedRded {
  IndexRange fitDomain;
  std::vector<double> time;
  std::vector<double> intercept;
  std::vector<double> historyCoef;
  std::vector<std::vector<double>> covariateCoefs;
  std::vector<double> rawIntercept;
  std::vector<double> rawHistoryCoef;
  std::vector<std::vector<double>> rawCovariateCoefs;
  HistorySurface surface;
  LagConfig lagConfig;
  std::vector<std::size_t> selected;
  std::vector<std::string> selectedNames;
  std::vector<std::vector<double>> residuals;  // per subject, over fitDomain
};

struct Violation {
  ErrorCode code;
  std::string detail;
};

/// Every invariant violation of a panel; empty when the panel is valid.
inline std::vector<Violation> check_panel(const TrajectoryPanel& panel) {
  std::vector<Violation> out;
  const std::size_t K = panel.grid.count;
  if (panel.n() < 2)
    out.push_back({ErrorCode::TooFewSubjects, "panel has " + std::to_string(panel.n()) + " subject(s)"});
  if (!(panel.grid.step > 0.0) || K == 0)
    out.push_back({ErrorCode::GridMismatch, "grid must have positive step and count"});

  auto check = [&](const Trajectory& tr, const std::string& what) {
    if (tr.values.size() != K) {
      out.push_back({ErrorCode::GridMismatch,
                     what + " has " + std::to_string(tr.values.size()) + " values, grid has " + std::to_string(K)});
      return;
    }
    if (!tr.mask.empty() && tr.mask.size() != K) {
      out.push_back({ErrorCode::GridMismatch, what + " mask length differs from grid"});
      return;
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (!tr.missing(k) && !std::isfinite(tr.values[k])) {
        out.push_back({ErrorCode::NonFinite, what + " at index " + std::to_string(k)});
        break;
      }
    }
  };

  if (panel.response.size() != panel.n())
    out.push_back({ErrorCode::GridMismatch, "response count differs from subject count"});
  for (std::size_t i = 0; i < panel.response.size(); ++i)
    check(panel.response[i], "response of subject '" + (i < panel.n() ? panel.subjects[i] : "?") + "'");
  if (!panel.derivatives.empty()) {
    if (panel.derivatives.size() != panel.n())
      out.push_back({ErrorCode::GridMismatch, "derivative count differs from subject count"});
    for (std::size_t i = 0; i < panel.derivatives.size(); ++i) check(panel.derivatives[i], "derivative " + std::to_string(i));
  }
  if (panel.covariates.size() != panel.J())
    out.push_back({ErrorCode::GridMismatch, "covariate collections differ from covariate names"});
  for (std::size_t j = 0; j < panel.covariates.size(); ++j) {
    const std::string name = j < panel.J() ? panel.covariateNames[j] : std::to_string(j);
    if (panel.covariates[j].size() != panel.n())
      out.push_back({ErrorCode::GridMismatch, "covariate '" + name + "' subject count differs"});
    for (std::size_t i = 0; i < panel.covariates[j].size(); ++i)
      check(panel.covariates[j][i], "covariate '" + name + "' of subject " + std::to_string(i));
  }
  return out;
}

class PanelError : public Error {
 public:
  explicit PanelError(std::vector<Violation> v) : Error(v.front().code, summarize(v)), violations_(std::move(v)) {}
  const std::vector<Violation>& violations() const { return violations_; }

 private:
  static std::string summarize(const std::vector<Violation>& v) {
    std::string s;
    for (const auto& x : v) {
      if (!s.empty()) s += "; ";
      s += std::string(to_string(x.code)) + " (" + x.detail + ")";
    }
    return s;
  }
  std::vector<Violation> violations_;
};

/// Returns the panel unchanged when valid, throws PanelError listing all violations otherwise.
inline const TrajectoryPanel& validate_panel(const TrajectoryPanel& panel) {
  auto v = check_panel(panel);
  if (!v.empty()) throw PanelError(std::move(v));
  return panel;
}

inline void validate_lags(const TimeGrid& grid, const LagConfig& cfg) {
  for (auto l : cfg.lags)
    if (l > cfg.searchMax)
      throw Error(ErrorCode::InvalidConfig, "lag " + std::to_string(l) + " exceeds search bound " +
                                                std::to_string(cfg.searchMax));
  (void)fit_domain(grid, cfg);
}

}  // namespace rded
