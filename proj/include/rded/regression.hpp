#pragma once

// Least squares, ridge scalar-on-function regression and LASSO by coordinate descent.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "rded/core.hpp"

namespace rded {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Linear regression problem. An empty `weights` vector means unit weights.
/// The design carries no implicit intercept for solve_wls; the penalized solvers
/// add an unpenalized intercept themselves.
struct DesignProblem {
  Matrix design;
  Vector response;
  Vector weights;
};

namespace detail {

inline Vector unit_or(const Vector& w, Eigen::Index n) {
  if (w.size() == 0) return Vector::Ones(n);
  if (w.size() != n) throw Error(ErrorCode::InvalidConfig, "weights length differs from rows");
  if ((w.array() < 0.0).any() || !(w.sum() > 0.0))
    throw Error(ErrorCode::InvalidConfig, "weights must be nonnegative with positive sum");
  return w;
}

// First column (in order) that lies in the span of its predecessors.
inline Eigen::Index first_dependent_column(const Matrix& A, double tol) {
  Matrix Q(A.rows(), 0);
  for (Eigen::Index j = 0; j < A.cols(); ++j) {
    Vector v = A.col(j);
    const double norm0 = v.norm();
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index q = 0; q < Q.cols(); ++q) v -= Q.col(q).dot(v) * Q.col(q);
    if (norm0 == 0.0 || v.norm() <= tol * norm0) return j;
    Q.conservativeResize(Eigen::NoChange, Q.cols() + 1);
    Q.col(Q.cols() - 1) = v / v.norm();
  }
  return -1;
}

}  // namespace detail

/// Minimizes sum_i w_i (y_i - x_i' b)^2. Throws RankDeficient naming the first
/// column that is (numerically) a combination of the preceding ones.
inline Vector solve_wls(const DesignProblem& problem) {
  const auto& X = problem.design;
  const Eigen::Index n = X.rows(), p = X.cols();
  if (problem.response.size() != n) throw Error(ErrorCode::InvalidConfig, "response length differs from rows");
  const Vector w = detail::unit_or(problem.weights, n);
  const Vector sw = w.array().sqrt();
  const Matrix A = sw.asDiagonal() * X;
  const Vector b = sw.asDiagonal() * problem.response;
  Eigen::ColPivHouseholderQR<Matrix> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) {
    const auto col = detail::first_dependent_column(A, 1e-9);
    throw Error(ErrorCode::RankDeficient, "column " + std::to_string(col < 0 ? qr.rank() : col) +
                                              " is linearly dependent on earlier columns");
  }
  return qr.solve(b);
}

inline Vector solve_ols(const Matrix& X, const Vector& y) { return solve_wls({X, y, {}}); }

/// OLS coefficients together with the leave-one-row-out prediction for every row.
struct OlsLoo {
  Vector coef;
  Vector fitted;
  Vector looPrediction;
};

/// Ordinary least squares with exact leave-one-out predictions
/// y_i - e_i / (1 - h_ii), falling back to an explicit refit when h_ii is near one.
inline OlsLoo ols_with_loo(const Matrix& X, const Vector& y) {
  const Eigen::Index n = X.rows(), p = X.cols();
  OlsLoo out;
  out.coef = solve_ols(X, y);
  Eigen::HouseholderQR<Matrix> qr(X);
  const Matrix Q = qr.householderQ() * Matrix::Identity(n, p);
  out.fitted = X * out.coef;
  out.looPrediction.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double h = Q.row(i).squaredNorm();
    if (h < 1.0 - 1e-10) {
      const double e = y(i) - out.fitted(i);
      out.looPrediction(i) = y(i) - e / (1.0 - h);
    } else {
      Matrix Xi(n - 1, p);
      Vector yi(n - 1);
      for (Eigen::Index r = 0, q = 0; r < n; ++r) {
        if (r == i) continue;
        Xi.row(q) = X.row(r);
        yi(q++) = y(r);
      }
      out.looPrediction(i) = X.row(i).dot(solve_ols(Xi, yi));
    }
  }
  return out;
}

/// Trapezoid weights on s = 0..tau0 grid steps. For tau0 = 0 the single weight is 1,
/// i.e. the history term becomes a point evaluation at the current time.
inline std::vector<double> trapezoid_weights(std::size_t tau0, double step) {
  if (tau0 == 0) return {1.0};
  std::vector<double> w(tau0 + 1, step);
  w.front() = w.back() = 0.5 * step;
  return w;
}

struct FlmFit {
  double intercept = 0.0;
  std::vector<double> gamma;  // on the lag axis
  double lambda = 0.0;        // relative ridge parameter actually used
  double gcv = 0.0;
};

/// Relative ridge parameters searched by generalized cross-validation.
inline std::vector<double> flm_ridge_grid() {
  std::vector<double> g;
  for (int e = 0; e <= 40; ++e) g.push_back(std::pow(10.0, -10.0 + 0.3 * e));
  return g;
}

/// Scalar-on-function regression y_i = a + sum_s q_s gamma_s X_i(s) + e_i with the
/// integral discretized by quadrature weights q and a ridge penalty on gamma. The ridge
/// parameter is relative to the mean eigenvalue of the centered Gram matrix; when absent
/// it is chosen by GCV over flm_ridge_grid().
inline FlmFit solve_flm(const Matrix& history, const Vector& response, const std::vector<double>& quadrature,
                        std::optional<double> ridge = std::nullopt) {
  const Eigen::Index n = history.rows(), m = history.cols();
  if (static_cast<Eigen::Index>(quadrature.size()) != m)
    throw Error(ErrorCode::InvalidConfig, "quadrature weights do not match history columns");
  if (n < 3) throw Error(ErrorCode::TooFewSubjects, "functional regression needs n > 2");

  Matrix Z = history;
  for (Eigen::Index s = 0; s < m; ++s) Z.col(s) *= quadrature[s];
  const Vector zbar = Z.colwise().mean();
  const double ybar = response.mean();
  Z.rowwise() -= zbar.transpose();
  const Vector yc = response.array() - ybar;

  Eigen::JacobiSVD<Matrix> svd(Z, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector d = svd.singularValues();
  const Vector uy = svd.matrixU().transpose() * yc;
  const double scale = d.squaredNorm() / static_cast<double>(m);
  const double tiny = (d.size() ? d(0) : 0.0) * 1e-13;

  auto coef = [&](double lam_rel, double* rss, double* df) {
    const double lam = lam_rel * scale;
    Vector shrink(d.size());
    double dof = 1.0;  // intercept
    Vector fit_coef(d.size());
    for (Eigen::Index q = 0; q < d.size(); ++q) {
      if (d(q) <= tiny && lam == 0.0) {
        shrink(q) = 0.0;
        fit_coef(q) = 0.0;
        continue;
      }
      shrink(q) = d(q) / (d(q) * d(q) + lam);
      fit_coef(q) = d(q) * shrink(q);
      dof += fit_coef(q);
    }
    if (rss) {
      const Vector fitted = svd.matrixU() * (fit_coef.asDiagonal() * uy);
      *rss = (yc - fitted).squaredNorm();
    }
    if (df) *df = dof;
    return Vector(svd.matrixV() * (shrink.asDiagonal() * uy));
  };

  FlmFit out;
  if (ridge) {
    out.lambda = *ridge;
    double rss = 0, df = 0;
    const Vector g = coef(out.lambda, &rss, &df);
    out.gamma.assign(g.data(), g.data() + g.size());
    out.gcv = n - df > 0 ? n * rss / ((n - df) * (n - df)) : std::numeric_limits<double>::infinity();
  } else {
    double best = std::numeric_limits<double>::infinity();
    for (double lam : flm_ridge_grid()) {
      double rss = 0, df = 0;
      (void)coef(lam, &rss, &df);
      if (!(n - df > 0.5)) continue;
      const double g = n * rss / ((n - df) * (n - df));
      if (g < best) {
        best = g;
        out.lambda = lam;
      }
    }
    out.gcv = best;
    const Vector g = coef(out.lambda, nullptr, nullptr);
    out.gamma.assign(g.data(), g.data() + g.size());
  }
  double a = ybar;
  for (Eigen::Index s = 0; s < m; ++s) a -= zbar(s) * out.gamma[s];
  out.intercept = a;
  // Returned gamma multiplies the quadrature-weighted history, so it is already gamma(s).
  return out;
}

struct LassoOptions {
  double tolerance = 1e-10;  // max coefficient change in the standardized frame
  int maxSweeps = 10000;
};

struct LassoFit {
  double intercept = 0.0;
  Vector coef;              // original scale
  Vector standardizedCoef;  // standardized frame
  int sweeps = 0;
  double kktViolation = 0.0;
  bool monotone = true;     // objective never increased across sweeps
  double lambda = 0.0;
};

/// Standardized LASSO problem: (1/2W) sum_i w_i (y_i - a - x_i' b)^2 + lambda |b|_1 with
/// columns centered and scaled to unit weighted variance. Columns with zero variance are
/// held at zero.
class LassoProblem {
 public:
  LassoProblem(const Matrix& X, const Vector& y, const Vector& weights = {}) {
    const Eigen::Index n = X.rows();
    p_ = X.cols();
    if (y.size() != n) throw Error(ErrorCode::InvalidConfig, "response length differs from rows");
    w_ = detail::unit_or(weights, n);
    const double W = w_.sum();
    ymean_ = w_.dot(y) / W;
    mean_.resize(p_);
    sd_.resize(p_);
    Matrix Xs(n, p_);
    for (Eigen::Index j = 0; j < p_; ++j) {
      mean_(j) = w_.dot(X.col(j)) / W;
      Vector c = X.col(j).array() - mean_(j);
      const double var = w_.dot(c.cwiseProduct(c)) / W;
      sd_(j) = var > 1e-24 * (1.0 + mean_(j) * mean_(j)) ? std::sqrt(var) : 0.0;
      Xs.col(j) = sd_(j) > 0.0 ? Vector(c / sd_(j)) : Vector::Zero(n);
    }
    const Vector yc = y.array() - ymean_;
    const Matrix XtW = Xs.transpose() * w_.asDiagonal();
    gram_ = XtW * Xs / W;
    xy_ = XtW * yc / W;
    yy_ = w_.dot(yc.cwiseProduct(yc)) / W;
  }

  Eigen::Index predictors() const { return p_; }

  /// Smallest lambda at which every slope is zero.
  double lambda_max() const { return p_ ? xy_.cwiseAbs().maxCoeff() : 0.0; }

  double objective(const Vector& b, double lambda) const {
    return 0.5 * (yy_ - 2.0 * xy_.dot(b) + b.dot(gram_ * b)) + lambda * b.lpNorm<1>();
  }

  /// Max violation of the subgradient optimality conditions in the standardized frame.
  double kkt_violation(const Vector& b, double lambda) const {
    const Vector g = xy_ - gram_ * b;  // negative gradient of the smooth part
    double worst = 0.0;
    for (Eigen::Index j = 0; j < p_; ++j) {
      if (sd_(j) == 0.0) continue;
      const double v = b(j) == 0.0 ? std::max(0.0, std::abs(g(j)) - lambda)
                                   : std::abs(g(j) - lambda * (b(j) > 0 ? 1.0 : -1.0));
      worst = std::max(worst, v);
    }
    return worst;
  }

  /// Cyclic coordinate descent from `warm` (standardized frame).
  LassoFit solve(double lambda, const Vector& warm, const LassoOptions& opt = {}) const {
    if (lambda < 0.0) throw Error(ErrorCode::InvalidConfig, "lambda must be nonnegative");
    Vector b = warm.size() == p_ ? warm : Vector::Zero(p_);
    Vector gb = gram_ * b;
    LassoFit fit;
    fit.lambda = lambda;
    double obj = objective(b, lambda);
    bool done = p_ == 0;
    while (!done && fit.sweeps < opt.maxSweeps) {
      ++fit.sweeps;
      double max_change = 0.0;
      for (Eigen::Index j = 0; j < p_; ++j) {
        if (sd_(j) == 0.0) {
          b(j) = 0.0;
          continue;
        }
        const double gjj = gram_(j, j);
        const double z = xy_(j) - gb(j) + gjj * b(j);
        const double nb = soft_threshold(z, lambda) / gjj;
        const double delta = nb - b(j);
        if (delta != 0.0) {
          gb += delta * gram_.col(j);
          b(j) = nb;
          max_change = std::max(max_change, std::abs(delta));
        }
      }
      const double next = objective(b, lambda);
      if (next > obj + 1e-13 * (1.0 + std::abs(obj))) fit.monotone = false;
      obj = next;
      done = max_change < opt.tolerance;
    }
    fit.kktViolation = kkt_violation(b, lambda);
    if (!done)
      throw Error(ErrorCode::NoConvergence, "coordinate descent hit " + std::to_string(opt.maxSweeps) +
                                                " sweeps; max KKT violation " + std::to_string(fit.kktViolation));
    fit.standardizedCoef = b;
    fit.coef.resize(p_);
    fit.intercept = ymean_;
    for (Eigen::Index j = 0; j < p_; ++j) {
      fit.coef(j) = sd_(j) > 0.0 ? b(j) / sd_(j) : 0.0;
      fit.intercept -= fit.coef(j) * mean_(j);
    }
    return fit;
  }

  LassoFit solve(double lambda, const LassoOptions& opt = {}) const { return solve(lambda, Vector(), opt); }

 private:
  static double soft_threshold(double z, double g) {
    if (z > g) return z - g;
    if (z < -g) return z + g;
    return 0.0;
  }

  Eigen::Index p_ = 0;
  Vector w_, mean_, sd_, xy_;
  Matrix gram_;
  double ymean_ = 0.0, yy_ = 0.0;
};

inline LassoFit solve_lasso(const DesignProblem& problem, double lambda, const LassoOptions& opt = {}) {
  return LassoProblem(problem.design, problem.response, problem.weights).solve(lambda, opt);
}

struct LassoCvResult {
  double lambda = 0.0;
  std::size_t lambdaIndex = 0;
  std::vector<double> lambdas;
  std::vector<double> cvError;
  LassoFit fit;
};

/// 50 log-spaced penalties from lambda_max down to 1e-3 * lambda_max.
inline std::vector<double> lasso_lambda_grid(double lambda_max, int count = 50, double ratio = 1e-3) {
  std::vector<double> g(count);
  for (int i = 0; i < count; ++i)
    g[i] = lambda_max * std::pow(ratio, static_cast<double>(i) / (count - 1));
  return g;
}

/// Leave-one-out cross-validated LASSO. Ties in the CV error go to the larger lambda.
inline LassoCvResult lasso_path_cv(const DesignProblem& problem, const LassoOptions& opt = {}) {
  const Matrix& X = problem.design;
  const Vector& y = problem.response;
  const Eigen::Index n = X.rows(), p = X.cols();
  if (n < 3) throw Error(ErrorCode::TooFewSubjects, "leave-one-out LASSO needs n >= 3");
  const Vector w = detail::unit_or(problem.weights, n);

  LassoProblem full(X, y, w);
  LassoCvResult out;
  out.lambdas = lasso_lambda_grid(full.lambda_max());
  out.cvError.assign(out.lambdas.size(), 0.0);

  Matrix Xi(n - 1, p);
  Vector yi(n - 1), wi(n - 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index r = 0, q = 0; r < n; ++r) {
      if (r == i) continue;
      Xi.row(q) = X.row(r);
      yi(q) = y(r);
      wi(q++) = w(r);
    }
    LassoProblem fold(Xi, yi, wi);
    Vector warm = Vector::Zero(p);
    for (std::size_t l = 0; l < out.lambdas.size(); ++l) {
      const LassoFit f = fold.solve(out.lambdas[l], warm, opt);
      warm = f.standardizedCoef;
      const double pred = f.intercept + X.row(i).dot(f.coef);
      out.cvError[l] += w(i) * (y(i) - pred) * (y(i) - pred);
    }
  }
  for (auto& e : out.cvError) e /= w.sum();

  out.lambdaIndex = 0;
  for (std::size_t l = 1; l < out.lambdas.size(); ++l)
    if (out.cvError[l] < out.cvError[out.lambdaIndex]) out.lambdaIndex = l;
  out.lambda = out.lambdas[out.lambdaIndex];

  Vector warm = Vector::Zero(p);
  for (std::size_t l = 0; l <= out.lambdaIndex; ++l) {
    out.fit = full.solve(out.lambdas[l], warm, opt);
    warm = out.fit.standardizedCoef;
  }
  return out;
}

}  // namespace rded
