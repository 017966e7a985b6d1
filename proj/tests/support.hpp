#pragma once

#include <algorithm>
#include <numeric>
#include <random>

#include "rded/rded.hpp"

namespace testing_support {

using namespace rded;

inline TrajectoryPanel constant_panel(std::size_t n, std::size_t K, std::size_t J = 0) {
  TrajectoryPanel p;
  p.grid = TimeGrid{0.0, 1.0, K};
  for (std::size_t i = 0; i < n; ++i) {
    p.subjects.push_back(subject_name(i));
    p.response.push_back(Trajectory{std::vector<double>(K, 1.0 + static_cast<double>(i)), {}});
  }
  for (std::size_t j = 0; j < J; ++j) {
    p.covariateNames.push_back("U" + std::to_string(j + 1));
    p.covariates.emplace_back(n, Trajectory{std::vector<double>(K, 0.0), {}});
  }
  return p;
}

/// Panel with X' = a + sum_j b_j U_j(t - lag_j) + noise, derivatives given exactly,
/// covariates white Gaussian.
inline TrajectoryPanel concurrent_panel(std::size_t n, std::size_t K, const std::vector<double>& beta,
                                        const std::vector<std::size_t>& lags, double noise, std::uint64_t seed,
                                        std::size_t extraNoiseCovariates = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  TrajectoryPanel p;
  p.grid = TimeGrid{0.0, 1.0, K};
  const std::size_t J = beta.size() + extraNoiseCovariates;
  for (std::size_t j = 0; j < J; ++j) p.covariateNames.push_back("U" + std::to_string(j + 1));
  p.covariates.assign(J, {});
  for (std::size_t i = 0; i < n; ++i) {
    p.subjects.push_back(subject_name(i));
    std::vector<std::vector<double>> u(J, std::vector<double>(K));
    for (auto& c : u)
      for (auto& v : c) v = N(rng);
    std::vector<double> d(K), x(K);
    for (std::size_t k = 0; k < K; ++k) {
      d[k] = 0.5 + noise * N(rng);
      for (std::size_t j = 0; j < beta.size(); ++j)
        if (k >= lags[j]) d[k] += beta[j] * u[j][k - lags[j]];
      x[k] = k == 0 ? 0.0 : x[k - 1] + 0.5 * (d[k - 1] + d[k]);
    }
    p.response.push_back(Trajectory{x, {}});
    p.derivatives.push_back(Trajectory{d, {}});
    for (std::size_t j = 0; j < J; ++j) p.covariates[j].push_back(Trajectory{u[j], {}});
  }
  return p;
}

/// Exact solution of X'(t) = -X(t - 1), X = 1 on [-1, 0], built piece by piece:
/// on [m, m+1], X(t) = X(m) - int_m^t X(u - 1) du with polynomials in t.
class DelayedDecayOracle {
 public:
  explicit DelayedDecayOracle(int pieces) {
    pieces_.push_back({1.0});  // [-1, 0]
    for (int m = 0; m < pieces; ++m) {
      const auto& prev = pieces_.back();
      // shifted(u) = prev(u - 1) as a polynomial in u.
      std::vector<double> shifted(prev.size(), 0.0);
      for (std::size_t a = 0; a < prev.size(); ++a) {
        double binom = 1.0;
        for (std::size_t b = 0; b <= a; ++b) {
          shifted[b] += prev[a] * binom * std::pow(-1.0, static_cast<double>(a - b));
          binom = binom * static_cast<double>(a - b) / static_cast<double>(b + 1);
        }
      }
      std::vector<double> next(shifted.size() + 1, 0.0);
      for (std::size_t a = 0; a < shifted.size(); ++a) next[a + 1] = -shifted[a] / static_cast<double>(a + 1);
      next[0] = eval(prev, m) - eval(next, m);
      pieces_.push_back(next);
    }
  }

  double operator()(double t) const {
    const auto idx = static_cast<std::size_t>(std::clamp(std::ceil(t), 0.0, static_cast<double>(pieces_.size() - 1)));
    return eval(pieces_[idx], t);
  }

 private:
  static double eval(const std::vector<double>& c, double t) {
    double v = 0.0;
    for (std::size_t a = c.size(); a-- > 0;) v = v * t + c[a];
    return v;
  }
  std::vector<std::vector<double>> pieces_;
};

/// Max error of the method of steps against the oracle on [0, horizon].
inline double delayed_decay_error(double step, double horizon, double* at2 = nullptr) {
  const auto m = static_cast<std::size_t>(std::lround(1.0 / step));
  const auto K = static_cast<std::size_t>(std::lround(horizon / step)) + 1;
  RdedSpec spec;
  spec.historyCoef = [](double) { return -1.0; };
  spec.lagConfig = LagConfig{m, {}, m};
  spec.initial = [](double) { return 1.0; };
  const TimeGrid g{0.0, step, K};
  const auto x = solve_steps(spec, {}, g);
  const DelayedDecayOracle exact(static_cast<int>(std::ceil(horizon)) + 1);
  double worst = 0.0;
  for (std::size_t k = 0; k < K; ++k) worst = std::max(worst, std::abs(x.values[k] - exact(g.at(k))));
  if (at2) *at2 = x.values[2 * m];
  return worst;
}

/// Subgradient optimality check of a LASSO fit computed from scratch: standardize the
/// design (unit weights, population variance), map the slopes into that frame and
/// return the worst violation of |g_j| <= lambda (zero) or g_j = lambda sign(b_j) (active).
inline double lasso_kkt_oracle(const Matrix& X, const Vector& y, const LassoFit& fit, double lambda) {
  const double n = static_cast<double>(X.rows());
  const Vector mean = X.colwise().mean();
  Matrix Xs = X.rowwise() - mean.transpose();
  Vector sd(X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    sd(j) = std::sqrt(Xs.col(j).squaredNorm() / n);
    Xs.col(j) /= sd(j);
  }
  const Vector b = fit.coef.cwiseProduct(sd);
  const Vector r = (y.array() - y.mean()).matrix() - Xs * b;
  const Vector g = Xs.transpose() * r / n;
  double worst = 0.0;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const double v = b(j) == 0.0 ? std::max(0.0, std::abs(g(j)) - lambda) : std::abs(g(j) - lambda * (b(j) > 0 ? 1 : -1));
    worst = std::max(worst, v);
  }
  return worst;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace testing_support
