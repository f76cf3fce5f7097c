#pragma once

// Additive regression learner: every continuous feature column gets a cubic
// truncated-power spline basis, penalized by a ridge term chosen by
// generalized cross-validation. Parametric GLM fits are represented in the
// same form with purely linear columns, so downstream evaluators can split a
// prediction into per-column contributions.

#include "crtm/core.hpp"
#include "crtm/glm.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace crtm {

struct LearnerConfig {
  int knots = 0;           // 0: ceil(K^(1/3)) for K training clusters
  int min_distinct = 5;    // columns with fewer distinct values stay linear
  double lambda_min = 1e-4;
  double lambda_max = 1e4;
  int lambda_steps = 17;   // log-spaced grid, multiplied by the row count
};

struct ColumnBasis {
  bool active = true;  // constant columns are dropped
  bool spline = false;
  double center = 0.0;
  double scale = 1.0;
  double lo = 0.0, hi = 0.0;  // standardized clamp range for the non-linear part
  std::vector<double> knots;  // standardized
  std::size_t offset = 0;     // position of the linear coefficient in `coef`

  std::size_t width() const { return active ? (spline ? 3 + knots.size() : 1) : 0; }
};

struct AdditiveModel {
  Family family = Family::gaussian;
  double intercept = 0.0;
  std::vector<ColumnBasis> columns;
  std::vector<double> coef;
  std::vector<std::string> names;
  std::vector<std::string> warnings;
  double residual_sd = 0.0;
  double lambda = 0.0;
  double edf = 0.0;
  bool converged = true;

  double contribution(std::size_t col, double value) const {
    const auto& b = columns[col];
    if (!b.active) return 0.0;
    const double t = (value - b.center) / b.scale;
    double out = coef[b.offset] * t;
    if (b.spline) {
      const double tc = std::clamp(t, b.lo, b.hi);
      out += coef[b.offset + 1] * tc * tc + coef[b.offset + 2] * tc * tc * tc;
      for (std::size_t k = 0; k < b.knots.size(); ++k) {
        const double d = tc - b.knots[k];
        if (d > 0) out += coef[b.offset + 3 + k] * d * d * d;
      }
    }
    return out;
  }

  double linear_predictor(std::span<const double> x) const {
    double eta = intercept;
    for (std::size_t c = 0; c < columns.size(); ++c) eta += contribution(c, x[c]);
    return eta;
  }

  double inverse_link(double eta) const {
    if (family == Family::gaussian) return eta;
    return std::clamp(logistic(eta), 1e-12, 1.0 - 1e-12);
  }

  double predict(std::span<const double> x) const { return inverse_link(linear_predictor(x)); }

  std::size_t input_dim() const { return columns.size(); }
};

namespace detail {

inline void fill_basis(const ColumnBasis& b, double value, double* out) {
  const double t = (value - b.center) / b.scale;
  out[0] = t;
  if (!b.spline) return;
  const double tc = std::clamp(t, b.lo, b.hi);
  out[1] = tc * tc;
  out[2] = tc * tc * tc;
  for (std::size_t k = 0; k < b.knots.size(); ++k) {
    const double d = tc - b.knots[k];
    out[3 + k] = d > 0 ? d * d * d : 0.0;
  }
}

inline bool column_constant(const Eigen::MatrixXd& X, Eigen::Index c, const Eigen::VectorXd& w) {
  double first = std::numeric_limits<double>::quiet_NaN();
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    if (w(i) <= 0) continue;
    if (std::isnan(first)) first = X(i, c);
    else if (std::abs(X(i, c) - first) > 1e-12 * std::max(1.0, std::abs(first))) return false;
  }
  return true;
}

inline int distinct_up_to(const Eigen::MatrixXd& X, Eigen::Index c, int limit) {
  std::vector<double> seen;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double v = X(i, c);
    if (std::find(seen.begin(), seen.end(), v) == seen.end()) {
      seen.push_back(v);
      if (static_cast<int>(seen.size()) >= limit) break;
    }
  }
  return static_cast<int>(seen.size());
}

inline Eigen::VectorXd weights_or_ones(std::span<const double> weights, Eigen::Index n) {
  Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
  if (!weights.empty()) {
    if (static_cast<Eigen::Index>(weights.size()) != n) throw ValidationError("weight length differs from row count");
    for (Eigen::Index i = 0; i < n; ++i) w(i) = weights[static_cast<std::size_t>(i)];
  }
  return w;
}

}  // namespace detail

/// Wraps a parametric GLM; columns listed in `active` map to its coefficients
/// in order, the rest contribute nothing.
inline AdditiveModel additive_from_glm(const GlmModel& glm, const std::vector<bool>& active, std::vector<std::string> names) {
  AdditiveModel model;
  model.family = glm.family;
  model.intercept = glm.coefficients(0);
  model.names = std::move(names);
  model.residual_sd = glm.residual_sd;
  model.converged = glm.converged;
  model.warnings = glm.warnings;
  model.columns.resize(active.size());
  std::size_t next = 0;
  for (std::size_t c = 0; c < active.size(); ++c) {
    model.columns[c].active = active[c];
    if (!active[c]) continue;
    model.columns[c].offset = next;
    model.coef.push_back(glm.coefficients(static_cast<Eigen::Index>(next + 1)));
    ++next;
  }
  model.edf = static_cast<double>(next + 1);
  return model;
}

/// Parametric working model: drops constant columns, then fits a GLM.
inline AdditiveModel fit_parametric(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Family family,
                                    std::span<const double> weights = {}, std::vector<std::string> names = {}) {
  const auto w = detail::weights_or_ones(weights, X.rows());
  std::vector<bool> active(static_cast<std::size_t>(X.cols()));
  std::vector<Eigen::Index> keep;
  std::vector<std::string> kept_names;
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    active[static_cast<std::size_t>(c)] = !detail::column_constant(X, c, w);
    if (active[static_cast<std::size_t>(c)]) {
      keep.push_back(c);
      kept_names.push_back(static_cast<std::size_t>(c) < names.size() ? names[static_cast<std::size_t>(c)]
                                                                       : "column " + std::to_string(c));
    }
  }
  Eigen::MatrixXd Xk(X.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) Xk.col(static_cast<Eigen::Index>(k)) = X.col(keep[k]);
  const auto glm = fit_glm(Xk, y, family, std::span<const double>(w.data(), static_cast<std::size_t>(w.size())), kept_names);
  return additive_from_glm(glm, active, std::move(names));
}

/// Flexible learner. `clusters` sets the default knot count.
inline AdditiveModel fit_additive(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Family family, std::size_t clusters,
                                  const LearnerConfig& cfg = {}, std::span<const double> weights = {},
                                  std::vector<std::string> names = {}) {
  const Eigen::Index n = X.rows();
  if (y.size() != n) throw ValidationError("fit_additive: response length differs from row count");
  const auto w = detail::weights_or_ones(weights, n);
  const double wsum = w.sum();
  if (!(wsum > 0)) throw EstimationError("fit_additive: no positively weighted rows");
  const int knots = cfg.knots > 0 ? cfg.knots : static_cast<int>(std::ceil(std::cbrt(static_cast<double>(clusters)) - 1e-9));

  AdditiveModel model;
  model.family = family;
  model.names = std::move(names);
  model.columns.resize(static_cast<std::size_t>(X.cols()));
  std::size_t width = 0;
  bool any_spline = false;
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    auto& b = model.columns[static_cast<std::size_t>(c)];
    b.active = !detail::column_constant(X, c, w);
    if (!b.active) continue;
    b.center = X.col(c).dot(w) / wsum;
    const double var = (X.col(c).array() - b.center).square().matrix().dot(w) / wsum;
    b.scale = var > 0 ? std::sqrt(var) : 1.0;
    b.spline = detail::distinct_up_to(X, c, cfg.min_distinct) >= cfg.min_distinct;
    if (b.spline) {
      std::vector<double> t;
      for (Eigen::Index i = 0; i < n; ++i)
        if (w(i) > 0) t.push_back((X(i, c) - b.center) / b.scale);
      std::sort(t.begin(), t.end());
      b.lo = t.front();
      b.hi = t.back();
      for (int k = 1; k <= knots; ++k) b.knots.push_back(quantile_sorted(t, static_cast<double>(k) / (knots + 1)));
      b.knots.erase(std::unique(b.knots.begin(), b.knots.end()), b.knots.end());
      if (b.knots.size() > 60) b.knots.resize(60);
      any_spline = true;
    }
    b.offset = width;
    width += b.width();
  }

  const auto p = static_cast<Eigen::Index>(width + 1);
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n, p);
  Eigen::VectorXd penalty_shape = Eigen::VectorXd::Zero(p);
  for (Eigen::Index i = 0; i < n; ++i) {
    D(i, 0) = 1.0;
    for (std::size_t c = 0; c < model.columns.size(); ++c) {
      const auto& b = model.columns[c];
      if (!b.active) continue;
      double buf[64];
      detail::fill_basis(b, X(i, static_cast<Eigen::Index>(c)), buf);
      for (std::size_t k = 0; k < b.width(); ++k) D(i, static_cast<Eigen::Index>(b.offset + 1 + k)) = buf[k];
    }
  }
  for (const auto& b : model.columns) {
    if (!b.active) continue;
    penalty_shape(static_cast<Eigen::Index>(b.offset + 1)) = 1e-8;
    for (std::size_t k = 1; k < b.width(); ++k) penalty_shape(static_cast<Eigen::Index>(b.offset + 1 + k)) = 1.0;
  }

  auto score = [&](const detail::IrlsResult& fit, const Eigen::VectorXd& pen, double& edf) {
    Eigen::MatrixXd lhs = fit.information;
    lhs.diagonal() += pen;
    edf = lhs.ldlt().solve(fit.information).trace();
    const Eigen::VectorXd eta = D * fit.coef;
    double dev = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (family == Family::gaussian) {
        const double r = y(i) - eta(i);
        dev += w(i) * r * r;
      } else {
        const double mu = std::clamp(logistic(eta(i)), 1e-12, 1.0 - 1e-12);
        dev += -2.0 * w(i) * (y(i) * std::log(mu) + (1.0 - y(i)) * std::log(1.0 - mu));
      }
    }
    const double denom = std::max(wsum - edf, 1e-8);
    return wsum * dev / (denom * denom);
  };

  std::vector<double> grid;
  if (any_spline) {
    const double step = cfg.lambda_steps > 1 ? std::log(cfg.lambda_max / cfg.lambda_min) / (cfg.lambda_steps - 1) : 0.0;
    for (int k = 0; k < cfg.lambda_steps; ++k) grid.push_back(cfg.lambda_min * std::exp(step * k) * wsum);
  } else {
    grid.push_back(1.0);
  }
  double best = std::numeric_limits<double>::infinity();
  detail::IrlsResult chosen;
  if (family == Family::gaussian) {
    const Eigen::MatrixXd Dw = D.array().colwise() * w.array();
    const Eigen::MatrixXd G = D.transpose() * Dw;
    const Eigen::VectorXd b = Dw.transpose() * y;
    const double yy = y.cwiseProduct(y).dot(w);
    for (double lambda : grid) {
      Eigen::MatrixXd lhs = G;
      lhs.diagonal() += lambda * penalty_shape;
      const auto ldlt = lhs.ldlt();
      const Eigen::VectorXd coef = ldlt.solve(b);
      if (!coef.allFinite()) continue;
      const double edf = ldlt.solve(G).trace();
      const double rss = std::max(yy - 2.0 * coef.dot(b) + coef.dot(G * coef), 0.0);
      const double denom = std::max(wsum - edf, 1e-8);
      const double g = wsum * rss / (denom * denom);
      if (g < best) {
        best = g;
        chosen.coef = coef;
        chosen.converged = true;
        model.lambda = any_spline ? lambda : 0.0;
        model.edf = edf;
      }
    }
    grid.clear();
  }
  for (double lambda : grid) {
    const Eigen::VectorXd pen = lambda * penalty_shape;
    auto fit = detail::irls(D, y, family, w, pen);
    if (!fit.coef.allFinite()) continue;
    double edf = 0.0;
    const double g = score(fit, pen, edf);
    // separated fits lose to any fit that stays off the boundary
    if (chosen.coef.size() > 0 && fit.boundary != chosen.boundary) {
      if (fit.boundary) continue;
      best = std::numeric_limits<double>::infinity();
    }
    if (g < best) {
      best = g;
      chosen = std::move(fit);
      model.lambda = any_spline ? lambda : 0.0;
      model.edf = edf;
    }
  }
  if (chosen.coef.size() == 0) throw EstimationError("fit_additive: no finite fit on the penalty grid");
  model.intercept = chosen.coef(0);
  model.coef.assign(chosen.coef.data() + 1, chosen.coef.data() + p);
  model.converged = chosen.converged;
  if (family == Family::gaussian) {
    const Eigen::VectorXd r = y - D * chosen.coef;
    const double rss = r.cwiseProduct(r).dot(w);
    model.residual_sd = std::sqrt(rss / std::max(wsum - model.edf, 1.0));
  } else if (chosen.boundary) {
    model.warnings.emplace_back("logistic fit converged at the boundary (quasi-separation); predictions are clipped");
  }
  return model;
}

enum class Backend { parametric, ml };

inline AdditiveModel fit_regression(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Family family, Backend backend,
                                    std::size_t clusters, const LearnerConfig& cfg = {}, std::span<const double> weights = {},
                                    std::vector<std::string> names = {}) {
  if (backend == Backend::parametric) return fit_parametric(X, y, family, weights, std::move(names));
  return fit_additive(X, y, family, clusters, cfg, weights, std::move(names));
}

}  // namespace crtm
