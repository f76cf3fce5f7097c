#pragma once

// Generalized linear models fitted by (optionally ridge-penalized)
// iteratively reweighted least squares, plus a multinomial logit for
// finite-support responses.

#include "crtm/core.hpp"
#include "crtm/numeric.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace crtm {

enum class Family { gaussian, binomial };

struct GlmModel {
  Family family = Family::gaussian;
  Eigen::VectorXd coefficients;  // intercept first
  double residual_sd = 0.0;      // gaussian only
  bool converged = false;
  bool boundary = false;  // logistic fit drifted towards separation
  int iterations = 0;
  std::vector<std::string> warnings;

  double linear_predictor(std::span<const double> x) const {
    double eta = coefficients(0);
    for (std::size_t k = 0; k < x.size(); ++k) eta += coefficients(static_cast<Eigen::Index>(k + 1)) * x[k];
    return eta;
  }

  /// Mean response; binomial predictions are kept inside [1e-12, 1 - 1e-12].
  double predict(std::span<const double> x) const {
    const double eta = linear_predictor(x);
    if (family == Family::gaussian) return eta;
    return std::clamp(logistic(eta), 1e-12, 1.0 - 1e-12);
  }
};

namespace detail {

struct IrlsResult {
  Eigen::VectorXd coef;
  int iterations = 0;
  bool converged = false;
  bool boundary = false;
  Eigen::MatrixXd information;  // X'WX at the solution (unpenalized)
};

/// Penalized IRLS on a design that already contains its intercept column.
inline IrlsResult irls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Family family, const Eigen::VectorXd& w,
                       const Eigen::VectorXd& penalty, int max_iter = 100, double tol = 1e-8) {
  const Eigen::Index p = X.cols();
  IrlsResult out;
  out.coef = Eigen::VectorXd::Zero(p);
  if (family == Family::gaussian) {
    const Eigen::MatrixXd xtw = X.transpose() * w.asDiagonal();
    out.information = xtw * X;
    Eigen::MatrixXd lhs = out.information;
    lhs.diagonal() += penalty;
    out.coef = lhs.ldlt().solve(xtw * y);
    out.iterations = 1;
    out.converged = true;
    return out;
  }
  // Intercept start at the weighted mean.
  const double ybar = std::clamp(w.dot(y) / w.sum(), 1e-6, 1.0 - 1e-6);
  out.coef(0) = std::log(ybar / (1.0 - ybar));
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::VectorXd eta = X * out.coef;
    Eigen::VectorXd mu(eta.size()), var(eta.size()), z(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      mu(i) = logistic(eta(i));
      var(i) = std::max(mu(i) * (1.0 - mu(i)), 1e-10);
      z(i) = eta(i) + (y(i) - mu(i)) / var(i);
    }
    const Eigen::VectorXd ww = w.cwiseProduct(var);
    const Eigen::MatrixXd xtw = X.transpose() * ww.asDiagonal();
    out.information = xtw * X;
    Eigen::MatrixXd lhs = out.information;
    lhs.diagonal() += penalty;
    const Eigen::VectorXd next = lhs.ldlt().solve(xtw * z);
    const double change = (next - out.coef).cwiseAbs().maxCoeff();
    out.coef = next;
    out.iterations = it;
    if (!out.coef.allFinite()) break;
    if (change < tol) {
      out.converged = true;
      break;
    }
  }
  const double max_eta = (X * out.coef).cwiseAbs().maxCoeff();
  out.boundary = !out.converged || max_eta > 25.0;
  return out;
}

}  // namespace detail

/// Weighted GLM with an automatic intercept. Coefficients maximize the
/// weighted likelihood; convergence when the largest coefficient change drops
/// below 1e-8 or after 100 iterations.
inline GlmModel fit_glm(const Eigen::MatrixXd& features, const Eigen::VectorXd& response, Family family,
                        std::span<const double> weights = {}, std::span<const std::string> names = {}) {
  const Eigen::Index n = features.rows();
  const Eigen::Index p = features.cols() + 1;
  if (response.size() != n) throw ValidationError("fit_glm: response length differs from row count");
  Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
  if (!weights.empty()) {
    if (static_cast<Eigen::Index>(weights.size()) != n) throw ValidationError("fit_glm: weight length differs from row count");
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!(weights[static_cast<std::size_t>(i)] >= 0.0)) throw ValidationError("fit_glm: weights must be nonnegative");
      w(i) = weights[static_cast<std::size_t>(i)];
    }
  }
  const Eigen::Index active = (w.array() > 0.0).count();
  if (active < p) throw EstimationError("fit_glm: need at least as many weighted rows as coefficients");
  if (family == Family::binomial)
    for (Eigen::Index i = 0; i < n; ++i)
      if (response(i) < 0.0 || response(i) > 1.0) throw ValidationError("fit_glm: binomial response outside [0,1]");

  Eigen::MatrixXd X(n, p);
  X.col(0).setOnes();
  X.rightCols(p - 1) = features;

  // Rank check on the weighted design.
  Eigen::MatrixXd scaled = w.cwiseSqrt().asDiagonal() * X;
  for (Eigen::Index c = 0; c < p; ++c) {
    const double norm = scaled.col(c).norm();
    if (norm > 0) scaled.col(c) /= norm;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  qr.setThreshold(1e-10);
  if (qr.rank() < p) {
    std::string cols;
    for (Eigen::Index r = qr.rank(); r < p; ++r) {
      const auto c = qr.colsPermutation().indices()(r);
      std::string name = c == 0 ? "(intercept)"
                                : (static_cast<std::size_t>(c - 1) < names.size() ? names[static_cast<std::size_t>(c - 1)]
                                                                                  : "column " + std::to_string(c - 1));
      cols += (cols.empty() ? "" : ", ") + name;
    }
    throw EstimationError("fit_glm: rank-deficient design; collinear columns: " + cols);
  }

  auto fit = detail::irls(X, response, family, w, Eigen::VectorXd::Zero(p));
  GlmModel model;
  model.family = family;
  model.coefficients = fit.coef;
  model.converged = fit.converged;
  model.iterations = fit.iterations;
  if (family == Family::gaussian) {
    const Eigen::VectorXd resid = response - X * fit.coef;
    const double rss = resid.cwiseProduct(resid).dot(w);
    const double wsum = w.sum();
    const double dof = static_cast<double>(active - p);
    model.residual_sd = dof > 0 ? std::sqrt(rss / wsum * static_cast<double>(active) / dof) : std::sqrt(rss / wsum);
  } else {
    model.boundary = fit.boundary;
    if (fit.boundary)
      model.warnings.emplace_back("logistic fit converged at the boundary (quasi-separation); predictions are clipped");
  }
  return model;
}

/// Multinomial logit with the first category as reference.
struct MultinomialModel {
  int categories = 2;
  Eigen::MatrixXd coefficients;  // (categories-1) x (features+1), intercept first
  bool converged = false;
  int iterations = 0;

  std::vector<double> probabilities(std::span<const double> x) const {
    std::vector<double> eta(static_cast<std::size_t>(categories), 0.0);
    for (int c = 1; c < categories; ++c) {
      double e = coefficients(c - 1, 0);
      for (std::size_t k = 0; k < x.size(); ++k) e += coefficients(c - 1, static_cast<Eigen::Index>(k + 1)) * x[k];
      eta[static_cast<std::size_t>(c)] = e;
    }
    const double mx = *std::max_element(eta.begin(), eta.end());
    double total = 0.0;
    for (auto& e : eta) total += (e = std::exp(e - mx));
    for (auto& e : eta) e = std::clamp(e / total, 1e-12, 1.0);
    return eta;
  }
};

/// Newton-Raphson fit; `labels` are category indices in [0, categories).
inline MultinomialModel fit_multinomial(const Eigen::MatrixXd& features, const std::vector<int>& labels, int categories,
                                        double ridge = 1e-6) {
  const Eigen::Index n = features.rows();
  const Eigen::Index p = features.cols() + 1;
  const Eigen::Index q = categories - 1;
  if (categories < 2) throw ValidationError("fit_multinomial: need at least two categories");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ValidationError("fit_multinomial: label length differs from row count");
  Eigen::MatrixXd X(n, p);
  X.col(0).setOnes();
  X.rightCols(p - 1) = features;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(q * p);
  MultinomialModel model;
  model.categories = categories;
  for (int it = 1; it <= 100; ++it) {
    Eigen::VectorXd grad = -ridge * beta;
    Eigen::MatrixXd hess = Eigen::MatrixXd::Identity(q * p, q * p) * ridge;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd eta(q);
      for (Eigen::Index c = 0; c < q; ++c) eta(c) = X.row(i).dot(beta.segment(c * p, p));
      const double mx = std::max(0.0, eta.maxCoeff());
      Eigen::VectorXd ex = (eta.array() - mx).exp();
      const double denom = std::exp(-mx) + ex.sum();
      const Eigen::VectorXd prob = ex / denom;
      for (Eigen::Index c = 0; c < q; ++c) {
        const double target = labels[static_cast<std::size_t>(i)] == c + 1 ? 1.0 : 0.0;
        grad.segment(c * p, p) += (target - prob(c)) * X.row(i).transpose();
        for (Eigen::Index d = 0; d < q; ++d) {
          const double h = prob(c) * ((c == d ? 1.0 : 0.0) - prob(d));
          hess.block(c * p, d * p, p, p).noalias() += h * X.row(i).transpose() * X.row(i);
        }
      }
    }
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    beta += step;
    model.iterations = it;
    if (step.cwiseAbs().maxCoeff() < 1e-8) {
      model.converged = true;
      break;
    }
  }
  model.coefficients.resize(q, p);
  for (Eigen::Index c = 0; c < q; ++c) model.coefficients.row(c) = beta.segment(c * p, p).transpose();
  return model;
}

}  // namespace crtm
