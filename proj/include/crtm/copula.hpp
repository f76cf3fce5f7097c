#pragma once

// Exchangeable Gaussian copula: closed-form log densities of the equicorrelated
// normal, its conditionals, a latent sampler and the normal-scores
// pseudo-likelihood fit of the single correlation parameter.

#include "crtm/core.hpp"
#include "crtm/numeric.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace crtm {

/// Smallest admissible correlation for clusters of size n.
inline double exchangeable_rho_floor(std::size_t n) { return n > 1 ? -1.0 / static_cast<double>(n - 1) : -1.0; }

inline bool exchangeable_valid(double rho, std::size_t n) {
  if (n <= 1) return rho < 1.0 && rho > -1.0;
  return rho < 1.0 && rho > exchangeable_rho_floor(n);
}

/// log density of N(0, R) with R = (1-rho) I + rho 11'.
inline double exchangeable_log_density(std::span<const double> z, double rho) {
  const auto n = static_cast<double>(z.size());
  if (z.empty()) return 0.0;
  double sum = 0.0, sq = 0.0;
  for (double v : z) {
    sum += v;
    sq += v * v;
  }
  const double a = 1.0 - rho;
  const double b = 1.0 + (n - 1.0) * rho;
  const double quad = (sq - rho * sum * sum / b) / a;
  return -0.5 * n * kLogTwoPi - 0.5 * ((n - 1.0) * std::log(a) + std::log(b)) - 0.5 * quad;
}

/// log of the copula density c(u) at normal scores z.
inline double copula_log_density(std::span<const double> z, double rho) {
  double out = exchangeable_log_density(z, rho);
  for (double v : z) out -= normal_log_pdf(v);
  return out;
}

struct ConditionalNormal {
  double mean = 0.0;
  double sd = 1.0;
};

/// Law of z_j given the other coordinates under the exchangeable normal.
inline ConditionalNormal exchangeable_conditional(std::span<const double> z, std::size_t j, double rho) {
  const auto n = z.size();
  if (n <= 1) return {};
  double others = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    if (k != j) others += z[k];
  const double denom = 1.0 + (static_cast<double>(n) - 2.0) * rho;
  const double var = 1.0 - (static_cast<double>(n) - 1.0) * rho * rho / denom;
  return {rho * others / denom, std::sqrt(std::max(var, 0.0))};
}

/// Maps independent standard normals e (length >= n) to an exchangeable
/// vector with correlation rho; valid for negative rho as well.
inline void exchangeable_correlate(std::span<const double> e, double rho, std::span<double> z) {
  const auto n = z.size();
  if (n == 0) return;
  double mean = 0.0;
  for (std::size_t k = 0; k < n; ++k) mean += e[k];
  mean /= static_cast<double>(n);
  const double within = std::sqrt(1.0 - rho);
  const double between = std::sqrt(std::max(0.0, 1.0 + (static_cast<double>(n) - 1.0) * rho));
  for (std::size_t k = 0; k < n; ++k) z[k] = within * (e[k] - mean) + between * mean;
}

struct CopulaModel {
  double rho = 0.0;
  std::size_t n_max = 1;
  double loglik = 0.0;
  int iterations = 0;
  bool independence = false;  // rho fixed at 0 by configuration
  std::vector<std::string> warnings;

  void check_size(std::size_t n) const {
    if (!exchangeable_valid(rho, n))
      throw ValidationError("copula correlation " + std::to_string(rho) + " is not positive definite for cluster size " +
                            std::to_string(n));
  }
};

/// Pseudo-likelihood estimate of rho from per-cluster normal scores.
/// Singleton clusters carry no information about rho.
inline CopulaModel fit_copula_scores(const std::vector<std::vector<double>>& scores, std::span<const double> weights = {}) {
  CopulaModel model;
  for (const auto& z : scores) model.n_max = std::max(model.n_max, z.size());
  if (model.n_max <= 1) {
    model.warnings.emplace_back("all clusters have a single member; copula correlation set to 0");
    return model;
  }
  auto negloglik = [&](double rho) {
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i].size() < 2) continue;
      const double w = weights.empty() ? 1.0 : weights[i];
      total += w * exchangeable_log_density(scores[i], rho);
    }
    return -total;
  };
  const double lo = exchangeable_rho_floor(model.n_max) + 1e-6;
  const double hi = 1.0 - 1e-6;
  const auto best = golden_section(negloglik, lo, hi, 1e-8);
  model.rho = best.x;
  model.loglik = -best.value;
  model.iterations = best.iterations;
  return model;
}

}  // namespace crtm
