#pragma once

// Data-generating processes with known nuisance functions, oracle truths and
// the simulation-study runner.
//
// linear_gaussian: M_ij = g0 + gA A + gX X_ij + gV V_i + gN N_i + sigma L_ij with
//   L_i exchangeable standard normal (correlation rho).
// finite_support: binary M_ij | U_i ~ Bernoulli(logistic(al0 + alA A + alX X_ij +
//   alV V_i + alN N_i + alU U_i)) with a latent cluster factor U_i drawn anew in
//   every counterfactual world.
// Both: Y_ij = b0 + bA A + bown M_ij + bspill Mbar_i(-j) + baown A M_ij
//   + baspill A Mbar_i(-j) + bX X_ij + bV V_i + bN N_i + cluster effect + noise,
//   so eta_j is linear in the default outcome features.

#include "crtm/core.hpp"
#include "crtm/estimators.hpp"
#include "crtm/inference.hpp"
#include "crtm/numeric.hpp"
#include "crtm/nuisance.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace crtm {

enum class DgpFamily { linear_gaussian, finite_support };

struct DgpSpec {
  DgpFamily family = DgpFamily::linear_gaussian;
  std::vector<std::size_t> sizes{3, 5, 8};
  std::vector<double> size_probs{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double pi = 0.5;
  // linear_gaussian mediator
  double g0 = 0.0, gA = 0.6, gX = 0.5, gV = 0.3, gN = 0.05, sigma = 1.0, rho = 0.3;
  // finite_support mediator and covariates
  double al0 = -0.5, alA = 1.0, alX = 0.5, alV = 0.3, alN = 0.2, alU = 1.0, pU = 0.5;
  double pV = 0.5, pX0 = 0.3, pX1 = 0.6;
  // outcome
  double b0 = 0.0, bA = 1.0, bown = 1.0, bspill = 1.0, baown = 0.5, baspill = 0.0, bX = 0.5, bV = 0.3, bN = 0.1;
  double cluster_sd = 0.5, noise_sd = 1.0;

  static DgpSpec linear_gaussian() { return {}; }

  static DgpSpec finite_support() {
    DgpSpec d;
    d.family = DgpFamily::finite_support;
    d.sizes = {1, 2, 3};
    d.size_probs = {0.3, 0.3, 0.4};
    return d;
  }

  std::size_t n_max() const { return sizes.empty() ? 0 : *std::max_element(sizes.begin(), sizes.end()); }

  void check() const {
    if (sizes.empty() || sizes.size() != size_probs.size()) throw ValidationError("size distribution needs matching sizes and probabilities");
    double total = 0.0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (sizes[k] < 1) throw ValidationError("cluster sizes must be positive");
      if (size_probs[k] < 0) throw ValidationError("size probabilities must be nonnegative");
      total += size_probs[k];
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("size probabilities must sum to 1");
    if (!(pi >= 0.0 && pi <= 1.0)) throw ValidationError("treatment probability must lie in [0,1]");
    if (family == DgpFamily::linear_gaussian) {
      if (!(sigma > 0)) throw ValidationError("mediator sd must be positive");
      if (!exchangeable_valid(rho, n_max())) throw ValidationError("mediator correlation is not valid for the largest cluster");
    } else {
      for (double p : {pU, pV, pX0, pX1})
        if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("finite-support probabilities must lie in [0,1]");
    }
    if (cluster_sd < 0 || noise_sd < 0) throw ValidationError("outcome noise sds must be nonnegative");
  }
};

namespace detail {

/// The DGP's own conditional laws.
struct TrueModel {
  DgpSpec d;

  bool finite() const { return d.family == DgpFamily::finite_support; }

  double x_of(const ClusterRecord& c, std::size_t k) const { return c.x(static_cast<Eigen::Index>(k), 0); }

  double mean_m(int a, const ClusterRecord& c, std::size_t k) const {
    return d.g0 + d.gA * a + d.gX * x_of(c, k) + d.gV * c.v(0) + d.gN * static_cast<double>(c.size());
  }

  double prob_m(int a, const ClusterRecord& c, std::size_t k, int u) const {
    return logistic(d.al0 + d.alA * a + d.alX * x_of(c, k) + d.alV * c.v(0) + d.alN * static_cast<double>(c.size()) + d.alU * u);
  }

  double eta(int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) const {
    const auto n = m.size();
    double loo = 0.0;
    if (n > 1) {
      for (std::size_t k = 0; k < n; ++k)
        if (k != j) loo += m[k];
      loo /= static_cast<double>(n - 1);
    }
    return d.b0 + d.bA * a + (d.bown + d.baown * a) * m[j] + (d.bspill + d.baspill * a) * loo + d.bX * x_of(c, j) +
           d.bV * c.v(0) + d.bN * static_cast<double>(n);
  }

  /// E[M_k | A = a, C, N].
  double expected(int a, const ClusterRecord& c, std::size_t k) const {
    if (!finite()) return mean_m(a, c, k);
    return (1.0 - d.pU) * prob_m(a, c, k, 0) + d.pU * prob_m(a, c, k, 1);
  }

  std::vector<Marginal> marginals(int a, const ClusterRecord& c) const {
    std::vector<Marginal> out;
    for (std::size_t k = 0; k < c.size(); ++k) {
      if (finite()) {
        const double p = expected(a, c, k);
        out.push_back(Marginal::pmf({0.0, 1.0}, {1.0 - p, p}));
      } else {
        out.push_back(Marginal::gaussian(mean_m(a, c, k), d.sigma));
      }
    }
    return out;
  }

  /// Mixture over U of the product of Bernoulli pmfs, skipping member `skip`.
  double finite_joint(int a, std::span<const double> m, const ClusterRecord& c, std::size_t skip) const {
    double total = 0.0;
    for (int u = 0; u <= 1; ++u) {
      double prod = u == 1 ? d.pU : 1.0 - d.pU;
      for (std::size_t k = 0; k < m.size(); ++k) {
        if (k == skip) continue;
        const double p = prob_m(a, c, k, u);
        prod *= m[k] == 1.0 ? p : m[k] == 0.0 ? 1.0 - p : 0.0;
      }
      total += prod;
    }
    return total;
  }

  double joint(int a, std::span<const double> m, const ClusterRecord& c) const {
    if (finite()) return finite_joint(a, m, c, m.size());
    return CopulaDensity{d.rho}.joint(m, marginals(a, c));
  }

  double others(int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) const {
    if (m.size() <= 1) return 1.0;
    if (finite()) return finite_joint(a, m, c, j);
    return CopulaDensity{d.rho}.others(m, marginals(a, c), j);
  }

  double conditional(int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) const {
    if (finite()) return joint(a, m, c) / others(a, m, c, j);
    return CopulaDensity{d.rho}.conditional(m, marginals(a, c), j);
  }

  double propensity(int a, std::span<const double> m, const ClusterRecord& c) const {
    const double k1 = d.pi * joint(1, m, c);
    const double k0 = (1.0 - d.pi) * joint(0, m, c);
    const double s1 = k1 / (k1 + k0);
    return a == 1 ? s1 : 1.0 - s1;
  }

  /// eta is linear in the mediators, so integrals against a mediator law
  /// reduce to evaluating eta at that law's means.
  double eta_star(int a, int astar, const ClusterRecord& c, std::size_t j) const {
    std::vector<double> mean(c.size());
    for (std::size_t k = 0; k < c.size(); ++k) mean[k] = expected(astar, c, k);
    return eta(a, mean, c, j);
  }

  double eta_dagger(int a, int astar, double mj, const ClusterRecord& c, std::size_t j) const {
    std::vector<double> mean(c.size());
    for (std::size_t k = 0; k < c.size(); ++k) mean[k] = k == j ? mj : expected(astar, c, k);
    return eta(a, mean, c, j);
  }

  /// Mediator draw from latent normals e of length n + 1.
  void sample(int a, const ClusterRecord& c, std::span<const double> e, std::span<double> m) const {
    const auto n = c.size();
    if (finite()) {
      const int u = normal_cdf(e[n]) < d.pU ? 1 : 0;
      for (std::size_t k = 0; k < n; ++k) m[k] = normal_cdf(e[k]) < prob_m(a, c, k, u) ? 1.0 : 0.0;
      return;
    }
    CopulaDensity{d.rho}.sample(e, marginals(a, c), m);
  }
};

/// Draws N, V and X of one cluster.
inline ClusterRecord draw_covariates(const DgpSpec& d, std::mt19937_64& rng) {
  std::discrete_distribution<std::size_t> size_dist(d.size_probs.begin(), d.size_probs.end());
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  ClusterRecord c;
  const auto n = d.sizes[size_dist(rng)];
  c.v.resize(1);
  c.x.resize(static_cast<Eigen::Index>(n), 1);
  if (d.family == DgpFamily::finite_support) {
    c.v(0) = unif(rng) < d.pV ? 1.0 : 0.0;
    const double px = c.v(0) == 1.0 ? d.pX1 : d.pX0;
    for (std::size_t k = 0; k < n; ++k) c.x(static_cast<Eigen::Index>(k), 0) = unif(rng) < px ? 1.0 : 0.0;
  } else {
    c.v(0) = normal(rng);
    for (std::size_t k = 0; k < n; ++k) c.x(static_cast<Eigen::Index>(k), 0) = normal(rng);
  }
  c.m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  c.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  return c;
}

inline MediatorSupport dgp_support(const DgpSpec& d) {
  MediatorSupport s;
  if (d.family == DgpFamily::finite_support) s.values = {0.0, 1.0};
  return s;
}

}  // namespace detail

inline Trial generate_trial(const DgpSpec& dgp, std::size_t K, std::uint64_t seed) {
  dgp.check();
  const detail::TrueModel truth{dgp};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  Trial t;
  t.pi = dgp.pi;
  t.support = detail::dgp_support(dgp);
  for (std::size_t i = 0; i < K; ++i) {
    auto c = detail::draw_covariates(dgp, rng);
    c.id = "c" + std::to_string(i + 1);
    c.a = unif(rng) < dgp.pi ? 1 : 0;
    const auto n = c.size();
    std::vector<double> e(n + 1), m(n);
    for (auto& v : e) v = normal(rng);
    truth.sample(c.a, c, e, m);
    for (std::size_t k = 0; k < n; ++k) c.m(static_cast<Eigen::Index>(k)) = m[k];
    const double b = dgp.cluster_sd * normal(rng);
    for (std::size_t k = 0; k < n; ++k) c.y(static_cast<Eigen::Index>(k)) = truth.eta(c.a, m, c, k) + b + dgp.noise_sd * normal(rng);
    t.clusters.push_back(std::move(c));
  }
  return t;
}

/// Exact nuisance functions of the DGP.
inline NuisanceSet oracle_nuisances(const DgpSpec& dgp) {
  dgp.check();
  auto truth = std::make_shared<const detail::TrueModel>(detail::TrueModel{dgp});
  NuisanceSet ns;
  ns.pi = dgp.pi;
  ns.support = detail::dgp_support(dgp);
  ns.epsilon = 0.0;
  ns.w_max = std::numeric_limits<double>::infinity();
  ns.eta = [truth](int a, const ClusterRecord& c) -> EtaFn {
    return [truth, a, &c](std::span<const double> m, std::size_t j) { return truth->eta(a, m, c, j); };
  };
  ns.marginals = [truth](int a, const ClusterRecord& c) { return truth->marginals(a, c); };
  ns.joint = [truth](int a, std::span<const double> m, const ClusterRecord& c) { return truth->joint(a, m, c); };
  ns.others = [truth](int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) { return truth->others(a, m, c, j); };
  ns.conditional = [truth](int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) {
    return truth->conditional(a, m, c, j);
  };
  ns.propensity = [truth](int a, std::span<const double> m, const ClusterRecord& c) { return truth->propensity(a, m, c); };
  ns.eta_star = [truth](int a, int astar, const ClusterRecord& c, std::size_t j) { return truth->eta_star(a, astar, c, j); };
  ns.eta_dagger = [truth](int a, int astar, double mj, const ClusterRecord& c, std::size_t j) {
    return truth->eta_dagger(a, astar, mj, c, j);
  };
  ns.sampler = [truth](int a, const ClusterRecord& c) -> LatentMap {
    return [truth, a, &c](std::span<const double> e, std::span<double> m) { truth->sample(a, c, e, m); };
  };
  ns.eta_additive = [truth](int a, const ClusterRecord& c) {
    const auto& d = truth->d;
    AdditiveEta out;
    out.base.resize(c.size());
    for (std::size_t j = 0; j < c.size(); ++j)
      out.base[j] = d.b0 + d.bA * a + d.bX * truth->x_of(c, j) + d.bV * c.v(0) + d.bN * static_cast<double>(c.size());
    const double own = d.bown + d.baown * a, others = d.bspill + d.baspill * a;
    out.own.slope = own;
    out.others.slope = others;
    return out;
  };
  ns.summary = {{"oracle", true}};
  return ns;
}

enum class OracleMethod { enumeration, closed_form, mc };

struct OracleTruth {
  PointEstimates values;               // nbar holds E[N]
  std::optional<PointEstimates> se;    // Monte Carlo standard errors
  OracleMethod method = OracleMethod::enumeration;
  std::size_t draws = 0;

  EffectTable effects(const EffectScale& scale = {}) const { return assemble_effects(values, scale); }
  std::vector<double> quantities(const EffectScale& scale = {}) const { return quantity_values(effects(scale)); }
};

namespace detail {

/// Calls f(cluster, probability) for every (N, V, X) configuration of a
/// finite-support DGP.
template <class F>
void for_each_covariate_config(const DgpSpec& d, F&& f) {
  for (std::size_t s = 0; s < d.sizes.size(); ++s) {
    const auto n = d.sizes[s];
    for (int v = 0; v <= 1; ++v) {
      const double pv = v == 1 ? d.pV : 1.0 - d.pV;
      const double px = v == 1 ? d.pX1 : d.pX0;
      for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
        ClusterRecord c;
        c.v = Eigen::VectorXd::Constant(1, v);
        c.x.resize(static_cast<Eigen::Index>(n), 1);
        double p = d.size_probs[s] * pv;
        for (std::size_t k = 0; k < n; ++k) {
          const bool on = (bits >> k) & 1U;
          c.x(static_cast<Eigen::Index>(k), 0) = on ? 1.0 : 0.0;
          p *= on ? px : 1.0 - px;
        }
        c.m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
        c.y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
        if (p > 0) f(c, p);
      }
    }
  }
}

template <class F>
void for_each_binary(std::size_t n, F&& f) {
  std::vector<double> m(n);
  for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
    for (std::size_t k = 0; k < n; ++k) m[k] = ((bits >> k) & 1U) ? 1.0 : 0.0;
    f(std::span<const double>(m));
  }
}

inline void finish_truth(PointEstimates& p, double wsum, double nsum) {
  for (int a = 0; a <= 1; ++a)
    for (int astar = 0; astar <= 1; ++astar) {
      p.theta_C[a][astar] /= wsum;
      p.theta_I[a][astar] /= nsum;
    }
  p.tau_C /= wsum;
  p.tau_I /= nsum;
  p.nbar = nsum / wsum;
}

}  // namespace detail

/// Brute-force sums of the identification formulas over every (N, C, M)
/// configuration of a finite-support DGP.
inline OracleTruth oracle_enumeration(const DgpSpec& dgp) {
  dgp.check();
  if (dgp.family != DgpFamily::finite_support) throw ValidationError("enumeration oracle needs a finite-support DGP");
  const detail::TrueModel truth{dgp};
  OracleTruth out;
  out.method = OracleMethod::enumeration;
  auto& p = out.values;
  double wsum = 0.0, nsum = 0.0;
  detail::for_each_covariate_config(dgp, [&](const ClusterRecord& c, double prob) {
    const auto n = c.size();
    const double nn = static_cast<double>(n);
    double theta[2][2] = {{0, 0}, {0, 0}}, tau = 0.0;
    detail::for_each_binary(n, [&](std::span<const double> m) {
      for (std::size_t j = 0; j < n; ++j) {
        for (int a = 0; a <= 1; ++a)
          for (int astar = 0; astar <= 1; ++astar) theta[a][astar] += truth.joint(astar, m, c) * truth.eta(a, m, c, j);
        const double own = m[j] == 1.0 ? truth.expected(1, c, j) : 1.0 - truth.expected(1, c, j);
        tau += own * truth.others(0, m, c, j) * truth.eta(1, m, c, j);
      }
    });
    for (int a = 0; a <= 1; ++a)
      for (int astar = 0; astar <= 1; ++astar) {
        p.theta_C[a][astar] += prob * theta[a][astar] / nn;
        p.theta_I[a][astar] += prob * theta[a][astar];
      }
    p.tau_C += prob * tau / nn;
    p.tau_I += prob * tau;
    wsum += prob;
    nsum += prob * nn;
  });
  detail::finish_truth(p, wsum, nsum);
  return out;
}

/// Closed form for the linear-gaussian DGP: E[M_k | a, N] = g0 + gA a + gN N
/// because V and X are centred.
inline OracleTruth oracle_closed_form(const DgpSpec& d) {
  d.check();
  if (d.family != DgpFamily::linear_gaussian) throw ValidationError("closed-form oracle needs the linear-gaussian DGP");
  OracleTruth out;
  out.method = OracleMethod::closed_form;
  auto& p = out.values;
  double wsum = 0.0, nsum = 0.0;
  for (std::size_t s = 0; s < d.sizes.size(); ++s) {
    const double n = static_cast<double>(d.sizes[s]);
    const double w = d.size_probs[s];
    const double spill = d.sizes[s] > 1 ? 1.0 : 0.0;
    auto mu = [&](int a) { return d.g0 + d.gA * a + d.gN * n; };
    auto value = [&](int a, int own, int rest) {
      return d.b0 + d.bA * a + d.bN * n + (d.bown + d.baown * a) * mu(own) + spill * (d.bspill + d.baspill * a) * mu(rest);
    };
    for (int a = 0; a <= 1; ++a)
      for (int astar = 0; astar <= 1; ++astar) {
        p.theta_C[a][astar] += w * value(a, astar, astar);
        p.theta_I[a][astar] += w * n * value(a, astar, astar);
      }
    p.tau_C += w * value(1, 1, 0);
    p.tau_I += w * n * value(1, 1, 0);
    wsum += w;
    nsum += w * n;
  }
  detail::finish_truth(p, wsum, nsum);
  return out;
}

/// Monte Carlo oracle from cluster draws with common latent normals across
/// arms; rejects when the largest standard error exceeds `tolerance`.
inline OracleTruth oracle_mc(const DgpSpec& dgp, std::size_t draws, std::uint64_t seed,
                             double tolerance = std::numeric_limits<double>::infinity()) {
  dgp.check();
  if (draws < 2) throw ValidationError("Monte Carlo oracle needs at least two draws");
  const detail::TrueModel truth{dgp};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  // per draw: 5 C-type values (theta 11, 10, 01, 00, tau), each also weighted by n
  std::vector<std::array<double, 5>> vals(draws);
  std::vector<double> sizes(draws);
  for (std::size_t i = 0; i < draws; ++i) {
    auto c = detail::draw_covariates(dgp, rng);
    const auto n = c.size();
    std::vector<double> e(n + 1), e2(n + 1), m0(n), m1(n), r0(n), mix(n);
    for (auto& v : e) v = normal(rng);
    for (auto& v : e2) v = normal(rng);
    truth.sample(0, c, e, m0);
    truth.sample(1, c, e, m1);
    truth.sample(0, c, e2, r0);
    const std::vector<double>* m[2] = {&m0, &m1};
    std::array<double, 5> out{};
    for (std::size_t j = 0; j < n; ++j) {
      for (int a = 0; a <= 1; ++a)
        for (int astar = 0; astar <= 1; ++astar) out[static_cast<std::size_t>(2 * (1 - a) + (1 - astar))] += truth.eta(a, *m[astar], c, j);
      mix = r0;
      mix[j] = m1[j];
      out[4] += truth.eta(1, mix, c, j);
    }
    for (auto& v : out) v /= static_cast<double>(n);
    vals[i] = out;
    sizes[i] = static_cast<double>(n);
  }
  const double D = static_cast<double>(draws);
  double nmean = 0.0;
  for (double n : sizes) nmean += n;
  nmean /= D;
  std::array<double, 5> mc{}, mi{}, sc{}, si{};
  for (std::size_t k = 0; k < 5; ++k) {
    double s = 0.0, sn = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
      s += vals[i][k];
      sn += sizes[i] * vals[i][k];
    }
    mc[k] = s / D;
    mi[k] = sn / D / nmean;
    double vc = 0.0, vi = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
      vc += (vals[i][k] - mc[k]) * (vals[i][k] - mc[k]);
      const double lin = sizes[i] * (vals[i][k] - mi[k]) / nmean;
      vi += lin * lin;
    }
    sc[k] = std::sqrt(vc / (D - 1.0) / D);
    si[k] = std::sqrt(vi / (D - 1.0) / D);
  }
  OracleTruth out;
  out.method = OracleMethod::mc;
  out.draws = draws;
  PointEstimates se;
  auto fill = [&](PointEstimates& p, const std::array<double, 5>& c, const std::array<double, 5>& ind) {
    p.theta_C = {{{c[3], c[2]}, {c[1], c[0]}}};
    p.theta_I = {{{ind[3], ind[2]}, {ind[1], ind[0]}}};
    p.tau_C = c[4];
    p.tau_I = ind[4];
    p.nbar = nmean;
  };
  fill(out.values, mc, mi);
  fill(se, sc, si);
  out.se = se;
  const double worst = *std::max_element(sc.begin(), sc.end());
  const double worst_i = *std::max_element(si.begin(), si.end());
  if (std::max(worst, worst_i) > tolerance)
    throw ValidationError("Monte Carlo oracle standard error " + std::to_string(std::max(worst, worst_i)) +
                          " exceeds the tolerance; use more draws");
  return out;
}

/// Exact truth when available: enumeration (finite support) or closed form.
inline OracleTruth oracle_truth(const DgpSpec& dgp) {
  return dgp.family == DgpFamily::finite_support ? oracle_enumeration(dgp) : oracle_closed_form(dgp);
}

struct WeightedTrial {
  Trial trial;
  std::vector<double> weights;
};

/// Every (N, V, X, A, M) configuration of a finite-support DGP weighted by its
/// probability, with each outcome vector at eta +/- 1 (half weight each), so
/// weighted sample means equal population expectations.
inline WeightedTrial population_trial(const DgpSpec& dgp) {
  dgp.check();
  if (dgp.family != DgpFamily::finite_support) throw ValidationError("population trial needs a finite-support DGP");
  const detail::TrueModel truth{dgp};
  WeightedTrial out;
  out.trial.pi = dgp.pi;
  out.trial.support = detail::dgp_support(dgp);
  std::size_t id = 0;
  detail::for_each_covariate_config(dgp, [&](const ClusterRecord& base, double prob) {
    const auto n = base.size();
    for (int a = 0; a <= 1; ++a) {
      const double pa = a == 1 ? dgp.pi : 1.0 - dgp.pi;
      detail::for_each_binary(n, [&](std::span<const double> m) {
        const double pm = truth.joint(a, m, base);
        for (int sign = -1; sign <= 1; sign += 2) {
          ClusterRecord c = base;
          c.id = "p" + std::to_string(++id);
          c.a = a;
          for (std::size_t k = 0; k < n; ++k) c.m(static_cast<Eigen::Index>(k)) = m[k];
          for (std::size_t k = 0; k < n; ++k) c.y(static_cast<Eigen::Index>(k)) = truth.eta(a, m, c, k) + sign;
          out.trial.clusters.push_back(std::move(c));
          out.weights.push_back(0.5 * prob * pa * pm);
        }
      });
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Scenario runner

/// Working-model corruptions. outcome: drop the others' mediator mean from
/// eta_j. mediator: drop own covariates from kappa_j. copula: force
/// independence. propensity: drop the cluster mediator mean from s.
struct Misspec {
  bool outcome = false;
  bool mediator = false;
  bool copula = false;
  bool propensity = false;

  bool any() const { return outcome || mediator || copula || propensity; }
};

inline NuisanceConfig apply_misspec(NuisanceConfig cfg, const Misspec& m) {
  if (m.outcome) cfg.outcome.mediator_others = false;
  if (m.mediator) cfg.mediator.covariate_own = false;
  if (m.copula) cfg.independence_copula = true;
  if (m.propensity) {
    cfg.propensity.mediator_own = false;
    cfg.propensity.mediator_others = false;
  }
  return cfg;
}

/// Nuisance configuration under which the built-in DGPs are correctly
/// specified by the parametric backend.
inline NuisanceConfig simulation_nuisance_config() {
  NuisanceConfig cfg;
  cfg.propensity_size_interactions = true;
  return cfg;
}

struct ScenarioSpec {
  std::string name = "scenario";
  DgpSpec dgp;
  std::size_t K = 100;
  int replicates = 100;
  std::vector<std::string> estimators{"eif1-par-ns"};
  Misspec misspec;
  EstimatorSpec base;  // family/backend/stabilized come from the labels
  std::optional<InferenceMethod> inference;  // default per backend
  int B = 200;
  double level = 0.95;
  EffectScale scale;
  std::uint64_t seed = 0;
  int threads = 1;

  ScenarioSpec() { base.nuisance = simulation_nuisance_config(); }
};

/// Metrics of one (estimator, quantity) pair.
struct ScenarioResult {
  std::string label;
  std::string quantity;
  double truth = 0.0;
  double mean_estimate = 0.0;
  double bias = 0.0;
  double mc_sd = 0.0;
  double bias_se = 0.0;  // mc_sd / sqrt(replicates)
  double mean_se = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  int replicates = 0;
  int failures = 0;
  bool flagged = false;  // more than 2% failed replicates
};

struct ScenarioOutput {
  std::vector<ScenarioResult> results;
  OracleTruth truth;
  std::vector<std::string> labels;
  // [label][replicate][quantity]; NaN rows for failed replicates
  std::vector<std::vector<std::vector<double>>> estimates, ses, lower, upper;
  std::vector<std::string> log;

  const ScenarioResult& at(const std::string& label, const std::string& quantity) const {
    for (const auto& r : results)
      if (r.label == label && r.quantity == quantity) return r;
    throw ValidationError("no result for " + label + " / " + quantity);
  }
};

inline ScenarioOutput run_scenario(const ScenarioSpec& spec) {
  spec.dgp.check();
  if (spec.replicates < 1) throw ValidationError("a scenario needs at least one replicate");
  const auto L = spec.estimators.size();
  std::vector<EstimatorSpec> specs;
  for (const auto& l : spec.estimators) {
    auto s = parse_label(l, spec.base);
    s.nuisance = apply_misspec(spec.base.nuisance, spec.misspec);
    s.threads = 1;
    s.check();
    specs.push_back(s);
  }
  ScenarioOutput out;
  out.labels = spec.estimators;
  out.truth = oracle_truth(spec.dgp);
  const auto truth = out.truth.quantities(spec.scale);
  const auto Q = truth.size();
  const auto R = static_cast<std::size_t>(spec.replicates);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto blank = [&] { return std::vector<std::vector<std::vector<double>>>(L, std::vector<std::vector<double>>(R, std::vector<double>(Q, nan))); };
  out.estimates = blank();
  out.ses = blank();
  out.lower = blank();
  out.upper = blank();
  std::vector<std::vector<std::string>> logs(R);

  parallel_for(R, spec.threads, [&](std::size_t r) {
    const auto trial = generate_trial(spec.dgp, spec.K, derive_seed(spec.seed, {r, 0}));
    for (const Backend backend : {Backend::parametric, Backend::ml}) {
      std::vector<std::size_t> idx;
      std::vector<Variant> variants;
      for (std::size_t l = 0; l < L; ++l)
        if (specs[l].backend == backend) {
          idx.push_back(l);
          variants.push_back({specs[l].family, specs[l].stabilized});
        }
      if (idx.empty()) continue;
      auto base = specs[idx.front()];
      base.seed = derive_seed(spec.seed, {r, 1});
      const auto method = spec.inference.value_or(default_inference(backend));
      try {
        const auto ests = estimate_variants(trial, base, variants);
        std::vector<InferenceResult> infs;
        if (method == InferenceMethod::cluster_bootstrap) {
          InferenceSpec inf;
          inf.B = spec.B;
          inf.level = spec.level;
          inf.seed = derive_seed(spec.seed, {r, 2});
          infs = bootstrap_variants(trial, base, variants, inf, spec.scale, &ests);
        } else if (method == InferenceMethod::eif_variance) {
          for (const auto& e : ests) infs.push_back(effect_intervals(e, spec.scale, spec.level, trial.size()));
        }
        for (std::size_t v = 0; v < idx.size(); ++v) {
          const auto l = idx[v];
          out.estimates[l][r] = quantity_values(assemble_effects(ests[v].points, spec.scale));
          if (!infs.empty())
            for (std::size_t q = 0; q < Q; ++q) {
              out.ses[l][r][q] = infs[v].intervals[q].se;
              out.lower[l][r][q] = infs[v].intervals[q].lower;
              out.upper[l][r][q] = infs[v].intervals[q].upper;
            }
        }
      } catch (const std::exception& e) {
        logs[r].push_back("replicate " + std::to_string(r) + ": " + e.what());
      }
    }
  });
  for (auto& l : logs)
    for (auto& s : l) out.log.push_back(std::move(s));

  const auto names = quantity_names();
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t q = 0; q < Q; ++q) {
      ScenarioResult res;
      res.label = spec.estimators[l];
      res.quantity = names[q];
      res.truth = truth[q];
      std::vector<double> est;
      double se_sum = 0.0, cover = 0.0;
      int se_count = 0;
      for (std::size_t r = 0; r < R; ++r) {
        const double x = out.estimates[l][r][q];
        if (std::isnan(x)) {
          ++res.failures;
          continue;
        }
        est.push_back(x);
        if (!std::isnan(out.ses[l][r][q])) {
          se_sum += out.ses[l][r][q];
          cover += (out.lower[l][r][q] <= truth[q] && truth[q] <= out.upper[l][r][q]) ? 1.0 : 0.0;
          ++se_count;
        }
      }
      res.replicates = static_cast<int>(est.size());
      res.flagged = static_cast<double>(res.failures) > 0.02 * static_cast<double>(R);
      if (!est.empty()) {
        res.mean_estimate = mean_of(est);
        res.bias = res.mean_estimate - res.truth;
        double ss = 0.0;
        for (double x : est) ss += (x - res.mean_estimate) * (x - res.mean_estimate);
        res.mc_sd = est.size() > 1 ? std::sqrt(ss / static_cast<double>(est.size() - 1)) : 0.0;
        res.bias_se = res.mc_sd / std::sqrt(static_cast<double>(est.size()));
      }
      if (se_count > 0) {
        res.mean_se = se_sum / se_count;
        res.coverage = cover / se_count;
      }
      out.results.push_back(res);
    }
  return out;
}

}  // namespace crtm
