#pragma once

// Auxiliary functions of the efficient influence functions: the density
// ratios w1, w2 and the mediator integrals u1..u4 of the outcome regression.
// Multivariate integrals use Monte Carlo draws from the fitted joint mediator
// law (common random numbers across arms, antithetic pairs) or exact
// enumeration on finite supports; one-dimensional integrals use
// Gauss-Legendre nodes mapped through the marginal quantile function.

#include "crtm/core.hpp"
#include "crtm/numeric.hpp"
#include "crtm/nuisance.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <random>

#include <boost/random/normal_distribution.hpp>
#include <span>
#include <string>
#include <vector>

namespace crtm {

enum class IntegrationMethod { mc, quadrature, enumerate };
enum class Parameterization { eif1, eif2 };

struct IntegrationPlan {
  IntegrationMethod method = IntegrationMethod::mc;
  int draws = 4000;
  std::uint64_t seed = 0;
  int nodes = 64;
  bool antithetic = true;
  std::size_t enumeration_cap = std::size_t{1} << 20;

  void check() const {
    if (method == IntegrationMethod::mc && draws < 1000) throw ValidationError("Monte Carlo integration needs at least 1000 draws");
    if (nodes < 16) throw ValidationError("quadrature needs at least 16 nodes");
  }
};

/// Weighted mediator configurations standing in for an integral.
struct DrawSet {
  std::size_t n = 0;
  std::vector<double> weights;
  std::vector<double> values;  // row-major, count x n

  std::size_t count() const { return weights.size(); }
  std::span<const double> row(std::size_t d) const { return {values.data() + d * n, n}; }
};

/// Latent independent normals, count x (n + 1); antithetic rows mirror the
/// first half.
inline std::vector<double> latent_normals(std::size_t count, std::size_t n, std::uint64_t seed, bool antithetic) {
  const std::size_t width = n + 1;
  std::vector<double> e(count * width);
  std::mt19937_64 rng(seed);
  boost::random::normal_distribution<double> normal;
  const std::size_t half = antithetic ? (count + 1) / 2 : count;
  for (std::size_t d = 0; d < half; ++d)
    for (std::size_t k = 0; k < width; ++k) e[d * width + k] = normal(rng);
  for (std::size_t d = half; d < count; ++d)
    for (std::size_t k = 0; k < width; ++k) e[d * width + k] = -e[(d - half) * width + k];
  return e;
}

inline DrawSet draws_from_latent(const LatentMap& map, const std::vector<double>& e, std::size_t count, std::size_t n) {
  DrawSet out;
  out.n = n;
  out.weights.assign(count, 1.0 / static_cast<double>(count));
  out.values.resize(count * n);
  for (std::size_t d = 0; d < count; ++d)
    map(std::span<const double>(e.data() + d * (n + 1), n + 1), std::span<double>(out.values.data() + d * n, n));
  return out;
}

/// count x n matrix of mediator draws from kappa(a, ., c, n).
inline Eigen::MatrixXd sample_mediators(const NuisanceSet& ns, int a, const ClusterRecord& c, std::size_t count,
                                        std::uint64_t seed, bool antithetic = false) {
  ns.require({"sampler"});
  const auto n = c.size();
  const auto e = latent_normals(count, n, seed, antithetic);
  const auto set = draws_from_latent(ns.sampler(a, c), e, count, n);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(n));
  for (std::size_t d = 0; d < count; ++d)
    for (std::size_t k = 0; k < n; ++k) out(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k)) = set.values[d * n + k];
  return out;
}

/// Values of the auxiliary functions needed by one cluster's scores.
struct AuxValues {
  std::array<std::array<std::vector<double>, 2>, 2> u1;  // [a][a*][j]
  std::vector<double> u2;                                // u2(1, 0, M_j)
  std::vector<double> u3;                                // u3(1, 1, M_(-j))
  std::vector<double> u4;                                // u4(1, 1, 0)
  std::array<std::array<double, 2>, 2> w1{};             // w1(a, a*, M)
  std::vector<double> w2;                                // w2(1, 0, 1, M) per member
};

struct ClusterAux {
  std::array<std::vector<double>, 2> eta_obs;  // eta_j(a, M_obs)
  AuxValues eif1, eif2;
  bool has_eif1 = false;
  bool has_eif2 = false;
};

class AuxEvaluator {
 public:
  AuxEvaluator(const NuisanceSet& ns, IntegrationPlan plan, Parameterization param)
      : ns_(ns), plan_(plan), param_(param), rule_(gauss_legendre_unit(plan.nodes)) {
    plan_.check();
    if (param == Parameterization::eif1) {
      ns_.require({"eta", "kappa", "kappa_j", "kappa_minus_j"});
    } else {
      ns_.require({"eta", "s", "kappa_j", "kappa_j_cond", "eta_star", "eta_dagger"});
    }
  }

  const NuisanceSet& nuisances() const { return ns_; }
  const IntegrationPlan& plan() const { return plan_; }
  Parameterization parameterization() const { return param_; }

  bool enumerates(std::size_t n) const {
    if (!ns_.support.finite()) {
      if (plan_.method == IntegrationMethod::enumerate)
        throw ValidationError("enumeration integration needs a finite mediator support");
      return false;
    }
    double configs = std::pow(static_cast<double>(ns_.support.values.size()), static_cast<double>(n));
    return configs <= static_cast<double>(plan_.enumeration_cap);
  }

  /// Every configuration of the finite support, weighted by kappa(a, m).
  DrawSet enumerate_joint(int a, const ClusterRecord& c) const {
    const auto n = c.size();
    DrawSet out;
    out.n = n;
    for_each_config(n, [&](std::span<const double> m) {
      out.weights.push_back(ns_.joint(a, m, c));
      out.values.insert(out.values.end(), m.begin(), m.end());
    });
    return out;
  }

  /// Draws from kappa(a) built from latent normals (MC) or the enumeration.
  DrawSet joint_draws(int a, const ClusterRecord& c, const std::vector<double>& latent, std::size_t count) const {
    if (enumerates(c.size())) return enumerate_joint(a, c);
    ns_.require({"sampler"});
    return draws_from_latent(ns_.sampler(a, c), latent, count, c.size());
  }

  // -- density ratios ------------------------------------------------------

  double w1(int a, int astar, std::span<const double> m, const ClusterRecord& c) const {
    double w;
    if (param_ == Parameterization::eif1) {
      const double den = ns_.joint(a, m, c);
      if (!(den > 0)) throw EstimationError("w1: zero mediator density in denominator for cluster '" + c.id + "'");
      w = ns_.joint(astar, m, c) / den;
    } else {
      const double den = ns_.propensity(a, m, c);
      if (!(den > 0)) throw EstimationError("w1: zero propensity in denominator for cluster '" + c.id + "'");
      w = ns_.propensity(astar, m, c) / den * ns_.arm_probability(a) / ns_.arm_probability(astar);
    }
    return clip(w);
  }

  double w2(int a, int astar, int aprime, std::span<const double> m, const ClusterRecord& c, std::size_t j) const {
    const double kj = ns_.marginals(a, c)[j].density(m[j]);
    double w;
    if (param_ == Parameterization::eif1) {
      const double den = ns_.joint(aprime, m, c);
      if (!(den > 0)) throw EstimationError("w2: zero mediator density in denominator for cluster '" + c.id + "'");
      w = kj * ns_.others(astar, m, c, j) / den;
    } else {
      const double cond = ns_.conditional(astar, m, c, j);
      const double sp = ns_.propensity(aprime, m, c);
      if (!(cond > 0) || !(sp > 0)) throw EstimationError("w2: zero density in denominator for cluster '" + c.id + "'");
      w = kj / cond * ns_.propensity(astar, m, c) / sp * ns_.arm_probability(aprime) / ns_.arm_probability(astar);
    }
    return clip(w);
  }

  // -- integrals -----------------------------------------------------------

  /// u1(a, a*, c, n) for member j.
  double u1(int a, int astar, const ClusterRecord& c, std::size_t j, std::uint64_t stream = 0) const {
    if (param_ == Parameterization::eif2) return ns_.eta_star(a, astar, c, j);
    const auto count = static_cast<std::size_t>(plan_.draws);
    const auto e = latent_normals(count, c.size(), derive_seed(plan_.seed, {stream, 1}), plan_.antithetic);
    const auto set = joint_draws(astar, c, e, count);
    const auto f = ns_.eta(a, c);
    double total = 0.0;
    for (std::size_t d = 0; d < set.count(); ++d) total += set.weights[d] * f(set.row(d), j);
    return total;
  }

  /// u2(a, a*, m_j, c, n): others' mediators integrated over kappa_(-j)(a*).
  double u2(int a, int astar, double mj, const ClusterRecord& c, std::size_t j, std::uint64_t stream = 0) const {
    if (param_ == Parameterization::eif2) return ns_.eta_dagger(a, astar, mj, c, j);
    const auto n = c.size();
    const auto f = ns_.eta(a, c);
    std::vector<double> buf(n);
    double total = 0.0;
    if (enumerates(n)) {
      for_each_config(n, [&](std::span<const double> m) {
        if (m[j] != ns_.support.values.front()) return;
        std::copy(m.begin(), m.end(), buf.begin());
        buf[j] = mj;
        total += ns_.others(astar, buf, c, j) * f(buf, j);
      });
      return total;
    }
    const auto count = static_cast<std::size_t>(plan_.draws);
    const auto e = latent_normals(count, n, derive_seed(plan_.seed, {stream, 1}), plan_.antithetic);
    const auto set = joint_draws(astar, c, e, count);
    for (std::size_t d = 0; d < set.count(); ++d) {
      const auto r = set.row(d);
      std::copy(r.begin(), r.end(), buf.begin());
      buf[j] = mj;
      total += set.weights[d] * f(buf, j);
    }
    return total;
  }

  /// u3(a, a*, m_(-j), c, n): member j's mediator integrated over kappa_j(a*);
  /// coordinate j of `m` is ignored.
  double u3(int a, int astar, std::span<const double> m, const ClusterRecord& c, std::size_t j) const {
    const auto f = ns_.eta(a, c);
    const auto marg = ns_.marginals(astar, c)[j];
    std::vector<double> buf(m.begin(), m.end());
    return integrate_member(marg, [&](double t) {
      buf[j] = t;
      return f(buf, j);
    });
  }

  /// u4(a, a*, a', c, n): member j over kappa_j(a*), others over kappa_(-j)(a').
  double u4(int a, int astar, int aprime, const ClusterRecord& c, std::size_t j, std::uint64_t stream = 0) const {
    if (param_ == Parameterization::eif2) {
      const auto marg = ns_.marginals(astar, c)[j];
      return integrate_member(marg, [&](double t) { return ns_.eta_dagger(a, aprime, t, c, j); });
    }
    const auto n = c.size();
    const auto f = ns_.eta(a, c);
    if (enumerates(n)) {
      const auto margs = ns_.marginals(astar, c);
      double total = 0.0;
      for_each_config(n, [&](std::span<const double> m) { total += margs[j].density(m[j]) * ns_.others(aprime, m, c, j) * f(m, j); });
      return total;
    }
    const auto count = static_cast<std::size_t>(plan_.draws);
    const auto e = latent_normals(count, n, derive_seed(plan_.seed, {stream, 1}), plan_.antithetic);
    const auto e2 = latent_normals(count, n, derive_seed(plan_.seed, {stream, 2}), plan_.antithetic);
    const auto own = joint_draws(astar, c, e, count);
    const auto rest = joint_draws(aprime, c, e2, count);
    std::vector<double> buf(n);
    double total = 0.0;
    for (std::size_t d = 0; d < count; ++d) {
      const auto r = rest.row(d);
      std::copy(r.begin(), r.end(), buf.begin());
      buf[j] = own.row(d)[j];
      total += f(buf, j);
    }
    return total / static_cast<double>(count);
  }

  /// Everything the cluster's scores need; `index` seeds the Monte Carlo
  /// draws so results do not depend on evaluation order.
  ClusterAux evaluate(const ClusterRecord& c, std::size_t index) const {
    ClusterAux out;
    const auto n = c.size();
    const std::span<const double> mobs(c.m.data(), n);
    std::array<EtaFn, 2> eta{ns_.eta(0, c), ns_.eta(1, c)};
    for (int a = 0; a <= 1; ++a) {
      out.eta_obs[a].resize(n);
      for (std::size_t j = 0; j < n; ++j) out.eta_obs[a][j] = eta[a](mobs, j);
    }
    AuxValues& v = param_ == Parameterization::eif1 ? out.eif1 : out.eif2;
    (param_ == Parameterization::eif1 ? out.has_eif1 : out.has_eif2) = true;

    for (int a = 0; a <= 1; ++a)
      for (int astar = 0; astar <= 1; ++astar) v.w1[a][astar] = w1(a, astar, mobs, c);
    v.w2.resize(n);
    for (std::size_t j = 0; j < n; ++j) v.w2[j] = w2(1, 0, 1, mobs, c, j);
    v.u3.resize(n);
    for (std::size_t j = 0; j < n; ++j) v.u3[j] = u3(1, 1, mobs, c, j);

    for (auto& row : v.u1)
      for (auto& cell : row) cell.assign(n, 0.0);
    v.u2.assign(n, 0.0);
    v.u4.assign(n, 0.0);

    if (param_ == Parameterization::eif2) {
      for (int a = 0; a <= 1; ++a)
        for (int astar = 0; astar <= 1; ++astar)
          for (std::size_t j = 0; j < n; ++j) v.u1[a][astar][j] = ns_.eta_star(a, astar, c, j);
      for (std::size_t j = 0; j < n; ++j) {
        v.u2[j] = ns_.eta_dagger(1, 0, mobs[j], c, j);
        v.u4[j] = u4(1, 1, 0, c, j);
      }
      return out;
    }

    std::vector<double> buf(n);
    if (enumerates(n)) {
      const auto joint0 = enumerate_joint(0, c);
      const auto joint1 = enumerate_joint(1, c);
      const std::array<const DrawSet*, 2> joint{&joint0, &joint1};
      for (int a = 0; a <= 1; ++a)
        for (int astar = 0; astar <= 1; ++astar)
          for (std::size_t d = 0; d < joint[astar]->count(); ++d) {
            const auto m = joint[astar]->row(d);
            const double w = joint[astar]->weights[d];
            for (std::size_t j = 0; j < n; ++j) v.u1[a][astar][j] += w * eta[a](m, j);
          }
      const auto margs1 = ns_.marginals(1, c);
      for (std::size_t j = 0; j < n; ++j) {
        for_each_config(n, [&](std::span<const double> m) {
          const double rest = ns_.others(0, m, c, j);
          v.u4[j] += margs1[j].density(m[j]) * rest * eta[1](m, j);
          if (m[j] == mobs[j]) v.u2[j] += rest * eta[1](m, j);
        });
      }
      return out;
    }

    ns_.require({"sampler"});
    const auto count = static_cast<std::size_t>(plan_.draws);
    const auto e = latent_normals(count, n, derive_seed(plan_.seed, {index, 1}), plan_.antithetic);
    const auto e2 = latent_normals(count, n, derive_seed(plan_.seed, {index, 2}), plan_.antithetic);
    const auto draws0 = draws_from_latent(ns_.sampler(0, c), e, count, n);
    const auto draws1 = draws_from_latent(ns_.sampler(1, c), e, count, n);
    const auto rest0 = draws_from_latent(ns_.sampler(0, c), e2, count, n);
    const std::array<const DrawSet*, 2> draws{&draws0, &draws1};
    const double inv = 1.0 / static_cast<double>(count);
    if (ns_.eta_additive && !additive_disabled_) {
      integrate_additive(v, draws0, draws1, rest0, mobs, c);
      return out;
    }
    for (int a = 0; a <= 1; ++a)
      for (int astar = 0; astar <= 1; ++astar) {
        auto& cell = v.u1[a][astar];
        for (std::size_t d = 0; d < count; ++d) {
          const auto m = draws[astar]->row(d);
          for (std::size_t j = 0; j < n; ++j) cell[j] += eta[a](m, j);
        }
        for (auto& x : cell) x *= inv;
      }
    for (std::size_t j = 0; j < n; ++j) {
      double s2 = 0.0, s4 = 0.0;
      for (std::size_t d = 0; d < count; ++d) {
        const auto r0 = draws0.row(d);
        std::copy(r0.begin(), r0.end(), buf.begin());
        buf[j] = mobs[j];
        s2 += eta[1](buf, j);
        const auto r = rest0.row(d);
        std::copy(r.begin(), r.end(), buf.begin());
        buf[j] = draws1.row(d)[j];
        s4 += eta[1](buf, j);
      }
      v.u2[j] = s2 * inv;
      v.u4[j] = s4 * inv;
    }
    return out;
  }

  /// Forces the generic per-member evaluation of eta (for cross-checks).
  void disable_additive_path() { additive_disabled_ = true; }

 private:
  const NuisanceSet& ns_;
  IntegrationPlan plan_;
  Parameterization param_;
  QuadratureRule rule_;
  bool additive_disabled_ = false;

  static double loo_mean(std::span<const double> m, double total, std::size_t j) {
    const auto n = m.size();
    return n > 1 ? (total - m[j]) / static_cast<double>(n - 1) : 0.0;
  }

  /// Monte Carlo integrals for an outcome model additive in the own mediator
  /// and the others' mean: each summary's contribution is evaluated once per
  /// draw and member and shared by u1, u2 and u4.
  void integrate_additive(AuxValues& v, const DrawSet& draws0, const DrawSet& draws1, const DrawSet& rest0,
                          std::span<const double> mobs, const ClusterRecord& c) const {
    const auto n = c.size();
    const auto count = draws0.count();
    const std::array<AdditiveEta, 2> f{ns_.eta_additive(0, c), ns_.eta_additive(1, c)};
    const std::array<const DrawSet*, 2> draws{&draws0, &draws1};
    std::vector<double> own_obs(n);
    for (std::size_t j = 0; j < n; ++j) own_obs[j] = f[1].own(mobs[j]);
    for (std::size_t d = 0; d < count; ++d) {
      double own1_on_draw1[64];
      std::vector<double> heap;
      double* own11 = own1_on_draw1;
      if (n > 64) {
        heap.resize(n);
        own11 = heap.data();
      }
      for (int astar = 1; astar >= 0; --astar) {
        const auto m = draws[astar]->row(d);
        double total = 0.0;
        for (double x : m) total += x;
        for (std::size_t j = 0; j < n; ++j) {
          const double loo = loo_mean(m, total, j);
          for (int a = 0; a <= 1; ++a) {
            const double o = f[a].own(m[j]);
            const double h = f[a].others(loo);
            v.u1[a][astar][j] += f[a].link(f[a].base[j] + o + h);
            if (a == 1 && astar == 1) own11[j] = o;
            if (a == 1 && astar == 0) v.u2[j] += f[1].link(f[1].base[j] + own_obs[j] + h);
          }
        }
      }
      const auto r = rest0.row(d);
      double total = 0.0;
      for (double x : r) total += x;
      for (std::size_t j = 0; j < n; ++j) v.u4[j] += f[1].link(f[1].base[j] + own11[j] + f[1].others(loo_mean(r, total, j)));
    }
    const double inv = 1.0 / static_cast<double>(count);
    for (auto& row : v.u1)
      for (auto& cell : row)
        for (auto& x : cell) x *= inv;
    for (auto& x : v.u2) x *= inv;
    for (auto& x : v.u4) x *= inv;
  }

  double clip(double w) const {
    if (!std::isfinite(w)) throw EstimationError("non-finite density ratio");
    if (w > ns_.w_max) {
      ++ns_.clips->weight;
      return ns_.w_max;
    }
    return std::max(w, 0.0);
  }

  template <class F>
  void for_each_config(std::size_t n, F&& f) const {
    const auto& vals = ns_.support.values;
    const auto levels = vals.size();
    std::vector<std::size_t> idx(n, 0);
    std::vector<double> m(n, vals.front());
    while (true) {
      f(std::span<const double>(m));
      std::size_t k = 0;
      while (k < n) {
        if (++idx[k] < levels) {
          m[k] = vals[idx[k]];
          break;
        }
        idx[k] = 0;
        m[k] = vals.front();
        ++k;
      }
      if (k == n) break;
    }
  }

  template <class F>
  double integrate_member(const Marginal& marg, F&& f) const {
    double total = 0.0;
    if (marg.discrete) {
      for (std::size_t k = 0; k < marg.values.size(); ++k)
        if (marg.probs[k] > 0) total += marg.probs[k] * f(marg.values[k]);
      return total;
    }
    for (std::size_t k = 0; k < rule_.nodes.size(); ++k) total += rule_.weights[k] * f(marg.quantile(rule_.nodes[k]));
    return total;
  }
};

}  // namespace crtm
