#pragma once

// Nuisance functions: outcome regression, marginal mediator densities, the
// exchangeable Gaussian copula, the cluster-level treatment propensity and the
// two sequential regressions used by the reparameterized estimators. All of
// them are exposed through NuisanceSet, a bundle of plain function objects,
// so exact oracle functions can be injected in place of fitted ones.

#include "crtm/copula.hpp"
#include "crtm/core.hpp"
#include "crtm/glm.hpp"
#include "crtm/learner.hpp"
#include "crtm/numeric.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace crtm {

/// Conditional law of one member's mediator: normal, or a pmf on a finite set.
struct Marginal {
  bool discrete = false;
  double mu = 0.0;
  double sd = 1.0;
  std::vector<double> values;
  std::vector<double> probs;

  static Marginal gaussian(double mu, double sd) { return Marginal{false, mu, sd, {}, {}}; }
  static Marginal pmf(std::vector<double> values, std::vector<double> probs) {
    return Marginal{true, 0.0, 1.0, std::move(values), std::move(probs)};
  }

  double density(double m) const {
    if (!discrete) return normal_pdf((m - mu) / sd) / sd;
    for (std::size_t k = 0; k < values.size(); ++k)
      if (values[k] == m) return probs[k];
    return 0.0;
  }

  double cdf(double m) const {
    if (!discrete) return normal_cdf((m - mu) / sd);
    double total = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k)
      if (values[k] <= m) total += probs[k];
    return std::min(total, 1.0);
  }

  double quantile(double u) const {
    if (!discrete) return mu + sd * normal_quantile(u);
    double total = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) {
      total += probs[k];
      if (u <= total) return values[k];
    }
    return values.back();
  }

  /// Mediator value whose normal score is z.
  double from_latent(double z) const { return discrete ? quantile(normal_cdf(z)) : mu + sd * z; }

  /// Normal score of a continuous mediator value.
  double latent(double m) const { return discrete ? normal_quantile(cdf(m)) : (m - mu) / sd; }

  double mean() const {
    if (!discrete) return mu;
    double total = 0.0;
    for (std::size_t k = 0; k < values.size(); ++k) total += values[k] * probs[k];
    return total;
  }
};

/// Joint, leave-one-out and conditional mediator densities implied by the
/// marginals and an exchangeable Gaussian copula. Discrete marginals are only
/// combined under independence (rho = 0).
struct CopulaDensity {
  double rho = 0.0;

  static bool any_discrete(const std::vector<Marginal>& margs) {
    for (const auto& g : margs)
      if (g.discrete) return true;
    return false;
  }

  double joint(std::span<const double> m, const std::vector<Marginal>& margs) const {
    const auto n = m.size();
    if (rho == 0.0 || any_discrete(margs)) {
      double out = 1.0;
      for (std::size_t k = 0; k < n; ++k) out *= margs[k].density(m[k]);
      return out;
    }
    std::vector<double> z(n);
    double log_jac = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      z[k] = margs[k].latent(m[k]);
      log_jac -= std::log(margs[k].sd);
    }
    return std::exp(exchangeable_log_density(z, rho) + log_jac);
  }

  /// Density of the mediators other than member j (coordinate j is ignored).
  double others(std::span<const double> m, const std::vector<Marginal>& margs, std::size_t j) const {
    const auto n = m.size();
    if (n <= 1) return 1.0;
    if (rho == 0.0 || any_discrete(margs)) {
      double out = 1.0;
      for (std::size_t k = 0; k < n; ++k)
        if (k != j) out *= margs[k].density(m[k]);
      return out;
    }
    std::vector<double> z;
    z.reserve(n - 1);
    double log_jac = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == j) continue;
      z.push_back(margs[k].latent(m[k]));
      log_jac -= std::log(margs[k].sd);
    }
    return std::exp(exchangeable_log_density(z, rho) + log_jac);
  }

  /// Density of member j's mediator given the others.
  double conditional(std::span<const double> m, const std::vector<Marginal>& margs, std::size_t j) const {
    const auto n = m.size();
    if (n <= 1 || rho == 0.0 || any_discrete(margs)) return margs[j].density(m[j]);
    std::vector<double> z(n);
    for (std::size_t k = 0; k < n; ++k) z[k] = margs[k].latent(m[k]);
    const auto c = exchangeable_conditional(z, j, rho);
    return normal_pdf((z[j] - c.mean) / c.sd) / (c.sd * margs[j].sd);
  }

  /// Mediator draw from latent independent normals e (length >= n).
  void sample(std::span<const double> e, const std::vector<Marginal>& margs, std::span<double> m) const {
    const auto n = m.size();
    if (rho == 0.0) {
      for (std::size_t k = 0; k < n; ++k) m[k] = margs[k].from_latent(e[k]);
      return;
    }
    exchangeable_correlate(e.first(n), rho, m);
    for (std::size_t k = 0; k < n; ++k) m[k] = margs[k].from_latent(m[k]);
  }
};

/// Counts of clipping events; shared by every evaluator of one fit.
struct ClipCounter {
  std::atomic<long long> propensity{0};
  std::atomic<long long> weight{0};
  std::atomic<long long> ratio{0};
};

/// eta_j(a, m, c, n) bound to one cluster and one treatment level.
using EtaFn = std::function<double(std::span<const double> m, std::size_t j)>;
/// Maps latent independent normals (length n + 1) to a mediator draw.
using LatentMap = std::function<void(std::span<const double> e, std::span<double> m)>;

/// eta_j(a, m) = link(base[j] + own(m_j) + others(mean of m_(-j))), with the
/// leave-one-out mean 0 for singletons. Outcome models that are additive in
/// the two mediator summaries expose this form for fast integration.
/// Function that is a cubic polynomial between consecutive breakpoints
/// (and beyond the outermost ones), stored in local coordinates.
struct PiecewiseCubic {
  std::vector<double> breaks;                 // sorted, at least one
  std::vector<std::array<double, 4>> coef;    // breaks.size() + 1 pieces

  /// Interpolates f at four points per piece; exact when f is piecewise cubic
  /// with the given breakpoints.
  template <class F>
  static PiecewiseCubic interpolate(F&& f, std::vector<double> breaks) {
    std::sort(breaks.begin(), breaks.end());
    breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());
    PiecewiseCubic pc;
    pc.breaks = breaks;
    const auto K = breaks.size();
    for (std::size_t piece = 0; piece <= K; ++piece) {
      double left, h;
      if (piece == 0) {
        left = breaks.front();
        h = -1.0;
      } else if (piece == K) {
        left = breaks.back();
        h = 1.0;
      } else {
        left = breaks[piece - 1];
        h = breaks[piece] - left;
      }
      // Newton form on u = 0, h/3, 2h/3, h, converted to monomials in u
      const double u[4] = {0.0, h / 3.0, 2.0 * h / 3.0, h};
      double dd[4];
      for (int k = 0; k < 4; ++k) dd[k] = f(left + u[k]);
      for (int level = 1; level < 4; ++level)
        for (int k = 3; k >= level; --k) dd[k] = (dd[k] - dd[k - 1]) / (u[k] - u[k - level]);
      std::array<double, 4> c{dd[3], 0.0, 0.0, 0.0};  // Horner expansion of the Newton form
      for (int k = 2; k >= 0; --k) {
        // c(u) <- c(u) * (u - u[k]) + dd[k]
        std::array<double, 4> next{};
        for (int p = 3; p >= 1; --p) next[static_cast<std::size_t>(p)] = c[static_cast<std::size_t>(p - 1)] - u[k] * c[static_cast<std::size_t>(p)];
        next[0] = -u[k] * c[0] + dd[k];
        c = next;
      }
      pc.coef.push_back(c);
    }
    return pc;
  }

  double operator()(double t) const {
    const auto it = std::upper_bound(breaks.begin(), breaks.end(), t);
    const auto piece = static_cast<std::size_t>(it - breaks.begin());
    const double left = piece == 0 ? breaks.front() : breaks[piece - 1];
    const double u = t - left;
    const auto& c = coef[piece];
    return ((c[3] * u + c[2]) * u + c[1]) * u + c[0];
  }
};

struct AdditiveEta {
  /// offset + slope * t unless a piecewise cubic or a general function is set.
  struct Curve {
    double slope = 0.0, offset = 0.0;
    std::shared_ptr<const PiecewiseCubic> cubic;
    std::function<double(double)> f;
    double operator()(double t) const { return cubic ? (*cubic)(t) : f ? f(t) : offset + slope * t; }
  };

  std::vector<double> base;
  Curve own;
  Curve others;
  bool logit = false;

  double link(double eta) const { return logit ? std::clamp(logistic(eta), 1e-12, 1.0 - 1e-12) : eta; }

  double operator()(std::span<const double> m, std::size_t j) const {
    const auto n = m.size();
    double loo = 0.0;
    if (n > 1) {
      for (std::size_t k = 0; k < n; ++k)
        if (k != j) loo += m[k];
      loo /= static_cast<double>(n - 1);
    }
    return link(base[j] + own(m[j]) + others(loo));
  }
};

struct NuisanceSet {
  double pi = 0.5;
  MediatorSupport support;
  double epsilon = 0.01;
  double w_max = 50.0;

  std::function<EtaFn(int a, const ClusterRecord& c)> eta;
  std::function<std::vector<Marginal>(int a, const ClusterRecord& c)> marginals;
  std::function<double(int a, std::span<const double> m, const ClusterRecord& c)> joint;
  std::function<double(int a, std::span<const double> m, const ClusterRecord& c, std::size_t j)> others;
  std::function<double(int a, std::span<const double> m, const ClusterRecord& c, std::size_t j)> conditional;
  std::function<double(int a, std::span<const double> m, const ClusterRecord& c)> propensity;
  std::function<double(int a, int astar, const ClusterRecord& c, std::size_t j)> eta_star;
  std::function<double(int a, int astar, double mj, const ClusterRecord& c, std::size_t j)> eta_dagger;
  std::function<LatentMap(int a, const ClusterRecord& c)> sampler;
  std::function<AdditiveEta(int a, const ClusterRecord& c)> eta_additive;  // optional

  std::shared_ptr<ClipCounter> clips = std::make_shared<ClipCounter>();
  nlohmann::json summary = nlohmann::json::object();
  std::vector<std::string> warnings;

  std::vector<std::string> available() const {
    std::vector<std::string> out;
    if (eta) out.emplace_back("eta");
    if (joint) out.emplace_back("kappa");
    if (marginals) out.emplace_back("kappa_j");
    if (others) out.emplace_back("kappa_minus_j");
    if (conditional) out.emplace_back("kappa_j_cond");
    if (propensity) out.emplace_back("s");
    if (eta_star) out.emplace_back("eta_star");
    if (eta_dagger) out.emplace_back("eta_dagger");
    if (sampler) out.emplace_back("sampler");
    return out;
  }

  bool has(const std::string& name) const {
    const auto av = available();
    return std::find(av.begin(), av.end(), name) != av.end();
  }

  void require(std::initializer_list<const char*> names) const {
    std::string missing;
    for (const char* n : names)
      if (!has(n)) missing += (missing.empty() ? "" : ", ") + std::string(n);
    if (!missing.empty()) throw ValidationError("nuisance set lacks required members: " + missing);
  }

  /// pi^a (1 - pi)^(1 - a)
  double arm_probability(int a) const { return a == 1 ? pi : 1.0 - pi; }
};

/// Fills joint, leave-one-out, conditional and sampler members from
/// `marginals` and an exchangeable Gaussian copula with correlation rho.
inline void attach_copula(NuisanceSet& ns, double rho) {
  if (!ns.marginals) throw ValidationError("attach_copula needs the marginal mediator densities");
  const auto margs = ns.marginals;
  const CopulaDensity cop{rho};
  ns.joint = [margs, cop](int a, std::span<const double> m, const ClusterRecord& c) { return cop.joint(m, margs(a, c)); };
  ns.others = [margs, cop](int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) {
    return cop.others(m, margs(a, c), j);
  };
  ns.conditional = [margs, cop](int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) {
    return cop.conditional(m, margs(a, c), j);
  };
  ns.sampler = [margs, cop](int a, const ClusterRecord& c) -> LatentMap {
    auto g = std::make_shared<const std::vector<Marginal>>(margs(a, c));
    return [g, cop](std::span<const double> e, std::span<double> m) { cop.sample(e, *g, m); };
  };
}

struct NuisanceConfig {
  SummaryConfig outcome;                 // features of eta_j
  bool outcome_interactions = true;      // treatment x mediator-summary terms
  Family outcome_family = Family::gaussian;
  SummaryConfig mediator = SummaryConfig::covariates_only();  // features of kappa_j
  SummaryConfig propensity;              // cluster-level features of s
  bool propensity_size_interactions = false;
  SummaryConfig regression = SummaryConfig::covariates_only();  // features of eta* and eta-dagger
  bool independence_copula = false;
  double epsilon = 0.01;
  double w_max = 50.0;
  LearnerConfig learner;
};

namespace detail {

inline Eigen::Map<const Eigen::VectorXd> as_vector(std::span<const double> s) {
  return {s.data(), static_cast<Eigen::Index>(s.size())};
}

inline std::span<const double> span_of(const Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

inline nlohmann::json model_json(const AdditiveModel& m) {
  nlohmann::json j;
  j["intercept"] = m.intercept;
  nlohmann::json cols = nlohmann::json::array();
  for (std::size_t c = 0; c < m.columns.size(); ++c) {
    const auto& b = m.columns[c];
    nlohmann::json col;
    col["name"] = c < m.names.size() ? m.names[c] : "column " + std::to_string(c);
    col["active"] = b.active;
    if (b.active) {
      col["spline"] = b.spline;
      if (!b.spline) col["coefficient"] = m.coef[b.offset] / b.scale;
      else col["knots"] = b.knots.size();
    }
    cols.push_back(col);
  }
  j["columns"] = cols;
  if (m.family == Family::gaussian) j["residual_sd"] = m.residual_sd;
  j["lambda"] = m.lambda;
  j["edf"] = m.edf;
  j["converged"] = m.converged;
  if (!m.warnings.empty()) j["warnings"] = m.warnings;
  return j;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Outcome regression eta_j(a, m, c, n)

class OutcomeModel {
 public:
  AdditiveModel model;
  SummaryConfig cfg;
  bool interactions = true;
  std::size_t dim_v = 0, dim_x = 0;
  int col_own = -1, col_others = -1, col_a_own = -1, col_a_others = -1;

  std::size_t width() const {
    return 1 + feature_count(cfg, dim_v, dim_x) + (interactions ? (cfg.mediator_own ? 1 : 0) + (cfg.mediator_others ? 1 : 0) : 0);
  }

  std::vector<std::string> column_names() const {
    std::vector<std::string> names{"A"};
    for (auto& n : feature_names(cfg, dim_v, dim_x)) names.push_back(n);
    if (interactions) {
      if (cfg.mediator_own) names.emplace_back("A:m_own");
      if (cfg.mediator_others) names.emplace_back("A:m_others");
    }
    return names;
  }

  void layout() {
    const int base = 1;
    int next = base + static_cast<int>(feature_count(cfg, dim_v, dim_x));
    col_own = cfg.mediator_own ? base : -1;
    col_others = cfg.mediator_others ? base + (cfg.mediator_own ? 1 : 0) : -1;
    col_a_own = (interactions && cfg.mediator_own) ? next++ : -1;
    col_a_others = (interactions && cfg.mediator_others) ? next++ : -1;
  }

  void row(int a, std::span<const double> m, const ClusterRecord& c, std::size_t j, std::span<double> out) const {
    out[0] = a;
    const auto nf = feature_count(cfg, dim_v, dim_x);
    build_features(m, c, j, cfg, out.subspan(1, nf));
    if (col_a_own >= 0) out[static_cast<std::size_t>(col_a_own)] = a * out[static_cast<std::size_t>(col_own)];
    if (col_a_others >= 0) out[static_cast<std::size_t>(col_a_others)] = a * out[static_cast<std::size_t>(col_others)];
  }

  double operator()(int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) const {
    std::vector<double> r(width());
    row(a, m, c, j, r);
    return model.predict(r);
  }

  /// Additive split of eta for fixed (a, cluster).
  static AdditiveEta additive(std::shared_ptr<const OutcomeModel> self, int a, const ClusterRecord& c) {
    const auto n = c.size();
    AdditiveEta out;
    out.logit = self->model.family == Family::binomial;
    out.base.resize(n);
    std::vector<double> r(self->width());
    const std::span<const double> mobs(c.m.data(), n);
    for (std::size_t j = 0; j < n; ++j) {
      self->row(a, mobs, c, j, r);
      double eta = self->model.intercept;
      for (std::size_t col = 0; col < r.size(); ++col) {
        const int ci = static_cast<int>(col);
        if (ci == self->col_own || ci == self->col_others || ci == self->col_a_own || ci == self->col_a_others) continue;
        eta += self->model.contribution(col, r[col]);
      }
      out.base[j] = eta;
    }
    auto part = [self, a](int col, int acol) -> AdditiveEta::Curve {
      AdditiveEta::Curve curve;
      const auto& cols = self->model.columns;
      const bool linear = (col < 0 || !cols[static_cast<std::size_t>(col)].spline) && (acol < 0 || !cols[static_cast<std::size_t>(acol)].spline);
      if (linear) {
        // contribution(c, t) = coef (t - center) / scale for linear columns
        auto add = [&](int c, double mult) {
          if (c < 0) return;
          const auto& b = cols[static_cast<std::size_t>(c)];
          if (!b.active) return;
          const double k = self->model.coef[b.offset] / b.scale;
          curve.slope += k * mult;
          curve.offset -= k * b.center;
        };
        add(col, 1.0);
        add(acol, static_cast<double>(a));
        return curve;
      }
      curve.f = [self, a, col, acol](double t) {
        double v = 0.0;
        if (col >= 0) v += self->model.contribution(static_cast<std::size_t>(col), t);
        if (acol >= 0) v += self->model.contribution(static_cast<std::size_t>(acol), a * t);
        return v;
      };
      std::vector<double> breaks;
      auto add_breaks = [&](int c, double mult) {
        if (c < 0 || mult == 0.0) return;
        const auto& b = cols[static_cast<std::size_t>(c)];
        if (!b.active || !b.spline) return;
        breaks.push_back((b.center + b.scale * b.lo) / mult);
        breaks.push_back((b.center + b.scale * b.hi) / mult);
        for (double k : b.knots) breaks.push_back((b.center + b.scale * k) / mult);
      };
      add_breaks(col, 1.0);
      add_breaks(acol, static_cast<double>(a));
      if (!breaks.empty()) curve.cubic = std::make_shared<const PiecewiseCubic>(PiecewiseCubic::interpolate(curve.f, breaks));
      return curve;
    };
    out.own = part(self->col_own, self->col_a_own);
    out.others = part(self->col_others, self->col_a_others);
    return out;
  }

  /// Evaluator for fixed (a, cluster); covariate contributions are cached.
  static EtaFn bind(std::shared_ptr<const OutcomeModel> self, int a, const ClusterRecord& c) {
    const auto n = c.size();
    std::vector<double> statics(n);
    std::vector<double> r(self->width());
    const std::span<const double> mobs(c.m.data(), n);
    for (std::size_t j = 0; j < n; ++j) {
      self->row(a, mobs, c, j, r);
      double eta = self->model.intercept;
      for (std::size_t col = 0; col < r.size(); ++col) {
        const int ci = static_cast<int>(col);
        if (ci == self->col_own || ci == self->col_others || ci == self->col_a_own || ci == self->col_a_others) continue;
        eta += self->model.contribution(col, r[col]);
      }
      statics[j] = eta;
    }
    const bool need_loo = self->col_others >= 0;
    return [self, a, n, statics = std::move(statics), need_loo](std::span<const double> m, std::size_t j) {
      const auto& mod = self->model;
      double eta = statics[j];
      double loo = 0.0;
      if (need_loo && n > 1) {
        double s = 0.0;
        for (double v : m) s += v;
        loo = (s - m[j]) / static_cast<double>(n - 1);
      }
      if (self->col_own >= 0) eta += mod.contribution(static_cast<std::size_t>(self->col_own), m[j]);
      if (self->col_others >= 0) eta += mod.contribution(static_cast<std::size_t>(self->col_others), loo);
      if (self->col_a_own >= 0) eta += mod.contribution(static_cast<std::size_t>(self->col_a_own), a * m[j]);
      if (self->col_a_others >= 0) eta += mod.contribution(static_cast<std::size_t>(self->col_a_others), a * loo);
      return mod.inverse_link(eta);
    };
  }
};

/// Individual-level regression of Y on (A, mediator and covariate summaries,
/// N), pooled across clusters.
inline std::shared_ptr<OutcomeModel> fit_outcome_model(const Trial& trial, const SummaryConfig& cfg, Backend backend,
                                                       bool interactions = true, const LearnerConfig& learner = {},
                                                       Family family = Family::gaussian) {
  auto out = std::make_shared<OutcomeModel>();
  out->cfg = cfg;
  out->interactions = interactions;
  out->dim_v = trial.dim_v();
  out->dim_x = trial.dim_x();
  out->layout();
  const auto rows = static_cast<Eigen::Index>(trial.individuals());
  Eigen::MatrixXd X(rows, static_cast<Eigen::Index>(out->width()));
  Eigen::VectorXd y(rows);
  std::vector<double> r(out->width());
  Eigen::Index i = 0;
  for (const auto& c : trial.clusters) {
    const std::span<const double> m(c.m.data(), c.size());
    for (std::size_t j = 0; j < c.size(); ++j, ++i) {
      out->row(c.a, m, c, j, r);
      X.row(i) = detail::as_vector(r).transpose();
      y(i) = c.y(static_cast<Eigen::Index>(j));
    }
  }
  out->model = fit_regression(X, y, family, backend, trial.size(), learner, {}, out->column_names());
  return out;
}

// ---------------------------------------------------------------------------
// Marginal mediator density kappa_j(a, m_j, c, n)

class MediatorModel {
 public:
  SummaryConfig cfg;
  std::size_t dim_v = 0, dim_x = 0;
  MediatorSupport support;
  AdditiveModel mean;  // continuous support
  double sd = 1.0;
  MultinomialModel pmf;  // finite support

  std::size_t width() const { return 1 + feature_count(cfg, dim_v, dim_x); }

  std::vector<std::string> column_names() const {
    std::vector<std::string> names{"A"};
    for (auto& n : feature_names(cfg, dim_v, dim_x)) names.push_back(n);
    return names;
  }

  void row(int a, const ClusterRecord& c, std::size_t j, std::span<double> out) const {
    out[0] = a;
    const std::span<const double> m(c.m.data(), c.size());
    build_features(m, c, j, cfg, out.subspan(1));
  }

  Marginal marginal(int a, const ClusterRecord& c, std::size_t j) const {
    std::vector<double> r(width());
    row(a, c, j, r);
    if (!support.finite()) return Marginal::gaussian(mean.predict(r), sd);
    return Marginal::pmf(support.values, pmf.probabilities(r));
  }

  std::vector<Marginal> marginals(int a, const ClusterRecord& c) const {
    std::vector<Marginal> out;
    out.reserve(c.size());
    for (std::size_t j = 0; j < c.size(); ++j) out.push_back(marginal(a, c, j));
    return out;
  }
};

/// Continuous support: normal density with regression mean and constant
/// residual sd. Finite support: multinomial logit pmf.
inline std::shared_ptr<MediatorModel> fit_marginal_mediator(const Trial& trial, const SummaryConfig& cfg, Backend backend,
                                                            const LearnerConfig& learner = {}) {
  auto out = std::make_shared<MediatorModel>();
  out->cfg = cfg;
  out->cfg.mediator_own = false;
  out->cfg.mediator_others = false;
  out->dim_v = trial.dim_v();
  out->dim_x = trial.dim_x();
  out->support = trial.support;
  const auto rows = static_cast<Eigen::Index>(trial.individuals());
  Eigen::MatrixXd X(rows, static_cast<Eigen::Index>(out->width()));
  Eigen::VectorXd y(rows);
  std::vector<int> labels;
  std::vector<double> r(out->width());
  Eigen::Index i = 0;
  for (const auto& c : trial.clusters)
    for (std::size_t j = 0; j < c.size(); ++j, ++i) {
      out->row(c.a, c, j, r);
      X.row(i) = detail::as_vector(r).transpose();
      y(i) = c.m(static_cast<Eigen::Index>(j));
      if (trial.support.finite()) {
        const auto& vals = trial.support.values;
        labels.push_back(static_cast<int>(std::lower_bound(vals.begin(), vals.end(), y(i)) - vals.begin()));
      }
    }
  if (trial.support.finite()) {
    // Constant columns would make the Newton system singular.
    const Eigen::VectorXd w = Eigen::VectorXd::Ones(rows);
    for (Eigen::Index c = 0; c < X.cols(); ++c)
      if (detail::column_constant(X, c, w)) X.col(c).setZero();
    out->pmf = fit_multinomial(X, labels, static_cast<int>(trial.support.values.size()));
    return out;
  }
  out->mean = fit_regression(X, y, Family::gaussian, backend, trial.size(), learner, {}, out->column_names());
  out->sd = out->mean.residual_sd;
  if (!(out->sd > 0.0) || !std::isfinite(out->sd))
    throw EstimationError("marginal mediator model has nonpositive residual sd");
  return out;
}

/// Normal-scores pseudo-likelihood fit of the exchangeable correlation.
inline CopulaModel fit_copula(const Trial& trial, const MediatorModel& kappa_j) {
  if (trial.support.finite()) throw ValidationError("copula fitting needs a continuous mediator");
  std::vector<std::vector<double>> scores;
  scores.reserve(trial.size());
  for (const auto& c : trial.clusters) {
    const auto margs = kappa_j.marginals(c.a, c);
    std::vector<double> z(c.size());
    for (std::size_t j = 0; j < c.size(); ++j) z[j] = margs[j].latent(c.m(static_cast<Eigen::Index>(j)));
    scores.push_back(std::move(z));
  }
  return fit_copula_scores(scores);
}

// ---------------------------------------------------------------------------
// Cluster-level propensity s(a, m, c, n)

class PropensityModel {
 public:
  SummaryConfig cfg;
  std::size_t dim_v = 0, dim_x = 0;
  bool size_interactions = false;
  std::vector<std::size_t> sizes;  // sizes with their own terms (the first is the reference)
  AdditiveModel model;
  double epsilon = 0.01;

  std::size_t base_width() const {
    auto c = cfg;
    if (size_interactions) c.include_n = false;
    return cluster_feature_count(c, dim_v, dim_x);
  }
  std::size_t width() const {
    const auto b = base_width();
    return size_interactions ? b + (sizes.size() > 0 ? sizes.size() - 1 : 0) * (b + 1) : b;
  }

  std::vector<std::string> column_names() const {
    auto c = cfg;
    if (size_interactions) c.include_n = false;
    auto base = cluster_feature_names(c, dim_v, dim_x);
    auto names = base;
    if (size_interactions)
      for (std::size_t s = 1; s < sizes.size(); ++s) {
        const auto tag = "n" + std::to_string(sizes[s]);
        names.push_back(tag);
        for (const auto& b : base) names.push_back(tag + ":" + b);
      }
    return names;
  }

  void row(std::span<const double> m, const ClusterRecord& c, std::span<double> out) const {
    auto cf = cfg;
    if (size_interactions) cf.include_n = false;
    const auto b = base_width();
    build_cluster_features(m, c, cf, out.first(b));
    if (!size_interactions) return;
    std::size_t k = b;
    for (std::size_t s = 1; s < sizes.size(); ++s) {
      const double on = c.size() == sizes[s] ? 1.0 : 0.0;
      out[k++] = on;
      for (std::size_t q = 0; q < b; ++q) out[k++] = on * out[q];
    }
  }

  /// Unclipped P(A = 1 | m, c, n).
  double raw(std::span<const double> m, const ClusterRecord& c) const {
    std::vector<double> r(width());
    row(m, c, r);
    return model.predict(r);
  }

  double operator()(int a, std::span<const double> m, const ClusterRecord& c, ClipCounter* clips = nullptr) const {
    double p = raw(m, c);
    if (p < epsilon || p > 1.0 - epsilon) {
      if (clips) ++clips->propensity;
      p = std::clamp(p, epsilon, 1.0 - epsilon);
    }
    return a == 1 ? p : 1.0 - p;
  }
};

/// Cluster-level logistic regression of A on (mediator mean, covariate means,
/// V, N); predictions clipped to [epsilon, 1 - epsilon].
inline std::shared_ptr<PropensityModel> fit_propensity(const Trial& trial, const SummaryConfig& cfg, Backend backend,
                                                       bool size_interactions = false, double epsilon = 0.01,
                                                       const LearnerConfig& learner = {}) {
  auto out = std::make_shared<PropensityModel>();
  out->cfg = cfg;
  out->dim_v = trial.dim_v();
  out->dim_x = trial.dim_x();
  out->epsilon = epsilon;
  out->size_interactions = size_interactions && backend == Backend::parametric;
  if (out->size_interactions) {
    for (const auto& c : trial.clusters) out->sizes.push_back(c.size());
    std::sort(out->sizes.begin(), out->sizes.end());
    out->sizes.erase(std::unique(out->sizes.begin(), out->sizes.end()), out->sizes.end());
  }
  const auto rows = static_cast<Eigen::Index>(trial.size());
  Eigen::MatrixXd X(rows, static_cast<Eigen::Index>(out->width()));
  Eigen::VectorXd y(rows);
  std::vector<double> r(out->width());
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& c = trial.clusters[static_cast<std::size_t>(i)];
    out->row(std::span<const double>(c.m.data(), c.size()), c, r);
    X.row(i) = detail::as_vector(r).transpose();
    y(i) = c.a;
  }
  out->model = fit_regression(X, y, Family::binomial, backend, trial.size(), learner, {}, out->column_names());
  return out;
}

// ---------------------------------------------------------------------------
// Sequential regressions eta*(a, a*, c, n) and eta-dagger(a, a*, m_j, c, n)

class SequentialModel {
 public:
  SummaryConfig cfg;  // covariate summaries only
  std::size_t dim_v = 0, dim_x = 0;
  bool with_mediator = false;
  MediatorSupport support;
  AdditiveModel fits[2][2];  // [a][a*]

  std::size_t mediator_width() const {
    if (!with_mediator) return 0;
    return support.finite() && support.values.size() > 2 ? support.values.size() - 1 : 1;
  }
  std::size_t width() const { return mediator_width() + feature_count(cfg, dim_v, dim_x); }

  std::vector<std::string> column_names() const {
    std::vector<std::string> names;
    if (with_mediator) {
      if (mediator_width() == 1) names.emplace_back("m_own");
      else
        for (std::size_t l = 1; l < support.values.size(); ++l) names.push_back("m_own=" + std::to_string(support.values[l]));
    }
    for (auto& n : feature_names(cfg, dim_v, dim_x)) names.push_back(n);
    return names;
  }

  void row(double mj, const ClusterRecord& c, std::size_t j, std::span<double> out) const {
    const auto mw = mediator_width();
    if (mw == 1) out[0] = mj;
    else
      for (std::size_t l = 1; l <= mw; ++l) out[l - 1] = support.values[l] == mj ? 1.0 : 0.0;
    const std::span<const double> m(c.m.data(), c.size());
    build_features(m, c, j, cfg, out.subspan(mw));
  }

  double operator()(int a, int astar, double mj, const ClusterRecord& c, std::size_t j) const {
    std::vector<double> r(width());
    row(mj, c, j, r);
    return fits[a][astar].predict(r);
  }
};

/// Regresses eta_j(a, M_obs, C, N) on covariate summaries within arm a*.
inline std::shared_ptr<SequentialModel> fit_eta_star(const Trial& trial, const std::function<EtaFn(int, const ClusterRecord&)>& eta,
                                                     const SummaryConfig& cfg, Backend backend,
                                                     const LearnerConfig& learner = {}) {
  auto out = std::make_shared<SequentialModel>();
  out->cfg = cfg;
  out->cfg.mediator_own = false;
  out->cfg.mediator_others = false;
  out->dim_v = trial.dim_v();
  out->dim_x = trial.dim_x();
  out->support = trial.support;
  for (int astar = 0; astar <= 1; ++astar) {
    std::vector<const ClusterRecord*> arm;
    std::size_t rows = 0;
    for (const auto& c : trial.clusters)
      if (c.a == astar) {
        arm.push_back(&c);
        rows += c.size();
      }
    if (arm.empty()) throw EstimationError("eta* regression: no clusters in arm " + std::to_string(astar));
    Eigen::MatrixXd X(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out->width()));
    std::vector<double> r(out->width());
    Eigen::Index i = 0;
    for (const auto* c : arm)
      for (std::size_t j = 0; j < c->size(); ++j, ++i) {
        out->row(0.0, *c, j, r);
        X.row(i) = detail::as_vector(r).transpose();
      }
    for (int a = 0; a <= 1; ++a) {
      Eigen::VectorXd y(static_cast<Eigen::Index>(rows));
      i = 0;
      for (const auto* c : arm) {
        const auto f = eta(a, *c);
        const std::span<const double> m(c->m.data(), c->size());
        for (std::size_t j = 0; j < c->size(); ++j, ++i) y(i) = f(m, j);
      }
      out->fits[a][astar] = fit_regression(X, y, Family::gaussian, backend, arm.size(), learner, {}, out->column_names());
    }
  }
  return out;
}

/// Regresses eta_j(a, M) kappa_j(a*, M_j) / kappa*_j(a*, M) on (M_j, covariate
/// summaries) within arm a*; the density ratio is clipped at w_max.
inline std::shared_ptr<SequentialModel> fit_eta_dagger(
    const Trial& trial, const std::function<EtaFn(int, const ClusterRecord&)>& eta,
    const std::function<std::vector<Marginal>(int, const ClusterRecord&)>& kappa_j,
    const std::function<double(int, std::span<const double>, const ClusterRecord&, std::size_t)>& kappa_j_cond,
    const SummaryConfig& cfg, Backend backend, double w_max = 50.0, const LearnerConfig& learner = {},
    ClipCounter* clips = nullptr) {
  auto out = std::make_shared<SequentialModel>();
  out->cfg = cfg;
  out->cfg.mediator_own = false;
  out->cfg.mediator_others = false;
  out->dim_v = trial.dim_v();
  out->dim_x = trial.dim_x();
  out->with_mediator = true;
  out->support = trial.support;
  for (int astar = 0; astar <= 1; ++astar) {
    std::vector<const ClusterRecord*> arm;
    std::size_t rows = 0;
    for (const auto& c : trial.clusters)
      if (c.a == astar) {
        arm.push_back(&c);
        rows += c.size();
      }
    if (arm.empty()) throw EstimationError("eta-dagger regression: no clusters in arm " + std::to_string(astar));
    Eigen::MatrixXd X(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out->width()));
    Eigen::VectorXd ratio(static_cast<Eigen::Index>(rows));
    std::vector<double> r(out->width());
    Eigen::Index i = 0;
    for (const auto* c : arm) {
      const std::span<const double> m(c->m.data(), c->size());
      const auto margs = kappa_j(astar, *c);
      for (std::size_t j = 0; j < c->size(); ++j, ++i) {
        out->row(m[j], *c, j, r);
        X.row(i) = detail::as_vector(r).transpose();
        const double num = margs[j].density(m[j]);
        const double den = kappa_j_cond(astar, m, *c, j);
        double q = den > 0 ? num / den : w_max;
        if (q > w_max) {
          if (clips) ++clips->ratio;
          q = w_max;
        }
        ratio(i) = q;
      }
    }
    for (int a = 0; a <= 1; ++a) {
      Eigen::VectorXd y(static_cast<Eigen::Index>(rows));
      i = 0;
      for (const auto* c : arm) {
        const auto f = eta(a, *c);
        const std::span<const double> m(c->m.data(), c->size());
        for (std::size_t j = 0; j < c->size(); ++j, ++i) y(i) = f(m, j) * ratio(i);
      }
      out->fits[a][astar] = fit_regression(X, y, Family::gaussian, backend, arm.size(), learner, {}, out->column_names());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-support conditional pmf kappa*_j via multinomial logit on
// (A, others' mean, covariate summaries).

class ConditionalPmfModel {
 public:
  SummaryConfig cfg;
  std::size_t dim_v = 0, dim_x = 0;
  MediatorSupport support;
  MultinomialModel pmf;

  std::size_t width() const { return 2 + feature_count(cfg, dim_v, dim_x); }

  void row(int a, std::span<const double> m, const ClusterRecord& c, std::size_t j, std::span<double> out) const {
    out[0] = a;
    const auto n = c.size();
    double s = 0.0;
    for (double v : m) s += v;
    out[1] = n > 1 ? (s - m[j]) / static_cast<double>(n - 1) : 0.0;
    build_features(m, c, j, cfg, out.subspan(2));
  }

  double operator()(int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) const {
    std::vector<double> r(width());
    row(a, m, c, j, r);
    const auto p = pmf.probabilities(r);
    const auto& vals = support.values;
    const auto k = static_cast<std::size_t>(std::lower_bound(vals.begin(), vals.end(), m[j]) - vals.begin());
    return k < p.size() && vals[k] == m[j] ? p[k] : 0.0;
  }
};

inline std::shared_ptr<ConditionalPmfModel> fit_conditional_pmf(const Trial& trial, const SummaryConfig& cfg) {
  auto out = std::make_shared<ConditionalPmfModel>();
  out->cfg = cfg;
  out->cfg.mediator_own = false;
  out->cfg.mediator_others = false;
  out->dim_v = trial.dim_v();
  out->dim_x = trial.dim_x();
  out->support = trial.support;
  const auto rows = static_cast<Eigen::Index>(trial.individuals());
  Eigen::MatrixXd X(rows, static_cast<Eigen::Index>(out->width()));
  std::vector<int> labels;
  std::vector<double> r(out->width());
  Eigen::Index i = 0;
  const auto& vals = trial.support.values;
  for (const auto& c : trial.clusters) {
    const std::span<const double> m(c.m.data(), c.size());
    for (std::size_t j = 0; j < c.size(); ++j, ++i) {
      out->row(c.a, m, c, j, r);
      X.row(i) = detail::as_vector(r).transpose();
      labels.push_back(static_cast<int>(std::lower_bound(vals.begin(), vals.end(), m[j]) - vals.begin()));
    }
  }
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(rows);
  for (Eigen::Index c = 0; c < X.cols(); ++c)
    if (detail::column_constant(X, c, w)) X.col(c).setZero();
  out->pmf = fit_multinomial(X, labels, static_cast<int>(vals.size()));
  return out;
}

// ---------------------------------------------------------------------------

/// Fits every nuisance needed by the chosen estimators on `trial`.
/// `reparameterized` adds s, eta* and eta-dagger.
inline NuisanceSet fit_nuisances(const Trial& trial, const NuisanceConfig& cfg, Backend backend, bool reparameterized) {
  validate(trial);
  NuisanceSet ns;
  ns.pi = trial.pi;
  ns.support = trial.support;
  ns.epsilon = cfg.epsilon;
  ns.w_max = cfg.w_max;

  auto outcome = fit_outcome_model(trial, cfg.outcome, backend, cfg.outcome_interactions, cfg.learner, cfg.outcome_family);
  ns.eta = [outcome](int a, const ClusterRecord& c) { return OutcomeModel::bind(outcome, a, c); };
  ns.eta_additive = [outcome](int a, const ClusterRecord& c) { return OutcomeModel::additive(outcome, a, c); };
  ns.summary["outcome"] = detail::model_json(outcome->model);

  auto mediator = fit_marginal_mediator(trial, cfg.mediator, backend, cfg.learner);
  ns.marginals = [mediator](int a, const ClusterRecord& c) { return mediator->marginals(a, c); };
  if (trial.support.finite()) {
    ns.summary["mediator"] = {{"family", "multinomial"}, {"categories", trial.support.values.size()}};
    attach_copula(ns, 0.0);
    ns.summary["copula"] = {{"rho", 0.0}, {"note", "finite support: independence across members"}};
  } else {
    ns.summary["mediator"] = detail::model_json(mediator->mean);
    CopulaModel cop;
    if (cfg.independence_copula) {
      cop.independence = true;
    } else {
      cop = fit_copula(trial, *mediator);
    }
    for (const auto& w : cop.warnings) ns.warnings.push_back(w);
    for (const auto& c : trial.clusters) cop.check_size(c.size());
    attach_copula(ns, cop.rho);
    ns.summary["copula"] = {{"rho", cop.rho}, {"loglik", cop.loglik}, {"iterations", cop.iterations},
                            {"independence", cop.independence}};
  }

  if (reparameterized) {
    if (trial.support.finite()) {
      auto cond = fit_conditional_pmf(trial, cfg.mediator);
      ns.conditional = [cond](int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) {
        return (*cond)(a, m, c, j);
      };
    }
    auto prop = fit_propensity(trial, cfg.propensity, backend, cfg.propensity_size_interactions, cfg.epsilon, cfg.learner);
    auto clips = ns.clips;
    ns.propensity = [prop, clips](int a, std::span<const double> m, const ClusterRecord& c) {
      return (*prop)(a, m, c, clips.get());
    };
    ns.summary["propensity"] = detail::model_json(prop->model);
    for (const auto& w : prop->model.warnings) ns.warnings.push_back("propensity: " + w);

    auto star = fit_eta_star(trial, ns.eta, cfg.regression, backend, cfg.learner);
    ns.eta_star = [star](int a, int astar, const ClusterRecord& c, std::size_t j) { return (*star)(a, astar, 0.0, c, j); };
    auto dagger = fit_eta_dagger(trial, ns.eta, ns.marginals, ns.conditional, cfg.regression, backend, cfg.w_max, cfg.learner,
                                 ns.clips.get());
    ns.eta_dagger = [dagger](int a, int astar, double mj, const ClusterRecord& c, std::size_t j) {
      return (*dagger)(a, astar, mj, c, j);
    };
  }
  return ns;
}

}  // namespace crtm
