#pragma once

// Mediation-functional, EIF-based and cross-fitted estimators of theta_V(a,a*)
// and tau_V, Hajek stabilization and the effect decompositions.

#include "crtm/core.hpp"
#include "crtm/integrate.hpp"
#include "crtm/numeric.hpp"
#include "crtm/nuisance.hpp"

#include "json.hpp"

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crtm {

enum class EstimatorFamily { mf, eif1, eif2 };

inline const char* family_name(EstimatorFamily f) {
  switch (f) {
    case EstimatorFamily::mf: return "mf";
    case EstimatorFamily::eif1: return "eif1";
    case EstimatorFamily::eif2: return "eif2";
  }
  return "?";
}

struct EstimatorSpec {
  EstimatorFamily family = EstimatorFamily::eif1;
  Backend backend = Backend::parametric;
  bool stabilized = false;
  int folds = 5;  // ml backend only
  IntegrationPlan integration;
  std::uint64_t seed = 0;
  NuisanceConfig nuisance;
  int threads = 1;

  std::string label() const {
    std::string s = family_name(family);
    s += backend == Backend::parametric ? "-par" : "-ml";
    if (family != EstimatorFamily::mf) s += stabilized ? "-s" : "-ns";
    return s;
  }

  void check() const {
    if (family == EstimatorFamily::mf && stabilized) throw ValidationError("the mediation-functional estimator has no stabilized form");
    if (family == EstimatorFamily::mf && backend == Backend::ml)
      throw ValidationError("the mediation-functional estimator is parametric only");
    if (backend == Backend::ml && folds < 2) throw ValidationError("cross-fitting needs at least two folds");
    integration.check();
  }
};

/// Parses labels such as "eif2-ml-s" or "mf-par".
inline EstimatorSpec parse_label(const std::string& label, EstimatorSpec base = {}) {
  const auto dash = label.find('-');
  if (dash == std::string::npos) throw ValidationError("unknown estimator label '" + label + "'");
  const auto fam = label.substr(0, dash);
  auto rest = label.substr(dash + 1);
  if (fam == "mf") base.family = EstimatorFamily::mf;
  else if (fam == "eif1") base.family = EstimatorFamily::eif1;
  else if (fam == "eif2") base.family = EstimatorFamily::eif2;
  else throw ValidationError("unknown estimator label '" + label + "'");
  std::string backend = rest, stab;
  if (const auto d2 = rest.find('-'); d2 != std::string::npos) {
    backend = rest.substr(0, d2);
    stab = rest.substr(d2 + 1);
  }
  if (backend == "par") base.backend = Backend::parametric;
  else if (backend == "ml") base.backend = Backend::ml;
  else throw ValidationError("unknown estimator label '" + label + "'");
  if (base.family == EstimatorFamily::mf) {
    if (!stab.empty() || base.backend != Backend::parametric) throw ValidationError("unknown estimator label '" + label + "'");
    base.stabilized = false;
  } else if (stab == "s") {
    base.stabilized = true;
  } else if (stab == "ns") {
    base.stabilized = false;
  } else {
    throw ValidationError("unknown estimator label '" + label + "'");
  }
  return base;
}

inline std::vector<std::string> all_labels() {
  return {"mf-par", "eif1-par-ns", "eif1-par-s", "eif2-par-ns", "eif2-par-s", "eif1-ml-ns", "eif1-ml-s", "eif2-ml-ns", "eif2-ml-s"};
}

struct WeightedTerm {
  double weight = 0.0;
  double value = 0.0;
};

/// psi = sum of weight * value over the terms, plus the plug-in part.
struct Score {
  std::vector<WeightedTerm> terms;
  double plug_in = 0.0;

  double value() const {
    double total = plug_in;
    for (const auto& t : terms) total += t.weight * t.value;
    return total;
  }
};

struct ClusterScore {
  std::array<std::array<Score, 2>, 2> theta;  // [a][a*]
  Score tau;
  std::size_t n = 0;
  int arm = 0;

  double psi_theta(int a, int astar) const { return theta[a][astar].value(); }
  double psi_tau() const { return tau.value(); }
};

struct PointEstimates {
  std::array<std::array<double, 2>, 2> theta_C{};
  std::array<std::array<double, 2>, 2> theta_I{};
  double tau_C = 0.0;
  double tau_I = 0.0;
  double nbar = 0.0;
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Scores of the EIF-based estimators from the auxiliary values.
inline ClusterScore eif_score(const ClusterRecord& c, const ClusterAux& aux, Parameterization param, double pi) {
  const AuxValues& v = param == Parameterization::eif1 ? aux.eif1 : aux.eif2;
  if (!(param == Parameterization::eif1 ? aux.has_eif1 : aux.has_eif2))
    throw ValidationError("auxiliary values missing for the requested parameterization");
  const auto n = c.size();
  const double nn = static_cast<double>(n);
  ClusterScore s;
  s.n = n;
  s.arm = c.a;
  const double prob[2] = {1.0 - pi, pi};
  for (int a = 0; a <= 1; ++a)
    for (int astar = 0; astar <= 1; ++astar) {
      double res = 0.0, center = 0.0, plug = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        res += c.y(static_cast<Eigen::Index>(j)) - aux.eta_obs[a][j];
        center += aux.eta_obs[a][j] - v.u1[a][astar][j];
        plug += v.u1[a][astar][j];
      }
      Score& sc = s.theta[a][astar];
      sc.terms = {{(c.a == a ? 1.0 / prob[a] : 0.0) * v.w1[a][astar], res / nn},
                  {c.a == astar ? 1.0 / prob[astar] : 0.0, center / nn}};
      sc.plug_in = plug / nn;
    }
  double w2sum = 0.0, w2res = 0.0, d24 = 0.0, d34 = 0.0, plug = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    w2sum += v.w2[j];
    w2res += v.w2[j] * (c.y(static_cast<Eigen::Index>(j)) - aux.eta_obs[1][j]);
    d24 += v.u2[j] - v.u4[j];
    d34 += v.u3[j] - v.u4[j];
    plug += v.u4[j];
  }
  const double treated = c.a == 1 ? 1.0 / pi : 0.0;
  const double control = c.a == 0 ? 1.0 / (1.0 - pi) : 0.0;
  s.tau.terms = {{treated * w2sum / nn, w2sum > 0 ? w2res / w2sum : 0.0}, {treated, d24 / nn}, {control, d34 / nn}};
  s.tau.plug_in = plug / nn;
  return s;
}

/// Mediation-functional estimator: plug-in integrals only.
inline ClusterScore mf_score(const ClusterRecord& c, const ClusterAux& aux) {
  if (!aux.has_eif1) throw ValidationError("mediation-functional scores need the joint-density integrals");
  ClusterScore s;
  s.n = c.size();
  s.arm = c.a;
  for (int a = 0; a <= 1; ++a)
    for (int astar = 0; astar <= 1; ++astar) s.theta[a][astar].plug_in = mean_of(aux.eif1.u1[a][astar]);
  s.tau.plug_in = mean_of(aux.eif1.u4);
  return s;
}

namespace detail {

inline double weight_of(std::span<const double> w, std::size_t i) { return w.empty() ? 1.0 : w[i]; }

template <class F>
void for_each_score(F&& f) {
  for (int a = 0; a <= 1; ++a)
    for (int astar = 0; astar <= 1; ++astar) f([a, astar](ClusterScore& s) -> Score& { return s.theta[a][astar]; });
  f([](ClusterScore& s) -> Score& { return s.tau; });
}

}  // namespace detail

/// Hajek normalization: every inverse-probability-type weight is divided by
/// its empirical mean over clusters, separately per estimand and per term.
inline std::vector<ClusterScore> stabilize(std::vector<ClusterScore> scores, std::span<const double> weights = {}) {
  if (scores.empty()) return scores;
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) total += detail::weight_of(weights, i);
  detail::for_each_score([&](auto pick) {
    const auto terms = pick(scores.front()).terms.size();
    for (std::size_t t = 0; t < terms; ++t) {
      double mean = 0.0;
      for (std::size_t i = 0; i < scores.size(); ++i) mean += detail::weight_of(weights, i) * pick(scores[i]).terms[t].weight;
      mean /= total;
      if (!(mean > 0.0)) throw EstimationError("stabilization: empirical weight mean is not positive");
      for (auto& s : scores) pick(s).terms[t].weight /= mean;
    }
  });
  return scores;
}

/// Cluster-average and individual-average estimates from scores; optional
/// cluster weights default to 1.
inline PointEstimates aggregate(const std::vector<ClusterScore>& scores, std::span<const double> weights = {}) {
  if (scores.empty()) throw ValidationError("no cluster scores to aggregate");
  PointEstimates p;
  double wsum = 0.0, nsum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double w = detail::weight_of(weights, i);
    wsum += w;
    nsum += w * static_cast<double>(scores[i].n);
  }
  for (int a = 0; a <= 1; ++a)
    for (int astar = 0; astar <= 1; ++astar) {
      double c = 0.0, ind = 0.0;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        const double w = detail::weight_of(weights, i);
        const double psi = scores[i].psi_theta(a, astar);
        c += w * psi;
        ind += w * static_cast<double>(scores[i].n) * psi;
      }
      p.theta_C[a][astar] = c / wsum;
      p.theta_I[a][astar] = ind / nsum;
    }
  double c = 0.0, ind = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double w = detail::weight_of(weights, i);
    const double psi = scores[i].psi_tau();
    c += w * psi;
    ind += w * static_cast<double>(scores[i].n) * psi;
  }
  p.tau_C = c / wsum;
  p.tau_I = ind / nsum;
  p.nbar = nsum / wsum;
  return p;
}

struct EffectValues {
  double te = 0.0, nie = 0.0, nde = 0.0, sme = 0.0, ime = 0.0;
};

struct EffectTable {
  EffectScale scale;
  EffectValues C, I;
  PointEstimates points;
};

inline EffectValues effects_from(const EffectScale& g, double t11, double t10, double t00, double tau) {
  EffectValues e;
  e.te = g(t11, t00);
  e.nie = g(t11, t10);
  e.nde = g(t10, t00);
  e.sme = g(t11, tau);
  e.ime = g(tau, t10);
  return e;
}

/// Checks TE = NIE (+ or x) NDE and NIE = SME (+ or x) IME up to rounding.
inline void check_decomposition(const EffectScale& g, const EffectValues& e) {
  auto close = [](double x, double y) { return std::abs(x - y) <= 1e-12 * std::max({1.0, std::abs(x), std::abs(y)}); };
  const bool ok = g.kind == ScaleKind::difference ? close(e.te, e.nie + e.nde) && close(e.nie, e.sme + e.ime)
                                                  : close(e.te, e.nie * e.nde) && close(e.nie, e.sme * e.ime);
  if (!ok) throw EstimationError("effect decomposition identity violated");
}

inline EffectTable assemble_effects(const PointEstimates& p, const EffectScale& scale = {}) {
  EffectTable t;
  t.scale = scale;
  t.points = p;
  t.C = effects_from(scale, p.theta_C[1][1], p.theta_C[1][0], p.theta_C[0][0], p.tau_C);
  t.I = effects_from(scale, p.theta_I[1][1], p.theta_I[1][0], p.theta_I[0][0], p.tau_I);
  check_decomposition(scale, t.C);
  check_decomposition(scale, t.I);
  return t;
}

/// Reported quantities in a fixed order.
inline std::vector<std::string> quantity_names() {
  return {"theta_C(1,1)", "theta_C(1,0)", "theta_C(0,0)", "tau_C", "theta_I(1,1)", "theta_I(1,0)", "theta_I(0,0)", "tau_I",
          "TE_C",         "NIE_C",        "NDE_C",        "SME_C", "IME_C",        "TE_I",         "NIE_I",        "NDE_I",
          "SME_I",        "IME_I"};
}

inline std::vector<double> quantity_values(const EffectTable& t) {
  const auto& p = t.points;
  return {p.theta_C[1][1], p.theta_C[1][0], p.theta_C[0][0], p.tau_C, p.theta_I[1][1], p.theta_I[1][0],
          p.theta_I[0][0], p.tau_I,         t.C.te,          t.C.nie, t.C.nde,         t.C.sme,
          t.C.ime,         t.I.te,          t.I.nie,         t.I.nde, t.I.sme,         t.I.ime};
}

struct EstimateResult {
  std::string label;
  EstimatorSpec spec;
  PointEstimates points;
  std::vector<ClusterScore> scores;  // after stabilization when requested
  std::vector<int> folds;            // empty for full-data fits
  std::vector<std::string> warnings;
  nlohmann::json provenance = nlohmann::json::object();
};

struct Variant {
  EstimatorFamily family = EstimatorFamily::eif1;
  bool stabilized = false;
};

/// Estimates several variants that share one nuisance fit (per fold) and one
/// pass of auxiliary-function evaluation. `weights` optionally weight the
/// clusters in aggregation; `injected` replaces fitting by fixed nuisances.
inline std::vector<EstimateResult> estimate_variants(const Trial& trial, const EstimatorSpec& base,
                                                     const std::vector<Variant>& variants, std::span<const double> weights = {},
                                                     const NuisanceSet* injected = nullptr) {
  validate(trial);
  bool need1 = false, need2 = false;
  for (const auto& v : variants) {
    auto s = base;
    s.family = v.family;
    s.stabilized = v.stabilized;
    if (!injected) s.check();
    else s.integration.check();
    (v.family == EstimatorFamily::eif2 ? need2 : need1) = true;
  }
  const auto K = trial.size();
  std::vector<std::string> warnings;
  IntegrationPlan plan = base.integration;
  plan.seed = derive_seed(base.seed, {base.integration.seed, 0x51ULL});

  std::vector<NuisanceSet> sets;
  std::vector<std::size_t> set_of(K, 0);
  std::vector<int> folds;
  if (injected) {
    sets.push_back(*injected);
  } else if (base.backend == Backend::parametric) {
    sets.push_back(fit_nuisances(trial, base.nuisance, Backend::parametric, need2));
  } else {
    int nf = base.folds;
    if (K < 10 && nf > 2) {
      nf = 2;
      warnings.emplace_back("fewer than 10 clusters: cross-fitting uses 2 folds");
    }
    folds = split_folds(trial, nf, derive_seed(base.seed, {0xF01DULL}));
    for (int f = 0; f < nf; ++f) {
      int arms[2] = {0, 0};
      for (std::size_t i = 0; i < K; ++i)
        if (folds[i] == f) ++arms[trial.clusters[i].a];
      if (arms[0] == 0 || arms[1] == 0)
        throw EstimationError("fold " + std::to_string(f) + " contains a single treatment arm; use fewer folds");
    }
    sets.resize(static_cast<std::size_t>(nf));
    parallel_for(static_cast<std::size_t>(nf), base.threads, [&](std::size_t f) {
      std::vector<std::size_t> train;
      for (std::size_t i = 0; i < K; ++i)
        if (folds[i] != static_cast<int>(f)) train.push_back(i);
      const auto sub = subset(trial, train);
      sets[f] = fit_nuisances(sub, base.nuisance, Backend::ml, need2);
    });
    for (std::size_t i = 0; i < K; ++i) set_of[i] = static_cast<std::size_t>(folds[i]);
  }

  std::vector<ClusterAux> aux(K);
  {
    std::vector<std::optional<AuxEvaluator>> eval1(sets.size()), eval2(sets.size());
    for (std::size_t s = 0; s < sets.size(); ++s) {
      if (need1) eval1[s].emplace(sets[s], plan, Parameterization::eif1);
      if (need2) eval2[s].emplace(sets[s], plan, Parameterization::eif2);
    }
    parallel_for(K, base.threads, [&](std::size_t i) {
      const auto& c = trial.clusters[i];
      const auto s = set_of[i];
      if (need1) aux[i] = eval1[s]->evaluate(c, i);
      if (need2) {
        auto second = eval2[s]->evaluate(c, i);
        if (need1) {
          aux[i].eif2 = std::move(second.eif2);
          aux[i].has_eif2 = true;
        } else {
          aux[i] = std::move(second);
        }
      }
    });
  }

  long long clip_p = 0, clip_w = 0, clip_r = 0;
  for (const auto& s : sets) {
    clip_p += s.clips->propensity;
    clip_w += s.clips->weight;
    clip_r += s.clips->ratio;
    for (const auto& w : s.warnings) warnings.push_back(w);
  }

  std::vector<EstimateResult> out;
  for (const auto& v : variants) {
    EstimateResult r;
    r.spec = base;
    r.spec.family = v.family;
    r.spec.stabilized = v.stabilized;
    r.label = r.spec.label();
    r.scores.resize(K);
    for (std::size_t i = 0; i < K; ++i) {
      const auto& c = trial.clusters[i];
      r.scores[i] = v.family == EstimatorFamily::mf ? mf_score(c, aux[i])
                    : eif_score(c, aux[i], v.family == EstimatorFamily::eif1 ? Parameterization::eif1 : Parameterization::eif2,
                                trial.pi);
    }
    if (v.stabilized) r.scores = stabilize(std::move(r.scores), weights);
    r.points = aggregate(r.scores, weights);
    r.folds = folds;
    r.warnings = warnings;
    r.provenance["label"] = r.label;
    r.provenance["seed"] = base.seed;
    r.provenance["integration"] = {{"method", plan.method == IntegrationMethod::mc ? "mc"
                                              : plan.method == IntegrationMethod::quadrature ? "quadrature"
                                                                                             : "enumerate"},
                                   {"draws", plan.draws},
                                   {"nodes", plan.nodes},
                                   {"antithetic", plan.antithetic},
                                   {"seed", plan.seed}};
    r.provenance["clips"] = {{"propensity", clip_p}, {"weight", clip_w}, {"density_ratio", clip_r}};
    r.provenance["epsilon"] = base.nuisance.epsilon;
    r.provenance["w_max"] = base.nuisance.w_max;
    if (!folds.empty()) r.provenance["folds"] = folds;
    if (v.stabilized) r.provenance["stabilization"] = "Hajek normalization of each weighted term by its mean over clusters (reconstructed)";
    if (!injected) {
      nlohmann::json fits = nlohmann::json::array();
      for (const auto& s : sets) fits.push_back(s.summary);
      r.provenance["nuisance_fits"] = fits;
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline EstimateResult estimate(const Trial& trial, const EstimatorSpec& spec, std::span<const double> weights = {},
                               const NuisanceSet* injected = nullptr) {
  return estimate_variants(trial, spec, {{spec.family, spec.stabilized}}, weights, injected).front();
}

/// Mediation-functional estimator with given nuisances.
inline PointEstimates estimate_mf(const Trial& trial, const NuisanceSet& ns, const IntegrationPlan& plan,
                                  std::span<const double> weights = {}) {
  validate(trial);
  AuxEvaluator eval(ns, plan, Parameterization::eif1);
  std::vector<ClusterScore> scores;
  for (std::size_t i = 0; i < trial.size(); ++i) scores.push_back(mf_score(trial.clusters[i], eval.evaluate(trial.clusters[i], i)));
  return aggregate(scores, weights);
}

/// Per-cluster scores for the evaluator's parameterization.
inline std::vector<ClusterScore> cluster_scores(const Trial& trial, const AuxEvaluator& aux) {
  std::vector<ClusterScore> out;
  out.reserve(trial.size());
  for (std::size_t i = 0; i < trial.size(); ++i)
    out.push_back(eif_score(trial.clusters[i], aux.evaluate(trial.clusters[i], i), aux.parameterization(), trial.pi));
  return out;
}

/// EIF-based estimate; `spec.family` must be eif1 or eif2.
inline EstimateResult estimate_eif(const Trial& trial, const EstimatorSpec& spec) {
  if (spec.family == EstimatorFamily::mf) throw ValidationError("estimate_eif needs an eif1 or eif2 specification");
  return estimate(trial, spec);
}

}  // namespace crtm
