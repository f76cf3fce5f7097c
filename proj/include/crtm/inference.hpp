#pragma once

// Standard errors and intervals: percentile cluster bootstrap with full
// re-estimation, and the empirical variance of the estimated influence
// functions with delta-method propagation to effect scales.

#include "crtm/core.hpp"
#include "crtm/estimators.hpp"
#include "crtm/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace crtm {

enum class InferenceMethod { cluster_bootstrap, eif_variance, none };

inline const char* inference_name(InferenceMethod m) {
  switch (m) {
    case InferenceMethod::cluster_bootstrap: return "cluster_bootstrap";
    case InferenceMethod::eif_variance: return "eif_variance";
    case InferenceMethod::none: return "none";
  }
  return "?";
}

struct InferenceSpec {
  InferenceMethod method = InferenceMethod::cluster_bootstrap;
  int B = 1000;
  std::uint64_t seed = 0;
  double level = 0.95;
  int threads = 1;

  void check() const {
    if (method == InferenceMethod::cluster_bootstrap && B < 100) throw ValidationError("the cluster bootstrap needs B >= 100");
    if (!(level > 0.0 && level < 1.0)) throw ValidationError("confidence level must lie in (0,1)");
  }
};

inline InferenceMethod default_inference(Backend backend) {
  return backend == Backend::ml ? InferenceMethod::eif_variance : InferenceMethod::cluster_bootstrap;
}

struct IntervalEstimate {
  std::string name;
  double point = 0.0;
  double se = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::string method;
};

struct InferenceResult {
  std::vector<IntervalEstimate> intervals;  // in quantity_names() order
  int redraws = 0;
  std::vector<std::string> warnings;
  std::vector<std::vector<double>> replicates;  // bootstrap only, per replicate quantity_values

  const IntervalEstimate& at(const std::string& name) const {
    for (const auto& iv : intervals)
      if (iv.name == name) return iv;
    throw ValidationError("unknown quantity '" + name + "'");
  }
};

inline bool covers(const IntervalEstimate& iv, double truth) { return iv.lower <= truth && truth <= iv.upper; }

namespace detail {

inline std::vector<IntervalEstimate> wald(const std::vector<double>& points, const std::vector<double>& variances, double level) {
  const double z = normal_quantile(0.5 + level / 2.0);
  const auto names = quantity_names();
  std::vector<IntervalEstimate> out;
  for (std::size_t q = 0; q < names.size(); ++q) {
    const double se = std::sqrt(std::max(variances[q], 0.0));
    out.push_back({names[q], points[q], se, points[q] - z * se, points[q] + z * se, "eif_variance"});
  }
  return out;
}

}  // namespace detail

/// Per-cluster influence values of every reported quantity, in
/// quantity_names() order: C-type deviations psi_i - est, I-type deviations
/// scaled by N_i / Nbar, effects through the gradient of the scale.
inline std::vector<std::vector<double>> influence_values(const std::vector<ClusterScore>& scores, const PointEstimates& p,
                                                         const EffectScale& scale) {
  const auto K = scores.size();
  std::vector<std::vector<double>> d(quantity_names().size(), std::vector<double>(K));
  const int pairs[3][2] = {{1, 1}, {1, 0}, {0, 0}};
  for (std::size_t i = 0; i < K; ++i) {
    const double r = static_cast<double>(scores[i].n) / p.nbar;
    for (int k = 0; k < 3; ++k) {
      const double psi = scores[i].psi_theta(pairs[k][0], pairs[k][1]);
      d[k][i] = psi - p.theta_C[pairs[k][0]][pairs[k][1]];
      d[4 + k][i] = r * (psi - p.theta_I[pairs[k][0]][pairs[k][1]]);
    }
    d[3][i] = scores[i].psi_tau() - p.tau_C;
    d[7][i] = r * (scores[i].psi_tau() - p.tau_I);
  }
  // effects: TE = g(11,00), NIE = g(11,10), NDE = g(10,00), SME = g(11,tau), IME = g(tau,10)
  const int args[5][2] = {{0, 2}, {0, 1}, {1, 2}, {0, 3}, {3, 1}};
  for (int v = 0; v < 2; ++v) {
    const std::size_t base = v == 0 ? 0 : 4;
    const double comp[4] = {v == 0 ? p.theta_C[1][1] : p.theta_I[1][1], v == 0 ? p.theta_C[1][0] : p.theta_I[1][0],
                            v == 0 ? p.theta_C[0][0] : p.theta_I[0][0], v == 0 ? p.tau_C : p.tau_I};
    for (int e = 0; e < 5; ++e) {
      const auto [gx, gy] = scale.gradient(comp[args[e][0]], comp[args[e][1]]);
      auto& out = d[8 + 5 * static_cast<std::size_t>(v) + static_cast<std::size_t>(e)];
      for (std::size_t i = 0; i < K; ++i)
        out[i] = gx * d[base + static_cast<std::size_t>(args[e][0])][i] + gy * d[base + static_cast<std::size_t>(args[e][1])][i];
    }
  }
  return d;
}

/// Variance (1/K^2) sum_i D_i^2 of every quantity and Wald intervals.
inline std::vector<IntervalEstimate> eif_variance(const std::vector<ClusterScore>& scores, const PointEstimates& p,
                                                  const EffectScale& scale = {}, double level = 0.95) {
  const auto K = scores.size();
  if (K < 2) throw ValidationError("influence-function variance needs at least two clusters");
  const auto d = influence_values(scores, p, scale);
  std::vector<double> var(d.size());
  for (std::size_t q = 0; q < d.size(); ++q) {
    double s = 0.0;
    for (double x : d[q]) s += x * x;
    var[q] = s / (static_cast<double>(K) * static_cast<double>(K));
  }
  return detail::wald(quantity_values(assemble_effects(p, scale)), var, level);
}

inline InferenceResult effect_intervals(const EstimateResult& est, const EffectScale& scale, double level, std::size_t K) {
  InferenceResult r;
  r.intervals = eif_variance(est.scores, est.points, scale, level);
  if (K < 50 && est.spec.stabilized && est.spec.backend == Backend::ml)
    r.warnings.emplace_back("stabilized ml estimators may give anti-conservative intervals with fewer than 50 clusters");
  if (est.spec.family == EstimatorFamily::mf)
    r.warnings.emplace_back("influence-function variance of the mediation-functional estimator ignores nuisance estimation; use the cluster bootstrap");
  return r;
}

/// Percentile intervals and replicate standard deviations from bootstrap
/// replicates of quantity_values().
inline std::vector<IntervalEstimate> percentile_intervals(const std::vector<double>& points,
                                                          const std::vector<std::vector<double>>& reps, double level) {
  const auto names = quantity_names();
  std::vector<IntervalEstimate> out;
  for (std::size_t q = 0; q < names.size(); ++q) {
    std::vector<double> v;
    v.reserve(reps.size());
    for (const auto& r : reps) v.push_back(r[q]);
    std::sort(v.begin(), v.end());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double se = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    const double alpha = 1.0 - level;
    out.push_back({names[q], points[q], se, quantile_sorted(v, alpha / 2.0), quantile_sorted(v, 1.0 - alpha / 2.0), "cluster_bootstrap"});
  }
  return out;
}

/// Cluster bootstrap for several variants sharing each replicate's nuisance
/// fits. Replicates whose estimation fails are redrawn with a fresh seed, at
/// most 5B attempts in total.
inline std::vector<InferenceResult> bootstrap_variants(const Trial& trial, const EstimatorSpec& base,
                                                       const std::vector<Variant>& variants, const InferenceSpec& inf,
                                                       const EffectScale& scale = {},
                                                       const std::vector<EstimateResult>* full = nullptr) {
  inf.check();
  if (inf.method != InferenceMethod::cluster_bootstrap) throw ValidationError("bootstrap_variants needs the cluster bootstrap");
  std::vector<EstimateResult> own;
  if (!full) {
    own = estimate_variants(trial, base, variants);
    full = &own;
  }
  const auto B = static_cast<std::size_t>(inf.B);
  const int per_rep_cap = 5 * inf.B;
  std::vector<std::vector<std::vector<double>>> reps(B);  // [b][variant][quantity]
  std::vector<int> failures(B, 0);
  EstimatorSpec inner = base;
  inner.threads = 1;
  parallel_for(B, inf.threads, [&](std::size_t b) {
    for (int attempt = 0;; ++attempt) {
      if (attempt >= per_rep_cap) throw EstimationError("bootstrap: too many failed replicates");
      const auto rs = resample_clusters(trial, derive_seed(inf.seed, {b, static_cast<std::uint64_t>(attempt)}));
      try {
        if (!rs.treated() || rs.treated() == rs.size()) throw ValidationError("single-arm resample");
        const auto ests = estimate_variants(rs, inner, variants);
        std::vector<std::vector<double>> vals;
        for (const auto& e : ests) vals.push_back(quantity_values(assemble_effects(e.points, scale)));
        reps[b] = std::move(vals);
        return;
      } catch (const ValidationError&) {
        ++failures[b];
      } catch (const EstimationError&) {
        ++failures[b];
      }
    }
  });
  int redraws = 0;
  for (int f : failures) redraws += f;
  if (redraws > 5 * inf.B) throw EstimationError("bootstrap: more than 5B failed replicates");

  std::vector<InferenceResult> out;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    InferenceResult r;
    r.redraws = redraws;
    if (static_cast<double>(redraws) > 0.1 * static_cast<double>(B))
      r.warnings.push_back("bootstrap redrew " + std::to_string(redraws) + " failed replicates (more than 10%)");
    for (std::size_t b = 0; b < B; ++b) r.replicates.push_back(reps[b][v]);
    r.intervals = percentile_intervals(quantity_values(assemble_effects((*full)[v].points, scale)), r.replicates, inf.level);
    out.push_back(std::move(r));
  }
  return out;
}

inline InferenceResult bootstrap_effects(const Trial& trial, const EstimatorSpec& spec, const InferenceSpec& inf,
                                         const EffectScale& scale = {}) {
  return bootstrap_variants(trial, spec, {{spec.family, spec.stabilized}}, inf, scale).front();
}

/// Intervals for an estimate according to `inf`.
inline InferenceResult infer(const Trial& trial, const EstimateResult& est, const InferenceSpec& inf, const EffectScale& scale = {}) {
  switch (inf.method) {
    case InferenceMethod::eif_variance: return effect_intervals(est, scale, inf.level, trial.size());
    case InferenceMethod::cluster_bootstrap: {
      std::vector<EstimateResult> full{est};
      return bootstrap_variants(trial, est.spec, {{est.spec.family, est.spec.stabilized}}, inf, scale, &full).front();
    }
    case InferenceMethod::none: break;
  }
  InferenceResult r;
  const auto pts = quantity_values(assemble_effects(est.points, scale));
  const auto names = quantity_names();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t q = 0; q < names.size(); ++q) r.intervals.push_back({names[q], pts[q], nan, nan, nan, "none"});
  return r;
}

struct LabelledResult {
  std::string label;
  EstimateResult estimate;
  EffectTable effects;
  InferenceResult inference;
  InferenceMethod method = InferenceMethod::none;
};

/// Estimates every labelled estimator; labels sharing a backend share their
/// nuisance fits (and bootstrap replicates). `method` overrides the
/// per-backend default interval method.
inline std::vector<LabelledResult> analyze(const Trial& trial, const std::vector<std::string>& labels, const EstimatorSpec& base,
                                           std::optional<InferenceMethod> method, InferenceSpec inf, const EffectScale& scale = {}) {
  if (labels.empty()) throw ValidationError("no estimators requested");
  std::vector<EstimatorSpec> specs;
  for (const auto& l : labels) {
    auto s = parse_label(l, base);
    s.check();
    specs.push_back(s);
  }
  std::vector<LabelledResult> out(labels.size());
  for (const Backend backend : {Backend::parametric, Backend::ml}) {
    std::vector<std::size_t> idx;
    std::vector<Variant> variants;
    for (std::size_t l = 0; l < labels.size(); ++l)
      if (specs[l].backend == backend) {
        idx.push_back(l);
        variants.push_back({specs[l].family, specs[l].stabilized});
      }
    if (idx.empty()) continue;
    auto group = specs[idx.front()];
    const auto m = method.value_or(default_inference(backend));
    const auto ests = estimate_variants(trial, group, variants);
    std::vector<InferenceResult> infs;
    inf.method = m;
    if (m == InferenceMethod::cluster_bootstrap) {
      infs = bootstrap_variants(trial, group, variants, inf, scale, &ests);
    } else {
      for (const auto& e : ests) infs.push_back(infer(trial, e, inf, scale));
    }
    for (std::size_t v = 0; v < idx.size(); ++v) {
      auto& r = out[idx[v]];
      r.label = labels[idx[v]];
      r.estimate = ests[v];
      r.effects = assemble_effects(ests[v].points, scale);
      r.inference = infs[v];
      r.method = m;
    }
  }
  return out;
}

}  // namespace crtm
