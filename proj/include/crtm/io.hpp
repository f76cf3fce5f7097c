#pragma once

// Long-format CSV ingestion, JSON configuration parsing and report emission.

#include "crtm/core.hpp"
#include "crtm/estimators.hpp"
#include "crtm/inference.hpp"
#include "crtm/sim.hpp"

#include "json.hpp"

#include <boost/tokenizer.hpp>

#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace crtm {

using nlohmann::json;

/// Column roles of a long-format CSV file (one row per individual).
struct Schema {
  std::string cluster = "cluster";
  std::string treatment = "a";
  std::string mediator = "m";
  std::string outcome = "y";
  std::vector<std::string> cluster_covariates;
  std::vector<std::string> individual_covariates;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  using Tok = boost::tokenizer<boost::escaped_list_separator<char>>;
  std::string s = line;
  if (!s.empty() && s.back() == '\r') s.pop_back();
  Tok tok(s, boost::escaped_list_separator<char>('\\', ',', '"'));
  std::vector<std::string> out;
  for (auto& f : tok) {
    auto b = f.find_first_not_of(" \t");
    auto e = f.find_last_not_of(" \t");
    out.push_back(b == std::string::npos ? std::string() : f.substr(b, e - b + 1));
  }
  return out;
}

inline double parse_number(const std::string& s, std::size_t row, const std::string& col) {
  if (s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "null")
    throw ValidationError("missing value in column '" + col + "' at row " + std::to_string(row));
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || !std::isfinite(v))
    throw ValidationError("non-numeric value '" + s + "' in column '" + col + "' at row " + std::to_string(row));
  return v;
}

}  // namespace detail

/// Groups rows by cluster id in order of first appearance. Row numbers in
/// messages count data rows from 1.
inline Trial read_trial_csv(std::istream& in, const Schema& schema, double pi, MediatorSupport support = {}) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty CSV input");
  const auto header = detail::split_csv_line(line);
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ValidationError("CSV lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto ci = column(schema.cluster), ai = column(schema.treatment), mi = column(schema.mediator), yi = column(schema.outcome);
  std::vector<std::size_t> vi, xi;
  for (const auto& c : schema.cluster_covariates) vi.push_back(column(c));
  for (const auto& c : schema.individual_covariates) xi.push_back(column(c));

  struct Rows {
    std::string id;
    int a = 0;
    std::vector<double> v;
    std::vector<double> m, y;
    std::vector<std::vector<double>> x;
  };
  std::vector<Rows> groups;
  std::map<std::string, std::size_t> index;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++row;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size())
      throw ValidationError("row " + std::to_string(row) + " has " + std::to_string(f.size()) + " fields, expected " +
                            std::to_string(header.size()));
    const auto& id = f[ci];
    if (id.empty()) throw ValidationError("missing value in column '" + schema.cluster + "' at row " + std::to_string(row));
    const double a = detail::parse_number(f[ai], row, schema.treatment);
    if (a != 0.0 && a != 1.0)
      throw ValidationError("non-binary treatment value '" + f[ai] + "' at row " + std::to_string(row));
    auto [it, fresh] = index.emplace(id, groups.size());
    if (fresh) {
      groups.push_back({id, static_cast<int>(a), {}, {}, {}, {}});
      for (std::size_t k = 0; k < vi.size(); ++k)
        groups.back().v.push_back(detail::parse_number(f[vi[k]], row, schema.cluster_covariates[k]));
    }
    auto& g = groups[it->second];
    if (g.a != static_cast<int>(a)) throw ValidationError("inconsistent treatment within cluster '" + id + "'");
    for (std::size_t k = 0; k < vi.size(); ++k)
      if (detail::parse_number(f[vi[k]], row, schema.cluster_covariates[k]) != g.v[k])
        throw ValidationError("cluster covariate '" + schema.cluster_covariates[k] + "' varies within cluster '" + id + "'");
    g.m.push_back(detail::parse_number(f[mi], row, schema.mediator));
    g.y.push_back(detail::parse_number(f[yi], row, schema.outcome));
    std::vector<double> x;
    for (std::size_t k = 0; k < xi.size(); ++k) x.push_back(detail::parse_number(f[xi[k]], row, schema.individual_covariates[k]));
    g.x.push_back(std::move(x));
  }
  Trial t;
  t.pi = pi;
  t.support = support;
  for (auto& g : groups) {
    ClusterRecord c;
    c.id = g.id;
    c.a = g.a;
    const auto n = static_cast<Eigen::Index>(g.m.size());
    c.v = Eigen::Map<const Eigen::VectorXd>(g.v.data(), static_cast<Eigen::Index>(g.v.size()));
    c.m = Eigen::Map<const Eigen::VectorXd>(g.m.data(), n);
    c.y = Eigen::Map<const Eigen::VectorXd>(g.y.data(), n);
    c.x.resize(n, static_cast<Eigen::Index>(xi.size()));
    for (Eigen::Index r = 0; r < n; ++r)
      for (std::size_t k = 0; k < xi.size(); ++k) c.x(r, static_cast<Eigen::Index>(k)) = g.x[static_cast<std::size_t>(r)][k];
    t.clusters.push_back(std::move(c));
  }
  validate(t, false);
  return t;
}

inline Trial load_trial(const std::string& path, const Schema& schema, double pi, MediatorSupport support = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  return read_trial_csv(in, schema, pi, std::move(support));
}

/// Writes a trial in the long format read by read_trial_csv with columns
/// cluster, a, m, y, v1.., x1...
inline void write_trial_csv(std::ostream& out, const Trial& t) {
  out << "cluster,a,m,y";
  for (std::size_t k = 0; k < t.dim_v(); ++k) out << ",v" << k + 1;
  for (std::size_t k = 0; k < t.dim_x(); ++k) out << ",x" << k + 1;
  out << '\n';
  out.precision(17);
  for (const auto& c : t.clusters)
    for (std::size_t j = 0; j < c.size(); ++j) {
      const auto r = static_cast<Eigen::Index>(j);
      out << c.id << ',' << c.a << ',' << c.m(r) << ',' << c.y(r);
      for (Eigen::Index k = 0; k < c.v.size(); ++k) out << ',' << c.v(k);
      for (Eigen::Index k = 0; k < c.x.cols(); ++k) out << ',' << c.x(r, k);
      out << '\n';
    }
}

inline Schema default_schema(const Trial& t) {
  Schema s;
  for (std::size_t k = 0; k < t.dim_v(); ++k) s.cluster_covariates.push_back("v" + std::to_string(k + 1));
  for (std::size_t k = 0; k < t.dim_x(); ++k) s.individual_covariates.push_back("x" + std::to_string(k + 1));
  return s;
}

// ---------------------------------------------------------------------------
// JSON configuration

namespace detail {

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ValidationError("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace detail

inline SummaryConfig summary_from_json(const json& j, SummaryConfig cfg = {}) {
  detail::reject_unknown(j, {"mediator_own", "mediator_others", "covariate_own", "covariate_others", "cluster_covariates", "include_n",
                             "singleton_flag"},
                         "summary config");
  detail::read_opt(j, "mediator_own", cfg.mediator_own);
  detail::read_opt(j, "mediator_others", cfg.mediator_others);
  detail::read_opt(j, "covariate_own", cfg.covariate_own);
  detail::read_opt(j, "covariate_others", cfg.covariate_others);
  detail::read_opt(j, "cluster_covariates", cfg.cluster_covariates);
  detail::read_opt(j, "include_n", cfg.include_n);
  detail::read_opt(j, "singleton_flag", cfg.singleton_flag);
  return cfg;
}

inline json to_json(const SummaryConfig& c) {
  return {{"mediator_own", c.mediator_own},         {"mediator_others", c.mediator_others},
          {"covariate_own", c.covariate_own},       {"covariate_others", c.covariate_others},
          {"cluster_covariates", c.cluster_covariates}, {"include_n", c.include_n},
          {"singleton_flag", c.singleton_flag}};
}

inline NuisanceConfig nuisance_from_json(const json& j, NuisanceConfig cfg = {}) {
  detail::reject_unknown(j, {"outcome", "outcome_interactions", "outcome_family", "mediator", "propensity", "propensity_size_interactions",
                             "regression", "independence_copula", "epsilon", "w_max", "learner"},
                         "nuisance config");
  if (j.contains("outcome")) cfg.outcome = summary_from_json(j["outcome"], cfg.outcome);
  if (j.contains("mediator")) cfg.mediator = summary_from_json(j["mediator"], cfg.mediator);
  if (j.contains("propensity")) cfg.propensity = summary_from_json(j["propensity"], cfg.propensity);
  if (j.contains("regression")) cfg.regression = summary_from_json(j["regression"], cfg.regression);
  detail::read_opt(j, "outcome_interactions", cfg.outcome_interactions);
  if (j.contains("outcome_family")) {
    const auto f = j["outcome_family"].get<std::string>();
    if (f == "gaussian") cfg.outcome_family = Family::gaussian;
    else if (f == "binomial") cfg.outcome_family = Family::binomial;
    else throw ValidationError("unknown outcome family '" + f + "'");
  }
  detail::read_opt(j, "propensity_size_interactions", cfg.propensity_size_interactions);
  detail::read_opt(j, "independence_copula", cfg.independence_copula);
  detail::read_opt(j, "epsilon", cfg.epsilon);
  detail::read_opt(j, "w_max", cfg.w_max);
  if (!(cfg.epsilon >= 0.0 && cfg.epsilon < 0.5)) throw ValidationError("epsilon must lie in [0, 0.5)");
  if (!(cfg.w_max > 1.0)) throw ValidationError("w_max must exceed 1");
  if (j.contains("learner")) {
    const auto& l = j["learner"];
    detail::reject_unknown(l, {"knots", "min_distinct", "lambda_min", "lambda_max", "lambda_steps"}, "learner config");
    detail::read_opt(l, "knots", cfg.learner.knots);
    detail::read_opt(l, "min_distinct", cfg.learner.min_distinct);
    detail::read_opt(l, "lambda_min", cfg.learner.lambda_min);
    detail::read_opt(l, "lambda_max", cfg.learner.lambda_max);
    detail::read_opt(l, "lambda_steps", cfg.learner.lambda_steps);
  }
  return cfg;
}

inline json to_json(const NuisanceConfig& c) {
  return {{"outcome", to_json(c.outcome)},
          {"outcome_interactions", c.outcome_interactions},
          {"outcome_family", c.outcome_family == Family::gaussian ? "gaussian" : "binomial"},
          {"mediator", to_json(c.mediator)},
          {"propensity", to_json(c.propensity)},
          {"propensity_size_interactions", c.propensity_size_interactions},
          {"regression", to_json(c.regression)},
          {"independence_copula", c.independence_copula},
          {"epsilon", c.epsilon},
          {"w_max", c.w_max},
          {"learner",
           {{"knots", c.learner.knots},
            {"min_distinct", c.learner.min_distinct},
            {"lambda_min", c.learner.lambda_min},
            {"lambda_max", c.learner.lambda_max},
            {"lambda_steps", c.learner.lambda_steps}}}};
}

inline IntegrationPlan integration_from_json(const json& j, IntegrationPlan p = {}) {
  detail::reject_unknown(j, {"method", "draws", "nodes", "antithetic", "seed", "enumeration_cap"}, "integration config");
  if (j.contains("method")) {
    const auto m = j["method"].get<std::string>();
    if (m == "mc") p.method = IntegrationMethod::mc;
    else if (m == "quadrature") p.method = IntegrationMethod::quadrature;
    else if (m == "enumerate") p.method = IntegrationMethod::enumerate;
    else throw ValidationError("unknown integration method '" + m + "'");
  }
  detail::read_opt(j, "draws", p.draws);
  detail::read_opt(j, "nodes", p.nodes);
  detail::read_opt(j, "antithetic", p.antithetic);
  detail::read_opt(j, "seed", p.seed);
  detail::read_opt(j, "enumeration_cap", p.enumeration_cap);
  p.check();
  return p;
}

/// Shared estimator settings; family, backend and stabilization come from labels.
inline EstimatorSpec estimator_from_json(const json& j, EstimatorSpec s = {}) {
  detail::reject_unknown(j, {"folds", "integration", "nuisance"}, "estimator config");
  detail::read_opt(j, "folds", s.folds);
  if (j.contains("integration")) s.integration = integration_from_json(j["integration"], s.integration);
  if (j.contains("nuisance")) s.nuisance = nuisance_from_json(j["nuisance"], s.nuisance);
  return s;
}

/// "default" maps to nullopt (per-backend default).
inline std::optional<InferenceMethod> inference_method_from(const std::string& m) {
  if (m == "default") return std::nullopt;
  if (m == "cluster_bootstrap" || m == "bootstrap") return InferenceMethod::cluster_bootstrap;
  if (m == "eif_variance") return InferenceMethod::eif_variance;
  if (m == "none") return InferenceMethod::none;
  throw ValidationError("unknown inference method '" + m + "'");
}

inline EffectScale scale_from(const std::string& s) {
  if (s == "difference") return {ScaleKind::difference};
  if (s == "ratio") return {ScaleKind::ratio};
  if (s == "odds_ratio") return {ScaleKind::odds_ratio};
  throw ValidationError("unknown effect scale '" + s + "'");
}

inline const char* scale_name(const EffectScale& s) {
  switch (s.kind) {
    case ScaleKind::difference: return "difference";
    case ScaleKind::ratio: return "ratio";
    case ScaleKind::odds_ratio: return "odds_ratio";
  }
  return "?";
}

inline DgpSpec dgp_from_json(const json& j) {
  detail::reject_unknown(j, {"family", "sizes", "size_probs", "pi", "g0", "gA", "gX", "gV", "gN", "sigma", "rho", "al0", "alA", "alX", "alV",
                             "alN", "alU", "pU", "pV", "pX0", "pX1", "b0", "bA", "bown", "bspill", "baown", "baspill", "bX", "bV", "bN",
                             "cluster_sd", "noise_sd"},
                         "dgp config");
  DgpSpec d;
  if (j.contains("family")) {
    const auto f = j["family"].get<std::string>();
    if (f == "linear_gaussian") d = DgpSpec::linear_gaussian();
    else if (f == "finite_support") d = DgpSpec::finite_support();
    else throw ValidationError("unknown DGP family '" + f + "'");
  }
  detail::read_opt(j, "sizes", d.sizes);
  detail::read_opt(j, "size_probs", d.size_probs);
  if (j.contains("sizes") && !j.contains("size_probs")) d.size_probs.assign(d.sizes.size(), 1.0 / static_cast<double>(d.sizes.size()));
#define CRTM_READ(name) detail::read_opt(j, #name, d.name)
  CRTM_READ(pi);
  CRTM_READ(g0);
  CRTM_READ(gA);
  CRTM_READ(gX);
  CRTM_READ(gV);
  CRTM_READ(gN);
  CRTM_READ(sigma);
  CRTM_READ(rho);
  CRTM_READ(al0);
  CRTM_READ(alA);
  CRTM_READ(alX);
  CRTM_READ(alV);
  CRTM_READ(alN);
  CRTM_READ(alU);
  CRTM_READ(pU);
  CRTM_READ(pV);
  CRTM_READ(pX0);
  CRTM_READ(pX1);
  CRTM_READ(b0);
  CRTM_READ(bA);
  CRTM_READ(bown);
  CRTM_READ(bspill);
  CRTM_READ(baown);
  CRTM_READ(baspill);
  CRTM_READ(bX);
  CRTM_READ(bV);
  CRTM_READ(bN);
  CRTM_READ(cluster_sd);
  CRTM_READ(noise_sd);
#undef CRTM_READ
  d.check();
  return d;
}

inline json to_json(const DgpSpec& d) {
  json j = {{"family", d.family == DgpFamily::linear_gaussian ? "linear_gaussian" : "finite_support"},
            {"sizes", d.sizes},
            {"size_probs", d.size_probs},
            {"pi", d.pi},
            {"b0", d.b0},
            {"bA", d.bA},
            {"bown", d.bown},
            {"bspill", d.bspill},
            {"baown", d.baown},
            {"baspill", d.baspill},
            {"bX", d.bX},
            {"bV", d.bV},
            {"bN", d.bN},
            {"cluster_sd", d.cluster_sd},
            {"noise_sd", d.noise_sd}};
  if (d.family == DgpFamily::linear_gaussian) {
    j.update({{"g0", d.g0}, {"gA", d.gA}, {"gX", d.gX}, {"gV", d.gV}, {"gN", d.gN}, {"sigma", d.sigma}, {"rho", d.rho}});
  } else {
    j.update({{"al0", d.al0}, {"alA", d.alA}, {"alX", d.alX}, {"alV", d.alV}, {"alN", d.alN}, {"alU", d.alU}, {"pU", d.pU},
              {"pV", d.pV}, {"pX0", d.pX0}, {"pX1", d.pX1}});
  }
  return j;
}

inline Misspec misspec_from_json(const json& j) {
  detail::reject_unknown(j, {"outcome", "mediator", "copula", "propensity"}, "misspecification flags");
  Misspec m;
  detail::read_opt(j, "outcome", m.outcome);
  detail::read_opt(j, "mediator", m.mediator);
  detail::read_opt(j, "copula", m.copula);
  detail::read_opt(j, "propensity", m.propensity);
  return m;
}

inline json to_json(const Misspec& m) {
  return {{"outcome", m.outcome}, {"mediator", m.mediator}, {"copula", m.copula}, {"propensity", m.propensity}};
}

// ---------------------------------------------------------------------------
// Reports

inline json to_json(const PointEstimates& p) {
  return {{"theta_C", {{"11", p.theta_C[1][1]}, {"10", p.theta_C[1][0]}, {"01", p.theta_C[0][1]}, {"00", p.theta_C[0][0]}}},
          {"theta_I", {{"11", p.theta_I[1][1]}, {"10", p.theta_I[1][0]}, {"01", p.theta_I[0][1]}, {"00", p.theta_I[0][0]}}},
          {"tau_C", p.tau_C},
          {"tau_I", p.tau_I},
          {"nbar", p.nbar}};
}

inline json to_json(const IntervalEstimate& iv) {
  return {{"point", iv.point}, {"se", iv.se}, {"lower", iv.lower}, {"upper", iv.upper}, {"method", iv.method}};
}

inline json effect_table_json(const EffectTable& t, const InferenceResult* inf = nullptr) {
  json j;
  j["scale"] = scale_name(t.scale);
  const auto names = quantity_names();
  const auto vals = quantity_values(t);
  json q = json::object();
  for (std::size_t k = 0; k < names.size(); ++k) {
    q[names[k]] = inf ? to_json(inf->intervals[k]) : json{{"point", vals[k]}};
  }
  j["quantities"] = q;
  j["decomposition_checked"] = true;
  return j;
}

inline json to_json(const OracleTruth& t, const EffectScale& scale = {}) {
  json j;
  j["method"] = t.method == OracleMethod::enumeration ? "enumeration" : t.method == OracleMethod::closed_form ? "closed_form" : "mc";
  if (t.method == OracleMethod::mc) j["draws"] = t.draws;
  const auto names = quantity_names();
  const auto vals = t.quantities(scale);
  json q = json::object();
  for (std::size_t k = 0; k < names.size(); ++k) q[names[k]] = vals[k];
  j["quantities"] = q;
  j["scale"] = scale_name(scale);
  if (t.se) j["se"] = to_json(*t.se);
  j["expected_size"] = t.values.nbar;
  return j;
}

inline json to_json(const ScenarioResult& r) {
  return {{"estimator", r.label},   {"quantity", r.quantity}, {"truth", r.truth},         {"mean_estimate", r.mean_estimate},
          {"bias", r.bias},         {"mc_sd", r.mc_sd},       {"bias_se", r.bias_se},     {"mean_se", r.mean_se},
          {"coverage", r.coverage}, {"replicates", r.replicates}, {"failures", r.failures}, {"flagged", r.flagged}};
}

namespace detail {

inline std::string csv_number(double x) {
  if (std::isnan(x)) return "NA";
  std::ostringstream s;
  s.precision(12);
  s << x;
  return s.str();
}

}  // namespace detail

/// Plot-ready rows (effect, estimator, point, lower, upper).
inline void write_effects_csv(std::ostream& out, const std::vector<std::pair<std::string, InferenceResult>>& rows) {
  out << "effect,estimator,point,se,lower,upper,method\n";
  for (const auto& [label, inf] : rows)
    for (const auto& iv : inf.intervals)
      out << iv.name << ',' << label << ',' << detail::csv_number(iv.point) << ',' << detail::csv_number(iv.se) << ','
          << detail::csv_number(iv.lower) << ',' << detail::csv_number(iv.upper) << ',' << iv.method << '\n';
}

inline void write_scenario_csv(std::ostream& out, const std::vector<ScenarioResult>& rows) {
  out << "estimator,quantity,truth,mean_estimate,bias,mc_sd,bias_se,mean_se,coverage,replicates,failures,flagged\n";
  for (const auto& r : rows)
    out << r.label << ',' << r.quantity << ',' << detail::csv_number(r.truth) << ',' << detail::csv_number(r.mean_estimate) << ','
        << detail::csv_number(r.bias) << ',' << detail::csv_number(r.mc_sd) << ',' << detail::csv_number(r.bias_se) << ','
        << detail::csv_number(r.mean_se) << ',' << detail::csv_number(r.coverage) << ',' << r.replicates << ',' << r.failures << ','
        << (r.flagged ? 1 : 0) << '\n';
}

/// Per-replicate point estimates and intervals for audit.
inline void write_replicates_csv(std::ostream& out, const ScenarioOutput& s) {
  const auto names = quantity_names();
  out << "estimator,replicate,quantity,estimate,se,lower,upper\n";
  for (std::size_t l = 0; l < s.labels.size(); ++l)
    for (std::size_t r = 0; r < s.estimates[l].size(); ++r)
      for (std::size_t q = 0; q < names.size(); ++q)
        out << s.labels[l] << ',' << r << ',' << names[q] << ',' << detail::csv_number(s.estimates[l][r][q]) << ','
            << detail::csv_number(s.ses[l][r][q]) << ',' << detail::csv_number(s.lower[l][r][q]) << ','
            << detail::csv_number(s.upper[l][r][q]) << '\n';
}

}  // namespace crtm
