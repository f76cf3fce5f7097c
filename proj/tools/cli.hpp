#pragma once

// Config-driven command surface: analyze, simulate, oracle, validate.

#include "crtm/crtm.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

namespace crtm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum Exit { ok = 0, usage = 1, validation = 2, estimation = 3 };

struct Options {
  std::string config;
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct Context {
  json config;
  fs::path base;  // directory of the config file
  fs::path out;
  std::uint64_t seed = 0;
  int threads = 1;
};

inline json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open config '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config '" + p.string() + "' is not valid JSON: " + e.what());
  }
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw ValidationError("cannot write '" + p.string() + "'");
  f << text;
}

inline int resolve_threads(const std::optional<int>& flag) {
  int t = 1;
  if (flag) {
    t = *flag;
  } else if (const char* env = std::getenv("CRTM_THREADS"); env && *env) {
    try {
      t = std::stoi(env);
    } catch (const std::exception&) {
      throw ValidationError(std::string("CRTM_THREADS is not an integer: '") + env + "'");
    }
  }
  if (t < 1) throw ValidationError("thread count must be at least 1");
  return t;
}

inline Context make_context(const Options& o, std::initializer_list<const char*> keys, bool need_seed) {
  Context c;
  const fs::path cfg = o.config;
  c.config = read_json_file(cfg);
  detail::reject_unknown(c.config, keys, "run config");
  c.base = cfg.parent_path();
  if (o.seed) {
    c.seed = *o.seed;
  } else if (c.config.contains("seed")) {
    c.seed = c.config["seed"].get<std::uint64_t>();
  } else if (need_seed) {
    throw ValidationError("a seed is required (config \"seed\" or --seed)");
  }
  c.config["seed"] = c.seed;
  c.threads = resolve_threads(o.threads);
  if (!o.out.empty()) c.out = o.out;
  else if (c.config.contains("out")) c.out = c.base / c.config["out"].get<std::string>();
  else c.out = "crtm-out";
  return c;
}

inline std::vector<std::string> labels_from(const json& cfg, std::vector<std::string> fallback) {
  if (!cfg.contains("estimators")) return fallback;
  return cfg["estimators"].get<std::vector<std::string>>();
}

inline EffectScale scale_of(const json& cfg) { return cfg.contains("scale") ? scale_from(cfg["scale"].get<std::string>()) : EffectScale{}; }

struct InferenceConfig {
  std::optional<InferenceMethod> method;
  int B = 1000;
  double level = 0.95;
};

inline InferenceConfig inference_config(const json& cfg, int default_B) {
  InferenceConfig ic;
  ic.B = default_B;
  if (!cfg.contains("inference")) return ic;
  const auto& j = cfg["inference"];
  detail::reject_unknown(j, {"method", "B", "level"}, "inference config");
  if (j.contains("method")) ic.method = inference_method_from(j["method"].get<std::string>());
  detail::read_opt(j, "B", ic.B);
  detail::read_opt(j, "level", ic.level);
  return ic;
}

struct DataConfig {
  std::string path;  // as written in the config
  fs::path resolved;
  Schema schema;
  double pi = 0.5;
  MediatorSupport support;
};

inline DataConfig data_config(const json& j, const fs::path& base) {
  detail::reject_unknown(j, {"path", "pi", "cluster", "treatment", "mediator", "outcome", "cluster_covariates", "individual_covariates",
                             "mediator_support"},
                         "data config");
  DataConfig d;
  if (!j.contains("path")) throw ValidationError("data config needs a \"path\"");
  d.path = j["path"].get<std::string>();
  d.resolved = fs::path(d.path).is_absolute() ? fs::path(d.path) : base / d.path;
  if (!fs::exists(d.resolved)) throw ValidationError("data file '" + d.resolved.string() + "' does not exist");
  if (!j.contains("pi")) throw ValidationError("data config needs the randomization probability \"pi\"");
  d.pi = j["pi"].get<double>();
  detail::read_opt(j, "cluster", d.schema.cluster);
  detail::read_opt(j, "treatment", d.schema.treatment);
  detail::read_opt(j, "mediator", d.schema.mediator);
  detail::read_opt(j, "outcome", d.schema.outcome);
  detail::read_opt(j, "cluster_covariates", d.schema.cluster_covariates);
  detail::read_opt(j, "individual_covariates", d.schema.individual_covariates);
  if (j.contains("mediator_support")) {
    const auto& s = j["mediator_support"];
    if (s.is_string()) {
      if (s.get<std::string>() != "continuous") throw ValidationError("mediator_support must be \"continuous\" or a list of values");
    } else {
      d.support = MediatorSupport::finite_values(s.get<std::vector<double>>());
    }
  }
  return d;
}

inline int analyze(const Options& o, std::ostream& log) {
  auto ctx = make_context(o, {"seed", "data", "estimators", "estimator", "inference", "scale", "out"}, true);
  const auto& cfg = ctx.config;
  if (!cfg.contains("data")) throw ValidationError("analyze needs a \"data\" section");
  const auto data = data_config(cfg["data"], ctx.base);
  const auto trial = load_trial(data.resolved.string(), data.schema, data.pi, data.support);
  crtm::validate(trial);

  EstimatorSpec base;
  if (cfg.contains("estimator")) base = estimator_from_json(cfg["estimator"], base);
  base.seed = derive_seed(ctx.seed, {1});
  base.threads = ctx.threads;
  const auto labels = labels_from(cfg, {"eif1-ml-ns"});
  const auto ic = inference_config(cfg, 1000);
  InferenceSpec inf;
  inf.B = ic.B;
  inf.level = ic.level;
  inf.seed = derive_seed(ctx.seed, {2});
  inf.threads = ctx.threads;
  const auto scale = scale_of(cfg);
  const auto results = crtm::analyze(trial, labels, base, ic.method, inf, scale);

  json report;
  report["command"] = "analyze";
  report["provenance"] = {{"config", cfg},
                          {"seed", ctx.seed},
                          {"estimator_seed", base.seed},
                          {"bootstrap_seed", inf.seed},
                          {"folds", base.folds},
                          {"integration", {{"draws", base.integration.draws}, {"nodes", base.integration.nodes}}},
                          {"nuisance", to_json(base.nuisance)},
                          {"data",
                           {{"path", data.path},
                            {"clusters", trial.size()},
                            {"treated", trial.treated()},
                            {"individuals", trial.individuals()},
                            {"pi", trial.pi}}}};
  json ests = json::object();
  std::vector<std::pair<std::string, InferenceResult>> rows;
  for (const auto& r : results) {
    json e;
    e["effects"] = effect_table_json(r.effects, &r.inference);
    e["points"] = to_json(r.estimate.points);
    e["inference"] = {{"method", inference_name(r.method)}, {"level", inf.level}};
    if (r.method == InferenceMethod::cluster_bootstrap) {
      e["inference"]["B"] = inf.B;
      e["inference"]["redraws"] = r.inference.redraws;
    }
    auto warnings = r.estimate.warnings;
    warnings.insert(warnings.end(), r.inference.warnings.begin(), r.inference.warnings.end());
    e["warnings"] = warnings;
    e["provenance"] = r.estimate.provenance;
    ests[r.label] = e;
    rows.emplace_back(r.label, r.inference);
  }
  report["estimators"] = ests;

  fs::create_directories(ctx.out);
  write_text(ctx.out / "report.json", report.dump(2) + "\n");
  std::ostringstream csv;
  write_effects_csv(csv, rows);
  write_text(ctx.out / "effects.csv", csv.str());
  log << "wrote " << (ctx.out / "report.json").string() << " and " << (ctx.out / "effects.csv").string() << "\n";
  return ok;
}

inline int simulate(const Options& o, std::ostream& log) {
  auto ctx = make_context(o, {"seed", "name", "dgp", "K", "replicates", "estimators", "misspec", "estimator", "inference", "scale", "out"},
                          true);
  const auto& cfg = ctx.config;
  ScenarioSpec s;
  detail::read_opt(cfg, "name", s.name);
  if (cfg.contains("dgp")) s.dgp = dgp_from_json(cfg["dgp"]);
  detail::read_opt(cfg, "K", s.K);
  detail::read_opt(cfg, "replicates", s.replicates);
  s.estimators = labels_from(cfg, s.estimators);
  if (cfg.contains("misspec")) s.misspec = misspec_from_json(cfg["misspec"]);
  if (cfg.contains("estimator")) s.base = estimator_from_json(cfg["estimator"], s.base);
  const auto ic = inference_config(cfg, 200);
  s.inference = ic.method;
  s.B = ic.B;
  s.level = ic.level;
  s.scale = scale_of(cfg);
  s.seed = ctx.seed;
  s.threads = ctx.threads;
  if (s.K < 2) throw ValidationError("a scenario needs K >= 2");
  const auto res = run_scenario(s);

  json j;
  j["command"] = "simulate";
  j["provenance"] = {{"config", cfg}, {"seed", ctx.seed}, {"dgp", to_json(s.dgp)}, {"nuisance", to_json(apply_misspec(s.base.nuisance, s.misspec))}};
  j["truth"] = to_json(res.truth, s.scale);
  json rows = json::array();
  for (const auto& r : res.results) rows.push_back(to_json(r));
  j["results"] = rows;
  j["log"] = res.log;

  fs::create_directories(ctx.out);
  write_text(ctx.out / "scenario.json", j.dump(2) + "\n");
  std::ostringstream a, b;
  write_scenario_csv(a, res.results);
  write_replicates_csv(b, res);
  write_text(ctx.out / "scenario.csv", a.str());
  write_text(ctx.out / "replicates.csv", b.str());
  log << "wrote " << res.results.size() << " rows to " << (ctx.out / "scenario.csv").string() << "\n";
  return ok;
}

inline int oracle(const Options& o, std::ostream& log) {
  auto ctx = make_context(o, {"seed", "dgp", "method", "draws", "tolerance", "scale", "out"}, true);
  const auto& cfg = ctx.config;
  const auto dgp = cfg.contains("dgp") ? dgp_from_json(cfg["dgp"]) : DgpSpec{};
  const std::string method = cfg.value("method", std::string("exact"));
  const auto scale = scale_of(cfg);
  OracleTruth t;
  if (method == "exact") t = oracle_truth(dgp);
  else if (method == "enumeration") t = oracle_enumeration(dgp);
  else if (method == "closed_form") t = oracle_closed_form(dgp);
  else if (method == "mc")
    t = oracle_mc(dgp, cfg.value("draws", std::size_t{1000000}), derive_seed(ctx.seed, {3}),
                  cfg.value("tolerance", std::numeric_limits<double>::infinity()));
  else throw ValidationError("unknown oracle method '" + method + "'");

  json j;
  j["command"] = "oracle";
  j["provenance"] = {{"config", cfg}, {"seed", ctx.seed}, {"dgp", to_json(dgp)}};
  j["truth"] = to_json(t, scale);
  fs::create_directories(ctx.out);
  write_text(ctx.out / "oracle.json", j.dump(2) + "\n");
  log << "wrote " << (ctx.out / "oracle.json").string() << "\n";
  return ok;
}

inline int validate_data(const Options& o, std::ostream& log) {
  auto ctx = make_context(o, {"seed", "data", "estimators", "estimator", "inference", "scale", "out"}, false);
  if (!ctx.config.contains("data")) throw ValidationError("validate needs a \"data\" section");
  const auto data = data_config(ctx.config["data"], ctx.base);
  const auto trial = load_trial(data.resolved.string(), data.schema, data.pi, data.support);
  crtm::validate(trial);

  std::map<std::size_t, std::size_t> sizes;
  std::set<double> mediator_values;
  bool binary_outcome = true;
  for (const auto& c : trial.clusters) {
    ++sizes[c.size()];
    for (double m : c.m) mediator_values.insert(m);
    for (double y : c.y) binary_outcome = binary_outcome && (y == 0.0 || y == 1.0);
  }
  json size_hist = json::object();
  for (const auto& [n, count] : sizes) size_hist[std::to_string(n)] = count;
  json diag = {{"valid", true},
               {"clusters", trial.size()},
               {"treated", trial.treated()},
               {"individuals", trial.individuals()},
               {"mean_size", trial.mean_size()},
               {"singletons", sizes.count(1) ? sizes[1] : 0},
               {"size_counts", size_hist},
               {"cluster_covariates", trial.dim_v()},
               {"individual_covariates", trial.dim_x()},
               {"distinct_mediator_values", mediator_values.size()},
               {"binary_outcome", binary_outcome}};
  std::vector<std::string> warnings;
  if (trial.size() < 50) warnings.emplace_back("fewer than 50 clusters: stabilized ml intervals may be anti-conservative");
  if (mediator_values.size() < 10 && !data.support.finite())
    warnings.emplace_back("mediator takes few distinct values; it is modeled as continuous");
  diag["warnings"] = warnings;
  log << diag.dump(2) << "\n";
  if (!o.out.empty() || ctx.config.contains("out")) {
    fs::create_directories(ctx.out);
    write_text(ctx.out / "validation.json", diag.dump(2) + "\n");
  }
  return ok;
}

inline json error_json(const char* kind, const std::string& message) { return {{"error", {{"kind", kind}, {"message", message}}}}; }

/// Parses arguments and runs one command; errors are reported as JSON on
/// `err` (and in <out>/error.json when an output directory was named).
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Mediation analysis for cluster-randomized trials", "crtm"};
  app.require_subcommand(1);
  Options o;
  auto add = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "JSON run config")->required();
    sub->add_option("--threads", o.threads, "worker threads (default: CRTM_THREADS, else 1)");
    sub->add_option("--seed", o.seed, "overrides the config seed");
    sub->add_option("--out", o.out, "output directory");
    return sub;
  };
  auto* a = add("analyze", "estimate effects from a long-format CSV");
  auto* s = add("simulate", "run a simulation scenario");
  auto* r = add("oracle", "compute true estimands of a DGP");
  auto* v = add("validate", "check a data file against its schema");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::ParseError& e) {
    err << error_json("usage", e.what()).dump() << "\n";
    return validation;
  }

  auto fail = [&](const char* kind, const std::string& msg) {
    const auto j = error_json(kind, msg);
    err << j.dump() << "\n";
    if (!o.out.empty()) {
      std::error_code ec;
      fs::create_directories(o.out, ec);
      std::ofstream f(fs::path(o.out) / "error.json");
      if (f) f << j.dump(2) << "\n";
    }
  };
  try {
    if (a->parsed()) return analyze(o, out);
    if (s->parsed()) return simulate(o, out);
    if (r->parsed()) return oracle(o, out);
    if (v->parsed()) return validate_data(o, out);
  } catch (const ValidationError& e) {
    fail("validation", e.what());
    return validation;
  } catch (const nlohmann::json::exception& e) {
    fail("validation", std::string("config: ") + e.what());
    return validation;
  } catch (const fs::filesystem_error& e) {
    fail("validation", e.what());
    return validation;
  } catch (const EstimationError& e) {
    fail("estimation", e.what());
    return estimation;
  } catch (const std::exception& e) {
    fail("estimation", e.what());
    return estimation;
  }
  return usage;
}

}  // namespace crtm::cli
