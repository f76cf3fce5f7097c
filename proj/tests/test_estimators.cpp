#include "crtm/crtm.hpp"

#include <gtest/gtest.h>

using namespace crtm;

namespace {

EstimatorSpec enumerating() {
  EstimatorSpec s;
  s.integration.method = IntegrationMethod::enumerate;
  return s;
}

const std::vector<Variant> kAll{{EstimatorFamily::mf, false},  {EstimatorFamily::eif1, false}, {EstimatorFamily::eif2, false},
                                {EstimatorFamily::eif1, true}, {EstimatorFamily::eif2, true}};

std::vector<double> estimands(const PointEstimates& p) {
  auto q = quantity_values(assemble_effects(p));
  q.resize(8);
  return q;
}

ClusterScore synthetic(double w, double v, double plug, std::size_t n) {
  ClusterScore s;
  s.n = n;
  for (auto& row : s.theta)
    for (auto& sc : row) sc = Score{{{w, v}, {1.0, 0.5 * v}}, plug};
  s.tau = Score{{{w, v}, {1.0, v}, {0.0, 1.0}}, plug};
  return s;
}

}  // namespace

TEST(Labels, ParseAndReject) {
  const auto s = parse_label("eif2-ml-s");
  EXPECT_EQ(s.family, EstimatorFamily::eif2);
  EXPECT_EQ(s.backend, Backend::ml);
  EXPECT_TRUE(s.stabilized);
  EXPECT_EQ(s.label(), "eif2-ml-s");
  for (const auto& l : all_labels()) EXPECT_EQ(parse_label(l).label(), l);
  EXPECT_THROW(parse_label("eif3-par-ns"), ValidationError);
  EXPECT_THROW(parse_label("mf-ml").check(), ValidationError);
}

TEST(Oracle, PopulationTrialReproducesTruth) {
  const auto d = DgpSpec::finite_support();
  const auto pop = population_trial(d);
  const auto ns = oracle_nuisances(d);
  const auto truth = estimands(oracle_enumeration(d).values);
  const auto res = estimate_variants(pop.trial, enumerating(), kAll, pop.weights, &ns);
  for (const auto& r : res) {
    const auto est = estimands(r.points);
    for (std::size_t q = 0; q < est.size(); ++q) EXPECT_NEAR(est[q], truth[q], 1e-10) << r.label << " " << quantity_names()[q];
  }
  for (std::size_t q = 0; q < 8; ++q) EXPECT_NEAR(estimands(res[1].points)[q], estimands(res[2].points)[q], 1e-10);
}

TEST(Oracle, ScoreMeansMatchTruth) {
  const auto d = DgpSpec::finite_support();
  const auto t = generate_trial(d, 100000, 2024);
  const auto ns = oracle_nuisances(d);
  const auto truth = oracle_enumeration(d).values;
  const auto r = estimate_variants(t, enumerating(), {{EstimatorFamily::eif1, false}}, {}, &ns).front();
  auto check = [&](auto psi, double target) {
    std::vector<double> v;
    for (const auto& s : r.scores) v.push_back(psi(s));
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    const double se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
    EXPECT_LT(std::abs(m - target), 3.0 * se) << m << " vs " << target;
  };
  check([](const ClusterScore& s) { return s.psi_theta(1, 1); }, truth.theta_C[1][1]);
  check([](const ClusterScore& s) { return s.psi_theta(0, 0); }, truth.theta_C[0][0]);
  check([](const ClusterScore& s) { return s.psi_tau(); }, truth.tau_C);
}

TEST(Degenerate, EqualSizesGiveEqualClusterAndIndividualAverages) {
  auto d = DgpSpec::linear_gaussian();
  d.sizes = {4};
  d.size_probs = {1.0};
  const auto t = generate_trial(d, 60, 5);
  EstimatorSpec s;
  s.nuisance = simulation_nuisance_config();
  for (const auto& r : estimate_variants(t, s, kAll)) {
    for (int a = 0; a <= 1; ++a)
      for (int b = 0; b <= 1; ++b) EXPECT_NEAR(r.points.theta_C[a][b], r.points.theta_I[a][b], 1e-12);
    EXPECT_NEAR(r.points.tau_C, r.points.tau_I, 1e-12);
  }
}

TEST(Degenerate, SingletonsHaveNoSpillover) {
  auto d = DgpSpec::finite_support();
  d.sizes = {1};
  d.size_probs = {1.0};
  const auto t = generate_trial(d, 200, 9);
  auto s = enumerating();
  s.nuisance = simulation_nuisance_config();
  for (const auto& r : estimate_variants(t, s, kAll)) {
    if (r.spec.family == EstimatorFamily::eif2) continue;
    EXPECT_NEAR(r.points.tau_C, r.points.theta_C[1][1], 1e-8) << r.label;
    EXPECT_NEAR(assemble_effects(r.points).C.sme, 0.0, 1e-8) << r.label;
  }
}

TEST(Scores, PerfectOutcomeModelHasZeroResidual) {
  auto d = DgpSpec::finite_support();
  d.noise_sd = 0.0;
  d.cluster_sd = 0.0;
  const auto t = generate_trial(d, 50, 10);
  const auto ns = oracle_nuisances(d);
  const AuxEvaluator ev(ns, enumerating().integration, Parameterization::eif1);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto& c = t.clusters[i];
    const auto aux = ev.evaluate(c, i);
    const auto s = eif_score(c, aux, Parameterization::eif1, t.pi);
    for (int a = 0; a <= 1; ++a)
      for (int b = 0; b <= 1; ++b)
        if (c.a == a) {
          EXPECT_NEAR(s.theta[a][b].terms[0].value, 0.0, 1e-12);
        }
  }
}

TEST(Stabilize, UnitWeightsUnchanged) {
  std::vector<ClusterScore> scores{synthetic(1.0, 0.3, 1.0, 2), synthetic(1.0, -0.1, 2.0, 3), synthetic(1.0, 0.7, 0.5, 1)};
  // the third tau term has zero weight for every cluster
  for (auto& s : scores) s.tau.terms.pop_back();
  const auto st = stabilize(scores);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    EXPECT_DOUBLE_EQ(st[i].psi_tau(), scores[i].psi_tau());
    EXPECT_DOUBLE_EQ(st[i].psi_theta(1, 0), scores[i].psi_theta(1, 0));
  }
}

TEST(Stabilize, InvariantToWeightScale) {
  std::vector<ClusterScore> a{synthetic(0.5, 0.3, 1.0, 2), synthetic(2.0, -0.1, 2.0, 3), synthetic(1.5, 0.7, 0.5, 1)};
  for (auto& s : a) s.tau.terms.pop_back();
  auto b = a;
  for (auto& s : b)
    for (auto& row : s.theta)
      for (auto& sc : row) sc.terms[0].weight *= 7.5;
  const auto pa = aggregate(stabilize(a)), pb = aggregate(stabilize(b));
  EXPECT_NEAR(pa.theta_C[1][0], pb.theta_C[1][0], 1e-14);
  EXPECT_NEAR(pa.theta_I[1][1], pb.theta_I[1][1], 1e-14);
}

TEST(Stabilize, RejectsNonpositiveMean) {
  std::vector<ClusterScore> a{synthetic(0.0, 1.0, 0.0, 1), synthetic(0.0, 1.0, 0.0, 2)};
  EXPECT_THROW(stabilize(a), EstimationError);
}

TEST(Stabilize, GapShrinksWithK) {
  auto median_gap = [](std::size_t K) {
    std::vector<double> gaps;
    EstimatorSpec s;
    s.nuisance = simulation_nuisance_config();
    for (std::uint64_t r = 0; r < 200; ++r) {
      const auto t = generate_trial(DgpSpec::linear_gaussian(), K, derive_seed(77, {K, r}));
      s.seed = r;
      const auto res = estimate_variants(t, s, {{EstimatorFamily::eif2, false}, {EstimatorFamily::eif2, true}});
      gaps.push_back(std::abs(res[0].points.theta_C[1][0] - res[1].points.theta_C[1][0]));
    }
    std::sort(gaps.begin(), gaps.end());
    return quantile_sorted(gaps, 0.5);
  };
  EXPECT_LT(median_gap(400), 0.5 * median_gap(100));
}

TEST(Effects, DecompositionHoldsOnEveryScale) {
  PointEstimates p;
  p.theta_C = {{{0.2, 0.25}, {0.4, 0.6}}};
  p.theta_I = {{{0.3, 0.35}, {0.45, 0.55}}};
  p.tau_C = 0.5;
  p.tau_I = 0.52;
  for (const auto k : {ScaleKind::difference, ScaleKind::ratio, ScaleKind::odds_ratio}) EXPECT_NO_THROW(assemble_effects(p, EffectScale{k}));
  p.tau_C = p.theta_C[1][1];
  EXPECT_DOUBLE_EQ(assemble_effects(p).C.sme, 0.0);
  EXPECT_DOUBLE_EQ(assemble_effects(p, EffectScale{ScaleKind::ratio}).C.sme, 1.0);
}

TEST(Estimate, SmallTrialAllLabelsFinite) {
  DgpSpec d = DgpSpec::linear_gaussian();
  d.sizes = {10, 11};
  d.size_probs = {0.3, 0.7};
  const auto t = generate_trial(d, 42, 42);
  EstimatorSpec base;
  base.seed = 1;
  for (const auto& l : all_labels()) {
    const auto r = estimate(t, parse_label(l, base));
    for (double x : estimands(r.points)) EXPECT_TRUE(std::isfinite(x)) << l;
  }
}

TEST(Estimate, CrossFittingFoldsRecorded) {
  const auto t = generate_trial(DgpSpec::linear_gaussian(), 40, 3);
  auto s = parse_label("eif1-ml-ns");
  s.folds = 4;
  const auto r = estimate(t, s);
  ASSERT_EQ(r.folds.size(), t.size());
  std::vector<int> counts(4);
  for (int f : r.folds) ++counts[static_cast<std::size_t>(f)];
  for (int c : counts) EXPECT_EQ(c, 10);
  EXPECT_TRUE(r.provenance.contains("folds"));
}

TEST(Estimate, DeterministicGivenSeed) {
  const auto t = generate_trial(DgpSpec::linear_gaussian(), 40, 3);
  auto s = parse_label("eif1-ml-s");
  s.seed = 5;
  const auto a = estimate(t, s), b = estimate(t, s);
  EXPECT_EQ(estimands(a.points), estimands(b.points));
  s.threads = 3;
  EXPECT_EQ(estimands(estimate(t, s).points), estimands(a.points));
}
