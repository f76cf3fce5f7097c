#include "crtm/crtm.hpp"

#include <gtest/gtest.h>

using namespace crtm;

namespace {

IntegrationPlan mc_plan(int draws, std::uint64_t seed, bool antithetic = true) {
  IntegrationPlan p;
  p.enumeration_cap = 0;
  p.method = IntegrationMethod::mc;
  p.draws = draws;
  p.seed = seed;
  p.antithetic = antithetic;
  return p;
}

IntegrationPlan enum_plan() {
  IntegrationPlan p;
  p.method = IntegrationMethod::enumerate;
  return p;
}

ClusterRecord finite_cluster(std::size_t n, int v, std::vector<double> x) {
  ClusterRecord c;
  c.id = "f";
  c.v = Eigen::VectorXd::Constant(1, v);
  c.x = Eigen::Map<Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(n));
  c.m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  c.y = c.m;
  return c;
}

double sample_corr(const Eigen::MatrixXd& d, int i, int j) {
  const Eigen::VectorXd a = d.col(i).array() - d.col(i).mean();
  const Eigen::VectorXd b = d.col(j).array() - d.col(j).mean();
  return a.dot(b) / std::sqrt(a.squaredNorm() * b.squaredNorm());
}

}  // namespace

TEST(Sampler, IndependentCoordinatesUncorrelated) {
  const std::vector<Marginal> margs(3, Marginal::gaussian(0, 1));
  const CopulaDensity cop{0.0};
  const std::size_t count = 100000;
  const auto e = latent_normals(count, 3, 5, false);
  const auto set = draws_from_latent([&](std::span<const double> z, std::span<double> m) { cop.sample(z, margs, m); }, e, count, 3);
  Eigen::MatrixXd d(count, 3);
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t k = 0; k < 3; ++k) d(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = set.row(r)[k];
  EXPECT_LT(std::abs(sample_corr(d, 0, 1)), 0.05);
  EXPECT_LT(std::abs(sample_corr(d, 1, 2)), 0.05);
}

TEST(Sampler, ExchangeableCorrelationAndMeans) {
  const std::vector<Marginal> margs{Marginal::gaussian(1.0, 2.0), Marginal::gaussian(-1.0, 0.5), Marginal::gaussian(0.0, 1.0)};
  const CopulaDensity cop{0.6};
  const std::size_t count = 100000;
  const auto e = latent_normals(count, 3, 6, false);
  const auto set = draws_from_latent([&](std::span<const double> z, std::span<double> m) { cop.sample(z, margs, m); }, e, count, 3);
  Eigen::MatrixXd d(count, 3);
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t k = 0; k < 3; ++k) d(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = set.row(r)[k];
  EXPECT_NEAR(sample_corr(d, 0, 1), 0.6, 0.02);
  EXPECT_NEAR(sample_corr(d, 0, 2), 0.6, 0.02);
  for (int k = 0; k < 3; ++k) {
    const double se = margs[static_cast<std::size_t>(k)].sd / std::sqrt(static_cast<double>(count));
    EXPECT_NEAR(d.col(k).mean(), margs[static_cast<std::size_t>(k)].mu, 3.0 * se);
  }
}

TEST(Integrals, ConstantOutcomeGivesConstant) {
  auto ns = oracle_nuisances(DgpSpec::linear_gaussian());
  ns.eta = [](int, const ClusterRecord&) -> EtaFn { return [](std::span<const double>, std::size_t) { return 4.25; }; };
  ns.eta_additive = nullptr;
  const AuxEvaluator ev(ns, mc_plan(2000, 1), Parameterization::eif1);
  const auto t = generate_trial(DgpSpec::linear_gaussian(), 4, 3);
  for (const auto& c : t.clusters) {
    const std::span<const double> m(c.m.data(), c.size());
    for (std::size_t j = 0; j < c.size(); ++j) {
      EXPECT_NEAR(ev.u1(1, 0, c, j), 4.25, 1e-12);
      EXPECT_NEAR(ev.u2(1, 0, c.m(0), c, j), 4.25, 1e-12);
      EXPECT_NEAR(ev.u3(1, 1, m, c, j), 4.25, 1e-12);
      EXPECT_NEAR(ev.u4(1, 1, 0, c, j), 4.25, 1e-12);
    }
  }
}

TEST(Integrals, EnumerationAgreesWithMonteCarlo) {
  const auto d = DgpSpec::finite_support();
  const auto ns = oracle_nuisances(d);
  const auto c = finite_cluster(3, 1, {1, 0, 1});
  const AuxEvaluator exact(ns, enum_plan(), Parameterization::eif1);
  const double truth = exact.u4(1, 1, 0, c, 1);
  const int reps = 40;
  std::vector<double> est;
  for (int r = 0; r < reps; ++r) est.push_back(AuxEvaluator(ns, mc_plan(1000, 100 + static_cast<std::uint64_t>(r), false), Parameterization::eif1).u4(1, 1, 0, c, 1));
  const double mean = mean_of(est);
  double ss = 0.0;
  for (double x : est) ss += (x - mean) * (x - mean);
  const double se = std::sqrt(ss / (reps - 1) / reps);
  EXPECT_LT(std::abs(mean - truth), 3.0 * se);
  const double u1 = exact.u1(1, 0, c, 2);
  std::vector<double> est1;
  for (int r = 0; r < reps; ++r) est1.push_back(AuxEvaluator(ns, mc_plan(1000, 500 + static_cast<std::uint64_t>(r), false), Parameterization::eif1).u1(1, 0, c, 2));
  const double m1 = mean_of(est1);
  ss = 0.0;
  for (double x : est1) ss += (x - m1) * (x - m1);
  EXPECT_LT(std::abs(m1 - u1), 3.0 * std::sqrt(ss / (reps - 1) / reps));
}

TEST(Integrals, IndependenceCollapsesU4ToU1) {
  const auto d = DgpSpec::finite_support();
  const auto t = generate_trial(d, 300, 4);
  auto cfg = simulation_nuisance_config();
  const auto ns = fit_nuisances(t, cfg, Backend::parametric, false);
  const AuxEvaluator ev(ns, enum_plan(), Parameterization::eif1);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& c = t.clusters[i];
    for (int a = 0; a <= 1; ++a)
      for (std::size_t j = 0; j < c.size(); ++j) EXPECT_NEAR(ev.u4(a, a, a, c, j), ev.u1(a, a, c, j), 1e-6);
  }
}

TEST(Weights, SameArmRatioIsOne) {
  const auto d = DgpSpec::finite_support();
  const auto ns = oracle_nuisances(d);
  const auto t = generate_trial(d, 20, 8);
  for (const auto param : {Parameterization::eif1, Parameterization::eif2}) {
    const AuxEvaluator ev(ns, enum_plan(), param);
    for (const auto& c : t.clusters) {
      const std::span<const double> m(c.m.data(), c.size());
      for (int a = 0; a <= 1; ++a) EXPECT_DOUBLE_EQ(ev.w1(a, a, m, c), 1.0);
    }
  }
}

TEST(Weights, ParameterizationsAgreeAtTruth) {
  const auto d = DgpSpec::finite_support();
  const auto ns = oracle_nuisances(d);
  const AuxEvaluator e1(ns, enum_plan(), Parameterization::eif1);
  const AuxEvaluator e2(ns, enum_plan(), Parameterization::eif2);
  detail::for_each_covariate_config(d, [&](const ClusterRecord& c, double) {
    detail::for_each_binary(c.size(), [&](std::span<const double> m) {
      for (std::size_t j = 0; j < c.size(); ++j) EXPECT_NEAR(e1.w2(1, 0, 1, m, c, j), e2.w2(1, 0, 1, m, c, j), 1e-10);
      for (int a = 0; a <= 1; ++a)
        for (int s = 0; s <= 1; ++s) EXPECT_NEAR(e1.w1(a, s, m, c), e2.w1(a, s, m, c), 1e-10);
    });
  });
}

TEST(Weights, SpillWeightIntegratesToOne) {
  const auto ns = oracle_nuisances(DgpSpec::linear_gaussian());
  const AuxEvaluator ev(ns, mc_plan(1000, 2), Parameterization::eif1);
  const auto t = generate_trial(DgpSpec::linear_gaussian(), 10, 13);
  const auto& c = t.clusters[0];
  const std::size_t count = 100000;
  const auto draws = sample_mediators(ns, 1, c, count, 99);
  double total = 0.0;
  std::vector<double> m(c.size());
  for (std::size_t d = 0; d < count; ++d) {
    for (std::size_t k = 0; k < c.size(); ++k) m[k] = draws(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
    total += ev.w2(1, 0, 1, m, c, 0);
  }
  EXPECT_NEAR(total / static_cast<double>(count), 1.0, 0.02);
}

TEST(Evaluate, AdditivePathMatchesGeneric) {
  const auto t = generate_trial(DgpSpec::linear_gaussian(), 60, 17);
  for (const Backend b : {Backend::parametric, Backend::ml}) {
    const auto ns = fit_nuisances(t, simulation_nuisance_config(), b, false);
    const AuxEvaluator fast(ns, mc_plan(1000, 3), Parameterization::eif1);
    AuxEvaluator slow(ns, mc_plan(1000, 3), Parameterization::eif1);
    slow.disable_additive_path();
    for (std::size_t i = 0; i < 10; ++i) {
      const auto& c = t.clusters[i];
      const auto x = fast.evaluate(c, i).eif1, y = slow.evaluate(c, i).eif1;
      for (std::size_t j = 0; j < c.size(); ++j) {
        for (int a = 0; a <= 1; ++a)
          for (int s = 0; s <= 1; ++s) EXPECT_NEAR(x.u1[a][s][j], y.u1[a][s][j], 1e-10);
        EXPECT_NEAR(x.u2[j], y.u2[j], 1e-10);
        EXPECT_NEAR(x.u4[j], y.u4[j], 1e-10);
      }
    }
  }
}

TEST(Evaluate, EvaluationIsOrderIndependent) {
  const auto t = generate_trial(DgpSpec::linear_gaussian(), 30, 19);
  const auto ns = fit_nuisances(t, simulation_nuisance_config(), Backend::parametric, false);
  const AuxEvaluator ev(ns, mc_plan(1000, 5), Parameterization::eif1);
  const auto first = ev.evaluate(t.clusters[7], 7).eif1.u4;
  ev.evaluate(t.clusters[3], 3);
  EXPECT_EQ(ev.evaluate(t.clusters[7], 7).eif1.u4, first);
}
