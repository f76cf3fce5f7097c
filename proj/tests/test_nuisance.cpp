#include "crtm/crtm.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace crtm;

namespace {

double mvn_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov) {
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::VectorXd r = llt.matrixL().solve(x - mu);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return std::exp(-0.5 * r.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(x.size()) * std::log(2.0 * M_PI));
}

Trial gaussian_mediator_trial(std::size_t K, std::uint64_t seed) {
  auto d = DgpSpec::linear_gaussian();
  d.g0 = 0.0;
  d.gA = 1.0;
  d.gX = 0.0;
  d.gV = 0.0;
  d.gN = 0.0;
  d.rho = 0.0;
  return generate_trial(d, K, seed);
}

}  // namespace

TEST(Glm, ExactInterpolation) {
  Eigen::MatrixXd X(3, 1);
  X << 0, 1, 2;
  Eigen::VectorXd y(3);
  y << 1, 3, 5;
  const auto m = fit_glm(X, y, Family::gaussian);
  EXPECT_NEAR(m.coefficients(0), 1.0, 1e-12);
  EXPECT_NEAR(m.coefficients(1), 2.0, 1e-12);
  EXPECT_NEAR(m.residual_sd, 0.0, 1e-12);
}

TEST(Glm, BalancedLogisticInterceptOnly) {
  const Eigen::MatrixXd X(6, 0);
  Eigen::VectorXd y(6);
  y << 0, 1, 0, 1, 0, 1;
  const auto m = fit_glm(X, y, Family::binomial);
  EXPECT_NEAR(m.coefficients(0), 0.0, 1e-10);
  EXPECT_NEAR(m.predict(std::vector<double>{}), 0.5, 1e-10);
}

TEST(Glm, ZeroWeightExcludesRow) {
  Eigen::MatrixXd X(3, 1);
  X << 0, 1, 2;
  Eigen::VectorXd y(3);
  y << 1, 2, 10;
  const std::vector<double> w{1, 1, 0};
  const auto weighted = fit_glm(X, y, Family::gaussian, w);
  const auto first = fit_glm(X.topRows(2), y.head(2), Family::gaussian);
  EXPECT_NEAR(weighted.coefficients(0), first.coefficients(0), 1e-12);
  EXPECT_NEAR(weighted.coefficients(1), first.coefficients(1), 1e-12);
}

TEST(Glm, LogisticScoreEquationsVanish) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  const int n = 400;
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = z(rng);
    X(i, 1) = z(rng);
    y(i) = std::bernoulli_distribution(logistic(0.3 + X(i, 0) - 0.5 * X(i, 1)))(rng) ? 1.0 : 0.0;
  }
  const auto m = fit_glm(X, y, Family::binomial);
  Eigen::Vector3d score = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    const double r = y(i) - logistic(m.coefficients(0) + m.coefficients(1) * X(i, 0) + m.coefficients(2) * X(i, 1));
    score += r * Eigen::Vector3d(1.0, X(i, 0), X(i, 1));
  }
  EXPECT_LT(score.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Glm, RankDeficiencyNamesColumn) {
  Eigen::MatrixXd X(4, 2);
  X << 1, 2, 2, 4, 3, 6, 4, 8;
  Eigen::VectorXd y(4);
  y << 1, 2, 3, 5;
  const std::vector<std::string> names{"a", "b"};
  try {
    fit_glm(X, y, Family::gaussian, {}, names);
    FAIL();
  } catch (const EstimationError& e) {
    EXPECT_NE(std::string(e.what()).find("collinear"), std::string::npos);
  }
}

TEST(Outcome, ExactLinearRecovery) {
  auto t = generate_trial(DgpSpec::linear_gaussian(), 60, 8);
  for (auto& c : t.clusters)
    for (Eigen::Index j = 0; j < c.m.size(); ++j) c.y(j) = 2.0 + c.a + c.m(j);
  for (const Backend b : {Backend::parametric, Backend::ml}) {
    const auto model = fit_outcome_model(t, SummaryConfig{}, b);
    for (const auto& c : t.clusters) {
      std::vector<double> m(c.size());
      for (std::size_t k = 0; k < m.size(); ++k) m[k] = 0.3 * static_cast<double>(k) - 0.7;
      for (std::size_t j = 0; j < c.size(); ++j) EXPECT_NEAR((*model)(1, m, c, j), 3.0 + m[j], 1e-6);
    }
  }
}

TEST(Outcome, TreatmentShiftWithoutInteractions) {
  const auto t = generate_trial(DgpSpec::linear_gaussian(), 50, 2);
  const auto model = fit_outcome_model(t, SummaryConfig{}, Backend::parametric, false);
  const auto& c0 = t.clusters[0];
  const std::span<const double> m0(c0.m.data(), c0.size());
  const double shift = (*model)(1, m0, c0, 0) - (*model)(0, m0, c0, 0);
  for (const auto& c : t.clusters) {
    const std::span<const double> m(c.m.data(), c.size());
    for (std::size_t j = 0; j < c.size(); ++j) EXPECT_NEAR((*model)(1, m, c, j) - (*model)(0, m, c, j), shift, 1e-10);
  }
}

namespace {
double worst_outcome_error(const DgpSpec& d, std::size_t K, std::uint64_t seed) {
  const auto t = generate_trial(d, K, seed);
  const auto model = fit_outcome_model(t, SummaryConfig{}, Backend::parametric);
  const detail::TrueModel truth{d};
  double worst = 0.0;
  detail::for_each_covariate_config(d, [&](const ClusterRecord& c, double) {
    for (int a = 0; a <= 1; ++a)
      detail::for_each_binary(c.size(), [&](std::span<const double> m) {
        for (std::size_t j = 0; j < c.size(); ++j) worst = std::max(worst, std::abs((*model)(a, m, c, j) - truth.eta(a, m, c, j)));
      });
  });
  return worst;
}
}  // namespace

TEST(Outcome, FiniteSupportRecoveryAgainstTruth) {
  auto d = DgpSpec::finite_support();
  d.noise_sd = 0.0;
  d.cluster_sd = 0.0;
  EXPECT_LT(worst_outcome_error(d, 300, 31), 1e-8);
  d.noise_sd = 0.2;
  d.cluster_sd = 0.1;
  EXPECT_LT(worst_outcome_error(d, 8000, 31), 0.03);
}

TEST(Mediator, GaussianDensityAtMean) {
  const auto t = gaussian_mediator_trial(500, 4);
  const auto model = fit_marginal_mediator(t, SummaryConfig::covariates_only(), Backend::parametric);
  for (const auto& c : t.clusters) {
    if (c.a != 1) continue;
    EXPECT_NEAR(model->marginal(1, c, 0).density(1.0), 1.0 / std::sqrt(2.0 * M_PI), 0.02);
    break;
  }
}

TEST(Mediator, CdfLimitsAndInverse) {
  const auto g = Marginal::gaussian(0.7, 1.3);
  EXPECT_NEAR(g.cdf(-1e300), 0.0, 1e-15);
  EXPECT_NEAR(g.cdf(1e300), 1.0, 1e-15);
  for (double m : {-3.0, -0.2, 0.7, 2.5}) EXPECT_NEAR(g.quantile(g.cdf(m)), m, 1e-6);
  const auto p = Marginal::pmf({0, 1, 2}, {0.2, 0.5, 0.3});
  EXPECT_NEAR(p.cdf(-1.0), 0.0, 1e-15);
  EXPECT_NEAR(p.cdf(5.0), 1.0, 1e-15);
  for (double m : {0.0, 1.0, 2.0}) EXPECT_EQ(p.quantile(p.cdf(m)), m);
}

TEST(Copula, RecoversCorrelation) {
  auto scores_for = [](double rho, std::size_t K, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < K; ++i) {
      std::vector<double> e(n), s(n);
      for (auto& v : e) v = z(rng);
      exchangeable_correlate(e, rho, s);
      out.push_back(s);
    }
    return out;
  };
  EXPECT_NEAR(fit_copula_scores(scores_for(0.0, 200, 10, 1)).rho, 0.0, 0.05);
  const double r = fit_copula_scores(scores_for(0.4, 500, 10, 2)).rho;
  EXPECT_GE(r, 0.35);
  EXPECT_LE(r, 0.45);
}

TEST(Copula, SingletonsCarryNoInformation) {
  std::vector<std::vector<double>> s{{0.3, 0.8, -0.1}, {1.0, 0.9}, {-0.5, -0.2, -0.9, 0.1}};
  const double base = fit_copula_scores(s).rho;
  s.push_back({2.5});
  s.push_back({-1.7});
  EXPECT_DOUBLE_EQ(fit_copula_scores(s).rho, base);
}

TEST(Copula, FittedFromGeneratedMediators) {
  auto d = DgpSpec::linear_gaussian();
  d.rho = 0.4;
  d.sizes = {10};
  d.size_probs = {1.0};
  const auto t = generate_trial(d, 500, 77);
  const auto med = fit_marginal_mediator(t, SummaryConfig::covariates_only(), Backend::parametric);
  EXPECT_NEAR(fit_copula(t, *med).rho, 0.4, 0.05);
}

TEST(CopulaDensity, MatchesMultivariateNormal) {
  const std::vector<Marginal> margs{Marginal::gaussian(0.5, 1.2), Marginal::gaussian(-0.3, 0.8), Marginal::gaussian(1.0, 2.0)};
  const double rho = 0.35;
  Eigen::Vector3d sd(1.2, 0.8, 2.0), mu(0.5, -0.3, 1.0);
  Eigen::Matrix3d cov;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cov(r, c) = (r == c ? 1.0 : rho) * sd(r) * sd(c);
  const CopulaDensity cop{rho};
  std::mt19937_64 rng(9);
  std::normal_distribution<double> z;
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> m{z(rng), z(rng), z(rng)};
    const Eigen::Vector3d x(m[0], m[1], m[2]);
    const double joint = mvn_density(x, mu, cov);
    EXPECT_NEAR(cop.joint(m, margs) / joint, 1.0, 1e-10);
    // others(j=1) is the bivariate normal of coordinates 0 and 2
    Eigen::Matrix2d c2;
    c2 << cov(0, 0), cov(0, 2), cov(2, 0), cov(2, 2);
    EXPECT_NEAR(cop.others(m, margs, 1) / mvn_density(Eigen::Vector2d(m[0], m[2]), Eigen::Vector2d(mu(0), mu(2)), c2), 1.0, 1e-10);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(cop.conditional(m, margs, j) * cop.others(m, margs, j) / cop.joint(m, margs), 1.0, 1e-8);
  }
}

TEST(CopulaDensity, IndependenceFactorizes) {
  const std::vector<Marginal> margs{Marginal::gaussian(0, 1), Marginal::gaussian(1, 2)};
  const std::vector<double> m{0.4, -0.6};
  const CopulaDensity cop{0.0};
  EXPECT_DOUBLE_EQ(cop.joint(m, margs), margs[0].density(m[0]) * margs[1].density(m[1]));
}

TEST(CopulaDensity, BivariateConditionalMean) {
  const std::vector<double> z{0.0, 1.0};
  const auto c = exchangeable_conditional(z, 0, 0.5);
  EXPECT_NEAR(c.mean, 0.5, 1e-15);
  EXPECT_NEAR(c.sd, std::sqrt(0.75), 1e-15);
}

TEST(Propensity, RandomizedArmGivesPi) {
  auto d = DgpSpec::linear_gaussian();
  d.gA = 0.0;
  double grand = 0.0;
  const int trials = 10;
  for (int r = 0; r < trials; ++r) {
    const auto null = generate_trial(d, 500, 12 + static_cast<std::uint64_t>(r));
    const auto model = fit_propensity(null, SummaryConfig{}, Backend::parametric);
    double mean = 0.0, treated = 0.0;
    for (const auto& c : null.clusters) {
      const std::span<const double> m(c.m.data(), c.size());
      EXPECT_NEAR((*model)(1, m, c) + (*model)(0, m, c), 1.0, 1e-15);
      mean += (*model)(1, m, c);
      treated += c.a;
    }
    mean /= static_cast<double>(null.size());
    EXPECT_NEAR(mean, treated / static_cast<double>(null.size()), 1e-6);
    grand += mean / trials;
  }
  EXPECT_NEAR(grand, 0.5, 0.03);
}

TEST(Propensity, ClipsExtremePredictions) {
  PropensityModel p;
  p.cfg = SummaryConfig::covariates_only();
  p.cfg.cluster_covariates = false;
  p.cfg.include_n = false;
  p.cfg.covariate_own = false;
  p.cfg.covariate_others = false;
  p.epsilon = 0.01;
  p.model.intercept = std::log(1e-9 / (1.0 - 1e-9));
  p.model.family = Family::binomial;
  ClusterRecord c;
  c.m = Eigen::VectorXd::Zero(2);
  c.y = c.m;
  c.x = Eigen::MatrixXd(2, 0);
  ClipCounter clips;
  const std::vector<double> m{0, 0};
  EXPECT_NEAR(p.raw(m, c), 1e-9, 1e-15);
  EXPECT_DOUBLE_EQ(p(1, m, c, &clips), 0.01);
  EXPECT_EQ(clips.propensity.load(), 1);
}

TEST(Sequential, ConstantOutcomeRegressions) {
  const auto t = generate_trial(DgpSpec::linear_gaussian(), 80, 6);
  const std::function<EtaFn(int, const ClusterRecord&)> eta = [](int, const ClusterRecord&) -> EtaFn {
    return [](std::span<const double>, std::size_t) { return 5.0; };
  };
  for (const Backend b : {Backend::parametric, Backend::ml}) {
    const auto star = fit_eta_star(t, eta, SummaryConfig::covariates_only(), b);
    const auto med = fit_marginal_mediator(t, SummaryConfig::covariates_only(), b);
    const std::function<std::vector<Marginal>(int, const ClusterRecord&)> margs = [med](int a, const ClusterRecord& c) {
      return med->marginals(a, c);
    };
    const std::function<double(int, std::span<const double>, const ClusterRecord&, std::size_t)> cond =
        [med](int a, std::span<const double> m, const ClusterRecord& c, std::size_t j) { return med->marginal(a, c, j).density(m[j]); };
    const auto dagger = fit_eta_dagger(t, eta, margs, cond, SummaryConfig::covariates_only(), b);
    for (const auto& c : t.clusters)
      for (int a = 0; a <= 1; ++a)
        for (int s = 0; s <= 1; ++s) {
          EXPECT_NEAR((*star)(a, s, 0.0, c, 0), 5.0, 1e-8);
          EXPECT_NEAR((*dagger)(a, s, 0.37, c, 0), 5.0, 1e-8);
        }
  }
}

TEST(Sequential, LinearInCovariates) {
  const auto t = generate_trial(DgpSpec::linear_gaussian(), 200, 21);
  const std::function<EtaFn(int, const ClusterRecord&)> eta = [](int a, const ClusterRecord& c) -> EtaFn {
    return [a, &c](std::span<const double> m, std::size_t j) { return 1.0 + a + 2.0 * m[j] + c.x(static_cast<Eigen::Index>(j), 0); };
  };
  const auto star = fit_eta_star(t, eta, SummaryConfig::covariates_only(), Backend::parametric);
  // eta* is affine in the covariate summaries: second differences vanish
  auto c = t.clusters[0];
  std::vector<double> vals;
  for (int s = 0; s < 3; ++s) {
    c.x(0, 0) = 0.5 * s;
    vals.push_back((*star)(1, 1, 0.0, c, 0));
  }
  EXPECT_NEAR(vals[2] - 2.0 * vals[1] + vals[0], 0.0, 1e-6);
}
