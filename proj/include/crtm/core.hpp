#pragma once

// Clustered-trial data model: cluster records, trials, summary features,
// fold splitting and whole-cluster resampling.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace crtm {

/// Input data or configuration violates a documented precondition.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A fit or an estimator could not be computed on otherwise valid input.
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One cluster: covariates, the cluster-level treatment and the members'
/// mediators and outcomes. Cluster size is the length of `m`.
struct ClusterRecord {
  std::string id;
  Eigen::VectorXd v;  // cluster-level covariates, length d_V
  Eigen::MatrixXd x;  // n x d_X individual covariates
  int a = 0;
  Eigen::VectorXd m;
  Eigen::VectorXd y;

  std::size_t size() const { return static_cast<std::size_t>(m.size()); }
};

/// Mediator support. An empty value list means continuous.
struct MediatorSupport {
  std::vector<double> values;

  bool finite() const { return !values.empty(); }
  static MediatorSupport continuous() { return {}; }
  static MediatorSupport finite_values(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return MediatorSupport{std::move(v)};
  }
};

struct Trial {
  std::vector<ClusterRecord> clusters;
  double pi = 0.5;  // known randomization probability
  MediatorSupport support;

  std::size_t size() const { return clusters.size(); }
  std::size_t dim_v() const { return clusters.empty() ? 0 : static_cast<std::size_t>(clusters.front().v.size()); }
  std::size_t dim_x() const { return clusters.empty() ? 0 : static_cast<std::size_t>(clusters.front().x.cols()); }
  std::size_t individuals() const {
    std::size_t total = 0;
    for (const auto& c : clusters) total += c.size();
    return total;
  }
  double mean_size() const {
    return clusters.empty() ? 0.0 : static_cast<double>(individuals()) / static_cast<double>(clusters.size());
  }
  std::size_t treated() const {
    return static_cast<std::size_t>(std::count_if(clusters.begin(), clusters.end(), [](const auto& c) { return c.a == 1; }));
  }
};

inline void validate(const ClusterRecord& c, std::size_t dim_v, std::size_t dim_x) {
  const auto n = c.size();
  if (n < 1) throw ValidationError("cluster '" + c.id + "' has no members");
  if (static_cast<std::size_t>(c.y.size()) != n || static_cast<std::size_t>(c.x.rows()) != n)
    throw ValidationError("cluster '" + c.id + "': mediator, outcome and covariate row counts differ");
  if (c.a != 0 && c.a != 1) throw ValidationError("cluster '" + c.id + "': treatment must be 0 or 1");
  if (static_cast<std::size_t>(c.v.size()) != dim_v || static_cast<std::size_t>(c.x.cols()) != dim_x)
    throw ValidationError("cluster '" + c.id + "': covariate dimensions differ from the first cluster");
  if (!c.m.allFinite() || !c.y.allFinite() || !c.x.allFinite() || !c.v.allFinite())
    throw ValidationError("cluster '" + c.id + "': non-finite values");
}

/// Structural checks. `require_both_arms` applies to estimation calls.
inline void validate(const Trial& t, bool require_both_arms = true) {
  if (!(t.pi > 0.0 && t.pi < 1.0)) throw ValidationError("randomization probability must lie in (0,1)");
  if (t.size() < 2) throw ValidationError("a trial needs at least two clusters");
  for (const auto& c : t.clusters) validate(c, t.dim_v(), t.dim_x());
  if (require_both_arms) {
    const auto k1 = t.treated();
    if (k1 == 0 || k1 == t.size()) throw ValidationError("trial needs at least one treated and one control cluster");
  }
  if (t.support.finite()) {
    for (const auto& c : t.clusters)
      for (double mj : c.m)
        if (!std::binary_search(t.support.values.begin(), t.support.values.end(), mj))
          throw ValidationError("cluster '" + c.id + "': mediator value outside the declared finite support");
  }
}

/// Which per-individual summaries enter a working model. The mediator and
/// covariate summaries are (own value, leave-one-out mean); for a cluster of
/// size one the leave-one-out mean is 0 and the singleton flag is 1, so the
/// feature dimension never depends on cluster size.
struct SummaryConfig {
  bool mediator_own = true;
  bool mediator_others = true;
  bool covariate_own = true;
  bool covariate_others = true;
  bool cluster_covariates = true;
  bool include_n = true;
  bool singleton_flag = true;

  static SummaryConfig covariates_only() {
    SummaryConfig cfg;
    cfg.mediator_own = false;
    cfg.mediator_others = false;
    return cfg;
  }
  bool operator==(const SummaryConfig&) const = default;
};

inline std::size_t feature_count(const SummaryConfig& cfg, std::size_t dim_v, std::size_t dim_x) {
  return (cfg.mediator_own ? 1 : 0) + (cfg.mediator_others ? 1 : 0) + (cfg.covariate_own ? dim_x : 0) +
         (cfg.covariate_others ? dim_x : 0) + (cfg.cluster_covariates ? dim_v : 0) + (cfg.include_n ? 1 : 0) +
         (cfg.singleton_flag ? 1 : 0);
}

inline std::vector<std::string> feature_names(const SummaryConfig& cfg, std::size_t dim_v, std::size_t dim_x) {
  std::vector<std::string> names;
  if (cfg.mediator_own) names.emplace_back("m_own");
  if (cfg.mediator_others) names.emplace_back("m_others");
  if (cfg.covariate_own)
    for (std::size_t k = 0; k < dim_x; ++k) names.push_back("x" + std::to_string(k) + "_own");
  if (cfg.covariate_others)
    for (std::size_t k = 0; k < dim_x; ++k) names.push_back("x" + std::to_string(k) + "_others");
  if (cfg.cluster_covariates)
    for (std::size_t k = 0; k < dim_v; ++k) names.push_back("v" + std::to_string(k));
  if (cfg.include_n) names.emplace_back("n");
  if (cfg.singleton_flag) names.emplace_back("singleton");
  return names;
}

/// Writes the features of member `j` (0-based) into `out`, using the
/// mediator vector `m` in place of the observed one.
inline void build_features(std::span<const double> m, const ClusterRecord& rec, std::size_t j, const SummaryConfig& cfg,
                           std::span<double> out) {
  const std::size_t n = rec.size();
  if (j >= n || m.size() != n) throw std::out_of_range("build_features: member index or mediator length out of range");
  const double others = n > 1 ? 1.0 / static_cast<double>(n - 1) : 0.0;
  std::size_t k = 0;
  if (cfg.mediator_own) out[k++] = m[j];
  if (cfg.mediator_others) {
    const double total = std::accumulate(m.begin(), m.end(), 0.0);
    out[k++] = (total - m[j]) * others;
  }
  const auto dx = static_cast<std::size_t>(rec.x.cols());
  if (cfg.covariate_own)
    for (std::size_t c = 0; c < dx; ++c) out[k++] = rec.x(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
  if (cfg.covariate_others)
    for (std::size_t c = 0; c < dx; ++c) {
      const double col_sum = rec.x.col(static_cast<Eigen::Index>(c)).sum();
      out[k++] = (col_sum - rec.x(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c))) * others;
    }
  if (cfg.cluster_covariates)
    for (Eigen::Index c = 0; c < rec.v.size(); ++c) out[k++] = rec.v(c);
  if (cfg.include_n) out[k++] = static_cast<double>(n);
  if (cfg.singleton_flag) out[k++] = n == 1 ? 1.0 : 0.0;
}

inline std::vector<double> build_features(std::span<const double> m, const ClusterRecord& rec, std::size_t j,
                                          const SummaryConfig& cfg) {
  std::vector<double> out(feature_count(cfg, static_cast<std::size_t>(rec.v.size()), static_cast<std::size_t>(rec.x.cols())));
  build_features(m, rec, j, cfg, out);
  return out;
}

inline std::vector<double> build_features(const ClusterRecord& rec, std::size_t j, const SummaryConfig& cfg) {
  return build_features(std::span<const double>(rec.m.data(), rec.size()), rec, j, cfg);
}

/// Cluster-level summaries: mean mediator, mean covariates, V and N.
inline std::size_t cluster_feature_count(const SummaryConfig& cfg, std::size_t dim_v, std::size_t dim_x) {
  return ((cfg.mediator_own || cfg.mediator_others) ? 1 : 0) + ((cfg.covariate_own || cfg.covariate_others) ? dim_x : 0) +
         (cfg.cluster_covariates ? dim_v : 0) + (cfg.include_n ? 1 : 0);
}

inline std::vector<std::string> cluster_feature_names(const SummaryConfig& cfg, std::size_t dim_v, std::size_t dim_x) {
  std::vector<std::string> names;
  if (cfg.mediator_own || cfg.mediator_others) names.emplace_back("m_mean");
  if (cfg.covariate_own || cfg.covariate_others)
    for (std::size_t k = 0; k < dim_x; ++k) names.push_back("x" + std::to_string(k) + "_mean");
  if (cfg.cluster_covariates)
    for (std::size_t k = 0; k < dim_v; ++k) names.push_back("v" + std::to_string(k));
  if (cfg.include_n) names.emplace_back("n");
  return names;
}

inline void build_cluster_features(std::span<const double> m, const ClusterRecord& rec, const SummaryConfig& cfg,
                                   std::span<double> out) {
  const double n = static_cast<double>(rec.size());
  std::size_t k = 0;
  if (cfg.mediator_own || cfg.mediator_others) out[k++] = std::accumulate(m.begin(), m.end(), 0.0) / n;
  if (cfg.covariate_own || cfg.covariate_others)
    for (Eigen::Index c = 0; c < rec.x.cols(); ++c) out[k++] = rec.x.col(c).mean();
  if (cfg.cluster_covariates)
    for (Eigen::Index c = 0; c < rec.v.size(); ++c) out[k++] = rec.v(c);
  if (cfg.include_n) out[k++] = n;
}

enum class ScaleKind { difference, ratio, odds_ratio };

struct EffectScale {
  ScaleKind kind = ScaleKind::difference;

  double identity() const { return kind == ScaleKind::difference ? 0.0 : 1.0; }

  void check(double x) const {
    if (kind == ScaleKind::difference) return;
    if (!(x > 0.0)) throw ValidationError("ratio scales need positive components");
    if (kind == ScaleKind::odds_ratio && !(x < 1.0)) throw ValidationError("odds-ratio scale needs components in (0,1)");
  }

  double operator()(double x, double y) const {
    check(x);
    check(y);
    switch (kind) {
      case ScaleKind::difference: return x - y;
      case ScaleKind::ratio: return x / y;
      case ScaleKind::odds_ratio: return (x / (1.0 - x)) / (y / (1.0 - y));
    }
    return 0.0;
  }

  /// Partial derivatives of g at (x, y).
  std::pair<double, double> gradient(double x, double y) const {
    switch (kind) {
      case ScaleKind::difference: return {1.0, -1.0};
      case ScaleKind::ratio: return {1.0 / y, -x / (y * y)};
      case ScaleKind::odds_ratio: {
        const double g = (x / (1.0 - x)) / (y / (1.0 - y));
        return {g / (x * (1.0 - x)), -g / (y * (1.0 - y))};
      }
    }
    return {0.0, 0.0};
  }
};

/// Balanced cluster-level partition: fold sizes differ by at most one.
inline std::vector<int> split_folds(const Trial& trial, int folds, std::uint64_t seed) {
  const std::size_t k = trial.size();
  if (folds < 2) throw ValidationError("cross-fitting needs at least two folds");
  if (static_cast<std::size_t>(folds) > k) throw ValidationError("more folds than clusters");
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold(k);
  for (std::size_t pos = 0; pos < k; ++pos) fold[order[pos]] = static_cast<int>(pos % static_cast<std::size_t>(folds));
  return fold;
}

inline std::vector<std::size_t> resample_indices(std::size_t k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  std::vector<std::size_t> idx(k);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

inline Trial subset(const Trial& trial, std::span<const std::size_t> idx) {
  Trial out;
  out.pi = trial.pi;
  out.support = trial.support;
  out.clusters.reserve(idx.size());
  for (auto i : idx) out.clusters.push_back(trial.clusters.at(i));
  return out;
}

/// Cluster bootstrap draw: K whole clusters sampled with replacement.
inline Trial resample_clusters(const Trial& trial, std::uint64_t seed) {
  if (trial.size() < 2) throw ValidationError("resampling needs at least two clusters");
  const auto idx = resample_indices(trial.size(), seed);
  return subset(trial, idx);
}

}  // namespace crtm
