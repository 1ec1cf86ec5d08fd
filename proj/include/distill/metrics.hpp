#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "distill/rng.hpp"
#include "distill/solvers.hpp"

namespace distill {

/// n x d matrix, one point per row.
using Points = Eigen::MatrixXd;

/// Points plus where they came from.
struct SampleSet {
    Points points;
    std::string config_hash;
    std::uint64_t seed_first = 0;
    std::uint64_t seed_last = 0;
};

Points stack_rows(std::span<const Vec> rows);
Points final_states(std::span<const Trajectory> trajectories);

/// Sum in a fixed binary-tree order, so the result does not depend on how
/// the caller chunks the work.
double pairwise_sum(std::span<const double> values);

/// 1-D 2-Wasserstein distance between empirical distributions via the
/// sorted-quantile formula. Unequal sizes use linear interpolation between
/// order statistics on a max(n_a, n_b) quantile grid.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

/// n_directions random unit vectors (rows) drawn from `rng`.
Eigen::MatrixXd random_directions(Eigen::Index dim, int n_directions, RngStream& rng);

/// Mean 1-D W2 over the given unit directions (rows of `directions`).
double sliced_wasserstein(const Points& a, const Points& b, const Eigen::MatrixXd& directions);
double sliced_wasserstein(const Points& a, const Points& b, int n_projections, RngStream& rng);

struct MmdResult {
    double value = 0.0;  // max(raw, 0)
    double raw = 0.0;    // unbiased estimate, may be negative
    double bandwidth = 0.0;
};

/// Median pairwise distance over the pooled rows (first `cap` rows of each side).
double median_bandwidth(const Points& a, const Points& b, Eigen::Index cap = 500);

/// Unbiased MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 h^2)). A missing
/// bandwidth uses the median heuristic.
MmdResult mmd_rbf(const Points& a, const Points& b, std::optional<double> bandwidth = std::nullopt);

/// Closed-form W2 between diagonal Gaussians.
double gaussian_w2_squared(const Vec& mean_a, const Vec& var_a, const Vec& mean_b, const Vec& var_b);
double gaussian_w2(const Vec& mean_a, const Vec& var_a, const Vec& mean_b, const Vec& var_b);

/// |final - reference final|. Both runs must start from the same x_T.
double trajectory_endpoint_error(const Trajectory& trajectory, const Trajectory& reference);

Vec sample_mean(const Points& p);
Eigen::MatrixXd sample_covariance(const Points& p);

struct GaussianParams {
    Vec mean;
    Vec var;
};

struct MetricReport {
    double sliced_wasserstein = 0.0;
    double mmd_rbf = 0.0;
    double mmd_raw = 0.0;
    Vec mean_error;
    double cov_frobenius_error = 0.0;
    std::optional<double> w2_gaussian;
};

struct MetricOptions {
    int n_projections = 64;
    std::uint64_t seed = 0;
    Eigen::Index mmd_cap = 2000;  // rows per side used for MMD
};

/// Compare `a` against `b`. w2_gaussian is filled only when both sides are
/// given as single Gaussians.
MetricReport compare_samples(const Points& a, const Points& b, const MetricOptions& options,
                             const std::optional<GaussianParams>& gauss_a = std::nullopt,
                             const std::optional<GaussianParams>& gauss_b = std::nullopt);

/// JSON rows {config_hash, metric, value, n, seed_range}.
nlohmann::json metric_rows(const MetricReport& report, const SampleSet& set);

/// Paired-bootstrap significance of SW(baseline, ref) - SW(guided, ref).
/// Baseline and guided rows are paired by trajectory; both share the
/// resampled indices and the projection directions of each replicate.
struct GapSignificance {
    double gap = 0.0;
    double standard_error = 0.0;
    double floor = 0.0;  // 3 standard errors
    int replicates = 0;
};

inline constexpr int kBootstrapReplicates = 32;

GapSignificance paired_gap_significance(const Points& baseline, const Points& guided, const Points& reference,
                                        int n_projections, std::uint64_t seed, int replicates = kBootstrapReplicates);

/// Bootstrap standard error of SW(a, reference), resampling both sides.
double sliced_wasserstein_se(const Points& a, const Points& reference, int n_projections, std::uint64_t seed,
                             int replicates = kBootstrapReplicates);

} // namespace distill
