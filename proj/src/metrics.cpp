#include "distill/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "distill/error.hpp"

namespace distill {

Points stack_rows(std::span<const Vec> rows) {
    if (rows.empty()) return Points(0, 0);
    Points p(static_cast<Eigen::Index>(rows.size()), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return p;
}

Points final_states(std::span<const Trajectory> trajectories) {
    std::vector<Vec> rows;
    rows.reserve(trajectories.size());
    for (const auto& t : trajectories) rows.push_back(t.final);
    return stack_rows(rows);
}

double pairwise_sum(std::span<const double> values) {
    if (values.size() <= 8) {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.subspan(0, half)) + pairwise_sum(values.subspan(half));
}

namespace {

// Quantile of sorted data at level u in (0, 1), interpolating linearly
// between order statistics placed at (i + 0.5) / n.
double quantile_sorted(const std::vector<double>& v, double u) {
    const double pos = u * static_cast<double>(v.size()) - 0.5;
    if (pos <= 0.0) return v.front();
    const auto last = static_cast<double>(v.size() - 1);
    if (pos >= last) return v.back();
    const auto i = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(i);
    return v[i] + frac * (v[i + 1] - v[i]);
}

double w2_sorted(const std::vector<double>& a, const std::vector<double>& b, std::vector<double>& scratch) {
    scratch.clear();
    if (a.size() == b.size()) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = a[i] - b[i];
            scratch.push_back(d * d);
        }
    } else {
        const std::size_t k = std::max(a.size(), b.size());
        for (std::size_t j = 0; j < k; ++j) {
            const double u = (static_cast<double>(j) + 0.5) / static_cast<double>(k);
            const double d = quantile_sorted(a, u) - quantile_sorted(b, u);
            scratch.push_back(d * d);
        }
    }
    return std::sqrt(pairwise_sum(scratch) / static_cast<double>(scratch.size()));
}

void check_points(const Points& a, const Points& b) {
    if (a.cols() != b.cols()) throw ValidationError("sample sets differ in dimension");
    if (a.rows() < 1 || b.rows() < 1) throw ValidationError("sample sets must be non-empty");
    if (!a.allFinite() || !b.allFinite()) throw ValidationError("sample sets contain non-finite entries");
}

} // namespace

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw ValidationError("wasserstein_1d: empty input");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<double> scratch;
    return w2_sorted(a, b, scratch);
}

Eigen::MatrixXd random_directions(Eigen::Index dim, int n_directions, RngStream& rng) {
    Eigen::MatrixXd dirs(n_directions, dim);
    for (int p = 0; p < n_directions; ++p) {
        Vec v = rng.normal_vector(dim);
        double norm = v.norm();
        while (norm == 0.0) {
            v = rng.normal_vector(dim);
            norm = v.norm();
        }
        dirs.row(p) = (v / norm).transpose();
    }
    return dirs;
}

double sliced_wasserstein(const Points& a, const Points& b, const Eigen::MatrixXd& directions) {
    check_points(a, b);
    if (directions.cols() != a.cols()) throw ValidationError("projection directions differ in dimension");
    const Eigen::MatrixXd pa = a * directions.transpose();
    const Eigen::MatrixXd pb = b * directions.transpose();
    std::vector<double> va(static_cast<std::size_t>(a.rows()));
    std::vector<double> vb(static_cast<std::size_t>(b.rows()));
    std::vector<double> scratch;
    std::vector<double> per_direction;
    per_direction.reserve(static_cast<std::size_t>(directions.rows()));
    for (Eigen::Index p = 0; p < directions.rows(); ++p) {
        std::copy(pa.col(p).begin(), pa.col(p).end(), va.begin());
        std::copy(pb.col(p).begin(), pb.col(p).end(), vb.begin());
        std::sort(va.begin(), va.end());
        std::sort(vb.begin(), vb.end());
        per_direction.push_back(w2_sorted(va, vb, scratch));
    }
    return pairwise_sum(per_direction) / static_cast<double>(per_direction.size());
}

double sliced_wasserstein(const Points& a, const Points& b, int n_projections, RngStream& rng) {
    if (n_projections < 16) throw ValidationError("sliced_wasserstein needs at least 16 projections");
    check_points(a, b);
    return sliced_wasserstein(a, b, random_directions(a.cols(), n_projections, rng));
}

double median_bandwidth(const Points& a, const Points& b, Eigen::Index cap) {
    const Eigen::Index na = std::min(a.rows(), cap);
    const Eigen::Index nb = std::min(b.rows(), cap);
    Points pooled(na + nb, a.cols());
    pooled.topRows(na) = a.topRows(na);
    pooled.bottomRows(nb) = b.topRows(nb);
    std::vector<double> dists;
    dists.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
    for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) dists.push_back((pooled.row(i) - pooled.row(j)).norm());
    }
    if (dists.empty()) return 1.0;
    const auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
    std::nth_element(dists.begin(), mid, dists.end());
    double h = *mid;
    if (dists.size() % 2 == 0) {
        const double lower = *std::max_element(dists.begin(), mid);
        h = 0.5 * (h + lower);
    }
    return h > 0.0 ? h : 1.0;
}

namespace {

// Row-wise kernel sums, each row summed in index order, rows combined pairwise.
double kernel_sum(const Points& x, const Points& y, double inv_two_h2, bool skip_diagonal) {
    std::vector<double> rows(static_cast<std::size_t>(x.rows()));
    std::vector<double> terms(static_cast<std::size_t>(y.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        terms.clear();
        for (Eigen::Index j = 0; j < y.rows(); ++j) {
            if (skip_diagonal && i == j) continue;
            terms.push_back(std::exp(-(x.row(i) - y.row(j)).squaredNorm() * inv_two_h2));
        }
        rows[static_cast<std::size_t>(i)] = pairwise_sum(terms);
    }
    return pairwise_sum(rows);
}

} // namespace

MmdResult mmd_rbf(const Points& a, const Points& b, std::optional<double> bandwidth) {
    check_points(a, b);
    if (a.rows() < 2 || b.rows() < 2) throw ValidationError("mmd_rbf needs at least 2 points per side");
    const double h = bandwidth.value_or(median_bandwidth(a, b));
    if (!(h > 0.0)) throw ValidationError("mmd_rbf bandwidth must be > 0");
    const double inv = 1.0 / (2.0 * h * h);
    const auto n = static_cast<double>(a.rows());
    const auto m = static_cast<double>(b.rows());
    const double kaa = kernel_sum(a, a, inv, true) / (n * (n - 1.0));
    const double kbb = kernel_sum(b, b, inv, true) / (m * (m - 1.0));
    // Average both cross orientations so the estimate is exactly symmetric.
    const double kab = 0.5 * (kernel_sum(a, b, inv, false) + kernel_sum(b, a, inv, false)) / (n * m);
    MmdResult out;
    out.raw = kaa + kbb - 2.0 * kab;
    out.value = std::max(out.raw, 0.0);
    out.bandwidth = h;
    return out;
}

double gaussian_w2_squared(const Vec& mean_a, const Vec& var_a, const Vec& mean_b, const Vec& var_b) {
    if (mean_a.size() != mean_b.size() || var_a.size() != mean_a.size() || var_b.size() != mean_b.size()) {
        throw ValidationError("gaussian_w2: dimension mismatch");
    }
    if ((var_a.array() <= 0.0).any() || (var_b.array() <= 0.0).any()) {
        throw ValidationError("gaussian_w2: variances must be positive");
    }
    return (mean_a - mean_b).squaredNorm() + (var_a.array().sqrt() - var_b.array().sqrt()).matrix().squaredNorm();
}

double gaussian_w2(const Vec& mean_a, const Vec& var_a, const Vec& mean_b, const Vec& var_b) {
    return std::sqrt(gaussian_w2_squared(mean_a, var_a, mean_b, var_b));
}

double trajectory_endpoint_error(const Trajectory& trajectory, const Trajectory& reference) {
    if (trajectory.records.empty() || reference.records.empty()) {
        throw ValidationError("trajectory_endpoint_error: empty trajectory");
    }
    const Vec& xa = trajectory.records.front().x;
    const Vec& xb = reference.records.front().x;
    if (xa.size() != xb.size() || xa != xb) {
        throw ValidationError("trajectory_endpoint_error: trajectories start from different x_T");
    }
    return (trajectory.final - reference.final).norm();
}

Vec sample_mean(const Points& p) {
    Vec m(p.cols());
    std::vector<double> col(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
        std::copy(p.col(k).begin(), p.col(k).end(), col.begin());
        m[k] = pairwise_sum(col) / static_cast<double>(p.rows());
    }
    return m;
}

Eigen::MatrixXd sample_covariance(const Points& p) {
    if (p.rows() < 2) throw ValidationError("sample_covariance needs at least 2 points");
    const Vec m = sample_mean(p);
    const Points centered = p.rowwise() - m.transpose();
    Eigen::MatrixXd cov(p.cols(), p.cols());
    std::vector<double> terms(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index i = 0; i < p.cols(); ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
            for (Eigen::Index r = 0; r < p.rows(); ++r) terms[static_cast<std::size_t>(r)] = centered(r, i) * centered(r, j);
            cov(i, j) = cov(j, i) = pairwise_sum(terms) / static_cast<double>(p.rows() - 1);
        }
    }
    return cov;
}

MetricReport compare_samples(const Points& a, const Points& b, const MetricOptions& options,
                             const std::optional<GaussianParams>& gauss_a, const std::optional<GaussianParams>& gauss_b) {
    check_points(a, b);
    MetricReport r;
    RngStream proj(options.seed, StreamPurpose::projections);
    r.sliced_wasserstein = sliced_wasserstein(a, b, options.n_projections, proj);
    const Eigen::Index na = std::min(a.rows(), options.mmd_cap);
    const Eigen::Index nb = std::min(b.rows(), options.mmd_cap);
    const MmdResult mmd = mmd_rbf(a.topRows(na), b.topRows(nb));
    r.mmd_rbf = mmd.value;
    r.mmd_raw = mmd.raw;
    r.mean_error = sample_mean(a) - sample_mean(b);
    r.cov_frobenius_error = (sample_covariance(a) - sample_covariance(b)).norm();
    if (gauss_a && gauss_b) r.w2_gaussian = gaussian_w2(gauss_a->mean, gauss_a->var, gauss_b->mean, gauss_b->var);
    return r;
}

nlohmann::json metric_rows(const MetricReport& report, const SampleSet& set) {
    nlohmann::json rows = nlohmann::json::array();
    const auto n = set.points.rows();
    auto row = [&](const std::string& metric, double value) {
        rows.push_back({{"config_hash", set.config_hash},
                        {"metric", metric},
                        {"value", value},
                        {"n", n},
                        {"seed_range", {set.seed_first, set.seed_last}}});
    };
    row("sliced_wasserstein", report.sliced_wasserstein);
    row("mmd_rbf", report.mmd_rbf);
    row("mmd_rbf_raw", report.mmd_raw);
    for (Eigen::Index k = 0; k < report.mean_error.size(); ++k) row("mean_error_" + std::to_string(k), report.mean_error[k]);
    row("cov_frobenius_error", report.cov_frobenius_error);
    if (report.w2_gaussian) row("w2_gaussian", *report.w2_gaussian);
    return rows;
}

GapSignificance paired_gap_significance(const Points& baseline, const Points& guided, const Points& reference,
                                        int n_projections, std::uint64_t seed, int replicates) {
    check_points(baseline, reference);
    check_points(guided, reference);
    if (baseline.rows() != guided.rows()) throw ValidationError("paired sets must have equal size");
    if (replicates < 2) throw ValidationError("bootstrap needs at least 2 replicates");

    GapSignificance out;
    out.replicates = replicates;
    {
        RngStream proj(seed, StreamPurpose::projections);
        const Eigen::MatrixXd dirs = random_directions(baseline.cols(), n_projections, proj);
        out.gap = sliced_wasserstein(baseline, reference, dirs) - sliced_wasserstein(guided, reference, dirs);
    }
    RngStream boot(seed, StreamPurpose::bootstrap);
    const Eigen::Index n = baseline.rows();
    const Eigen::Index m = reference.rows();
    std::vector<double> gaps;
    gaps.reserve(static_cast<std::size_t>(replicates));
    Points rb(n, baseline.cols()), rg(n, baseline.cols()), rr(m, reference.cols());
    for (int b = 0; b < replicates; ++b) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto pick = static_cast<Eigen::Index>(boot.uniform_index(static_cast<std::uint64_t>(n)));
            rb.row(i) = baseline.row(pick);
            rg.row(i) = guided.row(pick);
        }
        for (Eigen::Index j = 0; j < m; ++j) {
            rr.row(j) = reference.row(static_cast<Eigen::Index>(boot.uniform_index(static_cast<std::uint64_t>(m))));
        }
        const Eigen::MatrixXd dirs = random_directions(baseline.cols(), n_projections, boot);
        gaps.push_back(sliced_wasserstein(rb, rr, dirs) - sliced_wasserstein(rg, rr, dirs));
    }
    const double mean = pairwise_sum(gaps) / static_cast<double>(replicates);
    std::vector<double> sq;
    for (double g : gaps) sq.push_back((g - mean) * (g - mean));
    out.standard_error = std::sqrt(pairwise_sum(sq) / static_cast<double>(replicates - 1));
    out.floor = 3.0 * out.standard_error;
    return out;
}

double sliced_wasserstein_se(const Points& a, const Points& reference, int n_projections, std::uint64_t seed,
                             int replicates) {
    check_points(a, reference);
    if (replicates < 2) throw ValidationError("bootstrap needs at least 2 replicates");
    RngStream boot(seed, StreamPurpose::bootstrap);
    Points ra(a.rows(), a.cols()), rr(reference.rows(), reference.cols());
    std::vector<double> values;
    for (int b = 0; b < replicates; ++b) {
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            ra.row(i) = a.row(static_cast<Eigen::Index>(boot.uniform_index(static_cast<std::uint64_t>(a.rows()))));
        }
        for (Eigen::Index j = 0; j < reference.rows(); ++j) {
            rr.row(j) = reference.row(
                static_cast<Eigen::Index>(boot.uniform_index(static_cast<std::uint64_t>(reference.rows()))));
        }
        values.push_back(sliced_wasserstein(ra, rr, random_directions(a.cols(), n_projections, boot)));
    }
    const double mean = pairwise_sum(values) / static_cast<double>(replicates);
    std::vector<double> sq;
    for (double v : values) sq.push_back((v - mean) * (v - mean));
    return std::sqrt(pairwise_sum(sq) / static_cast<double>(replicates - 1));
}

} // namespace distill
