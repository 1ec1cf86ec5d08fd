#include "distill/world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "distill/error.hpp"

namespace distill {

namespace {

double log_sum_exp(const std::vector<double>& v) {
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

std::vector<double> normalized_log_weights(const std::vector<Component>& comps, const std::vector<std::size_t>& idx) {
    std::vector<double> lw;
    lw.reserve(idx.size());
    for (std::size_t i : idx) lw.push_back(std::log(comps[i].weight));
    const double z = log_sum_exp(lw);
    for (double& x : lw) x -= z;
    return lw;
}

} // namespace

MixtureWorld::MixtureWorld(std::vector<Component> components) : components_(std::move(components)) {
    if (components_.empty()) {
        throw ValidationError("mixture world needs at least one component");
    }
    dim_ = components_.front().mean.size();
    if (dim_ < 1) {
        throw ValidationError("mixture dimension must be >= 1");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < components_.size(); ++i) {
        const Component& c = components_[i];
        if (c.mean.size() != dim_ || c.var.size() != dim_) {
            throw ValidationError("component " + std::to_string(i) + " has inconsistent dimension");
        }
        if (!(c.weight >= 0.0)) {
            throw ValidationError("component " + std::to_string(i) + " has negative weight");
        }
        if (!(c.var.array() > 0.0).all() || !c.var.allFinite() || !c.mean.allFinite()) {
            throw ValidationError("component " + std::to_string(i) + " needs finite mean and positive variance");
        }
        total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12) {
        throw ValidationError("mixture weights must sum to 1 (got " + std::to_string(total) + ")");
    }
    for (std::size_t i = 0; i < components_.size(); ++i) {
        if (components_[i].weight > 0.0) all_members_.push_back(i);
        const int label = components_[i].condition;
        if (std::find(labels_.begin(), labels_.end(), label) == labels_.end()) labels_.push_back(label);
    }
    std::sort(labels_.begin(), labels_.end());
    all_log_weights_ = normalized_log_weights(components_, all_members_);
    for (int label : labels_) {
        std::vector<std::size_t> idx;
        for (std::size_t i : all_members_) {
            if (components_[i].condition == label) idx.push_back(i);
        }
        if (idx.empty()) {
            throw ValidationError("condition label " + std::to_string(label) + " owns no weighted component");
        }
        label_log_weights_.push_back(normalized_log_weights(components_, idx));
        label_members_.push_back(std::move(idx));
    }
}

bool MixtureWorld::has_label(int label) const {
    return std::binary_search(labels_.begin(), labels_.end(), label);
}

static std::size_t label_slot(const std::vector<int>& labels, int label) {
    const auto it = std::lower_bound(labels.begin(), labels.end(), label);
    if (it == labels.end() || *it != label) {
        throw ValidationError("unknown condition label " + std::to_string(label));
    }
    return static_cast<std::size_t>(it - labels.begin());
}

double MixtureWorld::label_prior(int label) const {
    const std::size_t slot = label_slot(labels_, label);
    double p = 0.0;
    for (std::size_t i : label_members_[slot]) p += components_[i].weight;
    return p;
}

const std::vector<std::size_t>& MixtureWorld::members(Condition c) const {
    if (!c) return all_members_;
    return label_members_[label_slot(labels_, *c)];
}

const std::vector<double>& MixtureWorld::member_log_weights(Condition c) const {
    if (!c) return all_log_weights_;
    return label_log_weights_[label_slot(labels_, *c)];
}

MarginalParams marginal_params(const MixtureWorld& world, double alpha_bar, Condition c) {
    if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) {
        throw ValidationError("alpha_bar must lie in (0, 1]");
    }
    const auto& idx = world.members(c);
    const auto& logw = world.member_log_weights(c);
    MarginalParams out;
    const double sa = std::sqrt(alpha_bar);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const Component& comp = world.components()[idx[j]];
        out.weights.push_back(std::exp(logw[j]));
        out.means.push_back(sa * comp.mean);
        out.vars.push_back((alpha_bar * comp.var.array() + (1.0 - alpha_bar)).matrix());
    }
    return out;
}

MarginalParams marginal_params(const MixtureWorld& world, const NoiseSchedule& schedule, double t, Condition c) {
    return marginal_params(world, schedule.alpha_bar_at(t), c);
}

double log_marginal_density(const MixtureWorld& world, double alpha_bar, const Vec& x, Condition c) {
    const auto& idx = world.members(c);
    const auto& logw = world.member_log_weights(c);
    const double sa = std::sqrt(alpha_bar);
    const double log2pi = std::log(2.0 * std::numbers::pi);
    std::vector<double> terms(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const Component& comp = world.components()[idx[j]];
        double ll = logw[j];
        for (Eigen::Index k = 0; k < x.size(); ++k) {
            const double var = alpha_bar * comp.var[k] + (1.0 - alpha_bar);
            const double diff = x[k] - sa * comp.mean[k];
            ll -= 0.5 * (diff * diff / var + std::log(var) + log2pi);
        }
        terms[j] = ll;
    }
    return log_sum_exp(terms);
}

std::string to_string(DenoiserKind kind) {
    switch (kind) {
    case DenoiserKind::teacher_exact: return "teacher-exact";
    case DenoiserKind::student_biased: return "student-biased";
    case DenoiserKind::student_consistency: return "student-consistency";
    case DenoiserKind::cfg_wrapped: return "cfg-wrapped";
    case DenoiserKind::teacher_guided: return "teacher-guided";
    }
    return "teacher-exact";
}

Vec tweedie_eps(const Vec& x, double alpha_bar, const Vec& x0) {
    if (alpha_bar >= 1.0) return Vec::Zero(x.size());
    return (x - std::sqrt(alpha_bar) * x0) / std::sqrt(1.0 - alpha_bar);
}

TeacherDenoiser::TeacherDenoiser(MixtureWorld world, DenoiserKind tag) : world_(std::move(world)), tag_(tag) {}

namespace {

// Responsibilities of each selected component at x under the time-t
// marginal, computed in the log domain. Also returns per-component
// marginal variances in `vars` (flattened, K x d).
void responsibilities(const MixtureWorld& world, const Vec& x, double alpha_bar, Condition c,
                      std::vector<double>& resp, std::vector<double>& vars) {
    const auto& idx = world.members(c);
    const auto& logw = world.member_log_weights(c);
    const Eigen::Index d = world.dim();
    const double sa = std::sqrt(alpha_bar);
    resp.resize(idx.size());
    vars.resize(idx.size() * static_cast<std::size_t>(d));
    double max_ll = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const Component& comp = world.components()[idx[j]];
        double ll = logw[j];
        for (Eigen::Index k = 0; k < d; ++k) {
            const double var = alpha_bar * comp.var[k] + (1.0 - alpha_bar);
            const double diff = x[k] - sa * comp.mean[k];
            vars[j * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)] = var;
            ll -= 0.5 * (diff * diff / var + std::log(var));
        }
        resp[j] = ll;
        max_ll = std::max(max_ll, ll);
    }
    double z = 0.0;
    for (double& r : resp) {
        r = std::exp(r - max_ll);
        z += r;
    }
    for (double& r : resp) r /= z;
}

} // namespace

Prediction TeacherDenoiser::predict(const Vec& x, double alpha_bar, Condition c) const {
    if (x.size() != world_.dim()) {
        throw ValidationError("denoiser input has wrong dimension");
    }
    if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) {
        throw ValidationError("alpha_bar must lie in (0, 1]");
    }
    if (alpha_bar >= 1.0) {
        world_.members(c);  // still reject unknown labels
        return {Vec::Zero(x.size()), x};
    }
    thread_local std::vector<double> resp;
    thread_local std::vector<double> vars;
    responsibilities(world_, x, alpha_bar, c, resp, vars);
    const auto& idx = world_.members(c);
    const Eigen::Index d = world_.dim();
    const double sa = std::sqrt(alpha_bar);
    Vec x0 = Vec::Zero(d);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const Component& comp = world_.components()[idx[j]];
        for (Eigen::Index k = 0; k < d; ++k) {
            const double var = vars[j * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)];
            const double post = comp.mean[k] + sa * comp.var[k] / var * (x[k] - sa * comp.mean[k]);
            x0[k] += resp[j] * post;
        }
    }
    Vec eps = tweedie_eps(x, alpha_bar, x0);
    return {std::move(eps), std::move(x0)};
}

Vec TeacherDenoiser::score(const Vec& x, double alpha_bar, Condition c) const {
    thread_local std::vector<double> resp;
    thread_local std::vector<double> vars;
    responsibilities(world_, x, alpha_bar, c, resp, vars);
    const auto& idx = world_.members(c);
    const Eigen::Index d = world_.dim();
    const double sa = std::sqrt(alpha_bar);
    Vec s = Vec::Zero(d);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const Component& comp = world_.components()[idx[j]];
        for (Eigen::Index k = 0; k < d; ++k) {
            const double var = vars[j * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)];
            s[k] -= resp[j] * (x[k] - sa * comp.mean[k]) / var;
        }
    }
    return s;
}

Prediction teacher_denoise(const MixtureWorld& world, const NoiseSchedule& schedule, const Vec& x, double t,
                           Condition c) {
    return TeacherDenoiser(world).predict(x, schedule.alpha_bar_at(t), c);
}

Vec teacher_score(const MixtureWorld& world, const NoiseSchedule& schedule, const Vec& x, double t, Condition c) {
    return TeacherDenoiser(world).score(x, schedule.alpha_bar_at(t), c);
}

std::string to_string(StudentKind kind) {
    switch (kind) {
    case StudentKind::biased_mean: return "biased-mean";
    case StudentKind::biased_weights: return "biased-weights";
    case StudentKind::consistency_endpoint: return "consistency-endpoint";
    }
    return "biased-mean";
}

StudentKind student_kind_from_string(const std::string& s) {
    if (s == "biased-mean") return StudentKind::biased_mean;
    if (s == "biased-weights") return StudentKind::biased_weights;
    if (s == "consistency-endpoint") return StudentKind::consistency_endpoint;
    throw ValidationError("unknown student kind '" + s + "'");
}

MixtureWorld shifted_world(const MixtureWorld& base, const StudentSpec& spec) {
    std::vector<Component> comps = base.components();
    if (spec.delta_std) {
        for (Component& c : comps) c.mean += *spec.delta_std * c.var.cwiseSqrt();
    } else {
        if (spec.mean_shift.size() != comps.size()) {
            throw ValidationError("biased-mean student needs one shift vector per component");
        }
        for (std::size_t i = 0; i < comps.size(); ++i) {
            if (spec.mean_shift[i].size() != base.dim()) {
                throw ValidationError("mean shift has wrong dimension");
            }
            comps[i].mean += spec.mean_shift[i];
        }
    }
    return MixtureWorld(std::move(comps));
}

MixtureWorld reweighted_world(const MixtureWorld& base, const StudentSpec& spec) {
    std::vector<Component> comps = base.components();
    if (spec.weight_perturbation.size() != comps.size()) {
        throw ValidationError("biased-weights student needs one perturbation per component");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < comps.size(); ++i) {
        comps[i].weight = std::max(0.0, comps[i].weight * (1.0 + spec.weight_perturbation[i]));
        total += comps[i].weight;
    }
    if (!(total > 0.0)) {
        throw ValidationError("weight perturbation removed every component");
    }
    for (Component& c : comps) c.weight /= total;
    // Renormalization can leave the sum off by an ulp or two; fold it into the largest weight.
    double sum = 0.0;
    for (const Component& c : comps) sum += c.weight;
    auto largest = std::max_element(comps.begin(), comps.end(),
                                    [](const Component& a, const Component& b) { return a.weight < b.weight; });
    largest->weight += 1.0 - sum;
    return MixtureWorld(std::move(comps));
}

ConsistencyStudent::ConsistencyStudent(MixtureWorld world, NoiseSchedule schedule, int n_inner)
    : teacher_(std::move(world)), schedule_(std::move(schedule)), n_inner_(n_inner) {
    if (n_inner_ < 8) {
        throw ValidationError("consistency-endpoint student needs n_inner >= 8");
    }
}

std::vector<double> ConsistencyStudent::inner_times(double alpha_bar) const {
    const double t = schedule_.time_of(alpha_bar);
    std::vector<double> times(static_cast<std::size_t>(n_inner_) + 1);
    for (int j = 0; j <= n_inner_; ++j) {
        times[static_cast<std::size_t>(j)] = t * static_cast<double>(n_inner_ - j) / static_cast<double>(n_inner_);
    }
    return times;
}

Prediction ConsistencyStudent::predict(const Vec& x, double alpha_bar, Condition c) const {
    if (alpha_bar >= 1.0) {
        return {Vec::Zero(x.size()), x};
    }
    const std::vector<double> times = inner_times(alpha_bar);
    Vec state = x;
    double ab_cur = alpha_bar;
    for (std::size_t j = 1; j < times.size(); ++j) {
        const double ab_next = schedule_.alpha_bar_at(times[j]);
        const Prediction p = teacher_.predict(state, ab_cur, c);
        state = std::sqrt(ab_next) * p.x0 + std::sqrt(1.0 - ab_next) * p.eps;
        ab_cur = ab_next;
    }
    Vec eps = tweedie_eps(x, alpha_bar, state);
    return {std::move(eps), std::move(state)};
}

std::unique_ptr<Denoiser> make_student(const StudentSpec& spec, const MixtureWorld& base,
                                       const NoiseSchedule& schedule) {
    switch (spec.kind) {
    case StudentKind::biased_mean:
        return std::make_unique<TeacherDenoiser>(shifted_world(base, spec), DenoiserKind::student_biased);
    case StudentKind::biased_weights:
        return std::make_unique<TeacherDenoiser>(reweighted_world(base, spec), DenoiserKind::student_biased);
    case StudentKind::consistency_endpoint:
        return std::make_unique<ConsistencyStudent>(base, schedule, spec.n_inner);
    }
    throw ValidationError("unknown student kind");
}

Vec cfg_combine(const Vec& cond_eps, const Vec& uncond_eps, const CfgParams& params) {
    if (cond_eps.size() != uncond_eps.size()) {
        throw ValidationError("cfg_combine: dimension mismatch");
    }
    if (params.w == 1.0) return cond_eps;
    if (params.w == 0.0) return uncond_eps;
    return uncond_eps + params.w * (cond_eps - uncond_eps);
}

Vec cfg_tweedie(const Vec& x, double alpha_bar, const Vec& combined_eps) {
    if (alpha_bar >= 1.0) return x;
    return (x - std::sqrt(1.0 - alpha_bar) * combined_eps) / std::sqrt(alpha_bar);
}

Prediction CfgDenoiser::predict(const Vec& x, double alpha_bar, Condition c) const {
    if (!c) return inner_.predict(x, alpha_bar, c);
    const Prediction cond = inner_.predict(x, alpha_bar, c);
    const Prediction uncond = inner_.predict(x, alpha_bar, std::nullopt);
    Vec eps = cfg_combine(cond.eps, uncond.eps, params_);
    Vec x0 = cfg_tweedie(x, alpha_bar, eps);
    return {std::move(eps), std::move(x0)};
}

} // namespace distill
