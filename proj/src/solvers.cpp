#include "distill/solvers.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "distill/error.hpp"

namespace distill {

std::string to_string(SolverKind kind) {
    switch (kind) {
    case SolverKind::ddim: return "ddim";
    case SolverKind::euler_ve: return "euler";
    case SolverKind::euler_ancestral: return "euler-ancestral";
    case SolverKind::dpmpp_2s: return "dpmpp-2s";
    case SolverKind::dpmpp_2s_ancestral: return "dpmpp-2s-ancestral";
    case SolverKind::dpmpp_2m: return "dpmpp-2m";
    case SolverKind::dpmpp_2m_ancestral: return "dpmpp-2m-ancestral";
    }
    return "ddim";
}

SolverKind solver_kind_from_string(const std::string& s) {
    if (s == "ddim") return SolverKind::ddim;
    if (s == "euler" || s == "euler-ve") return SolverKind::euler_ve;
    if (s == "euler-ancestral") return SolverKind::euler_ancestral;
    if (s == "dpmpp-2s") return SolverKind::dpmpp_2s;
    if (s == "dpmpp-2s-ancestral") return SolverKind::dpmpp_2s_ancestral;
    if (s == "dpmpp-2m") return SolverKind::dpmpp_2m;
    if (s == "dpmpp-2m-ancestral") return SolverKind::dpmpp_2m_ancestral;
    throw ValidationError("unknown solver kind '" + s + "'");
}

bool is_ancestral(SolverKind kind) {
    return kind == SolverKind::euler_ancestral || kind == SolverKind::dpmpp_2s_ancestral ||
           kind == SolverKind::dpmpp_2m_ancestral;
}

static bool is_dpm(SolverKind kind) {
    return kind == SolverKind::dpmpp_2s || kind == SolverKind::dpmpp_2s_ancestral || kind == SolverKind::dpmpp_2m ||
           kind == SolverKind::dpmpp_2m_ancestral;
}

std::string to_string(CfgMode mode) { return mode == CfgMode::cfg ? "cfg" : "cfgpp"; }

CfgMode cfg_mode_from_string(const std::string& s) {
    if (s == "cfg") return CfgMode::cfg;
    if (s == "cfgpp" || s == "cfg++") return CfgMode::cfgpp;
    throw ValidationError("unknown cfg mode '" + s + "'");
}

Estimate GuidedModel::estimate(const Vec& x, double alpha_bar) const {
    if (counter_) counter_->rounds.fetch_add(1, std::memory_order_relaxed);
    if (!condition_) {
        if (counter_) counter_->evaluations.fetch_add(1, std::memory_order_relaxed);
        Prediction p = denoiser_->predict(x, alpha_bar, std::nullopt);
        return {p.x0, p.eps, p.x0, p.eps};
    }
    if (counter_) counter_->evaluations.fetch_add(2, std::memory_order_relaxed);
    const Prediction cond = denoiser_->predict(x, alpha_bar, condition_);
    Prediction uncond = denoiser_->predict(x, alpha_bar, std::nullopt);
    Vec eps = cfg_combine(cond.eps, uncond.eps, cfg_);
    Vec x0 = cfg_tweedie(x, alpha_bar, eps);
    return {std::move(x0), std::move(eps), std::move(uncond.x0), std::move(uncond.eps)};
}

AncestralSplit ancestral_split(double sigma_from, double sigma_to, double eta) {
    if (sigma_to <= 0.0 || eta <= 0.0) return {sigma_to, 0.0};
    const double up = std::min(sigma_to, eta * std::sqrt(sigma_to * sigma_to * (sigma_from * sigma_from - sigma_to * sigma_to) /
                                                        (sigma_from * sigma_from)));
    return {std::sqrt(sigma_to * sigma_to - up * up), up};
}

namespace {

Vec apply_reviser(const Reviser* reviser, std::size_t step, bool final_step, const Vec& x_eval, double alpha_bar,
                  const Vec& x0, const Vec& eps) {
    if (!reviser || !*reviser) return x0;
    ReviseRequest req;
    req.step = step;
    req.final_step = final_step;
    req.x_eval = &x_eval;
    req.alpha_bar_eval = alpha_bar;
    req.x0 = &x0;
    req.eps = &eps;
    return (*reviser)(req);
}

// x_next from a data prediction and direction. Without ancestral noise this is
// the DDIM assembly sqrt(abar_n) x0 + sqrt(1 - abar_n) eps.
Vec assemble(const Vec& x0, const Vec& eps, double alpha_bar_next, double sigma_down, double sigma_up,
             const Vec* noise) {
    if (sigma_up == 0.0) {
        const double sigma_next = sigma_from_alpha_bar(alpha_bar_next);
        if (sigma_down == sigma_next) {
            return std::sqrt(alpha_bar_next) * x0 + std::sqrt(1.0 - alpha_bar_next) * eps;
        }
        return std::sqrt(alpha_bar_next) * (x0 + sigma_down * eps);
    }
    return std::sqrt(alpha_bar_next) * (x0 + sigma_down * eps + sigma_up * *noise);
}

void check_order(double alpha_bar_cur, double alpha_bar_next) {
    if (!(alpha_bar_cur > 0.0 && alpha_bar_cur <= 1.0 && alpha_bar_next > 0.0 && alpha_bar_next <= 1.0)) {
        throw ValidationError("noise levels must lie in (0, 1]");
    }
    if (alpha_bar_next < alpha_bar_cur) {
        throw ValidationError("grid-order violation: the next time must not be noisier than the current one");
    }
}

Vec draw_noise(RngStream* rng, Eigen::Index dim) {
    if (!rng) throw ValidationError("ancestral step requires an RNG stream");
    return rng->normal_vector(dim);
}

} // namespace

StepResult ddim_step(const GuidedModel& model, const Vec& x, double alpha_bar_cur, double alpha_bar_next,
                     const Reviser* reviser, std::size_t step, bool final_step) {
    check_order(alpha_bar_cur, alpha_bar_next);
    const Estimate est = model.estimate(x, alpha_bar_cur);
    Vec x0 = apply_reviser(reviser, step, final_step, x, alpha_bar_cur, est.x0, est.eps);
    Vec next = std::sqrt(alpha_bar_next) * x0 + std::sqrt(1.0 - alpha_bar_next) * est.eps;
    return {std::move(next), std::move(x0), est.eps};
}

StepResult ddim_step(const Denoiser& denoiser, const Vec& x, double t_cur, double t_next,
                     const NoiseSchedule& schedule) {
    if (t_next > t_cur) throw ValidationError("grid-order violation: t_next > t_cur");
    return ddim_step(GuidedModel(denoiser), x, schedule.alpha_bar_at(t_cur), schedule.alpha_bar_at(t_next));
}

StepResult euler_ve_step(const GuidedModel& model, const Vec& x, double alpha_bar_cur, double alpha_bar_next,
                         CfgMode mode, const Reviser* reviser, std::size_t step, bool final_step) {
    check_order(alpha_bar_cur, alpha_bar_next);
    const double sigma_cur = sigma_from_alpha_bar(alpha_bar_cur);
    const double sigma_next = sigma_from_alpha_bar(alpha_bar_next);
    const Estimate est = model.estimate(x, alpha_bar_cur);
    const Vec y = x / std::sqrt(alpha_bar_cur);
    const Vec& direction_base = mode == CfgMode::cfgpp ? est.x0_uncond : est.x0;
    Vec d = (y - direction_base) / sigma_cur;
    Vec x0 = apply_reviser(reviser, step, final_step, x, alpha_bar_cur, est.x0, est.eps);
    Vec next = assemble(x0, d, alpha_bar_next, sigma_next, 0.0, nullptr);
    return {std::move(next), std::move(x0), std::move(d)};
}

StepResult euler_ve_step(const Denoiser& denoiser, const Vec& x, double t_cur, double t_next,
                         const NoiseSchedule& schedule) {
    if (t_next > t_cur) throw ValidationError("grid-order violation: t_next > t_cur");
    return euler_ve_step(GuidedModel(denoiser), x, schedule.alpha_bar_at(t_cur), schedule.alpha_bar_at(t_next));
}

StepResult euler_ancestral_step(const GuidedModel& model, const Vec& x, double alpha_bar_cur,
                                double alpha_bar_next, AncestralSplit split, RngStream* rng, CfgMode mode,
                                const Reviser* reviser, std::size_t step, bool final_step) {
    check_order(alpha_bar_cur, alpha_bar_next);
    const double sigma_cur = sigma_from_alpha_bar(alpha_bar_cur);
    const double sigma_next = sigma_from_alpha_bar(alpha_bar_next);
    if (!(split.sigma_down >= 0.0 && split.sigma_up >= 0.0 && split.sigma_down <= sigma_next + 1e-15 &&
          split.sigma_down <= sigma_cur)) {
        throw ValidationError("ancestral split must satisfy sigma_cur >= sigma_down and sigma_down <= sigma_next");
    }
    const Estimate est = model.estimate(x, alpha_bar_cur);
    const Vec y = x / std::sqrt(alpha_bar_cur);
    const Vec& direction_base = mode == CfgMode::cfgpp ? est.x0_uncond : est.x0;
    Vec d = (y - direction_base) / sigma_cur;
    Vec x0 = apply_reviser(reviser, step, final_step, x, alpha_bar_cur, est.x0, est.eps);
    Vec noise;
    if (split.sigma_up > 0.0) noise = draw_noise(rng, x.size());
    Vec next = assemble(x0, d, alpha_bar_next, split.sigma_down, split.sigma_up, &noise);
    return {std::move(next), std::move(x0), std::move(d)};
}

StepResult dpmpp_2s_step(const GuidedModel& model, const Vec& x, const VeInterval& interval, CfgMode mode,
                         const Reviser* reviser, std::size_t step, bool final_step,
                         std::optional<AncestralSplit> split, RngStream* rng) {
    const double sigma_cur = interval.sigma_from;
    if (!(sigma_cur > 0.0)) throw ValidationError("DPM++ 2S step must start from a noisy state");
    if (!(interval.r > 0.0 && interval.r <= 1.0)) throw ValidationError("r_i must lie in (0, 1]");
    const double alpha_bar_cur = alpha_bar_from_sigma(sigma_cur);
    const double alpha_bar_next = alpha_bar_from_sigma(interval.sigma_to);
    const AncestralSplit sp = split.value_or(AncestralSplit{interval.sigma_to, 0.0});
    const double sigma_target = sp.sigma_down;

    const Estimate est = model.estimate(x, alpha_bar_cur);
    const Vec y = x / std::sqrt(alpha_bar_cur);
    const Vec& base = mode == CfgMode::cfgpp ? est.x0_uncond : est.x0;

    Vec data_pred;
    if (sigma_target == 0.0) {
        // Clean leap: return the (possibly revised) estimate itself.
        data_pred = apply_reviser(reviser, step, final_step, x, alpha_bar_cur, est.x0, est.eps);
    } else {
        const double h = std::log(sigma_cur / sigma_target);
        if (!(h > 0.0)) throw ValidationError("degenerate interval: h_i = 0");
        const double r = interval.r;
        const double decay_mid = std::exp(-r * h);
        const double sigma_mid = sigma_cur * decay_mid;
        const double alpha_bar_mid = alpha_bar_from_sigma(sigma_mid);
        const Vec u = decay_mid * y + (1.0 - decay_mid) * base;
        const Vec x_mid = std::sqrt(alpha_bar_mid) * u;
        const Estimate est_mid = model.estimate(x_mid, alpha_bar_mid);
        const Vec x0_mid = apply_reviser(reviser, step, final_step, x_mid, alpha_bar_mid, est_mid.x0, est_mid.eps);
        data_pred = base + (x0_mid - base) / (2.0 * r);
    }
    Vec eps = (y - data_pred) / sigma_cur;
    Vec noise;
    if (sp.sigma_up > 0.0) noise = draw_noise(rng, x.size());
    Vec next = assemble(data_pred, eps, alpha_bar_next, sigma_target, sp.sigma_up, &noise);
    return {std::move(next), std::move(data_pred), std::move(eps)};
}

Vec dpmpp_2m_update(const Vec& y, const Vec& x0, const Vec& prev_x0, double h, double r) {
    const double e = std::exp(-h);
    const Vec d = x0 + (x0 - prev_x0) / (2.0 * r);
    return e * y - (e - 1.0) * d;
}

Vec dpmpp_2m_update_rearranged(const Vec& y, const Vec& x0, const Vec& prev_x0, double h, double r) {
    const double e = std::exp(-h);
    return x0 - e * x0 + (1.0 - e) / (2.0 * r) * (x0 - prev_x0) + e * y;
}

StepResult dpmpp_2m_step(const GuidedModel& model, const Vec& x, const VeInterval& interval,
                         MultistepHistory& history, CfgMode mode, const Reviser* reviser, std::size_t step,
                         bool final_step, std::optional<AncestralSplit> split, RngStream* rng) {
    const double sigma_cur = interval.sigma_from;
    if (!(sigma_cur > 0.0)) throw ValidationError("DPM++ 2M step must start from a noisy state");
    if (step > 0 && !history.prev_x0) {
        throw ValidationError("DPM++ 2M correction step requires the previous estimate");
    }
    const double alpha_bar_cur = alpha_bar_from_sigma(sigma_cur);
    const double alpha_bar_next = alpha_bar_from_sigma(interval.sigma_to);
    const AncestralSplit sp = split.value_or(AncestralSplit{interval.sigma_to, 0.0});
    const double sigma_target = sp.sigma_down;

    const Estimate est = model.estimate(x, alpha_bar_cur);
    const Vec y = x / std::sqrt(alpha_bar_cur);
    const Vec& x0 = mode == CfgMode::cfgpp ? est.x0_uncond : est.x0;
    const Vec x0_new = apply_reviser(reviser, step, final_step, x, alpha_bar_cur, est.x0, est.eps);

    Vec data_pred;
    double h = 0.0;
    if (sigma_target == 0.0) {
        data_pred = x0_new;
    } else {
        h = std::log(sigma_cur / sigma_target);
        if (!(h > 0.0)) throw ValidationError("degenerate interval: h_i = 0");
        // D_i = x0 + (x0 - x0_prev) / (2 r_i); the first step has no correction.
        data_pred = x0;
        if (history.prev_x0) {
            const double r = history.prev_h / h;
            data_pred += (x0 - *history.prev_x0) / (2.0 * r);
        }
        // Revision replaces the leading x0 term of the rearranged update.
        data_pred += (x0_new - est.x0) / (1.0 - std::exp(-h));
    }
    history.prev_x0 = x0;
    history.prev_h = h;

    Vec eps = (y - data_pred) / sigma_cur;
    Vec noise;
    if (sp.sigma_up > 0.0) noise = draw_noise(rng, x.size());
    Vec next = assemble(data_pred, eps, alpha_bar_next, sigma_target, sp.sigma_up, &noise);
    return {std::move(next), std::move(data_pred), std::move(eps)};
}

Vec initial_noise(std::uint64_t trajectory_seed, Eigen::Index dim) {
    RngStream init(trajectory_seed, StreamPurpose::init);
    return init.normal_vector(dim);
}

namespace {

struct StepPlan {
    double alpha_bar_cur;
    double alpha_bar_next;
    AncestralSplit split;
};

// Noise levels and ancestral split per step, shared by sample() and replay.
std::vector<StepPlan> plan_steps(SolverKind solver, const SolverOptions& options, const TimeGrid& grid,
                                 const NoiseSchedule& schedule, const VeView* view) {
    std::vector<StepPlan> plan;
    const std::size_t steps = grid.steps();
    plan.reserve(steps);
    for (std::size_t i = 0; i < steps; ++i) {
        StepPlan p;
        if (view) {
            p.alpha_bar_cur = alpha_bar_from_sigma(view->sigmas[i]);
            p.alpha_bar_next = alpha_bar_from_sigma(view->sigmas[i + 1]);
        } else {
            p.alpha_bar_cur = schedule.alpha_bar_at(grid.times[i]);
            p.alpha_bar_next = schedule.alpha_bar_at(grid.times[i + 1]);
        }
        const double sigma_cur = sigma_from_alpha_bar(p.alpha_bar_cur);
        const double sigma_next = sigma_from_alpha_bar(p.alpha_bar_next);
        p.split = is_ancestral(solver) ? ancestral_split(sigma_cur, sigma_next, options.eta)
                                       : AncestralSplit{sigma_next, 0.0};
        plan.push_back(p);
    }
    return plan;
}

} // namespace

Trajectory sample(const GuidedModel& model, SolverKind solver, const SolverOptions& options, const TimeGrid& grid,
                  const NoiseSchedule& schedule, std::uint64_t trajectory_seed, const Vec& x_T,
                  const Reviser* reviser) {
    const std::size_t steps = grid.steps();
    if (steps < 1) throw ValidationError("grid needs at least one step");
    std::optional<VeView> view;
    if (is_dpm(solver)) view = dpm_quantities(schedule, grid, options.r);
    const auto plan = plan_steps(solver, options, grid, schedule, view ? &*view : nullptr);

    Trajectory traj;
    traj.seed = trajectory_seed;
    traj.records.reserve(steps + 1);
    Vec x = x_T;
    RngStream noise(trajectory_seed, StreamPurpose::solver_noise);
    MultistepHistory history;

    for (std::size_t i = 0; i < steps; ++i) {
        const bool final_step = i + 1 == steps;
        const StepPlan& p = plan[i];
        StepResult res;
        switch (solver) {
        case SolverKind::ddim:
            res = ddim_step(model, x, p.alpha_bar_cur, p.alpha_bar_next, reviser, i, final_step);
            break;
        case SolverKind::euler_ve:
            res = euler_ve_step(model, x, p.alpha_bar_cur, p.alpha_bar_next, options.cfg_mode, reviser, i,
                                final_step);
            break;
        case SolverKind::euler_ancestral:
            res = euler_ancestral_step(model, x, p.alpha_bar_cur, p.alpha_bar_next, p.split, &noise,
                                       options.cfg_mode, reviser, i, final_step);
            break;
        case SolverKind::dpmpp_2s:
            res = dpmpp_2s_step(model, x, view->intervals[i], options.cfg_mode, reviser, i, final_step);
            break;
        case SolverKind::dpmpp_2s_ancestral:
            res = dpmpp_2s_step(model, x, view->intervals[i], options.cfg_mode, reviser, i, final_step, p.split,
                                &noise);
            break;
        case SolverKind::dpmpp_2m:
            res = dpmpp_2m_step(model, x, view->intervals[i], history, options.cfg_mode, reviser, i, final_step);
            break;
        case SolverKind::dpmpp_2m_ancestral:
            res = dpmpp_2m_step(model, x, view->intervals[i], history, options.cfg_mode, reviser, i, final_step,
                                p.split, &noise);
            break;
        }
        traj.records.push_back({grid.times[i], x, std::move(res.x0_used), std::move(res.eps_used)});
        x = std::move(res.x_next);
    }
    traj.records.push_back({grid.times.back(), x, x, Vec::Zero(x.size())});
    traj.final = std::move(x);
    return traj;
}

Trajectory sample(const GuidedModel& model, SolverKind solver, const SolverOptions& options, const TimeGrid& grid,
                  const NoiseSchedule& schedule, std::uint64_t trajectory_seed, Eigen::Index dim,
                  const Reviser* reviser) {
    return sample(model, solver, options, grid, schedule, trajectory_seed, initial_noise(trajectory_seed, dim),
                  reviser);
}

double replay_deviation(const Trajectory& trajectory, SolverKind solver, const SolverOptions& options,
                        const TimeGrid& grid, const NoiseSchedule& schedule) {
    const std::size_t steps = grid.steps();
    if (trajectory.records.size() != steps + 1) {
        throw ValidationError("trajectory length does not match the grid");
    }
    std::optional<VeView> view;
    if (is_dpm(solver)) view = dpm_quantities(schedule, grid, options.r);
    const auto plan = plan_steps(solver, options, grid, schedule, view ? &*view : nullptr);
    RngStream noise(trajectory.seed, StreamPurpose::solver_noise);
    double worst = 0.0;
    for (std::size_t i = 0; i < steps; ++i) {
        const TrajectoryRecord& rec = trajectory.records[i];
        const StepPlan& p = plan[i];
        Vec z;
        if (p.split.sigma_up > 0.0) z = noise.normal_vector(rec.x.size());
        const Vec expected = assemble(rec.x0_hat, rec.eps, p.alpha_bar_next, p.split.sigma_down, p.split.sigma_up, &z);
        worst = std::max(worst, (expected - trajectory.records[i + 1].x).cwiseAbs().maxCoeff());
    }
    return worst;
}

void write_trajectories_csv(std::ostream& out, std::span<const Trajectory> trajectories) {
    Eigen::Index dim = 0;
    for (const auto& t : trajectories) {
        if (!t.records.empty()) {
            dim = t.records.front().x.size();
            break;
        }
    }
    out << "seed,step,t";
    for (Eigen::Index k = 0; k < dim; ++k) out << ",x_" << k;
    for (Eigen::Index k = 0; k < dim; ++k) out << ",x0_hat_" << k;
    out << '\n';
    char buf[64];
    for (const auto& traj : trajectories) {
        for (std::size_t step = 0; step < traj.records.size(); ++step) {
            const auto& rec = traj.records[step];
            out << traj.seed << ',' << step;
            std::snprintf(buf, sizeof buf, ",%.17g", rec.t);
            out << buf;
            for (Eigen::Index k = 0; k < dim; ++k) {
                std::snprintf(buf, sizeof buf, ",%.17g", rec.x[k]);
                out << buf;
            }
            for (Eigen::Index k = 0; k < dim; ++k) {
                std::snprintf(buf, sizeof buf, ",%.17g", rec.x0_hat[k]);
                out << buf;
            }
            out << '\n';
        }
    }
}

} // namespace distill
