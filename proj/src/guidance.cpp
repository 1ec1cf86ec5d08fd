#include "distill/guidance.hpp"

#include <cmath>

#include "distill/error.hpp"

namespace distill {

std::string to_string(RenoiseKind kind) {
    switch (kind) {
    case RenoiseKind::decreasing: return "decreasing";
    case RenoiseKind::same: return "same";
    case RenoiseKind::random: return "random";
    }
    return "decreasing";
}

RenoiseKind renoise_kind_from_string(const std::string& s) {
    if (s == "decreasing") return RenoiseKind::decreasing;
    if (s == "same") return RenoiseKind::same;
    if (s == "random") return RenoiseKind::random;
    throw ValidationError("unknown renoise schedule '" + s + "' (expected decreasing, same or random)");
}

std::string to_string(GuidanceMode mode) { return mode == GuidanceMode::interp ? "interp" : "reparam"; }

GuidanceMode guidance_mode_from_string(const std::string& s) {
    if (s == "interp") return GuidanceMode::interp;
    if (s == "reparam") return GuidanceMode::reparam;
    throw ValidationError("unknown guidance mode '" + s + "' (expected interp or reparam)");
}

double lambda_from_gamma(double gamma, double alpha_bar) {
    return 2.0 * gamma * std::sqrt(alpha_bar) / std::sqrt(1.0 - alpha_bar);
}

double gamma_from_lambda(double lambda, double alpha_bar) {
    return lambda * std::sqrt(1.0 - alpha_bar) / (2.0 * std::sqrt(alpha_bar));
}

double GuidanceConfig::lambda_at(double alpha_bar) const {
    if (!gamma) return lambda;
    const double l = lambda_from_gamma(*gamma, alpha_bar);
    if (!(l >= 0.0 && l <= 1.0)) {
        throw ValidationError("lambda derived from gamma leaves [0, 1] at alpha_bar = " + std::to_string(alpha_bar));
    }
    return l;
}

void GuidanceConfig::validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("guidance.lambda must lie in [0, 1]");
    if (k < 0) throw ValidationError("guidance.k must be >= 0");
    if (!(teacher_w >= 0.0) || !std::isfinite(teacher_w)) throw ValidationError("guidance.teacher_w must be >= 0");
    if (gamma && !(*gamma > 0.0 && std::isfinite(*gamma))) throw ValidationError("guidance.gamma must be > 0");
}

Renoised renoise(const Vec& x0, double alpha_bar_s, RngStream& rng) {
    return renoise(x0, alpha_bar_s, rng.normal_vector(x0.size()));
}

Renoised renoise(const Vec& x0, double alpha_bar_s, const Vec& eps) {
    if (eps.size() != x0.size()) throw ValidationError("renoise: eps dimension mismatch");
    Vec x_s = std::sqrt(alpha_bar_s) * x0 + std::sqrt(1.0 - alpha_bar_s) * eps;
    return {std::move(x_s), eps};
}

SdsEvaluation sds_loss(const Vec& x, const GuidedModel& teacher, double s, const NoiseSchedule& schedule,
                       const Vec& eps) {
    const double ab = schedule.alpha_bar_at(s);
    if (!(ab < 1.0)) throw ValidationError("sds_loss: renoise time s has alpha_bar_s = 1");
    const Renoised r = renoise(x, ab, eps);
    const Estimate est = teacher.estimate(r.x_s, ab);

    SdsEvaluation out;
    out.s = s;
    out.alpha_bar_s = ab;
    out.coefficient = ab / (1.0 - ab);
    out.residual = x - est.x0;
    out.loss = out.coefficient * out.residual.squaredNorm();
    out.loss_eps = (est.eps - eps).squaredNorm();
    const double sq = std::sqrt(1.0 - ab);
    const Vec teacher_side = (r.x_s - std::sqrt(ab) * est.x0) / sq;
    const Vec data_side = (r.x_s - std::sqrt(ab) * x) / sq;
    out.loss_tweedie = (teacher_side - data_side).squaredNorm();
    out.eps_used = eps;
    out.teacher_x0 = est.x0;
    return out;
}

SdsEvaluation sds_loss(const Vec& x, const GuidedModel& teacher, double s, const NoiseSchedule& schedule,
                       RngStream& rng) {
    return sds_loss(x, teacher, s, schedule, rng.normal_vector(x.size()));
}

Vec sds_gradient(const SdsEvaluation& eval) { return 2.0 * eval.coefficient * eval.residual; }

Vec sds_gradient(const Vec& x, const GuidedModel& teacher, double s, const NoiseSchedule& schedule, const Vec& eps) {
    return sds_gradient(sds_loss(x, teacher, s, schedule, eps));
}

Vec proximal_step(const Vec& x0, double gamma, const SdsEvaluation& eval) {
    const double ab = eval.alpha_bar_s;
    const Vec g = std::sqrt((1.0 - ab) / ab) * sds_gradient(eval);
    return x0 - gamma * g;
}

Revision revise_estimate(const Vec& x0_student, const GuidedModel& teacher, double lambda, double alpha_bar_s,
                         const Vec& eps) {
    Revision out;
    out.alpha_bar_s = alpha_bar_s;
    if (lambda == 0.0) {
        out.x0_new = x0_student;
        return out;
    }
    Renoised r = renoise(x0_student, alpha_bar_s, eps);
    if (alpha_bar_s < 1.0) {
        Estimate est = teacher.estimate(r.x_s, alpha_bar_s);
        out.teacher_x0 = std::move(est.x0);
        out.teacher_eps = std::move(est.eps);
    } else {
        // Clean end: the teacher's estimate of a clean point is the point.
        out.teacher_x0 = r.x_s;
        out.teacher_eps = Vec::Zero(r.x_s.size());
    }
    out.x0_new = (1.0 - lambda) * x0_student + lambda * out.teacher_x0;
    out.x_s = std::move(r.x_s);
    out.eps = std::move(r.eps);
    return out;
}

double renoise_time(RenoiseKind kind, const TimeGrid& grid, std::size_t step, RngStream& time_rng) {
    const std::size_t m = grid.steps();
    if (m < 1 || step >= m) throw ValidationError("renoise_time: step outside the grid");
    const double smallest_positive = grid.times[m - 1];
    double s = grid.times[step];
    switch (kind) {
    case RenoiseKind::decreasing: s = grid.times[step + 1]; break;
    case RenoiseKind::same: s = grid.times[step]; break;
    case RenoiseKind::random:
        if (m >= 2) s = grid.times[1 + time_rng.uniform_index(m - 1)];
        else s = smallest_positive;
        break;
    }
    if (!(s > 0.0)) s = smallest_positive;
    return s;
}

Revision revise_estimate(const Vec& x0_student, const Denoiser& teacher, const GuidanceConfig& cfg,
                         const TimeGrid& grid, std::size_t step, const NoiseSchedule& schedule, RngStream& noise_rng,
                         RngStream& time_rng, Condition condition, CallCounter* teacher_calls) {
    const double lambda = cfg.lambda_at(schedule.alpha_bar_at(grid.times[step]));
    if (lambda == 0.0 || cfg.k == 0) {
        Revision out;
        out.x0_new = x0_student;
        return out;
    }
    const double s = renoise_time(cfg.renoise, grid, step, time_rng);
    const Vec eps = noise_rng.normal_vector(x0_student.size());
    const GuidedModel model(teacher, condition, CfgParams{cfg.teacher_w}, teacher_calls);
    return revise_estimate(x0_student, model, lambda, schedule.alpha_bar_at(s), eps);
}

GuidedEps teacher_guided_eps(const Vec& x_t, const Vec& x_s, const Vec& eps_student, const Vec& eps_teacher,
                             double lambda, double alpha_bar_t) {
    GuidedEps out;
    out.x_tilde = (1.0 - lambda) * x_t + lambda * x_s;
    const Vec eps = eps_student + lambda * (eps_teacher - eps_student);
    out.x0_new = (out.x_tilde - std::sqrt(1.0 - alpha_bar_t) * eps) / std::sqrt(alpha_bar_t);
    return out;
}

TeacherGuidedDenoiser::TeacherGuidedDenoiser(const Denoiser& student, const Denoiser& teacher, double lambda,
                                             std::optional<double> alpha_bar_s, Vec eps, double teacher_w)
    : student_(student), teacher_(teacher), lambda_(lambda), alpha_bar_s_(alpha_bar_s), eps_(std::move(eps)),
      teacher_w_(teacher_w) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("lambda must lie in [0, 1]");
}

Prediction TeacherGuidedDenoiser::predict(const Vec& x, double alpha_bar, Condition c) const {
    Prediction p = student_.predict(x, alpha_bar, c);
    if (lambda_ == 0.0 || alpha_bar >= 1.0) return p;
    const GuidedModel teacher(teacher_, c, CfgParams{teacher_w_});
    const Revision rev = revise_estimate(p.x0, teacher, lambda_, alpha_bar_s_.value_or(alpha_bar), eps_);
    return {tweedie_eps(x, alpha_bar, rev.x0_new), rev.x0_new};
}

Trajectory run_distillation_pp(const DistillationRun& run, const TimeGrid& grid, const NoiseSchedule& schedule,
                               std::uint64_t trajectory_seed, const Vec& x_T) {
    if (!run.student) throw ValidationError("run_distillation_pp: student missing");
    run.guidance.validate();
    const GuidedModel student(*run.student, run.condition, run.student_cfg, run.student_calls);
    if (!run.guidance.enabled()) {
        return sample(student, run.solver, run.options, grid, schedule, trajectory_seed, x_T);
    }
    if (!run.teacher) throw ValidationError("run_distillation_pp: guidance enabled without a teacher");
    if (static_cast<std::size_t>(run.guidance.k) > grid.steps()) {
        throw ValidationError("guidance.k exceeds the number of grid steps");
    }

    RngStream noise_rng(trajectory_seed, StreamPurpose::guidance_noise);
    RngStream time_rng(trajectory_seed, StreamPurpose::guidance_time);
    const GuidedModel teacher(*run.teacher, run.condition, CfgParams{run.guidance.teacher_w}, run.teacher_calls);
    std::vector<double> renoise_times;
    const GuidanceConfig& cfg = run.guidance;

    const Reviser reviser = [&](const ReviseRequest& req) -> Vec {
        if (req.final_step || req.step >= static_cast<std::size_t>(cfg.k)) return *req.x0;
        const double lambda = cfg.lambda_at(req.alpha_bar_eval);
        if (lambda == 0.0) return *req.x0;
        const double s = renoise_time(cfg.renoise, grid, req.step, time_rng);
        const double ab_s = schedule.alpha_bar_at(s);
        renoise_times.push_back(s);
        const Vec eps = noise_rng.normal_vector(req.x0->size());
        const Revision rev = revise_estimate(*req.x0, teacher, lambda, ab_s, eps);
        if (cfg.mode == GuidanceMode::interp) return rev.x0_new;
        return teacher_guided_eps(*req.x_eval, rev.x_s, *req.eps, rev.teacher_eps, lambda, req.alpha_bar_eval).x0_new;
    };
    Trajectory traj = sample(student, run.solver, run.options, grid, schedule, trajectory_seed, x_T, &reviser);
    traj.renoise_times = std::move(renoise_times);
    return traj;
}

Trajectory run_distillation_pp(const DistillationRun& run, const TimeGrid& grid, const NoiseSchedule& schedule,
                               std::uint64_t trajectory_seed, Eigen::Index dim) {
    return run_distillation_pp(run, grid, schedule, trajectory_seed, initial_noise(trajectory_seed, dim));
}

} // namespace distill
