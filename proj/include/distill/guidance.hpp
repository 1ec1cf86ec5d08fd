#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "distill/rng.hpp"
#include "distill/schedule.hpp"
#include "distill/solvers.hpp"
#include "distill/world.hpp"

namespace distill {

/// Where the teacher re-perturbs the student estimate, relative to the
/// current grid step i: the next grid time, the current one, or a uniform
/// draw over the grid's interior times.
enum class RenoiseKind { decreasing, same, random };
std::string to_string(RenoiseKind kind);
RenoiseKind renoise_kind_from_string(const std::string& s);

/// interp blends x0 estimates; reparam blends states and epsilons.
enum class GuidanceMode { interp, reparam };
std::string to_string(GuidanceMode mode);
GuidanceMode guidance_mode_from_string(const std::string& s);

struct GuidanceConfig {
    double lambda = 0.02;
    int k = 1;
    RenoiseKind renoise = RenoiseKind::decreasing;
    GuidanceMode mode = GuidanceMode::interp;
    double teacher_w = 7.5;
    /// Proximal step size. When set it is primary and lambda is derived at
    /// each guided step from the noise level being revised.
    std::optional<double> gamma;

    bool enabled() const noexcept { return k > 0 && (gamma ? *gamma > 0.0 : lambda > 0.0); }
    double lambda_at(double alpha_bar) const;
    void validate() const;
    bool operator==(const GuidanceConfig&) const = default;
};

/// lambda = 2 gamma sqrt(abar) / sqrt(1 - abar).
double lambda_from_gamma(double gamma, double alpha_bar);
double gamma_from_lambda(double lambda, double alpha_bar);

struct Renoised {
    Vec x_s;
    Vec eps;
};

Renoised renoise(const Vec& x0, double alpha_bar_s, RngStream& rng);
Renoised renoise(const Vec& x0, double alpha_bar_s, const Vec& eps);

struct SdsEvaluation {
    double loss = 0.0;         // coefficient * |residual|^2
    Vec residual;              // x - teacher x0 at s
    double coefficient = 0.0;  // abar_s / (1 - abar_s)
    Vec eps_used;
    double s = 0.0;
    double alpha_bar_s = 0.0;
    double loss_eps = 0.0;     // |eps_teacher(x_s) - eps|^2
    double loss_tweedie = 0.0; // the same residual written through both Tweedie estimates
    Vec teacher_x0;
};

/// Score-distillation loss of `x` under the teacher at renoise time s with
/// a fixed eps. The teacher is used as given (null condition unless the
/// model carries one).
SdsEvaluation sds_loss(const Vec& x, const GuidedModel& teacher, double s, const NoiseSchedule& schedule,
                       const Vec& eps);
SdsEvaluation sds_loss(const Vec& x, const GuidedModel& teacher, double s, const NoiseSchedule& schedule,
                       RngStream& rng);

/// Gradient of the loss with the teacher estimate held constant:
/// 2 abar_s / (1 - abar_s) (x - x0_teacher). Not the full Jacobian gradient.
Vec sds_gradient(const SdsEvaluation& eval);
Vec sds_gradient(const Vec& x, const GuidedModel& teacher, double s, const NoiseSchedule& schedule, const Vec& eps);

/// One proximal step x0 - gamma g on the noise-space form of the gradient,
/// g = 2 (eps_teacher - eps) = sqrt((1 - abar_s) / abar_s) * sds_gradient.
Vec proximal_step(const Vec& x0, double gamma, const SdsEvaluation& eval);

struct Revision {
    Vec x0_new;
    Vec x_s;
    Vec eps;
    Vec teacher_x0;
    Vec teacher_eps;
    double alpha_bar_s = 1.0;
};

/// (1 - lambda) x0_student + lambda x0_teacher(x_s), with x_s the renoised
/// student estimate at abar_s under the given eps. lambda == 0 returns the
/// student estimate without touching the teacher.
Revision revise_estimate(const Vec& x0_student, const GuidedModel& teacher, double lambda, double alpha_bar_s,
                         const Vec& eps);

/// Renoise time for guided step `step` of `grid`. Times at the clean end
/// are clamped to the smallest positive grid time.
double renoise_time(RenoiseKind kind, const TimeGrid& grid, std::size_t step, RngStream& time_rng);

/// Full revision at grid step `step`: picks s, draws eps from `noise_rng`
/// and queries the teacher under `condition` with CFG scale teacher_w.
Revision revise_estimate(const Vec& x0_student, const Denoiser& teacher, const GuidanceConfig& cfg,
                         const TimeGrid& grid, std::size_t step, const NoiseSchedule& schedule, RngStream& noise_rng,
                         RngStream& time_rng, Condition condition, CallCounter* teacher_calls = nullptr);

struct GuidedEps {
    Vec x0_new;
    Vec x_tilde;
};

/// Reparameterized revision: x_tilde = (1 - lambda) x_t + lambda x_s and
/// x0_new = (x_tilde - sqrt(1 - abar_t) [eps_s + lambda (eps_t - eps_s)]) / sqrt(abar_t).
GuidedEps teacher_guided_eps(const Vec& x_t, const Vec& x_s, const Vec& eps_student, const Vec& eps_teacher,
                             double lambda, double alpha_bar_t);

/// Student whose x0 estimate is revised toward the teacher at a fixed
/// renoise level with a fixed eps on every call.
class TeacherGuidedDenoiser final : public Denoiser {
public:
    TeacherGuidedDenoiser(const Denoiser& student, const Denoiser& teacher, double lambda,
                          std::optional<double> alpha_bar_s, Vec eps, double teacher_w = 7.5);

    Prediction predict(const Vec& x, double alpha_bar, Condition c) const override;
    DenoiserKind kind() const override { return DenoiserKind::teacher_guided; }

private:
    const Denoiser& student_;
    const Denoiser& teacher_;
    double lambda_;
    std::optional<double> alpha_bar_s_;
    Vec eps_;
    double teacher_w_;
};

struct DistillationRun {
    const Denoiser* student = nullptr;
    const Denoiser* teacher = nullptr;
    SolverKind solver = SolverKind::ddim;
    SolverOptions options;
    GuidanceConfig guidance;
    CfgParams student_cfg;
    Condition condition;
    CallCounter* student_calls = nullptr;
    CallCounter* teacher_calls = nullptr;
};

/// Teacher-guided student sampling: the first k steps replace the student's
/// conditional estimate with its teacher revision before the solver uses it.
/// The final step is never guided. With guidance disabled this is exactly
/// sample() and the teacher is never called.
Trajectory run_distillation_pp(const DistillationRun& run, const TimeGrid& grid, const NoiseSchedule& schedule,
                               std::uint64_t trajectory_seed, const Vec& x_T);
Trajectory run_distillation_pp(const DistillationRun& run, const TimeGrid& grid, const NoiseSchedule& schedule,
                               std::uint64_t trajectory_seed, Eigen::Index dim);

} // namespace distill
