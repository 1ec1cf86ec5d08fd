#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distill/rng.hpp"
#include "distill/schedule.hpp"
#include "distill/world.hpp"

namespace distill {

enum class SolverKind {
    ddim,
    euler_ve,
    euler_ancestral,
    dpmpp_2s,
    dpmpp_2s_ancestral,
    dpmpp_2m,
    dpmpp_2m_ancestral,
};

std::string to_string(SolverKind kind);
SolverKind solver_kind_from_string(const std::string& s);
bool is_ancestral(SolverKind kind);

/// cfg: every estimate is the CFG-combined one. cfgpp: the renoising
/// direction uses the unconditional estimate instead.
enum class CfgMode { cfg, cfgpp };
std::string to_string(CfgMode mode);
CfgMode cfg_mode_from_string(const std::string& s);

struct SolverOptions {
    double eta = 1.0;  // ancestral noise fraction
    double r = 0.5;    // DPM++ 2S intermediate position
    CfgMode cfg_mode = CfgMode::cfg;
};

/// Exact model-call accounting. A round is one CFG-level estimate; an
/// evaluation is one raw denoiser call (two per round under a condition).
struct CallCounter {
    std::atomic<std::uint64_t> rounds{0};
    std::atomic<std::uint64_t> evaluations{0};

    void reset() {
        rounds = 0;
        evaluations = 0;
    }
};

struct Estimate {
    Vec x0;         // CFG-combined (conditional) estimate
    Vec eps;
    Vec x0_uncond;  // null-condition estimate
    Vec eps_uncond;
};

/// A denoiser bound to a condition and CFG scale.
class GuidedModel {
public:
    GuidedModel(const Denoiser& denoiser, Condition condition = std::nullopt, CfgParams cfg = {},
                CallCounter* counter = nullptr)
        : denoiser_(&denoiser), condition_(condition), cfg_(cfg), counter_(counter) {}

    Estimate estimate(const Vec& x, double alpha_bar) const;

    const Denoiser& denoiser() const noexcept { return *denoiser_; }
    Condition condition() const noexcept { return condition_; }
    CfgParams cfg() const noexcept { return cfg_; }
    CallCounter* counter() const noexcept { return counter_; }

private:
    const Denoiser* denoiser_;
    Condition condition_;
    CfgParams cfg_;
    CallCounter* counter_;
};

/// What the solver hands to an estimate reviser: the point the model was
/// evaluated at and the conditional estimate it produced.
struct ReviseRequest {
    std::size_t step = 0;
    bool final_step = false;
    const Vec* x_eval = nullptr;  // VP state at the evaluation point
    double alpha_bar_eval = 1.0;
    const Vec* x0 = nullptr;
    const Vec* eps = nullptr;
};

/// Hook that may replace a conditional x0 estimate before the solver uses it.
using Reviser = std::function<Vec(const ReviseRequest&)>;

struct StepResult {
    Vec x_next;
    Vec x0_used;   // data prediction D with x_next = sqrt(abar_n) (D + sigma_down eps) + noise
    Vec eps_used;
};

struct AncestralSplit {
    double sigma_down = 0.0;
    double sigma_up = 0.0;
};

AncestralSplit ancestral_split(double sigma_from, double sigma_to, double eta);

// Single-step updates. `alpha_bar_*` are VP noise levels; all states are VP.

StepResult ddim_step(const GuidedModel& model, const Vec& x, double alpha_bar_cur, double alpha_bar_next,
                     const Reviser* reviser = nullptr, std::size_t step = 0, bool final_step = false);
StepResult ddim_step(const Denoiser& denoiser, const Vec& x, double t_cur, double t_next,
                     const NoiseSchedule& schedule);

StepResult euler_ve_step(const GuidedModel& model, const Vec& x, double alpha_bar_cur, double alpha_bar_next,
                         CfgMode mode = CfgMode::cfg, const Reviser* reviser = nullptr, std::size_t step = 0,
                         bool final_step = false);
StepResult euler_ve_step(const Denoiser& denoiser, const Vec& x, double t_cur, double t_next,
                         const NoiseSchedule& schedule);

/// Euler ancestral: deterministic move to sigma_down, then fresh noise of
/// scale sigma_up. `rng` may be null only when sigma_up == 0.
StepResult euler_ancestral_step(const GuidedModel& model, const Vec& x, double alpha_bar_cur,
                                double alpha_bar_next, AncestralSplit split, RngStream* rng,
                                CfgMode mode = CfgMode::cfg, const Reviser* reviser = nullptr,
                                std::size_t step = 0, bool final_step = false);

/// DPM-Solver++ 2S over one VE interval, optionally ending at sigma_down with
/// sigma_up noise (ancestral variant).
StepResult dpmpp_2s_step(const GuidedModel& model, const Vec& x, const VeInterval& interval, CfgMode mode,
                         const Reviser* reviser = nullptr, std::size_t step = 0, bool final_step = false,
                         std::optional<AncestralSplit> split = std::nullopt, RngStream* rng = nullptr);

/// State DPM-Solver++ 2M carries between steps.
struct MultistepHistory {
    std::optional<Vec> prev_x0;  // unrevised conditional estimate of the previous step
    double prev_h = 0.0;
};

StepResult dpmpp_2m_step(const GuidedModel& model, const Vec& x, const VeInterval& interval,
                         MultistepHistory& history, CfgMode mode = CfgMode::cfg, const Reviser* reviser = nullptr,
                         std::size_t step = 0, bool final_step = false,
                         std::optional<AncestralSplit> split = std::nullopt, RngStream* rng = nullptr);

/// 2M update in the D_i form: x_next = e^{-h} x - (e^{-h} - 1) D, D = x0 + (x0 - prev)/(2r).
Vec dpmpp_2m_update(const Vec& y, const Vec& x0, const Vec& prev_x0, double h, double r);
/// The same update rearranged into the denoised-estimate form.
Vec dpmpp_2m_update_rearranged(const Vec& y, const Vec& x0, const Vec& prev_x0, double h, double r);

struct TrajectoryRecord {
    double t = 0.0;
    Vec x;
    Vec x0_hat;
    Vec eps;
};

struct Trajectory {
    std::uint64_t seed = 0;
    std::vector<TrajectoryRecord> records;
    Vec final;
    std::vector<double> renoise_times;  // teacher renoise times of guided steps, in order
};

/// Draw x_T from the trajectory's init stream.
Vec initial_noise(std::uint64_t trajectory_seed, Eigen::Index dim);

/// Integrate from x_T at t = N down to t = 0 along `grid`. Ancestral noise
/// comes from the trajectory's solver-noise stream.
Trajectory sample(const GuidedModel& model, SolverKind solver, const SolverOptions& options, const TimeGrid& grid,
                  const NoiseSchedule& schedule, std::uint64_t trajectory_seed, const Vec& x_T,
                  const Reviser* reviser = nullptr);
/// As above with x_T ~ N(0, I) drawn from the trajectory's init stream.
Trajectory sample(const GuidedModel& model, SolverKind solver, const SolverOptions& options, const TimeGrid& grid,
                  const NoiseSchedule& schedule, std::uint64_t trajectory_seed, Eigen::Index dim,
                  const Reviser* reviser = nullptr);

/// Re-applies the update formula record by record (regenerating ancestral
/// noise from the seed) and returns the largest deviation from the stored states.
double replay_deviation(const Trajectory& trajectory, SolverKind solver, const SolverOptions& options,
                        const TimeGrid& grid, const NoiseSchedule& schedule);

/// CSV columns: seed, step, t, x_0..x_{d-1}, x0_hat_0..x0_hat_{d-1}.
void write_trajectories_csv(std::ostream& out, std::span<const Trajectory> trajectories);

} // namespace distill
