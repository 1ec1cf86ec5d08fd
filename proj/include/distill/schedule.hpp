#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace distill {

enum class ScheduleKind { linear, cosine, scaled_linear };
enum class Spacing { uniform, trailing, custom };

std::string to_string(ScheduleKind kind);
std::string to_string(Spacing spacing);
ScheduleKind schedule_kind_from_string(const std::string& s);
Spacing spacing_from_string(const std::string& s);

/// Discrete variance-preserving noise schedule.
///
/// Time indices run 0..N. Index 0 is the clean end (alpha_bar = 1); indices
/// 1..N carry beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod_{i<=t} alpha_i.
/// Fractional times interpolate log(alpha_bar) linearly between indices, which
/// lets solvers evaluate intermediate noise levels without leaving the VP
/// parameterization.
class NoiseSchedule {
public:
    static NoiseSchedule build(ScheduleKind kind, int n_train, double beta_min, double beta_max);
    static NoiseSchedule from_betas(std::vector<double> betas, ScheduleKind kind = ScheduleKind::linear);

    int n_train() const noexcept { return static_cast<int>(betas_.size()); }
    ScheduleKind kind() const noexcept { return kind_; }
    double beta_min() const noexcept { return beta_min_; }
    double beta_max() const noexcept { return beta_max_; }

    double beta(int t) const;
    double alpha(int t) const;
    double alpha_bar(int t) const;

    std::span<const double> betas() const noexcept { return betas_; }
    std::span<const double> alpha_bars() const noexcept { return alpha_bars_; }

    double alpha_bar_at(double t) const;
    /// Inverse of alpha_bar_at on [0, N]. Values below alpha_bar(N) map to N.
    double time_of(double alpha_bar) const;

    /// VE noise level sqrt((1 - abar) / abar).
    double sigma(int t) const;
    double sigma_at(double t) const;

private:
    NoiseSchedule(ScheduleKind kind, std::vector<double> betas, double beta_min, double beta_max);

    ScheduleKind kind_;
    std::vector<double> betas_;       // betas_[t-1] = beta_t
    std::vector<double> alpha_bars_;  // alpha_bars_[t], alpha_bars_[0] = 1
    std::vector<double> log_alpha_bars_;
    double beta_min_;
    double beta_max_;
};

double sigma_from_alpha_bar(double alpha_bar);
double alpha_bar_from_sigma(double sigma);

/// Descending list of schedule times from t = N (max noise) to t = 0 (clean).
/// Entries may be fractional for custom grids.
struct TimeGrid {
    std::vector<double> times;
    Spacing spacing = Spacing::uniform;

    std::size_t steps() const noexcept { return times.empty() ? 0 : times.size() - 1; }
    bool operator==(const TimeGrid&) const = default;
};

TimeGrid make_grid(const NoiseSchedule& schedule, int m_steps, Spacing spacing);
TimeGrid make_custom_grid(const NoiseSchedule& schedule, std::vector<double> times);

/// m_steps equal intervals in (possibly fractional) time from N to 0. Unlike
/// make_grid this allows m_steps > N.
TimeGrid make_fractional_grid(const NoiseSchedule& schedule, int m_steps);

/// Grid with m_steps - 1 intervals uniform in time from N down to t_floor,
/// followed by one clean leap t_floor -> 0.
TimeGrid make_floored_grid(const NoiseSchedule& schedule, int m_steps, double t_floor);

/// One solver interval in VE log-time coordinates, sigma = exp(-lambda).
struct VeInterval {
    double sigma_from = 0.0;
    double sigma_to = 0.0;
    double h = 0.0;          // lambda_to - lambda_from; +inf for the clean leap
    double r = 0.5;          // intermediate position (s - t_from) / (t_to - t_from)
    double sigma_mid = 0.0;  // sigma at the intermediate time s
    double h_ratio = 0.0;    // h_{i-1} / h_i, 0 on the first interval
    bool clean_leap = false; // sigma_to == 0
};

struct VeView {
    std::vector<double> sigmas;       // per grid node
    std::vector<double> log_times;    // -ln(sigma); +inf at the clean end
    std::vector<VeInterval> intervals;
};

VeView dpm_quantities(const NoiseSchedule& schedule, const TimeGrid& grid, std::span<const double> r_choice);
VeView dpm_quantities(const NoiseSchedule& schedule, const TimeGrid& grid, double r_choice = 0.5);

} // namespace distill
