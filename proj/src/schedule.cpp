#include "distill/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "distill/error.hpp"

namespace distill {

std::string to_string(ScheduleKind kind) {
    switch (kind) {
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::scaled_linear: return "scaled-linear";
    }
    return "linear";
}

std::string to_string(Spacing spacing) {
    switch (spacing) {
    case Spacing::uniform: return "uniform";
    case Spacing::trailing: return "trailing";
    case Spacing::custom: return "custom";
    }
    return "uniform";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "scaled-linear" || s == "scaled_linear") return ScheduleKind::scaled_linear;
    throw ValidationError("unknown schedule kind '" + s + "'");
}

Spacing spacing_from_string(const std::string& s) {
    if (s == "uniform") return Spacing::uniform;
    if (s == "trailing") return Spacing::trailing;
    if (s == "custom") return Spacing::custom;
    throw ValidationError("unknown grid spacing '" + s + "'");
}

NoiseSchedule::NoiseSchedule(ScheduleKind kind, std::vector<double> betas, double beta_min, double beta_max)
    : kind_(kind), betas_(std::move(betas)), beta_min_(beta_min), beta_max_(beta_max) {
    alpha_bars_.resize(betas_.size() + 1);
    log_alpha_bars_.resize(betas_.size() + 1);
    alpha_bars_[0] = 1.0;
    log_alpha_bars_[0] = 0.0;
    double running = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
        running *= 1.0 - betas_[i];
        alpha_bars_[i + 1] = running;
        log_alpha_bars_[i + 1] = std::log(running);
    }
}

NoiseSchedule NoiseSchedule::build(ScheduleKind kind, int n_train, double beta_min, double beta_max) {
    if (n_train < 2) {
        throw ValidationError("invalid range: n_train must be >= 2");
    }
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
        throw ValidationError("invalid range: require 0 < beta_min <= beta_max < 1");
    }
    const auto n = static_cast<std::size_t>(n_train);
    std::vector<double> betas(n);
    switch (kind) {
    case ScheduleKind::linear:
        for (std::size_t i = 0; i < n; ++i) {
            betas[i] = beta_min + (beta_max - beta_min) * static_cast<double>(i) / static_cast<double>(n - 1);
        }
        break;
    case ScheduleKind::scaled_linear: {
        const double lo = std::sqrt(beta_min);
        const double hi = std::sqrt(beta_max);
        for (std::size_t i = 0; i < n; ++i) {
            const double s = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
            betas[i] = s * s;
        }
        break;
    }
    case ScheduleKind::cosine: {
        // Squared-cosine alpha_bar with offset 0.008; betas clipped into [beta_min, beta_max].
        constexpr double offset = 0.008;
        auto f = [&](double t) {
            const double c = std::cos((t / static_cast<double>(n) + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
            return c * c;
        };
        for (std::size_t i = 0; i < n; ++i) {
            const double raw = 1.0 - f(static_cast<double>(i + 1)) / f(static_cast<double>(i));
            betas[i] = std::clamp(raw, beta_min, beta_max);
        }
        break;
    }
    }
    return NoiseSchedule(kind, std::move(betas), beta_min, beta_max);
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas, ScheduleKind kind) {
    if (betas.size() < 2) {
        throw ValidationError("invalid range: n_train must be >= 2");
    }
    for (double b : betas) {
        if (!(b > 0.0 && b < 1.0)) {
            throw ValidationError("invalid range: every beta must lie in (0, 1)");
        }
    }
    const auto [lo, hi] = std::minmax_element(betas.begin(), betas.end());
    const double bmin = *lo;
    const double bmax = *hi;
    return NoiseSchedule(kind, std::move(betas), bmin, bmax);
}

static void check_index(int t, int n) {
    if (t < 0 || t > n) {
        throw ValidationError("time index " + std::to_string(t) + " outside [0, " + std::to_string(n) + "]");
    }
}

double NoiseSchedule::beta(int t) const {
    check_index(t, n_train());
    if (t == 0) throw ValidationError("beta is undefined at the clean end t = 0");
    return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha(int t) const { return 1.0 - beta(t); }

double NoiseSchedule::alpha_bar(int t) const {
    check_index(t, n_train());
    return alpha_bars_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha_bar_at(double t) const {
    const double n = static_cast<double>(n_train());
    if (!(t >= 0.0 && t <= n)) {
        throw ValidationError("time " + std::to_string(t) + " outside schedule range");
    }
    const double fl = std::floor(t);
    const auto i = static_cast<std::size_t>(fl);
    const double frac = t - fl;
    if (frac == 0.0) return alpha_bars_[i];
    return std::exp(log_alpha_bars_[i] + frac * (log_alpha_bars_[i + 1] - log_alpha_bars_[i]));
}

double NoiseSchedule::time_of(double alpha_bar) const {
    if (!(alpha_bar > 0.0)) {
        throw ValidationError("alpha_bar must be positive");
    }
    if (alpha_bar >= 1.0) return 0.0;
    const double target = std::log(alpha_bar);
    if (target <= log_alpha_bars_.back()) return static_cast<double>(n_train());
    // log_alpha_bars_ is strictly decreasing.
    const auto it = std::lower_bound(log_alpha_bars_.begin(), log_alpha_bars_.end(), target,
                                     [](double a, double v) { return a > v; });
    const auto hi = static_cast<std::size_t>(it - log_alpha_bars_.begin());
    if (log_alpha_bars_[hi] == target) return static_cast<double>(hi);
    const std::size_t lo = hi - 1;
    const double frac = (target - log_alpha_bars_[lo]) / (log_alpha_bars_[hi] - log_alpha_bars_[lo]);
    return static_cast<double>(lo) + frac;
}

double sigma_from_alpha_bar(double alpha_bar) {
    if (alpha_bar >= 1.0) return 0.0;
    return std::sqrt((1.0 - alpha_bar) / alpha_bar);
}

double alpha_bar_from_sigma(double sigma) { return 1.0 / (1.0 + sigma * sigma); }

double NoiseSchedule::sigma(int t) const { return sigma_from_alpha_bar(alpha_bar(t)); }
double NoiseSchedule::sigma_at(double t) const { return sigma_from_alpha_bar(alpha_bar_at(t)); }

static void validate_grid(const NoiseSchedule& schedule, const std::vector<double>& times) {
    if (times.size() < 2) {
        throw ValidationError("grid needs at least two entries");
    }
    if (times.front() != static_cast<double>(schedule.n_train())) {
        throw ValidationError("grid must start at the maximum-noise time N");
    }
    if (times.back() != 0.0) {
        throw ValidationError("grid must end at the clean time 0");
    }
    for (std::size_t i = 1; i < times.size(); ++i) {
        if (!(times[i] < times[i - 1])) {
            throw ValidationError("grid times must be strictly descending");
        }
    }
}

TimeGrid make_grid(const NoiseSchedule& schedule, int m_steps, Spacing spacing) {
    const int n = schedule.n_train();
    if (m_steps < 1 || m_steps > n) {
        throw ValidationError("m_steps must lie in [1, n_train]");
    }
    TimeGrid grid;
    grid.spacing = spacing;
    grid.times.reserve(static_cast<std::size_t>(m_steps) + 1);
    switch (spacing) {
    case Spacing::uniform:
        if (m_steps == 1) {
            grid.times.push_back(n);
        } else {
            const double stride = static_cast<double>(n - 1) / static_cast<double>(m_steps - 1);
            for (int j = 0; j < m_steps; ++j) {
                grid.times.push_back(static_cast<double>(std::llround(n - j * stride)));
            }
        }
        break;
    case Spacing::trailing: {
        const double stride = static_cast<double>(n) / static_cast<double>(m_steps);
        for (int j = 0; j < m_steps; ++j) {
            grid.times.push_back(static_cast<double>(std::llround(n - j * stride)));
        }
        break;
    }
    case Spacing::custom:
        throw ValidationError("custom spacing requires explicit times");
    }
    grid.times.push_back(0.0);
    validate_grid(schedule, grid.times);
    return grid;
}

TimeGrid make_custom_grid(const NoiseSchedule& schedule, std::vector<double> times) {
    validate_grid(schedule, times);
    return TimeGrid{std::move(times), Spacing::custom};
}

TimeGrid make_fractional_grid(const NoiseSchedule& schedule, int m_steps) {
    if (m_steps < 1) {
        throw ValidationError("fractional grid needs m_steps >= 1");
    }
    const double n = schedule.n_train();
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(m_steps) + 1);
    for (int j = 0; j < m_steps; ++j) {
        times.push_back(n * static_cast<double>(m_steps - j) / static_cast<double>(m_steps));
    }
    times.push_back(0.0);
    return make_custom_grid(schedule, std::move(times));
}

TimeGrid make_floored_grid(const NoiseSchedule& schedule, int m_steps, double t_floor) {
    const double n = schedule.n_train();
    if (m_steps < 2) {
        throw ValidationError("floored grid needs m_steps >= 2");
    }
    if (!(t_floor > 0.0 && t_floor < n)) {
        throw ValidationError("t_floor must lie in (0, N)");
    }
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(m_steps) + 1);
    const int intervals = m_steps - 1;
    for (int j = 0; j < intervals; ++j) {
        times.push_back(n - (n - t_floor) * static_cast<double>(j) / static_cast<double>(intervals));
    }
    times.push_back(t_floor);
    times.push_back(0.0);
    return make_custom_grid(schedule, std::move(times));
}

VeView dpm_quantities(const NoiseSchedule& schedule, const TimeGrid& grid, std::span<const double> r_choice) {
    if (grid.times.size() < 2) {
        throw ValidationError("grid needs at least two entries");
    }
    const std::size_t steps = grid.steps();
    if (r_choice.size() != 1 && r_choice.size() != steps) {
        throw ValidationError("r_choice must hold one value or one per step");
    }
    VeView view;
    view.sigmas.reserve(grid.times.size());
    view.log_times.reserve(grid.times.size());
    for (double t : grid.times) {
        const double s = schedule.sigma_at(t);
        view.sigmas.push_back(s);
        view.log_times.push_back(s > 0.0 ? -std::log(s) : std::numeric_limits<double>::infinity());
    }
    view.intervals.reserve(steps);
    double prev_h = 0.0;
    for (std::size_t i = 0; i < steps; ++i) {
        const double r = r_choice.size() == 1 ? r_choice[0] : r_choice[i];
        if (!(r > 0.0 && r < 1.0)) {
            throw ValidationError("r_choice must lie in (0, 1)");
        }
        VeInterval iv;
        iv.sigma_from = view.sigmas[i];
        iv.sigma_to = view.sigmas[i + 1];
        iv.r = r;
        if (iv.sigma_to == 0.0) {
            iv.clean_leap = true;
            iv.h = std::numeric_limits<double>::infinity();
            iv.sigma_mid = 0.0;
        } else {
            iv.h = view.log_times[i + 1] - view.log_times[i];
            if (!(iv.h > 0.0)) {  // also catches ascending entries
                throw ValidationError("degenerate grid: h_i = 0 between grid entries " + std::to_string(i) +
                                      " and " + std::to_string(i + 1));
            }
            iv.sigma_mid = std::exp(-(view.log_times[i] + r * iv.h));
        }
        iv.h_ratio = (i == 0 || !std::isfinite(iv.h)) ? 0.0 : prev_h / iv.h;
        prev_h = iv.h;
        view.intervals.push_back(iv);
    }
    return view;
}

VeView dpm_quantities(const NoiseSchedule& schedule, const TimeGrid& grid, double r_choice) {
    const double r[1] = {r_choice};
    return dpm_quantities(schedule, grid, std::span<const double>(r, 1));
}

} // namespace distill
