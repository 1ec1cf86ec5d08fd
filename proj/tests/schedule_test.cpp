#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "distill/error.hpp"
#include "distill/schedule.hpp"

namespace distill {

namespace {

// Direct running product of (1 - beta) in long double.
std::vector<long double> direct_alpha_bars(int n, double bmin, double bmax) {
    std::vector<long double> out{1.0L};
    long double prod = 1.0L;
    for (int t = 1; t <= n; ++t) {
        const long double beta = bmin + (bmax - bmin) * static_cast<long double>(t - 1) / (n - 1);
        prod *= 1.0L - beta;
        out.push_back(prod);
    }
    return out;
}

} // namespace

TEST(Schedule, LinearMatchesDirectProduct) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    const auto oracle = direct_alpha_bars(1000, 1e-4, 2e-2);
    for (int t = 0; t <= 1000; ++t) {
        EXPECT_NEAR(s.alpha_bar(t), static_cast<double>(oracle[t]), 1e-12 * static_cast<double>(oracle[t]));
    }
    EXPECT_NEAR(s.alpha_bar(1000), 4.0e-5, 0.4e-5);
}

TEST(Schedule, TwoStepProduct) {
    const auto s = NoiseSchedule::from_betas({0.5, 0.5});
    EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
    EXPECT_DOUBLE_EQ(s.alpha_bar(2), 0.25);
}

TEST(Schedule, CosineCleanEnd) {
    const auto s = NoiseSchedule::build(ScheduleKind::cosine, 1000, 1e-4, 0.999);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    EXPECT_GE(s.alpha_bar(1), 0.99);
}

TEST(Schedule, InvariantsHoldForEveryKind) {
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine, ScheduleKind::scaled_linear}) {
        const auto s = NoiseSchedule::build(kind, 500, 8.5e-4, 1.2e-2);
        for (int t = 1; t <= 500; ++t) {
            ASSERT_GT(s.beta(t), 0.0);
            ASSERT_LT(s.beta(t), 1.0);
            ASSERT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
            ASSERT_GT(s.alpha_bar(t), 0.0);
        }
    }
}

TEST(Schedule, RejectsBadRanges) {
    EXPECT_THROW(NoiseSchedule::build(ScheduleKind::linear, 1, 1e-4, 2e-2), ValidationError);
    EXPECT_THROW(NoiseSchedule::build(ScheduleKind::linear, 10, 0.0, 2e-2), ValidationError);
    EXPECT_THROW(NoiseSchedule::build(ScheduleKind::linear, 10, 0.3, 0.2), ValidationError);
    EXPECT_THROW(NoiseSchedule::build(ScheduleKind::linear, 10, 1e-4, 1.0), ValidationError);
}

TEST(Schedule, FractionalTimesInterpolateLogAlphaBar) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    const double mid = std::exp(0.5 * (std::log(s.alpha_bar(10)) + std::log(s.alpha_bar(11))));
    EXPECT_NEAR(s.alpha_bar_at(10.5), mid, 1e-15);
    EXPECT_EQ(s.alpha_bar_at(10.0), s.alpha_bar(10));
    for (double t : {0.0, 0.25, 3.0, 99.5, 750.125, 1000.0}) EXPECT_NEAR(s.time_of(s.alpha_bar_at(t)), t, 1e-8);
}

TEST(Schedule, SigmaRoundTrip) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    for (int t = 0; t <= 1000; ++t) {
        const double sigma = s.sigma(t);
        EXPECT_NEAR(1.0 / (1.0 + sigma * sigma), s.alpha_bar(t), 1e-12);
        if (t > 0) EXPECT_GT(sigma, s.sigma(t - 1));
    }
}

TEST(Grid, UniformFourSteps) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    const auto g = make_grid(s, 4, Spacing::uniform);
    ASSERT_EQ(g.times.size(), 5u);
    EXPECT_EQ(g.times.front(), 1000.0);
    EXPECT_EQ(g.times.back(), 0.0);
    for (std::size_t i = 1; i < g.times.size(); ++i) EXPECT_LT(g.times[i], g.times[i - 1]);
}

TEST(Grid, FullGridIsConsecutive) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    for (auto spacing : {Spacing::uniform, Spacing::trailing}) {
        const auto g = make_grid(s, 1000, spacing);
        ASSERT_EQ(g.times.size(), 1001u);
        for (int i = 0; i <= 1000; ++i) EXPECT_EQ(g.times[i], 1000 - i);
    }
}

TEST(Grid, TrailingEightSteps) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    const auto g = make_grid(s, 8, Spacing::trailing);
    const std::vector<double> expected{1000, 875, 750, 625, 500, 375, 250, 125, 0};
    EXPECT_EQ(g.times, expected);
    EXPECT_EQ(s.alpha_bar_at(g.times.back()), 1.0);
}

TEST(Grid, RejectsOutOfRangeSteps) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 100, 1e-4, 2e-2);
    EXPECT_THROW(make_grid(s, 0, Spacing::uniform), ValidationError);
    EXPECT_THROW(make_grid(s, 101, Spacing::trailing), ValidationError);
    EXPECT_THROW(make_custom_grid(s, {100, 50, 50, 0}), ValidationError);
    EXPECT_THROW(make_custom_grid(s, {90, 50, 0}), ValidationError);
}

TEST(Grid, Deterministic) {
    const auto s = NoiseSchedule::build(ScheduleKind::scaled_linear, 1000, 8.5e-4, 1.2e-2);
    EXPECT_EQ(make_grid(s, 7, Spacing::uniform), make_grid(s, 7, Spacing::uniform));
    EXPECT_EQ(make_fractional_grid(s, 1024), make_fractional_grid(s, 1024));
}

TEST(Grid, FractionalAndFloored) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    const auto f = make_fractional_grid(s, 4096);
    ASSERT_EQ(f.steps(), 4096u);
    EXPECT_EQ(f.times[1], 1000.0 * 4095 / 4096);
    const auto fl = make_floored_grid(s, 8, 10.0);
    ASSERT_EQ(fl.steps(), 8u);
    EXPECT_EQ(fl.times[0], 1000.0);
    EXPECT_EQ(fl.times[7], 10.0);
    EXPECT_EQ(fl.times[8], 0.0);
}

TEST(DpmQuantities, DegenerateIntervalRejected) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    TimeGrid g;
    g.times = {1000, 500, 500, 0};
    g.spacing = Spacing::custom;
    EXPECT_THROW(dpm_quantities(s, g, 0.5), ValidationError);
}

TEST(DpmQuantities, MidpointIsLogSigmaMidpoint) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    const auto v = dpm_quantities(s, make_grid(s, 4, Spacing::uniform), 0.5);
    for (const auto& iv : v.intervals) {
        if (iv.clean_leap) continue;
        EXPECT_NEAR(std::log(iv.sigma_mid), 0.5 * (std::log(iv.sigma_from) + std::log(iv.sigma_to)), 1e-12);
    }
}

TEST(DpmQuantities, StepSizesMatchSigmaRatios) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    const auto g = make_grid(s, 4, Spacing::uniform);
    const auto v = dpm_quantities(s, g, 0.5);
    const auto oracle = direct_alpha_bars(1000, 1e-4, 2e-2);
    auto sigma = [&](double t) {
        const auto ab = oracle[static_cast<std::size_t>(t)];
        return static_cast<double>(std::sqrt((1.0L - ab) / ab));
    };
    ASSERT_EQ(v.intervals.size(), 4u);
    for (std::size_t i = 0; i + 1 < 4; ++i) {
        const double h = std::log(sigma(g.times[i]) / sigma(g.times[i + 1]));
        EXPECT_GT(v.intervals[i].h, 0.0);
        EXPECT_NEAR(v.intervals[i].h, h, 1e-10);
    }
    EXPECT_TRUE(v.intervals.back().clean_leap);
    EXPECT_TRUE(std::isinf(v.intervals.back().h));
}

TEST(DpmQuantities, RejectsBadRatio) {
    const auto s = NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    const auto g = make_grid(s, 4, Spacing::uniform);
    EXPECT_THROW(dpm_quantities(s, g, 0.0), ValidationError);
    EXPECT_THROW(dpm_quantities(s, g, 1.0), ValidationError);
}

} // namespace distill
