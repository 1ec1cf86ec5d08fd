#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "distill/error.hpp"
#include "distill/rng.hpp"
#include "distill/world.hpp"

namespace distill {

namespace {

Vec v(std::initializer_list<double> xs) {
    Vec out(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) out[i++] = x;
    return out;
}

MixtureWorld standard_normal(int d) { return MixtureWorld({{1.0, Vec::Zero(d), Vec::Ones(d), 0}}); }

MixtureWorld two_component_1d() { return MixtureWorld({{0.3, v({-1.5}), v({0.4}), 0}, {0.7, v({2.0}), v({0.9}), 1}}); }

MixtureWorld three_component_2d() {
    return MixtureWorld({{0.5, v({-2, 0}), v({1, 0.5}), 0}, {0.3, v({2, 1}), v({0.6, 1}), 1}, {0.2, v({0.5, -2.5}), v({0.8, 0.8}), 1}});
}

NoiseSchedule linear() { return NoiseSchedule::build(ScheduleKind::linear, 1000, 1e-4, 2e-2); }

double normal_pdf(double x, double mean, double var) {
    return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

} // namespace

TEST(MixtureWorld, RejectsInvalidComponents) {
    EXPECT_THROW(MixtureWorld({{0.5, v({0}), v({1}), 0}}), ValidationError);
    EXPECT_THROW(MixtureWorld({{1.0, v({0}), v({0}), 0}}), ValidationError);
    EXPECT_THROW(MixtureWorld({{0.5, v({0}), v({1}), 0}, {0.5, v({0, 1}), v({1, 1}), 0}}), ValidationError);
}

TEST(MarginalParams, StandardNormalIsFixedPoint) {
    const auto m = marginal_params(standard_normal(3), linear(), 437.0);
    ASSERT_EQ(m.weights.size(), 1u);
    EXPECT_NEAR((m.vars[0] - Vec::Ones(3)).norm(), 0.0, 1e-15);
    EXPECT_NEAR(m.means[0].norm(), 0.0, 1e-15);
}

TEST(MarginalParams, DirectFormula) {
    const auto m = marginal_params(two_component_1d(), 0.25);
    EXPECT_DOUBLE_EQ(m.means[0][0], -0.75);
    EXPECT_DOUBLE_EQ(m.means[1][0], 1.0);
    EXPECT_DOUBLE_EQ(m.vars[0][0], 0.25 * 0.4 + 0.75);
    EXPECT_DOUBLE_EQ(m.vars[1][0], 0.25 * 0.9 + 0.75);
    const auto c1 = marginal_params(two_component_1d(), 0.25, 1);
    ASSERT_EQ(c1.weights.size(), 1u);
    EXPECT_DOUBLE_EQ(c1.weights[0], 1.0);
    EXPECT_THROW(marginal_params(two_component_1d(), 0.25, 7), ValidationError);
}

TEST(MarginalParams, CleanEndIsData) {
    const auto m = marginal_params(two_component_1d(), linear(), 0.0);
    EXPECT_DOUBLE_EQ(m.means[1][0], 2.0);
    EXPECT_DOUBLE_EQ(m.vars[0][0], 0.4);
}

TEST(Teacher, SymmetryCenter) {
    const MixtureWorld w({{1.0, v({1.0, -2.0}), v({0.5, 2.0}), 0}});
    const TeacherDenoiser t(w);
    const double ab = 0.3;
    const auto p = t.predict(std::sqrt(ab) * w.components()[0].mean, ab, std::nullopt);
    EXPECT_NEAR((p.x0 - w.components()[0].mean).norm(), 0.0, 1e-12);
}

TEST(Teacher, StandardNormalPosterior) {
    const TeacherDenoiser t(standard_normal(2));
    RngStream rng(1, 0);
    for (int i = 0; i < 50; ++i) {
        const double ab = 0.01 + 0.98 * rng.uniform();
        const Vec x = 3.0 * rng.normal_vector(2);
        const auto p = t.predict(x, ab, std::nullopt);
        EXPECT_NEAR((p.x0 - std::sqrt(ab) * x).norm(), 0.0, 1e-12);
    }
}

// Posterior mean by quadrature over x0 on a fine grid.
TEST(Teacher, MatchesQuadraturePosteriorMean) {
    const auto w = two_component_1d();
    const TeacherDenoiser t(w);
    const auto s = linear();
    for (double time : {50.0, 200.0, 500.0}) {
        for (double x : {-2.0, 0.3, 1.7}) {
            const double ab = s.alpha_bar_at(time);
            double num = 0, den = 0;
            const double lo = -12, hi = 12;
            const int n = 200000;
            const double dx = (hi - lo) / n;
            for (int k = 0; k <= n; ++k) {
                const double x0 = lo + k * dx;
                const double prior = 0.3 * normal_pdf(x0, -1.5, 0.4) + 0.7 * normal_pdf(x0, 2.0, 0.9);
                const double wgt = (k == 0 || k == n ? 0.5 : 1.0) * prior * normal_pdf(x, std::sqrt(ab) * x0, 1.0 - ab);
                num += wgt * x0;
                den += wgt;
            }
            const auto p = teacher_denoise(w, s, v({x}), time);
            EXPECT_NEAR(p.x0[0], num / den, 1e-6) << "t=" << time << " x=" << x;
        }
    }
}

TEST(Teacher, ScoreOfStandardNormal) {
    const auto s = linear();
    const Vec x = v({0.3, -1.2, 2.5});
    EXPECT_NEAR((teacher_score(standard_normal(3), s, x, 321.0) + x).norm(), 0.0, 1e-12);
}

TEST(Teacher, ScoreMatchesFiniteDifference) {
    const auto w = three_component_2d();
    const TeacherDenoiser t(w);
    RngStream rng(9, 0);
    const double h = 1e-4;
    for (int i = 0; i < 20; ++i) {
        const double ab = 0.05 + 0.9 * rng.uniform();
        const Vec x = 2.0 * rng.normal_vector(2);
        const Vec score = t.score(x, ab, std::nullopt);
        for (Eigen::Index k = 0; k < 2; ++k) {
            Vec xp = x, xm = x;
            xp[k] += h;
            xm[k] -= h;
            const double fd = (log_marginal_density(w, ab, xp) - log_marginal_density(w, ab, xm)) / (2 * h);
            EXPECT_NEAR(score[k], fd, 1e-5);
        }
    }
}

TEST(Teacher, SymmetricMixtureMidpointScore) {
    const MixtureWorld w({{0.5, v({-3, 1}), v({1, 1}), 0}, {0.5, v({3, 1}), v({1, 1}), 0}});
    const TeacherDenoiser t(w);
    const auto score = t.score(v({0.0, 0.7}), 0.4, std::nullopt);
    EXPECT_NEAR(score[0], 0.0, 1e-14);
}

TEST(Teacher, ScoreEpsilonIdentity) {
    const auto w = three_component_2d();
    const TeacherDenoiser t(w);
    RngStream rng(2, 0);
    for (int i = 0; i < 100; ++i) {
        const double ab = 0.001 + 0.998 * rng.uniform();
        const Vec x = 3.0 * rng.normal_vector(2);
        const Condition c = i % 3 == 0 ? Condition{} : Condition{i % 2};
        const auto p = t.predict(x, ab, c);
        EXPECT_NEAR((p.eps + std::sqrt(1 - ab) * t.score(x, ab, c)).norm(), 0.0, 1e-8);
    }
}

TEST(Teacher, FarTailStaysFinite) {
    const TeacherDenoiser t(three_component_2d());
    const auto p = t.predict(v({400.0, -900.0}), 0.9, std::nullopt);
    EXPECT_TRUE(p.x0.allFinite());
    EXPECT_TRUE(p.eps.allFinite());
}

TEST(Denoisers, TweedieCouplingEverywhere) {
    const auto w = three_component_2d();
    const auto s = linear();
    const TeacherDenoiser teacher(w);
    StudentSpec mean_spec;
    mean_spec.delta_std = 0.5;
    StudentSpec weight_spec;
    weight_spec.kind = StudentKind::biased_weights;
    weight_spec.weight_perturbation = {0.2, -0.2, 0.2};
    StudentSpec cons_spec;
    cons_spec.kind = StudentKind::consistency_endpoint;
    cons_spec.n_inner = 8;
    const auto s1 = make_student(mean_spec, w, s);
    const auto s2 = make_student(weight_spec, w, s);
    const auto s3 = make_student(cons_spec, w, s);
    const CfgDenoiser cfg(teacher, CfgParams{7.5});
    const std::vector<const Denoiser*> all{&teacher, s1.get(), s2.get(), s3.get(), &cfg};
    RngStream rng(4, 0);
    for (int i = 0; i < 40; ++i) {
        const double ab = 0.01 + 0.98 * rng.uniform();
        const Vec x = 2.0 * rng.normal_vector(2);
        for (const Denoiser* d : all) {
            const auto p = d->predict(x, ab, Condition{1});
            EXPECT_NEAR((std::sqrt(ab) * p.x0 + std::sqrt(1 - ab) * p.eps - x).norm(), 0.0, 1e-10);
        }
    }
}

TEST(Students, ZeroShiftIsTeacher) {
    const auto w = three_component_2d();
    const auto s = linear();
    StudentSpec spec;
    spec.delta_std = 0.0;
    const auto student = make_student(spec, w, s);
    const TeacherDenoiser teacher(w);
    RngStream rng(5, 0);
    for (int i = 0; i < 20; ++i) {
        const Vec x = rng.normal_vector(2);
        const double ab = rng.uniform();
        EXPECT_NEAR((student->predict(x, ab, std::nullopt).x0 - teacher.predict(x, ab, std::nullopt).x0).norm(), 0.0,
                    1e-12);
    }
}

TEST(Students, ReweightingRenormalizes) {
    StudentSpec spec;
    spec.kind = StudentKind::biased_weights;
    spec.weight_perturbation = {0.2, -0.2, 0.2};
    const auto rw = reweighted_world(three_component_2d(), spec);
    double sum = 0;
    for (const auto& c : rw.components()) {
        EXPECT_GE(c.weight, 0.0);
        sum += c.weight;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_NEAR(rw.components()[0].weight, 0.6 / 1.08, 1e-12);
}

TEST(Students, InvalidSpecsRejected) {
    const auto w = three_component_2d();
    const auto s = linear();
    StudentSpec cons;
    cons.kind = StudentKind::consistency_endpoint;
    cons.n_inner = 4;
    EXPECT_THROW(make_student(cons, w, s), ValidationError);
    StudentSpec bad_weights;
    bad_weights.kind = StudentKind::biased_weights;
    bad_weights.weight_perturbation = {0.1};
    EXPECT_THROW(make_student(bad_weights, w, s), ValidationError);
}

// On N(0, I) data one DDIM step is x -> [sqrt(a_n a_c) + sqrt((1-a_n)(1-a_c))] x.
TEST(Students, ConsistencyEndpointMatchesCascade) {
    const auto w = standard_normal(2);
    const auto s = linear();
    const ConsistencyStudent student(w, s, 1024);
    const double ab = s.alpha_bar(1000);
    const auto times = student.inner_times(ab);
    double c = 1.0;
    for (std::size_t i = 0; i + 1 < times.size(); ++i) {
        const double a = s.alpha_bar_at(times[i]);
        const double b = s.alpha_bar_at(times[i + 1]);
        c *= std::sqrt(a * b) + std::sqrt((1 - a) * (1 - b));
    }
    const Vec x = v({0.7, -1.3});
    const auto p = student.predict(x, ab, std::nullopt);
    EXPECT_NEAR((p.x0 - c * x).norm(), 0.0, 1e-10);
}

TEST(Cfg, CombineExamples) {
    const Vec cond = v({1, 0});
    const Vec uncond = v({0, 0});
    EXPECT_EQ(cfg_combine(cond, uncond, {1.0}), cond);
    EXPECT_EQ(cfg_combine(cond, uncond, {0.0}), uncond);
    EXPECT_EQ(cfg_combine(cond, uncond, {7.5}), v({7.5, 0}));
    const Vec a = v({0.3, -2.0}), b = v({1.1, 0.4});
    EXPECT_EQ(cfg_combine(a, b, {1.0}), a);
    EXPECT_EQ(cfg_combine(a, b, {0.0}), b);
    EXPECT_THROW(cfg_combine(v({1}), v({1, 2}), {1.0}), ValidationError);
}

TEST(Cfg, TweedieExamples) {
    const Vec x = v({0.4, -0.8});
    EXPECT_NEAR((cfg_tweedie(x, 0.36, Vec::Zero(2)) - x / 0.6).norm(), 0.0, 1e-15);
    EXPECT_EQ(cfg_tweedie(x, 1.0, v({5, 5})), x);
}

TEST(Cfg, UnitScaleEqualsConditionalTeacher) {
    const auto w = three_component_2d();
    const TeacherDenoiser t(w);
    RngStream rng(6, 0);
    for (int i = 0; i < 20; ++i) {
        const Vec x = rng.normal_vector(2);
        const double ab = 0.05 + 0.9 * rng.uniform();
        const auto cond = t.predict(x, ab, 1);
        const auto uncond = t.predict(x, ab, std::nullopt);
        const Vec combined = cfg_tweedie(x, ab, cfg_combine(cond.eps, uncond.eps, {1.0}));
        EXPECT_NEAR((combined - cond.x0).norm(), 0.0, 1e-12);
    }
}

TEST(Cfg, ConditionalMarginalsMixToUnconditional) {
    const auto w = three_component_2d();
    RngStream rng(8, 0);
    for (int i = 0; i < 20; ++i) {
        const Vec x = 2.0 * rng.normal_vector(2);
        const double ab = rng.uniform();
        double mixed = 0;
        for (int label : w.labels()) mixed += w.label_prior(label) * std::exp(log_marginal_density(w, ab, x, label));
        const double full = std::exp(log_marginal_density(w, ab, x));
        EXPECT_NEAR(mixed, full, 1e-10 * std::max(1.0, full));
    }
}

} // namespace distill
