#include <atomic>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "distill/config.hpp"
#include "distill/error.hpp"
#include "distill/harness.hpp"

namespace distill {

namespace {

const char* kMinimal = R"({
  "world": {"components": [
    {"weight": 0.5, "mean": [-2, 0], "var": [1, 0.5], "condition": 0},
    {"weight": 0.3, "mean": [2, 1], "var": [0.6, 1], "condition": 1},
    {"weight": 0.2, "mean": [0.5, -2.5], "var": [0.8, 0.8], "condition": 1}
  ]},
  "student": {"kind": "biased-mean", "params": {"delta_std": 0.5}}
})";

ExperimentConfig small_config() {
    ExperimentConfig c = parse_config(kMinimal);
    c.n_samples = 40;
    c.reference.m_steps = 64;
    c.metrics.n_projections = 16;
    c.guidance.lambda = 0.1;
    c.condition = 1;
    c.cfg.w = 2.0;
    c.guidance.teacher_w = 2.0;
    return c;
}

std::string with_key(const std::string& extra) {
    std::string text = kMinimal;
    text.insert(text.rfind('}'), ",\n  " + extra + "\n");
    return text;
}

std::string csv(const ResultTable& t) {
    std::ostringstream out;
    write_table_csv(out, t);
    return out.str();
}

} // namespace

TEST(Config, Defaults) {
    const auto c = parse_config(kMinimal);
    EXPECT_EQ(c.schedule.kind, ScheduleKind::linear);
    EXPECT_EQ(c.schedule.n_train, 1000);
    EXPECT_EQ(c.grid.m_steps, 4);
    EXPECT_EQ(c.solver.kind, SolverKind::ddim);
    EXPECT_DOUBLE_EQ(c.guidance.lambda, 0.02);
    EXPECT_EQ(c.guidance.k, 1);
    EXPECT_EQ(c.guidance.renoise, RenoiseKind::decreasing);
    EXPECT_DOUBLE_EQ(c.guidance.teacher_w, 7.5);
    EXPECT_EQ(c.n_samples, 1000);
    EXPECT_EQ(c.world.size(), 3u);
}

TEST(Config, ValidationErrors) {
    EXPECT_THROW(parse_config(with_key(R"("n_samples": -5)")), ValidationError);
    EXPECT_THROW(parse_config(with_key(R"("guidance": {"k": 9})")), ValidationError);
    EXPECT_THROW(parse_config(with_key(R"("solver": {"eta": 2})")), ValidationError);
    EXPECT_THROW(parse_config(with_key(R"("condition": 7)")), ValidationError);
}

TEST(Config, UnknownKeyNamesKeyAndLine) {
    try {
        parse_config(with_key(R"("guidance": {"lamda": 0.1})"));
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.key(), "guidance.lamda");
        EXPECT_EQ(e.line(), 9u);  // the inserted key sits after a lone "," line
    }
}

TEST(Config, MalformedJsonReportsLine) {
    try {
        parse_config("{\n  \"world\": {\n    \"components\": [,]\n  }\n}");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
}

TEST(Config, WrongTypeIsParseError) {
    EXPECT_THROW(parse_config(with_key(R"("seed": "abc")")), ParseError);
    EXPECT_THROW(parse_config(with_key(R"("solver": {"kind": "heun"})")), ParseError);
}

TEST(Config, RoundTripAndHash) {
    auto c = small_config();
    c.guidance.gamma = 0.01;
    c.student.kind = StudentKind::biased_weights;
    c.student.weight_perturbation = {0.2, -0.2, 0.2};
    const auto back = parse_config(serialize_config(c));
    EXPECT_TRUE(back == c);
    EXPECT_EQ(config_hash(back), config_hash(c));
    EXPECT_EQ(config_hash(c).size(), 16u);
    auto other_dir = c;
    other_dir.output = "elsewhere";
    EXPECT_EQ(config_hash(other_dir), config_hash(c));
    auto other_seed = c;
    other_seed.seed = 1;
    EXPECT_NE(config_hash(other_seed), config_hash(c));
}

TEST(Config, Fnv1aVectors) {
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(ParallelFor, LowestIndexErrorWins) {
    for (int workers : {1, 4}) {
        try {
            parallel_for(100, workers, [](std::size_t i) {
                if (i == 17 || i == 60) throw std::runtime_error("fail " + std::to_string(i));
            });
            FAIL();
        } catch (const std::runtime_error& e) {
            EXPECT_STREQ(e.what(), "fail 17");
        }
    }
    EXPECT_THROW(parallel_for(3, 0, [](std::size_t) {}), ValidationError);
}

TEST(Seeds, ReferenceSeedsAreDisjoint) {
    const auto c = small_config();
    for (std::uint64_t i = 0; i < 50; ++i) {
        for (std::uint64_t j = 0; j < 50; ++j) EXPECT_NE(trajectory_seed(c, i), reference_seed(c, j));
    }
}

TEST(Harness, DeterministicAcrossWorkers) {
    const auto c = small_config();
    RunOptions one, four;
    four.workers = 4;
    const auto a = run_experiment(c, one);
    const auto b = run_experiment(c, four);
    ASSERT_TRUE(a.table.complete);
    EXPECT_EQ(csv(a.table), csv(b.table));
    EXPECT_NE(a.table.find("guided", "sw_gap_vs_baseline"), nullptr);
    EXPECT_NE(a.table.find("calibration", "sliced_wasserstein"), nullptr);
}

TEST(Harness, CompareStepsCallCounts) {
    auto c = small_config();
    const auto exp = run_compare_steps(c);
    ASSERT_TRUE(exp.table.complete);
    const auto n = static_cast<std::uint64_t>(c.n_samples);
    const auto* m = exp.table.find("4 step", "sliced_wasserstein");
    const auto* m1 = exp.table.find("4+1 step", "sliced_wasserstein");
    const auto* m_plus = exp.table.find("5 step", "sliced_wasserstein");
    ASSERT_TRUE(m && m1 && m_plus);
    EXPECT_EQ(m->student_calls, 4 * n);
    EXPECT_EQ(m->teacher_calls, 0u);
    EXPECT_EQ(m1->student_calls, 4 * n);
    EXPECT_EQ(m1->teacher_calls, n);
    EXPECT_EQ(m_plus->student_calls, 5 * n);
}

TEST(Harness, AblationHasFourGroups) {
    const auto exp = run_ablation_renoise(small_config());
    ASSERT_TRUE(exp.table.complete);
    for (const char* label : {"baseline", "random", "same", "decreasing"}) {
        EXPECT_NE(exp.table.find(label, "sliced_wasserstein"), nullptr) << label;
    }
    std::ostringstream out;
    export_plotdata(exp.table, PlotKind::ablation, out);
    EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "schedule,metric,value");
    auto c = small_config();
    c.guidance.lambda = 0.0;
    EXPECT_THROW(run_ablation_renoise(c), ValidationError);
}

TEST(Harness, SweepRowsCarryLambdaAndInterval) {
    auto c = small_config();
    c.sweep.lambdas = {0.0, 0.1};
    const auto exp = run_lambda_sweep(c);
    const auto* row = exp.table.find("lambda=0.10000000000000001", "sliced_wasserstein");
    ASSERT_NE(row, nullptr);
    ASSERT_TRUE(row->param && row->ci_low && row->ci_high);
    EXPECT_DOUBLE_EQ(*row->param, 0.1);
    EXPECT_LT(*row->ci_low, row->value);
    EXPECT_GT(*row->ci_high, row->value);
    std::ostringstream out;
    export_plotdata(exp.table, PlotKind::sweep, out);
    EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "lambda,metric,value,ci_low,ci_high");
}

TEST(Harness, ConvergenceExport) {
    auto c = small_config();
    c.condition.reset();
    c.convergence.solvers = {SolverKind::dpmpp_2m};
    c.convergence.steps = {8, 16};
    c.convergence.reference_steps = 256;
    c.convergence.n_trajectories = 4;
    const auto exp = run_convergence(c);
    ASSERT_TRUE(exp.table.complete);
    std::ostringstream out;
    export_plotdata(exp.table, PlotKind::convergence, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "M,solver,endpoint_error");
    std::getline(in, line);
    EXPECT_EQ(line.substr(0, 12), "8,dpmpp-2m,0");
}

TEST(Harness, ExportRejectsEmptyTable) {
    std::ostringstream out;
    EXPECT_THROW(export_plotdata(ResultTable{}, PlotKind::sweep, out), ValidationError);
    EXPECT_THROW(plot_kind_from_string("histogram"), ValidationError);
}

TEST(Harness, ConvergenceOrderOfExactPowerLaw) {
    EXPECT_NEAR(convergence_order({8, 16, 32, 64}, {1.0 / 64, 1.0 / 256, 1.0 / 1024, 1.0 / 4096}), 2.0, 1e-12);
}

TEST(Harness, CancelledRunIsPartial) {
    std::atomic<bool> cancel{true};
    RunOptions opt;
    opt.cancel = &cancel;
    const auto exp = run_experiment(small_config(), opt);
    EXPECT_FALSE(exp.table.complete);
    EXPECT_NE(csv(exp.table).find("# PARTIAL: run cancelled"), std::string::npos);
}

TEST(Harness, UnknownVariantRejected) {
    RunOptions opt;
    opt.variant = "nope";
    EXPECT_THROW(run_experiment(small_config(), opt), ValidationError);
}

} // namespace distill
