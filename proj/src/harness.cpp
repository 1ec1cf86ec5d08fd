#include "distill/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "distill/error.hpp"

namespace distill {

namespace {

constexpr std::uint64_t kReferenceFamily = 0x5245464552454e43ULL;
constexpr std::uint64_t kCalibrationFamily = 0x43414c4942524154ULL;

struct Cancelled : std::runtime_error {
    Cancelled() : std::runtime_error("run cancelled") {}
};

double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

} // namespace

const ResultRow* ResultTable::find(const std::string& variant, const std::string& metric) const {
    for (const auto& r : rows) {
        if (r.variant == variant && r.metric == metric) return &r;
    }
    return nullptr;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn,
                  const std::atomic<bool>* cancel) {
    if (workers < 1) throw ValidationError("workers must be >= 1");
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    std::size_t first_index = n;

    auto work = [&] {
        for (;;) {
            if (stop.load(std::memory_order_relaxed)) return;
            if (cancel && cancel->load(std::memory_order_relaxed)) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::make_exception_ptr(Cancelled());
                stop = true;
                return;
            }
            const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (i < first_index) {
                    first_index = i;
                    first_error = std::current_exception();
                }
                stop = true;
            }
        }
    };

    const auto count = static_cast<std::size_t>(workers);
    if (count == 1 || n < 2) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(count, n); ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);
}

Lab::Lab(const ExperimentConfig& config)
    : world(config.world),
      schedule(config.schedule.build()),
      teacher(world),
      student(make_student(config.student, world, schedule)) {}

std::uint64_t trajectory_seed(const ExperimentConfig& config, std::uint64_t index) {
    return derive_seed(config.seed, index);
}

std::uint64_t reference_seed(const ExperimentConfig& config, std::uint64_t index) {
    return derive_seed(derive_seed(config.seed, kReferenceFamily), index);
}

VariantRun run_variant(const Lab& lab, const ExperimentConfig& config, const VariantSpec& spec,
                       const RunOptions& options) {
    const auto start = std::chrono::steady_clock::now();
    const TimeGrid grid = config.grid.build(lab.schedule, spec.m_steps);
    CallCounter student_calls;
    CallCounter teacher_calls;
    DistillationRun run;
    run.student = lab.student.get();
    run.teacher = &lab.teacher;
    run.solver = config.solver.kind;
    run.options = config.solver.options;
    run.guidance = spec.guidance;
    run.student_cfg = config.cfg;
    run.condition = config.condition;
    run.student_calls = &student_calls;
    run.teacher_calls = &teacher_calls;

    const auto n = static_cast<std::size_t>(config.n_samples);
    const Eigen::Index dim = lab.world.dim();
    std::vector<Trajectory> trajs(n);
    parallel_for(
        n, options.workers,
        [&](std::size_t i) {
            trajs[i] = run_distillation_pp(run, grid, lab.schedule, trajectory_seed(config, i), dim);
        },
        options.cancel);

    VariantRun out;
    out.label = spec.label;
    out.param = spec.param;
    out.finals = final_states(trajs);
    out.student_rounds = student_calls.rounds;
    out.student_evaluations = student_calls.evaluations;
    out.teacher_rounds = teacher_calls.rounds;
    out.teacher_evaluations = teacher_calls.evaluations;
    if (options.keep_trajectories) out.trajectories = std::move(trajs);
    out.wall_ms = elapsed_ms(start);
    return out;
}

VariantRun run_reference(const Lab& lab, const ExperimentConfig& config, const RunOptions& options) {
    const auto start = std::chrono::steady_clock::now();
    const TimeGrid grid = make_fractional_grid(lab.schedule, config.reference.m_steps);
    CallCounter calls;
    const GuidedModel model(lab.teacher, config.condition, CfgParams{config.guidance.teacher_w}, &calls);
    const auto n = static_cast<std::size_t>(config.n_samples);
    std::vector<Vec> finals(n);
    const Eigen::Index dim = lab.world.dim();
    parallel_for(
        n, options.workers,
        [&](std::size_t i) {
            const std::uint64_t seed = reference_seed(config, i);
            Vec x = initial_noise(seed, dim);
            for (std::size_t s = 0; s < grid.steps(); ++s) {
                x = ddim_step(model, x, lab.schedule.alpha_bar_at(grid.times[s]),
                              lab.schedule.alpha_bar_at(grid.times[s + 1]))
                        .x_next;
            }
            finals[i] = std::move(x);
        },
        options.cancel);
    VariantRun out;
    out.label = "reference";
    out.finals = stack_rows(finals);
    out.teacher_rounds = calls.rounds;
    out.teacher_evaluations = calls.evaluations;
    out.wall_ms = elapsed_ms(start);
    return out;
}

Points direct_draws(const Lab& lab, const ExperimentConfig& config) {
    RngStream rng(derive_seed(config.seed, kCalibrationFamily), StreamPurpose::reference_draw);
    std::vector<Vec> rows;
    rows.reserve(static_cast<std::size_t>(config.n_samples));
    for (std::int64_t i = 0; i < config.n_samples; ++i) rows.push_back(lab.world.sample(rng, config.condition));
    return stack_rows(rows);
}

namespace {

std::optional<GaussianParams> fitted_gaussian(const Points& p) {
    GaussianParams g;
    g.mean = sample_mean(p);
    g.var = sample_covariance(p).diagonal();
    if ((g.var.array() <= 0.0).any()) return std::nullopt;
    return g;
}

class Scorer {
public:
    Scorer(const ExperimentConfig& config, const Lab& lab, Experiment& exp)
        : config_(config), lab_(lab), exp_(exp), hash_(config_hash(config)) {}

    void add(const std::string& variant, const std::string& metric, double value, const VariantRun* run,
             std::optional<double> param = std::nullopt, std::optional<double> lo = std::nullopt,
             std::optional<double> hi = std::nullopt) {
        ResultRow row;
        row.config_hash = hash_;
        row.variant = variant;
        row.metric = metric;
        row.value = value;
        if (run) {
            row.wall_time_ms = run->wall_ms;
            row.teacher_calls = run->teacher_rounds;
            row.student_calls = run->student_rounds;
        }
        row.param = param;
        row.ci_low = lo;
        row.ci_high = hi;
        exp_.table.rows.push_back(std::move(row));
    }

    // Distributional metrics of `points` against the reference.
    void score(const std::string& label, const Points& points, const Points& reference, const VariantRun* run,
               std::optional<double> param = std::nullopt) {
        MetricOptions mo;
        mo.n_projections = config_.metrics.n_projections;
        mo.seed = config_.seed;
        std::optional<GaussianParams> ga, gb;
        if (lab_.world.size() == 1) {
            ga = fitted_gaussian(points);
            gb = fitted_gaussian(reference);
        }
        const MetricReport rep = compare_samples(points, reference, mo, ga, gb);
        add(label, "sliced_wasserstein", rep.sliced_wasserstein, run, param);
        add(label, "mmd_rbf", rep.mmd_rbf, run, param);
        add(label, "mmd_rbf_raw", rep.mmd_raw, run, param);
        for (Eigen::Index k = 0; k < rep.mean_error.size(); ++k) {
            add(label, "mean_error_" + std::to_string(k), rep.mean_error[k], run, param);
        }
        add(label, "cov_frobenius_error", rep.cov_frobenius_error, run, param);
        if (rep.w2_gaussian) add(label, "w2_gaussian", *rep.w2_gaussian, run, param);

        SampleSet set;
        set.points = points;
        set.config_hash = hash_;
        set.seed_first = 0;
        set.seed_last = static_cast<std::uint64_t>(points.rows() - 1);
        nlohmann::json rows = metric_rows(rep, set);
        for (auto& r : rows) {
            r["variant"] = label;
            exp_.report.push_back(r);
        }
        if (run) {
            exp_.report.push_back({{"config_hash", hash_},
                                   {"variant", label},
                                   {"metric", "calls"},
                                   {"student_rounds", run->student_rounds},
                                   {"student_evaluations", run->student_evaluations},
                                   {"teacher_rounds", run->teacher_rounds},
                                   {"teacher_evaluations", run->teacher_evaluations}});
        }
    }

    void gap(const VariantRun& baseline, const VariantRun& guided, const Points& reference) {
        const GapSignificance g =
            paired_gap_significance(baseline.finals, guided.finals, reference, config_.metrics.n_projections, config_.seed);
        add(guided.label, "sw_gap_vs_baseline", g.gap, &guided, guided.param);
        add(guided.label, "sw_gap_floor", g.floor, &guided, guided.param);
        exp_.report.push_back({{"config_hash", hash_},
                               {"variant", guided.label},
                               {"metric", "sw_gap_vs_baseline"},
                               {"value", g.gap},
                               {"floor", g.floor},
                               {"standard_error", g.standard_error},
                               {"replicates", g.replicates}});
    }

private:
    const ExperimentConfig& config_;
    const Lab& lab_;
    Experiment& exp_;
    std::string hash_;
};

bool wanted(const RunOptions& options, const std::string& label) {
    return !options.variant || *options.variant == label;
}

int grid_steps(const ExperimentConfig& config) {
    return config.grid.spacing == Spacing::custom ? static_cast<int>(config.grid.times.size()) - 1 : config.grid.m_steps;
}

GuidanceConfig disabled(const GuidanceConfig& g) {
    GuidanceConfig out = g;
    out.k = 0;
    return out;
}

// Runs the variants, the reference and the calibration draws, then scores.
// A failure keeps the rows produced so far and marks the table partial.
Experiment run_variants(const ExperimentConfig& config, const RunOptions& options,
                        const std::vector<VariantSpec>& specs, const std::string& baseline_label, bool with_gaps,
                        bool with_ci) {
    validate_config(config);
    Experiment exp;
    const Lab lab(config);
    Scorer scorer(config, lab, exp);
    try {
        std::vector<VariantSpec> selected;
        for (const auto& s : specs) {
            if (wanted(options, s.label)) selected.push_back(s);
        }
        if (options.variant && selected.empty()) {
            throw ValidationError("no variant labelled '" + *options.variant + "' in this experiment");
        }
        const VariantRun reference = run_reference(lab, config, options);
        scorer.add("reference", "teacher_rounds", static_cast<double>(reference.teacher_rounds), &reference);
        scorer.score("calibration", direct_draws(lab, config), reference.finals, nullptr);

        const VariantRun* baseline = nullptr;
        for (const auto& spec : selected) {
            exp.runs.push_back(run_variant(lab, config, spec, options));
        }
        for (const auto& run : exp.runs) {
            if (run.label == baseline_label) baseline = &run;
        }
        for (const auto& run : exp.runs) {
            scorer.score(run.label, run.finals, reference.finals, &run, run.param);
            if (with_gaps && baseline && &run != baseline) scorer.gap(*baseline, run, reference.finals);
        }
        if (with_ci) {
            for (const auto& run : exp.runs) {
                const ResultRow* sw = exp.table.find(run.label, "sliced_wasserstein");
                const double se = sliced_wasserstein_se(run.finals, reference.finals, config.metrics.n_projections,
                                                        config.seed);
                for (auto& row : exp.table.rows) {
                    if (&row == sw) {
                        row.ci_low = row.value - 1.96 * se;
                        row.ci_high = row.value + 1.96 * se;
                    }
                }
            }
        }
    } catch (const ValidationError&) {
        throw;
    } catch (const std::exception& e) {
        exp.table.complete = false;
        exp.table.failure = e.what();
    }
    return exp;
}

} // namespace

Experiment run_experiment(const ExperimentConfig& config, const RunOptions& options) {
    std::vector<VariantSpec> specs;
    specs.push_back({"baseline", disabled(config.guidance), grid_steps(config), std::nullopt});
    if (config.guidance.enabled()) specs.push_back({"guided", config.guidance, grid_steps(config), std::nullopt});
    return run_variants(config, options, specs, "baseline", true, false);
}

Experiment run_ablation_renoise(const ExperimentConfig& config, const RunOptions& options) {
    if (!config.guidance.enabled()) throw ValidationError("renoise ablation requires guidance (lambda > 0, k > 0)");
    std::vector<VariantSpec> specs;
    specs.push_back({"baseline", disabled(config.guidance), grid_steps(config), std::nullopt});
    for (RenoiseKind kind : {RenoiseKind::random, RenoiseKind::same, RenoiseKind::decreasing}) {
        GuidanceConfig g = config.guidance;
        g.renoise = kind;
        specs.push_back({to_string(kind), g, grid_steps(config), std::nullopt});
    }
    return run_variants(config, options, specs, "baseline", true, false);
}

Experiment run_lambda_sweep(const ExperimentConfig& config, const RunOptions& options) {
    std::vector<VariantSpec> specs;
    for (double lambda : config.sweep.lambdas) {
        GuidanceConfig g = config.guidance;
        g.lambda = lambda;
        g.gamma.reset();
        specs.push_back({"lambda=" + format_double(lambda), g, grid_steps(config), lambda});
    }
    return run_variants(config, options, specs, "lambda=0", true, true);
}

Experiment run_compare_steps(const ExperimentConfig& config, const RunOptions& options) {
    if (config.grid.spacing == Spacing::custom) throw ValidationError("compare-steps needs a non-custom grid");
    if (!(config.guidance.lambda > 0.0 || config.guidance.gamma)) {
        throw ValidationError("compare-steps requires guidance.lambda > 0");
    }
    const int m = config.grid.m_steps;
    if (m + 1 > config.schedule.n_train) throw ValidationError("compare-steps needs m_steps + 1 <= n_train");
    GuidanceConfig guided = config.guidance;
    guided.k = 1;
    std::vector<VariantSpec> specs;
    specs.push_back({std::to_string(m) + " step", disabled(config.guidance), m, std::nullopt});
    specs.push_back({std::to_string(m) + "+1 step", guided, m, std::nullopt});
    specs.push_back({std::to_string(m + 1) + " step", disabled(config.guidance), m + 1, std::nullopt});
    return run_variants(config, options, specs, std::to_string(m) + " step", true, false);
}

double convergence_order(const std::vector<int>& steps, const std::vector<double>& errors) {
    if (steps.size() != errors.size() || steps.size() < 2) throw ValidationError("convergence_order: need >= 2 points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const auto n = static_cast<double>(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const double x = std::log(static_cast<double>(steps[i]));
        const double y = std::log(errors[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return -(n * sxy - sx * sy) / (n * sxx - sx * sx);
}

Experiment run_convergence(const ExperimentConfig& config, const RunOptions& options) {
    validate_config(config);
    Experiment exp;
    const Lab lab(config);
    Scorer scorer(config, lab, exp);
    const GuidedModel model(lab.teacher, config.condition, CfgParams{config.guidance.teacher_w});
    const auto n = static_cast<std::size_t>(config.convergence.n_trajectories);
    const auto& cv = config.convergence;
    try {
        for (SolverKind solver : cv.solvers) {
            const std::string label = to_string(solver);
            if (!wanted(options, label)) continue;
            if (is_ancestral(solver)) throw ValidationError("convergence needs deterministic solvers");
            const TimeGrid ref_grid = make_floored_grid(lab.schedule, cv.reference_steps, cv.t_floor);
            std::vector<Trajectory> refs(n);
            parallel_for(
                n, options.workers,
                [&](std::size_t i) {
                    const std::uint64_t seed = trajectory_seed(config, i);
                    refs[i] = sample(model, solver, config.solver.options, ref_grid, lab.schedule, seed,
                                     lab.world.dim());
                },
                options.cancel);
            std::vector<double> errors;
            for (int m : cv.steps) {
                const TimeGrid grid = make_floored_grid(lab.schedule, m, cv.t_floor);
                std::vector<double> errs(n);
                parallel_for(
                    n, options.workers,
                    [&](std::size_t i) {
                        const std::uint64_t seed = trajectory_seed(config, i);
                        const Trajectory t =
                            sample(model, solver, config.solver.options, grid, lab.schedule, seed, lab.world.dim());
                        errs[i] = trajectory_endpoint_error(t, refs[i]);
                    },
                    options.cancel);
                const double err = pairwise_sum(errs) / static_cast<double>(n);
                errors.push_back(err);
                scorer.add(label, "endpoint_error", err, nullptr, static_cast<double>(m));
            }
            scorer.add(label, "order_slope", convergence_order(cv.steps, errors), nullptr);
        }
    } catch (const ValidationError&) {
        throw;
    } catch (const std::exception& e) {
        exp.table.complete = false;
        exp.table.failure = e.what();
    }
    return exp;
}

std::string to_string(PlotKind kind) {
    switch (kind) {
    case PlotKind::convergence: return "convergence";
    case PlotKind::ablation: return "ablation";
    case PlotKind::sweep: return "sweep";
    }
    return "convergence";
}

PlotKind plot_kind_from_string(const std::string& s) {
    if (s == "convergence") return PlotKind::convergence;
    if (s == "ablation") return PlotKind::ablation;
    if (s == "sweep") return PlotKind::sweep;
    throw ValidationError("unknown plot kind '" + s + "' (expected convergence, ablation or sweep)");
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string opt_field(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

} // namespace

void export_plotdata(const ResultTable& table, PlotKind kind, std::ostream& out) {
    if (table.rows.empty()) throw ValidationError("cannot export plot data from an empty table");
    std::size_t written = 0;
    switch (kind) {
    case PlotKind::convergence:
        out << "M,solver,endpoint_error\n";
        for (const auto& r : table.rows) {
            if (r.metric != "endpoint_error" || !r.param) continue;
            out << static_cast<long long>(*r.param) << ',' << csv_field(r.variant) << ',' << format_double(r.value)
                << '\n';
            ++written;
        }
        break;
    case PlotKind::ablation:
        out << "schedule,metric,value\n";
        for (const auto& r : table.rows) {
            if (r.variant != "baseline" && r.variant != "random" && r.variant != "same" && r.variant != "decreasing") {
                continue;
            }
            out << r.variant << ',' << csv_field(r.metric) << ',' << format_double(r.value) << '\n';
            ++written;
        }
        break;
    case PlotKind::sweep:
        out << "lambda,metric,value,ci_low,ci_high\n";
        for (const auto& r : table.rows) {
            if (!r.param) continue;
            out << format_double(*r.param) << ',' << csv_field(r.metric) << ',' << format_double(r.value) << ','
                << opt_field(r.ci_low) << ',' << opt_field(r.ci_high) << '\n';
            ++written;
        }
        break;
    }
    if (written == 0) throw ValidationError("table holds no rows for a " + to_string(kind) + " plot");
}

void write_table_csv(std::ostream& out, const ResultTable& table, bool include_timing) {
    out << "config_hash,variant,metric,value,teacher_calls,student_calls,param,ci_low,ci_high";
    if (include_timing) out << ",wall_time_ms";
    out << '\n';
    for (const auto& r : table.rows) {
        out << r.config_hash << ',' << csv_field(r.variant) << ',' << csv_field(r.metric) << ','
            << format_double(r.value) << ',' << r.teacher_calls << ',' << r.student_calls << ',' << opt_field(r.param)
            << ',' << opt_field(r.ci_low) << ',' << opt_field(r.ci_high);
        if (include_timing) out << ',' << format_double(r.wall_time_ms);
        out << '\n';
    }
    if (!table.complete) out << "# PARTIAL: " << table.failure << '\n';
}

void write_outputs(const Experiment& experiment, const ExperimentConfig& config, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto open = [&](const std::string& name) {
        std::ofstream f(fs::path(dir) / name, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + (fs::path(dir) / name).string());
        return f;
    };
    {
        auto f = open("config.json");
        f << serialize_config(config);
    }
    {
        auto f = open("results.csv");
        write_table_csv(f, experiment.table, false);
    }
    {
        auto f = open("timing.csv");
        f << "variant,wall_time_ms\n";
        for (const auto& run : experiment.runs) f << csv_field(run.label) << ',' << format_double(run.wall_ms) << '\n';
    }
    {
        auto f = open("metrics.json");
        nlohmann::json doc = {{"config_hash", config_hash(config)},
                              {"complete", experiment.table.complete},
                              {"rows", experiment.report}};
        if (!experiment.table.complete) doc["failure"] = experiment.table.failure;
        f << doc.dump(2) << '\n';
    }
    for (const auto& run : experiment.runs) {
        if (run.trajectories.empty()) continue;
        std::string name = run.label;
        for (char& c : name) {
            if (c == ' ' || c == '=' || c == '+' || c == '/') c = '_';
        }
        auto f = open("trajectories_" + name + ".csv");
        write_trajectories_csv(f, run.trajectories);
    }
}

} // namespace distill
