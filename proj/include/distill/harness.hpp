#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "distill/config.hpp"
#include "distill/metrics.hpp"

namespace distill {

struct ResultRow {
    std::string config_hash;
    std::string variant;
    std::string metric;
    double value = 0.0;
    double wall_time_ms = 0.0;
    std::uint64_t teacher_calls = 0;  // denoising rounds
    std::uint64_t student_calls = 0;
    std::optional<double> param;  // swept value (lambda, M) when the row belongs to a sweep
    std::optional<double> ci_low;
    std::optional<double> ci_high;
};

struct ResultTable {
    std::vector<ResultRow> rows;
    bool complete = true;
    std::string failure;  // set when complete == false

    const ResultRow* find(const std::string& variant, const std::string& metric) const;
};

struct RunOptions {
    int workers = 1;
    std::optional<std::string> variant;  // run only this variant label (plus the reference)
    const std::atomic<bool>* cancel = nullptr;
    bool keep_trajectories = false;
};

/// Calls fn(i) for i in [0, n) on up to `workers` threads. The first
/// exception by index order is rethrown after all workers stop.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn,
                  const std::atomic<bool>* cancel = nullptr);

/// The world, schedule and models a config describes.
struct Lab {
    explicit Lab(const ExperimentConfig& config);

    MixtureWorld world;
    NoiseSchedule schedule;
    TeacherDenoiser teacher;
    std::unique_ptr<Denoiser> student;
};

/// Seed of sample trajectory `index`.
std::uint64_t trajectory_seed(const ExperimentConfig& config, std::uint64_t index);
/// Seed of reference trajectory `index`; disjoint from the sample seeds.
std::uint64_t reference_seed(const ExperimentConfig& config, std::uint64_t index);

struct VariantSpec {
    std::string label;
    GuidanceConfig guidance;
    int m_steps = 4;
    std::optional<double> param;
};

struct VariantRun {
    std::string label;
    std::optional<double> param;
    std::vector<Trajectory> trajectories;  // kept only on request
    Points finals;
    std::uint64_t student_rounds = 0;
    std::uint64_t student_evaluations = 0;
    std::uint64_t teacher_rounds = 0;
    std::uint64_t teacher_evaluations = 0;
    double wall_ms = 0.0;
};

VariantRun run_variant(const Lab& lab, const ExperimentConfig& config, const VariantSpec& spec,
                       const RunOptions& options);
/// Fine-step teacher DDIM samples under the config's condition and teacher scale.
VariantRun run_reference(const Lab& lab, const ExperimentConfig& config, const RunOptions& options);
/// Direct draws from the (condition-restricted) mixture.
Points direct_draws(const Lab& lab, const ExperimentConfig& config);

struct Experiment {
    ResultTable table;
    std::vector<VariantRun> runs;
    nlohmann::json report = nlohmann::json::array();
};

/// Baseline (k = 0) and, when guidance is enabled, the guided variant, scored
/// against the reference.
Experiment run_experiment(const ExperimentConfig& config, const RunOptions& options = {});
/// baseline plus one guided variant per renoise schedule, common random numbers.
Experiment run_ablation_renoise(const ExperimentConfig& config, const RunOptions& options = {});
/// One variant per lambda in config.sweep.lambdas.
Experiment run_lambda_sweep(const ExperimentConfig& config, const RunOptions& options = {});
/// "M step" baseline, "M+1 step" (M student steps plus one guided step) and
/// the unguided "M+1"-step comparator, labelled with the actual counts.
Experiment run_compare_steps(const ExperimentConfig& config, const RunOptions& options = {});
/// Endpoint error of each convergence solver against its own fine-step run.
Experiment run_convergence(const ExperimentConfig& config, const RunOptions& options = {});

/// Least-squares slope of log(error) against log(M), negated.
double convergence_order(const std::vector<int>& steps, const std::vector<double>& errors);

enum class PlotKind { convergence, ablation, sweep };
std::string to_string(PlotKind kind);
PlotKind plot_kind_from_string(const std::string& s);

void export_plotdata(const ResultTable& table, PlotKind kind, std::ostream& out);

/// Results as CSV. Timing is kept out of the main table so repeated runs
/// produce byte-identical files.
void write_table_csv(std::ostream& out, const ResultTable& table, bool include_timing = false);

/// Writes config.json, results.csv, timing.csv, metrics.json and, when kept,
/// trajectories_<variant>.csv into `dir`.
void write_outputs(const Experiment& experiment, const ExperimentConfig& config, const std::string& dir);

std::string format_double(double v);

} // namespace distill
