// Command-line front end for the distillation lab.
//
//   distillpp sample         --config cfg.json [--seed S] [--out DIR] [--workers N] [--variant LABEL]
//   distillpp ablate-renoise --config cfg.json ...
//   distillpp sweep-lambda   --config cfg.json ...
//   distillpp compare-steps  --config cfg.json ...
//   distillpp export         --config cfg.json --kind convergence|ablation|sweep ...
//
// Exit codes: 0 success, 2 invalid input, 3 runtime failure (partial
// results are still written, marked as such).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "distill/config.hpp"
#include "distill/error.hpp"
#include "distill/harness.hpp"

namespace {

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    int workers = 1;
    std::optional<std::string> variant;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "Experiment config (JSON)")->required();
    cmd->add_option("--seed", args.seed, "Override the config seed");
    cmd->add_option("--out", args.out, "Output directory (overrides config.output)");
    cmd->add_option("--workers", args.workers, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--variant", args.variant, "Run only the variant with this label");
}

distill::ExperimentConfig load(const CommonArgs& args) {
    distill::ExperimentConfig cfg = distill::load_config(args.config);
    if (args.seed) cfg.seed = *args.seed;
    if (args.out) cfg.output = *args.out;
    return cfg;
}

distill::RunOptions options(const CommonArgs& args, bool keep_trajectories) {
    distill::RunOptions o;
    o.workers = args.workers;
    o.variant = args.variant;
    o.keep_trajectories = keep_trajectories;
    return o;
}

int finish(const distill::Experiment& exp, const distill::ExperimentConfig& cfg) {
    distill::write_outputs(exp, cfg, cfg.output);
    distill::write_table_csv(std::cout, exp.table);
    if (!exp.table.complete) {
        std::cerr << "error: run failed, partial results written to " << cfg.output << ": " << exp.table.failure
                  << "\n";
        return 3;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Teacher-guided student sampling on Gaussian-mixture worlds"};
    app.require_subcommand(1);

    CommonArgs args;
    auto* sample = app.add_subcommand("sample", "Baseline and guided sampling scored against the reference");
    auto* ablate = app.add_subcommand("ablate-renoise", "Renoise-schedule ablation (baseline, random, same, decreasing)");
    auto* sweep = app.add_subcommand("sweep-lambda", "One variant per guidance scale in sweep.lambdas");
    auto* steps = app.add_subcommand("compare-steps", "M step vs M+1 step (guided) vs M+1 step");
    auto* exporter = app.add_subcommand("export", "Run an experiment family and write its plot data");
    for (auto* cmd : {sample, ablate, sweep, steps, exporter}) add_common(cmd, args);
    std::string kind;
    exporter->add_option("--kind", kind, "convergence, ablation or sweep")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        const distill::ExperimentConfig cfg = load(args);
        if (sample->parsed()) return finish(distill::run_experiment(cfg, options(args, true)), cfg);
        if (ablate->parsed()) return finish(distill::run_ablation_renoise(cfg, options(args, false)), cfg);
        if (sweep->parsed()) return finish(distill::run_lambda_sweep(cfg, options(args, false)), cfg);
        if (steps->parsed()) return finish(distill::run_compare_steps(cfg, options(args, false)), cfg);

        const distill::PlotKind plot = distill::plot_kind_from_string(kind);
        distill::Experiment exp;
        switch (plot) {
        case distill::PlotKind::convergence: exp = distill::run_convergence(cfg, options(args, false)); break;
        case distill::PlotKind::ablation: exp = distill::run_ablation_renoise(cfg, options(args, false)); break;
        case distill::PlotKind::sweep: exp = distill::run_lambda_sweep(cfg, options(args, false)); break;
        }
        const int code = finish(exp, cfg);
        std::ofstream f(std::filesystem::path(cfg.output) / (distill::to_string(plot) + ".csv"), std::ios::binary);
        distill::export_plotdata(exp.table, plot, f);
        return code;
    } catch (const distill::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const distill::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
