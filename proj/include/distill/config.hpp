#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "distill/guidance.hpp"
#include "distill/schedule.hpp"
#include "distill/solvers.hpp"
#include "distill/world.hpp"

namespace distill {

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::linear;
    int n_train = 1000;
    double beta_min = 1e-4;
    double beta_max = 2e-2;

    NoiseSchedule build() const { return NoiseSchedule::build(kind, n_train, beta_min, beta_max); }
};

struct GridSpec {
    int m_steps = 4;
    Spacing spacing = Spacing::trailing;
    std::vector<double> times;  // custom spacing only

    TimeGrid build(const NoiseSchedule& schedule) const;
    /// Same spacing with a different step count (custom grids cannot be resized).
    TimeGrid build(const NoiseSchedule& schedule, int steps) const;
};

struct SolverSpec {
    SolverKind kind = SolverKind::ddim;
    SolverOptions options;
};

struct ReferenceSpec {
    int m_steps = 1024;
};

struct MetricSpec {
    int n_projections = 64;
};

struct SweepSpec {
    std::vector<double> lambdas{0.0, 0.01, 0.02, 0.05, 0.1, 0.2};
};

struct ConvergenceSpec {
    std::vector<SolverKind> solvers{SolverKind::ddim, SolverKind::euler_ve, SolverKind::dpmpp_2s, SolverKind::dpmpp_2m};
    std::vector<int> steps{8, 16, 32, 64};
    int reference_steps = 4096;
    double t_floor = 10.0;
    int n_trajectories = 16;
};

/// Everything that determines a run. The output directory is carried along
/// but does not enter the hash.
struct ExperimentConfig {
    std::vector<Component> world;
    StudentSpec student;
    ScheduleSpec schedule;
    GridSpec grid;
    SolverSpec solver;
    GuidanceConfig guidance;
    CfgParams cfg;
    Condition condition;
    std::int64_t n_samples = 1000;
    std::uint64_t seed = 0;
    std::string output = "out";
    ReferenceSpec reference;
    MetricSpec metrics;
    SweepSpec sweep;
    ConvergenceSpec convergence;
};

/// Parses the JSON config tree. Malformed text and wrongly typed or unknown
/// keys raise ParseError (with line and key); invariant violations raise
/// ValidationError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

nlohmann::json to_json(const ExperimentConfig& config);
std::string serialize_config(const ExperimentConfig& config);

/// Checks every module-level invariant; throws ValidationError naming the first violation.
void validate_config(const ExperimentConfig& config);

/// FNV-1a 64 of the canonical (sorted-key, compact) JSON without `output`, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);
std::uint64_t fnv1a64(const std::string& bytes);

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

} // namespace distill
