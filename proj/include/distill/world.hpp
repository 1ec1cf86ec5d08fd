#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "distill/schedule.hpp"

namespace distill {

using Vec = Eigen::VectorXd;

/// Condition label; std::nullopt is the null ("all components") condition.
using Condition = std::optional<int>;

struct Component {
    double weight = 0.0;
    Vec mean;
    Vec var;  // diagonal covariance, every entry > 0
    int condition = 0;
};

/// Weighted diagonal-Gaussian mixture: the ground-truth data distribution.
/// Each component belongs to one condition label; the null condition selects
/// the whole mixture.
class MixtureWorld {
public:
    explicit MixtureWorld(std::vector<Component> components);

    Eigen::Index dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return components_.size(); }
    const std::vector<Component>& components() const noexcept { return components_; }
    const std::vector<int>& labels() const noexcept { return labels_; }

    bool has_label(int label) const;
    double label_prior(int label) const;

    /// Indices of the components selected by `c`; throws on unknown labels.
    const std::vector<std::size_t>& members(Condition c) const;
    /// Weights renormalized within the selection.
    const std::vector<double>& member_log_weights(Condition c) const;

    /// Direct draw from the (possibly condition-restricted) data distribution.
    template <class Rng>
    Vec sample(Rng& rng, Condition c = std::nullopt) const;

private:
    std::vector<Component> components_;
    Eigen::Index dim_ = 0;
    std::vector<int> labels_;
    std::vector<std::size_t> all_members_;
    std::vector<double> all_log_weights_;
    std::vector<std::vector<std::size_t>> label_members_;     // parallel to labels_
    std::vector<std::vector<double>> label_log_weights_;
};

/// Mixture parameters of p_t(x_t) = int p(x_t | x_0) p_0(x_0) dx_0.
struct MarginalParams {
    std::vector<double> weights;
    std::vector<Vec> means;
    std::vector<Vec> vars;
};

MarginalParams marginal_params(const MixtureWorld& world, double alpha_bar, Condition c = std::nullopt);
MarginalParams marginal_params(const MixtureWorld& world, const NoiseSchedule& schedule, double t,
                               Condition c = std::nullopt);

double log_marginal_density(const MixtureWorld& world, double alpha_bar, const Vec& x, Condition c = std::nullopt);

struct Prediction {
    Vec eps;
    Vec x0;
};

enum class DenoiserKind { teacher_exact, student_biased, student_consistency, cfg_wrapped, teacher_guided };
std::string to_string(DenoiserKind kind);

/// Evaluable model: (x_t, noise level, condition) -> (eps_hat, x0_hat).
///
/// Noise levels are passed as alpha_bar so that solvers can query
/// intermediate times. Every implementation returns a pair satisfying
/// x = sqrt(abar) * x0 + sqrt(1 - abar) * eps.
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual Prediction predict(const Vec& x, double alpha_bar, Condition c) const = 0;
    virtual DenoiserKind kind() const = 0;
};

/// eps from x0 through the Tweedie coupling. Returns zero at alpha_bar = 1.
Vec tweedie_eps(const Vec& x, double alpha_bar, const Vec& x0);

/// Exact posterior-mean denoiser of a mixture world.
class TeacherDenoiser final : public Denoiser {
public:
    explicit TeacherDenoiser(MixtureWorld world, DenoiserKind tag = DenoiserKind::teacher_exact);

    Prediction predict(const Vec& x, double alpha_bar, Condition c) const override;
    DenoiserKind kind() const override { return tag_; }

    /// Gradient of log p_t at x.
    Vec score(const Vec& x, double alpha_bar, Condition c) const;
    const MixtureWorld& world() const noexcept { return world_; }

private:
    MixtureWorld world_;
    DenoiserKind tag_;
};

Prediction teacher_denoise(const MixtureWorld& world, const NoiseSchedule& schedule, const Vec& x, double t,
                           Condition c = std::nullopt);
Vec teacher_score(const MixtureWorld& world, const NoiseSchedule& schedule, const Vec& x, double t,
                  Condition c = std::nullopt);

enum class StudentKind { biased_mean, biased_weights, consistency_endpoint };
std::string to_string(StudentKind kind);
StudentKind student_kind_from_string(const std::string& s);

/// How a student departs from the teacher.
///
/// biased-mean shifts each component mean, either by the explicit per-component
/// `mean_shift` or by `delta_std` times the component standard deviation.
/// biased-weights multiplies weight i by (1 + weight_perturbation[i]) and
/// renormalizes. consistency-endpoint returns the endpoint of an n_inner-step
/// teacher DDIM integration down to t = 0.
struct StudentSpec {
    StudentKind kind = StudentKind::biased_mean;
    std::vector<Vec> mean_shift;
    std::optional<double> delta_std;
    std::vector<double> weight_perturbation;
    int n_inner = 8;
};

MixtureWorld shifted_world(const MixtureWorld& base, const StudentSpec& spec);
MixtureWorld reweighted_world(const MixtureWorld& base, const StudentSpec& spec);

/// Student whose x0 estimate is the endpoint of a fine teacher DDIM run.
class ConsistencyStudent final : public Denoiser {
public:
    ConsistencyStudent(MixtureWorld world, NoiseSchedule schedule, int n_inner);

    Prediction predict(const Vec& x, double alpha_bar, Condition c) const override;
    DenoiserKind kind() const override { return DenoiserKind::student_consistency; }
    int n_inner() const noexcept { return n_inner_; }

    /// Inner integration times from time_of(alpha_bar) down to 0.
    std::vector<double> inner_times(double alpha_bar) const;

private:
    TeacherDenoiser teacher_;
    NoiseSchedule schedule_;
    int n_inner_;
};

std::unique_ptr<Denoiser> make_student(const StudentSpec& spec, const MixtureWorld& base,
                                       const NoiseSchedule& schedule);

struct CfgParams {
    double w = 1.0;
};

Vec cfg_combine(const Vec& cond_eps, const Vec& uncond_eps, const CfgParams& params);
/// Conditional Tweedie estimate from a CFG-combined epsilon, evaluated at x itself.
Vec cfg_tweedie(const Vec& x, double alpha_bar, const Vec& combined_eps);

/// Wraps a denoiser with classifier-free guidance at a fixed scale. Under
/// the null condition it forwards the unconditional prediction.
class CfgDenoiser final : public Denoiser {
public:
    CfgDenoiser(const Denoiser& inner, CfgParams params) : inner_(inner), params_(params) {}

    Prediction predict(const Vec& x, double alpha_bar, Condition c) const override;
    DenoiserKind kind() const override { return DenoiserKind::cfg_wrapped; }

private:
    const Denoiser& inner_;
    CfgParams params_;
};

template <class Rng>
Vec MixtureWorld::sample(Rng& rng, Condition c) const {
    const auto& idx = members(c);
    const auto& logw = member_log_weights(c);
    double u = rng.uniform();
    std::size_t pick = idx.back();
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const double w = std::exp(logw[j]);
        if (u < w) {
            pick = idx[j];
            break;
        }
        u -= w;
    }
    const Component& comp = components_[pick];
    Vec out(dim_);
    for (Eigen::Index i = 0; i < dim_; ++i) {
        out[i] = comp.mean[i] + std::sqrt(comp.var[i]) * rng.normal();
    }
    return out;
}

} // namespace distill
