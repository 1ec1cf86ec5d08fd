#pragma once

#include <array>
#include <cstdint>
#include <span>

#include <Eigen/Core>

namespace distill {

/// Philox-4x32-10 counter-based generator block function.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter, std::array<std::uint32_t, 2> key);

/// SplitMix64 finalizer, used to derive independent per-trajectory seeds.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

// Stream ids within one trajectory seed. Keeping these disjoint means variants
// that differ only in, say, guidance still share their initial-noise draws.
enum class StreamPurpose : std::uint64_t {
    init = 0,
    solver_noise = 1,
    guidance_noise = 2,
    guidance_time = 3,
    projections = 4,
    bootstrap = 5,
    reference_draw = 6,
};

/// Seeded counter-based stream. Identical (seed, stream) pairs always
/// reproduce the same sequence; distinct stream ids never overlap.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream);
    RngStream(std::uint64_t seed, StreamPurpose purpose)
        : RngStream(seed, static_cast<std::uint64_t>(purpose)) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }
    /// Number of 128-bit blocks generated so far.
    std::uint64_t blocks_used() const noexcept { return counter_; }

    std::uint64_t next_u64();
    /// Uniform on the open interval (0, 1), 53-bit resolution.
    double uniform();
    /// Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n);
    double normal();
    void fill_normal(std::span<double> out);
    Eigen::VectorXd normal_vector(Eigen::Index dim);

private:
    void refill();

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
    std::array<std::uint32_t, 4> buffer_{};
    int buffered_ = 0;  // remaining u64 words in buffer_ (0, 1 or 2)
    double spare_normal_ = 0.0;
    bool has_spare_ = false;
};

} // namespace distill
