// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace moeforge {

/// Deterministic random stream. All randomness in the library flows through
/// this class so that a fixed seed reproduces results bit-for-bit. The
/// distributions are implemented by hand on top of mt19937_64 because the
/// standard library leaves distribution algorithms implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Derives an independent seed from (seed, tag) via splitmix64. Used to
    /// give every component (init, jitter, RTS, noise, ...) its own stream.
    static std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
    static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform();

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_int(std::uint64_t n);

    /// Standard normal via Box-Muller (one value per call, no caching, so the
    /// stream position is a pure function of the call count).
    double normal();

    /// Normal truncated to [mean - trunc*std, mean + trunc*std] by rejection.
    double truncated_normal(double mean, double std, double trunc = 2.0);

    /// Poisson by inversion; adequate for the small means used here.
    int poisson(double mean);

    /// Fisher-Yates permutation of [0, n).
    std::vector<std::uint32_t> permutation(std::size_t n);

    /// Samples an index from an unnormalized weight vector.
    std::size_t categorical(const std::vector<double>& weights);

private:
    std::mt19937_64 engine_;
};

} // namespace moeforge
