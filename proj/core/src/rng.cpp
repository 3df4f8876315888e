// SPDX-License-Identifier: Apache-2.0
#include "moeforge/rng.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "moeforge/common.hpp"

namespace moeforge {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

std::uint64_t Rng::derive_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = splitmix64(seed);
    for (unsigned char c : tag) {
        h = splitmix64(h ^ c);
    }
    return h;
}

std::uint64_t Rng::derive_seed(std::uint64_t seed, std::uint64_t salt) {
    return splitmix64(splitmix64(seed) ^ salt);
}

double Rng::uniform() {
    // 53 high bits -> double in [0, 1).
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
    if (n == 0) {
        throw std::invalid_argument("uniform_int: n must be positive");
    }
    // Rejection to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    // Box-Muller, discarding the second value.
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::truncated_normal(double mean, double std, double trunc) {
    if (std <= 0.0) {
        throw ConfigError("truncated_normal: std must be positive");
    }
    double z;
    do {
        z = normal();
    } while (std::abs(z) > trunc);
    return mean + std * z;
}

int Rng::poisson(double mean) {
    if (mean <= 0.0) {
        return 0;
    }
    // Knuth inversion; fine for the small means used by the noiser.
    const double l = std::exp(-mean);
    int k = 0;
    double p = 1.0;
    do {
        ++k;
        p *= uniform();
    } while (p > l);
    return k - 1;
}

std::vector<std::uint32_t> Rng::permutation(std::size_t n) {
    std::vector<std::uint32_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(uniform_int(i));
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

std::size_t Rng::categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) {
            throw std::invalid_argument("categorical: negative weight");
        }
        total += w;
    }
    if (total <= 0.0) {
        throw std::invalid_argument("categorical: weights sum to zero");
    }
    const double r = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (r < acc) {
            return i;
        }
    }
    return weights.size() - 1;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace moeforge
