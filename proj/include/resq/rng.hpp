#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace resq {

// splitmix64 scrambler. Sub-seed derivation goes through this so that
// (master seed, index) -> stream mappings are identical on every platform.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

// Deterministic RNG. All distributions are implemented on top of raw
// mt19937_64 output instead of std:: distributions, whose sequences are
// not specified by the standard and differ between libstdc++ and libc++.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t u64() { return engine_(); }

    // uniform in [0, 1), 53-bit resolution
    double uniform();
    // uniform in [lo, hi)
    double uniform(double lo, double hi);
    bool bernoulli(double p) { return uniform() < p; }
    // standard normal via Box-Muller (pairs cached)
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    // Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 boosted through U^(1/shape)
    double gamma(double shape);
    // Beta(alpha, alpha) as Ga/(Ga+Gb)
    double beta(double alpha);

    // uniform integer in [0, n)
    std::size_t index(std::size_t n);
    // Fisher-Yates permutation of 0..n-1
    std::vector<int> permutation(std::size_t n);

private:
    std::mt19937_64 engine_;
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

}  // namespace resq
