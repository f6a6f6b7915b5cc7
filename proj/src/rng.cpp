#include "resq/rng.hpp"

#include <cmath>

#include "resq/errors.hpp"

namespace resq {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    return splitmix64(splitmix64(master) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + uniform() * (hi - lo);
}

double Rng::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_normal_ = true;
    return r * std::cos(theta);
}

double Rng::gamma(double shape) {
    if (shape <= 0.0) throw ContractError("gamma shape must be positive");
    if (shape < 1.0) {
        const double g = gamma(shape + 1.0);
        double u = uniform();
        while (u <= 0.0) u = uniform();
        return g * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = normal();
        double v = 1.0 + c * x;
        if (v <= 0.0) continue;
        v = v * v * v;
        const double u = uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

double Rng::beta(double alpha) {
    const double a = gamma(alpha);
    const double b = gamma(alpha);
    const double s = a + b;
    if (s == 0.0) return 0.5;
    return a / s;
}

std::size_t Rng::index(std::size_t n) {
    if (n == 0) throw ContractError("Rng::index on empty range");
    // rejection sampling keeps the draw unbiased
    const std::uint64_t span = n;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return static_cast<std::size_t>(x % span);
}

std::vector<int> Rng::permutation(std::size_t n) {
    std::vector<int> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<int>(i);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = index(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

const char* category_name(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::dimension: return "dimension";
        case ErrorCategory::contract: return "contract";
        case ErrorCategory::format: return "format";
        case ErrorCategory::io: return "io";
        case ErrorCategory::training: return "training";
        case ErrorCategory::search: return "search";
        case ErrorCategory::config: return "config";
        case ErrorCategory::lineage: return "lineage";
    }
    return "unknown";
}

int category_exit_code(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::dimension: return 2;
        case ErrorCategory::contract: return 3;
        case ErrorCategory::format: return 4;
        case ErrorCategory::io: return 5;
        case ErrorCategory::training: return 6;
        case ErrorCategory::search: return 7;
        case ErrorCategory::config: return 8;
        case ErrorCategory::lineage: return 9;
    }
    return 1;
}

}  // namespace resq
