#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "resq/errors.hpp"
#include "resq/rng.hpp"

using namespace resq;

TEST_CASE("splitmix64 matches the reference sequence") {
    // first three outputs of the canonical generator seeded with 0
    // (successive states 0x9e3779b97f4a7c15 apart)
    CHECK(splitmix64(0) == 0xe220a8397b1dcdafULL);
    CHECK(splitmix64(0x9e3779b97f4a7c15ULL) == 0x6e789e6aa1b965f4ULL);
    CHECK(splitmix64(0x9e3779b97f4a7c15ULL * 2) == 0x06c45d188009454fULL);
}

TEST_CASE("derive_seed separates streams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t m = 0; m < 8; ++m)
        for (std::uint64_t i = 0; i < 64; ++i) seen.insert(derive_seed(m, i));
    CHECK(seen.size() == 8 * 64);
    CHECK(derive_seed(42, 3) == derive_seed(42, 3));
    CHECK(derive_seed(42, 3) != derive_seed(43, 3));
}

TEST_CASE("uniform stays in [0,1) and is well spread") {
    Rng rng(7);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
        sum += u;
    }
    CHECK(lo < 0.001);
    CHECK(hi > 0.999);
    CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("uniform(lo,hi) maps the range") {
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform(-2.0, 3.0);
        REQUIRE(u >= -2.0);
        REQUIRE(u < 3.0);
    }
}

TEST_CASE("normal moments") {
    Rng rng(13);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 0.01);
    CHECK(sq / n - mean * mean == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("gamma mean and variance track the shape") {
    Rng rng(17);
    for (double shape : {0.4, 1.0, 2.5, 9.0}) {
        const int n = 100000;
        double sum = 0.0, sq = 0.0;
        for (int i = 0; i < n; ++i) {
            const double x = rng.gamma(shape);
            REQUIRE(x >= 0.0);
            sum += x;
            sq += x * x;
        }
        const double mean = sum / n;
        CHECK(mean == doctest::Approx(shape).epsilon(0.05));
        CHECK(sq / n - mean * mean == doctest::Approx(shape).epsilon(0.10));
    }
    CHECK_THROWS_AS(rng.gamma(0.0), ContractError);
    CHECK_THROWS_AS(rng.gamma(-1.0), ContractError);
}

TEST_CASE("beta(alpha,alpha) is symmetric around one half") {
    Rng rng(19);
    for (double alpha : {0.3, 1.0, 4.0}) {
        const int n = 50000;
        double sum = 0.0;
        int below = 0;
        for (int i = 0; i < n; ++i) {
            const double x = rng.beta(alpha);
            REQUIRE(x >= 0.0);
            REQUIRE(x <= 1.0);
            sum += x;
            if (x < 0.5) ++below;
        }
        CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));
        CHECK(std::abs(below / static_cast<double>(n) - 0.5) < 0.02);
    }
}

TEST_CASE("beta(1,1) is uniform: variance 1/12") {
    Rng rng(23);
    const int n = 100000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.beta(1.0);
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    CHECK(sq / n - mean * mean == doctest::Approx(1.0 / 12.0).epsilon(0.03));
}

TEST_CASE("bernoulli calibration") {
    Rng rng(29);
    const int n = 100000;
    int hits = 0;
    for (int i = 0; i < n; ++i) hits += rng.bernoulli(0.2) ? 1 : 0;
    CHECK(hits / static_cast<double>(n) == doctest::Approx(0.2).epsilon(0.03));
    Rng r2(29);
    for (int i = 0; i < 100; ++i) {
        CHECK_FALSE(r2.bernoulli(0.0));
    }
}

TEST_CASE("index is unbiased and in range") {
    Rng rng(31);
    std::vector<int> counts(5, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[rng.index(5)];
    for (int c : counts) CHECK(std::abs(c - n / 5) < n / 5 * 0.05);
    CHECK_THROWS_AS(rng.index(0), ContractError);
}

TEST_CASE("permutation touches every element exactly once") {
    Rng rng(37);
    for (std::size_t n : {std::size_t{1}, std::size_t{2}, std::size_t{10}, std::size_t{257}}) {
        auto p = rng.permutation(n);
        REQUIRE(p.size() == n);
        auto sorted = p;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < n; ++i) CHECK(sorted[i] == static_cast<int>(i));
    }
    CHECK(rng.permutation(0).empty());
}

TEST_CASE("identical seeds replay identical sequences") {
    Rng a(123), b(123);
    for (int i = 0; i < 1000; ++i) CHECK(a.u64() == b.u64());
    Rng c(123), d(123);
    for (int i = 0; i < 100; ++i) {
        CHECK(c.normal() == d.normal());
        CHECK(c.gamma(0.7) == d.gamma(0.7));
        CHECK(c.beta(2.0) == d.beta(2.0));
    }
}

TEST_CASE("error categories map to stable names and exit codes") {
    CHECK(category_name(ErrorCategory::dimension) == std::string("dimension"));
    CHECK(category_name(ErrorCategory::search) == std::string("search"));
    std::set<int> codes;
    for (auto c : {ErrorCategory::dimension, ErrorCategory::contract, ErrorCategory::format,
                   ErrorCategory::io, ErrorCategory::training, ErrorCategory::search,
                   ErrorCategory::config, ErrorCategory::lineage}) {
        const int code = category_exit_code(c);
        CHECK(code >= 2);
        codes.insert(code);
    }
    CHECK(codes.size() == 8);
}
