#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "resq/errors.hpp"
#include "resq/rng.hpp"

// Stream offsets for derive_seed so every randomness consumer in the training
// stack draws from its own independent stream. Keeping them in one place is
// what makes "disable a term" equivalences bit-exact: a trainer that skips a
// term must still consume the same streams for everything else.
namespace resq::streams {

inline constexpr std::uint64_t kSplit = 101;
inline constexpr std::uint64_t kShuffle = 1'000'000;
inline constexpr std::uint64_t kPair = 2'000'000;
inline constexpr std::uint64_t kMix = 3'000'000;
inline constexpr std::uint64_t kNoise = 4'000'000;
inline constexpr std::uint64_t kFault = 5'000'000;

}  // namespace resq::streams

namespace resq::detail {

// one epoch's minibatch index lists, drawn from a fresh shuffle
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           Rng& shuffle_rng) {
    const auto perm = shuffle_rng.permutation(n);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        std::vector<std::size_t> b;
        b.reserve(end - start);
        for (std::size_t i = start; i < end; ++i) b.push_back(static_cast<std::size_t>(perm[i]));
        batches.push_back(std::move(b));
    }
    return batches;
}

inline void check_finite(double loss, int epoch) {
    if (!std::isfinite(loss)) {
        throw TrainingError("training loss diverged", epoch);
    }
}

}  // namespace resq::detail
