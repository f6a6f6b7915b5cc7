#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "resq/tensor.hpp"

namespace resq {

// Tiny labeled image set. Pixels live in [0,1] but are always exact
// multiples of 1/255: the bit-plane arithmetic downstream assumes values
// that started life as 8-bit codes.
struct Dataset {
    std::vector<Tensor> images;  // each [C,H,W]
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return images.size(); }
    const std::vector<std::size_t>& image_shape() const;
};

// Classic IDX pair (big-endian magic 0x00000803 for images, 0x00000801 for
// labels, raw unsigned bytes). Images decode to single-channel [1,H,W].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// Deterministic class-conditioned blobs: per-class mean pattern plus seeded
// noise, re-quantized to 8-bit levels. Labels cycle round-robin.
Dataset synth_dataset(std::uint64_t seed, std::size_t n, int classes, std::size_t side);

struct MixupBatch {
    Tensor inputs;       // [batch,C,H,W]
    Tensor soft_labels;  // [batch,num_classes], rows sum to 1
    std::vector<double> lambda_draws;
};

// x̃ = λ·x_i + (1−λ)·x_j with per-pair λ ~ Beta(alpha, alpha); labels are
// one-hot encoded and interpolated with the same λ.
MixupBatch mixup_batch(const Dataset& ds, const std::vector<std::size_t>& indices_i,
                       const std::vector<std::size_t>& indices_j, double alpha,
                       std::uint64_t seed);

// Same interpolation with caller-supplied coefficients (one per pair).
MixupBatch mixup_with_lambdas(const Dataset& ds, const std::vector<std::size_t>& indices_i,
                              const std::vector<std::size_t>& indices_j,
                              const std::vector<double>& lambdas);

// Plain (no mixup) batch assembly.
Tensor batch_inputs(const Dataset& ds, const std::vector<std::size_t>& indices);
Tensor batch_one_hot(const Dataset& ds, const std::vector<std::size_t>& indices);

// Seeded shuffle-and-cut: returns {train, holdout} with ceil(fraction*n)
// examples held out.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double holdout_fraction,
                                          std::uint64_t seed);

}  // namespace resq
