#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "resq/dataset.hpp"
#include "resq/model.hpp"
#include "resq/quantize.hpp"

namespace resq {

struct FaultConfig {
    double ber = 1e-3;        // per-bit flip probability
    int bits_per_weight = 8;  // width of the transient quantized view
    std::uint64_t seed = 0;
    int trials = 1;
};

struct FaultTrainConfig {
    double lambda = 1.0;            // fault-consistency weight, >= 0
    int realizations_per_batch = 1; // fault draws averaged per batch
    int epochs = 5;
    double lr = 0.01;
    std::uint64_t seed = 0;
    std::size_t batch_size = 32;
};

// Flips every bit of every word independently with probability ber and
// reports the exact number of flips. Bits are visited word by word, least
// significant bit first, off a generator seeded with `seed` alone.
struct FlipResult {
    std::vector<std::uint32_t> words;
    long long flips = 0;
};
FlipResult flip_bits(const std::vector<std::uint32_t>& words, int bits_per_word, double ber,
                     std::uint64_t seed);

// Same per-bit process over a packed bitstream; only the first `total_bits`
// bits are fault sites, pad bits in the last byte are never touched.
struct StreamFlipResult {
    std::vector<std::uint8_t> bytes;
    long long flips = 0;
};
StreamFlipResult flip_stream(const std::vector<std::uint8_t>& bytes, std::size_t total_bits,
                             double ber, std::uint64_t seed);

// Bookkeeping from a fault pass: tensors too degenerate to fault (constant,
// so the affine view has no scale) and the total number of bits flipped.
struct FaultReport {
    std::vector<std::string> skipped;
    long long flips = 0;
};

// The additive perturbations a fault draw induces: for each targeted layer,
// each tensor is snapped to a bits_per_weight affine grid, its codes XORed
// with a Bernoulli(ber) mask, and decoded again; the delta is the faulted
// view minus the original. An empty filter targets every parametric layer.
WeightDeltas fault_deltas(const Model& m, const std::set<std::string>& layer_filter,
                          const FaultConfig& cfg, FaultReport* report = nullptr);

// fault_deltas applied to a copy; the source model is never touched
Model inject_into_model(const Model& m, const std::set<std::string>& layer_filter,
                        const FaultConfig& cfg, FaultReport* report = nullptr);

// One fault draw over a quantized model: every code stream and both mirror
// streams are independent fault targets at the same rate.
QuantizedModel inject_into_quantized(const QuantizedModel& qm, double ber, std::uint64_t seed,
                                     FaultReport* report = nullptr);

struct FaultEpochMetrics {
    int epoch;
    double ce_term;
    double consistency_term;  // mean raw ||f(W,x)-f(What,x)||^2, pre-lambda
    double loss;
};

struct FaultTrainResult {
    std::vector<FaultEpochMetrics> history;
    std::vector<std::string> skipped;  // degenerate tensors seen during training
};

// Fine-tunes everything outside `critical`, which stays frozen bit-for-bit.
// Each batch minimizes CE(f(W,x),y) + lambda * mean ||f(W,x) - f(What,x)||^2
// with the expectation over What approximated by realizations_per_batch
// draws injected into the unfrozen layers; the flip itself is treated as a
// constant offset so gradients reach the clean weights through both
// branches. Fault draws are scheduled off cfg.seed; fault.seed is unused
// here. With lambda == 0 the schedule degenerates to plain cross-entropy
// fine-tuning, bit-identical to train_ce_finetune.
FaultTrainResult train_fault_aware(Model& m, const Dataset& ds,
                                   const std::vector<std::string>& critical,
                                   const FaultTrainConfig& cfg, const FaultConfig& fault);

struct ReliabilityRow {
    double ber = 0.0;
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0;  // population std over trials
    int trials = 0;
};

// Accuracy under `trials` independent fault draws per rate; trial t draws
// its masks from derive_seed(seed, t), so results do not depend on how
// trials are scheduled.
std::vector<ReliabilityRow> evaluate_reliability(const Model& m, const Dataset& ds,
                                                 const std::vector<double>& bers, int trials,
                                                 std::uint64_t seed, int bits_per_weight = 8,
                                                 FaultReport* report = nullptr);
std::vector<ReliabilityRow> evaluate_reliability(const QuantizedModel& qm, const Dataset& ds,
                                                 const std::vector<double>& bers, int trials,
                                                 std::uint64_t seed);

// "ber,mean_acc,std,trials" rows
std::string reliability_csv(const std::vector<ReliabilityRow>& rows);

}  // namespace resq
