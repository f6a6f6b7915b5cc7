#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "resq/dataset.hpp"
#include "resq/model.hpp"

namespace resq {

struct BpfcConfig {
    int k = 4;                  // LSB removal factor, in [1,7]
    double lambda = 1.0;        // feature-consistency weight, >= 0
    int epochs = 10;
    double lr = 0.05;
    std::uint64_t seed = 0;
    std::size_t batch_size = 32;
};

struct EpochMetrics {
    int epoch;
    double loss;          // mean training loss over the epoch's batches
    double val_accuracy;  // on the held-out split
};

struct TrainResult {
    std::vector<EpochMetrics> history;
};

struct BpfcEpochMetrics {
    int epoch;
    double ce_term;           // mean CE component
    double consistency_term;  // mean raw ||g(x)-g(x_q)||^2 component (pre-lambda)
    double loss;              // mean total, == ce + lambda * consistency
};

struct BpfcTrainResult {
    std::vector<BpfcEpochMetrics> history;
};

// Bit-plane transform: x is scaled to integer pixel levels, jittered with
// per-pixel uniform noise in (-2^(k-2), 2^(k-2)), rounded, clamped to
// [0,255], and the k least significant bits of the result are removed.
// Returns (x_pre, x_q), both back on the [0,1] scale.
std::pair<Tensor, Tensor> bpfc_transform(const Tensor& x, int k, std::uint64_t seed);

// The Stage 1 objective CE(f(x),y) + lambda/B * ||g(x)-g(x_q)||^2 recorded on
// an existing tape, with the two components reported for bookkeeping.
struct BpfcLossParts {
    Var total;
    double ce_value;
    double consistency_value;  // raw mean ||g(x)-g(x_q)||^2, before lambda
};
BpfcLossParts bpfc_loss_on_tape(Model& m, Tape& tape, const Tensor& inputs,
                                const Tensor& targets, int k, double lambda,
                                std::uint64_t noise_seed);

// Stage 0: mixup cross-entropy training. Metrics use a held-out 10% split;
// the model trains on the remaining 90%.
TrainResult train_clean(Model& m, const Dataset& ds, int epochs, double lr, double alpha,
                        std::uint64_t seed, std::size_t batch_size = 32);

// Stage 1: minimize CE(f(x),y) + lambda * ||g(x) - g(x_q)||^2 (per-batch
// means) over the full dataset.
BpfcTrainResult train_bpfc(Model& m, const Dataset& ds, const BpfcConfig& cfg);

// Plain cross-entropy fine-tuning with the same batching schedule as
// train_bpfc; with lambda = 0 the two produce bit-identical trajectories.
BpfcTrainResult train_ce_finetune(Model& m, const Dataset& ds, const BpfcConfig& cfg);

// Mean ||g(x) - g(x_q)||^2 per example over (a prefix of) the dataset.
double mean_consistency_gap(const Model& m, const Dataset& ds, int k, std::uint64_t seed,
                            std::size_t max_samples = 0);

}  // namespace resq
