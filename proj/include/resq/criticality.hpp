#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "resq/dataset.hpp"
#include "resq/model.hpp"

namespace resq {

enum class ThresholdMode { top_fraction, absolute };

const char* threshold_mode_name(ThresholdMode m);
ThresholdMode threshold_mode_from_name(const std::string& name);

struct CriticalityConfig {
    double ema_beta = 0.3;  // in (0,1); weight on the newest norm
    int window = 10;        // observed iterations
    ThresholdMode mode = ThresholdMode::top_fraction;
    double value = 0.3;
    std::size_t batch_size = 32;
};

struct CriticalityReport {
    // layer order preserved in all three lists
    std::vector<std::pair<std::string, double>> scores;
    std::vector<std::pair<std::string, double>> normalized_scores;
    std::vector<std::string> critical_layers;
    CriticalityConfig config;

    bool is_critical(const std::string& layer) const;
};

// one smoothing step: beta * new_norm + (1 - beta) * prev
double ema_update(double prev, double norm, double beta);
// init-to-first fold of a whole norm sequence
double run_ema(const std::vector<double>& norms, double beta);

// Builds the per-batch training loss on the tape. Receives a derived seed so
// stochastic losses stay reproducible.
using LossBuilder =
    std::function<Var(Tape&, const Tensor& inputs, const Tensor& targets, std::uint64_t seed)>;

// The Stage 1 objective as a LossBuilder, for sensitivity tracking.
LossBuilder make_bpfc_loss(Model& m, int k, double lambda);

// Watch per-layer gradient norms of `loss` over cfg.window minibatches on a
// frozen model (gradients are computed and discarded; parameters never move),
// then threshold the EMA scores into the critical set.
CriticalityReport track_ema(Model& m, const Dataset& ds, const LossBuilder& loss,
                            const CriticalityConfig& cfg, std::uint64_t seed);

// Thresholding alone. `scores` must be in layer order; ties break toward the
// earlier layer.
std::vector<std::string> select_critical(
    const std::vector<std::pair<std::string, double>>& scores, ThresholdMode mode, double value);

// layer,score,normalized,critical rows
std::string criticality_csv(const CriticalityReport& report);

}  // namespace resq
