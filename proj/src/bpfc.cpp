#include "resq/bpfc.hpp"

#include <algorithm>
#include <cmath>

#include "resq/errors.hpp"
#include "resq/rng.hpp"
#include "streams.hpp"

namespace resq {

namespace {

constexpr std::uint64_t kSplitStream = streams::kSplit;
constexpr std::uint64_t kShuffleStream = streams::kShuffle;
constexpr std::uint64_t kPairStream = streams::kPair;
constexpr std::uint64_t kMixStream = streams::kMix;
constexpr std::uint64_t kNoiseStream = streams::kNoise;

using detail::check_finite;
using detail::epoch_batches;

}  // namespace

std::pair<Tensor, Tensor> bpfc_transform(const Tensor& x, int k, std::uint64_t seed) {
    if (k < 1 || k > 7) {
        throw ContractError("bpfc_transform k must be in [1,7], got " + std::to_string(k));
    }
    const double radius = std::pow(2.0, k - 2);  // 2^(k-2), k=1 gives 0.5
    const double step = std::pow(2.0, k);
    Rng rng(seed);
    Tensor x_pre = x;
    Tensor x_q = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double level = x[i] * 255.0;
        const double noisy = level + rng.uniform(-radius, radius);
        // round-half-up to the nearest integer level, then clamp
        double pre = std::floor(noisy + 0.5);
        pre = std::clamp(pre, 0.0, 255.0);
        const double q = pre - std::fmod(pre, step);
        x_pre[i] = pre / 255.0;
        x_q[i] = q / 255.0;
    }
    return {std::move(x_pre), std::move(x_q)};
}

TrainResult train_clean(Model& m, const Dataset& ds, int epochs, double lr, double alpha,
                        std::uint64_t seed, std::size_t batch_size) {
    if (ds.size() == 0) throw ContractError("train_clean on an empty dataset");
    if (epochs < 0) throw ContractError("train_clean epochs must be >= 0");

    auto [train, val] = split_dataset(ds, 0.1, derive_seed(seed, kSplitStream));
    if (train.size() == 0) throw ContractError("train_clean: empty training split");
    auto params = m.parameters();

    TrainResult result;
    for (int e = 0; e < epochs; ++e) {
        Rng shuffle_rng(derive_seed(seed, kShuffleStream + static_cast<std::uint64_t>(e)));
        Rng pair_rng(derive_seed(seed, kPairStream + static_cast<std::uint64_t>(e)));
        const auto batches = epoch_batches(train.size(), batch_size, shuffle_rng);

        double loss_sum = 0.0;
        std::size_t batch_counter = 0;
        for (const auto& idx_i : batches) {
            // pair each example with another member of the same batch
            const auto pi = pair_rng.permutation(idx_i.size());
            std::vector<std::size_t> idx_j(idx_i.size());
            for (std::size_t t = 0; t < idx_i.size(); ++t) {
                idx_j[t] = idx_i[static_cast<std::size_t>(pi[t])];
            }
            const std::uint64_t mix_seed =
                derive_seed(seed, kMixStream + static_cast<std::uint64_t>(e) * 65536 +
                                      batch_counter);
            MixupBatch mb = mixup_batch(train, idx_i, idx_j, alpha, mix_seed);

            Tape tape;
            Var logits = forward_on_tape(m, tape, tape.constant(std::move(mb.inputs)));
            Var loss = tape.cross_entropy(logits, mb.soft_labels);
            const double loss_val = tape.value(loss).item();
            check_finite(loss_val, e);
            loss_sum += loss_val;
            tape.backward(loss);
            sgd_step(params, lr);
            ++batch_counter;
        }
        result.history.push_back({e, loss_sum / static_cast<double>(batches.size()),
                                  val.size() ? accuracy(m, val) : 0.0});
    }
    return result;
}

BpfcLossParts bpfc_loss_on_tape(Model& m, Tape& tape, const Tensor& inputs,
                                const Tensor& targets, int k, double lambda,
                                std::uint64_t noise_seed) {
    const double inv_batch = 1.0 / static_cast<double>(inputs.shape()[0]);
    Var logits = forward_on_tape(m, tape, tape.constant(inputs));
    Var ce = tape.cross_entropy(logits, targets);
    auto [x_pre, x_q] = bpfc_transform(inputs, k, noise_seed);
    (void)x_pre;  // the loss only needs the bit-plane-quantized view
    Var gq = forward_on_tape(m, tape, tape.constant(std::move(x_q)));
    Var diff = tape.add(logits, tape.scale(gq, -1.0));
    Var cons = tape.scale(tape.l2_norm_sq(diff), inv_batch);
    Var total = tape.add(ce, tape.scale(cons, lambda));
    return {total, tape.value(ce).item(), tape.value(cons).item()};
}

namespace {

// shared batch loop for Stage 1 and its plain-CE twin; `with_consistency`
// switches the BPFC regularizer on
BpfcTrainResult stage1_loop(Model& m, const Dataset& ds, const BpfcConfig& cfg,
                            bool with_consistency) {
    if (ds.size() == 0) throw ContractError("stage-1 training on an empty dataset");
    if (cfg.lambda < 0.0) throw ContractError("bpfc lambda must be >= 0");
    if (cfg.k < 1 || cfg.k > 7) {
        throw ContractError("bpfc k must be in [1,7], got " + std::to_string(cfg.k));
    }
    auto params = m.parameters();

    BpfcTrainResult result;
    for (int e = 0; e < cfg.epochs; ++e) {
        Rng shuffle_rng(derive_seed(cfg.seed, kShuffleStream + static_cast<std::uint64_t>(e)));
        const auto batches = epoch_batches(ds.size(), cfg.batch_size, shuffle_rng);

        double ce_sum = 0.0, cons_sum = 0.0, total_sum = 0.0;
        std::size_t batch_counter = 0;
        for (const auto& idx : batches) {
            Tensor inputs = batch_inputs(ds, idx);
            Tensor targets = batch_one_hot(ds, idx);

            Tape tape;
            Var total;
            double ce_val, cons_val;
            if (with_consistency) {
                const std::uint64_t noise_seed =
                    derive_seed(cfg.seed, kNoiseStream + static_cast<std::uint64_t>(e) * 65536 +
                                              batch_counter);
                BpfcLossParts parts =
                    bpfc_loss_on_tape(m, tape, inputs, targets, cfg.k, cfg.lambda, noise_seed);
                total = parts.total;
                ce_val = parts.ce_value;
                cons_val = parts.consistency_value;
            } else {
                Var logits = forward_on_tape(m, tape, tape.constant(std::move(inputs)));
                total = tape.cross_entropy(logits, targets);
                ce_val = tape.value(total).item();
                cons_val = 0.0;
            }
            const double total_val = tape.value(total).item();
            check_finite(total_val, e);
            ce_sum += ce_val;
            cons_sum += cons_val;
            total_sum += total_val;
            tape.backward(total);
            sgd_step(params, cfg.lr);
            ++batch_counter;
        }
        const auto nb = static_cast<double>(batches.size());
        result.history.push_back({e, ce_sum / nb, cons_sum / nb, total_sum / nb});
    }
    return result;
}

}  // namespace

BpfcTrainResult train_bpfc(Model& m, const Dataset& ds, const BpfcConfig& cfg) {
    return stage1_loop(m, ds, cfg, true);
}

BpfcTrainResult train_ce_finetune(Model& m, const Dataset& ds, const BpfcConfig& cfg) {
    return stage1_loop(m, ds, cfg, false);
}

double mean_consistency_gap(const Model& m, const Dataset& ds, int k, std::uint64_t seed,
                            std::size_t max_samples) {
    if (ds.size() == 0) throw ContractError("mean_consistency_gap on an empty dataset");
    const std::size_t n = max_samples ? std::min(max_samples, ds.size()) : ds.size();
    double total = 0.0;
    const std::size_t batch = 64;
    std::size_t done = 0;
    std::size_t batch_counter = 0;
    while (done < n) {
        std::vector<std::size_t> idx;
        for (std::size_t i = done; i < std::min(n, done + batch); ++i) idx.push_back(i);
        Tensor inputs = batch_inputs(ds, idx);
        auto [x_pre, x_q] = bpfc_transform(inputs, k, derive_seed(seed, batch_counter));
        (void)x_pre;
        Tensor g = forward(m, inputs);
        Tensor gq = forward(m, x_q);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double d = g[i] - gq[i];
            total += d * d;
        }
        done += idx.size();
        ++batch_counter;
    }
    return total / static_cast<double>(n);
}

}  // namespace resq
