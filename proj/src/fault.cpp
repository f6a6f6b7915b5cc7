#include "resq/fault.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>

#include "resq/errors.hpp"
#include "resq/rng.hpp"
#include "streams.hpp"

namespace resq {

namespace {

void check_ber(double ber) {
    if (!(ber >= 0.0 && ber <= 1.0)) {
        throw ContractError("bit error rate must be in [0,1], got " + std::to_string(ber));
    }
}

}  // namespace

FlipResult flip_bits(const std::vector<std::uint32_t>& words, int bits_per_word, double ber,
                     std::uint64_t seed) {
    if (bits_per_word < 1 || bits_per_word > 32) {
        throw ContractError("bits_per_word must be in [1,32]");
    }
    check_ber(ber);
    FlipResult out;
    out.words = words;
    Rng rng(seed);
    for (auto& w : out.words) {
        if (bits_per_word < 32 && w >= (1u << bits_per_word)) {
            throw ContractError("word " + std::to_string(w) + " exceeds " +
                                std::to_string(bits_per_word) + " bits");
        }
        for (int t = 0; t < bits_per_word; ++t) {
            if (rng.bernoulli(ber)) {
                w ^= 1u << t;
                ++out.flips;
            }
        }
    }
    return out;
}

StreamFlipResult flip_stream(const std::vector<std::uint8_t>& bytes, std::size_t total_bits,
                             double ber, std::uint64_t seed) {
    check_ber(ber);
    if (bytes.size() != (total_bits + 7) / 8) {
        throw ContractError("stream length does not match its bit count");
    }
    StreamFlipResult out;
    out.bytes = bytes;
    Rng rng(seed);
    for (std::size_t j = 0; j < total_bits; ++j) {
        if (rng.bernoulli(ber)) {
            out.bytes[j >> 3] ^= static_cast<std::uint8_t>(1u << (j & 7));
            ++out.flips;
        }
    }
    return out;
}

namespace {

// quantize -> flip -> dequantize on one tensor; returns the additive delta,
// or nullopt when the tensor is constant and the affine view degenerates
std::optional<Tensor> tensor_fault_delta(const Tensor& t, const FaultConfig& cfg,
                                         std::uint64_t seed, long long& flips) {
    const auto [lo, hi] = std::minmax_element(t.vec().begin(), t.vec().end());
    if (!(*hi > *lo)) return std::nullopt;
    const double levels = static_cast<double>((1u << cfg.bits_per_weight) - 1);
    const double s = (*hi - *lo) / levels;
    std::vector<std::uint32_t> codes(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        codes[i] = static_cast<std::uint32_t>(
            std::clamp(std::floor((t[i] - *lo) / s + 0.5), 0.0, levels));
    }
    FlipResult flipped = flip_bits(codes, cfg.bits_per_weight, cfg.ber, seed);
    flips += flipped.flips;
    Tensor delta(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
        delta[i] = static_cast<double>(flipped.words[i]) * s + *lo - t[i];
    }
    return delta;
}

}  // namespace

WeightDeltas fault_deltas(const Model& m, const std::set<std::string>& layer_filter,
                          const FaultConfig& cfg, FaultReport* report) {
    check_ber(cfg.ber);
    if (cfg.bits_per_weight < 2 || cfg.bits_per_weight > 16) {
        throw ContractError("bits_per_weight must be in [2,16]");
    }
    const auto names = m.parametric_layer_names();
    for (const auto& f : layer_filter) {
        if (std::find(names.begin(), names.end(), f) == names.end()) {
            throw ContractError("fault target " + f + " is not a parametric layer");
        }
    }

    WeightDeltas deltas;
    long long flips = 0;
    std::vector<std::string> skipped;
    // tensor index runs over every parametric tensor in model order, so a
    // tensor's sub-seed does not depend on which layers are targeted
    std::uint64_t tensor_index = 0;
    for (const auto& l : m.layers) {
        if (!l.has_params()) continue;
        const bool targeted = layer_filter.empty() || layer_filter.count(l.name) > 0;
        LayerDelta d{Tensor(l.weight.value.shape()), Tensor(l.bias.value.shape())};
        bool any = false;
        for (const auto* p : {&l.weight, &l.bias}) {
            const std::uint64_t sub = derive_seed(cfg.seed, tensor_index++);
            if (!targeted) continue;
            auto delta = tensor_fault_delta(p->value, cfg, sub, flips);
            if (!delta) {
                skipped.push_back(p->name);
                continue;
            }
            (p == &l.weight ? d.weight : d.bias) = std::move(*delta);
            any = true;
        }
        if (any) deltas.emplace(l.name, std::move(d));
    }
    if (report) {
        report->flips += flips;
        report->skipped.insert(report->skipped.end(), skipped.begin(), skipped.end());
    }
    return deltas;
}

Model inject_into_model(const Model& m, const std::set<std::string>& layer_filter,
                        const FaultConfig& cfg, FaultReport* report) {
    const WeightDeltas deltas = fault_deltas(m, layer_filter, cfg, report);
    Model view = m;
    for (auto& l : view.layers) {
        const auto it = deltas.find(l.name);
        if (it == deltas.end()) continue;
        for (std::size_t i = 0; i < l.weight.value.size(); ++i) {
            l.weight.value[i] += it->second.weight[i];
        }
        for (std::size_t i = 0; i < l.bias.value.size(); ++i) {
            l.bias.value[i] += it->second.bias[i];
        }
    }
    return view;
}

QuantizedModel inject_into_quantized(const QuantizedModel& qm, double ber, std::uint64_t seed,
                                     FaultReport* report) {
    check_ber(ber);
    QuantizedModel out = qm;
    long long flips = 0;
    std::uint64_t stream_index = 0;
    for (auto& e : out.layers) {
        if (e.is_marker()) continue;
        const std::size_t n = e.count();
        auto hit = flip_stream(e.codes, n * static_cast<std::size_t>(e.b), ber,
                               derive_seed(seed, stream_index++));
        e.codes = std::move(hit.bytes);
        flips += hit.flips;
        for (auto& mirror : e.tmr) {
            auto mhit = flip_stream(mirror, n * static_cast<std::size_t>(e.n_msb), ber,
                                    derive_seed(seed, stream_index++));
            mirror = std::move(mhit.bytes);
            flips += mhit.flips;
        }
    }
    if (report) report->flips += flips;
    return out;
}

namespace {

// restores the trainable flags disturbed by a freeze, exception or not
struct FreezeGuard {
    std::vector<std::pair<Parameter*, bool>> saved;

    void freeze(Parameter& p) {
        saved.emplace_back(&p, p.trainable);
        p.trainable = false;
    }
    ~FreezeGuard() {
        for (auto& [p, was] : saved) p->trainable = was;
    }
};

}  // namespace

FaultTrainResult train_fault_aware(Model& m, const Dataset& ds,
                                   const std::vector<std::string>& critical,
                                   const FaultTrainConfig& cfg, const FaultConfig& fault) {
    if (ds.size() == 0) throw ContractError("fault-aware training on an empty dataset");
    if (cfg.lambda < 0.0) throw ContractError("fault-consistency lambda must be >= 0");
    if (cfg.realizations_per_batch < 1) {
        throw ContractError("realizations_per_batch must be >= 1");
    }
    check_ber(fault.ber);
    const auto names = m.parametric_layer_names();
    for (const auto& c : critical) {
        if (std::find(names.begin(), names.end(), c) == names.end()) {
            throw ContractError("critical layer " + c + " is not a parametric layer");
        }
    }

    FreezeGuard guard;
    std::set<std::string> frozen(critical.begin(), critical.end());
    std::set<std::string> unfrozen;
    for (const auto& n : names) {
        if (!frozen.count(n)) unfrozen.insert(n);
    }
    for (auto& l : m.layers) {
        if (l.has_params() && frozen.count(l.name)) {
            guard.freeze(l.weight);
            guard.freeze(l.bias);
        }
    }

    auto params = m.parameters();
    FaultTrainResult result;
    std::set<std::string> skipped;
    for (int e = 0; e < cfg.epochs; ++e) {
        Rng shuffle_rng(derive_seed(cfg.seed, streams::kShuffle + static_cast<std::uint64_t>(e)));
        const auto batches = detail::epoch_batches(ds.size(), cfg.batch_size, shuffle_rng);

        double ce_sum = 0.0, cons_sum = 0.0, total_sum = 0.0;
        std::size_t batch_counter = 0;
        for (const auto& idx : batches) {
            Tensor inputs = batch_inputs(ds, idx);
            Tensor targets = batch_one_hot(ds, idx);

            Tape tape;
            Var x = tape.constant(std::move(inputs));
            Var logits = forward_on_tape(m, tape, x);
            Var ce = tape.cross_entropy(logits, targets);
            Var total = ce;
            double cons_val = 0.0;
            if (cfg.lambda > 0.0 && !unfrozen.empty()) {
                const std::uint64_t batch_seed = derive_seed(
                    cfg.seed,
                    streams::kFault + static_cast<std::uint64_t>(e) * 65536 + batch_counter);
                Var cons_acc;
                for (int r = 0; r < cfg.realizations_per_batch; ++r) {
                    FaultConfig draw = fault;
                    draw.seed = derive_seed(batch_seed, static_cast<std::uint64_t>(r));
                    FaultReport rep;
                    const WeightDeltas deltas = fault_deltas(m, unfrozen, draw, &rep);
                    skipped.insert(rep.skipped.begin(), rep.skipped.end());
                    Var faulted = forward_on_tape(m, tape, x, true, &deltas);
                    Var diff = tape.add(logits, tape.scale(faulted, -1.0));
                    Var sq = tape.scale(tape.l2_norm_sq(diff), 1.0 / static_cast<double>(idx.size()));
                    cons_acc = r == 0 ? sq : tape.add(cons_acc, sq);
                }
                Var cons_mean = cfg.realizations_per_batch > 1
                                    ? tape.scale(cons_acc, 1.0 / cfg.realizations_per_batch)
                                    : cons_acc;
                cons_val = tape.value(cons_mean).item();
                total = tape.add(ce, tape.scale(cons_mean, cfg.lambda));
            }
            const double ce_val = tape.value(ce).item();
            const double total_val = tape.value(total).item();
            detail::check_finite(total_val, e);
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
    result.skipped.assign(skipped.begin(), skipped.end());
    return result;
}

namespace {

ReliabilityRow summarize(double ber, const std::vector<double>& accs) {
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    double var = 0.0;
    for (double a : accs) var += (a - mean) * (a - mean);
    var /= static_cast<double>(accs.size());
    return {ber, mean, std::sqrt(std::max(0.0, var)), static_cast<int>(accs.size())};
}

}  // namespace

std::vector<ReliabilityRow> evaluate_reliability(const Model& m, const Dataset& ds,
                                                 const std::vector<double>& bers, int trials,
                                                 std::uint64_t seed, int bits_per_weight,
                                                 FaultReport* report) {
    if (trials < 1) throw ContractError("reliability evaluation needs trials >= 1");
    std::vector<ReliabilityRow> rows;
    for (double ber : bers) {
        std::vector<double> accs;
        for (int t = 0; t < trials; ++t) {
            FaultConfig cfg;
            cfg.ber = ber;
            cfg.bits_per_weight = bits_per_weight;
            cfg.seed = derive_seed(seed, static_cast<std::uint64_t>(t));
            const Model view = inject_into_model(m, {}, cfg, report);
            accs.push_back(accuracy(view, ds));
        }
        rows.push_back(summarize(ber, accs));
    }
    return rows;
}

std::vector<ReliabilityRow> evaluate_reliability(const QuantizedModel& qm, const Dataset& ds,
                                                 const std::vector<double>& bers, int trials,
                                                 std::uint64_t seed) {
    if (trials < 1) throw ContractError("reliability evaluation needs trials >= 1");
    std::vector<ReliabilityRow> rows;
    for (double ber : bers) {
        std::vector<double> accs;
        for (int t = 0; t < trials; ++t) {
            const QuantizedModel faulted =
                inject_into_quantized(qm, ber, derive_seed(seed, static_cast<std::uint64_t>(t)));
            accs.push_back(accuracy(dequantize_model(faulted), ds));
        }
        rows.push_back(summarize(ber, accs));
    }
    return rows;
}

std::string reliability_csv(const std::vector<ReliabilityRow>& rows) {
    std::string out = "ber,mean_acc,std,trials\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%d\n", r.ber, r.mean_accuracy,
                      r.std_accuracy, r.trials);
        out += buf;
    }
    return out;
}

}  // namespace resq
