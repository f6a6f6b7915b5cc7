#include <string>

#include "resq/errors.hpp"
#include "resq/fault.hpp"
#include "resq/quantize.hpp"

namespace resq {

namespace {

void validate(const QuantSearchConfig& cfg) {
    if (cfg.min_bits < 2 || cfg.min_bits > cfg.max_bits || cfg.max_bits > 16) {
        throw ContractError("bit range [" + std::to_string(cfg.min_bits) + "," +
                            std::to_string(cfg.max_bits) + "] is not within [2,16]");
    }
    for (double v : {cfg.accuracy_threshold, cfg.reliability_threshold}) {
        if (!(v >= 0.0 && v <= 1.0)) throw ContractError("thresholds must be in [0,1]");
    }
    if (!(cfg.eval_ber >= 0.0 && cfg.eval_ber <= 1.0)) {
        throw ContractError("eval_ber must be in [0,1]");
    }
    if (cfg.trials < 1) throw ContractError("reliability trials must be >= 1");
    if (cfg.n_msb < 0 || cfg.n_msb_max < cfg.n_msb) {
        throw ContractError("need 0 <= n_msb <= n_msb_max");
    }
}

}  // namespace

QuantSearchResult search_bit_width(const Model& m, const Dataset& ds,
                                   const QuantSearchConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    if (ds.size() == 0) throw ContractError("bit-width search on an empty dataset");

    std::vector<SearchLogRow> log;
    int lo = cfg.min_bits;
    int hi = cfg.max_bits;
    int best_b = cfg.min_bits;
    double best_acc = -1.0;
    int selected = -1;
    double selected_acc = 0.0;
    // Accuracy can only improve with more bits, so a failed probe discards
    // the lower half; the first width that clears the gate is taken as-is.
    while (lo <= hi) {
        const int mid = (lo + hi) / 2;
        const double acc = accuracy(dequantize_model(quantize_model(m, mid, 0)), ds);
        if (acc > best_acc) {
            best_acc = acc;
            best_b = mid;
        }
        if (acc >= cfg.accuracy_threshold) {
            log.push_back({mid, 0, acc, 0.0, false, "accept-accuracy"});
            selected = mid;
            selected_acc = acc;
            break;
        }
        log.push_back({mid, 0, acc, 0.0, false, "need-more-bits"});
        lo = mid + 1;
    }
    if (selected < 0) {
        throw SearchError("no bit width in [" + std::to_string(cfg.min_bits) + "," +
                              std::to_string(cfg.max_bits) + "] meets the accuracy threshold",
                          best_b, best_acc);
    }

    // reliability gate: widen MSB protection until the faulted accuracy holds
    int n_msb = std::min(cfg.n_msb, selected);
    const int n_cap = std::min(cfg.n_msb_max, selected);
    while (true) {
        QuantizedModel qm = quantize_model(m, selected, n_msb);
        const auto rows = evaluate_reliability(qm, ds, {cfg.eval_ber}, cfg.trials, seed);
        const double rel = rows.front().mean_accuracy;
        if (rel >= cfg.reliability_threshold) {
            log.push_back({selected, n_msb, selected_acc, rel, true, "accept"});
            return {std::move(qm), selected, n_msb, selected_acc, rel, std::move(log)};
        }
        if (n_msb >= n_cap) {
            log.push_back({selected, n_msb, selected_acc, rel, true, "fail-reliability"});
            throw SearchError("reliability threshold unmet with n_msb <= " +
                                  std::to_string(n_cap) + " at " + std::to_string(selected) +
                                  " bits",
                              selected, rel);
        }
        log.push_back({selected, n_msb, selected_acc, rel, true, "raise-nmsb"});
        ++n_msb;
    }
}

}  // namespace resq
