#include "resq/criticality.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "resq/bpfc.hpp"
#include "resq/errors.hpp"
#include "resq/rng.hpp"

namespace resq {

const char* threshold_mode_name(ThresholdMode m) {
    return m == ThresholdMode::top_fraction ? "top_fraction" : "absolute";
}

ThresholdMode threshold_mode_from_name(const std::string& name) {
    if (name == "top_fraction") return ThresholdMode::top_fraction;
    if (name == "absolute") return ThresholdMode::absolute;
    throw ConfigError("unknown threshold mode '" + name + "'");
}

bool CriticalityReport::is_critical(const std::string& layer) const {
    return std::find(critical_layers.begin(), critical_layers.end(), layer) !=
           critical_layers.end();
}

double ema_update(double prev, double norm, double beta) {
    return beta * norm + (1.0 - beta) * prev;
}

double run_ema(const std::vector<double>& norms, double beta) {
    if (norms.empty()) throw ContractError("run_ema on an empty sequence");
    double ema = norms.front();  // init-to-first, no zero bias
    for (std::size_t i = 1; i < norms.size(); ++i) ema = ema_update(ema, norms[i], beta);
    return ema;
}

LossBuilder make_bpfc_loss(Model& m, int k, double lambda) {
    return [&m, k, lambda](Tape& tape, const Tensor& inputs, const Tensor& targets,
                           std::uint64_t seed) {
        return bpfc_loss_on_tape(m, tape, inputs, targets, k, lambda, seed).total;
    };
}

CriticalityReport track_ema(Model& m, const Dataset& ds, const LossBuilder& loss,
                            const CriticalityConfig& cfg, std::uint64_t seed) {
    if (cfg.ema_beta <= 0.0 || cfg.ema_beta > 1.0) {
        throw ContractError("ema_beta must be in (0,1]");
    }
    if (cfg.window < 1) throw ContractError("window must be >= 1");
    if (ds.size() == 0) throw ContractError("track_ema on an empty dataset");

    Rng shuffle_rng(derive_seed(seed, 0));
    const auto perm = shuffle_rng.permutation(ds.size());
    const auto available =
        (ds.size() + cfg.batch_size - 1) / cfg.batch_size;  // ceil(n / batch)
    if (static_cast<std::size_t>(cfg.window) > available) {
        throw ContractError("window of " + std::to_string(cfg.window) + " exceeds the " +
                            std::to_string(available) + " available batches");
    }

    const auto layer_names = m.parametric_layer_names();
    std::vector<double> ema(layer_names.size(), 0.0);
    auto params = m.parameters();

    for (int t = 0; t < cfg.window; ++t) {
        std::vector<std::size_t> idx;
        const std::size_t start = static_cast<std::size_t>(t) * cfg.batch_size;
        const std::size_t end = std::min(ds.size(), start + cfg.batch_size);
        for (std::size_t i = start; i < end; ++i) idx.push_back(static_cast<std::size_t>(perm[i]));

        Tape tape;
        Var l = loss(tape, batch_inputs(ds, idx), batch_one_hot(ds, idx),
                     derive_seed(seed, 5000 + static_cast<std::uint64_t>(t)));
        tape.backward(l);

        std::size_t li = 0;
        for (auto& layer : m.layers) {
            if (!layer.has_params()) continue;
            double sq = 0.0;
            for (const Tensor* tv : {&layer.weight.value, &layer.bias.value}) {
                if (tv->has_grad()) {
                    for (double g : tv->grad()) sq += g * g;
                }
            }
            const double norm = std::sqrt(sq);
            ema[li] = t == 0 ? norm : ema_update(ema[li], norm, cfg.ema_beta);
            ++li;
        }
        for (Parameter* p : params) p->value.clear_grad();
    }

    CriticalityReport report;
    report.config = cfg;
    double max_score = 0.0;
    for (std::size_t i = 0; i < layer_names.size(); ++i) {
        report.scores.emplace_back(layer_names[i], ema[i]);
        max_score = std::max(max_score, ema[i]);
    }
    for (const auto& [name, score] : report.scores) {
        report.normalized_scores.emplace_back(name, max_score > 0.0 ? score / max_score : 0.0);
    }
    report.critical_layers = select_critical(report.scores, cfg.mode, cfg.value);
    return report;
}

std::vector<std::string> select_critical(
    const std::vector<std::pair<std::string, double>>& scores, ThresholdMode mode, double value) {
    if (scores.empty()) throw ContractError("select_critical on empty scores");
    if (value <= 0.0 || value > 1.0) {
        throw ContractError("threshold value must be in (0,1]");
    }

    if (mode == ThresholdMode::top_fraction) {
        const auto want = static_cast<std::size_t>(
            std::ceil(value * static_cast<double>(scores.size())));
        // stable sort keeps layer order among equal scores
        std::vector<std::size_t> order(scores.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return scores[a].second > scores[b].second;
        });
        order.resize(std::min(want, order.size()));
        std::sort(order.begin(), order.end());  // report in layer order
        std::vector<std::string> out;
        for (std::size_t i : order) out.push_back(scores[i].first);
        return out;
    }

    double max_score = 0.0;
    for (const auto& [name, score] : scores) max_score = std::max(max_score, score);
    std::vector<std::string> out;
    for (const auto& [name, score] : scores) {
        const double normalized = max_score > 0.0 ? score / max_score : 0.0;
        if (normalized >= value) out.push_back(name);
    }
    return out;
}

std::string criticality_csv(const CriticalityReport& report) {
    std::string csv = "layer,score,normalized,critical\n";
    char buf[128];
    for (std::size_t i = 0; i < report.scores.size(); ++i) {
        const auto& [name, score] = report.scores[i];
        std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%d\n", score,
                      report.normalized_scores[i].second, report.is_critical(name) ? 1 : 0);
        csv += name;
        csv += buf;
    }
    return csv;
}

}  // namespace resq
