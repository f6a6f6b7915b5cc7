#include "resq/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "resq/errors.hpp"
#include "resq/rng.hpp"
#include "resq/tape.hpp"

namespace resq {

const char* attack_kind_name(AttackKind k) {
    switch (k) {
        case AttackKind::fgsm: return "fgsm";
        case AttackKind::ifgsm_bim: return "ifgsm";
        case AttackKind::pgd: return "pgd";
        case AttackKind::mim: return "mim";
    }
    throw ContractError("unknown attack kind");
}

AttackKind attack_kind_from_name(const std::string& name) {
    if (name == "fgsm") return AttackKind::fgsm;
    if (name == "ifgsm" || name == "bim") return AttackKind::ifgsm_bim;
    if (name == "pgd") return AttackKind::pgd;
    if (name == "mim") return AttackKind::mim;
    throw ContractError("unknown attack name: " + name);
}

namespace {

double sign(double v) { return (v > 0.0) - (v < 0.0); }

void check_pixel_range(const Tensor& x) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] >= 0.0 && x[i] <= 1.0)) {
            throw ContractError("attack inputs must lie in [0,1]");
        }
    }
}

void check_config(const AttackConfig& cfg) {
    if (!(cfg.epsilon >= 0.0)) throw ContractError("epsilon must be >= 0");
    if (cfg.steps < 1) throw ContractError("steps must be >= 1");
    if (cfg.step_size >= 0.0 && cfg.steps > 1 && cfg.step_size > cfg.epsilon) {
        throw ContractError("step_size must be <= epsilon for multi-step attacks");
    }
    if (!(cfg.momentum_decay >= 0.0)) throw ContractError("momentum_decay must be >= 0");
}

// move, then pull back into the epsilon ball and the pixel box
void project_step(Tensor& adv, const Tensor& x, const Tensor& dir, double alpha, double eps) {
    for (std::size_t i = 0; i < adv.size(); ++i) {
        const double moved = adv[i] + alpha * sign(dir[i]);
        adv[i] = std::clamp(std::clamp(moved, x[i] - eps, x[i] + eps), 0.0, 1.0);
    }
}

}  // namespace

Tensor input_gradient(Model& m, const Tensor& x, const Tensor& targets) {
    Tensor pixels = x;
    Tape tape;
    const Var vx = tape.leaf(pixels);
    const Var logits = forward_on_tape(m, tape, vx, /*track_params=*/false);
    tape.backward(tape.cross_entropy(logits, targets));
    Tensor g(x.shape());
    g.vec() = pixels.grad();
    return g;
}

Tensor fgsm(Model& m, const Tensor& x, const Tensor& targets, double epsilon) {
    if (!(epsilon >= 0.0)) throw ContractError("epsilon must be >= 0");
    check_pixel_range(x);
    const Tensor g = input_gradient(m, x, targets);
    Tensor adv = x;
    for (std::size_t i = 0; i < adv.size(); ++i) {
        adv[i] = std::clamp(x[i] + epsilon * sign(g[i]), 0.0, 1.0);
    }
    return adv;
}

Tensor iterative_attack(AttackKind kind, Model& m, const Tensor& x, const Tensor& targets,
                        const AttackConfig& cfg) {
    if (kind == AttackKind::fgsm) return fgsm(m, x, targets, cfg.epsilon);
    check_config(cfg);
    check_pixel_range(x);
    const double alpha =
        cfg.step_size >= 0.0 ? cfg.step_size : cfg.epsilon / static_cast<double>(cfg.steps);

    Tensor adv = x;
    if (kind == AttackKind::pgd && cfg.random_start) {
        Rng rng(cfg.seed);
        for (std::size_t i = 0; i < adv.size(); ++i) {
            adv[i] = std::clamp(adv[i] + rng.uniform(-cfg.epsilon, cfg.epsilon), 0.0, 1.0);
        }
    }

    const std::size_t rows = x.rank() > 0 ? x.shape()[0] : 1;
    const std::size_t per_row = rows > 0 ? x.size() / rows : 0;
    Tensor momentum;
    if (kind == AttackKind::mim) momentum = Tensor(x.shape());

    for (int t = 0; t < cfg.steps; ++t) {
        Tensor g = input_gradient(m, adv, targets);
        if (kind == AttackKind::mim) {
            // g_t = mu * g_{t-1} + grad / ||grad||_1, per example
            for (std::size_t r = 0; r < rows; ++r) {
                double l1 = 0.0;
                for (std::size_t i = 0; i < per_row; ++i) l1 += std::abs(g[r * per_row + i]);
                const double inv = l1 > 0.0 ? 1.0 / l1 : 0.0;
                for (std::size_t i = 0; i < per_row; ++i) {
                    const std::size_t at = r * per_row + i;
                    momentum[at] = cfg.momentum_decay * momentum[at] + g[at] * inv;
                }
            }
            project_step(adv, x, momentum, alpha, cfg.epsilon);
        } else {
            project_step(adv, x, g, alpha, cfg.epsilon);
        }
    }
    return adv;
}

namespace {

std::vector<std::size_t> batch_range(std::size_t start, std::size_t count) {
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
    return idx;
}

double adversarial_accuracy(Model& m, const Dataset& ds, const AttackSpec& spec,
                            std::size_t batch_size) {
    std::size_t correct = 0;
    std::uint64_t batch_index = 0;
    for (std::size_t start = 0; start < ds.size(); start += batch_size, ++batch_index) {
        const std::size_t count = std::min(batch_size, ds.size() - start);
        const auto idx = batch_range(start, count);
        const Tensor x = batch_inputs(ds, idx);
        const Tensor y = batch_one_hot(ds, idx);
        AttackConfig cfg = spec.cfg;
        cfg.seed = derive_seed(spec.cfg.seed, batch_index);
        const Tensor adv = iterative_attack(spec.kind, m, x, y, cfg);
        const auto pred = predict(m, adv);
        for (std::size_t i = 0; i < count; ++i) {
            correct += pred[i] == ds.labels[start + i];
        }
    }
    return ds.size() > 0 ? static_cast<double>(correct) / static_cast<double>(ds.size()) : 0.0;
}

}  // namespace

std::vector<AttackRow> evaluate_attacks(Model& m, const Dataset& ds,
                                        const std::vector<AttackSpec>& attacks,
                                        std::size_t batch_size) {
    if (batch_size == 0) throw ContractError("batch_size must be positive");
    std::vector<AttackRow> rows;
    rows.push_back({"clean", 0.0, accuracy(m, ds, batch_size)});
    for (const auto& spec : attacks) {
        rows.push_back({attack_kind_name(spec.kind), spec.cfg.epsilon,
                        adversarial_accuracy(m, ds, spec, batch_size)});
    }
    return rows;
}

std::vector<AttackRow> evaluate_attacks(const QuantizedModel& qm, const Dataset& ds,
                                        const std::vector<AttackSpec>& attacks,
                                        std::size_t batch_size) {
    Model m = dequantize_model(qm);
    return evaluate_attacks(m, ds, attacks, batch_size);
}

std::string attacks_csv(const std::vector<AttackRow>& rows) {
    std::string out = "attack,epsilon,accuracy\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g\n", r.attack.c_str(), r.epsilon,
                      r.accuracy);
        out += buf;
    }
    return out;
}

}  // namespace resq
