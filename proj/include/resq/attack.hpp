#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "resq/dataset.hpp"
#include "resq/model.hpp"
#include "resq/quantize.hpp"

namespace resq {

enum class AttackKind { fgsm, ifgsm_bim, pgd, mim };

const char* attack_kind_name(AttackKind k);
// accepts "fgsm", "ifgsm", "bim", "pgd", "mim"; ifgsm and bim name the same
// zero-start iterative method
AttackKind attack_kind_from_name(const std::string& name);

struct AttackConfig {
    double epsilon = 0.1;        // L-inf budget on the [0,1] pixel scale
    int steps = 10;
    double step_size = -1.0;     // negative means epsilon / steps
    double momentum_decay = 1.0; // MIM only
    bool random_start = false;   // PGD only
    std::uint64_t seed = 0;
};

// d(mean CE)/dx at fixed parameters; the model's own state is untouched.
Tensor input_gradient(Model& m, const Tensor& x, const Tensor& targets);

// Single sign step: clamp(x + epsilon * sign(grad), 0, 1). Zero-gradient
// pixels stay put.
Tensor fgsm(Model& m, const Tensor& x, const Tensor& targets, double epsilon);

// `steps` rounds of step_size * sign(g), re-projected onto the epsilon ball
// around x and re-clamped to [0,1] after every move. PGD adds a uniform
// random start inside the ball; MIM accumulates an L1-normalized gradient
// with decay momentum_decay. Passing AttackKind::fgsm delegates to fgsm and
// ignores everything but epsilon.
Tensor iterative_attack(AttackKind kind, Model& m, const Tensor& x, const Tensor& targets,
                        const AttackConfig& cfg);

struct AttackSpec {
    AttackKind kind;
    AttackConfig cfg;
};

struct AttackRow {
    std::string attack;  // "clean" for the baseline row
    double epsilon = 0.0;
    double accuracy = 0.0;
};

// Accuracy per attack over the whole set, a "clean" baseline row first.
// Batch b perturbs with AttackSpec.cfg.seed mixed with b, so generation
// order (or parallelism) cannot change the output.
std::vector<AttackRow> evaluate_attacks(Model& m, const Dataset& ds,
                                        const std::vector<AttackSpec>& attacks,
                                        std::size_t batch_size = 64);
// Quantized models are attacked through their dequantized forward function.
std::vector<AttackRow> evaluate_attacks(const QuantizedModel& qm, const Dataset& ds,
                                        const std::vector<AttackSpec>& attacks,
                                        std::size_t batch_size = 64);

// "attack,epsilon,accuracy" rows
std::string attacks_csv(const std::vector<AttackRow>& rows);

}  // namespace resq
