#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "resq/attack.hpp"
#include "resq/bpfc.hpp"
#include "resq/criticality.hpp"
#include "resq/errors.hpp"
#include "resq/fault.hpp"
#include "resq/model.hpp"
#include "resq/pipeline.hpp"
#include "resq/quantize.hpp"

using namespace resq;

namespace {

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << content;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// the full RunConfig is the one source of truth; single-stage commands pull
// the pieces they need from it
struct Loaded {
    RunConfig cfg;
    SplitData data;
};

Loaded load_all(const std::string& config_path) {
    RunConfig cfg = load_run_config(config_path);
    SplitData data = materialize_dataset(cfg.dataset);
    return {std::move(cfg), std::move(data)};
}

std::vector<std::string> recompute_critical(Model& m, const Loaded& run) {
    const CriticalityReport report =
        track_ema(m, run.data.train, make_bpfc_loss(m, run.cfg.stage1.k, run.cfg.stage1.lambda),
                  run.cfg.criticality, run.cfg.criticality_seed);
    return report.critical_layers;
}

QuantSearchConfig resolve_search(const Stage3Config& s3, double reference_accuracy) {
    QuantSearchConfig qc;
    qc.min_bits = s3.min_bits;
    qc.max_bits = s3.max_bits;
    qc.accuracy_threshold = s3.accuracy_mode == "absolute"
                                ? s3.accuracy_value
                                : std::max(0.0, reference_accuracy - s3.accuracy_value);
    qc.reliability_threshold = s3.reliability_mode == "absolute"
                                   ? s3.reliability_value
                                   : std::max(0.0, reference_accuracy - s3.reliability_value);
    qc.eval_ber = s3.eval_ber;
    qc.trials = s3.trials;
    qc.n_msb = s3.n_msb;
    qc.n_msb_max = s3.n_msb_max;
    return qc;
}

void print_stage_lines(const PipelineResult& result) {
    for (const auto& s : result.stages) {
        std::fprintf(stderr, "[%s] accuracy %.4f%s%s (%.1fs)\n", s.name.c_str(),
                     s.clean_accuracy, s.checkpoint.empty() ? "" : " -> ",
                     s.checkpoint.c_str(), s.wall_seconds);
    }
    std::fprintf(stderr, "final: %d bits, %d protected msbs, %s\n", result.bits, result.n_msb,
                 result.final_checkpoint.c_str());
}

int run(int argc, char** argv) {
    CLI::App app{"sequential robustness pipeline: resilience training, fault-aware "
                 "fine-tuning, and protected quantization"};
    app.require_subcommand(1);

    std::string config_path, in_path, out_path, log_path, from_stage, report_dir;

    auto* train_clean_cmd = app.add_subcommand("train-clean", "mixup pre-training from scratch");
    train_clean_cmd->add_option("--config", config_path, "run config JSON")->required();
    train_clean_cmd->add_option("--out", out_path, "output checkpoint")->required();

    auto* train_bpfc_cmd =
        app.add_subcommand("train-bpfc", "bit-plane consistency training on a checkpoint");
    train_bpfc_cmd->add_option("--config", config_path)->required();
    train_bpfc_cmd->add_option("--in", in_path, "input checkpoint")->required();
    train_bpfc_cmd->add_option("--out", out_path)->required();

    auto* critical_cmd =
        app.add_subcommand("analyze-critical", "gradient-sensitivity ranking of layers");
    critical_cmd->add_option("--config", config_path)->required();
    critical_cmd->add_option("--in", in_path)->required();
    critical_cmd->add_option("--out", out_path, "criticality CSV")->required();

    auto* train_fault_cmd =
        app.add_subcommand("train-fault", "fault-aware fine-tuning outside critical layers");
    train_fault_cmd->add_option("--config", config_path)->required();
    train_fault_cmd->add_option("--in", in_path)->required();
    train_fault_cmd->add_option("--out", out_path)->required();

    auto* quantize_cmd =
        app.add_subcommand("quantize", "bit-width search plus msb protection");
    quantize_cmd->add_option("--config", config_path)->required();
    quantize_cmd->add_option("--in", in_path)->required();
    quantize_cmd->add_option("--out", out_path, "quantized container")->required();
    quantize_cmd->add_option("--log", log_path, "search log CSV");

    std::vector<std::string> attack_names{"fgsm", "ifgsm", "pgd", "bim", "mim"};
    double eps = 0.0, step_size = 0.0;
    int steps = 0, trials = 0;
    std::uint64_t seed = 0;
    auto* attack_cmd = app.add_subcommand("attack-eval", "adversarial accuracy table");
    attack_cmd->add_option("--config", config_path)->required();
    attack_cmd->add_option("--in", in_path, "checkpoint, float or quantized")->required();
    attack_cmd->add_option("--out", out_path, "attack CSV")->required();
    attack_cmd->add_option("--attacks", attack_names, "attack names")->delimiter(',');
    attack_cmd->add_option("--eps", eps, "L-inf budget (default from config)");
    attack_cmd->add_option("--steps", steps, "iterations (default from config)");
    attack_cmd->add_option("--step-size", step_size, "per-step size (default from config)");
    attack_cmd->add_option("--seed", seed, "attack seed (default from config)");

    std::vector<double> bers;
    auto* fault_cmd = app.add_subcommand("fault-eval", "reliability sweep over bit error rates");
    fault_cmd->add_option("--config", config_path)->required();
    fault_cmd->add_option("--in", in_path)->required();
    fault_cmd->add_option("--out", out_path, "reliability CSV")->required();
    fault_cmd->add_option("--bers", bers, "bit error rates (default from config)")
        ->delimiter(',');
    fault_cmd->add_option("--trials", trials, "fault draws per rate (default from config)");
    fault_cmd->add_option("--seed", seed, "sweep seed (default from config)");

    auto* run_all_cmd = app.add_subcommand("run-all", "every stage in sequence");
    run_all_cmd->add_option("--config", config_path)->required();
    run_all_cmd->add_option("--out", out_path, "run directory")->required();
    run_all_cmd->add_option("--from", from_stage,
                            "resume from stage1|criticality|stage2|stage3|eval");

    auto* report_cmd = app.add_subcommand("report", "print a finished run's tables");
    report_cmd->add_option("--dir", report_dir, "run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    if (*train_clean_cmd) {
        Loaded run = load_all(config_path);
        Model m = build_from_spec(run.cfg.model, run.data.train);
        train_clean(m, run.data.train, run.cfg.stage0.epochs, run.cfg.stage0.lr,
                    run.cfg.stage0.mixup_alpha, run.cfg.stage0.seed, run.cfg.stage0.batch_size);
        save_container(m, out_path);
        std::fprintf(stderr, "accuracy %.4f -> %s\n", accuracy(m, run.data.test),
                     out_path.c_str());
    } else if (*train_bpfc_cmd) {
        Loaded run = load_all(config_path);
        Model m = load_model(in_path);
        train_bpfc(m, run.data.train, run.cfg.stage1);
        save_container(m, out_path);
        std::fprintf(stderr, "accuracy %.4f -> %s\n", accuracy(m, run.data.test),
                     out_path.c_str());
    } else if (*critical_cmd) {
        Loaded run = load_all(config_path);
        Model m = load_model(in_path);
        const CriticalityReport report = track_ema(
            m, run.data.train, make_bpfc_loss(m, run.cfg.stage1.k, run.cfg.stage1.lambda),
            run.cfg.criticality, run.cfg.criticality_seed);
        write_text(out_path, criticality_csv(report));
        for (const auto& name : report.critical_layers) {
            std::fprintf(stderr, "critical: %s\n", name.c_str());
        }
    } else if (*train_fault_cmd) {
        Loaded run = load_all(config_path);
        Model m = load_model(in_path);
        const auto critical = recompute_critical(m, run);
        train_fault_aware(m, run.data.train, critical, run.cfg.stage2, run.cfg.stage2_fault);
        save_container(m, out_path);
        std::fprintf(stderr, "accuracy %.4f -> %s\n", accuracy(m, run.data.test),
                     out_path.c_str());
    } else if (*quantize_cmd) {
        Loaded run = load_all(config_path);
        Model m = load_model(in_path);
        const QuantSearchConfig qc =
            resolve_search(run.cfg.stage3, accuracy(m, run.data.test));
        const QuantSearchResult res =
            search_bit_width(m, run.data.test, qc, run.cfg.stage3.seed);
        save_container(res.model, out_path);
        if (!log_path.empty()) write_text(log_path, search_log_csv(res.log));
        std::fprintf(stderr, "selected %d bits, %d protected msbs, accuracy %.4f -> %s\n",
                     res.bits, res.n_msb, res.accuracy, out_path.c_str());
    } else if (*attack_cmd) {
        Loaded run = load_all(config_path);
        std::vector<AttackSpec> specs;
        for (const auto& name : attack_names) {
            AttackSpec s{attack_kind_from_name(name), {}};
            s.cfg.epsilon = attack_cmd->count("--eps") ? eps : run.cfg.eval.epsilon;
            s.cfg.steps = attack_cmd->count("--steps") ? steps : run.cfg.eval.attack_steps;
            s.cfg.step_size =
                attack_cmd->count("--step-size") ? step_size : run.cfg.eval.attack_step_size;
            s.cfg.seed = attack_cmd->count("--seed") ? seed : run.cfg.eval.attack_seed;
            s.cfg.random_start = s.kind == AttackKind::pgd;
            specs.push_back(s);
        }
        std::vector<AttackRow> rows;
        if (container_is_quantized(in_path)) {
            rows = evaluate_attacks(load_quantized(in_path), run.data.test, specs);
        } else {
            Model m = load_model(in_path);
            rows = evaluate_attacks(m, run.data.test, specs);
        }
        // label rows by the requested names so ifgsm and bim stay apart
        for (std::size_t i = 0; i < attack_names.size(); ++i) {
            rows[i + 1].attack = attack_names[i];
        }
        write_text(out_path, attacks_csv(rows));
        for (const auto& r : rows) {
            std::fprintf(stderr, "%-8s eps %-8.4g accuracy %.4f\n", r.attack.c_str(), r.epsilon,
                         r.accuracy);
        }
    } else if (*fault_cmd) {
        Loaded run = load_all(config_path);
        const std::vector<double> sweep = fault_cmd->count("--bers") ? bers : run.cfg.eval.bers;
        const int n_trials = fault_cmd->count("--trials") ? trials : run.cfg.eval.trials;
        const std::uint64_t s = fault_cmd->count("--seed") ? seed : run.cfg.eval.fault_seed;
        std::vector<ReliabilityRow> rows;
        if (container_is_quantized(in_path)) {
            rows = evaluate_reliability(load_quantized(in_path), run.data.test, sweep, n_trials,
                                        s);
        } else {
            rows = evaluate_reliability(load_model(in_path), run.data.test, sweep, n_trials, s);
        }
        write_text(out_path, reliability_csv(rows));
        for (const auto& r : rows) {
            std::fprintf(stderr, "ber %-10.4g accuracy %.4f +- %.4f\n", r.ber, r.mean_accuracy,
                         r.std_accuracy);
        }
    } else if (*run_all_cmd) {
        const RunConfig cfg = load_run_config(config_path);
        const PipelineResult result = run_pipeline(cfg, out_path, from_stage);
        print_stage_lines(result);
    } else if (*report_cmd) {
        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(read_text(report_dir + "/manifest.json"));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(std::string("manifest is unreadable: ") + e.what());
        }
        std::printf("stages:\n");
        for (const auto& s : manifest.value("stages", nlohmann::json::array())) {
            std::printf("  %-12s accuracy %-10.4f %s\n", s.value("name", "?").c_str(),
                        s.value("clean_accuracy", 0.0), s.value("checkpoint", "").c_str());
        }
        if (manifest.contains("summary")) {
            const auto& sum = manifest["summary"];
            std::printf("bits: %d  protected msbs: %d  final: %s\n", sum.value("bits", 0),
                        sum.value("n_msb", 0), sum.value("final_checkpoint", "").c_str());
        }
        for (const char* table : {"stage_accuracy.csv", "attacks.csv", "fault_sweep.csv"}) {
            std::printf("\n-- %s --\n%s", table,
                        read_text(report_dir + "/" + table).c_str());
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::fprintf(stderr, "resq: %s error: %s\n", category_name(e.category()), e.what());
        return category_exit_code(e.category());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "resq: %s\n", e.what());
        return 1;
    }
}
