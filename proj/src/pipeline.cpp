#include "resq/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "resq/errors.hpp"

namespace resq {

using nlohmann::json;
namespace fs = std::filesystem;

std::uint64_t fnv1a(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::string digest_bytes(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(bytes.data(), bytes.size())));
    return buf;
}

std::string digest_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return digest_bytes(ss.str());
}

namespace {

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << content;
    if (!out) throw IoError("short write to " + path);
}

// Strict object reader: every key must be consumed exactly once, and
// anything left over is a config error. Silent typo tolerance is how
// robustness experiments end up measuring the wrong thing.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
    }

    const json& at(const char* key) {
        const auto it = j_.find(key);
        if (it == j_.end()) throw ConfigError(path_ + "." + key + " is required");
        seen_.push_back(key);
        return *it;
    }

    double number(const char* key) {
        const json& v = at(key);
        if (!v.is_number()) throw ConfigError(path_ + "." + key + " must be a number");
        return v.get<double>();
    }

    int integer(const char* key) {
        const json& v = at(key);
        if (!v.is_number_integer()) throw ConfigError(path_ + "." + key + " must be an integer");
        return v.get<int>();
    }

    std::uint64_t u64(const char* key) {
        const json& v = at(key);
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                       v.get<long long>() < 0)) {
            throw ConfigError(path_ + "." + key + " must be a non-negative integer");
        }
        return v.get<std::uint64_t>();
    }

    std::size_t size(const char* key) { return static_cast<std::size_t>(u64(key)); }

    std::string str(const char* key) {
        const json& v = at(key);
        if (!v.is_string()) throw ConfigError(path_ + "." + key + " must be a string");
        return v.get<std::string>();
    }

    std::vector<double> number_list(const char* key) {
        const json& v = at(key);
        if (!v.is_array()) throw ConfigError(path_ + "." + key + " must be an array");
        std::vector<double> out;
        for (const auto& e : v) {
            if (!e.is_number()) throw ConfigError(path_ + "." + key + " must hold numbers");
            out.push_back(e.get<double>());
        }
        return out;
    }

    std::vector<std::size_t> size_list(const char* key) {
        const json& v = at(key);
        if (!v.is_array()) throw ConfigError(path_ + "." + key + " must be an array");
        std::vector<std::size_t> out;
        for (const auto& e : v) {
            if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<long long>() >= 0)) {
                throw ConfigError(path_ + "." + key + " must hold non-negative integers");
            }
            out.push_back(e.get<std::size_t>());
        }
        return out;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
                throw ConfigError(path_ + "." + it.key() + " is not a recognized key");
            }
        }
    }

private:
    const json& j_;
    std::string path_;
    std::vector<std::string> seen_;
};

DatasetSpec parse_dataset(const json& j) {
    Section s(j, "dataset");
    DatasetSpec d;
    d.kind = s.str("kind");
    if (d.kind == "synth") {
        d.seed = s.u64("seed");
        d.n = s.size("n");
        d.classes = s.integer("classes");
        d.side = s.size("side");
    } else if (d.kind == "idx") {
        d.images = s.str("images");
        d.labels = s.str("labels");
    } else {
        throw ConfigError("dataset.kind must be \"synth\" or \"idx\"");
    }
    d.holdout_fraction = s.number("holdout_fraction");
    d.split_seed = s.u64("split_seed");
    s.finish();
    if (!(d.holdout_fraction > 0.0 && d.holdout_fraction < 1.0)) {
        throw ConfigError("dataset.holdout_fraction must be in (0,1)");
    }
    return d;
}

ModelSpec parse_model(const json& j) {
    Section s(j, "model");
    ModelSpec m;
    m.kind = s.str("kind");
    if (m.kind == "mlp") {
        m.hidden = s.size_list("hidden");
    } else if (m.kind != "cnn") {
        throw ConfigError("model.kind must be \"mlp\" or \"cnn\"");
    }
    m.seed = s.u64("seed");
    s.finish();
    return m;
}

Stage0Config parse_stage0(const json& j) {
    Section s(j, "stage0");
    Stage0Config c;
    c.epochs = s.integer("epochs");
    c.lr = s.number("lr");
    c.mixup_alpha = s.number("mixup_alpha");
    c.seed = s.u64("seed");
    c.batch_size = s.size("batch_size");
    s.finish();
    return c;
}

BpfcConfig parse_stage1(const json& j) {
    Section s(j, "stage1");
    BpfcConfig c;
    c.k = s.integer("k");
    c.lambda = s.number("lambda");
    c.epochs = s.integer("epochs");
    c.lr = s.number("lr");
    c.seed = s.u64("seed");
    c.batch_size = s.size("batch_size");
    s.finish();
    return c;
}

void parse_criticality(const json& j, CriticalityConfig& c, std::uint64_t& seed) {
    Section s(j, "criticality");
    c.ema_beta = s.number("ema_beta");
    c.window = s.integer("window");
    c.mode = threshold_mode_from_name(s.str("mode"));
    c.value = s.number("value");
    c.batch_size = s.size("batch_size");
    seed = s.u64("seed");
    s.finish();
}

void parse_stage2(const json& j, FaultTrainConfig& t, FaultConfig& f) {
    Section s(j, "stage2");
    t.lambda = s.number("lambda");
    t.realizations_per_batch = s.integer("realizations_per_batch");
    t.epochs = s.integer("epochs");
    t.lr = s.number("lr");
    t.seed = s.u64("seed");
    t.batch_size = s.size("batch_size");
    f.ber = s.number("ber");
    f.bits_per_weight = s.integer("bits_per_weight");
    s.finish();
}

Stage3Config parse_stage3(const json& j) {
    Section s(j, "stage3");
    Stage3Config c;
    c.min_bits = s.integer("min_bits");
    c.max_bits = s.integer("max_bits");
    c.accuracy_mode = s.str("accuracy_mode");
    c.accuracy_value = s.number("accuracy_value");
    c.reliability_mode = s.str("reliability_mode");
    c.reliability_value = s.number("reliability_value");
    c.eval_ber = s.number("eval_ber");
    c.trials = s.integer("trials");
    c.n_msb = s.integer("n_msb");
    c.n_msb_max = s.integer("n_msb_max");
    c.seed = s.u64("seed");
    s.finish();
    for (const std::string* mode : {&c.accuracy_mode, &c.reliability_mode}) {
        if (*mode != "absolute" && *mode != "drop") {
            throw ConfigError("stage3 threshold modes must be \"absolute\" or \"drop\"");
        }
    }
    return c;
}

EvalConfig parse_eval(const json& j) {
    Section s(j, "eval");
    EvalConfig c;
    c.epsilon = s.number("epsilon");
    c.attack_steps = s.integer("attack_steps");
    c.attack_step_size = s.number("attack_step_size");
    c.attack_seed = s.u64("attack_seed");
    c.bers = s.number_list("bers");
    c.trials = s.integer("trials");
    c.fault_seed = s.u64("fault_seed");
    s.finish();
    if (c.bers.empty()) throw ConfigError("eval.bers must not be empty");
    return c;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    Section top(j, "config");
    RunConfig cfg;
    cfg.dataset = parse_dataset(top.at("dataset"));
    cfg.model = parse_model(top.at("model"));
    cfg.stage0 = parse_stage0(top.at("stage0"));
    cfg.stage1 = parse_stage1(top.at("stage1"));
    parse_criticality(top.at("criticality"), cfg.criticality, cfg.criticality_seed);
    parse_stage2(top.at("stage2"), cfg.stage2, cfg.stage2_fault);
    cfg.stage3 = parse_stage3(top.at("stage3"));
    cfg.eval = parse_eval(top.at("eval"));
    top.finish();
    // object keys serialize sorted, so these dumps are canonical
    for (const char* section : {"dataset", "model", "stage0", "stage1", "criticality", "stage2",
                                "stage3", "eval"}) {
        cfg.section_dumps[section] = j.at(section).dump();
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

SplitData materialize_dataset(const DatasetSpec& spec) {
    Dataset full = spec.kind == "synth"
                       ? synth_dataset(spec.seed, spec.n, spec.classes, spec.side)
                       : load_idx(spec.images, spec.labels);
    auto [train, test] = split_dataset(full, spec.holdout_fraction, spec.split_seed);
    return {std::move(train), std::move(test)};
}

Model build_from_spec(const ModelSpec& spec, const Dataset& ds) {
    const auto& shape = ds.image_shape();
    if (spec.kind == "mlp") {
        return build_mlp(shape_product(shape), spec.hidden, ds.num_classes, spec.seed);
    }
    if (shape.size() != 3 || shape[1] != shape[2]) {
        throw ConfigError("cnn models need square [C,H,W] images");
    }
    return build_cnn(shape[0], shape[1], ds.num_classes, spec.seed);
}

const std::vector<std::string>& pipeline_stage_names() {
    static const std::vector<std::string> names = {"stage0", "stage1", "criticality",
                                                   "stage2", "stage3", "eval"};
    return names;
}

std::string lineage_digest(const RunConfig& cfg, const std::string& stage) {
    // cumulative over everything consumed up to and including this stage
    static const std::vector<std::pair<std::string, std::vector<std::string>>> consumes = {
        {"stage0", {"dataset", "model", "stage0"}},
        {"stage1", {"stage1"}},
        {"criticality", {"criticality"}},
        {"stage2", {"stage2"}},
        {"stage3", {"stage3"}},
        {"eval", {"eval"}},
    };
    std::string acc;
    for (const auto& [name, sections] : consumes) {
        for (const auto& s : sections) {
            acc += s;
            acc += '=';
            acc += cfg.section_dumps.at(s);
            acc += ';';
        }
        if (name == stage) return digest_bytes(acc);
    }
    throw ContractError("unknown pipeline stage: " + stage);
}

namespace {

int resolve_start(const std::string& from_stage) {
    if (from_stage.empty()) return 0;
    const auto& names = pipeline_stage_names();
    const auto it = std::find(names.begin(), names.end(), from_stage);
    if (it == names.end()) {
        throw ConfigError("unknown stage \"" + from_stage + "\"; expected one of stage0, "
                          "stage1, criticality, stage2, stage3, eval");
    }
    return static_cast<int>(it - names.begin());
}

json outcome_json(const StageOutcome& o) {
    json e;
    e["name"] = o.name;
    e["lineage"] = o.lineage;
    if (!o.checkpoint.empty()) {
        e["checkpoint"] = o.checkpoint;
        e["checkpoint_digest"] = o.checkpoint_digest;
    }
    e["clean_accuracy"] = o.clean_accuracy;
    return e;
}

// wall time deliberately stays out: the manifest must be byte-identical
// across reruns of the same config
void write_manifest(const std::string& out_dir, const json& stages, const json* summary) {
    json j;
    j["schema"] = 1;
    j["stages"] = stages;
    if (summary) j["summary"] = *summary;
    write_text(out_dir + "/manifest.json", j.dump(2) + "\n");
}

json read_manifest(const std::string& out_dir) {
    std::ifstream in(out_dir + "/manifest.json", std::ios::binary);
    if (!in) throw LineageError("no manifest under " + out_dir + " to resume from");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw LineageError(std::string("manifest is unreadable: ") + e.what());
    }
}

double stage_seconds(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& cfg, const std::string& out_dir,
                            const std::string& from_stage) {
    const auto& names = pipeline_stage_names();
    const int start = resolve_start(from_stage);
    fs::create_directories(fs::path(out_dir) / "checkpoints");

    const SplitData data = materialize_dataset(cfg.dataset);

    PipelineResult result;
    json stages = json::array();
    std::string last_ckpt;

    // replay completed stages from the manifest, refusing on any drift
    if (start > 0) {
        const json manifest = read_manifest(out_dir);
        if (!manifest.contains("stages") || !manifest["stages"].is_array() ||
            manifest["stages"].size() < static_cast<std::size_t>(start)) {
            throw LineageError("manifest does not cover the stages before " + from_stage);
        }
        for (int s = 0; s < start; ++s) {
            const json& e = manifest["stages"][static_cast<std::size_t>(s)];
            const std::string name = e.value("name", "");
            if (name != names[static_cast<std::size_t>(s)]) {
                throw LineageError("manifest stage " + std::to_string(s) + " is \"" + name +
                                   "\", expected \"" + names[static_cast<std::size_t>(s)] + "\"");
            }
            if (e.value("lineage", "") != lineage_digest(cfg, name)) {
                throw LineageError("config feeding " + name +
                                   " changed since its checkpoint was written");
            }
            if (e.contains("checkpoint")) {
                const std::string rel = e["checkpoint"].get<std::string>();
                const std::string full = out_dir + "/" + rel;
                if (digest_file(full) != e.value("checkpoint_digest", "")) {
                    throw LineageError("checkpoint " + rel + " does not match the manifest");
                }
                last_ckpt = rel;
            }
            if (name == "stage0") result.baseline_accuracy = e.at("clean_accuracy").get<double>();
            if (name == "stage1") result.bpfc_accuracy = e.at("clean_accuracy").get<double>();
            if (name == "stage2") result.fa_accuracy = e.at("clean_accuracy").get<double>();
            if (name == "criticality") {
                result.critical_layers =
                    e.at("critical_layers").get<std::vector<std::string>>();
            }
            if (name == "stage3") {
                result.qfa_accuracy = e.at("clean_accuracy").get<double>();
                result.bits = e.at("bits").get<int>();
                result.n_msb = e.at("n_msb").get<int>();
            }
            stages.push_back(e);
            StageOutcome o;
            o.name = name;
            o.lineage = e.value("lineage", "");
            o.checkpoint = e.value("checkpoint", "");
            o.checkpoint_digest = e.value("checkpoint_digest", "");
            o.clean_accuracy = e.value("clean_accuracy", 0.0);
            result.stages.push_back(std::move(o));
        }
    }

    const std::string ckpt_stage0 = "checkpoints/stage0_clean.resq";
    const std::string ckpt_stage1 = "checkpoints/stage1_bpfc.resq";
    const std::string ckpt_stage2 = "checkpoints/stage2_fa.resq";
    const std::string ckpt_stage3 = "checkpoints/stage3_qfa.resq";

    Model m;
    if (start == 1) m = load_model(out_dir + "/" + ckpt_stage0);
    if (start == 2 || start == 3) m = load_model(out_dir + "/" + ckpt_stage1);
    if (start == 4) m = load_model(out_dir + "/" + ckpt_stage2);
    QuantizedModel qm;
    if (start == 5) qm = load_quantized(out_dir + "/" + ckpt_stage3);

    const auto finish_stage = [&](StageOutcome o, json extra = json::object()) {
        json e = outcome_json(o);
        e.update(extra);
        stages.push_back(std::move(e));
        result.stages.push_back(std::move(o));
        write_manifest(out_dir, stages, nullptr);
    };

    const auto run_stage = [&](int index, auto&& body) {
        if (start > index) return;
        const std::string& name = names[static_cast<std::size_t>(index)];
        try {
            const auto t0 = std::chrono::steady_clock::now();
            StageOutcome o;
            o.name = name;
            o.lineage = lineage_digest(cfg, name);
            json extra = json::object();
            body(o, extra);
            o.wall_seconds = stage_seconds(t0);
            if (!o.checkpoint.empty()) last_ckpt = o.checkpoint;
            finish_stage(std::move(o), std::move(extra));
        } catch (const Error& e) {
            throw Error(e.category(),
                        std::string(e.what()) + " (stage " + name + "; last good checkpoint: " +
                            (last_ckpt.empty() ? "none" : last_ckpt) + ")");
        }
    };

    run_stage(0, [&](StageOutcome& o, json&) {
        m = build_from_spec(cfg.model, data.train);
        train_clean(m, data.train, cfg.stage0.epochs, cfg.stage0.lr, cfg.stage0.mixup_alpha,
                    cfg.stage0.seed, cfg.stage0.batch_size);
        save_container(m, out_dir + "/" + ckpt_stage0);
        o.checkpoint = ckpt_stage0;
        o.checkpoint_digest = digest_file(out_dir + "/" + ckpt_stage0);
        o.clean_accuracy = result.baseline_accuracy = accuracy(m, data.test);
    });

    run_stage(1, [&](StageOutcome& o, json&) {
        train_bpfc(m, data.train, cfg.stage1);
        save_container(m, out_dir + "/" + ckpt_stage1);
        o.checkpoint = ckpt_stage1;
        o.checkpoint_digest = digest_file(out_dir + "/" + ckpt_stage1);
        o.clean_accuracy = result.bpfc_accuracy = accuracy(m, data.test);
    });

    run_stage(2, [&](StageOutcome& o, json& extra) {
        const CriticalityReport report = track_ema(
            m, data.train, make_bpfc_loss(m, cfg.stage1.k, cfg.stage1.lambda), cfg.criticality,
            cfg.criticality_seed);
        write_text(out_dir + "/criticality.csv", criticality_csv(report));
        result.critical_layers = report.critical_layers;
        extra["critical_layers"] = report.critical_layers;
        // the model itself is untouched here, so the stage carries no new
        // checkpoint; clean accuracy restates the input model's
        o.clean_accuracy = result.bpfc_accuracy;
    });

    run_stage(3, [&](StageOutcome& o, json&) {
        train_fault_aware(m, data.train, result.critical_layers, cfg.stage2, cfg.stage2_fault);
        save_container(m, out_dir + "/" + ckpt_stage2);
        o.checkpoint = ckpt_stage2;
        o.checkpoint_digest = digest_file(out_dir + "/" + ckpt_stage2);
        o.clean_accuracy = result.fa_accuracy = accuracy(m, data.test);
    });

    run_stage(4, [&](StageOutcome& o, json& extra) {
        QuantSearchConfig qc;
        qc.min_bits = cfg.stage3.min_bits;
        qc.max_bits = cfg.stage3.max_bits;
        qc.accuracy_threshold =
            cfg.stage3.accuracy_mode == "absolute"
                ? cfg.stage3.accuracy_value
                : std::max(0.0, result.fa_accuracy - cfg.stage3.accuracy_value);
        qc.reliability_threshold =
            cfg.stage3.reliability_mode == "absolute"
                ? cfg.stage3.reliability_value
                : std::max(0.0, result.fa_accuracy - cfg.stage3.reliability_value);
        qc.eval_ber = cfg.stage3.eval_ber;
        qc.trials = cfg.stage3.trials;
        qc.n_msb = cfg.stage3.n_msb;
        qc.n_msb_max = cfg.stage3.n_msb_max;
        const QuantSearchResult res = search_bit_width(m, data.test, qc, cfg.stage3.seed);
        write_text(out_dir + "/search_log.csv", search_log_csv(res.log));
        save_container(res.model, out_dir + "/" + ckpt_stage3);
        qm = res.model;
        result.bits = res.bits;
        result.n_msb = res.n_msb;
        result.qfa_accuracy = res.accuracy;
        o.checkpoint = ckpt_stage3;
        o.checkpoint_digest = digest_file(out_dir + "/" + ckpt_stage3);
        o.clean_accuracy = res.accuracy;
        extra["bits"] = res.bits;
        extra["n_msb"] = res.n_msb;
    });

    run_stage(5, [&](StageOutcome& o, json& extra) {
        std::vector<AttackSpec> specs;
        for (AttackKind k :
             {AttackKind::fgsm, AttackKind::ifgsm_bim, AttackKind::pgd, AttackKind::mim}) {
            AttackSpec s{k, {}};
            s.cfg.epsilon = cfg.eval.epsilon;
            s.cfg.steps = cfg.eval.attack_steps;
            s.cfg.step_size = cfg.eval.attack_step_size;
            s.cfg.random_start = k == AttackKind::pgd;
            s.cfg.seed = cfg.eval.attack_seed;
            specs.push_back(s);
        }
        write_text(out_dir + "/attacks.csv", attacks_csv(evaluate_attacks(qm, data.test, specs)));
        write_text(out_dir + "/fault_sweep.csv",
                   reliability_csv(evaluate_reliability(qm, data.test, cfg.eval.bers,
                                                        cfg.eval.trials, cfg.eval.fault_seed)));
        char row[256];
        std::snprintf(row, sizeof(row), "%.17g,%.17g,%.17g,%.17g\n", result.baseline_accuracy,
                      result.bpfc_accuracy, result.fa_accuracy, result.qfa_accuracy);
        write_text(out_dir + "/stage_accuracy.csv", std::string("Baseline,BPFC,FA,Q-FA\n") + row);
        o.clean_accuracy = result.qfa_accuracy;
        extra["tables"] =
            json::array({"stage_accuracy.csv", "attacks.csv", "fault_sweep.csv",
                         "criticality.csv", "search_log.csv"});
    });

    result.final_checkpoint = ckpt_stage3;
    json summary;
    summary["accuracy"] = {{"baseline", result.baseline_accuracy},
                           {"bpfc", result.bpfc_accuracy},
                           {"fa", result.fa_accuracy},
                           {"qfa", result.qfa_accuracy}};
    summary["bits"] = result.bits;
    summary["n_msb"] = result.n_msb;
    summary["final_checkpoint"] = result.final_checkpoint;
    summary["critical_layers"] = result.critical_layers;
    write_manifest(out_dir, stages, &summary);
    return result;
}

}  // namespace resq
