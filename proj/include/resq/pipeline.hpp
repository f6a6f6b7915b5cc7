#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "resq/attack.hpp"
#include "resq/bpfc.hpp"
#include "resq/criticality.hpp"
#include "resq/dataset.hpp"
#include "resq/fault.hpp"
#include "resq/model.hpp"
#include "resq/quantize.hpp"

namespace resq {

// 64-bit FNV-1a, printed as 16 hex digits. Used for checkpoint and config
// lineage fingerprints; not a cryptographic hash.
std::uint64_t fnv1a(const void* data, std::size_t len);
std::string digest_bytes(const std::string& bytes);
std::string digest_file(const std::string& path);

struct DatasetSpec {
    std::string kind;  // "synth" or "idx"
    std::uint64_t seed = 0;
    std::size_t n = 0;
    int classes = 0;
    std::size_t side = 0;
    std::string images;  // idx only
    std::string labels;
    double holdout_fraction = 0.2;
    std::uint64_t split_seed = 0;
};

struct ModelSpec {
    std::string kind;  // "mlp" or "cnn"
    std::vector<std::size_t> hidden;
    std::uint64_t seed = 0;
};

struct Stage0Config {
    int epochs = 0;
    double lr = 0.0;
    double mixup_alpha = 1.0;
    std::uint64_t seed = 0;
    std::size_t batch_size = 32;
};

struct Stage3Config {
    int min_bits = 2;
    int max_bits = 12;
    std::string accuracy_mode;  // "absolute" or "drop" (relative to the FA model)
    double accuracy_value = 0.0;
    std::string reliability_mode;
    double reliability_value = 0.0;
    double eval_ber = 1e-3;
    int trials = 10;
    int n_msb = 2;
    int n_msb_max = 8;
    std::uint64_t seed = 0;
};

struct EvalConfig {
    double epsilon = 0.1;
    int attack_steps = 10;
    double attack_step_size = -1.0;
    std::uint64_t attack_seed = 0;
    std::vector<double> bers;
    int trials = 10;
    std::uint64_t fault_seed = 0;
};

// Everything a full run needs, with every seed spelled out. Parsing is
// strict: a missing or unrecognized key is a config error, never a silent
// default, so a typo cannot quietly change an experiment.
struct RunConfig {
    DatasetSpec dataset;
    ModelSpec model;
    Stage0Config stage0;
    BpfcConfig stage1;
    CriticalityConfig criticality;
    std::uint64_t criticality_seed = 0;
    FaultTrainConfig stage2;
    FaultConfig stage2_fault;
    Stage3Config stage3;
    EvalConfig eval;

    // canonical serialization of each top-level section, for lineage digests
    std::map<std::string, std::string> section_dumps;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Materialized dataset split: train feeds the stages, test feeds every
// reported accuracy.
struct SplitData {
    Dataset train;
    Dataset test;
};
SplitData materialize_dataset(const DatasetSpec& spec);
Model build_from_spec(const ModelSpec& spec, const Dataset& ds);

// cumulative config fingerprint covering everything the named stage (and its
// ancestors) consumed; resuming checks these against the manifest
std::string lineage_digest(const RunConfig& cfg, const std::string& stage);

struct StageOutcome {
    std::string name;
    std::string checkpoint;  // path relative to the run directory, "" if none
    std::string checkpoint_digest;
    std::string lineage;
    double clean_accuracy = 0.0;  // on the held-out split
    double wall_seconds = 0.0;    // console-side only; never serialized
};

struct PipelineResult {
    std::vector<StageOutcome> stages;
    double baseline_accuracy = 0.0;
    double bpfc_accuracy = 0.0;
    double fa_accuracy = 0.0;
    double qfa_accuracy = 0.0;
    std::vector<std::string> critical_layers;
    int bits = 0;
    int n_msb = 0;
    std::string final_checkpoint;
};

// Stage 0 -> 1 -> criticality -> 2 -> 3 -> evaluation, checkpointing after
// each stage and emitting stage_accuracy.csv, attacks.csv, fault_sweep.csv,
// criticality.csv, search_log.csv, and manifest.json under out_dir.
// `from_stage` ("" or "stage0" for a full run; "stage1", "criticality",
// "stage2", "stage3", "eval" to resume) replays earlier stages from the
// manifest after verifying their lineage and checkpoint digests; any
// mismatch refuses to resume. A stage failure still writes the manifest for
// the stages that did complete and reports the last good checkpoint.
PipelineResult run_pipeline(const RunConfig& cfg, const std::string& out_dir,
                            const std::string& from_stage = "");

const std::vector<std::string>& pipeline_stage_names();

}  // namespace resq
