#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsteer/backbone.hpp"
#include "icsteer/distill.hpp"
#include "icsteer/pretrain.hpp"
#include "icsteer/synthtask.hpp"

namespace icsteer {

inline constexpr const char* TOOL_VERSION = "icsteer 0.1.0";

// Evaluation and pipeline-gate settings.
struct EvalConfig {
    int max_new_tokens = 80;  // generation budget per report
    int eos_window_neg = 10;  // EOS profile offsets [-neg, +pos]
    int eos_window_pos = 5;
    int length_threshold = 5; // length-deviation bucket half-width
    // Demonstration-gap gate applied after pretraining: few-shot teacher-
    // forced CE must undercut zero-shot CE by this relative margin, or the
    // backbone is useless as a teacher and the run fails. Values <= -1
    // disable the gate (the gap is still measured and recorded).
    double icl_gap_min = 0.05;
    int icl_gap_shots = 8;
    int icl_gap_cases = 64;

    void validate() const; // throws ConfigError
    nlohmann::json to_json() const;
    static EvalConfig from_json(const nlohmann::json& j);
    bool operator==(const EvalConfig&) const = default;
};

// One file configures the whole pipeline. Every stage command receives the
// full RunConfig; missing sections take their defaults, and the fully
// defaulted config is echoed into each stage manifest so runs are
// self-describing. Steering geometry (mode, rank, rho, decay) lives inside
// the distill section, where it is trained.
struct RunConfig {
    TaskConfig task;
    BackboneConfig backbone; // vocab_size 0 = derive from the task vocabulary
    PretrainConfig pretrain;
    DistillConfig distill;
    EvalConfig eval;
    std::string out_dir = "runs/desk";

    void validate() const; // throws ConfigError
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path); // JSON file
    void save(const std::string& path) const;
    bool operator==(const RunConfig&) const = default;

    // Backbone config with vocab_size resolved against the task vocabulary.
    BackboneConfig resolved_backbone() const;

    // FNV-1a over the canonical dump of all five sections (out_dir excluded:
    // where artifacts land does not change what they are).
    uint64_t config_hash() const;
    // Per-section hashes, used for stage-scoped chain checks.
    std::map<std::string, uint64_t> section_hashes() const;
};

// Written as manifest.json next to every stage output. The deterministic
// fields (command, tool version, config, input hashes) form the
// reproducibility key: two runs with equal keys produce byte-identical
// outputs in the 64-bit build. Wall-clock fields are informational only.
struct RunManifest {
    std::string command;
    std::string tool_version = TOOL_VERSION;
    uint64_t config_hash = 0;
    std::map<std::string, uint64_t> section_hashes;
    nlohmann::json config_echo;             // fully defaulted RunConfig
    std::map<std::string, uint64_t> inputs; // label -> file content hash
    std::map<std::string, uint64_t> outputs;
    long long started_unix = 0;
    double elapsed_seconds = 0.0;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static RunManifest load(const std::string& path);

    // Canonical dump of everything except outputs and wall clock.
    std::string reproducibility_key() const;
};

// Pipeline stage commands. Each writes its artifacts plus manifest.json into
// out_dir, refuses an out_dir that already holds a manifest unless
// `overwrite`, and validates consumed directories against the current config
// by comparing the relevant config-section hashes recorded in their
// manifests (mismatch: ArtifactError naming the section and both hashes).
//
//   gen-data  -> cases_{distill,pool,val,test}.jsonl, vocab.json, lexicon.txt
//   pretrain  -> backbone.bin, pretrain_log.jsonl, pretrain_metrics.json
//   cache     -> teacher_cache.bin, cache_report.json
//   distill   -> adapters.bin, distill_log.jsonl, distill_metrics.json
//   generate  -> generations.jsonl
//   evaluate  -> metrics.csv, eos_profile.csv, eval_metrics.json
//   ablate    -> metrics.csv, generations_<row>.jsonl, eos_profile_<row>.csv
//
// cmd_generate and cmd_evaluate take no cache or demonstration inputs at
// all: inference is query-only by interface.
RunManifest cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, bool overwrite);
RunManifest cmd_pretrain(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir, bool overwrite);
RunManifest cmd_cache_teacher(const RunConfig& cfg, const std::string& data_dir,
                              const std::string& backbone_dir, const std::string& out_dir,
                              bool overwrite);
RunManifest cmd_distill(const RunConfig& cfg, const std::string& data_dir,
                        const std::string& backbone_dir, const std::string& cache_dir,
                        const std::string& out_dir, bool overwrite);
// adapters_dir may be empty: the bare backbone generates zero-shot.
RunManifest cmd_generate(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& backbone_dir, const std::string& adapters_dir,
                         const std::string& out_dir, bool overwrite);
RunManifest cmd_evaluate(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& backbone_dir, const std::string& adapters_dir,
                         const std::string& gens_dir, const std::string& out_dir, bool overwrite);
RunManifest cmd_ablate(const RunConfig& cfg, const std::string& data_dir,
                       const std::string& backbone_dir, const std::string& cache_dir,
                       const std::string& out_dir, bool overwrite);

// Command-line entry point (the `icsteer` tool forwards to this; tests call
// it directly). Exit codes: 0 success, 2 config error, 3 artifact mismatch,
// 4 numeric failure.
int cli_main(int argc, const char* const* argv);

} // namespace icsteer
