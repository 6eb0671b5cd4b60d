#include "icsteer/pipeline.hpp"

#include <omp.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iostream>
#include <sstream>
#include <unordered_set>

#include "icsteer/errors.hpp"
#include "icsteer/evalkit.hpp"
#include "icsteer/hash.hpp"
#include "icsteer/lexicon.hpp"
#include "icsteer/steering.hpp"

namespace fs = std::filesystem;

namespace icsteer {

// ---------------------------------------------------------------------------
// EvalConfig

void EvalConfig::validate() const {
    if (max_new_tokens < 1) throw ConfigError("eval config: max_new_tokens must be >= 1");
    if (eos_window_neg < 0 || eos_window_pos < 0)
        throw ConfigError("eval config: EOS profile windows must be nonnegative");
    if (length_threshold < 0) throw ConfigError("eval config: length_threshold must be >= 0");
    if (!(icl_gap_min < 1.0))
        throw ConfigError("eval config: icl_gap_min must be below 1 (a relative improvement)");
    if (icl_gap_shots < 1) throw ConfigError("eval config: icl_gap_shots must be >= 1");
    if (icl_gap_cases < 1) throw ConfigError("eval config: icl_gap_cases must be >= 1");
}

nlohmann::json EvalConfig::to_json() const {
    return nlohmann::json{{"max_new_tokens", max_new_tokens},
                          {"eos_window_neg", eos_window_neg},
                          {"eos_window_pos", eos_window_pos},
                          {"length_threshold", length_threshold},
                          {"icl_gap_min", icl_gap_min},
                          {"icl_gap_shots", icl_gap_shots},
                          {"icl_gap_cases", icl_gap_cases}};
}

namespace {

template <typename T>
T field_as(const nlohmann::json& j, const char* owner, const char* key, const char* type_name,
           bool (nlohmann::json::*is_type)() const) {
    const auto& v = j.at(key);
    if (!(v.*is_type)())
        throw ConfigError(std::string(owner) + ": field '" + key + "' must be " + type_name);
    return v.get<T>();
}

} // namespace

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("eval config: expected a JSON object");
    static const std::unordered_set<std::string> known = {
        "max_new_tokens", "eos_window_neg", "eos_window_pos", "length_threshold",
        "icl_gap_min",    "icl_gap_shots",  "icl_gap_cases"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("eval config: unknown field '" + it.key() + "'");
    EvalConfig c;
    const char* owner = "eval config";
    if (j.contains("max_new_tokens"))
        c.max_new_tokens = field_as<int>(j, owner, "max_new_tokens", "an integer",
                                         &nlohmann::json::is_number_integer);
    if (j.contains("eos_window_neg"))
        c.eos_window_neg = field_as<int>(j, owner, "eos_window_neg", "an integer",
                                         &nlohmann::json::is_number_integer);
    if (j.contains("eos_window_pos"))
        c.eos_window_pos = field_as<int>(j, owner, "eos_window_pos", "an integer",
                                         &nlohmann::json::is_number_integer);
    if (j.contains("length_threshold"))
        c.length_threshold = field_as<int>(j, owner, "length_threshold", "an integer",
                                           &nlohmann::json::is_number_integer);
    if (j.contains("icl_gap_min"))
        c.icl_gap_min =
            field_as<double>(j, owner, "icl_gap_min", "a number", &nlohmann::json::is_number);
    if (j.contains("icl_gap_shots"))
        c.icl_gap_shots = field_as<int>(j, owner, "icl_gap_shots", "an integer",
                                        &nlohmann::json::is_number_integer);
    if (j.contains("icl_gap_cases"))
        c.icl_gap_cases = field_as<int>(j, owner, "icl_gap_cases", "an integer",
                                        &nlohmann::json::is_number_integer);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// RunConfig

BackboneConfig RunConfig::resolved_backbone() const {
    BackboneConfig b = backbone;
    const int task_vocab = Vocab::build(task.n_labels).size;
    if (b.vocab_size == 0) b.vocab_size = task_vocab;
    else if (b.vocab_size != task_vocab)
        throw ConfigError("backbone config: vocab_size " + std::to_string(b.vocab_size) +
                          " does not match the task vocabulary (" + std::to_string(task_vocab) +
                          " tokens); omit it or set them equal");
    return b;
}

void RunConfig::validate() const {
    task.validate();
    resolved_backbone().validate();
    pretrain.validate();
    distill.validate();
    eval.validate();
    if (out_dir.empty()) throw ConfigError("run config: out_dir must not be empty");
}

nlohmann::json RunConfig::to_json() const {
    return nlohmann::json{{"task", task.to_json()},         {"backbone", backbone.to_json()},
                          {"pretrain", pretrain.to_json()}, {"distill", distill.to_json()},
                          {"eval", eval.to_json()},         {"out_dir", out_dir}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("run config: expected a JSON object");
    static const std::unordered_set<std::string> known = {"task",    "backbone", "pretrain",
                                                          "distill", "eval",     "out_dir"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("run config: unknown section '" + it.key() + "'");
    RunConfig c;
    if (j.contains("task")) c.task = TaskConfig::from_json(j.at("task"));
    if (j.contains("backbone")) c.backbone = BackboneConfig::from_json(j.at("backbone"));
    if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("distill")) c.distill = DistillConfig::from_json(j.at("distill"));
    if (j.contains("eval")) c.eval = EvalConfig::from_json(j.at("eval"));
    if (j.contains("out_dir"))
        c.out_dir = field_as<std::string>(j, "run config", "out_dir", "a string",
                                          &nlohmann::json::is_string);
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f, nullptr, true, /*ignore_comments=*/true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

void RunConfig::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw ArtifactError("cannot write config file " + path);
    f << to_json().dump(2) << "\n";
    if (!f) throw ArtifactError("write failed for " + path);
}

uint64_t RunConfig::config_hash() const {
    nlohmann::json sections = to_json();
    sections.erase("out_dir");
    return fnv1a64(sections.dump());
}

std::map<std::string, uint64_t> RunConfig::section_hashes() const {
    return {{"task", fnv1a64(task.to_json().dump())},
            {"backbone", fnv1a64(backbone.to_json().dump())},
            {"pretrain", fnv1a64(pretrain.to_json().dump())},
            {"distill", fnv1a64(distill.to_json().dump())},
            {"eval", fnv1a64(eval.to_json().dump())}};
}

// ---------------------------------------------------------------------------
// RunManifest

namespace {

nlohmann::json hex_map(const std::map<std::string, uint64_t>& m) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : m) j[k] = hex64(v);
    return j;
}

std::map<std::string, uint64_t> unhex_map(const nlohmann::json& j, const char* what) {
    if (!j.is_object()) throw ArtifactError(std::string("manifest: '") + what + "' must be an object");
    std::map<std::string, uint64_t> m;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!it.value().is_string())
            throw ArtifactError(std::string("manifest: '") + what + "' entries must be hex strings");
        m[it.key()] = std::stoull(it.value().get<std::string>(), nullptr, 16);
    }
    return m;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw ArtifactError("cannot write " + path);
    f << j.dump(2) << "\n";
    if (!f) throw ArtifactError("write failed for " + path);
}

nlohmann::json read_json_file(const std::string& path, const char* what) {
    std::ifstream f(path);
    if (!f) throw ArtifactError(std::string(what) + " not found at " + path);
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string(what) + " at " + path + " is not valid JSON: " + e.what());
    }
}

} // namespace

nlohmann::json RunManifest::to_json() const {
    return nlohmann::json{
        {"command", command},
        {"tool_version", tool_version},
        {"config_hash", hex64(config_hash)},
        {"section_hashes", hex_map(section_hashes)},
        {"config", config_echo},
        {"inputs", hex_map(inputs)},
        {"outputs", hex_map(outputs)},
        {"wall_clock",
         nlohmann::json{{"started_unix", started_unix}, {"elapsed_seconds", elapsed_seconds}}}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    for (const char* key : {"command", "tool_version", "config_hash", "section_hashes", "config",
                            "inputs", "outputs", "wall_clock"})
        if (!j.contains(key))
            throw ArtifactError(std::string("manifest: missing field '") + key + "'");
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    m.section_hashes = unhex_map(j.at("section_hashes"), "section_hashes");
    m.config_echo = j.at("config");
    m.inputs = unhex_map(j.at("inputs"), "inputs");
    m.outputs = unhex_map(j.at("outputs"), "outputs");
    m.started_unix = j.at("wall_clock").at("started_unix").get<long long>();
    m.elapsed_seconds = j.at("wall_clock").at("elapsed_seconds").get<double>();
    return m;
}

void RunManifest::save(const std::string& path) const { write_json_file(path, to_json()); }

RunManifest RunManifest::load(const std::string& path) {
    return from_json(read_json_file(path, "manifest"));
}

std::string RunManifest::reproducibility_key() const {
    return nlohmann::json{{"command", command},
                          {"tool_version", tool_version},
                          {"config_hash", hex64(config_hash)},
                          {"section_hashes", hex_map(section_hashes)},
                          {"inputs", hex_map(inputs)}}
        .dump();
}

// ---------------------------------------------------------------------------
// Stage plumbing

namespace {

struct StageTimer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

void require_fresh_dir(const std::string& out_dir, bool overwrite) {
    if (!overwrite && fs::exists(fs::path(out_dir) / "manifest.json"))
        throw ArtifactError("output directory " + out_dir +
                            " already holds a run; pass --overwrite to replace it");
    fs::create_directories(out_dir);
}

RunManifest begin_manifest(const RunConfig& cfg, const std::string& command) {
    cfg.validate();
    RunManifest m;
    m.command = command;
    m.config_hash = cfg.config_hash();
    m.section_hashes = cfg.section_hashes();
    m.config_echo = cfg.to_json();
    m.started_unix = std::chrono::duration_cast<std::chrono::seconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    return m;
}

// Loads an upstream stage manifest and verifies that the config sections the
// consumer depends on are the ones the producer ran under. The upstream
// identity enters the consumer's inputs through its reproducibility key, so
// reruns of an identical chain stay bitwise comparable (wall clock excluded).
RunManifest check_upstream(const RunConfig& cfg, RunManifest& m, const std::string& dir,
                           const char* kind, std::initializer_list<const char*> sections) {
    RunManifest up = RunManifest::load((fs::path(dir) / "manifest.json").string());
    const auto mine = cfg.section_hashes();
    for (const char* s : sections) {
        auto it = up.section_hashes.find(s);
        if (it == up.section_hashes.end())
            throw ArtifactError(std::string(kind) + " manifest at " + dir +
                                " records no '" + s + "' config hash");
        if (it->second != mine.at(s))
            throw ArtifactError(std::string(kind) + " artifacts at " + dir +
                                " were produced under a different '" + s +
                                "' config: theirs " + hex64(it->second) + ", ours " +
                                hex64(mine.at(s)));
    }
    m.inputs[std::string(kind) + ":manifest"] = fnv1a64(up.reproducibility_key());
    return up;
}

std::string input_file(RunManifest& m, const std::string& dir, const char* kind,
                       const std::string& name) {
    std::string path = (fs::path(dir) / name).string();
    m.inputs[std::string(kind) + ":" + name] = fnv1a64_file(path);
    return path;
}

void output_file(RunManifest& m, const std::string& out_dir, const std::string& name) {
    m.outputs[name] = fnv1a64_file((fs::path(out_dir) / name).string());
}

void finish_manifest(RunManifest& m, const StageTimer& timer, const std::string& out_dir) {
    m.elapsed_seconds = timer.elapsed();
    m.save((fs::path(out_dir) / "manifest.json").string());
}

std::string path_in(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

} // namespace

// ---------------------------------------------------------------------------
// Commands

RunManifest cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, bool overwrite) {
    StageTimer timer;
    RunManifest m = begin_manifest(cfg, "gen-data");
    require_fresh_dir(out_dir, overwrite);

    SynthTask task(cfg.task);
    SynthTask::Splits splits = task.make_splits();
    check_disjoint_ids({&splits.distill, &splits.pool, &splits.val, &splits.test});

    save_cases_jsonl(path_in(out_dir, "cases_distill.jsonl"), splits.distill);
    save_cases_jsonl(path_in(out_dir, "cases_pool.jsonl"), splits.pool);
    save_cases_jsonl(path_in(out_dir, "cases_val.jsonl"), splits.val);
    save_cases_jsonl(path_in(out_dir, "cases_test.jsonl"), splits.test);
    task.vocab().save(path_in(out_dir, "vocab.json"));
    PhraseLexicon::for_task(task.vocab()).save(path_in(out_dir, "lexicon.txt"), task.vocab());

    for (const char* name : {"cases_distill.jsonl", "cases_pool.jsonl", "cases_val.jsonl",
                             "cases_test.jsonl", "vocab.json", "lexicon.txt"})
        output_file(m, out_dir, name);
    finish_manifest(m, timer, out_dir);
    return m;
}

RunManifest cmd_pretrain(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir, bool overwrite) {
    StageTimer timer;
    RunManifest m = begin_manifest(cfg, "pretrain");
    check_upstream(cfg, m, data_dir, "data", {"task"});
    require_fresh_dir(out_dir, overwrite);

    SynthTask task(cfg.task);
    PretrainResult res =
        pretrain(cfg.resolved_backbone(), task, cfg.pretrain, path_in(out_dir, "pretrain_log.jsonl"));

    // Gate: a teacher that gains nothing from demonstrations cannot teach.
    IclGap gap = icl_gap(res.backbone, task, cfg.eval.icl_gap_shots, cfg.eval.icl_gap_cases,
                         mix_seed(cfg.pretrain.seed, "icl-gap-eval"));
    if (cfg.eval.icl_gap_min > -1.0 && !(gap.rel_gap >= cfg.eval.icl_gap_min)) {
        std::ostringstream msg;
        msg << "pretrained backbone shows no usable demonstration gap: few-shot CE "
            << gap.ce_few_shot << " vs zero-shot CE " << gap.ce_zero_shot << " is a relative "
            << "improvement of " << gap.rel_gap << ", below the required " << cfg.eval.icl_gap_min;
        throw NumericError(msg.str());
    }

    res.backbone.save(path_in(out_dir, "backbone.bin"),
                      nlohmann::json{{"stage", "pretrain"}, {"final_loss", res.final_loss}});
    write_json_file(path_in(out_dir, "pretrain_metrics.json"),
                    nlohmann::json{{"final_loss", res.final_loss},
                                   {"steps", cfg.pretrain.steps},
                                   {"icl_gap",
                                    nlohmann::json{{"ce_zero_shot", gap.ce_zero_shot},
                                                   {"ce_few_shot", gap.ce_few_shot},
                                                   {"rel_gap", gap.rel_gap},
                                                   {"shots", cfg.eval.icl_gap_shots},
                                                   {"cases", cfg.eval.icl_gap_cases}}}});

    for (const char* name : {"backbone.bin", "pretrain_log.jsonl", "pretrain_metrics.json"})
        output_file(m, out_dir, name);
    finish_manifest(m, timer, out_dir);
    return m;
}

RunManifest cmd_cache_teacher(const RunConfig& cfg, const std::string& data_dir,
                              const std::string& backbone_dir, const std::string& out_dir,
                              bool overwrite) {
    StageTimer timer;
    RunManifest m = begin_manifest(cfg, "cache-teacher");
    check_upstream(cfg, m, data_dir, "data", {"task"});
    check_upstream(cfg, m, backbone_dir, "backbone", {"task", "backbone", "pretrain"});
    require_fresh_dir(out_dir, overwrite);

    SynthTask task(cfg.task);
    BackboneConfig expected = cfg.resolved_backbone();
    Backbone bb = Backbone::load(input_file(m, backbone_dir, "backbone", "backbone.bin"), &expected);
    std::vector<CaseRecord> cases =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_distill.jsonl"));
    std::vector<CaseRecord> val =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_val.jsonl"));
    cases.insert(cases.end(), val.begin(), val.end());
    std::vector<CaseRecord> pool =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_pool.jsonl"));

    CacheBuildReport report;
    TeacherCache cache =
        cache_teacher(bb, task, cases, pool, cfg.distill.top_k, cfg.distill.teacher_shots,
                      cfg.distill.temperature, cfg.distill.seed, &report);
    cache.save(path_in(out_dir, "teacher_cache.bin"));
    write_json_file(path_in(out_dir, "cache_report.json"),
                    nlohmann::json{{"cached", report.cached}, {"skipped_ids", report.skipped_ids}});

    for (const char* name : {"teacher_cache.bin", "cache_report.json"})
        output_file(m, out_dir, name);
    finish_manifest(m, timer, out_dir);
    return m;
}

RunManifest cmd_distill(const RunConfig& cfg, const std::string& data_dir,
                        const std::string& backbone_dir, const std::string& cache_dir,
                        const std::string& out_dir, bool overwrite) {
    StageTimer timer;
    RunManifest m = begin_manifest(cfg, "distill");
    check_upstream(cfg, m, data_dir, "data", {"task"});
    check_upstream(cfg, m, backbone_dir, "backbone", {"task", "backbone", "pretrain"});
    check_upstream(cfg, m, cache_dir, "cache", {"task", "backbone", "pretrain", "distill"});
    require_fresh_dir(out_dir, overwrite);

    SynthTask task(cfg.task);
    BackboneConfig expected = cfg.resolved_backbone();
    Backbone bb = Backbone::load(input_file(m, backbone_dir, "backbone", "backbone.bin"), &expected);
    TeacherCache cache = TeacherCache::load(input_file(m, cache_dir, "cache", "teacher_cache.bin"));
    std::vector<CaseRecord> train =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_distill.jsonl"));
    std::vector<CaseRecord> val =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_val.jsonl"));

    TrainResult res = train_adapters(cfg.distill, bb, cache, task, train, val,
                                     path_in(out_dir, "distill_log.jsonl"));
    save_adapters(res.adapters, path_in(out_dir, "adapters.bin"),
                  nlohmann::json{{"stage", "distill"}, {"val_final", res.val_final}});

    nlohmann::json epochs = nlohmann::json::array();
    for (const LossBreakdown& e : res.epochs)
        epochs.push_back(nlohmann::json{{"L", e.l},
                                        {"L_CE", e.l_ce},
                                        {"L_KL", e.l_kl},
                                        {"sum_w", e.sum_w},
                                        {"mass_template", e.mass_template},
                                        {"mass_path", e.mass_path},
                                        {"mass_eos", e.mass_eos}});
    write_json_file(path_in(out_dir, "distill_metrics.json"),
                    nlohmann::json{{"val_start", res.val_start},
                                   {"val_final", res.val_final},
                                   {"epochs", epochs}});

    for (const char* name : {"adapters.bin", "distill_log.jsonl", "distill_metrics.json"})
        output_file(m, out_dir, name);
    finish_manifest(m, timer, out_dir);
    return m;
}

namespace {

// Load-and-check helper shared by generate and evaluate (the only consumers
// of adapters). Demonstrations and teacher caches have no entry point here.
AdapterSet load_checked_adapters(RunManifest& m, const std::string& adapters_dir,
                                 const BackboneConfig& bc) {
    AdapterSet a = load_adapters(input_file(m, adapters_dir, "adapters", "adapters.bin"));
    if (a.d_model != bc.d_model || a.n_layers != bc.n_layers)
        throw ArtifactError("adapters at " + adapters_dir + " were trained for a d_model=" +
                            std::to_string(a.d_model) + "/layers=" + std::to_string(a.n_layers) +
                            " backbone, not d_model=" + std::to_string(bc.d_model) + "/layers=" +
                            std::to_string(bc.n_layers));
    return a;
}

} // namespace

RunManifest cmd_generate(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& backbone_dir, const std::string& adapters_dir,
                         const std::string& out_dir, bool overwrite) {
    StageTimer timer;
    RunManifest m = begin_manifest(cfg, "generate");
    check_upstream(cfg, m, data_dir, "data", {"task"});
    check_upstream(cfg, m, backbone_dir, "backbone", {"task", "backbone", "pretrain"});
    if (!adapters_dir.empty())
        check_upstream(cfg, m, adapters_dir, "adapters", {"task", "backbone", "pretrain", "distill"});
    require_fresh_dir(out_dir, overwrite);

    SynthTask task(cfg.task);
    BackboneConfig expected = cfg.resolved_backbone();
    Backbone bb = Backbone::load(input_file(m, backbone_dir, "backbone", "backbone.bin"), &expected);
    std::vector<CaseRecord> test =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_test.jsonl"));

    AdapterSet adapters;
    const AdapterSet* a = nullptr;
    if (!adapters_dir.empty()) {
        adapters = load_checked_adapters(m, adapters_dir, expected);
        a = &adapters;
    }

    DecodeConfig dec;
    dec.max_new_tokens = cfg.eval.max_new_tokens;
    dec.eos_id = Vocab::eos;
    dec.decay_rate = a != nullptr ? cfg.distill.decay_rate : 1.0;
    std::vector<GenRecord> gens = generate_reports(bb, a, task, test, dec);
    save_generations(path_in(out_dir, "generations.jsonl"), gens);

    output_file(m, out_dir, "generations.jsonl");
    finish_manifest(m, timer, out_dir);
    return m;
}

RunManifest cmd_evaluate(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& backbone_dir, const std::string& adapters_dir,
                         const std::string& gens_dir, const std::string& out_dir, bool overwrite) {
    StageTimer timer;
    RunManifest m = begin_manifest(cfg, "evaluate");
    check_upstream(cfg, m, data_dir, "data", {"task"});
    check_upstream(cfg, m, backbone_dir, "backbone", {"task", "backbone", "pretrain"});
    if (!adapters_dir.empty())
        check_upstream(cfg, m, adapters_dir, "adapters", {"task", "backbone", "pretrain", "distill"});
    RunManifest gens_manifest =
        check_upstream(cfg, m, gens_dir, "gens", {"task", "backbone", "pretrain", "eval"});

    // The generation set must match the adapter mode being evaluated.
    const bool gens_with_adapters = gens_manifest.inputs.count("adapters:adapters.bin") > 0;
    if (gens_with_adapters != !adapters_dir.empty())
        throw ArtifactError(std::string("generations at ") + gens_dir + " were produced " +
                            (gens_with_adapters ? "with" : "without") +
                            " adapters, but evaluate was invoked " +
                            (adapters_dir.empty() ? "without" : "with") + " them");
    require_fresh_dir(out_dir, overwrite);

    SynthTask task(cfg.task);
    const Vocab& vocab = task.vocab();
    BackboneConfig expected = cfg.resolved_backbone();
    Backbone bb = Backbone::load(input_file(m, backbone_dir, "backbone", "backbone.bin"), &expected);
    std::vector<CaseRecord> test =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_test.jsonl"));
    std::vector<GenRecord> gens =
        load_generations(input_file(m, gens_dir, "gens", "generations.jsonl"));
    PhraseLexicon lexicon =
        PhraseLexicon::load(input_file(m, data_dir, "data", "lexicon.txt"), vocab);
    Matcher matcher = Matcher::compile(lexicon, vocab.size);

    AdapterSet adapters;
    const AdapterSet* a = nullptr;
    if (!adapters_dir.empty()) {
        adapters = load_checked_adapters(m, adapters_dir, expected);
        a = &adapters;
    }

    const std::string config_id = a != nullptr ? "dive" : "zero-shot";
    MetricRow row = score_generations(config_id, gens, test, matcher,
                                      {vocab.neg_token(0), vocab.neg_token(1)},
                                      cfg.eval.length_threshold);
    EOSProfile prof =
        eos_profile(bb, a, task, test, cfg.eval.eos_window_neg, cfg.eval.eos_window_pos);

    save_metrics_csv(path_in(out_dir, "metrics.csv"), {row});
    save_eos_profile_csv(path_in(out_dir, "eos_profile.csv"), prof);
    write_json_file(
        path_in(out_dir, "eval_metrics.json"),
        nlohmann::json{{"config_id", row.config_id},
                       {"bleu1", row.bleu1},
                       {"bleu4", row.bleu4},
                       {"rouge_l", row.rouge},
                       {"finding",
                        nlohmann::json{{"precision", row.finding.precision},
                                       {"recall", row.finding.recall},
                                       {"f1", row.finding.f1},
                                       {"tp", row.finding.tp},
                                       {"fp", row.finding.fp},
                                       {"fn", row.finding.fn}}},
                       {"length",
                        nlohmann::json{{"mean_gen", row.len.mean_gen},
                                       {"mean_dlen", row.len.mean_dlen},
                                       {"mae_dlen", row.len.mae_dlen},
                                       {"under_pct", row.len.under_pct},
                                       {"over_pct", row.len.over_pct},
                                       {"proper_pct", row.len.proper_pct},
                                       {"threshold", row.len.threshold}}},
                       {"eos_profile",
                        nlohmann::json{{"w_neg", prof.w_neg},
                                       {"w_pos", prof.w_pos},
                                       {"mean_prob", prof.mean_prob},
                                       {"count", prof.count}}}});

    for (const char* name : {"metrics.csv", "eos_profile.csv", "eval_metrics.json"})
        output_file(m, out_dir, name);
    finish_manifest(m, timer, out_dir);
    return m;
}

RunManifest cmd_ablate(const RunConfig& cfg, const std::string& data_dir,
                       const std::string& backbone_dir, const std::string& cache_dir,
                       const std::string& out_dir, bool overwrite) {
    StageTimer timer;
    RunManifest m = begin_manifest(cfg, "ablate");
    check_upstream(cfg, m, data_dir, "data", {"task"});
    check_upstream(cfg, m, backbone_dir, "backbone", {"task", "backbone", "pretrain"});
    check_upstream(cfg, m, cache_dir, "cache", {"task", "backbone", "pretrain", "distill"});
    require_fresh_dir(out_dir, overwrite);

    SynthTask task(cfg.task);
    BackboneConfig expected = cfg.resolved_backbone();
    Backbone bb = Backbone::load(input_file(m, backbone_dir, "backbone", "backbone.bin"), &expected);
    TeacherCache cache = TeacherCache::load(input_file(m, cache_dir, "cache", "teacher_cache.bin"));
    std::vector<CaseRecord> train =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_distill.jsonl"));
    std::vector<CaseRecord> val =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_val.jsonl"));
    std::vector<CaseRecord> test =
        load_cases_jsonl(input_file(m, data_dir, "data", "cases_test.jsonl"));

    std::vector<AblationRowSpec> rows = standard_ablation_rows(cfg.distill);
    DecodeConfig dec;
    dec.max_new_tokens = cfg.eval.max_new_tokens;
    dec.eos_id = Vocab::eos;
    AblationOutput out = ablation_suite(bb, cache, task, train, val, test, rows, dec,
                                        cfg.eval.eos_window_neg, cfg.eval.eos_window_pos);

    save_metrics_csv(path_in(out_dir, "metrics.csv"), out.metrics);
    output_file(m, out_dir, "metrics.csv");
    for (size_t i = 0; i < rows.size(); ++i) {
        std::string gname = "generations_" + rows[i].id + ".jsonl";
        std::string pname = "eos_profile_" + rows[i].id + ".csv";
        save_generations(path_in(out_dir, gname), out.generations[i]);
        save_eos_profile_csv(path_in(out_dir, pname), out.profiles[i]);
        output_file(m, out_dir, gname);
        output_file(m, out_dir, pname);
    }
    finish_manifest(m, timer, out_dir);
    return m;
}

// ---------------------------------------------------------------------------
// Command line

namespace {

const char* USAGE = R"(usage: icsteer <command> --config FILE [options]

commands:
  gen-data       write the dataset splits, vocabulary, and phrase lexicon
  pretrain       train the frozen backbone on streamed task samples
  cache-teacher  record top-K teacher logits for the distill and val cases
  distill        train steering adapters against the cached teacher
  generate       decode reports from query-only prompts (no demos, no cache)
  evaluate       score a generation set and profile EOS calibration
  ablate         run the standard ablation grid and write its report

options:
  --config FILE  run configuration (JSON; omitted sections take defaults)
  --out DIR      output directory (default: <out_dir>/<stage>)
  --seed N       re-key the task/pretrain/distill seeds from one master seed
  --overwrite    replace existing outputs
  --threads N    cap the number of OpenMP threads
  --data DIR     dataset directory        (default: <out_dir>/data)
  --backbone DIR pretrained backbone dir  (default: <out_dir>/backbone)
  --cache DIR    teacher cache dir        (default: <out_dir>/cache)
  --adapters DIR trained adapters dir     (default: <out_dir>/adapters)
  --gens DIR     generations dir          (default: <out_dir>/gens)
  --zero-shot    generate/evaluate with the bare backbone (no adapters)

exit codes: 0 success, 2 config error, 3 artifact mismatch, 4 numeric failure
)";

struct CliArgs {
    std::string command;
    std::string config_path;
    std::string out, data, backbone, cache, adapters, gens;
    bool overwrite = false;
    bool zero_shot = false;
    bool seed_set = false;
    uint64_t seed = 0;
    int threads = 0;
};

CliArgs parse_args(int argc, const char* const* argv) {
    CliArgs a;
    a.command = argv[1];
    int i = 2;
    auto value = [&](const char* flag) -> std::string {
        if (i + 1 >= argc) throw ConfigError(std::string(flag) + " expects a value");
        return argv[++i];
    };
    for (; i < argc; ++i) {
        std::string f = argv[i];
        if (f == "--config") a.config_path = value("--config");
        else if (f == "--out") a.out = value("--out");
        else if (f == "--data") a.data = value("--data");
        else if (f == "--backbone") a.backbone = value("--backbone");
        else if (f == "--cache") a.cache = value("--cache");
        else if (f == "--adapters") a.adapters = value("--adapters");
        else if (f == "--gens") a.gens = value("--gens");
        else if (f == "--overwrite") a.overwrite = true;
        else if (f == "--zero-shot") a.zero_shot = true;
        else if (f == "--seed") {
            try {
                a.seed = std::stoull(value("--seed"));
            } catch (const std::exception&) {
                throw ConfigError("--seed expects an unsigned integer");
            }
            a.seed_set = true;
        } else if (f == "--threads") {
            try {
                a.threads = std::stoi(value("--threads"));
            } catch (const std::exception&) {
                throw ConfigError("--threads expects a positive integer");
            }
            if (a.threads < 1) throw ConfigError("--threads expects a positive integer");
        } else {
            throw ConfigError("unknown flag '" + f + "'");
        }
    }
    return a;
}

int dispatch(const CliArgs& args) {
    if (args.config_path.empty()) throw ConfigError("--config FILE is required");
    RunConfig cfg = RunConfig::load(args.config_path);
    if (args.seed_set) {
        cfg.task.seed = mix_seed(args.seed, "task");
        cfg.pretrain.seed = mix_seed(args.seed, "pretrain");
        cfg.distill.seed = mix_seed(args.seed, "distill");
    }
    if (args.threads > 0) omp_set_num_threads(args.threads);

    const std::string root = cfg.out_dir;
    auto dir_or = [](const std::string& given, const std::string& fallback) {
        return given.empty() ? fallback : given;
    };
    const std::string data = dir_or(args.data, root + "/data");
    const std::string backbone = dir_or(args.backbone, root + "/backbone");
    const std::string cache = dir_or(args.cache, root + "/cache");
    const std::string adapters =
        args.zero_shot ? std::string() : dir_or(args.adapters, root + "/adapters");
    const std::string gens = dir_or(args.gens, root + "/gens");

    std::string out;
    if (args.command == "gen-data") {
        out = dir_or(args.out, data);
        cmd_gen_data(cfg, out, args.overwrite);
    } else if (args.command == "pretrain") {
        out = dir_or(args.out, backbone);
        cmd_pretrain(cfg, data, out, args.overwrite);
    } else if (args.command == "cache-teacher") {
        out = dir_or(args.out, cache);
        cmd_cache_teacher(cfg, data, backbone, out, args.overwrite);
    } else if (args.command == "distill") {
        out = dir_or(args.out, root + "/adapters");
        cmd_distill(cfg, data, backbone, cache, out, args.overwrite);
    } else if (args.command == "generate") {
        out = dir_or(args.out, gens);
        cmd_generate(cfg, data, backbone, adapters, out, args.overwrite);
    } else if (args.command == "evaluate") {
        out = dir_or(args.out, root + "/eval");
        cmd_evaluate(cfg, data, backbone, adapters, gens, out, args.overwrite);
    } else if (args.command == "ablate") {
        out = dir_or(args.out, root + "/ablate");
        cmd_ablate(cfg, data, backbone, cache, out, args.overwrite);
    } else {
        throw ConfigError("unknown command '" + args.command + "'");
    }
    std::cout << args.command << ": wrote " << out << "\n";
    return 0;
}

} // namespace

int cli_main(int argc, const char* const* argv) {
    if (argc < 2) {
        std::cerr << USAGE;
        return 2;
    }
    std::string first = argv[1];
    if (first == "help" || first == "--help" || first == "-h") {
        std::cout << USAGE;
        return 0;
    }
    try {
        return dispatch(parse_args(argc, argv));
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ArtifactError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace icsteer
