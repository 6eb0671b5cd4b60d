// Pipeline and command-line tests. Config parsing is pinned by hand-written
// JSON (defaults, unknown keys, wrong types, field-naming errors); manifests
// by save/load round-trips and reproducibility-key invariants; the stage
// commands by a full micro-scale chain whose artifacts, hashes, refusal
// paths, and byte-level rerun reproducibility are all checked directly.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "icsteer/errors.hpp"
#include "icsteer/evalkit.hpp"
#include "icsteer/hash.hpp"
#include "icsteer/pipeline.hpp"

using namespace icsteer;
namespace fs = std::filesystem;

namespace {

// Self-cleaning unique temp directory.
struct TmpDir {
    fs::path path;
    explicit TmpDir(const std::string& tag) {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("icsteer_pipe_" + tag + "_" + std::to_string(++counter));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TmpDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

std::string file_bytes(const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE_MESSAGE(f.good(), "missing file: " << p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Micro-scale run: a couple of seconds for the full chain.
RunConfig micro_cfg() {
    RunConfig cfg;
    cfg.task.n_labels = 6;
    cfg.task.n_distill = 8;
    cfg.task.n_pool = 10;
    cfg.task.n_val = 4;
    cfg.task.n_test = 4;
    cfg.task.seed = 77;
    cfg.backbone.vocab_size = 0; // derive from the task
    cfg.backbone.d_model = 32;
    cfg.backbone.n_layers = 2;
    cfg.backbone.n_heads = 2;
    cfg.backbone.d_ff = 64;
    cfg.backbone.max_context = 512;
    cfg.backbone.init_seed = 11;
    cfg.pretrain.steps = 20;
    cfg.pretrain.batch_size = 4;
    cfg.pretrain.k_max = 2;
    cfg.pretrain.seed = 7;
    cfg.distill.top_k = 8;
    cfg.distill.teacher_shots = 3;
    cfg.distill.lr = 3e-3;
    cfg.distill.epochs = 1;
    cfg.distill.batch_size = 4;
    cfg.distill.rank = 4;
    cfg.distill.seed = 5;
    cfg.eval.max_new_tokens = 60;
    cfg.eval.icl_gap_min = -1.0; // a 20-step backbone has no usable gap
    cfg.eval.icl_gap_shots = 2;
    cfg.eval.icl_gap_cases = 8;
    return cfg;
}

struct ChainDirs {
    std::string data, backbone, cache, adapters, gens, eval;
};

// gen-data -> pretrain -> cache-teacher -> distill -> generate -> evaluate.
ChainDirs run_chain(const RunConfig& cfg, const TmpDir& root) {
    ChainDirs d{root.sub("data"), root.sub("backbone"), root.sub("cache"),
                root.sub("adapters"), root.sub("gens"), root.sub("eval")};
    cmd_gen_data(cfg, d.data, false);
    cmd_pretrain(cfg, d.data, d.backbone, false);
    cmd_cache_teacher(cfg, d.data, d.backbone, d.cache, false);
    cmd_distill(cfg, d.data, d.backbone, d.cache, d.adapters, false);
    cmd_generate(cfg, d.data, d.backbone, d.adapters, d.gens, false);
    cmd_evaluate(cfg, d.data, d.backbone, d.adapters, d.gens, d.eval, false);
    return d;
}

template <typename Err, typename Fn>
std::string message_of(Fn&& fn) {
    try {
        fn();
    } catch (const Err& e) {
        return e.what();
    } catch (const std::exception& e) {
        FAIL("wrong exception type: " << e.what());
    }
    FAIL("expected an exception");
    return {};
}

int run_cli(std::initializer_list<const char*> args) {
    std::vector<const char*> argv = {"icsteer"};
    argv.insert(argv.end(), args.begin(), args.end());
    return cli_main(int(argv.size()), argv.data());
}

} // namespace

TEST_CASE("eval config defaults, round-trip, and rejection") {
    EvalConfig def;
    CHECK(EvalConfig::from_json(nlohmann::json::object()) == def);
    CHECK(EvalConfig::from_json(def.to_json()) == def);

    EvalConfig c;
    c.max_new_tokens = 33;
    c.eos_window_neg = 4;
    c.eos_window_pos = 2;
    c.length_threshold = 3;
    c.icl_gap_min = -1.0;
    c.icl_gap_shots = 2;
    c.icl_gap_cases = 5;
    CHECK(EvalConfig::from_json(c.to_json()) == c);

    // Partial objects keep defaults for the rest.
    EvalConfig partial = EvalConfig::from_json(nlohmann::json{{"max_new_tokens", 12}});
    CHECK(partial.max_new_tokens == 12);
    CHECK(partial.eos_window_neg == def.eos_window_neg);
    CHECK(partial.icl_gap_min == def.icl_gap_min);

    std::string msg = message_of<ConfigError>(
        [] { EvalConfig::from_json(nlohmann::json{{"max_new_tokns", 12}}); });
    CHECK(msg.find("unknown field 'max_new_tokns'") != std::string::npos);

    msg = message_of<ConfigError>(
        [] { EvalConfig::from_json(nlohmann::json{{"max_new_tokens", "many"}}); });
    CHECK(msg.find("max_new_tokens") != std::string::npos);
    CHECK(msg.find("integer") != std::string::npos);

    CHECK_THROWS_AS(EvalConfig::from_json(nlohmann::json::array()), ConfigError);
    CHECK_THROWS_AS(EvalConfig::from_json(nlohmann::json{{"max_new_tokens", 0}}), ConfigError);
    CHECK_THROWS_AS(EvalConfig::from_json(nlohmann::json{{"eos_window_neg", -1}}), ConfigError);
    CHECK_THROWS_AS(EvalConfig::from_json(nlohmann::json{{"icl_gap_min", 1.5}}), ConfigError);
    CHECK_THROWS_AS(EvalConfig::from_json(nlohmann::json{{"icl_gap_shots", 0}}), ConfigError);
    CHECK_THROWS_AS(EvalConfig::from_json(nlohmann::json{{"icl_gap_cases", 0}}), ConfigError);
}

TEST_CASE("run config defaults, hashing, and file io") {
    // An empty object is a fully defaulted run.
    RunConfig def = RunConfig::from_json(nlohmann::json::object());
    CHECK(def == RunConfig{});
    CHECK(def.out_dir == "runs/desk");

    RunConfig cfg = micro_cfg();
    CHECK(RunConfig::from_json(cfg.to_json()) == cfg);

    // out_dir does not participate in the config hash; every section does.
    RunConfig moved = cfg;
    moved.out_dir = "elsewhere";
    CHECK(moved.config_hash() == cfg.config_hash());
    RunConfig tweaked = cfg;
    tweaked.distill.lr *= 2;
    CHECK(tweaked.config_hash() != cfg.config_hash());
    auto h0 = cfg.section_hashes();
    auto h1 = tweaked.section_hashes();
    CHECK(h0.at("task") == h1.at("task"));
    CHECK(h0.at("backbone") == h1.at("backbone"));
    CHECK(h0.at("pretrain") == h1.at("pretrain"));
    CHECK(h0.at("eval") == h1.at("eval"));
    CHECK(h0.at("distill") != h1.at("distill"));

    std::string msg = message_of<ConfigError>(
        [] { RunConfig::from_json(nlohmann::json{{"distil", nlohmann::json::object()}}); });
    CHECK(msg.find("unknown section 'distil'") != std::string::npos);
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"out_dir", 3}}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"out_dir", ""}}), ConfigError);

    // Malformed nested fields name the field.
    msg = message_of<ConfigError>([] {
        RunConfig::from_json(nlohmann::json{{"task", nlohmann::json{{"n_labels", "six"}}}});
    });
    CHECK(msg.find("n_labels") != std::string::npos);

    TmpDir tmp("cfg");
    std::string path = tmp.sub("run.json");
    cfg.save(path);
    CHECK(RunConfig::load(path) == cfg);

    // Comments are tolerated in config files.
    {
        std::ofstream f(tmp.sub("commented.json"));
        f << "{\n  // nothing set: all defaults\n}\n";
    }
    CHECK(RunConfig::load(tmp.sub("commented.json")) == RunConfig{});

    {
        std::ofstream f(tmp.sub("broken.json"));
        f << "{ nope";
    }
    msg = message_of<ConfigError>([&] { RunConfig::load(tmp.sub("broken.json")); });
    CHECK(msg.find("broken.json") != std::string::npos);
    CHECK(msg.find("not valid JSON") != std::string::npos);
    CHECK_THROWS_AS(RunConfig::load(tmp.sub("absent.json")), ConfigError);
}

TEST_CASE("resolved backbone vocabulary") {
    RunConfig cfg = micro_cfg();
    const int task_vocab = Vocab::build(cfg.task.n_labels).size;
    CHECK(cfg.resolved_backbone().vocab_size == task_vocab);

    cfg.backbone.vocab_size = task_vocab; // exact match is accepted
    CHECK(cfg.resolved_backbone().vocab_size == task_vocab);

    cfg.backbone.vocab_size = task_vocab + 1;
    std::string msg = message_of<ConfigError>([&] { cfg.resolved_backbone(); });
    CHECK(msg.find(std::to_string(task_vocab + 1)) != std::string::npos);
    CHECK(msg.find(std::to_string(task_vocab)) != std::string::npos);
}

TEST_CASE("run manifest io and reproducibility key") {
    RunManifest m;
    m.command = "distill";
    m.config_hash = 0xabcdef0123456789ull;
    m.section_hashes = {{"task", 1}, {"distill", 2}};
    m.config_echo = nlohmann::json{{"x", 1}};
    m.inputs = {{"data:cases_distill.jsonl", 42}, {"backbone:backbone.bin", 7}};
    m.outputs = {{"adapters.bin", 99}};
    m.started_unix = 1700000000;
    m.elapsed_seconds = 1.25;

    TmpDir tmp("manifest");
    m.save(tmp.sub("manifest.json"));
    RunManifest r = RunManifest::load(tmp.sub("manifest.json"));
    CHECK(r.command == m.command);
    CHECK(r.tool_version == std::string(TOOL_VERSION));
    CHECK(r.config_hash == m.config_hash);
    CHECK(r.section_hashes == m.section_hashes);
    CHECK(r.config_echo == m.config_echo);
    CHECK(r.inputs == m.inputs);
    CHECK(r.outputs == m.outputs);
    CHECK(r.started_unix == m.started_unix);
    CHECK(r.elapsed_seconds == doctest::Approx(m.elapsed_seconds));

    // The key ignores outputs and wall clock, but tracks inputs.
    RunManifest later = m;
    later.outputs["adapters.bin"] = 123;
    later.started_unix += 3600;
    later.elapsed_seconds *= 10;
    CHECK(later.reproducibility_key() == m.reproducibility_key());
    RunManifest other = m;
    other.inputs["backbone:backbone.bin"] = 8;
    CHECK(other.reproducibility_key() != m.reproducibility_key());

    std::string msg = message_of<ArtifactError>(
        [] { RunManifest::from_json(nlohmann::json{{"command", "x"}}); });
    CHECK(msg.find("missing field") != std::string::npos);
    CHECK_THROWS_AS(RunManifest::load(tmp.sub("absent.json")), ArtifactError);
}

TEST_CASE("pipeline chain end-to-end with manifest checks") {
    RunConfig cfg = micro_cfg();
    TmpDir root("chain");
    ChainDirs d = run_chain(cfg, root);

    // Every stage leaves its declared artifacts plus a manifest.
    for (const char* name : {"cases_distill.jsonl", "cases_pool.jsonl", "cases_val.jsonl",
                             "cases_test.jsonl", "vocab.json", "lexicon.txt", "manifest.json"})
        CHECK(fs::exists(fs::path(d.data) / name));
    for (const char* name : {"backbone.bin", "pretrain_log.jsonl", "pretrain_metrics.json"})
        CHECK(fs::exists(fs::path(d.backbone) / name));
    for (const char* name : {"teacher_cache.bin", "cache_report.json"})
        CHECK(fs::exists(fs::path(d.cache) / name));
    for (const char* name : {"adapters.bin", "distill_log.jsonl", "distill_metrics.json"})
        CHECK(fs::exists(fs::path(d.adapters) / name));
    CHECK(fs::exists(fs::path(d.gens) / "generations.jsonl"));
    for (const char* name : {"metrics.csv", "eos_profile.csv", "eval_metrics.json"})
        CHECK(fs::exists(fs::path(d.eval) / name));

    // Manifests carry the echoed config, stage-scoped hashes, and true
    // content hashes of inputs and outputs.
    RunManifest data_m = RunManifest::load(d.data + "/manifest.json");
    CHECK(data_m.command == "gen-data");
    CHECK(data_m.inputs.empty());
    CHECK(data_m.outputs.size() == 6);
    CHECK(data_m.config_hash == cfg.config_hash());
    CHECK(data_m.section_hashes == cfg.section_hashes());
    CHECK(RunConfig::from_json(data_m.config_echo) == cfg);
    CHECK(data_m.outputs.at("vocab.json") == fnv1a64_file(d.data + "/vocab.json"));

    RunManifest bb_m = RunManifest::load(d.backbone + "/manifest.json");
    CHECK(bb_m.inputs.count("data:manifest") == 1);
    CHECK(bb_m.inputs.at("data:manifest") == fnv1a64(data_m.reproducibility_key()));
    CHECK(bb_m.outputs.size() == 3);

    RunManifest ad_m = RunManifest::load(d.adapters + "/manifest.json");
    CHECK(ad_m.inputs.at("backbone:backbone.bin") == fnv1a64_file(d.backbone + "/backbone.bin"));
    CHECK(ad_m.inputs.count("cache:teacher_cache.bin") == 1);

    RunManifest gens_m = RunManifest::load(d.gens + "/manifest.json");
    CHECK(gens_m.inputs.count("adapters:adapters.bin") == 1);

    // The pretrain metrics record the measured demonstration gap.
    nlohmann::json pm;
    {
        std::ifstream f(d.backbone + "/pretrain_metrics.json");
        f >> pm;
    }
    CHECK(pm.contains("icl_gap"));
    CHECK(pm["icl_gap"].contains("rel_gap"));

    // Refusal: an existing manifest blocks a rerun unless overwrite is set.
    std::string msg =
        message_of<ArtifactError>([&] { cmd_gen_data(cfg, d.data, false); });
    CHECK(msg.find("--overwrite") != std::string::npos);
    cmd_gen_data(cfg, d.data, true); // replace in place

    // Refusal: config drift against recorded upstream sections, with both
    // hashes in the message.
    RunConfig drifted = cfg;
    drifted.task.seed = 78;
    msg = message_of<ArtifactError>(
        [&] { cmd_pretrain(drifted, d.data, root.sub("bb2"), false); });
    CHECK(msg.find("'task'") != std::string::npos);
    CHECK(msg.find(hex64(cfg.section_hashes().at("task"))) != std::string::npos);
    CHECK(msg.find(hex64(drifted.section_hashes().at("task"))) != std::string::npos);
    CHECK(!fs::exists(root.path / "bb2")); // refused before creating anything

    // Refusal: a missing upstream manifest.
    CHECK_THROWS_AS(cmd_pretrain(cfg, root.sub("nowhere"), root.sub("bb3"), false),
                    ArtifactError);

    // Zero-shot generation through the command equals the bare backbone's
    // decoded output, and evaluating it cross-checks the adapter mode.
    cmd_generate(cfg, d.data, d.backbone, "", root.sub("gens0"), false);
    RunManifest g0_m = RunManifest::load(root.sub("gens0") + "/manifest.json");
    CHECK(g0_m.inputs.count("adapters:adapters.bin") == 0);
    {
        Backbone bb = Backbone::load(d.backbone + "/backbone.bin");
        SynthTask task(cfg.task);
        DecodeConfig dec;
        dec.max_new_tokens = cfg.eval.max_new_tokens;
        dec.eos_id = Vocab::eos;
        std::vector<GenRecord> direct = generate_reports(
            bb, nullptr, task, load_cases_jsonl(d.data + "/cases_test.jsonl"), dec);
        std::vector<GenRecord> via_cmd = load_generations(root.sub("gens0") + "/generations.jsonl");
        REQUIRE(via_cmd.size() == direct.size());
        for (size_t i = 0; i < direct.size(); ++i) {
            CHECK(via_cmd[i].case_id == direct[i].case_id);
            CHECK(via_cmd[i].tokens == direct[i].tokens);
            CHECK(via_cmd[i].stopped_eos == direct[i].stopped_eos);
        }
    }
    msg = message_of<ArtifactError>([&] {
        cmd_evaluate(cfg, d.data, d.backbone, d.adapters, root.sub("gens0"), root.sub("evalX"),
                     false);
    });
    CHECK(msg.find("without adapters") != std::string::npos);
    cmd_evaluate(cfg, d.data, d.backbone, "", root.sub("gens0"), root.sub("eval0"), false);

    // The two evaluations label their rows by adapter mode.
    std::string with_adapters = file_bytes(d.eval + "/metrics.csv");
    std::string zero_shot = file_bytes(root.sub("eval0") + "/metrics.csv");
    CHECK(with_adapters.find("\ndive,") != std::string::npos);
    CHECK(zero_shot.find("\nzero-shot,") != std::string::npos);
}

TEST_CASE("ablate command writes the full grid") {
    RunConfig cfg = micro_cfg();
    TmpDir root("ablate");
    std::string data = root.sub("data"), backbone = root.sub("backbone"),
                cache = root.sub("cache"), ab = root.sub("ablate");
    cmd_gen_data(cfg, data, false);
    cmd_pretrain(cfg, data, backbone, false);
    cmd_cache_teacher(cfg, data, backbone, cache, false);
    cmd_ablate(cfg, data, backbone, cache, ab, false);

    std::vector<AblationRowSpec> rows = standard_ablation_rows(cfg.distill);
    RunManifest m = RunManifest::load(ab + "/manifest.json");
    CHECK(m.outputs.size() == 1 + 2 * rows.size());
    std::string csv = file_bytes(ab + "/metrics.csv");
    size_t lines = 0;
    for (char ch : csv)
        if (ch == '\n') ++lines;
    CHECK(lines == rows.size() + 1); // header + one row each
    for (const AblationRowSpec& row : rows) {
        CHECK(fs::exists(fs::path(ab) / ("generations_" + row.id + ".jsonl")));
        CHECK(fs::exists(fs::path(ab) / ("eos_profile_" + row.id + ".csv")));
        CHECK(csv.find("\n" + row.id + ",") != std::string::npos);
    }
}

TEST_CASE("pipeline rerun is byte-identical") {
    RunConfig cfg = micro_cfg();
    TmpDir a("repro_a"), b("repro_b");
    ChainDirs da = run_chain(cfg, a);
    ChainDirs db = run_chain(cfg, b);

    auto same = [&](const std::string& dir_a, const std::string& dir_b, const char* name) {
        CHECK_MESSAGE(file_bytes(dir_a + "/" + name) == file_bytes(dir_b + "/" + name),
                      "differs: " << name);
    };
    for (const char* name : {"cases_distill.jsonl", "cases_pool.jsonl", "cases_val.jsonl",
                             "cases_test.jsonl", "vocab.json", "lexicon.txt"})
        same(da.data, db.data, name);
    for (const char* name : {"backbone.bin", "pretrain_log.jsonl", "pretrain_metrics.json"})
        same(da.backbone, db.backbone, name);
    for (const char* name : {"teacher_cache.bin", "cache_report.json"})
        same(da.cache, db.cache, name);
    for (const char* name : {"adapters.bin", "distill_log.jsonl", "distill_metrics.json"})
        same(da.adapters, db.adapters, name);
    same(da.gens, db.gens, "generations.jsonl");
    for (const char* name : {"metrics.csv", "eos_profile.csv", "eval_metrics.json"})
        same(da.eval, db.eval, name);

    // Equal reproducibility keys and equal output hashes, stage by stage.
    for (const char* stage : {"data", "backbone", "cache", "adapters", "gens", "eval"}) {
        RunManifest ma = RunManifest::load(a.sub(stage) + "/manifest.json");
        RunManifest mb = RunManifest::load(b.sub(stage) + "/manifest.json");
        CHECK(ma.reproducibility_key() == mb.reproducibility_key());
        CHECK(ma.outputs == mb.outputs);
    }
}

TEST_CASE("cli exit codes, defaults, and seed override") {
    RunConfig cfg = micro_cfg();
    TmpDir root("cli");
    cfg.out_dir = root.sub("run");
    std::string cfg_path = root.sub("run.json");
    cfg.save(cfg_path);

    CHECK(run_cli({"help"}) == 0);
    CHECK(cli_main(1, std::vector<const char*>{"icsteer"}.data()) == 2);
    CHECK(run_cli({"frobnicate", "--config", cfg_path.c_str()}) == 2); // unknown command
    CHECK(run_cli({"gen-data"}) == 2);                                 // --config required
    CHECK(run_cli({"gen-data", "--config", cfg_path.c_str(), "--frob"}) == 2);
    CHECK(run_cli({"gen-data", "--config"}) == 2);                     // dangling value
    CHECK(run_cli({"gen-data", "--config", cfg_path.c_str(), "--threads", "zero"}) == 2);
    CHECK(run_cli({"gen-data", "--config", root.sub("absent.json").c_str()}) == 2);

    // Stage directories default to <out_dir>/<stage>.
    CHECK(run_cli({"gen-data", "--config", cfg_path.c_str()}) == 0);
    CHECK(fs::exists(root.path / "run" / "data" / "manifest.json"));
    CHECK(run_cli({"gen-data", "--config", cfg_path.c_str()}) == 3); // refuses rerun
    CHECK(run_cli({"gen-data", "--config", cfg_path.c_str(), "--overwrite"}) == 0);
    CHECK(run_cli({"pretrain", "--config", cfg_path.c_str(), "--threads", "2"}) == 0);
    CHECK(run_cli({"cache-teacher", "--config", cfg_path.c_str()}) == 0);
    CHECK(run_cli({"distill", "--config", cfg_path.c_str()}) == 0);
    CHECK(run_cli({"generate", "--config", cfg_path.c_str()}) == 0);
    CHECK(run_cli({"evaluate", "--config", cfg_path.c_str()}) == 0);
    for (const char* stage : {"backbone", "cache", "adapters", "gens", "eval"})
        CHECK(fs::exists(root.path / "run" / stage / "manifest.json"));

    // Zero-shot decode against the same chain, into explicit directories.
    std::string gens0 = root.sub("gens0"), eval0 = root.sub("eval0");
    CHECK(run_cli({"generate", "--config", cfg_path.c_str(), "--zero-shot", "--out",
                   gens0.c_str()}) == 0);
    CHECK(run_cli({"evaluate", "--config", cfg_path.c_str(), "--zero-shot", "--gens",
                   gens0.c_str(), "--out", eval0.c_str()}) == 0);
    // Mode mismatch between the generation set and the evaluation: refused.
    CHECK(run_cli({"evaluate", "--config", cfg_path.c_str(), "--gens", gens0.c_str(), "--out",
                   root.sub("evalX").c_str()}) == 3);

    // A master seed re-keys every stage seed in the echoed config.
    std::string seeded = root.sub("seeded");
    CHECK(run_cli({"gen-data", "--config", cfg_path.c_str(), "--seed", "99", "--out",
                   seeded.c_str()}) == 0);
    RunManifest sm = RunManifest::load(seeded + "/manifest.json");
    CHECK(sm.config_echo.at("task").at("seed").get<uint64_t>() == mix_seed(99, "task"));
    CHECK(sm.config_echo.at("pretrain").at("seed").get<uint64_t>() == mix_seed(99, "pretrain"));
    CHECK(sm.config_echo.at("distill").at("seed").get<uint64_t>() == mix_seed(99, "distill"));
    CHECK(run_cli({"gen-data", "--config", cfg_path.c_str(), "--seed", "nine"}) == 2);

    // The demonstration-gap gate maps to the numeric-failure exit code: a
    // 20-step backbone cannot clear a 99% relative-improvement bar.
    RunConfig gated = cfg;
    gated.eval.icl_gap_min = 0.99;
    std::string gated_path = root.sub("gated.json");
    gated.save(gated_path);
    CHECK(run_cli({"pretrain", "--config", gated_path.c_str(), "--out", root.sub("bb_gated").c_str()}) == 4);
}
