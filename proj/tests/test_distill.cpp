// Distillation tests. The teacher cache is checked against an independent
// recomputation (prompt rebuild + full forward + separate sort), the
// restricted teacher distribution against hand softmax, the composite loss
// against its exact alpha-blend identity and endpoint behavior, the adapter
// gradients of the full objective against central finite differences, and
// short training runs for determinism, a frozen backbone, and validation
// improvement. Supervision-mass decompositions are pinned on a handcrafted
// report.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "icsteer/backbone.hpp"
#include "icsteer/distill.hpp"
#include "icsteer/errors.hpp"
#include "icsteer/hash.hpp"
#include "icsteer/lexicon.hpp"
#include "icsteer/rng.hpp"
#include "icsteer/synthtask.hpp"
#include "icsteer/tape.hpp"

using namespace icsteer;

namespace {

TaskConfig tiny_task_cfg() {
    TaskConfig t;
    t.n_distill = 10;
    t.n_pool = 12;
    t.n_val = 4;
    t.n_test = 4;
    t.seed = 77;
    return t;
}

BackboneConfig tiny_bcfg(int vocab) {
    BackboneConfig c;
    c.vocab_size = vocab;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_context = 512;
    c.init_seed = 11;
    return c;
}

std::filesystem::path tmp_file(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "icsteer_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(bool(f));
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

uint64_t backbone_param_hash(const Backbone& b) {
    uint64_t h = FNV_OFFSET;
    b.for_each_param([&](const std::string&, const Matrix& m) {
        h = fnv1a64(m.data.data(), m.data.size() * sizeof(double), h);
    });
    return h;
}

// Independent check value: plain softmax of the cached float logits.
std::vector<double> hand_softmax(const std::vector<float>& logits, double tau) {
    double mx = -1e300;
    for (float l : logits) mx = std::max(mx, double(l) / tau);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(double(logits[i]) / tau - mx);
        sum += p[i];
    }
    for (double& x : p) x /= sum;
    return p;
}

} // namespace

TEST_CASE("dataset fingerprint is sensitive to order and content") {
    SynthTask task(tiny_task_cfg());
    auto splits = task.make_splits();
    uint64_t h = dataset_fingerprint(splits.distill);
    CHECK(h == dataset_fingerprint(splits.distill)); // deterministic

    auto reversed = splits.distill;
    std::reverse(reversed.begin(), reversed.end());
    CHECK(h != dataset_fingerprint(reversed));

    auto mutated = splits.distill;
    mutated[0].report[0] ^= 1;
    CHECK(h != dataset_fingerprint(mutated));

    auto relabeled = splits.distill;
    relabeled[0].id += 1000;
    CHECK(h != dataset_fingerprint(relabeled));

    CHECK(h != dataset_fingerprint(splits.val));
}

TEST_CASE("distill config validates and round-trips through json") {
    DistillConfig c;
    c.validate();
    CHECK(DistillConfig::from_json(c.to_json()) == c);

    c.alpha = 0.25;
    c.mode = AdapterMode::Static;
    c.top_k = 9;
    c.seed = 99;
    CHECK(DistillConfig::from_json(c.to_json()) == c);

    auto reject = [](void (*tweak)(DistillConfig&)) {
        DistillConfig bad;
        tweak(bad);
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    };
    reject([](DistillConfig& d) { d.alpha = -0.1; });
    reject([](DistillConfig& d) { d.alpha = 1.1; });
    reject([](DistillConfig& d) { d.temperature = 0.0; });
    reject([](DistillConfig& d) { d.top_k = 0; });
    reject([](DistillConfig& d) { d.lr = 0.0; });
    reject([](DistillConfig& d) { d.epochs = 0; });
    reject([](DistillConfig& d) { d.batch_size = 0; });
    reject([](DistillConfig& d) { d.rho = 1.0; }); // clip ratio must exceed 1
    reject([](DistillConfig& d) { d.rank = 0; });  // dynamic mode needs a bottleneck
    reject([](DistillConfig& d) { d.decay_rate = 0.0; });
    reject([](DistillConfig& d) { d.decay_rate = 1.5; });
    reject([](DistillConfig& d) { d.profile.path_weight = -1.0; });
    reject([](DistillConfig& d) { d.teacher_shots = -1; });

    DistillConfig stat;
    stat.mode = AdapterMode::Static;
    stat.rank = 0; // rank is unused without a bottleneck
    stat.validate();

    CHECK_THROWS_WITH_AS(DistillConfig::from_json(nlohmann::json{{"alphaa", 1}}),
                         "distill config: unknown field 'alphaa'", ConfigError);
    CHECK_THROWS_WITH_AS(DistillConfig::from_json(nlohmann::json{{"alpha", "x"}}),
                         "distill config: field 'alpha' must be a number", ConfigError);
    CHECK_THROWS_WITH_AS(DistillConfig::from_json(nlohmann::json{{"top_k", 1.5}}),
                         "distill config: field 'top_k' must be an integer", ConfigError);
    CHECK_THROWS_AS(DistillConfig::from_json(nlohmann::json{{"mode", "banana"}}), ConfigError);
    CHECK_THROWS_AS(DistillConfig::from_json(nlohmann::json::array()), ConfigError);
}

TEST_CASE("restricted teacher distribution matches hand softmax") {
    CachePosition pos;
    pos.ids = {4, 9, 2, 7};
    pos.logits = {2.0f, 1.0f, 0.5f, -1.0f};

    for (double tau : {1.0, 2.0, 0.5}) {
        std::vector<double> p = restricted_teacher_probs(pos, tau);
        std::vector<double> q = hand_softmax(pos.logits, tau);
        double sum = 0.0;
        for (size_t i = 0; i < p.size(); ++i) {
            CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-12));
            sum += p[i];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
    }

    // Tempering flattens: ratio of top to bottom shrinks as tau grows.
    auto p1 = restricted_teacher_probs(pos, 1.0);
    auto p2 = restricted_teacher_probs(pos, 2.0);
    CHECK(p1[0] / p1[3] > p2[0] / p2[3]);

    // A single-entry support is the point distribution.
    CachePosition one;
    one.ids = {3};
    one.logits = {-5.0f};
    CHECK(restricted_teacher_probs(one, 2.0)[0] == doctest::Approx(1.0).epsilon(1e-15));

    // Entries whose probability underflows are floored and the result is
    // renormalized, so every retained token keeps nonzero mass.
    CachePosition steep;
    steep.ids = {0, 1};
    steep.logits = {60.0f, 0.0f};
    auto pf = restricted_teacher_probs(steep, 1.0);
    CHECK(pf[1] == doctest::Approx(1e-12).epsilon(1e-6));
    CHECK(pf[0] + pf[1] == doctest::Approx(1.0).epsilon(1e-14));

    CHECK_THROWS_AS(restricted_teacher_probs(pos, 0.0), ConfigError);
}

TEST_CASE("teacher cache matches an independent recomputation") {
    SynthTask task(tiny_task_cfg());
    auto splits = task.make_splits();
    Backbone b = Backbone::init(tiny_bcfg(task.vocab().size));
    const uint64_t seed = 99;

    for (int shots : {0, 3}) {
        CAPTURE(shots);
        const int k = 7;
        CacheBuildReport rep;
        TeacherCache cache =
            cache_teacher(b, task, splits.distill, splits.pool, k, shots, 2.0, seed, &rep);
        CHECK(cache.k == k);
        CHECK(cache.shots == shots);
        CHECK(cache.temperature == 2.0);
        CHECK(cache.dataset_hash == dataset_fingerprint(splits.distill));
        CHECK(rep.cached == int(splits.distill.size()));
        CHECK(rep.skipped_ids.empty());
        REQUIRE(cache.records.size() == splits.distill.size());

        for (size_t ci = 0; ci < splits.distill.size(); ++ci) {
            const CaseRecord& c = splits.distill[ci];
            const TeacherCacheRecord& rec = cache.records[ci];
            CHECK(rec.case_id == c.id);
            REQUIRE(rec.positions.size() == c.report.size()); // every answer token incl. EOS

            // Rebuild the exact teacher prompt: the demo draw is keyed by
            // (seed, case id), which is part of the caching contract.
            Rng rng(mix_seed(seed, "teacher-demos-" + std::to_string(c.id)));
            std::vector<const CaseRecord*> demos;
            if (shots > 0)
                for (int idx : rng.sample_without_replacement(int(splits.pool.size()), shots))
                    demos.push_back(&splits.pool[size_t(idx)]);
            PromptLayout prompt = task.build_prompt(c, demos, b.cfg.max_context);
            Matrix logits = b.forward(prompt.tokens);

            for (size_t t = 0; t < rec.positions.size(); ++t) {
                const CachePosition& pos = rec.positions[t];
                REQUIRE(pos.ids.size() == size_t(k));
                REQUIRE(pos.logits.size() == size_t(k));
                const double* z = logits.row(prompt.answer_begin - 1 + int(t));
                // Independent ordering: sort (logit desc, id asc) via pairs.
                std::vector<std::pair<double, int>> ranked;
                for (int v = 0; v < logits.cols; ++v) ranked.emplace_back(-z[v], v);
                std::sort(ranked.begin(), ranked.end());
                for (int j = 0; j < k; ++j) {
                    CHECK(pos.ids[size_t(j)] == ranked[size_t(j)].second);
                    CHECK(pos.logits[size_t(j)] == float(z[ranked[size_t(j)].second]));
                }
            }
        }
    }
}

TEST_CASE("full-support cache reproduces the complete softmax") {
    SynthTask task(tiny_task_cfg());
    auto splits = task.make_splits();
    Backbone b = Backbone::init(tiny_bcfg(task.vocab().size));
    std::vector<CaseRecord> few(splits.distill.begin(), splits.distill.begin() + 3);
    const int V = task.vocab().size;
    TeacherCache cache = cache_teacher(b, task, few, {}, V, 0, 2.0, 5);
    for (const TeacherCacheRecord& rec : cache.records)
        for (const CachePosition& pos : rec.positions) {
            std::vector<double> p = restricted_teacher_probs(pos, 2.0);
            std::vector<double> q = hand_softmax(pos.logits, 2.0);
            for (size_t i = 0; i < p.size(); ++i)
                CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-12));
        }
}

TEST_CASE("cache_teacher validates its arguments") {
    SynthTask task(tiny_task_cfg());
    auto splits = task.make_splits();
    Backbone b = Backbone::init(tiny_bcfg(task.vocab().size));
    CHECK_THROWS_AS(cache_teacher(b, task, splits.distill, splits.pool, 0, 1, 2.0, 1),
                    ConfigError);
    CHECK_THROWS_AS(
        cache_teacher(b, task, splits.distill, splits.pool, b.cfg.vocab_size + 1, 1, 2.0, 1),
        ConfigError);
    CHECK_THROWS_AS(cache_teacher(b, task, splits.distill, splits.pool, 8, -1, 2.0, 1),
                    ConfigError);
    CHECK_THROWS_AS(cache_teacher(b, task, splits.distill, {}, 8, 2, 2.0, 1), ConfigError);
    CHECK_THROWS_AS(cache_teacher(b, task, splits.distill, splits.pool, 8, 2, 0.0, 1),
                    ConfigError);
}

TEST_CASE("cache files round-trip and reject corruption") {
    SynthTask task(tiny_task_cfg());
    auto splits = task.make_splits();
    Backbone b = Backbone::init(tiny_bcfg(task.vocab().size));
    TeacherCache cache = cache_teacher(b, task, splits.distill, splits.pool, 5, 2, 2.0, 7);

    auto path = tmp_file("cache_roundtrip.bin");
    cache.save(path.string());
    TeacherCache back = TeacherCache::load(path.string());
    CHECK(back.k == cache.k);
    CHECK(back.shots == cache.shots);
    CHECK(back.temperature == cache.temperature);
    CHECK(back.dataset_hash == cache.dataset_hash);
    REQUIRE(back.records.size() == cache.records.size());
    for (size_t i = 0; i < cache.records.size(); ++i) {
        CHECK(back.records[i].case_id == cache.records[i].case_id);
        REQUIRE(back.records[i].positions.size() == cache.records[i].positions.size());
        for (size_t t = 0; t < cache.records[i].positions.size(); ++t) {
            CHECK(back.records[i].positions[t].ids == cache.records[i].positions[t].ids);
            // Bitwise float equality through the binary file.
            CHECK(std::memcmp(back.records[i].positions[t].logits.data(),
                              cache.records[i].positions[t].logits.data(),
                              sizeof(float) * cache.records[i].positions[t].logits.size()) == 0);
        }
    }

    CHECK(cache.find(cache.records[2].case_id) == &cache.records[2]);
    CHECK(cache.find(-12345) == nullptr);

    auto bad = tmp_file("cache_bad_magic.bin");
    {
        std::ofstream f(bad, std::ios::binary);
        uint32_t junk = 0xdeadbeefu;
        f.write(reinterpret_cast<const char*>(&junk), sizeof(junk));
        f.write(reinterpret_cast<const char*>(&junk), sizeof(junk));
    }
    CHECK_THROWS_AS(TeacherCache::load(bad.string()), ArtifactError);

    auto trunc = tmp_file("cache_truncated.bin");
    std::filesystem::copy_file(path, trunc, std::filesystem::copy_options::overwrite_existing);
    std::filesystem::resize_file(trunc, std::filesystem::file_size(trunc) - 4);
    CHECK_THROWS_AS(TeacherCache::load(trunc.string()), ArtifactError);

    CHECK_THROWS_AS(TeacherCache::load(tmp_file("cache_missing.bin").string()), ArtifactError);

    // A record whose position lost an entry cannot be serialized.
    TeacherCache tampered = cache;
    tampered.records[0].positions[0].ids.pop_back();
    CHECK_THROWS_AS(tampered.save(tmp_file("cache_tampered.bin").string()), ArtifactError);
}

TEST_CASE("prompts that overflow the context are skipped and reported") {
    SynthTask task(tiny_task_cfg());
    auto splits = task.make_splits();
    BackboneConfig bc = tiny_bcfg(task.vocab().size);
    bc.max_context = 64; // query prompts fit only when the report is short
    Backbone b = Backbone::init(bc);

    CacheBuildReport rep;
    TeacherCache cache = cache_teacher(b, task, splits.distill, splits.pool, 5, 0, 2.0, 7, &rep);
    CHECK(rep.cached + int(rep.skipped_ids.size()) == int(splits.distill.size()));
    CHECK(rep.cached == int(cache.records.size()));
    for (const CaseRecord& c : splits.distill) {
        int prompt_len = int(task.build_prompt(c, {}, 100000).tokens.size());
        bool skipped = std::find(rep.skipped_ids.begin(), rep.skipped_ids.end(), c.id) !=
                       rep.skipped_ids.end();
        CHECK(skipped == (prompt_len > bc.max_context));
        CHECK((cache.find(c.id) != nullptr) == !skipped);
    }

    // Two-shot prompts never fit in 64 tokens here, so everything is skipped.
    CacheBuildReport rep2;
    TeacherCache empty = cache_teacher(b, task, splits.distill, splits.pool, 5, 2, 2.0, 7, &rep2);
    CHECK(rep2.cached == 0);
    CHECK(empty.records.empty());
    CHECK(rep2.skipped_ids.size() == splits.distill.size());
}

// Shared fixture for training runs: a tiny backbone plus a cache over the
// concatenated train+validation lists (the cache hash must cover both).
namespace {
struct TrainFixture {
    SynthTask task;
    SynthTask::Splits splits;
    Backbone backbone;
    TeacherCache cache;

    explicit TrainFixture(int shots = 3, int k = 8)
        : task(tiny_task_cfg()), splits(task.make_splits()),
          backbone(Backbone::init(tiny_bcfg(task.vocab().size))) {
        std::vector<CaseRecord> all = splits.distill;
        all.insert(all.end(), splits.val.begin(), splits.val.end());
        cache = cache_teacher(backbone, task, all, splits.pool, k, shots, 2.0, 42);
    }

    DistillConfig base_cfg() const {
        DistillConfig cfg;
        cfg.alpha = 0.8;
        cfg.temperature = 2.0;
        cfg.top_k = cache.k;
        cfg.lr = 3e-3;
        cfg.epochs = 3;
        cfg.batch_size = 4;
        cfg.profile = WeightProfile{8.0, 5.0};
        cfg.rank = 4;
        cfg.teacher_shots = cache.shots;
        cfg.seed = 5;
        return cfg;
    }
};
} // namespace

TEST_CASE("training rejects a cache that does not match the run") {
    TrainFixture fx;
    DistillConfig cfg = fx.base_cfg();

    DistillConfig wrong_k = cfg;
    wrong_k.top_k = cfg.top_k + 1;
    CHECK_THROWS_AS(train_adapters(wrong_k, fx.backbone, fx.cache, fx.task, fx.splits.distill,
                                   fx.splits.val),
                    ArtifactError);

    DistillConfig wrong_shots = cfg;
    wrong_shots.teacher_shots = cfg.teacher_shots + 1;
    CHECK_THROWS_AS(train_adapters(wrong_shots, fx.backbone, fx.cache, fx.task, fx.splits.distill,
                                   fx.splits.val),
                    ArtifactError);

    DistillConfig wrong_tau = cfg;
    wrong_tau.temperature = 1.7;
    CHECK_THROWS_AS(train_adapters(wrong_tau, fx.backbone, fx.cache, fx.task, fx.splits.distill,
                                   fx.splits.val),
                    ArtifactError);

    // Same cases, different order: the dataset fingerprint must differ, and
    // the error names both hashes.
    try {
        train_adapters(cfg, fx.backbone, fx.cache, fx.task, fx.splits.val, fx.splits.distill);
        FAIL("expected an artifact error");
    } catch (const ArtifactError& e) {
        std::string msg = e.what();
        uint64_t expect = dataset_fingerprint([&] {
            std::vector<CaseRecord> swapped = fx.splits.val;
            swapped.insert(swapped.end(), fx.splits.distill.begin(), fx.splits.distill.end());
            return swapped;
        }());
        CHECK(msg.find(hex64(fx.cache.dataset_hash)) != std::string::npos);
        CHECK(msg.find(hex64(expect)) != std::string::npos);
    }

    CHECK_THROWS_AS(train_adapters(cfg, fx.backbone, fx.cache, fx.task, {}, fx.splits.val),
                    ConfigError);
}

TEST_CASE("training run: exact loss identity, masses, determinism, frozen backbone") {
    TrainFixture fx;
    DistillConfig cfg = fx.base_cfg();
    uint64_t backbone_before = backbone_param_hash(fx.backbone);

    auto log_path = tmp_file("distill_log.jsonl");
    TrainResult r1 = train_adapters(cfg, fx.backbone, fx.cache, fx.task, fx.splits.distill,
                                    fx.splits.val, log_path.string());
    CHECK(backbone_param_hash(fx.backbone) == backbone_before); // backbone untouched
    REQUIRE(r1.epochs.size() == size_t(cfg.epochs));

    const Vocab& vocab = fx.task.vocab();
    Matcher matcher = Matcher::compile(PhraseLexicon::for_task(vocab), vocab.size);
    SupervisionMass mass = supervision_mass(fx.splits.distill, matcher, Vocab::eos, cfg.profile);

    for (const LossBreakdown& ep : r1.epochs) {
        // L = alpha * L_KL + (1 - alpha) * L_CE, preserved through batching.
        CHECK(ep.l ==
              doctest::Approx(cfg.alpha * ep.l_kl + (1.0 - cfg.alpha) * ep.l_ce).epsilon(1e-9));
        // Integer-valued weights: the category masses partition sum_w exactly
        // and reproduce the standalone decomposition.
        CHECK(ep.mass_template + ep.mass_path + ep.mass_eos == ep.sum_w);
        CHECK(ep.sum_w == mass.total());
        CHECK(ep.mass_template == mass.template_mass);
        CHECK(ep.mass_path == mass.path_mass);
        CHECK(ep.mass_eos == mass.eos_mass);
        CHECK(std::isfinite(ep.l));
    }

    // Distilling the demo-conditioned teacher reduces the validation loss.
    CHECK(r1.val_final < r1.val_start);
    CHECK(r1.val_start > 0.0);

    // The per-step log is valid JSONL with one line per optimizer step.
    std::ifstream log(log_path);
    REQUIRE(bool(log));
    int lines = 0;
    std::string line;
    const int steps_per_epoch =
        (int(fx.splits.distill.size()) + cfg.batch_size - 1) / cfg.batch_size;
    while (std::getline(log, line)) {
        nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j.contains("step"));
        CHECK(j.contains("L"));
        CHECK(j.contains("L_CE"));
        CHECK(j.contains("L_KL"));
        CHECK(j.contains("sum_w"));
        CHECK(j.at("L").get<double>() ==
              doctest::Approx(cfg.alpha * j.at("L_KL").get<double>() +
                              (1.0 - cfg.alpha) * j.at("L_CE").get<double>())
                  .epsilon(1e-9));
        ++lines;
    }
    CHECK(lines == cfg.epochs * steps_per_epoch);

    // Bit-identical rerun: same seed, same adapters, same losses.
    TrainResult r2 =
        train_adapters(cfg, fx.backbone, fx.cache, fx.task, fx.splits.distill, fx.splits.val);
    CHECK(r1.val_start == r2.val_start);
    CHECK(r1.val_final == r2.val_final);
    for (size_t i = 0; i < r1.epochs.size(); ++i) CHECK(r1.epochs[i].l == r2.epochs[i].l);
    auto p1 = tmp_file("adapters_run1.bin");
    auto p2 = tmp_file("adapters_run2.bin");
    save_adapters(r1.adapters, p1.string(), nlohmann::json::object());
    save_adapters(r2.adapters, p2.string(), nlohmann::json::object());
    CHECK(file_bytes(p1) == file_bytes(p2));

    // A different seed moves the result.
    DistillConfig other = cfg;
    other.seed = 6;
    TrainResult r3 =
        train_adapters(other, fx.backbone, fx.cache, fx.task, fx.splits.distill, fx.splits.val);
    CHECK(r3.val_final != r1.val_final);
}

TEST_CASE("alpha endpoints: pure KL ignores the weight profile, pure CE has no KL") {
    TrainFixture fx;

    DistillConfig kl_a = fx.base_cfg();
    kl_a.alpha = 1.0;
    kl_a.epochs = 1;
    DistillConfig kl_b = kl_a;
    kl_b.profile = WeightProfile{3.0, 2.0}; // must be invisible at alpha = 1

    TrainResult ra =
        train_adapters(kl_a, fx.backbone, fx.cache, fx.task, fx.splits.distill, fx.splits.val);
    TrainResult rb =
        train_adapters(kl_b, fx.backbone, fx.cache, fx.task, fx.splits.distill, fx.splits.val);
    CHECK(ra.val_final == rb.val_final);
    auto pa = tmp_file("adapters_alpha1_a.bin");
    auto pb = tmp_file("adapters_alpha1_b.bin");
    save_adapters(ra.adapters, pa.string(), nlohmann::json::object());
    save_adapters(rb.adapters, pb.string(), nlohmann::json::object());
    CHECK(file_bytes(pa) == file_bytes(pb));
    for (const LossBreakdown& ep : ra.epochs) {
        CHECK(ep.l == ep.l_kl);
        CHECK(ep.l_ce == 0.0);
        CHECK(ep.sum_w == 0.0); // CE weights are never materialized
        CHECK(ep.mass_template + ep.mass_path + ep.mass_eos == 0.0);
    }

    DistillConfig ce = fx.base_cfg();
    ce.alpha = 0.0;
    ce.epochs = 1;
    TrainResult rc =
        train_adapters(ce, fx.backbone, fx.cache, fx.task, fx.splits.distill, fx.splits.val);
    for (const LossBreakdown& ep : rc.epochs) {
        CHECK(ep.l == ep.l_ce);
        CHECK(ep.l_kl == 0.0);
        CHECK(ep.sum_w > 0.0);
    }
}

TEST_CASE("static adapters train under the same objective") {
    TrainFixture fx;
    DistillConfig cfg = fx.base_cfg();
    cfg.mode = AdapterMode::Static;
    cfg.epochs = 2;
    TrainResult r =
        train_adapters(cfg, fx.backbone, fx.cache, fx.task, fx.splits.distill, fx.splits.val);
    CHECK(r.adapters.mode == AdapterMode::Static);
    CHECK(r.val_final < r.val_start);
}

TEST_CASE("training aborts on a corrupted cache instead of learning from it") {
    TrainFixture fx;
    DistillConfig cfg = fx.base_cfg();
    TeacherCache poisoned = fx.cache;
    poisoned.records[1].positions[0].logits[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(train_adapters(cfg, fx.backbone, poisoned, fx.task, fx.splits.distill,
                                   fx.splits.val),
                    NumericError);
}

TEST_CASE("training names the case when the cache skipped it") {
    SynthTask task(tiny_task_cfg());
    auto splits = task.make_splits();
    BackboneConfig bc = tiny_bcfg(task.vocab().size);
    // Wide enough for every demonstration-free student prompt, too narrow
    // for two-shot teacher prompts: the cache build skips those cases.
    bc.max_context = 73;
    Backbone b = Backbone::init(bc);
    std::vector<CaseRecord> all = splits.distill;
    all.insert(all.end(), splits.val.begin(), splits.val.end());
    CacheBuildReport rep;
    TeacherCache cache = cache_teacher(b, task, all, splits.pool, 8, 2, 2.0, 42, &rep);
    bool train_case_skipped = false;
    for (const CaseRecord& c : splits.distill)
        train_case_skipped |= std::find(rep.skipped_ids.begin(), rep.skipped_ids.end(), c.id) !=
                              rep.skipped_ids.end();
    REQUIRE(train_case_skipped);

    DistillConfig cfg;
    cfg.top_k = 8;
    cfg.teacher_shots = 2;
    cfg.rank = 2;
    try {
        train_adapters(cfg, b, cache, task, splits.distill, splits.val);
        FAIL("expected an artifact error");
    } catch (const ArtifactError& e) {
        CHECK(std::string(e.what()).find("no cache record") != std::string::npos);
    }
}

TEST_CASE("adapter gradients of the full objective match finite differences") {
    TaskConfig tc = tiny_task_cfg();
    SynthTask task(tc);
    BackboneConfig bc;
    bc.vocab_size = task.vocab().size;
    bc.d_model = 8;
    bc.n_layers = 2;
    bc.n_heads = 2;
    bc.d_ff = 16;
    bc.max_context = 128;
    bc.init_seed = 21;
    Backbone b = Backbone::init(bc);

    Rng case_rng(404);
    CaseRecord c = task.sample_case(tc.deploy_style, case_rng);
    c.id = 0;
    PromptLayout prompt = task.build_prompt(c, {}, bc.max_context);

    const int k = 6;
    const double tau = 2.0;
    const double alpha = 0.8;
    TeacherCache cache = cache_teacher(b, task, {c}, {}, k, 0, tau, 3);
    REQUIRE(cache.records.size() == 1);
    const TeacherCacheRecord& rec = cache.records[0];

    const Vocab& vocab = task.vocab();
    Matcher matcher = Matcher::compile(PhraseLexicon::for_task(vocab), vocab.size);
    MaskPair masks = mark_decisive(c.report, c.labels, matcher, Vocab::eos);
    std::vector<double> weights = weights_from_masks(masks, WeightProfile{8.0, 5.0});

    const int T = int(c.report.size());
    std::vector<int> kl_ids;
    Matrix teacher_p{T, k};
    for (int t = 0; t < T; ++t) {
        const CachePosition& pos = rec.positions[size_t(t)];
        for (int32_t id : pos.ids) kl_ids.push_back(int(id));
        std::vector<double> tp = restricted_teacher_probs(pos, tau);
        for (int j = 0; j < k; ++j) teacher_p(t, j) = tp[size_t(j)];
    }

    for (AdapterMode mode : {AdapterMode::Dynamic, AdapterMode::Static}) {
        CAPTURE(adapter_mode_name(mode));
        // rho low enough that some rows clip: the bound's derivative is part
        // of the objective and must survive the finite-difference check.
        AdapterSet a = AdapterSet::init(mode, bc.n_layers, bc.d_model,
                                        mode == AdapterMode::Dynamic ? 2 : 0, 1.3, 1.0, 31);
        Rng prng(77);
        std::vector<Matrix*> mats;
        a.for_each_param([&](const std::string&, Matrix& m) { mats.push_back(&m); });
        for (Matrix* m : mats)
            for (double& x : m->data) x += 0.05 * prng.normal();

        auto build = [&](Tape& tape, bool train) {
            ForwardNodes fn = b.build_forward(tape, prompt.tokens, false, &a, train, nullptr);
            NodeId rows = tape.slice_rows(fn.logits, prompt.answer_begin - 1,
                                          prompt.answer_end - 1);
            NodeId kl = tape.topk_kl(rows, kl_ids, teacher_p, tau);
            NodeId ce = tape.ce_loss(rows, c.report, weights);
            NodeId loss = tape.axpby(kl, ce, alpha, 1.0 - alpha);
            return std::pair<NodeId, std::vector<NodeId>>(loss, fn.adapter_params);
        };

        Tape tape;
        auto [loss, param_nodes] = build(tape, true);
        tape.backward(loss, 1.0);
        REQUIRE(param_nodes.size() == mats.size());

        auto loss_value = [&]() {
            Tape t2;
            auto built = build(t2, false);
            return t2.value(built.first)(0, 0);
        };

        const double eps = 1e-5;
        double worst = 0.0;
        for (size_t pi = 0; pi < mats.size(); ++pi) {
            const Matrix* g = tape.grad(param_nodes[pi]);
            REQUIRE(g != nullptr);
            for (size_t j = 0; j < mats[pi]->data.size(); ++j) {
                double saved = mats[pi]->data[j];
                mats[pi]->data[j] = saved + eps;
                double up = loss_value();
                mats[pi]->data[j] = saved - eps;
                double down = loss_value();
                mats[pi]->data[j] = saved;
                double fd = (up - down) / (2.0 * eps);
                double rel = std::abs(g->data[j] - fd) / std::max(1e-3, std::abs(fd));
                worst = std::max(worst, rel);
            }
        }
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("supervision mass decomposes a handcrafted report exactly") {
    SynthTask task(tiny_task_cfg());
    const Vocab& v = task.vocab();
    Matcher matcher = Matcher::compile(PhraseLexicon::for_task(v), v.size);

    // 25 tokens: 20 template/closing, 4 finding tokens (one single-token
    // mention, one full three-token mention), one EOS.
    int t0 = v.template_base(0, 0), t1 = v.template_base(0, 1);
    int c0 = v.closing_base(0), c1 = v.closing_base(1);
    int f0 = v.finding_base(0), f1 = v.finding_base(1);
    CaseRecord c;
    c.id = 0;
    c.style = 0;
    c.labels = {0, 1};
    c.report = {t0,     t0 + 1, t0 + 2, f0,     t1,     t1 + 1, t1 + 2, f1, f1 + 1,
                f1 + 2, t0,     t0 + 1, t0 + 2, t1,     t1 + 1, t1 + 2, c0, c0 + 1,
                c1,     c1 + 1, c0,     c0 + 1, c1,     c1 + 1, Vocab::eos};
    REQUIRE(c.report.size() == 25);

    SupervisionMass m = supervision_mass({c}, matcher, Vocab::eos, WeightProfile{8.0, 5.0});
    CHECK(m.template_mass == 20.0);
    CHECK(m.path_mass == 32.0); // 4 decisive tokens at weight 8
    CHECK(m.eos_mass == 5.0);
    CHECK(m.total() == 57.0);

    // The uniform profile reduces to raw token counts.
    SupervisionMass u = supervision_mass({c}, matcher, Vocab::eos, WeightProfile{1.0, 1.0});
    CHECK(u.template_mass == 20.0);
    CHECK(u.path_mass == 4.0);
    CHECK(u.eos_mass == 1.0);
    CHECK(u.total() == 25.0);
}

TEST_CASE("upweighting shifts supervision mass share toward findings and EOS") {
    SynthTask task(tiny_task_cfg());
    auto splits = task.make_splits();
    const Vocab& v = task.vocab();
    Matcher matcher = Matcher::compile(PhraseLexicon::for_task(v), v.size);

    SupervisionMass uni = supervision_mass(splits.distill, matcher, Vocab::eos,
                                           WeightProfile{1.0, 1.0});
    SupervisionMass up = supervision_mass(splits.distill, matcher, Vocab::eos,
                                          WeightProfile{8.0, 5.0});
    double share_uni = (uni.path_mass + uni.eos_mass) / uni.total();
    double share_up = (up.path_mass + up.eos_mass) / up.total();
    CHECK(share_up > share_uni);

    // Token counts are invariant; only the weighting changes.
    CHECK(up.path_mass == 8.0 * uni.path_mass);
    CHECK(up.eos_mass == 5.0 * uni.eos_mass);
    CHECK(up.template_mass == uni.template_mass);
}
