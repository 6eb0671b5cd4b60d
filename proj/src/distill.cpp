#include "icsteer/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "icsteer/errors.hpp"
#include "icsteer/hash.hpp"
#include "icsteer/optim.hpp"
#include "icsteer/rng.hpp"

namespace icsteer {

// ---------------------------------------------------------------------------
// Dataset fingerprint

namespace {

uint64_t hash_case(uint64_t h, const CaseRecord& c) {
    auto mix_int = [&h](int64_t x) { h = fnv1a64(&x, sizeof(x), h); };
    mix_int(c.id);
    mix_int(c.style);
    mix_int(int64_t(c.cond.size()));
    for (int t : c.cond) mix_int(t);
    mix_int(int64_t(c.report.size()));
    for (int t : c.report) mix_int(t);
    mix_int(int64_t(c.labels.size()));
    for (int t : c.labels) mix_int(t);
    h = fnv1a64(c.split, h);
    return h;
}

uint64_t fingerprint_chain(uint64_t h, const std::vector<CaseRecord>& cases) {
    for (const CaseRecord& c : cases) h = hash_case(h, c);
    return h;
}

} // namespace

uint64_t dataset_fingerprint(const std::vector<CaseRecord>& cases) {
    return fingerprint_chain(FNV_OFFSET, cases);
}

// ---------------------------------------------------------------------------
// Cache file

namespace {
constexpr uint32_t CACHE_MAGIC = 0x43544349u; // "ICTC"
constexpr uint32_t CACHE_VERSION = 1;

template <typename T>
void put(std::ofstream& f, const T& x) {
    f.write(reinterpret_cast<const char*>(&x), sizeof(T));
}
template <typename T>
void get(std::ifstream& f, T& x, const std::string& path) {
    f.read(reinterpret_cast<char*>(&x), sizeof(T));
    if (!f) throw ArtifactError("teacher cache: truncated file " + path);
}
} // namespace

void TeacherCache::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("teacher cache: cannot write " + path);
    put(f, CACHE_MAGIC);
    put(f, CACHE_VERSION);
    put(f, uint32_t(k));
    put(f, uint32_t(shots));
    put(f, temperature);
    put(f, dataset_hash);
    put(f, uint64_t(records.size()));
    for (const TeacherCacheRecord& r : records) {
        put(f, int32_t(r.case_id));
        put(f, uint32_t(r.positions.size()));
        for (const CachePosition& p : r.positions) {
            if (int(p.ids.size()) != k || int(p.logits.size()) != k)
                throw ArtifactError("teacher cache: record " + std::to_string(r.case_id) +
                                    " has a position with the wrong K");
            f.write(reinterpret_cast<const char*>(p.ids.data()), std::streamsize(sizeof(int32_t) * p.ids.size()));
            f.write(reinterpret_cast<const char*>(p.logits.data()), std::streamsize(sizeof(float) * p.logits.size()));
        }
    }
    if (!f) throw ArtifactError("teacher cache: write failed for " + path);
}

TeacherCache TeacherCache::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("teacher cache: cannot read " + path);
    uint32_t magic = 0, version = 0, k = 0, shots = 0;
    get(f, magic, path);
    if (magic != CACHE_MAGIC)
        throw ArtifactError("teacher cache: bad magic in " + path);
    get(f, version, path);
    if (version != CACHE_VERSION)
        throw ArtifactError("teacher cache: unsupported version " + std::to_string(version) +
                            " in " + path);
    get(f, k, path);
    get(f, shots, path);
    TeacherCache c;
    c.k = int(k);
    c.shots = int(shots);
    get(f, c.temperature, path);
    get(f, c.dataset_hash, path);
    uint64_t n = 0;
    get(f, n, path);
    c.records.resize(n);
    for (uint64_t i = 0; i < n; ++i) {
        int32_t id = 0;
        uint32_t npos = 0;
        get(f, id, path);
        get(f, npos, path);
        TeacherCacheRecord& r = c.records[i];
        r.case_id = id;
        r.positions.resize(npos);
        for (CachePosition& p : r.positions) {
            p.ids.resize(size_t(k));
            p.logits.resize(size_t(k));
            f.read(reinterpret_cast<char*>(p.ids.data()), std::streamsize(sizeof(int32_t) * p.ids.size()));
            f.read(reinterpret_cast<char*>(p.logits.data()), std::streamsize(sizeof(float) * p.logits.size()));
            if (!f) throw ArtifactError("teacher cache: truncated file " + path);
        }
    }
    return c;
}

const TeacherCacheRecord* TeacherCache::find(int case_id) const {
    for (const TeacherCacheRecord& r : records)
        if (r.case_id == case_id) return &r;
    return nullptr;
}

// ---------------------------------------------------------------------------
// Teacher caching

TeacherCache cache_teacher(const Backbone& backbone, const SynthTask& task,
                           const std::vector<CaseRecord>& cases,
                           const std::vector<CaseRecord>& demo_pool, int k, int shots,
                           double temperature, uint64_t seed, CacheBuildReport* report) {
    if (k < 1 || k > backbone.cfg.vocab_size)
        throw ConfigError("cache_teacher: K must be in [1, vocab_size], got " +
                          std::to_string(k));
    if (shots < 0) throw ConfigError("cache_teacher: shots must be nonnegative");
    if (shots > 0 && int(demo_pool.size()) < shots)
        throw ConfigError("cache_teacher: demo pool smaller than the shot count");
    if (!(temperature > 0.0)) throw ConfigError("cache_teacher: temperature must be positive");

    TeacherCache cache;
    cache.k = k;
    cache.shots = shots;
    cache.temperature = temperature;
    cache.dataset_hash = dataset_fingerprint(cases);

    const int n = int(cases.size());
    std::vector<TeacherCacheRecord> slots(static_cast<size_t>(n));
    std::vector<uint8_t> skipped(size_t(n), 0);

    // Independent forwards; per-case records land in their own slots so the
    // result is identical for any thread count.
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        const CaseRecord& c = cases[size_t(i)];
        Rng rng(mix_seed(seed, "teacher-demos-" + std::to_string(c.id)));
        std::vector<const CaseRecord*> demos;
        if (shots > 0) {
            for (int idx : rng.sample_without_replacement(int(demo_pool.size()), shots))
                demos.push_back(&demo_pool[size_t(idx)]);
        }
        PromptLayout prompt;
        try {
            prompt = task.build_prompt(c, demos, backbone.cfg.max_context);
        } catch (const NumericError&) {
            skipped[size_t(i)] = 1; // context overflow: skip, report below
            continue;
        }
        Matrix logits = backbone.forward(prompt.tokens);
        TeacherCacheRecord rec;
        rec.case_id = c.id;
        std::vector<int> order(static_cast<size_t>(backbone.cfg.vocab_size));
        for (int row = prompt.answer_begin - 1; row < prompt.answer_end - 1; ++row) {
            const double* z = logits.row(row);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                if (z[a] != z[b]) return z[a] > z[b];
                return a < b; // deterministic tie order
            });
            CachePosition p;
            p.ids.reserve(size_t(k));
            p.logits.reserve(size_t(k));
            for (int j = 0; j < k; ++j) {
                p.ids.push_back(int32_t(order[size_t(j)]));
                p.logits.push_back(float(z[order[size_t(j)]]));
            }
            rec.positions.push_back(std::move(p));
        }
        slots[size_t(i)] = std::move(rec);
    }

    CacheBuildReport rep;
    for (int i = 0; i < n; ++i) {
        if (skipped[size_t(i)]) rep.skipped_ids.push_back(cases[size_t(i)].id);
        else cache.records.push_back(std::move(slots[size_t(i)]));
    }
    rep.cached = int(cache.records.size());
    if (report) *report = rep;
    return cache;
}

std::vector<double> restricted_teacher_probs(const CachePosition& pos, double tau) {
    if (!(tau > 0.0)) throw ConfigError("restricted_teacher_probs: temperature must be positive");
    const size_t K = pos.logits.size();
    std::vector<double> p(K);
    double mx = -1e300;
    for (size_t i = 0; i < K; ++i) mx = std::max(mx, double(pos.logits[i]) / tau);
    double sum = 0.0;
    for (size_t i = 0; i < K; ++i) {
        p[i] = std::exp(double(pos.logits[i]) / tau - mx);
        sum += p[i];
    }
    double renorm = 0.0;
    for (size_t i = 0; i < K; ++i) {
        p[i] = std::max(p[i] / sum, 1e-12);
        renorm += p[i];
    }
    for (size_t i = 0; i < K; ++i) p[i] /= renorm;
    return p;
}

// ---------------------------------------------------------------------------
// Config

void DistillConfig::validate() const {
    if (alpha < 0.0 || alpha > 1.0)
        throw ConfigError("distill: alpha must be in [0, 1], got " + std::to_string(alpha));
    if (!(temperature > 0.0)) throw ConfigError("distill: temperature must be positive");
    if (top_k < 1) throw ConfigError("distill: top_k must be positive");
    if (!(lr > 0.0)) throw ConfigError("distill: learning rate must be positive");
    if (epochs < 1) throw ConfigError("distill: epochs must be positive");
    if (batch_size < 1) throw ConfigError("distill: batch_size must be positive");
    profile.validate();
    if (!(rho > 1.0)) throw ConfigError("distill: rho must be greater than 1");
    if (mode == AdapterMode::Dynamic && rank < 1)
        throw ConfigError("distill: rank must be positive for dynamic adapters");
    if (!(decay_rate > 0.0) || decay_rate > 1.0)
        throw ConfigError("distill: decay_rate must be in (0, 1]");
    if (teacher_shots < 0) throw ConfigError("distill: teacher_shots must be nonnegative");
}

nlohmann::json DistillConfig::to_json() const {
    return nlohmann::json{{"alpha", alpha},
                          {"temperature", temperature},
                          {"top_k", top_k},
                          {"lr", lr},
                          {"epochs", epochs},
                          {"batch_size", batch_size},
                          {"path_weight", profile.path_weight},
                          {"eos_weight", profile.eos_weight},
                          {"rho", rho},
                          {"rank", rank},
                          {"mode", adapter_mode_name(mode)},
                          {"decay_rate", decay_rate},
                          {"teacher_shots", teacher_shots},
                          {"seed", seed}};
}

DistillConfig DistillConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("distill config: expected a JSON object");
    static const std::vector<std::string> known = {
        "alpha", "temperature", "top_k", "lr", "epochs", "batch_size", "path_weight",
        "eos_weight", "rho", "rank", "mode", "decay_rate", "teacher_shots", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError("distill config: unknown field '" + it.key() + "'");
    DistillConfig c;
    auto num = [&](const char* key, double& out) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number())
            throw ConfigError(std::string("distill config: field '") + key +
                              "' must be a number");
        out = j.at(key).get<double>();
    };
    auto integer = [&](const char* key, int& out) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number_integer())
            throw ConfigError(std::string("distill config: field '") + key +
                              "' must be an integer");
        out = j.at(key).get<int>();
    };
    num("alpha", c.alpha);
    num("temperature", c.temperature);
    integer("top_k", c.top_k);
    num("lr", c.lr);
    integer("epochs", c.epochs);
    integer("batch_size", c.batch_size);
    num("path_weight", c.profile.path_weight);
    num("eos_weight", c.profile.eos_weight);
    num("rho", c.rho);
    integer("rank", c.rank);
    if (j.contains("mode")) {
        if (!j.at("mode").is_string())
            throw ConfigError("distill config: field 'mode' must be a string");
        c.mode = adapter_mode_from_name(j.at("mode").get<std::string>());
    }
    num("decay_rate", c.decay_rate);
    integer("teacher_shots", c.teacher_shots);
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned())
            throw ConfigError("distill config: field 'seed' must be an unsigned integer");
        c.seed = j.at("seed").get<uint64_t>();
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Training

namespace {

// Precomputed supervision for one case's student pass.
struct CaseSupervision {
    std::vector<int> prompt;
    int row_begin = 0, row_end = 0; // logit rows predicting the answer tokens
    std::vector<int> targets;
    std::vector<double> weights;
    std::vector<int> kl_ids;
    Matrix teacher_p;
    double m_template = 0.0, m_path = 0.0, m_eos = 0.0, sum_w = 0.0;
};

CaseSupervision build_supervision(const DistillConfig& cfg, const SynthTask& task,
                                  const Matcher& matcher, const TeacherCache& cache,
                                  const TeacherCacheRecord& rec, const CaseRecord& c,
                                  int max_context) {
    CaseSupervision s;
    PromptLayout p = task.build_prompt(c, {}, max_context);
    s.prompt = std::move(p.tokens);
    s.row_begin = p.answer_begin - 1;
    s.row_end = p.answer_end - 1;
    s.targets = c.report;
    const int T = int(s.targets.size());
    if (int(rec.positions.size()) != T)
        throw ArtifactError("distill: cache record for case " + std::to_string(c.id) +
                            " covers " + std::to_string(rec.positions.size()) +
                            " positions, reference has " + std::to_string(T));

    if (cfg.alpha < 1.0) {
        // Decisive-token CE weights; a pure-KL run (alpha = 1) never touches
        // the weight profile.
        MaskPair masks = mark_decisive(c.report, c.labels, matcher, Vocab::eos);
        s.weights = weights_from_masks(masks, cfg.profile);
        for (int t = 0; t < T; ++t) {
            if (masks.eos[size_t(t)]) s.m_eos += s.weights[size_t(t)];
            else if (masks.path[size_t(t)]) s.m_path += s.weights[size_t(t)];
            else s.m_template += s.weights[size_t(t)];
        }
        s.sum_w = s.m_template + s.m_path + s.m_eos;
    }
    if (cfg.alpha > 0.0) {
        s.kl_ids.reserve(size_t(T) * size_t(cache.k));
        s.teacher_p = Matrix(T, cache.k);
        for (int t = 0; t < T; ++t) {
            const CachePosition& pos = rec.positions[size_t(t)];
            for (int32_t id : pos.ids) s.kl_ids.push_back(int(id));
            std::vector<double> tp = restricted_teacher_probs(pos, cfg.temperature);
            for (int jj = 0; jj < cache.k; ++jj) s.teacher_p(t, jj) = tp[size_t(jj)];
        }
    }
    return s;
}

struct CaseLoss {
    double l = 0.0, l_ce = 0.0, l_kl = 0.0;
};

// Exceptions may not escape an OpenMP region; the first one thrown by any
// iteration is captured and rethrown on the calling thread.
class OmpErrorGuard {
  public:
    template <typename Fn>
    void run(Fn&& fn) noexcept {
        try {
            fn();
        } catch (...) {
#pragma omp critical(icsteer_omp_error_guard)
            if (!err_) err_ = std::current_exception();
        }
    }
    void rethrow_if_set() const {
        if (err_) std::rethrow_exception(err_);
    }

  private:
    std::exception_ptr err_ = nullptr;
};

// Records the student pass and loss on the tape; loss_out receives node ids.
struct LossNodes {
    NodeId loss = -1, ce = -1, kl = -1;
    std::vector<NodeId> adapter_params;
};

LossNodes build_loss(Tape& tape, const Backbone& backbone, const AdapterSet& adapters,
                     const DistillConfig& cfg, const CaseSupervision& s, bool train) {
    ForwardNodes fn =
        backbone.build_forward(tape, s.prompt, false, &adapters, train, nullptr);
    NodeId rows = tape.slice_rows(fn.logits, s.row_begin, s.row_end);
    LossNodes out;
    out.adapter_params = std::move(fn.adapter_params);
    if (cfg.alpha > 0.0)
        out.kl = tape.topk_kl(rows, s.kl_ids, s.teacher_p, cfg.temperature);
    if (cfg.alpha < 1.0) out.ce = tape.ce_loss(rows, s.targets, s.weights);
    if (cfg.alpha >= 1.0) out.loss = out.kl;
    else if (cfg.alpha <= 0.0) out.loss = out.ce;
    else out.loss = tape.axpby(out.kl, out.ce, cfg.alpha, 1.0 - cfg.alpha);
    return out;
}

CaseLoss eval_case(const Backbone& backbone, const AdapterSet& adapters,
                   const DistillConfig& cfg, const CaseSupervision& s) {
    Tape tape;
    LossNodes n = build_loss(tape, backbone, adapters, cfg, s, false);
    CaseLoss cl;
    cl.l = tape.value(n.loss)(0, 0);
    if (n.ce >= 0) cl.l_ce = tape.value(n.ce)(0, 0);
    if (n.kl >= 0) cl.l_kl = tape.value(n.kl)(0, 0);
    return cl;
}

} // namespace

TrainResult train_adapters(const DistillConfig& cfg, const Backbone& backbone,
                           const TeacherCache& cache, const SynthTask& task,
                           const std::vector<CaseRecord>& train_cases,
                           const std::vector<CaseRecord>& val_cases,
                           const std::string& log_path) {
    cfg.validate();
    if (train_cases.empty()) throw ConfigError("train_adapters: empty training set");
    if (cache.k != cfg.top_k)
        throw ArtifactError("train_adapters: cache K " + std::to_string(cache.k) +
                            " does not match configured top_k " + std::to_string(cfg.top_k));
    if (cache.shots != cfg.teacher_shots)
        throw ArtifactError("train_adapters: cache shots " + std::to_string(cache.shots) +
                            " does not match configured teacher_shots " +
                            std::to_string(cfg.teacher_shots));
    if (cache.temperature != cfg.temperature)
        throw ArtifactError("train_adapters: cache temperature does not match the config");
    uint64_t expect = fingerprint_chain(dataset_fingerprint(train_cases), val_cases);
    if (cache.dataset_hash != expect)
        throw ArtifactError("train_adapters: cache dataset hash " + hex64(cache.dataset_hash) +
                            " does not match dataset fingerprint " + hex64(expect));

    const Vocab& vocab = task.vocab();
    Matcher matcher = Matcher::compile(PhraseLexicon::for_task(vocab), vocab.size);

    std::unordered_map<int, const TeacherCacheRecord*> by_id;
    for (const TeacherCacheRecord& r : cache.records) by_id[r.case_id] = &r;
    auto record_for = [&](const CaseRecord& c) -> const TeacherCacheRecord& {
        auto it = by_id.find(c.id);
        if (it == by_id.end())
            throw ArtifactError("train_adapters: no cache record for case " +
                                std::to_string(c.id));
        return *it->second;
    };

    const int n_train = int(train_cases.size());
    const int n_val = int(val_cases.size());
    std::vector<CaseSupervision> sup(static_cast<size_t>(n_train));
    std::vector<CaseSupervision> val_sup(static_cast<size_t>(n_val));
    OmpErrorGuard sup_guard;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n_train + n_val; ++i) {
        sup_guard.run([&] {
            if (i < n_train)
                sup[size_t(i)] =
                    build_supervision(cfg, task, matcher, cache, record_for(train_cases[size_t(i)]),
                                      train_cases[size_t(i)], backbone.cfg.max_context);
            else
                val_sup[size_t(i - n_train)] = build_supervision(
                    cfg, task, matcher, cache, record_for(val_cases[size_t(i - n_train)]),
                    val_cases[size_t(i - n_train)], backbone.cfg.max_context);
        });
    }
    sup_guard.rethrow_if_set();

    TrainResult res;
    res.adapters = AdapterSet::init(cfg.mode, backbone.cfg.n_layers, backbone.cfg.d_model,
                                    cfg.rank, cfg.rho, cfg.decay_rate,
                                    mix_seed(cfg.seed, "adapter-init"));

    auto mean_val_loss = [&]() {
        if (n_val == 0) return 0.0;
        std::vector<double> per(static_cast<size_t>(n_val));
        OmpErrorGuard guard;
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < n_val; ++i)
            guard.run(
                [&] { per[size_t(i)] = eval_case(backbone, res.adapters, cfg, val_sup[size_t(i)]).l; });
        guard.rethrow_if_set();
        double sum = 0.0;
        for (double x : per) sum += x;
        return sum / double(n_val);
    };
    res.val_start = mean_val_loss();

    std::vector<Matrix*> params;
    res.adapters.for_each_param([&](const std::string&, Matrix& m) { params.push_back(&m); });
    AdamState adam;
    adam.init_like(params);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw ArtifactError("train_adapters: cannot write log " + log_path);
    }

    std::vector<int> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    long long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, "shuffle-epoch-" + std::to_string(epoch)));
        shuffle_rng.shuffle(order);

        LossBreakdown ep;
        long long ep_sequences = 0;
        for (int start = 0; start < n_train; start += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, n_train - start);
            std::vector<std::vector<Matrix>> grads(static_cast<size_t>(bsz));
            std::vector<CaseLoss> losses(static_cast<size_t>(bsz));
            // Independent per-example tapes; gradients are folded in example
            // order afterwards, so any thread count gives the same update.
            OmpErrorGuard guard;
#pragma omp parallel for schedule(dynamic)
            for (int b = 0; b < bsz; ++b) {
                guard.run([&] {
                    const CaseSupervision& s = sup[size_t(order[size_t(start + b)])];
                    Tape tape;
                    LossNodes nodes = build_loss(tape, backbone, res.adapters, cfg, s, true);
                    tape.backward(nodes.loss, 1.0 / double(bsz));
                    CaseLoss cl;
                    cl.l = tape.value(nodes.loss)(0, 0);
                    if (nodes.ce >= 0) cl.l_ce = tape.value(nodes.ce)(0, 0);
                    if (nodes.kl >= 0) cl.l_kl = tape.value(nodes.kl)(0, 0);
                    losses[size_t(b)] = cl;
                    auto& g = grads[size_t(b)];
                    g.reserve(nodes.adapter_params.size());
                    for (NodeId id : nodes.adapter_params) {
                        const Matrix* gm = tape.grad(id);
                        if (gm == nullptr) {
                            const Matrix& v = tape.value(id);
                            g.emplace_back(v.rows, v.cols);
                        } else {
                            g.push_back(*gm);
                        }
                    }
                });
            }
            guard.rethrow_if_set();
            std::vector<Matrix> total;
            total.reserve(params.size());
            for (const Matrix* p : params) total.emplace_back(p->rows, p->cols);
            for (int b = 0; b < bsz; ++b) {
                if (grads[size_t(b)].size() != params.size())
                    throw NumericError("train_adapters: gradient count mismatch");
                for (size_t i = 0; i < params.size(); ++i)
                    for (size_t jj = 0; jj < total[i].data.size(); ++jj)
                        total[i].data[jj] += grads[size_t(b)][i].data[jj];
            }

            double batch_l = 0.0, batch_ce = 0.0, batch_kl = 0.0, batch_w = 0.0;
            for (int b = 0; b < bsz; ++b) {
                batch_l += losses[size_t(b)].l;
                batch_ce += losses[size_t(b)].l_ce;
                batch_kl += losses[size_t(b)].l_kl;
                const CaseSupervision& s = sup[size_t(order[size_t(start + b)])];
                batch_w += s.sum_w;
                ep.mass_template += s.m_template;
                ep.mass_path += s.m_path;
                ep.mass_eos += s.m_eos;
            }
            batch_l /= double(bsz);
            batch_ce /= double(bsz);
            batch_kl /= double(bsz);
            if (!std::isfinite(batch_l))
                throw NumericError("train_adapters: non-finite loss at step " +
                                   std::to_string(step));
            adam.step(params, total, cfg.lr);
            ++step;
            ep.l += batch_l * double(bsz);
            ep.l_ce += batch_ce * double(bsz);
            ep.l_kl += batch_kl * double(bsz);
            ep.sum_w += batch_w;
            ep_sequences += bsz;
            if (log)
                log << nlohmann::json{{"step", step},
                                      {"L", batch_l},
                                      {"L_CE", batch_ce},
                                      {"L_KL", batch_kl},
                                      {"sum_w", batch_w}}
                           .dump()
                    << "\n";
        }
        ep.l /= double(ep_sequences);
        ep.l_ce /= double(ep_sequences);
        ep.l_kl /= double(ep_sequences);
        res.epochs.push_back(ep);
    }
    res.val_final = mean_val_loss();
    return res;
}

// ---------------------------------------------------------------------------
// Supervision mass

SupervisionMass supervision_mass(const std::vector<CaseRecord>& cases, const Matcher& matcher,
                                 int eos_id, const WeightProfile& profile) {
    SupervisionMass m;
    for (const CaseRecord& c : cases) {
        MaskPair masks = mark_decisive(c.report, c.labels, matcher, eos_id);
        std::vector<double> w = weights_from_masks(masks, profile);
        for (size_t t = 0; t < w.size(); ++t) {
            if (masks.eos[t]) m.eos_mass += w[t];
            else if (masks.path[t]) m.path_mass += w[t];
            else m.template_mass += w[t];
        }
    }
    return m;
}

} // namespace icsteer
