#include "icsteer/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "icsteer/errors.hpp"
#include "icsteer/hash.hpp"
#include "icsteer/kernels.hpp"
#include "icsteer/lexicon.hpp"
#include "icsteer/optim.hpp"
#include "icsteer/rng.hpp"

namespace icsteer {

// ---------------------------------------------------------------------------
// Config

void PretrainConfig::validate() const {
    if (steps < 1) throw ConfigError("pretrain: steps must be positive");
    if (!(lr > 0.0)) throw ConfigError("pretrain: learning rate must be positive");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
        throw ConfigError("pretrain: warmup_frac must be in [0, 1)");
    if (batch_size < 1) throw ConfigError("pretrain: batch_size must be positive");
    if (k_max < 0) throw ConfigError("pretrain: k_max must be nonnegative");
    if (!shot_weights.empty()) {
        if (int(shot_weights.size()) != k_max + 1)
            throw ConfigError("pretrain: shot_weights must have k_max+1 entries");
        double sum = 0.0;
        for (double w : shot_weights) {
            if (w < 0.0) throw ConfigError("pretrain: shot_weights must be nonnegative");
            sum += w;
        }
        if (!(sum > 0.0)) throw ConfigError("pretrain: shot_weights sum to zero");
    }
}

std::vector<double> PretrainConfig::effective_shot_weights() const {
    if (!shot_weights.empty()) return shot_weights;
    if (k_max == 8) return {0.25, 0.15, 0.15, 0.05, 0.15, 0.05, 0.05, 0.05, 0.10};
    return std::vector<double>(size_t(k_max) + 1, 1.0);
}

nlohmann::json PretrainConfig::to_json() const {
    return nlohmann::json{{"steps", steps},         {"lr", lr},
                          {"warmup_frac", warmup_frac}, {"batch_size", batch_size},
                          {"grad_clip", grad_clip}, {"k_max", k_max},
                          {"shot_weights", shot_weights}, {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("pretrain config: expected a JSON object");
    static const std::vector<std::string> known = {"steps",     "lr",    "warmup_frac",
                                                   "batch_size", "grad_clip", "k_max",
                                                   "shot_weights", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError("pretrain config: unknown field '" + it.key() + "'");
    PretrainConfig c;
    auto integer = [&](const char* key, int& out) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number_integer())
            throw ConfigError(std::string("pretrain config: field '") + key +
                              "' must be an integer");
        out = j.at(key).get<int>();
    };
    auto num = [&](const char* key, double& out) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number())
            throw ConfigError(std::string("pretrain config: field '") + key +
                              "' must be a number");
        out = j.at(key).get<double>();
    };
    integer("steps", c.steps);
    num("lr", c.lr);
    num("warmup_frac", c.warmup_frac);
    integer("batch_size", c.batch_size);
    num("grad_clip", c.grad_clip);
    integer("k_max", c.k_max);
    if (j.contains("shot_weights")) {
        if (!j.at("shot_weights").is_array())
            throw ConfigError("pretrain config: field 'shot_weights' must be an array");
        c.shot_weights = j.at("shot_weights").get<std::vector<double>>();
    }
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned())
            throw ConfigError("pretrain config: field 'seed' must be an unsigned integer");
        c.seed = j.at("seed").get<uint64_t>();
    }
    c.validate();
    return c;
}

double lr_at_step(const PretrainConfig& cfg, long long step) {
    long long warm = std::max<long long>(1, llround(cfg.warmup_frac * double(cfg.steps)));
    if (step < warm) return cfg.lr * double(step + 1) / double(warm);
    return cfg.lr;
}

// ---------------------------------------------------------------------------
// Example stream

namespace {

// One pretraining example: a full prompt with freshly sampled style, shot
// count, demonstrations and query. Redraws on the rare context overflow.
std::vector<int> sample_example(const SynthTask& task, int max_context,
                                const std::vector<double>& shot_cdf, Rng& rng) {
    for (int attempt = 0; attempt < 200; ++attempt) {
        int style = rng.uniform_int(4);
        double u = rng.uniform() * shot_cdf.back();
        int k = int(std::lower_bound(shot_cdf.begin(), shot_cdf.end(), u) - shot_cdf.begin());
        k = std::min(k, int(shot_cdf.size()) - 1);
        std::vector<CaseRecord> demos;
        demos.reserve(size_t(k));
        for (int i = 0; i < k; ++i) demos.push_back(task.sample_case(style, rng));
        CaseRecord query = task.sample_case(style, rng);
        std::vector<const CaseRecord*> dp;
        dp.reserve(demos.size());
        for (const CaseRecord& d : demos) dp.push_back(&d);
        try {
            return task.build_prompt(query, dp, max_context).tokens;
        } catch (const NumericError&) {
            continue; // overflow: draw a fresh example
        }
    }
    throw NumericError("pretrain: could not sample a prompt inside the context window");
}

std::vector<double> cumulative(const std::vector<double>& w) {
    std::vector<double> cdf(w.size());
    double run = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        run += w[i];
        cdf[i] = run;
    }
    return cdf;
}

} // namespace

PretrainResult pretrain(const BackboneConfig& bcfg, const SynthTask& task,
                        const PretrainConfig& cfg, const std::string& log_path) {
    bcfg.validate();
    cfg.validate();
    std::vector<double> shot_cdf = cumulative(cfg.effective_shot_weights());

    PretrainResult res;
    res.backbone = Backbone::init(bcfg);
    Backbone& model = res.backbone;

    std::vector<Matrix*> params;
    model.for_each_param([&](const std::string&, Matrix& m) { params.push_back(&m); });
    AdamState adam;
    adam.init_like(params);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw ArtifactError("pretrain: cannot write log " + log_path);
    }

    Rng stream(mix_seed(cfg.seed, "pretrain-stream"));
    res.step_loss.reserve(size_t(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        // Examples are drawn serially from one stream (determinism); the
        // forwards/backwards below can run concurrently per example.
        std::vector<std::vector<int>> batch(size_t(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b)
            batch[size_t(b)] = sample_example(task, bcfg.max_context, shot_cdf, stream);

        std::vector<std::vector<Matrix>> grads(size_t(cfg.batch_size));
        std::vector<double> losses(size_t(cfg.batch_size));
#pragma omp parallel for schedule(dynamic)
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::vector<int>& tokens = batch[size_t(b)];
            Tape tape;
            ForwardNodes fn = model.build_forward(tape, tokens, true, nullptr, false, nullptr);
            const int T = int(tokens.size());
            NodeId rows = tape.slice_rows(fn.logits, 0, T - 1);
            std::vector<int> targets(tokens.begin() + 1, tokens.end());
            std::vector<double> ones(size_t(T) - 1, 1.0);
            NodeId loss = tape.ce_loss(rows, targets, ones);
            tape.backward(loss, 1.0 / double(cfg.batch_size));
            losses[size_t(b)] = tape.value(loss)(0, 0);
            auto& g = grads[size_t(b)];
            g.reserve(fn.backbone_params.size());
            for (NodeId id : fn.backbone_params) {
                const Matrix* gm = tape.grad(id);
                if (gm == nullptr) {
                    const Matrix& v = tape.value(id);
                    g.emplace_back(v.rows, v.cols);
                } else {
                    g.push_back(*gm);
                }
            }
        }

        std::vector<Matrix> total;
        total.reserve(params.size());
        for (const Matrix* p : params) total.emplace_back(p->rows, p->cols);
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (grads[size_t(b)].size() != params.size())
                throw NumericError("pretrain: gradient count mismatch");
            for (size_t i = 0; i < params.size(); ++i)
                for (size_t jj = 0; jj < total[i].data.size(); ++jj)
                    total[i].data[jj] += grads[size_t(b)][i].data[jj];
        }

        double batch_loss = 0.0;
        for (double l : losses) batch_loss += l;
        batch_loss /= double(cfg.batch_size);
        if (!std::isfinite(batch_loss))
            throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));

        clip_global_norm(total, cfg.grad_clip);
        double lr = lr_at_step(cfg, step);
        adam.step(params, total, lr);
        res.step_loss.push_back(batch_loss);
        if (log)
            log << nlohmann::json{{"step", step}, {"L", batch_loss}, {"lr", lr}}.dump() << "\n";
    }

    int tail = std::min<int>(20, int(res.step_loss.size()));
    double sum = 0.0;
    for (int i = 0; i < tail; ++i) sum += res.step_loss[res.step_loss.size() - 1 - size_t(i)];
    res.final_loss = tail > 0 ? sum / double(tail) : 0.0;
    return res;
}

// ---------------------------------------------------------------------------
// Held-out evaluations

namespace {

struct EvalPrompt {
    std::vector<int> tokens;
    int answer_begin = 0, answer_end = 0;
    std::vector<int> report;
    std::vector<int> labels;
    std::vector<int> query_tokens; // same case without demonstrations
    int query_answer_begin = 0;
};

// Fresh evaluation cases with style-matched demonstrations; the zero-shot
// variant of each prompt shares the exact case for paired comparisons.
std::vector<EvalPrompt> sample_eval_prompts(const SynthTask& task, int max_context, int shots,
                                            int n_cases, uint64_t seed, int style) {
    Rng rng(mix_seed(seed, "eval-prompts"));
    std::vector<EvalPrompt> out;
    out.reserve(size_t(n_cases));
    int guard = 0;
    while (int(out.size()) < n_cases) {
        if (++guard > 200 * n_cases)
            throw NumericError("eval: could not sample prompts inside the context window");
        int s = style >= 0 ? style : rng.uniform_int(4);
        CaseRecord query = task.sample_case(s, rng);
        std::vector<CaseRecord> demos;
        demos.reserve(size_t(shots));
        for (int i = 0; i < shots; ++i) demos.push_back(task.sample_case(s, rng));
        std::vector<const CaseRecord*> dp;
        for (const CaseRecord& d : demos) dp.push_back(&d);
        PromptLayout with, without;
        try {
            with = task.build_prompt(query, dp, max_context);
            without = task.build_prompt(query, {}, max_context);
        } catch (const NumericError&) {
            continue;
        }
        EvalPrompt e;
        e.tokens = std::move(with.tokens);
        e.answer_begin = with.answer_begin;
        e.answer_end = with.answer_end;
        e.report = query.report;
        e.labels = query.labels;
        e.query_tokens = std::move(without.tokens);
        e.query_answer_begin = without.answer_begin;
        out.push_back(std::move(e));
    }
    return out;
}

// Total CE over the answer rows of one forward pass.
double answer_ce_total(const Backbone& b, const std::vector<int>& tokens, int answer_begin,
                       int answer_end, const AdapterSet* adapters) {
    Matrix logits = b.forward(tokens, adapters);
    double total = 0.0;
    for (int row = answer_begin - 1; row < answer_end - 1; ++row) {
        int target = tokens[size_t(row) + 1];
        total += num::cross_entropy({logits.row(row), size_t(logits.cols)}, target);
    }
    return total;
}

} // namespace

double answer_region_ce(const Backbone& b, const SynthTask& task, int shots, int n_cases,
                        uint64_t seed, const AdapterSet* adapters, int style) {
    auto prompts = sample_eval_prompts(task, b.cfg.max_context, shots, n_cases, seed, style);
    std::vector<double> totals(prompts.size());
    long long positions = 0;
    for (const EvalPrompt& e : prompts) positions += e.answer_end - e.answer_begin;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < int(prompts.size()); ++i) {
        const EvalPrompt& e = prompts[size_t(i)];
        totals[size_t(i)] =
            answer_ce_total(b, e.tokens, e.answer_begin, e.answer_end, adapters);
    }
    double sum = 0.0;
    for (double t : totals) sum += t;
    return sum / double(positions);
}

IclGap icl_gap(const Backbone& b, const SynthTask& task, int shots, int n_cases, uint64_t seed) {
    auto prompts = sample_eval_prompts(task, b.cfg.max_context, shots, n_cases, seed, -1);
    std::vector<double> few(prompts.size()), zero(prompts.size());
    long long positions = 0;
    for (const EvalPrompt& e : prompts) positions += e.answer_end - e.answer_begin;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < int(prompts.size()); ++i) {
        const EvalPrompt& e = prompts[size_t(i)];
        few[size_t(i)] = answer_ce_total(b, e.tokens, e.answer_begin, e.answer_end, nullptr);
        int qa = e.query_answer_begin;
        zero[size_t(i)] = answer_ce_total(b, e.query_tokens, qa,
                                          qa + int(e.report.size()), nullptr);
    }
    IclGap g;
    for (size_t i = 0; i < prompts.size(); ++i) {
        g.ce_few_shot += few[i];
        g.ce_zero_shot += zero[i];
    }
    g.ce_few_shot /= double(positions);
    g.ce_zero_shot /= double(positions);
    g.rel_gap = g.ce_zero_shot > 0.0 ? (g.ce_zero_shot - g.ce_few_shot) / g.ce_zero_shot : 0.0;
    return g;
}

TokenAccuracy zero_shot_token_accuracy(const Backbone& b, const SynthTask& task, int n_cases,
                                       uint64_t seed) {
    const Vocab& vocab = task.vocab();
    Matcher matcher = Matcher::compile(PhraseLexicon::for_task(vocab), vocab.size);
    auto prompts = sample_eval_prompts(task, b.cfg.max_context, 0, n_cases, seed, -1);
    long long tmpl_hit = 0, tmpl_n = 0, find_hit = 0, find_n = 0;
    for (const EvalPrompt& e : prompts) {
        MaskPair masks = mark_decisive(e.report, e.labels, matcher, Vocab::eos);
        Matrix logits = b.forward(e.query_tokens);
        for (int t = 0; t < int(e.report.size()); ++t) {
            if (masks.eos[size_t(t)]) continue;
            int row = e.query_answer_begin - 1 + t;
            const double* z = logits.row(row);
            int best = 0;
            for (int v = 1; v < logits.cols; ++v)
                if (z[v] > z[best]) best = v;
            bool hit = best == e.report[size_t(t)];
            if (masks.path[size_t(t)]) {
                find_n++;
                find_hit += hit;
            } else {
                tmpl_n++;
                tmpl_hit += hit;
            }
        }
    }
    TokenAccuracy acc;
    acc.template_n = tmpl_n;
    acc.finding_n = find_n;
    acc.template_acc = tmpl_n > 0 ? double(tmpl_hit) / double(tmpl_n) : 0.0;
    acc.finding_acc = find_n > 0 ? double(find_hit) / double(find_n) : 0.0;
    return acc;
}

} // namespace icsteer
