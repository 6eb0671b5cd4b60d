#pragma once
#include <algorithm>
#include <cstdint>
#include <exception>
#include <string>
#include <utility>
#include <vector>

#include "icsteer/backbone.hpp"
#include "icsteer/distill.hpp"
#include "icsteer/errors.hpp"
#include "icsteer/lexicon.hpp"
#include "icsteer/synthtask.hpp"

namespace icsteer {

// ---------------------------------------------------------------------------
// Lexical metrics

// Corpus-level BLEU-1..max_n as percentages: modified (clipped) n-gram
// precision over the whole corpus with a brevity penalty; one reference per
// candidate. Zero clipped-match counts are floored at `eps` (add-eps
// smoothing) so higher orders stay finite on sparse corpora; an order with
// no candidate n-grams at all scores 0. Empty corpora and length-mismatched
// inputs are rejected.
std::vector<double> bleu(const std::vector<std::vector<int>>& candidates,
                         const std::vector<std::vector<int>>& references, int max_n = 4,
                         double eps = 0.1);

// Sentence-level ROUGE-L F1 (beta = 1) as a percentage. Two empty sequences
// are identical by convention (100); exactly one empty scores 0.
double rouge_l(const std::vector<int>& candidate, const std::vector<int>& reference);

// Mean sentence-level ROUGE-L over aligned candidate/reference lists.
double rouge_l_corpus(const std::vector<std::vector<int>>& candidates,
                      const std::vector<std::vector<int>>& references);

// ---------------------------------------------------------------------------
// Length control

// Length-difference statistics: dlen = len(generated) - len(reference) per
// case, bucketed at the threshold into under- (dlen < -t), over- (dlen > t)
// and properly-stopped (|dlen| <= t) percentages.
struct LengthStats {
    int threshold = 5;
    long long n = 0;
    double mean_gen = 0.0;    // mean generated length
    double mean_dlen = 0.0;   // mean signed difference
    double mae_dlen = 0.0;    // mean absolute difference (>= |mean_dlen|)
    double under_pct = 0.0;   // percentages; the three buckets sum to 100
    double over_pct = 0.0;
    double proper_pct = 0.0;
};

LengthStats length_stats(const std::vector<std::vector<int>>& generated,
                         const std::vector<std::vector<int>>& references, int threshold = 5);

// ---------------------------------------------------------------------------
// EOS boundary profile

// Mean P(EOS) around the reference report boundary. Offset 0 is the slot of
// the reference EOS; negative offsets are teacher-forced reads on the
// reference prefix, positive offsets continue the model greedily past the
// boundary (EOS excluded from the argmax so the continuation never stops)
// and record P(EOS) at each extra step. Cases whose reference is shorter
// than the window contribute only to their valid offsets.
struct EOSProfile {
    int w_neg = 10, w_pos = 5;
    std::vector<double> mean_prob; // index i <-> offset i - w_neg
    std::vector<long long> count;  // contributing cases per offset
    long long cases = 0;

    double at(int offset) const {
        int i = offset + w_neg;
        if (i < 0 || i >= int(mean_prob.size()))
            throw ConfigError("eos profile: offset outside the window");
        return mean_prob[size_t(i)];
    }
};

// ModelT needs cfg.max_context, eos_prob_per_position(tokens, eos_id,
// adapters) and greedy_step(tokens, eos_id, adapters, exclude_eos); the
// backbone satisfies this, and tests can substitute a hand-built oracle.
template <typename ModelT>
EOSProfile eos_profile(const ModelT& model, const AdapterSet* adapters, const SynthTask& task,
                       const std::vector<CaseRecord>& cases, int w_neg = 10, int w_pos = 5) {
    if (cases.empty()) throw ConfigError("eos_profile: empty case list");
    if (w_neg < 0 || w_pos < 0) throw ConfigError("eos_profile: window must be nonnegative");
    const int width = w_neg + w_pos + 1;
    std::vector<std::vector<double>> probs(cases.size());
    std::vector<std::vector<uint8_t>> valid(cases.size());

    // Exceptions may not escape the parallel region: the first one thrown by
    // any case is kept and rethrown below.
    std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(dynamic)
    for (int ci = 0; ci < int(cases.size()); ++ci) {
        try {
            const CaseRecord& c = cases[size_t(ci)];
            if (c.report.empty() || c.report.back() != Vocab::eos)
                throw NumericError("eos_profile: case " + std::to_string(c.id) +
                                   " has no terminal EOS in its reference");
            PromptLayout prompt = task.build_prompt(c, {}, model.cfg.max_context);
            const int content = int(c.report.size()) - 1; // tokens before EOS
            std::vector<double> p(size_t(width), 0.0);
            std::vector<uint8_t> v(size_t(width), 0);

            // Teacher-forced side: P(next = EOS) after each reference prefix.
            std::vector<double> tf =
                model.eos_prob_per_position(prompt.tokens, Vocab::eos, adapters);
            for (int off = -std::min(w_neg, content); off <= 0; ++off) {
                int slot = prompt.answer_begin + content + off; // index of the EOS slot
                p[size_t(off + w_neg)] = tf[size_t(slot - 1)];
                v[size_t(off + w_neg)] = 1;
            }

            // Free-running side: continue past the boundary, never stopping.
            std::vector<int> tokens(prompt.tokens.begin(),
                                    prompt.tokens.begin() + prompt.answer_begin + content);
            for (int step = 0; step <= w_pos; ++step) {
                auto [next, eos_p] = model.greedy_step(tokens, Vocab::eos, adapters, true);
                if (step > 0) {
                    p[size_t(step + w_neg)] = eos_p;
                    v[size_t(step + w_neg)] = 1;
                }
                if (step < w_pos) tokens.push_back(next);
            }
            probs[size_t(ci)] = std::move(p);
            valid[size_t(ci)] = std::move(v);
        } catch (...) {
#pragma omp critical(icsteer_eos_profile_err)
            if (!err) err = std::current_exception();
        }
    }
    if (err) std::rethrow_exception(err);

    EOSProfile prof;
    prof.w_neg = w_neg;
    prof.w_pos = w_pos;
    prof.mean_prob.assign(size_t(width), 0.0);
    prof.count.assign(size_t(width), 0);
    prof.cases = int(cases.size());
    for (size_t ci = 0; ci < cases.size(); ++ci) {
        for (int i = 0; i < width; ++i)
            if (valid[ci][size_t(i)]) {
                prof.mean_prob[size_t(i)] += probs[ci][size_t(i)];
                prof.count[size_t(i)] += 1;
            }
    }
    for (int i = 0; i < width; ++i)
        if (prof.count[size_t(i)] > 0) prof.mean_prob[size_t(i)] /= double(prof.count[size_t(i)]);
    return prof;
}

// ---------------------------------------------------------------------------
// Finding-level F1

// Micro-averaged presence P/R/F1 (percentages): a label counts as predicted
// when one of its phrases occurs in the generated report without an
// immediately preceding negation token.
struct FindingScore {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    long long tp = 0, fp = 0, fn = 0;
};

FindingScore finding_f1(const std::vector<std::vector<int>>& generated,
                        const std::vector<std::vector<int>>& gt_labels, const Matcher& matcher,
                        const std::vector<int>& negation_tokens);

// ---------------------------------------------------------------------------
// Forward-cost proxy

// proxy(n) = k_lin * n + k_quad * n^2 (the quadratic term models attention).
struct CostModel {
    double k_lin = 1.0;
    double k_quad = 0.0;

    double proxy(double n) const { return k_lin * n + k_quad * n * n; }
    double ratio(double n, double n0) const { return proxy(n) / proxy(n0); }
};

double flops_proxy(double n, const CostModel& m);
double flops_ratio(double n, double n0, const CostModel& m);

// Fit the single free shape parameter k_lin/k_quad by least squares so that
// ratio(tokens[i], tokens[0]) tracks ratios[i]; k_quad is normalized to 1.
CostModel fit_cost_ratio(const std::vector<double>& tokens, const std::vector<double>& ratios);

// ---------------------------------------------------------------------------
// Generation records and metric reports

struct GenRecord {
    int case_id = -1;
    std::vector<int> tokens;      // generated ids, incl. terminal EOS if emitted
    std::vector<double> eos_prob; // P(EOS) at each decode step
    bool stopped_eos = false;
};

// Free-running generation from the demonstration-free query prompt of each
// case. The token budget is additionally capped by the context window.
std::vector<GenRecord> generate_reports(const Backbone& backbone, const AdapterSet* adapters,
                                        const SynthTask& task,
                                        const std::vector<CaseRecord>& cases,
                                        const DecodeConfig& dec);

// Line-delimited JSON: {"case", "tokens", "eos_prob", "stop"}.
void save_generations(const std::string& path, const std::vector<GenRecord>& gens);
std::vector<GenRecord> load_generations(const std::string& path);

struct MetricRow {
    std::string config_id;
    double bleu1 = 0.0, bleu4 = 0.0, rouge = 0.0;
    FindingScore finding;
    LengthStats len;
};

// All reference-based metrics for one generation set; generations must be
// aligned with `cases` (same order, matching ids). Terminal EOS tokens are
// stripped from both sides before comparison.
MetricRow score_generations(const std::string& config_id, const std::vector<GenRecord>& gens,
                            const std::vector<CaseRecord>& cases, const Matcher& matcher,
                            const std::vector<int>& negation_tokens, int threshold = 5);

void save_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
// One "offset,mean_eos_prob,cases" line per offset, for plotting.
void save_eos_profile_csv(const std::string& path, const EOSProfile& prof);

// ---------------------------------------------------------------------------
// Ablation suite

struct AblationRowSpec {
    std::string id;
    bool use_adapters = true; // false: evaluate the bare backbone
    DistillConfig distill;
};

// The standard row set, derived from one base configuration: the cumulative
// build-up (zero-shot; +dynamic; +path; +eos-w1; +eos-w5), the objective
// variants (static-dive, kl-uniform-ce, decisive-ce-no-kl), and the two
// weight sweeps (path weight at fixed EOS weight 5, EOS weight at fixed
// path weight 8).
std::vector<AblationRowSpec> standard_ablation_rows(const DistillConfig& base);

struct AblationOutput {
    std::vector<MetricRow> metrics;                  // one row per spec, in order
    std::vector<std::vector<GenRecord>> generations; // aligned with metrics
    std::vector<EOSProfile> profiles;                // aligned with metrics
};

// Train (per row), generate on the test split, and score. Rows are
// independent and deterministic given the row seed; the cache must cover
// train+val as in train_adapters. (w_neg, w_pos) bound the EOS profile.
AblationOutput ablation_suite(const Backbone& backbone, const TeacherCache& cache,
                              const SynthTask& task, const std::vector<CaseRecord>& train_cases,
                              const std::vector<CaseRecord>& val_cases,
                              const std::vector<CaseRecord>& test_cases,
                              const std::vector<AblationRowSpec>& rows, const DecodeConfig& dec,
                              int w_neg = 10, int w_pos = 5);

} // namespace icsteer
