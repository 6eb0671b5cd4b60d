#include "icsteer/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace icsteer {

// ---------------------------------------------------------------------------
// BLEU

namespace {

// n-grams (n <= 4) over ids < 2^16 pack collision-free into one uint64.
uint64_t pack_ngram(const std::vector<int>& seq, size_t at, int n) {
    uint64_t key = 0;
    for (int j = 0; j < n; ++j) {
        int tok = seq[at + size_t(j)];
        if (tok < 0 || tok >= (1 << 16))
            throw NumericError("bleu: token id outside [0, 65535]");
        key = (key << 16) | uint64_t(tok);
    }
    return key;
}

} // namespace

std::vector<double> bleu(const std::vector<std::vector<int>>& candidates,
                         const std::vector<std::vector<int>>& references, int max_n,
                         double eps) {
    if (candidates.empty()) throw ConfigError("bleu: empty corpus");
    if (candidates.size() != references.size())
        throw ConfigError("bleu: candidate/reference count mismatch");
    if (max_n < 1 || max_n > 4) throw ConfigError("bleu: max_n must be in [1, 4]");
    if (!(eps > 0.0)) throw ConfigError("bleu: smoothing epsilon must be positive");

    std::vector<long long> matched(size_t(max_n), 0), total(size_t(max_n), 0);
    long long cand_len = 0, ref_len = 0;
    std::unordered_map<uint64_t, long long> cand_counts, ref_counts;
    for (size_t i = 0; i < candidates.size(); ++i) {
        const std::vector<int>& c = candidates[i];
        const std::vector<int>& r = references[i];
        cand_len += (long long)(c.size());
        ref_len += (long long)(r.size());
        for (int n = 1; n <= max_n; ++n) {
            long long c_ngrams = (long long)(c.size()) - n + 1;
            if (c_ngrams <= 0) continue;
            total[size_t(n - 1)] += c_ngrams;
            cand_counts.clear();
            for (size_t at = 0; at + size_t(n) <= c.size(); ++at)
                ++cand_counts[pack_ngram(c, at, n)];
            ref_counts.clear();
            for (size_t at = 0; at + size_t(n) <= r.size(); ++at)
                ++ref_counts[pack_ngram(r, at, n)];
            for (const auto& [key, count] : cand_counts) {
                auto it = ref_counts.find(key);
                if (it != ref_counts.end()) matched[size_t(n - 1)] += std::min(count, it->second);
            }
        }
    }

    // Brevity penalty over corpus totals; an empty candidate corpus scores 0.
    double bp = 0.0;
    if (cand_len > 0)
        bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(cand_len));

    std::vector<double> out(size_t(max_n), 0.0);
    for (int k = 1; k <= max_n; ++k) {
        double log_sum = 0.0;
        bool defined = true;
        for (int n = 1; n <= k; ++n) {
            if (total[size_t(n - 1)] == 0) {
                defined = false; // no candidate was long enough for this order
                break;
            }
            double num = matched[size_t(n - 1)] > 0 ? double(matched[size_t(n - 1)]) : eps;
            log_sum += std::log(num / double(total[size_t(n - 1)]));
        }
        out[size_t(k - 1)] = defined ? 100.0 * bp * std::exp(log_sum / double(k)) : 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// ROUGE-L

double rouge_l(const std::vector<int>& candidate, const std::vector<int>& reference) {
    const size_t n = candidate.size(), m = reference.size();
    if (n == 0 && m == 0) return 100.0; // identical-by-convention
    if (n == 0 || m == 0) return 0.0;
    // Two-row LCS dynamic program.
    std::vector<long long> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (candidate[i - 1] == reference[j - 1]) cur[j] = prev[j - 1] + 1;
            else cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    long long lcs = prev[m];
    if (lcs == 0) return 0.0;
    double p = double(lcs) / double(n);
    double r = double(lcs) / double(m);
    return 100.0 * (2.0 * p * r) / (p + r);
}

double rouge_l_corpus(const std::vector<std::vector<int>>& candidates,
                      const std::vector<std::vector<int>>& references) {
    if (candidates.empty()) throw ConfigError("rouge_l: empty corpus");
    if (candidates.size() != references.size())
        throw ConfigError("rouge_l: candidate/reference count mismatch");
    double sum = 0.0;
    for (size_t i = 0; i < candidates.size(); ++i) sum += rouge_l(candidates[i], references[i]);
    return sum / double(candidates.size());
}

// ---------------------------------------------------------------------------
// Length statistics

LengthStats length_stats(const std::vector<std::vector<int>>& generated,
                         const std::vector<std::vector<int>>& references, int threshold) {
    if (generated.empty()) throw ConfigError("length_stats: empty pair list");
    if (generated.size() != references.size())
        throw ConfigError("length_stats: generated/reference count mismatch");
    if (threshold < 0) throw ConfigError("length_stats: threshold must be nonnegative");

    LengthStats s;
    s.threshold = threshold;
    s.n = (long long)(generated.size());
    long long under = 0, over = 0, proper = 0;
    for (size_t i = 0; i < generated.size(); ++i) {
        double g = double(generated[i].size());
        double d = g - double(references[i].size());
        s.mean_gen += g;
        s.mean_dlen += d;
        s.mae_dlen += std::abs(d);
        if (d < -double(threshold)) ++under;
        else if (d > double(threshold)) ++over;
        else ++proper;
    }
    s.mean_gen /= double(s.n);
    s.mean_dlen /= double(s.n);
    s.mae_dlen /= double(s.n);
    s.under_pct = 100.0 * double(under) / double(s.n);
    s.over_pct = 100.0 * double(over) / double(s.n);
    s.proper_pct = 100.0 * double(proper) / double(s.n);
    return s;
}

// ---------------------------------------------------------------------------
// Finding-level F1

FindingScore finding_f1(const std::vector<std::vector<int>>& generated,
                        const std::vector<std::vector<int>>& gt_labels, const Matcher& matcher,
                        const std::vector<int>& negation_tokens) {
    if (generated.size() != gt_labels.size())
        throw ConfigError("finding_f1: generated/label count mismatch");
    FindingScore s;
    for (size_t i = 0; i < generated.size(); ++i) {
        std::vector<int> pred = extract_present_labels(generated[i], matcher, negation_tokens);
        std::vector<int> gt = gt_labels[i];
        std::sort(gt.begin(), gt.end());
        // Both lists are sorted and duplicate-free: set walk.
        size_t a = 0, b = 0;
        while (a < pred.size() || b < gt.size()) {
            if (a < pred.size() && b < gt.size() && pred[a] == gt[b]) {
                ++s.tp;
                ++a;
                ++b;
            } else if (b == gt.size() || (a < pred.size() && pred[a] < gt[b])) {
                ++s.fp;
                ++a;
            } else {
                ++s.fn;
                ++b;
            }
        }
    }
    s.precision = (s.tp + s.fp) > 0 ? 100.0 * double(s.tp) / double(s.tp + s.fp) : 0.0;
    s.recall = (s.tp + s.fn) > 0 ? 100.0 * double(s.tp) / double(s.tp + s.fn) : 0.0;
    s.f1 = (s.precision + s.recall) > 0.0
               ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
    return s;
}

// ---------------------------------------------------------------------------
// Cost proxy

double flops_proxy(double n, const CostModel& m) {
    if (!(n >= 1.0)) throw ConfigError("flops_proxy: token count must be >= 1");
    return m.proxy(n);
}

double flops_ratio(double n, double n0, const CostModel& m) {
    return flops_proxy(n, m) / flops_proxy(n0, m);
}

CostModel fit_cost_ratio(const std::vector<double>& tokens, const std::vector<double>& ratios) {
    if (tokens.size() != ratios.size() || tokens.size() < 2)
        throw ConfigError("fit_cost_ratio: need at least two aligned (tokens, ratio) rows");
    for (double n : tokens)
        if (!(n >= 1.0)) throw ConfigError("fit_cost_ratio: token counts must be >= 1");

    const double n0 = tokens[0];
    auto sse = [&](double k) {
        CostModel m{k, 1.0};
        double s = 0.0;
        for (size_t i = 0; i < tokens.size(); ++i) {
            double d = m.ratio(tokens[i], n0) - ratios[i];
            s += d * d;
        }
        return s;
    };

    // Single free parameter: coarse log-space scan, then golden-section
    // refinement inside the best bracket.
    double best_k = 1.0, best_v = std::numeric_limits<double>::infinity();
    const double lo = std::log(1e-3), hi = std::log(1e9);
    const int grid = 4000;
    for (int i = 0; i <= grid; ++i) {
        double k = std::exp(lo + (hi - lo) * double(i) / double(grid));
        double v = sse(k);
        if (v < best_v) {
            best_v = v;
            best_k = k;
        }
    }
    double step = (hi - lo) / double(grid);
    double a = std::log(best_k) - step, b = std::log(best_k) + step;
    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - gr * (b - a), d = a + gr * (b - a);
    for (int it = 0; it < 200; ++it) {
        if (sse(std::exp(c)) < sse(std::exp(d))) b = d;
        else a = c;
        c = b - gr * (b - a);
        d = a + gr * (b - a);
    }
    return CostModel{std::exp((a + b) / 2.0), 1.0};
}

// ---------------------------------------------------------------------------
// Generation

std::vector<GenRecord> generate_reports(const Backbone& backbone, const AdapterSet* adapters,
                                        const SynthTask& task,
                                        const std::vector<CaseRecord>& cases,
                                        const DecodeConfig& dec) {
    std::vector<GenRecord> out(cases.size());
    std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < int(cases.size()); ++i) {
        try {
            const CaseRecord& c = cases[size_t(i)];
            PromptLayout layout = task.build_prompt(c, {}, backbone.cfg.max_context);
            std::vector<int> prompt(layout.tokens.begin(),
                                    layout.tokens.begin() + layout.answer_begin);
            DecodeConfig d = dec;
            d.max_new_tokens =
                std::min(d.max_new_tokens, backbone.cfg.max_context - int(prompt.size()));
            GenResult g = backbone.generate(prompt, adapters, d);
            GenRecord rec;
            rec.case_id = c.id;
            rec.tokens = std::move(g.tokens);
            rec.eos_prob = std::move(g.eos_prob);
            rec.stopped_eos = g.stopped_eos;
            out[size_t(i)] = std::move(rec);
        } catch (...) {
#pragma omp critical(icsteer_generate_reports_err)
            if (!err) err = std::current_exception();
        }
    }
    if (err) std::rethrow_exception(err);
    return out;
}

void save_generations(const std::string& path, const std::vector<GenRecord>& gens) {
    std::ofstream f(path);
    if (!f) throw ArtifactError("generations: cannot write " + path);
    for (const GenRecord& g : gens) {
        f << nlohmann::json{{"case", g.case_id},
                            {"tokens", g.tokens},
                            {"eos_prob", g.eos_prob},
                            {"stop", g.stopped_eos ? "eos" : "budget"}}
                 .dump()
          << "\n";
    }
    if (!f) throw ArtifactError("generations: write failed for " + path);
}

std::vector<GenRecord> load_generations(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ArtifactError("generations: cannot read " + path);
    std::vector<GenRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            throw ArtifactError("generations: invalid JSON at " + path + ":" +
                                std::to_string(line_no));
        }
        for (const char* key : {"case", "tokens", "eos_prob", "stop"})
            if (!j.contains(key))
                throw ArtifactError("generations: missing field '" + std::string(key) + "' at " +
                                    path + ":" + std::to_string(line_no));
        GenRecord g;
        g.case_id = j.at("case").get<int>();
        g.tokens = j.at("tokens").get<std::vector<int>>();
        g.eos_prob = j.at("eos_prob").get<std::vector<double>>();
        std::string stop = j.at("stop").get<std::string>();
        if (stop != "eos" && stop != "budget")
            throw ArtifactError("generations: unknown stop reason '" + stop + "' at " + path +
                                ":" + std::to_string(line_no));
        g.stopped_eos = stop == "eos";
        out.push_back(std::move(g));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scoring

namespace {

std::vector<int> strip_eos(const std::vector<int>& seq) {
    if (!seq.empty() && seq.back() == Vocab::eos)
        return std::vector<int>(seq.begin(), seq.end() - 1);
    return seq;
}

} // namespace

MetricRow score_generations(const std::string& config_id, const std::vector<GenRecord>& gens,
                            const std::vector<CaseRecord>& cases, const Matcher& matcher,
                            const std::vector<int>& negation_tokens, int threshold) {
    if (gens.size() != cases.size())
        throw ArtifactError("score_generations: generation/case count mismatch");
    std::vector<std::vector<int>> cand(gens.size()), ref(gens.size()), labels(gens.size());
    for (size_t i = 0; i < gens.size(); ++i) {
        if (gens[i].case_id != cases[i].id)
            throw ArtifactError("score_generations: generation for case " +
                                std::to_string(gens[i].case_id) + " does not align with case " +
                                std::to_string(cases[i].id));
        cand[i] = strip_eos(gens[i].tokens);
        ref[i] = strip_eos(cases[i].report);
        labels[i] = cases[i].labels;
    }
    MetricRow row;
    row.config_id = config_id;
    std::vector<double> b = bleu(cand, ref, 4);
    row.bleu1 = b[0];
    row.bleu4 = b[3];
    row.rouge = rouge_l_corpus(cand, ref);
    row.finding = finding_f1(cand, labels, matcher, negation_tokens);
    row.len = length_stats(cand, ref, threshold);
    return row;
}

void save_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream f(path);
    if (!f) throw ArtifactError("metrics: cannot write " + path);
    f << "config,bleu1,bleu4,rouge_l,finding_p,finding_r,finding_f1,"
         "mean_len,mean_dlen,mae_dlen,under_pct,over_pct,proper_pct\n";
    f.precision(6);
    f << std::fixed;
    for (const MetricRow& r : rows) {
        f << r.config_id << ',' << r.bleu1 << ',' << r.bleu4 << ',' << r.rouge << ','
          << r.finding.precision << ',' << r.finding.recall << ',' << r.finding.f1 << ','
          << r.len.mean_gen << ',' << r.len.mean_dlen << ',' << r.len.mae_dlen << ','
          << r.len.under_pct << ',' << r.len.over_pct << ',' << r.len.proper_pct << "\n";
    }
    if (!f) throw ArtifactError("metrics: write failed for " + path);
}

void save_eos_profile_csv(const std::string& path, const EOSProfile& prof) {
    std::ofstream f(path);
    if (!f) throw ArtifactError("eos profile: cannot write " + path);
    f << "offset,mean_eos_prob,cases\n";
    f.precision(10);
    f << std::fixed;
    for (size_t i = 0; i < prof.mean_prob.size(); ++i)
        f << (int(i) - prof.w_neg) << ',' << prof.mean_prob[i] << ',' << prof.count[i] << "\n";
    if (!f) throw ArtifactError("eos profile: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Ablation suite

std::vector<AblationRowSpec> standard_ablation_rows(const DistillConfig& base) {
    std::vector<AblationRowSpec> rows;
    auto add = [&](const std::string& id, bool use_adapters, auto&& tweak) {
        AblationRowSpec r;
        r.id = id;
        r.use_adapters = use_adapters;
        r.distill = base;
        tweak(r.distill);
        r.distill.validate();
        rows.push_back(std::move(r));
    };
    auto nothing = [](DistillConfig&) {};

    // Cumulative build-up: start from plain distillation with uniform CE and
    // no EOS supervision, then add path upweighting, EOS supervision, and
    // EOS upweighting.
    add("zero-shot", false, nothing);
    add("+dynamic", true, [](DistillConfig& d) { d.profile = WeightProfile{1.0, 0.0}; });
    add("+path", true, [](DistillConfig& d) { d.profile = WeightProfile{8.0, 0.0}; });
    add("+eos-w1", true, [](DistillConfig& d) { d.profile = WeightProfile{8.0, 1.0}; });
    add("+eos-w5", true, [](DistillConfig& d) { d.profile = WeightProfile{8.0, 5.0}; });

    // Objective variants at the full weight profile.
    add("static-dive", true, [](DistillConfig& d) {
        d.mode = AdapterMode::Static;
        d.profile = WeightProfile{8.0, 5.0};
    });
    add("kl-uniform-ce", true, [](DistillConfig& d) { d.profile = WeightProfile{1.0, 1.0}; });
    add("decisive-ce-no-kl", true, [](DistillConfig& d) {
        d.alpha = 0.0;
        d.profile = WeightProfile{8.0, 5.0};
    });

    // Weight sweeps: one knob moves, the other stays at its full value.
    for (double w : {0.0, 1.0, 3.0, 5.0, 8.0, 10.0})
        add("sweep-path-w" + std::to_string(int(w)), true,
            [w](DistillConfig& d) { d.profile = WeightProfile{w, 5.0}; });
    for (double w : {0.0, 1.0, 2.0, 3.0, 5.0, 8.0})
        add("sweep-eos-w" + std::to_string(int(w)), true,
            [w](DistillConfig& d) { d.profile = WeightProfile{8.0, w}; });
    return rows;
}

AblationOutput ablation_suite(const Backbone& backbone, const TeacherCache& cache,
                              const SynthTask& task, const std::vector<CaseRecord>& train_cases,
                              const std::vector<CaseRecord>& val_cases,
                              const std::vector<CaseRecord>& test_cases,
                              const std::vector<AblationRowSpec>& rows, const DecodeConfig& dec,
                              int w_neg, int w_pos) {
    if (rows.empty()) throw ConfigError("ablation_suite: no rows");
    if (test_cases.empty()) throw ConfigError("ablation_suite: empty test split");

    const Vocab& vocab = task.vocab();
    Matcher matcher = Matcher::compile(PhraseLexicon::for_task(vocab), vocab.size);
    std::vector<int> negations = {vocab.neg_token(0), vocab.neg_token(1)};

    AblationOutput out;
    for (const AblationRowSpec& row : rows) {
        const AdapterSet* adapters = nullptr;
        AdapterSet trained;
        if (row.use_adapters) {
            TrainResult tr =
                train_adapters(row.distill, backbone, cache, task, train_cases, val_cases);
            trained = std::move(tr.adapters);
            adapters = &trained;
        }
        DecodeConfig d = dec;
        if (adapters != nullptr) d.decay_rate = row.distill.decay_rate;
        std::vector<GenRecord> gens = generate_reports(backbone, adapters, task, test_cases, d);
        out.metrics.push_back(
            score_generations(row.id, gens, test_cases, matcher, negations, 5));
        out.profiles.push_back(eos_profile(backbone, adapters, task, test_cases, w_neg, w_pos));
        out.generations.push_back(std::move(gens));
    }
    return out;
}

} // namespace icsteer
