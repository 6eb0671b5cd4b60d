#include "icsteer/synthtask.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "icsteer/errors.hpp"
#include "icsteer/hash.hpp"

namespace icsteer {

// ---------------------------------------------------------------------------
// Vocabulary

Vocab Vocab::build(int n_labels) {
    if (n_labels < 1 || n_labels > 64)
        throw ConfigError("vocab: n_labels must be in [1, 64], got " + std::to_string(n_labels));
    Vocab v;
    v.n_labels = n_labels;
    v.surface = {"<bos>", "<eos>", "<sep>", "<case>", "<report>"};
    for (int i = 0; i < n_labels; ++i) {
        v.surface.push_back("obs" + std::to_string(i) + "+");
        v.surface.push_back("obs" + std::to_string(i) + "-");
    }
    for (int i = 0; i < n_labels; ++i)
        for (char c : {'a', 'b', 'c'}) v.surface.push_back("f" + std::to_string(i) + c);
    v.surface.push_back("no");
    v.surface.push_back("without");
    for (int s = 0; s < 4; ++s)
        for (int p = 0; p < 2; ++p)
            for (int t = 0; t < 3; ++t)
                v.surface.push_back("s" + std::to_string(s) + "p" + std::to_string(p) + "t" +
                                    std::to_string(t));
    for (int p = 0; p < 2; ++p)
        for (char c : {'a', 'b'}) v.surface.push_back("c" + std::to_string(p) + c);
    v.size = int(v.surface.size());
    return v;
}

int Vocab::token_id(const std::string& s) const {
    for (int i = 0; i < size; ++i)
        if (surface[size_t(i)] == s) return i;
    throw ConfigError("vocab: unknown token surface '" + s + "'");
}

void Vocab::save(const std::string& path) const {
    nlohmann::json j;
    j["n_labels"] = n_labels;
    j["tokens"] = surface;
    std::ofstream f(path);
    if (!f) throw ArtifactError("vocab: cannot write " + path);
    f << j.dump(2) << "\n";
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ArtifactError("vocab: cannot read " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError("vocab: malformed JSON in " + path + ": " + e.what());
    }
    if (!j.contains("n_labels") || !j["n_labels"].is_number_integer())
        throw ArtifactError("vocab: field 'n_labels' missing or not an integer in " + path);
    Vocab v = build(j["n_labels"].get<int>());
    if (!j.contains("tokens") || !j["tokens"].is_array())
        throw ArtifactError("vocab: field 'tokens' missing or not an array in " + path);
    auto toks = j["tokens"].get<std::vector<std::string>>();
    if (toks != v.surface)
        throw ArtifactError("vocab: token list in " + path +
                            " does not match the layout for its n_labels");
    return v;
}

// ---------------------------------------------------------------------------
// Config

void TaskConfig::validate() const {
    if (n_labels < 1 || n_labels > 64)
        throw ConfigError("task: n_labels must be in [1, 64], got " + std::to_string(n_labels));
    if (prior < 0.0 || prior >= 1.0)
        throw ConfigError("task: prior must be in [0, 1), got " + std::to_string(prior));
    if (max_active < 0 || max_active > n_labels)
        throw ConfigError("task: max_active must be in [0, n_labels]");
    if (flip_noise < 0.0 || flip_noise >= 0.5)
        throw ConfigError("task: flip_noise must be in [0, 0.5), got " +
                          std::to_string(flip_noise));
    if (glue_prob < 0.0 || glue_prob >= 1.0)
        throw ConfigError("task: glue_prob must be in [0, 1)");
    if (max_report_len < 8)
        throw ConfigError("task: max_report_len must be at least 8");
    if (deploy_style < 0 || deploy_style > 3)
        throw ConfigError("task: deploy_style must be in [0, 3]");
    if (n_distill < 1 || n_pool < 1 || n_val < 1 || n_test < 1)
        throw ConfigError("task: split sizes must be positive");
}

nlohmann::json TaskConfig::to_json() const {
    return nlohmann::json{{"n_labels", n_labels},
                          {"prior", prior},
                          {"max_active", max_active},
                          {"flip_noise", flip_noise},
                          {"glue_prob", glue_prob},
                          {"max_report_len", max_report_len},
                          {"deploy_style", deploy_style},
                          {"n_distill", n_distill},
                          {"n_pool", n_pool},
                          {"n_val", n_val},
                          {"n_test", n_test},
                          {"seed", seed}};
}

namespace {

template <typename T>
T require_field(const nlohmann::json& j, const char* key, const char* type_name, bool (nlohmann::json::*is_type)() const) {
    if (!j.contains(key))
        throw ConfigError(std::string("task config: missing field '") + key + "' (expected " +
                          type_name + ")");
    const auto& v = j.at(key);
    if (!(v.*is_type)())
        throw ConfigError(std::string("task config: field '") + key + "' must be " + type_name);
    return v.get<T>();
}

} // namespace

TaskConfig TaskConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("task config: expected a JSON object");
    static const std::unordered_set<std::string> known = {
        "n_labels", "prior",        "max_active",     "flip_noise", "glue_prob", "max_report_len",
        "deploy_style", "n_distill", "n_pool", "n_val", "n_test", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("task config: unknown field '" + it.key() + "'");
    TaskConfig c;
    if (j.contains("n_labels"))
        c.n_labels = require_field<int>(j, "n_labels", "an integer", &nlohmann::json::is_number_integer);
    if (j.contains("prior"))
        c.prior = require_field<double>(j, "prior", "a number", &nlohmann::json::is_number);
    if (j.contains("max_active"))
        c.max_active = require_field<int>(j, "max_active", "an integer", &nlohmann::json::is_number_integer);
    if (j.contains("flip_noise"))
        c.flip_noise = require_field<double>(j, "flip_noise", "a number", &nlohmann::json::is_number);
    if (j.contains("glue_prob"))
        c.glue_prob = require_field<double>(j, "glue_prob", "a number", &nlohmann::json::is_number);
    if (j.contains("max_report_len"))
        c.max_report_len = require_field<int>(j, "max_report_len", "an integer", &nlohmann::json::is_number_integer);
    if (j.contains("deploy_style"))
        c.deploy_style = require_field<int>(j, "deploy_style", "an integer", &nlohmann::json::is_number_integer);
    if (j.contains("n_distill"))
        c.n_distill = require_field<int>(j, "n_distill", "an integer", &nlohmann::json::is_number_integer);
    if (j.contains("n_pool"))
        c.n_pool = require_field<int>(j, "n_pool", "an integer", &nlohmann::json::is_number_integer);
    if (j.contains("n_val"))
        c.n_val = require_field<int>(j, "n_val", "an integer", &nlohmann::json::is_number_integer);
    if (j.contains("n_test"))
        c.n_test = require_field<int>(j, "n_test", "an integer", &nlohmann::json::is_number_integer);
    if (j.contains("seed"))
        c.seed = require_field<uint64_t>(j, "seed", "an unsigned integer", &nlohmann::json::is_number_unsigned);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Task

SynthTask::SynthTask(TaskConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    vocab_ = Vocab::build(cfg_.n_labels);
    // Styles 0/1: short regime, one template phrase per segment, closing run
    // of one phrase. Styles 2/3: long regime, a negation block of 3..5 absent
    // findings (each behind its own template phrase), closing run of two.
    // Odd styles order labels descending; each long style pins its own
    // negation token.
    styles_ = {
        StyleSpec{0, 1, 1, true, 1, false, -1, 0, 0},
        StyleSpec{1, 1, 1, false, 1, false, -1, 0, 0},
        StyleSpec{2, 1, 1, true, 2, true, vocab_.neg_token(0), 3, 5},
        StyleSpec{3, 1, 1, false, 2, true, vocab_.neg_token(1), 3, 5},
    };
}

namespace {

void append_phrase(std::vector<int>& out, int base, int len) {
    for (int t = 0; t < len; ++t) out.push_back(base + t);
}

} // namespace

std::vector<int> SynthTask::build_report(const StyleSpec& st, const std::vector<int>& labels,
                                         Rng& rng) const {
    std::vector<int> rep;
    auto run_slot = [&](void) {
        if (rng.bernoulli(cfg_.glue_prob))
            append_phrase(rep, vocab_.closing_base(rng.uniform_int(2)), 2);
        else
            append_phrase(rep, vocab_.template_base(st.id, rng.uniform_int(2)), 3);
    };
    auto segment = [&](void) {
        int n = st.run_min + (st.run_max > st.run_min
                                  ? rng.uniform_int(st.run_max - st.run_min + 1)
                                  : 0);
        for (int i = 0; i < n; ++i) run_slot();
    };
    auto mention = [&](int label, int variant) {
        int base = vocab_.finding_base(label);
        if (variant == 0) rep.push_back(base);          // [a]
        else if (variant == 1) append_phrase(rep, base + 1, 2); // [b, c]
        else append_phrase(rep, base, 3);               // [a, b, c]
    };

    std::vector<int> ordered = labels;
    if (!st.ascending) std::reverse(ordered.begin(), ordered.end());

    for (int label : ordered) {
        segment();
        mention(label, rng.uniform_int(3));
    }
    if (ordered.empty()) segment();

    if (st.long_regime) {
        std::vector<int> absent;
        for (int i = 0; i < cfg_.n_labels; ++i)
            if (!std::binary_search(labels.begin(), labels.end(), i)) absent.push_back(i);
        int want = st.neg_min + rng.uniform_int(st.neg_max - st.neg_min + 1);
        int n_neg = std::min<int>(want, int(absent.size()));
        std::vector<int> pick_idx = rng.sample_without_replacement(int(absent.size()), n_neg);
        std::vector<int> negged;
        for (int k : pick_idx) negged.push_back(absent[size_t(k)]);
        std::sort(negged.begin(), negged.end());
        if (!st.ascending) std::reverse(negged.begin(), negged.end());
        for (int label : negged) {
            segment();
            rep.push_back(st.neg_token);
            // Negated mentions use only the [a] and [b, c] variants so every
            // phrase occurrence they create starts right after the negation
            // token (the three-token variant would embed an unguarded [b, c]).
            mention(label, rng.uniform_int(2));
        }
    }

    for (int i = 0; i < st.closing_len; ++i)
        append_phrase(rep, vocab_.closing_base(rng.uniform_int(2)), 2);
    rep.push_back(Vocab::eos);
    return rep;
}

CaseRecord SynthTask::sample_case(int style, Rng& rng) const {
    if (style < 0 || style >= int(styles_.size()))
        throw ConfigError("sample_case: style must be in [0, 3], got " + std::to_string(style));
    const StyleSpec& st = styles_[size_t(style)];

    CaseRecord c;
    c.style = style;
    for (;;) {
        c.labels.clear();
        for (int i = 0; i < cfg_.n_labels; ++i)
            if (rng.bernoulli(cfg_.prior)) c.labels.push_back(i);
        if (int(c.labels.size()) <= cfg_.max_active) break;
    }
    c.cond.clear();
    for (int i = 0; i < cfg_.n_labels; ++i) {
        bool active = std::binary_search(c.labels.begin(), c.labels.end(), i);
        if (rng.bernoulli(cfg_.flip_noise)) active = !active;
        c.cond.push_back(active ? vocab_.obs_pos(i) : vocab_.obs_neg(i));
    }
    do {
        c.report = build_report(st, c.labels, rng);
    } while (int(c.report.size()) > cfg_.max_report_len);
    return c;
}

PromptLayout SynthTask::build_prompt(const CaseRecord& c,
                                     const std::vector<const CaseRecord*>& demos,
                                     int max_context) const {
    PromptLayout p;
    p.tokens.push_back(Vocab::bos);
    for (const CaseRecord* d : demos) {
        if (d == nullptr) throw ConfigError("build_prompt: null demonstration");
        if (d->style != c.style)
            throw ConfigError("build_prompt: demonstration style " + std::to_string(d->style) +
                              " does not match query style " + std::to_string(c.style));
        int begin = int(p.tokens.size());
        p.tokens.insert(p.tokens.end(), d->report.begin(), d->report.end());
        p.demo_spans.emplace_back(begin, int(p.tokens.size()));
        p.tokens.push_back(Vocab::sep);
    }
    p.tokens.push_back(Vocab::case_marker);
    p.cond_begin = int(p.tokens.size());
    p.tokens.insert(p.tokens.end(), c.cond.begin(), c.cond.end());
    p.cond_end = int(p.tokens.size());
    p.tokens.push_back(Vocab::report_marker);
    p.answer_begin = int(p.tokens.size());
    p.tokens.insert(p.tokens.end(), c.report.begin(), c.report.end());
    p.answer_end = int(p.tokens.size());
    if (int(p.tokens.size()) > max_context)
        throw NumericError("build_prompt: prompt length " + std::to_string(p.tokens.size()) +
                           " exceeds max_context " + std::to_string(max_context));
    return p;
}

SynthTask::Splits SynthTask::make_splits() const {
    Rng rng(mix_seed(cfg_.seed, "synthtask-splits"));
    Splits s;
    int next_id = 0;
    auto fill = [&](std::vector<CaseRecord>& out, int n, const char* split) {
        out.reserve(size_t(n));
        for (int i = 0; i < n; ++i) {
            CaseRecord c = sample_case(cfg_.deploy_style, rng);
            c.id = next_id++;
            c.split = split;
            out.push_back(std::move(c));
        }
    };
    fill(s.distill, cfg_.n_distill, "distill");
    fill(s.pool, cfg_.n_pool, "pool");
    fill(s.val, cfg_.n_val, "val");
    fill(s.test, cfg_.n_test, "test");
    return s;
}

// ---------------------------------------------------------------------------
// Grammar validity

bool SynthTask::parse_report(int style, const std::vector<int>& report, std::string* why) const {
    auto fail = [&](const std::string& msg) {
        if (why) *why = msg;
        return false;
    };
    if (style < 0 || style >= int(styles_.size())) return fail("style out of range");
    const StyleSpec& st = styles_[size_t(style)];
    if (report.empty()) return fail("empty report");
    if (report.back() != Vocab::eos) return fail("report does not end with EOS");
    for (size_t i = 0; i + 1 < report.size(); ++i)
        if (report[i] == Vocab::eos)
            return fail("interior EOS at position " + std::to_string(i));

    const int n = int(report.size()) - 1; // tokens before EOS
    int i = 0;
    auto at = [&](int k) { return k < n ? report[size_t(k)] : -1; };
    while (i < n) {
        int t = at(i);
        bool is_template = false;
        for (int p = 0; p < 2 && !is_template; ++p) {
            int base = vocab_.template_base(style, p);
            if (t == base) {
                if (at(i + 1) != base + 1 || at(i + 2) != base + 2)
                    return fail("broken template phrase at position " + std::to_string(i));
                i += 3;
                is_template = true;
            } else if (t == base + 1 || t == base + 2) {
                return fail("template phrase does not start at its first token at position " +
                            std::to_string(i));
            }
        }
        if (is_template) continue;

        bool is_closing = false;
        for (int p = 0; p < 2 && !is_closing; ++p) {
            int base = vocab_.closing_base(p);
            if (t == base) {
                if (at(i + 1) != base + 1)
                    return fail("broken closing phrase at position " + std::to_string(i));
                i += 2;
                is_closing = true;
            } else if (t == base + 1) {
                return fail("closing phrase does not start at its first token at position " +
                            std::to_string(i));
            }
        }
        if (is_closing) continue;

        bool negated = false;
        if (t == vocab_.neg_token(0) || t == vocab_.neg_token(1)) {
            if (!st.long_regime || t != st.neg_token)
                return fail("negation token foreign to this style at position " +
                            std::to_string(i));
            negated = true;
            ++i;
            t = at(i);
        }
        if (vocab_.is_finding(t)) {
            int label = vocab_.finding_label(t);
            int base = vocab_.finding_base(label);
            int k = t - base;
            if (k == 0) {
                if (at(i + 1) == base + 1 && at(i + 2) == base + 2) {
                    if (negated)
                        return fail("negated three-token mention at position " +
                                    std::to_string(i));
                    i += 3; // [a, b, c]
                } else {
                    i += 1; // [a]
                }
            } else if (k == 1) {
                if (at(i + 1) != base + 2)
                    return fail("broken [b, c] mention at position " + std::to_string(i));
                i += 2; // [b, c]
            } else {
                return fail("mention starts mid-phrase at position " + std::to_string(i));
            }
            continue;
        }
        if (negated) return fail("negation token not followed by a mention");
        return fail("unexpected token " + std::to_string(t) + " at position " +
                    std::to_string(i));
    }
    if (why) why->clear();
    return true;
}

// ---------------------------------------------------------------------------
// Dataset files

void save_cases_jsonl(const std::string& path, const std::vector<CaseRecord>& cases) {
    std::ofstream f(path);
    if (!f) throw ArtifactError("dataset: cannot write " + path);
    for (const CaseRecord& c : cases) {
        nlohmann::json j{{"id", c.id},       {"style", c.style},   {"cond", c.cond},
                         {"report", c.report}, {"labels", c.labels}, {"split", c.split}};
        f << j.dump() << "\n";
    }
}

std::vector<CaseRecord> load_cases_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ArtifactError("dataset: cannot read " + path);
    std::vector<CaseRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ArtifactError("dataset: malformed JSON on line " + std::to_string(lineno) +
                                " of " + path + ": " + e.what());
        }
        for (const char* key : {"id", "style", "cond", "report", "labels", "split"})
            if (!j.contains(key))
                throw ArtifactError("dataset: line " + std::to_string(lineno) + " of " + path +
                                    " is missing field '" + key + "'");
        CaseRecord c;
        c.id = j.at("id").get<int>();
        c.style = j.at("style").get<int>();
        c.cond = j.at("cond").get<std::vector<int>>();
        c.report = j.at("report").get<std::vector<int>>();
        c.labels = j.at("labels").get<std::vector<int>>();
        c.split = j.at("split").get<std::string>();
        if (c.report.empty() || c.report.back() != Vocab::eos)
            throw ArtifactError("dataset: record id " + std::to_string(c.id) +
                                " has a report without terminal EOS");
        if (!std::is_sorted(c.labels.begin(), c.labels.end()))
            throw ArtifactError("dataset: record id " + std::to_string(c.id) +
                                " has unsorted labels");
        out.push_back(std::move(c));
    }
    return out;
}

void check_disjoint_ids(const std::vector<const std::vector<CaseRecord>*>& splits) {
    std::unordered_map<int, std::string> seen;
    for (const auto* split : splits) {
        for (const CaseRecord& c : *split) {
            auto [it, fresh] = seen.emplace(c.id, c.split);
            if (!fresh)
                throw ArtifactError("dataset: case id " + std::to_string(c.id) +
                                    " appears in both '" + it->second + "' and '" + c.split +
                                    "'");
        }
    }
}

} // namespace icsteer
