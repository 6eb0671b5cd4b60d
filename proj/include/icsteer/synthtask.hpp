#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsteer/rng.hpp"

namespace icsteer {

// Synthetic long-form report task. A case pairs an observation prefix (one
// token per finding label, noisily encoding which findings are active) with a
// style-conditioned reference report: template phrase runs, sparse finding
// mentions, an optional negation block (long styles), a closing run, and a
// single terminal EOS. Closing phrases also appear mid-report as glue, so the
// end of a report is not signalled by any single local token.
//
// Vocabulary layout (contiguous id blocks, F = n_labels = 14 by default):
//   0..4      special: <bos> <eos> <sep> <case> <report>
//   5..4+2F   observations: obs{i}+ at 5+2i, obs{i}- at 6+2i
//   5+2F..    finding tokens: 3 per label (f{i}a, f{i}b, f{i}c)
//   +2        negation tokens: "no", "without"
//   +24       template tokens: 4 styles x 2 phrases x 3 tokens
//   +4        closing tokens: 2 phrases x 2 tokens
struct Vocab {
    int n_labels = 0;
    int size = 0;
    std::vector<std::string> surface; // id -> string

    static constexpr int bos = 0, eos = 1, sep = 2, case_marker = 3, report_marker = 4;

    static Vocab build(int n_labels);

    int obs_pos(int label) const { return 5 + 2 * label; }
    int obs_neg(int label) const { return 6 + 2 * label; }
    int finding_base(int label) const { return 5 + 2 * n_labels + 3 * label; }
    int neg_token(int which) const { return 5 + 5 * n_labels + which; } // which in {0,1}
    int template_base(int style, int phrase) const {
        return 5 + 5 * n_labels + 2 + 6 * style + 3 * phrase;
    }
    int closing_base(int phrase) const { return 5 + 5 * n_labels + 26 + 2 * phrase; }

    bool is_finding(int id) const {
        return id >= finding_base(0) && id < finding_base(0) + 3 * n_labels;
    }
    int finding_label(int id) const { return (id - finding_base(0)) / 3; }
    int token_id(const std::string& s) const; // throws ConfigError if unknown

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);
};

struct StyleSpec {
    int id = 0;
    int run_min = 1, run_max = 1; // template phrases per segment
    bool ascending = true;        // label emission order
    int closing_len = 1;          // closing phrases before EOS
    bool long_regime = false;
    int neg_token = -1;           // style-pinned negation token (-1: none)
    int neg_min = 0, neg_max = 0; // negated absent-label mentions
};

struct TaskConfig {
    int n_labels = 14;
    double prior = 0.22;      // per-label activation probability
    int max_active = 6;       // resample when exceeded
    double flip_noise = 0.05; // observation token flip probability
    double glue_prob = 0.2;   // closing phrase in a template-run slot
    int max_report_len = 56;  // including EOS; longer samples are redrawn
    int deploy_style = 2;     // style of distill/pool/val/test splits
    int n_distill = 256, n_pool = 512, n_val = 64, n_test = 256;
    uint64_t seed = 1234;

    void validate() const; // throws ConfigError
    nlohmann::json to_json() const;
    static TaskConfig from_json(const nlohmann::json& j);
    bool operator==(const TaskConfig&) const = default;
};

struct CaseRecord {
    int id = -1;
    int style = 0;
    std::vector<int> cond;   // observation prefix, n_labels tokens
    std::vector<int> report; // ends with the unique EOS
    std::vector<int> labels; // active labels, sorted ascending
    std::string split;
};

// Token layout of one model input. All spans are [begin, end) into tokens.
struct PromptLayout {
    std::vector<int> tokens;
    int answer_begin = 0, answer_end = 0; // reference report incl. EOS
    int cond_begin = 0, cond_end = 0;     // observation tokens
    std::vector<std::pair<int, int>> demo_spans;
};

class SynthTask {
  public:
    explicit SynthTask(TaskConfig cfg);

    const TaskConfig& config() const { return cfg_; }
    const Vocab& vocab() const { return vocab_; }
    const std::vector<StyleSpec>& styles() const { return styles_; }

    // Draw a case: label set from the priors (resampled while more than
    // max_active labels fire), noisy observation prefix, style-conditioned
    // report (redrawn while longer than max_report_len).
    CaseRecord sample_case(int style, Rng& rng) const;

    // [bos] (demo report, sep)* [case] obs.. [report] reference-report.
    // Demonstrations contribute their report text only and must share the
    // query's style. Throws NumericError when the result exceeds max_context.
    PromptLayout build_prompt(const CaseRecord& c, const std::vector<const CaseRecord*>& demos,
                              int max_context) const;

    struct Splits {
        std::vector<CaseRecord> distill, pool, val, test;
    };
    // Deterministic in config().seed; ids globally unique across splits;
    // every split uses the deployment style.
    Splits make_splits() const;

    // Checks that a report tokenizes under its style's grammar into template
    // phrases, glue/closing phrases, finding mentions, negated mentions, and
    // a final unique EOS. On failure returns false and explains via `why`.
    bool parse_report(int style, const std::vector<int>& report,
                      std::string* why = nullptr) const;

  private:
    std::vector<int> build_report(const StyleSpec& st, const std::vector<int>& labels,
                                  Rng& rng) const;

    TaskConfig cfg_;
    Vocab vocab_;
    std::vector<StyleSpec> styles_;
};

// Line-delimited case records ({id, style, cond, report, labels, split}).
void save_cases_jsonl(const std::string& path, const std::vector<CaseRecord>& cases);
std::vector<CaseRecord> load_cases_jsonl(const std::string& path);

// Throws ArtifactError when two records (across all lists) share an id.
void check_disjoint_ids(const std::vector<const std::vector<CaseRecord>*>& splits);

} // namespace icsteer
