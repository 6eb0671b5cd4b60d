#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsteer/backbone.hpp"
#include "icsteer/lexicon.hpp"
#include "icsteer/synthtask.hpp"

namespace icsteer {

// Order-sensitive content fingerprint of a case list; ties a teacher cache to
// the exact dataset it was built from.
uint64_t dataset_fingerprint(const std::vector<CaseRecord>& cases);

// Teacher supervision for one answer position: the K largest teacher logits
// (descending, ties broken by ascending id) with their raw values.
struct CachePosition {
    std::vector<int32_t> ids;
    std::vector<float> logits;
};

struct TeacherCacheRecord {
    int case_id = -1;
    std::vector<CachePosition> positions; // one per answer token, incl. EOS
};

// Cached teacher-forced top-K logits of the demonstration-conditioned
// backbone over the answer region of every case.
struct TeacherCache {
    int k = 0;
    int shots = 0;
    double temperature = 2.0;
    uint64_t dataset_hash = 0;
    std::vector<TeacherCacheRecord> records;

    void save(const std::string& path) const;
    static TeacherCache load(const std::string& path);
    const TeacherCacheRecord* find(int case_id) const;
};

struct CacheBuildReport {
    int cached = 0;
    std::vector<int> skipped_ids; // prompts that overflowed the context
};

// Run the frozen backbone over `shots`-demonstration teacher prompts for
// every case and record the top-K logits at each answer position. Demos are
// drawn per case (uniform, without replacement) from the pool; the draw is
// keyed by (seed, case id) so results do not depend on evaluation order.
TeacherCache cache_teacher(const Backbone& backbone, const SynthTask& task,
                           const std::vector<CaseRecord>& cases,
                           const std::vector<CaseRecord>& demo_pool, int k, int shots,
                           double temperature, uint64_t seed,
                           CacheBuildReport* report = nullptr);

// Teacher-side restricted distribution: logits/tau softmaxed over the cached
// support, floored at 1e-12 and renormalized.
std::vector<double> restricted_teacher_probs(const CachePosition& pos, double tau);

struct DistillConfig {
    double alpha = 0.8;       // L = alpha * L_KL + (1 - alpha) * L_CE
    double temperature = 2.0; // KL temperature
    int top_k = 32;
    double lr = 1e-4;
    int epochs = 5;
    int batch_size = 8;
    WeightProfile profile{8.0, 5.0};
    double rho = 2.0;
    int rank = 16;
    AdapterMode mode = AdapterMode::Dynamic;
    double decay_rate = 1.0; // stored on the adapters for decode time
    int teacher_shots = 8;
    uint64_t seed = 1;

    void validate() const; // throws ConfigError
    nlohmann::json to_json() const;
    static DistillConfig from_json(const nlohmann::json& j);
    bool operator==(const DistillConfig&) const = default;
};

// One training step (or epoch) summarized. l == alpha*l_kl + (1-alpha)*l_ce
// exactly; the three masses partition sum_w.
struct LossBreakdown {
    double l = 0.0, l_ce = 0.0, l_kl = 0.0;
    double sum_w = 0.0;
    double mass_template = 0.0, mass_path = 0.0, mass_eos = 0.0;
};

struct TrainResult {
    AdapterSet adapters;
    std::vector<LossBreakdown> epochs; // losses are per-sequence means;
                                       // sum_w and masses are epoch totals
    double val_start = 0.0; // mean validation loss at zero init
    double val_final = 0.0; // mean validation loss after the last epoch
};

// Distill the cached teacher into adapters on a frozen backbone. Student
// passes are query-only (no demonstrations) at injection scale 1; only
// adapter parameters receive gradients. The cache must cover train and val
// cases: its dataset hash is checked against fingerprint(train + val).
// Optional log_path writes per-step JSONL {step, L, L_CE, L_KL, sum_w}.
TrainResult train_adapters(const DistillConfig& cfg, const Backbone& backbone,
                           const TeacherCache& cache, const SynthTask& task,
                           const std::vector<CaseRecord>& train_cases,
                           const std::vector<CaseRecord>& val_cases,
                           const std::string& log_path = "");

// Total per-category supervision mass over a case list: sums of w_t over
// template/grammar positions, decisive path positions, and EOS positions.
struct SupervisionMass {
    double template_mass = 0.0, path_mass = 0.0, eos_mass = 0.0;
    double total() const { return template_mass + path_mass + eos_mass; }
};

SupervisionMass supervision_mass(const std::vector<CaseRecord>& cases, const Matcher& matcher,
                                 int eos_id, const WeightProfile& profile);

} // namespace icsteer
