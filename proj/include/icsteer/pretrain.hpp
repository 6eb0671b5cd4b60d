#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsteer/backbone.hpp"
#include "icsteer/synthtask.hpp"

namespace icsteer {

// Language-model pretraining over a stream of freshly sampled prompts with
// mixed styles and mixed demonstration counts k in {0..k_max}. The loss is
// next-token cross-entropy over every position of the prompt (demonstrations
// included), averaged per sequence and then over the batch.
struct PretrainConfig {
    int steps = 20000;
    double lr = 3e-4;
    double warmup_frac = 0.05; // linear warmup, then constant
    int batch_size = 32;
    double grad_clip = 1.0; // global-norm clip; <= 0 disables
    int k_max = 8;
    // Sampling weights for k = 0..k_max (need not be normalized). Empty picks
    // a built-in mix: for k_max = 8 a small-k-heavy mix that still covers
    // every k (long 8-shot prompts dominate compute), otherwise uniform.
    std::vector<double> shot_weights;
    uint64_t seed = 7;

    void validate() const; // throws ConfigError
    std::vector<double> effective_shot_weights() const;
    nlohmann::json to_json() const;
    static PretrainConfig from_json(const nlohmann::json& j);
    bool operator==(const PretrainConfig&) const = default;
};

// Warmup-then-constant learning rate at a 0-based step index.
double lr_at_step(const PretrainConfig& cfg, long long step);

struct PretrainResult {
    Backbone backbone;
    std::vector<double> step_loss; // batch loss per step
    double final_loss = 0.0;       // mean over the last up-to-20 steps
};

// Deterministic given (config seed, backbone init seed). Aborts with
// NumericError naming the step if the loss turns non-finite. Optional
// log_path writes per-step JSONL {step, L, lr}.
PretrainResult pretrain(const BackboneConfig& bcfg, const SynthTask& task,
                        const PretrainConfig& cfg, const std::string& log_path = "");

// Pooled teacher-forced cross-entropy over answer regions of freshly sampled
// cases at a fixed demonstration count. style < 0 mixes all styles.
double answer_region_ce(const Backbone& b, const SynthTask& task, int shots, int n_cases,
                        uint64_t seed, const AdapterSet* adapters = nullptr, int style = -1);

// Paired comparison on identical cases: answer-region CE with `shots`
// demonstrations vs none. rel_gap = (ce_zero - ce_few) / ce_zero.
struct IclGap {
    double ce_zero_shot = 0.0;
    double ce_few_shot = 0.0;
    double rel_gap = 0.0;
};
IclGap icl_gap(const Backbone& b, const SynthTask& task, int shots, int n_cases, uint64_t seed);

// Zero-shot greedy next-token accuracy over answer regions, split into
// decisive finding-phrase targets and everything else except EOS.
struct TokenAccuracy {
    double template_acc = 0.0, finding_acc = 0.0;
    long long template_n = 0, finding_n = 0;
};
TokenAccuracy zero_shot_token_accuracy(const Backbone& b, const SynthTask& task, int n_cases,
                                       uint64_t seed);

} // namespace icsteer
