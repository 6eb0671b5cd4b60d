#pragma once
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsteer/matrix.hpp"
#include "icsteer/steering.hpp"
#include "icsteer/tape.hpp"

namespace icsteer {

// Decoder-only pre-norm transformer: learned token + position embeddings,
// per-layer {LN, multi-head causal attention, LN, GELU MLP}, final LN and an
// untied output head. Residual-branch outputs (after the attention output
// projection resp. the MLP down projection, before the residual add) are the
// adapter attachment points.
struct BackboneConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 256;
    int max_context = 512;
    uint64_t init_seed = 1;

    void validate() const; // throws ConfigError
    nlohmann::json to_json() const;
    static BackboneConfig from_json(const nlohmann::json& j);
    bool operator==(const BackboneConfig&) const = default;
};

struct LayerParams {
    Matrix ln1_g, ln1_b;
    Matrix w_qkv, b_qkv; // d x 3d, 1 x 3d
    Matrix w_o, b_o;     // d x d,  1 x d
    Matrix ln2_g, ln2_b;
    Matrix w_fc, b_fc;     // d x ff, 1 x ff
    Matrix w_proj, b_proj; // ff x d, 1 x d
};

struct BackboneParams {
    Matrix tok_emb; // V x d
    Matrix pos_emb; // max_context x d
    std::vector<LayerParams> layers;
    Matrix lnf_g, lnf_b;
    Matrix w_head; // d x V (untied)
};

// Branch outputs recorded during a forward pass, before any injection:
// taps[layer][0] = attention branch, taps[layer][1] = MLP branch.
struct BranchTaps {
    std::vector<std::array<Matrix, 2>> taps;
};

// Node ids of interest from a tape-recorded forward pass.
struct ForwardNodes {
    NodeId logits = -1;
    std::vector<NodeId> backbone_params; // canonical order (empty names elided)
    std::vector<NodeId> adapter_params;  // canonical order, when adapters bound
};

struct DecodeConfig {
    int max_new_tokens = 128;
    int eos_id = 1;
    // Adapter residuals at generated position j are scaled by
    // decay_schedule(decay_rate, j); prompt positions use scale 1.
    double decay_rate = 1.0;
};

struct GenResult {
    std::vector<int> tokens;      // generated tokens, including terminal EOS if emitted
    std::vector<double> eos_prob; // P(EOS) at each decode step, temperature 1
    bool stopped_eos = false;     // false = token budget exhausted
};

class Backbone {
  public:
    BackboneConfig cfg;
    BackboneParams params;

    // Seeded Gaussian init (std 0.02); residual output projections are scaled
    // by 1/sqrt(2*n_layers); biases zero; LN gains one.
    static Backbone init(const BackboneConfig& cfg);

    // Teacher-forced forward over a full token sequence. Returns logits
    // (T x V). Optional adapters inject at every branch; inject_scales gives
    // a per-position residual scale (nullptr = all ones). Optional taps
    // record pre-injection branch outputs.
    Matrix forward(const std::vector<int>& tokens, const AdapterSet* adapters = nullptr,
                   const std::vector<double>* inject_scales = nullptr,
                   BranchTaps* taps = nullptr) const;

    // Tape-recorded forward for training. train_backbone selects whether the
    // backbone parameters enter as differentiable leaves or as frozen
    // constants (frozen parameters never receive gradient buffers).
    ForwardNodes build_forward(Tape& tape, const std::vector<int>& tokens, bool train_backbone,
                               const AdapterSet* adapters, bool train_adapters,
                               const std::vector<double>* inject_scales) const;

    // Greedy incremental decoding with per-layer KV caches; bit-identical to
    // re-running forward() over the grown sequence with matching scales.
    GenResult generate(const std::vector<int>& prompt, const AdapterSet* adapters,
                       const DecodeConfig& dec) const;

    // P(next token = eos) after each prefix tokens[0..t], from one forward.
    std::vector<double> eos_prob_per_position(const std::vector<int>& tokens, int eos_id,
                                              const AdapterSet* adapters = nullptr) const;
    // Greedy next token (optionally excluding EOS from the argmax) and the
    // EOS probability at this step.
    std::pair<int, double> greedy_step(const std::vector<int>& tokens, int eos_id,
                                       const AdapterSet* adapters, bool exclude_eos) const;

    void for_each_param(const std::function<void(const std::string&, Matrix&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Matrix&)>& fn) const;
    size_t n_params() const;

    // Checkpoint I/O (32-bit tensor storage). Loading validates shapes and,
    // when `expected` is given, rejects a mismatched architecture.
    void save(const std::string& path, const nlohmann::json& extra_meta) const;
    static Backbone load(const std::string& path, const BackboneConfig* expected = nullptr,
                         nlohmann::json* meta_out = nullptr);

  private:
    void alloc();
};

} // namespace icsteer
