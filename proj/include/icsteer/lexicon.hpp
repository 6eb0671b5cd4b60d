#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "icsteer/synthtask.hpp"

namespace icsteer {

// Label -> token-id phrase variants. Every label has at least one nonempty
// variant and no label repeats a variant.
struct PhraseLexicon {
    struct Entry {
        int label = 0;
        std::vector<std::vector<int>> variants;
    };
    std::vector<Entry> entries;

    void validate() const; // throws ConfigError

    // Mention variants used by the synthetic task: for finding tokens
    // (a, b, c) of each label the surface forms [a], [b, c] and [a, b, c].
    static PhraseLexicon for_task(const Vocab& vocab);

    // Human-readable file: label names with phrase surface strings, compiled
    // against the vocabulary at load time.
    void save(const std::string& path, const Vocab& vocab) const;
    static PhraseLexicon load(const std::string& path, const Vocab& vocab);
};

struct Match {
    int begin = 0;   // token index of the first phrase token
    int len = 0;     // phrase length in tokens
    int label = 0;   // owning label
    int variant = 0; // index into the label's variant list
};

// Aho-Corasick automaton over token ids: one left-to-right pass reports every
// occurrence of every phrase with its label.
class Matcher {
  public:
    static Matcher compile(const PhraseLexicon& lex, int vocab_size);

    std::vector<Match> find_all(const std::vector<int>& seq) const;

    int vocab_size() const { return vocab_size_; }

  private:
    struct Output {
        int label, variant, len;
    };
    int vocab_size_ = 0;
    std::vector<int> next_;                   // dense state x token transitions
    std::vector<std::vector<Output>> out_;    // merged outputs per state
};

struct MaskPair {
    std::vector<uint8_t> path; // decisive finding-phrase tokens (never EOS)
    std::vector<uint8_t> eos;  // exactly one bit, at the final EOS
};

// Path mask = union of all matched phrase spans of *active* labels; matches
// of inactive labels are ignored. The reference must end with its single EOS
// token (NumericError otherwise). Empty active set gives an all-zero path.
MaskPair mark_decisive(const std::vector<int>& reference, const std::vector<int>& active_labels,
                       const Matcher& matcher, int eos_id);

struct WeightProfile {
    double path_weight = 1.0;
    double eos_weight = 1.0;

    void validate() const; // throws ConfigError (weights must be >= 0)
    bool operator==(const WeightProfile&) const = default;
};

// Per-position loss weights: eos_weight at the EOS bit, path_weight on path
// bits, 1 elsewhere.
std::vector<double> weights_from_masks(const MaskPair& masks, const WeightProfile& profile);

// Labels considered "reported present": some phrase of the label occurs and
// is not immediately preceded by a negation token. Returns sorted labels.
std::vector<int> extract_present_labels(const std::vector<int>& seq, const Matcher& matcher,
                                        const std::vector<int>& negation_tokens);

} // namespace icsteer
