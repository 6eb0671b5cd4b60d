#include "icsteer/lexicon.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>

#include "icsteer/errors.hpp"

namespace icsteer {

void PhraseLexicon::validate() const {
    if (entries.empty()) throw ConfigError("lexicon: no labels");
    std::set<int> labels;
    for (const Entry& e : entries) {
        if (!labels.insert(e.label).second)
            throw ConfigError("lexicon: duplicate label " + std::to_string(e.label));
        if (e.variants.empty())
            throw ConfigError("lexicon: label " + std::to_string(e.label) + " has no phrases");
        std::set<std::vector<int>> seen;
        for (const auto& v : e.variants) {
            if (v.empty())
                throw ConfigError("lexicon: label " + std::to_string(e.label) +
                                  " has an empty phrase");
            if (!seen.insert(v).second)
                throw ConfigError("lexicon: label " + std::to_string(e.label) +
                                  " repeats a phrase");
        }
    }
}

PhraseLexicon PhraseLexicon::for_task(const Vocab& vocab) {
    PhraseLexicon lex;
    for (int i = 0; i < vocab.n_labels; ++i) {
        int a = vocab.finding_base(i);
        Entry e;
        e.label = i;
        e.variants = {{a}, {a + 1, a + 2}, {a, a + 1, a + 2}};
        lex.entries.push_back(std::move(e));
    }
    lex.validate();
    return lex;
}

void PhraseLexicon::save(const std::string& path, const Vocab& vocab) const {
    validate();
    std::ofstream f(path);
    if (!f) throw ArtifactError("lexicon: cannot write " + path);
    nlohmann::json labels = nlohmann::json::array();
    for (const Entry& e : entries) {
        nlohmann::json phrases = nlohmann::json::array();
        for (const auto& v : e.variants) {
            nlohmann::json phrase = nlohmann::json::array();
            for (int id : v) {
                if (id < 0 || id >= vocab.size)
                    throw ConfigError("lexicon: token id " + std::to_string(id) +
                                      " outside the vocabulary");
                phrase.push_back(vocab.surface[size_t(id)]);
            }
            phrases.push_back(std::move(phrase));
        }
        labels.push_back(nlohmann::json{{"label", e.label}, {"phrases", std::move(phrases)}});
    }
    f << nlohmann::json{{"labels", std::move(labels)}}.dump(2) << "\n";
}

PhraseLexicon PhraseLexicon::load(const std::string& path, const Vocab& vocab) {
    std::ifstream f(path);
    if (!f) throw ArtifactError("lexicon: cannot read " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError("lexicon: malformed JSON in " + path + ": " + e.what());
    }
    if (!j.contains("labels") || !j["labels"].is_array())
        throw ArtifactError("lexicon: field 'labels' missing or not an array in " + path);
    PhraseLexicon lex;
    for (const auto& lj : j["labels"]) {
        Entry e;
        if (!lj.contains("label") || !lj["label"].is_number_integer())
            throw ArtifactError("lexicon: entry without integer 'label' in " + path);
        e.label = lj["label"].get<int>();
        if (!lj.contains("phrases") || !lj["phrases"].is_array())
            throw ArtifactError("lexicon: label " + std::to_string(e.label) +
                                " without 'phrases' array in " + path);
        for (const auto& pj : lj["phrases"]) {
            std::vector<int> phrase;
            for (const auto& tok : pj) {
                if (!tok.is_string())
                    throw ArtifactError("lexicon: non-string token surface in " + path);
                phrase.push_back(vocab.token_id(tok.get<std::string>()));
            }
            e.variants.push_back(std::move(phrase));
        }
        lex.entries.push_back(std::move(e));
    }
    lex.validate();
    return lex;
}

// ---------------------------------------------------------------------------
// Matcher

Matcher Matcher::compile(const PhraseLexicon& lex, int vocab_size) {
    lex.validate();
    if (vocab_size < 1) throw ConfigError("matcher: vocab_size must be positive");
    Matcher m;
    m.vocab_size_ = vocab_size;

    // Trie construction. State 0 is the root; `next_` doubles as the goto
    // function during construction (-1 = absent) and the full transition
    // function after the BFS fills in failure transitions.
    std::vector<std::vector<Output>> own(1);
    m.next_.assign(size_t(vocab_size), -1);
    auto alloc_state = [&]() {
        m.next_.resize(m.next_.size() + size_t(vocab_size), -1);
        own.emplace_back();
        return int(own.size()) - 1;
    };
    auto tr = [&](int state, int tok) -> int& { return m.next_[size_t(state) * size_t(vocab_size) + size_t(tok)]; };

    for (const auto& e : lex.entries) {
        for (size_t vi = 0; vi < e.variants.size(); ++vi) {
            int state = 0;
            for (int tok : e.variants[vi]) {
                if (tok < 0 || tok >= vocab_size)
                    throw ConfigError("matcher: phrase token " + std::to_string(tok) +
                                      " outside the vocabulary");
                // Indexed access: alloc_state() grows next_, so a reference
                // taken before the call would dangle.
                size_t idx = size_t(state) * size_t(vocab_size) + size_t(tok);
                if (m.next_[idx] == -1) {
                    int ns = alloc_state();
                    m.next_[idx] = ns;
                }
                state = m.next_[idx];
            }
            own[size_t(state)].push_back({e.label, int(vi), int(e.variants[vi].size())});
        }
    }

    // Breadth-first failure links; outputs are merged down the link chain so
    // find_all never walks links at match time.
    int n_states = int(own.size());
    std::vector<int> fail(size_t(n_states), 0);
    m.out_.resize(size_t(n_states));
    m.out_[0] = own[0];
    std::queue<int> bfs;
    for (int tok = 0; tok < vocab_size; ++tok) {
        int& slot = tr(0, tok);
        if (slot == -1) {
            slot = 0;
        } else {
            fail[size_t(slot)] = 0;
            bfs.push(slot);
        }
    }
    while (!bfs.empty()) {
        int state = bfs.front();
        bfs.pop();
        m.out_[size_t(state)] = own[size_t(state)];
        const auto& inherited = m.out_[size_t(fail[size_t(state)])];
        m.out_[size_t(state)].insert(m.out_[size_t(state)].end(), inherited.begin(),
                                     inherited.end());
        for (int tok = 0; tok < vocab_size; ++tok) {
            int& slot = tr(state, tok);
            if (slot == -1) {
                slot = tr(fail[size_t(state)], tok);
            } else {
                fail[size_t(slot)] = tr(fail[size_t(state)], tok);
                bfs.push(slot);
            }
        }
    }
    return m;
}

std::vector<Match> Matcher::find_all(const std::vector<int>& seq) const {
    std::vector<Match> matches;
    int state = 0;
    for (int i = 0; i < int(seq.size()); ++i) {
        int tok = seq[size_t(i)];
        if (tok < 0 || tok >= vocab_size_)
            throw NumericError("matcher: token " + std::to_string(tok) +
                               " outside the vocabulary at position " + std::to_string(i));
        state = next_[size_t(state) * size_t(vocab_size_) + size_t(tok)];
        for (const Output& o : out_[size_t(state)])
            matches.push_back(Match{i - o.len + 1, o.len, o.label, o.variant});
    }
    return matches;
}

// ---------------------------------------------------------------------------
// Decisive-position masks and weights

MaskPair mark_decisive(const std::vector<int>& reference, const std::vector<int>& active_labels,
                       const Matcher& matcher, int eos_id) {
    if (reference.empty()) throw NumericError("mark_decisive: empty reference");
    if (reference.back() != eos_id)
        throw NumericError("mark_decisive: reference does not end with EOS");
    for (size_t i = 0; i + 1 < reference.size(); ++i)
        if (reference[i] == eos_id)
            throw NumericError("mark_decisive: interior EOS at position " + std::to_string(i));

    MaskPair mp;
    mp.path.assign(reference.size(), 0);
    mp.eos.assign(reference.size(), 0);
    mp.eos.back() = 1;

    std::vector<uint8_t> active(256, 0);
    int max_label = -1;
    for (int l : active_labels) {
        if (l < 0) throw NumericError("mark_decisive: negative label");
        if (l >= int(active.size())) active.resize(size_t(l) + 1, 0);
        active[size_t(l)] = 1;
        max_label = std::max(max_label, l);
    }
    for (const Match& match : matcher.find_all(reference)) {
        if (match.label > max_label || !active[size_t(match.label)]) continue;
        for (int t = match.begin; t < match.begin + match.len; ++t)
            if (t + 1 < int(reference.size())) mp.path[size_t(t)] = 1;
    }
    return mp;
}

void WeightProfile::validate() const {
    if (!(path_weight >= 0.0) || !(eos_weight >= 0.0))
        throw ConfigError("weight profile: weights must be nonnegative");
}

std::vector<double> weights_from_masks(const MaskPair& masks, const WeightProfile& profile) {
    profile.validate();
    if (masks.path.size() != masks.eos.size())
        throw NumericError("weights_from_masks: mask lengths differ");
    std::vector<double> w(masks.path.size(), 1.0);
    for (size_t t = 0; t < w.size(); ++t) {
        if (masks.eos[t]) w[t] = profile.eos_weight;
        else if (masks.path[t]) w[t] = profile.path_weight;
    }
    return w;
}

std::vector<int> extract_present_labels(const std::vector<int>& seq, const Matcher& matcher,
                                        const std::vector<int>& negation_tokens) {
    std::set<int> present;
    for (const Match& m : matcher.find_all(seq)) {
        bool negated = false;
        if (m.begin > 0) {
            int prev = seq[size_t(m.begin) - 1];
            negated = std::find(negation_tokens.begin(), negation_tokens.end(), prev) !=
                      negation_tokens.end();
        }
        if (!negated) present.insert(m.label);
    }
    return std::vector<int>(present.begin(), present.end());
}

} // namespace icsteer
