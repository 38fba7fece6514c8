// Synthetic translation tasks with a fully known conditional distribution.
//
// A task is a phrase table: source phrases (1-3 tokens, each starting with a
// token unique to that phrase, so sources decompose unambiguously) mapped to
// m alternative fixed-length target chunks with known probabilities. Targets
// are sampled phrase-wise and then corrupted token-wise with probability
// noise_rate by tokens from a reserved rare-noise pool. The induced D(t|s)
// is a product over phrases mixed with token noise and is exactly
// computable.
#pragma once

#include <json.hpp>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "distillforge/rng.hpp"
#include "distillforge/textproc.hpp"
#include "distillforge/util.hpp"

namespace distillforge {

struct PhraseEntry {
    TokenSeq source;                  // 1-3 source tokens; source[0] is unique
    std::vector<TokenSeq> modes;      // m distinct target chunks, all chunk_len long
    std::vector<double> mode_probs;   // descending, sums to 1
};

struct SyntheticTaskSpec {
    size_t source_vocab = 80;            // filler-token pool size
    std::vector<PhraseEntry> phrases;    // the phrase inventory
    double noise_rate = 0.05;            // per-token replacement probability
    size_t noise_pool = 64;              // number of distinct rare noise tokens
    size_t min_phrases = 3, max_phrases = 8;
    size_t chunk_len = 2;                // target tokens per phrase
    uint64_t seed = 1;
    size_t n_valid = 1000, n_test = 1000;

    void validate() const {
        if (phrases.empty()) throw std::runtime_error("synthetic task: empty phrase inventory");
        if (min_phrases < 1 || max_phrases < min_phrases)
            throw std::runtime_error("synthetic task: bad sentence length bounds");
        if (noise_rate < 0.0 || noise_rate >= 1.0) throw std::runtime_error("synthetic task: bad noise rate");
        for (const auto& ph : phrases) {
            if (ph.source.empty() || ph.source.size() > 3)
                throw std::runtime_error("synthetic task: phrase sources must be 1-3 tokens");
            if (ph.modes.empty() || ph.modes.size() != ph.mode_probs.size())
                throw std::runtime_error("synthetic task: modes and probabilities misaligned");
            double sum = 0.0;
            for (size_t j = 0; j < ph.modes.size(); ++j) {
                if (ph.modes[j].size() != chunk_len)
                    throw std::runtime_error("synthetic task: all modes must have chunk_len tokens");
                if (j && ph.mode_probs[j] > ph.mode_probs[j - 1] + 1e-12)
                    throw std::runtime_error("synthetic task: mode probabilities must be descending");
                sum += ph.mode_probs[j];
                for (size_t k = 0; k < j; ++k)
                    if (ph.modes[j] == ph.modes[k]) throw std::runtime_error("synthetic task: duplicate modes");
            }
            if (std::abs(sum - 1.0) > 1e-9) throw std::runtime_error("synthetic task: mode probabilities must sum to 1");
        }
    }
};

inline std::string noise_token(size_t i) { return "nz" + std::to_string(i); }

// Deterministically builds an inventory: phrase i starts with the unique
// token "p<i>" followed by 0-2 shared filler tokens "f<j>"; mode j of phrase
// i is ("m<i>_<j>", shared tail token "t<k>").
inline SyntheticTaskSpec make_task_spec(size_t num_phrases, size_t modes_per_phrase,
                                        const std::vector<double>& mode_probs, double noise_rate, uint64_t seed,
                                        size_t min_phrases = 3, size_t max_phrases = 8) {
    if (mode_probs.size() != modes_per_phrase)
        throw std::runtime_error("make_task_spec: mode_probs length must equal modes_per_phrase");
    SyntheticTaskSpec spec;
    spec.noise_rate = noise_rate;
    spec.seed = seed;
    spec.min_phrases = min_phrases;
    spec.max_phrases = max_phrases;
    CounterRng rng = CounterRng::from(seed).split(0x696e76ULL); // inventory stream
    size_t tail_pool = std::max<size_t>(8, num_phrases / 3);
    for (size_t i = 0; i < num_phrases; ++i) {
        PhraseEntry ph;
        ph.source.push_back("p" + std::to_string(i));
        size_t extra = rng.next_below(3); // 0-2 filler tokens
        for (size_t e = 0; e < extra; ++e)
            ph.source.push_back("f" + std::to_string(rng.next_below(spec.source_vocab)));
        for (size_t j = 0; j < modes_per_phrase; ++j) {
            TokenSeq mode = {"m" + std::to_string(i) + "_" + std::to_string(j),
                             "t" + std::to_string(rng.next_below(tail_pool))};
            ph.modes.push_back(mode);
        }
        ph.mode_probs = mode_probs;
        spec.phrases.push_back(std::move(ph));
    }
    spec.validate();
    return spec;
}

// The spec's default desk-scale task: 60 phrases, 3 modes at [.6,.3,.1],
// 5% token noise, sentences of 3-8 phrases.
inline SyntheticTaskSpec default_task_spec(uint64_t seed) {
    return make_task_spec(60, 3, {0.6, 0.3, 0.1}, 0.05, seed);
}

struct SyntheticSplits {
    Bitext train, valid, test;
};

namespace detail {

inline std::pair<TokenSeq, TokenSeq> generate_pair(const SyntheticTaskSpec& spec, CounterRng rng) {
    size_t n = spec.min_phrases + rng.next_below(spec.max_phrases - spec.min_phrases + 1);
    TokenSeq src, trg;
    for (size_t k = 0; k < n; ++k) {
        const auto& ph = spec.phrases[rng.next_below(spec.phrases.size())];
        src.insert(src.end(), ph.source.begin(), ph.source.end());
        double u = rng.next_uniform();
        size_t pick = 0;
        double acc = 0.0;
        for (size_t j = 0; j < ph.modes.size(); ++j) {
            acc += ph.mode_probs[j];
            if (u < acc) {
                pick = j;
                break;
            }
            pick = j;
        }
        for (const auto& tok : ph.modes[pick]) {
            if (spec.noise_rate > 0.0 && rng.next_uniform() < spec.noise_rate)
                trg.push_back(noise_token(rng.next_below(spec.noise_pool)));
            else
                trg.push_back(tok);
        }
    }
    return {std::move(src), std::move(trg)};
}

} // namespace detail

// Sentences are generated from disjoint RNG streams per (split, index);
// identical seeds give identical corpora.
inline Bitext generate_split(const SyntheticTaskSpec& spec, size_t n, uint64_t split_id, const std::string& name) {
    spec.validate();
    Bitext bt;
    bt.name = name;
    bt.pairs.resize(n);
    CounterRng base = CounterRng::from(spec.seed).split(0x67656eULL, split_id);
    for (size_t i = 0; i < n; ++i) bt.pairs[i] = detail::generate_pair(spec, base.split(i));
    return bt;
}

inline SyntheticSplits generate_bitext(const SyntheticTaskSpec& spec, size_t n_train) {
    if (n_train < 1) throw std::runtime_error("generate_bitext: n must be >= 1");
    SyntheticSplits out;
    out.train = generate_split(spec, n_train, 0, "base");
    out.valid = generate_split(spec, spec.n_valid, 1, "valid");
    out.test = generate_split(spec, spec.n_test, 2, "test");
    return out;
}

// ---------------------------------------------------------------------------
// Oracle queries
// ---------------------------------------------------------------------------

// Greedy decomposition of a source sentence into inventory phrases; relies
// on the unique head token of every phrase. Throws on unknown tokens.
inline std::vector<size_t> decompose_source(const SyntheticTaskSpec& spec, const TokenSeq& src) {
    std::map<std::string, size_t> head;
    for (size_t i = 0; i < spec.phrases.size(); ++i) head[spec.phrases[i].source[0]] = i;
    std::vector<size_t> out;
    size_t i = 0;
    while (i < src.size()) {
        auto it = head.find(src[i]);
        if (it == head.end()) throw std::runtime_error("unknown phrase at token '" + src[i] + "'");
        const auto& ph = spec.phrases[it->second];
        for (size_t j = 0; j < ph.source.size(); ++j, ++i)
            if (i >= src.size() || src[i] != ph.source[j])
                throw std::runtime_error("source does not match phrase inventory at token " + std::to_string(i));
        out.push_back(it->second);
    }
    return out;
}

// Highest-probability translation: concatenation of each phrase's top mode.
// This is the exact argmax of D(t|s) when noise_rate = 0.
inline TokenSeq oracle_mode_translation(const SyntheticTaskSpec& spec, const TokenSeq& src) {
    TokenSeq out;
    for (size_t idx : decompose_source(spec, src)) {
        const auto& mode = spec.phrases[idx].modes[0]; // probs are descending
        out.insert(out.end(), mode.begin(), mode.end());
    }
    return out;
}

// Exact log D(t|s) for a target of the right length (product over phrases,
// mixed with token noise). Tokens outside mode+noise vocabulary get -inf.
inline double oracle_log_prob(const SyntheticTaskSpec& spec, const TokenSeq& src, const TokenSeq& trg) {
    auto idxs = decompose_source(spec, src);
    if (trg.size() != idxs.size() * spec.chunk_len) return -HUGE_VAL;
    double logp = 0.0;
    for (size_t k = 0; k < idxs.size(); ++k) {
        const auto& ph = spec.phrases[idxs[k]];
        double chunk_p = 0.0;
        for (size_t j = 0; j < ph.modes.size(); ++j) {
            double p = ph.mode_probs[j];
            for (size_t c = 0; c < spec.chunk_len; ++c) {
                const std::string& tok = trg[k * spec.chunk_len + c];
                if (tok == ph.modes[j][c])
                    p *= 1.0 - spec.noise_rate;
                else if (tok.rfind("nz", 0) == 0)
                    p *= spec.noise_rate / double(spec.noise_pool);
                else
                    p *= 0.0;
            }
            chunk_p += p;
        }
        if (chunk_p <= 0.0) return -HUGE_VAL;
        logp += std::log(chunk_p);
    }
    return logp;
}

struct ConditionalEntropy {
    double bits_per_phrase = 0.0;
    size_t phrases_scored = 0;
    size_t pairs_skipped = 0; // undecomposable pairs (e.g. model output of wrong length)
};

// Empirical conditional entropy of the target chunk realization given the
// source phrase, in bits, averaged over phrase occurrences. The quantitative
// multi-modality measure.
inline ConditionalEntropy conditional_entropy(const SyntheticTaskSpec& spec, const Bitext& bt) {
    std::map<size_t, std::map<std::string, size_t>> counts; // phrase -> chunk -> n
    ConditionalEntropy out;
    for (const auto& [src, trg] : bt.pairs) {
        std::vector<size_t> idxs;
        try {
            idxs = decompose_source(spec, src);
        } catch (const std::exception&) {
            ++out.pairs_skipped;
            continue;
        }
        if (trg.size() != idxs.size() * spec.chunk_len) {
            ++out.pairs_skipped;
            continue;
        }
        for (size_t k = 0; k < idxs.size(); ++k) {
            std::string chunk;
            for (size_t c = 0; c < spec.chunk_len; ++c) {
                chunk += trg[k * spec.chunk_len + c];
                chunk += ' ';
            }
            ++counts[idxs[k]][chunk];
        }
    }
    double weighted = 0.0;
    size_t total = 0;
    for (const auto& [phrase, chunks] : counts) {
        size_t n = 0;
        for (const auto& [_, c] : chunks) n += c;
        double h = 0.0;
        for (const auto& [_, c] : chunks) {
            double p = double(c) / double(n);
            h -= p * std::log2(p);
        }
        weighted += h * double(n);
        total += n;
    }
    out.phrases_scored = total;
    out.bits_per_phrase = total ? weighted / double(total) : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Serialization (spec.json / oracle.json)
// ---------------------------------------------------------------------------

inline nlohmann::json task_spec_to_json(const SyntheticTaskSpec& spec) {
    nlohmann::json phrases = nlohmann::json::array();
    for (const auto& ph : spec.phrases)
        phrases.push_back({{"source", ph.source}, {"modes", ph.modes}, {"mode_probs", ph.mode_probs}});
    return {
        {"source_vocab", spec.source_vocab},
        {"phrase_inventory", phrases},
        {"noise_rate", spec.noise_rate},
        {"noise_pool", spec.noise_pool},
        {"sentence_len", {{"min", spec.min_phrases}, {"max", spec.max_phrases}}},
        {"chunk_len", spec.chunk_len},
        {"seed", spec.seed},
        {"n_valid", spec.n_valid},
        {"n_test", spec.n_test},
    };
}

// Accepts either a full inventory (phrase_inventory) or generator shorthand
// (num_phrases / modes_per_phrase / mode_probs).
inline SyntheticTaskSpec task_spec_from_json(const nlohmann::json& j) {
    SyntheticTaskSpec spec;
    uint64_t seed = j.value("seed", uint64_t(1));
    if (j.contains("phrase_inventory")) {
        spec.seed = seed;
        spec.source_vocab = j.value("source_vocab", size_t(80));
        spec.noise_rate = j.value("noise_rate", 0.05);
        spec.noise_pool = j.value("noise_pool", size_t(64));
        spec.chunk_len = j.value("chunk_len", size_t(2));
        if (j.contains("sentence_len")) {
            spec.min_phrases = j.at("sentence_len").at("min").get<size_t>();
            spec.max_phrases = j.at("sentence_len").at("max").get<size_t>();
        }
        for (const auto& phj : j.at("phrase_inventory")) {
            PhraseEntry ph;
            ph.source = phj.at("source").get<TokenSeq>();
            ph.modes = phj.at("modes").get<std::vector<TokenSeq>>();
            ph.mode_probs = phj.at("mode_probs").get<std::vector<double>>();
            spec.phrases.push_back(std::move(ph));
        }
    } else {
        spec = make_task_spec(j.value("num_phrases", size_t(60)), j.value("modes_per_phrase", size_t(3)),
                              j.value("mode_probs", std::vector<double>{0.6, 0.3, 0.1}), j.value("noise_rate", 0.05),
                              seed, j.contains("sentence_len") ? j.at("sentence_len").at("min").get<size_t>() : 3,
                              j.contains("sentence_len") ? j.at("sentence_len").at("max").get<size_t>() : 8);
    }
    spec.n_valid = j.value("n_valid", size_t(1000));
    spec.n_test = j.value("n_test", size_t(1000));
    spec.validate();
    return spec;
}

} // namespace distillforge
