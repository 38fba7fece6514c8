// Tokenized corpus BLEU (4-gram, clipped, no smoothing) and trial
// aggregation.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "distillforge/textproc.hpp"

namespace distillforge {

struct BleuReport {
    double bleu = 0.0;                        // percentage, 0..100
    std::array<double, 4> ngram_precisions{}; // p1..p4
    double brevity_penalty = 1.0;
    size_t hyp_len = 0, ref_len = 0;
};

namespace detail {
inline void count_ngrams(const TokenSeq& toks, size_t n, std::map<std::string, size_t>& out) {
    if (toks.size() < n) return;
    for (size_t i = 0; i + n <= toks.size(); ++i) {
        std::string key;
        for (size_t j = 0; j < n; ++j) {
            key += toks[i + j];
            key += '\x1f';
        }
        ++out[key];
    }
}
} // namespace detail

// Case-sensitive, single-reference corpus BLEU: clipped n-gram matches are
// summed across the corpus, combined by geometric mean with brevity penalty
// exp(1 - ref_len/hyp_len) when the hypothesis side is shorter. Any n with
// zero precision makes the score 0 (no smoothing).
inline BleuReport corpus_bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references) {
    if (hypotheses.size() != references.size())
        throw std::runtime_error("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                 std::to_string(references.size()) + " references");
    BleuReport r;
    std::array<size_t, 4> matches{}, totals{};
    for (size_t i = 0; i < hypotheses.size(); ++i) {
        const auto& hyp = hypotheses[i];
        const auto& ref = references[i];
        r.hyp_len += hyp.size();
        r.ref_len += ref.size();
        for (size_t n = 1; n <= 4; ++n) {
            std::map<std::string, size_t> hyp_counts, ref_counts;
            detail::count_ngrams(hyp, n, hyp_counts);
            detail::count_ngrams(ref, n, ref_counts);
            for (const auto& [gram, c] : hyp_counts) {
                auto it = ref_counts.find(gram);
                matches[n - 1] += std::min(c, it == ref_counts.end() ? size_t(0) : it->second);
            }
            totals[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
        }
    }
    bool zero = false;
    for (size_t n = 0; n < 4; ++n) {
        r.ngram_precisions[n] = totals[n] ? double(matches[n]) / double(totals[n]) : 0.0;
        zero = zero || r.ngram_precisions[n] == 0.0;
    }
    if (r.hyp_len == 0) {
        r.brevity_penalty = 0.0;
        return r;
    }
    r.brevity_penalty = r.hyp_len < r.ref_len ? std::exp(1.0 - double(r.ref_len) / double(r.hyp_len)) : 1.0;
    if (!zero) {
        double logsum = 0.0;
        for (double p : r.ngram_precisions) logsum += 0.25 * std::log(p);
        r.bleu = r.brevity_penalty * std::exp(logsum) * 100.0;
    }
    return r;
}

struct TrialAggregate {
    std::vector<uint64_t> seeds;
    std::vector<double> per_trial; // test BLEU per trial, in seed order
    double mean = 0.0;
};

inline TrialAggregate aggregate_trials(const std::vector<BleuReport>& reports, const std::vector<uint64_t>& seeds) {
    if (reports.empty()) throw std::runtime_error("aggregate_trials: no reports");
    TrialAggregate out;
    out.seeds = seeds;
    for (const auto& r : reports) out.per_trial.push_back(r.bleu);
    out.mean = std::accumulate(out.per_trial.begin(), out.per_trial.end(), 0.0) / double(out.per_trial.size());
    return out;
}

} // namespace distillforge
