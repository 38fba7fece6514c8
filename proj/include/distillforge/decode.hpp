// Beam search decoding, n-best extraction and corpus translation.
#pragma once

#include <algorithm>
#include <limits>

#include "distillforge/checkpoint.hpp"
#include "distillforge/model.hpp"
#include "distillforge/util.hpp"

namespace distillforge {

template <typename T = float>
struct Hypothesis {
    std::vector<int32_t> tokens; // BOS-initiated; ends with EOS when finished
    double logprob = 0.0;        // accumulated, non-increasing
    bool finished = false;

    size_t generated() const { return tokens.size() - 1; } // excludes BOS
    std::vector<int32_t> output_ids() const {
        // generated ids without BOS/EOS
        size_t end = tokens.size() - (finished ? 1 : 0);
        return {tokens.begin() + 1, tokens.begin() + std::ptrdiff_t(end)};
    }
};

template <typename T = float>
struct BeamResult {
    std::vector<Hypothesis<T>> hypotheses; // sorted by score, descending
    bool truncated = false;                // no hypothesis finished within max_len
    bool length_norm = true;

    double score(const Hypothesis<T>& h) const {
        return length_norm ? h.logprob / double(std::max<size_t>(1, h.generated())) : h.logprob;
    }
    const Hypothesis<T>& best() const { return hypotheses.at(0); }
};

// Standard beam search over the target vocabulary. PAD and BOS are never
// generated; a hypothesis is frozen once it emits EOS. Search stops when no
// live hypothesis' accumulated log-probability (an upper bound on any of its
// completions, since step log-probs are <= 0) can beat the k-th best
// finished score, or at max_len.
template <typename T>
inline BeamResult<T> beam_search(const Seq2SeqParams<T>& params, const std::vector<int32_t>& src_ids, size_t beam_size,
                                 size_t max_len, bool length_norm = true) {
    if (beam_size < 1) throw std::runtime_error("beam_search: beam size must be >= 1");
    if (max_len < 1) throw std::runtime_error("beam_search: max_len must be >= 1");
    size_t V = params.trg_vocab;
    auto enc = encode(params, src_ids);

    struct Live {
        std::vector<int32_t> tokens;
        double logprob;
    };
    std::vector<Live> live{{{Vocabulary::BOS}, 0.0}};
    DecState<T> states = initial_state(enc, params.config, 1);
    std::vector<Hypothesis<T>> finished;

    auto worst_kept = [&]() -> double {
        if (finished.size() < beam_size) return -std::numeric_limits<double>::infinity();
        return finished.back().logprob; // kept sorted descending
    };

    for (size_t step = 0; step < max_len && !live.empty(); ++step) {
        std::vector<int32_t> prev(live.size());
        for (size_t i = 0; i < live.size(); ++i) prev[i] = live[i].tokens.back();
        Tensor<T> logprobs = decode_step(params, enc, prev, states);

        struct Cand {
            double score;
            size_t row;
            int32_t tok;
        };
        std::vector<Cand> cands;
        cands.reserve(live.size() * V);
        for (size_t i = 0; i < live.size(); ++i)
            for (size_t v = 0; v < V; ++v) {
                if (int32_t(v) == Vocabulary::PAD || int32_t(v) == Vocabulary::BOS) continue;
                cands.push_back({live[i].logprob + double(logprobs.data[i * V + v]), i, int32_t(v)});
            }
        size_t take = std::min(beam_size, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + std::ptrdiff_t(take), cands.end(),
                          [](const Cand& a, const Cand& b) {
                              if (a.score != b.score) return a.score > b.score;
                              if (a.row != b.row) return a.row < b.row;
                              return a.tok < b.tok;
                          });

        std::vector<Live> next;
        std::vector<size_t> next_rows;
        for (size_t c = 0; c < take; ++c) {
            const Cand& cand = cands[c];
            auto tokens = live[cand.row].tokens;
            tokens.push_back(cand.tok);
            if (cand.tok == Vocabulary::EOS) {
                Hypothesis<T> h;
                h.tokens = std::move(tokens);
                h.logprob = cand.score;
                h.finished = true;
                finished.push_back(std::move(h));
                std::sort(finished.begin(), finished.end(),
                          [](const auto& a, const auto& b) { return a.logprob > b.logprob; });
                if (finished.size() > beam_size) finished.pop_back();
            } else {
                next.push_back({std::move(tokens), cand.score});
                next_rows.push_back(cand.row);
            }
        }
        // prune live hypotheses that can no longer beat the k-th finished
        double bar = worst_kept();
        std::vector<Live> pruned;
        std::vector<size_t> pruned_rows;
        for (size_t i = 0; i < next.size(); ++i) {
            if (std::isfinite(bar) && next[i].logprob <= bar) continue;
            pruned.push_back(std::move(next[i]));
            pruned_rows.push_back(next_rows[i]);
        }
        live = std::move(pruned);
        states = states.select_rows(pruned_rows);
    }

    BeamResult<T> result;
    result.length_norm = length_norm;
    if (finished.empty()) {
        // nothing terminated within max_len: return the best unfinished
        result.truncated = true;
        if (!live.empty()) {
            auto it = std::max_element(live.begin(), live.end(),
                                       [](const Live& a, const Live& b) { return a.logprob < b.logprob; });
            Hypothesis<T> h;
            h.tokens = it->tokens;
            h.logprob = it->logprob;
            h.finished = false;
            result.hypotheses.push_back(std::move(h));
        }
        return result;
    }
    result.hypotheses = std::move(finished);
    std::stable_sort(result.hypotheses.begin(), result.hypotheses.end(), [&](const auto& a, const auto& b) {
        double sa = result.score(a), sb = result.score(b);
        if (sa != sb) return sa > sb;
        return a.tokens < b.tokens;
    });
    return result;
}

template <typename T>
struct BestK {
    std::vector<std::vector<int32_t>> sequences; // output ids, no BOS/EOS
    bool shortfall = false;                      // fewer than k distinct hypotheses existed
};

// Top-k distinct finished hypotheses by score. Duplicates (collapsed beams)
// are suppressed by exact token-sequence equality.
template <typename T>
inline BestK<T> best_k(const BeamResult<T>& result, size_t k) {
    if (k < 1) throw std::runtime_error("best_k: k must be >= 1");
    BestK<T> out;
    for (const auto& h : result.hypotheses) {
        if (!h.finished) continue;
        auto ids = h.output_ids();
        if (std::find(out.sequences.begin(), out.sequences.end(), ids) != out.sequences.end()) continue;
        out.sequences.push_back(std::move(ids));
        if (out.sequences.size() == k) break;
    }
    out.shortfall = out.sequences.size() < k;
    return out;
}

inline size_t translation_max_len(size_t src_len, size_t max_seq_len) {
    return std::min(2 * src_len + 10, max_seq_len);
}

struct TranslateOptions {
    size_t beam_size = 5;
    bool length_norm = true;
    size_t nbest = 1;
    size_t workers = 1;
};

struct TranslatedCorpus {
    std::vector<std::vector<TokenSeq>> nbest; // per sentence, <= nbest candidates (words, BPE reversed)
    size_t failures = 0;                      // sentences replaced by an empty line
    size_t shortfalls = 0;                    // sentences with fewer than nbest distinct hypotheses

    std::vector<TokenSeq> lines() const {
        std::vector<TokenSeq> out;
        out.reserve(nbest.size());
        for (const auto& cands : nbest) out.push_back(cands.empty() ? TokenSeq{} : cands[0]);
        return out;
    }
};

// Order-preserving, line-aligned corpus translation. Pure function of
// (params, sources, options); worker count never changes the output.
inline TranslatedCorpus translate_corpus(const ModelBundle& m, const std::vector<TokenSeq>& sources,
                                         const TranslateOptions& opt = {}) {
    TranslatedCorpus out;
    out.nbest.assign(sources.size(), {});
    std::vector<uint8_t> failed(sources.size(), 0), short_(sources.size(), 0);
    // BPE application happens serially up front: the codec's memoization
    // cache is not safe to share across the worker threads
    std::vector<std::vector<int32_t>> encoded(sources.size());
    {
        BpeCodec src_codec(m.src_bpe);
        for (size_t i = 0; i < sources.size(); ++i) {
            auto sub = src_codec.apply(sources[i]);
            if (sub.empty() || sub.size() > m.config.max_seq_len)
                failed[i] = 1;
            else
                encoded[i] = m.src_vocab.encode(sub);
        }
    }
    parallel_for(sources.size(), opt.workers, [&](size_t i) {
        if (failed[i]) return;
        try {
            const auto& ids = encoded[i];
            auto result = beam_search(m.params, ids, std::max(opt.beam_size, opt.nbest),
                                      translation_max_len(ids.size(), m.config.max_seq_len), opt.length_norm);
            if (result.hypotheses.empty()) {
                failed[i] = 1;
                return;
            }
            if (result.truncated) {
                // keep the truncated best rather than dropping the sentence
                auto ids_out = result.hypotheses[0].output_ids();
                TokenSeq subwords;
                for (int32_t id : ids_out) subwords.push_back(m.trg_vocab.decode(id));
                out.nbest[i].push_back(reverse_bpe(subwords, m.trg_bpe.marker));
                return;
            }
            auto best = best_k(result, opt.nbest);
            if (best.shortfall && opt.nbest > 1) short_[i] = 1;
            for (const auto& seq : best.sequences) {
                TokenSeq subwords;
                for (int32_t id : seq) subwords.push_back(m.trg_vocab.decode(id));
                out.nbest[i].push_back(reverse_bpe(subwords, m.trg_bpe.marker));
            }
        } catch (const std::exception&) {
            failed[i] = 1;
            out.nbest[i].clear();
        }
    });
    for (size_t i = 0; i < sources.size(); ++i) {
        out.failures += failed[i];
        out.shortfalls += short_[i];
    }
    return out;
}

} // namespace distillforge
