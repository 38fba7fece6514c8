// Dataset construction for the experimental conditions: kd (teacher
// re-translation), bt (reverse-teacher back-translation), best-2 (top two
// beam hypotheses) and concatenations.
#pragma once

#include <json.hpp>

#include "distillforge/decode.hpp"
#include "distillforge/textproc.hpp"
#include "distillforge/util.hpp"

namespace distillforge {

struct DatasetRecipe {
    std::vector<std::string> components; // subset of {base, kd, bt, best2}
    std::string name;                    // "+"-joined label
};

inline DatasetRecipe parse_recipe(const std::string& text) {
    DatasetRecipe r;
    r.name = text;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) throw std::runtime_error("bad recipe '" + text + "': empty component");
        std::string c = cur == "best-2" ? "best2" : cur == "baseline" ? "base" : cur;
        if (c != "base" && c != "kd" && c != "bt" && c != "best2")
            throw std::runtime_error("bad recipe '" + text + "': unknown component '" + cur + "'");
        r.components.push_back(c);
        cur.clear();
    };
    for (char ch : text) {
        if (ch == '+')
            flush();
        else
            cur += ch;
    }
    flush();
    if (r.components.empty()) throw std::runtime_error("bad recipe: no components");
    return r;
}

struct DistillStats {
    size_t failures = 0;   // sentences dropped (translation failed)
    size_t shortfalls = 0; // best-2 sentences with a collapsed beam
};

// (original source, teacher best translation); the target side is fully
// replaced. Failed sentences are dropped and counted.
inline Bitext make_kd_dataset(const ModelBundle& teacher, const Bitext& base, size_t beam_size = 5,
                              size_t workers = 1, DistillStats* stats = nullptr) {
    std::vector<TokenSeq> sources;
    for (const auto& [s, _] : base.pairs) sources.push_back(s);
    TranslateOptions opt;
    opt.beam_size = beam_size;
    opt.workers = workers;
    auto out = translate_corpus(teacher, sources, opt);
    Bitext kd;
    kd.name = "kd";
    for (size_t i = 0; i < base.size(); ++i) {
        if (out.nbest[i].empty() || out.nbest[i][0].empty()) continue;
        kd.pairs.push_back({base.pairs[i].first, out.nbest[i][0]});
    }
    if (stats) stats->failures += base.size() - kd.size();
    return kd;
}

// (reverse-teacher translation of the gold target, gold target): synthetic
// sources, gold targets. The reverse teacher translates target -> source.
inline Bitext make_bt_dataset(const ModelBundle& reverse_teacher, const Bitext& base, size_t beam_size = 5,
                              size_t workers = 1, DistillStats* stats = nullptr) {
    std::vector<TokenSeq> targets;
    for (const auto& [_, t] : base.pairs) targets.push_back(t);
    TranslateOptions opt;
    opt.beam_size = beam_size;
    opt.workers = workers;
    auto out = translate_corpus(reverse_teacher, targets, opt);
    Bitext bt;
    bt.name = "bt";
    for (size_t i = 0; i < base.size(); ++i) {
        if (out.nbest[i].empty() || out.nbest[i][0].empty()) continue;
        bt.pairs.push_back({out.nbest[i][0], base.pairs[i].second});
    }
    if (stats) stats->failures += base.size() - bt.size();
    return bt;
}

// Concatenation of (source, best) and (source, second-best) pairs. Sentences
// whose beam collapses to one distinct hypothesis contribute one pair.
inline Bitext make_best2_dataset(const ModelBundle& teacher, const Bitext& base, size_t beam_size = 5,
                                 size_t workers = 1, DistillStats* stats = nullptr) {
    if (beam_size < 2) throw std::runtime_error("make_best2_dataset: beam size must be >= 2");
    std::vector<TokenSeq> sources;
    for (const auto& [s, _] : base.pairs) sources.push_back(s);
    TranslateOptions opt;
    opt.beam_size = beam_size;
    opt.nbest = 2;
    opt.workers = workers;
    auto out = translate_corpus(teacher, sources, opt);
    Bitext b2;
    b2.name = "best2";
    std::vector<std::pair<TokenSeq, TokenSeq>> seconds;
    size_t failures = 0;
    for (size_t i = 0; i < base.size(); ++i) {
        if (out.nbest[i].empty() || out.nbest[i][0].empty()) {
            ++failures;
            continue;
        }
        b2.pairs.push_back({base.pairs[i].first, out.nbest[i][0]});
        if (out.nbest[i].size() >= 2 && !out.nbest[i][1].empty())
            seconds.push_back({base.pairs[i].first, out.nbest[i][1]});
    }
    size_t firsts = b2.size();
    b2.pairs.insert(b2.pairs.end(), seconds.begin(), seconds.end());
    if (stats) {
        stats->failures += failures;
        stats->shortfalls += firsts - seconds.size();
    }
    return b2;
}

// Plain list concatenation: no deduplication, order preserved, name joined
// with '+'. Shuffling is the training loop's job.
inline Bitext concat_datasets(const std::vector<Bitext>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_datasets: empty list");
    Bitext out;
    for (size_t i = 0; i < parts.size(); ++i) {
        out.name += (i ? "+" : "") + parts[i].name;
        out.pairs.insert(out.pairs.end(), parts[i].pairs.begin(), parts[i].pairs.end());
    }
    return out;
}

inline uint64_t bitext_hash(const Bitext& bt) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [src, trg] : bt.pairs) {
        for (const auto& t : src) h = fnv1a(t.data(), t.size(), h * 31 + 1);
        for (const auto& t : trg) h = fnv1a(t.data(), t.size(), h * 31 + 7);
    }
    return h;
}

} // namespace distillforge
