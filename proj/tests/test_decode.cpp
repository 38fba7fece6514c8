#include <doctest.h>

#include <functional>

#include "distillforge/decode.hpp"
#include "distillforge/model.hpp"

using namespace distillforge;

namespace {

Seq2SeqConfig tiny_cfg(size_t e = 3, size_t h = 4) {
    Seq2SeqConfig c;
    c.bpe_merges = 0;
    c.embed_size = e;
    c.hidden_size = h;
    c.num_layers = 1;
    c.set_dropout(false);
    return c;
}

// Exhaustive search over all EOS-terminated sequences up to max_len, the
// oracle beam_search is checked against. Independent of the beam code: plain
// depth-first enumeration, no pruning.
struct Enumerated {
    std::vector<int32_t> best_ids; // output ids, without EOS
    double best_logprob = -HUGE_VAL;
    size_t count = 0;
    double mass = 0.0;
};

Enumerated enumerate_all(const Seq2SeqParams<double>& p, const std::vector<int32_t>& src, size_t max_len) {
    Enumerated out;
    auto enc = encode(p, src);
    std::vector<int32_t> prefix;
    std::function<void(int32_t, const DecState<double>&, double, size_t)> dfs = [&](int32_t prev,
                                                                                    const DecState<double>& st,
                                                                                    double logprob, size_t depth) {
        DecState<double> next = st;
        Tensor<double> lp = decode_step(p, enc, {prev}, next);
        for (size_t v = 0; v < p.trg_vocab; ++v) {
            if (int32_t(v) == Vocabulary::PAD || int32_t(v) == Vocabulary::BOS) continue;
            double score = logprob + lp.data[v];
            if (int32_t(v) == Vocabulary::EOS) {
                ++out.count;
                out.mass += std::exp(score);
                if (score > out.best_logprob) {
                    out.best_logprob = score;
                    out.best_ids = prefix;
                }
            } else if (depth + 1 < max_len) {
                prefix.push_back(int32_t(v));
                dfs(int32_t(v), next, score, depth + 1);
                prefix.pop_back();
            }
        }
    };
    auto st = initial_state(enc, p.config, 1);
    dfs(Vocabulary::BOS, st, 0.0, 0);
    return out;
}

std::vector<int32_t> greedy_decode(const Seq2SeqParams<double>& p, const std::vector<int32_t>& src, size_t max_len) {
    auto enc = encode(p, src);
    auto st = initial_state(enc, p.config, 1);
    std::vector<int32_t> out;
    int32_t prev = Vocabulary::BOS;
    for (size_t step = 0; step < max_len; ++step) {
        auto lp = decode_step(p, enc, {prev}, st);
        int32_t best = -1;
        double best_score = -HUGE_VAL;
        for (size_t v = 0; v < p.trg_vocab; ++v) {
            if (int32_t(v) == Vocabulary::PAD || int32_t(v) == Vocabulary::BOS) continue;
            if (lp.data[v] > best_score) {
                best_score = lp.data[v];
                best = int32_t(v);
            }
        }
        if (best == Vocabulary::EOS) return out;
        out.push_back(best);
        prev = best;
    }
    return out; // ran out of budget without EOS
}

} // namespace

TEST_CASE("beam size 1 equals stepwise argmax on random tiny models") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        auto p = init_params<double>(tiny_cfg(), 6, 6, seed);
        std::vector<int32_t> src = {4, 5, int32_t(4 + seed % 2)};
        auto greedy = greedy_decode(p, src, 4);
        auto beam = beam_search(p, src, 1, 4, false);
        REQUIRE(!beam.hypotheses.empty());
        CHECK(beam.hypotheses[0].output_ids() == greedy);
    }
}

TEST_CASE("exhaustive beam with length norm off returns the brute-force argmax") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        auto p = init_params<double>(tiny_cfg(), 6, 6, seed * 31 + 1);
        std::vector<int32_t> src = {4, int32_t(4 + seed % 2)};
        const size_t max_len = 4;
        auto oracle = enumerate_all(p, src, max_len);
        CHECK(oracle.mass <= 1.0 + 1e-9);
        // beam wide enough to cover every live prefix: sum_l (V-3)^l
        size_t width = 1 + 3 + 9 + 27;
        auto beam = beam_search(p, src, width, max_len, false);
        REQUIRE(!beam.hypotheses.empty());
        CHECK(!beam.truncated);
        CHECK(beam.hypotheses[0].output_ids() == oracle.best_ids);
        CHECK(beam.hypotheses[0].logprob == doctest::Approx(oracle.best_logprob).epsilon(1e-9));
    }
}

// Strict monotonicity in beam width is false for standard beam search (a
// wider intermediate beam can displace the prefix of the eventual winner),
// so the test asserts what actually holds: the exhaustive width dominates
// every smaller width, and smaller widths are monotone for nearly all models.
TEST_CASE("wider beams rarely score worse and the exhaustive beam dominates") {
    int models = 0, monotone = 0;
    for (uint64_t seed = 1; seed <= 300; ++seed) {
        auto p = init_params<double>(tiny_cfg(2, 3), 6, 6, seed * 7 + 3);
        std::vector<int32_t> src = {5, 4};
        const size_t exhaustive = 40; // >= all live prefixes for V=6, max_len=4
        double best = beam_search(p, src, exhaustive, 4, false).hypotheses[0].logprob;
        double prev = -HUGE_VAL;
        bool mono = true;
        for (size_t k : {1, 2, 3, 6}) {
            auto r = beam_search(p, src, k, 4, false);
            REQUIRE(!r.hypotheses.empty());
            double top = r.hypotheses[0].logprob;
            CHECK(top <= best + 1e-12); // nothing beats the exhaustive beam
            mono = mono && top >= prev - 1e-12;
            prev = top;
        }
        CHECK(best >= prev - 1e-12);
        ++models;
        monotone += mono ? 1 : 0;
    }
    CHECK(monotone >= models * 95 / 100);
}

TEST_CASE("hypothesis log-probabilities are non-positive and sorted") {
    auto p = init_params<double>(tiny_cfg(), 7, 7, 5);
    auto r = beam_search(p, {4, 5, 6}, 6, 5, false);
    double prev = 0.0;
    for (const auto& h : r.hypotheses) {
        CHECK(h.logprob <= 0.0);
        CHECK(h.logprob <= prev + 1e-12);
        CHECK(h.finished);
        CHECK(h.tokens.front() == Vocabulary::BOS);
        CHECK(h.tokens.back() == Vocabulary::EOS);
        prev = h.logprob;
    }
}

TEST_CASE("beam search never emits PAD or BOS") {
    for (uint64_t seed = 2; seed <= 8; ++seed) {
        auto p = init_params<double>(tiny_cfg(), 8, 8, seed);
        auto r = beam_search(p, {4, 6}, 5, 6, true);
        for (const auto& h : r.hypotheses)
            for (size_t i = 1; i < h.tokens.size(); ++i) {
                CHECK(h.tokens[i] != Vocabulary::PAD);
                CHECK(h.tokens[i] != Vocabulary::BOS);
            }
    }
}

TEST_CASE("a model that cannot finish returns the best unfinished with a truncation flag") {
    auto p = init_params<double>(tiny_cfg(), 6, 6, 9);
    p.at("out_b").data[Vocabulary::EOS] = -1e9; // EOS effectively impossible
    auto r = beam_search(p, {4, 5}, 3, 4, false);
    CHECK(r.truncated);
    REQUIRE(r.hypotheses.size() == 1);
    CHECK(!r.hypotheses[0].finished);
    CHECK(r.hypotheses[0].generated() == 4); // ran to max_len
}

TEST_CASE("best_k returns distinct sequences and flags shortfall") {
    auto p = init_params<double>(tiny_cfg(), 6, 6, 12);
    auto r = beam_search(p, {4}, 8, 4, false);
    auto top = best_k(r, 3);
    for (size_t i = 0; i < top.sequences.size(); ++i)
        for (size_t j = i + 1; j < top.sequences.size(); ++j) CHECK(top.sequences[i] != top.sequences[j]);
    CHECK_THROWS_AS(best_k(r, 0), std::runtime_error);

    // degenerate: collapsed beams -> one sequence plus a shortfall flag
    BeamResult<double> collapsed;
    collapsed.length_norm = false;
    Hypothesis<double> h;
    h.tokens = {Vocabulary::BOS, 4, Vocabulary::EOS};
    h.logprob = -1.0;
    h.finished = true;
    collapsed.hypotheses = {h, h};
    auto two = best_k(collapsed, 2);
    CHECK(two.sequences.size() == 1);
    CHECK(two.shortfall);
}

TEST_CASE("beam-5 and beam-1 outputs differ on some model") {
    bool found = false;
    for (uint64_t seed = 1; seed <= 60 && !found; ++seed) {
        auto p = init_params<double>(tiny_cfg(3, 5), 8, 8, seed);
        for (int32_t tok = 4; tok < 8 && !found; ++tok) {
            auto b1 = beam_search(p, {tok, 4}, 1, 6, true);
            auto b5 = beam_search(p, {tok, 4}, 5, 6, true);
            if (b1.hypotheses.empty() || b5.hypotheses.empty()) continue;
            found = b1.hypotheses[0].output_ids() != b5.hypotheses[0].output_ids();
        }
    }
    CHECK(found);
}

TEST_CASE("translate_corpus: alignment, determinism, and parallel equivalence") {
    ModelBundle m;
    m.config = tiny_cfg(3, 4);
    std::vector<TokenSeq> corpus = {{"aa", "bb"}, {"bb", "cc", "aa"}, {"cc"}};
    m.src_bpe.merges = {{"a", "a"}, {"b", "b"}, {"c", "c"}};
    m.trg_bpe = m.src_bpe;
    m.src_vocab = build_vocab({{"aa"}, {"bb"}, {"cc"}}, 1);
    m.trg_vocab = m.src_vocab;
    m.params = init_params<float>(m.config, m.src_vocab.size(), m.trg_vocab.size(), 77);

    CHECK(translate_corpus(m, {}).nbest.empty()); // empty corpus -> empty output

    TranslateOptions serial;
    serial.workers = 1;
    auto a = translate_corpus(m, corpus, serial);
    CHECK(a.nbest.size() == corpus.size()); // line-aligned
    TranslateOptions parallel;
    parallel.workers = 4;
    auto b = translate_corpus(m, corpus, parallel);
    CHECK(a.nbest == b.nbest); // worker count never changes output
    auto c = translate_corpus(m, corpus, serial);
    CHECK(a.nbest == c.nbest); // pure function of inputs

    TranslateOptions nbest;
    nbest.nbest = 2;
    nbest.beam_size = 4;
    auto nb = translate_corpus(m, corpus, nbest);
    for (const auto& cands : nb.nbest) CHECK(cands.size() <= 2);
}

TEST_CASE("translate_corpus reports per-sentence failures as empty lines") {
    ModelBundle m;
    m.config = tiny_cfg(3, 4);
    m.src_vocab = build_vocab({{"x"}}, 1);
    m.trg_vocab = m.src_vocab;
    m.params = init_params<float>(m.config, m.src_vocab.size(), m.trg_vocab.size(), 3);
    auto out = translate_corpus(m, {{"x"}, {}, {"x"}});
    CHECK(out.failures == 1);
    REQUIRE(out.nbest.size() == 3);
    CHECK(out.nbest[1].empty());
    CHECK(!out.nbest[0].empty());
}
