#include <doctest.h>

#include <filesystem>
#include <functional>

#include "distillforge/train.hpp"

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

Tensor<double> logprob_rows(const std::vector<std::vector<double>>& probs) {
    size_t n = probs.size(), v = probs[0].size();
    Tensor<double> t({n, v});
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < v; ++j) t.data[i * v + j] = std::log(probs[i][j]);
    return t;
}

Seq2SeqParams<float> scalar_params(std::vector<float> values) {
    Seq2SeqParams<float> p;
    p.index["w"] = 0;
    p.tensors.emplace_back("w", Tensor<float>({values.size()}, values));
    return p;
}

// Test-local enumerator over EOS-terminated sequences; independent of
// exact_seq_kd_loss.
struct EnumSeq {
    std::vector<int32_t> ids;
    double logq;
};

std::vector<EnumSeq> enumerate_sequences(const Seq2SeqParams<double>& p, const std::vector<int32_t>& src,
                                         size_t max_len) {
    std::vector<EnumSeq> out;
    auto enc = encode(p, src);
    std::vector<int32_t> prefix;
    std::function<void(int32_t, const DecState<double>&, double, size_t)> dfs =
        [&](int32_t prev, const DecState<double>& st, double logq, size_t depth) {
            DecState<double> next = st;
            auto lp = decode_step(p, enc, {prev}, next);
            for (size_t v = 0; v < p.trg_vocab; ++v) {
                if (int32_t(v) == Vocabulary::PAD || int32_t(v) == Vocabulary::BOS) continue;
                double score = logq + lp.data[v];
                if (int32_t(v) == Vocabulary::EOS) {
                    out.push_back({prefix, score});
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

} // namespace

TEST_CASE("nll_loss is zero for a perfect model") {
    Tape<double> t;
    Tensor<double> lp({2, 4}, std::vector<double>(8, -50.0));
    lp.data[0 * 4 + 2] = 0.0; // probability 1 on gold
    lp.data[1 * 4 + 1] = 0.0;
    Var v = t.leaf("lp", lp);
    auto loss = nll_loss(t, v, {2, 1}, Tensor<double>::full({2}, 1.0), 0.0);
    CHECK(t.value(loss.sum).item() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(loss.tokens == 2);
}

TEST_CASE("nll_loss of a uniform model is ln |v| per token") {
    Tape<double> t;
    size_t V = 11;
    Tensor<double> lp({3, V});
    for (auto& x : lp.data) x = -std::log(double(V));
    auto loss = nll_loss(t, t.leaf("lp", lp), {1, 5, 9}, Tensor<double>::full({3}, 1.0), 0.0);
    CHECK(t.value(loss.sum).item() / double(loss.tokens) == doctest::Approx(std::log(double(V))).epsilon(1e-12));
}

TEST_CASE("nll_loss matches the hand-computed smoothed cross-entropy") {
    Tape<double> t;
    auto lp = logprob_rows({{0.5, 0.2, 0.2, 0.1}, {0.7, 0.1, 0.1, 0.1}});
    auto loss = nll_loss(t, t.leaf("lp", lp), {2, 0}, Tensor<double>::full({2}, 1.0), 0.1);
    // -(0.9*lp_gold + (0.1/3)*sum_others) per position, worked by hand
    CHECK(t.value(loss.sum).item() == doctest::Approx(2.1532657529012238).epsilon(1e-12));
}

TEST_CASE("nll_loss masks PAD positions") {
    Tape<double> t;
    auto lp = logprob_rows({{0.5, 0.5}, {0.9, 0.1}});
    Tensor<double> mask({2}, {1.0, 0.0});
    auto loss = nll_loss(t, t.leaf("lp", lp), {0, 0}, mask, 0.0);
    CHECK(loss.tokens == 1);
    CHECK(t.value(loss.sum).item() == doctest::Approx(-std::log(0.5)).epsilon(1e-12));
}

TEST_CASE("word_kd_loss at the teacher's own distribution is its entropy") {
    Tape<double> t;
    std::vector<std::vector<double>> q = {{0.5, 0.25, 0.25}};
    auto lp = logprob_rows(q);
    Tensor<double> teacher({1, 3}, {0.5, 0.25, 0.25});
    auto loss = word_kd_loss(t, t.leaf("lp", lp), teacher, Tensor<double>::full({1}, 1.0));
    double entropy = -(0.5 * std::log(0.5) + 2 * 0.25 * std::log(0.25));
    CHECK(t.value(loss.sum).item() == doctest::Approx(entropy).epsilon(1e-12));
}

TEST_CASE("word_kd_loss with a one-hot teacher reduces to unsmoothed NLL") {
    CounterRng rng = CounterRng::from(31);
    for (int it = 0; it < 20; ++it) {
        size_t N = 1 + rng.next_below(4), V = 2 + rng.next_below(6);
        Tensor<double> logits({N, V});
        for (auto& v : logits.data) v = rng.next_uniform(-3, 3);
        std::vector<int32_t> gold(N);
        Tensor<double> onehot({N, V});
        Tensor<double> mask({N});
        for (size_t i = 0; i < N; ++i) {
            gold[i] = int32_t(rng.next_below(V));
            onehot.data[i * V + size_t(gold[i])] = 1.0;
            mask.data[i] = rng.next_uniform() < 0.8 ? 1.0 : 0.0;
        }
        Tape<double> t;
        Var lp = t.log_softmax(t.leaf("logits", logits));
        auto kd = word_kd_loss(t, lp, onehot, mask);
        auto nll = nll_loss(t, lp, gold, mask, 0.0);
        CHECK(t.value(kd.sum).item() == doctest::Approx(t.value(nll.sum).item()).epsilon(1e-6));
    }
}

TEST_CASE("word_kd_loss matches the hand example") {
    Tape<double> t;
    auto lp = logprob_rows({{0.25, 0.5, 0.25}});
    Tensor<double> teacher({1, 3}, {0.5, 0.25, 0.25});
    auto loss = word_kd_loss(t, lp.data.empty() ? Var{} : t.leaf("lp", lp), teacher, Tensor<double>::full({1}, 1.0));
    CHECK(t.value(loss.sum).item() == doctest::Approx(1.2130075659799042).epsilon(1e-12));
}

TEST_CASE("word_kd_loss rejects unnormalized teacher distributions") {
    Tape<double> t;
    auto lp = logprob_rows({{0.5, 0.5}});
    Tensor<double> bad({1, 2}, {0.7, 0.6});
    CHECK_THROWS_WITH_AS(word_kd_loss(t, t.leaf("lp", lp), bad, Tensor<double>::full({1}, 1.0)),
                         doctest::Contains("unnormalized"), std::runtime_error);
}

TEST_CASE("combined_loss endpoints and midpoint") {
    Tape<double> t;
    Var nll = t.constant(Tensor<double>::scalar(2.0));
    Var kd = t.constant(Tensor<double>::scalar(4.0));
    CHECK(t.value(combined_loss(t, nll, kd, 0.0)).item() == doctest::Approx(2.0));
    CHECK(t.value(combined_loss(t, nll, kd, 1.0)).item() == doctest::Approx(4.0));
    CHECK(t.value(combined_loss(t, nll, kd, 0.5)).item() == doctest::Approx(3.0));
    CHECK_THROWS_AS(combined_loss(t, nll, kd, 1.5), std::runtime_error);
}

TEST_CASE("combined_loss is linear in alpha") {
    CounterRng rng = CounterRng::from(8);
    for (int it = 0; it < 30; ++it) {
        double a = rng.next_uniform();
        double nv = rng.next_uniform(0, 5), kv = rng.next_uniform(0, 5);
        Tape<double> t;
        Var nll = t.constant(Tensor<double>::scalar(nv));
        Var kd = t.constant(Tensor<double>::scalar(kv));
        double combined = t.value(combined_loss(t, nll, kd, a)).item();
        // exact up to FP contraction differences between compilation units
        CHECK(combined == doctest::Approx(a * kv + (1.0 - a) * nv).epsilon(1e-15));
        Tape<double> t2;
        Var n2 = t2.constant(Tensor<double>::scalar(nv));
        Var k2 = t2.constant(Tensor<double>::scalar(kv));
        CHECK(t2.value(combined_loss(t2, n2, k2, 0.0)).item() == nv); // endpoints exact
        CHECK(t2.value(combined_loss(t2, n2, k2, 1.0)).item() == kv);
    }
}

TEST_CASE("clip_gradients clamps element-wise") {
    std::map<std::string, Tensor<float>> grads;
    grads["g"] = Tensor<float>({4}, {0.5f, 5.0f, -3.0f, -0.2f});
    clip_gradients(grads, 1.0);
    CHECK(grads["g"].data == std::vector<float>{0.5f, 1.0f, -1.0f, -0.2f});
    CHECK_THROWS_AS(clip_gradients(grads, 0.0), std::runtime_error);
}

TEST_CASE("adam leaves params unchanged on zero gradients") {
    auto p = scalar_params({1.0f, -2.0f});
    auto st = AdamState::zeros_like(p);
    std::map<std::string, Tensor<float>> grads;
    grads["w"] = Tensor<float>::zeros({2});
    TrainConfig cfg;
    adam_update(p, grads, st, 0.1, cfg);
    CHECK(p.at("w").data == std::vector<float>{1.0f, -2.0f});
    CHECK(st.t == 1);
}

TEST_CASE("adam descends on a quadratic") {
    auto p = scalar_params({1.0f});
    auto st = AdamState::zeros_like(p);
    TrainConfig cfg;
    std::map<std::string, Tensor<float>> grads;
    grads["w"] = Tensor<float>({1}, {2.0f}); // d(w^2)/dw at w=1
    adam_update(p, grads, st, 0.1, cfg);
    CHECK(p.at("w").data[0] < 1.0f);

    // 100 steps on a 2-d quadratic pull the point near the origin
    auto q = scalar_params({1.0f, -1.5f});
    auto qs = AdamState::zeros_like(q);
    for (int i = 0; i < 100; ++i) {
        std::map<std::string, Tensor<float>> g;
        g["w"] = Tensor<float>({2}, {2.0f * q.at("w").data[0], 2.0f * q.at("w").data[1]});
        adam_update(q, g, qs, 0.1, cfg);
    }
    double norm = std::hypot(q.at("w").data[0], q.at("w").data[1]);
    CHECK(norm < 1e-2);
}

TEST_CASE("adam aborts on non-finite gradients with diagnostics") {
    auto p = scalar_params({1.0f});
    auto st = AdamState::zeros_like(p);
    std::map<std::string, Tensor<float>> grads;
    grads["w"] = Tensor<float>({1}, {std::numeric_limits<float>::quiet_NaN()});
    TrainConfig cfg;
    CHECK_THROWS_WITH_AS(adam_update(p, grads, st, 0.1, cfg), doctest::Contains("'w'"), std::runtime_error);
}

TEST_CASE("plateau schedule: improving metrics keep the rate") {
    LrSchedule s{0.0003, 0.7, 8};
    for (int i = 0; i < 30; ++i) CHECK(!s.on_checkpoint(double(i)));
    CHECK(s.lr == 0.0003);
}

TEST_CASE("plateau schedule: 8 flat checkpoints reduce once, 16 twice") {
    LrSchedule s{0.0003, 0.7, 8};
    CHECK(!s.on_checkpoint(10.0));
    bool decayed = false;
    for (int i = 0; i < 8; ++i) decayed = s.on_checkpoint(10.0);
    CHECK(decayed);
    CHECK(s.lr == doctest::Approx(0.0003 * 0.7).epsilon(1e-15));
    for (int i = 0; i < 8; ++i) decayed = s.on_checkpoint(10.0);
    CHECK(decayed);
    CHECK(s.lr == doctest::Approx(0.0003 * 0.49).epsilon(1e-15));
}

TEST_CASE("learning rate never increases and decays as factor^k") {
    CounterRng rng = CounterRng::from(5);
    LrSchedule s{0.0003, 0.7, 3};
    double prev = s.lr;
    int decays = 0;
    for (int i = 0; i < 200; ++i) {
        if (s.on_checkpoint(rng.next_uniform(0, 30))) ++decays;
        CHECK(s.lr <= prev + 1e-18);
        prev = s.lr;
    }
    CHECK(s.lr == doctest::Approx(0.0003 * std::pow(0.7, decays)).epsilon(1e-9));
}

TEST_CASE("exact_seq_kd_loss: mass, mode, and self-distillation entropy") {
    auto cfg = tiny_cfg();
    for (uint64_t seed : {3u, 14u, 25u}) {
        auto q = init_params<double>(cfg, 6, 6, seed);
        q.at("out_b").data[Vocabulary::EOS] += 2.0; // concentrate mass inside max_len
        const size_t max_len = 4;
        auto self_kd = exact_seq_kd_loss(q, q, {4, 5}, max_len);
        CHECK(self_kd.q_mass <= 1.0 + 1e-6);
        CHECK(self_kd.q_mass > 0.5);

        auto seqs = enumerate_sequences(q, {4, 5}, max_len);
        double entropy = 0.0, best = -HUGE_VAL;
        std::vector<int32_t> best_ids;
        for (const auto& s : seqs) {
            entropy += std::exp(s.logq) * (-s.logq);
            if (s.logq > best) {
                best = s.logq;
                best_ids = s.ids;
            }
        }
        CHECK(self_kd.loss == doctest::Approx(entropy).epsilon(1e-9));
        CHECK(self_kd.mode == best_ids);
        CHECK(self_kd.mode_logq == doctest::Approx(best).epsilon(1e-9));

        // Gibbs bound for sub-normalized students: no student can score below
        // entropy + mass*log(mass) (the optimum renormalizes the teacher onto
        // the enumerated set). Perturbed students must respect it.
        double floor = self_kd.loss + self_kd.q_mass * std::log(self_kd.q_mass);
        for (uint64_t pseed = 1; pseed <= 5; ++pseed) {
            auto student = q;
            CounterRng prng = CounterRng::from(pseed * 91 + seed);
            for (auto& [name, tensor] : student.tensors)
                for (auto& v : tensor.data) v += prng.next_uniform(-0.05, 0.05);
            auto kd = exact_seq_kd_loss(q, student, {4, 5}, max_len);
            CHECK(kd.loss >= floor - 1e-9);
        }
    }
}

TEST_CASE("sequence-level cross-entropy over full tables is minimized at the teacher") {
    // the minimality claim in its exact domain: explicit normalized tables
    CounterRng rng = CounterRng::from(77);
    for (int it = 0; it < 25; ++it) {
        size_t n = 2 + rng.next_below(12);
        std::vector<double> q(n), p(n);
        double qs = 0, ps = 0;
        for (size_t i = 0; i < n; ++i) {
            q[i] = rng.next_uniform(0.01, 1.0);
            p[i] = q[i] * std::exp(rng.next_uniform(-0.5, 0.5)); // perturbed copy
            qs += q[i];
            ps += p[i];
        }
        double self_loss = 0, cross_loss = 0;
        for (size_t i = 0; i < n; ++i) {
            self_loss -= (q[i] / qs) * std::log(q[i] / qs);
            cross_loss -= (q[i] / qs) * std::log(p[i] / ps);
        }
        CHECK(cross_loss >= self_loss - 1e-12);
    }
}

TEST_CASE("exact_seq_kd_loss rejects intractable spaces with the computed bound") {
    auto cfg = tiny_cfg();
    auto p = init_params<double>(cfg, 40, 40, 1);
    CHECK_THROWS_WITH_AS(exact_seq_kd_loss(p, p, {4}, 5), doctest::Contains("exceeds 1e6"), std::runtime_error);
}

TEST_CASE("perplexity of a uniform model is exactly the vocabulary size") {
    ModelBundle m;
    m.config = tiny_cfg();
    m.src_vocab = build_vocab({{"a"}, {"b"}}, 1);
    m.trg_vocab = m.src_vocab;
    m.params = init_params<float>(m.config, m.src_vocab.size(), m.trg_vocab.size(), 9);
    // zero output layer -> uniform output distribution everywhere
    for (auto& v : m.params.at("out_W").data) v = 0.0f;
    for (auto& v : m.params.at("out_b").data) v = 0.0f;
    Bitext bt;
    bt.pairs.push_back({{"a", "b"}, {"b", "a"}});
    bt.pairs.push_back({{"b"}, {"a"}});
    CHECK(perplexity(m, bt) == doctest::Approx(double(m.trg_vocab.size())).epsilon(1e-5));
}

TEST_CASE("train_loop: budget is exact, logs are deterministic, memorizer overfits") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "df_train_test";
    fs::remove_all(dir);

    Bitext train;
    train.name = "toy";
    train.pairs.push_back({split_tokens("a b c"), split_tokens("x y z w v")});
    Bitext valid = train;

    Seq2SeqConfig mcfg = tiny_cfg(8, 8);
    mcfg.bpe_merges = 4;
    TrainConfig tcfg;
    tcfg.batch_size = 16;
    tcfg.checkpoint_every = 15;
    tcfg.max_checkpoints = 6;
    tcfg.initial_lr = 0.02;
    tcfg.label_smoothing = 0.0;
    tcfg.lr_reduce_patience = 2;
    tcfg.seed = 42;

    auto r1 = train_loop(mcfg, tcfg, train, valid, (dir / "run1").string());
    CHECK(r1.log.size() == 6);
    CHECK(r1.log.back().updates == 90); // exactly max_checkpoints * checkpoint_every

    // a one-sentence corpus is memorized: perplexity falls toward 1
    CHECK(r1.log.back().valid_ppl < r1.log.front().valid_ppl);
    CHECK(r1.train_ppl < 2.0);
    CHECK(r1.log.back().valid_bleu == doctest::Approx(100.0));

    auto r2 = train_loop(mcfg, tcfg, train, valid, (dir / "run2").string());
    REQUIRE(r2.log.size() == r1.log.size());
    for (size_t i = 0; i < r1.log.size(); ++i) {
        // bit-identical metrics apart from wall time
        CHECK(r1.log[i].train_loss == r2.log[i].train_loss);
        CHECK(r1.log[i].valid_ppl == r2.log[i].valid_ppl);
        CHECK(r1.log[i].valid_bleu == r2.log[i].valid_bleu);
        CHECK(r1.log[i].lr == r2.log[i].lr);
    }

    // saturated BLEU plateaus trigger the decay (patience 2)
    CHECK(r1.log.back().lr < tcfg.initial_lr);

    // best checkpoint loads back and the metrics file exists
    auto loaded = load_checkpoint(r1.best_dir);
    CHECK(loaded.params.total_size() == r1.best.params.total_size());
    CHECK(fs::exists(dir / "run1" / "metrics.tsv"));
    fs::remove_all(dir);
}

TEST_CASE("train_loop budget ignores dataset size") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "df_budget_test";
    fs::remove_all(dir);
    Bitext small, large;
    for (int i = 0; i < 2; ++i) small.pairs.push_back({split_tokens("a b"), split_tokens("x y")});
    for (int i = 0; i < 40; ++i) large.pairs.push_back({split_tokens("a b"), split_tokens("x y")});
    Seq2SeqConfig mcfg = tiny_cfg(4, 4);
    mcfg.bpe_merges = 0;
    TrainConfig tcfg;
    tcfg.batch_size = 8;
    tcfg.checkpoint_every = 5;
    tcfg.max_checkpoints = 2;
    auto a = train_loop(mcfg, tcfg, small, small, (dir / "a").string());
    auto b = train_loop(mcfg, tcfg, large, large, (dir / "b").string());
    CHECK(a.log.back().updates == 10);
    CHECK(b.log.back().updates == 10);
    fs::remove_all(dir);
}

TEST_CASE("train_loop word-KD path requires a vocabulary-compatible teacher") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "df_kd_test";
    fs::remove_all(dir);
    Bitext train;
    train.pairs.push_back({split_tokens("a b"), split_tokens("x y")});
    train.pairs.push_back({split_tokens("b a"), split_tokens("y x")});

    Seq2SeqConfig mcfg = tiny_cfg(4, 4);
    mcfg.bpe_merges = 0;
    TrainConfig tcfg;
    tcfg.batch_size = 8;
    tcfg.checkpoint_every = 2;
    tcfg.max_checkpoints = 1;
    tcfg.kd_alpha = 0.5;

    // teacher trained on the same corpus with the same merges shares vocab
    TrainConfig teacher_cfg = tcfg;
    teacher_cfg.kd_alpha = 0.0;
    auto teacher = train_loop(mcfg, teacher_cfg, train, train, (dir / "teacher").string());
    auto student = train_loop(mcfg, tcfg, train, train, (dir / "student").string(), &teacher.best);
    CHECK(student.log.size() == 1);

    // mismatched vocabulary is rejected
    Bitext other;
    other.pairs.push_back({split_tokens("q r"), split_tokens("s t")});
    CHECK_THROWS_WITH_AS(train_loop(mcfg, tcfg, other, other, (dir / "bad").string(), &teacher.best),
                         doctest::Contains("vocabulary"), std::runtime_error);
    fs::remove_all(dir);
}
