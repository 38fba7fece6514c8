#include <doctest.h>

#include <cmath>

#include "distillforge/model.hpp"
#include "distillforge/train.hpp"

using namespace distillforge;

namespace {

// Independent straight-line forward pass for a 1-layer LSTM model, written
// against the documented architecture with no shared helpers. Used as the
// oracle for decode_step.
struct HandForward {
    const Seq2SeqParams<double>& p;
    size_t E, H, dir, V;

    explicit HandForward(const Seq2SeqParams<double>& params)
        : p(params), E(p.config.embed_size), H(p.config.hidden_size), dir(p.config.direction_size()),
          V(p.trg_vocab) {}

    static double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

    // one LSTM step with scalar loops
    static void lstm(const std::vector<double>& x, const Tensor<double>& Wx, const Tensor<double>& Wh,
                     const Tensor<double>& b, std::vector<double>& h, std::vector<double>& c) {
        size_t in = x.size(), hh = h.size();
        std::vector<double> g(4 * hh);
        for (size_t j = 0; j < 4 * hh; ++j) {
            double s = b.data[j];
            for (size_t k = 0; k < in; ++k) s += x[k] * Wx.data[k * 4 * hh + j];
            for (size_t k = 0; k < hh; ++k) s += h[k] * Wh.data[k * 4 * hh + j];
            g[j] = s;
        }
        for (size_t j = 0; j < hh; ++j) {
            double i_ = sig(g[j]), f_ = sig(g[hh + j]), gg = std::tanh(g[2 * hh + j]), o_ = sig(g[3 * hh + j]);
            c[j] = f_ * c[j] + i_ * gg;
            h[j] = o_ * std::tanh(c[j]);
        }
    }

    struct Enc {
        std::vector<std::vector<double>> proj; // per position, H
        std::vector<double> h0;                // H
    };

    Enc encode(const std::vector<int32_t>& src) const {
        size_t L = src.size();
        std::vector<std::vector<double>> x(L, std::vector<double>(E));
        for (size_t t = 0; t < L; ++t)
            for (size_t j = 0; j < E; ++j) x[t][j] = p.at("src_embed").data[size_t(src[t]) * E + j];
        std::vector<std::vector<double>> fw(L), bw(L);
        {
            std::vector<double> h(dir, 0), c(dir, 0);
            for (size_t t = 0; t < L; ++t) {
                lstm(x[t], p.at("enc0_fwd_Wx"), p.at("enc0_fwd_Wh"), p.at("enc0_fwd_b"), h, c);
                fw[t] = h;
            }
        }
        std::vector<double> bwd_final;
        {
            std::vector<double> h(dir, 0), c(dir, 0);
            for (size_t s = 0; s < L; ++s) {
                size_t t = L - 1 - s;
                lstm(x[t], p.at("enc0_bwd_Wx"), p.at("enc0_bwd_Wh"), p.at("enc0_bwd_b"), h, c);
                bw[t] = h;
            }
            bwd_final = h;
        }
        Enc out;
        out.proj.assign(L, std::vector<double>(H));
        for (size_t t = 0; t < L; ++t) {
            std::vector<double> cat(2 * dir);
            std::copy(fw[t].begin(), fw[t].end(), cat.begin());
            std::copy(bw[t].begin(), bw[t].end(), cat.begin() + std::ptrdiff_t(dir));
            for (size_t j = 0; j < H; ++j) {
                double s = p.at("attn_b").data[j];
                for (size_t k = 0; k < 2 * dir; ++k) s += cat[k] * p.at("attn_W").data[k * H + j];
                out.proj[t][j] = s;
            }
        }
        out.h0.assign(H, 0.0);
        for (size_t j = 0; j < H; ++j) {
            double s = p.at("dec_init0_b").data[j];
            for (size_t k = 0; k < dir; ++k) s += bwd_final[k] * p.at("dec_init0_W").data[k * H + j];
            out.h0[j] = std::tanh(s);
        }
        return out;
    }

    std::vector<double> step(const Enc& enc, int32_t prev, std::vector<double>& h, std::vector<double>& c) const {
        std::vector<double> x(E);
        for (size_t j = 0; j < E; ++j) x[j] = p.at("trg_embed").data[size_t(prev) * E + j];
        lstm(x, p.at("dec0_Wx"), p.at("dec0_Wh"), p.at("dec0_b"), h, c);
        size_t L = enc.proj.size();
        std::vector<double> w(L);
        double mx = -HUGE_VAL;
        for (size_t l = 0; l < L; ++l) {
            double s = 0;
            for (size_t j = 0; j < H; ++j) s += enc.proj[l][j] * h[j];
            w[l] = s;
            mx = std::max(mx, s);
        }
        double sum = 0;
        for (auto& v : w) {
            v = std::exp(v - mx);
            sum += v;
        }
        std::vector<double> ctx(H, 0.0);
        for (size_t l = 0; l < L; ++l)
            for (size_t j = 0; j < H; ++j) ctx[j] += (w[l] / sum) * enc.proj[l][j];
        std::vector<double> cat(2 * H);
        std::copy(h.begin(), h.end(), cat.begin());
        std::copy(ctx.begin(), ctx.end(), cat.begin() + std::ptrdiff_t(H));
        std::vector<double> comb(H);
        for (size_t j = 0; j < H; ++j) {
            double s = p.at("comb_b").data[j];
            for (size_t k = 0; k < 2 * H; ++k) s += cat[k] * p.at("comb_W").data[k * H + j];
            comb[j] = std::tanh(s);
        }
        std::vector<double> logits(V);
        for (size_t j = 0; j < V; ++j) {
            double s = p.at("out_b").data[j];
            for (size_t k = 0; k < H; ++k) s += comb[k] * p.at("out_W").data[k * V + j];
            logits[j] = s;
        }
        double m = *std::max_element(logits.begin(), logits.end());
        double lse = 0;
        for (double v : logits) lse += std::exp(v - m);
        lse = m + std::log(lse);
        for (auto& v : logits) v -= lse;
        return logits;
    }
};

Seq2SeqConfig tiny_config(size_t embed, size_t hidden, size_t layers = 1, CellType cell = CellType::lstm) {
    Seq2SeqConfig c;
    c.bpe_merges = 0;
    c.embed_size = embed;
    c.hidden_size = hidden;
    c.num_layers = layers;
    c.cell_type = cell;
    c.set_dropout(false);
    return c;
}

} // namespace

TEST_CASE("init_params is bit-identical for a fixed seed") {
    auto cfg = tiny_config(4, 4);
    auto a = init_params<float>(cfg, 9, 9, 123);
    auto b = init_params<float>(cfg, 9, 9, 123);
    REQUIRE(a.tensors.size() == b.tensors.size());
    for (size_t i = 0; i < a.tensors.size(); ++i) CHECK(a.tensors[i].second.data == b.tensors[i].second.data);
    auto c = init_params<float>(cfg, 9, 9, 124);
    CHECK(a.at("src_embed").data != c.at("src_embed").data);
}

TEST_CASE("init_params sets the LSTM forget-gate bias to one") {
    auto cfg = tiny_config(4, 6);
    auto p = init_params<float>(cfg, 9, 9, 1);
    size_t dir = cfg.direction_size();
    const auto& eb = p.at("enc0_fwd_b");
    for (size_t j = 0; j < dir; ++j) CHECK(eb.data[j] == 0.0f);
    for (size_t j = dir; j < 2 * dir; ++j) CHECK(eb.data[j] == 1.0f);
    const auto& db = p.at("dec0_b");
    for (size_t j = cfg.hidden_size; j < 2 * cfg.hidden_size; ++j) CHECK(db.data[j] == 1.0f);
    const auto& ib = p.at("dec_init0_b");
    for (float v : ib.data) CHECK(v == 0.0f);
}

TEST_CASE("parameter count anchors for the paper presets") {
    // vocab = merges + 64 residual characters + 4 specials
    size_t v_large = 10000 + 68, v_small = 500 + 68;
    size_t large = count_params(Seq2SeqConfig::large_preset(), v_large, v_large);
    size_t small = count_params(Seq2SeqConfig::small_preset(), v_small, v_small);
    CHECK(large >= 7'600'000);
    CHECK(large <= 10'400'000);
    CHECK(small >= 1'200'000);
    CHECK(small <= 1'600'000);
    double ratio = double(small) / double(large);
    CHECK(ratio >= 1.0 / 6.5);
    CHECK(ratio <= 1.0 / 4.0);
}

TEST_CASE("count_params matches the hand-computed total for a unit model") {
    // E=H=1, V=5, 1-layer LSTM: embeddings 2*5, three cells 12 each,
    // decoder init 2, attention projection 3, combination 3, output 10 -> 64
    auto cfg = tiny_config(1, 1);
    CHECK(count_params(cfg, 5, 5) == 64);
}

TEST_CASE("doubling the vocabulary only changes embedding and output rows") {
    auto cfg = tiny_config(8, 8);
    size_t v = 40;
    size_t base = count_params(cfg, v, v);
    size_t doubled = count_params(cfg, 2 * v, 2 * v);
    size_t expected_delta = v * cfg.embed_size         // source embedding rows
                            + v * cfg.embed_size       // target embedding rows
                            + v * (cfg.hidden_size + 1); // output weights + bias
    CHECK(doubled - base == expected_delta);
}

TEST_CASE("init_params materializes exactly count_params parameters") {
    for (auto cell : {CellType::lstm, CellType::gru})
        for (size_t layers : {size_t(1), size_t(2)}) {
            auto cfg = tiny_config(6, 10, layers, cell);
            auto p = init_params<float>(cfg, 17, 23, 7);
            CHECK(p.total_size() == count_params(cfg, 17, 23));
        }
}

TEST_CASE("encode rejects an empty source and handles length one") {
    auto cfg = tiny_config(4, 4);
    auto p = init_params<double>(cfg, 9, 9, 11);
    CHECK_THROWS_AS(encode(p, {}), std::runtime_error);
    auto enc = encode(p, {4});
    CHECK(enc.len == 1);
    CHECK(enc.enc_out.shape == Shape{1, 2 * cfg.direction_size()});
    CHECK(enc.enc_proj.shape == Shape{1, cfg.hidden_size});
}

TEST_CASE("bidirectional structure: with tied weights, fwd of reversed input equals bwd") {
    auto cfg = tiny_config(4, 6);
    auto p = init_params<double>(cfg, 9, 9, 3);
    // tie the two directions so the structural identity is observable
    p.at("enc0_bwd_Wx") = p.at("enc0_fwd_Wx");
    p.at("enc0_bwd_Wh") = p.at("enc0_fwd_Wh");
    p.at("enc0_bwd_b") = p.at("enc0_fwd_b");
    std::vector<int32_t> src = {4, 5, 6, 7, 8};
    std::vector<int32_t> rev(src.rbegin(), src.rend());
    auto e = encode(p, src);
    auto er = encode(p, rev);
    size_t dir = cfg.direction_size(), L = src.size();
    for (size_t t = 0; t < L; ++t)
        for (size_t j = 0; j < dir; ++j) {
            double fwd_of_rev = er.enc_out.data[t * 2 * dir + j];
            double bwd_of_orig = e.enc_out.data[(L - 1 - t) * 2 * dir + dir + j];
            CHECK(fwd_of_rev == doctest::Approx(bwd_of_orig).epsilon(1e-12));
        }
}

TEST_CASE("decode_step log-probabilities normalize") {
    auto cfg = tiny_config(5, 8);
    auto p = init_params<double>(cfg, 11, 13, 5);
    auto enc = encode(p, {4, 7, 9});
    auto st = initial_state(enc, cfg, 1);
    auto lp = decode_step(p, enc, {Vocabulary::BOS}, st);
    double sum = 0;
    for (double v : lp.data) sum += std::exp(v);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("decode_step with a single encoder position puts all attention there") {
    // with one position the context must equal enc_proj[0] exactly;
    // observable through agreement with the hand oracle
    auto cfg = tiny_config(2, 2);
    auto p = init_params<double>(cfg, 7, 5, 21);
    auto enc = encode(p, {5});
    HandForward hand(p);
    auto henc = hand.encode({5});
    for (size_t j = 0; j < cfg.hidden_size; ++j)
        CHECK(enc.enc_proj.data[j] == doctest::Approx(henc.proj[0][j]).epsilon(1e-12));
    auto st = initial_state(enc, cfg, 1);
    std::vector<double> hh = henc.h0, hc(cfg.hidden_size, 0.0);
    auto lp = decode_step(p, enc, {Vocabulary::BOS}, st);
    auto hand_lp = hand.step(henc, Vocabulary::BOS, hh, hc);
    for (size_t j = 0; j < hand_lp.size(); ++j) CHECK(lp.data[j] == doctest::Approx(hand_lp[j]).epsilon(1e-10));
}

TEST_CASE("decode_step matches an independent matrix-arithmetic oracle") {
    auto cfg = tiny_config(2, 2);
    auto p = init_params<double>(cfg, 7, 5, 33);
    std::vector<int32_t> src = {4, 6, 5};
    auto enc = encode(p, src);
    auto st = initial_state(enc, cfg, 1);

    HandForward hand(p);
    auto henc = hand.encode(src);
    std::vector<double> hh = henc.h0, hc(cfg.hidden_size, 0.0);

    std::vector<int32_t> steps = {Vocabulary::BOS, 4, 2, 1};
    for (int32_t prev : steps) {
        auto lp = decode_step(p, enc, {prev}, st);
        auto hand_lp = hand.step(henc, prev, hh, hc);
        REQUIRE(lp.numel() == hand_lp.size());
        for (size_t j = 0; j < hand_lp.size(); ++j)
            CHECK(lp.data[j] == doctest::Approx(hand_lp[j]).epsilon(1e-10));
    }
}

TEST_CASE("tape forward equals eval forward with dropout off") {
    for (auto cell : {CellType::lstm, CellType::gru})
        for (size_t layers : {size_t(1), size_t(2)}) {
            auto cfg = tiny_config(4, 6, layers, cell);
            auto p = init_params<double>(cfg, 12, 10, 99);
            // batch with unequal lengths exercises source masking
            auto batch = make_batch({{4, 5, 6, 7}, {8, 9}}, {{4, 5, 6}, {7}});
            Tape<double> tape;
            auto tp = register_params(tape, p);
            Var lp = seq2seq_logprobs(tape, tp, cfg, batch, DropoutPlan{});
            auto eval = eval_logprobs(p, batch);
            const auto& tv = tape.value(lp);
            REQUIRE(tv.shape == eval.shape);
            // padded rows may differ (eval never feeds PAD); compare unmasked rows
            auto mask = time_major_mask<double>(batch);
            for (size_t r = 0; r < tv.dim(0); ++r) {
                if (mask.data[r] == 0.0) continue;
                for (size_t j = 0; j < tv.dim(1); ++j)
                    CHECK(tv.data[r * tv.dim(1) + j] ==
                          doctest::Approx(eval.data[r * tv.dim(1) + j]).epsilon(1e-9));
            }
        }
}

TEST_CASE("full seq2seq NLL on a toy batch passes the finite-difference check") {
    auto cfg = tiny_config(2, 3);
    auto p = init_params<double>(cfg, 7, 6, 17);
    auto batch = make_batch({{4, 5, 6}, {5, 4}}, {{4, 5}, {5}});
    auto targets = time_major_targets(batch);
    auto mask = time_major_mask<double>(batch);

    auto loss_of = [&](const Seq2SeqParams<double>& params) {
        Tape<double> tape;
        auto tp = register_params(tape, params);
        Var lp = seq2seq_logprobs(tape, tp, cfg, batch, DropoutPlan{});
        auto nll = nll_loss(tape, lp, targets, mask, 0.0);
        return tape.value(nll.sum).item();
    };

    std::map<std::string, Tensor<double>> analytic;
    {
        Tape<double> tape;
        auto tp = register_params(tape, p);
        Var lp = seq2seq_logprobs(tape, tp, cfg, batch, DropoutPlan{});
        auto nll = nll_loss(tape, lp, targets, mask, 0.0);
        tape.backward(nll.sum);
        analytic = tape.gradients();
    }

    const double eps = 1e-5;
    double max_err = 0.0;
    for (auto& [name, tensor] : p.tensors) {
        for (size_t j = 0; j < tensor.numel(); ++j) {
            double orig = tensor.data[j];
            tensor.data[j] = orig + eps;
            double fp = loss_of(p);
            tensor.data[j] = orig - eps;
            double fm = loss_of(p);
            tensor.data[j] = orig;
            double numeric = (fp - fm) / (2 * eps);
            double a = analytic.at(name).data[j];
            max_err = std::max(max_err, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
        }
    }
    CHECK(max_err <= 1e-4);
}

TEST_CASE("dropout changes the training forward but never the eval forward") {
    auto cfg = tiny_config(4, 4);
    cfg.set_dropout(true);
    auto p = init_params<double>(cfg, 9, 9, 2);
    auto batch = make_batch({{4, 5}}, {{4}});
    Tape<double> t1, t2, t3;
    DropoutPlan on{true, 7, 1};
    Var a = seq2seq_logprobs(t1, register_params(t1, p), cfg, batch, on);
    Var b = seq2seq_logprobs(t2, register_params(t2, p), cfg, batch, on);
    Var c = seq2seq_logprobs(t3, register_params(t3, p), cfg, batch, DropoutPlan{});
    CHECK(t1.value(a).data == t2.value(b).data); // same (seed, step) -> same masks
    CHECK(t1.value(a).data != t3.value(c).data);
    DropoutPlan other{true, 7, 2};
    Tape<double> t4;
    Var d = seq2seq_logprobs(t4, register_params(t4, p), cfg, batch, other);
    CHECK(t4.value(d).data != t1.value(a).data); // different step -> different masks
}

TEST_CASE("params round-trip through the container format") {
    auto cfg = tiny_config(3, 4);
    auto p = init_params<float>(cfg, 8, 9, 55);
    auto path = (std::filesystem::temp_directory_path() / "df_params.bin").string();
    save_params(p, path);
    auto loaded = load_params(cfg, 8, 9, path);
    for (size_t i = 0; i < p.tensors.size(); ++i) {
        CHECK(loaded.tensors[i].first == p.tensors[i].first);
        CHECK(loaded.tensors[i].second.data == p.tensors[i].second.data);
    }
    std::filesystem::remove(path);
}
