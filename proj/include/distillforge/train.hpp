// Losses, Adam with absolute gradient clipping, plateau-reduce learning rate
// scheduling, the word-batched training loop with checkpointing, and
// perplexity.
#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>

#include "distillforge/checkpoint.hpp"
#include "distillforge/decode.hpp"
#include "distillforge/eval.hpp"
#include "distillforge/model.hpp"
#include "distillforge/util.hpp"

namespace distillforge {

struct TrainConfig {
    double initial_lr = 0.0003;
    size_t batch_size = 4096; // target subword tokens per update (word batching)
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0; // absolute, elementwise
    double label_smoothing = 0.1;
    size_t checkpoint_every = 4000; // updates per checkpoint
    size_t max_checkpoints = 30;    // 30 default, 100 for teachers / longer training
    double lr_reduce_factor = 0.7;
    size_t lr_reduce_patience = 8; // non-improved checkpoints before decay
    bool reset_params_on_decay = true;
    size_t keep_last_params = 3;
    uint64_t seed = 1;
    double kd_alpha = 0.0; // weight on word-level KD when a teacher is supplied
    size_t valid_beam = 5;
    size_t workers = 1;

    size_t total_updates() const { return max_checkpoints * checkpoint_every; }

    void validate() const {
        if (initial_lr <= 0.0 || initial_lr > 1.0) throw std::runtime_error("initial_lr outside (0,1]");
        if (lr_reduce_factor <= 0.0 || lr_reduce_factor > 1.0) throw std::runtime_error("lr_reduce_factor outside (0,1]");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw std::runtime_error("label_smoothing outside [0,1)");
        if (kd_alpha < 0.0 || kd_alpha > 1.0) throw std::runtime_error("kd_alpha outside [0,1]");
        if (lr_reduce_patience < 1) throw std::runtime_error("lr_reduce_patience must be >= 1");
        if (batch_size < 1 || checkpoint_every < 1 || max_checkpoints < 1)
            throw std::runtime_error("batch/checkpoint settings must be positive");
        if (grad_clip <= 0.0) throw std::runtime_error("grad_clip must be positive");
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
    return {
        {"initial_learning_rate", t.initial_lr},
        {"batch_size", t.batch_size},
        {"optimizer", "adam"},
        {"adam_beta1", t.adam_beta1},
        {"adam_beta2", t.adam_beta2},
        {"adam_eps", t.adam_eps},
        {"gradient_clipping_type", "abs"},
        {"gradient_clipping_threshold", t.grad_clip},
        {"label_smoothing", t.label_smoothing},
        {"checkpoint_frequency", t.checkpoint_every},
        {"max_checkpoints", t.max_checkpoints},
        {"learning_rate_scheduler_type", "plateau-reduce"},
        {"learning_rate_reduce_factor", t.lr_reduce_factor},
        {"learning_rate_reduce_num_not_improved", t.lr_reduce_patience},
        {"learning_rate_decay_param_reset", t.reset_params_on_decay},
        {"keep_last_params", t.keep_last_params},
        {"seed", t.seed},
        {"kd_alpha", t.kd_alpha},
        {"valid_beam", t.valid_beam},
    };
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename T>
struct LossValue {
    Var sum;           // scalar Var on the tape (sum over unmasked positions)
    size_t tokens = 0; // unmasked position count
};

// Label-smoothed negative log-likelihood over (N,V) log-probabilities.
// With smoothing eps the target distribution puts 1-eps on the gold label
// and eps/(V-1) on every other label. PAD positions carry mask 0.
template <typename T>
inline LossValue<T> nll_loss(Tape<T>& tape, Var logprobs, const std::vector<int32_t>& targets,
                             const Tensor<T>& mask, double smoothing) {
    const auto& lp = tape.value(logprobs);
    if (lp.rank() != 2 || targets.size() != lp.dim(0) || mask.numel() != lp.dim(0))
        throw std::runtime_error("nll_loss: inconsistent shapes");
    size_t V = lp.dim(1);
    LossValue<T> out;
    for (T m : mask.data) out.tokens += m != T(0) ? 1 : 0;
    Var maskv = tape.constant(mask);
    Var gold = tape.reduce_sum(tape.mul(tape.pick(logprobs, targets), maskv));
    if (smoothing == 0.0) {
        out.sum = tape.affine(gold, T(-1), T(0));
        return out;
    }
    double c2 = smoothing / double(V - 1);
    double c1 = 1.0 - smoothing - c2;
    Var total = tape.reduce_sum(tape.mul(tape.row_sum(logprobs), maskv));
    out.sum = tape.affine(tape.add(tape.affine(gold, T(c1), T(0)), tape.affine(total, T(c2), T(0))), T(-1), T(0));
    return out;
}

// Cross-entropy between the full teacher distribution and the student at
// every unmasked position: -sum_j sum_k q(k) log p(k).
template <typename T>
inline LossValue<T> word_kd_loss(Tape<T>& tape, Var student_logprobs, const Tensor<T>& teacher_probs,
                                 const Tensor<T>& mask) {
    const auto& lp = tape.value(student_logprobs);
    if (teacher_probs.shape != lp.shape || mask.numel() != lp.dim(0))
        throw std::runtime_error("word_kd_loss: inconsistent shapes");
    size_t N = lp.dim(0), V = lp.dim(1);
    for (size_t i = 0; i < N; ++i) {
        if (mask.data[i] == T(0)) continue;
        T sum = 0;
        for (size_t k = 0; k < V; ++k) sum += teacher_probs.data[i * V + k];
        if (std::abs(double(sum) - 1.0) > 1e-6)
            throw std::runtime_error("word_kd_loss: unnormalized teacher distribution at position " +
                                     std::to_string(i) + " (sum " + std::to_string(double(sum)) + ")");
    }
    LossValue<T> out;
    for (T m : mask.data) out.tokens += m != T(0) ? 1 : 0;
    Var weighted = tape.mul(student_logprobs, tape.constant(teacher_probs));
    Var per_pos = tape.row_sum(weighted);
    out.sum = tape.affine(tape.reduce_sum(tape.mul(per_pos, tape.constant(mask))), T(-1), T(0));
    return out;
}

// alpha * word_kd + (1 - alpha) * nll
template <typename T>
inline Var combined_loss(Tape<T>& tape, Var nll, Var word_kd, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw std::runtime_error("combined_loss: alpha outside [0,1]");
    return tape.add(tape.affine(word_kd, T(alpha), T(0)), tape.affine(nll, T(1.0 - alpha), T(0)));
}

// ---------------------------------------------------------------------------
// Exact sequence-level KD loss by exhaustive enumeration (oracle scale only)
// ---------------------------------------------------------------------------

template <typename T>
struct SeqKdResult {
    double loss = 0.0;              // -sum_t q(t|s) log p(t|s)
    double q_mass = 0.0;            // total enumerated teacher probability
    std::vector<int32_t> mode;      // argmax_t q(t|s), output ids without EOS
    double mode_logq = -HUGE_VAL;
};

// Enumerates every EOS-terminated sequence of length <= max_len (PAD and BOS
// are never generated; UNK counts as a regular token). Teacher and student
// must share the target vocabulary.
template <typename T>
inline SeqKdResult<T> exact_seq_kd_loss(const Seq2SeqParams<T>& teacher, const Seq2SeqParams<T>& student,
                                        const std::vector<int32_t>& src_ids, size_t max_len) {
    if (teacher.trg_vocab != student.trg_vocab)
        throw std::runtime_error("exact_seq_kd_loss: teacher/student vocabulary mismatch");
    size_t V = teacher.trg_vocab;
    double bound = std::pow(double(V), double(max_len));
    if (bound > 1e6)
        throw std::runtime_error("exact_seq_kd_loss: search space |v|^max_len = " + std::to_string(bound) +
                                 " exceeds 1e6; enumeration is intractable");
    auto enc_t = encode(teacher, src_ids);
    auto enc_s = encode(student, src_ids);
    SeqKdResult<T> out;
    std::vector<int32_t> prefix;

    struct Frame {
        DecState<T> st_t, st_s;
    };
    std::function<void(int32_t, const DecState<T>&, const DecState<T>&, double, double, size_t)> dfs =
        [&](int32_t prev, const DecState<T>& st_t, const DecState<T>& st_s, double logq, double logp, size_t depth) {
            DecState<T> t_next = st_t, s_next = st_s;
            Tensor<T> lq = decode_step(teacher, enc_t, {prev}, t_next);
            Tensor<T> lp = decode_step(student, enc_s, {prev}, s_next);
            for (size_t v = 0; v < V; ++v) {
                if (int32_t(v) == Vocabulary::PAD || int32_t(v) == Vocabulary::BOS) continue;
                double q = logq + double(lq.data[v]);
                double p = logp + double(lp.data[v]);
                if (int32_t(v) == Vocabulary::EOS) {
                    double qprob = std::exp(q);
                    out.loss += qprob * (-p);
                    out.q_mass += qprob;
                    if (q > out.mode_logq) {
                        out.mode_logq = q;
                        out.mode = prefix;
                    }
                } else if (depth + 1 < max_len) {
                    prefix.push_back(int32_t(v));
                    dfs(int32_t(v), t_next, s_next, q, p, depth + 1);
                    prefix.pop_back();
                }
            }
        };
    DecState<T> st_t = initial_state(enc_t, teacher.config, 1);
    DecState<T> st_s = initial_state(enc_s, student.config, 1);
    dfs(Vocabulary::BOS, st_t, st_s, 0.0, 0.0, 0);
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<Tensor<float>> m, v; // aligned with Seq2SeqParams tensor order
    size_t t = 0;                    // update counter

    static AdamState zeros_like(const Seq2SeqParams<float>& p) {
        AdamState s;
        for (const auto& [_, tensor] : p.tensors) {
            s.m.push_back(Tensor<float>::zeros(tensor.shape));
            s.v.push_back(Tensor<float>::zeros(tensor.shape));
        }
        return s;
    }
};

// Element-wise clamp to [-threshold, threshold] (absolute clipping).
inline void clip_gradients(std::map<std::string, Tensor<float>>& grads, double threshold) {
    if (threshold <= 0.0) throw std::runtime_error("clip_gradients: threshold must be positive");
    float th = float(threshold);
    for (auto& [_, g] : grads)
        for (auto& v : g.data) v = std::clamp(v, -th, th);
}

// Standard Adam with bias correction. Throws on non-finite gradients.
inline void adam_update(Seq2SeqParams<float>& params, const std::map<std::string, Tensor<float>>& grads,
                        AdamState& state, double lr, const TrainConfig& cfg) {
    state.t += 1;
    double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    double corr1 = 1.0 - std::pow(b1, double(state.t));
    double corr2 = 1.0 - std::pow(b2, double(state.t));
    for (size_t i = 0; i < params.tensors.size(); ++i) {
        auto& [name, p] = params.tensors[i];
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        const auto& g = it->second;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < p.numel(); ++j) {
            float gj = g.data[j];
            if (!std::isfinite(gj))
                throw std::runtime_error("adam_update: non-finite gradient in '" + name + "' at index " +
                                         std::to_string(j) + " (update " + std::to_string(state.t) + ")");
            m.data[j] = float(b1 * m.data[j] + (1.0 - b1) * gj);
            v.data[j] = float(b2 * v.data[j] + (1.0 - b2) * double(gj) * double(gj));
            double mhat = m.data[j] / corr1;
            double vhat = v.data[j] / corr2;
            p.data[j] -= float(lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Plateau-reduce learning rate schedule
// ---------------------------------------------------------------------------

struct LrSchedule {
    double lr;
    double factor;
    size_t patience;
    double best_metric = -HUGE_VAL;
    size_t not_improved = 0;

    // One call per checkpoint with the validation metric (higher is better).
    // Returns true when the rate was just reduced; the caller is expected to
    // reload the best parameters and optimizer state.
    bool on_checkpoint(double metric) {
        if (metric > best_metric) {
            best_metric = metric;
            not_improved = 0;
            return false;
        }
        if (++not_improved >= patience) {
            lr *= factor;
            not_improved = 0;
            return true;
        }
        return false;
    }
};

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

// exp(total unsmoothed NLL / total predicted target positions), evaluation
// mode. Positions are the target subwords plus the terminating EOS; PAD is
// excluded. Pairs over max_seq_len after BPE are skipped like in training.
inline double perplexity(const ModelBundle& m, const Bitext& bt, size_t workers = 1) {
    BpeCodec src_codec(m.src_bpe), trg_codec(m.trg_bpe);
    std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>> pairs;
    for (const auto& [src, trg] : bt.pairs) {
        auto s = src_codec.apply(src);
        auto t = trg_codec.apply(trg);
        if (s.empty() || s.size() > m.config.max_seq_len || t.size() > m.config.max_seq_len) continue;
        pairs.emplace_back(m.src_vocab.encode(s), m.trg_vocab.encode(t));
    }
    if (pairs.empty()) throw std::runtime_error("perplexity: no usable pairs");
    std::vector<double> nll(pairs.size(), 0.0);
    std::vector<size_t> count(pairs.size(), 0);
    parallel_for(pairs.size(), workers, [&](size_t i) {
        const auto& [src, trg] = pairs[i];
        auto enc = encode(m.params, src);
        auto st = initial_state(enc, m.config, 1);
        int32_t prev = Vocabulary::BOS;
        double total = 0.0;
        for (size_t j = 0; j <= trg.size(); ++j) {
            int32_t gold = j < trg.size() ? trg[j] : Vocabulary::EOS;
            auto lp = decode_step(m.params, enc, {prev}, st);
            total -= double(lp.data[size_t(gold)]);
            prev = gold;
        }
        nll[i] = total;
        count[i] = trg.size() + 1;
    });
    double total_nll = 0.0;
    size_t total_count = 0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        total_nll += nll[i];
        total_count += count[i];
    }
    return std::exp(total_nll / double(total_count));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct CheckpointMetrics {
    size_t checkpoint = 0;
    size_t updates = 0;
    double train_loss = 0.0; // mean optimized loss per target token since last checkpoint
    double valid_ppl = 0.0;
    double valid_bleu = 0.0;
    double lr = 0.0;
    double wall_seconds = 0.0;
};

inline std::string metrics_tsv_header() {
    return "checkpoint\tupdates\ttrain_loss\tvalid_ppl\tvalid_bleu\tlr\twall_seconds";
}

inline std::string metrics_tsv_row(const CheckpointMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%zu\t%zu\t%.6f\t%.6f\t%.4f\t%.8g\t%.3f", m.checkpoint, m.updates, m.train_loss,
                  m.valid_ppl, m.valid_bleu, m.lr, m.wall_seconds);
    return buf;
}

struct TrainState {
    Seq2SeqParams<float> params;
    AdamState adam;
    size_t updates = 0;
    std::vector<CheckpointMetrics> history;
    double lr = 0.0;
    size_t best_checkpoint = 0;
};

struct TrainResult {
    ModelBundle best;                    // best checkpoint by validation BLEU
    std::vector<CheckpointMetrics> log;
    std::string best_dir;
    size_t best_checkpoint = 0;
    double train_ppl = 0.0;              // unsmoothed, on the training bitext, best params
    size_t dropped_pairs = 0;            // over-length pairs removed before training
};

struct PreparedPair {
    std::vector<int32_t> src, trg;
};

namespace detail {

inline std::vector<IdBatch> epoch_batches(const std::vector<PreparedPair>& pairs, size_t batch_tokens,
                                          CounterRng rng) {
    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    // length bucketing: stable sort by target length keeps the shuffle as
    // tiebreak, so batches have similar lengths but random membership
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return pairs[a].trg.size() < pairs[b].trg.size(); });
    std::vector<IdBatch> batches;
    std::vector<std::vector<int32_t>> src_acc, trg_acc;
    size_t tokens = 0;
    auto flush = [&] {
        if (src_acc.empty()) return;
        batches.push_back(make_batch(src_acc, trg_acc));
        src_acc.clear();
        trg_acc.clear();
        tokens = 0;
    };
    for (size_t idx : order) {
        size_t t = pairs[idx].trg.size() + 1;
        if (!src_acc.empty() && tokens + t > batch_tokens) flush();
        src_acc.push_back(pairs[idx].src);
        trg_acc.push_back(pairs[idx].trg);
        tokens += t;
    }
    flush();
    rng.shuffle(batches);
    return batches;
}

} // namespace detail

// Runs exactly max_checkpoints * checkpoint_every updates (the compute
// budget never depends on dataset size). After each checkpoint the
// validation BLEU (beam 5) and perplexity are recorded; the best checkpoint
// by validation BLEU is kept, plus the last keep_last_params checkpoints.
// An optional teacher turns the objective into the alpha-weighted
// combination of NLL and word-level KD.
inline TrainResult train_loop(const Seq2SeqConfig& model_cfg, const TrainConfig& tcfg, const Bitext& train_bt,
                              const Bitext& valid_bt, const std::string& out_dir,
                              const ModelBundle* teacher = nullptr) {
    tcfg.validate();
    if (train_bt.empty()) throw std::runtime_error("train_loop: empty training bitext");
    if (valid_bt.empty()) throw std::runtime_error("train_loop: empty validation bitext");
    ensure_dir(out_dir);
    auto t0 = std::chrono::steady_clock::now();

    // subword pipeline: per-side BPE learned on the training corpus
    std::vector<TokenSeq> src_lines, trg_lines;
    for (const auto& [s, t] : train_bt.pairs) {
        src_lines.push_back(s);
        trg_lines.push_back(t);
    }
    ModelBundle bundle;
    bundle.config = model_cfg;
    bundle.seed = tcfg.seed;
    bundle.src_bpe = learn_bpe(src_lines, model_cfg.bpe_merges);
    bundle.trg_bpe = learn_bpe(trg_lines, model_cfg.bpe_merges);
    BpeCodec src_codec(bundle.src_bpe), trg_codec(bundle.trg_bpe);
    std::vector<TokenSeq> src_sub, trg_sub;
    for (const auto& s : src_lines) src_sub.push_back(src_codec.apply(s));
    for (const auto& t : trg_lines) trg_sub.push_back(trg_codec.apply(t));
    bundle.src_vocab = build_vocab(src_sub, 1);
    bundle.trg_vocab = build_vocab(trg_sub, 1);

    if (teacher && tcfg.kd_alpha > 0.0) {
        if (teacher->src_vocab.id_to_token != bundle.src_vocab.id_to_token ||
            teacher->trg_vocab.id_to_token != bundle.trg_vocab.id_to_token)
            throw std::runtime_error("train_loop: word-KD teacher must share the student vocabulary "
                                     "(same BPE merges on the same corpus)");
    }

    TrainResult result;
    std::vector<PreparedPair> prepared;
    for (size_t i = 0; i < train_bt.size(); ++i) {
        if (src_sub[i].empty() || src_sub[i].size() > model_cfg.max_seq_len ||
            trg_sub[i].size() > model_cfg.max_seq_len) {
            ++result.dropped_pairs;
            continue;
        }
        prepared.push_back({bundle.src_vocab.encode(src_sub[i]), bundle.trg_vocab.encode(trg_sub[i])});
    }
    if (prepared.empty()) throw std::runtime_error("train_loop: no usable training pairs after BPE");

    TrainState state;
    state.params = init_params<float>(model_cfg, bundle.src_vocab.size(), bundle.trg_vocab.size(), tcfg.seed);
    state.adam = AdamState::zeros_like(state.params);
    state.lr = tcfg.initial_lr;

    LrSchedule schedule{tcfg.initial_lr, tcfg.lr_reduce_factor, tcfg.lr_reduce_patience};
    Seq2SeqParams<float> best_params = state.params;
    AdamState best_adam = state.adam;
    double best_bleu = -1.0;

    CounterRng run_rng = CounterRng::from(tcfg.seed);
    std::vector<IdBatch> batches;
    size_t batch_pos = 0, epoch = 0;
    double loss_sum = 0.0;
    size_t loss_tokens = 0;

    std::vector<std::string> kept_dirs;
    std::string metrics_path = path_join(out_dir, "metrics.tsv");
    std::ofstream metrics_os(metrics_path);
    metrics_os << metrics_tsv_header() << '\n';

    std::vector<TokenSeq> valid_sources, valid_refs;
    for (const auto& [s, t] : valid_bt.pairs) {
        valid_sources.push_back(s);
        valid_refs.push_back(t);
    }

    size_t total_updates = tcfg.total_updates();
    for (size_t update = 1; update <= total_updates; ++update) {
        if (batch_pos >= batches.size()) {
            batches = detail::epoch_batches(prepared, tcfg.batch_size, run_rng.split(0x65706f63ULL, epoch));
            batch_pos = 0;
            ++epoch;
        }
        const IdBatch& batch = batches[batch_pos++];

        Tape<float> tape;
        auto tp = register_params(tape, state.params);
        DropoutPlan plan;
        plan.enabled = model_cfg.rnn_dropout_inputs > 0.0 || model_cfg.rnn_dropout_states > 0.0 ||
                       model_cfg.embed_dropout > 0.0;
        plan.seed = tcfg.seed;
        plan.step = update;
        Var logprobs = seq2seq_logprobs(tape, tp, model_cfg, batch, plan);
        auto targets = time_major_targets(batch);
        auto mask = time_major_mask<float>(batch);
        auto nll = nll_loss(tape, logprobs, targets, mask, tcfg.label_smoothing);
        Var loss = nll.sum;
        if (teacher && tcfg.kd_alpha > 0.0) {
            Tensor<float> q = eval_logprobs(teacher->params, batch);
            for (auto& v : q.data) v = std::exp(v);
            auto kd = word_kd_loss(tape, logprobs, q, mask);
            loss = combined_loss(tape, nll.sum, kd.sum, tcfg.kd_alpha);
        }
        double loss_val = double(tape.value(loss).item());
        if (!std::isfinite(loss_val))
            throw std::runtime_error("train_loop: loss diverged (non-finite) at update " + std::to_string(update));
        loss_sum += loss_val;
        loss_tokens += nll.tokens;

        tape.backward(loss);
        auto grads = tape.gradients();
        clip_gradients(grads, tcfg.grad_clip);
        adam_update(state.params, grads, state.adam, state.lr, tcfg);
        state.updates = update;

        if (update % tcfg.checkpoint_every == 0) {
            size_t ckpt = update / tcfg.checkpoint_every;
            bundle.params = state.params;
            TranslateOptions topt;
            topt.beam_size = tcfg.valid_beam;
            topt.workers = tcfg.workers;
            auto translated = translate_corpus(bundle, valid_sources, topt);
            auto bleu = corpus_bleu(translated.lines(), valid_refs);
            double vppl = perplexity(bundle, valid_bt, tcfg.workers);

            CheckpointMetrics cm;
            cm.checkpoint = ckpt;
            cm.updates = update;
            cm.train_loss = loss_tokens ? loss_sum / double(loss_tokens) : 0.0;
            cm.valid_ppl = vppl;
            cm.valid_bleu = bleu.bleu;
            cm.lr = state.lr;
            cm.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            state.history.push_back(cm);
            metrics_os << metrics_tsv_row(cm) << '\n';
            metrics_os.flush();
            loss_sum = 0.0;
            loss_tokens = 0;

            std::string ckpt_dir = path_join(out_dir, "checkpoint_" + std::to_string(ckpt));
            save_checkpoint(bundle, ckpt_dir, train_config_to_json(tcfg));
            kept_dirs.push_back(ckpt_dir);
            while (kept_dirs.size() > tcfg.keep_last_params) {
                std::filesystem::remove_all(kept_dirs.front());
                kept_dirs.erase(kept_dirs.begin());
            }

            if (bleu.bleu > best_bleu) {
                best_bleu = bleu.bleu;
                best_params = state.params;
                best_adam = state.adam;
                state.best_checkpoint = ckpt;
                save_checkpoint(bundle, path_join(out_dir, "best"), train_config_to_json(tcfg));
            }
            bool decayed = schedule.on_checkpoint(bleu.bleu);
            state.lr = schedule.lr;
            if (decayed && tcfg.reset_params_on_decay) {
                state.params = best_params;
                state.adam = best_adam;
            }
        }
    }
    metrics_os.close();

    result.best = bundle;
    result.best.params = best_params;
    result.log = state.history;
    result.best_dir = path_join(out_dir, "best");
    result.best_checkpoint = state.best_checkpoint;
    result.train_ppl = perplexity(result.best, train_bt, tcfg.workers);
    return result;
}

} // namespace distillforge
