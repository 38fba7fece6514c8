// distillforge command line: synthetic task generation, training,
// translation, distillation dataset construction, scoring, experiments,
// grid search and report emission.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>

#include "distillforge/harness.hpp"

using namespace distillforge;
using nlohmann::json;

namespace {

Seq2SeqConfig model_config_from_json(const json& j) {
    if (j.is_string()) {
        std::string preset = j.get<std::string>();
        if (preset == "LARGE") return Seq2SeqConfig::large_preset();
        if (preset == "SMALL") return Seq2SeqConfig::small_preset();
        throw std::runtime_error("unknown model preset: " + preset);
    }
    Seq2SeqConfig c;
    c.bpe_merges = j.value("bpe_merges", c.bpe_merges);
    c.embed_size = j.value("embed_size", c.embed_size);
    c.hidden_size = j.value("hidden_size", c.hidden_size);
    c.num_layers = j.value("num_layers", c.num_layers);
    if (j.contains("cell_type")) c.cell_type = cell_type_from(j.at("cell_type").get<std::string>());
    c.rnn_dropout_inputs = j.value("rnn_dropout_inputs", c.rnn_dropout_inputs);
    c.rnn_dropout_states = j.value("rnn_dropout_states", c.rnn_dropout_states);
    c.embed_dropout = j.value("embed_dropout", c.embed_dropout);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    return c;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig t;
    t.initial_lr = j.value("initial_learning_rate", t.initial_lr);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.grad_clip = j.value("gradient_clipping_threshold", t.grad_clip);
    t.label_smoothing = j.value("label_smoothing", t.label_smoothing);
    t.checkpoint_every = j.value("checkpoint_frequency", t.checkpoint_every);
    t.max_checkpoints = j.value("max_checkpoints", t.max_checkpoints);
    t.lr_reduce_factor = j.value("learning_rate_reduce_factor", t.lr_reduce_factor);
    t.lr_reduce_patience = j.value("learning_rate_reduce_num_not_improved", t.lr_reduce_patience);
    t.keep_last_params = j.value("keep_last_params", t.keep_last_params);
    t.seed = j.value("seed", t.seed);
    t.kd_alpha = j.value("kd_alpha", t.kd_alpha);
    t.valid_beam = j.value("valid_beam", t.valid_beam);
    t.workers = j.value("workers", t.workers);
    return t;
}

Bitext load_pair(const std::string& src, const std::string& trg, const std::string& name, size_t max_len) {
    auto loaded = load_bitext(src, trg, name, max_len);
    if (loaded.dropped)
        std::fprintf(stderr, "[%s] dropped %zu over-length pairs at load\n", name.c_str(), loaded.dropped);
    return std::move(loaded.bitext);
}

void write_lines(const std::string& path, const std::vector<std::vector<TokenSeq>>& nbest) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    for (const auto& cands : nbest) {
        for (size_t i = 0; i < cands.size(); ++i) os << (i ? "\t" : "") << join_tokens(cands[i]);
        os << '\n';
    }
}

int cmd_synth(const std::string& spec_path, size_t n, const std::string& out_dir, uint64_t seed_override,
              bool has_seed) {
    SyntheticTaskSpec spec;
    if (spec_path.empty()) {
        spec = default_task_spec(has_seed ? seed_override : 1);
    } else {
        spec = task_spec_from_json(json::parse(read_file(spec_path)));
        if (has_seed) {
            // regenerate shorthand inventories under the new seed when possible
            auto j = json::parse(read_file(spec_path));
            j["seed"] = seed_override;
            spec = task_spec_from_json(j);
        }
    }
    auto splits = generate_bitext(spec, n);
    ensure_dir(out_dir);
    save_bitext(splits.train, path_join(out_dir, "base"));
    save_bitext(splits.valid, path_join(out_dir, "valid"));
    save_bitext(splits.test, path_join(out_dir, "test"));
    write_file(path_join(out_dir, "oracle.json"), task_spec_to_json(spec).dump(2) + "\n");
    auto st = corpus_stats(splits.train);
    std::printf("generated %zu train / %zu valid / %zu test sentences (%zu target tokens, %zu word vocab)\n",
                splits.train.size(), splits.valid.size(), splits.test.size(), st.total_tokens, st.vocab_size);
    return 0;
}

int cmd_score(const std::string& hyp_path, const std::string& ref_path) {
    auto hyp = read_token_lines(hyp_path);
    auto ref = read_token_lines(ref_path);
    auto r = corpus_bleu(hyp, ref);
    std::printf("bleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len\n");
    std::printf("%.2f\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\t%zu\t%zu\n", r.bleu, r.ngram_precisions[0],
                r.ngram_precisions[1], r.ngram_precisions[2], r.ngram_precisions[3], r.brevity_penalty, r.hyp_len,
                r.ref_len);
    std::printf("BLEU = %.2f (precisions %.1f/%.1f/%.1f/%.1f, brevity penalty %.3f, %zu vs %zu tokens)\n", r.bleu,
                100 * r.ngram_precisions[0], 100 * r.ngram_precisions[1], 100 * r.ngram_precisions[2],
                100 * r.ngram_precisions[3], r.brevity_penalty, r.hyp_len, r.ref_len);
    return 0;
}

int cmd_experiment(const std::string& config_path) {
    auto j = json::parse(read_file(config_path));
    std::string type = j.value("type", "cell");
    if (type == "pipeline") {
        PipelineConfig cfg;
        cfg.task = task_spec_from_json(j.at("task"));
        cfg.n_train = j.value("n_train", size_t(20000));
        cfg.teacher_model = model_config_from_json(j.at("teacher_model"));
        cfg.student_model = model_config_from_json(j.at("student_model"));
        cfg.teacher_train = train_config_from_json(j.value("teacher_train", json::object()));
        cfg.student_train = train_config_from_json(j.value("student_train", json::object()));
        cfg.trial_seeds = j.value("trial_seeds", std::vector<uint64_t>{1, 2, 3});
        cfg.beam = j.value("beam", size_t(5));
        cfg.out_dir = j.at("out_dir").get<std::string>();
        cfg.workers = j.value("workers", default_workers());
        cfg.small_only = j.value("small_only", false);
        auto result = run_pipeline(cfg);
        emit_tables_and_curves(cfg.out_dir);
        bool failed = false;
        for (const auto& row : result.rows) {
            std::printf("%-14s %-6s dropout=%-3s mean BLEU %6.2f  train PPL %6.2f%s\n", row.dataset.c_str(),
                        row.size.c_str(), row.dropout ? "on" : "off", row.mean_bleu, row.mean_train_ppl,
                        row.complete ? "" : "  INCOMPLETE");
            failed = failed || !row.complete;
        }
        return failed ? 1 : 0;
    }

    // single cell
    std::string data_dir = j.at("data_dir").get<std::string>();
    ExperimentCell cell;
    cell.model = model_config_from_json(j.at("model"));
    std::string recipe = j.value("recipe", "base");
    auto parsed = parse_recipe(recipe);
    std::vector<Bitext> parts;
    for (const auto& comp : parsed.components)
        parts.push_back(load_pair(path_join(data_dir, comp + ".src"), path_join(data_dir, comp + ".trg"), comp,
                                  cell.model.max_seq_len));
    cell.train = concat_datasets(parts);
    cell.train.name = recipe;
    cell.valid = load_pair(path_join(data_dir, "valid.src"), path_join(data_dir, "valid.trg"), "valid",
                           cell.model.max_seq_len);
    cell.test =
        load_pair(path_join(data_dir, "test.src"), path_join(data_dir, "test.trg"), "test", cell.model.max_seq_len);
    cell.dataset = j.value("dataset_label", recipe);
    cell.size = j.value("size_label", std::string("custom"));
    cell.dropout = j.value("dropout", true);
    cell.train_cfg = train_config_from_json(j.value("train", json::object()));
    cell.trial_seeds = j.value("trial_seeds", std::vector<uint64_t>{1, 2, 3});
    cell.beam = j.value("beam", size_t(5));
    cell.out_dir = j.at("out_dir").get<std::string>();
    cell.trial_workers = j.value("workers", default_workers());
    auto row = run_experiment(cell);
    std::printf("%s: mean BLEU %.2f, train PPL %.2f over %zu trials%s\n", row.dataset.c_str(), row.mean_bleu,
                row.mean_train_ppl, row.trials.size(), row.complete ? "" : " (INCOMPLETE)");
    for (const auto& t : row.trials) {
        if (t.failed)
            std::printf("  seed %llu: FAILED: %s\n", (unsigned long long)t.seed, t.error.c_str());
        else
            std::printf("  seed %llu: BLEU %.2f, train PPL %.2f\n", (unsigned long long)t.seed, t.test_bleu,
                        t.train_ppl);
    }
    return row.complete ? 0 : 1;
}

int cmd_grid(const std::string& config_path) {
    auto j = json::parse(read_file(config_path));
    GridSpec grid;
    grid.bpe_merges = j.at("grid").at("bpe_merges").get<std::vector<size_t>>();
    grid.hidden_embed = j.at("grid").at("hidden_embed").get<std::vector<size_t>>();
    grid.num_layers = j.at("grid").value("num_layers", size_t(1));
    if (j.at("grid").contains("cell_type")) grid.cell_type = cell_type_from(j.at("grid").at("cell_type"));
    std::vector<std::pair<std::string, Bitext>> variants;
    for (const auto& v : j.at("variants"))
        variants.emplace_back(v.at("name").get<std::string>(),
                              load_pair(v.at("src").get<std::string>(), v.at("trg").get<std::string>(),
                                        v.at("name").get<std::string>(), 100));
    auto valid = load_pair(j.at("valid").at("src"), j.at("valid").at("trg"), "valid", 100);
    auto tcfg = train_config_from_json(j.value("train", json::object()));
    std::string out_dir = j.at("out_dir").get<std::string>();
    size_t workers = j.value("workers", default_workers());
    auto points = grid_search(grid, variants, valid, tcfg, out_dir, workers);
    bool failed = false;
    for (const auto& p : points) {
        std::printf("%-10s bpe=%-6zu hidden=%-4zu params=%-9zu best valid BLEU %6.2f%s\n", p.variant.c_str(),
                    p.config.bpe_merges, p.config.hidden_size, p.param_count, p.best_valid_bleu,
                    p.failed ? ("  FAILED: " + p.error).c_str() : "");
        failed = failed || p.failed;
    }
    std::printf("scatter data: %s\n", path_join(out_dir, "scatter.tsv").c_str());
    return failed ? 1 : 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale NMT training and sequence-level knowledge distillation toolkit"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a synthetic translation corpus with a known distribution");
    std::string synth_spec, synth_out;
    size_t synth_n = 20000;
    uint64_t synth_seed = 1;
    synth->add_option("--spec", synth_spec, "task spec JSON (full inventory or generator shorthand)");
    synth->add_option("--n", synth_n, "training sentences");
    synth->add_option("--out-dir", synth_out, "output directory")->required();
    auto* synth_seed_opt = synth->add_option("--seed", synth_seed, "generator seed");

    // ---- train ----
    auto* train = app.add_subcommand("train", "train a model on a bitext");
    std::string train_src, train_trg, valid_src, valid_trg, train_out, kd_teacher;
    Seq2SeqConfig mcfg;
    TrainConfig tcfg;
    std::string cell_type = "lstm";
    train->add_option("--train-src", train_src)->required();
    train->add_option("--train-trg", train_trg)->required();
    train->add_option("--valid-src", valid_src)->required();
    train->add_option("--valid-trg", valid_trg)->required();
    train->add_option("--out-dir", train_out)->required();
    train->add_option("--num-words", mcfg.bpe_merges, "BPE merge count");
    train->add_option("--num-embed", mcfg.embed_size);
    train->add_option("--rnn-num-hidden", mcfg.hidden_size);
    train->add_option("--num-layers", mcfg.num_layers);
    train->add_option("--rnn-cell-type", cell_type, "lstm or gru");
    train->add_option("--rnn-dropout-inputs", mcfg.rnn_dropout_inputs);
    train->add_option("--rnn-dropout-states", mcfg.rnn_dropout_states);
    train->add_option("--embed-dropout", mcfg.embed_dropout);
    train->add_option("--max-seq-len", mcfg.max_seq_len);
    train->add_option("--initial-learning-rate", tcfg.initial_lr);
    train->add_option("--batch-size", tcfg.batch_size, "target tokens per update (word batching)");
    train->add_option("--label-smoothing", tcfg.label_smoothing);
    train->add_option("--checkpoint-frequency", tcfg.checkpoint_every);
    train->add_option("--max-checkpoints", tcfg.max_checkpoints);
    train->add_option("--gradient-clipping-threshold", tcfg.grad_clip);
    train->add_option("--learning-rate-reduce-factor", tcfg.lr_reduce_factor);
    train->add_option("--learning-rate-reduce-num-not-improved", tcfg.lr_reduce_patience);
    train->add_option("--keep-last-params", tcfg.keep_last_params);
    train->add_option("--seed", tcfg.seed);
    train->add_option("--kd-alpha", tcfg.kd_alpha, "weight on word-level KD when a teacher is given");
    train->add_option("--kd-teacher", kd_teacher, "teacher checkpoint for word-level KD");
    train->add_option("--workers", tcfg.workers, "validation decode workers");

    // ---- translate ----
    auto* translate = app.add_subcommand("translate", "translate a corpus with a trained checkpoint");
    std::string tr_input, tr_output, tr_ckpt;
    size_t tr_beam = 5, tr_nbest = 1, tr_workers = default_workers();
    bool tr_no_length_norm = false;
    translate->add_option("--input", tr_input)->required();
    translate->add_option("--output", tr_output)->required();
    translate->add_option("--checkpoint", tr_ckpt)->required();
    translate->add_option("--beam-size", tr_beam);
    translate->add_option("--nbest", tr_nbest, "emit K tab-separated candidates per line");
    translate->add_flag("--no-length-norm", tr_no_length_norm);
    translate->add_option("--workers", tr_workers);

    // ---- distill ----
    auto* distill = app.add_subcommand("distill", "build kd/bt/best-2 datasets from teacher checkpoints");
    std::string di_recipe = "base+kd", di_teacher, di_reverse, di_src, di_trg, di_out;
    size_t di_beam = 5, di_workers = default_workers();
    uint64_t di_seed = 1;
    distill->add_option("--recipe", di_recipe, "e.g. base+kd+bt or base+best-2");
    distill->add_option("--teacher", di_teacher, "forward teacher checkpoint");
    distill->add_option("--reverse-teacher", di_reverse, "reverse teacher checkpoint (for bt)");
    distill->add_option("--base-src", di_src)->required();
    distill->add_option("--base-trg", di_trg)->required();
    distill->add_option("--beam-size", di_beam);
    distill->add_option("--out-dir", di_out)->required();
    distill->add_option("--workers", di_workers);
    distill->add_option("--seed", di_seed);

    // ---- score ----
    auto* score = app.add_subcommand("score", "corpus BLEU of a hypothesis file against a reference file");
    std::string sc_hyp, sc_ref;
    score->add_option("--hyp", sc_hyp)->required();
    score->add_option("--ref", sc_ref)->required();

    // ---- experiment / grid / report ----
    auto* experiment = app.add_subcommand("experiment", "run one experiment cell or the full pipeline from JSON");
    std::string exp_config;
    experiment->add_option("--config", exp_config)->required();

    auto* gridcmd = app.add_subcommand("grid", "grid search over architectures and dataset variants");
    std::string grid_config;
    gridcmd->add_option("--config", grid_config)->required();

    auto* report = app.add_subcommand("report", "emit tables and curves from a results directory");
    std::string report_dir;
    report->add_option("--results", report_dir)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(synth_spec, synth_n, synth_out, synth_seed, !synth_seed_opt->empty());
        if (train->parsed()) {
            mcfg.cell_type = cell_type_from(cell_type);
            auto train_bt = load_pair(train_src, train_trg, "train", mcfg.max_seq_len);
            auto valid_bt = load_pair(valid_src, valid_trg, "valid", mcfg.max_seq_len);
            std::optional<ModelBundle> teacher;
            if (!kd_teacher.empty()) teacher = load_checkpoint(kd_teacher);
            auto result = train_loop(mcfg, tcfg, train_bt, valid_bt, train_out, teacher ? &*teacher : nullptr);
            if (result.dropped_pairs)
                std::fprintf(stderr, "dropped %zu over-length pairs after BPE\n", result.dropped_pairs);
            const auto& last = result.log.back();
            std::printf("finished %zu checkpoints (%zu updates); best checkpoint %zu, valid BLEU %.2f\n",
                        last.checkpoint, last.updates, result.best_checkpoint,
                        result.log[result.best_checkpoint - 1].valid_bleu);
            std::printf("best checkpoint: %s\n", result.best_dir.c_str());
            return 0;
        }
        if (translate->parsed()) {
            auto bundle = load_checkpoint(tr_ckpt);
            auto sources = read_token_lines(tr_input);
            TranslateOptions opt;
            opt.beam_size = tr_beam;
            opt.nbest = tr_nbest;
            opt.length_norm = !tr_no_length_norm;
            opt.workers = tr_workers;
            auto out = translate_corpus(bundle, sources, opt);
            write_lines(tr_output, out.nbest);
            if (out.failures) std::fprintf(stderr, "%zu sentences failed and were emitted as empty lines\n", out.failures);
            if (out.shortfalls) std::fprintf(stderr, "%zu sentences returned fewer than %zu candidates\n", out.shortfalls, tr_nbest);
            return 0;
        }
        if (distill->parsed()) {
            auto recipe = parse_recipe(di_recipe);
            auto base = load_pair(di_src, di_trg, "base", 100);
            ensure_dir(di_out);
            DistillStats stats;
            json manifest = {{"recipe", di_recipe}, {"beam", di_beam}, {"seed", di_seed}, {"components", json::object()}};
            std::optional<ModelBundle> teacher, reverse_teacher;
            for (const auto& comp : recipe.components) {
                Bitext out;
                if (comp == "base") {
                    out = base;
                } else if (comp == "kd" || comp == "best2") {
                    if (di_teacher.empty()) throw std::runtime_error("recipe needs --teacher for '" + comp + "'");
                    if (!teacher) teacher = load_checkpoint(di_teacher);
                    out = comp == "kd" ? make_kd_dataset(*teacher, base, di_beam, di_workers, &stats)
                                       : make_best2_dataset(*teacher, base, std::max<size_t>(2, di_beam), di_workers,
                                                            &stats);
                } else { // bt
                    if (di_reverse.empty()) throw std::runtime_error("recipe needs --reverse-teacher for 'bt'");
                    if (!reverse_teacher) reverse_teacher = load_checkpoint(di_reverse);
                    out = make_bt_dataset(*reverse_teacher, base, di_beam, di_workers, &stats);
                }
                save_bitext(out, path_join(di_out, comp));
                manifest["components"][comp] = {{"pairs", out.size()}, {"hash", hash_hex(bitext_hash(out))}};
            }
            manifest["failures"] = stats.failures;
            manifest["best2_shortfalls"] = stats.shortfalls;
            if (!di_teacher.empty()) manifest["teacher_checkpoint"] = di_teacher;
            if (!di_reverse.empty()) manifest["reverse_teacher_checkpoint"] = di_reverse;
            write_file(path_join(di_out, "manifest.json"), manifest.dump(2) + "\n");
            std::printf("wrote %zu components to %s (failures %zu, best-2 shortfalls %zu)\n",
                        recipe.components.size(), di_out.c_str(), stats.failures, stats.shortfalls);
            return 0;
        }
        if (score->parsed()) return cmd_score(sc_hyp, sc_ref);
        if (experiment->parsed()) return cmd_experiment(exp_config);
        if (gridcmd->parsed()) return cmd_grid(grid_config);
        if (report->parsed()) {
            emit_tables_and_curves(report_dir);
            std::printf("report written under %s\n", path_join(report_dir, "report").c_str());
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
