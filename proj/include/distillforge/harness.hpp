// Experiment orchestration: single cells (recipe x dropout x student size x
// trials), the full pipeline behind the augmentation-condition table, grid
// search, and report emission.
#pragma once

#include <json.hpp>

#include <optional>
#include <tuple>

#include "distillforge/distill.hpp"
#include "distillforge/eval.hpp"
#include "distillforge/synth.hpp"
#include "distillforge/train.hpp"

namespace distillforge {

struct ExperimentCell {
    std::string dataset;  // recipe label, e.g. "base+kd"
    std::string size;     // student size label, e.g. "SMALL"
    bool dropout = true;
    Bitext train, valid, test;
    Seq2SeqConfig model;       // dropout rates overridden by `dropout`
    TrainConfig train_cfg;     // seed overridden per trial
    std::vector<uint64_t> trial_seeds = {1, 2, 3};
    size_t beam = 5;           // test-time decode beam
    std::string out_dir;
    size_t trial_workers = 1;  // trials run as independent jobs
};

struct TrialOutcome {
    uint64_t seed = 0;
    double test_bleu = 0.0;
    double train_ppl = 0.0;
    std::vector<CheckpointMetrics> log;
    bool failed = false;
    std::string error;
};

struct ResultRow {
    std::string dataset;
    std::string size;
    bool dropout = true;
    std::vector<TrialOutcome> trials;
    double mean_bleu = 0.0;
    double mean_train_ppl = 0.0;
    bool complete = true;
    std::string failing_seeds;

    std::vector<double> trial_bleu() const {
        std::vector<double> out;
        for (const auto& t : trials) out.push_back(t.test_bleu);
        return out;
    }
};

inline std::string cell_slug(const ExperimentCell& cell) {
    return cell.dataset + "__" + (cell.dropout ? "dropout" : "nodropout") + "__" + cell.size;
}

// First checkpoint whose validation BLEU reaches 95% of the run's final
// validation BLEU (the convergence-speed statistic).
inline size_t convergence_checkpoint(const std::vector<CheckpointMetrics>& log) {
    if (log.empty()) return 0;
    double target = 0.95 * log.back().valid_bleu;
    for (const auto& m : log)
        if (m.valid_bleu >= target) return m.checkpoint;
    return log.back().checkpoint;
}

inline nlohmann::json row_to_json(const ResultRow& row) {
    nlohmann::json trials = nlohmann::json::array();
    for (const auto& t : row.trials) {
        nlohmann::json tj = {{"seed", t.seed},       {"test_bleu", t.test_bleu}, {"train_ppl", t.train_ppl},
                             {"failed", t.failed},   {"error", t.error},
                             {"convergence_checkpoint", convergence_checkpoint(t.log)}};
        trials.push_back(tj);
    }
    return {{"dataset", row.dataset},   {"size", row.size},
            {"dropout", row.dropout},   {"trials", trials},
            {"mean_bleu", row.mean_bleu}, {"mean_train_ppl", row.mean_train_ppl},
            {"complete", row.complete}, {"failing_seeds", row.failing_seeds}};
}

// Trains one student per trial seed on the cell's recipe corpus (vocabulary
// rebuilt from it), evaluates test BLEU (beam 5) at the best validation
// checkpoint and the unsmoothed train perplexity, and aggregates.
inline ResultRow run_experiment(const ExperimentCell& cell) {
    ResultRow row;
    row.dataset = cell.dataset;
    row.size = cell.size;
    row.dropout = cell.dropout;
    row.trials.resize(cell.trial_seeds.size());
    ensure_dir(cell.out_dir);

    Seq2SeqConfig model = cell.model;
    model.set_dropout(cell.dropout);

    parallel_for(cell.trial_seeds.size(), cell.trial_workers, [&](size_t i) {
        TrialOutcome& t = row.trials[i];
        t.seed = cell.trial_seeds[i];
        try {
            TrainConfig tcfg = cell.train_cfg;
            tcfg.seed = t.seed;
            std::string dir = path_join(cell.out_dir, "trial_" + std::to_string(t.seed));
            auto result = train_loop(model, tcfg, cell.train, cell.valid, dir);
            std::vector<TokenSeq> sources, refs;
            for (const auto& [s, r] : cell.test.pairs) {
                sources.push_back(s);
                refs.push_back(r);
            }
            TranslateOptions topt;
            topt.beam_size = cell.beam;
            topt.workers = tcfg.workers;
            auto translated = translate_corpus(result.best, sources, topt);
            t.test_bleu = corpus_bleu(translated.lines(), refs).bleu;
            t.train_ppl = result.train_ppl;
            t.log = result.log;
        } catch (const std::exception& e) {
            t.failed = true;
            t.error = e.what();
        }
    });

    size_t ok = 0;
    for (const auto& t : row.trials) {
        if (t.failed) {
            row.complete = false;
            row.failing_seeds += (row.failing_seeds.empty() ? "" : ",") + std::to_string(t.seed);
            continue;
        }
        row.mean_bleu += t.test_bleu;
        row.mean_train_ppl += t.train_ppl;
        ++ok;
    }
    if (ok) {
        row.mean_bleu /= double(ok);
        row.mean_train_ppl /= double(ok);
    }
    write_file(path_join(cell.out_dir, "row.json"), row_to_json(row).dump(2) + "\n");
    return row;
}

// ---------------------------------------------------------------------------
// Full pipeline: teachers -> datasets -> the experiment matrix
// ---------------------------------------------------------------------------

struct PipelineConfig {
    SyntheticTaskSpec task;
    size_t n_train = 20000;
    Seq2SeqConfig teacher_model;  // also the LARGE-student architecture
    Seq2SeqConfig student_model;  // SMALL: differs from the teacher in BPE merges only
    TrainConfig teacher_train;    // long budget
    TrainConfig student_train;    // 30-checkpoint-analog budget (or the longer one)
    std::vector<uint64_t> trial_seeds = {1, 2, 3};
    size_t beam = 5;
    std::string out_dir;
    size_t workers = 1;
    bool small_only = false; // skip LARGE-student cells (faster ablations)
};

struct PipelineResult {
    std::vector<ResultRow> rows;
    std::string data_dir;
    std::string teacher_dir, reverse_teacher_dir;
    SyntheticSplits splits;
    Bitext kd, bt, best2;
};

inline Bitext swap_sides(const Bitext& bt, const std::string& name) {
    Bitext out;
    out.name = name;
    for (const auto& [s, t] : bt.pairs) out.pairs.push_back({t, s});
    return out;
}

inline Bitext assemble_recipe(const std::string& recipe, const Bitext& base, const Bitext& kd, const Bitext& bt,
                              const Bitext& best2) {
    auto r = parse_recipe(recipe);
    std::vector<Bitext> parts;
    for (const auto& c : r.components) {
        if (c == "base")
            parts.push_back(base);
        else if (c == "kd")
            parts.push_back(kd);
        else if (c == "bt")
            parts.push_back(bt);
        else
            parts.push_back(best2);
    }
    auto out = concat_datasets(parts);
    out.name = recipe;
    return out;
}

// Trains the forward and reverse teachers, materializes every derived
// dataset, then runs the matrix
//   {baseline, kd, base+kd, base+kd+bt, base+best-2} x {dropout on, off}
//   x {SMALL, LARGE} minus the LARGE x no-dropout cells  ->  15 rows.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
    PipelineResult out;
    ensure_dir(cfg.out_dir);
    out.data_dir = path_join(cfg.out_dir, "data");
    ensure_dir(out.data_dir);

    out.splits = generate_bitext(cfg.task, cfg.n_train);
    save_bitext(out.splits.train, path_join(out.data_dir, "base"));
    save_bitext(out.splits.valid, path_join(out.data_dir, "valid"));
    save_bitext(out.splits.test, path_join(out.data_dir, "test"));
    write_file(path_join(out.data_dir, "oracle.json"), task_spec_to_json(cfg.task).dump(2) + "\n");

    // teachers
    out.teacher_dir = path_join(cfg.out_dir, "teacher");
    TrainConfig tt = cfg.teacher_train;
    tt.workers = cfg.workers;
    auto teacher = train_loop(cfg.teacher_model, tt, out.splits.train, out.splits.valid, out.teacher_dir);
    out.reverse_teacher_dir = path_join(cfg.out_dir, "reverse_teacher");
    auto rev_train = swap_sides(out.splits.train, "base_rev");
    auto rev_valid = swap_sides(out.splits.valid, "valid_rev");
    auto reverse_teacher = train_loop(cfg.teacher_model, tt, rev_train, rev_valid, out.reverse_teacher_dir);

    // derived datasets
    DistillStats stats;
    out.kd = make_kd_dataset(teacher.best, out.splits.train, cfg.beam, cfg.workers, &stats);
    out.bt = make_bt_dataset(reverse_teacher.best, out.splits.train, cfg.beam, cfg.workers, &stats);
    out.best2 = make_best2_dataset(teacher.best, out.splits.train, std::max<size_t>(2, cfg.beam), cfg.workers, &stats);
    save_bitext(out.kd, path_join(out.data_dir, "kd"));
    save_bitext(out.bt, path_join(out.data_dir, "bt"));
    save_bitext(out.best2, path_join(out.data_dir, "best2"));

    nlohmann::json manifest = {
        {"task_seed", cfg.task.seed},
        {"trial_seeds", cfg.trial_seeds},
        {"beam", cfg.beam},
        {"teacher_checkpoint", out.teacher_dir},
        {"reverse_teacher_checkpoint", out.reverse_teacher_dir},
        {"distill_failures", stats.failures},
        {"best2_shortfalls", stats.shortfalls},
        {"datasets",
         {{"base", hash_hex(bitext_hash(out.splits.train))},
          {"kd", hash_hex(bitext_hash(out.kd))},
          {"bt", hash_hex(bitext_hash(out.bt))},
          {"best2", hash_hex(bitext_hash(out.best2))}}},
    };
    write_file(path_join(cfg.out_dir, "manifest.json"), manifest.dump(2) + "\n");

    // the matrix
    const std::vector<std::string> recipes = {"base", "kd", "base+kd", "base+kd+bt", "base+best-2"};
    for (const auto& recipe : recipes) {
        for (bool size_large : {false, true}) {
            if (size_large && cfg.small_only) continue;
            for (bool dropout : {true, false}) {
                if (size_large && !dropout) continue; // cells the matrix omits
                ExperimentCell cell;
                cell.dataset = recipe == "base" ? "baseline" : recipe;
                cell.size = size_large ? "LARGE" : "SMALL";
                cell.dropout = dropout;
                cell.train = assemble_recipe(recipe, out.splits.train, out.kd, out.bt, out.best2);
                cell.valid = out.splits.valid;
                cell.test = out.splits.test;
                cell.model = size_large ? cfg.teacher_model : cfg.student_model;
                cell.train_cfg = cfg.student_train;
                cell.trial_seeds = cfg.trial_seeds;
                cell.beam = cfg.beam;
                cell.trial_workers = cfg.workers;
                cell.out_dir = path_join(path_join(cfg.out_dir, "cells"), cell_slug(cell));
                out.rows.push_back(run_experiment(cell));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

struct GridSpec {
    std::vector<size_t> bpe_merges;
    std::vector<size_t> hidden_embed; // num-hidden == num-embed per point
    size_t num_layers = 1;
    CellType cell_type = CellType::lstm;
};

struct GridPoint {
    std::string variant; // dataset label
    Seq2SeqConfig config;
    size_t param_count = 0;
    double best_valid_bleu = 0.0;
    bool failed = false;
    std::string error;
};

// Trains every grid point on every dataset variant for the fixed budget and
// records (parameter count, best validation BLEU). Per-point failures are
// recorded and the search continues.
inline std::vector<GridPoint> grid_search(const GridSpec& grid,
                                          const std::vector<std::pair<std::string, Bitext>>& variants,
                                          const Bitext& valid, const TrainConfig& tcfg, const std::string& out_dir,
                                          size_t workers = 1) {
    std::vector<GridPoint> points;
    for (const auto& [vname, _] : variants) {
        (void)_;
        for (size_t merges : grid.bpe_merges)
            for (size_t he : grid.hidden_embed) {
                GridPoint p;
                p.variant = vname;
                p.config.bpe_merges = merges;
                p.config.embed_size = he;
                p.config.hidden_size = he;
                p.config.num_layers = grid.num_layers;
                p.config.cell_type = grid.cell_type;
                points.push_back(p);
            }
    }
    ensure_dir(out_dir);
    parallel_for(points.size(), workers, [&](size_t i) {
        GridPoint& p = points[i];
        const Bitext* train = nullptr;
        for (const auto& [vname, bt] : variants)
            if (vname == p.variant) train = &bt;
        try {
            std::string dir = path_join(out_dir, p.variant + "__bpe" + std::to_string(p.config.bpe_merges) + "__h" +
                                                     std::to_string(p.config.hidden_size));
            auto result = train_loop(p.config, tcfg, *train, valid, dir);
            p.param_count = result.best.params.total_size();
            for (const auto& m : result.log) p.best_valid_bleu = std::max(p.best_valid_bleu, m.valid_bleu);
        } catch (const std::exception& e) {
            p.failed = true;
            p.error = e.what();
        }
    });
    // scatter data, one line per (architecture, variant)
    std::string tsv = "variant\tbpe_merges\thidden\tparams\tbest_valid_bleu\tfailed\n";
    for (const auto& p : points) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s\t%zu\t%zu\t%zu\t%.4f\t%d\n", p.variant.c_str(), p.config.bpe_merges,
                      p.config.hidden_size, p.param_count, p.best_valid_bleu, p.failed ? 1 : 0);
        tsv += buf;
    }
    write_file(path_join(out_dir, "scatter.tsv"), tsv);
    return points;
}

// ---------------------------------------------------------------------------
// Tables and curves
// ---------------------------------------------------------------------------

// Scans <results>/cells/*/row.json (+ per-trial metrics.tsv) and emits
// table1/table2/table3/curves TSVs plus a markdown summary under
// <results>/report. Missing cells leave gaps rather than failing.
inline void emit_tables_and_curves(const std::string& results_dir) {
    namespace fs = std::filesystem;
    std::string report_dir = path_join(results_dir, "report");
    ensure_dir(report_dir);

    std::vector<nlohmann::json> rows;
    std::string cells_dir = path_join(results_dir, "cells");
    if (fs::exists(cells_dir))
        for (const auto& entry : fs::directory_iterator(cells_dir)) {
            auto row_path = path_join(entry.path().string(), "row.json");
            if (fs::exists(row_path)) rows.push_back(nlohmann::json::parse(read_file(row_path)));
        }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        return std::tie(a.at("dataset").template get_ref<const std::string&>(),
                        a.at("size").template get_ref<const std::string&>()) <
               std::tie(b.at("dataset").template get_ref<const std::string&>(),
                        b.at("size").template get_ref<const std::string&>());
    });

    // table1: per-trial test BLEU for SMALL students with dropout
    {
        std::string tsv = "dataset\ttrial_1\ttrial_2\ttrial_3\tavg\n";
        for (const auto& r : rows) {
            if (r.at("size") != "SMALL" || r.at("dropout") != true) continue;
            tsv += r.at("dataset").get<std::string>();
            size_t n = 0;
            for (const auto& t : r.at("trials")) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), "\t%.2f", t.at("test_bleu").get<double>());
                tsv += t.at("failed").get<bool>() ? "\t-" : buf;
                ++n;
            }
            for (; n < 3; ++n) tsv += "\t-";
            char buf[32];
            std::snprintf(buf, sizeof(buf), "\t%.2f\n", r.at("mean_bleu").get<double>());
            tsv += buf;
        }
        write_file(path_join(report_dir, "table1.tsv"), tsv);
    }

    // table2: corpus statistics per dataset (target side, pre-BPE words)
    {
        std::string tsv = "name\tavg_tokens\tvocab_size\n";
        std::string data_dir = path_join(results_dir, "data");
        if (fs::exists(data_dir))
            for (const char* name : {"base", "kd", "bt", "best2", "valid", "test"}) {
                auto src = path_join(data_dir, std::string(name) + ".src");
                if (!fs::exists(src)) continue;
                auto loaded = load_bitext(src, path_join(data_dir, std::string(name) + ".trg"), name);
                auto st = corpus_stats(loaded.bitext);
                tsv += std::string(name) + "\t" + std::to_string(st.total_tokens) + "\t" +
                       std::to_string(st.vocab_size) + "\n";
            }
        write_file(path_join(report_dir, "table2.tsv"), tsv);
    }

    // table3: mean BLEU and train PPL per (dataset, size, dropout)
    {
        std::string tsv = "dataset\tsize\tdropout\tmean_bleu\tmean_train_ppl\tcomplete\n";
        for (const auto& r : rows) {
            char buf[256];
            std::snprintf(buf, sizeof(buf), "%s\t%s\t%s\t%.2f\t%.2f\t%s\n", r.at("dataset").get<std::string>().c_str(),
                          r.at("size").get<std::string>().c_str(), r.at("dropout").get<bool>() ? "on" : "off",
                          r.at("mean_bleu").get<double>(), r.at("mean_train_ppl").get<double>(),
                          r.at("complete").get<bool>() ? "yes" : "INCOMPLETE");
            tsv += buf;
        }
        write_file(path_join(report_dir, "table3.tsv"), tsv);
    }

    // curves: every checkpoint of every trial of every cell
    {
        std::string tsv = "cell\ttrial\tcheckpoint\tupdates\ttrain_loss\tvalid_ppl\tvalid_bleu\tlr\n";
        if (fs::exists(cells_dir))
            for (const auto& entry : fs::directory_iterator(cells_dir)) {
                for (const auto& sub : fs::directory_iterator(entry.path())) {
                    if (!sub.is_directory()) continue;
                    auto metrics = path_join(sub.path().string(), "metrics.tsv");
                    if (!fs::exists(metrics)) continue;
                    std::ifstream is(metrics);
                    std::string line;
                    std::getline(is, line); // header
                    while (std::getline(is, line)) {
                        // strip the wall-seconds column: it is not part of the
                        // deterministic record
                        auto last_tab = line.rfind('\t');
                        tsv += entry.path().filename().string() + "\t" + sub.path().filename().string() + "\t" +
                               line.substr(0, last_tab) + "\n";
                    }
                }
            }
        write_file(path_join(report_dir, "curves.tsv"), tsv);
    }

    // markdown summary with the convergence-speed statistic
    {
        std::string md = "# Experiment report\n\n";
        md += "| dataset | size | dropout | mean BLEU | mean train PPL | convergence ckpt (per trial) |\n";
        md += "|---|---|---|---|---|---|\n";
        for (const auto& r : rows) {
            std::string conv;
            for (const auto& t : r.at("trials"))
                conv += (conv.empty() ? "" : ", ") + std::to_string(t.at("convergence_checkpoint").get<size_t>());
            char buf[512];
            std::snprintf(buf, sizeof(buf), "| %s | %s | %s | %.2f | %.2f | %s |\n",
                          r.at("dataset").get<std::string>().c_str(), r.at("size").get<std::string>().c_str(),
                          r.at("dropout").get<bool>() ? "on" : "off", r.at("mean_bleu").get<double>(),
                          r.at("mean_train_ppl").get<double>(), conv.c_str());
            md += buf;
        }
        if (rows.empty()) md += "\n(no completed cells found)\n";
        write_file(path_join(report_dir, "summary.md"), md);
    }
}

} // namespace distillforge
